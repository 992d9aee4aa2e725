//! Per-layer aggregation of feature metrics and the comparison table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{GenEvalReport, PredEvalReport};
use crate::profile::FeatureRef;

pub const FEATURE_FILE: &str = "feature.json";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const EXPLANATION_FILE: &str = "explanation.json";
pub const GENEVAL_FILE: &str = "geneval.json";
pub const PREDEVAL_FILE: &str = "predeval.json";
pub const STATE_FILE: &str = "state.json";

/// `<model>/<layer>/<index>` under the output root.
pub fn feature_dir(root: &Path, f: &FeatureRef) -> PathBuf {
    root.join(f.model_id.replace(['/', '\\'], "__"))
        .join(f.layer.to_string())
        .join(f.feature_index.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetrics {
    pub feature: FeatureRef,
    pub gen_accuracy: Option<f64>,
    pub pred_accuracy: Option<f64>,
}

impl FeatureMetrics {
    pub fn is_complete(&self) -> bool {
        self.gen_accuracy.is_some() && self.pred_accuracy.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub model_id: String,
    pub layer: u32,
    pub n_features: usize,
    pub gen_mean: Option<f64>,
    pub pred_mean: Option<f64>,
    /// Some feature in this row is missing a metric.
    pub incomplete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub rows: Vec<LayerRow>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    match serde_json::from_str(&text) {
        Ok(v) => Some(v),
        Err(e) => {
            tracing::warn!(path = %path.display(), error = %e, "unreadable result file");
            None
        }
    }
}

fn feature_from_path(root: &Path, dir: &Path) -> Option<FeatureRef> {
    let rel: Vec<String> = dir
        .strip_prefix(root)
        .ok()?
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    match rel.as_slice() {
        [model, layer, index] => Some(FeatureRef::new(
            model.clone(),
            "",
            layer.parse().ok()?,
            index.parse().ok()?,
        )),
        _ => None,
    }
}

fn is_result_dir(dir: &Path) -> bool {
    [FEATURE_FILE, EXPLANATION_FILE, GENEVAL_FILE, PREDEVAL_FILE]
        .iter()
        .any(|f| dir.join(f).is_file())
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if is_result_dir(dir) {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut children: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        walk(&c, out)?;
    }
    Ok(())
}

/// Reads every feature result directory below `root`.
pub fn collect_metrics(root: &Path) -> Result<Vec<FeatureMetrics>> {
    if !root.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", root.display())));
    }
    let mut dirs = Vec::new();
    walk(root, &mut dirs)?;
    let mut out = Vec::new();
    for dir in dirs {
        let feature = read_json::<FeatureRef>(&dir.join(FEATURE_FILE))
            .or_else(|| feature_from_path(root, &dir));
        let Some(feature) = feature else {
            tracing::warn!(dir = %dir.display(), "cannot identify feature; skipping");
            continue;
        };
        let gen = read_json::<GenEvalReport>(&dir.join(GENEVAL_FILE)).map(|r| r.accuracy);
        let pred = read_json::<PredEvalReport>(&dir.join(PREDEVAL_FILE)).and_then(|r| r.mean_rho);
        out.push(FeatureMetrics {
            feature,
            gen_accuracy: gen,
            pred_accuracy: pred,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no feature results under {}",
            root.display()
        )));
    }
    Ok(out)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Groups by `(model, layer)` and averages each metric over the features
/// that have it.
pub fn aggregate(method: &str, metrics: &[FeatureMetrics]) -> Report {
    let mut groups: BTreeMap<(String, u32), Vec<&FeatureMetrics>> = BTreeMap::new();
    for m in metrics {
        groups
            .entry((m.feature.model_id.clone(), m.feature.layer))
            .or_default()
            .push(m);
    }
    let rows = groups
        .into_iter()
        .map(|((model_id, layer), ms)| LayerRow {
            model_id,
            layer,
            n_features: ms.len(),
            gen_mean: mean(ms.iter().filter_map(|m| m.gen_accuracy)),
            pred_mean: mean(ms.iter().filter_map(|m| m.pred_accuracy)),
            incomplete: ms.iter().any(|m| !m.is_complete()),
        })
        .collect();
    Report {
        method: method.to_string(),
        rows,
    }
}

pub fn report(root: &Path, method: &str) -> Result<Report> {
    Ok(aggregate(method, &collect_metrics(root)?))
}

fn cell(v: Option<f64>, incomplete: bool) -> String {
    let mark = if incomplete { "*" } else { "" };
    match v {
        Some(x) => format!("{x:.2}{mark}"),
        None => format!("-{mark}"),
    }
}

impl Report {
    /// Markdown table: one row per layer, one `Layer | Gen. | Pred.` column
    /// group per model.
    pub fn render_table(&self) -> String {
        let models: Vec<&str> = {
            let mut m: Vec<&str> = self.rows.iter().map(|r| r.model_id.as_str()).collect();
            m.dedup();
            m.sort_unstable();
            m.dedup();
            m
        };
        let mut layers: Vec<u32> = self.rows.iter().map(|r| r.layer).collect();
        layers.sort_unstable();
        layers.dedup();

        let mut out = String::from("| Method |");
        for m in &models {
            out.push_str(&format!(" {m} Layer | {m} Gen. Acc. | {m} Pred. Acc. |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|---|---|".repeat(models.len()));
        out.push('\n');
        for layer in &layers {
            out.push_str(&format!("| {} |", self.method));
            for m in &models {
                match self.rows.iter().find(|r| r.model_id == *m && r.layer == *layer) {
                    Some(r) => out.push_str(&format!(
                        " {} | {} | {} |",
                        layer,
                        cell(r.gen_mean, r.incomplete),
                        cell(r.pred_mean, r.incomplete)
                    )),
                    None => out.push_str(" - | - | - |"),
                }
            }
            out.push('\n');
        }
        if self.rows.iter().any(|r| r.incomplete) {
            out.push_str("\n* incomplete: some features in this row are missing a metric\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(model: &str, layer: u32, idx: u32, g: Option<f64>, p: Option<f64>) -> FeatureMetrics {
        FeatureMetrics {
            feature: FeatureRef::new(model, "sae", layer, idx),
            gen_accuracy: g,
            pred_accuracy: p,
        }
    }

    #[test]
    fn layer_means() {
        let r = aggregate(
            "ours",
            &[
                m("b", 7, 1, Some(0.5), Some(0.25)),
                m("a", 3, 1, Some(1.0), Some(0.5)),
                m("a", 3, 2, Some(0.5), Some(1.0)),
                m("b", 7, 2, None, Some(0.75)),
            ],
        );
        assert_eq!(r.rows.len(), 2);
        assert_eq!((r.rows[0].model_id.as_str(), r.rows[0].layer), ("a", 3));
        assert_eq!(r.rows[0].gen_mean, Some(0.75));
        assert_eq!(r.rows[0].pred_mean, Some(0.75));
        assert!(!r.rows[0].incomplete);
        assert_eq!(r.rows[1].gen_mean, Some(0.5));
        assert_eq!(r.rows[1].pred_mean, Some(0.5));
        assert!(r.rows[1].incomplete);
        let t = r.render_table();
        assert!(t.starts_with("| Method | a Layer | a Gen. Acc. | a Pred. Acc. | b Layer |"));
        assert!(t.contains("| ours | 3 | 0.75 | 0.75 | - | - | - |"));
        assert!(t.contains("| ours | - | - | - | 7 | 0.50* | 0.50* |"));
    }

    #[test]
    fn feature_dir_layout() {
        let d = feature_dir(Path::new("/out"), &FeatureRef::new("google/gemma", "s", 3, 42));
        assert_eq!(d, PathBuf::from("/out/google__gemma/3/42"));
    }

    #[test]
    fn empty_root_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(collect_metrics(dir.path()), Err(Error::Config(_))));
    }
}
