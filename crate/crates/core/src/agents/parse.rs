//! Parsers for the agents' structured outputs, and renderers that emit the
//! same grammars (used by mocks and round-trip tests).

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypothesis::{Verdict, VerdictKind};

static HYPOTHESIS_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^[ \t]*[*\-]*[ \t]*Hypothesis_(\d+)\**[ \t]*:\**[ \t]*(.*?)[ \t]*$").unwrap());
static FIELD_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^[ \t]*\**(VERDICT|REFINED|NEXT_TEST|RATIONALE|TEST|PREDICTION)\**[ \t]*:\**[ \t]*(.*?)[ \t]*$").unwrap()
});
static NEED_MORE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^[ \t]*\**Need more testing\**[ \t]*:\**[ \t]*\[?[ \t]*(YES|NO)[ \t]*\]?\**[ \t]*$").unwrap());
static SUGGESTION_START: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*-\s*H\d*\s*:").unwrap());
static SUGGESTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"^\s*-\s*H(\d+)\s*:\s*(?:(.*?)\s*:\s*)?"([^"]+)"\s*$"#).unwrap());
static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:\d+[.)]|[-*])\s*(.+?)\s*$").unwrap());

/// `Hypothesis_<idx>: <text>` lines in order of appearance. Lines with an
/// empty text or a repeated index are dropped.
pub fn parse_hypotheses(output: &str) -> Vec<(u32, String)> {
    let mut seen = std::collections::BTreeSet::new();
    HYPOTHESIS_LINE
        .captures_iter(output)
        .filter_map(|c| {
            let idx: u32 = c[1].parse().ok()?;
            let text = c[2].trim().trim_matches('"').trim().to_string();
            (!text.is_empty() && seen.insert(idx)).then_some((idx, text))
        })
        .collect()
}

pub fn render_hypotheses(items: &[(u32, String)]) -> String {
    let mut out = String::from("[HYPOTHESIS LIST]:\n");
    for (idx, text) in items {
        out.push_str(&format!("Hypothesis_{idx}: {text}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignedTest {
    pub sentence: String,
    pub prediction: Option<String>,
}

/// Designer output: a `TEST:` line (required) and an optional `PREDICTION:` line.
pub fn parse_designed_test(output: &str) -> Result<DesignedTest> {
    let mut sentence = None;
    let mut prediction = None;
    for c in FIELD_LINE.captures_iter(output) {
        let value = c[2].trim().trim_matches('"').trim().to_string();
        match c[1].to_ascii_uppercase().as_str() {
            "TEST" if sentence.is_none() => sentence = Some(value),
            "PREDICTION" if prediction.is_none() => prediction = Some(value),
            _ => {}
        }
    }
    match sentence {
        Some(s) if !s.is_empty() => Ok(DesignedTest {
            sentence: s,
            prediction: prediction.filter(|p| !p.is_empty()),
        }),
        _ => Err(Error::protocol("designer output has no non-empty TEST: line")),
    }
}

pub fn render_designed_test(t: &DesignedTest) -> String {
    let mut out = format!("TEST: {}\n", t.sentence);
    if let Some(p) = &t.prediction {
        out.push_str(&format!("PREDICTION: {p}\n"));
    }
    out
}

/// Analyzer output: `VERDICT:` plus the conditional `REFINED:` / `NEXT_TEST:`
/// field and an optional `RATIONALE:`.
pub fn parse_verdict(output: &str) -> Result<Verdict> {
    let mut kind = None;
    let mut refined = None;
    let mut hint = None;
    let mut rationale = None;
    for c in FIELD_LINE.captures_iter(output) {
        let value = c[2].trim().to_string();
        match c[1].to_ascii_uppercase().as_str() {
            "VERDICT" if kind.is_none() => {
                let word = value.trim_matches(|ch: char| !ch.is_ascii_alphabetic());
                kind = Some(
                    VerdictKind::from_keyword(word)
                        .ok_or_else(|| Error::protocol(format!("unknown verdict {value:?}")))?,
                );
            }
            "REFINED" if refined.is_none() && !value.is_empty() => refined = Some(value),
            "NEXT_TEST" if hint.is_none() && !value.is_empty() => hint = Some(value),
            "RATIONALE" if rationale.is_none() => rationale = Some(value),
            _ => {}
        }
    }
    let kind = kind.ok_or_else(|| Error::protocol("analyzer output has no VERDICT: line"))?;
    // Keep only the field that belongs to the verdict; extra fields are noise.
    let verdict = Verdict {
        kind,
        refined_text: refined.filter(|_| kind == VerdictKind::Refine),
        next_test_hint: hint.filter(|_| kind == VerdictKind::Refute),
        rationale: rationale.unwrap_or_default(),
    };
    verdict.validate()?;
    Ok(verdict)
}

pub fn render_verdict(v: &Verdict) -> String {
    let mut out = format!("VERDICT: {}\n", v.kind.keyword());
    if let Some(r) = &v.refined_text {
        out.push_str(&format!("REFINED: {r}\n"));
    }
    if let Some(h) = &v.next_test_hint {
        out.push_str(&format!("NEXT_TEST: {h}\n"));
    }
    if !v.rationale.is_empty() {
        out.push_str(&format!("RATIONALE: {}\n", v.rationale));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestedTest {
    pub hypothesis_id: String,
    #[serde(default)]
    pub label: String,
    pub sentence: String,
}

/// Parsed reviewer output. `suggested_tests` is nonempty iff
/// `need_more_testing`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewerDecision {
    pub need_more_testing: bool,
    pub suggested_tests: Vec<SuggestedTest>,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_explanation: Option<String>,
}

const MAX_SUGGESTION_WORDS: usize = 30;

fn section(output: &str, header: &str) -> Option<String> {
    let lines: Vec<&str> = output.lines().collect();
    let start = lines
        .iter()
        .position(|l| l.trim().to_ascii_uppercase().starts_with(header))?;
    let first = lines[start].trim()[header.len()..].trim().to_string();
    let mut body = vec![first];
    for l in &lines[start + 1..] {
        let t = l.trim();
        let is_header = ["REVIEW SUMMARY:", "ASSESSMENT:", "DECISION:", "FINAL EXPLANATION:"]
            .iter()
            .any(|h| t.to_ascii_uppercase().starts_with(h))
            || NEED_MORE.is_match(t);
        if is_header {
            break;
        }
        body.push(t.to_string());
    }
    let text = body
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    (!text.is_empty()).then_some(text)
}

/// Reviewer output. Malformed suggestion lines are skipped with a warning;
/// `YES` with no usable suggestion is read as `NO`.
pub fn parse_review(output: &str) -> Result<ReviewerDecision> {
    let need = NEED_MORE
        .captures(output)
        .ok_or_else(|| Error::protocol("reviewer output has no 'Need more testing:' line"))?;
    let yes = need[1].eq_ignore_ascii_case("YES");
    let mut tests = Vec::new();
    if yes {
        for line in output.lines().filter(|l| SUGGESTION_START.is_match(l)) {
            match SUGGESTION.captures(line) {
                Some(c) => {
                    let sentence = c[3].trim().to_string();
                    let words = sentence.split_whitespace().count();
                    if (1..=MAX_SUGGESTION_WORDS).contains(&words) {
                        tests.push(SuggestedTest {
                            hypothesis_id: format!("H{}", &c[1]),
                            label: c.get(2).map_or("", |m| m.as_str()).trim().to_string(),
                            sentence,
                        });
                    } else {
                        tracing::warn!(line, "suggested test has {words} words, skipping");
                    }
                }
                None => tracing::warn!(line, "malformed suggested-test line, skipping"),
            }
        }
        if tests.is_empty() {
            tracing::warn!("reviewer asked for more testing without usable tests; treating as NO");
        }
    }
    Ok(ReviewerDecision {
        need_more_testing: !tests.is_empty(),
        suggested_tests: tests,
        summary: section(output, "REVIEW SUMMARY:").unwrap_or_default(),
        final_explanation: section(output, "FINAL EXPLANATION:"),
    })
}

pub fn render_review(d: &ReviewerDecision) -> String {
    let mut out = String::from("REVIEW SUMMARY:\n");
    if !d.summary.is_empty() {
        out.push_str(&d.summary);
        out.push('\n');
    }
    out.push_str("\nDECISION:\n");
    out.push_str(if d.need_more_testing {
        "Need more testing: YES\n"
    } else {
        "Need more testing: NO\n"
    });
    for t in &d.suggested_tests {
        if t.label.is_empty() {
            out.push_str(&format!("- {}: \"{}\"\n", t.hypothesis_id, t.sentence));
        } else {
            out.push_str(&format!("- {}: {}: \"{}\"\n", t.hypothesis_id, t.label, t.sentence));
        }
    }
    if let Some(f) = &d.final_explanation {
        out.push_str(&format!("\nFINAL EXPLANATION: {f}\n"));
    }
    out
}

/// Numbered or bulleted sentence list, as produced for generative evaluation.
pub fn parse_sentence_list(output: &str) -> Vec<String> {
    output
        .lines()
        .filter_map(|l| NUMBERED.captures(l))
        .map(|c| c[1].trim().trim_matches('"').trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}
