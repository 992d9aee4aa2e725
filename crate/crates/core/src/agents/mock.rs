//! Scripted chat model for tests and offline runs.
//!
//! A script is an ordered list of rules; the first rule whose matchers all
//! hold against the request transcript supplies the response. Responses
//! depend only on the transcript, so identical requests always get
//! identical answers regardless of call order.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::llm::{ChatRequest, ChatResponse, LlmClient, TokenAlternative, TokenLogprob};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub name: String,
    /// Every string must occur in the transcript.
    #[serde(default)]
    pub contains: Vec<String>,
    /// No string may occur in the transcript.
    #[serde(default)]
    pub not_contains: Vec<String>,
    /// Optional regex that must match the transcript.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matches: Option<String>,
    pub response: String,
    /// Log-probabilities of next-token alternatives for the first output token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<BTreeMap<String, f64>>,
}

impl MockRule {
    pub fn new(contains: &[&str], response: impl Into<String>) -> Self {
        Self {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            response: response.into(),
            ..Default::default()
        }
    }

    pub fn unless(mut self, not_contains: &[&str]) -> Self {
        self.not_contains
            .extend(not_contains.iter().map(|s| s.to_string()));
        self
    }

    pub fn with_logprobs(mut self, alts: &[(&str, f64)]) -> Self {
        self.top_logprobs = Some(alts.iter().map(|(t, l)| (t.to_string(), *l)).collect());
        self
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub struct ScriptedLlm {
    rules: Vec<(MockRule, Option<Regex>)>,
    default: Option<String>,
}

impl ScriptedLlm {
    pub fn new(script: MockScript) -> Result<Self> {
        let rules = script
            .rules
            .into_iter()
            .map(|r| {
                let re = r
                    .matches
                    .as_deref()
                    .map(Regex::new)
                    .transpose()
                    .map_err(|e| Error::Config(format!("mock rule {:?}: {e}", r.name)))?;
                Ok((r, re))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            rules,
            default: script.default,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(MockScript::load(path)?)
    }

    fn respond(rule: &MockRule) -> ChatResponse {
        let logprobs = rule.top_logprobs.as_ref().map(|alts| {
            let mut top: Vec<TokenAlternative> = alts
                .iter()
                .map(|(t, l)| TokenAlternative {
                    token: t.clone(),
                    logprob: *l,
                })
                .collect();
            top.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.token.cmp(&b.token)));
            let first = top.first().cloned().unwrap_or(TokenAlternative {
                token: rule.response.clone(),
                logprob: 0.0,
            });
            vec![TokenLogprob {
                token: first.token,
                logprob: first.logprob,
                top_logprobs: top,
            }]
        });
        ChatResponse {
            text: rule.response.clone(),
            logprobs,
        }
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        let transcript = req.transcript();
        for (rule, re) in &self.rules {
            let hit = rule.contains.iter().all(|s| transcript.contains(s.as_str()))
                && !rule.not_contains.iter().any(|s| transcript.contains(s.as_str()))
                && re.as_ref().is_none_or(|re| re.is_match(&transcript));
            if hit {
                return Ok(Self::respond(rule));
            }
        }
        match &self.default {
            Some(text) => Ok(ChatResponse::text(text.clone())),
            None => Err(Error::protocol(format!(
                "no mock rule matches request ending in {:?}",
                req.last_user().chars().rev().take(80).collect::<String>().chars().rev().collect::<String>()
            ))),
        }
    }
}

/// Randomized replies for every role, some deliberately malformed.
///
/// The reply is a pure function of the seed and the transcript, so runs are
/// reproducible even when calls race.
#[derive(Debug, Clone)]
pub struct ChaosLlm {
    pub seed: u64,
    /// Probability that a reply is unparseable garbage.
    pub garbage_rate: f64,
    pub sentences: Vec<String>,
}

const CHAOS_SENTENCES: &[&str] = &[
    "I can't believe it worked.",
    "You cannot park here.",
    "We won't be late.",
    "The mutex guards the queue.",
    "He snapped the padlock shut.",
    "Heavy rain fell all night.",
    "A light drizzle started.",
    "She left for Paris.",
    "Turn the key in the lock.",
    "The cat slept on the mat.",
];

const CHAOS_WORDS: &[&str] = &[
    "contractions", "negation", "locks", "weather", "punctuation", "verbs", "places", "storms",
    "threads", "doors",
];

impl ChaosLlm {
    pub fn new(seed: u64, garbage_rate: f64) -> Self {
        Self {
            seed,
            garbage_rate,
            sentences: CHAOS_SENTENCES.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn rng(&self, transcript: &str) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(transcript.as_bytes());
        rand_chacha::ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn phrase(&self, rng: &mut impl rand::Rng) -> String {
        let a = CHAOS_WORDS[rng.random_range(0..CHAOS_WORDS.len())];
        let b = CHAOS_WORDS[rng.random_range(0..CHAOS_WORDS.len())];
        format!("tokens about {a} near {b}")
    }

    fn sentence(&self, rng: &mut impl rand::Rng) -> String {
        self.sentences[rng.random_range(0..self.sentences.len())].clone()
    }
}

impl LlmClient for ChaosLlm {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        use rand::Rng;
        let t = req.transcript();
        let mut rng = self.rng(&t);
        if rng.random_bool(self.garbage_rate.clamp(0.0, 1.0)) && !t.contains("[HYPOTHESIS LIST]") {
            return Ok(ChatResponse::text("I am not sure what you mean."));
        }
        let text = if t.contains("[HYPOTHESIS LIST]") {
            let n = t.lines().filter(|l| l.starts_with("Hypothesis_")).count().max(1);
            (1..=n)
                .map(|i| format!("Hypothesis_{i}: {}", self.phrase(&mut rng)))
                .collect::<Vec<_>>()
                .join("\n")
        } else if t.contains("Need more testing: [YES / NO]") {
            if rng.random_bool(0.5) {
                let k = rng.random_range(1..=3);
                let tests: Vec<String> = (0..k)
                    .map(|_| {
                        format!(
                            "- H{}: Test a context: \"{}\"",
                            rng.random_range(1..=5),
                            self.sentence(&mut rng)
                        )
                    })
                    .collect();
                format!("REVIEW SUMMARY:\nmixed\n\nNeed more testing: [YES]\n{}", tests.join("\n"))
            } else {
                format!(
                    "REVIEW SUMMARY:\ndone\n\nNeed more testing: [NO]\nFINAL EXPLANATION: {}",
                    self.phrase(&mut rng)
                )
            }
        } else if t.contains("TEST SENTENCE:") {
            match rng.random_range(0..5) {
                0 => "VERDICT: ACCEPT\nRATIONALE: fits".to_string(),
                1 => "VERDICT: REJECT\nRATIONALE: no".to_string(),
                2 => format!("VERDICT: REFINE\nREFINED: {}\nRATIONALE: partial", self.phrase(&mut rng)),
                3 => format!("VERDICT: REFUTE\nNEXT_TEST: {}\nRATIONALE: odd", self.phrase(&mut rng)),
                // Missing its required field.
                _ => "VERDICT: REFINE\nRATIONALE: partial".to_string(),
            }
        } else if t.contains("TEST: <one sentence") {
            format!("TEST: {}\nPREDICTION: some token", self.sentence(&mut rng))
        } else if t.contains("Answer with a single number") {
            let v = rng.random_range(0..=10u32);
            return Ok(ChatResponse {
                text: v.to_string(),
                logprobs: Some(vec![TokenLogprob {
                    token: v.to_string(),
                    logprob: -0.1,
                    top_logprobs: vec![TokenAlternative {
                        token: v.to_string(),
                        logprob: -0.1,
                    }],
                }]),
            });
        } else if let Some(n) = t
            .split("Write ")
            .nth(1)
            .and_then(|r| r.split_whitespace().next())
            .and_then(|n| n.parse::<usize>().ok())
        {
            (1..=n)
                .map(|i| format!("{i}. {}", self.sentence(&mut rng)))
                .collect::<Vec<_>>()
                .join("\n")
        } else {
            return Err(Error::protocol("chaos model cannot classify the request"));
        };
        Ok(ChatResponse::text(text))
    }
}
