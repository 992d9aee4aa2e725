//! Prompt templates for the four agent roles plus the two evaluation prompts.
//!
//! Placeholders are written `{name}`; `{{` and `}}` produce literal braces.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateName {
    /// Explainer: initial hypotheses from exemplars.
    Init,
    /// Designer: one test sentence for a hypothesis.
    Test,
    /// Analyzer: verdict on one measured test.
    Analyze,
    /// Reviewer: review round and synthesis.
    Synthesize,
    /// Evaluation: sentences generated from an explanation.
    Generate,
    /// Evaluation: per-token activation simulator.
    Simulate,
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: &'static str,
    required: BTreeSet<String>,
}

enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Slot(&'a str),
}

fn pieces(body: &str) -> Result<Vec<Piece<'_>>> {
    let mut out = Vec::new();
    let bytes = body.as_bytes();
    let (mut i, mut start) = (0, 0);
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' if bytes.get(i + 1) == Some(&bytes[i]) => {
                out.push(Piece::Text(&body[start..i]));
                out.push(Piece::Brace(bytes[i] as char));
                i += 2;
                start = i;
            }
            b'{' => {
                let close = body[i..]
                    .find('}')
                    .ok_or_else(|| Error::input("unterminated placeholder in template"))?;
                let name = &body[i + 1..i + close];
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(Error::input(format!("bad placeholder {{{name}}}")));
                }
                out.push(Piece::Text(&body[start..i]));
                out.push(Piece::Slot(name));
                i += close + 1;
                start = i;
            }
            b'}' => return Err(Error::input("unmatched '}' in template")),
            _ => i += 1,
        }
    }
    out.push(Piece::Text(&body[start..]));
    Ok(out)
}

impl PromptTemplate {
    pub fn new(name: TemplateName, body: &'static str) -> Result<Self> {
        let required = pieces(body)?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.to_string()),
                _ => None,
            })
            .collect();
        Ok(Self { name, body, required })
    }

    pub fn required_placeholders(&self) -> &BTreeSet<String> {
        &self.required
    }

    /// Substitutes every placeholder. Fails if any required one is unbound.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String> {
        let missing: Vec<&str> = self
            .required
            .iter()
            .filter(|r| !bindings.contains_key(r.as_str()))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::input(format!(
                "template {:?} missing bindings: {}",
                self.name,
                missing.join(", ")
            )));
        }
        let mut out = String::with_capacity(self.body.len() + 256);
        for piece in pieces(self.body)? {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Brace(c) => out.push(c),
                Piece::Slot(s) => out.push_str(&bindings[s]),
            }
        }
        Ok(out)
    }
}

pub fn template(name: TemplateName) -> PromptTemplate {
    let body = match name {
        TemplateName::Init => INIT,
        TemplateName::Test => TEST,
        TemplateName::Analyze => ANALYZE,
        TemplateName::Synthesize => SYNTHESIZE,
        TemplateName::Generate => GENERATE,
        TemplateName::Simulate => SIMULATE,
    };
    PromptTemplate::new(name, body).expect("built-in templates are well formed")
}

pub const SYSTEM_PROMPT: &str = "You are a careful interpretability researcher studying one \
feature of a sparse autoencoder trained on a language model's activations. Follow the \
requested output format exactly.";

const INIT: &str = r#"TASK
We ran the feature over a text corpus and kept the segments where it fires hardest.
Study them and propose {n_hypotheses} distinct, testable hypotheses about what the
feature responds to.

EXEMPLARS (highest activation first)
{exemplars_summary}

OUTPUT FORMAT
OBSERVATION:
- Pattern 1: <a pattern visible in the exemplars>
- Pattern 2: <another pattern>
- Common elements: <tokens or contexts shared across exemplars>

[HYPOTHESIS LIST]:
{hypothesis_slots}

GUIDELINES
- Look at which tokens carry the peak values, not only at the overall topic.
- Consider lexical cues (prefixes, suffixes, specific words), semantic domains and
  structural or formatting cues.
- Prefer narrow claims ("Python import statements") over broad ones ("code").
- Every hypothesis must be checkable by running a single sentence through the model.
- Include at least one negative control hypothesis: something the feature should
  NOT respond to.
- Begin every hypothesis line with "Hypothesis_<number>:" and keep it to one line.
"#;

const TEST: &str = r#"TASK
Design one test sentence for the hypothesis below. If the hypothesis is right, the
sentence should make the feature fire strongly on a token you can name.

HYPOTHESIS {hypothesis_id} (turn {turn}): {hypothesis}

EVIDENCE SO FAR
{evidence_summary}

ANALYST NOTE FOR THIS TEST
{refute_hint}

OUTPUT FORMAT
TEST: <one sentence, 3-30 words>
PREDICTION: <which token should activate and roughly how strongly>

Do not repeat a sentence that already appears in the evidence.
"#;

const ANALYZE: &str = r#"TASK
Decide what the measurement below means for the hypothesis.

HYPOTHESIS {hypothesis_id}: {hypothesis}
TEST SENTENCE: {test_text}
DESIGNER PREDICTION: {prediction}

MEASURED ACTIVATIONS (token : value)
{token_activations}

Peak in this test: {peak}
Peak over the top exemplars: {exemplar_max}

VERDICTS
- ACCEPT: strong activation where the hypothesis predicted it.
- REJECT: the hypothesis is contradicted or repeatedly fails to produce activation.
- REFINE: partial match; supply a corrected hypothesis.
- REFUTE: the result contradicts the prediction but the hypothesis is worth another
  probe; keep it unchanged and say what to test next.

OUTPUT FORMAT
VERDICT: <ACCEPT | REJECT | REFINE | REFUTE>
REFINED: <corrected hypothesis, only for REFINE>
NEXT_TEST: <what the next test should probe, only for REFUTE>
RATIONALE: <one or two sentences>
"#;

const SYNTHESIZE: &str = r#"TASK
Review every hypothesis together with its test results and decide whether more
testing is needed before writing the final explanation.

HYPOTHESES AND RESULTS
{hypotheses_summary}

OUTPUT FORMAT
REVIEW SUMMARY:
<short status of each hypothesis>

ASSESSMENT:
<is each hypothesis tested enough? gaps? contradictions between hypotheses?>

DECISION:
Need more testing: [YES / NO]

If YES, list extra tests one per line, exactly like:
- H1: Test negative control: "She left for Paris."
- H2: Test another context: "The mutex guards the queue."
Each line starts with "- H<number>:", the sentence is in double quotes, 3-10 words,
at most 3 tests per hypothesis.

If NO, end with:
FINAL EXPLANATION: <one paragraph describing what the feature detects, covering
each accepted behavior>

This is review round {review_round} of {max_review_rounds}. In the last round answer NO.
"#;

const GENERATE: &str = r#"TASK
Write {n_sentences} different sentences that should strongly activate a feature
described as:

{explanation}

Use only this description. Output one sentence per line, numbered "1." to "{n_sentences}.",
and nothing else.
"#;

const SIMULATE: &str = r#"TASK
A feature is described as:

{explanation}

Text tokens, one per line as index: token
{token_listing}

On a scale from 0 (silent) to 10 (maximal), how strongly does the feature fire on
token {target_index} ({target_token})? Answer with a single number from 0 to 10.
"#;
