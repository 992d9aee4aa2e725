//! Offline demonstration world: a toy model with three planted features and
//! a scripted chat model that explains them.
//!
//! | index | fires on                                   | story                      |
//! |-------|--------------------------------------------|----------------------------|
//! | 3     | `can't` (8.0), `cannot` (4.0)              | one facet, one distractor  |
//! | 7     | `mutex`/`semaphore` (8.0), `padlock`/`deadbolt` (7.0), `lock` (3.0) | two facets |
//! | 12    | `rain`/`snow`/`storm` (7.0), `drizzle` (3.0) | one facet, quick           |
//!
//! The script keys every reply on text that only one prompt contains
//! (hypothesis ids with their text, test sentences, review round), so
//! replies do not depend on call order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::agents::mock::{MockRule, MockScript};
use crate::backend::ToyWorld;
use crate::error::Result;
use crate::profile::FeatureRef;
use crate::toy::{planted_fixture, PlantedFeature};

pub const MODEL_ID: &str = "toy-lm";
pub const SAE_ID: &str = "toy-sae";
pub const CANT: u32 = 3;
pub const LOCK: u32 = 7;
pub const WEATHER: u32 = 12;

const D_MODEL: usize = 24;
const D_SAE: usize = 48;
const BASE_DIM: usize = 16;
const SEED: u64 = 20240917;

pub const CANT_EXPLANATION: &str =
    "The English contraction can't: fires on the token can't, weakly on cannot, and not on other n't contractions.";
pub const LOCK_EXPLANATION: &str = "Locking constructs in two settings: synchronization primitives in code \
(mutex, semaphore) and physical locks (padlock, deadbolt).";
pub const WEATHER_EXPLANATION: &str = "Precipitation and storm words: rain, snow and storm.";

pub fn feature(index: u32, layer: u32) -> FeatureRef {
    FeatureRef::new(MODEL_ID, SAE_ID, layer, index)
}

/// The three demo features, `can't` and `lock` at layer 3 and weather at layer 7.
pub fn features() -> Vec<FeatureRef> {
    vec![feature(CANT, 3), feature(LOCK, 3), feature(WEATHER, 7)]
}

const CORPUS: &[&str] = &[
    // can't
    "I can't believe it is already Friday.",
    "She can't find her keys anywhere.",
    "We can't stay long tonight.",
    "You can't park here after six.",
    "They can't hear you from the back.",
    "He can't decide which shirt to wear.",
    "The baby can't sleep without music.",
    "I can't remember his name.",
    "Dogs can't eat chocolate safely.",
    "We can't afford a new car.",
    "She said she can't come.",
    "You can't be serious.",
    "Why can't we leave now?",
    "Can't you see the sign?",
    "The printer cannot read this file.",
    "Visitors cannot enter the lab.",
    "Fish cannot survive out of water.",
    // locks
    "Acquire the mutex before touching the buffer.",
    "The mutex is released at the end of scope.",
    "Each worker waits on the semaphore.",
    "A poisoned mutex signals a panic.",
    "Signal the semaphore when the slot frees up.",
    "Wrap the counter in a mutex.",
    "He bought a padlock for the gate.",
    "The padlock rusted shut.",
    "Install a deadbolt on the front door.",
    "The deadbolt clicked into place.",
    "A brass padlock hung on the shed.",
    "She checked the deadbolt twice.",
    "Remember to lock the door.",
    "The lock on the gate was broken.",
    "Turn the key to lock it.",
    // weather
    "Heavy snow closed the mountain pass.",
    "The storm knocked out power overnight.",
    "We waited for the rain to stop.",
    "Snow covered the whole village.",
    "A storm is moving in from the west.",
    "The rain lasted all weekend.",
    "Fresh snow fell before dawn.",
    "The storm flooded the harbor.",
    "Cold rain soaked the crowd.",
    "Kids built forts in the snow.",
    "The storm passed by noon.",
    "Wet snow clung to the wires.",
    "Light drizzle kept the streets damp.",
    "A fine drizzle started at dusk.",
    "Morning drizzle turned to fog.",
    // neutral
    "The train leaves at seven.",
    "She painted the kitchen blue.",
    "Our team won the final match.",
    "He reads a book every week.",
    "The museum opens on Monday.",
    "Bread tastes best when warm.",
    "They planted tomatoes in May.",
    "The river runs past the old mill.",
];

pub fn world() -> Result<ToyWorld> {
    let planted = [
        PlantedFeature::new(CANT as usize, &[("can't", 8.0), ("cannot", 4.0)]),
        PlantedFeature::new(
            LOCK as usize,
            &[("mutex|semaphore", 8.0), ("padlock|deadbolt", 7.0), ("lock", 3.0)],
        ),
        PlantedFeature::new(WEATHER as usize, &[("rain|snow|storm", 7.0), ("drizzle", 3.0)]),
    ];
    // 7 planted rules leave one spare axis above the base coordinates.
    let (model, sae) = planted_fixture(D_MODEL, D_SAE, BASE_DIM, SEED, &planted)?;
    Ok(ToyWorld {
        model_id: MODEL_ID.into(),
        sae_id: SAE_ID.into(),
        layers: vec![],
        sae,
        model,
        corpus: CORPUS.iter().map(|s| s.to_string()).collect(),
        dashboards: BTreeMap::new(),
    })
}

fn design(hyp_prefix: &str, sentence: &str, prediction: &str) -> MockRule {
    MockRule {
        name: format!("design {hyp_prefix}"),
        contains: vec![hyp_prefix.to_string(), "TEST: <one sentence".into()],
        response: format!("TEST: {sentence}\nPREDICTION: {prediction}\n"),
        ..Default::default()
    }
}

fn analyze(sentence: &str, reply: &str) -> MockRule {
    MockRule {
        name: format!("analyze {sentence}"),
        contains: vec![format!("TEST SENTENCE: {sentence}\n")],
        response: reply.to_string(),
        ..Default::default()
    }
}

fn review(round: u32, key: &str, reply: &str) -> MockRule {
    MockRule {
        name: format!("review {key} round {round}"),
        contains: vec![
            "Need more testing: [YES / NO]".into(),
            format!("This is review round {round} of"),
            key.to_string(),
        ],
        response: reply.to_string(),
        ..Default::default()
    }
}

fn init(exemplar_text: &str, reply: &str) -> MockRule {
    MockRule {
        name: format!("init {exemplar_text}"),
        contains: vec!["[HYPOTHESIS LIST]".into(), format!("text: {exemplar_text}\n")],
        response: reply.to_string(),
        ..Default::default()
    }
}

fn generate(explanation: &str, sentences: &[&str]) -> MockRule {
    let body = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    MockRule {
        name: "generate".into(),
        contains: vec![format!("described as:\n\n{explanation}\n"), "numbered".into()],
        response: body,
        ..Default::default()
    }
}

/// Simulator reply for target tokens matching `token_re` under `explanation`.
fn simulate(explanation: &str, token_re: &str, levels: &[(&str, f64)]) -> MockRule {
    let top = levels.iter().map(|(t, l)| (t.to_string(), *l)).collect();
    MockRule {
        name: format!("simulate {token_re}"),
        contains: vec![format!("described as:\n\n{explanation}\n"), "Answer with a single number".into()],
        matches: Some(format!(r#"token \d+ \("(?i:{token_re})"\)\?"#)),
        response: levels[0].0.to_string(),
        top_logprobs: Some(top),
        ..Default::default()
    }
}

fn cant_rules() -> Vec<MockRule> {
    let init_reply = "OBSERVATION:\n\
- Pattern 1: every exemplar peaks on the token \"can't\"\n\
- Common elements: the negative contraction can't\n\n\
[HYPOTHESIS LIST]:\n\
Hypothesis_1: English 'can't' contraction suffix detector\n\
Hypothesis_2: all n't contractions\n\
Hypothesis_3: negative control: the plain modal 'can' without negation\n\
Hypothesis_4: negation words such as not and never\n";
    vec![
        init(CORPUS[0], init_reply),
        design("HYPOTHESIS H1 (turn 1): English 'can't'", "She can't swim.", "\"can't\" near the exemplar peak"),
        design("HYPOTHESIS H2 (turn 1): all n't", "They won't stop talking.", "\"won't\" strongly"),
        design("HYPOTHESIS H3 (turn 1): negative control: the plain modal", "I can swim well.", "nothing fires"),
        design("HYPOTHESIS H4 (turn 1): negation words", "She never swims at night.", "\"never\" strongly"),
        design(
            "HYPOTHESIS H2 (turn 2): negative contractions ending in n't",
            "We don't know yet.",
            "\"don't\" strongly",
        ),
        analyze(
            "She can't swim.",
            "VERDICT: ACCEPT\nRATIONALE: The peak sits on \"can't\" at the exemplar level.\n",
        ),
        analyze(
            "They won't stop talking.",
            "VERDICT: REFINE\nREFINED: negative contractions ending in n't, such as don't and won't\n\
RATIONALE: \"won't\" stayed silent; narrow the claim and test don't.\n",
        ),
        analyze(
            "We don't know yet.",
            "VERDICT: REFINE\nREFINED: n't contractions in questions\n\
RATIONALE: \"don't\" was silent as well.\n",
        ),
        analyze(
            "I can swim well.",
            "VERDICT: REJECT\nRATIONALE: Plain \"can\" does not fire, as a negative control should.\n",
        ),
        analyze(
            "She never swims at night.",
            "VERDICT: REJECT\nRATIONALE: \"never\" produced no activation.\n",
        ),
        review(
            1,
            "English 'can't' contraction suffix detector",
            &format!(
                "REVIEW SUMMARY:\nH1 accepted on a strong test; the other hypotheses were rejected.\n\n\
ASSESSMENT:\nOther n't contractions and plain can stay silent, so H1 is specific.\n\n\
DECISION:\nNeed more testing: NO\n\nFINAL EXPLANATION: {CANT_EXPLANATION}\n"
            ),
        ),
        generate(
            CANT_EXPLANATION,
            &[
                "I can't open this jar.",
                "She can't stop laughing.",
                "We can't see the stage.",
                "You can't take photos here.",
                "He can't swim yet.",
                "They can't agree on dinner.",
                "I can't hear the radio.",
                "The cat can't reach the shelf.",
                "Why can't it work?",
                "Students cannot use phones.",
            ],
        ),
        simulate(CANT_EXPLANATION, "can't", &[("10", -0.05), ("9", -3.0)]),
        simulate(CANT_EXPLANATION, "cannot", &[("5", -0.3), ("4", -1.4)]),
    ]
}

fn lock_rules() -> Vec<MockRule> {
    let init_reply = "OBSERVATION:\n\
- Pattern 1: peaks on \"mutex\" and \"semaphore\" in code comments\n\
- Pattern 2: peaks on \"padlock\" and \"deadbolt\" in everyday text\n\n\
[HYPOTHESIS LIST]:\n\
Hypothesis_1: code synchronization constructs such as mutex and semaphore\n\
Hypothesis_2: physical locking devices such as padlocks and deadbolts\n\
Hypothesis_3: negative control: locks of hair\n\
Hypothesis_4: programming keywords in general\n";
    vec![
        init(CORPUS[17], init_reply),
        design(
            "HYPOTHESIS H1 (turn 1): code synchronization",
            "The mutex guards the shared queue.",
            "\"mutex\" at the exemplar level",
        ),
        design("HYPOTHESIS H2 (turn 1): physical locking", "He snapped the padlock shut.", "\"padlock\" strongly"),
        design("HYPOTHESIS H3 (turn 1): negative control: locks", "Her golden locks shone brightly.", "nothing fires"),
        design("HYPOTHESIS H4 (turn 1): programming keywords", "The function returns None early.", "\"None\" strongly"),
        design("HYPOTHESIS H4 (turn 2): programming keywords", "The while loop exits early.", "\"while\" strongly"),
        analyze(
            "The mutex guards the shared queue.",
            "VERDICT: ACCEPT\nRATIONALE: \"mutex\" reached the exemplar maximum.\n",
        ),
        analyze(
            "He snapped the padlock shut.",
            "VERDICT: ACCEPT\nRATIONALE: \"padlock\" fired strongly outside any code context.\n",
        ),
        analyze(
            "Her golden locks shone brightly.",
            "VERDICT: REJECT\nRATIONALE: Hair locks stay silent.\n",
        ),
        analyze(
            "The function returns None early.",
            "VERDICT: REFUTE\nNEXT_TEST: a control-flow keyword with no locking nearby\n\
RATIONALE: No activation on None; check another keyword before giving up.\n",
        ),
        analyze(
            "The while loop exits early.",
            "VERDICT: REFUTE\nNEXT_TEST: a keyword inside a longer code snippet\n\
RATIONALE: Still silent.\n",
        ),
        analyze(
            "She left for Paris.",
            "VERDICT: REJECT\nRATIONALE: No activation, as expected for a negative control.\n",
        ),
        review(
            1,
            "code synchronization constructs such as mutex",
            "REVIEW SUMMARY:\nH1 and H2 accepted; H3 and H4 rejected.\n\n\
ASSESSMENT:\nH1 lacks a negative control on plain prose.\n\n\
DECISION:\nNeed more testing: YES\n\
- H1: Test negative control: \"She left for Paris.\"\n",
        ),
        review(
            2,
            "code synchronization constructs such as mutex",
            &format!(
                "REVIEW SUMMARY:\nThe negative control stayed silent.\n\n\
DECISION:\nNeed more testing: NO\n\nFINAL EXPLANATION: {LOCK_EXPLANATION}\n"
            ),
        ),
        generate(
            LOCK_EXPLANATION,
            &[
                "Lock the mutex before reading.",
                "The semaphore limits open connections.",
                "A padlock secured the locker.",
                "The deadbolt would not turn.",
                "Release the mutex on every path.",
                "Two threads share one semaphore.",
                "He cut the padlock off.",
                "Check the deadbolt before bed.",
                "The mutex protects the map.",
                "Keep the lock held briefly.",
            ],
        ),
        simulate(LOCK_EXPLANATION, "mutex|semaphore", &[("10", -0.05), ("9", -3.0)]),
        simulate(LOCK_EXPLANATION, "padlock|deadbolt", &[("9", -0.2), ("8", -1.7)]),
        simulate(LOCK_EXPLANATION, "lock", &[("4", -0.4), ("3", -1.1)]),
    ]
}

fn weather_rules() -> Vec<MockRule> {
    let init_reply = "OBSERVATION:\n\
- Pattern 1: peaks on rain, snow and storm\n\n\
[HYPOTHESIS LIST]:\n\
Hypothesis_1: precipitation and storm words such as rain, snow and storm\n\
Hypothesis_2: negative control: descriptions of clear sunny weather\n\
Hypothesis_3: outdoor activities\n\
Hypothesis_4: words about water in general\n";
    vec![
        init(CORPUS[32], init_reply),
        design("HYPOTHESIS H1 (turn 1): precipitation", "Heavy rain flooded the street.", "\"rain\" strongly"),
        design("HYPOTHESIS H2 (turn 1): negative control: descriptions", "The sky was clear and sunny.", "nothing"),
        design("HYPOTHESIS H3 (turn 1): outdoor", "We hiked up the hill.", "\"hiked\" strongly"),
        design("HYPOTHESIS H4 (turn 1): words about water", "She poured water into the glass.", "\"water\""),
        analyze("Heavy rain flooded the street.", "VERDICT: ACCEPT\nRATIONALE: \"rain\" fired strongly.\n"),
        analyze("The sky was clear and sunny.", "VERDICT: REJECT\nRATIONALE: Silent, as expected.\n"),
        analyze("We hiked up the hill.", "VERDICT: REJECT\nRATIONALE: No activation.\n"),
        analyze("She poured water into the glass.", "VERDICT: REJECT\nRATIONALE: \"water\" is silent.\n"),
        review(
            1,
            "precipitation and storm words",
            &format!(
                "REVIEW SUMMARY:\nOnly H1 survived.\n\nDECISION:\nNeed more testing: NO\n\n\
FINAL EXPLANATION: {WEATHER_EXPLANATION}\n"
            ),
        ),
        generate(
            WEATHER_EXPLANATION,
            &[
                "Rain fell all night.",
                "The snow was knee deep.",
                "A storm hit the coast.",
                "We ran through the rain.",
                "Snow blocked the road.",
                "The storm scared the dog.",
                "Rain tapped on the roof.",
                "Snow melted by noon.",
                "The storm lasted two days.",
                "Drizzle dampened the picnic.",
            ],
        ),
        simulate(WEATHER_EXPLANATION, "rain|snow|storm", &[("9", -0.1), ("10", -2.5)]),
        simulate(WEATHER_EXPLANATION, "drizzle", &[("4", -0.3), ("5", -1.4)]),
    ]
}

/// Any simulator question not covered by a rule above: the token is quiet.
fn quiet_simulator() -> MockRule {
    MockRule {
        name: "simulate quiet".into(),
        contains: vec!["Answer with a single number".into()],
        response: "0".into(),
        top_logprobs: Some([("0".to_string(), -0.02), ("1".to_string(), -4.0)].into_iter().collect()),
        ..Default::default()
    }
}

pub fn script() -> MockScript {
    let mut rules = cant_rules();
    rules.extend(lock_rules());
    rules.extend(weather_rules());
    rules.push(quiet_simulator());
    MockScript { rules, default: None }
}

/// Paths written by [`write`].
#[derive(Debug, Clone)]
pub struct DemoFiles {
    pub world: PathBuf,
    pub script: PathBuf,
    pub config: PathBuf,
}

/// Writes `world.json`, `script.json` and a mock-mode `config.json` into `dir`.
pub fn write(dir: &Path) -> Result<DemoFiles> {
    std::fs::create_dir_all(dir)?;
    let files = DemoFiles {
        world: dir.join("world.json"),
        script: dir.join("script.json"),
        config: dir.join("config.json"),
    };
    world()?.save(&files.world)?;
    script().save(&files.script)?;
    let config = json!({
        "features": features(),
        "eval": {"n_sentences": 10, "per_stratum": 2, "seed": 7},
        "backend": {"kind": "toy", "world": "world.json"},
        "llm": {"kind": "mock", "script": "script.json"},
        "output_dir": "results",
        "parallelism": 2,
        "mode": "mock"
    });
    std::fs::write(&files.config, serde_json::to_string_pretty(&config)?)?;
    Ok(files)
}
