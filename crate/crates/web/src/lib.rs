//! Browser demo bindings. Each export takes and returns plain strings so the
//! page needs no glue beyond the generated module.
//!
//! States are typed as piles separated by `/`, each pile listing colors
//! bottom to top separated by commas: `red,blue/green`.

use serde::Serialize;
use thiserror::Error;
use wasm_bindgen::prelude::*;

use planlens::blocksworld::{optimal_plans, Color, Level, PlanInstance, Split, WorldState};
use planlens::figures;
use planlens::textgen::{render, Vocab};

/// Search depth in pick/stack pairs; covers every 6-block instance.
const MAX_MOVES: usize = 10;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("unknown color `{0}`")]
    UnknownColor(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("init and goal use different blocks")]
    BlockMismatch,
    #[error("no plan within {MAX_MOVES} moves")]
    Unreachable,
    #[error("the prompt viewer needs a plan of 2, 4 or 6 steps, this one has {0}")]
    UnsupportedLength(usize),
    #[error("{0}")]
    Other(String),
}

pub fn parse_state(text: &str) -> Result<WorldState, DemoError> {
    let mut piles = Vec::new();
    for pile in text.split('/').map(str::trim).filter(|p| !p.is_empty()) {
        let blocks = pile
            .split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(|c| Color::from_name(c).ok_or_else(|| DemoError::UnknownColor(c.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        piles.push(blocks);
    }
    WorldState::new(piles, None).map_err(|e| DemoError::State(e.to_string()))
}

fn problem(init: &str, goal: &str) -> Result<(WorldState, WorldState), DemoError> {
    let (a, b) = (parse_state(init)?, parse_state(goal)?);
    let (mut ca, mut cb) = (a.colors(), b.colors());
    ca.sort();
    cb.sort();
    if ca != cb {
        return Err(DemoError::BlockMismatch);
    }
    Ok((a, b))
}

#[derive(Serialize)]
struct PlanSet {
    steps: usize,
    plans: Vec<Vec<String>>,
}

/// All optimal plans as JSON `{steps, plans}`.
pub fn plan_json(init: &str, goal: &str) -> Result<String, DemoError> {
    let (a, b) = problem(init, goal)?;
    let plans = optimal_plans(&a, &b, MAX_MOVES);
    if plans.is_empty() {
        return Err(DemoError::Unreachable);
    }
    let out = PlanSet {
        steps: plans[0].len(),
        plans: plans
            .iter()
            .map(|p| p.iter().map(|a| a.text()).collect())
            .collect(),
    };
    Ok(serde_json::to_string(&out).expect("plain data serializes"))
}

#[derive(Serialize)]
struct ViewToken {
    word: String,
    chunk: Option<String>,
}

#[derive(Serialize)]
struct PromptView {
    step: usize,
    steps: usize,
    gold: String,
    tokens: Vec<ViewToken>,
}

/// Prompt for `step` of the first optimal plan, each token tagged with its chunk.
pub fn prompt_json(init: &str, goal: &str, step: usize) -> Result<String, DemoError> {
    let (a, b) = problem(init, goal)?;
    let plan = optimal_plans(&a, &b, MAX_MOVES)
        .into_iter()
        .next()
        .ok_or(DemoError::Unreachable)?;
    let level = Level::from_plan_len(plan.len()).ok_or(DemoError::UnsupportedLength(plan.len()))?;
    let instance = PlanInstance {
        id: "demo".into(),
        num_colors: a.colors().len(),
        level,
        init: a,
        goal: b,
        plan,
        split: Split::Test,
    };
    let vocab = Vocab::new();
    let prompt = render(&instance, step, &vocab).map_err(|e| DemoError::Other(e.to_string()))?;
    let tokens = prompt
        .tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| ViewToken {
            word: vocab.word(t).unwrap_or("?").to_string(),
            chunk: prompt
                .spans
                .iter()
                .find(|s| s.positions().contains(&i))
                .map(|s| s.kind.label()),
        })
        .collect();
    let gold = vocab.word(prompt.gold_token).unwrap_or("?").to_string();
    Ok(serde_json::to_string(&PromptView {
        step,
        steps: instance.plan.len(),
        gold,
        tokens,
    })
    .expect("plain data serializes"))
}

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub fn plan(init: &str, goal: &str) -> Result<String, JsValue> {
    plan_json(init, goal).map_err(js)
}

#[wasm_bindgen]
pub fn prompt(init: &str, goal: &str, step: usize) -> Result<String, JsValue> {
    prompt_json(init, goal, step).map_err(js)
}

/// SVG heatmap for a `step_t.csv` flow file.
#[wasm_bindgen]
pub fn flow_heatmap(csv: &str, title: &str) -> Result<String, JsValue> {
    figures::flow_figure(csv, title).map_err(js)
}
