//! Prompt rendering with chunk bookkeeping and a closed word-level vocabulary.
//!
//! A full rendering of an instance looks like
//!
//! ```text
//! <bos> Rule: pick-up a clear block . stack it on-top-of a clear block or the
//! table . Init: < red on table >
//! < blue on red > Goal: < blue on table > < red on blue > step 1 : pick-up
//! blue step 2 : stack on-top-of table ...
//! ```
//!
//! The prompt for step `t` is the prefix ending at step `t`'s action keyword;
//! the model fills in the color (or `table`) that follows it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocksworld::{Action, Color, PlanInstance, WorldState};

const COLOR_BASE: u32 = 2;

/// Fixed vocabulary: pad, bos, the six colors, structure words, rule words.
const TOKENS: &[&str] = &[
    "<pad>",
    "<bos>",
    "blue",
    "red",
    "yellow",
    "white",
    "orange",
    "purple",
    "Init:",
    "Goal:",
    "step",
    "1",
    "2",
    "3",
    "4",
    "5",
    "6",
    ":",
    "pick-up",
    "stack",
    "on-top-of",
    "on",
    "table",
    "<",
    ">",
    "Rule:",
    "a",
    "clear",
    "block",
    ".",
    "it",
    "or",
    "the",
];

const PREAMBLE: &str =
    "Rule: pick-up a clear block . stack it on-top-of a clear block or the table .";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("step {step} outside plan of length {len}")]
    StepOutOfRange { step: usize, len: usize },
}

/// Word-level tokenizer over [`TOKENS`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            tokens: TOKENS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32, TextError> {
        self.tokens
            .iter()
            .position(|t| t == word)
            .map(|i| i as u32)
            .ok_or_else(|| TextError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Result<&str, TextError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(TextError::UnknownId(id))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, TextError> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String, TextError> {
        Ok(ids
            .iter()
            .map(|&i| self.word(i))
            .collect::<Result<Vec<_>, _>>()?
            .join(" "))
    }

    pub fn color_id(c: Color) -> u32 {
        COLOR_BASE + c.index() as u32
    }

    /// The color named by a token id, if any.
    pub fn color_of(id: u32) -> Option<Color> {
        id.checked_sub(COLOR_BASE)
            .and_then(|i| Color::new(i as usize))
    }

    pub fn bos(&self) -> u32 {
        1
    }

    pub fn table_id(&self) -> u32 {
        self.id("table").unwrap()
    }

    /// One token per line; the zero-based line number is the id.
    pub fn to_file_contents(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_contents(text: &str) -> Result<Vocab, TextError> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if t.is_empty() || t.contains(char::is_whitespace) || !seen.insert(t) {
                return Err(TextError::UnknownWord(t.clone()));
            }
        }
        Ok(Vocab { tokens })
    }
}

/// Semantic role of a contiguous prompt span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChunkKind {
    InitToken,
    InitState,
    GoalToken,
    GoalState,
    HistoryStep(u8),
    ActionPrompt,
    LastToken,
}

impl ChunkKind {
    /// All kinds in prompt order, with six history steps.
    pub fn all() -> Vec<ChunkKind> {
        let mut v = vec![
            ChunkKind::InitToken,
            ChunkKind::InitState,
            ChunkKind::GoalToken,
            ChunkKind::GoalState,
        ];
        v.extend((1..=6).map(ChunkKind::HistoryStep));
        v.extend([ChunkKind::ActionPrompt, ChunkKind::LastToken]);
        v
    }

    pub fn label(self) -> String {
        match self {
            ChunkKind::InitToken => "init_token".into(),
            ChunkKind::InitState => "init_state".into(),
            ChunkKind::GoalToken => "goal_token".into(),
            ChunkKind::GoalState => "goal_state".into(),
            ChunkKind::HistoryStep(k) => format!("history_{k}"),
            ChunkKind::ActionPrompt => "action_prompt".into(),
            ChunkKind::LastToken => "last_token".into(),
        }
    }

    pub fn parse(s: &str) -> Option<ChunkKind> {
        ChunkKind::all().into_iter().find(|k| k.label() == s)
    }
}

/// Inclusive token range of a chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpan {
    pub kind: ChunkKind,
    pub start: usize,
    pub end: usize,
}

impl ChunkSpan {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn positions(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// What fills the blank after an action keyword.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Color(Color),
    Table,
}

impl Decision {
    pub fn of(action: Action) -> Decision {
        action.color().map_or(Decision::Table, Decision::Color)
    }

    pub fn token(self, vocab: &Vocab) -> u32 {
        match self {
            Decision::Color(c) => Vocab::color_id(c),
            Decision::Table => vocab.table_id(),
        }
    }

    pub fn color(self) -> Option<Color> {
        match self {
            Decision::Color(c) => Some(c),
            Decision::Table => None,
        }
    }
}

/// A teacher-forced prompt for one decision step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub tokens: Vec<u32>,
    pub spans: Vec<ChunkSpan>,
    /// Index of the blank: the gold token would sit here, so the logits at
    /// `decision_position - 1` (the last token) predict it.
    pub decision_position: usize,
    pub gold: Decision,
    pub gold_token: u32,
    /// 1-based step index.
    pub step_index: usize,
}

impl RenderedPrompt {
    pub fn span(&self, kind: ChunkKind) -> Option<&ChunkSpan> {
        self.spans.iter().find(|s| s.kind == kind)
    }

    pub fn last_position(&self) -> usize {
        self.decision_position - 1
    }
}

/// Full teacher-forced rendering of an instance: the prompt for every step
/// is a prefix of `tokens`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FullRendering {
    pub tokens: Vec<u32>,
    pub init_token: usize,
    pub init_state: (usize, usize),
    pub goal_token: usize,
    pub goal_state: (usize, usize),
    /// Per step: first token (`step`) and index of the decision token.
    pub steps: Vec<(usize, usize)>,
}

impl FullRendering {
    /// First token of the plan region.
    pub fn plan_start(&self) -> usize {
        self.goal_state.1 + 1
    }

    /// `(position whose logits predict the decision, gold token)` per step.
    pub fn decision_targets(&self) -> Vec<(usize, u32)> {
        self.steps
            .iter()
            .map(|&(_, d)| (d - 1, self.tokens[d]))
            .collect()
    }
}

fn push_state(out: &mut Vec<u32>, vocab: &Vocab, state: &WorldState) {
    let (lt, gt, on, table) = (
        vocab.id("<").unwrap(),
        vocab.id(">").unwrap(),
        vocab.id("on").unwrap(),
        vocab.table_id(),
    );
    for pile in &state.piles {
        for (i, &c) in pile.iter().enumerate() {
            out.push(lt);
            out.push(Vocab::color_id(c));
            out.push(on);
            out.push(if i == 0 {
                table
            } else {
                Vocab::color_id(pile[i - 1])
            });
            out.push(gt);
        }
    }
}

pub fn render_full(instance: &PlanInstance, vocab: &Vocab) -> FullRendering {
    let id = |w: &str| vocab.id(w).expect("structural token in vocabulary");
    let mut t = vec![vocab.bos()];
    t.extend(vocab.tokenize(PREAMBLE).expect("preamble in vocabulary"));
    let init_token = t.len();
    t.push(id("Init:"));
    let s = t.len();
    push_state(&mut t, vocab, &instance.init);
    let init_state = (s, t.len() - 1);
    let goal_token = t.len();
    t.push(id("Goal:"));
    let s = t.len();
    push_state(&mut t, vocab, &instance.goal);
    let goal_state = (s, t.len() - 1);
    let mut steps = Vec::with_capacity(instance.plan.len());
    for (k, &action) in instance.plan.iter().enumerate() {
        let start = t.len();
        t.push(id("step"));
        t.push(id(&(k + 1).to_string()));
        t.push(id(":"));
        if action.is_pick() {
            t.push(id("pick-up"));
        } else {
            t.push(id("stack"));
            t.push(id("on-top-of"));
        }
        steps.push((start, t.len()));
        t.push(Decision::of(action).token(vocab));
    }
    FullRendering {
        tokens: t,
        init_token,
        init_state,
        goal_token,
        goal_state,
        steps,
    }
}

/// Prompt for decision step `step` (1-based) with gold history for earlier steps.
pub fn render(
    instance: &PlanInstance,
    step: usize,
    vocab: &Vocab,
) -> Result<RenderedPrompt, TextError> {
    if step == 0 || step > instance.plan.len() {
        return Err(TextError::StepOutOfRange {
            step,
            len: instance.plan.len(),
        });
    }
    let full = render_full(instance, vocab);
    Ok(prompt_from_full(
        &full,
        step,
        Decision::of(instance.plan[step - 1]),
    ))
}

pub(crate) fn prompt_from_full(
    full: &FullRendering,
    step: usize,
    gold: Decision,
) -> RenderedPrompt {
    let (step_start, decision) = full.steps[step - 1];
    let last = decision - 1;
    let mut spans = vec![
        ChunkSpan {
            kind: ChunkKind::InitToken,
            start: full.init_token,
            end: full.init_token,
        },
        ChunkSpan {
            kind: ChunkKind::InitState,
            start: full.init_state.0,
            end: full.init_state.1,
        },
        ChunkSpan {
            kind: ChunkKind::GoalToken,
            start: full.goal_token,
            end: full.goal_token,
        },
        ChunkSpan {
            kind: ChunkKind::GoalState,
            start: full.goal_state.0,
            end: full.goal_state.1,
        },
    ];
    for k in 1..step {
        let (s, d) = full.steps[k - 1];
        spans.push(ChunkSpan {
            kind: ChunkKind::HistoryStep(k as u8),
            start: s,
            end: d,
        });
    }
    spans.push(ChunkSpan {
        kind: ChunkKind::ActionPrompt,
        start: step_start,
        end: last - 1,
    });
    spans.push(ChunkSpan {
        kind: ChunkKind::LastToken,
        start: last,
        end: last,
    });
    RenderedPrompt {
        tokens: full.tokens[..=last].to_vec(),
        spans,
        decision_position: decision,
        gold_token: full.tokens[decision],
        gold,
        step_index: step,
    }
}

/// All step prompts of an instance.
pub fn render_all(instance: &PlanInstance, vocab: &Vocab) -> Vec<RenderedPrompt> {
    let full = render_full(instance, vocab);
    (1..=instance.plan.len())
        .map(|t| prompt_from_full(&full, t, Decision::of(instance.plan[t - 1])))
        .collect()
}

/// Token indices inside the requested chunks that hold a color name.
pub fn color_positions(prompt: &RenderedPrompt, chunks: &[ChunkKind]) -> Vec<usize> {
    let mut out: Vec<usize> = prompt
        .spans
        .iter()
        .filter(|s| chunks.contains(&s.kind))
        .flat_map(|s| s.positions())
        .filter(|&i| Vocab::color_of(prompt.tokens[i]).is_some())
        .collect();
    out.sort_unstable();
    out
}

/// History chunk kinds present before `step`.
pub fn history_kinds(step: usize) -> Vec<ChunkKind> {
    (1..step).map(|k| ChunkKind::HistoryStep(k as u8)).collect()
}

/// One JSON line of a prompt dump.
#[derive(Serialize)]
pub struct PromptRecord<'a> {
    pub instance: &'a str,
    pub step: usize,
    pub tokens: Vec<&'a str>,
    pub spans: &'a [ChunkSpan],
    pub gold: &'a str,
}

impl<'a> PromptRecord<'a> {
    pub fn new(
        instance: &'a str,
        prompt: &'a RenderedPrompt,
        vocab: &'a Vocab,
    ) -> PromptRecord<'a> {
        PromptRecord {
            instance,
            step: prompt.step_index,
            tokens: prompt
                .tokens
                .iter()
                .map(|&t| vocab.word(t).unwrap_or("?"))
                .collect(),
            spans: &prompt.spans,
            gold: vocab.word(prompt.gold_token).unwrap_or("?"),
        }
    }
}

/// Reads the on-relations of a rendered state chunk back into a state.
pub fn parse_state(tokens: &[u32], vocab: &Vocab) -> Result<WorldState, TextError> {
    let mut below: Vec<(Color, Option<Color>)> = Vec::new();
    for rel in tokens.chunks(5) {
        let words = rel
            .iter()
            .map(|&t| vocab.word(t))
            .collect::<Result<Vec<_>, _>>()?;
        if words.len() != 5 || words[0] != "<" || words[2] != "on" || words[4] != ">" {
            return Err(TextError::UnknownWord(words.join(" ")));
        }
        let top =
            Color::from_name(words[1]).ok_or_else(|| TextError::UnknownWord(words[1].into()))?;
        let under = match words[3] {
            "table" => None,
            w => Some(Color::from_name(w).ok_or_else(|| TextError::UnknownWord(w.into()))?),
        };
        below.push((top, under));
    }
    let mut piles = Vec::new();
    for &(bottom, _) in below.iter().filter(|(_, u)| u.is_none()) {
        let mut pile = vec![bottom];
        while let Some(&(next, _)) = below.iter().find(|(_, u)| *u == pile.last().copied()) {
            pile.push(next);
        }
        piles.push(pile);
    }
    Ok(WorldState { piles, held: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocksworld::{Level, Split};

    fn color(n: &str) -> Color {
        Color::from_name(n).unwrap()
    }

    /// Three piles of two: red/blue, yellow/white, orange/purple; goal swaps blue onto white.
    fn sample() -> PlanInstance {
        let init = WorldState::new(
            vec![
                vec![color("red"), color("blue")],
                vec![color("yellow"), color("white")],
                vec![color("orange"), color("purple")],
            ],
            None,
        )
        .unwrap();
        let plan = vec![
            Action::PickUp(color("blue")),
            Action::StackOn(color("white")),
            Action::PickUp(color("purple")),
            Action::StackOnTable,
        ];
        let goal = init.apply_all(&plan).unwrap();
        PlanInstance {
            id: "t".into(),
            num_colors: 6,
            level: Level::L2,
            init,
            goal,
            plan,
            split: Split::Train,
        }
    }

    #[test]
    fn vocab_is_small_and_bijective() {
        let v = Vocab::new();
        assert!(v.len() < 128);
        for i in 0..v.len() as u32 {
            assert_eq!(v.id(v.word(i).unwrap()).unwrap(), i);
        }
        for c in Color::ALL {
            assert_eq!(v.id(c.name()).unwrap(), Vocab::color_id(c));
        }
        let back = Vocab::from_file_contents(&v.to_file_contents()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn tokenize_words() {
        let v = Vocab::new();
        assert_eq!(
            v.tokenize("pick-up blue").unwrap(),
            vec![v.id("pick-up").unwrap(), v.id("blue").unwrap()]
        );
        assert_eq!(
            v.tokenize("teleport"),
            Err(TextError::UnknownWord("teleport".into()))
        );
    }

    #[test]
    fn step_one_has_no_history() {
        let v = Vocab::new();
        let p = render(&sample(), 1, &v).unwrap();
        assert!(p
            .spans
            .iter()
            .all(|s| !matches!(s.kind, ChunkKind::HistoryStep(_))));
        let last = p.span(ChunkKind::LastToken).unwrap();
        assert_eq!(
            (last.start, last.end),
            (p.tokens.len() - 1, p.tokens.len() - 1)
        );
        assert_eq!(v.word(p.tokens[last.start]).unwrap(), "pick-up");
        assert_eq!(p.gold, Decision::Color(color("blue")));
        assert!(color_positions(&p, &history_kinds(1)).is_empty());
    }

    #[test]
    fn later_steps_have_disjoint_history() {
        let v = Vocab::new();
        let p = render(&sample(), 4, &v).unwrap();
        let kinds: Vec<_> = p.spans.iter().map(|s| s.kind).collect();
        for k in 1..=3 {
            assert!(kinds.contains(&ChunkKind::HistoryStep(k)));
        }
        for w in p.spans.windows(2) {
            assert!(w[0].end < w[1].start, "{:?} overlaps {:?}", w[0], w[1]);
        }
        assert_eq!(
            v.detokenize(
                &p.tokens[p
                    .span(ChunkKind::HistoryStep(1))
                    .unwrap()
                    .positions()
                    .collect::<Vec<_>>()[0]
                    ..=p.span(ChunkKind::HistoryStep(1)).unwrap().end]
            )
            .unwrap(),
            "step 1 : pick-up blue"
        );
        assert_eq!(v.word(*p.tokens.last().unwrap()).unwrap(), "on-top-of");
        assert_eq!(p.gold, Decision::Table);
        assert_eq!(p.gold_token, v.table_id());
    }

    #[test]
    fn one_color_in_history_step() {
        let v = Vocab::new();
        let p = render(&sample(), 2, &v).unwrap();
        let pos = color_positions(&p, &[ChunkKind::HistoryStep(1)]);
        assert_eq!(pos.len(), 1);
        assert_eq!(Vocab::color_of(p.tokens[pos[0]]), Some(color("blue")));
    }

    #[test]
    fn init_state_color_count() {
        // Three piles of two: three table relations (one color each) and three
        // stacked relations (two colors each).
        let v = Vocab::new();
        let p = render(&sample(), 1, &v).unwrap();
        let pos = color_positions(&p, &[ChunkKind::InitState]);
        assert_eq!(pos.len(), 9);
        assert!(pos.iter().all(|&i| Vocab::color_of(p.tokens[i]).is_some()));
    }

    #[test]
    fn step_out_of_range() {
        let v = Vocab::new();
        assert_eq!(
            render(&sample(), 0, &v).unwrap_err(),
            TextError::StepOutOfRange { step: 0, len: 4 }
        );
        assert_eq!(
            render(&sample(), 5, &v).unwrap_err(),
            TextError::StepOutOfRange { step: 5, len: 4 }
        );
    }

    #[test]
    fn prompts_are_prefixes_of_full_rendering() {
        let v = Vocab::new();
        let inst = sample();
        let full = render_full(&inst, &v);
        for (p, (pos, gold)) in render_all(&inst, &v).iter().zip(full.decision_targets()) {
            assert_eq!(&full.tokens[..p.tokens.len()], &p.tokens[..]);
            assert_eq!(p.last_position(), pos);
            assert_eq!(p.gold_token, gold);
        }
    }

    #[test]
    fn init_chunk_parses_back() {
        let v = Vocab::new();
        let inst = sample();
        let p = render(&inst, 1, &v).unwrap();
        let span = p.span(ChunkKind::InitState).unwrap();
        let parsed = parse_state(&p.tokens[span.start..=span.end], &v).unwrap();
        assert!(crate::blocksworld::states_equal(&parsed, &inst.init));
    }
}
