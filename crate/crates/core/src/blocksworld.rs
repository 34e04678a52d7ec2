//! Blocksworld environment, breadth-first optimal planner and dataset synthesis.
//!
//! A world holds up to six uniquely colored blocks arranged in at most
//! [`MAX_PILES`] piles, plus an optional block held by the gripper. Picking up
//! and stacking are separate steps, so every optimal plan between two
//! empty-hand states has even length.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Maximum number of non-empty piles on the table.
pub const MAX_PILES: usize = 4;
/// Maximum number of distinct block colors.
pub const MAX_COLORS: usize = 6;
/// Longest plan the generator emits (three pick/stack pairs).
pub const MAX_STEPS: usize = 6;

const COLOR_NAMES: [&str; MAX_COLORS] = ["blue", "red", "yellow", "white", "orange", "purple"];

/// A block identity. Worlds with fewer than six blocks use a prefix of the palette.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Color(u8);

impl Color {
    pub const ALL: [Color; MAX_COLORS] =
        [Color(0), Color(1), Color(2), Color(3), Color(4), Color(5)];

    pub fn new(index: usize) -> Option<Self> {
        (index < MAX_COLORS).then_some(Color(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        COLOR_NAMES[self.index()]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        COLOR_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| Color(i as u8))
    }

    /// The first `n` colors of the palette.
    pub fn palette(n: usize) -> &'static [Color] {
        &Self::ALL[..n.min(MAX_COLORS)]
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Color {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Color {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        Color::from_name(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown color `{name}`")))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("color {0} appears more than once")]
    DuplicateColor(Color),
    #[error("{0} piles exceed the limit of {MAX_PILES}")]
    TooManyPiles(usize),
    #[error("empty pile stored in state")]
    EmptyPile,
}

/// Reasons an action cannot be applied to a state.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActionError {
    #[error("hand already holds a block")]
    HandOccupied,
    #[error("hand is empty")]
    HandEmpty,
    #[error("block {0} is not clear")]
    BlockNotClear(Color),
    #[error("no empty pile slot available")]
    NoEmptyPile,
    #[error("block {0} is not in play")]
    UnknownColor(Color),
}

/// A planning state: bottom-to-top piles and an optional held block.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct WorldState {
    pub piles: Vec<Vec<Color>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held: Option<Color>,
}

impl WorldState {
    /// Builds a validated state.
    pub fn new(piles: Vec<Vec<Color>>, held: Option<Color>) -> Result<Self, StateError> {
        let state = WorldState { piles, held };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<(), StateError> {
        if self.piles.len() > MAX_PILES {
            return Err(StateError::TooManyPiles(self.piles.len()));
        }
        let mut seen = [false; MAX_COLORS];
        for c in self.piles.iter().flatten().chain(self.held.iter()) {
            if std::mem::replace(&mut seen[c.index()], true) {
                return Err(StateError::DuplicateColor(*c));
            }
        }
        if self.piles.iter().any(Vec::is_empty) {
            return Err(StateError::EmptyPile);
        }
        Ok(())
    }

    /// All colors in play, in palette order.
    pub fn colors(&self) -> Vec<Color> {
        let mut cs: Vec<Color> = self
            .piles
            .iter()
            .flatten()
            .chain(self.held.iter())
            .copied()
            .collect();
        cs.sort();
        cs
    }

    pub fn contains(&self, c: Color) -> bool {
        self.held == Some(c) || self.piles.iter().any(|p| p.contains(&c))
    }

    /// A block is clear when it sits on top of a pile.
    pub fn is_clear(&self, c: Color) -> bool {
        self.piles.iter().any(|p| p.last() == Some(&c))
    }

    /// Same state with piles ordered by their bottom block.
    pub fn canonical(&self) -> WorldState {
        let mut piles = self.piles.clone();
        piles.sort_by_key(|p| p[0]);
        WorldState {
            piles,
            held: self.held,
        }
    }

    /// What each block rests on, as a table of "on" relations.
    pub fn support_of(&self, c: Color) -> Option<Support> {
        if self.held == Some(c) {
            return Some(Support::Held);
        }
        for pile in &self.piles {
            if let Some(pos) = pile.iter().position(|&b| b == c) {
                return Some(if pos == 0 {
                    Support::Table
                } else {
                    Support::Block(pile[pos - 1])
                });
            }
        }
        None
    }

    pub fn apply(&self, action: Action) -> Result<WorldState, ActionError> {
        let mut next = self.clone();
        match action {
            Action::PickUp(c) => {
                if self.held.is_some() {
                    return Err(ActionError::HandOccupied);
                }
                let pile = next
                    .piles
                    .iter()
                    .position(|p| p.contains(&c))
                    .ok_or(ActionError::UnknownColor(c))?;
                if next.piles[pile].last() != Some(&c) {
                    return Err(ActionError::BlockNotClear(c));
                }
                next.piles[pile].pop();
                if next.piles[pile].is_empty() {
                    next.piles.remove(pile);
                }
                next.held = Some(c);
            }
            Action::StackOn(target) => {
                let held = self.held.ok_or(ActionError::HandEmpty)?;
                let pile = next
                    .piles
                    .iter()
                    .position(|p| p.contains(&target))
                    .ok_or(ActionError::UnknownColor(target))?;
                if next.piles[pile].last() != Some(&target) {
                    return Err(ActionError::BlockNotClear(target));
                }
                next.piles[pile].push(held);
                next.held = None;
            }
            Action::StackOnTable => {
                let held = self.held.ok_or(ActionError::HandEmpty)?;
                if self.piles.len() >= MAX_PILES {
                    return Err(ActionError::NoEmptyPile);
                }
                next.piles.push(vec![held]);
                next.held = None;
            }
        }
        Ok(next)
    }

    /// Every action for which [`WorldState::apply`] succeeds.
    pub fn legal_actions(&self) -> Vec<Action> {
        let tops = self.piles.iter().filter_map(|p| p.last().copied());
        match self.held {
            None => tops.map(Action::PickUp).collect(),
            Some(_) => {
                let mut acts: Vec<Action> = tops.map(Action::StackOn).collect();
                if self.piles.len() < MAX_PILES {
                    acts.push(Action::StackOnTable);
                }
                acts
            }
        }
    }

    pub fn apply_all(&self, plan: &[Action]) -> Result<WorldState, ActionError> {
        plan.iter().try_fold(self.clone(), |s, &a| s.apply(a))
    }

    pub(crate) fn pack(&self) -> Packed {
        let mut below = [ABSENT; MAX_COLORS];
        for pile in &self.piles {
            for (i, c) in pile.iter().enumerate() {
                below[c.index()] = if i == 0 { TABLE } else { pile[i - 1].0 };
            }
        }
        if let Some(h) = self.held {
            below[h.index()] = HELD;
        }
        Packed(below)
    }
}

/// Pile-order-insensitive state equality; order within a pile and the held block matter.
pub fn states_equal(a: &WorldState, b: &WorldState) -> bool {
    a.held == b.held && a.pack() == b.pack()
}

/// What a block rests on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Support {
    Table,
    Block(Color),
    Held,
}

/// A single gripper step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    PickUp(Color),
    StackOn(Color),
    StackOnTable,
}

impl Action {
    pub fn is_pick(self) -> bool {
        matches!(self, Action::PickUp(_))
    }

    /// The color named by the action, `None` for a table placement.
    pub fn color(self) -> Option<Color> {
        match self {
            Action::PickUp(c) | Action::StackOn(c) => Some(c),
            Action::StackOnTable => None,
        }
    }

    /// Text form used for deterministic tie-breaking between optimal plans.
    pub fn text(self) -> String {
        match self {
            Action::PickUp(c) => format!("pick-up {c}"),
            Action::StackOn(c) => format!("stack on-top-of {c}"),
            Action::StackOnTable => "stack on-top-of table".to_string(),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

#[derive(Serialize, Deserialize)]
enum ActionRepr {
    #[serde(rename = "pick-up")]
    PickUp(Color),
    #[serde(rename = "stack-on")]
    StackOn(String),
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match *self {
            Action::PickUp(c) => ActionRepr::PickUp(c),
            Action::StackOn(c) => ActionRepr::StackOn(c.name().to_string()),
            Action::StackOnTable => ActionRepr::StackOn("table".to_string()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match ActionRepr::deserialize(d)? {
            ActionRepr::PickUp(c) => Action::PickUp(c),
            ActionRepr::StackOn(t) if t == "table" => Action::StackOnTable,
            ActionRepr::StackOn(t) => {
                Action::StackOn(Color::from_name(&t).ok_or_else(|| {
                    serde::de::Error::custom(format!("unknown stack target `{t}`"))
                })?)
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Packed search states
// ---------------------------------------------------------------------------

const TABLE: u8 = 6;
const HELD: u8 = 7;
const ABSENT: u8 = 15;

/// Compact state: for each color, what it rests on. Pile order is not
/// represented, so equal packs are equal under [`states_equal`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) struct Packed([u8; MAX_COLORS]);

impl Packed {
    pub(crate) fn key(self) -> u32 {
        self.0.iter().fold(0u32, |k, &b| (k << 4) | b as u32)
    }

    fn held(self) -> Option<u8> {
        self.0.iter().position(|&b| b == HELD).map(|i| i as u8)
    }

    fn pile_count(self) -> usize {
        self.0.iter().filter(|&&b| b == TABLE).count()
    }

    fn is_clear(self, c: u8) -> bool {
        let b = self.0[c as usize];
        b != ABSENT && b != HELD && !self.0.contains(&c)
    }

    /// Successors in the same order as [`WorldState::legal_actions`] would
    /// produce them up to pile ordering.
    fn successors(self, out: &mut Vec<(Action, Packed)>) {
        out.clear();
        let clear: Vec<u8> = (0..MAX_COLORS as u8)
            .filter(|&c| self.is_clear(c))
            .collect();
        match self.held() {
            None => {
                for c in clear {
                    let mut next = self;
                    next.0[c as usize] = HELD;
                    out.push((Action::PickUp(Color(c)), next));
                }
            }
            Some(h) => {
                for c in clear {
                    let mut next = self;
                    next.0[h as usize] = c;
                    out.push((Action::StackOn(Color(c)), next));
                }
                if self.pile_count() < MAX_PILES {
                    let mut next = self;
                    next.0[h as usize] = TABLE;
                    out.push((Action::StackOnTable, next));
                }
            }
        }
    }

    pub(crate) fn unpack(self) -> WorldState {
        let mut piles = Vec::new();
        for bottom in 0..MAX_COLORS as u8 {
            if self.0[bottom as usize] != TABLE {
                continue;
            }
            let mut pile = vec![Color(bottom)];
            let mut top = bottom;
            while let Some(above) = self.0.iter().position(|&b| b == top) {
                top = above as u8;
                pile.push(Color(top));
            }
            piles.push(pile);
        }
        WorldState {
            piles,
            held: self.held().map(Color),
        }
    }
}

/// Breadth-first distances from `start`, up to `depth` steps.
fn bfs(start: Packed, depth: usize) -> HashMap<Packed, usize> {
    let mut dist = HashMap::new();
    dist.insert(start, 0);
    let mut frontier = vec![start];
    let mut succ = Vec::new();
    for d in 1..=depth {
        let mut next_frontier = Vec::new();
        for s in frontier {
            s.successors(&mut succ);
            for &(_, n) in &succ {
                dist.entry(n).or_insert_with(|| {
                    next_frontier.push(n);
                    d
                });
            }
        }
        frontier = next_frontier;
    }
    dist
}

/// All shortest action sequences from `init` to `goal` using at most
/// `max_moves` pick/stack pairs. Returns `[[]]` when the states already match
/// and an empty set when the goal is out of reach. Plans are sorted by their
/// text form.
pub fn optimal_plans(init: &WorldState, goal: &WorldState, max_moves: usize) -> Vec<Vec<Action>> {
    let start = init.pack();
    let target = goal.pack();
    if start == target {
        return vec![Vec::new()];
    }
    let limit = 2 * max_moves;
    // Transitions are symmetric (every pick-up is undone by a stack and vice
    // versa), so distances from the goal are distances to it.
    let to_goal = bfs(target, limit);
    let Some(&total) = to_goal.get(&start) else {
        return Vec::new();
    };
    let mut plans = Vec::new();
    let mut prefix = Vec::with_capacity(total);
    collect_paths(start, total, &to_goal, &mut prefix, &mut plans);
    plans.sort_by(|a, b| plan_order(a, b));
    plans
}

fn collect_paths(
    state: Packed,
    remaining: usize,
    to_goal: &HashMap<Packed, usize>,
    prefix: &mut Vec<Action>,
    out: &mut Vec<Vec<Action>>,
) {
    if remaining == 0 {
        out.push(prefix.clone());
        return;
    }
    let mut succ = Vec::new();
    state.successors(&mut succ);
    for (action, next) in succ {
        if to_goal.get(&next) == Some(&(remaining - 1)) {
            prefix.push(action);
            collect_paths(next, remaining - 1, to_goal, prefix, out);
            prefix.pop();
        }
    }
}

/// Lexicographic order over serialized action text.
pub fn plan_order(a: &[Action], b: &[Action]) -> Ordering {
    a.iter().map(|x| x.text()).cmp(b.iter().map(|x| x.text()))
}

// ---------------------------------------------------------------------------
// Dataset synthesis
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L1, Level::L2, Level::L3];

    pub fn from_plan_len(len: usize) -> Option<Level> {
        match len {
            2 => Some(Level::L1),
            4 => Some(Level::L2),
            6 => Some(Level::L3),
            _ => None,
        }
    }

    pub fn plan_len(self) -> usize {
        match self {
            Level::L1 => 2,
            Level::L2 => 4,
            Level::L3 => 6,
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        match s.to_ascii_uppercase().as_str() {
            "L1" | "1" => Some(Level::L1),
            "L2" | "2" => Some(Level::L2),
            "L3" | "3" => Some(Level::L3),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.plan_len() / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One planning problem with its selected optimal plan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanInstance {
    pub id: String,
    pub num_colors: usize,
    pub level: Level,
    pub init: WorldState,
    pub goal: WorldState,
    pub plan: Vec<Action>,
    pub split: Split,
}

impl PlanInstance {
    /// Whether any step puts a block directly on the table.
    pub fn uses_table(&self) -> bool {
        self.plan.contains(&Action::StackOnTable)
    }

    /// States visited by the plan, starting with `init`.
    pub fn trajectory(&self) -> Result<Vec<WorldState>, ActionError> {
        let mut states = vec![self.init.clone()];
        for &a in &self.plan {
            let next = states.last().unwrap().apply(a)?;
            states.push(next);
        }
        Ok(states)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenError {
    #[error("configuration error: {0}")]
    Config(String),
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub colors: Vec<usize>,
    pub max_steps: usize,
    /// Train and test parts for unique-optimal instances (train:test).
    pub split_ratio: (u32, u32),
    pub seed: u64,
    /// Upper bound on emitted instances per (color count, level) cell;
    /// `None` keeps every reachable pair.
    pub budget_per_cell: Option<usize>,
    /// Keep instances whose plan places a block on the table.
    pub allow_table: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            colors: vec![4, 5, 6],
            max_steps: MAX_STEPS,
            split_ratio: (1, 3),
            seed: 7,
            budget_per_cell: Some(12_000),
            allow_table: true,
        }
    }
}

/// Every empty-hand configuration of the first `n` colors in at most
/// [`MAX_PILES`] piles, in canonical form.
pub fn all_states(n: usize) -> Vec<WorldState> {
    let colors: Vec<Color> = Color::palette(n).to_vec();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut perm = colors.clone();
    permute(&mut perm, 0, &mut |order| {
        // Each subset of the n-1 gaps marks pile breaks.
        for mask in 0u32..(1 << (n.saturating_sub(1))) {
            if mask.count_ones() as usize + 1 > MAX_PILES {
                continue;
            }
            let mut piles = vec![vec![order[0]]];
            for i in 1..n {
                if mask & (1 << (i - 1)) != 0 {
                    piles.push(Vec::new());
                }
                piles.last_mut().unwrap().push(order[i]);
            }
            let state = WorldState { piles, held: None }.canonical();
            if seen.insert(state.pack()) {
                out.push(state);
            }
        }
    });
    out.sort_by_key(|s| s.pack().key());
    out
}

fn permute(xs: &mut [Color], k: usize, f: &mut impl FnMut(&[Color])) {
    if k == xs.len() {
        f(xs);
        return;
    }
    for i in k..xs.len() {
        xs.swap(k, i);
        permute(xs, k + 1, f);
        xs.swap(k, i);
    }
}

/// SplitMix64 finalizer; used for seeded sampling and split assignment.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pair_hash(seed: u64, salt: u64, init: Packed, goal: Packed) -> u64 {
    mix64(mix64(seed ^ salt) ^ ((init.key() as u64) << 32 | goal.key() as u64))
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Candidate {
    hash: u64,
    init: Packed,
    goal: Packed,
    unique: bool,
}

/// Enumerates every (init, goal) pair reachable in 2..=`max_steps` steps,
/// classifies pairs by optimal length and emits at most `budget_per_cell`
/// per (color count, level), chosen by seeded hash.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<PlanInstance>, GenError> {
    if cfg.colors.is_empty() {
        return Err(GenError::Config("empty color set".into()));
    }
    if let Some(&bad) = cfg.colors.iter().find(|&&n| !(4..=MAX_COLORS).contains(&n)) {
        return Err(GenError::Config(format!("color count {bad} outside 4..=6")));
    }
    if cfg.max_steps == 0 || cfg.max_steps > MAX_STEPS || cfg.max_steps % 2 != 0 {
        return Err(GenError::Config(format!(
            "max_steps {} must be 2, 4 or 6",
            cfg.max_steps
        )));
    }
    let (train_parts, test_parts) = cfg.split_ratio;
    if train_parts + test_parts == 0 {
        return Err(GenError::Config("split ratio has no parts".into()));
    }
    let mut colors = cfg.colors.clone();
    colors.sort_unstable();
    colors.dedup();

    let mut out = Vec::new();
    for &n in &colors {
        let mut cells: HashMap<Level, BinaryHeap<Candidate>> = HashMap::new();
        for init in all_states(n) {
            let start = init.pack();
            for (goal, len, paths) in shortest_path_counts(start, cfg.max_steps) {
                let Some(level) = Level::from_plan_len(len) else {
                    continue;
                };
                let cand = Candidate {
                    hash: pair_hash(cfg.seed, n as u64, start, goal),
                    init: start,
                    goal,
                    unique: paths == 1,
                };
                let heap = cells.entry(level).or_default();
                match cfg.budget_per_cell {
                    Some(b) if heap.len() >= b => {
                        if heap.peek().is_some_and(|top| cand < *top) {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                    _ => heap.push(cand),
                }
            }
        }
        let mut levels: Vec<_> = cells.into_iter().collect();
        levels.sort_by_key(|(l, _)| *l);
        for (level, heap) in levels {
            for cand in heap.into_sorted_vec() {
                let init = cand.init.unpack();
                let goal = cand.goal.unpack();
                let plans = optimal_plans(&init, &goal, cfg.max_steps / 2);
                let plan = plans
                    .into_iter()
                    .next()
                    .expect("enumerated pair must be reachable");
                debug_assert_eq!(plan.len(), level.plan_len());
                let instance = PlanInstance {
                    id: format!(
                        "b{n}-{}-{:06x}-{:06x}",
                        level,
                        cand.init.key(),
                        cand.goal.key()
                    ),
                    num_colors: n,
                    level,
                    split: if cand.unique
                        && mix64(cand.hash ^ 0x5117) % (train_parts + test_parts) as u64
                            >= train_parts as u64
                    {
                        Split::Test
                    } else {
                        Split::Train
                    },
                    init,
                    goal,
                    plan,
                };
                if !cfg.allow_table && instance.uses_table() {
                    continue;
                }
                let reached = instance
                    .init
                    .apply_all(&instance.plan)
                    .expect("optimal plan must be legal");
                assert!(
                    states_equal(&reached, &instance.goal),
                    "plan must reach goal"
                );
                out.push(instance);
            }
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Number of reachable (init, goal) pairs and how many of them have a unique
/// optimal plan, per level, before any budget is applied.
pub fn pair_counts(num_colors: usize, max_steps: usize) -> Vec<(Level, usize, usize)> {
    let mut counts: HashMap<Level, (usize, usize)> = HashMap::new();
    for init in all_states(num_colors) {
        for (_, len, paths) in shortest_path_counts(init.pack(), max_steps) {
            if let Some(level) = Level::from_plan_len(len) {
                let e = counts.entry(level).or_default();
                e.0 += 1;
                e.1 += (paths == 1) as usize;
            }
        }
    }
    let mut rows: Vec<_> = counts.into_iter().map(|(l, (t, u))| (l, t, u)).collect();
    rows.sort();
    rows
}

/// For every empty-hand state at even distance 2..=`depth` from `start`,
/// its distance and the number of distinct shortest paths reaching it.
fn shortest_path_counts(start: Packed, depth: usize) -> Vec<(Packed, usize, u64)> {
    let mut dist: HashMap<Packed, (usize, u64)> = HashMap::new();
    dist.insert(start, (0, 1));
    let mut frontier = vec![start];
    let mut succ = Vec::new();
    let mut found = Vec::new();
    for d in 1..=depth {
        let mut next_frontier = Vec::new();
        for &s in &frontier {
            let count = dist[&s].1;
            s.successors(&mut succ);
            for &(_, n) in &succ {
                match dist.get_mut(&n) {
                    Some((nd, c)) if *nd == d => *c += count,
                    Some(_) => {}
                    None => {
                        dist.insert(n, (d, count));
                        next_frontier.push(n);
                    }
                }
            }
        }
        if d % 2 == 0 {
            found.extend(next_frontier.iter().map(|&g| (g, d, dist[&g].1)));
        }
        frontier = next_frontier;
    }
    found
}

/// Instance counts per (color count, level, split), in the layout of a
/// dataset statistics table.
pub fn level_histogram(instances: &[PlanInstance]) -> Vec<(usize, Level, usize, usize)> {
    let mut counts: HashMap<(usize, Level), (usize, usize)> = HashMap::new();
    for inst in instances {
        let e = counts.entry((inst.num_colors, inst.level)).or_default();
        match inst.split {
            Split::Train => e.0 += 1,
            Split::Test => e.1 += 1,
        }
    }
    let mut rows: Vec<_> = counts
        .into_iter()
        .map(|((n, l), (tr, te))| (n, l, tr, te))
        .collect();
    rows.sort();
    rows
}

pub fn write_jsonl<W: std::io::Write>(mut w: W, instances: &[PlanInstance]) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: std::io::BufRead>(r: R) -> Result<Vec<PlanInstance>, serde_json::Error> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(serde_json::Error::io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(name: &str) -> Color {
        Color::from_name(name).unwrap()
    }

    fn st(piles: &[&[&str]], held: Option<&str>) -> WorldState {
        WorldState::new(
            piles
                .iter()
                .map(|p| p.iter().map(|n| c(n)).collect())
                .collect(),
            held.map(c),
        )
        .unwrap()
    }

    #[test]
    fn pick_from_top() {
        let s = st(&[&["red", "blue"]], None);
        assert_eq!(
            s.apply(Action::PickUp(c("blue"))).unwrap(),
            st(&[&["red"]], Some("blue"))
        );
    }

    #[test]
    fn stack_is_inverse_of_pick() {
        let s = st(&[&["red"]], Some("blue"));
        assert_eq!(
            s.apply(Action::StackOn(c("red"))).unwrap(),
            st(&[&["red", "blue"]], None)
        );
    }

    #[test]
    fn covered_block_cannot_be_picked() {
        let s = st(&[&["red", "blue"]], None);
        assert_eq!(
            s.apply(Action::PickUp(c("red"))),
            Err(ActionError::BlockNotClear(c("red")))
        );
    }

    #[test]
    fn illegal_actions_report_reason() {
        let held = st(&[&["red"]], Some("blue"));
        assert_eq!(
            held.apply(Action::PickUp(c("red"))),
            Err(ActionError::HandOccupied)
        );
        let empty = st(&[&["red"]], None);
        assert_eq!(
            empty.apply(Action::StackOnTable),
            Err(ActionError::HandEmpty)
        );
        assert_eq!(
            empty.apply(Action::StackOn(c("red"))),
            Err(ActionError::HandEmpty)
        );
        assert_eq!(
            empty.apply(Action::PickUp(c("white"))),
            Err(ActionError::UnknownColor(c("white")))
        );
        let full = st(
            &[&["red"], &["yellow"], &["white"], &["orange"]],
            Some("blue"),
        );
        assert_eq!(
            full.apply(Action::StackOnTable),
            Err(ActionError::NoEmptyPile)
        );
    }

    #[test]
    fn legal_action_sets() {
        let s = st(&[&["red"]], Some("blue"));
        let acts: HashSet<_> = s.legal_actions().into_iter().collect();
        assert_eq!(
            acts,
            HashSet::from([Action::StackOn(c("red")), Action::StackOnTable])
        );
        let s = st(&[&["red"], &["blue"]], None);
        let acts: HashSet<_> = s.legal_actions().into_iter().collect();
        assert_eq!(
            acts,
            HashSet::from([Action::PickUp(c("red")), Action::PickUp(c("blue"))])
        );
        assert!(WorldState::default().legal_actions().is_empty());
    }

    #[test]
    fn equality_ignores_pile_order_only() {
        assert!(states_equal(
            &st(&[&["red", "blue"], &["yellow"]], None),
            &st(&[&["yellow"], &["red", "blue"]], None)
        ));
        assert!(!states_equal(
            &st(&[&["red", "blue"]], None),
            &st(&[&["blue", "red"]], None)
        ));
        let s = st(&[&["red"]], Some("blue"));
        assert!(states_equal(&s, &s.clone()));
        assert!(!states_equal(
            &st(&[&["red"]], Some("blue")),
            &st(&[&["red"]], None)
        ));
    }

    #[test]
    fn invalid_states_rejected() {
        let r = c("red");
        assert_eq!(
            WorldState::new(vec![vec![r, r]], None),
            Err(StateError::DuplicateColor(r))
        );
        assert_eq!(
            WorldState::new(vec![vec![]], None),
            Err(StateError::EmptyPile)
        );
        let many = (0..5).map(|i| vec![Color::ALL[i]]).collect();
        assert_eq!(
            WorldState::new(many, None),
            Err(StateError::TooManyPiles(5))
        );
    }

    #[test]
    fn trivial_plan_for_equal_states() {
        let s = st(&[&["red"], &["blue"]], None);
        assert_eq!(optimal_plans(&s, &s, 3), vec![Vec::<Action>::new()]);
    }

    #[test]
    fn two_step_plan_is_unique() {
        let init = st(&[&["red"], &["blue"]], None);
        let goal = st(&[&["red", "blue"]], None);
        assert_eq!(
            optimal_plans(&init, &goal, 3),
            vec![vec![Action::PickUp(c("blue")), Action::StackOn(c("red"))]]
        );
    }

    #[test]
    fn unreachable_within_bound_is_empty() {
        let init = st(&[&["red", "blue", "yellow", "white"]], None);
        let goal = st(&[&["white", "yellow", "blue", "red"]], None);
        assert!(optimal_plans(&init, &goal, 1).is_empty());
    }

    #[test]
    fn pack_roundtrip() {
        for s in all_states(5) {
            assert_eq!(s.pack().unpack(), s);
        }
    }

    #[test]
    fn state_counts_match_lah_numbers() {
        // Ordered piles of labeled blocks with at most four piles: sum of Lah numbers L(n, k), k <= 4.
        assert_eq!(all_states(4).len(), 24 + 36 + 12 + 1);
        assert_eq!(all_states(5).len(), 120 + 240 + 120 + 20);
        assert_eq!(all_states(6).len(), 720 + 1800 + 1200 + 300);
    }

    #[test]
    fn action_json_shape() {
        let plan = vec![
            Action::PickUp(c("blue")),
            Action::StackOn(c("red")),
            Action::StackOnTable,
        ];
        let json = serde_json::to_string(&plan).unwrap();
        assert_eq!(
            json,
            r#"[{"pick-up":"blue"},{"stack-on":"red"},{"stack-on":"table"}]"#
        );
        let back: Vec<Action> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn empty_color_set_is_config_error() {
        let cfg = GenConfig {
            colors: vec![],
            ..GenConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(GenError::Config(_))));
    }
}
