//! Probes on frozen hidden states (current block relations, future
//! decisions) and single-step causal impact via key masking.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocksworld::{Color, PlanInstance, Support, WorldState};
use crate::model::linalg::{gemm, softmax_in_place, View, ViewMut};
use crate::model::{Hooks, ModelError, Scalar, Transformer};
use crate::textgen::{
    color_positions, history_kinds, render_all, render_full, ChunkKind, Decision, FullRendering,
    Vocab,
};

pub const SKY: u8 = 6;
pub const TABLE: u8 = 7;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("state lacks color {0:?}; state labels need all six blocks")]
    MissingColor(Color),
    #[error("chunk {0:?} cannot be probed")]
    UnsupportedChunk(ChunkKind),
    #[error("instance {id} step {step} places a block on the table; decision probes need colors")]
    TableDecision { id: String, step: usize },
    #[error("no samples")]
    NoSamples,
    #[error("every slot has a single class in the training split")]
    DegenerateLabels,
    #[error("illegal plan in {0}")]
    IllegalPlan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Block relations of a six-block state: slot `2c` is what sits on color
/// `c` (a color or [`SKY`]), slot `2c + 1` what `c` sits on (a color or
/// [`TABLE`]). A held block has sky above and table below.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateLabel(pub [u8; 12]);

impl StateLabel {
    pub fn of(state: &WorldState) -> Result<StateLabel, ProbeError> {
        let mut slots = [0u8; 12];
        for c in Color::ALL {
            let i = c.index();
            slots[2 * i] = SKY;
            slots[2 * i + 1] = match state.support_of(c).ok_or(ProbeError::MissingColor(c))? {
                Support::Table | Support::Held => TABLE,
                Support::Block(b) => b.index() as u8,
            };
        }
        for c in Color::ALL {
            let below = slots[2 * c.index() + 1];
            if below < SKY {
                slots[2 * below as usize] = c.index() as u8;
            }
        }
        Ok(StateLabel(slots))
    }

    pub fn above(&self, c: Color) -> u8 {
        self.0[2 * c.index()]
    }

    pub fn below(&self, c: Color) -> u8 {
        self.0[2 * c.index() + 1]
    }

    /// `above(c) = c'` exactly when `below(c') = c`.
    pub fn is_consistent(&self) -> bool {
        Color::ALL.iter().all(|&c| {
            let a = self.above(c);
            let ok_above =
                a == SKY || (a < SKY && self.below(Color::ALL[a as usize]) == c.index() as u8);
            let b = self.below(c);
            let ok_below =
                b == TABLE || (b < SKY && self.above(Color::ALL[b as usize]) == c.index() as u8);
            ok_above && ok_below
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProbeTask {
    StatePairs,
    FutureDecision,
}

impl ProbeTask {
    pub fn slots(self) -> usize {
        match self {
            ProbeTask::StatePairs => 12,
            ProbeTask::FutureDecision => 6,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            ProbeTask::StatePairs => 8,
            ProbeTask::FutureDecision => 6,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ProbeTask::StatePairs => "state",
            ProbeTask::FutureDecision => "future",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProbeKind {
    Linear,
    Nonlinear,
}

impl ProbeKind {
    pub fn label(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Nonlinear => "nonlinear",
        }
    }
}

/// Which token(s) of a chunk feed the probe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeaturePosition {
    #[default]
    Last,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub weight_decay: f64,
    pub linear: OptimSettings,
    pub nonlinear: OptimSettings,
    pub hidden: usize,
    pub train_fraction: f64,
    /// Stop once the training loss improves by less than this over 10 epochs.
    pub plateau_tol: f64,
    pub feature: FeaturePosition,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    pub optimizer: ProbeOptimizer,
    pub learning_rate: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeOptimizer {
    /// Full-batch gradient descent.
    #[default]
    Gd,
    Adam,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            weight_decay: 1e-4,
            linear: OptimSettings {
                optimizer: ProbeOptimizer::Gd,
                learning_rate: 1e-2,
            },
            nonlinear: OptimSettings {
                optimizer: ProbeOptimizer::Adam,
                learning_rate: 1e-3,
            },
            hidden: 256,
            train_fraction: 0.8,
            plateau_tol: 1e-6,
            feature: FeaturePosition::Last,
            seed: 0,
        }
    }
}

/// Chunks with a defined state and a defined "current step".
pub fn probe_chunks(steps: usize) -> Vec<ChunkKind> {
    let mut v = vec![ChunkKind::InitState, ChunkKind::GoalState];
    v.extend((1..=steps).map(|k| ChunkKind::HistoryStep(k as u8)));
    v
}

fn chunk_range(full: &FullRendering, chunk: ChunkKind) -> Result<(usize, usize), ProbeError> {
    match chunk {
        ChunkKind::InitState => Ok(full.init_state),
        ChunkKind::GoalState => Ok(full.goal_state),
        ChunkKind::HistoryStep(k) if k >= 1 && (k as usize) <= full.steps.len() => {
            Ok(full.steps[k as usize - 1])
        }
        other => Err(ProbeError::UnsupportedChunk(other)),
    }
}

/// Steps already taken when a chunk ends.
fn chunk_step(chunk: ChunkKind) -> usize {
    match chunk {
        ChunkKind::HistoryStep(k) => k as usize,
        _ => 0,
    }
}

/// Hidden vectors of every probe chunk at every layer, one forward per instance.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub ids: Vec<String>,
    pub d: usize,
    pub n_layers: usize,
    pub chunks: Vec<ChunkKind>,
    /// `[instance][chunk][layer]` flattened, each of width `d`; layer 0 is the embedding.
    data: Vec<f64>,
    state_labels: Vec<Vec<StateLabel>>,
    decisions: Vec<Vec<u8>>,
}

impl FeatureBank {
    pub fn extract<T: Scalar>(
        model: &Transformer<T>,
        instances: &[PlanInstance],
        vocab: &Vocab,
        position: FeaturePosition,
    ) -> Result<FeatureBank, ProbeError> {
        let first = instances.first().ok_or(ProbeError::NoSamples)?;
        let chunks = probe_chunks(first.plan.len());
        let (d, nl) = (model.config.d_model, model.config.n_layers);
        let mut data = Vec::with_capacity(instances.len() * chunks.len() * (nl + 1) * d);
        let mut state_labels = Vec::with_capacity(instances.len());
        let mut decisions = Vec::with_capacity(instances.len());
        for inst in instances {
            let full = render_full(inst, vocab);
            let trace = model.forward(&full.tokens, &Hooks::none())?;
            for &chunk in &chunks {
                let (s, e) = chunk_range(&full, chunk)?;
                for l in 0..=nl {
                    match position {
                        FeaturePosition::Last => data
                            .extend(trace.layer_output(l, e).iter().map(|x| x.to_f64().unwrap())),
                        FeaturePosition::Mean => {
                            let mut m = vec![0.0; d];
                            for p in s..=e {
                                m.iter_mut()
                                    .zip(trace.layer_output(l, p))
                                    .for_each(|(a, b)| *a += b.to_f64().unwrap());
                            }
                            let k = (e - s + 1) as f64;
                            data.extend(m.into_iter().map(|x| x / k));
                        }
                    }
                }
            }
            let traj = inst
                .trajectory()
                .map_err(|_| ProbeError::IllegalPlan(inst.id.clone()))?;
            let mut labels = Vec::with_capacity(chunks.len());
            for &chunk in &chunks {
                let state = match chunk {
                    ChunkKind::GoalState => &inst.goal,
                    c => &traj[chunk_step(c)],
                };
                labels.push(StateLabel::of(state)?);
            }
            state_labels.push(labels);
            let mut ds = Vec::with_capacity(inst.plan.len());
            for (k, &a) in inst.plan.iter().enumerate() {
                match Decision::of(a) {
                    Decision::Color(c) => ds.push(c.index() as u8),
                    Decision::Table => {
                        return Err(ProbeError::TableDecision {
                            id: inst.id.clone(),
                            step: k + 1,
                        })
                    }
                }
            }
            decisions.push(ds);
        }
        Ok(FeatureBank {
            ids: instances.iter().map(|i| i.id.clone()).collect(),
            d,
            n_layers: nl,
            chunks,
            data,
            state_labels,
            decisions,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn feature(&self, sample: usize, chunk: usize, layer: usize) -> &[f64] {
        let per = self.chunks.len() * (self.n_layers + 1) * self.d;
        &self.data[sample * per + (chunk * (self.n_layers + 1) + layer) * self.d..][..self.d]
    }

    /// Features and labels for one probe. `layer` is in `0..=n_layers`.
    pub fn dataset(
        &self,
        task: ProbeTask,
        chunk: ChunkKind,
        layer: usize,
    ) -> Result<ProbeData, ProbeError> {
        let ci = self
            .chunks
            .iter()
            .position(|&c| c == chunk)
            .ok_or(ProbeError::UnsupportedChunk(chunk))?;
        let n = self.len();
        let mut features = Vec::with_capacity(n * self.d);
        let mut labels = Vec::with_capacity(n * task.slots());
        for s in 0..n {
            features.extend_from_slice(self.feature(s, ci, layer));
            match task {
                ProbeTask::StatePairs => labels.extend_from_slice(&self.state_labels[s][ci].0),
                ProbeTask::FutureDecision => {
                    let mut row = self.decisions[s].clone();
                    row.resize(task.slots(), 0);
                    labels.extend(row);
                }
            }
        }
        let steps = self.decisions.first().map_or(0, Vec::len);
        let active = match task {
            ProbeTask::StatePairs => vec![true; 12],
            ProbeTask::FutureDecision => (0..6)
                .map(|s| s < steps && s >= chunk_step(chunk))
                .collect(),
        };
        Ok(ProbeData {
            ids: self.ids.clone(),
            d: self.d,
            task,
            features,
            labels,
            active,
        })
    }
}

/// Probe inputs; `labels` is `n x slots`, `active` marks evaluated slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub ids: Vec<String>,
    pub d: usize,
    pub task: ProbeTask,
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
    pub active: Vec<bool>,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> ProbeData {
        let slots = self.task.slots();
        ProbeData {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            d: self.d,
            task: self.task,
            features: rows
                .iter()
                .flat_map(|&r| self.features[r * self.d..][..self.d].iter().copied())
                .collect(),
            labels: rows
                .iter()
                .flat_map(|&r| self.labels[r * slots..][..slots].iter().copied())
                .collect(),
            active: self.active.clone(),
        }
    }

    /// Replaces every label with a uniformly random class.
    pub fn with_random_labels(&self, seed: u64) -> ProbeData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = self.task.classes() as u8;
        ProbeData {
            labels: self
                .labels
                .iter()
                .map(|_| rng.gen_range(0..classes))
                .collect(),
            ..self.clone()
        }
    }
}

/// Same-instance rows never straddle the split: ids are sorted, shuffled
/// with `seed`, and the first `fraction` go to training.
pub fn split_rows(ids: &[String], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((ids.len() as f64) * fraction).round() as usize;
    let (mut train, mut test) = (order[..cut].to_vec(), order[cut..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Softmax probe with per-slot class distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub kind: ProbeKind,
    pub task: ProbeTask,
    pub d: usize,
    pub hidden: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    params: Vec<f64>,
    /// Slots the probe was fit on.
    pub fitted: Vec<bool>,
    pub epochs_run: usize,
    pub final_loss: f64,
}

struct Shapes {
    d: usize,
    h: usize,
    o: usize,
}

impl Shapes {
    /// Offsets of W2, b2, W1, b1 (nonlinear) or W, b (linear, hidden = 0).
    fn ranges(&self, kind: ProbeKind) -> Vec<std::ops::Range<usize>> {
        let sizes = match kind {
            ProbeKind::Linear => vec![self.d * self.o, self.o],
            ProbeKind::Nonlinear => vec![self.d * self.h, self.h, self.h * self.o, self.o],
        };
        let mut at = 0;
        sizes
            .into_iter()
            .map(|s| {
                at += s;
                at - s..at
            })
            .collect()
    }
}

impl Probe {
    fn shapes(&self) -> Shapes {
        Shapes {
            d: self.d,
            h: self.hidden,
            o: self.task.slots() * self.task.classes(),
        }
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.chunks_exact(self.d)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), s)| (v - m) * s)
            })
            .collect()
    }

    /// Logits `n x (slots * classes)` and, for the nonlinear probe, the
    /// pre-activation hidden layer.
    fn logits(&self, x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let sh = self.shapes();
        let r = sh.ranges(self.kind);
        let p = &self.params;
        let affine = |input: &[f64], k: usize, w: &[f64], b: &[f64], out_w: usize| {
            let mut out: Vec<f64> = b.iter().copied().cycle().take(n * out_w).collect();
            gemm(
                1.0,
                View::new(input, n, k),
                View::new(w, k, out_w),
                1.0,
                ViewMut::new(&mut out, n, out_w),
            );
            out
        };
        match self.kind {
            ProbeKind::Linear => (
                affine(x, sh.d, &p[r[0].clone()], &p[r[1].clone()], sh.o),
                Vec::new(),
            ),
            ProbeKind::Nonlinear => {
                let pre = affine(x, sh.d, &p[r[0].clone()], &p[r[1].clone()], sh.h);
                let act: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
                (
                    affine(&act, sh.h, &p[r[2].clone()], &p[r[3].clone()], sh.o),
                    pre,
                )
            }
        }
    }

    /// Predicted class per slot, `n x slots`.
    pub fn predict(&self, features: &[f64]) -> Vec<u8> {
        let n = features.len() / self.d;
        let (z, _) = self.logits(&self.standardize(features), n);
        let c = self.task.classes();
        z.chunks_exact(c)
            .map(|row| crate::model::linalg::argmax(row) as u8)
            .collect()
    }

    /// Mean cross-entropy over fitted slots and its gradient.
    fn loss_grad(&self, x: &[f64], labels: &[u8], n: usize, grad: &mut [f64]) -> f64 {
        let sh = self.shapes();
        let (slots, c) = (self.task.slots(), self.task.classes());
        let (z, pre) = self.logits(x, n);
        let fitted = self.fitted.iter().filter(|&&f| f).count().max(1);
        let norm = 1.0 / (n * fitted) as f64;
        let mut dz = vec![0.0; n * sh.o];
        let mut loss = 0.0;
        for i in 0..n {
            for s in (0..slots).filter(|&s| self.fitted[s]) {
                let gold = labels[i * slots + s] as usize;
                let mut row = z[i * sh.o + s * c..][..c].to_vec();
                softmax_in_place(&mut row);
                loss -= row[gold].max(1e-300).ln();
                row[gold] -= 1.0;
                for (g, v) in dz[i * sh.o + s * c..][..c].iter_mut().zip(row) {
                    *g = v * norm;
                }
            }
        }
        grad.fill(0.0);
        let r = sh.ranges(self.kind);
        let p = &self.params;
        let col_sums = |m: &[f64], w: usize, out: &mut [f64]| {
            for row in m.chunks_exact(w) {
                out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        };
        match self.kind {
            ProbeKind::Linear => {
                gemm(
                    1.0,
                    View::new(x, n, sh.d).t(),
                    View::new(&dz, n, sh.o),
                    0.0,
                    ViewMut::new(&mut grad[r[0].clone()], sh.d, sh.o),
                );
                col_sums(&dz, sh.o, &mut grad[r[1].clone()]);
            }
            ProbeKind::Nonlinear => {
                let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                gemm(
                    1.0,
                    View::new(&act, n, sh.h).t(),
                    View::new(&dz, n, sh.o),
                    0.0,
                    ViewMut::new(&mut grad[r[2].clone()], sh.h, sh.o),
                );
                col_sums(&dz, sh.o, &mut grad[r[3].clone()]);
                let mut dh = vec![0.0; n * sh.h];
                gemm(
                    1.0,
                    View::new(&dz, n, sh.o),
                    View::new(&p[r[2].clone()], sh.h, sh.o).t(),
                    0.0,
                    ViewMut::new(&mut dh, n, sh.h),
                );
                dh.iter_mut().zip(&pre).for_each(|(g, &v)| {
                    if v <= 0.0 {
                        *g = 0.0
                    }
                });
                gemm(
                    1.0,
                    View::new(x, n, sh.d).t(),
                    View::new(&dh, n, sh.h),
                    0.0,
                    ViewMut::new(&mut grad[r[0].clone()], sh.d, sh.h),
                );
                col_sums(&dh, sh.h, &mut grad[r[1].clone()]);
            }
        }
        loss * norm
    }
}

/// Fits a probe full-batch (plain gradient descent or Adam, per kind) on
/// per-slot cross-entropy with L2 decay on weights.
/// Active slots with a single training class are skipped.
pub fn train_probe(
    train: &ProbeData,
    kind: ProbeKind,
    cfg: &ProbeConfig,
) -> Result<Probe, ProbeError> {
    let (n, d, task) = (train.len(), train.d, train.task);
    if n == 0 {
        return Err(ProbeError::NoSamples);
    }
    let slots = task.slots();
    let fitted: Vec<bool> = (0..slots)
        .map(|s| {
            let first = train.labels[s];
            train.active[s] && (0..n).any(|i| train.labels[i * slots + s] != first)
        })
        .collect();
    if !fitted.iter().any(|&f| f) {
        return Err(ProbeError::DegenerateLabels);
    }
    let mut mean = vec![0.0; d];
    for row in train.features.chunks_exact(d) {
        mean.iter_mut()
            .zip(row)
            .for_each(|(m, v)| *m += v / n as f64);
    }
    let mut var = vec![0.0; d];
    for row in train.features.chunks_exact(d) {
        var.iter_mut()
            .zip(row)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n as f64);
    }
    let scale = var
        .iter()
        .map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 })
        .collect();
    let hidden = if kind == ProbeKind::Nonlinear {
        cfg.hidden
    } else {
        0
    };
    let mut probe = Probe {
        kind,
        task,
        d,
        hidden,
        mean,
        scale,
        params: Vec::new(),
        fitted,
        epochs_run: 0,
        final_loss: f64::NAN,
    };
    let sh = probe.shapes();
    let ranges = sh.ranges(kind);
    let total = ranges.last().unwrap().end;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fan_in: Vec<usize> = match kind {
        ProbeKind::Linear => vec![0, 0],
        ProbeKind::Nonlinear => vec![d, 0, sh.h, 0],
    };
    let mut params = vec![0.0; total];
    for (r, &fi) in ranges.iter().zip(&fan_in) {
        if fi > 0 {
            let lim = 1.0 / (fi as f64).sqrt();
            params[r.clone()]
                .iter_mut()
                .for_each(|w| *w = rng.gen_range(-lim..lim));
        }
    }
    probe.params = params;
    let decayed: Vec<bool> = ranges
        .iter()
        .enumerate()
        .flat_map(|(i, r)| std::iter::repeat(i % 2 == 0).take(r.len()))
        .collect();

    let x = probe.standardize(&train.features);
    let opt = match kind {
        ProbeKind::Linear => cfg.linear,
        ProbeKind::Nonlinear => cfg.nonlinear,
    };
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; total];
    let mut v = vec![0.0; total];
    let mut grad = vec![0.0; total];
    let mut history: Vec<f64> = Vec::new();
    for epoch in 1..=cfg.epochs {
        let loss = probe.loss_grad(&x, &train.labels, n, &mut grad);
        history.push(loss);
        for i in 0..total {
            let g = grad[i]
                + if decayed[i] {
                    cfg.weight_decay * probe.params[i]
                } else {
                    0.0
                };
            match opt.optimizer {
                ProbeOptimizer::Gd => probe.params[i] -= opt.learning_rate * g,
                ProbeOptimizer::Adam => {
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let mh = m[i] / (1.0 - f64::powi(b1, epoch as i32));
                    let vh = v[i] / (1.0 - f64::powi(b2, epoch as i32));
                    probe.params[i] -= opt.learning_rate * mh / (vh.sqrt() + eps);
                }
            }
        }
        probe.epochs_run = epoch;
        probe.final_loss = loss;
        if history.len() > 10 && history[history.len() - 11] - loss < cfg.plateau_tol {
            break;
        }
    }
    Ok(probe)
}

/// Support-weighted F1 over the classes present in `truth`.
pub fn weighted_f1(truth: &[u8], pred: &[u8], classes: usize) -> f64 {
    let mut score = 0.0;
    for c in 0..classes as u8 {
        let support = truth.iter().filter(|&&t| t == c).count();
        if support == 0 {
            continue;
        }
        let tp = truth
            .iter()
            .zip(pred)
            .filter(|&(&t, &p)| t == c && p == c)
            .count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        score += f1 * support as f64;
    }
    score / truth.len().max(1) as f64
}

pub fn accuracy(truth: &[u8], pred: &[u8]) -> f64 {
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len().max(1) as f64
}

/// Per-slot test scores of a fitted probe (`None` for unfitted slots).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub per_slot: Vec<Option<f64>>,
    /// Mean over fitted slots: weighted F1 for state probes, accuracy for decisions.
    pub score: f64,
    /// Mean plain accuracy over fitted slots.
    pub accuracy: f64,
}

pub fn eval_probe(probe: &Probe, test: &ProbeData) -> ProbeScores {
    let slots = probe.task.slots();
    let pred = probe.predict(&test.features);
    let n = test.len();
    let mut per_slot = vec![None; slots];
    let mut accs = Vec::new();
    for s in (0..slots).filter(|&s| probe.fitted[s] && test.active[s]) {
        let truth: Vec<u8> = (0..n).map(|i| test.labels[i * slots + s]).collect();
        let p: Vec<u8> = (0..n).map(|i| pred[i * slots + s]).collect();
        let acc = accuracy(&truth, &p);
        accs.push(acc);
        per_slot[s] = Some(match probe.task {
            ProbeTask::StatePairs => weighted_f1(&truth, &p, probe.task.classes()),
            ProbeTask::FutureDecision => acc,
        });
    }
    let fitted: Vec<f64> = per_slot.iter().flatten().copied().collect();
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    ProbeScores {
        score: mean(&fitted),
        accuracy: mean(&accs),
        per_slot,
    }
}

/// One probe result in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub task: ProbeTask,
    pub kind: ProbeKind,
    pub chunk: ChunkKind,
    pub layer: usize,
    pub control: bool,
    pub scores: ProbeScores,
    pub skipped_slots: Vec<usize>,
    pub epochs_run: usize,
}

/// Trains and scores a probe for every (chunk, layer, kind), plus a
/// random-label control for each.
pub fn probe_sweep(
    bank: &FeatureBank,
    task: ProbeTask,
    kinds: &[ProbeKind],
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeRecord>, ProbeError> {
    let (train_rows, test_rows) = split_rows(&bank.ids, cfg.train_fraction, cfg.seed);
    let mut out = Vec::new();
    let chunks: Vec<ChunkKind> = match task {
        ProbeTask::StatePairs => bank.chunks.clone(),
        // The last history step leaves nothing to predict.
        ProbeTask::FutureDecision => {
            let steps = bank.decisions.first().map_or(0, Vec::len);
            bank.chunks
                .iter()
                .copied()
                .filter(|&c| chunk_step(c) < steps)
                .collect()
        }
    };
    for &chunk in &chunks {
        for layer in 0..=bank.n_layers {
            let data = bank.dataset(task, chunk, layer)?;
            let control_data = data.with_random_labels(cfg.seed ^ 0x5eed ^ ((layer as u64) << 8));
            for &kind in kinds {
                for (control, d) in [(false, &data), (true, &control_data)] {
                    let train = d.subset(&train_rows);
                    let test = d.subset(&test_rows);
                    let probe = match train_probe(&train, kind, cfg) {
                        Ok(p) => p,
                        Err(ProbeError::DegenerateLabels) => continue,
                        Err(e) => return Err(e),
                    };
                    let skipped = (0..task.slots())
                        .filter(|&s| d.active[s] && !probe.fitted[s])
                        .collect();
                    out.push(ProbeRecord {
                        task,
                        kind,
                        chunk,
                        layer,
                        control,
                        scores: eval_probe(&probe, &test),
                        skipped_slots: skipped,
                        epochs_run: probe.epochs_run,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn probe_records_csv(records: &[ProbeRecord]) -> String {
    let slots = records.first().map_or(0, |r| r.scores.per_slot.len());
    let mut s = String::from("task,kind,chunk,layer,control,score,accuracy");
    for k in 1..=slots {
        s.push_str(&format!(",slot_{k}"));
    }
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6}",
            r.task.label(),
            r.kind.label(),
            r.chunk.label(),
            r.layer,
            r.control,
            r.scores.score,
            r.scores.accuracy
        ));
        for v in &r.scores.per_slot {
            match v {
                Some(x) => s.push_str(&format!(",{x:.6}")),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

/// Mean control accuracy over all control records of a task.
pub fn control_accuracy(records: &[ProbeRecord], task: ProbeTask) -> Option<f64> {
    let xs: Vec<f64> = records
        .iter()
        .filter(|r| r.task == task && r.control)
        .map(|r| r.scores.accuracy)
        .collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Best-over-layers accuracy for future step `s` probed at history step `k`,
/// `cells[s - 1][k - 1]` for `s > k >= 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FutureMatrix {
    pub kind: ProbeKind,
    pub steps: usize,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl FutureMatrix {
    pub fn get(&self, s: usize, k: usize) -> Option<f64> {
        self.cells
            .get(s - 1)
            .and_then(|r| r.get(k - 1))
            .copied()
            .flatten()
    }

    /// Count of adjacent decreases along row `s` (left to right).
    pub fn row_inversions(&self, s: usize) -> usize {
        let vals: Vec<f64> = (1..s).filter_map(|k| self.get(s, k)).collect();
        vals.windows(2).filter(|w| w[1] < w[0]).count()
    }

    /// Count of adjacent increases down column `k` (top to bottom).
    pub fn column_inversions(&self, k: usize) -> usize {
        let vals: Vec<f64> = (k + 1..=self.steps)
            .filter_map(|s| self.get(s, k))
            .collect();
        vals.windows(2).filter(|w| w[1] > w[0]).count()
    }

    /// Mean accuracy over cells with `s - k = distance`.
    pub fn lookahead_mean(&self, distance: usize) -> Option<f64> {
        let xs: Vec<f64> = (1..=self.steps)
            .filter(|&k| k + distance <= self.steps)
            .filter_map(|k| self.get(k + distance, k))
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("future_step");
        for k in 1..self.steps {
            s.push_str(&format!(",step_{k}"));
        }
        s.push('\n');
        for fs in 2..=self.steps {
            s.push_str(&fs.to_string());
            for k in 1..self.steps {
                match self.get(fs, k) {
                    Some(v) => s.push_str(&format!(",{v:.6}")),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn future_matrix(records: &[ProbeRecord], kind: ProbeKind, steps: usize) -> FutureMatrix {
    let mut cells = vec![vec![None; steps]; steps];
    for r in records
        .iter()
        .filter(|r| r.task == ProbeTask::FutureDecision && r.kind == kind && !r.control)
    {
        let ChunkKind::HistoryStep(k) = r.chunk else {
            continue;
        };
        let k = k as usize;
        for (si, v) in r.scores.per_slot.iter().enumerate() {
            let s = si + 1;
            if let Some(v) = *v {
                if s > k && s <= steps {
                    let cell: &mut Option<f64> = &mut cells[s - 1][k - 1];
                    *cell = Some(cell.map_or(v, |c: f64| c.max(v)));
                }
            }
        }
    }
    FutureMatrix { kind, steps, cells }
}

/// Probability of the gold decision at a prompt's last token with keys
/// zeroed at the history color positions of every step not in `visible`.
pub fn masked_gold_probability<T: Scalar>(
    model: &Transformer<T>,
    prompt: &crate::textgen::RenderedPrompt,
    visible: &[usize],
) -> Result<f64, ModelError> {
    let masked: Vec<ChunkKind> = history_kinds(prompt.step_index)
        .into_iter()
        .filter(|k| !matches!(k, ChunkKind::HistoryStep(i) if visible.contains(&(*i as usize))))
        .collect();
    let hooks = Hooks::key_zero(color_positions(prompt, &masked));
    gold_probability(model, prompt, &hooks)
}

pub fn gold_probability<T: Scalar>(
    model: &Transformer<T>,
    prompt: &crate::textgen::RenderedPrompt,
    hooks: &Hooks<T>,
) -> Result<f64, ModelError> {
    let trace = model.forward(&prompt.tokens, hooks)?;
    let mut p: Vec<f64> = trace
        .logits_at(prompt.last_position())
        .iter()
        .map(|x| x.to_f64().unwrap())
        .collect();
    softmax_in_place(&mut p);
    Ok(p[prompt.gold_token as usize])
}

/// `impact[t - 1][i - 1] = mean y''_{t,i} - mean y'_t` for `i < t`; row 1 is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactMatrix {
    pub steps: usize,
    pub samples: usize,
    pub baseline: Vec<Option<f64>>,
    pub impact: Vec<Vec<Option<f64>>>,
}

impl ImpactMatrix {
    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.impact
            .get(t - 1)
            .and_then(|r| r.get(i - 1))
            .copied()
            .flatten()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,baseline");
        for i in 1..self.steps {
            s.push_str(&format!(",visible_{i}"));
        }
        s.push('\n');
        for t in 2..=self.steps {
            s.push_str(&format!(
                "{t},{:.6}",
                self.baseline[t - 1].unwrap_or(f64::NAN)
            ));
            for i in 1..self.steps {
                match self.get(t, i) {
                    Some(v) => s.push_str(&format!(",{v:.6}")),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn impact_matrix<T: Scalar>(
    model: &Transformer<T>,
    instances: &[PlanInstance],
    vocab: &Vocab,
) -> Result<ImpactMatrix, ProbeError> {
    if instances.is_empty() {
        return Err(ProbeError::NoSamples);
    }
    let steps = instances.iter().map(|i| i.plan.len()).max().unwrap_or(0);
    let mut base_sum = vec![0.0; steps];
    let mut counts = vec![0usize; steps];
    let mut vis_sum: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for inst in instances {
        for prompt in render_all(inst, vocab).into_iter().skip(1) {
            let t = prompt.step_index;
            counts[t - 1] += 1;
            base_sum[t - 1] += masked_gold_probability(model, &prompt, &[])?;
            for i in 1..t {
                *vis_sum.entry((t, i)).or_default() +=
                    masked_gold_probability(model, &prompt, &[i])?;
            }
        }
    }
    let baseline: Vec<Option<f64>> = (0..steps)
        .map(|t| (counts[t] > 0).then(|| base_sum[t] / counts[t] as f64))
        .collect();
    let mut impact = vec![vec![None; steps]; steps];
    for (&(t, i), &sum) in &vis_sum {
        let y2 = sum / counts[t - 1] as f64;
        impact[t - 1][i - 1] = Some(y2 - baseline[t - 1].unwrap());
    }
    Ok(ImpactMatrix {
        steps,
        samples: instances.len(),
        baseline,
        impact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(n: &str) -> Color {
        Color::from_name(n).unwrap()
    }

    fn six_block_state() -> WorldState {
        WorldState::new(
            vec![
                vec![c("red"), c("blue")],
                vec![c("yellow"), c("white"), c("orange")],
                vec![c("purple")],
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn labels_follow_piles() {
        let l = StateLabel::of(&six_block_state()).unwrap();
        assert_eq!(l.below(c("blue")), c("red").index() as u8);
        assert_eq!(l.above(c("red")), c("blue").index() as u8);
        assert_eq!(l.above(c("blue")), SKY);
        assert_eq!(l.below(c("red")), TABLE);
        assert_eq!(l.above(c("purple")), SKY);
        assert_eq!(l.below(c("purple")), TABLE);
        assert!(l.is_consistent());
    }

    #[test]
    fn held_block_is_detached() {
        let s = six_block_state()
            .apply(crate::blocksworld::Action::PickUp(c("blue")))
            .unwrap();
        let l = StateLabel::of(&s).unwrap();
        assert_eq!(l.above(c("red")), SKY);
        assert_eq!(l.below(c("blue")), TABLE);
        assert_eq!(l.above(c("blue")), SKY);
        assert!(l.is_consistent());
    }

    #[test]
    fn five_block_state_rejected() {
        let s = WorldState::new(
            vec![
                vec![c("red")],
                vec![c("blue"), c("yellow"), c("white"), c("orange")],
            ],
            None,
        )
        .unwrap();
        assert!(matches!(
            StateLabel::of(&s),
            Err(ProbeError::MissingColor(_))
        ));
    }

    #[test]
    fn f1_and_accuracy() {
        assert_eq!(weighted_f1(&[0, 0, 1, 1], &[0, 0, 1, 1], 2), 1.0);
        // class 0: p = 1/2, r = 1/2; class 1: p = 1/2, r = 1/2
        assert!((weighted_f1(&[0, 0, 1, 1], &[0, 1, 0, 1], 2) - 0.5).abs() < 1e-12);
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 0]), 2.0 / 3.0);
    }

    fn one_hot_data(n: usize, task: ProbeTask, seed: u64) -> ProbeData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (slots, classes) = (task.slots(), task.classes());
        let d = slots * classes;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let mut f = vec![0.0; d];
            for s in 0..slots {
                let y = rng.gen_range(0..classes);
                labels.push(y as u8);
                f[s * classes + y] = 1.0;
            }
            features.extend(f);
        }
        ProbeData {
            ids: (0..n).map(|i| format!("x{i:04}")).collect(),
            d,
            task,
            features,
            labels,
            active: vec![true; slots],
        }
    }

    #[test]
    fn separable_features_are_recovered() {
        for kind in [ProbeKind::Linear, ProbeKind::Nonlinear] {
            let data = one_hot_data(800, ProbeTask::StatePairs, 3);
            let (tr, te) = split_rows(&data.ids, 0.8, 0);
            let probe = train_probe(&data.subset(&tr), kind, &ProbeConfig::default()).unwrap();
            let scores = eval_probe(&probe, &data.subset(&te));
            assert!(scores.score >= 0.99, "{kind:?} {}", scores.score);
        }
    }

    #[test]
    fn random_labels_score_near_chance() {
        let data = one_hot_data(400, ProbeTask::FutureDecision, 5).with_random_labels(9);
        let (tr, te) = split_rows(&data.ids, 0.8, 0);
        let probe = train_probe(
            &data.subset(&tr),
            ProbeKind::Linear,
            &ProbeConfig::default(),
        )
        .unwrap();
        let acc = eval_probe(&probe, &data.subset(&te)).accuracy;
        assert!((acc - 1.0 / 6.0).abs() < 0.06, "{acc}");
    }

    #[test]
    fn degenerate_slots_skipped() {
        let mut data = one_hot_data(50, ProbeTask::FutureDecision, 1);
        for i in 0..50 {
            data.labels[i * 6] = 2;
        }
        let probe = train_probe(&data, ProbeKind::Linear, &ProbeConfig::default()).unwrap();
        assert!(!probe.fitted[0]);
        assert!(probe.fitted[1..].iter().all(|&f| f));
        let mut all_same = data.clone();
        all_same.labels.iter_mut().for_each(|l| *l = 0);
        assert!(matches!(
            train_probe(&all_same, ProbeKind::Linear, &ProbeConfig::default()),
            Err(ProbeError::DegenerateLabels)
        ));
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let ids: Vec<String> = (0..100).map(|i| format!("i{i:03}")).collect();
        let (a, b) = split_rows(&ids, 0.8, 4);
        assert_eq!((a.len(), b.len()), (80, 20));
        assert!(a.iter().all(|x| !b.contains(x)));
        assert_eq!(split_rows(&ids, 0.8, 4), (a, b));
    }

    #[test]
    fn future_matrix_shape_and_trends() {
        let m = FutureMatrix {
            kind: ProbeKind::Linear,
            steps: 4,
            cells: vec![
                vec![None; 4],
                vec![Some(0.9), None, None, None],
                vec![Some(0.6), Some(0.8), None, None],
                vec![Some(0.7), Some(0.5), Some(0.9), None],
            ],
        };
        assert_eq!(m.get(2, 2), None);
        assert_eq!(m.column_inversions(1), 1);
        assert_eq!(m.row_inversions(4), 1);
        assert_eq!(m.lookahead_mean(2), Some(0.55));
    }
}
