//! Teacher-forced training and step/plan success metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocksworld::{Level, PlanInstance, Split};
use crate::model::linalg::{argmax, Scalar};
use crate::model::{
    cross_entropy, cross_entropy_grad, Hooks, ModelConfig, ModelError, Transformer,
};
use crate::textgen::{render_full, FullRendering, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training loss became non-finite at step {step}")]
    Divergence { step: usize },
    #[error("no training instances")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the peak (cosine decay).
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Log a held-out evaluation every this many epochs (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 3e-4,
            min_lr_ratio: 0.1,
            warmup_steps: 100,
            weight_decay: 0.01,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            eval_every: 0,
        }
    }
}

/// A rendered instance with its loss targets.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub tokens: Vec<u32>,
    /// `(position, target)` for every plan-region token.
    pub targets: Vec<(usize, u32)>,
}

pub fn encode(instance: &PlanInstance, vocab: &Vocab) -> Encoded {
    let full = render_full(instance, vocab);
    let targets = (full.plan_start()..full.tokens.len())
        .map(|i| (i - 1, full.tokens[i]))
        .collect();
    Encoded {
        tokens: full.tokens,
        targets,
    }
}

/// Longest rendering over a dataset, for sizing `max_seq`.
pub fn max_len(instances: &[PlanInstance], vocab: &Vocab) -> usize {
    instances
        .iter()
        .map(|i| render_full(i, vocab).tokens.len())
        .max()
        .unwrap_or(0)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub final_loss: f64,
    pub seconds: f64,
}

impl TrainLog {
    /// Whether per-epoch loss, smoothed over a `window`-epoch moving
    /// average, never increases.
    pub fn smoothed_monotone(&self, window: usize) -> bool {
        let losses: Vec<f64> = self.epochs.iter().map(|e| e.mean_loss).collect();
        let w = window.max(1);
        let smooth: Vec<f64> = (0..losses.len())
            .map(|i| {
                let lo = i.saturating_sub(w - 1);
                losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect();
        smooth.windows(2).all(|p| p[1] <= p[0] + 1e-9)
    }
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    decay_mask: Vec<bool>,
}

impl Adam {
    fn new(model: &Transformer<f32>) -> Adam {
        let mut decay_mask = vec![false; model.params.len()];
        for r in model.layout.decayed() {
            decay_mask[r].fill(true);
        }
        Adam {
            m: vec![0.0; model.params.len()],
            v: vec![0.0; model.params.len()],
            t: 0,
            decay_mask,
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        let wd = cfg.weight_decay as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let mut update = mhat / (vhat.sqrt() + 1e-8);
            if self.decay_mask[i] {
                update += wd * params[i];
            }
            params[i] -= lr * update;
        }
    }
}

fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.learning_rate * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine)
}

/// Summed loss over a batch and accumulated gradients (already divided by
/// the number of targets).
pub fn batch_gradients<T: Scalar>(
    model: &Transformer<T>,
    batch: &[&Encoded],
    grads: &mut [T],
) -> f64 {
    let seqs: Vec<&[u32]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let trace = model.forward_batch(&seqs, &Hooks::none());
    let v = model.config.vocab_size;
    let count: usize = batch.iter().map(|e| e.targets.len()).sum();
    let inv = T::one() / T::from_usize(count.max(1)).unwrap();
    let mut dlogits = vec![T::zero(); trace.len() * v];
    let mut loss = 0.0;
    for (s, e) in batch.iter().enumerate() {
        let r0 = trace.seq_starts[s];
        for &(pos, target) in &e.targets {
            let row = r0 + pos;
            let logits = trace.logits_at(row);
            loss += cross_entropy(logits, target as usize).to_f64().unwrap();
            let out = &mut dlogits[row * v..][..v];
            cross_entropy_grad(logits, target as usize, out);
            for x in out.iter_mut() {
                *x *= inv;
            }
        }
    }
    grads.fill(T::zero());
    model.backward(&trace, &dlogits, &Hooks::none(), Some(grads), None);
    loss / count.max(1) as f64
}

/// Observer for progress reporting.
pub trait Progress {
    fn epoch(&mut self, _log: &EpochLog) {}
    fn step(&mut self, _step: usize, _total: usize, _loss: f64) {}
}

impl Progress for () {}

/// Trains a fresh model on the train split of `dataset`.
pub fn train(
    dataset: &[PlanInstance],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    vocab: &Vocab,
    held_out: &[PlanInstance],
    progress: &mut dyn Progress,
) -> Result<(Transformer<f32>, TrainLog), TrainError> {
    let examples: Vec<Encoded> = dataset
        .iter()
        .filter(|i| i.split == Split::Train)
        .map(|i| encode(i, vocab))
        .collect();
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = Transformer::<f32>::new(model_cfg)?;
    for e in &examples {
        model.check_tokens(&e.tokens)?;
    }
    let mut adam = Adam::new(&model);
    let mut grads = vec![0.0f32; model.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut log = TrainLog::default();
    let started = Instant::now();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Encoded> = chunk.iter().map(|&i| &examples[i]).collect();
            let loss = batch_gradients(&model, &batch, &mut grads);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Divergence { step });
            }
            let norm = grads
                .iter()
                .map(|&g| (g as f64) * (g as f64))
                .sum::<f64>()
                .sqrt();
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let s = (cfg.grad_clip / norm) as f32;
                grads.iter_mut().for_each(|g| *g *= s);
            }
            adam.step(&mut model.params, &grads, lr_at(step, total, cfg), cfg);
            loss_sum += loss;
            step += 1;
            progress.step(step, total, loss);
        }
        let mut entry = EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / per_epoch as f64,
            seconds: epoch_start.elapsed().as_secs_f64(),
            eval: None,
        };
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && !held_out.is_empty() {
            entry.eval = Some(evaluate(&model, held_out, vocab));
        }
        progress.epoch(&entry);
        log.epochs.push(entry);
    }
    log.steps = step;
    log.final_loss = log.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
    log.seconds = started.elapsed().as_secs_f64();
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Fraction of correct steps.
pub fn step_success(r: &[bool]) -> f64 {
    if r.is_empty() {
        return 0.0;
    }
    r.iter().filter(|&&x| x).count() as f64 / r.len() as f64
}

/// Fraction of fully correct plans.
pub fn plan_success(plans: &[bool]) -> f64 {
    step_success(plans)
}

/// Per-instance teacher-forced outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: String,
    pub num_colors: usize,
    pub level: Level,
    pub steps: Vec<bool>,
    /// Whether every token of the step, not just the decision, was predicted.
    pub full_steps: Vec<bool>,
    pub predicted: Vec<u32>,
}

impl InstanceResult {
    pub fn plan_correct(&self) -> bool {
        self.steps.iter().all(|&x| x)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub steps: usize,
    pub plans: usize,
    pub s_step: f64,
    pub s_plan: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub s_step: f64,
    pub s_plan: f64,
    pub steps: usize,
    pub plans: usize,
    /// Step success when every token of the step must match.
    pub s_step_full_string: f64,
    /// Keyed by "L3", "6 blocks", "6 blocks L3".
    pub breakdown: BTreeMap<String, Breakdown>,
}

/// Teacher-forced predictions for one instance from a single forward pass:
/// by causality, the logits at each step's last token equal those of the
/// step prompt on its own.
pub fn evaluate_instance<T: Scalar>(
    model: &Transformer<T>,
    instance: &PlanInstance,
    vocab: &Vocab,
) -> InstanceResult {
    evaluate_batch(model, std::slice::from_ref(instance), vocab)
        .pop()
        .unwrap()
}

fn evaluate_batch<T: Scalar>(
    model: &Transformer<T>,
    instances: &[PlanInstance],
    vocab: &Vocab,
) -> Vec<InstanceResult> {
    let fulls: Vec<FullRendering> = instances.iter().map(|i| render_full(i, vocab)).collect();
    let seqs: Vec<&[u32]> = fulls.iter().map(|f| f.tokens.as_slice()).collect();
    let trace = model.forward_batch(&seqs, &Hooks::none());
    instances
        .iter()
        .zip(&fulls)
        .enumerate()
        .map(|(s, (inst, full))| {
            let r0 = trace.seq_starts[s];
            let pred = |pos: usize| argmax(trace.logits_at(r0 + pos)) as u32;
            let mut steps = Vec::new();
            let mut full_steps = Vec::new();
            let mut predicted = Vec::new();
            for &(start, decision) in &full.steps {
                let p = pred(decision - 1);
                predicted.push(p);
                steps.push(p == full.tokens[decision]);
                full_steps.push((start..=decision).all(|i| pred(i - 1) == full.tokens[i]));
            }
            InstanceResult {
                id: inst.id.clone(),
                num_colors: inst.num_colors,
                level: inst.level,
                steps,
                full_steps,
                predicted,
            }
        })
        .collect()
}

/// Per-instance results, batched for throughput.
pub fn evaluate_instances<T: Scalar>(
    model: &Transformer<T>,
    instances: &[PlanInstance],
    vocab: &Vocab,
) -> Vec<InstanceResult> {
    instances
        .chunks(32)
        .flat_map(|c| evaluate_batch(model, c, vocab))
        .collect()
}

pub fn report(results: &[InstanceResult]) -> EvalReport {
    fn summarize<'a>(rs: impl Iterator<Item = &'a InstanceResult> + Clone) -> Breakdown {
        let steps: Vec<bool> = rs.clone().flat_map(|r| r.steps.iter().copied()).collect();
        let plans: Vec<bool> = rs.map(|r| r.plan_correct()).collect();
        Breakdown {
            steps: steps.len(),
            plans: plans.len(),
            s_step: step_success(&steps),
            s_plan: plan_success(&plans),
        }
    }
    let all = summarize(results.iter());
    let full: Vec<bool> = results
        .iter()
        .flat_map(|r| r.full_steps.iter().copied())
        .collect();
    let mut breakdown = BTreeMap::new();
    let mut keys: Vec<(usize, Level)> = results.iter().map(|r| (r.num_colors, r.level)).collect();
    keys.sort();
    keys.dedup();
    for &(n, l) in &keys {
        breakdown.insert(
            format!("{n} blocks {l}"),
            summarize(results.iter().filter(|r| r.num_colors == n && r.level == l)),
        );
        breakdown
            .entry(format!("{n} blocks"))
            .or_insert_with(|| summarize(results.iter().filter(|r| r.num_colors == n)));
        breakdown
            .entry(l.to_string())
            .or_insert_with(|| summarize(results.iter().filter(|r| r.level == l)));
    }
    EvalReport {
        s_step: all.s_step,
        s_plan: all.s_plan,
        steps: all.steps,
        plans: all.plans,
        s_step_full_string: step_success(&full),
        breakdown,
    }
}

pub fn evaluate<T: Scalar>(
    model: &Transformer<T>,
    instances: &[PlanInstance],
    vocab: &Vocab,
) -> EvalReport {
    report(&evaluate_instances(model, instances, vocab))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalysisSetError {
    #[error("only {found} fully correct L3 six-block plans available")]
    InsufficientCorrectPlans { found: usize },
}

/// Selection rules for the analysis set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisSetConfig {
    pub size: usize,
    pub seed: u64,
    pub level: Level,
    pub num_colors: usize,
    /// Skip plans with a table placement so every decision is a color.
    pub colors_only: bool,
}

impl Default for AnalysisSetConfig {
    fn default() -> Self {
        AnalysisSetConfig {
            size: 400,
            seed: 0,
            level: Level::L3,
            num_colors: 6,
            colors_only: true,
        }
    }
}

/// Ids of fully correct test plans of the configured level and color count.
///
/// Returns all candidates (fewer than `size`) alongside the error when not
/// enough exist; zero candidates is an error with an empty list.
pub fn collect_analysis_set<T: Scalar>(
    model: &Transformer<T>,
    test: &[PlanInstance],
    vocab: &Vocab,
    cfg: &AnalysisSetConfig,
) -> Result<Vec<String>, (AnalysisSetError, Vec<String>)> {
    let pool: Vec<PlanInstance> = test
        .iter()
        .filter(|i| {
            i.split == Split::Test && i.level == cfg.level && i.num_colors == cfg.num_colors
        })
        .filter(|i| !cfg.colors_only || !i.uses_table())
        .cloned()
        .collect();
    let mut correct: Vec<String> = evaluate_instances(model, &pool, vocab)
        .into_iter()
        .filter(InstanceResult::plan_correct)
        .map(|r| r.id)
        .collect();
    correct.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    correct.shuffle(&mut rng);
    let found = correct.len();
    correct.truncate(cfg.size);
    correct.sort();
    if found == 0 || found < cfg.size {
        return Err((
            AnalysisSetError::InsufficientCorrectPlans { found },
            correct,
        ));
    }
    Ok(correct)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_arithmetic() {
        assert_eq!(step_success(&[true, false, true, true]), 0.75);
        assert_eq!(plan_success(&[true, true, false]), 2.0 / 3.0);
    }

    #[test]
    fn one_wrong_step_fails_plan_only() {
        let r = InstanceResult {
            id: "x".into(),
            num_colors: 6,
            level: Level::L2,
            steps: vec![true, true, false, true],
            full_steps: vec![true; 4],
            predicted: vec![0; 4],
        };
        let rep = report(&[r]);
        assert_eq!(rep.s_plan, 0.0);
        assert_eq!(rep.s_step, 0.75);
        assert_eq!(rep.plans, 1);
    }

    #[test]
    fn cosine_schedule_bounds() {
        let cfg = TrainConfig {
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert!(lr_at(0, 100, &cfg) < cfg.learning_rate);
        assert!((lr_at(10, 100, &cfg) - cfg.learning_rate).abs() < 1e-12);
        assert!((lr_at(100, 100, &cfg) - cfg.learning_rate * cfg.min_lr_ratio).abs() < 1e-12);
    }

    #[test]
    fn smoothed_monotone_detects_rise() {
        let mk = |ls: &[f64]| TrainLog {
            epochs: ls
                .iter()
                .enumerate()
                .map(|(i, &l)| EpochLog {
                    epoch: i + 1,
                    mean_loss: l,
                    ..Default::default()
                })
                .collect(),
            ..Default::default()
        };
        assert!(mk(&[3.0, 2.0, 1.5, 1.4]).smoothed_monotone(1));
        assert!(!mk(&[3.0, 2.0, 2.5]).smoothed_monotone(1));
        assert!(mk(&[3.0, 2.0, 2.1, 1.0]).smoothed_monotone(2));
    }
}
