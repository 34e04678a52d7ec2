//! Last-token extraction rates (logit lens over sub-layer outputs) and
//! attention-saliency information flow between prompt chunks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocksworld::PlanInstance;
use crate::model::{AttnGradPoint, Hooks, LensNorm, ModelError, Scalar, Transformer};
use crate::textgen::{render_all, render_full, ChunkKind, ChunkSpan, RenderedPrompt, Vocab};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("chunk {0:?} has an empty or out-of-range span")]
    EmptySpan(ChunkKind),
    #[error("chunk {0:?} missing from prompt")]
    MissingChunk(ChunkKind),
    #[error("no instances to analyze")]
    NoInstances,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Hidden vector read out by the logit lens at a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Mhsa,
    Mlp,
    LayerOut,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Mhsa, Component::Mlp, Component::LayerOut];

    pub fn label(self) -> &'static str {
        match self {
            Component::Mhsa => "mhsa",
            Component::Mlp => "mlp",
            Component::LayerOut => "layer_out",
        }
    }
}

/// Extraction rates indexed `[component][..]` in [`Component::ALL`] order;
/// layer index `l` is block `l + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub n_layers: usize,
    pub samples: usize,
    /// `[component][step][layer]` fraction of samples with an extraction event.
    pub per_step: Vec<Vec<Vec<f64>>>,
    /// `[component][layer]` mean over steps.
    pub mean: Vec<Vec<f64>>,
    /// `[component][layer]` population variance over steps.
    pub variance: Vec<Vec<f64>>,
}

impl ExtractionReport {
    pub fn mean_of(&self, c: Component, layer: usize) -> f64 {
        self.mean[c as usize][layer]
    }

    /// Mean rate over the middle third of the blocks.
    pub fn middle_third_mean(&self, c: Component) -> f64 {
        let r = middle_third(self.n_layers);
        let n = r.len().max(1) as f64;
        r.map(|l| self.mean[c as usize][l]).sum::<f64>() / n
    }

    pub fn to_csv(&self) -> String {
        let steps = self.per_step[0].len();
        let mut s = String::from("component,layer,mean,variance");
        for t in 1..=steps {
            s.push_str(&format!(",step_{t}"));
        }
        s.push('\n');
        for c in Component::ALL {
            let ci = c as usize;
            for l in 0..self.n_layers {
                s.push_str(&format!(
                    "{},{},{:.6},{:.6}",
                    c.label(),
                    l + 1,
                    self.mean[ci][l],
                    self.variance[ci][l]
                ));
                for t in 0..steps {
                    s.push_str(&format!(",{:.6}", self.per_step[ci][t][l]));
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Zero-based block indices in the middle third (at least one block).
pub fn middle_third(n_layers: usize) -> std::ops::Range<usize> {
    let lo = n_layers / 3;
    let hi = (n_layers - n_layers / 3).max(lo + 1);
    lo..hi.min(n_layers)
}

/// Compares the logit-lens readout of every component at the last prompt
/// token against the model's prediction there.
///
/// The prediction `e*` is `argmax(E x^L)`, computed through the same lens
/// path as the per-layer readouts.
pub fn extraction_rates<T: Scalar>(
    model: &Transformer<T>,
    instances: &[PlanInstance],
    vocab: &Vocab,
    norm: LensNorm,
) -> Result<ExtractionReport, FlowError> {
    if instances.is_empty() {
        return Err(FlowError::NoInstances);
    }
    let nl = model.config.n_layers;
    let steps = instances.iter().map(|i| i.plan.len()).max().unwrap_or(0);
    let mut events = vec![vec![vec![0usize; nl]; steps]; 3];
    let mut seen = vec![0usize; steps];
    for inst in instances {
        let full = render_full(inst, vocab);
        let trace = model.forward(&full.tokens, &Hooks::none())?;
        for (t, &(_, decision)) in full.steps.iter().enumerate() {
            let pos = decision - 1;
            seen[t] += 1;
            let target = model.logit_lens(trace.layer_output(nl, pos), LensNorm::Raw);
            for l in 0..nl {
                let hs = [
                    trace.attn_output(l, pos),
                    trace.mlp_output(l, pos),
                    trace.layer_output(l + 1, pos),
                ];
                for (ci, h) in hs.into_iter().enumerate() {
                    let lens = if ci == 2 && l + 1 == nl {
                        LensNorm::Raw
                    } else {
                        norm
                    };
                    if model.logit_lens(h, lens) == target {
                        events[ci][t][l] += 1;
                    }
                }
            }
        }
    }
    let per_step: Vec<Vec<Vec<f64>>> = events
        .iter()
        .map(|c| {
            c.iter()
                .zip(&seen)
                .map(|(row, &n)| row.iter().map(|&e| e as f64 / n.max(1) as f64).collect())
                .collect()
        })
        .collect();
    let mut mean = vec![vec![0.0; nl]; 3];
    let mut variance = vec![vec![0.0; nl]; 3];
    for c in 0..3 {
        for l in 0..nl {
            let xs: Vec<f64> = (0..steps)
                .filter(|&t| seen[t] > 0)
                .map(|t| per_step[c][t][l])
                .collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            mean[c][l] = m;
            variance[c][l] = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        }
    }
    Ok(ExtractionReport {
        n_layers: nl,
        samples: instances.len(),
        per_step,
        mean,
        variance,
    })
}

/// Which token the saliency loss is taken against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowTarget {
    #[default]
    Gold,
    /// The model's own argmax prediction.
    Argmax,
}

/// Per-layer token-to-token saliency, each `n x n` with row = query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenFlow {
    pub n: usize,
    pub layers: Vec<Vec<f64>>,
}

impl TokenFlow {
    pub fn at(&self, layer: usize, i: usize, j: usize) -> f64 {
        self.layers[layer][i * self.n + j]
    }
}

/// `|sum_h A_h * G_h|` entrywise, with heads stacked as `h x n x n`.
/// The absolute value is taken after the head sum.
pub fn saliency<T: Scalar>(probs: &[T], grads: &[T], heads: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * n];
    for h in 0..heads {
        let a = &probs[h * n * n..][..n * n];
        let g = &grads[h * n * n..][..n * n];
        for k in 0..n * n {
            out[k] += a[k].to_f64().unwrap() * g[k].to_f64().unwrap();
        }
    }
    out.iter_mut().for_each(|x| *x = x.abs());
    out
}

/// Saliency of every attention edge for the cross-entropy at the prompt's
/// last token.
pub fn token_flow<T: Scalar>(
    model: &Transformer<T>,
    prompt: &RenderedPrompt,
    target: FlowTarget,
    point: AttnGradPoint,
) -> Result<TokenFlow, ModelError> {
    let pos = prompt.last_position();
    let gold = match target {
        FlowTarget::Gold => prompt.gold_token,
        FlowTarget::Argmax => {
            let trace = model.forward(&prompt.tokens, &Hooks::none())?;
            crate::model::linalg::argmax(trace.logits_at(pos)) as u32
        }
    };
    let (trace, grads) = model.grad_attention(&prompt.tokens, pos, gold, point, &Hooks::none())?;
    let n = prompt.tokens.len();
    let heads = model.config.n_heads;
    let layers = grads
        .iter()
        .enumerate()
        .map(|(l, g)| {
            let probs: Vec<T> = (0..heads)
                .flat_map(|h| trace.attn_probs(l, h).iter().copied())
                .collect();
            saliency(&probs, g, heads, n)
        })
        .collect();
    Ok(TokenFlow { n, layers })
}

/// Mean of one layer's token flow over `target rows x source columns`.
pub fn chunk_value(layer: &[f64], n: usize, source: &ChunkSpan, target: &ChunkSpan) -> f64 {
    let mut sum = 0.0;
    for i in target.positions() {
        for j in source.positions() {
            sum += layer[i * n + j];
        }
    }
    sum / (source.len() * target.len()) as f64
}

/// Chunk-level flow into one target chunk, `values[source][layer]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkFlow {
    pub kinds: Vec<ChunkKind>,
    pub values: Vec<Vec<f64>>,
}

pub fn chunk_flow(
    flow: &TokenFlow,
    spans: &[ChunkSpan],
    target: ChunkKind,
) -> Result<ChunkFlow, FlowError> {
    for s in spans {
        if s.start > s.end || s.end >= flow.n {
            return Err(FlowError::EmptySpan(s.kind));
        }
    }
    let tgt = spans
        .iter()
        .find(|s| s.kind == target)
        .ok_or(FlowError::MissingChunk(target))?;
    let values = spans
        .iter()
        .map(|src| {
            flow.layers
                .iter()
                .map(|layer| chunk_value(layer, flow.n, src, tgt))
                .collect()
        })
        .collect();
    Ok(ChunkFlow {
        kinds: spans.iter().map(|s| s.kind).collect(),
        values,
    })
}

/// Chunk flow into the last token at one decision step, averaged over samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMatrix {
    pub step: usize,
    pub samples: usize,
    pub kinds: Vec<ChunkKind>,
    /// `[source chunk][layer]`.
    pub values: Vec<Vec<f64>>,
    /// Mean token-level flow when every sample's prompt has the same length.
    pub token: Option<TokenFlow>,
}

impl FlowMatrix {
    pub fn value(&self, kind: ChunkKind, layer: usize) -> Option<f64> {
        self.kinds
            .iter()
            .position(|&k| k == kind)
            .map(|i| self.values[i][layer])
    }

    /// Source chunks sorted by their maximum over layers, strongest first.
    pub fn ranking(&self) -> Vec<(ChunkKind, f64)> {
        let mut r: Vec<(ChunkKind, f64)> = self
            .kinds
            .iter()
            .zip(&self.values)
            .map(|(&k, v)| (k, v.iter().copied().fold(0.0, f64::max)))
            .collect();
        r.sort_by(|a, b| b.1.total_cmp(&a.1));
        r
    }

    pub fn to_csv(&self) -> String {
        let nl = self.values.first().map_or(0, Vec::len);
        let mut s = String::from("chunk");
        for l in 1..=nl {
            s.push_str(&format!(",layer_{l}"));
        }
        s.push('\n');
        for (k, row) in self.kinds.iter().zip(&self.values) {
            s.push_str(&k.label());
            for v in row {
                s.push_str(&format!(",{v:.8}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub target: FlowTarget,
    pub point: AttnGradPoint,
}

/// Flow into the last token for every decision step, averaged over instances.
pub fn flow_analysis<T: Scalar>(
    model: &Transformer<T>,
    instances: &[PlanInstance],
    vocab: &Vocab,
    cfg: FlowConfig,
) -> Result<Vec<FlowMatrix>, FlowError> {
    if instances.is_empty() {
        return Err(FlowError::NoInstances);
    }
    let mut acc: Vec<Option<FlowAcc>> = Vec::new();
    for inst in instances {
        for prompt in render_all(inst, vocab) {
            let flow = token_flow(model, &prompt, cfg.target, cfg.point)?;
            let chunks = chunk_flow(&flow, &prompt.spans, ChunkKind::LastToken)?;
            let t = prompt.step_index - 1;
            if acc.len() <= t {
                acc.resize_with(t + 1, || None);
            }
            match &mut acc[t] {
                slot @ None => {
                    *slot = Some(FlowAcc {
                        samples: 1,
                        chunks,
                        token: Some(flow),
                    })
                }
                Some(a) => a.add(&chunks, &flow)?,
            }
        }
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .filter_map(|(t, a)| a.map(|a| a.finish(t + 1)))
        .collect())
}

struct FlowAcc {
    samples: usize,
    chunks: ChunkFlow,
    token: Option<TokenFlow>,
}

impl FlowAcc {
    fn add(&mut self, chunks: &ChunkFlow, flow: &TokenFlow) -> Result<(), FlowError> {
        if chunks.kinds != self.chunks.kinds {
            let missing = self
                .chunks
                .kinds
                .iter()
                .find(|k| !chunks.kinds.contains(k))
                .copied();
            return Err(FlowError::MissingChunk(
                missing.unwrap_or(ChunkKind::LastToken),
            ));
        }
        self.samples += 1;
        for (a, b) in self.chunks.values.iter_mut().zip(&chunks.values) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        match &mut self.token {
            Some(tok) if tok.n == flow.n => {
                for (a, b) in tok.layers.iter_mut().zip(&flow.layers) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
            }
            _ => self.token = None,
        }
        Ok(())
    }

    fn finish(mut self, step: usize) -> FlowMatrix {
        let n = self.samples as f64;
        self.chunks
            .values
            .iter_mut()
            .flatten()
            .for_each(|x| *x /= n);
        if let Some(tok) = &mut self.token {
            tok.layers.iter_mut().flatten().for_each(|x| *x /= n);
        }
        FlowMatrix {
            step,
            samples: self.samples,
            kinds: self.chunks.kinds,
            values: self.chunks.values,
            token: self.token,
        }
    }
}

/// Number of steps whose goal-state chunk ranks among the `top` strongest sources.
pub fn goal_state_hits(flows: &[FlowMatrix], top: usize) -> usize {
    flows
        .iter()
        .filter(|f| {
            f.ranking()
                .iter()
                .take(top)
                .any(|&(k, _)| k == ChunkKind::GoalState)
        })
        .count()
}

/// Mean flow from the two most recent history steps and from the first two,
/// averaged over layers. `None` before step 5.
pub fn recency(flow: &FlowMatrix) -> Option<(f64, f64)> {
    let t = flow.step;
    if t < 5 {
        return None;
    }
    let mean_of = |ks: [usize; 2]| -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0;
        for k in ks {
            let i = flow
                .kinds
                .iter()
                .position(|&c| c == ChunkKind::HistoryStep(k as u8))?;
            sum += flow.values[i].iter().sum::<f64>();
            n += flow.values[i].len();
        }
        Some(sum / n as f64)
    };
    Some((mean_of([t - 2, t - 1])?, mean_of([1, 2])?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(kind: ChunkKind, start: usize, end: usize) -> ChunkSpan {
        ChunkSpan { kind, start, end }
    }

    #[test]
    fn saliency_hand_example() {
        let a = [1.0, 0.0, 0.5, 0.5];
        let g = [0.2, 0.0, 0.1, -0.3];
        let s = saliency(&a, &g, 1, 2);
        let want = [0.2, 0.0, 0.05, 0.15];
        for (x, y) in s.iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_heads_cancel_before_abs() {
        let a = [1.0, 0.0, 0.5, 0.5, 1.0, 0.0, 0.5, 0.5];
        let g = [0.2, 0.0, 0.4, 0.1, -0.2, 0.0, -0.4, 0.1];
        let s = saliency(&a, &g, 2, 2);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[2], 0.0);
        assert!((s[3] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_gives_zero_flow() {
        let a = [1.0, 0.0, 0.3, 0.7];
        assert!(saliency(&a, &[0.0; 4], 1, 2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn chunk_average() {
        let n = 3;
        let layer = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.4, 0.9];
        let tgt = span(ChunkKind::LastToken, 2, 2);
        assert_eq!(
            chunk_value(&layer, n, &span(ChunkKind::InitToken, 0, 0), &tgt),
            0.2
        );
        assert!(
            (chunk_value(&layer, n, &span(ChunkKind::InitState, 0, 1), &tgt) - 0.3).abs() < 1e-12
        );
    }

    #[test]
    fn empty_span_rejected() {
        let flow = TokenFlow {
            n: 2,
            layers: vec![vec![0.0; 4]],
        };
        let spans = [
            span(ChunkKind::InitState, 1, 0),
            span(ChunkKind::LastToken, 1, 1),
        ];
        assert!(matches!(
            chunk_flow(&flow, &spans, ChunkKind::LastToken),
            Err(FlowError::EmptySpan(ChunkKind::InitState))
        ));
    }

    #[test]
    fn middle_third_ranges() {
        assert_eq!(middle_third(6), 2..4);
        assert_eq!(middle_third(4), 1..3);
        assert_eq!(middle_third(8), 2..6);
        assert_eq!(middle_third(1), 0..1);
    }

    #[test]
    fn ranking_and_hits() {
        let f = FlowMatrix {
            step: 5,
            samples: 1,
            kinds: vec![
                ChunkKind::GoalState,
                ChunkKind::HistoryStep(1),
                ChunkKind::HistoryStep(2),
                ChunkKind::HistoryStep(3),
                ChunkKind::HistoryStep(4),
            ],
            values: vec![
                vec![0.5, 0.1],
                vec![0.1, 0.1],
                vec![0.1, 0.3],
                vec![0.2, 0.2],
                vec![0.6, 0.0],
            ],
            token: None,
        };
        assert_eq!(f.ranking()[0].0, ChunkKind::HistoryStep(4));
        assert_eq!(goal_state_hits(std::slice::from_ref(&f), 2), 1);
        assert_eq!(goal_state_hits(std::slice::from_ref(&f), 1), 0);
        let (recent, early) = recency(&f).unwrap();
        assert!((recent - 0.25).abs() < 1e-12);
        assert!((early - 0.15).abs() < 1e-12);
    }
}
