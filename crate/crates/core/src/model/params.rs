use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::Scalar;
use super::ModelConfig;

/// Slots of one transformer block inside the flat parameter buffer.
#[derive(Clone, Debug)]
pub struct LayerSlots {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    /// `d x 3d`, columns ordered query | key | value.
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_in: Range<usize>,
    pub b_in: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

/// Named tensors packed into one contiguous buffer.
#[derive(Clone, Debug)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerSlots>,
    /// Decoder matrix `|V| x d`.
    pub unembed: Range<usize>,
    pub tensors: Vec<TensorInfo>,
    pub len: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let mut b = Builder::default();
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let tok_emb = b.push("tok_emb".into(), &[v, d]);
        let pos_emb = b.push("pos_emb".into(), &[cfg.max_seq, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut p =
                    |name: &str, shape: &[usize]| b.push(format!("layers.{l}.{name}"), shape);
                LayerSlots {
                    ln1_g: p("ln1.gamma", &[d]),
                    ln1_b: p("ln1.beta", &[d]),
                    w_qkv: p("attn.w_qkv", &[d, 3 * d]),
                    b_qkv: p("attn.b_qkv", &[3 * d]),
                    w_o: p("attn.w_o", &[d, d]),
                    b_o: p("attn.b_o", &[d]),
                    ln2_g: p("ln2.gamma", &[d]),
                    ln2_b: p("ln2.beta", &[d]),
                    w_in: p("mlp.w_in", &[d, f]),
                    b_in: p("mlp.b_in", &[f]),
                    w_out: p("mlp.w_out", &[f, d]),
                    b_out: p("mlp.b_out", &[d]),
                }
            })
            .collect();
        let unembed = b.push("unembed".into(), &[v, d]);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            unembed,
            len: b.len,
            tensors: b.tensors,
        }
    }

    /// Slots that receive weight decay (matrices, not gains, biases or embeddings).
    pub fn decayed(&self) -> Vec<Range<usize>> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.w_qkv.clone(),
                    l.w_o.clone(),
                    l.w_in.clone(),
                    l.w_out.clone(),
                ]
            })
            .chain(std::iter::once(self.unembed.clone()))
            .collect()
    }
}

#[derive(Default)]
struct Builder {
    tensors: Vec<TensorInfo>,
    len: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: &[usize]) -> Range<usize> {
        let size: usize = shape.iter().product();
        let range = self.len..self.len + size;
        self.len += size;
        self.tensors.push(TensorInfo {
            name,
            shape: shape.to_vec(),
            range: range.clone(),
        });
        range
    }
}

/// GPT-2 style initialization: N(0, 0.02) weights, residual output
/// projections scaled by `1/sqrt(2L)`, unit gains, zero biases.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, layout: &Layout) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = vec![T::zero(); layout.len];
    let std = 0.02;
    let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
    let mut fill = |r: &Range<usize>, s: f64| {
        for x in &mut data[r.clone()] {
            *x = T::lit(s * normal(&mut rng));
        }
    };
    fill(&layout.tok_emb, std);
    fill(&layout.pos_emb, std);
    for l in &layout.layers {
        fill(&l.w_qkv, std);
        fill(&l.w_o, resid_std);
        fill(&l.w_in, std);
        fill(&l.w_out, resid_std);
    }
    fill(&layout.unembed, std);
    for l in &layout.layers {
        for g in [&l.ln1_g, &l.ln2_g] {
            data[g.clone()].fill(T::one());
        }
    }
    data
}

/// Standard normal draw via Box-Muller.
pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
