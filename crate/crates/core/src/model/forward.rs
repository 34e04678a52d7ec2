use super::linalg::{gemm, layer_norm, linear, relu, Scalar, View, ViewMut};
use super::{Hooks, Transformer};

/// Per-layer intermediates kept for analysis and the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct LayerCache<T> {
    pub ln1: Vec<T>,
    pub ln1_mean: Vec<T>,
    pub ln1_rstd: Vec<T>,
    /// Queries | keys | values after hooks, `rows x 3d`.
    pub qkv: Vec<T>,
    /// Post-softmax attention, per sequence `heads x n x n` blocks.
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub attn_out: Vec<T>,
    pub x_mid: Vec<T>,
    pub ln2: Vec<T>,
    pub ln2_mean: Vec<T>,
    pub ln2_rstd: Vec<T>,
    pub pre: Vec<T>,
    pub act: Vec<T>,
    pub mlp_out: Vec<T>,
}

/// Activations of one forward pass over one or more sequences laid end to end.
///
/// Layer indices are zero-based; `layer_output(0, _)` is the embedding and
/// `layer_output(l + 1, _)` the residual stream after block `l`.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub(crate) d: usize,
    pub(crate) vocab: usize,
    pub(crate) heads: usize,
    pub(crate) seq_starts: Vec<usize>,
    pub(crate) seq_lens: Vec<usize>,
    pub(crate) prob_offsets: Vec<usize>,
    pub(crate) tokens: Vec<u32>,
    pub(crate) resid: Vec<Vec<T>>,
    pub(crate) layers: Vec<LayerCache<T>>,
    pub(crate) logits: Vec<T>,
}

impl<T: Scalar> Trace<T> {
    /// Total number of token rows.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.heads
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn logits_at(&self, row: usize) -> &[T] {
        &self.logits[row * self.vocab..][..self.vocab]
    }

    /// Residual stream `x^l` at a row, `l` in `0..=n_layers`.
    pub fn layer_output(&self, l: usize, row: usize) -> &[T] {
        &self.resid[l][row * self.d..][..self.d]
    }

    /// Attention sub-layer output of block `layer` at a row.
    pub fn attn_output(&self, layer: usize, row: usize) -> &[T] {
        &self.layers[layer].attn_out[row * self.d..][..self.d]
    }

    /// MLP sub-layer output of block `layer` at a row.
    pub fn mlp_output(&self, layer: usize, row: usize) -> &[T] {
        &self.layers[layer].mlp_out[row * self.d..][..self.d]
    }

    /// Attention pattern of the first sequence, `n x n`, row = query.
    pub fn attn_probs(&self, layer: usize, head: usize) -> &[T] {
        self.attn_probs_of(0, layer, head)
    }

    pub fn attn_probs_of(&self, seq: usize, layer: usize, head: usize) -> &[T] {
        let n = self.seq_lens[seq];
        &self.layers[layer].probs[self.prob_offsets[seq] + head * n * n..][..n * n]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

impl<T: Scalar> Transformer<T> {
    /// Runs every sequence through the model; dense sub-layers operate on all
    /// rows at once, attention per sequence. Tokens must be pre-validated.
    pub(crate) fn forward_batch(&self, seqs: &[&[u32]], hooks: &Hooks<T>) -> Trace<T> {
        let cfg = &self.config;
        let (d, f, v, nh) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
        let dh = cfg.head_dim();
        let p = &self.params;
        let lay = &self.layout;

        let mut seq_starts = Vec::with_capacity(seqs.len());
        let mut seq_lens = Vec::with_capacity(seqs.len());
        let mut prob_offsets = Vec::with_capacity(seqs.len());
        let (mut rows, mut probs_len) = (0, 0);
        for s in seqs {
            seq_starts.push(rows);
            seq_lens.push(s.len());
            prob_offsets.push(probs_len);
            rows += s.len();
            probs_len += nh * s.len() * s.len();
        }
        let tokens: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();

        let mut x = vec![T::zero(); rows * d];
        let tok_emb = &p[lay.tok_emb.clone()];
        let pos_emb = &p[lay.pos_emb.clone()];
        for (s, seq) in seqs.iter().enumerate() {
            for (i, &tok) in seq.iter().enumerate() {
                let row = &mut x[(seq_starts[s] + i) * d..][..d];
                let te = &tok_emb[tok as usize * d..][..d];
                let pe = &pos_emb[i * d..][..d];
                for k in 0..d {
                    row[k] = te[k] + pe[k];
                }
            }
        }

        let mut resid = Vec::with_capacity(cfg.n_layers + 1);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        for (li, slots) in lay.layers.iter().enumerate() {
            let mut ln1 = vec![T::zero(); rows * d];
            let mut ln1_mean = vec![T::zero(); rows];
            let mut ln1_rstd = vec![T::zero(); rows];
            layer_norm(
                &x,
                d,
                &p[slots.ln1_g.clone()],
                &p[slots.ln1_b.clone()],
                &mut ln1,
                &mut ln1_mean,
                &mut ln1_rstd,
            );

            let mut qkv = vec![T::zero(); rows * 3 * d];
            linear(
                &ln1,
                rows,
                d,
                &p[slots.w_qkv.clone()],
                &p[slots.b_qkv.clone()],
                3 * d,
                &mut qkv,
            );
            for s in 0..seqs.len() {
                for &pos in hooks.key_zero.iter().filter(|&&pos| pos < seq_lens[s]) {
                    qkv[(seq_starts[s] + pos) * 3 * d + d..][..d].fill(T::zero());
                }
            }
            for &(_, head) in hooks.zero_values.iter().filter(|&&(l, _)| l == li) {
                for row in qkv.chunks_exact_mut(3 * d) {
                    row[2 * d + head * dh..][..dh].fill(T::zero());
                }
            }

            let mut probs = vec![T::zero(); probs_len];
            let mut ctx = vec![T::zero(); rows * d];
            for s in 0..seqs.len() {
                let (r0, n) = (seq_starts[s], seq_lens[s]);
                let qkv_s = &qkv[r0 * 3 * d..(r0 + n) * 3 * d];
                let ctx_s = &mut ctx[r0 * d..(r0 + n) * d];
                for h in 0..nh {
                    let a = &mut probs[prob_offsets[s] + h * n * n..][..n * n];
                    gemm(
                        scale,
                        View::cols_of(qkv_s, n, 3 * d, h * dh, dh),
                        View::cols_of(qkv_s, n, 3 * d, d + h * dh, dh).t(),
                        T::zero(),
                        ViewMut::new(a, n, n),
                    );
                    for i in 0..n {
                        let row = &mut a[i * n..][..n];
                        super::linalg::softmax_in_place(&mut row[..=i]);
                        row[i + 1..].fill(T::zero());
                    }
                    let deltas: Vec<_> = hooks
                        .attn_delta
                        .iter()
                        .filter(|dl| dl.layer == li && dl.head == h)
                        .collect();
                    let perturbed;
                    let used: &[T] = if deltas.is_empty() {
                        a
                    } else {
                        let mut m = a.to_vec();
                        for dl in deltas {
                            for (x, &e) in m.iter_mut().zip(&dl.delta) {
                                *x += e;
                            }
                        }
                        perturbed = m;
                        &perturbed
                    };
                    gemm(
                        T::one(),
                        View::new(used, n, n),
                        View::cols_of(qkv_s, n, 3 * d, 2 * d + h * dh, dh),
                        T::zero(),
                        ViewMut::cols_of(ctx_s, n, d, h * dh, dh),
                    );
                }
            }

            let mut attn_out = vec![T::zero(); rows * d];
            linear(
                &ctx,
                rows,
                d,
                &p[slots.w_o.clone()],
                &p[slots.b_o.clone()],
                d,
                &mut attn_out,
            );
            let x_mid: Vec<T> = x.iter().zip(&attn_out).map(|(&a, &b)| a + b).collect();

            let mut ln2 = vec![T::zero(); rows * d];
            let mut ln2_mean = vec![T::zero(); rows];
            let mut ln2_rstd = vec![T::zero(); rows];
            layer_norm(
                &x_mid,
                d,
                &p[slots.ln2_g.clone()],
                &p[slots.ln2_b.clone()],
                &mut ln2,
                &mut ln2_mean,
                &mut ln2_rstd,
            );
            let mut pre = vec![T::zero(); rows * f];
            linear(
                &ln2,
                rows,
                d,
                &p[slots.w_in.clone()],
                &p[slots.b_in.clone()],
                f,
                &mut pre,
            );
            let act: Vec<T> = pre.iter().map(|&z| relu(z)).collect();
            let mut mlp_out = vec![T::zero(); rows * d];
            linear(
                &act,
                rows,
                f,
                &p[slots.w_out.clone()],
                &p[slots.b_out.clone()],
                d,
                &mut mlp_out,
            );

            let next: Vec<T> = x_mid.iter().zip(&mlp_out).map(|(&a, &b)| a + b).collect();
            resid.push(std::mem::replace(&mut x, next));
            layers.push(LayerCache {
                ln1,
                ln1_mean,
                ln1_rstd,
                qkv,
                probs,
                ctx,
                attn_out,
                x_mid,
                ln2,
                ln2_mean,
                ln2_rstd,
                pre,
                act,
                mlp_out,
            });
        }

        let mut logits = vec![T::zero(); rows * v];
        gemm(
            T::one(),
            View::new(&x, rows, d),
            View::new(&p[lay.unembed.clone()], v, d).t(),
            T::zero(),
            ViewMut::new(&mut logits, rows, v),
        );
        resid.push(x);

        Trace {
            d,
            vocab: v,
            heads: nh,
            seq_starts,
            seq_lens,
            prob_offsets,
            tokens,
            resid,
            layers,
            logits,
        }
    }
}
