use serde::{Deserialize, Serialize};

use super::linalg::{add_col_sums, gemm, layer_norm_backward, Scalar, View, ViewMut};
use super::{Hooks, Trace, Transformer};

/// Where attention gradients are read out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnGradPoint {
    /// With respect to the post-softmax probabilities, holding them as the
    /// differentiation point.
    #[default]
    PostSoftmax,
    /// With respect to the scaled pre-softmax scores.
    PreSoftmax,
}

impl<T: Scalar> Transformer<T> {
    /// Backpropagates `dlogits` (`rows x vocab`) through a recorded trace.
    ///
    /// Parameter gradients are accumulated into `grads` when given. When
    /// `capture` is set, returns per-layer attention gradients for the
    /// trace's sequences laid out like [`Trace::attn_probs_of`]; entries
    /// above the causal diagonal are exactly zero.
    pub(crate) fn backward(
        &self,
        trace: &Trace<T>,
        dlogits: &[T],
        hooks: &Hooks<T>,
        mut grads: Option<&mut [T]>,
        capture: Option<AttnGradPoint>,
    ) -> Option<Vec<Vec<T>>> {
        let cfg = &self.config;
        let (d, f, v, nh) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
        let dh = cfg.head_dim();
        let rows = trace.len();
        let p = &self.params;
        let lay = &self.layout;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let n_layers = cfg.n_layers;

        let x_final = &trace.resid[n_layers];
        let mut dx = vec![T::zero(); rows * d];
        gemm(
            T::one(),
            View::new(dlogits, rows, v),
            View::new(&p[lay.unembed.clone()], v, d),
            T::zero(),
            ViewMut::new(&mut dx, rows, d),
        );
        if let Some(g) = grads.as_deref_mut() {
            gemm(
                T::one(),
                View::new(dlogits, rows, v).t(),
                View::new(x_final, rows, d),
                T::one(),
                ViewMut::new(&mut g[lay.unembed.clone()], v, d),
            );
        }

        let mut captured: Vec<Vec<T>> = Vec::new();
        if capture.is_some() {
            captured.resize(n_layers, Vec::new());
        }

        for li in (0..n_layers).rev() {
            let slots = &lay.layers[li];
            let c = &trace.layers[li];

            // MLP: x_out = x_mid + W_out relu(W_in LN2(x_mid))
            let mut dact = vec![T::zero(); rows * f];
            gemm(
                T::one(),
                View::new(&dx, rows, d),
                View::new(&p[slots.w_out.clone()], f, d).t(),
                T::zero(),
                ViewMut::new(&mut dact, rows, f),
            );
            if let Some(g) = grads.as_deref_mut() {
                gemm(
                    T::one(),
                    View::new(&c.act, rows, f).t(),
                    View::new(&dx, rows, d),
                    T::one(),
                    ViewMut::new(&mut g[slots.w_out.clone()], f, d),
                );
                add_col_sums(&dx, d, &mut g[slots.b_out.clone()]);
            }
            let dpre: Vec<T> = dact
                .iter()
                .zip(&c.pre)
                .map(|(&g, &z)| if z > T::zero() { g } else { T::zero() })
                .collect();
            let mut dln2 = vec![T::zero(); rows * d];
            gemm(
                T::one(),
                View::new(&dpre, rows, f),
                View::new(&p[slots.w_in.clone()], d, f).t(),
                T::zero(),
                ViewMut::new(&mut dln2, rows, d),
            );
            if let Some(g) = grads.as_deref_mut() {
                gemm(
                    T::one(),
                    View::new(&c.ln2, rows, d).t(),
                    View::new(&dpre, rows, f),
                    T::one(),
                    ViewMut::new(&mut g[slots.w_in.clone()], d, f),
                );
                add_col_sums(&dpre, f, &mut g[slots.b_in.clone()]);
            }
            // dx now holds d(x_mid) once the norm branch is added.
            {
                let (mut dg, mut db) = (vec![T::zero(); d], vec![T::zero(); d]);
                layer_norm_backward(
                    &dln2,
                    &c.x_mid,
                    d,
                    &p[slots.ln2_g.clone()],
                    &c.ln2_mean,
                    &c.ln2_rstd,
                    &mut dx,
                    grads.is_some().then_some((&mut dg[..], &mut db[..])),
                );
                if let Some(g) = grads.as_deref_mut() {
                    add_into(&mut g[slots.ln2_g.clone()], &dg);
                    add_into(&mut g[slots.ln2_b.clone()], &db);
                }
            }

            // Attention: x_mid = x_in + W_o concat_h(A_h V_h)
            let mut dctx = vec![T::zero(); rows * d];
            gemm(
                T::one(),
                View::new(&dx, rows, d),
                View::new(&p[slots.w_o.clone()], d, d).t(),
                T::zero(),
                ViewMut::new(&mut dctx, rows, d),
            );
            if let Some(g) = grads.as_deref_mut() {
                gemm(
                    T::one(),
                    View::new(&c.ctx, rows, d).t(),
                    View::new(&dx, rows, d),
                    T::one(),
                    ViewMut::new(&mut g[slots.w_o.clone()], d, d),
                );
                add_col_sums(&dx, d, &mut g[slots.b_o.clone()]);
            }

            let mut dqkv = vec![T::zero(); rows * 3 * d];
            let mut layer_capture = if capture.is_some() {
                vec![T::zero(); c.probs.len()]
            } else {
                Vec::new()
            };
            for s in 0..trace.seq_starts.len() {
                let (r0, n) = (trace.seq_starts[s], trace.seq_lens[s]);
                let qkv_s = &c.qkv[r0 * 3 * d..(r0 + n) * 3 * d];
                let dctx_s = &dctx[r0 * d..(r0 + n) * d];
                let dqkv_s = &mut dqkv[r0 * 3 * d..(r0 + n) * 3 * d];
                for h in 0..nh {
                    let off = trace.prob_offsets[s] + h * n * n;
                    let a = &c.probs[off..][..n * n];
                    let mut da = vec![T::zero(); n * n];
                    gemm(
                        T::one(),
                        View::cols_of(dctx_s, n, d, h * dh, dh),
                        View::cols_of(qkv_s, n, 3 * d, 2 * d + h * dh, dh).t(),
                        T::zero(),
                        ViewMut::new(&mut da, n, n),
                    );
                    for i in 0..n {
                        da[i * n + i + 1..(i + 1) * n].fill(T::zero());
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
                        View::new(used, n, n).t(),
                        View::cols_of(dctx_s, n, d, h * dh, dh),
                        T::zero(),
                        ViewMut::cols_of(dqkv_s, n, 3 * d, 2 * d + h * dh, dh),
                    );

                    // softmax backward: dS = A * (dA - rowsum(A * dA))
                    let mut ds = vec![T::zero(); n * n];
                    for i in 0..n {
                        let ar = &a[i * n..][..=i];
                        let dar = &da[i * n..][..=i];
                        let dot: T = ar.iter().zip(dar).map(|(&x, &y)| x * y).sum();
                        for j in 0..=i {
                            ds[i * n + j] = ar[j] * (dar[j] - dot);
                        }
                    }
                    match capture {
                        Some(AttnGradPoint::PostSoftmax) => {
                            layer_capture[off..][..n * n].copy_from_slice(&da)
                        }
                        Some(AttnGradPoint::PreSoftmax) => {
                            layer_capture[off..][..n * n].copy_from_slice(&ds)
                        }
                        None => {}
                    }

                    gemm(
                        scale,
                        View::new(&ds, n, n),
                        View::cols_of(qkv_s, n, 3 * d, d + h * dh, dh),
                        T::zero(),
                        ViewMut::cols_of(dqkv_s, n, 3 * d, h * dh, dh),
                    );
                    gemm(
                        scale,
                        View::new(&ds, n, n).t(),
                        View::cols_of(qkv_s, n, 3 * d, h * dh, dh),
                        T::zero(),
                        ViewMut::cols_of(dqkv_s, n, 3 * d, d + h * dh, dh),
                    );
                }
                for &pos in hooks.key_zero.iter().filter(|&&pos| pos < n) {
                    dqkv_s[pos * 3 * d + d..][..d].fill(T::zero());
                }
            }
            for &(_, head) in hooks.zero_values.iter().filter(|&&(l, _)| l == li) {
                for row in dqkv.chunks_exact_mut(3 * d) {
                    row[2 * d + head * dh..][..dh].fill(T::zero());
                }
            }
            if capture.is_some() {
                captured[li] = layer_capture;
            }

            let mut dln1 = vec![T::zero(); rows * d];
            gemm(
                T::one(),
                View::new(&dqkv, rows, 3 * d),
                View::new(&p[slots.w_qkv.clone()], d, 3 * d).t(),
                T::zero(),
                ViewMut::new(&mut dln1, rows, d),
            );
            if let Some(g) = grads.as_deref_mut() {
                gemm(
                    T::one(),
                    View::new(&c.ln1, rows, d).t(),
                    View::new(&dqkv, rows, 3 * d),
                    T::one(),
                    ViewMut::new(&mut g[slots.w_qkv.clone()], d, 3 * d),
                );
                add_col_sums(&dqkv, 3 * d, &mut g[slots.b_qkv.clone()]);
            }
            let (mut dg, mut db) = (vec![T::zero(); d], vec![T::zero(); d]);
            layer_norm_backward(
                &dln1,
                &trace.resid[li],
                d,
                &p[slots.ln1_g.clone()],
                &c.ln1_mean,
                &c.ln1_rstd,
                &mut dx,
                grads.is_some().then_some((&mut dg[..], &mut db[..])),
            );
            if let Some(g) = grads.as_deref_mut() {
                add_into(&mut g[slots.ln1_g.clone()], &dg);
                add_into(&mut g[slots.ln1_b.clone()], &db);
            }
        }

        if let Some(g) = grads.as_deref_mut() {
            for s in 0..trace.seq_starts.len() {
                let (r0, n) = (trace.seq_starts[s], trace.seq_lens[s]);
                for i in 0..n {
                    let row = &dx[(r0 + i) * d..][..d];
                    let tok = trace.tokens[r0 + i] as usize;
                    add_into(&mut g[lay.tok_emb.start + tok * d..][..d], row);
                    add_into(&mut g[lay.pos_emb.start + i * d..][..d], row);
                }
            }
        }

        capture.map(|_| captured)
    }
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
