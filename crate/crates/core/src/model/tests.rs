use super::*;

fn tiny() -> Transformer<f64> {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 7,
        max_seq: 10,
        seed: 5,
    };
    let mut m = Transformer::<f64>::new(cfg).unwrap();
    // Larger weights than the training init so gradients are not vanishing.
    for (i, x) in m.params.iter_mut().enumerate() {
        *x *= 10.0;
        *x += 0.01 * ((i * 7919 % 13) as f64 - 6.0);
    }
    m
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut m = tiny();
    let tokens = [1u32, 4, 2, 6, 0, 3];
    let targets = [(2usize, 5u32), (5, 1)];
    let loss = |m: &Transformer<f64>| -> f64 {
        let t = m.forward(&tokens, &Hooks::none()).unwrap();
        targets
            .iter()
            .map(|&(p, g)| cross_entropy(t.logits_at(p), g as usize))
            .sum()
    };
    let trace = m.forward(&tokens, &Hooks::none()).unwrap();
    let v = m.config.vocab_size;
    let mut dlogits = vec![0.0; tokens.len() * v];
    for &(p, g) in &targets {
        cross_entropy_grad(trace.logits_at(p), g as usize, &mut dlogits[p * v..][..v]);
    }
    let mut grads = vec![0.0; m.params.len()];
    m.backward(&trace, &dlogits, &Hooks::none(), Some(&mut grads), None);
    let n = m.params.len();
    for k in (0..n).step_by(n / 97 + 1).chain([
        m.layout.tok_emb.start + 4 * 8 + 1,
        m.layout.pos_emb.start + 3,
    ]) {
        let orig = m.params[k];
        m.params[k] = orig + 1e-6;
        let lp = loss(&m);
        m.params[k] = orig - 1e-6;
        let lm = loss(&m);
        m.params[k] = orig;
        let fd = (lp - lm) / 2e-6;
        assert!(
            (fd - grads[k]).abs() <= 1e-6 + 1e-5 * fd.abs(),
            "param {k}: fd {fd} vs {}",
            grads[k]
        );
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let m = tiny();
    let tokens = [1u32, 4, 2, 6, 0, 3, 3];
    let (pos, gold) = (6, 2);
    let n = tokens.len();
    let (_, g) = m
        .grad_attention(
            &tokens,
            pos,
            gold,
            AttnGradPoint::PostSoftmax,
            &Hooks::none(),
        )
        .unwrap();
    for layer in 0..2 {
        for head in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    let mut delta = vec![0.0; n * n];
                    delta[i * n + j] = 1e-5;
                    let hp = Hooks {
                        attn_delta: vec![AttnDelta {
                            layer,
                            head,
                            delta: delta.clone(),
                        }],
                        ..Hooks::none()
                    };
                    delta[i * n + j] = -1e-5;
                    let hm = Hooks {
                        attn_delta: vec![AttnDelta { layer, head, delta }],
                        ..Hooks::none()
                    };
                    let fd = (m.loss_at(&tokens, pos, gold, &hp).unwrap()
                        - m.loss_at(&tokens, pos, gold, &hm).unwrap())
                        / 2e-5;
                    let an = g[layer][head * n * n + i * n + j];
                    if j > i {
                        assert_eq!(an, 0.0);
                    } else {
                        assert!(
                            (fd - an).abs() < 1e-7 + 1e-5 * fd.abs(),
                            "l{layer} h{head} ({i},{j}): {fd} vs {an}"
                        );
                    }
                }
            }
        }
    }
}
