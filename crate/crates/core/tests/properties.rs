use std::collections::{HashSet, VecDeque};

use proptest::prelude::*;

use planlens::blocksworld::{
    all_states, optimal_plans, Action, Color, Level, PlanInstance, Split, WorldState,
};
use planlens::interp_flow::saliency;
use planlens::interp_probe::{gold_probability, masked_gold_probability};
use planlens::model::{AttnGradPoint, Hooks, ModelConfig, Transformer};
use planlens::textgen::{render, render_all, ChunkKind, Vocab};

fn state_strategy(n: usize) -> impl Strategy<Value = WorldState> {
    let states = all_states(n);
    (0..states.len()).prop_map(move |i| states[i].clone())
}

fn walk(mut s: WorldState, choices: &[usize]) -> (WorldState, Vec<Action>) {
    let mut taken = Vec::new();
    for &c in choices {
        let legal = s.legal_actions();
        let a = legal[c % legal.len()];
        s = s.apply(a).unwrap();
        taken.push(a);
    }
    (s, taken)
}

fn sorted_colors(s: &WorldState) -> Vec<Color> {
    let mut c = s.colors();
    c.sort();
    c
}

/// Plain BFS over canonical states, kept separate from the library planner.
fn distance(init: &WorldState, goal: &WorldState, limit: usize) -> Option<usize> {
    let target = goal.canonical();
    let mut seen = HashSet::from([init.canonical()]);
    let mut q = VecDeque::from([(init.clone(), 0)]);
    while let Some((s, d)) = q.pop_front() {
        if s.canonical() == target {
            return Some(d);
        }
        if d == limit {
            continue;
        }
        for a in s.legal_actions() {
            let t = s.apply(a).unwrap();
            if seen.insert(t.canonical()) {
                q.push_back((t, d + 1));
            }
        }
    }
    None
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn actions_conserve_blocks(s in state_strategy(5), choices in prop::collection::vec(0usize..16, 0..12)) {
        let (t, _) = walk(s.clone(), &choices);
        prop_assert_eq!(sorted_colors(&s), sorted_colors(&t));
        prop_assert!(t.validate().is_ok());
    }

    #[test]
    fn pick_up_is_reversible(s in state_strategy(6), c in 0usize..16) {
        let picks: Vec<Action> = s.legal_actions();
        let a = picks[c % picks.len()];
        let Action::PickUp(block) = a else { unreachable!() };
        let held = s.apply(a).unwrap();
        let back = match s.support_of(block).unwrap() {
            planlens::blocksworld::Support::Block(below) => Action::StackOn(below),
            _ => Action::StackOnTable,
        };
        prop_assert_eq!(held.apply(back).unwrap().canonical(), s.canonical());
    }

    #[test]
    fn optimal_plans_are_shortest_and_reach_goal(s in state_strategy(5), choices in prop::collection::vec(0usize..16, 0..8)) {
        let (goal, _) = walk(s.clone(), &choices);
        let goal = WorldState { held: None, ..goal };
        let goal = if goal.validate().is_ok() && goal.colors().len() == s.colors().len() { goal } else { s.clone() };
        let plans = optimal_plans(&s, &goal, 10);
        let d = distance(&s, &goal, 20).unwrap();
        prop_assert!(!plans.is_empty());
        for p in &plans {
            prop_assert_eq!(p.len(), d);
            prop_assert_eq!(s.apply_all(p).unwrap().canonical(), goal.canonical());
        }
    }
}

fn model(seed: u64, vocab: usize, max_seq: usize) -> Transformer<f64> {
    let cfg = ModelConfig {
        n_layers: 3,
        n_heads: 2,
        d_model: 16,
        d_ff: 24,
        vocab_size: vocab,
        max_seq,
        seed,
    };
    let mut m = Transformer::<f64>::new(cfg).unwrap();
    for (i, x) in m.params.iter_mut().enumerate() {
        *x *= 4.0 + (i % 3) as f64;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn residual_stream_decomposes(seed in 0u64..1000, tokens in prop::collection::vec(0u32..11, 1..24)) {
        let m = model(seed, 11, 24);
        let t = m.forward(&tokens, &Hooks::none()).unwrap();
        for l in 1..=3 {
            for row in 0..tokens.len() {
                let (prev, out) = (t.layer_output(l - 1, row), t.layer_output(l, row));
                let (a, f) = (t.attn_output(l - 1, row), t.mlp_output(l - 1, row));
                for k in 0..16 {
                    prop_assert!((out[k] - (prev[k] + a[k] + f[k])).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_causal_distributions(seed in 0u64..1000, tokens in prop::collection::vec(0u32..11, 1..24)) {
        let m = model(seed, 11, 24);
        let t = m.forward(&tokens, &Hooks::none()).unwrap();
        let n = tokens.len();
        for l in 0..3 {
            for h in 0..2 {
                let a = t.attn_probs(l, h);
                for i in 0..n {
                    let row = &a[i * n..][..n];
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(row[i + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn later_tokens_do_not_affect_earlier_logits(seed in 0u64..1000, tokens in prop::collection::vec(0u32..11, 2..24), swap in 0u32..11) {
        let m = model(seed, 11, 24);
        let mut other = tokens.clone();
        *other.last_mut().unwrap() = swap;
        let (a, b) = (m.forward(&tokens, &Hooks::none()).unwrap(), m.forward(&other, &Hooks::none()).unwrap());
        for row in 0..tokens.len() - 1 {
            prop_assert_eq!(a.logits_at(row), b.logits_at(row));
        }
    }

    #[test]
    fn key_zero_hooks_are_idempotent(seed in 0u64..1000, tokens in prop::collection::vec(0u32..11, 2..24), pos in prop::collection::vec(0usize..24, 0..6)) {
        let m = model(seed, 11, 24);
        let pos: Vec<usize> = pos.into_iter().filter(|&p| p < tokens.len()).collect();
        let doubled: Vec<usize> = pos.iter().chain(pos.iter()).copied().collect();
        let a = m.forward(&tokens, &Hooks::key_zero(pos.clone())).unwrap();
        let b = m.forward(&tokens, &Hooks::key_zero(doubled)).unwrap();
        prop_assert_eq!(a.logits(), b.logits());
        let plain = m.forward(&tokens, &Hooks::none()).unwrap();
        let empty = m.forward(&tokens, &Hooks::key_zero([])).unwrap();
        prop_assert_eq!(plain.logits(), empty.logits());
    }

    #[test]
    fn saliency_is_nonnegative_and_causal(seed in 0u64..1000, tokens in prop::collection::vec(0u32..11, 2..20)) {
        let m = model(seed, 11, 24);
        let pos = tokens.len() - 1;
        let (trace, grads) = m.grad_attention(&tokens, pos, 3, AttnGradPoint::PostSoftmax, &Hooks::none()).unwrap();
        let n = tokens.len();
        for l in 0..3 {
            let probs: Vec<f64> = (0..2).flat_map(|h| trace.attn_probs(l, h).to_vec()).collect();
            let s = saliency(&probs, &grads[l], 2, n);
            for i in 0..n {
                for j in 0..n {
                    prop_assert!(s[i * n + j] >= 0.0);
                    if j > i {
                        prop_assert_eq!(s[i * n + j], 0.0);
                    }
                }
            }
        }
    }
}

fn instance() -> PlanInstance {
    let c = |i| Color::new(i).unwrap();
    let init = WorldState::new(
        vec![vec![c(0), c(1), c(2)], vec![c(3)], vec![c(4), c(5)]],
        None,
    )
    .unwrap();
    let goal = WorldState::new(
        vec![vec![c(2), c(0)], vec![c(3), c(1)], vec![c(4), c(5)]],
        None,
    )
    .unwrap();
    let plan = optimal_plans(&init, &goal, 10).remove(0);
    assert_eq!(plan.len(), 6);
    PlanInstance {
        id: "x".into(),
        num_colors: 6,
        level: Level::L3,
        init,
        goal,
        plan,
        split: Split::Test,
    }
}

#[test]
fn chunk_spans_are_ordered_and_disjoint() {
    let vocab = Vocab::new();
    for p in render_all(&instance(), &vocab) {
        let mut prev_end = None;
        for s in &p.spans {
            assert!(s.start <= s.end);
            if let Some(e) = prev_end {
                assert!(s.start > e, "{:?}", s.kind);
            }
            prev_end = Some(s.end);
        }
        assert_eq!(p.spans.last().unwrap().kind, ChunkKind::LastToken);
        assert_eq!(p.last_position(), p.tokens.len() - 1);
        assert_eq!(p.decision_position, p.tokens.len());
    }
}

#[test]
fn exempting_every_step_recovers_baseline() {
    let vocab = Vocab::new();
    let m = model(3, vocab.len(), 128);
    let inst = instance();
    for t in 2..=6 {
        let p = render(&inst, t, &vocab).unwrap();
        let base = gold_probability(&m, &p, &Hooks::none()).unwrap();
        let all: Vec<usize> = (1..t).collect();
        let same = masked_gold_probability(&m, &p, &all).unwrap();
        assert!((base - same).abs() < 1e-12, "step {t}: {base} vs {same}");
        let masked = masked_gold_probability(&m, &p, &[]).unwrap();
        assert!((0.0..=1.0).contains(&masked));
    }
}
