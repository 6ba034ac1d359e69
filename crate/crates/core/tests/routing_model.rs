use std::collections::HashMap;

use dna_core::model::{
    active_parameter_count, ribbon_active_parameters, Batch, DnaConfig, DnaModel, PoolSpec, RoutingOverride, RoutingTrace, Task,
};
use dna_core::nn::ModuleKind;
use dna_core::routing::{bias_rule, combine_step, route, select_topk, selection_histogram, RouteDecision};
use dna_core::tensor::{softmax_values, Tensor};
use dna_core::train::loss_and_grads;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn lm(k: usize, pool: PoolSpec, s_max: usize) -> DnaConfig {
    DnaConfig {
        task: Task::CausalLm { vocab: 12, context: 6 },
        d_embed: 8,
        d_mlp: 12,
        n_head: 2,
        n_backbone: 1,
        s_max,
        k,
        pool,
        skip: None,
        stochastic_routing: false,
    }
}

/// Routers with unit-scale weights so selections vary between tokens.
fn lively(mut model: DnaModel<f64>, seed: u64) -> DnaModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &id in &model.routers.clone() {
        model.params.get_mut(id).data_mut().iter_mut().for_each(|w| *w = StandardNormal.sample(&mut rng));
    }
    model
}

fn tokens(rng: &mut ChaCha8Rng, batch: usize, context: usize, vocab: usize) -> Batch {
    let ids: Vec<usize> = (0..batch * context).map(|_| rng.random_range(0..vocab)).collect();
    Batch::Tokens {
        targets: ids.iter().map(|i| (i + 1) % vocab).collect(),
        ids,
        batch,
    }
}

#[test]
fn uniform_stochastic_router_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let probs = vec![1.0 / 8.0; 8];
    let n = 100_000;
    let decisions: Vec<RouteDecision> = (0..n)
        .map(|t| {
            let (selected, scores) = select_topk(&probs, &[], 1, Some(&mut rng));
            RouteDecision {
                token: t,
                step: 0,
                probs: probs.clone(),
                selected,
                scores,
            }
        })
        .collect();
    let hist = selection_histogram(&decisions, 1, 8);
    let sigma = (n as f64 * 0.125 * 0.875).sqrt();
    for &c in &hist[0] {
        assert!((c as f64 - 12_500.0).abs() < 3.0 * sigma, "{:?}", hist[0]);
    }
    assert_eq!(hist[0].iter().sum::<u64>(), n as u64);
}

#[test]
fn histogram_rows_sum_to_k_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = Tensor::new(vec![4, 6], (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let h = Tensor::new(vec![50, 4], (0..200).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    for k in 1..=3 {
        let d = route::<f64, ChaCha8Rng>(0, &w, &h, &[], k, None).unwrap();
        let hist = selection_histogram(&d, 1, 6);
        assert_eq!(hist[0].iter().sum::<u64>(), 50 * k as u64);
        assert!(d.iter().all(|x| x.selected.len() == k));
    }
    let single = route::<f64, ChaCha8Rng>(0, &w, &Tensor::new(vec![1, 4], vec![0.3; 4]).unwrap(), &[], 1, None).unwrap();
    assert_eq!(selection_histogram(&single, 1, 6)[0].iter().filter(|&&c| c == 1).count(), 1);
}

#[test]
fn bias_rule_drives_towards_target() {
    // Too few identity picks raises the bias, too many lowers it.
    assert_eq!(bias_rule(0.0, 0.01, 0.5, 1, 10.0, 2.0), 0.01);
    assert_eq!(bias_rule(0.0, 0.01, 0.1, 1, 10.0, 5.0), -0.01);
    assert_eq!(bias_rule(0.2, 0.01, 0.5, 2, 4.0, 4.0), 0.2);
}

#[test]
fn router_receives_gradient() {
    let mut model = DnaModel::<f64>::new(lm(2, PoolSpec::blocks(3, 1), 3), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = tokens(&mut rng, 3, 6, 12);
    loss_and_grads(&mut model, &batch, None).unwrap();
    for &id in &model.routers {
        let g = model.params.get(id).grad().expect("router gradient");
        assert!(g.iter().any(|v| *v != 0.0));
        assert!(g.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn trace_shape_and_backbone_density() {
    for (k, s_max) in [(1, 4), (2, 3), (3, 5)] {
        let model = lively(DnaModel::<f64>::new(lm(k, PoolSpec::blocks(3, 2), s_max), 3).unwrap(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = tokens(&mut rng, 4, 6, 12);
        let (_, trace) = model.forward(&batch).unwrap();
        let routed = s_max - 1;
        assert_eq!(trace.n_routed, routed);
        assert_eq!(trace.sequences.len(), 4);
        let mut decisions = 0;
        for s in &trace.sequences {
            assert_eq!(s.ribbons.len(), 6);
            for r in &s.ribbons {
                assert_eq!(r.len(), routed);
                for step in r {
                    assert_eq!(step.len(), k);
                    assert!(step.windows(2).all(|w| w[0] < w[1]), "{step:?}");
                    decisions += 1;
                }
            }
            for p in s.probs.iter().flatten().flatten() {
                assert!(*p > 0.0 && *p <= 1.0);
            }
        }
        assert_eq!(decisions, 4 * 6 * routed);
    }
    // All steps in the backbone: nothing is routed.
    let cfg = lm(1, PoolSpec::blocks(2, 0), 1);
    let model = DnaModel::<f64>::new(cfg, 0).unwrap();
    let (_, trace) = model.forward(&tokens(&mut ChaCha8Rng::seed_from_u64(0), 2, 6, 12)).unwrap();
    assert_eq!(trace.n_routed, 0);
    assert!(trace.ribbons().all(|r| r.is_empty()));
}

#[test]
fn token_positions_are_restored_each_step() {
    // Every row receives exactly one decision per step, in row order.
    let model = lively(DnaModel::<f64>::new(lm(2, PoolSpec::blocks(4, 1), 4), 8).unwrap(), 8);
    let batch = tokens(&mut ChaCha8Rng::seed_from_u64(1), 3, 6, 12);
    let mut g = dna_core::tensor::Graph::new();
    let pass = model
        .forward_graph(&mut g, dna_core::model::ModelInput::Batch(&batch), Default::default())
        .unwrap();
    for (s, step) in pass.decisions.iter().enumerate() {
        assert_eq!(step.len(), 18);
        for (row, d) in step.iter().enumerate() {
            assert_eq!((d.token, d.step), (row, s));
        }
        // Recombining module outputs by (token, module) reproduces the next hidden state.
        let h = g.tensor(pass.step_inputs[s]);
        let outputs = model.module_outputs(&h, step).unwrap();
        let rows: Vec<Vec<f64>> = (0..h.rows()).map(|r| h.row(r).to_vec()).collect();
        let next = combine_step(&rows, step, &outputs, &model.config.identity_mask()).unwrap();
        let expected = if s + 1 < pass.step_inputs.len() {
            g.tensor(pass.step_inputs[s + 1])
        } else {
            g.tensor(pass.hidden)
        };
        for (r, row) in next.iter().enumerate() {
            assert_eq!(row.as_slice(), expected.row(r), "step {s} row {r}");
        }
    }
}

#[test]
fn ribbon_parameter_counts() {
    let params = [100, 30, 7, 0];
    assert_eq!(ribbon_active_parameters(&[vec![1], vec![1], vec![1]], &params), (90, 30));
    assert_eq!(ribbon_active_parameters(&[vec![0], vec![1], vec![2]], &params), (137, 137));
    let mixed = [vec![0, 1], vec![1, 3], vec![0, 2]];
    let (active, non_shared) = ribbon_active_parameters(&mixed, &params);
    assert_eq!(active, 100 + 30 + 30 + 0 + 100 + 7);
    let union: std::collections::HashSet<usize> = mixed.iter().flatten().copied().collect();
    assert_eq!(non_shared, union.iter().map(|&i| params[i]).sum::<usize>());

    let model = DnaModel::<f64>::new(lm(1, PoolSpec::blocks(2, 1), 3), 0).unwrap();
    let (_, trace) = model.forward(&tokens(&mut ChaCha8Rng::seed_from_u64(0), 2, 6, 12)).unwrap();
    let counts = model.module_param_counts();
    assert_eq!(counts[2], 0);
    assert_eq!(counts[0], model.config.module_spec(ModuleKind::TransformerBlock).param_count());
    assert_eq!(active_parameter_count(&trace, &counts).len(), 12);
}

fn trace_json_round_trip(trace: &RoutingTrace) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.jsonl");
    trace.write_jsonl(&p).unwrap();
    assert_eq!(&RoutingTrace::read_jsonl(&p).unwrap(), trace);
}

#[test]
fn trace_files_round_trip() {
    let model = lively(DnaModel::<f64>::new(lm(2, PoolSpec::blocks(3, 1), 4), 2).unwrap(), 2);
    let (_, trace) = model.forward(&tokens(&mut ChaCha8Rng::seed_from_u64(3), 3, 6, 12)).unwrap();
    trace_json_round_trip(&trace);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logit_shift_changes_neither_probs_nor_selection(
        logits in prop::collection::vec(-8.0f64..8.0, 2..10),
        c in -50.0f64..50.0,
        k in 1usize..4,
    ) {
        let n = logits.len();
        let k = k.min(n);
        let p = softmax_values(&logits, 1, n, 1);
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        let q = softmax_values(&shifted, 1, n, 1);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        let mut sorted = p.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        // Skip near-ties, where round-off may legitimately flip the order.
        prop_assume!(k == n || sorted[k - 1] - sorted[k] > 1e-9);
        let (mut s1, _) = select_topk::<ChaCha8Rng>(&p, &[], k, None);
        let (mut s2, _) = select_topk::<ChaCha8Rng>(&q, &[], k, None);
        s1.sort_unstable();
        s2.sort_unstable();
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn bias_never_enters_combine(seed in any::<u64>(), k in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n_tok, n_mod, d) = (5, 4, 3);
        let identity = [false, false, true, false];
        let h: Vec<Vec<f64>> = (0..n_tok).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut outputs = HashMap::new();
        let mut biased = Vec::new();
        let mut zeroed = Vec::new();
        for t in 0..n_tok {
            let logits: Vec<f64> = (0..n_mod).map(|_| rng.random_range(-2.0..2.0)).collect();
            let probs = softmax_values(&logits, 1, n_mod, 1);
            let bias: Vec<f64> = (0..n_mod).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (selected, scores) = select_topk::<ChaCha8Rng>(&probs, &bias, k, None);
            for &m in &selected {
                outputs.insert((t, m), (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
            }
            zeroed.push(RouteDecision { token: t, step: 0, probs: probs.clone(), selected: selected.clone(), scores: probs.clone() });
            biased.push(RouteDecision { token: t, step: 0, probs, selected, scores });
        }
        let a = combine_step(&h, &biased, &outputs, &identity).unwrap();
        let b = combine_step(&h, &zeroed, &outputs, &identity).unwrap();
        prop_assert_eq!(a, b);
    }

    /// Logits at positions up to `j` ignore every token after `j`, whatever
    /// the routing does.
    #[test]
    fn model_is_causal(seed in any::<u64>(), j in 0usize..5, k in 1usize..3) {
        let model = lively(DnaModel::<f64>::new(lm(k, PoolSpec::blocks(3, 1), 4), seed).unwrap(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let batch = tokens(&mut rng, 2, 6, 12);
        let Batch::Tokens { ids, targets, batch: b } = batch.clone() else { unreachable!() };
        let mut changed = ids.clone();
        for s in 0..b {
            for p in j + 1..6 {
                changed[s * 6 + p] = (changed[s * 6 + p] + 1 + rng.random_range(0..11)) % 12;
            }
        }
        let other = Batch::Tokens { ids: changed, targets, batch: b };
        let (la, ta) = model.forward_with(&batch, RoutingOverride::None, 0).unwrap();
        let (lb, tb) = model.forward_with(&other, RoutingOverride::None, 0).unwrap();
        for s in 0..b {
            for p in 0..=j {
                let row = s * 6 + p;
                prop_assert_eq!(la.row(row), lb.row(row));
                prop_assert_eq!(&ta.sequences[s].ribbons[p], &tb.sequences[s].ribbons[p]);
            }
        }
    }
}
