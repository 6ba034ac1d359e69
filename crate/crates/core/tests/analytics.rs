use dna_core::analytics::{
    correlation, effective_topk, export_bundle, flow_export, module_reuse, module_reuse_weighted, powerlaw_fit, rank_frequency,
    AnalyticsConfig, Ribbon,
};
use dna_core::model::{ribbon_compute, RoutingTrace, SequenceTrace};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A trace over `ribbons`, split into sequences of `per_seq` tokens.
fn trace_of(ribbons: Vec<Ribbon>, n_modules: usize, identity: Vec<bool>, per_seq: usize) -> RoutingTrace {
    let k = ribbons.first().and_then(|r| r.first()).map_or(1, |t| t.len());
    let n_routed = ribbons.first().map_or(0, |r| r.len());
    let sequences = ribbons
        .chunks(per_seq)
        .enumerate()
        .map(|(i, chunk)| SequenceTrace {
            seq_id: i,
            tokens: chunk.len(),
            probs: chunk.iter().map(|r| r.iter().map(|t| vec![0.5; t.len()]).collect()).collect(),
            compute: chunk.iter().map(|r| ribbon_compute(r, &identity, k)).collect(),
            ribbons: chunk.to_vec(),
        })
        .collect();
    RoutingTrace {
        k,
        n_routed,
        n_modules,
        bias_snapshot: vec![vec![0.0; n_modules]; n_routed],
        identity,
        sequences,
    }
}

fn random_ribbons(rng: &mut ChaCha8Rng, n: usize, steps: usize, modules: usize, k: usize) -> Vec<Ribbon> {
    (0..n)
        .map(|_| {
            (0..steps)
                .map(|_| {
                    let mut all: Vec<usize> = (0..modules).collect();
                    all.shuffle(rng);
                    let mut t = all[..k].to_vec();
                    t.sort_unstable();
                    t
                })
                .collect()
        })
        .collect()
}

#[test]
fn rank_frequency_orders_and_canonicalizes() {
    let ribbons: Vec<Ribbon> = vec![
        vec![vec![1, 0], vec![2, 3]],
        vec![vec![0, 1], vec![3, 2]],
        vec![vec![0, 2], vec![1, 3]],
        vec![vec![0, 1], vec![1, 3]],
    ];
    let stats = rank_frequency(&ribbons).unwrap();
    assert_eq!(stats.total, 4);
    assert_eq!(stats.ranked[0], (vec![vec![0, 1], vec![2, 3]], 2));
    // Tie at count 1 goes lexicographically.
    assert_eq!(stats.ranked[1].0, vec![vec![0, 1], vec![1, 3]]);
    assert_eq!(stats.ranked[2].0, vec![vec![0, 2], vec![1, 3]]);
    assert_eq!(
        stats.to_tsv(),
        "rank\tcount\tribbon\n1\t2\t0,1|2,3\n2\t1\t0,1|1,3\n3\t1\t0,2|1,3\n"
    );
    assert!(rank_frequency(&[vec![vec![0]], vec![vec![0], vec![1]]]).is_err());
}

#[test]
fn powerlaw_fit_recovers_exact_laws() {
    for slope in [-0.5, -1.0, -2.0] {
        let counts: Vec<f64> = (1..=200).map(|r| 1e6 * (r as f64).powf(slope)).collect();
        let fit = powerlaw_fit(&counts, 0.0, 1.0).unwrap();
        assert!((fit.slope - slope).abs() < 1e-9, "{fit:?}");
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 1e6f64.ln()).abs() < 1e-8);
    }
    assert!(powerlaw_fit(&[1.0, 2.0], 0.0, 1.0).is_err());
}

#[test]
fn effective_topk_examples() {
    assert!((effective_topk(&[5.0, 0.0, 0.0, 0.0], 2.0).unwrap() - 1.0).abs() < 1e-15);
    assert!((effective_topk(&[3.0; 4], 2.0).unwrap() - 4.0).abs() < 1e-12);
    assert!((effective_topk(&[3.0; 4], 1.5).unwrap() - 2.0).abs() < 1e-12);
    // Two equal modules out of eight.
    assert!((effective_topk(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2.0).unwrap() - 2.0).abs() < 1e-12);
    assert!(effective_topk(&[0.0, 0.0], 2.0).is_err());
    assert!(effective_topk(&[-1.0, 2.0], 2.0).is_err());
}

#[test]
fn reuse_examples() {
    let identity = [false, false, true];
    assert_eq!(module_reuse(&[vec![0], vec![1], vec![2]], &identity), 0.0);
    assert_eq!(module_reuse(&[vec![0], vec![0], vec![0], vec![1]], &identity), 0.5);
    assert_eq!(module_reuse(&[vec![2], vec![2]], &identity), 0.0);
    assert_eq!(module_reuse_weighted(&[vec![0], vec![0]], &[10, 4, 0]), 0.5);
    assert!((correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!(correlation(&[1.0, 1.0], &[0.0, 1.0]).is_err());
}

#[test]
fn single_path_flow() {
    let path = vec![vec![2], vec![0], vec![1]];
    let trace = trace_of(vec![path.clone(); 7], 3, vec![false; 3], 7);
    let flow = flow_export(&[trace]).unwrap();
    assert_eq!(flow.tokens, 7);
    for (s, t) in path.iter().enumerate() {
        for m in 0..3 {
            assert_eq!(flow.visits[s][m], if m == t[0] { 7 } else { 0 });
        }
    }
    for s in 0..2 {
        for a in 0..3 {
            for b in 0..3 {
                let on_path = a == path[s][0] && b == path[s + 1][0];
                assert_eq!(flow.transitions[s][a][b], if on_path { 7 } else { 0 });
            }
        }
    }
    assert_eq!(flow.transitions_tsv(), "step\tfrom\tto\tcount\n0\t2\t0\t7\n1\t0\t1\t7\n");
}

#[test]
fn random_router_flow_is_uniform_and_conserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, modules) = (40_000, 8);
    let trace = trace_of(random_ribbons(&mut rng, n, 3, modules, 1), modules, vec![false; modules], 100);
    let flow = flow_export(&[trace.clone()]).unwrap();
    let sigma = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
    for row in &flow.visits {
        assert_eq!(row.iter().sum::<u64>(), n as u64);
        for &c in row {
            assert!((c as f64 - n as f64 / 8.0).abs() < 3.0 * sigma, "{row:?}");
        }
    }
    let k2 = trace_of(random_ribbons(&mut rng, 500, 4, modules, 2), modules, vec![false; modules], 50);
    let flow = flow_export(&[k2]).unwrap();
    for row in &flow.visits {
        assert_eq!(row.iter().sum::<u64>(), 2 * 500);
    }
    for step in &flow.transitions {
        assert_eq!(step.iter().flatten().sum::<u64>(), 4 * 500);
    }
}

#[test]
fn export_bundle_is_deterministic_and_complete() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut identity = vec![false; 6];
    identity[5] = true;
    let trace = trace_of(random_ribbons(&mut rng, 3000, 3, 6, 1), 6, identity, 30);
    let cfg = AnalyticsConfig::default();
    let params = [10, 10, 10, 10, 10, 0];
    let (summary, files) = export_bundle(&trace, &cfg, Some(&params)).unwrap();
    let (again, files2) = export_bundle(&trace, &cfg, Some(&params)).unwrap();
    assert_eq!(files, files2);
    assert_eq!(summary, again);
    assert_eq!(summary.tokens, 3000);
    assert_eq!(summary.sequences, 100);
    assert!(summary.distinct_paths <= 216);
    let names: Vec<&str> = files.iter().map(|f| f.0).collect();
    assert_eq!(
        names,
        [
            "rank_frequency.tsv",
            "effective_topk.tsv",
            "sequence_reuse.tsv",
            "compute_histogram.tsv",
            "flow_visits.tsv",
            "flow_transitions.tsv",
            "summary.json"
        ]
    );
    let (_, without) = export_bundle(&trace, &cfg, None).unwrap();
    let reuse = &without.iter().find(|f| f.0 == "sequence_reuse.tsv").unwrap().1;
    assert!(reuse.lines().nth(1).unwrap().ends_with("\t-"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn effective_topk_ignores_scale(
        counts in prop::collection::vec(0u32..10_000, 1..16),
        exp in -20i32..20,
        lambda in 1e-3f64..1e3,
        alpha in 1.1f64..3.0,
    ) {
        let c: Vec<f64> = counts.iter().map(|&x| x as f64).collect();
        prop_assume!(c.iter().any(|&x| x > 0.0));
        let base = effective_topk(&c, alpha).unwrap();
        let pow2: Vec<f64> = c.iter().map(|x| x * 2f64.powi(exp)).collect();
        prop_assert_eq!(effective_topk(&pow2, alpha).unwrap().to_bits(), base.to_bits());
        let any: Vec<f64> = c.iter().map(|x| x * lambda).collect();
        prop_assert!((effective_topk(&any, alpha).unwrap() - base).abs() <= 1e-12 * base);
        prop_assert!(base >= 1.0 - 1e-12 && base <= (c.len() as f64).powf(alpha - 1.0) * (1.0 + 1e-12));
    }

    #[test]
    fn rank_frequency_ignores_order(seed in any::<u64>(), n in 1usize..300, k in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ribbons = random_ribbons(&mut rng, n, 3, 4, k);
        let a = rank_frequency(&ribbons).unwrap();
        ribbons.shuffle(&mut rng);
        // Tuple order within a step is irrelevant too.
        for r in &mut ribbons {
            for t in r.iter_mut() {
                if rng.random::<bool>() {
                    t.reverse();
                }
            }
        }
        let b = rank_frequency(&ribbons).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.ranked.iter().map(|x| x.1).sum::<u64>(), n as u64);
        prop_assert!(a.ranked.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
    }
}
