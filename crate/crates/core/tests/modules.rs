use std::sync::Arc;

use dna_core::nn::{init_parameters, module_forward, ModuleKind, ModuleParams, ModuleSpec};
use dna_core::tensor::{AttentionLayout, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [ModuleKind; 3] = [ModuleKind::TransformerBlock, ModuleKind::AttentionOnly, ModuleKind::MlpOnly];

fn spec(kind: ModuleKind, causal: bool) -> ModuleSpec {
    ModuleSpec {
        kind,
        d_embed: 8,
        d_mlp: 12,
        n_head: 2,
        causal,
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Gains away from 1 so norms are exercised.
fn perturb_gains(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        if p.tensor.shape().len() == 1 {
            p.tensor.data_mut().iter_mut().for_each(|g| *g = 1.0 + 0.3 * rng.random_range(-1.0..1.0));
        }
    }
}

fn run(store: &ParamStore<f64>, params: &ModuleParams, x: &Tensor<f64>, layout: AttentionLayout) -> Vec<f64> {
    let mut g = Graph::new();
    let h = g.constant(x.clone());
    let out = module_forward(&mut g, store, params, h, &Arc::new(layout), false).unwrap();
    g.value(out).to_vec()
}

fn one_sequence(n: usize, causal: bool) -> AttentionLayout {
    AttentionLayout::new(&vec![0; n], (0..n).collect(), causal).unwrap()
}

#[test]
fn init_statistics() {
    let s = ModuleSpec {
        kind: ModuleKind::TransformerBlock,
        d_embed: 128,
        d_mlp: 256,
        n_head: 4,
        causal: false,
    };
    let (store, _) = init_parameters::<f64>(s, 3).unwrap();
    let values: Vec<f64> = store
        .iter()
        .filter(|(_, p)| p.tensor.shape().len() == 2)
        .flat_map(|(_, p)| p.tensor.data().to_vec())
        .collect();
    assert!(values.len() >= 100_000);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.001, "mean {mean}");
    assert!((0.017..=0.021).contains(&std), "std {std}");
    assert!(values.iter().all(|v| v.abs() <= 0.04));
    let gains = store.iter().filter(|(_, p)| p.tensor.shape().len() == 1);
    assert!(gains.flat_map(|(_, p)| p.tensor.data().to_vec()).all(|g| g == 1.0));
}

#[test]
fn same_seed_same_parameters() {
    for kind in KINDS {
        let (a, _) = init_parameters::<f32>(spec(kind, true), 9).unwrap();
        let (b, _) = init_parameters::<f32>(spec(kind, true), 9).unwrap();
        let (c, _) = init_parameters::<f32>(spec(kind, true), 10).unwrap();
        assert!(a == b);
        assert!(a != c);
    }
}

#[test]
fn identity_is_a_no_op() {
    let (store, params) = init_parameters::<f64>(spec(ModuleKind::Identity, false), 1).unwrap();
    let x = random(&mut ChaCha8Rng::seed_from_u64(0), 5, 8);
    assert_eq!(run(&store, &params, &x, one_sequence(5, false)), x.data());
}

#[test]
fn causal_perturbation_leaves_earlier_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [ModuleKind::TransformerBlock, ModuleKind::AttentionOnly] {
        let (mut store, params) = init_parameters::<f64>(spec(kind, true), 2).unwrap();
        perturb_gains(&mut store, &mut rng);
        let n = 7;
        let x = random(&mut rng, n, 8);
        let base = run(&store, &params, &x, one_sequence(n, true));
        for j in 0..n {
            let mut y = x.clone();
            y.data_mut()[j * 8..(j + 1) * 8].iter_mut().for_each(|v| *v += 0.5);
            let out = run(&store, &params, &y, one_sequence(n, true));
            assert_eq!(&out[..j * 8], &base[..j * 8], "{kind:?} position {j}");
            assert_ne!(&out[j * 8..(j + 1) * 8], &base[j * 8..(j + 1) * 8]);
        }
        // Without the mask, later tokens do leak backwards.
        let full = run(&store, &params, &x, one_sequence(n, false));
        assert_ne!(&full[..8], &base[..8]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_output_projections_give_identity(k in 0usize..3, seed in any::<u64>(), causal in any::<bool>()) {
        let kind = KINDS[k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut store, params) = init_parameters::<f64>(spec(kind, causal), seed).unwrap();
        perturb_gains(&mut store, &mut rng);
        if let Some(a) = &params.attention {
            store.get_mut(a.wo).data_mut().fill(0.0);
        }
        if let Some(m) = &params.mlp {
            store.get_mut(m.w_out).data_mut().fill(0.0);
        }
        let x = random(&mut rng, 6, 8);
        prop_assert_eq!(run(&store, &params, &x, one_sequence(6, causal)), x.data().to_vec());
    }

    /// Running on a token subset with its original positions equals running
    /// densely on the subset alone.
    #[test]
    fn subset_matches_dense_on_the_subset(
        k in 0usize..3,
        seed in any::<u64>(),
        causal in any::<bool>(),
        mask in prop::collection::vec(any::<bool>(), 2..10),
    ) {
        let kind = KINDS[k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut store, params) = init_parameters::<f64>(spec(kind, causal), seed).unwrap();
        perturb_gains(&mut store, &mut rng);
        let positions: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        prop_assume!(!positions.is_empty());
        let x = random(&mut rng, positions.len(), 8);
        let sparse = AttentionLayout::new(&vec![0; positions.len()], positions.clone(), causal).unwrap();
        let a = run(&store, &params, &x, sparse);
        let b = run(&store, &params, &x, one_sequence(positions.len(), causal));
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
        }
    }

    /// Two sequences packed together never see each other.
    #[test]
    fn packed_sequences_are_independent(seed in any::<u64>(), n1 in 1usize..5, n2 in 1usize..5, causal in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, params) = init_parameters::<f64>(spec(ModuleKind::TransformerBlock, causal), seed).unwrap();
        let x1 = random(&mut rng, n1, 8);
        let x2 = random(&mut rng, n2, 8);
        let both = Tensor::new(vec![n1 + n2, 8], [x1.data(), x2.data()].concat()).unwrap();
        let mut seqs = vec![0; n1];
        seqs.extend(vec![1; n2]);
        let mut pos: Vec<usize> = (0..n1).collect();
        pos.extend(0..n2);
        let packed = run(&store, &params, &both, AttentionLayout::new(&seqs, pos, causal).unwrap());
        let alone1 = run(&store, &params, &x1, one_sequence(n1, causal));
        let alone2 = run(&store, &params, &x2, one_sequence(n2, causal));
        for (p, q) in packed.iter().zip(alone1.iter().chain(&alone2)) {
            prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
        }
    }
}
