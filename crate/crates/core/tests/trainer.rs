use dna_core::model::{DnaConfig, DnaModel, PoolSpec, Task};
use dna_core::tensor::{ParamStore, Tensor};
use dna_core::train::{
    evaluate, schedule_lr, train, AdamW, AdamWConfig, CharDataset, Dataset, Schedule, ShapesDataset, TrainConfig,
};
use dna_core::DnaError;
use proptest::prelude::*;

#[test]
fn warmup_cosine_examples() {
    let s = Schedule::WarmupCosine {
        warmup: 10,
        total: 110,
        lr_init: 1e-7,
        lr_peak: 1e-3,
        lr_final: 1e-5,
    };
    assert_eq!(schedule_lr(&s, 0).unwrap(), 1e-7);
    assert_eq!(schedule_lr(&s, 10).unwrap(), 1e-3);
    let mid = schedule_lr(&s, 60).unwrap();
    assert!((mid - (1e-3 + 1e-5) / 2.0).abs() < 1e-9, "{mid}");
    assert!((schedule_lr(&s, 110).unwrap() - 1e-5).abs() < 1e-15);
    assert!(matches!(schedule_lr(&s, 111), Err(DnaError::Config { .. })));
}

#[test]
fn warmup_stable_decay_examples() {
    let s = Schedule::warmup_stable_decay(10, 100, 1e-3);
    assert_eq!(schedule_lr(&s, 0).unwrap(), 1e-7);
    assert_eq!(schedule_lr(&s, 10).unwrap(), 1e-3);
    assert_eq!(schedule_lr(&s, 80).unwrap(), 1e-3);
    assert!((schedule_lr(&s, 90).unwrap() - 0.55e-3).abs() < 1e-12);
    assert!((schedule_lr(&s, 100).unwrap() - 1e-4).abs() < 1e-12);
}

fn one_param(value: &[f64], grad: &[f64], decay: bool) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let id = store.insert("p", Tensor::new(vec![value.len()], value.to_vec()).unwrap(), decay);
    store.get_mut(id).accumulate_grad(grad).unwrap();
    store
}

fn value(store: &ParamStore<f64>) -> Vec<f64> {
    store.iter().next().unwrap().1.tensor.data().to_vec()
}

#[test]
fn adamw_examples() {
    let cfg = |beta: f64, wd: f64| AdamWConfig {
        beta1: beta,
        beta2: beta,
        eps: 1e-8,
        weight_decay: wd,
    };
    let mut store = one_param(&[0.5, -2.0], &[0.0, 0.0], true);
    AdamW::new(cfg(0.9, 0.0), &store).step(&mut store, 0.1);
    assert_eq!(value(&store), vec![0.5, -2.0]);

    let mut store = one_param(&[0.5], &[1.0], true);
    AdamW::new(cfg(0.0, 0.0), &store).step(&mut store, 0.1);
    assert!((value(&store)[0] - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);

    let mut store = one_param(&[0.5, -2.0], &[0.0, 0.0], true);
    AdamW::new(cfg(0.9, 0.1), &store).step(&mut store, 0.01);
    assert_eq!(value(&store), vec![0.5 * (1.0 - 0.001), -2.0 * (1.0 - 0.001)]);

    // Gains are exempt from decay.
    let mut store = one_param(&[1.5], &[0.0], false);
    AdamW::new(cfg(0.9, 0.1), &store).step(&mut store, 0.01);
    assert_eq!(value(&store), vec![1.5]);
}

fn small_vision() -> DnaConfig {
    DnaConfig {
        task: Task::VisionClassify {
            image_size: 16,
            patch: 4,
            channels: 3,
            classes: 4,
        },
        d_embed: 16,
        d_mlp: 32,
        n_head: 2,
        n_backbone: 1,
        s_max: 3,
        k: 1,
        pool: PoolSpec::blocks(3, 1),
        skip: None,
        stochastic_routing: false,
    }
}

fn small_lm() -> DnaConfig {
    DnaConfig {
        task: Task::CausalLm { vocab: 16, context: 8 },
        d_embed: 16,
        d_mlp: 32,
        n_head: 2,
        n_backbone: 1,
        s_max: 3,
        k: 2,
        pool: PoolSpec::blocks(3, 1),
        skip: None,
        stochastic_routing: false,
    }
}

#[test]
fn zero_steps_keep_the_initialization() {
    let data = ShapesDataset::generate(16, 3, 4, 32, 1).unwrap();
    let mut model = DnaModel::<f32>::new(small_vision(), 4).unwrap();
    let init = model.clone();
    let log = train(&mut model, &data, &TrainConfig::new(0, 8, 1e-3, 0), |_| {}).unwrap();
    assert!(log.is_empty());
    assert!(model.params == init.params);
}

#[test]
fn runs_are_bit_reproducible() {
    let data = CharDataset::periodic(8, 256, 16, 8, 3).unwrap();
    let curve = || {
        let mut model = DnaModel::<f64>::new(small_lm(), 9).unwrap();
        let log = train(&mut model, &data, &TrainConfig::new(15, 4, 3e-3, 2), |_| {}).unwrap();
        (log.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>(), model.params)
    };
    let (a, pa) = curve();
    let (b, pb) = curve();
    assert_eq!(a, b);
    assert!(pa == pb);
}

#[test]
fn non_finite_loss_aborts() {
    let data = CharDataset::periodic(8, 256, 16, 8, 3).unwrap();
    let mut model = DnaModel::<f64>::new(small_lm(), 9).unwrap();
    let id = model.params.id("output.head").unwrap();
    model.params.get_mut(id).data_mut()[0] = f64::NAN;
    let err = train(&mut model, &data, &TrainConfig::new(5, 4, 1e-3, 0), |_| {}).unwrap_err();
    assert!(matches!(err, DnaError::Diverged { step: 0, .. }), "{err}");
}

/// Softmax regression on raw pixels, full-batch gradient descent.
fn logistic_regression_accuracy(data: &ShapesDataset) -> f64 {
    let n = data.pixels.len();
    let f = data.pixels[0].len() + 1;
    let c = data.classes;
    let x: Vec<Vec<f64>> = data.pixels.iter().map(|p| p.iter().copied().chain([1.0]).collect()).collect();
    let mut w = vec![0.0; f * c];
    for _ in 0..300 {
        let mut grad = vec![0.0; f * c];
        for (xi, &yi) in x.iter().zip(&data.labels) {
            let logits: Vec<f64> = (0..c).map(|j| (0..f).map(|i| xi[i] * w[i * c + j]).sum()).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for j in 0..c {
                let p = (logits[j] - max).exp() / z - if j == yi { 1.0 } else { 0.0 };
                for i in 0..f {
                    grad[i * c + j] += p * xi[i] / n as f64;
                }
            }
        }
        w.iter_mut().zip(&grad).for_each(|(w, g)| *w -= 0.5 * g);
    }
    let correct = x
        .iter()
        .zip(&data.labels)
        .filter(|(xi, &yi)| {
            let logits: Vec<f64> = (0..c).map(|j| (0..f).map(|i| xi[i] * w[i * c + j]).sum()).collect();
            let best = (0..c).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
            best == yi
        })
        .count();
    correct as f64 / n as f64
}

#[test]
fn separable_shapes_are_learned_in_200_steps() {
    let data = ShapesDataset::generate(16, 3, 4, 128, 5).unwrap();
    assert!(logistic_regression_accuracy(&data) >= 0.95);
    let mut model = DnaModel::<f32>::new(small_vision(), 1).unwrap();
    let mut cfg = TrainConfig::new(200, 32, 3e-3, 2);
    cfg.schedule = Schedule::warmup_cosine(20, 200, 3e-3);
    train(&mut model, &data, &cfg, |_| {}).unwrap();
    let (_, acc) = evaluate(&model, &data, data.len(), 32).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedules_start_at_init_and_move_smoothly(
        warmup in 1usize..50,
        extra in 1usize..200,
        peak in 1e-4f64..1e-2,
        wsd in any::<bool>(),
    ) {
        let total = warmup + extra;
        let s = if wsd {
            Schedule::warmup_stable_decay(warmup, total, peak)
        } else {
            Schedule::warmup_cosine(warmup, total, peak)
        };
        prop_assert_eq!(schedule_lr(&s, 0).unwrap(), 1e-7);
        prop_assert!((schedule_lr(&s, warmup).unwrap() - peak).abs() < 1e-12);
        // Largest possible jump between neighbouring steps.
        let decay = total - (total - (0.2 * total as f64).round() as usize).max(warmup);
        let bound = peak / warmup as f64 + peak * std::f64::consts::PI / extra as f64 + peak / decay.max(1) as f64 + 1e-12;
        let mut prev = schedule_lr(&s, 0).unwrap();
        for t in 1..=total {
            let lr = schedule_lr(&s, t).unwrap();
            prop_assert!(lr > 0.0 && lr <= peak * (1.0 + 1e-12));
            prop_assert!((lr - prev).abs() <= bound, "t {} jump {}", t, (lr - prev).abs());
            prev = lr;
        }
        prop_assert!(schedule_lr(&s, total + 1).is_err());
    }
}
