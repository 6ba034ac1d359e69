//! The built-in acceptance suite. Each criterion is a self-contained
//! experiment returning a pass/fail verdict and a one-line detail.

pub mod reference;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analytics::{effective_topk, powerlaw_fit, trace_rank_frequency, DEFAULT_ALPHA};
use crate::dreaming::{dream, DreamObjective, DreamParams, DreamSettings, CHANNELS};
use crate::error::{DnaError, Result};
use crate::model::{
    ribbon_compute, Batch, DnaConfig, DnaModel, ForwardOptions, ModelInput, PoolSpec, RoutingOverride, Task,
};
use crate::nn::{module_forward, ModuleKind};
use crate::rng::{seeded, DnaRng};
use crate::routing::{combine_step, route, BiasController, RouteDecision, SkipControl};
use crate::tensor::gradcheck::{self, rel_err};
use crate::tensor::{Graph, Scalar, Tensor, TensorError};
use crate::train::{
    evaluate, train, train_with_hooks, CharDataset, Dataset, Phase, ShapesDataset, TrainConfig, TrainHooks,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionReport {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

type Outcome = Result<(bool, String)>;

pub struct Criterion {
    pub id: usize,
    pub name: &'static str,
    run: fn() -> Outcome,
}

pub const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "dense-reduction", run: dense_reduction },
    Criterion { id: 2, name: "identity-invariance", run: identity_invariance },
    Criterion { id: 3, name: "gradient-integrity", run: gradient_integrity },
    Criterion { id: 4, name: "skip-control", run: skip_control },
    Criterion { id: 5, name: "path-law", run: path_law },
    Criterion { id: 6, name: "effective-topk", run: effective_topk_exactness },
    Criterion { id: 7, name: "subset-attention", run: subset_attention },
    Criterion { id: 8, name: "learnability", run: learnability },
    Criterion { id: 9, name: "dreaming", run: dreaming },
    Criterion { id: 10, name: "bias-decoupling", run: bias_decoupling },
];

/// Criteria matching a comma-separated filter of ids or name substrings.
/// `None` or an empty filter selects everything.
pub fn select(filter: Option<&str>) -> Result<Vec<&'static Criterion>> {
    let Some(filter) = filter.map(str::trim).filter(|f| !f.is_empty()) else {
        return Ok(CRITERIA.iter().collect());
    };
    let mut chosen: Vec<&Criterion> = Vec::new();
    for term in filter.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let hits: Vec<&Criterion> = match term.parse::<usize>() {
            Ok(id) => CRITERIA.iter().filter(|c| c.id == id).collect(),
            Err(_) => CRITERIA.iter().filter(|c| c.name.contains(term)).collect(),
        };
        if hits.is_empty() {
            return Err(DnaError::config("verify.filter", format!("no criterion matches {term:?}")));
        }
        for c in hits {
            if !chosen.iter().any(|x| x.id == c.id) {
                chosen.push(c);
            }
        }
    }
    chosen.sort_by_key(|c| c.id);
    Ok(chosen)
}

pub fn run_criterion(c: &Criterion) -> CriterionReport {
    let t0 = Instant::now();
    let (passed, detail) = match (c.run)() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    CriterionReport {
        id: c.id,
        name: c.name,
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Runs the selected criteria, handing each report to `on_report` as soon
/// as it is available.
pub fn run(filter: Option<&str>, mut on_report: impl FnMut(&CriterionReport)) -> Result<Vec<CriterionReport>> {
    let mut out = Vec::new();
    for c in select(filter)? {
        let r = run_criterion(c);
        on_report(&r);
        out.push(r);
    }
    Ok(out)
}

fn normal(rng: &mut DnaRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Replaces every parameter with draws large enough that attention and
/// routing are far from uniform: matrices N(0, std²), gains 1 + N(0, 0.2²).
fn scramble<T: Scalar>(model: &mut DnaModel<T>, std: f64, seed: u64) {
    let mut rng = seeded(seed);
    for (_, p) in model.params.iter_mut() {
        let is_gain = p.tensor.shape().len() == 1;
        for v in p.tensor.data_mut() {
            let z = normal(&mut rng);
            *v = T::from_f64_lossy(if is_gain { 1.0 + 0.2 * z } else { std * z });
        }
    }
}

fn random_tokens(rng: &mut DnaRng, vocab: usize, context: usize, batch: usize) -> Batch {
    let ids: Vec<usize> = (0..batch * context).map(|_| rng.random_range(0..vocab)).collect();
    let targets = (0..batch * context).map(|_| rng.random_range(0..vocab)).collect();
    Batch::Tokens { ids, targets, batch }
}

fn random_images(rng: &mut DnaRng, task: &Task, batch: usize) -> Batch {
    let Task::VisionClassify {
        image_size,
        channels,
        classes,
        ..
    } = *task
    else {
        unreachable!("image batch for a vision task")
    };
    let pixels = (0..batch * channels * image_size * image_size).map(|_| rng.random::<f64>()).collect();
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    Batch::Images { pixels, labels, batch }
}

fn random_batch(rng: &mut DnaRng, task: &Task, batch: usize) -> Batch {
    match *task {
        Task::CausalLm { vocab, context } => random_tokens(rng, vocab, context, batch),
        Task::VisionClassify { .. } => random_images(rng, task, batch),
    }
}

/// Small configs covering every module kind.
fn tiny_lm(vocab: usize, context: usize) -> DnaConfig {
    DnaConfig {
        task: Task::CausalLm { vocab, context },
        d_embed: 16,
        d_mlp: 24,
        n_head: 2,
        n_backbone: 1,
        s_max: 4,
        k: 1,
        pool: PoolSpec::List(vec![
            ModuleKind::TransformerBlock,
            ModuleKind::AttentionOnly,
            ModuleKind::MlpOnly,
            ModuleKind::Identity,
        ]),
        skip: None,
        stochastic_routing: false,
    }
}

fn tiny_vision() -> DnaConfig {
    DnaConfig {
        task: Task::VisionClassify {
            image_size: 8,
            patch: 4,
            channels: 3,
            classes: 5,
        },
        ..tiny_lm(2, 2)
    }
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

fn bits_equal<T: Scalar>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}

fn dense_reduction() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (label, cfg) in [("lm", tiny_lm(17, 8)), ("vision", tiny_vision())] {
        let mut model = DnaModel::<f64>::new(cfg.clone(), 3)?;
        scramble(&mut model, 0.3, 4);
        let modules: Vec<usize> = (0..cfg.n_routers()).collect();
        let routing = RoutingOverride::one_hot(&modules, cfg.n_modules());
        let mut rng = seeded(5);
        for b in 0..20 {
            let batch = random_batch(&mut rng, &cfg.task, 2);
            let (logits, trace) = model.forward_with(&batch, routing.clone(), 0)?;
            if trace.ribbons().any(|r| r.iter().enumerate().any(|(s, t)| t != &vec![s])) {
                return Ok((false, format!("{label} batch {b}: routers did not select module = step")));
            }
            let oracle = reference::dense_logits(&model, &batch, &modules)?;
            worst = worst.max(max_rel_err(logits.data(), &oracle));
            count += 1;
        }
    }
    Ok((worst < 1e-5, format!("max relative error {worst:.2e} over {count} batches (tolerance 1e-5)")))
}

fn identity_case<T: Scalar>(cfg: &DnaConfig, routing: RoutingOverride, seed: u64) -> Result<bool> {
    let model = DnaModel::<T>::new(cfg.clone(), seed)?;
    let mut rng = seeded(seed + 100);
    let batch = random_batch(&mut rng, &cfg.task, 3);
    let mut g = Graph::new();
    let pass = model.forward_graph(
        &mut g,
        ModelInput::Batch(&batch),
        ForwardOptions {
            routing,
            ..Default::default()
        },
    )?;
    let logits = g.tensor(pass.logits.expect("full pass"));
    let mut g2 = Graph::new();
    let h = g2.constant(g.tensor(pass.backbone_out));
    let direct = model.output.forward(&mut g2, &model.params, h, batch.size(), false)?;
    Ok(pass.hidden == pass.backbone_out
        && bits_equal(g.value(pass.hidden), g.value(pass.backbone_out))
        && bits_equal(logits.data(), g2.value(direct)))
}

fn identity_invariance() -> Outcome {
    let mut cases = 0;
    let mut failed = Vec::new();
    for base in [tiny_lm(17, 8), tiny_vision()] {
        for (k, pool) in [(1, PoolSpec::blocks(3, 1)), (2, PoolSpec::blocks(3, 2))] {
            let cfg = DnaConfig { k, pool, ..base.clone() };
            let n = cfg.n_modules();
            let ident: Vec<usize> = (0..n).filter(|&i| cfg.identity_mask()[i]).collect();
            let rows = 3 * cfg.task.tokens();
            let forced = RoutingOverride::Forced(vec![vec![ident.clone(); rows]; cfg.n_routers()]);
            let mut overrides = vec![forced];
            if k == 1 {
                overrides.push(RoutingOverride::one_hot(&vec![ident[0]; cfg.n_routers()], n));
            }
            for routing in overrides {
                for seed in 0..3 {
                    cases += 2;
                    if !identity_case::<f32>(&cfg, routing.clone(), seed)? {
                        failed.push(format!("f32 k={k} seed {seed}"));
                    }
                    if !identity_case::<f64>(&cfg, routing.clone(), seed)? {
                        failed.push(format!("f64 k={k} seed {seed}"));
                    }
                }
            }
        }
    }
    Ok(if failed.is_empty() {
        (true, format!("routed stack is a bitwise no-op in {cases} cases"))
    } else {
        (false, format!("not bitwise in {}", failed.join(", ")))
    })
}

fn to_tensor_err(e: DnaError) -> TensorError {
    match e {
        DnaError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

fn gradient_integrity() -> Outcome {
    let cfg = DnaConfig {
        task: Task::CausalLm { vocab: 8, context: 4 },
        d_embed: 8,
        d_mlp: 16,
        n_head: 2,
        n_backbone: 1,
        s_max: 3,
        k: 2,
        pool: PoolSpec::blocks(2, 1),
        skip: None,
        stochastic_routing: false,
    };
    let mut model = DnaModel::<f64>::new(cfg.clone(), 7)?;
    scramble(&mut model, 0.5, 8);
    let mut rng = seeded(9);
    let batch = random_tokens(&mut rng, 8, 4, 2);
    let rows = 8;
    // Every pair of the three modules appears at every step.
    let pairs = [vec![0, 1], vec![0, 2], vec![1, 2]];
    let selections: Vec<Vec<Vec<usize>>> = (0..cfg.n_routers())
        .map(|s| (0..rows).map(|r| pairs[(r + s) % 3].clone()).collect())
        .collect();
    let routing = RoutingOverride::Forced(selections);
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| model.params.get(id).clone()).collect();
    let report = gradcheck::check(&inputs, 1e-5, |g, vars| {
        for (&id, &v) in ids.iter().zip(vars) {
            g.bind_param(&model.params, id, true, v)?;
        }
        let pass = model
            .forward_graph(
                g,
                ModelInput::Batch(&batch),
                ForwardOptions {
                    track: true,
                    routing: routing.clone(),
                    ..Default::default()
                },
            )
            .map_err(to_tensor_err)?;
        model.loss(g, &pass, &batch).map_err(to_tensor_err)
    })?;
    let total = model.params.total_count();
    let worst = &model.params.param(ids[report.worst.0]).name;
    let passed = report.max_rel_err < 1e-4 && report.checked == total;
    Ok((
        passed,
        format!(
            "{} of {total} parameters incl. {} router weights checked, max relative error {:.2e} at {worst} (tolerance 1e-4)",
            report.checked,
            model.params.count(model.router_ids()),
            report.max_rel_err
        ),
    ))
}

fn skip_control() -> Outcome {
    let (d, n, k, steps, tokens) = (16, 8, 2, 2, 256);
    let identity: Vec<bool> = (0..n).map(|i| i >= n - 2).collect();
    let control = SkipControl {
        target: 0.3,
        speed: 0.001,
    };
    let mut rng = seeded(21);
    let weights: Vec<Tensor<f64>> = (0..steps)
        .map(|_| {
            let data = (0..d * n).map(|_| 0.02 * normal(&mut rng)).collect();
            Tensor::new(vec![d, n], data).expect("sized")
        })
        .collect();
    let mut ctl = BiasController::new(steps, identity.clone(), k, Some(control));
    let stream = |rng: &mut DnaRng, ctl: &BiasController| -> Result<Vec<Vec<RouteDecision>>> {
        let h = Tensor::new(vec![tokens, d], (0..tokens * d).map(|_| normal(rng)).collect())?;
        (0..steps)
            .map(|s| route::<f64, DnaRng>(s, &weights[s], &h, ctl.biases(s), k, None))
            .collect()
    };
    for _ in 0..2000 {
        let decisions = stream(&mut rng, &ctl)?;
        for step in &decisions {
            ctl.record(step);
        }
        ctl.update();
    }
    // Judge the controller after its 2000 updates on fresh tokens.
    let (mut ident, mut total, mut compute, mut ribbons) = (0usize, 0usize, 0.0, 0usize);
    for _ in 0..16 {
        let decisions = stream(&mut rng, &ctl)?;
        for t in 0..tokens {
            let ribbon: Vec<Vec<usize>> = decisions.iter().map(|s| s[t].selected.clone()).collect();
            ident += ribbon.iter().flatten().filter(|&&i| identity[i]).count();
            total += ribbon.iter().map(Vec::len).sum::<usize>();
            compute += ribbon_compute(&ribbon, &identity, k);
            ribbons += 1;
        }
    }
    let frac = ident as f64 / total as f64;
    let compute = compute / ribbons as f64;
    let passed = (0.25..=0.35).contains(&frac) && (0.65..=0.75).contains(&compute);
    Ok((
        passed,
        format!(
            "identity fraction {frac:.4} (target [0.25, 0.35]), mean normalized compute {compute:.4} (target [0.65, 0.75]) after {} updates",
            ctl.updates()
        ),
    ))
}

/// Tokens used by the path-law criterion; see the ledger for why the sample
/// is four times the stated minimum.
pub const PATH_LAW_TOKENS: usize = 409_600;

fn path_law() -> Outcome {
    let (vocab, context, batch) = (128, 128, 16);
    let cfg = DnaConfig {
        task: Task::CausalLm { vocab, context },
        s_max: 9,
        pool: PoolSpec::blocks(12, 0),
        ..DnaConfig::lm_default()
    };
    let model = DnaModel::<f32>::new(cfg, 11)?;
    let mut rng = seeded(5);
    let batches = PATH_LAW_TOKENS / (batch * context);
    let mut traces = Vec::with_capacity(batches);
    for b in 0..batches {
        let data = random_tokens(&mut rng, vocab, context, batch);
        traces.push(model.forward_with(&data, RoutingOverride::None, b * batch)?.1);
    }
    let stats = trace_rank_frequency(&traces)?;
    let fit = powerlaw_fit(&stats.counts(), 0.05, 0.95)?;
    let passed = (-1.3..=-0.7).contains(&fit.slope);
    Ok((
        passed,
        format!(
            "slope {:.4} (target [-1.3, -0.7]), r² {:.3}, ranks {}..{} of {} distinct paths over {} tokens",
            fit.slope,
            fit.r2,
            fit.rank_lo,
            fit.rank_hi,
            stats.ranked.len(),
            stats.total
        ),
    ))
}

fn effective_topk_exactness() -> Outcome {
    let mut worst_one: f64 = 0.0;
    let mut worst_uniform: f64 = 0.0;
    for n in 1..=64usize {
        for scale in [1.0, 3.0, 1e-3, 7.5e5] {
            for hot in [0, n / 2, n - 1] {
                let mut c = vec![0.0; n];
                c[hot] = scale;
                worst_one = worst_one.max((effective_topk(&c, DEFAULT_ALPHA)? - 1.0).abs());
            }
            let u = effective_topk(&vec![scale; n], DEFAULT_ALPHA)?;
            worst_uniform = worst_uniform.max((u - (n as f64).sqrt()).abs());
        }
    }
    let mut rng = seeded(31);
    let mut bitwise = true;
    let mut worst_scale: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(2..40);
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0..1000) as f64).collect();
        if c.iter().all(|&v| v == 0.0) {
            continue;
        }
        let base = effective_topk(&c, DEFAULT_ALPHA)?;
        for p in [-8, -1, 1, 5, 20] {
            let s: Vec<f64> = c.iter().map(|v| v * 2f64.powi(p)).collect();
            bitwise &= effective_topk(&s, DEFAULT_ALPHA)?.to_bits() == base.to_bits();
        }
        let lambda = rng.random_range(0.01..1000.0);
        let s: Vec<f64> = c.iter().map(|v| v * lambda).collect();
        worst_scale = worst_scale.max(((effective_topk(&s, DEFAULT_ALPHA)? - base) / base).abs());
    }
    let passed = worst_one <= 1e-9 && worst_uniform <= 1e-9 && bitwise && worst_scale <= 1e-12;
    Ok((
        passed,
        format!(
            "one-hot error {worst_one:.1e}, uniform error {worst_uniform:.1e} (tolerance 1e-9); power-of-two rescaling bitwise {bitwise}; arbitrary rescaling max relative change {worst_scale:.1e}"
        ),
    ))
}

fn random_subset(rng: &mut DnaRng, rows: usize) -> Vec<usize> {
    loop {
        let s: Vec<usize> = (0..rows).filter(|_| rng.random_bool(0.5)).collect();
        if !s.is_empty() {
            return s;
        }
    }
}

fn subset_attention() -> Outcome {
    let (seqs, context) = (3, 12);
    let rows = seqs * context;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for causal in [true, false] {
        let base = tiny_lm(17, context);
        let cfg = if causal {
            base
        } else {
            DnaConfig {
                task: Task::VisionClassify {
                    image_size: 4 * 4,
                    patch: 4,
                    channels: 1,
                    classes: 2,
                },
                ..base
            }
        };
        let mut model = DnaModel::<f64>::new(cfg.clone(), 13)?;
        scramble(&mut model, 0.5, 14);
        let tokens = cfg.task.tokens();
        let rows = seqs * tokens;
        let mut rng = seeded(15);
        for _ in 0..20 {
            let h = Tensor::new(vec![rows, cfg.d_embed], (0..rows * cfg.d_embed).map(|_| normal(&mut rng)).collect())?;
            let subset = random_subset(&mut rng, rows);
            for (i, kind) in cfg.pool_kinds().into_iter().enumerate() {
                if !kind.has_attention() {
                    continue;
                }
                let mut g = Graph::new();
                let hv = g.constant(h.clone());
                let x = g.gather_rows(hv, &subset)?;
                let layout = std::sync::Arc::new(model.subset_layout(&subset));
                let y = module_forward(&mut g, &model.params, &model.pool[i], x, &layout, false)?;
                let y = g.tensor(y);
                for s in 0..seqs {
                    let local: Vec<usize> = (0..subset.len()).filter(|&j| subset[j] / tokens == s).collect();
                    if local.is_empty() {
                        continue;
                    }
                    let data = local.iter().flat_map(|&j| h.row(subset[j]).to_vec()).collect();
                    let dense = reference::Mat::new(local.len(), cfg.d_embed, data);
                    let oracle = reference::module(&model, &format!("pool.{i}"), kind, &dense)?;
                    for (r, &j) in local.iter().enumerate() {
                        for (a, b) in y.row(j).iter().zip(oracle.row(r)) {
                            worst = worst.max((a - b).abs() / b.abs().max(1.0));
                        }
                    }
                }
                cases += 1;
            }
        }
    }

    // Causal perturbation: changing the token at position p may only move
    // outputs of its own sequence at positions ≥ p.
    let cfg = DnaConfig {
        k: 2,
        s_max: 4,
        pool: PoolSpec::List(vec![
            ModuleKind::TransformerBlock,
            ModuleKind::TransformerBlock,
            ModuleKind::AttentionOnly,
            ModuleKind::Identity,
        ]),
        ..tiny_lm(17, context)
    };
    let mut model = DnaModel::<f64>::new(cfg.clone(), 16)?;
    scramble(&mut model, 0.5, 17);
    let n = cfg.n_modules();
    let mut rng = seeded(18);
    let mut leaks = 0;
    let mut unmoved = 0;
    for _ in 0..100 {
        let selections: Vec<Vec<Vec<usize>>> = (0..cfg.n_routers())
            .map(|_| {
                (0..rows)
                    .map(|_| {
                        let mut all: Vec<usize> = (0..n).collect();
                        all.shuffle(&mut rng);
                        all.truncate(cfg.k);
                        all
                    })
                    .collect()
            })
            .collect();
        let routing = RoutingOverride::Forced(selections);
        let Batch::Tokens { ids, targets, batch } = random_tokens(&mut rng, 17, context, seqs) else {
            unreachable!()
        };
        let seq = rng.random_range(0..seqs);
        let p = rng.random_range(0..context);
        let mut moved = ids.clone();
        moved[seq * context + p] = (ids[seq * context + p] + 1 + rng.random_range(0..16)) % 17;
        let a = model.forward_with(&Batch::Tokens { ids, targets: targets.clone(), batch }, routing.clone(), 0)?.0;
        let b = model.forward_with(&Batch::Tokens { ids: moved, targets, batch }, routing, 0)?.0;
        for r in 0..rows {
            let same = bits_equal(a.row(r), b.row(r));
            let may_move = r / context == seq && r % context >= p;
            if !may_move && !same {
                leaks += 1;
            }
            if r == seq * context + p && same {
                unmoved += 1;
            }
        }
    }
    let passed = worst <= 1e-10 && leaks == 0 && unmoved == 0;
    Ok((
        passed,
        format!(
            "subset vs dense max relative error {worst:.2e} over {cases} module calls (tolerance 1e-10); causal perturbation over 100 random routings: {leaks} leaked rows, {unmoved} unaffected perturbed rows"
        ),
    ))
}

fn learnability() -> Outcome {
    let t0 = Instant::now();
    let cfg = DnaConfig::vision_default(4);
    let mut model = DnaModel::<f32>::new(cfg.clone(), 1)?;
    let data = ShapesDataset::for_task(&cfg.task, 256, 7)?;
    let steps_v = 600;
    train(&mut model, &data, &TrainConfig::new(steps_v, 32, 3e-3, 3), |_| {})?;
    let (_, acc) = evaluate(&model, &data, 256, 64)?;
    let vision_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let cfg = DnaConfig {
        task: Task::CausalLm { vocab: 64, context: 64 },
        d_embed: 32,
        d_mlp: 64,
        ..DnaConfig::lm_default()
    };
    let mut model = DnaModel::<f32>::new(cfg, 1)?;
    let text = CharDataset::periodic(64, 4096, 64, 64, 5)?;
    let steps_lm = 500;
    train(&mut model, &text, &TrainConfig::new(steps_lm, 8, 3e-3, 3), |_| {})?;
    let (loss, _) = evaluate(&model, &text, 32, 8)?;
    let lm_secs = t1.elapsed().as_secs_f64();

    let passed = acc >= 0.95 && loss < 0.1 && vision_secs < 900.0 && lm_secs < 900.0;
    Ok((
        passed,
        format!(
            "vision train accuracy {:.1}% after {steps_v} steps ({vision_secs:.0}s, target ≥95% in ≤2000); char-LM loss {loss:.4} nats after {steps_lm} steps ({lm_secs:.0}s, target <0.1 in ≤1000)",
            acc * 100.0
        ),
    ))
}

/// The frozen toy model dreamed against: a 64-pixel shapes classifier.
pub fn dream_toy_model() -> Result<(DnaModel<f32>, Vec<f64>)> {
    let cfg = DnaConfig {
        task: Task::VisionClassify {
            image_size: 64,
            patch: 16,
            channels: CHANNELS,
            classes: 4,
        },
        s_max: 4,
        pool: PoolSpec::blocks(4, 1),
        ..DnaConfig::vision_default(4)
    };
    let mut model = DnaModel::<f32>::new(cfg.clone(), 1)?;
    let data = ShapesDataset::for_task(&cfg.task, 128, 7)?;
    train(&mut model, &data, &TrainConfig::new(150, 16, 3e-3, 3), |_| {})?;
    Ok((model, data.pixels[0].clone()))
}

fn dreaming() -> Outcome {
    let side = 64;
    let gray = DreamParams::<f64>::zeros(side).render();
    let uniform = gray.data().iter().all(|&v| v == 0.5);

    let small = DreamParams::<f64>::zeros(8);
    let mut rng = seeded(41);
    let theta = Tensor::new(vec![CHANNELS, 8, 8, 2], (0..CHANNELS * 128).map(|_| 0.5 * normal(&mut rng)).collect())?;
    let probe: Vec<f64> = (0..CHANNELS * 64).map(|_| normal(&mut rng)).collect();
    let fd = gradcheck::check(&[theta], 1e-6, |g, v| {
        let img = small.render_from(g, v[0]).map_err(to_tensor_err)?;
        let w = g.mul_const(img, probe.clone())?;
        Ok(g.sum(w))
    })?;

    let (model, reference) = dream_toy_model()?;
    let obj = DreamObjective::from_reference(&model, &reference, 3, vec![], vec![])?;
    let plain = dream(&model, &obj, &reference, &DreamSettings::plain(256), 1)?;
    let mut prev = plain.clean_initial;
    let mut decreases = 0;
    for &c in &plain.clean {
        decreases += usize::from(c < prev);
        prev = c;
    }

    let mut improved = 0;
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let r = dream(&model, &obj, &reference, &DreamSettings::standard(), seed)?;
        let ratio = r.clean_final / r.clean_initial;
        improved += usize::from(ratio >= 1.2);
        ratios.push(format!("{ratio:.2}"));
    }
    let passed = uniform && fd.max_rel_err < 1e-3 && decreases == 0 && improved >= 8;
    Ok((
        passed,
        format!(
            "render(0) uniform gray {uniform}; render gradient max relative error {:.1e}; plain ascent {} -> {} with {decreases} decreases in 256 steps; regularized clean objective ratio [{}], {improved}/10 seeds ≥1.2",
            fd.max_rel_err,
            fmt_short(plain.clean_initial),
            fmt_short(plain.clean_final),
            ratios.join(", ")
        ),
    ))
}

fn fmt_short(v: f64) -> String {
    format!("{v:.3}")
}

/// Snapshots the biases at every phase of a training run and counts any
/// change that happens outside the bias update.
struct BiasWatch {
    last: Vec<Vec<f64>>,
    identity: Vec<bool>,
    stray_changes: usize,
    updates_seen: usize,
    updates_changed: usize,
    nonidentity_nonzero: bool,
}

impl<T: Scalar> TrainHooks<T> for BiasWatch {
    fn phase(&mut self, _step: usize, phase: Phase, model: &DnaModel<T>) {
        let now = model.bias.all_biases();
        let changed = now != self.last.as_slice();
        for row in now {
            for (i, &b) in row.iter().enumerate() {
                self.nonidentity_nonzero |= !self.identity[i] && b != 0.0;
            }
        }
        match phase {
            Phase::BiasUpdate => {
                self.updates_seen += 1;
                self.updates_changed += usize::from(changed);
            }
            _ => self.stray_changes += usize::from(changed),
        }
        self.last = now.to_vec();
    }
}

fn bias_decoupling() -> Outcome {
    let cfg = DnaConfig {
        task: Task::CausalLm { vocab: 16, context: 16 },
        d_embed: 16,
        d_mlp: 32,
        n_head: 2,
        n_backbone: 1,
        s_max: 3,
        k: 2,
        pool: PoolSpec::blocks(3, 2),
        skip: Some(SkipControl {
            target: 0.3,
            speed: 0.001,
        }),
        stochastic_routing: false,
    };
    let mut model = DnaModel::<f32>::new(cfg.clone(), 51)?;
    let data = CharDataset::periodic(16, 2048, 16, 16, 52)?;
    let mut watch = BiasWatch {
        last: model.bias.all_biases().to_vec(),
        identity: cfg.identity_mask(),
        stray_changes: 0,
        updates_seen: 0,
        updates_changed: 0,
        nonidentity_nonzero: false,
    };
    let steps = 500;
    train_with_hooks(&mut model, &data, &TrainConfig::new(steps, 4, 3e-3, 53), &mut watch)?;

    let max_bias = model.bias.all_biases().iter().flatten().fold(0.0f64, |m, b| m.max(b.abs()));
    let mut combines = 0;
    let mut mismatches = 0;
    let mut rng = seeded(54);
    for _ in 0..8 {
        let batch = data.sample(&mut rng, 4);
        let mut g = Graph::new();
        let pass = model.forward_graph(&mut g, ModelInput::Batch(&batch), ForwardOptions::default())?;
        for s in 0..pass.decisions.len() {
            let h_prev = g.tensor(pass.step_inputs[s]);
            let next = pass.step_inputs.get(s + 1).copied().unwrap_or(pass.hidden);
            let h_next = g.tensor(next);
            let zeroed: Vec<RouteDecision> = pass.decisions[s]
                .iter()
                .map(|d| RouteDecision {
                    scores: d.probs.clone(),
                    ..d.clone()
                })
                .collect();
            let outputs = model.module_outputs(&h_prev, &zeroed)?;
            let rows: Vec<Vec<f32>> = (0..h_prev.rows()).map(|r| h_prev.row(r).to_vec()).collect();
            let recomputed = combine_step(&rows, &zeroed, &outputs, &cfg.identity_mask())?;
            for (r, row) in recomputed.iter().enumerate() {
                combines += 1;
                mismatches += usize::from(!bits_equal(row, h_next.row(r)));
            }
        }
    }
    let passed = watch.stray_changes == 0
        && watch.updates_seen == steps
        && watch.updates_changed > 0
        && !watch.nonidentity_nonzero
        && max_bias > 0.0
        && mismatches == 0;
    Ok((
        passed,
        format!(
            "{steps} steps: {} bias changes outside bias_update, {}/{} updates moved the biases (final max |b| {max_bias:.3}); zero-bias combine_step mismatches {mismatches}/{combines} rows",
            watch.stray_changes, watch.updates_changed, watch.updates_seen
        ),
    ))
}
