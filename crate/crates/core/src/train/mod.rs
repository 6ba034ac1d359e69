//! Cross-entropy training with AdamW, learning-rate schedules and the
//! identity-bias controller.

mod data;
mod optim;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use data::{CharDataset, Dataset, RandomTokens, ShapesDataset, TextSource, SHAPES};
pub use optim::{clip_grad_norm, schedule_lr, AdamW, AdamWConfig, Schedule};

use crate::analytics::effective_topk;
use crate::error::{DnaError, Result};
use crate::model::{Batch, DnaModel, ForwardOptions, ModelInput};
use crate::routing::selection_histogram;
use crate::tensor::{Graph, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    #[serde(default)]
    pub optim: AdamWConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip: Option<f64>,
    pub seed: u64,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, lr_peak: f64, seed: u64) -> Self {
        Self {
            steps,
            batch_size,
            schedule: Schedule::warmup_cosine(steps / 10, steps, lr_peak),
            optim: AdamWConfig::default(),
            clip: default_clip(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DnaError::config("train.batch_size", "must be positive"));
        }
        if self.schedule.total() < self.steps {
            return Err(DnaError::config(
                "train.schedule.total",
                format!("schedule covers {} steps but {} are requested", self.schedule.total(), self.steps),
            ));
        }
        self.schedule.validate()
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Fraction of selections that went to identity modules.
    pub skip_fraction: f64,
    /// Effective top-k of each routed step's selection counts.
    pub effective_topk: Vec<f64>,
}

pub const METRICS_HEADER: &str = "step\tloss\tlr\tskip_fraction\teffective_topk";

impl StepMetrics {
    /// Tab-separated row; per-step effective top-k joined by commas.
    pub fn tsv_row(&self) -> String {
        let eff: Vec<String> = self.effective_topk.iter().map(|v| format!("{v:.6}")).collect();
        format!(
            "{}\t{:.8}\t{:.8e}\t{:.6}\t{}",
            self.step,
            self.loss,
            self.lr,
            self.skip_fraction,
            eff.join(",")
        )
    }
}

pub fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| DnaError::io(path, e))?;
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for m in metrics {
        text.push_str(&m.tsv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| DnaError::io(path, e))
}

/// Loss, gradients into the store, and the routing decisions of one batch.
pub fn loss_and_grads<T: Scalar>(
    model: &mut DnaModel<T>,
    batch: &Batch,
    rng: Option<&mut crate::rng::DnaRng>,
) -> Result<(f64, Vec<Vec<crate::routing::RouteDecision>>)> {
    let mut g = Graph::new();
    let pass = model.forward_graph(
        &mut g,
        ModelInput::Batch(batch),
        ForwardOptions {
            track: true,
            rng,
            ..Default::default()
        },
    )?;
    let loss = model.loss(&mut g, &pass, batch)?;
    let value = g.scalar_value(loss).as_f64();
    let grads = g.backward(loss)?;
    model.params.zero_grads();
    g.accumulate_param_grads(&grads, &mut model.params)?;
    Ok((value, pass.decisions))
}

/// Points inside one training step at which [`TrainHooks`] are called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Forward and backward done, gradients in the store.
    Gradients,
    /// Optimizer update applied.
    Optimizer,
    /// Identity biases updated from the step's counts.
    BiasUpdate,
}

pub trait TrainHooks<T> {
    fn phase(&mut self, _step: usize, _phase: Phase, _model: &DnaModel<T>) {}
    fn step(&mut self, _metrics: &StepMetrics) {}
}

struct StepFn<F>(F);

impl<T, F: FnMut(&StepMetrics)> TrainHooks<T> for StepFn<F> {
    fn step(&mut self, metrics: &StepMetrics) {
        (self.0)(metrics)
    }
}

/// Runs `cfg.steps` optimizer steps. `on_step` sees each metrics row as it
/// is produced. The bias controller is updated once per step from that
/// step's routing counts.
pub fn train<T: Scalar>(
    model: &mut DnaModel<T>,
    data: &dyn Dataset,
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    train_with_hooks(model, data, cfg, &mut StepFn(on_step))
}

pub fn train_with_hooks<T: Scalar>(
    model: &mut DnaModel<T>,
    data: &dyn Dataset,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks<T>,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    let mut rng = crate::rng::seeded(cfg.seed);
    let mut route_rng = crate::rng::seeded(cfg.seed ^ 0x5eed_0f_4a7e);
    let mut opt = AdamW::new(cfg.optim, &model.params);
    let n_steps = model.config.n_routers();
    let n_modules = model.config.n_modules();
    let identity = model.config.identity_mask();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = data.sample(&mut rng, cfg.batch_size);
        let stochastic = model.config.stochastic_routing.then_some(&mut route_rng);
        let (loss, decisions) = loss_and_grads(model, &batch, stochastic)?;
        if !loss.is_finite() {
            return Err(DnaError::Diverged { step, value: loss });
        }
        hooks.phase(step, Phase::Gradients, model);
        if let Some(max) = cfg.clip {
            clip_grad_norm(&mut model.params, max);
        }
        let lr = schedule_lr(&cfg.schedule, step)?;
        opt.step(&mut model.params, lr);
        hooks.phase(step, Phase::Optimizer, model);

        let flat: Vec<_> = decisions.iter().flatten().cloned().collect();
        let hist = selection_histogram(&flat, n_steps, n_modules);
        let total: u64 = hist.iter().flatten().sum();
        let skipped: u64 = hist
            .iter()
            .map(|row| row.iter().zip(&identity).filter(|(_, &id)| id).map(|(&c, _)| c).sum::<u64>())
            .sum();
        let effective = hist
            .iter()
            .map(|row| {
                let c: Vec<f64> = row.iter().map(|&c| c as f64).collect();
                effective_topk(&c, crate::analytics::DEFAULT_ALPHA).unwrap_or(f64::NAN)
            })
            .collect();
        if model.config.skip.is_some() {
            model.bias.record(&flat);
            model.bias.update();
            hooks.phase(step, Phase::BiasUpdate, model);
        }
        let m = StepMetrics {
            step,
            loss,
            lr,
            skip_fraction: if total == 0 { 0.0 } else { skipped as f64 / total as f64 },
            effective_topk: effective,
        };
        hooks.step(&m);
        log.push(m);
    }
    model.params.zero_grads();
    Ok(log)
}

/// Mean loss and accuracy over `count` examples taken in order.
pub fn evaluate<T: Scalar>(model: &DnaModel<T>, data: &dyn Dataset, count: usize, batch_size: usize) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut start = 0;
    while start < count {
        let size = batch_size.min(count - start);
        let batch = data.slice(start, size);
        let mut g = Graph::new();
        let pass = model.forward_graph(&mut g, ModelInput::Batch(&batch), ForwardOptions::default())?;
        let loss = model.loss(&mut g, &pass, &batch)?;
        let logits = g.tensor(pass.logits.expect("full pass"));
        let targets = batch.targets();
        loss_sum += g.scalar_value(loss).as_f64() * targets.len() as f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let arg = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(b.cmp(&a)))
                .unwrap_or(0);
            correct += usize::from(arg == t);
        }
        seen += targets.len();
        start += size;
    }
    Ok((loss_sum / seen.max(1) as f64, correct as f64 / seen.max(1) as f64))
}
