//! The routed network: input node, dense backbone, routed steps over the
//! module pool, output node.

mod config;
mod trace;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

pub use config::{DnaConfig, PoolSpec, Task};
pub use trace::{ribbon_compute, RoutingTrace, SequenceTrace};

use crate::error::{DnaError, Result};
use crate::nn::{init_matrix, module_forward, register_module, InputNode, ModuleKind, ModuleParams, OutputNode};
use crate::rng::DnaRng;
use crate::routing::{select_topk, BiasController, RouteDecision};
use crate::tensor::{AttentionLayout, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// A batch of examples matching the model task.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    /// `pixels` is `[batch, c, s, s]` in `[0, 1]`.
    Images {
        pixels: Vec<f64>,
        labels: Vec<usize>,
        batch: usize,
    },
    /// `ids` and `targets` are `[batch, context]`.
    Tokens {
        ids: Vec<usize>,
        targets: Vec<usize>,
        batch: usize,
    },
}

impl Batch {
    pub fn size(&self) -> usize {
        match self {
            Batch::Images { batch, .. } | Batch::Tokens { batch, .. } => *batch,
        }
    }

    pub fn targets(&self) -> &[usize] {
        match self {
            Batch::Images { labels, .. } => labels,
            Batch::Tokens { targets, .. } => targets,
        }
    }
}

/// Where the input embeddings come from.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Batch(&'a Batch),
    /// An image node already in the graph, `[batch, c, s, s]`.
    ImageVar { var: Var, batch: usize },
}

/// Replaces the learned routers' decisions.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum RoutingOverride {
    #[default]
    None,
    /// Router logits per routed step, shared by every token.
    FixedLogits(Vec<Vec<f64>>),
    /// `selections[step][row]`: modules used regardless of the router; the
    /// router probabilities are still computed and weight the outputs.
    Forced(Vec<Vec<Vec<usize>>>),
}

/// Logits large enough that the softmax is exactly one-hot.
pub const ONE_HOT_LOGIT: f64 = 1000.0;

impl RoutingOverride {
    /// Frozen routers that pick `modules[s]` at routed step `s`.
    pub fn one_hot(modules: &[usize], n_modules: usize) -> Self {
        RoutingOverride::FixedLogits(
            modules
                .iter()
                .map(|&m| (0..n_modules).map(|i| if i == m { ONE_HOT_LOGIT } else { 0.0 }).collect())
                .collect(),
        )
    }
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Bind parameters as differentiable leaves.
    pub track: bool,
    pub routing: RoutingOverride,
    /// Draws selections when the config asks for stochastic routing.
    pub rng: Option<&'a mut DnaRng>,
    /// Stop after this many routed steps and skip the output node.
    pub max_steps: Option<usize>,
}

/// Graph handles and routing record of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub batch: usize,
    pub tokens: usize,
    pub embedded: Var,
    pub backbone_out: Var,
    /// Hidden state entering each executed routed step.
    pub step_inputs: Vec<Var>,
    pub router_logits: Vec<Var>,
    /// `[rows, n_modules]` router probabilities per executed step.
    pub router_probs: Vec<Var>,
    /// Decisions per executed step, one per row in row order.
    pub decisions: Vec<Vec<RouteDecision>>,
    pub hidden: Var,
    /// `None` when `max_steps` cut the pass short.
    pub logits: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct DnaModel<T> {
    pub config: DnaConfig,
    pub params: ParamStore<T>,
    pub input: InputNode,
    pub backbone: Vec<ModuleParams>,
    pub pool: Vec<ModuleParams>,
    /// Router weights `[d_embed, n_modules]`, one per routed step.
    pub routers: Vec<ParamId>,
    pub output: OutputNode,
    pub bias: BiasController,
}

impl<T: Scalar> DnaModel<T> {
    pub fn new(config: DnaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::seeded(seed);
        let mut params = ParamStore::new();
        let d = config.d_embed;
        let input = InputNode::register(config.task.input_spec(), d, &mut params, &mut rng)?;
        let backbone = (0..config.n_backbone)
            .map(|l| {
                register_module(
                    config.module_spec(ModuleKind::TransformerBlock),
                    &mut params,
                    &format!("backbone.{l}"),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = config
            .pool_kinds()
            .into_iter()
            .enumerate()
            .map(|(i, kind)| register_module(config.module_spec(kind), &mut params, &format!("pool.{i}"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let n = pool.len();
        let routers = (0..config.n_routers())
            .map(|s| params.insert(format!("router.{s}"), init_matrix(&mut rng, d, n), true))
            .collect();
        let output = OutputNode::register(config.task.output_spec(), d, &mut params, &mut rng);
        let bias = BiasController::new(config.n_routers(), config.identity_mask(), config.k, config.skip);
        Ok(Self {
            config,
            params,
            input,
            backbone,
            pool,
            routers,
            output,
            bias,
        })
    }

    pub fn tokens_per_example(&self) -> usize {
        self.config.task.tokens()
    }

    /// Sequence layout covering every row of `batch` examples.
    fn dense_layout(&self, batch: usize) -> Arc<AttentionLayout> {
        let t = self.tokens_per_example();
        let rows: Vec<usize> = (0..batch * t).collect();
        Arc::new(self.subset_layout(&rows))
    }

    /// Layout for a sorted subset of global rows: a row's sequence is
    /// `row / tokens`, its position `row % tokens`.
    pub fn subset_layout(&self, rows: &[usize]) -> AttentionLayout {
        let t = self.tokens_per_example();
        let seg: Vec<usize> = rows.iter().map(|r| r / t).collect();
        let pos: Vec<usize> = rows.iter().map(|r| r % t).collect();
        AttentionLayout::new(&seg, pos, self.config.task.causal()).expect("sorted rows are contiguous per sequence")
    }

    fn embed(&self, g: &mut Graph<T>, input: ModelInput, track: bool) -> Result<(Var, usize)> {
        match input {
            ModelInput::Batch(Batch::Images { pixels, batch, .. }) => {
                let s = match self.config.task {
                    crate::model::Task::VisionClassify {
                        image_size, channels, ..
                    } => vec![*batch, channels, image_size, image_size],
                    _ => return Err(DnaError::TaskMismatch("image batch given to a token model".into())),
                };
                let t = Tensor::from_f64(s, pixels)?;
                let var = g.constant(t);
                Ok((self.input.embed_images(g, &self.params, var, *batch, track)?, *batch))
            }
            ModelInput::Batch(Batch::Tokens { ids, batch, .. }) => {
                Ok((self.input.embed_tokens(g, &self.params, ids, *batch, track)?, *batch))
            }
            ModelInput::ImageVar { var, batch } => {
                Ok((self.input.embed_images(g, &self.params, var, batch, track)?, batch))
            }
        }
    }

    /// Records the full forward pass into `g`.
    pub fn forward_graph(&self, g: &mut Graph<T>, input: ModelInput, mut opts: ForwardOptions) -> Result<ForwardPass> {
        let track = opts.track;
        let (embedded, batch) = self.embed(g, input, track)?;
        let tokens = self.tokens_per_example();
        let rows = batch * tokens;
        let n = self.pool.len();
        let k = self.config.k;

        let layout = self.dense_layout(batch);
        let mut h = embedded;
        for block in &self.backbone {
            h = module_forward(g, &self.params, block, h, &layout, track)?;
        }
        let backbone_out = h;

        let n_steps = opts.max_steps.map_or(self.routers.len(), |m| m.min(self.routers.len()));
        match &opts.routing {
            RoutingOverride::FixedLogits(l) if l.len() < n_steps || l.iter().any(|r| r.len() != n) => {
                return Err(DnaError::config("routing", "fixed logits must cover every step and module"));
            }
            RoutingOverride::Forced(sel) if sel.len() < n_steps || sel.iter().any(|s| s.len() != rows) => {
                return Err(DnaError::config("routing", "forced selections must cover every step and row"));
            }
            _ => {}
        }
        let stochastic = self.config.stochastic_routing;
        let mut pass = ForwardPass {
            batch,
            tokens,
            embedded,
            backbone_out,
            step_inputs: Vec::new(),
            router_logits: Vec::new(),
            router_probs: Vec::new(),
            decisions: Vec::new(),
            hidden: h,
            logits: None,
        };
        for s in 0..n_steps {
            pass.step_inputs.push(h);
            let logits = match &opts.routing {
                RoutingOverride::FixedLogits(l) => {
                    let data: Vec<f64> = (0..rows).flat_map(|_| l[s].iter().copied()).collect();
                    g.constant(Tensor::from_f64(vec![rows, n], &data)?)
                }
                _ => {
                    let w = g.param(&self.params, self.routers[s], track);
                    g.matmul(h, w)?
                }
            };
            let probs = g.softmax(logits, 1)?;
            let bias = self.bias.biases(s);
            let pv: Vec<f64> = g.value(probs).iter().map(|v| v.as_f64()).collect();
            let mut decisions = Vec::with_capacity(rows);
            for r in 0..rows {
                let p = pv[r * n..(r + 1) * n].to_vec();
                let (selected, scores) = match &opts.routing {
                    RoutingOverride::Forced(sel) => {
                        let scores = p.iter().zip(bias).map(|(a, b)| a + b).collect();
                        (sel[s][r].clone(), scores)
                    }
                    _ => {
                        let rng = if stochastic { opts.rng.as_deref_mut() } else { None };
                        select_topk(&p, bias, k, rng)
                    }
                };
                decisions.push(RouteDecision {
                    token: r,
                    step: s,
                    probs: p,
                    selected,
                    scores,
                });
            }
            h = self.routed_step(g, h, probs, &decisions, track)?;
            pass.router_logits.push(logits);
            pass.router_probs.push(probs);
            pass.decisions.push(decisions);
        }
        pass.hidden = h;
        if n_steps == self.routers.len() {
            pass.logits = Some(self.output.forward(g, &self.params, h, batch, track)?);
        }
        Ok(pass)
    }

    /// `h + Σ_i ρ_i (M_i(h) − h)` with modules processed in ascending index
    /// order; each module sees only its own tokens.
    fn routed_step(
        &self,
        g: &mut Graph<T>,
        h: Var,
        probs: Var,
        decisions: &[RouteDecision],
        track: bool,
    ) -> Result<Var> {
        let rows = g.shape(h)[0];
        let n = self.pool.len();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
        for d in decisions {
            let distinct: BTreeSet<usize> = d.selected.iter().copied().collect();
            if distinct.len() != d.selected.len() || distinct.iter().any(|&i| i >= n) {
                return Err(DnaError::Consistency(format!(
                    "invalid selection {:?} for token {}",
                    d.selected, d.token
                )));
            }
            for &i in &d.selected {
                groups[i].push(d.token);
            }
        }
        let mut acc: Option<Var> = None;
        for (i, rows_i) in groups.iter().enumerate() {
            if rows_i.is_empty() || self.pool[i].spec.kind == ModuleKind::Identity {
                continue;
            }
            let x = g.gather_rows(h, rows_i)?;
            let layout = Arc::new(self.subset_layout(rows_i));
            let out = module_forward(g, &self.params, &self.pool[i], x, &layout, track)?;
            let delta = g.sub(out, x)?;
            let flat: Vec<usize> = rows_i.iter().map(|&r| r * n + i).collect();
            let rho = g.gather_elems(probs, &flat)?;
            let weighted = g.mul_col(delta, rho)?;
            let placed = g.scatter_rows(weighted, rows_i, rows)?;
            acc = Some(match acc {
                None => placed,
                Some(a) => g.add(a, placed)?,
            });
        }
        Ok(match acc {
            None => h,
            Some(a) => g.add(h, a)?,
        })
    }

    /// Output rows `M_i(h)` of every non-identity module for the tokens it
    /// was given in `decisions`, keyed by `(token, module)`. Each module sees
    /// only its own tokens, exactly as in the forward pass.
    pub fn module_outputs(
        &self,
        h: &Tensor<T>,
        decisions: &[RouteDecision],
    ) -> Result<HashMap<(usize, usize), Vec<T>>> {
        let n = self.pool.len();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
        for d in decisions {
            for &i in &d.selected {
                if i >= n {
                    return Err(DnaError::Consistency(format!("module {i} outside the pool")));
                }
                groups[i].push(d.token);
            }
        }
        let mut out = HashMap::new();
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        for (i, rows_i) in groups.iter_mut().enumerate() {
            if rows_i.is_empty() || self.pool[i].spec.kind == ModuleKind::Identity {
                continue;
            }
            rows_i.sort_unstable();
            let x = g.gather_rows(hv, rows_i)?;
            let layout = Arc::new(self.subset_layout(rows_i));
            let y = module_forward(&mut g, &self.params, &self.pool[i], x, &layout, false)?;
            let y = g.tensor(y);
            for (j, &r) in rows_i.iter().enumerate() {
                out.insert((r, i), y.row(j).to_vec());
            }
        }
        Ok(out)
    }

    /// Inference pass with the current routing state: logits and trace.
    pub fn forward(&self, batch: &Batch) -> Result<(Tensor<T>, RoutingTrace)> {
        self.forward_with(batch, RoutingOverride::None, 0)
    }

    pub fn forward_with(
        &self,
        batch: &Batch,
        routing: RoutingOverride,
        first_seq_id: usize,
    ) -> Result<(Tensor<T>, RoutingTrace)> {
        let mut g = Graph::new();
        let pass = self.forward_graph(
            &mut g,
            ModelInput::Batch(batch),
            ForwardOptions {
                routing,
                ..Default::default()
            },
        )?;
        let logits = g.tensor(pass.logits.expect("all steps executed"));
        Ok((logits, self.trace_of(&pass, first_seq_id)?))
    }

    /// Routing trace of the first `sequences` examples of `data`, pushed
    /// through in batches of `batch_size`.
    pub fn trace_dataset(
        &self,
        data: &dyn crate::train::Dataset,
        sequences: usize,
        batch_size: usize,
    ) -> Result<RoutingTrace> {
        if batch_size == 0 {
            return Err(DnaError::config("trace.batch_size", "must be positive"));
        }
        let mut trace: Option<RoutingTrace> = None;
        let mut start = 0;
        while start < sequences {
            let size = batch_size.min(sequences - start);
            let (_, t) = self.forward_with(&data.slice(start, size), RoutingOverride::None, start)?;
            match &mut trace {
                None => trace = Some(t),
                Some(acc) => acc.append(t),
            }
            start += size;
        }
        trace.ok_or_else(|| DnaError::config("trace.sequences", "must be positive"))
    }

    pub fn trace_of(&self, pass: &ForwardPass, first_seq_id: usize) -> Result<RoutingTrace> {
        RoutingTrace::from_decisions(
            &pass.decisions,
            pass.batch,
            pass.tokens,
            self.config.k,
            &self.config.identity_mask(),
            self.bias.all_biases().to_vec(),
            first_seq_id,
        )
    }

    /// Mean cross-entropy of the batch targets.
    pub fn loss(&self, g: &mut Graph<T>, pass: &ForwardPass, batch: &Batch) -> Result<Var> {
        let logits = pass
            .logits
            .ok_or_else(|| DnaError::Consistency("forward pass stopped before the output node".into()))?;
        Ok(g.cross_entropy(logits, batch.targets())?)
    }

    /// Parameter count of every pool module.
    pub fn module_param_counts(&self) -> Vec<usize> {
        self.pool.iter().map(|m| self.params.count(&m.ids())).collect()
    }

    /// Every non-identity-bearing parameter that gradients may reach.
    pub fn router_ids(&self) -> &[ParamId] {
        &self.routers
    }
}

/// Per-token and per-sequence normalized compute.
pub fn count_compute(trace: &RoutingTrace) -> (Vec<Vec<f64>>, Vec<f64>) {
    let per_token: Vec<Vec<f64>> = trace
        .sequences
        .iter()
        .map(|s| {
            s.ribbons
                .iter()
                .map(|r| ribbon_compute(r, &trace.identity, trace.k))
                .collect()
        })
        .collect();
    let per_seq = per_token
        .iter()
        .map(|v| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 })
        .collect();
    (per_token, per_seq)
}

/// Pool parameters a ribbon touches: `(active, non_shared)`. `active` counts
/// a module once per selection; `non_shared` counts each distinct module
/// once.
pub fn ribbon_active_parameters(ribbon: &[Vec<usize>], module_params: &[usize]) -> (usize, usize) {
    let active = ribbon.iter().flatten().map(|&i| module_params[i]).sum();
    let distinct: BTreeSet<usize> = ribbon.iter().flatten().copied().collect();
    let non_shared = distinct.iter().map(|&i| module_params[i]).sum();
    (active, non_shared)
}

/// `(active, non_shared)` per token, sequence-major.
pub fn active_parameter_count(trace: &RoutingTrace, module_params: &[usize]) -> Vec<(usize, usize)> {
    trace
        .ribbons()
        .map(|r| ribbon_active_parameters(r, module_params))
        .collect()
}
