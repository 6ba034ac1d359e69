use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::nn::{InputSpec, ModuleKind, ModuleSpec, OutputSpec};
use crate::routing::SkipControl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Task {
    VisionClassify {
        image_size: usize,
        patch: usize,
        channels: usize,
        classes: usize,
    },
    CausalLm {
        vocab: usize,
        context: usize,
    },
}

impl Task {
    pub fn causal(&self) -> bool {
        matches!(self, Task::CausalLm { .. })
    }

    pub fn input_spec(&self) -> InputSpec {
        match *self {
            Task::VisionClassify {
                image_size,
                patch,
                channels,
                ..
            } => InputSpec::Patchify {
                image_size,
                patch,
                channels,
            },
            Task::CausalLm { vocab, context } => InputSpec::TokenEmbed { vocab, context },
        }
    }

    pub fn output_spec(&self) -> OutputSpec {
        match *self {
            Task::VisionClassify { classes, .. } => OutputSpec::PoolClassify { classes },
            Task::CausalLm { vocab, .. } => OutputSpec::Unembed { vocab },
        }
    }

    /// Tokens per example.
    pub fn tokens(&self) -> usize {
        self.input_spec().tokens()
    }
}

/// The module pool, either listed index by index or as counts per kind.
/// Counts expand in the order transformer-block, attention-only, mlp-only,
/// identity, so identity modules take the highest indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoolSpec {
    List(Vec<ModuleKind>),
    Counts(BTreeMap<ModuleKind, usize>),
}

impl PoolSpec {
    pub fn kinds(&self) -> Vec<ModuleKind> {
        match self {
            PoolSpec::List(v) => v.clone(),
            PoolSpec::Counts(m) => [
                ModuleKind::TransformerBlock,
                ModuleKind::AttentionOnly,
                ModuleKind::MlpOnly,
                ModuleKind::Identity,
            ]
            .iter()
            .flat_map(|k| std::iter::repeat_n(*k, m.get(k).copied().unwrap_or(0)))
            .collect(),
        }
    }

    /// `blocks` transformer blocks followed by `identity` identity modules.
    pub fn blocks(blocks: usize, identity: usize) -> Self {
        let mut v = vec![ModuleKind::TransformerBlock; blocks];
        v.extend(std::iter::repeat_n(ModuleKind::Identity, identity));
        PoolSpec::List(v)
    }

    /// Split pool: `n` attention-only and `n` MLP-only modules plus identities.
    pub fn split(n: usize, identity: usize) -> Self {
        let mut v = vec![ModuleKind::AttentionOnly; n];
        v.extend(std::iter::repeat_n(ModuleKind::MlpOnly, n));
        v.extend(std::iter::repeat_n(ModuleKind::Identity, identity));
        PoolSpec::List(v)
    }
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnaConfig {
    pub task: Task,
    pub d_embed: usize,
    pub d_mlp: usize,
    pub n_head: usize,
    /// Dense backbone depth `N_b`; backbone layers are transformer blocks.
    pub n_backbone: usize,
    /// Total token-processing steps `s_max`; routed steps are
    /// `s_max − n_backbone`.
    pub s_max: usize,
    pub k: usize,
    pub pool: PoolSpec,
    #[serde(default)]
    pub skip: Option<SkipControl>,
    /// Sample selections during training instead of taking the top-k.
    #[serde(default)]
    pub stochastic_routing: bool,
}

impl DnaConfig {
    pub fn n_routers(&self) -> usize {
        self.s_max.saturating_sub(self.n_backbone)
    }

    pub fn pool_kinds(&self) -> Vec<ModuleKind> {
        self.pool.kinds()
    }

    pub fn n_modules(&self) -> usize {
        self.pool_kinds().len()
    }

    pub fn identity_mask(&self) -> Vec<bool> {
        self.pool_kinds()
            .iter()
            .map(|k| *k == ModuleKind::Identity)
            .collect()
    }

    pub fn n_identity(&self) -> usize {
        self.identity_mask().iter().filter(|&&b| b).count()
    }

    pub fn module_spec(&self, kind: ModuleKind) -> ModuleSpec {
        ModuleSpec {
            kind,
            d_embed: self.d_embed,
            d_mlp: self.d_mlp,
            n_head: self.n_head,
            causal: self.task.causal(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.input_spec().validate()?;
        if let Task::VisionClassify { classes, .. } = self.task {
            if classes == 0 {
                return Err(DnaError::config("task.classes", "must be positive"));
            }
        }
        if self.s_max < self.n_backbone {
            return Err(DnaError::config(
                "s_max",
                format!("s_max {} is below n_backbone {}", self.s_max, self.n_backbone),
            ));
        }
        let n = self.n_modules();
        if n == 0 {
            return Err(DnaError::config("pool", "module pool is empty"));
        }
        if self.k == 0 || self.k > n {
            return Err(DnaError::config("k", format!("k = {} must lie in 1..={n}", self.k)));
        }
        if self.n_identity() >= n {
            return Err(DnaError::config("pool", "pool needs at least one non-identity module"));
        }
        if let Some(skip) = self.skip {
            if !(0.0..=1.0).contains(&skip.target) || !skip.speed.is_finite() || skip.speed < 0.0 {
                return Err(DnaError::config("skip", "target must lie in [0, 1] and speed be >= 0"));
            }
        }
        for kind in self.pool_kinds() {
            self.module_spec(kind).validate()?;
        }
        self.module_spec(ModuleKind::TransformerBlock).validate()
    }

    /// Desk-scale vision default: 32×32 RGB images, 8-pixel patches.
    pub fn vision_default(classes: usize) -> Self {
        Self {
            task: Task::VisionClassify {
                image_size: 32,
                patch: 8,
                channels: 3,
                classes,
            },
            d_embed: 32,
            d_mlp: 64,
            n_head: 2,
            n_backbone: 1,
            s_max: 5,
            k: 1,
            pool: PoolSpec::blocks(6, 2),
            skip: None,
            stochastic_routing: false,
        }
    }

    /// Desk-scale character LM default: vocabulary 128, context 128.
    pub fn lm_default() -> Self {
        Self {
            task: Task::CausalLm {
                vocab: 128,
                context: 128,
            },
            d_embed: 64,
            d_mlp: 128,
            n_head: 1,
            n_backbone: 1,
            s_max: 5,
            k: 1,
            pool: PoolSpec::blocks(6, 2),
            skip: None,
            stochastic_routing: false,
        }
    }
}
