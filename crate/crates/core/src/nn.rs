//! The module pool and the input/output nodes.
//!
//! Every attention- or MLP-bearing module is a Pre-LN residual block, so a
//! module's output already contains its input. No module carries biases;
//! layer norms have a learned gain and no shift.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::tensor::{AttentionLayout, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleKind {
    TransformerBlock,
    AttentionOnly,
    MlpOnly,
    Identity,
}

impl ModuleKind {
    pub fn has_attention(self) -> bool {
        matches!(self, ModuleKind::TransformerBlock | ModuleKind::AttentionOnly)
    }

    pub fn has_mlp(self) -> bool {
        matches!(self, ModuleKind::TransformerBlock | ModuleKind::MlpOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub kind: ModuleKind,
    pub d_embed: usize,
    pub d_mlp: usize,
    pub n_head: usize,
    pub causal: bool,
}

impl ModuleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_embed == 0 {
            return Err(DnaError::config("d_embed", "must be positive"));
        }
        if self.kind.has_attention() && (self.n_head == 0 || self.d_embed % self.n_head != 0) {
            return Err(DnaError::config(
                "n_head",
                format!("d_embed {} is not divisible by n_head {}", self.d_embed, self.n_head),
            ));
        }
        if self.kind.has_mlp() && self.d_mlp == 0 {
            return Err(DnaError::config("d_mlp", "must be positive for MLP-bearing modules"));
        }
        Ok(())
    }

    /// Scalar parameter count implied by this module spec.
    pub fn param_count(&self) -> usize {
        let d = self.d_embed;
        let attn = if self.kind.has_attention() { d + 4 * d * d } else { 0 };
        let mlp = if self.kind.has_mlp() { d + 2 * d * self.d_mlp } else { 0 };
        attn + mlp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub norm: ParamId,
    pub w_in: ParamId,
    pub w_out: ParamId,
}

/// Parameter handles of one pool module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleParams {
    pub spec: ModuleSpec,
    pub attention: Option<AttentionParams>,
    pub mlp: Option<MlpParams>,
}

impl ModuleParams {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(a) = &self.attention {
            ids.extend([a.norm, a.wq, a.wk, a.wv, a.wo]);
        }
        if let Some(m) = &self.mlp {
            ids.extend([m.norm, m.w_in, m.w_out]);
        }
        ids
    }
}

/// Draws from N(0, std²) truncated to ±2 std by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("finite std");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

pub fn init_matrix<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy(truncated_normal(rng, INIT_STD)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

fn gain<T: Scalar>(d: usize) -> Tensor<T> {
    Tensor::full(&[d], T::one())
}

/// Registers a module's parameters under `prefix`.
pub fn register_module<T: Scalar, R: Rng + ?Sized>(
    spec: ModuleSpec,
    store: &mut ParamStore<T>,
    prefix: &str,
    rng: &mut R,
) -> Result<ModuleParams> {
    spec.validate()?;
    let d = spec.d_embed;
    let attention = spec.kind.has_attention().then(|| AttentionParams {
        norm: store.insert(format!("{prefix}.attn.norm"), gain(d), false),
        wq: store.insert(format!("{prefix}.attn.wq"), init_matrix(rng, d, d), true),
        wk: store.insert(format!("{prefix}.attn.wk"), init_matrix(rng, d, d), true),
        wv: store.insert(format!("{prefix}.attn.wv"), init_matrix(rng, d, d), true),
        wo: store.insert(format!("{prefix}.attn.wo"), init_matrix(rng, d, d), true),
    });
    let mlp = spec.kind.has_mlp().then(|| MlpParams {
        norm: store.insert(format!("{prefix}.mlp.norm"), gain(d), false),
        w_in: store.insert(format!("{prefix}.mlp.w_in"), init_matrix(rng, d, spec.d_mlp), true),
        w_out: store.insert(format!("{prefix}.mlp.w_out"), init_matrix(rng, spec.d_mlp, d), true),
    });
    Ok(ModuleParams {
        spec,
        attention,
        mlp,
    })
}

/// Fresh parameter set for a single module.
pub fn init_parameters<T: Scalar>(spec: ModuleSpec, seed: u64) -> Result<(ParamStore<T>, ModuleParams)> {
    let mut rng = crate::rng::seeded(seed);
    let mut store = ParamStore::new();
    let params = register_module(spec, &mut store, "module", &mut rng)?;
    Ok((store, params))
}

/// Applies a module to the tokens it received. `h` holds those tokens in
/// ascending original order; `layout` tells attention which rows share a
/// sequence and where they sit in it.
pub fn module_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &ModuleParams,
    h: Var,
    layout: &Arc<AttentionLayout>,
    track: bool,
) -> Result<Var> {
    let rows = g.shape(h)[0];
    if rows == 0 || params.spec.kind == ModuleKind::Identity {
        return Ok(h);
    }
    let mut h = h;
    if let Some(a) = &params.attention {
        let norm = g.param(store, a.norm, track);
        let x = g.layer_norm(h, norm)?;
        let wq = g.param(store, a.wq, track);
        let wk = g.param(store, a.wk, track);
        let wv = g.param(store, a.wv, track);
        let wo = g.param(store, a.wo, track);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let mixed = g.attention(q, k, v, params.spec.n_head, layout.clone())?;
        let out = g.matmul(mixed, wo)?;
        h = g.add(h, out)?;
    }
    if let Some(m) = &params.mlp {
        let norm = g.param(store, m.norm, track);
        let x = g.layer_norm(h, norm)?;
        let w_in = g.param(store, m.w_in, track);
        let w_out = g.param(store, m.w_out, track);
        let hidden = g.matmul(x, w_in)?;
        let act = g.gelu(hidden);
        let out = g.matmul(act, w_out)?;
        h = g.add(h, out)?;
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum InputSpec {
    Patchify {
        image_size: usize,
        patch: usize,
        channels: usize,
    },
    TokenEmbed {
        vocab: usize,
        context: usize,
    },
}

impl InputSpec {
    /// Tokens produced per example.
    pub fn tokens(&self) -> usize {
        match *self {
            InputSpec::Patchify {
                image_size, patch, ..
            } => (image_size / patch) * (image_size / patch),
            InputSpec::TokenEmbed { context, .. } => context,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            InputSpec::Patchify {
                image_size,
                patch,
                channels,
            } => {
                if patch == 0 || image_size % patch != 0 {
                    return Err(DnaError::config(
                        "patch",
                        format!("image_size {image_size} is not a multiple of patch {patch}"),
                    ));
                }
                if channels == 0 {
                    return Err(DnaError::config("channels", "must be positive"));
                }
            }
            InputSpec::TokenEmbed { vocab, context } => {
                if vocab == 0 || context == 0 {
                    return Err(DnaError::config("vocab", "vocab and context must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Input node: patch or token embedding plus learned absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNode {
    pub spec: InputSpec,
    pub proj: ParamId,
    pub pos: ParamId,
}

impl InputNode {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        spec: InputSpec,
        d_embed: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let (proj_rows, name) = match spec {
            InputSpec::Patchify { patch, channels, .. } => (channels * patch * patch, "input.patch_proj"),
            InputSpec::TokenEmbed { vocab, .. } => (vocab, "input.token_embed"),
        };
        let proj = store.insert(name, init_matrix(rng, proj_rows, d_embed), true);
        let pos = store.insert("input.pos_embed", init_matrix(rng, spec.tokens(), d_embed), true);
        Ok(Self { spec, proj, pos })
    }

    /// Flat indices that unfold `[batch, c, s, s]` images into
    /// `[batch · patches, c · p · p]` rows (patches row-major; channel, then
    /// row, then column inside a patch).
    pub fn unfold_indices(image_size: usize, patch: usize, channels: usize, batch: usize) -> Vec<usize> {
        let per_side = image_size / patch;
        let plane = image_size * image_size;
        let mut idx = Vec::with_capacity(batch * channels * plane);
        for b in 0..batch {
            for py in 0..per_side {
                for px in 0..per_side {
                    for c in 0..channels {
                        for dy in 0..patch {
                            for dx in 0..patch {
                                let y = py * patch + dy;
                                let x = px * patch + dx;
                                idx.push(b * channels * plane + c * plane + y * image_size + x);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    /// Embeds an image tensor `[batch, c, s, s]` (any node, so inputs can be
    /// optimized) into `[batch · tokens, d]`.
    pub fn embed_images<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
        batch: usize,
        track: bool,
    ) -> Result<Var> {
        let InputSpec::Patchify {
            image_size,
            patch,
            channels,
        } = self.spec
        else {
            return Err(DnaError::TaskMismatch("image batch given to a token model".into()));
        };
        let expected = batch * channels * image_size * image_size;
        if g.value(images).len() != expected {
            return Err(DnaError::TaskMismatch(format!(
                "expected {expected} pixel values for {batch} images, got {}",
                g.value(images).len()
            )));
        }
        let idx = Self::unfold_indices(image_size, patch, channels, batch);
        let flat = g.gather_elems(images, &idx)?;
        let tokens = self.spec.tokens();
        let rows = g.reshape(flat, &[batch * tokens, channels * patch * patch])?;
        let proj = g.param(store, self.proj, track);
        let emb = g.matmul(rows, proj)?;
        self.add_positions(g, store, emb, batch, track)
    }

    pub fn embed_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ids: &[usize],
        batch: usize,
        track: bool,
    ) -> Result<Var> {
        let InputSpec::TokenEmbed { context, .. } = self.spec else {
            return Err(DnaError::TaskMismatch("token batch given to an image model".into()));
        };
        if ids.len() != batch * context {
            return Err(DnaError::TaskMismatch(format!(
                "expected {batch} sequences of {context} tokens, got {} ids",
                ids.len()
            )));
        }
        let table = g.param(store, self.proj, track);
        let emb = g.embedding(table, ids)?;
        self.add_positions(g, store, emb, batch, track)
    }

    fn add_positions<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        emb: Var,
        batch: usize,
        track: bool,
    ) -> Result<Var> {
        let tokens = self.spec.tokens();
        let pos = g.param(store, self.pos, track);
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..tokens).collect();
        let pos_rows = g.gather_rows(pos, &idx)?;
        Ok(g.add(emb, pos_rows)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum OutputSpec {
    /// Final norm, global average pool over tokens, linear classifier.
    PoolClassify { classes: usize },
    /// Final norm and per-token unembedding.
    Unembed { vocab: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputNode {
    pub spec: OutputSpec,
    pub norm: ParamId,
    pub head: ParamId,
}

impl OutputNode {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        spec: OutputSpec,
        d_embed: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let out = match spec {
            OutputSpec::PoolClassify { classes } => classes,
            OutputSpec::Unembed { vocab } => vocab,
        };
        let norm = store.insert("output.norm", gain(d_embed), false);
        let head = store.insert("output.head", init_matrix(rng, d_embed, out), true);
        Self { spec, norm, head }
    }

    /// `h` is `[batch · tokens, d]`. Returns `[batch, classes]` or
    /// `[batch · tokens, vocab]` logits.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        batch: usize,
        track: bool,
    ) -> Result<Var> {
        let norm = g.param(store, self.norm, track);
        let x = g.layer_norm(h, norm)?;
        let head = g.param(store, self.head, track);
        match self.spec {
            OutputSpec::PoolClassify { .. } => {
                let (rows, d) = (g.shape(x)[0], g.shape(x)[1]);
                let grid = g.reshape(x, &[batch, rows / batch.max(1), d])?;
                let pooled = g.mean(grid, 1)?;
                Ok(g.matmul(pooled, head)?)
            }
            OutputSpec::Unembed { .. } => Ok(g.matmul(x, head)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ModuleKind) -> ModuleSpec {
        ModuleSpec {
            kind,
            d_embed: 8,
            d_mlp: 16,
            n_head: 2,
            causal: false,
        }
    }

    #[test]
    fn identity_has_no_parameters() {
        let (store, params) = init_parameters::<f64>(spec(ModuleKind::Identity), 1).unwrap();
        assert!(store.is_empty());
        assert!(params.ids().is_empty());
        assert_eq!(spec(ModuleKind::Identity).param_count(), 0);
    }

    #[test]
    fn param_count_matches_registered_tensors() {
        for kind in [ModuleKind::TransformerBlock, ModuleKind::AttentionOnly, ModuleKind::MlpOnly] {
            let (store, params) = init_parameters::<f64>(spec(kind), 1).unwrap();
            assert_eq!(store.count(&params.ids()), spec(kind).param_count());
        }
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut s = spec(ModuleKind::AttentionOnly);
        s.n_head = 3;
        assert!(matches!(s.validate(), Err(DnaError::Config { .. })));
        s.kind = ModuleKind::MlpOnly;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn unfold_covers_every_pixel_once() {
        let mut idx = InputNode::unfold_indices(8, 4, 3, 2);
        assert_eq!(idx.len(), 2 * 3 * 64);
        idx.sort_unstable();
        assert!(idx.iter().enumerate().all(|(i, &v)| i == v));
    }

    #[test]
    fn patch_token_count() {
        let s = InputSpec::Patchify {
            image_size: 32,
            patch: 8,
            channels: 3,
        };
        assert_eq!(s.tokens(), 16);
        assert!(InputSpec::Patchify {
            image_size: 30,
            patch: 8,
            channels: 3
        }
        .validate()
        .is_err());
    }
}
