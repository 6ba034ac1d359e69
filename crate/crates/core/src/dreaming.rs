//! Input optimization against frozen routing decisions.
//!
//! An image is parametrized in Fourier space as
//! `Θ = sigmoid(IFFT2(W · A · θ))`, with `A` a fixed color-decorrelation
//! matrix and `W` frequency weights. The objective is the router
//! probability mass on selections recorded from a reference pass, summed
//! over the first `S` routed steps and a token subset.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::model::{Batch, DnaModel, ForwardOptions, ModelInput, RoutingOverride, Task};
use crate::rng::DnaRng;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, SparseMap, Tensor, Var};
use crate::train::{AdamW, AdamWConfig};

/// Color mixing applied to the Fourier coefficients.
pub const COLOR_MATRIX: [[f64; 3]; 3] = [[0.26, 0.09, 0.02], [0.27, 0.00, -0.05], [0.27, -0.09, 0.03]];

pub const CHANNELS: usize = 3;

/// Signed frequency of DFT index `i` on an axis of length `n`, in cycles
/// per pixel.
fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64 / n as f64
    } else {
        (i as f64 - n as f64) / n as f64
    }
}

/// `W[y][x] = 1 / max(|f_x|, |f_y|, 1/side)`, row-major.
pub fn frequency_weights(side: usize) -> Vec<f64> {
    let floor = 1.0 / side as f64;
    (0..side)
        .flat_map(|y| (0..side).map(move |x| 1.0 / signed_freq(x, side).abs().max(signed_freq(y, side).abs()).max(floor)))
        .collect()
}

/// Trainable Fourier coefficients `θ[c, y, x, re/im]` and the fixed `W · A`
/// map.
#[derive(Debug, Clone)]
pub struct DreamParams<T> {
    pub side: usize,
    pub store: ParamStore<T>,
    pub theta: ParamId,
    mix: Arc<SparseMap<T>>,
}

impl<T: Scalar> DreamParams<T> {
    pub fn zeros(side: usize) -> Self {
        Self::with_theta(side, Tensor::zeros(&[CHANNELS, side, side, 2]))
    }

    /// θ drawn from N(0, std²).
    pub fn random(side: usize, std: f64, rng: &mut DnaRng) -> Self {
        let n = CHANNELS * side * side * 2;
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Self::with_theta(side, Tensor::new(vec![CHANNELS, side, side, 2], data).expect("sized"))
    }

    pub fn with_theta(side: usize, theta: Tensor<T>) -> Self {
        let mut store = ParamStore::new();
        let theta = store.insert("theta", theta, false);
        Self {
            side,
            store,
            theta,
            mix: Arc::new(mix_map(side)),
        }
    }

    /// Records the render into `g`; the result is `[3, side, side]` in
    /// `(0, 1)`.
    pub fn render_graph(&self, g: &mut Graph<T>, track: bool) -> Result<Var> {
        let theta = g.param(&self.store, self.theta, track);
        self.render_from(g, theta)
    }

    /// Render of an arbitrary θ node of shape `[3, side, side, 2]`.
    pub fn render_from(&self, g: &mut Graph<T>, theta: Var) -> Result<Var> {
        let mixed = g.sparse_linear(theta, self.mix.clone())?;
        let spatial = g.ifft2_real(mixed)?;
        Ok(g.sigmoid(spatial))
    }

    pub fn render(&self) -> Tensor<T> {
        let mut g = Graph::new();
        let v = self.render_graph(&mut g, false).expect("shapes fixed at construction");
        g.tensor(v)
    }
}

/// `out[c, y, x, part] = W[y, x] · Σ_c' A[c][c'] · θ[c', y, x, part]`.
fn mix_map<T: Scalar>(side: usize) -> SparseMap<T> {
    let w = frequency_weights(side);
    let plane = side * side;
    let mut rows = Vec::with_capacity(CHANNELS * plane * 2);
    for c in 0..CHANNELS {
        for (f, &wf) in w.iter().enumerate() {
            for part in 0..2 {
                rows.push(
                    (0..CHANNELS)
                        .filter(|&cc| COLOR_MATRIX[c][cc] != 0.0)
                        .map(|cc| ((cc * plane + f) * 2 + part, T::from_f64_lossy(wf * COLOR_MATRIX[c][cc])))
                        .collect(),
                );
            }
        }
    }
    SparseMap::new(vec![CHANNELS, side, side, 2], CHANNELS * plane * 2, rows).expect("indices in range")
}

/// Per-pass augmentation magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transforms {
    /// Maximum integer shift in pixels along each axis.
    pub jitter: usize,
    /// Maximum rotation in degrees.
    pub rotation: f64,
    /// Maximum relative scale change.
    pub scale: f64,
    /// `e^σ · Θ + ε` per channel with σ, ε ~ N(0, 1) clamped to ±3.
    pub color_shift: bool,
    /// Per-pixel Gaussian noise, variance decaying linearly from 1 to 0.
    pub noise: bool,
}

impl Transforms {
    pub fn none() -> Self {
        Self {
            jitter: 0,
            rotation: 0.0,
            scale: 0.0,
            color_shift: false,
            noise: false,
        }
    }

    pub fn standard() -> Self {
        Self {
            jitter: 6,
            rotation: 10.0,
            scale: 0.1,
            color_shift: true,
            noise: true,
        }
    }

    fn geometric(&self) -> bool {
        self.jitter > 0 || self.rotation > 0.0 || self.scale > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DreamSettings {
    pub steps: usize,
    pub lr: f64,
    /// Total-variation coefficient.
    pub tv: f64,
    pub transforms: Transforms,
    /// Standard deviation of the initial θ.
    pub init_std: f64,
    /// Evaluate the untransformed objective after every step.
    #[serde(default)]
    pub track_clean: bool,
}

impl DreamSettings {
    /// Adam at 0.001 for 2048 steps, TV 0.01, full augmentation.
    pub fn standard() -> Self {
        Self {
            steps: 2048,
            lr: 0.001,
            tv: 0.01,
            transforms: Transforms::standard(),
            init_std: 0.01,
            track_clean: false,
        }
    }

    /// No regularization at all: plain ascent on the objective.
    pub fn plain(steps: usize) -> Self {
        Self {
            steps,
            lr: 0.001,
            tv: 0.0,
            transforms: Transforms::none(),
            init_std: 0.01,
            track_clean: true,
        }
    }
}

/// What to maximize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DreamObjective {
    /// Number of routed steps summed over (`S`).
    pub horizon: usize,
    /// Token subset `T`; empty means every token.
    pub tokens: Vec<usize>,
    /// `selections[step][token]`, frozen from the reference pass.
    pub selections: Vec<Vec<Vec<usize>>>,
    /// Patches clamped to the reference pixels.
    pub context: Vec<bool>,
    /// Sum router logits instead of probabilities.
    pub use_logits: bool,
}

fn image_dims(task: &Task) -> Result<(usize, usize, usize)> {
    match *task {
        Task::VisionClassify {
            image_size,
            patch,
            channels,
            ..
        } if channels == CHANNELS => Ok((image_size, patch, image_size / patch)),
        _ => Err(DnaError::TaskMismatch("dreaming needs a 3-channel vision model".into())),
    }
}

impl DreamObjective {
    /// Records the reference image's selections at every routed step.
    pub fn from_reference<T: Scalar>(
        model: &DnaModel<T>,
        reference: &[f64],
        horizon: usize,
        tokens: Vec<usize>,
        context: Vec<bool>,
    ) -> Result<Self> {
        let (side, _, per_side) = image_dims(&model.config.task)?;
        if reference.len() != CHANNELS * side * side {
            return Err(DnaError::TaskMismatch("reference image has the wrong size".into()));
        }
        let n_tok = per_side * per_side;
        if horizon > model.config.n_routers() {
            return Err(DnaError::config(
                "dream.horizon",
                format!("horizon {horizon} exceeds the {} routed steps", model.config.n_routers()),
            ));
        }
        if tokens.iter().any(|&t| t >= n_tok) {
            return Err(DnaError::config("dream.tokens", format!("token index outside 0..{n_tok}")));
        }
        let context = if context.is_empty() { vec![false; n_tok] } else { context };
        if context.len() != n_tok {
            return Err(DnaError::config("dream.context", format!("context mask needs {n_tok} entries")));
        }
        let batch = Batch::Images {
            pixels: reference.to_vec(),
            labels: vec![0],
            batch: 1,
        };
        let mut g = Graph::new();
        let pass = model.forward_graph(&mut g, ModelInput::Batch(&batch), ForwardOptions::default())?;
        let selections = pass
            .decisions
            .iter()
            .map(|step| step.iter().map(|d| d.selected.clone()).collect())
            .collect();
        Ok(Self {
            horizon,
            tokens,
            selections,
            context,
            use_logits: false,
        })
    }

    fn token_set(&self, n_tok: usize) -> Vec<usize> {
        if self.tokens.is_empty() {
            (0..n_tok).collect()
        } else {
            self.tokens.clone()
        }
    }

    /// Pixel-level clamp mask `[3, side, side]` from the patch mask.
    pub fn pixel_mask(&self, side: usize, patch: usize) -> Vec<bool> {
        let per_side = side / patch;
        let mut mask = vec![false; CHANNELS * side * side];
        for (p, _) in self.context.iter().enumerate().filter(|(_, &m)| m) {
            let (py, px) = (p / per_side, p % per_side);
            for c in 0..CHANNELS {
                for dy in 0..patch {
                    for dx in 0..patch {
                        mask[c * side * side + (py * patch + dy) * side + px * patch + dx] = true;
                    }
                }
            }
        }
        mask
    }
}

/// `O = Σ_{s<S} Σ_{t∈T} Σ_{i∈sel(s,t)} ρ_i^{(s,t)}` for an image node
/// `[3, side, side]`, with the model parameters frozen.
pub fn dream_objective_graph<T: Scalar>(
    model: &DnaModel<T>,
    g: &mut Graph<T>,
    image: Var,
    obj: &DreamObjective,
) -> Result<Var> {
    if obj.horizon == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let n = model.config.n_modules();
    let pass = model.forward_graph(
        g,
        ModelInput::ImageVar { var: image, batch: 1 },
        ForwardOptions {
            track: false,
            routing: RoutingOverride::Forced(obj.selections.clone()),
            rng: None,
            max_steps: Some(obj.horizon),
        },
    )?;
    let tokens = obj.token_set(pass.tokens);
    let mut total: Option<Var> = None;
    for s in 0..obj.horizon {
        let flat: Vec<usize> = tokens
            .iter()
            .flat_map(|&t| obj.selections[s][t].iter().map(move |&i| t * n + i))
            .collect();
        let source = if obj.use_logits { pass.router_logits[s] } else { pass.router_probs[s] };
        let picked = g.gather_elems(source, &flat)?;
        let step_sum = g.sum(picked);
        total = Some(match total {
            None => step_sum,
            Some(acc) => g.add(acc, step_sum)?,
        });
    }
    Ok(total.expect("horizon > 0"))
}

pub fn dream_objective<T: Scalar>(model: &DnaModel<T>, image: &[f64], obj: &DreamObjective) -> Result<f64> {
    let (side, _, _) = image_dims(&model.config.task)?;
    let mut g = Graph::new();
    let img = g.constant(Tensor::from_f64(vec![CHANNELS, side, side], image)?);
    let o = dream_objective_graph(model, &mut g, img, obj)?;
    Ok(g.scalar_value(o).as_f64())
}

/// Sum of squared differences between horizontally, vertically and
/// diagonally (both diagonals) adjacent pixels, per channel.
pub fn total_variation<T: Scalar>(g: &mut Graph<T>, image: Var, side: usize) -> Result<Var> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for c in 0..CHANNELS {
        let at = |y: usize, x: usize| c * side * side + y * side + x;
        for y in 0..side {
            for x in 0..side {
                if x + 1 < side {
                    a.push(at(y, x));
                    b.push(at(y, x + 1));
                }
                if y + 1 < side {
                    a.push(at(y, x));
                    b.push(at(y + 1, x));
                }
                if x + 1 < side && y + 1 < side {
                    a.push(at(y, x));
                    b.push(at(y + 1, x + 1));
                    a.push(at(y, x + 1));
                    b.push(at(y + 1, x));
                }
            }
        }
    }
    let va = g.gather_elems(image, &a)?;
    let vb = g.gather_elems(image, &b)?;
    let d = g.sub(va, vb)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq))
}

/// Reflects a continuous coordinate into `[0, n − 1]`.
fn reflect(x: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = x.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

/// Bilinear resampling of a `[c, side, side]` image under
/// `out(p) = in(R(−angle) · (p − centre − shift) / scale + centre)`, with
/// reflect padding.
pub fn affine_map<T: Scalar>(side: usize, shift: (f64, f64), angle_deg: f64, scale: f64) -> SparseMap<T> {
    let centre = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = (-angle_deg.to_radians()).sin_cos();
    let plane = side * side;
    let mut rows = Vec::with_capacity(CHANNELS * plane);
    for c in 0..CHANNELS {
        for y in 0..side {
            for x in 0..side {
                let px = (x as f64 - centre - shift.0) / scale;
                let py = (y as f64 - centre - shift.1) / scale;
                let sx = reflect(cos * px - sin * py + centre, side);
                let sy = reflect(sin * px + cos * py + centre, side);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(side - 1), (y0 + 1).min(side - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let mut row: Vec<(usize, T)> = Vec::with_capacity(4);
                for (yy, xx, w) in [
                    (y0, x0, (1.0 - fx) * (1.0 - fy)),
                    (y0, x1, fx * (1.0 - fy)),
                    (y1, x0, (1.0 - fx) * fy),
                    (y1, x1, fx * fy),
                ] {
                    if w == 0.0 {
                        continue;
                    }
                    let idx = c * plane + yy * side + xx;
                    match row.iter_mut().find(|(i, _)| *i == idx) {
                        Some(e) => e.1 = e.1 + T::from_f64_lossy(w),
                        None => row.push((idx, T::from_f64_lossy(w))),
                    }
                }
                rows.push(row);
            }
        }
    }
    SparseMap::new(vec![CHANNELS, side, side], CHANNELS * plane, rows).expect("indices in range")
}

fn clamped_normal(rng: &mut DnaRng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z.clamp(-3.0, 3.0)
}

/// Applies one random draw of the augmentation pipeline.
fn augment<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    side: usize,
    tf: &Transforms,
    noise_var: f64,
    rng: &mut DnaRng,
) -> Result<Var> {
    let mut x = image;
    if tf.geometric() {
        let j = tf.jitter as i64;
        let shift = (rng.random_range(-j..=j) as f64, rng.random_range(-j..=j) as f64);
        let angle = if tf.rotation > 0.0 { rng.random_range(-tf.rotation..=tf.rotation) } else { 0.0 };
        let scale = if tf.scale > 0.0 { rng.random_range(1.0 - tf.scale..=1.0 + tf.scale) } else { 1.0 };
        x = g.sparse_linear(x, Arc::new(affine_map(side, shift, angle, scale)))?;
    }
    let plane = side * side;
    if tf.color_shift {
        let mut mul = Vec::with_capacity(CHANNELS * plane);
        let mut add = Vec::with_capacity(CHANNELS * plane);
        for _ in 0..CHANNELS {
            let (s, e) = (clamped_normal(rng).exp(), clamped_normal(rng));
            mul.extend(std::iter::repeat_n(T::from_f64_lossy(s), plane));
            add.extend(std::iter::repeat_n(T::from_f64_lossy(e), plane));
        }
        x = g.mul_const(x, mul)?;
        x = g.add_const(x, &add)?;
    }
    if tf.noise && noise_var > 0.0 {
        let sd = noise_var.sqrt();
        let noise: Vec<T> = (0..CHANNELS * plane)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * sd)
            })
            .collect();
        x = g.add_const(x, &noise)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DreamResult {
    /// Final rendered image `[3, side, side]` with context patches clamped.
    pub image: Vec<f64>,
    /// Objective of the augmented pass at each step.
    pub objective: Vec<f64>,
    /// Untransformed objective after each step (only with `track_clean`).
    pub clean: Vec<f64>,
    pub clean_initial: f64,
    pub clean_final: f64,
}

/// Renders θ, clamps the context patches and returns the image node.
fn clamped_render<T: Scalar>(
    params: &DreamParams<T>,
    g: &mut Graph<T>,
    mask: &[bool],
    reference: &[T],
    track: bool,
) -> Result<Var> {
    let img = params.render_graph(g, track)?;
    if mask.iter().any(|&m| m) {
        Ok(g.mask_select(img, mask, reference)?)
    } else {
        Ok(img)
    }
}

fn clean_objective<T: Scalar>(
    model: &DnaModel<T>,
    params: &DreamParams<T>,
    obj: &DreamObjective,
    mask: &[bool],
    reference: &[T],
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let img = clamped_render(params, &mut g, mask, reference, false)?;
    let o = dream_objective_graph(model, &mut g, img, obj)?;
    Ok((g.scalar_value(o).as_f64(), g.value(img).iter().map(|v| v.as_f64()).collect()))
}

/// Gradient ascent on `O − tv · TV(Θ)` over θ with Adam. The model is
/// read-only.
pub fn dream<T: Scalar>(
    model: &DnaModel<T>,
    obj: &DreamObjective,
    reference: &[f64],
    settings: &DreamSettings,
    seed: u64,
) -> Result<DreamResult> {
    let (side, patch, _) = image_dims(&model.config.task)?;
    if reference.len() != CHANNELS * side * side {
        return Err(DnaError::TaskMismatch("reference image has the wrong size".into()));
    }
    let mut rng = crate::rng::seeded(seed);
    let mut params = DreamParams::<T>::random(side, settings.init_std, &mut rng);
    let mask = obj.pixel_mask(side, patch);
    let reference_t: Vec<T> = reference.iter().map(|&v| T::from_f64_lossy(v)).collect();
    let mut adam = AdamW::new(
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
        &params.store,
    );
    let (clean_initial, _) = clean_objective(model, &params, obj, &mask, &reference_t)?;
    let mut objective = Vec::with_capacity(settings.steps);
    let mut clean = Vec::new();
    for step in 0..settings.steps {
        let mut g = Graph::new();
        let img = clamped_render(&params, &mut g, &mask, &reference_t, true)?;
        let noise_var = if settings.steps > 1 {
            1.0 - step as f64 / (settings.steps - 1) as f64
        } else {
            0.0
        };
        let seen = augment(&mut g, img, side, &settings.transforms, noise_var, &mut rng)?;
        let o = dream_objective_graph(model, &mut g, seen, obj)?;
        let value = g.scalar_value(o).as_f64();
        if !value.is_finite() {
            return Err(DnaError::DreamDiverged { step, value });
        }
        objective.push(value);
        let mut target = g.scale(o, -T::one());
        if settings.tv > 0.0 {
            let tv = total_variation(&mut g, img, side)?;
            let tv = g.scale(tv, T::from_f64_lossy(settings.tv));
            target = g.add(target, tv)?;
        }
        let grads = g.backward(target)?;
        params.store.zero_grads();
        g.accumulate_param_grads(&grads, &mut params.store)?;
        adam.step(&mut params.store, settings.lr);
        if settings.track_clean {
            clean.push(clean_objective(model, &params, obj, &mask, &reference_t)?.0);
        }
    }
    let (clean_final, image) = clean_objective(model, &params, obj, &mask, &reference_t)?;
    Ok(DreamResult {
        image,
        objective,
        clean,
        clean_initial,
        clean_final,
    })
}

/// Binary PPM (P6) of a `[3, side, side]` image in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &[f64], side: usize) -> Result<()> {
    let plane = side * side;
    let mut bytes = format!("P6\n{side} {side}\n255\n").into_bytes();
    for i in 0..plane {
        for c in 0..CHANNELS {
            bytes.push((image[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::write(path, bytes).map_err(|e| DnaError::io(path, e))
}

/// `step\tobjective[\tclean]` rows.
pub fn objective_tsv(result: &DreamResult) -> String {
    let mut s = String::from(if result.clean.is_empty() { "step\tobjective\n" } else { "step\tobjective\tclean\n" });
    for (i, o) in result.objective.iter().enumerate() {
        match result.clean.get(i) {
            Some(c) => writeln!(s, "{i}\t{o:.9}\t{c:.9}"),
            None => writeln!(s, "{i}\t{o:.9}"),
        }
        .expect("string write");
    }
    s
}
