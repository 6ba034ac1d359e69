//! Deterministic desk-scale datasets.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::model::{Batch, Task};
use crate::rng::{seeded, DnaRng};

pub trait Dataset {
    /// Examples available for evaluation passes.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Random training batch.
    fn sample(&self, rng: &mut DnaRng, size: usize) -> Batch;

    /// Examples `start..start + size` in a fixed order.
    fn slice(&self, start: usize, size: usize) -> Batch;
}

/// Shapes the synthetic images are labelled by.
pub const SHAPES: [&str; 4] = ["horizontal-bar", "vertical-bar", "disk", "frame"];

/// Bright shapes on dim textured backgrounds. Shape pixels are at least 0.6
/// in every channel and background pixels at most 0.3, so the pixel sum is
/// a shape mask and the classes are linearly separable.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapesDataset {
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
    pub pixels: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ShapesDataset {
    pub fn generate(image_size: usize, channels: usize, classes: usize, count: usize, seed: u64) -> Result<Self> {
        if classes == 0 || classes > SHAPES.len() {
            return Err(DnaError::config("task.classes", format!("shapes dataset has 1..={} classes", SHAPES.len())));
        }
        if image_size < 12 {
            return Err(DnaError::config("task.image_size", "shapes need at least 12 pixels per side"));
        }
        let mut rng = seeded(seed);
        let mut pixels = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % classes;
            pixels.push(render_shape(&mut rng, label, image_size, channels));
            labels.push(label);
        }
        Ok(Self {
            image_size,
            channels,
            classes,
            pixels,
            labels,
        })
    }

    pub fn for_task(task: &Task, count: usize, seed: u64) -> Result<Self> {
        match *task {
            Task::VisionClassify {
                image_size,
                channels,
                classes,
                ..
            } => Self::generate(image_size, channels, classes, count, seed),
            Task::CausalLm { .. } => Err(DnaError::TaskMismatch("shapes dataset needs a vision task".into())),
        }
    }

    fn batch_of(&self, idx: &[usize]) -> Batch {
        Batch::Images {
            pixels: idx.iter().flat_map(|&i| self.pixels[i].iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            batch: idx.len(),
        }
    }
}

fn in_shape(label: usize, x: f64, y: f64, c: f64, r: f64) -> bool {
    let (dx, dy) = (x - c, y - c);
    match label {
        0 => dy.abs() <= r * 0.3 && dx.abs() <= r,
        1 => dx.abs() <= r * 0.3 && dy.abs() <= r,
        2 => dx * dx + dy * dy <= (r * 0.7) * (r * 0.7),
        _ => {
            let m = dx.abs().max(dy.abs());
            m <= r && m >= r * 0.7
        }
    }
}

fn render_shape(rng: &mut DnaRng, label: usize, side: usize, channels: usize) -> Vec<f64> {
    let plane = side * side;
    let mut img = vec![0.0; channels * plane];
    // Background: a random low-amplitude stripe texture plus grain.
    let freq = rng.random_range(1.0..4.0);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let base: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..0.15)).collect();
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 * angle.cos() + y as f64 * angle.sin()) * freq * 2.0 * std::f64::consts::PI / side as f64;
            let tex = 0.05 * (1.0 + u.sin());
            for (ch, &b) in base.iter().enumerate() {
                let grain: f64 = rng.random_range(0.0..0.05);
                img[ch * plane + y * side + x] = (b + tex + grain).min(0.3);
            }
        }
    }
    let color: Vec<f64> = (0..channels).map(|_| rng.random_range(0.6..1.0)).collect();
    let centre = (side as f64 - 1.0) / 2.0 + rng.random_range(-1.0..=1.0);
    let radius = side as f64 * rng.random_range(0.3..0.38);
    for y in 0..side {
        for x in 0..side {
            if in_shape(label, x as f64, y as f64, centre, radius) {
                for (ch, &c) in color.iter().enumerate() {
                    img[ch * plane + y * side + x] = c;
                }
            }
        }
    }
    img
}

impl Dataset for ShapesDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn sample(&self, rng: &mut DnaRng, size: usize) -> Batch {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.batch_of(&idx)
    }

    fn slice(&self, start: usize, size: usize) -> Batch {
        let idx: Vec<usize> = (start..start + size).map(|i| i % self.len()).collect();
        self.batch_of(&idx)
    }
}

/// How a character corpus is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TextSource {
    /// A fixed random arrangement of `period` distinct symbols, repeated.
    Periodic { period: usize, length: usize },
    /// Bytes of a text file; each byte is a token.
    File { path: std::path::PathBuf },
}

/// Character stream cut into windows of `context + 1` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct CharDataset {
    pub context: usize,
    pub vocab: usize,
    pub ids: Vec<usize>,
}

impl CharDataset {
    /// `period` distinct symbols in a seeded random order, repeated to
    /// `length` tokens. Every symbol determines its successor.
    pub fn periodic(period: usize, length: usize, vocab: usize, context: usize, seed: u64) -> Result<Self> {
        if period > vocab {
            return Err(DnaError::config("data.period", format!("period {period} exceeds vocab {vocab}")));
        }
        let mut symbols: Vec<usize> = (0..period).collect();
        symbols.shuffle(&mut seeded(seed));
        let ids = (0..length).map(|i| symbols[i % period]).collect();
        Self::from_ids(ids, vocab, context)
    }

    pub fn from_ids(ids: Vec<usize>, vocab: usize, context: usize) -> Result<Self> {
        if ids.len() <= context {
            return Err(DnaError::config("data", format!("corpus of {} tokens is shorter than the context", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(DnaError::config("data", format!("token {bad} is outside the vocabulary of {vocab}")));
        }
        Ok(Self { context, vocab, ids })
    }

    pub fn from_file(path: &std::path::Path, vocab: usize, context: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DnaError::io(path, e))?;
        Self::from_ids(bytes.into_iter().map(|b| (b as usize) % vocab).collect(), vocab, context)
    }

    pub fn from_source(source: &TextSource, task: &Task, seed: u64) -> Result<Self> {
        let Task::CausalLm { vocab, context } = *task else {
            return Err(DnaError::TaskMismatch("character dataset needs a language task".into()));
        };
        match source {
            TextSource::Periodic { period, length } => Self::periodic(*period, *length, vocab, context, seed),
            TextSource::File { path } => Self::from_file(path, vocab, context),
        }
    }

    fn windows(&self) -> usize {
        self.ids.len() - self.context
    }

    fn batch_at(&self, starts: &[usize]) -> Batch {
        let c = self.context;
        Batch::Tokens {
            ids: starts.iter().flat_map(|&s| self.ids[s..s + c].iter().copied()).collect(),
            targets: starts.iter().flat_map(|&s| self.ids[s + 1..s + c + 1].iter().copied()).collect(),
            batch: starts.len(),
        }
    }
}

impl Dataset for CharDataset {
    /// Non-overlapping windows.
    fn len(&self) -> usize {
        self.windows().div_ceil(self.context)
    }

    fn sample(&self, rng: &mut DnaRng, size: usize) -> Batch {
        let starts: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.windows())).collect();
        self.batch_at(&starts)
    }

    fn slice(&self, start: usize, size: usize) -> Batch {
        let starts: Vec<usize> = (start..start + size)
            .map(|i| (i % self.len()) * self.context)
            .map(|s| s.min(self.windows() - 1))
            .collect();
        self.batch_at(&starts)
    }
}

/// Uniform random token sequences. Sequence `i` depends only on the seed
/// and `i`, so any slice is reproducible on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomTokens {
    pub vocab: usize,
    pub context: usize,
    pub count: usize,
    pub seed: u64,
}

impl RandomTokens {
    fn sequence(&self, i: usize) -> Vec<usize> {
        let mut rng = seeded(self.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        (0..self.context + 1).map(|_| rng.random_range(0..self.vocab)).collect()
    }

    fn batch_of(&self, seqs: &[usize]) -> Batch {
        let c = self.context;
        let rows: Vec<Vec<usize>> = seqs.iter().map(|&i| self.sequence(i)).collect();
        Batch::Tokens {
            ids: rows.iter().flat_map(|r| r[..c].iter().copied()).collect(),
            targets: rows.iter().flat_map(|r| r[1..].iter().copied()).collect(),
            batch: seqs.len(),
        }
    }
}

impl Dataset for RandomTokens {
    fn len(&self) -> usize {
        self.count
    }

    fn sample(&self, rng: &mut DnaRng, size: usize) -> Batch {
        let seqs: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.count.max(1))).collect();
        self.batch_of(&seqs)
    }

    fn slice(&self, start: usize, size: usize) -> Batch {
        let seqs: Vec<usize> = (start..start + size).collect();
        self.batch_of(&seqs)
    }
}
