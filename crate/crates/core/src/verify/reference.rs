//! A plain-loop dense Pre-LN transformer that reads a model's parameters by
//! name. It shares no code with the graph, so it can serve as an oracle for
//! the routed forward pass.

use crate::error::{DnaError, Result};
use crate::model::{Batch, DnaModel, Task};
use crate::nn::ModuleKind;

const EPS: f64 = 1e-5;

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn select_rows(&self, rows: &[usize]) -> Mat {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Mat::new(rows.len(), self.cols, data)
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.at(i, k) * b.at(k, j);
            }
            out[i * b.cols + j] = s;
        }
    }
    Mat::new(a.rows, b.cols, out)
}

fn add(a: &Mat, b: &Mat) -> Mat {
    Mat::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

fn layer_norm(x: &Mat, gain: &[f64]) -> Mat {
    let d = x.cols as f64;
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + EPS).sqrt();
        out.extend(row.iter().zip(gain).map(|(v, g)| (v - mean) * inv * g));
    }
    Mat::new(x.rows, x.cols, out)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

/// Looks up a parameter by name.
pub fn weight(model: &DnaModel<f64>, name: &str) -> Result<Mat> {
    let id = model
        .params
        .id(name)
        .ok_or_else(|| DnaError::Consistency(format!("reference: no parameter named {name}")))?;
    let t = model.params.get(id);
    let (rows, cols) = match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => return Err(DnaError::Consistency(format!("reference: {name} has rank {}", s.len()))),
    };
    Ok(Mat::new(rows, cols, t.data().to_vec()))
}

/// Multi-head self-attention over the rows of one sequence, given in
/// ascending position order.
fn self_attention(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, n_head: usize, causal: bool) -> Mat {
    let (q, k, v) = (matmul(x, wq), matmul(x, wk), matmul(x, wv));
    let n = x.rows;
    let dh = x.cols / n_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * x.cols];
    for h in 0..n_head {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let visible = if causal { i + 1 } else { n };
            let scores: Vec<f64> = (0..visible)
                .map(|j| cols.clone().map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i * x.cols + c] = (0..visible).map(|j| e[j] / z * v.at(j, c)).sum();
            }
        }
    }
    Mat::new(n, x.cols, out)
}

/// One pool or backbone module applied to the rows of one sequence.
pub fn module(model: &DnaModel<f64>, prefix: &str, kind: ModuleKind, x: &Mat) -> Result<Mat> {
    let causal = model.config.task.causal();
    let mut h = x.clone();
    if kind == ModuleKind::TransformerBlock || kind == ModuleKind::AttentionOnly {
        let norm = weight(model, &format!("{prefix}.attn.norm"))?;
        let xn = layer_norm(&h, &norm.data);
        let mixed = self_attention(
            &xn,
            &weight(model, &format!("{prefix}.attn.wq"))?,
            &weight(model, &format!("{prefix}.attn.wk"))?,
            &weight(model, &format!("{prefix}.attn.wv"))?,
            model.config.n_head,
            causal,
        );
        h = add(&h, &matmul(&mixed, &weight(model, &format!("{prefix}.attn.wo"))?));
    }
    if kind == ModuleKind::TransformerBlock || kind == ModuleKind::MlpOnly {
        let norm = weight(model, &format!("{prefix}.mlp.norm"))?;
        let xn = layer_norm(&h, &norm.data);
        let mut hidden = matmul(&xn, &weight(model, &format!("{prefix}.mlp.w_in"))?);
        hidden.data.iter_mut().for_each(|v| *v = gelu(*v));
        h = add(&h, &matmul(&hidden, &weight(model, &format!("{prefix}.mlp.w_out"))?));
    }
    Ok(h)
}

/// Embedded tokens of each example, `[tokens, d]` per example.
fn embed(model: &DnaModel<f64>, batch: &Batch) -> Result<Vec<Mat>> {
    let pos = weight(model, "input.pos_embed")?;
    let d = pos.cols;
    let mut out = Vec::new();
    match (batch, model.config.task) {
        (
            Batch::Images { pixels, batch, .. },
            Task::VisionClassify {
                image_size: s,
                patch: p,
                channels,
                ..
            },
        ) => {
            let proj = weight(model, "input.patch_proj")?;
            let per_side = s / p;
            for b in 0..*batch {
                let mut feats = Vec::new();
                for t in 0..per_side * per_side {
                    let (py, px) = (t / per_side, t % per_side);
                    for c in 0..channels {
                        for dy in 0..p {
                            for dx in 0..p {
                                feats.push(pixels[((b * channels + c) * s + py * p + dy) * s + px * p + dx]);
                            }
                        }
                    }
                }
                let x = Mat::new(per_side * per_side, channels * p * p, feats);
                out.push(add(&matmul(&x, &proj), &pos));
            }
        }
        (Batch::Tokens { ids, batch, .. }, Task::CausalLm { context, .. }) => {
            let table = weight(model, "input.token_embed")?;
            for b in 0..*batch {
                let rows: Vec<usize> = ids[b * context..(b + 1) * context].to_vec();
                out.push(add(&table.select_rows(&rows), &pos));
            }
        }
        _ => return Err(DnaError::TaskMismatch("reference: batch does not match the task".into())),
    }
    debug_assert!(out.iter().all(|m| m.cols == d));
    Ok(out)
}

/// Logits of a dense network: backbone, then pool module `modules[s]` at
/// routed step `s` applied to every token, then the output node. Returns
/// `[batch, classes]` or `[batch · context, vocab]` row-major.
pub fn dense_logits(model: &DnaModel<f64>, batch: &Batch, modules: &[usize]) -> Result<Vec<f64>> {
    let kinds = model.config.pool_kinds();
    let norm = weight(model, "output.norm")?;
    let head = weight(model, "output.head")?;
    let mut logits = Vec::new();
    for mut h in embed(model, batch)? {
        for l in 0..model.config.n_backbone {
            h = module(model, &format!("backbone.{l}"), ModuleKind::TransformerBlock, &h)?;
        }
        for &m in modules {
            if kinds[m] != ModuleKind::Identity {
                h = module(model, &format!("pool.{m}"), kinds[m], &h)?;
            }
        }
        let x = layer_norm(&h, &norm.data);
        match model.config.task {
            Task::VisionClassify { .. } => {
                let pooled: Vec<f64> = (0..x.cols)
                    .map(|c| (0..x.rows).map(|r| x.at(r, c)).sum::<f64>() / x.rows as f64)
                    .collect();
                logits.extend(matmul(&Mat::new(1, x.cols, pooled), &head).data);
            }
            Task::CausalLm { .. } => logits.extend(matmul(&x, &head).data),
        }
    }
    Ok(logits)
}
