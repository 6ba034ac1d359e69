//! Scaled dot-product attention restricted to token subsets.
//!
//! Rows of `q`, `k` and `v` are grouped into contiguous segments (one per
//! sequence). A row only attends to rows of its own segment, and in causal
//! mode only to rows whose original position is not later than its own.
//! Rows absent from the call take no part in the attention at all, which is
//! how routed attention modules see only the tokens they received.

use std::ops::Range;

use super::error::TensorError;
use super::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    segments: Vec<Range<usize>>,
    positions: Vec<usize>,
    causal: bool,
}

impl AttentionLayout {
    /// `segment_ids[r]` names the sequence row `r` belongs to; equal ids must
    /// be contiguous. `positions[r]` is the row's original position in it.
    pub fn new(
        segment_ids: &[usize],
        positions: Vec<usize>,
        causal: bool,
    ) -> Result<Self, TensorError> {
        if segment_ids.len() != positions.len() {
            return Err(TensorError::Shape {
                op: "attention_layout",
                lhs: vec![segment_ids.len()],
                rhs: vec![positions.len()],
            });
        }
        let mut segments: Vec<Range<usize>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut start = 0;
        for r in 1..=segment_ids.len() {
            if r == segment_ids.len() || segment_ids[r] != segment_ids[start] {
                if !seen.insert(segment_ids[start]) {
                    return Err(TensorError::Contract(format!(
                        "segment {} is not contiguous",
                        segment_ids[start]
                    )));
                }
                segments.push(start..r);
                start = r;
            }
        }
        Ok(Self {
            segments,
            positions,
            causal,
        })
    }

    /// A single segment with positions `0..n`.
    pub fn single(n: usize, causal: bool) -> Self {
        Self {
            segments: if n == 0 { vec![] } else { vec![0..n] },
            positions: (0..n).collect(),
            causal,
        }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn causal(&self) -> bool {
        self.causal
    }

    #[inline]
    fn allowed(&self, query: usize, key: usize) -> bool {
        !self.causal || self.positions[key] <= self.positions[query]
    }
}

/// Forward pass. Returns the output rows and the attention probabilities,
/// stored per segment and head as dense `len × len` blocks.
pub fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    n_head: usize,
    layout: &AttentionLayout,
) -> (Vec<T>, Vec<T>) {
    let dh = d / n_head;
    let scale = T::one() / T::from_f64_lossy((dh as f64).sqrt());
    let mut out = vec![T::zero(); layout.rows() * d];
    let mut probs = Vec::new();
    let mut scores = Vec::new();
    for seg in &layout.segments {
        let len = seg.len();
        for head in 0..n_head {
            let c0 = head * dh;
            for i in 0..len {
                let qi = &q[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                scores.clear();
                let mut max = T::neg_infinity();
                for j in 0..len {
                    if layout.allowed(seg.start + i, seg.start + j) {
                        let kj = &k[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        let s = dot(qi, kj) * scale;
                        max = max.max(s);
                        scores.push(s);
                    } else {
                        scores.push(T::neg_infinity());
                    }
                }
                let mut sum = T::zero();
                for s in scores.iter_mut() {
                    *s = if s.is_finite() { (*s - max).exp() } else { T::zero() };
                    sum = sum + *s;
                }
                let o = &mut out[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = *s / sum;
                    if *s != T::zero() {
                        let vj = &v[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        for (a, &b) in o.iter_mut().zip(vj) {
                            *a = *a + *s * b;
                        }
                    }
                }
                probs.extend_from_slice(&scores);
            }
        }
    }
    (out, probs)
}

/// Backward pass given the saved probabilities. Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    d: usize,
    n_head: usize,
    layout: &AttentionLayout,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / n_head;
    let scale = T::one() / T::from_f64_lossy((dh as f64).sqrt());
    let n = layout.rows() * d;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let mut dp = Vec::new();
    let mut offset = 0;
    for seg in &layout.segments {
        let len = seg.len();
        for head in 0..n_head {
            let c0 = head * dh;
            for i in 0..len {
                let ri = (seg.start + i) * d + c0;
                let p = &probs[offset..offset + len];
                offset += len;
                let go = &grad_out[ri..ri + dh];
                dp.clear();
                let mut weighted = T::zero();
                for (j, &pij) in p.iter().enumerate() {
                    let rj = (seg.start + j) * d + c0;
                    if pij == T::zero() {
                        dp.push(T::zero());
                        continue;
                    }
                    for (a, &b) in dv[rj..rj + dh].iter_mut().zip(go) {
                        *a = *a + pij * b;
                    }
                    let g = dot(go, &v[rj..rj + dh]);
                    weighted = weighted + pij * g;
                    dp.push(g);
                }
                for (j, &pij) in p.iter().enumerate() {
                    if pij == T::zero() {
                        continue;
                    }
                    let rj = (seg.start + j) * d + c0;
                    let ds = pij * (dp[j] - weighted) * scale;
                    for c in 0..dh {
                        dq[ri + c] = dq[ri + c] + ds * k[rj + c];
                        dk[rj + c] = dk[rj + c] + ds * q[ri + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
