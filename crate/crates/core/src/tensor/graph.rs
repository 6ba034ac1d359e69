//! Dynamically recorded compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep that visits each
//! node once.

use std::collections::HashMap;
use std::sync::Arc;

use super::attention::{self, AttentionLayout};
use super::error::TensorError;
use super::fft;
use super::params::{ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear map `out[o] = Σ w · x[i]`, stored by output row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap<T> {
    out_shape: Vec<usize>,
    in_len: usize,
    offsets: Vec<usize>,
    entries: Vec<(usize, T)>,
}

impl<T: Scalar> SparseMap<T> {
    /// `rows[o]` lists the `(input index, weight)` pairs feeding output `o`.
    pub fn new(
        out_shape: Vec<usize>,
        in_len: usize,
        rows: Vec<Vec<(usize, T)>>,
    ) -> Result<Self, TensorError> {
        let n: usize = out_shape.iter().product();
        if rows.len() != n {
            return Err(TensorError::DataLength {
                shape: out_shape,
                len: rows.len(),
            });
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for row in rows {
            for &(i, _) in &row {
                if i >= in_len {
                    return Err(TensorError::Index {
                        index: i,
                        extent: in_len,
                    });
                }
            }
            entries.extend(row);
            offsets.push(entries.len());
        }
        Ok(Self {
            out_shape,
            in_len,
            offsets,
            entries,
        })
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        (0..self.offsets.len() - 1)
            .map(|o| {
                self.entries[self.offsets[o]..self.offsets[o + 1]]
                    .iter()
                    .fold(T::zero(), |acc, &(i, w)| acc + w * x[i])
            })
            .collect()
    }

    fn apply_adjoint(&self, g: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.in_len];
        for (o, &go) in g.iter().enumerate() {
            for &(i, w) in &self.entries[self.offsets[o]..self.offsets[o + 1]] {
                out[i] = out[i] + w * go;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    AddConst(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherElems {
        x: Var,
        flat: Vec<usize>,
    },
    Sum(Var),
    Mean {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_head: usize,
        layout: Arc<AttentionLayout>,
        probs: Vec<T>,
    },
    Sparse {
        x: Var,
        map: Arc<SparseMap<T>>,
    },
    Ifft2Real {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    MaskSelect {
        x: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracks_grad: bool,
}

/// Tape of recorded operations for one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(u64, ParamId, Var)>,
    bound: HashMap<(u64, ParamId, bool), Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn gelu<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    T::from_f64_lossy(0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2)))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::from_f64_lossy(cdf + xf * pdf)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => {
            for (a, &b) in d.iter_mut().zip(src) {
                *a = *a + b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracks_grad = inputs.iter().any(|v| self.nodes[v.0].tracks_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracks_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient will be computed.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            tracks_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            tracks_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter as a leaf. With `track` false the value is
    /// used as a constant (frozen parameters). Repeated binds within one
    /// graph return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, track: bool) -> Var {
        if let Some(&v) = self.bound.get(&(store.uid(), id, track)) {
            return v;
        }
        let t = store.get(id);
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.data().to_vec(),
            op: Op::Leaf,
            tracks_grad: track,
        });
        let v = Var(self.nodes.len() - 1);
        if track {
            self.bindings.push((store.uid(), id, v));
        }
        self.bound.insert((store.uid(), id, track), v);
        v
    }

    /// Makes later `param(store, id, track)` calls return `v` instead of the
    /// stored value. Used to probe a model with substituted parameters.
    pub fn bind_param(&mut self, store: &ParamStore<T>, id: ParamId, track: bool, v: Var) -> Result<(), TensorError> {
        let expected = store.get(id).shape();
        if self.shape(v) != expected {
            return Err(TensorError::Shape {
                op: "bind_param",
                lhs: self.shape(v).to_vec(),
                rhs: expected.to_vec(),
            });
        }
        self.bound.insert((store.uid(), id, track), v);
        Ok(())
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            &mut out,
            false,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op_name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[.., d] + b[d]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.shape(b) != [d] {
            return Err(shape_err("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).to_vec();
        let out = self
            .value(x)
            .chunks_exact(d.max(1))
            .flat_map(|row| row.iter().zip(&bv).map(|(&a, &c)| a + c))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[n, d] * w[n]`, scaling each row by its own weight.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(x, "mul_col")?;
        if self.nodes[w.0].value.len() != n {
            return Err(shape_err("mul_col", self.shape(x), self.shape(w)));
        }
        let wv = self.value(w).to_vec();
        let out = self
            .value(x)
            .chunks_exact(d.max(1))
            .zip(&wv)
            .flat_map(|(row, &s)| row.iter().map(move |&a| a * s))
            .collect();
        Ok(self.push(vec![n, d], out, Op::MulCol(x, w), &[x, w]))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var, TensorError> {
        if c.len() != self.value(x).len() {
            return Err(shape_err("mul_const", self.shape(x), &[c.len()]));
        }
        let out = self.value(x).iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::MulConst(x, c), &[x]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&a| a * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c), &[x])
    }

    /// `x + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &[T]) -> Result<Var, TensorError> {
        if c.len() != self.value(x).len() {
            return Err(shape_err("add_const", self.shape(x), &[c.len()]));
        }
        let out = self.value(x).iter().zip(c).map(|(&a, &b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddConst(x), &[x]))
    }

    /// Layer normalization over the last axis with a learned gain and no
    /// shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var) -> Result<Var, TensorError> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [d] || d == 0 {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let g = self.value(gain).to_vec();
        let rows = self.value(x).len() / d;
        let mut normed = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.value(x).chunks_exact(d) {
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
                / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            normed.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let out = normed
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&g).map(|(&a, &b)| a * b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                normed,
                rstd,
            },
            &[x, gain],
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&a| gelu(a)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&a| sigmoid(a)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&a| a.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Exp(x), &[x])
    }

    /// Softmax along `axis`, subtracting the per-slice maximum first.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        let out = softmax_values(self.value(x), outer, len, inner);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= vocab {
                return Err(TensorError::Index {
                    index: i,
                    extent: vocab,
                });
            }
            out.extend_from_slice(&self.value(table)[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(TensorError::Reshape {
                from: self.shape(x).to_vec(),
                to: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "transpose")?;
        let v = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x), &[x]))
    }

    /// Stacks 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = match parts.first() {
            Some(&p) => self.dims2(p, "concat_rows")?.1,
            None => return Err(TensorError::Contract("concat of zero tensors".into())),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(x, "gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(TensorError::Index {
                    index: i,
                    extent: n,
                });
            }
            out.extend_from_slice(&self.value(x)[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![idx.len(), d],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Places row `r` of `x` at row `idx[r]` of an `n`-row zero tensor,
    /// summing rows that share a target.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var, TensorError> {
        let (r, d) = self.dims2(x, "scatter_rows")?;
        if r != idx.len() {
            return Err(shape_err("scatter_rows", self.shape(x), &[idx.len()]));
        }
        let mut out = vec![T::zero(); n * d];
        for (row, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(TensorError::Index {
                    index: i,
                    extent: n,
                });
            }
            for c in 0..d {
                out[i * d + c] = out[i * d + c] + self.value(x)[row * d + c];
            }
        }
        Ok(self.push(
            vec![n, d],
            out,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Picks individual elements by flat index into a 1-D result.
    pub fn gather_elems(&mut self, x: Var, flat: &[usize]) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        let mut out = Vec::with_capacity(flat.len());
        for &i in flat {
            if i >= n {
                return Err(TensorError::Index {
                    index: i,
                    extent: n,
                });
            }
            out.push(self.value(x)[i]);
        }
        Ok(self.push(
            vec![flat.len()],
            out,
            Op::GatherElems {
                x,
                flat: flat.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b);
        self.push(vec![], vec![s], Op::Sum(x), &[x])
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        let v = self.value(x);
        let dn = T::from_usize(len.max(1)).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + v[(o * len + l) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|a| *a = *a / dn);
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        Ok(self.push(
            shape,
            out,
            Op::Mean {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Mean token-level cross-entropy of `logits[n, classes]` against
    /// integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (n, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || n == 0 {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Index {
                index: bad,
                extent: c,
            });
        }
        let probs = softmax_values(self.value(logits), n, c, 1);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &self.value(logits)[r * c..(r + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().fold(T::zero(), |a, &b| a + (b - max).exp()).ln() + max;
            loss = loss + (lse - row[t]);
        }
        loss = loss / T::from_usize(n).unwrap();
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Multi-head scaled dot-product attention over the segments of
    /// `layout`. `q`, `k`, `v` are `[rows, d]` projections.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_head: usize,
        layout: Arc<AttentionLayout>,
    ) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(q, "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if layout.rows() != n {
            return Err(shape_err("attention", self.shape(q), &[layout.rows()]));
        }
        if n_head == 0 || d % n_head != 0 {
            return Err(TensorError::Contract(format!(
                "d_embed {d} not divisible by n_head {n_head}"
            )));
        }
        let (out, probs) =
            attention::forward(self.value(q), self.value(k), self.value(v), d, n_head, &layout);
        Ok(self.push(
            vec![n, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                n_head,
                layout,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn sparse_linear(&mut self, x: Var, map: Arc<SparseMap<T>>) -> Result<Var, TensorError> {
        if self.value(x).len() != map.in_len {
            return Err(shape_err("sparse_linear", self.shape(x), &[map.in_len]));
        }
        let out = map.apply(self.value(x));
        let shape = map.out_shape.clone();
        Ok(self.push(shape, out, Op::Sparse { x, map }, &[x]))
    }

    /// Real part of the orthonormal inverse 2-D DFT of `[c, h, w, 2]`
    /// (re, im) coefficients, giving `[c, h, w]`.
    pub fn ifft2_real(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w, 2] => (*c, *h, *w),
            s => return Err(shape_err("ifft2_real", s, &[0, 0, 0, 2])),
        };
        let out = fft::ifft2_real(self.value(x), c, h, w);
        Ok(self.push(vec![c, h, w], out, Op::Ifft2Real { x, c, h, w }, &[x]))
    }

    /// Replaces masked entries of `x` with the given constant values.
    pub fn mask_select(&mut self, x: Var, mask: &[bool], fill: &[T]) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        if mask.len() != n || fill.len() != n {
            return Err(shape_err("mask_select", self.shape(x), &[mask.len()]));
        }
        let out = self
            .value(x)
            .iter()
            .zip(mask.iter().zip(fill))
            .map(|(&a, (&m, &f))| if m { f } else { a })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::MaskSelect {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracks_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds gradients of bound parameters into the store's grad buffers.
    pub fn accumulate_param_grads(
        &self,
        grads: &Gradients<T>,
        store: &mut ParamStore<T>,
    ) -> Result<(), TensorError> {
        let uid = store.uid();
        for &(_, id, v) in self.bindings.iter().filter(|b| b.0 == uid) {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.tracks(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, (n as isize, 1), self.value(*b), (1, n as isize), &mut da, false);
                    add_into(&mut grads[a.0], &da);
                }
                if self.tracks(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a), (1, k as isize), g, (n as isize, 1), &mut db, false);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if self.tracks(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.tracks(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.tracks(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.tracks(*b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.tracks(*a) {
                    let d: Vec<T> = g.iter().zip(self.value(*b)).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.tracks(*b) {
                    let d: Vec<T> = g.iter().zip(self.value(*a)).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::AddRow(x, b) => {
                if self.tracks(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.tracks(*b) {
                    let d = self.value(*b).len();
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks_exact(d.max(1)) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::MulCol(x, w) => {
                let d = self.shape(*x)[1];
                if self.tracks(*x) {
                    let wv = self.value(*w);
                    let dx: Vec<T> = g
                        .chunks_exact(d.max(1))
                        .zip(wv)
                        .flat_map(|(row, &s)| row.iter().map(move |&a| a * s))
                        .collect();
                    add_into(&mut grads[x.0], &dx);
                }
                if self.tracks(*w) {
                    let dw: Vec<T> = g
                        .chunks_exact(d.max(1))
                        .zip(self.value(*x).chunks_exact(d.max(1)))
                        .map(|(gr, xr)| gr.iter().zip(xr).fold(T::zero(), |a, (&p, &q)| a + p * q))
                        .collect();
                    add_into(&mut grads[w.0], &dw);
                }
            }
            Op::MulConst(x, c) => {
                let d: Vec<T> = g.iter().zip(c).map(|(&a, &b)| a * b).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Scale(x, c) => {
                let d: Vec<T> = g.iter().map(|&a| a * *c).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::AddConst(x) | Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::LayerNorm {
                x,
                gain,
                normed,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain);
                if self.tracks(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, nr) in g.chunks_exact(d).zip(normed.chunks_exact(d)) {
                        for c in 0..d {
                            dg[c] = dg[c] + gr[c] * nr[c];
                        }
                    }
                    add_into(&mut grads[gain.0], &dg);
                }
                if self.tracks(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, nr), &r) in g.chunks_exact(d).zip(normed.chunks_exact(d)).zip(rstd) {
                        let gy: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_gy = gy.iter().fold(T::zero(), |a, &b| a + b) / dn;
                        let mean_gyn = gy.iter().zip(nr).fold(T::zero(), |a, (&p, &q)| a + p * q) / dn;
                        dx.extend(gy.iter().zip(nr).map(|(&a, &n)| r * (a - mean_gy - n * mean_gyn)));
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::Gelu(x) => {
                let d: Vec<T> = g.iter().zip(self.value(*x)).map(|(&a, &b)| a * gelu_grad(b)).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<T> = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&a, &s)| a * s * (T::one() - s))
                    .collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Exp(x) => {
                let d: Vec<T> = g.iter().zip(&node.value).map(|(&a, &e)| a * e).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot = (0..*len).fold(T::zero(), |a, l| a + g[at(l)] * y[at(l)]);
                        for l in 0..*len {
                            dx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[i * d + c] = dt[i * d + c] + g[r * d + c];
                    }
                }
                add_into(&mut grads[table.0], &dt);
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.tracks(*p) {
                        add_into(&mut grads[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let d = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[i * d + c] = dx[i * d + c] + g[r * d + c];
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::ScatterRows { x, idx } => {
                let d = self.shape(*x)[1];
                let mut dx = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    dx.extend_from_slice(&g[i * d..(i + 1) * d]);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::GatherElems { x, flat } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (r, &i) in flat.iter().enumerate() {
                    dx[i] = dx[i] + g[r];
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                add_into(&mut grads[x.0], &vec![g[0]; n]);
            }
            Op::Mean {
                x,
                outer,
                len,
                inner,
            } => {
                let dn = T::from_usize((*len).max(1)).unwrap();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..*outer {
                    for l in 0..*len {
                        for i in 0..*inner {
                            dx[(o * len + l) * inner + i] = g[o * inner + i] / dn;
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let s = g[0] / T::from_usize(n).unwrap();
                let mut dx: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * c + t] = dx[r * c + t] - s;
                }
                add_into(&mut grads[logits.0], &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                n_head,
                layout,
                probs,
            } => {
                let d = self.shape(*q)[1];
                let (dq, dk, dv) = attention::backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    d,
                    *n_head,
                    layout,
                );
                for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
                    if self.tracks(*var) {
                        add_into(&mut grads[var.0], &grad);
                    }
                }
            }
            Op::Sparse { x, map } => {
                add_into(&mut grads[x.0], &map.apply_adjoint(g));
            }
            Op::Ifft2Real { x, c, h, w } => {
                add_into(&mut grads[x.0], &fft::ifft2_real_adjoint(g, *c, *h, *w));
            }
            Op::MaskSelect { x, mask } => {
                let d: Vec<T> = g
                    .iter()
                    .zip(mask)
                    .map(|(&a, &m)| if m { T::zero() } else { a })
                    .collect();
                add_into(&mut grads[x.0], &d);
            }
        }
    }
}

/// Numerically stable softmax over the middle axis of an
/// `[outer, len, inner]` view.
pub fn softmax_values<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |a, l| a.max(x[at(l)]));
            let mut sum = T::zero();
            for l in 0..len {
                let e = (x[at(l)] - max).exp();
                out[at(l)] = e;
                sum = sum + e;
            }
            for l in 0..len {
                out[at(l)] = out[at(l)] / sum;
            }
        }
    }
    out
}
