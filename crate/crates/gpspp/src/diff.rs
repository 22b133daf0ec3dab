//! Minimal reverse-mode autodiff over dense `f64` tensors.
//!
//! A [`Tape`] records every op applied to [`Var`] handles; [`Tape::backward`]
//! replays the tape in reverse, accumulating exact gradients into every node
//! that (transitively) depends on a gradient-enabled leaf. The op set is
//! exactly what the model needs — elementwise arithmetic, matmuls, gathers
//! and scatters, layer normalisation, masked softmax, cross-entropy and a
//! pairwise-distance kernel — not a general-purpose engine.
//!
//! All buffers are double precision. In debug builds every op output is
//! checked for finiteness.

use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

mod check;
pub use check::{grad_check, GradCheckReport};

const LAYER_NORM_EPS: f64 = 1e-12;

/// Inverted-scaling dropout mask: each entry is zero with probability
/// `rate`, otherwise `1 / (1 - rate)`, so evaluation needs no rescaling.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut RngStream) -> Vec<f64> {
    debug_assert!((0.0..1.0).contains(&rate));
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect()
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Exp(usize),
    Abs(usize),
    ClampMin(usize, f64),
    Relu(usize),
    Gelu(usize),
    /// `(n,k) x (k,m) -> (n,m)`
    MatMul(usize, usize),
    /// `(n,k) x (m,k)^T -> (n,m)`
    MatMulNT(usize, usize),
    /// `(n,m) + (m,)` broadcast over rows.
    AddRow(usize, usize),
    /// Elementwise product with a constant buffer (dropout masks etc.).
    MulConst(usize, Vec<f64>),
    /// `out[r, c] = x[r, c] * k[r]` for a constant per-row coefficient.
    RowScale(usize, Vec<f64>),
    /// `(m,) -> (n,m)`
    BroadcastRow(usize, usize),
    /// `(n,) -> (n,m)`
    BroadcastCol(usize, usize),
    /// Concatenate 2-d inputs along the column axis.
    ConcatCols(Vec<usize>),
    /// Columns `[start, start+len)` of a 2-d input.
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    /// Rows `idx` of a `(V, d)` table.
    GatherRows(usize, Vec<usize>),
    /// `out[idx[i], :] += x[i, :]`.
    ScatterAddRows {
        x: usize,
        idx: Vec<usize>,
    },
    SumAll(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    /// Row softmax over entries whose mask bit is set; masked entries are
    /// exactly zero in the output. Fully masked rows come out all-zero.
    MaskedSoftmax {
        x: usize,
        mask: Vec<bool>,
    },
    /// Sum over `valid` rows of `logsumexp(row) - row[target]`.
    CrossEntropySum {
        logits: usize,
        targets: Vec<usize>,
        valid: Vec<bool>,
    },
    /// `(n,3) -> (n,n)` Euclidean distances. The gradient at coincident
    /// points (distance exactly zero) is defined as zero.
    PairwiseDist(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Reverse-mode tape.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        // leaves are caller data; everything computed must stay finite
        debug_assert!(
            matches!(op, Op::Leaf) || value.all_finite(),
            "non-finite op output"
        );
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// was accumulated.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0).and_then(|g| {
            g.as_ref().map(|buf| {
                Tensor::new(self.nodes[v.0].value.shape().to_vec(), buf.clone())
                    .expect("grad shape")
            })
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn want_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected 2-d, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a.0, b.0), t, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a.0, b.0), t, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a.0, b.0), t, ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Div(a.0, b.0), t, ng))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| -x).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("neg");
        let ng = self.needs(a);
        self.push(Op::Neg(a.0), t, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("scale");
        let ng = self.needs(a);
        self.push(Op::Scale(a.0, c), t, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("exp");
        let ng = self.needs(a);
        self.push(Op::Exp(a.0), t, ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.abs()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("abs");
        let ng = self.needs(a);
        self.push(Op::Abs(a.0), t, ng)
    }

    /// `max(x, c)` elementwise; gradient passes only where `x > c`.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x.max(c)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("clamp_min");
        let ng = self.needs(a);
        self.push(Op::ClampMin(a.0, c), t, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("relu");
        let ng = self.needs(a);
        self.push(Op::Relu(a.0), t, ng)
    }

    /// Tanh-form GELU; the backward pass differentiates the same expression.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("gelu");
        let ng = self.needs(a);
        self.push(Op::Gelu(a.0), t, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.want_2d("matmul", a)?;
        let (k2, m) = self.want_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("({n},{k}) x ({k2},{m})")));
        }
        let mut out = vec![0.0; n * m];
        mat_mul(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        let t = Tensor::new(vec![n, m], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a.0, b.0), t, ng))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.want_2d("matmul_nt", a)?;
        let (m, k2) = self.want_2d("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("({n},{k}) x ({m},{k2})ᵀ")));
        }
        let mut out = vec![0.0; n * m];
        mat_mul_nt(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        let t = Tensor::new(vec![n, m], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNT(a.0, b.0), t, ng))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.want_2d("add_row", a)?;
        if self.shape(bias) != [m] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} vs row width {m}", self.shape(bias)),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for r in 0..n {
            for c in 0..m {
                data[r * m + c] += b[c];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddRow(a.0, bias.0), t, ng))
    }

    /// Elementwise product with a constant buffer of identical length.
    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Result<Var> {
        if k.len() != self.value(a).len() {
            return Err(Error::shape(
                "mul_const",
                format!("{} vs {}", k.len(), self.value(a).len()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&k)
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a);
        Ok(self.push(Op::MulConst(a.0, k), t, ng))
    }

    /// Scale each row of a 2-d input by a constant coefficient.
    pub fn row_scale(&mut self, a: Var, k: Vec<f64>) -> Result<Var> {
        let (n, m) = self.want_2d("row_scale", a)?;
        if k.len() != n {
            return Err(Error::shape("row_scale", format!("{} rows vs {n}", k.len())));
        }
        let mut data = self.value(a).data().to_vec();
        for r in 0..n {
            for c in 0..m {
                data[r * m + c] *= k[r];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        let ng = self.needs(a);
        Ok(self.push(Op::RowScale(a.0, k), t, ng))
    }

    pub fn broadcast_row(&mut self, v: Var, n: usize) -> Result<Var> {
        let s = self.shape(v);
        if s.len() != 1 {
            return Err(Error::shape("broadcast_row", format!("expected 1-d, got {s:?}")));
        }
        let m = s[0];
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(self.value(v).data());
        }
        let t = Tensor::new(vec![n, m], data)?;
        let ng = self.needs(v);
        Ok(self.push(Op::BroadcastRow(v.0, n), t, ng))
    }

    pub fn broadcast_col(&mut self, v: Var, m: usize) -> Result<Var> {
        let s = self.shape(v);
        if s.len() != 1 {
            return Err(Error::shape("broadcast_col", format!("expected 1-d, got {s:?}")));
        }
        let n = s[0];
        let src = self.value(v).data().to_vec();
        let mut data = Vec::with_capacity(n * m);
        for &s in &src {
            data.extend(std::iter::repeat_n(s, m));
        }
        let t = Tensor::new(vec![n, m], data)?;
        let ng = self.needs(v);
        Ok(self.push(Op::BroadcastCol(v.0, m), t, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let (n, _) = self.want_2d("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, mp) = self.want_2d("concat_cols", p)?;
            if np != n {
                return Err(Error::shape("concat_cols", format!("{np} rows vs {n}")));
            }
            widths.push(mp);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let buf = self.value(p).data();
                data.extend_from_slice(&buf[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![n, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), t, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.want_2d("slice_cols", a)?;
        if start + len > m {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) out of width {m}", start + len),
            ));
        }
        let buf = self.value(a).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&buf[r * m + start..r * m + start + len]);
        }
        let t = Tensor::new(vec![n, len], data)?;
        let ng = self.needs(a);
        Ok(self.push(Op::SliceCols { x: a.0, start, len }, t, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a.0), t, ng))
    }

    /// Select rows of a `(V, d)` table; the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.want_2d("gather_rows", table)?;
        let buf = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::shape("gather_rows", format!("row {i} out of {v}")));
            }
            data.extend_from_slice(&buf[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.len(), d], data)?;
        let ng = self.needs(table);
        Ok(self.push(Op::GatherRows(table.0, idx.to_vec()), t, ng))
    }

    /// `out[idx[i], :] += x[i, :]`; duplicate indices accumulate.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (n, d) = self.want_2d("scatter_add_rows", x)?;
        if idx.len() != n {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} indices vs {n} rows", idx.len()),
            ));
        }
        let buf = self.value(x).data();
        let mut data = vec![0.0; rows * d];
        for (i, &t) in idx.iter().enumerate() {
            if t >= rows {
                return Err(Error::shape(
                    "scatter_add_rows",
                    format!("target {t} out of {rows}"),
                ));
            }
            for c in 0..d {
                data[t * d + c] += buf[i * d + c];
            }
        }
        let t = Tensor::new(vec![rows, d], data)?;
        let ng = self.needs(x);
        Ok(self.push(
            Op::ScatterAddRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            t,
            ng,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Op::SumAll(a.0), Tensor::scalar(s), ng)
    }

    /// Per-row layer normalisation with learnable affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, m) = self.want_2d("layer_norm", x)?;
        if self.shape(gamma) != [m] || self.shape(beta) != [m] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "affine {:?}/{:?} vs width {m}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xb = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            let row = &xb[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..m {
                data[r * m + c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            t,
            ng,
        ))
    }

    /// Softmax over the unmasked entries of each row. Masked entries are
    /// exactly zero in the output; a fully masked row is all-zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, m) = self.want_2d("masked_softmax", x)?;
        if mask.len() != n * m {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask {} vs {}", mask.len(), n * m),
            ));
        }
        let xb = self.value(x).data();
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            let base = r * m;
            let mut max = f64::NEG_INFINITY;
            for c in 0..m {
                if mask[base + c] {
                    max = max.max(xb[base + c]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut denom = 0.0;
            for c in 0..m {
                if mask[base + c] {
                    let e = (xb[base + c] - max).exp();
                    data[base + c] = e;
                    denom += e;
                }
            }
            for c in 0..m {
                data[base + c] /= denom;
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        let ng = self.needs(x);
        Ok(self.push(
            Op::MaskedSoftmax {
                x: x.0,
                mask: mask.to_vec(),
            },
            t,
            ng,
        ))
    }

    /// Summed categorical cross-entropy `logsumexp(row) - row[target]` over
    /// the rows with a set `valid` bit.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
        let (n, v) = self.want_2d("cross_entropy_sum", logits)?;
        if targets.len() != n || valid.len() != n {
            return Err(Error::shape(
                "cross_entropy_sum",
                format!("targets {} / valid {} vs {n} rows", targets.len(), valid.len()),
            ));
        }
        let xb = self.value(logits).data();
        let mut total = 0.0;
        for r in 0..n {
            if !valid[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(Error::shape(
                    "cross_entropy_sum",
                    format!("target {} out of vocab {v}", targets[r]),
                ));
            }
            let row = &xb[r * v..(r + 1) * v];
            total += log_sum_exp(row) - row[targets[r]];
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropySum {
                logits: logits.0,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
            },
            Tensor::scalar(total),
            ng,
        ))
    }

    /// All-pairs Euclidean distances of `(n, 3)` points.
    pub fn pairwise_dist(&mut self, pos: Var) -> Result<Var> {
        let (n, d) = self.want_2d("pairwise_dist", pos)?;
        if d != 3 {
            return Err(Error::shape("pairwise_dist", format!("expected (n,3), got (n,{d})")));
        }
        let p = self.value(pos).data();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = p[i * 3] - p[j * 3];
                let dy = p[i * 3 + 1] - p[j * 3 + 1];
                let dz = p[i * 3 + 2] - p[j * 3 + 2];
                let dist = (dx * dx + dy * dy + dz * dz).sqrt();
                data[i * n + j] = dist;
                data[j * n + i] = dist;
            }
        }
        let t = Tensor::new(vec![n, n], data)?;
        let ng = self.needs(pos);
        Ok(self.push(Op::PairwiseDist(pos.0), t, ng))
    }

    /// Reverse pass from a scalar output. Gradients accumulate for every
    /// node reachable from a gradient-enabled leaf.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(out)),
            ));
        }
        if !self.needs(out) {
            return Err(Error::Numeric(
                "backward target does not depend on any gradient-enabled leaf".into(),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].take().expect("grad present");
            self.propagate(i, &g);
            // keep the grad available for inspection
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, node: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[node].needs_grad {
            return;
        }
        let len = self.nodes[node].value.len();
        let slot = self.grads[node].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Borrow values we need before taking &mut self for accumulation.
        macro_rules! val {
            ($id:expr) => {
                self.nodes[$id].value.data()
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.acc(a, |d| add_into(d, g, 1.0));
                self.acc(b, |d| add_into(d, g, 1.0));
            }
            &Op::Sub(a, b) => {
                self.acc(a, |d| add_into(d, g, 1.0));
                self.acc(b, |d| add_into(d, g, -1.0));
            }
            &Op::Mul(a, b) => {
                let va = val!(a).to_vec();
                let vb = val!(b).to_vec();
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                self.acc(b, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            &Op::Div(a, b) => {
                let va = val!(a).to_vec();
                let vb = val!(b).to_vec();
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / vb[k];
                    }
                });
                self.acc(b, |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            &Op::Neg(a) => self.acc(a, |d| add_into(d, g, -1.0)),
            &Op::Scale(a, c) => self.acc(a, |d| add_into(d, g, c)),
            &Op::Exp(a) => {
                let out = val!(i).to_vec();
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * out[k];
                    }
                });
            }
            &Op::Abs(a) => {
                let va = val!(a).to_vec();
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sign(va[k]);
                    }
                });
            }
            &Op::ClampMin(a, c) => {
                let va = val!(a).to_vec();
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        if va[k] > c {
                            d[k] += g[k];
                        }
                    }
                });
            }
            &Op::Relu(a) => {
                let va = val!(a).to_vec();
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        if va[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            &Op::Gelu(a) => {
                let va = val!(a).to_vec();
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * gelu_bwd(va[k]);
                    }
                });
            }
            &Op::MatMul(a, b) => {
                let (n, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let m = self.nodes[b].value.cols();
                let va = val!(a).to_vec();
                let vb = val!(b).to_vec();
                // dA += g · Bᵀ
                self.acc(a, |d| {
                    let mut tmp = vec![0.0; n * k];
                    mat_mul_nt(g, &vb, &mut tmp, n, m, k);
                    add_into(d, &tmp, 1.0);
                });
                // dB += Aᵀ · g
                self.acc(b, |d| {
                    let mut tmp = vec![0.0; k * m];
                    mat_mul_tn(&va, g, &mut tmp, n, k, m);
                    add_into(d, &tmp, 1.0);
                });
            }
            &Op::MatMulNT(a, b) => {
                let (n, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let m = self.nodes[b].value.rows();
                let va = val!(a).to_vec();
                let vb = val!(b).to_vec();
                // C = A·Bᵀ: dA += g · B, dB += gᵀ · A
                self.acc(a, |d| {
                    let mut tmp = vec![0.0; n * k];
                    mat_mul(g, &vb, &mut tmp, n, m, k);
                    add_into(d, &tmp, 1.0);
                });
                self.acc(b, |d| {
                    let mut tmp = vec![0.0; m * k];
                    mat_mul_tn(g, &va, &mut tmp, n, m, k);
                    add_into(d, &tmp, 1.0);
                });
            }
            &Op::AddRow(a, bias) => {
                let m = self.nodes[bias].value.len();
                self.acc(a, |d| add_into(d, g, 1.0));
                self.acc(bias, |d| {
                    for (k, &gv) in g.iter().enumerate() {
                        d[k % m] += gv;
                    }
                });
            }
            Op::MulConst(a, k) => {
                let a = *a;
                let k = k.clone();
                self.acc(a, |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * k[j];
                    }
                });
            }
            Op::RowScale(a, k) => {
                let a = *a;
                let k = k.clone();
                let m = self.nodes[a].value.cols();
                self.acc(a, |d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[j] += gv * k[j / m];
                    }
                });
            }
            &Op::BroadcastRow(v, n) => {
                let m = self.nodes[v].value.len();
                self.acc(v, |d| {
                    for r in 0..n {
                        for c in 0..m {
                            d[c] += g[r * m + c];
                        }
                    }
                });
            }
            &Op::BroadcastCol(v, m) => {
                let n = self.nodes[v].value.len();
                self.acc(v, |d| {
                    for r in 0..n {
                        for c in 0..m {
                            d[r] += g[r * m + c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let n = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p].value.cols();
                    let off = offset;
                    self.acc(p, |d| {
                        for r in 0..n {
                            for c in 0..w {
                                d[r * w + c] += g[r * total + off + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            &Op::SliceCols { x, start, len } => {
                let n = self.nodes[x].value.rows();
                let m = self.nodes[x].value.cols();
                self.acc(x, |d| {
                    for r in 0..n {
                        for c in 0..len {
                            d[r * m + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            &Op::Reshape(a) => self.acc(a, |d| add_into(d, g, 1.0)),
            Op::GatherRows(table, idx) => {
                let table = *table;
                let idx = idx.clone();
                let d_width = self.nodes[table].value.cols();
                self.acc(table, |d| {
                    for (row, &t) in idx.iter().enumerate() {
                        for c in 0..d_width {
                            d[t * d_width + c] += g[row * d_width + c];
                        }
                    }
                });
            }
            Op::ScatterAddRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let d_width = self.nodes[x].value.cols();
                self.acc(x, |d| {
                    for (row, &t) in idx.iter().enumerate() {
                        for c in 0..d_width {
                            d[row * d_width + c] += g[t * d_width + c];
                        }
                    }
                });
            }
            &Op::SumAll(a) => {
                let gv = g[0];
                self.acc(a, |d| {
                    for v in d.iter_mut() {
                        *v += gv;
                    }
                });
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let (n, m) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                let xv = val!(x).to_vec();
                let gv = val!(gamma).to_vec();
                // Recompute per-row statistics.
                let mut xhat = vec![0.0; n * m];
                let mut rstd = vec![0.0; n];
                for r in 0..n {
                    let row = &xv[r * m..(r + 1) * m];
                    let mean = row.iter().sum::<f64>() / m as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    rstd[r] = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for c in 0..m {
                        xhat[r * m + c] = (row[c] - mean) * rstd[r];
                    }
                }
                self.acc(beta, |d| {
                    for r in 0..n {
                        for c in 0..m {
                            d[c] += g[r * m + c];
                        }
                    }
                });
                {
                    let xh = &xhat;
                    self.acc(gamma, |d| {
                        for r in 0..n {
                            for c in 0..m {
                                d[c] += g[r * m + c] * xh[r * m + c];
                            }
                        }
                    });
                }
                self.acc(x, |d| {
                    for r in 0..n {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for c in 0..m {
                            let dy = g[r * m + c] * gv[c];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[r * m + c];
                        }
                        let inv_m = 1.0 / m as f64;
                        for c in 0..m {
                            let dy = g[r * m + c] * gv[c];
                            d[r * m + c] += rstd[r]
                                * (dy - sum_dy * inv_m - xhat[r * m + c] * sum_dy_xhat * inv_m);
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                let (n, m) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                let s = val!(i).to_vec();
                self.acc(x, |d| {
                    for r in 0..n {
                        let base = r * m;
                        let mut dot = 0.0;
                        for c in 0..m {
                            if mask[base + c] {
                                dot += g[base + c] * s[base + c];
                            }
                        }
                        for c in 0..m {
                            if mask[base + c] {
                                d[base + c] += s[base + c] * (g[base + c] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropySum {
                logits,
                targets,
                valid,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let valid = valid.clone();
                let (n, v) = (self.nodes[logits].value.rows(), self.nodes[logits].value.cols());
                let xv = val!(logits).to_vec();
                let gv = g[0];
                self.acc(logits, |d| {
                    for r in 0..n {
                        if !valid[r] {
                            continue;
                        }
                        let row = &xv[r * v..(r + 1) * v];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for c in 0..v {
                            let p = (row[c] - max).exp() / denom;
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            d[r * v + c] += gv * (p - onehot);
                        }
                    }
                });
            }
            &Op::PairwiseDist(pos) => {
                let n = self.nodes[i].value.rows();
                let p = val!(pos).to_vec();
                let dist = val!(i).to_vec();
                self.acc(pos, |d| {
                    for a in 0..n {
                        for b in 0..n {
                            if a == b {
                                continue;
                            }
                            let dv = dist[a * n + b];
                            if dv == 0.0 {
                                continue; // coincident points: zero by convention
                            }
                            let gd = g[a * n + b];
                            if gd == 0.0 {
                                continue;
                            }
                            for c in 0..3 {
                                let diff = (p[a * 3 + c] - p[b * 3 + c]) / dv;
                                d[a * 3 + c] += gd * diff;
                                d[b * 3 + c] -= gd * diff;
                            }
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `c = a (n,k) · b (k,m)`; `c` must be zeroed.
fn mat_mul(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let crow = &mut c[i * m..(i + 1) * m];
            for j in 0..m {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// `c = a (n,k) · b (m,k)ᵀ`; `c` must be zeroed.
fn mat_mul_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * m + j] += s;
        }
    }
}

/// `c = a (n,k)ᵀ · b (n,m)` -> `(k,m)`; `c` must be zeroed.
fn mat_mul_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * m..(i + 1) * m];
            let crow = &mut c[p * m..(p + 1) * m];
            for j in 0..m {
                crow[j] += av * brow[j];
            }
        }
    }
}
