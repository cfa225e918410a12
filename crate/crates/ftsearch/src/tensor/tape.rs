//! Wengert tape: records primitive ops during the forward pass, replays them
//! in reverse for gradients.
//!
//! Node values live in an arena indexed by [`Var`]. Gradients accumulate in a
//! parallel array during [`Tape::backward`]. A tape serves exactly one
//! forward/backward cycle; a second backward without a fresh forward is an
//! error.

use super::{Rng, Tensor};
use crate::error::{FtError, Result};
use rand::Rng as _;

/// Handle to a value on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    AddBias { a: usize, b: usize },
    AddScalar { a: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulScalar { a: usize, s: f64 },
    /// Multiply by a scalar tensor (differentiable on both sides).
    Scale { a: usize, s: usize },
    /// Row-broadcast multiply: each row of `a` scaled elementwise by `v`.
    MulCols { a: usize, v: usize },
    /// Column-broadcast multiply: row i of `a` scaled by `s[i]`.
    ScaleRows { a: usize, s: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Relu { a: usize },
    LeakyRelu { a: usize, slope: f64 },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Softplus { a: usize },
    /// Softmax over the last axis (rows of a 2-D tensor, or a whole 1-D one).
    Softmax { a: usize, cols: usize },
    /// Log-sum-exp over the last axis; output has one entry per row.
    Logsumexp { a: usize, cols: usize },
    Sum { a: usize },
    Mean { a: usize },
    /// Row-wise sum of a 2-D tensor -> [rows, 1].
    SumRows { a: usize, cols: usize },
    MaxElem { a: usize, b: usize },
    ConcatCols { parts: Vec<usize>, widths: Vec<usize> },
    ConcatRows { a: usize, b: usize },
    SliceCols { a: usize, cols: usize, start: usize, end: usize },
    Reshape { a: usize },
    Dropout { a: usize, mask: Vec<f64> },
    GatherRows { a: usize, idx: Vec<usize>, cols: usize },
    SegmentSum { a: usize, seg: Vec<usize>, cols: usize },
    SegmentMax { a: usize, cols: usize, argmax: Vec<Option<usize>> },
    SegmentSoftmax { a: usize, seg: Vec<usize>, cols: usize },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    /// True when a gradient must flow to or through this node.
    needs_grad: bool,
    op: Op,
}

/// Reverse-mode AD tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            data,
            shape,
            needs_grad,
            op,
        });
        self.grads.push(None);
        Var(id)
    }

    /// Register a leaf value. `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Var {
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Var {
        self.leaf(t.data.clone(), t.shape.clone(), t.requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(vec![v], vec![1])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Copy a value off the tape.
    pub fn detach(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gradient accumulated for `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(FtError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(FtError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise binary -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, self.shape(a).to_vec(), ng, Op::Add { a: a.0, b: b.0 }))
    }

    /// `a` is [r, c], `b` is a length-c bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(a, "add_bias")?;
        if self.numel(b) != c {
            return Err(FtError::Shape {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.value(b).to_vec();
        let data: Vec<f64> = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, self.shape(a).to_vec(), ng, Op::AddBias { a: a.0, b: b.0 }))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).iter().map(|x| x + s).collect();
        let ng = self.needs(a);
        self.push(data, self.shape(a).to_vec(), ng, Op::AddScalar { a: a.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, self.shape(a).to_vec(), ng, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, self.shape(a).to_vec(), ng, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.needs(a);
        self.push(data, self.shape(a).to_vec(), ng, Op::MulScalar { a: a.0, s })
    }

    /// Multiply by a scalar tensor; gradient flows to both operands.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.numel(s) != 1 {
            return Err(FtError::Shape {
                op: "scale",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s)[0];
        let data = self.value(a).iter().map(|x| x * sv).collect();
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(data, self.shape(a).to_vec(), ng, Op::Scale { a: a.0, s: s.0 }))
    }

    /// Row-broadcast multiply: out[i,j] = a[i,j] * v[j].
    pub fn mul_cols(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(a, "mul_cols")?;
        if self.numel(v) != c {
            return Err(FtError::Shape {
                op: "mul_cols",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let vv = self.value(v).to_vec();
        let data: Vec<f64> = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(&vv).map(|(x, y)| x * y).collect::<Vec<_>>())
            .collect();
        let ng = self.needs(a) || self.needs(v);
        Ok(self.push(data, self.shape(a).to_vec(), ng, Op::MulCols { a: a.0, v: v.0 }))
    }

    /// Column-broadcast multiply: out[i,j] = a[i,j] * s[i]. `s` is [r] or [r,1].
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "scale_rows")?;
        if self.numel(s) != r {
            return Err(FtError::Shape {
                op: "scale_rows",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).to_vec();
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in self.value(a).chunks(c).enumerate() {
            data.extend(row.iter().map(|x| x * sv[i]));
        }
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(data, self.shape(a).to_vec(), ng, Op::ScaleRows { a: a.0, s: s.0 }))
    }

    // ---- matmul -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a, "matmul")?;
        let (k2, n) = self.rows_cols(b, "matmul")?;
        if k != k2 {
            return Err(FtError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &ail) in arow.iter().enumerate() {
                if ail == 0.0 {
                    continue;
                }
                let brow = &bv[l * n..(l + 1) * n];
                for (o, &blj) in orow.iter_mut().zip(brow) {
                    *o += ail * blj;
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], ng, Op::Matmul { a: a.0, b: b.0, m, k, n }))
    }

    // ---- elementwise unary --------------------------------------------------

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(data, self.shape(a).to_vec(), ng, Op::Relu { a: a.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let data = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let ng = self.needs(a);
        self.push(data, self.shape(a).to_vec(), ng, Op::LeakyRelu { a: a.0, slope })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.needs(a);
        self.push(data, self.shape(a).to_vec(), ng, Op::Sigmoid { a: a.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| x.tanh()).collect();
        let ng = self.needs(a);
        self.push(data, self.shape(a).to_vec(), ng, Op::Tanh { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| x.exp()).collect();
        let ng = self.needs(a);
        self.push(data, self.shape(a).to_vec(), ng, Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(FtError::Domain {
                op: "log",
                msg: format!("input {bad} outside (0, inf)"),
            });
        }
        let data = self.value(a).iter().map(|x| x.ln()).collect();
        let ng = self.needs(a);
        Ok(self.push(data, self.shape(a).to_vec(), ng, Op::Log { a: a.0 }))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| softplus(x)).collect();
        let ng = self.needs(a);
        self.push(data, self.shape(a).to_vec(), ng, Op::Softplus { a: a.0 })
    }

    // ---- softmax family -----------------------------------------------------

    /// Softmax over the last axis. Rows sum to 1.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "softmax")?;
        let mut data = Vec::with_capacity(r * c);
        for row in self.value(a).chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / s));
        }
        let ng = self.needs(a);
        Ok(self.push(data, self.shape(a).to_vec(), ng, Op::Softmax { a: a.0, cols: c }))
    }

    /// Log-sum-exp over the last axis -> [rows, 1] (or [1] for 1-D input).
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "logsumexp")?;
        let mut data = Vec::with_capacity(r);
        for row in self.value(a).chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            data.push(m + s.ln());
        }
        let shape = if self.shape(a).len() == 1 { vec![1] } else { vec![r, 1] };
        let ng = self.needs(a);
        Ok(self.push(data, shape, ng, Op::Logsumexp { a: a.0, cols: c }))
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![s], vec![1], ng, Op::Sum { a: a.0 })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let n = self.numel(a) as f64;
        let ng = self.needs(a);
        self.push(vec![s / n], vec![1], ng, Op::Mean { a: a.0 })
    }

    /// Row-wise sum -> [rows, 1].
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "sum_rows")?;
        let data: Vec<f64> = self.value(a).chunks(c).map(|row| row.iter().sum()).collect();
        let ng = self.needs(a);
        Ok(self.push(data, vec![r, 1], ng, Op::SumRows { a: a.0, cols: c }))
    }

    /// Elementwise maximum; ties route the gradient to the first operand.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "max_elem")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| if x >= y { x } else { y });
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, self.shape(a).to_vec(), ng, Op::MaxElem { a: a.0, b: b.0 }))
    }

    // ---- structure ------------------------------------------------------------

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(FtError::Autodiff("concat_cols of zero tensors".into()));
        }
        let (r, _) = self.rows_cols(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.rows_cols(p, "concat_cols")?;
            if rp != r {
                return Err(FtError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            data,
            vec![r, total],
            ng,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
                widths,
            },
        ))
    }

    /// Stack two 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.rows_cols(a, "concat_rows")?;
        let (rb, cb) = self.rows_cols(b, "concat_rows")?;
        if ca != cb {
            return Err(FtError::Shape {
                op: "concat_rows",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = self.value(a).to_vec();
        data.extend_from_slice(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![ra + rb, ca], ng, Op::ConcatRows { a: a.0, b: b.0 }))
    }

    /// Columns [start, end) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "slice_cols")?;
        if start >= end || end > c {
            return Err(FtError::Shape {
                op: "slice_cols",
                lhs: vec![start, end],
                rhs: self.shape(a).to_vec(),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for row in self.value(a).chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let ng = self.needs(a);
        Ok(self.push(data, vec![r, w], ng, Op::SliceCols { a: a.0, cols: c, start, end }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(a) {
            return Err(FtError::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(data, shape, ng, Op::Reshape { a: a.0 }))
    }

    /// Inverted-scaling dropout. Keep probability is `1 - rate`; kept entries
    /// are scaled by `1/(1-rate)` so the expected output equals the input.
    /// Call only at train time; evaluation simply skips the op.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(FtError::Domain {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.numel(a))
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = zip_map(self.value(a), &mask, |x, m| x * m);
        let ng = self.needs(a);
        Ok(self.push(data, self.shape(a).to_vec(), ng, Op::Dropout { a: a.0, mask }))
    }

    /// Select rows of a 2-D tensor by index (used for embedding lookup,
    /// per-edge gathers and per-node broadcast of per-graph rows).
    /// Backward scatter-adds into the source rows.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(a, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(FtError::Domain {
                op: "gather_rows",
                msg: format!("index {bad} out of range for {r} rows"),
            });
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let ng = self.needs(a);
        Ok(self.push(
            data,
            vec![idx.len(), c],
            ng,
            Op::GatherRows { a: a.0, idx: idx.to_vec(), cols: c },
        ))
    }

    fn check_segments(&self, a: Var, seg: &[usize], num_segments: usize, op: &'static str) -> Result<usize> {
        let (r, c) = self.rows_cols(a, op)?;
        if seg.len() != r {
            return Err(FtError::Shape {
                op,
                lhs: vec![r],
                rhs: vec![seg.len()],
            });
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= num_segments) {
            return Err(FtError::Domain {
                op,
                msg: format!("segment id {bad} >= {num_segments}"),
            });
        }
        Ok(c)
    }

    /// Sum rows into `num_segments` buckets. Empty buckets are zero.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], num_segments: usize) -> Result<Var> {
        let c = self.check_segments(a, seg, num_segments, "segment_sum")?;
        let av = self.value(a);
        let mut data = vec![0.0; num_segments * c];
        for (i, &s) in seg.iter().enumerate() {
            let row = &av[i * c..(i + 1) * c];
            let out = &mut data[s * c..(s + 1) * c];
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            data,
            vec![num_segments, c],
            ng,
            Op::SegmentSum { a: a.0, seg: seg.to_vec(), cols: c },
        ))
    }

    /// Per-column max within each bucket; gradient goes to the first argmax
    /// row. Empty buckets are zero and receive no gradient.
    pub fn segment_max(&mut self, a: Var, seg: &[usize], num_segments: usize) -> Result<Var> {
        let c = self.check_segments(a, seg, num_segments, "segment_max")?;
        let av = self.value(a);
        let mut data = vec![f64::NEG_INFINITY; num_segments * c];
        let mut argmax: Vec<Option<usize>> = vec![None; num_segments * c];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let x = av[i * c + j];
                if x > data[s * c + j] {
                    data[s * c + j] = x;
                    argmax[s * c + j] = Some(i);
                }
            }
        }
        for (d, am) in data.iter_mut().zip(&argmax) {
            if am.is_none() {
                *d = 0.0;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            data,
            vec![num_segments, c],
            ng,
            Op::SegmentMax { a: a.0, cols: c, argmax },
        ))
    }

    /// Softmax within each bucket, per column. Rows of a bucket sum to 1.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], num_segments: usize) -> Result<Var> {
        let c = self.check_segments(a, seg, num_segments, "segment_softmax")?;
        let av = self.value(a).to_vec();
        let mut maxes = vec![f64::NEG_INFINITY; num_segments * c];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                maxes[s * c + j] = maxes[s * c + j].max(av[i * c + j]);
            }
        }
        let mut sums = vec![0.0; num_segments * c];
        let mut data = vec![0.0; av.len()];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let e = (av[i * c + j] - maxes[s * c + j]).exp();
                data[i * c + j] = e;
                sums[s * c + j] += e;
            }
        }
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                data[i * c + j] /= sums[s * c + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            data,
            self.shape(a).to_vec(),
            ng,
            Op::SegmentSoftmax { a: a.0, seg: seg.to_vec(), cols: c },
        ))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse replay from a scalar loss. Populates gradients of every
    /// requires-grad ancestor. A tape can be consumed only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(FtError::Autodiff(
                "backward called twice on the same tape".into(),
            ));
        }
        if self.numel(loss) != 1 {
            return Err(FtError::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_op(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, node: usize, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[node].needs_grad {
            return;
        }
        let n = self.nodes[node].data.len();
        let slot = self.grads[node].get_or_insert_with(|| vec![0.0; n]);
        add(slot);
    }

    fn backward_op(&mut self, i: usize, g: &[f64]) {
        // Ops are matched by cloning the (cheap) descriptor; bulk data stays put.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accum(a, |s| axpy(s, g, 1.0));
                self.accum(b, |s| axpy(s, g, 1.0));
            }
            Op::AddBias { a, b } => {
                self.accum(a, |s| axpy(s, g, 1.0));
                let c = self.nodes[b].data.len();
                self.accum(b, |s| {
                    for row in g.chunks(c) {
                        for (sj, xj) in s.iter_mut().zip(row) {
                            *sj += xj;
                        }
                    }
                });
            }
            Op::AddScalar { a } => self.accum(a, |s| axpy(s, g, 1.0)),
            Op::Sub { a, b } => {
                self.accum(a, |s| axpy(s, g, 1.0));
                self.accum(b, |s| axpy(s, g, -1.0));
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a].data.clone();
                let bv = self.nodes[b].data.clone();
                self.accum(a, |s| {
                    for ((sj, xj), yj) in s.iter_mut().zip(g).zip(&bv) {
                        *sj += xj * yj;
                    }
                });
                self.accum(b, |s| {
                    for ((sj, xj), yj) in s.iter_mut().zip(g).zip(&av) {
                        *sj += xj * yj;
                    }
                });
            }
            Op::MulScalar { a, s: k } => self.accum(a, |s| axpy(s, g, k)),
            Op::Scale { a, s } => {
                let sv = self.nodes[s].data[0];
                let av = self.nodes[a].data.clone();
                self.accum(a, |sl| axpy(sl, g, sv));
                self.accum(s, |sl| {
                    sl[0] += g.iter().zip(&av).map(|(x, y)| x * y).sum::<f64>();
                });
            }
            Op::MulCols { a, v } => {
                let c = self.nodes[v].data.len();
                let vv = self.nodes[v].data.clone();
                let av = self.nodes[a].data.clone();
                self.accum(a, |s| {
                    for (srow, grow) in s.chunks_mut(c).zip(g.chunks(c)) {
                        for ((sj, xj), yj) in srow.iter_mut().zip(grow).zip(&vv) {
                            *sj += xj * yj;
                        }
                    }
                });
                self.accum(v, |s| {
                    for (arow, grow) in av.chunks(c).zip(g.chunks(c)) {
                        for ((sj, xj), yj) in s.iter_mut().zip(grow).zip(arow) {
                            *sj += xj * yj;
                        }
                    }
                });
            }
            Op::ScaleRows { a, s } => {
                let r = self.nodes[s].data.len();
                let c = self.nodes[a].data.len() / r;
                let sv = self.nodes[s].data.clone();
                let av = self.nodes[a].data.clone();
                self.accum(a, |sl| {
                    for (i, (slrow, grow)) in sl.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        for (sj, xj) in slrow.iter_mut().zip(grow) {
                            *sj += xj * sv[i];
                        }
                    }
                });
                self.accum(s, |sl| {
                    for (i, (arow, grow)) in av.chunks(c).zip(g.chunks(c)).enumerate() {
                        sl[i] += arow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                let av = self.nodes[a].data.clone();
                let bv = self.nodes[b].data.clone();
                self.accum(a, |s| {
                    // dA[i,l] = sum_j g[i,j] * B[l,j]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let srow = &mut s[i * k..(i + 1) * k];
                        for (l, sl) in srow.iter_mut().enumerate() {
                            let brow = &bv[l * n..(l + 1) * n];
                            *sl += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.accum(b, |s| {
                    // dB[l,j] = sum_i A[i,l] * g[i,j]
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        for (l, &ail) in arow.iter().enumerate() {
                            if ail == 0.0 {
                                continue;
                            }
                            let srow = &mut s[l * n..(l + 1) * n];
                            for (sj, xj) in srow.iter_mut().zip(grow) {
                                *sj += ail * xj;
                            }
                        }
                    }
                });
            }
            Op::Relu { a } => {
                let av = self.nodes[a].data.clone();
                self.accum(a, |s| {
                    for ((sj, xj), aj) in s.iter_mut().zip(g).zip(&av) {
                        if *aj > 0.0 {
                            *sj += xj;
                        }
                    }
                });
            }
            Op::LeakyRelu { a, slope } => {
                let av = self.nodes[a].data.clone();
                self.accum(a, |s| {
                    for ((sj, xj), aj) in s.iter_mut().zip(g).zip(&av) {
                        *sj += if *aj > 0.0 { *xj } else { slope * xj };
                    }
                });
            }
            Op::Sigmoid { a } => {
                let yv = self.nodes[i].data.clone();
                self.accum(a, |s| {
                    for ((sj, xj), yj) in s.iter_mut().zip(g).zip(&yv) {
                        *sj += xj * yj * (1.0 - yj);
                    }
                });
            }
            Op::Tanh { a } => {
                let yv = self.nodes[i].data.clone();
                self.accum(a, |s| {
                    for ((sj, xj), yj) in s.iter_mut().zip(g).zip(&yv) {
                        *sj += xj * (1.0 - yj * yj);
                    }
                });
            }
            Op::Exp { a } => {
                let yv = self.nodes[i].data.clone();
                self.accum(a, |s| {
                    for ((sj, xj), yj) in s.iter_mut().zip(g).zip(&yv) {
                        *sj += xj * yj;
                    }
                });
            }
            Op::Log { a } => {
                let av = self.nodes[a].data.clone();
                self.accum(a, |s| {
                    for ((sj, xj), aj) in s.iter_mut().zip(g).zip(&av) {
                        *sj += xj / aj;
                    }
                });
            }
            Op::Softplus { a } => {
                let av = self.nodes[a].data.clone();
                self.accum(a, |s| {
                    for ((sj, xj), &aj) in s.iter_mut().zip(g).zip(&av) {
                        *sj += xj * sigmoid(aj);
                    }
                });
            }
            Op::Softmax { a, cols } => {
                let yv = self.nodes[i].data.clone();
                self.accum(a, |s| {
                    for ((srow, grow), yrow) in
                        s.chunks_mut(cols).zip(g.chunks(cols)).zip(yv.chunks(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((sj, xj), yj) in srow.iter_mut().zip(grow).zip(yrow) {
                            *sj += yj * (xj - dot);
                        }
                    }
                });
            }
            Op::Logsumexp { a, cols } => {
                let av = self.nodes[a].data.clone();
                let lv = self.nodes[i].data.clone();
                self.accum(a, |s| {
                    for (r, (srow, arow)) in s.chunks_mut(cols).zip(av.chunks(cols)).enumerate() {
                        for (sj, aj) in srow.iter_mut().zip(arow) {
                            *sj += g[r] * (aj - lv[r]).exp();
                        }
                    }
                });
            }
            Op::Sum { a } => self.accum(a, |s| {
                for sj in s.iter_mut() {
                    *sj += g[0];
                }
            }),
            Op::Mean { a } => {
                let n = self.nodes[a].data.len() as f64;
                self.accum(a, |s| {
                    for sj in s.iter_mut() {
                        *sj += g[0] / n;
                    }
                });
            }
            Op::SumRows { a, cols } => {
                self.accum(a, |s| {
                    for (r, srow) in s.chunks_mut(cols).enumerate() {
                        for sj in srow.iter_mut() {
                            *sj += g[r];
                        }
                    }
                });
            }
            Op::MaxElem { a, b } => {
                let av = self.nodes[a].data.clone();
                let bv = self.nodes[b].data.clone();
                self.accum(a, |s| {
                    for (j, sj) in s.iter_mut().enumerate() {
                        if av[j] >= bv[j] {
                            *sj += g[j];
                        }
                    }
                });
                self.accum(b, |s| {
                    for (j, sj) in s.iter_mut().enumerate() {
                        if av[j] < bv[j] {
                            *sj += g[j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts, widths } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let start = off;
                    self.accum(p, |s| {
                        let rows = s.len() / w;
                        for r in 0..rows {
                            let grow = &g[r * total + start..r * total + start + w];
                            let srow = &mut s[r * w..(r + 1) * w];
                            for (sj, xj) in srow.iter_mut().zip(grow) {
                                *sj += xj;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.nodes[a].data.len();
                self.accum(a, |s| axpy(s, &g[..na], 1.0));
                self.accum(b, |s| axpy(s, &g[na..], 1.0));
            }
            Op::SliceCols { a, cols, start, end } => {
                let w = end - start;
                self.accum(a, |s| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        let srow = &mut s[r * cols + start..r * cols + end];
                        for (sj, xj) in srow.iter_mut().zip(grow) {
                            *sj += xj;
                        }
                    }
                });
            }
            Op::Reshape { a } => self.accum(a, |s| axpy(s, g, 1.0)),
            Op::Dropout { a, mask } => {
                self.accum(a, |s| {
                    for ((sj, xj), mj) in s.iter_mut().zip(g).zip(&mask) {
                        *sj += xj * mj;
                    }
                });
            }
            Op::GatherRows { a, idx, cols } => {
                self.accum(a, |s| {
                    for (r, &src) in idx.iter().enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let srow = &mut s[src * cols..(src + 1) * cols];
                        for (sj, xj) in srow.iter_mut().zip(grow) {
                            *sj += xj;
                        }
                    }
                });
            }
            Op::SegmentSum { a, seg, cols } => {
                self.accum(a, |s| {
                    for (r, &sg) in seg.iter().enumerate() {
                        let grow = &g[sg * cols..(sg + 1) * cols];
                        let srow = &mut s[r * cols..(r + 1) * cols];
                        for (sj, xj) in srow.iter_mut().zip(grow) {
                            *sj += xj;
                        }
                    }
                });
            }
            Op::SegmentMax { a, cols, argmax, .. } => {
                self.accum(a, |s| {
                    for (slot, am) in argmax.iter().enumerate() {
                        if let Some(row) = am {
                            let j = slot % cols;
                            s[row * cols + j] += g[slot];
                        }
                    }
                });
            }
            Op::SegmentSoftmax { a, seg, cols } => {
                let yv = self.nodes[i].data.clone();
                let num_segments = seg.iter().max().map_or(0, |m| m + 1);
                // dot[s,j] = sum over rows in segment s of g*y
                let mut dot = vec![0.0; num_segments * cols];
                for (r, &sg) in seg.iter().enumerate() {
                    for j in 0..cols {
                        dot[sg * cols + j] += g[r * cols + j] * yv[r * cols + j];
                    }
                }
                self.accum(a, |s| {
                    for (r, &sg) in seg.iter().enumerate() {
                        for j in 0..cols {
                            let y = yv[r * cols + j];
                            s[r * cols + j] += y * (g[r * cols + j] - dot[sg * cols + j]);
                        }
                    }
                });
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(acc: &mut [f64], x: &[f64], k: f64) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += k * b;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_from_seed;

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], false);
        let i = t.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false);
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0, 0.0, 0.0], vec![3], false);
        let y = t.softmax(a).unwrap();
        for &v in t.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn segment_sum_definition() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![4, 1], false);
        let y = t.segment_sum(a, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(t.value(y), &[3.0, 7.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![3], true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let mut t = Tape::new();
        let w = t.leaf(vec![0.0], vec![1], true);
        let y = t.sigmoid(w);
        let c = t.scalar(1.0);
        let loss = t.mul(y, c).unwrap();
        t.backward(loss).unwrap();
        assert!((t.grad(w).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar_and_single_use() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true);
        assert!(t.backward(x).is_err());

        let mut t = Tape::new();
        let x = t.leaf(vec![1.0], vec![1], true);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn off_path_tensors_get_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0], vec![1], true);
        let unused = t.leaf(vec![5.0], vec![1], true);
        let loss = t.mul(x, x).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(unused).is_none());
        assert!(t.grad(x).is_some());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0; 6], vec![2, 3], false);
        let b = t.leaf(vec![0.0; 6], vec![3, 2], false);
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, -1.0], vec![2], false);
        assert!(t.log(a).is_err());
    }

    #[test]
    fn dropout_mc_mean_matches_input() {
        // Inverted scaling: E[dropout(x)] = x. Check the MC mean over 1e5
        // draws stays within 3 standard errors.
        let mut rng = rng_from_seed(11);
        let x = 2.0;
        let rate = 0.5;
        let keep = 1.0 - rate;
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let mut t = Tape::new();
            let a = t.leaf(vec![x], vec![1], false);
            let y = t.dropout(a, rate, &mut rng).unwrap();
            sum += t.value(y)[0];
        }
        let mean = sum / n as f64;
        let se = x * ((1.0 - keep) / keep / n as f64).sqrt();
        assert!((mean - x).abs() < 3.0 * se, "mean {mean} vs {x} (se {se})");
    }

    #[test]
    fn chain_rule_matches_fused_expression() {
        // f(g(x)) with g = 2x, f = sum(y*y), against the fused 4*sum(x*x).
        let xs = vec![0.5, -1.5, 2.5];
        let mut t1 = Tape::new();
        let x = t1.leaf(xs.clone(), vec![3], true);
        let g = t1.mul_scalar(x, 2.0);
        let sq = t1.mul(g, g).unwrap();
        let loss = t1.sum(sq);
        t1.backward(loss).unwrap();

        let mut t2 = Tape::new();
        let x2 = t2.leaf(xs, vec![3], true);
        let sq2 = t2.mul(x2, x2).unwrap();
        let s2 = t2.sum(sq2);
        let loss2 = t2.mul_scalar(s2, 4.0);
        t2.backward(loss2).unwrap();

        for (a, b) in t1.grad(x).unwrap().iter().zip(t2.grad(x2).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 5.0, -2.0, 0.3, 0.4], vec![5, 1], false);
        let seg = [0usize, 0, 0, 1, 1];
        let y = t.segment_softmax(a, &seg, 2).unwrap();
        let v = t.value(y);
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
    }
}
