//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied to its variables. Parameters are
//! borrowed from a [`ParamStore`] without copying, so a tape lives for one
//! forward/backward pass and is then dropped. Gradients flowing into a
//! parameter through a row gather are kept sparse.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Variance below which layer norm outputs zeros (before the affine part).
pub const LN_ZERO_VAR: f64 = 1e-12;
pub const LN_EPS: f64 = 1e-6;
/// Lower bound on `|a||b|` in cosine similarity.
pub const COS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

impl Bcast {
    #[inline]
    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => r * cols + c,
            Bcast::Row => c,
            Bcast::Col => r,
            Bcast::Scalar => 0,
        }
    }
}

/// Sampling convention for [`Tape::bilinear_sample_2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAlign {
    /// Sample `k` sits at normalized position `(k + 0.5) / n`; edges clamp.
    PatchCenter,
    /// Sample `k` sits at `k / (n - 1)`; the corners map to the corners.
    AlignCorners,
}

/// Four `(flat index, weight)` taps of a bilinear lookup on an `h x w` grid.
pub fn bilinear_taps(h: usize, w: usize, u: f64, v: f64, align: GridAlign) -> [(usize, f64); 4] {
    let to_px = |t: f64, n: usize| -> f64 {
        let p = match align {
            GridAlign::PatchCenter => t * n as f64 - 0.5,
            GridAlign::AlignCorners => t * (n.saturating_sub(1)) as f64,
        };
        p.clamp(0.0, (n - 1) as f64)
    };
    let x = to_px(u, w);
    let y = to_px(v, h);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let (x1, fx) = if w > 1 { (x0 + 1, x - x0 as f64) } else { (0, 0.0) };
    let (y1, fy) = if h > 1 { (y0 + 1, y - y0 as f64) } else { (0, 0.0) };
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

enum Val<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Val<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Val::Owned(t) => t,
            Val::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf(Option<ParamId>),
    Add(Var, Bcast, Var, Bcast),
    Sub(Var, Bcast, Var, Bcast),
    Mul(Var, Bcast, Var, Bcast),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        src: Var,
        idx: Vec<usize>,
        weights: Option<Vec<f64>>,
        taps: usize,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Mean(Var),
    L2Norm(Var),
    Cosine(Var, Var),
    Abs(Var),
    StopGradient,
}

struct Node<'p> {
    value: Val<'p>,
    op: Op,
    needs_grad: bool,
}

/// Row-sparse gradient of a 2D parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    width: usize,
    slot: HashMap<usize, usize>,
    rows: Vec<usize>,
    data: Vec<f64>,
}

impl SparseRows {
    fn new(width: usize) -> Self {
        SparseRows {
            width,
            ..Default::default()
        }
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.width;
        let s = match self.slot.get(&r) {
            Some(&s) => s,
            None => {
                let s = self.rows.len();
                self.slot.insert(r, s);
                self.rows.push(r);
                self.data.resize(self.data.len() + w, 0.0);
                s
            }
        };
        &mut self.data[s * w..(s + 1) * w]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Touched rows in first-touch order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows
            .iter()
            .enumerate()
            .map(move |(s, &r)| (r, &self.data[s * self.width..(s + 1) * self.width]))
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    fn add_into_dense(&self, dense: &mut [f64]) {
        for (r, vals) in self.iter() {
            for (d, v) in dense[r * self.width..(r + 1) * self.width].iter_mut().zip(vals) {
                *d += v;
            }
        }
    }

    fn merge(&mut self, other: &SparseRows) {
        for (r, vals) in other.iter() {
            for (d, v) in self.row_mut(r).iter_mut().zip(vals) {
                *d += v;
            }
        }
    }
}

/// Gradient of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Grad {
    Dense(Vec<f64>),
    Rows(SparseRows),
}

impl Grad {
    pub fn to_dense(&self, numel: usize) -> Vec<f64> {
        match self {
            Grad::Dense(v) => v.clone(),
            Grad::Rows(s) => {
                let mut d = vec![0.0; numel];
                s.add_into_dense(&mut d);
                d
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Grad::Dense(v) => v.iter().all(|x| x.is_finite()),
            Grad::Rows(s) => s.data.iter().all(|x| x.is_finite()),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        let data = match self {
            Grad::Dense(v) => v,
            Grad::Rows(s) => &s.data,
        };
        data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    fn add(&mut self, other: &Grad) {
        match (&mut *self, other) {
            (Grad::Dense(a), Grad::Dense(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (Grad::Dense(a), Grad::Rows(b)) => b.add_into_dense(a),
            (Grad::Rows(a), Grad::Rows(b)) => a.merge(b),
            (Grad::Rows(a), Grad::Dense(b)) => {
                let mut d = b.clone();
                a.add_into_dense(&mut d);
                *self = Grad::Dense(d);
            }
        }
    }

    fn scale(&mut self, s: f64) {
        match self {
            Grad::Dense(v) => v.iter_mut().for_each(|x| *x *= s),
            Grad::Rows(r) => r.data.iter_mut().for_each(|x| *x *= s),
        }
    }
}

/// Gradients keyed by parameter. Parameters the loss does not reach have none.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Grad>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Gradients {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Grad> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Dense gradient, zeros when the parameter was not reached.
    pub fn dense(&self, id: ParamId, numel: usize) -> Vec<f64> {
        self.get(id)
            .map_or_else(|| vec![0.0; numel], |g| g.to_dense(numel))
    }

    /// True when the parameter received no gradient or an all-zero one.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.get(id).is_none_or(|g| g.max_abs() == 0.0)
    }

    /// Adds `other` into `self`; used for ordered reduction over batch chunks.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (_, None) => {}
                (None, Some(g)) => *mine = Some(g.clone()),
                (Some(m), Some(g)) => m.add(g),
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }
}

enum GradBuf {
    Dense(Vec<f64>),
    Sparse(SparseRows),
}

impl GradBuf {
    fn dense_mut(&mut self, numel: usize) -> &mut Vec<f64> {
        if let GradBuf::Sparse(s) = self {
            let mut d = vec![0.0; numel];
            s.add_into_dense(&mut d);
            *self = GradBuf::Dense(d);
        }
        match self {
            GradBuf::Dense(d) => d,
            GradBuf::Sparse(_) => unreachable!(),
        }
    }
}

pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
}

fn contract(op: &'static str, msg: String) -> Error {
    Error::contract(op, msg)
}

impl<'p> Default for Tape<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Val::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Which side of its kink every `relu` and `abs` input lies on. Within a
    /// region where this is constant the recorded function is smooth.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => out.extend(self.value(a).data().iter().map(|&x| x > 0.0)),
                Op::Abs(a) => out.extend(self.value(a).data().iter().map(|&x| x >= 0.0)),
                _ => {}
            }
        }
        out
    }

    /// Leaf for a stored parameter; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        self.nodes.push(Node {
            value: Val::Borrowed(store.get(id)),
            op: Op::Leaf(Some(id)),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None), false)
    }

    fn bcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok((ta.shape().to_vec(), Bcast::Same, Bcast::Same));
        }
        let fit = |big: &Tensor, small: &Tensor| -> Option<Bcast> {
            if small.numel() == big.numel() && small.cols() == big.cols() {
                Some(Bcast::Same)
            } else if small.numel() == 1 {
                Some(Bcast::Scalar)
            } else if small.rows() == 1 && small.cols() == big.cols() {
                Some(Bcast::Row)
            } else if small.cols() == 1 && small.rows() == big.rows() {
                Some(Bcast::Col)
            } else {
                None
            }
        };
        if ta.numel() >= tb.numel() {
            if let Some(bb) = fit(ta, tb) {
                return Ok((ta.shape().to_vec(), Bcast::Same, bb));
            }
        } else if let Some(ba) = fit(tb, ta) {
            return Ok((tb.shape().to_vec(), ba, Bcast::Same));
        }
        Err(contract(
            op,
            format!("shapes {:?} and {:?} do not broadcast", ta.shape(), tb.shape()),
        ))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Bcast, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (shape, ba, bb) = self.bcast_pair(op, a, b)?;
        let n: usize = shape.iter().product();
        let cols = shape.last().copied().unwrap_or(1);
        let rows = if cols == 0 { 0 } else { n / cols };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n);
        for r in 0..rows {
            for c in 0..cols {
                out.push(f(da[ba.index(r, c, cols)], db[bb.index(r, c, cols)]));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, make(a, ba, b, bb), ng))
    }

    /// Elementwise sum. One operand may broadcast as a row vector, a column
    /// vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 || tb.shape().len() > 2 {
            return Err(contract(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = mm(ta.data(), tb.data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(c, r, out).expect("shape"), Op::Transpose(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x.max(0.0)).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Layer norm over the last axis with affine `gamma`, `beta` (length = cols).
    /// Rows with variance below [`LN_ZERO_VAR`] normalize to zeros.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != cols || b.numel() != cols {
            return Err(contract(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} do not match {cols} columns",
                    g.shape(),
                    b.shape()
                ),
            ));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = if var < LN_ZERO_VAR {
                0.0
            } else {
                1.0 / (var + LN_EPS).sqrt()
            };
            rstd[r] = s;
            for c in 0..cols {
                let xh = (row[c] - mean) * s;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * g.data()[c] + b.data()[c];
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = t.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (dst, &v) in o.iter_mut().zip(row) {
                *dst = (v - m).exp();
                sum += *dst;
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, out).expect("shape"), Op::Softmax(a), ng)
    }

    /// Selects rows of `src` (viewed as `rows x cols`).
    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        self.gather(src, indices.to_vec(), None, 1)
    }

    /// Output row `r` is `sum_t weights[r*taps + t] * src[idx[r*taps + t]]`.
    pub fn weighted_gather(
        &mut self,
        src: Var,
        idx: Vec<usize>,
        weights: Vec<f64>,
        taps: usize,
    ) -> Result<Var> {
        if weights.len() != idx.len() {
            return Err(contract(
                "weighted_gather",
                format!("{} indices but {} weights", idx.len(), weights.len()),
            ));
        }
        self.gather(src, idx, Some(weights), taps)
    }

    fn gather(
        &mut self,
        src: Var,
        idx: Vec<usize>,
        weights: Option<Vec<f64>>,
        taps: usize,
    ) -> Result<Var> {
        let t = self.value(src);
        let (rows, cols) = (t.rows(), t.cols());
        if taps == 0 || idx.len() % taps != 0 {
            return Err(contract(
                "gather_rows",
                format!("{} indices do not split into {taps}-tap groups", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(contract(
                "gather_rows",
                format!("row {bad} out of range for {:?}", t.shape()),
            ));
        }
        let n_out = idx.len() / taps;
        let d = t.data();
        let mut out = vec![0.0; n_out * cols];
        for r in 0..n_out {
            let o = &mut out[r * cols..(r + 1) * cols];
            for k in 0..taps {
                let s = idx[r * taps + k];
                let w = weights.as_ref().map_or(1.0, |w| w[r * taps + k]);
                if w == 0.0 {
                    continue;
                }
                for (dst, &v) in o.iter_mut().zip(&d[s * cols..(s + 1) * cols]) {
                    *dst += w * v;
                }
            }
        }
        let ng = self.ng(src);
        Ok(self.push(
            Tensor::matrix(n_out, cols, out)?,
            Op::Gather {
                src,
                idx,
                weights,
                taps,
            },
            ng,
        ))
    }

    /// Samples a `grid_h x grid_w x C` grid (stored as `(grid_h*grid_w, C)`)
    /// at normalized points `(u, v)`, `u` horizontal.
    pub fn bilinear_sample_2d(
        &mut self,
        grid: Var,
        grid_h: usize,
        grid_w: usize,
        points: &[(f64, f64)],
        align: GridAlign,
    ) -> Result<Var> {
        let rows = self.value(grid).rows();
        if rows != grid_h * grid_w || grid_h == 0 || grid_w == 0 {
            return Err(contract(
                "bilinear_sample_2d",
                format!("grid tensor has {rows} rows, expected {grid_h}x{grid_w}"),
            ));
        }
        let mut idx = Vec::with_capacity(points.len() * 4);
        let mut w = Vec::with_capacity(points.len() * 4);
        for &(u, v) in points {
            for (i, wt) in bilinear_taps(grid_h, grid_w, u, v, align) {
                idx.push(i);
                w.push(wt);
            }
        }
        self.gather(grid, idx, Some(w), 4)
    }

    /// Concatenates along the last axis; all inputs must have equal row counts.
    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| contract("concat_last_axis", "no inputs".into()))?;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(contract(
                    "concat_last_axis",
                    format!("row counts differ: {rows} vs {:?}", t.shape()),
                ));
            }
            total += t.cols();
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::matrix(rows, total, out)?,
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last_axis(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if start + len > cols || len == 0 {
            return Err(contract(
                "slice_last_axis",
                format!("range {start}..{} outside {cols} columns", start + len),
            ));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(rows, len, out)?, Op::Slice { x, start }, ng))
    }

    /// Mean of all elements, accumulated in order.
    pub fn reduce_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// Euclidean norm of each row, shape `(rows, 1)`.
    pub fn l2_norm_last_axis(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows())
            .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let n = out.len();
        let ng = self.ng(a);
        self.push(Tensor::matrix(n, 1, out).expect("shape"), Op::L2Norm(a), ng)
    }

    /// Row-wise cosine similarity, shape `(rows, 1)`.
    pub fn cosine_similarity_last_axis(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(contract(
                "cosine_similarity_last_axis",
                format!("shapes differ: {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out: Vec<f64> = (0..ta.rows())
            .map(|r| cosine(ta.row(r), tb.row(r)).0)
            .collect();
        let n = out.len();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(n, 1, out)?, Op::Cosine(a, b), ng))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.abs()).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    /// Identity forward, blocks every gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::StopGradient, false)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", lt.shape()),
            ));
        }
        let n_params = self.store.map_or(0, |s| s.len());
        let mut out = Gradients::empty(n_params);
        if !self.ng(loss) {
            return Ok(out);
        }
        let mut grads: Vec<Option<GradBuf>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(GradBuf::Dense(vec![1.0]));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let g = match g {
                GradBuf::Dense(d) => d,
                GradBuf::Sparse(s) => {
                    if let Op::Leaf(Some(pid)) = node.op {
                        out.grads[pid.0] = Some(Grad::Rows(s));
                        continue;
                    }
                    let mut d = vec![0.0; node.value.get().numel()];
                    s.add_into_dense(&mut d);
                    d
                }
            };
            self.backward_node(i, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<GradBuf>], v: Var, contrib: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            slot @ None => *slot = Some(GradBuf::Dense(contrib)),
            Some(buf) => {
                let n = contrib.len();
                let d = buf.dense_mut(n);
                d.iter_mut().zip(&contrib).for_each(|(x, y)| *x += y);
            }
        }
    }

    fn backward_node(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<GradBuf>],
        out: &mut Gradients,
    ) {
        let node = &self.nodes[i];
        let val = node.value.get();
        match &node.op {
            Op::Leaf(Some(pid)) => out.grads[pid.0] = Some(Grad::Dense(g)),
            Op::Leaf(None) | Op::StopGradient => {}
            Op::Add(a, ba, b, bb) | Op::Sub(a, ba, b, bb) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let cols = val.cols();
                let rows = val.rows();
                if self.ng(*a) {
                    let ga = reduce_bcast(&g, *ba, rows, cols, self.value(*a).numel(), |_| 1.0);
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = reduce_bcast(&g, *bb, rows, cols, self.value(*b).numel(), |_| sign);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, ba, b, bb) => {
                let cols = val.cols();
                let rows = val.rows();
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let ga = reduce_bcast(&g, *ba, rows, cols, da.len(), |(r, c)| {
                        db[bb.index(r, c, cols)]
                    });
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = reduce_bcast(&g, *bb, rows, cols, db.len(), |(r, c)| {
                        da[ba.index(r, c, cols)]
                    });
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, g.iter().map(|x| x * s).collect());
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    self.acc(grads, *a, mm_nt(&g, tb.data(), m, n, k));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, mm_tn(ta.data(), &g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                // output is (c, r); gradient goes back to (r, c)
                let (c, r) = (val.rows(), val.cols());
                let mut ga = vec![0.0; r * c];
                for j in 0..c {
                    for i2 in 0..r {
                        ga[i2 * c + j] = g[j * r + i2];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = (val.rows(), val.cols());
                let gm = self.value(*gamma).data();
                if self.ng(*gamma) {
                    let mut gg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    self.acc(grads, *gamma, gg);
                }
                if self.ng(*beta) {
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                    self.acc(grads, *beta, gb);
                }
                if self.ng(*x) {
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let s = rstd[r];
                        if s == 0.0 {
                            continue;
                        }
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gm[c];
                            mean_d += d;
                            mean_dx += d * xhat[r * cols + c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gm[c];
                            gx[r * cols + c] = s * (d - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Softmax(a) => {
                let (rows, cols) = (val.rows(), val.cols());
                let y = val.data();
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        ga[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Gather {
                src,
                idx,
                weights,
                taps,
            } => {
                let cols = val.cols();
                let n_out = val.rows();
                let is_leaf = matches!(self.nodes[src.0].op, Op::Leaf(Some(_)));
                let src_numel = self.value(*src).numel();
                // row-sparse only pays off when most source rows stay untouched
                let sparse = is_leaf && n_out * taps < self.value(*src).rows() / 2;
                if sparse && grads[src.0].is_none() {
                    grads[src.0] = Some(GradBuf::Sparse(SparseRows::new(cols)));
                }
                let buf = grads[src.0].get_or_insert_with(|| GradBuf::Dense(vec![0.0; src_numel]));
                for r in 0..n_out {
                    let gr = &g[r * cols..(r + 1) * cols];
                    for k in 0..*taps {
                        let s = idx[r * taps + k];
                        let w = weights.as_ref().map_or(1.0, |w| w[r * taps + k]);
                        if w == 0.0 {
                            continue;
                        }
                        let dst = match buf {
                            GradBuf::Sparse(sp) => sp.row_mut(s),
                            GradBuf::Dense(d) => &mut d[s * cols..(s + 1) * cols],
                        };
                        for (d, &gv) in dst.iter_mut().zip(gr) {
                            *d += w * gv;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let (rows, total) = (val.rows(), val.cols());
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        self.acc(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::Slice { x, start } => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.rows(), tx.cols());
                let len = val.cols();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, gx);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::L2Norm(a) => {
                let t = self.value(*a);
                let cols = t.cols();
                let mut ga = vec![0.0; t.numel()];
                for r in 0..t.rows() {
                    let norm = val.data()[r];
                    if norm == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        ga[r * cols + c] = g[r] * t.data()[r * cols + c] / norm;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols();
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                for r in 0..ta.rows() {
                    let (ra, rb) = (ta.row(r), tb.row(r));
                    let (cos, na, nb) = cosine(ra, rb);
                    let denom = na * nb;
                    for c in 0..cols {
                        let (da, db) = if denom > COS_EPS {
                            (
                                rb[c] / denom - cos * ra[c] / (na * na),
                                ra[c] / denom - cos * rb[c] / (nb * nb),
                            )
                        } else {
                            (rb[c] / COS_EPS, ra[c] / COS_EPS)
                        };
                        ga[r * cols + c] = g[r] * da;
                        gb[r * cols + c] = g[r] * db;
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| {
                        if xv > 0.0 {
                            *gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.acc(grads, *a, ga);
            }
        }
    }
}

/// `(cos, |a|, |b|)` with the denominator floored at [`COS_EPS`].
pub fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    (dot / (na * nb).max(COS_EPS), na, nb)
}

fn reduce_bcast(
    g: &[f64],
    b: Bcast,
    rows: usize,
    cols: usize,
    numel: usize,
    factor: impl Fn((usize, usize)) -> f64,
) -> Vec<f64> {
    let mut out = vec![0.0; numel];
    for r in 0..rows {
        for c in 0..cols {
            out[b.index(r, c, cols)] += g[r * cols + c] * factor((r, c));
        }
    }
    out
}

/// `a (m,k) * b (k,n)`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (dst, &bv) in o.iter_mut().zip(br) {
                *dst += av * bv;
            }
        }
    }
    out
}

/// `g (m,n) * b(k,n)^T -> (m,k)`.
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            out[i * k + p] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a (m,k)^T * g (m,n) -> (k,n)`.
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (dst, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(gr) {
                *dst += av * gv;
            }
        }
    }
    out
}
