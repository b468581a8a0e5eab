//! Reverse-mode differentiation on a dynamic tape.
//!
//! Every forward op pushes a node holding its value and a backward closure
//! that maps the node's upstream gradient to contributions for each parent.
//! A tape is confined to one thread; tensors themselves are value types.
//!
//! Gradients accumulate additively, and nodes created through
//! [`Tape::constant`] never receive gradient (stop-gradient semantics, used
//! for the momentum queue and loss weight matrices).

use std::cell::RefCell;

use crate::tensor::{NumericError, NumericResult, Tensor};

const L2_NORM_EPS: f64 = 1e-12;
/// Additive logit mask; exp(x - rowmax) underflows to exactly 0.0 for
/// entries this far below the rest of the row.
pub const NEG_MASK: f64 = -1e30;

type BackwardFn = Box<dyn Fn(&Tensor) -> NumericResult<Vec<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Dynamic tape recording one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `var`; zero tensor if
    /// nothing flowed into it (constants, unused parameters).
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.idx].clone()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Non-differentiable input; gradient never flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    pub fn scalar_const(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Reverse pass from a scalar root. Tape order is a topological order, so
    /// a single reverse sweep visits every contributing node exactly once.
    pub fn backward(&self, root: Var<'_>) -> NumericResult<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.idx].value.numel() != 1 {
            return Err(NumericError::InvalidShape {
                op: "backward",
                shape: nodes[root.idx].value.shape().to_vec(),
                reason: "backward root must be a scalar",
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.idx] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.idx).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            if let Some(backward) = &node.backward {
                let contribs = backward(&g)?;
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (&p, c) in node.parents.iter().zip(contribs) {
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    grads[p] = Some(match grads[p].take() {
                        Some(acc) => acc.add(&c)?,
                        None => c,
                    });
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn value_of(&self, idx: usize) -> Tensor {
        self.nodes.borrow()[idx].value.clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Concatenate along rows (axis 0); all inputs must share the column count.
pub fn concat_rows<'t>(vars: &[Var<'t>]) -> NumericResult<Var<'t>> {
    let first = vars.first().ok_or(NumericError::InvalidShape {
        op: "concat_rows",
        shape: vec![],
        reason: "empty input list",
    })?;
    let tape = first.tape;
    let values: Vec<Tensor> = vars.iter().map(|v| v.value()).collect();
    let cols = values[0].cols()?;
    let mut data = Vec::new();
    let mut row_counts = Vec::with_capacity(values.len());
    for v in &values {
        if v.cols()? != cols {
            return Err(NumericError::ShapeMismatch {
                op: "concat_rows",
                left: values[0].shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        row_counts.push(v.rows()?);
        data.extend_from_slice(v.data());
    }
    let total_rows: usize = row_counts.iter().sum();
    let out = Tensor::new(vec![total_rows, cols], data)?;
    let parents: Vec<usize> = vars.iter().map(|v| v.idx).collect();
    Ok(tape.push(
        out,
        parents,
        Some(Box::new(move |g: &Tensor| {
            let mut contribs = Vec::with_capacity(row_counts.len());
            let mut offset = 0;
            for &r in &row_counts {
                let slice = &g.data()[offset * cols..(offset + r) * cols];
                contribs.push(Tensor::new(vec![r, cols], slice.to_vec())?);
                offset += r;
            }
            Ok(contribs)
        })),
    ))
}

/// Concatenate along columns (axis 1); all inputs must share the row count.
pub fn concat_cols<'t>(vars: &[Var<'t>]) -> NumericResult<Var<'t>> {
    let first = vars.first().ok_or(NumericError::InvalidShape {
        op: "concat_cols",
        shape: vec![],
        reason: "empty input list",
    })?;
    let tape = first.tape;
    let values: Vec<Tensor> = vars.iter().map(|v| v.value()).collect();
    let rows = values[0].rows()?;
    let mut col_counts = Vec::with_capacity(values.len());
    for v in &values {
        if v.rows()? != rows {
            return Err(NumericError::ShapeMismatch {
                op: "concat_cols",
                left: values[0].shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        col_counts.push(v.cols()?);
    }
    let total_cols: usize = col_counts.iter().sum();
    let mut data = vec![0.0; rows * total_cols];
    let mut offset = 0;
    for (v, &c) in values.iter().zip(&col_counts) {
        for r in 0..rows {
            data[r * total_cols + offset..r * total_cols + offset + c]
                .copy_from_slice(&v.data()[r * c..(r + 1) * c]);
        }
        offset += c;
    }
    let out = Tensor::new(vec![rows, total_cols], data)?;
    let parents: Vec<usize> = vars.iter().map(|v| v.idx).collect();
    Ok(tape.push(
        out,
        parents,
        Some(Box::new(move |g: &Tensor| {
            let mut contribs = Vec::with_capacity(col_counts.len());
            let mut offset = 0;
            for &c in &col_counts {
                let mut part = vec![0.0; rows * c];
                for r in 0..rows {
                    part[r * c..(r + 1) * c].copy_from_slice(
                        &g.data()[r * total_cols + offset..r * total_cols + offset + c],
                    );
                }
                contribs.push(Tensor::new(vec![rows, c], part)?);
                offset += c;
            }
            Ok(contribs)
        })),
    ))
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.idx)
    }

    pub fn item(&self) -> NumericResult<f64> {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    fn assert_same_tape(&self, other: &Var<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn add(self, other: Var<'t>) -> NumericResult<Var<'t>> {
        self.assert_same_tape(&other);
        let out = self.value().add(&other.value())?;
        Ok(self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(|g: &Tensor| Ok(vec![g.clone(), g.clone()]))),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> NumericResult<Var<'t>> {
        self.assert_same_tape(&other);
        let out = self.value().sub(&other.value())?;
        Ok(self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(|g: &Tensor| Ok(vec![g.clone(), g.scale(-1.0)?]))),
        ))
    }

    /// Element-wise product.
    pub fn mul(self, other: Var<'t>) -> NumericResult<Var<'t>> {
        self.assert_same_tape(&other);
        let a = self.value();
        let b = other.value();
        let out = a.mul(&b)?;
        Ok(self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(move |g: &Tensor| {
                Ok(vec![g.mul(&b)?, g.mul(&a)?])
            })),
        ))
    }

    pub fn scale(self, c: f64) -> NumericResult<Var<'t>> {
        let out = self.value().scale(c)?;
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| Ok(vec![g.scale(c)?]))),
        ))
    }

    pub fn neg(self) -> NumericResult<Var<'t>> {
        self.scale(-1.0)
    }

    /// Broadcast-add a row vector `[d]` to every row of `[n, d]`.
    pub fn add_row(self, bias: Var<'t>) -> NumericResult<Var<'t>> {
        self.assert_same_tape(&bias);
        let a = self.value();
        let b = bias.value();
        let (n, d) = (a.rows()?, a.cols()?);
        if b.shape() != [d] {
            return Err(NumericError::ShapeMismatch {
                op: "add_row",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut data = a.data().to_vec();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += b.data()[c];
            }
        }
        let out = Tensor::new(vec![n, d], data)?;
        Ok(self.tape.push(
            out,
            vec![self.idx, bias.idx],
            Some(Box::new(move |g: &Tensor| {
                let mut db = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        db[c] += g.data()[r * d + c];
                    }
                }
                Ok(vec![g.clone(), Tensor::new(vec![d], db)?])
            })),
        ))
    }

    pub fn matmul(self, other: Var<'t>) -> NumericResult<Var<'t>> {
        self.assert_same_tape(&other);
        let a = self.value();
        let b = other.value();
        let out = a.matmul(&b)?;
        Ok(self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(move |g: &Tensor| {
                let da = g.matmul(&b.transpose()?)?;
                let db = a.transpose()?.matmul(g)?;
                Ok(vec![da, db])
            })),
        ))
    }

    pub fn transpose(self) -> NumericResult<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(|g: &Tensor| Ok(vec![g.transpose()?]))),
        ))
    }

    pub fn exp(self) -> NumericResult<Var<'t>> {
        let out = self.value().map(f64::exp);
        out.check_finite("exp")?;
        let captured = out.clone();
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| Ok(vec![g.mul(&captured)?]))),
        ))
    }

    pub fn log(self) -> NumericResult<Var<'t>> {
        let a = self.value();
        let out = a.map(f64::ln);
        out.check_finite("log")?;
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| {
                let inv = a.map(|v| 1.0 / v);
                Ok(vec![g.mul(&inv)?])
            })),
        ))
    }

    /// Row-wise softmax of a `[n, d]` tensor; the row max is subtracted first.
    pub fn softmax_rows(self) -> NumericResult<Var<'t>> {
        let a = self.value();
        let (n, d) = (a.rows()?, a.cols()?);
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let row = a.row(r)?;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut data[r * d..(r + 1) * d] {
                *o /= sum;
            }
        }
        let out = Tensor::new(vec![n, d], data)?;
        let s = out.clone();
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let srow = s.row(r)?;
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                    for c in 0..d {
                        dx[r * d + c] = srow[c] * (grow[c] - dot);
                    }
                }
                Ok(vec![Tensor::new(vec![n, d], dx)?])
            })),
        ))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(self) -> NumericResult<Var<'t>> {
        let a = self.value();
        let (n, d) = (a.rows()?, a.cols()?);
        let mut out = vec![0.0; n * d];
        let mut soft = vec![0.0; n * d];
        for r in 0..n {
            let row = a.row(r)?;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            for c in 0..d {
                out[r * d + c] = row[c] - lse;
                soft[r * d + c] = (row[c] - lse).exp();
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let soft = Tensor::new(vec![n, d], soft)?;
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let gsum: f64 = g.data()[r * d..(r + 1) * d].iter().sum();
                    for c in 0..d {
                        dx[r * d + c] = g.data()[r * d + c] - soft.data()[r * d + c] * gsum;
                    }
                }
                Ok(vec![Tensor::new(vec![n, d], dx)?])
            })),
        ))
    }

    pub fn sum_all(self) -> NumericResult<Var<'t>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let out = Tensor::scalar(a.sum());
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| {
                let gv = g.item()?;
                Ok(vec![Tensor::full(shape.clone(), gv)])
            })),
        ))
    }

    pub fn mean_all(self) -> NumericResult<Var<'t>> {
        let n = self.value().numel();
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// Column sums of `[n, d]` down to `[d]`.
    pub fn sum_axis0(self) -> NumericResult<Var<'t>> {
        let a = self.value();
        let (n, d) = (a.rows()?, a.cols()?);
        let mut out = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                out[c] += a.data()[r * d + c];
            }
        }
        let out = Tensor::new(vec![d], out)?;
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    dx[r * d..(r + 1) * d].copy_from_slice(g.data());
                }
                Ok(vec![Tensor::new(vec![n, d], dx)?])
            })),
        ))
    }

    /// Row-wise L2 normalization: each row divided by `max(norm, 1e-12)`.
    pub fn l2_normalize_rows(self) -> NumericResult<Var<'t>> {
        let a = self.value();
        let (n, d) = (a.rows()?, a.cols()?);
        let mut out = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for r in 0..n {
            let row = a.row(r)?;
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_NORM_EPS);
            norms[r] = norm;
            for c in 0..d {
                out[r * d + c] = row[c] / norm;
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let y = out.clone();
        let raw_norms: Vec<f64> = (0..n)
            .map(|r| a.row(r).map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect::<NumericResult<_>>()?;
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let yrow = y.row(r)?;
                    let grow = &g.data()[r * d..(r + 1) * d];
                    if raw_norms[r] > L2_NORM_EPS {
                        let dot: f64 = yrow.iter().zip(grow).map(|(x, z)| x * z).sum();
                        for c in 0..d {
                            dx[r * d + c] = (grow[c] - yrow[c] * dot) / norms[r];
                        }
                    } else {
                        // Below the clamp the map is x / eps, a plain scaling.
                        for c in 0..d {
                            dx[r * d + c] = grow[c] / L2_NORM_EPS;
                        }
                    }
                }
                Ok(vec![Tensor::new(vec![n, d], dx)?])
            })),
        ))
    }

    /// Select rows of a `[r, c]` tensor, embedding-lookup style.
    pub fn gather_rows(self, indices: &[usize]) -> NumericResult<Var<'t>> {
        let a = self.value();
        let (rows, cols) = (a.rows()?, a.cols()?);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(NumericError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    limit: rows,
                });
            }
            data.extend_from_slice(a.row(i)?);
        }
        let out = Tensor::new(vec![indices.len(), cols], data)?;
        let idxs = indices.to_vec();
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; rows * cols];
                for (k, &i) in idxs.iter().enumerate() {
                    for c in 0..cols {
                        dx[i * cols + c] += g.data()[k * cols + c];
                    }
                }
                Ok(vec![Tensor::new(vec![rows, cols], dx)?])
            })),
        ))
    }

    /// Column slice `[n, end-start]` of a `[n, d]` tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> NumericResult<Var<'t>> {
        let a = self.value();
        let (n, d) = (a.rows()?, a.cols()?);
        if start > end || end > d {
            return Err(NumericError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                limit: d,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&a.data()[r * d + start..r * d + end]);
        }
        let out = Tensor::new(vec![n, w], data)?;
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + end]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                Ok(vec![Tensor::new(vec![n, d], dx)?])
            })),
        ))
    }

    /// `out[i] = self[i, cols[i]]` — one element picked per row.
    pub fn pick_per_row(self, cols: &[usize]) -> NumericResult<Var<'t>> {
        let a = self.value();
        let (n, d) = (a.rows()?, a.cols()?);
        if cols.len() != n {
            return Err(NumericError::InvalidShape {
                op: "pick_per_row",
                shape: vec![cols.len()],
                reason: "one column index required per row",
            });
        }
        let mut data = Vec::with_capacity(n);
        for (r, &c) in cols.iter().enumerate() {
            if c >= d {
                return Err(NumericError::IndexOutOfRange {
                    op: "pick_per_row",
                    index: c,
                    limit: d,
                });
            }
            data.push(a.data()[r * d + c]);
        }
        let out = Tensor::new(vec![n], data)?;
        let cols = cols.to_vec();
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; n * d];
                for (r, &c) in cols.iter().enumerate() {
                    dx[r * d + c] = g.data()[r];
                }
                Ok(vec![Tensor::new(vec![n, d], dx)?])
            })),
        ))
    }

    /// Layer normalization over the last axis of `[n, d]`, with learned
    /// gain and bias vectors of shape `[d]`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> NumericResult<Var<'t>> {
        self.assert_same_tape(&gain);
        self.assert_same_tape(&bias);
        let x = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let (n, d) = (x.rows()?, x.cols()?);
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(NumericError::ShapeMismatch {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = x.row(r)?;
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let h = (row[c] - mean) * istd;
                xhat[r * d + c] = h;
                out[r * d + c] = gv.data()[c] * h + bv.data()[c];
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let gv2 = gv.clone();
        Ok(self.tape.push(
            out,
            vec![self.idx, gain.idx, bias.idx],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; n * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..n {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    // dxhat = g * gain; then project out mean and xhat components.
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..d {
                        let dh = grow[c] * gv2.data()[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[c];
                        dgain[c] += grow[c] * hrow[c];
                        dbias[c] += grow[c];
                    }
                    for c in 0..d {
                        let dh = grow[c] * gv2.data()[c];
                        dx[r * d + c] = inv_std[r]
                            * (dh - sum_dh / d as f64 - hrow[c] * sum_dh_h / d as f64);
                    }
                }
                Ok(vec![
                    Tensor::new(vec![n, d], dx)?,
                    Tensor::new(vec![d], dgain)?,
                    Tensor::new(vec![d], dbias)?,
                ])
            })),
        ))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(self) -> NumericResult<Var<'t>> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let x = self.value();
        let out = x.map(|v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()));
        out.check_finite("gelu")?;
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| {
                let dx = x.map(|v| {
                    let u = C * (v + A * v * v * v);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v)
                });
                Ok(vec![g.mul(&dx)?])
            })),
        ))
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Add `NEG_MASK` to the entries listed in `(row, col)` pairs, pushing
    /// them out of any subsequent row softmax.
    pub fn mask_entries(self, entries: &[(usize, usize)]) -> NumericResult<Var<'t>> {
        let a = self.value();
        let (n, d) = (a.rows()?, a.cols()?);
        let mut data = a.data().to_vec();
        for &(r, c) in entries {
            if r >= n || c >= d {
                return Err(NumericError::IndexOutOfRange {
                    op: "mask_entries",
                    index: r.max(c),
                    limit: n.max(d),
                });
            }
            data[r * d + c] = NEG_MASK;
        }
        let out = Tensor::new(vec![n, d], data)?;
        let masked = entries.to_vec();
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g: &Tensor| {
                let mut dx = g.data().to_vec();
                for &(r, c) in &masked {
                    dx[r * d + c] = 0.0;
                }
                Ok(vec![Tensor::new(vec![n, d], dx)?])
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, NamedTensors};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn named(entries: &[(&str, Tensor)]) -> NamedTensors {
        entries
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 0.8, &mut rng)
    }

    /// Checks one op's gradient through a scalar readout at tol 1e-6.
    fn check<F>(params: NamedTensors, f: F)
    where
        F: for<'t> Fn(&'t Tape, &std::collections::BTreeMap<String, Var<'t>>) -> NumericResult<Var<'t>>,
    {
        let report = grad_check(f, &params, 1e-5, 1e-6).unwrap();
        assert!(
            report.passed(),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn grad_add_mul_sub_scale() {
        let a = rand_tensor(vec![3, 4], 1);
        let b = rand_tensor(vec![3, 4], 2);
        check(named(&[("a", a.clone()), ("b", b.clone())]), |_, v| {
            v["a"].add(v["b"])?.mul(v["a"])?.sum_all()
        });
        check(named(&[("a", a.clone()), ("b", b)]), |_, v| {
            v["a"].sub(v["b"])?.scale(1.7)?.sum_all()
        });
        check(named(&[("a", a)]), |_, v| v["a"].neg()?.sum_all());
    }

    #[test]
    fn grad_matmul_transpose() {
        let a = rand_tensor(vec![3, 5], 3);
        let b = rand_tensor(vec![5, 2], 4);
        check(named(&[("a", a.clone()), ("b", b.clone())]), |_, v| {
            v["a"].matmul(v["b"])?.sum_all()
        });
        check(named(&[("a", a), ("b", b)]), |_, v| {
            v["b"].transpose()?.matmul(v["a"].transpose()?)?.sum_all()
        });
    }

    #[test]
    fn grad_softmax_and_log_softmax() {
        let a = rand_tensor(vec![4, 6], 5);
        let w = rand_tensor(vec![4, 6], 6);
        // Weighted readout keeps per-entry gradients alive.
        check(named(&[("a", a.clone())]), move |tape, v| {
            let w = tape.constant(w.clone());
            v["a"].softmax_rows()?.mul(w)?.sum_all()
        });
        let w2 = rand_tensor(vec![4, 6], 7);
        check(named(&[("a", a)]), move |tape, v| {
            let w2 = tape.constant(w2.clone());
            v["a"].log_softmax_rows()?.mul(w2)?.sum_all()
        });
    }

    #[test]
    fn grad_exp_log_gelu() {
        let a = rand_tensor(vec![2, 3], 8);
        check(named(&[("a", a.clone())]), |_, v| v["a"].exp()?.sum_all());
        let positive = a.map(|v| v.abs() + 0.5);
        check(named(&[("a", positive)]), |_, v| v["a"].log()?.sum_all());
        check(named(&[("a", a)]), |_, v| v["a"].gelu()?.sum_all());
    }

    #[test]
    fn grad_l2_normalize() {
        let a = rand_tensor(vec![4, 5], 9);
        let w = rand_tensor(vec![4, 5], 10);
        check(named(&[("a", a)]), move |tape, v| {
            let w = tape.constant(w.clone());
            v["a"].l2_normalize_rows()?.mul(w)?.sum_all()
        });
    }

    #[test]
    fn grad_gather_slice_pick_concat() {
        let a = rand_tensor(vec![5, 4], 11);
        // Repeated index exercises gradient accumulation.
        check(named(&[("a", a.clone())]), |_, v| {
            v["a"].gather_rows(&[0, 2, 2, 4])?.sum_all()
        });
        check(named(&[("a", a.clone())]), |_, v| {
            v["a"].slice_cols(1, 3)?.sum_all()
        });
        check(named(&[("a", a.clone())]), |_, v| {
            v["a"].pick_per_row(&[0, 3, 1, 2, 2])?.sum_all()
        });
        let b = rand_tensor(vec![2, 4], 12);
        check(named(&[("a", a.clone()), ("b", b.clone())]), |_, v| {
            concat_rows(&[v["a"], v["b"]])?.sum_all()
        });
        let c = rand_tensor(vec![5, 3], 13);
        check(named(&[("a", a), ("c", c)]), |_, v| {
            let cat = concat_cols(&[v["a"], v["c"]])?;
            cat.mul(cat)?.sum_all()
        });
    }

    #[test]
    fn grad_layer_norm_and_reductions() {
        let x = rand_tensor(vec![3, 6], 14);
        let g = rand_tensor(vec![6], 15).map(|v| v * 0.1 + 1.0);
        let b = rand_tensor(vec![6], 16);
        check(
            named(&[("x", x.clone()), ("g", g), ("b", b)]),
            |_, v| {
                v["x"]
                    .layer_norm(v["g"], v["b"], 1e-5)?
                    .mul(v["x"])?
                    .sum_all()
            },
        );
        check(named(&[("x", x.clone())]), |_, v| v["x"].mean_all());
        check(named(&[("x", x.clone())]), |_, v| {
            v["x"].sum_axis0()?.mul(v["x"].sum_axis0()?)?.sum_all()
        });
        let bias = rand_tensor(vec![6], 17);
        check(named(&[("x", x), ("bias", bias)]), |_, v| {
            v["x"].add_row(v["bias"])?.mul(v["x"])?.sum_all()
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_lie_in_unit_interval() {
        let a = rand_tensor(vec![6, 9], 18).scale(4.0).unwrap();
        let tape = Tape::new();
        let s = tape.leaf(a).softmax_rows().unwrap().value();
        for r in 0..6 {
            let row = s.row(r).unwrap();
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let s = tape
            .leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap())
            .softmax_rows()
            .unwrap()
            .value();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let tape = Tape::new();
        let y = tape
            .leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap())
            .l2_normalize_rows()
            .unwrap()
            .value();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_norm_above_tiny_inputs() {
        for seed in 0..5 {
            let a = rand_tensor(vec![3, 7], 100 + seed).scale(1e-3).unwrap();
            let tape = Tape::new();
            let y = tape.leaf(a).l2_normalize_rows().unwrap().value();
            for r in 0..3 {
                let norm: f64 = y.row(r).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-10, "norm {norm}");
            }
        }
    }

    #[test]
    fn constants_never_receive_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let loss = x.mul(c).unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[3.0, 4.0]);
        assert_eq!(grads.wrt(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_entries_drop_out_of_softmax_exactly() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 0.0, 0.1, 0.4]).unwrap());
        let s = a
            .mask_entries(&[(0, 0), (1, 1)])
            .unwrap()
            .softmax_rows()
            .unwrap()
            .value();
        assert_eq!(s.data()[0], 0.0);
        assert_eq!(s.data()[4], 0.0);
        let row0: f64 = s.row(0).unwrap().iter().sum();
        assert!((row0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(tape.backward(x).is_err());
    }
}
