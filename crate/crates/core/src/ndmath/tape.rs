//! Reverse-mode differentiation over an explicit tape of op records.
//!
//! Every forward op appends one node holding its value and the handles of
//! its inputs. [`Tape::backward`] walks the nodes in reverse insertion order,
//! so gradient accumulation order is fixed and results are bit-reproducible.

use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::error::{Error, Result};

/// Guard added to row norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Arithmetic width of recorded values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    /// Every op output (and every propagated gradient) is rounded to the
    /// nearest `f32`.
    F32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Concat { parts: Vec<Var>, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    precision: Precision,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

fn check_same(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::domain(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Strides for reducing `shape` along `axis`: (outer, axis_len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    fn zip_with(&self, op: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a row vector (`[m]` or `[1, m]`) to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        let r = self.value(row);
        if r.len() != m {
            return Err(Error::domain(format!(
                "add_row: shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                r.shape()
            )));
        }
        let rd = r.data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..n {
            for (x, &b) in data[i * m..(i + 1) * m].iter_mut().zip(rd) {
                *x += b;
            }
        }
        let out = Tensor::new(&[n, m], data)?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    fn expect_scalar(&self, op: &str, s: Var) -> Result<f64> {
        let t = self.value(s);
        if t.len() != 1 {
            return Err(Error::domain(format!(
                "{op}: expected a one-element tensor, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.item())
    }

    /// Multiplies every element by a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.expect_scalar("mul_scalar", s)?;
        let out = self.map(a, |x| x * c);
        Ok(self.push(out, Op::MulScalar(a, s)))
    }

    /// Adds a one-element tensor to every element.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.expect_scalar("add_scalar", s)?;
        let out = self.map(a, |x| x + c);
        Ok(self.push(out, Op::AddScalar(a, s)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// `ln σ(x)` evaluated as `-softplus(-x)`; finite for any finite input.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, log_sigmoid);
        self.push(out, Op::LogSigmoid(a))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::domain("concat needs at least one part and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<_>>()?;
        let out = if axis == 0 {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(Error::domain(format!("concat rows: column mismatch {dims:?}")));
            }
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(&[dims.iter().map(|d| d.0).sum(), cols], data)?
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(Error::domain(format!("concat cols: row mismatch {dims:?}")));
            }
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(&[rows, total], data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    fn reduce_axis(&self, op: &str, x: Var, axis: usize, scale: f64) -> Result<Tensor> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(Error::domain(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        let src = t.data();
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        for d in &mut data {
            *d *= scale;
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        Tensor::new(&shape, data)
    }

    /// Mean along `axis`, keeping it with length 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.value(x).shape().get(axis).copied().unwrap_or(1);
        let out = self.reduce_axis("mean_axis", x, axis, 1.0 / len as f64)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }))
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.reduce_axis("sum_axis", x, axis, 1.0)?;
        Ok(self.push(out, Op::SumAxis { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Divides each row by `‖row‖₂ + NORM_EPS`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; n * m];
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = norm + NORM_EPS;
            for (o, &v) in data[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = v / d;
            }
            norms.push(norm);
        }
        let out = Tensor::new(&[n, m], data)?;
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::domain(format!("gather_rows: row {bad} out of {n}")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(&[idx.len(), m], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Gradient accumulated at `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Back-propagates from a one-element output, seeding its gradient with 1.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::domain(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        if self.precision == Precision::F32 {
            for g in grads.iter_mut().flatten() {
                for x in g {
                    *x = *x as f32 as f64;
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = ta.dims2().unwrap();
                let m = tb.shape()[1];
                matmul_bt_into(g, tb.data(), acc(grads, *a, n * k), n, m, k);
                matmul_at_into(ta.data(), g, acc(grads, *b, k * m), n, k, m);
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                let ga = acc(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    for (d, s) in acc(grads, *v, g.len()).iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Sub(a, b) => {
                for (d, s) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += s;
                }
                for (d, s) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::AddRow(a, row) => {
                for (d, s) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += s;
                }
                let m = self.value(*row).len();
                let gr = acc(grads, *row, m);
                for chunk in g.chunks(m) {
                    for (d, s) in gr.iter_mut().zip(chunk) {
                        *d += s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                for (k, d) in acc(grads, *a, g.len()).iter_mut().enumerate() {
                    *d += g[k] * tb[k];
                }
                for (k, d) in acc(grads, *b, g.len()).iter_mut().enumerate() {
                    *d += g[k] * ta[k];
                }
            }
            Op::Scale(a, c) => {
                for (d, s) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += s * c;
                }
            }
            Op::MulScalar(a, s) => {
                let c = self.value(*s).item();
                let ta = self.value(*a).data();
                let gs: f64 = g.iter().zip(ta).map(|(x, y)| x * y).sum();
                for (d, x) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += x * c;
                }
                acc(grads, *s, 1)[0] += gs;
            }
            Op::AddScalar(a, s) => {
                for (d, x) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += x;
                }
                acc(grads, *s, 1)[0] += g.iter().sum::<f64>();
            }
            Op::Exp(a) => {
                for ((d, x), y) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(out.data()) {
                    *d += x * y;
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a).data();
                for (k, d) in acc(grads, *a, g.len()).iter_mut().enumerate() {
                    if ta[k] > 0.0 {
                        *d += g[k];
                    }
                }
            }
            Op::Sigmoid(a) => {
                for ((d, x), y) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(out.data()) {
                    *d += x * y * (1.0 - y);
                }
            }
            Op::LogSigmoid(a) => {
                let ta = self.value(*a).data();
                for (k, d) in acc(grads, *a, g.len()).iter_mut().enumerate() {
                    *d += g[k] * sigmoid(-ta[k]);
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        for (d, x) in acc(grads, *p, n).iter_mut().zip(&g[off..off + n]) {
                            *d += x;
                        }
                        off += n;
                    }
                } else {
                    let (rows, total) = out.dims2().unwrap();
                    let mut col = 0;
                    for p in parts {
                        let (_, c) = self.value(*p).dims2().unwrap();
                        let gp = acc(grads, *p, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + col + j];
                            }
                        }
                        col += c;
                    }
                }
            }
            Op::MeanAxis { x, axis } | Op::SumAxis { x, axis } => {
                let shape = self.value(*x).shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let scale = match node.op {
                    Op::MeanAxis { .. } => 1.0 / len as f64,
                    _ => 1.0,
                };
                let gx = acc(grads, *x, outer * len * inner);
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for j in 0..inner {
                            gx[base + j] += g[o * inner + j] * scale;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                for d in acc(grads, *x, n) {
                    *d += g[0];
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let tx = self.value(*x);
                let (n, m) = tx.dims2().unwrap();
                let gx = acc(grads, *x, n * m);
                for r in 0..n {
                    let row = &tx.data()[r * m..(r + 1) * m];
                    let gr = &g[r * m..(r + 1) * m];
                    let norm = norms[r];
                    let d = norm + NORM_EPS;
                    let dot: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let coef = if norm > 0.0 { dot / (d * d * norm) } else { 0.0 };
                    for j in 0..m {
                        gx[r * m + j] += gr[j] / d - row[j] * coef;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let (n, m) = self.value(*x).dims2().unwrap();
                let gx = acc(grads, *x, n * m);
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..m {
                        gx[r * m + j] += g[k * m + j];
                    }
                }
            }
            Op::Reshape(x) => {
                for (d, s) in acc(grads, *x, g.len()).iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[3.0, 4.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn log_sigmoid_values() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        let far = log_sigmoid(-1000.0);
        assert!(far.is_finite() && (far + 1000.0).abs() < 1e-9);
        assert!(log_sigmoid(1e6).abs() < 1e-300 + 1e-12);
        assert!((log_sigmoid(-1e6) + 1e6).abs() < 1e-6);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn mean_then_scale_equals_sum() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.leaf(t(&[2, 3, 4], &data));
        for axis in 0..3 {
            let len = [2, 3, 4][axis] as f64;
            let m = tape.mean_axis(x, axis).unwrap();
            let scaled = tape.scale(m, len);
            let s = tape.sum_axis(x, axis).unwrap();
            for (a, b) in tape.value(scaled).data().iter().zip(tape.value(s).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn gradient_accumulates_over_fan_out() {
        // f = sum(x * x) + sum(x) -> df/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let a = tape.sum(sq);
        let b = tape.sum(x);
        let f = tape.add(a, b).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn f32_mode_rounds_values() {
        let mut tape = Tape::with_precision(Precision::F32);
        let x = tape.leaf(Tensor::scalar(0.1));
        assert_eq!(tape.value(x).item(), 0.1f32 as f64);
    }
}
