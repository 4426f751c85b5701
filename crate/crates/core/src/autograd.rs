//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar output replays the records in reverse and
//! accumulates gradients, which are read back through [`Gradients`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor) -> Result<Vec<(usize, Tensor)>>>;

struct Node {
    value: Rc<Tensor>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// A value paired with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor {
    pub value: Tensor,
    pub gradient: Tensor,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the differentiated output w.r.t. `v`; zeros when `v` did
    /// not influence it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn dual(&self, v: Var<'_>) -> DualTensor {
        DualTensor { value: (*v.value()).clone(), gradient: self.wrt(v) }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, needs_grad: bool, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), needs_grad, backward });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, None)
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, None)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Records an op result. `backward` maps the output gradient to gradients
    /// for parent ids; it is dropped when no parent needs a gradient.
    fn record(
        &self,
        value: Tensor,
        parents: &[usize],
        backward: impl Fn(&Tensor) -> Result<Vec<(usize, Tensor)>> + 'static,
    ) -> Var<'_> {
        let needs = parents.iter().any(|&p| self.needs(p));
        if needs {
            self.push(value, true, Some(Box::new(backward)))
        } else {
            self.push(value, false, None)
        }
    }

    /// Backpropagates from the scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let seed = &nodes[output.id].value;
        if seed.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar output, got {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(seed.shape(), 1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            for (pid, pg) in backward(&g)? {
                if !nodes[pid].needs_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.accumulate(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = ops::matmul(&a, &b)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.record(out, &[ia, ib], move |g| {
            let (da, db) = ops::matmul_backward(&a, &b, g)?;
            Ok(vec![(ia, da), (ib, db)])
        }))
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = ops::gemm(&a, false, &b, true)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.record(out, &[ia, ib], move |g| {
            let da = ops::gemm(g, false, &b, false)?;
            let db = ops::gemm(g, true, &a, false)?;
            Ok(vec![(ia, da), (ib, db)])
        }))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = ops::transpose(&self.value())?;
        let id = self.id;
        Ok(self.tape.record(out, &[id], move |g| Ok(vec![(id, ops::transpose(g)?)])))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let src = self.shape();
        let out = self.value().reshape(shape)?;
        let id = self.id;
        Ok(self.tape.record(out, &[id], move |g| Ok(vec![(id, g.reshape(&src)?)])))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let out = a.add(&b)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.record(out, &[ia, ib], move |g| Ok(vec![(ia, g.clone()), (ib, g.clone())])))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        let out = a.sub(&b)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.record(out, &[ia, ib], move |g| Ok(vec![(ia, g.clone()), (ib, g.scale(-1.0))])))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let out = a.zip_with(&b, |x, y| x * y)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.record(out, &[ia, ib], move |g| {
            Ok(vec![(ia, g.zip_with(&b, |x, y| x * y)?), (ib, g.zip_with(&a, |x, y| x * y)?)])
        }))
    }

    /// Adds `bias` (shape `[D]`) to every trailing-axis vector.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let d = x.last_dim();
        if b.shape() != [d] {
            return Err(Error::dim(format!("bias {:?} vs trailing extent {d}", b.shape())));
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
        }
        let (ix, ib) = (self.id, bias.id);
        Ok(self.tape.record(out, &[ix, ib], move |g| {
            let mut db = vec![0.0; d];
            for row in g.data().chunks_exact(d) {
                db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            Ok(vec![(ix, g.clone()), (ib, Tensor::from_parts(vec![d], db))])
        }))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        let id = self.id;
        self.tape.record(out, &[id], move |g| Ok(vec![(id, g.scale(s))]))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v + s);
        let id = self.id;
        self.tape.record(out, &[id], move |g| Ok(vec![(id, g.clone())]))
    }

    /// Multiplies every element by the single-element `scalar`.
    pub fn mul_scalar(&self, scalar: Var<'t>) -> Result<Var<'t>> {
        let (x, s) = (self.value(), scalar.value());
        if s.len() != 1 {
            return Err(Error::dim("mul_scalar needs a one-element scalar"));
        }
        let sv = s.data()[0];
        let out = x.scale(sv);
        let (ix, is) = (self.id, scalar.id);
        let shape = s.shape().to_vec();
        Ok(self.tape.record(out, &[ix, is], move |g| {
            let ds: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            Ok(vec![(ix, g.scale(sv)), (is, Tensor::from_parts(shape.clone(), vec![ds]))])
        }))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let id = self.id;
        let yc = y.clone();
        self.tape.record((*y).clone(), &[id], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(yc.data())
                .map(|((gv, xv), yv)| gv * df(*xv, *yv))
                .collect();
            Ok(vec![(id, Tensor::from_parts(g.shape().to_vec(), data))])
        })
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(|v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    /// Softmax of `temperature * self` along `axis` with a learnable
    /// one-element `temperature`.
    pub fn softmax(&self, axis: usize, temperature: Var<'t>) -> Result<Var<'t>> {
        let (x, t) = (self.value(), temperature.value());
        if t.len() != 1 {
            return Err(Error::dim("temperature must be a one-element tensor"));
        }
        let tv = t.data()[0];
        let y = Rc::new(ops::softmax(&x, axis, tv)?);
        let (ix, it) = (self.id, temperature.id);
        let tshape = t.shape().to_vec();
        let yc = y.clone();
        Ok(self.tape.record((*y).clone(), &[ix, it], move |g| {
            let (dx, dt) = ops::softmax_backward(&x, &yc, g, axis, tv)?;
            Ok(vec![(ix, dx), (it, Tensor::from_parts(tshape.clone(), vec![dt]))])
        }))
    }

    /// Softmax with a fixed temperature.
    pub fn softmax_fixed(&self, axis: usize, temperature: f64) -> Result<Var<'t>> {
        let x = self.value();
        let y = Rc::new(ops::softmax(&x, axis, temperature)?);
        let id = self.id;
        let yc = y.clone();
        Ok(self.tape.record((*y).clone(), &[id], move |g| {
            let (dx, _) = ops::softmax_backward(&x, &yc, g, axis, temperature)?;
            Ok(vec![(id, dx)])
        }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let y = Rc::new(ops::log_softmax(&self.value(), axis)?);
        let id = self.id;
        let yc = y.clone();
        Ok(self.tape.record((*y).clone(), &[id], move |g| {
            Ok(vec![(id, ops::log_softmax_backward(&yc, g, axis)?)])
        }))
    }

    pub fn avg_pool(&self, stride: usize) -> Result<Var<'t>> {
        let src = self.shape();
        let out = ops::avg_pool(&self.value(), stride)?;
        let id = self.id;
        Ok(self.tape.record(out, &[id], move |g| {
            Ok(vec![(id, ops::avg_pool_backward(&src, g, stride)?)])
        }))
    }

    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let src = self.shape();
        let out = ops::resize_bilinear(&self.value(), out_h, out_w)?;
        let id = self.id;
        Ok(self.tape.record(out, &[id], move |g| {
            Ok(vec![(id, ops::resize_bilinear_backward(&src, g)?)])
        }))
    }

    /// Bilinear lookup of `self` (`[H, W, D]`) at `coords` (`[n, 2]`, x then y).
    pub fn bilinear_sample(&self, coords: Var<'t>) -> Result<Var<'t>> {
        let (m, c) = (self.value(), coords.value());
        let out = ops::bilinear_sample(&m, &c)?;
        let (im, ic) = (self.id, coords.id);
        Ok(self.tape.record(out, &[im, ic], move |g| {
            let (dm, dc) = ops::bilinear_sample_backward(&m, &c, g)?;
            Ok(vec![(im, dm), (ic, dc)])
        }))
    }

    pub fn conv3x3(&self, kernel: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = (self.value(), kernel.value());
        let out = ops::conv3x3(&m, &k, &bias.value())?;
        let ids = (self.id, kernel.id, bias.id);
        Ok(self.tape.record(out, &[ids.0, ids.1, ids.2], move |g| {
            let (dm, dk, db) = ops::conv3x3_backward(&m, &k, g)?;
            Ok(vec![(ids.0, dm), (ids.1, dk), (ids.2, db)])
        }))
    }

    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, gn) = (self.value(), gain.value());
        let out = ops::layer_norm(&x, &gn, &bias.value())?;
        let ids = (self.id, gain.id, bias.id);
        Ok(self.tape.record(out, &[ids.0, ids.1, ids.2], move |g| {
            let (dx, dg, db) = ops::layer_norm_backward(&x, &gn, g)?;
            Ok(vec![(ids.0, dx), (ids.1, dg), (ids.2, db)])
        }))
    }

    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let src = self.shape();
        let out = ops::slice_last(&self.value(), start, len)?;
        let id = self.id;
        Ok(self.tape.record(out, &[id], move |g| {
            let d = *src.last().unwrap();
            let mut full = vec![0.0; src.iter().product()];
            for (dst, row) in full.chunks_exact_mut(d).zip(g.data().chunks_exact(len)) {
                dst[start..start + len].copy_from_slice(row);
            }
            Ok(vec![(id, Tensor::from_parts(src.clone(), full))])
        }))
    }

    /// Rows `idx` of a matrix (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.rc()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!("row {bad} out of range for {r} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let id = self.id;
        let idx = idx.to_vec();
        Ok(self.tape.record(Tensor::from_parts(vec![idx.len(), c], out), &[id], move |g| {
            let mut dx = vec![0.0; r * c];
            for (k, &i) in idx.iter().enumerate() {
                dx[i * c..(i + 1) * c]
                    .iter_mut()
                    .zip(&g.data()[k * c..(k + 1) * c])
                    .for_each(|(a, b)| *a += b);
            }
            Ok(vec![(id, Tensor::from_parts(vec![r, c], dx))])
        }))
    }

    /// Elements at flat indices, as a vector.
    pub fn gather_flat(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.len()) {
            return Err(Error::dim(format!("index {bad} out of range for {} elements", x.len())));
        }
        let out = idx.iter().map(|&i| x.data()[i]).collect();
        let id = self.id;
        let shape = x.shape().to_vec();
        let idx = idx.to_vec();
        Ok(self.tape.record(Tensor::from_parts(vec![idx.len()], out), &[id], move |g| {
            let mut dx = Tensor::zeros(&shape);
            for (k, &i) in idx.iter().enumerate() {
                dx.data_mut()[i] += g.data()[k];
            }
            Ok(vec![(id, dx)])
        }))
    }

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let id = self.id;
        self.tape.record(Tensor::scalar(x.sum()), &[id], move |g| {
            Ok(vec![(id, Tensor::full(&shape, g.data()[0]))])
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// `sum(self * weights)` for a constant weight tensor.
    pub fn weighted_sum(&self, weights: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        same_shape(&x, weights, "weighted_sum")?;
        let s = x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let id = self.id;
        let w = weights.clone();
        Ok(self.tape.record(Tensor::scalar(s), &[id], move |g| Ok(vec![(id, w.scale(g.data()[0]))])))
    }
}

/// Concatenates along the trailing axis.
pub fn concat_last<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let tape = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?.tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
    let out = ops::concat_last(&refs)?;
    let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let total: usize = widths.iter().sum();
    Ok(tape.record(out, &ids.clone(), move |g| {
        let mut grads = Vec::with_capacity(ids.len());
        let mut start = 0;
        for (k, &w) in widths.iter().enumerate() {
            let data: Vec<f64> = g
                .data()
                .chunks_exact(total)
                .flat_map(|row| row[start..start + w].iter().copied())
                .collect();
            grads.push((ids[k], Tensor::from_parts(shapes[k].clone(), data)));
            start += w;
        }
        Ok(grads)
    }))
}

/// Assembles an `[n_rows, c]` matrix from row blocks: part `k` fills rows
/// `rows[k]`. Rows not covered stay zero; rows covered twice are summed.
pub fn scatter_rows<'t>(n_rows: usize, parts: &[(Var<'t>, Vec<usize>)]) -> Result<Var<'t>> {
    let tape = parts.first().ok_or_else(|| Error::dim("scatter of nothing"))?.0.tape;
    let c = parts[0].0.value().last_dim();
    let mut out = vec![0.0; n_rows * c];
    for (v, rows) in parts {
        let val = v.value();
        if val.rc()? != (rows.len(), c) {
            return Err(Error::dim(format!(
                "scatter block {:?} does not match {} rows x {c}",
                val.shape(),
                rows.len()
            )));
        }
        for (k, &r) in rows.iter().enumerate() {
            if r >= n_rows {
                return Err(Error::dim(format!("scatter row {r} out of range")));
            }
            out[r * c..(r + 1) * c]
                .iter_mut()
                .zip(&val.data()[k * c..(k + 1) * c])
                .for_each(|(a, b)| *a += b);
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.0.id).collect();
    let row_sets: Vec<Vec<usize>> = parts.iter().map(|p| p.1.clone()).collect();
    Ok(tape.record(Tensor::from_parts(vec![n_rows, c], out), &ids.clone(), move |g| {
        Ok(ids
            .iter()
            .zip(&row_sets)
            .map(|(&id, rows)| {
                let data = rows
                    .iter()
                    .flat_map(|&r| g.data()[r * c..(r + 1) * c].iter().copied())
                    .collect();
                (id, Tensor::from_parts(vec![rows.len(), c], data))
            })
            .collect())
    }))
}

/// Central-difference gradient check.
///
/// `f` builds a scalar from the given inputs on a fresh tape. Returns the
/// maximum elementwise relative error `|a - n| / max(|a|, |n|, 1e-8)` between
/// the analytic gradient `a` and the numeric gradient `n`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(Error::dim("grad_check needs a scalar-valued function"));
        }
        Ok(v.data()[0])
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        if !a.all_finite() {
            return Err(Error::Numeric(format!("non-finite analytic gradient for input {k}")));
        }
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite numeric gradient at input {k}[{i}]")));
            }
            let an = a.data()[i];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
