//! Dense layers built from tape primitives.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Identity => x,
        }
    }
}

/// Affine map `x W + b` over the trailing axis, `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn declare<R: Rng>(b: &mut ParamBuilder<R>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        b.push_scope(name);
        let weight = b.glorot("weight", &[d_in, d_out], d_in, d_out)?;
        let bias = b.constant("bias", &[d_out], 0.0)?;
        b.pop_scope();
        Ok(Linear { weight, bias, d_in, d_out })
    }

    /// A layer that starts as the zero map.
    pub fn declare_zeroed<R: Rng>(b: &mut ParamBuilder<R>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        b.push_scope(name);
        let weight = b.constant("weight", &[d_in, d_out], 0.0)?;
        let bias = b.constant("bias", &[d_out], 0.0)?;
        b.pop_scope();
        Ok(Linear { weight, bias, d_in, d_out })
    }

    /// Applies to an `[n, d_in]` matrix or an `[H, W, d_in]` map.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let d = *shape.last().unwrap_or(&0);
        if d != self.d_in {
            return Err(Error::dim(format!("linear expects {} channels, got {d}", self.d_in)));
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = if shape.len() == 2 { x } else { x.reshape(&[rows, d])? };
        let y = flat.matmul(p.var(self.weight))?.add_bias(p.var(self.bias))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape.clone();
            *out.last_mut().unwrap() = self.d_out;
            y.reshape(&out)
        }
    }
}

/// Affine layers with ReLU between them and nothing after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width, e.g. `[D, 64, 4]`.
    pub fn declare<R: Rng>(b: &mut ParamBuilder<R>, name: &str, dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least two widths".into()));
        }
        b.push_scope(name);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::declare(b, &format!("l{k}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>();
        b.pop_scope();
        Ok(Mlp { layers: layers? })
    }

    /// Applies to an `[n, D0]` matrix or an `[H, W, D0]` map.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let pairs: Vec<(Var<'t>, Var<'t>)> =
            self.layers.iter().map(|l| (p.var(l.weight), p.var(l.bias))).collect();
        let shape = x.shape();
        if shape.len() == 2 {
            return mlp_forward(x, &pairs, Activation::Relu);
        }
        let d = *shape.last().unwrap_or(&0);
        let rows = shape[..shape.len().saturating_sub(1)].iter().product::<usize>();
        let y = mlp_forward(x.reshape(&[rows, d])?, &pairs, Activation::Relu)?;
        let mut out = shape;
        *out.last_mut().unwrap() = y.shape()[1];
        y.reshape(&out)
    }
}

/// Runs `x` through `(weight, bias)` layers with `activation` between layers
/// and none after the last. `x` is `[n, D0]`; weights are `[D_k, D_{k+1}]`.
pub fn mlp_forward<'t>(x: Var<'t>, layers: &[(Var<'t>, Var<'t>)], activation: Activation) -> Result<Var<'t>> {
    let mut h = x;
    for (k, (w, b)) in layers.iter().enumerate() {
        let (wi, _) = w.value().rc()?;
        let d = h.value().last_dim();
        if wi != d {
            return Err(Error::dim(format!("layer {k} expects {wi} inputs, got {d}")));
        }
        h = h.matmul(*w)?.add_bias(*b)?;
        if k + 1 < layers.len() {
            h = activation.apply(h);
        }
    }
    Ok(h)
}
