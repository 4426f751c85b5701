//! Probabilistic flow maps: regression head, Gaussian density, level pooling
//! and the flow negative log-likelihood.
//!
//! Flow coordinates are image pixels with pixel centers on integers. A cell
//! `c` of a stride-`s` grid is centered on pixel `s * c + (s - 1) / 2`;
//! [`pixel_to_grid`] and [`grid_to_pixel`] convert between the two.

use std::f64::consts::PI;

use rand::Rng;

use crate::autograd::{concat_last, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::ops;
use crate::params::{Bound, ParamBuilder};
use crate::tensor::Tensor;

pub const FLOW_HEAD_HIDDEN: usize = 64;

#[inline]
pub fn pixel_to_grid(p: f64, stride: usize) -> f64 {
    (p - (stride as f64 - 1.0) / 2.0) / stride as f64
}

#[inline]
pub fn grid_to_pixel(g: f64, stride: usize) -> f64 {
    g * stride as f64 + (stride as f64 - 1.0) / 2.0
}

/// Per-cell `(u_x, u_y, sigma_x, sigma_y)` in image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    pub grid: Tensor,
    pub stride: usize,
    pub image_extent: (usize, usize),
}

impl FlowMap {
    pub fn extent(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }

    pub fn cell(&self, i: usize, j: usize) -> [f64; 4] {
        let w = self.grid.shape()[1];
        let o = (i * w + j) * 4;
        self.grid.data()[o..o + 4].try_into().unwrap()
    }

    /// JSON sidecar carrying what the tensor file cannot.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "stride": self.stride,
            "image_extent": [self.image_extent.0, self.image_extent.1],
            "channels": ["u_x", "u_y", "sigma_x", "sigma_y"],
        })
    }

    pub fn from_parts(grid: Tensor, sidecar: &serde_json::Value) -> Result<FlowMap> {
        let bad = || Error::Format("flow sidecar lacks stride/image_extent".into());
        let stride = sidecar["stride"].as_u64().ok_or_else(bad)? as usize;
        let ext = sidecar["image_extent"].as_array().ok_or_else(bad)?;
        let h = ext.first().and_then(|v| v.as_u64()).ok_or_else(bad)? as usize;
        let w = ext.get(1).and_then(|v| v.as_u64()).ok_or_else(bad)? as usize;
        if grid.rank() != 3 || grid.last_dim() != 4 {
            return Err(Error::Format(format!("flow grid must be [H, W, 4], got {:?}", grid.shape())));
        }
        Ok(FlowMap { grid, stride, image_extent: (h, w) })
    }
}

/// The `(D, 64, 4)` regression MLP.
#[derive(Clone, Debug)]
pub struct FlowHeadWeights {
    pub mlp: Mlp,
}

impl FlowHeadWeights {
    pub fn declare<R: Rng>(b: &mut ParamBuilder<R>, name: &str, d: usize) -> Result<Self> {
        b.push_scope(name);
        let layers = vec![
            Linear::declare(b, "l0", d, FLOW_HEAD_HIDDEN)?,
            Linear::declare_zeroed(b, "l1", FLOW_HEAD_HIDDEN, 4)?,
        ];
        b.pop_scope();
        Ok(FlowHeadWeights { mlp: Mlp { layers } })
    }
}

/// Differentiable flow prediction for one image, flattened row-major.
#[derive(Clone, Copy, Debug)]
pub struct FlowPrediction<'t> {
    /// `[n, 2]` means in pixels.
    pub mean: Var<'t>,
    /// `[n, 2]` log standard deviations.
    pub log_sigma: Var<'t>,
    pub extent: (usize, usize),
    pub stride: usize,
    pub image_extent: (usize, usize),
}

impl<'t> FlowPrediction<'t> {
    pub fn to_flow_map(&self) -> FlowMap {
        let (h, w) = self.extent;
        let u = self.mean.value();
        let s = self.log_sigma.value();
        let mut data = Vec::with_capacity(h * w * 4);
        for k in 0..h * w {
            data.extend_from_slice(&[u.data()[2 * k], u.data()[2 * k + 1], s.data()[2 * k].exp(), s.data()[2 * k + 1].exp()]);
        }
        FlowMap { grid: Tensor::from_parts(vec![h, w, 4], data), stride: self.stride, image_extent: self.image_extent }
    }
}

/// Regresses a flow map from a stride-`stride` feature map `[H, W, D]`:
/// `u = sigmoid(f[:2]) * (W_img, H_img)`, `sigma = stride * exp(f[2:])`.
/// The head's output layer starts at zero, so an untrained head predicts the
/// image center with one-cell uncertainty.
pub fn regress_flow<'t>(
    p: &Bound<'t>,
    head: &FlowHeadWeights,
    features: Var<'t>,
    stride: usize,
    image_extent: (usize, usize),
) -> Result<FlowPrediction<'t>> {
    let shape = features.shape();
    let (h, w, d) = match shape[..] {
        [h, w, d] => (h, w, d),
        _ => return Err(Error::dim(format!("flow head needs [H, W, D], got {shape:?}"))),
    };
    let f = head.mlp.forward(p, features.reshape(&[h * w, d])?)?;
    let tape = features.tape();
    let scale = Tensor::new(
        vec![h * w, 2],
        (0..h * w).flat_map(|_| [image_extent.1 as f64, image_extent.0 as f64]).collect(),
    )?;
    let mean = f.slice_last(0, 2)?.sigmoid().mul(tape.constant(scale))?;
    let log_sigma = f.slice_last(2, 2)?.add_scalar((stride as f64).ln());
    Ok(FlowPrediction { mean, log_sigma, extent: (h, w), stride, image_extent })
}

/// Axis-aligned 2D Gaussian density of `(x, y)` under one flow cell.
pub fn gaussian_prob(cell: [f64; 4], x: f64, y: f64) -> Result<f64> {
    let [ux, uy, sx, sy] = cell;
    if !(sx > 0.0 && sy > 0.0) {
        return Err(Error::Domain(format!("standard deviations must be positive, got ({sx}, {sy})")));
    }
    let e = -(x - ux).powi(2) / (2.0 * sx * sx) - (y - uy).powi(2) / (2.0 * sy * sy);
    Ok(e.exp() / (2.0 * PI * sx * sy))
}

/// Channelwise strided average pooling; the stride field is multiplied.
pub fn pool_flow(flow: &FlowMap, stride_factor: usize) -> Result<FlowMap> {
    Ok(FlowMap {
        grid: ops::avg_pool(&flow.grid, stride_factor)?,
        stride: flow.stride * stride_factor,
        image_extent: flow.image_extent,
    })
}

/// Ground truth for one flow direction: target pixel per cell and whether
/// the cell is supervised.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTarget {
    /// `[n, 2]` pixels.
    pub coords: Tensor,
    pub visible: Vec<bool>,
}

impl FlowTarget {
    pub fn supervised(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FlowLoss<'t> {
    pub loss: Var<'t>,
    /// Set when no cell in any block was supervised.
    pub empty: bool,
}

/// Per-cell reduced negative log-likelihood for one prediction, summed over
/// visible cells. Returns `None` when nothing is visible.
fn masked_nll_sum<'t>(pred: &FlowPrediction<'t>, target: &FlowTarget) -> Result<Option<Var<'t>>> {
    let idx: Vec<usize> = target.visible.iter().enumerate().filter(|(_, &v)| v).map(|(k, _)| k).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let n = pred.mean.value().rc()?.0;
    if target.visible.len() != n || target.coords.shape() != [n, 2] {
        return Err(Error::dim(format!(
            "flow target for {} cells does not match prediction of {n}",
            target.visible.len()
        )));
    }
    let tape = pred.mean.tape();
    let u = pred.mean.gather_rows(&idx)?;
    let w = pred.log_sigma.gather_rows(&idx)?;
    let gt_rows: Vec<f64> = idx.iter().flat_map(|&k| [target.coords.data()[2 * k], target.coords.data()[2 * k + 1]]).collect();
    let gt = tape.constant(Tensor::from_parts(vec![idx.len(), 2], gt_rows));
    let resid2 = gt.sub(u)?.square();
    let precision = w.scale(-2.0).exp();
    let per = w.add(precision.mul(resid2)?.scale(0.5))?;
    Ok(Some(per.sum()))
}

/// Flow loss over blocks: for each block, the mean over supervised cells of
/// both directions of `w_x + w_y + e^{-2w_x}(x-u_x)^2/2 + e^{-2w_y}(y-u_y)^2/2`,
/// averaged over blocks. Blocks contribute equally.
pub fn flow_loss<'t>(
    flows_per_block: &[(FlowPrediction<'t>, FlowPrediction<'t>)],
    targets: (&FlowTarget, &FlowTarget),
) -> Result<FlowLoss<'t>> {
    let first = flows_per_block.first().ok_or_else(|| Error::dim("flow loss over zero blocks"))?;
    let tape = first.0.mean.tape();
    let count = targets.0.supervised() + targets.1.supervised();
    if count == 0 {
        return Ok(FlowLoss { loss: tape.constant(Tensor::scalar(0.0)), empty: true });
    }
    let mut terms = Vec::new();
    for (fa, fb) in flows_per_block {
        for (pred, tgt) in [(fa, targets.0), (fb, targets.1)] {
            if let Some(t) = masked_nll_sum(pred, tgt)? {
                terms.push(t);
            }
        }
    }
    let total = concat_last(&terms)?.sum();
    let scale = 1.0 / (count as f64 * flows_per_block.len() as f64);
    Ok(FlowLoss { loss: total.scale(scale), empty: false })
}
