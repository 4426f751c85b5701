//! 2D sinusoidal positional encoding and its resolution-normalized variant.
//!
//! Channel `4k`/`4k+1` carry `sin`/`cos` of `w_k * x` and `4k+2`/`4k+3` carry
//! `sin`/`cos` of `w_k * y`, with `w_k = 10000^(-4k/D)`. `x` indexes columns
//! and `y` rows of the feature grid.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PEMap {
    pub grid: Tensor,
    pub frequencies: Vec<f64>,
    /// `(H_train, W_train)` the coordinates were normalized to.
    pub train_extent: (usize, usize),
}

impl PEMap {
    /// Width and height scale factors `(alpha, beta)` applied to `(x, y)`.
    pub fn scales(&self) -> (f64, f64) {
        let (h, w, _) = self.grid.hwd().expect("PE grid is rank 3");
        (self.train_extent.1 as f64 / w as f64, self.train_extent.0 as f64 / h as f64)
    }
}

fn frequencies(d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::param(format!("encoding width must be a positive multiple of 4, got {d}")));
    }
    Ok((0..d / 4).map(|k| 10000f64.powf(-(4.0 * k as f64) / d as f64)).collect())
}

fn encode(h: usize, w: usize, d: usize, alpha: f64, beta: f64, freqs: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(h * w * d);
    for i in 0..h {
        let y = i as f64 * beta;
        for j in 0..w {
            let x = j as f64 * alpha;
            for &wk in freqs {
                data.extend_from_slice(&[(wk * x).sin(), (wk * x).cos(), (wk * y).sin(), (wk * y).cos()]);
            }
        }
    }
    Tensor::from_parts(vec![h, w, d], data)
}

pub fn sinusoidal_pe(h: usize, w: usize, d: usize) -> Result<PEMap> {
    let freqs = frequencies(d)?;
    Ok(PEMap { grid: encode(h, w, d, 1.0, 1.0, &freqs), frequencies: freqs, train_extent: (h, w) })
}

/// Encoding on an `h_test x w_test` grid with coordinates rescaled by
/// `alpha = W_train / W_test` and `beta = H_train / H_test`.
pub fn normalized_pe(h_test: usize, w_test: usize, train_extent: (usize, usize), d: usize) -> Result<PEMap> {
    if h_test == 0 || w_test == 0 {
        return Err(Error::param("test extent must be non-zero"));
    }
    if train_extent.0 == 0 || train_extent.1 == 0 {
        return Err(Error::param("train extent must be non-zero"));
    }
    let freqs = frequencies(d)?;
    if (h_test, w_test) == train_extent {
        return Ok(PEMap { grid: encode(h_test, w_test, d, 1.0, 1.0, &freqs), frequencies: freqs, train_extent });
    }
    let alpha = train_extent.1 as f64 / w_test as f64;
    let beta = train_extent.0 as f64 / h_test as f64;
    Ok(PEMap { grid: encode(h_test, w_test, d, alpha, beta, &freqs), frequencies: freqs, train_extent })
}

pub fn add_pe(f: &FeatureMap, pe: &PEMap) -> Result<FeatureMap> {
    if f.grid.shape() != pe.grid.shape() {
        return Err(Error::dim(format!(
            "feature map {:?} and encoding {:?} differ",
            f.grid.shape(),
            pe.grid.shape()
        )));
    }
    Ok(FeatureMap { grid: f.grid.add(&pe.grid)?, ..f.clone() })
}
