//! Attention kernels: full global cross attention and adaptive-span local
//! cross attention.
//!
//! Local attention partitions the query map into `S x S` cells. Every cell
//! gets a rectangle on the target grid centered on the cell's mean flow and
//! sized from its mean standard deviation; `g x g` tokens are bilinearly
//! sampled uniformly over that rectangle and every query of the cell attends
//! to exactly those tokens.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{scatter_rows, Var};
use crate::error::{Error, Result};
use crate::flow::{pixel_to_grid, FlowMap};
use crate::nn::Linear;
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// Levels indexing the learnable temperatures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fine = 0,
    Medium = 1,
    Coarse = 2,
}

/// Softmax temperatures `(tau_f, tau_m, tau_c)`, stored as logarithms.
#[derive(Clone, Copy, Debug)]
pub struct TemperatureSet {
    pub log_tau: ParamId,
}

impl TemperatureSet {
    pub fn declare<R: Rng>(b: &mut ParamBuilder<R>, name: &str, init: f64) -> Result<Self> {
        if init <= 0.0 {
            return Err(Error::param("temperatures must start positive"));
        }
        Ok(TemperatureSet { log_tau: b.constant(name, &[3], init.ln())? })
    }

    pub fn get<'t>(&self, p: &Bound<'t>, level: Level) -> Result<Var<'t>> {
        Ok(p.var(self.log_tau).gather_flat(&[level as usize])?.exp())
    }
}

/// Query/key/value projections for one level.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl Projection {
    pub fn declare<R: Rng>(b: &mut ParamBuilder<R>, name: &str, d: usize) -> Result<Self> {
        b.push_scope(name);
        let out = Projection {
            q: Linear::declare(b, "q", d, d)?,
            k: Linear::declare(b, "k", d, d)?,
            v: Linear::declare(b, "v", d, d)?,
        };
        b.pop_scope();
        Ok(out)
    }
}

fn map_extent(v: &Var<'_>) -> Result<(usize, usize, usize)> {
    match v.shape()[..] {
        [h, w, d] => Ok((h, w, d)),
        ref s => Err(Error::dim(format!("expected [H, W, D] map, got {s:?}"))),
    }
}

/// `softmax(tau * q k^T) v` over all target tokens; `q: [n, D]`, `k, v: [m, D]`.
pub fn attend_full<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, tau: Var<'t>) -> Result<Var<'t>> {
    q.matmul_nt(k)?.softmax(1, tau)?.matmul(v)
}

/// Full cross attention from `source` queries to `target` keys/values.
/// Returns a message map with the source's extent.
pub fn global_attention<'t>(
    p: &Bound<'t>,
    proj: &Projection,
    source: Var<'t>,
    target: Var<'t>,
    tau: Var<'t>,
) -> Result<Var<'t>> {
    let (h, w, d) = map_extent(&source)?;
    let (ht, wt, dt) = map_extent(&target)?;
    if d != dt {
        return Err(Error::dim(format!("source width {d} differs from target width {dt}")));
    }
    let q = proj.q.forward(p, source.reshape(&[h * w, d])?)?;
    let tf = target.reshape(&[ht * wt, d])?;
    let k = proj.k.forward(p, tf)?;
    let v = proj.v.forward(p, tf)?;
    attend_full(q, k, v, tau)?.reshape(&[h, w, d])
}

/// One query cell and its sampled attention span.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanCell {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    /// Rectangle center `(x, y)` in target grid units, before clipping.
    pub center: (f64, f64),
    /// Half-extents `(h_x, h_y)` in target grid units, before clipping.
    pub half: (f64, f64),
    /// Clipped rectangle `[x0, x1] x [y0, y1]`.
    pub rect: ((f64, f64), (f64, f64)),
    /// `[g * g, 2]` sample coordinates `(x, y)`, row-major over the span.
    pub samples: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanGrid {
    pub cells: Vec<SpanCell>,
    pub query_extent: (usize, usize),
    pub target_extent: (usize, usize),
    pub samples_per_axis: usize,
}

/// How half-extents are chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpanPolicy {
    /// `n_sigma * mean sigma` of the cell.
    Adaptive { n_sigma: f64 },
    /// The same half-extent everywhere, in image pixels.
    Fixed { half_extent_px: f64 },
}

fn uniform_samples(rect: ((f64, f64), (f64, f64)), g: usize) -> Tensor {
    let ((x0, x1), (y0, y1)) = rect;
    let step = |lo: f64, hi: f64, k: usize| {
        if g == 1 {
            (lo + hi) / 2.0
        } else {
            lo + (hi - lo) * k as f64 / (g - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(2 * g * g);
    for r in 0..g {
        let y = step(y0, y1, r);
        for c in 0..g {
            data.extend_from_slice(&[step(x0, x1, c), y]);
        }
    }
    Tensor::from_parts(vec![g * g, 2], data)
}

fn cell_ranges(n: usize, s: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(s)).map(|k| k * s..((k + 1) * s).min(n)).collect()
}

/// Clamp of a center/half-extent pair to `[0, n - 1]`.
fn clip_axis(center: f64, half: f64, n: usize) -> (f64, f64) {
    let max = (n - 1) as f64;
    let c = center.clamp(0.0, max);
    ((c - half).max(0.0), (c + half).min(max))
}

/// Builds the attention spans for a query map whose flow is `flow` (at the
/// query level's stride) against a target grid of `target_extent`.
pub fn compute_span(
    flow: &FlowMap,
    cell_size: usize,
    policy: SpanPolicy,
    target_extent: (usize, usize),
    g: usize,
) -> Result<SpanGrid> {
    if cell_size == 0 || g == 0 {
        return Err(Error::param("cell size and samples per axis must be positive"));
    }
    if target_extent.0 == 0 || target_extent.1 == 0 {
        return Err(Error::param("target grid is empty"));
    }
    let (h, w) = flow.extent();
    let stride = flow.stride as f64;
    let h_min = (g as f64 - 1.0) / 2.0;
    let mut cells = Vec::new();
    for rows in cell_ranges(h, cell_size) {
        for cols in cell_ranges(w, cell_size) {
            let mut acc = [0.0; 4];
            for i in rows.clone() {
                for j in cols.clone() {
                    acc.iter_mut().zip(flow.cell(i, j)).for_each(|(a, v)| *a += v);
                }
            }
            let n = (rows.len() * cols.len()) as f64;
            let [ux, uy, sx, sy] = acc.map(|v| v / n);
            let center = (pixel_to_grid(ux, flow.stride), pixel_to_grid(uy, flow.stride));
            let (hx, hy) = match policy {
                SpanPolicy::Adaptive { n_sigma } => (n_sigma * sx / stride, n_sigma * sy / stride),
                SpanPolicy::Fixed { half_extent_px } => (half_extent_px / stride, half_extent_px / stride),
            };
            let half = (hx.max(h_min), hy.max(h_min));
            let rect = (
                clip_axis(center.0, half.0, target_extent.1),
                clip_axis(center.1, half.1, target_extent.0),
            );
            let samples = uniform_samples(rect, g);
            cells.push(SpanCell { rows: rows.clone(), cols, center, half, rect, samples });
        }
    }
    Ok(SpanGrid { cells, query_extent: (h, w), target_extent, samples_per_axis: g })
}

impl SpanGrid {
    /// Every cell spans the whole target grid.
    pub fn full(query_extent: (usize, usize), cell_size: usize, target_extent: (usize, usize), g: usize) -> SpanGrid {
        let (ht, wt) = target_extent;
        let center = ((wt as f64 - 1.0) / 2.0, (ht as f64 - 1.0) / 2.0);
        let rect = ((0.0, wt as f64 - 1.0), (0.0, ht as f64 - 1.0));
        let mut cells = Vec::new();
        for rows in cell_ranges(query_extent.0, cell_size) {
            for cols in cell_ranges(query_extent.1, cell_size) {
                cells.push(SpanCell { rows: rows.clone(), cols, center, half: center, rect, samples: uniform_samples(rect, g) });
            }
        }
        SpanGrid { cells, query_extent, target_extent, samples_per_axis: g }
    }

    pub fn tokens_per_query(&self) -> usize {
        self.samples_per_axis * self.samples_per_axis
    }
}

/// Local attention core on projected maps: `q: [n, D]` row-major over the
/// query grid, `k_map, v_map: [Ht, Wt, D]`.
pub fn attend_local<'t>(
    q: Var<'t>,
    k_map: Var<'t>,
    v_map: Var<'t>,
    spans: &SpanGrid,
    tau: Var<'t>,
) -> Result<Var<'t>> {
    let (h, w) = spans.query_extent;
    let (n, _) = q.value().rc()?;
    if n != h * w {
        return Err(Error::dim(format!("{n} queries for a {h}x{w} span grid")));
    }
    let (ht, wt, _) = map_extent(&k_map)?;
    if (ht, wt) != spans.target_extent {
        return Err(Error::dim(format!(
            "spans built for {:?}, target is {ht}x{wt}",
            spans.target_extent
        )));
    }
    let tape = q.tape();
    let mut parts = Vec::with_capacity(spans.cells.len());
    for cell in &spans.cells {
        let idx: Vec<usize> = cell.rows.clone().flat_map(|i| cell.cols.clone().map(move |j| i * w + j)).collect();
        let coords = tape.constant(cell.samples.clone());
        let ks = k_map.bilinear_sample(coords)?;
        let vs = v_map.bilinear_sample(coords)?;
        let qc = q.gather_rows(&idx)?;
        let msg = qc.matmul_nt(ks)?.softmax(1, tau)?.matmul(vs)?;
        parts.push((msg, idx));
    }
    scatter_rows(n, &parts)
}

/// Adaptive-span cross attention from `source` to `target` on one level.
pub fn local_cross_attention<'t>(
    p: &Bound<'t>,
    proj: &Projection,
    source: Var<'t>,
    target: Var<'t>,
    spans: &SpanGrid,
    tau: Var<'t>,
) -> Result<Var<'t>> {
    let (h, w, d) = map_extent(&source)?;
    let (_, _, dt) = map_extent(&target)?;
    if d != dt {
        return Err(Error::dim(format!("source width {d} differs from target width {dt}")));
    }
    if spans.query_extent != (h, w) {
        return Err(Error::dim(format!("spans built for {:?}, source is {h}x{w}", spans.query_extent)));
    }
    let q = proj.q.forward(p, source.reshape(&[h * w, d])?)?;
    let k = proj.k.forward(p, target)?;
    let v = proj.v.forward(p, target)?;
    attend_local(q, k, v, spans, tau)?.reshape(&[h, w, d])
}

/// Multiply-add counts of one attention call, for the scaling benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCount {
    pub grid: (usize, usize),
    pub queries: usize,
    pub tokens_per_query: usize,
    pub macs: u64,
}
