//! Multiply-add scaling of the attention core: local adaptive-span attention
//! against full global attention on the stride-8 grid.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_full, attend_local, compute_span, SpanPolicy};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::flow::FlowMap;
use crate::instrument;
use crate::matcher::COARSE_STRIDE;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub dim: usize,
    pub samples_per_axis: usize,
    pub cell_size: usize,
    pub n_sigma: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { dim: 64, samples_per_axis: 8, cell_size: 4, n_sigma: 5.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub image_px: usize,
    pub grid: usize,
    pub tokens: usize,
    pub tokens_per_query: usize,
    pub local_macs: u64,
    pub full_macs: u64,
    pub local_ms: f64,
    pub full_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of `ln(macs)` against `ln(tokens)`.
    pub local_slope: f64,
    pub full_slope: f64,
}

impl ScalingTable {
    pub fn all_finite(&self) -> bool {
        self.local_slope.is_finite()
            && self.full_slope.is_finite()
            && self.rows.iter().all(|r| r.local_ms.is_finite() && r.full_ms.is_finite())
    }
}

/// Least-squares slope of `y` on `x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(Error::Input("slope fit needs two or more positive points".into()));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("slope fit needs distinct sizes".into()));
    }
    Ok(sxy / sxx)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Counts attention-core work (scores, weighted sums and sampling; not the
/// projections) for one square image of `image_px` pixels.
pub fn bench_size(image_px: usize, cfg: &BenchConfig) -> Result<ScalingRow> {
    if image_px == 0 || image_px % COARSE_STRIDE != 0 {
        return Err(Error::Config(format!("benchmark size {image_px} must be a positive multiple of 8")));
    }
    let n = image_px / COARSE_STRIDE;
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ image_px as u64);
    let q = random(&mut rng, &[n * n, d]);
    let k = random(&mut rng, &[n, n, d]);
    let v = random(&mut rng, &[n, n, d]);
    let flow_cells: Vec<f64> = (0..n * n)
        .flat_map(|c| {
            let (i, j) = ((c / n) as f64, (c % n) as f64);
            [COARSE_STRIDE as f64 * j + 3.5, COARSE_STRIDE as f64 * i + 3.5, 8.0, 8.0]
        })
        .collect();
    let flow = FlowMap {
        grid: Tensor::from_parts(vec![n, n, 4], flow_cells),
        stride: COARSE_STRIDE,
        image_extent: (image_px, image_px),
    };
    let spans = compute_span(&flow, cfg.cell_size, SpanPolicy::Adaptive { n_sigma: cfg.n_sigma }, (n, n), cfg.samples_per_axis)?;
    let tau = 1.0 / (d as f64).sqrt();

    let tape = Tape::new();
    let (qv, kv, vv, t) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), tape.constant(Tensor::scalar(tau)));
    let start = Instant::now();
    let (_, local_macs) = instrument::count(|| attend_local(qv, kv, vv, &spans, t));
    let local_ms = start.elapsed().as_secs_f64() * 1e3;

    let kf = tape.constant(k.into_shape(&[n * n, d])?);
    let vf = tape.constant(v.into_shape(&[n * n, d])?);
    let start = Instant::now();
    let (_, full_macs) = instrument::count(|| attend_full(qv, kf, vf, t));
    let full_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(ScalingRow {
        image_px,
        grid: n,
        tokens: n * n,
        tokens_per_query: spans.tokens_per_query(),
        local_macs,
        full_macs,
        local_ms,
        full_ms,
    })
}

pub fn run_bench(sizes: &[usize], cfg: &BenchConfig) -> Result<ScalingTable> {
    let rows = sizes.iter().map(|&s| bench_size(s, cfg)).collect::<Result<Vec<_>>>()?;
    let fit = |f: fn(&ScalingRow) -> u64| loglog_slope(&rows.iter().map(|r| (r.tokens as f64, f(r) as f64)).collect::<Vec<_>>());
    Ok(ScalingTable { local_slope: fit(|r| r.local_macs)?, full_slope: fit(|r| r.full_macs)?, rows })
}
