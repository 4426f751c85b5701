//! Held-out diagnostics: per-block flow end-point error, uncertainty split by
//! matchability, and match precision/recall against the true warp.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::{FlowMap, FlowTarget};
use crate::matcher::{MatchSet, COARSE_STRIDE};
use crate::model::{Model, PairTargets};
use crate::synth::SynthPair;

pub const PIXEL_THRESHOLDS: [f64; 2] = [2.0, 5.0];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    /// Mean flow end-point error (pixels) over visible cells, per block.
    pub epe_per_block: Vec<f64>,
    /// Mean `(sigma_x + sigma_y) / 2` over visible cells, final block.
    pub sigma_matchable: f64,
    /// Same over out-of-frame or occluded cells; `None` when there are none.
    pub sigma_unmatchable: Option<f64>,
    pub precision_2px: f64,
    pub precision_5px: f64,
    pub recall_2px: f64,
    pub recall_5px: f64,
    pub mean_matches: f64,
}

impl EvalReport {
    pub fn all_finite(&self) -> bool {
        let scalars = [
            self.sigma_matchable,
            self.sigma_unmatchable.unwrap_or(0.0),
            self.precision_2px,
            self.precision_5px,
            self.recall_2px,
            self.recall_5px,
            self.mean_matches,
        ];
        scalars.iter().chain(&self.epe_per_block).all(|v| v.is_finite())
    }
}

/// Per-pair sums that aggregate into an [`EvalReport`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairStats {
    pub epe_sum: Vec<f64>,
    pub epe_count: usize,
    pub sigma_vis: (f64, usize),
    pub sigma_invis: (f64, usize),
    pub matches: usize,
    /// Correct matches at each of [`PIXEL_THRESHOLDS`].
    pub correct: [usize; 2],
    pub gt_matches: usize,
}

/// Counts fine matches whose B coordinate lies within each threshold of
/// the true warp of their A coordinate.
pub fn match_correctness(matches: &MatchSet, pair: &SynthPair) -> [usize; 2] {
    let warp = pair.pixel_warp();
    let mut correct = [0; 2];
    for m in &matches.fine {
        let (gx, gy) = warp.apply(m.x_a, m.y_a);
        let err = ((m.x_b - gx).powi(2) + (m.y_b - gy).powi(2)).sqrt();
        for (c, t) in correct.iter_mut().zip(PIXEL_THRESHOLDS) {
            if err <= t {
                *c += 1;
            }
        }
    }
    correct
}

/// Flow end-point error and sigma sums of one flow map against its target.
pub fn flow_stats(flow: &FlowMap, target: &FlowTarget) -> (f64, usize, (f64, usize), (f64, usize)) {
    let (h, w) = flow.extent();
    let (mut epe, mut n) = (0.0, 0);
    let (mut vis, mut invis) = ((0.0, 0), (0.0, 0));
    for k in 0..h * w {
        let [ux, uy, sx, sy] = flow.cell(k / w, k % w);
        let s = 0.5 * (sx + sy);
        if target.visible[k] {
            let (gx, gy) = (target.coords.data()[2 * k], target.coords.data()[2 * k + 1]);
            epe += ((ux - gx).powi(2) + (uy - gy).powi(2)).sqrt();
            n += 1;
            vis.0 += s;
            vis.1 += 1;
        } else {
            invis.0 += s;
            invis.1 += 1;
        }
    }
    (epe, n, vis, invis)
}

pub fn pair_stats(model: &Model, pair: &SynthPair) -> Result<PairStats> {
    let out = model.match_images(&pair.image_a, &pair.image_b)?;
    let targets = PairTargets::from_pair(pair)?;
    let mut stats = PairStats { epe_sum: vec![0.0; out.flows.len()], ..Default::default() };
    for (b, (fa, fb)) in out.flows.iter().enumerate() {
        let last = b + 1 == out.flows.len();
        for (flow, target) in [(fa, &targets.flow_a), (fb, &targets.flow_b)] {
            let (e, n, vis, invis) = flow_stats(flow, target);
            stats.epe_sum[b] += e;
            if b == 0 {
                stats.epe_count += n;
            }
            if last {
                stats.sigma_vis.0 += vis.0;
                stats.sigma_vis.1 += vis.1;
                stats.sigma_invis.0 += invis.0;
                stats.sigma_invis.1 += invis.1;
            }
        }
    }
    debug_assert_eq!(out.flows.first().map(|f| f.0.stride), Some(COARSE_STRIDE));
    stats.matches = out.matches.fine.len();
    stats.correct = match_correctness(&out.matches, pair);
    stats.gt_matches = targets.matches.len();
    Ok(stats)
}

/// Aggregates pair statistics; ratios use pooled counts.
pub fn aggregate(stats: &[PairStats]) -> EvalReport {
    let blocks = stats.first().map_or(0, |s| s.epe_sum.len());
    let epe_count: usize = stats.iter().map(|s| s.epe_count).sum();
    let epe_per_block = (0..blocks)
        .map(|b| stats.iter().map(|s| s.epe_sum[b]).sum::<f64>() / epe_count.max(1) as f64)
        .collect();
    let pool = |f: fn(&PairStats) -> (f64, usize)| {
        let (s, n) = stats.iter().map(f).fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        (n > 0).then(|| s / n as f64)
    };
    let matches: usize = stats.iter().map(|s| s.matches).sum();
    let gt: usize = stats.iter().map(|s| s.gt_matches).sum();
    let correct = |k: usize| stats.iter().map(|s| s.correct[k]).sum::<usize>() as f64;
    let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
    EvalReport {
        n_pairs: stats.len(),
        epe_per_block,
        sigma_matchable: pool(|s| s.sigma_vis).unwrap_or(0.0),
        sigma_unmatchable: pool(|s| s.sigma_invis),
        precision_2px: ratio(correct(0), matches),
        precision_5px: ratio(correct(1), matches),
        recall_2px: ratio(correct(0), gt).min(1.0),
        recall_5px: ratio(correct(1), gt).min(1.0),
        mean_matches: ratio(matches as f64, stats.len()),
    }
}

/// Evaluates `model` on `pairs` in parallel; the result does not depend on
/// the thread count.
pub fn evaluate(model: &Model, pairs: &[SynthPair]) -> Result<EvalReport> {
    let stats = pairs.par_iter().map(|p| pair_stats(model, p)).collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&stats))
}
