//! Dual-softmax coarse matching, mutual-nearest-neighbour filtering,
//! window-expectation refinement on the stride-2 maps and the match losses.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::flow::{grid_to_pixel, pixel_to_grid};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const DEFAULT_WINDOW: usize = 5;
pub const INIT_TEMPERATURE: f64 = 10.0;
pub const VARIANCE_FLOOR: f64 = 1e-4;
pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 2;

#[derive(Clone, Debug)]
pub struct MatcherWeights {
    pub log_tau: ParamId,
}

impl MatcherWeights {
    pub fn declare<R: Rng>(b: &mut ParamBuilder<R>) -> Result<Self> {
        b.push_scope("matcher");
        let log_tau = b.constant("log_tau", &[1], INIT_TEMPERATURE.ln())?;
        b.pop_scope();
        Ok(MatcherWeights { log_tau })
    }
}

/// Correlation and dual-softmax scores between two flattened feature sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    /// `[n, m]` correlation.
    pub correlation: Tensor,
    /// `[n, m]` scores in `[0, 1]`.
    pub scores: Tensor,
    pub temperature: f64,
}

impl ScoreMatrix {
    pub fn rows(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.scores.data()[i * self.cols() + j]
    }
}

/// Differentiable pieces of a [`ScoreMatrix`].
#[derive(Clone, Copy, Debug)]
pub struct ScoreVars<'t> {
    pub correlation: Var<'t>,
    /// `log S = log_softmax_row(C) + log_softmax_col(C)`.
    pub log_scores: Var<'t>,
    pub temperature: Var<'t>,
}

impl ScoreVars<'_> {
    pub fn to_score_matrix(&self) -> ScoreMatrix {
        ScoreMatrix {
            correlation: (*self.correlation.value()).clone(),
            scores: self.log_scores.value().map(f64::exp),
            temperature: self.temperature.value().data()[0],
        }
    }
}

/// `C = tau * (F_A / sqrt(D)) (F_B / sqrt(D))^T` on `[n, D]` and `[m, D]`
/// inputs.
pub fn score_matrix<'t>(fa: Var<'t>, fb: Var<'t>, tau: Var<'t>) -> Result<ScoreVars<'t>> {
    let (sa, sb) = (fa.shape(), fb.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::dim(format!("score matrix needs [n, D] and [m, D], got {sa:?} and {sb:?}")));
    }
    if tau.shape() != [1] || !(tau.value().data()[0] > 0.0) {
        return Err(Error::param("temperature must be a positive scalar"));
    }
    let correlation = fa.matmul_nt(fb)?.scale(1.0 / sa[1] as f64).mul_scalar(tau)?;
    let log_scores = correlation.log_softmax(1)?.add(correlation.log_softmax(0)?)?;
    Ok(ScoreVars { correlation, log_scores, temperature: tau })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatch {
    /// Flat row-major index into A's stride-8 grid.
    pub i: usize,
    /// Flat row-major index into B's stride-8 grid.
    pub j: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineMatch {
    pub i: usize,
    pub j: usize,
    pub x_a: f64,
    pub y_a: f64,
    pub x_b: f64,
    pub y_b: f64,
    pub score: f64,
    /// Total heatmap variance in squared pixels.
    pub variance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub coarse: Vec<CoarseMatch>,
    pub fine: Vec<FineMatch>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.coarse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coarse.is_empty()
    }

    /// One JSON object per line, one line per fine match.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for m in &self.fine {
            serde_json::to_writer(&mut w, m)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<MatchSet> {
        let mut set = MatchSet::default();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let m: FineMatch = serde_json::from_str(&line)?;
            set.coarse.push(CoarseMatch { i: m.i, j: m.j, score: m.score });
            set.fine.push(m);
        }
        Ok(set)
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Keeps `(i, j)` iff `j` is the row-`i` argmax, `i` the column-`j` argmax and
/// `S(i, j) >= threshold`. Ties go to the smaller index.
pub fn mnn_filter(s: &ScoreMatrix, threshold: f64) -> Result<MatchSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let (n, m) = (s.rows(), s.cols());
    let col_best: Vec<usize> = (0..m).map(|j| argmax((0..n).map(|i| s.at(i, j)))).collect();
    let mut coarse = Vec::new();
    for i in 0..n {
        let j = argmax((0..m).map(|j| s.at(i, j)));
        if m > 0 && col_best[j] == i && s.at(i, j) >= threshold {
            coarse.push(CoarseMatch { i, j, score: s.at(i, j) });
        }
    }
    Ok(MatchSet { coarse, fine: Vec::new() })
}

/// Stride-2 grid coordinate `(x, y)` of the center of a stride-8 cell.
pub fn coarse_center_on_fine(index: usize, coarse_width: usize) -> (f64, f64) {
    let (r, c) = (index / coarse_width, index % coarse_width);
    let to_fine = |g: usize| pixel_to_grid(grid_to_pixel(g as f64, COARSE_STRIDE), FINE_STRIDE);
    (to_fine(c), to_fine(r))
}

/// Window sample offsets start at `center - (w-1)/2`, shifted so the whole
/// window stays in `[0, n - 1]` when the map is at least `w` wide.
fn window_start(center: f64, w: usize, n: usize) -> f64 {
    let half = (w as f64 - 1.0) / 2.0;
    let max_start = (n as f64 - w as f64).max(0.0);
    (center - half).clamp(0.0, max_start)
}

/// Output of [`refine_matches`].
#[derive(Clone, Debug)]
pub struct Refinement<'t> {
    /// `[n, 2]` refined B pixels.
    pub coords_b: Var<'t>,
    /// A pixels (cell centers), one per match.
    pub coords_a: Vec<(f64, f64)>,
    /// Heatmap total variance per match, squared pixels.
    pub variance: Vec<f64>,
}

/// Correlates A's center vector at each coarse match against a `w x w`
/// window on B's stride-2 map around the matched B cell, softmaxes with
/// temperature `1/sqrt(D)` and returns the expected position. Sampled
/// vectors are layer-normalized (no affine terms) before correlation.
pub fn refine_matches<'t>(
    matches: &[CoarseMatch],
    coarse_extent: (usize, usize),
    fine_a: Var<'t>,
    fine_b: Var<'t>,
    window: usize,
) -> Result<Refinement<'t>> {
    if window % 2 == 0 {
        return Err(Error::param(format!("window must be odd, got {window}")));
    }
    let (sa, sb) = (fine_a.shape(), fine_b.shape());
    if sa.len() != 3 || sa != sb {
        return Err(Error::dim(format!("fine maps must share an [H, W, D] shape, got {sa:?} and {sb:?}")));
    }
    let (hf, wf, d) = (sa[0], sa[1], sa[2]);
    let cells = coarse_extent.0 * coarse_extent.1;
    if let Some(bad) = matches.iter().find(|m| m.i >= cells || m.j >= cells) {
        return Err(Error::Input(format!("match ({}, {}) outside a {cells}-cell grid", bad.i, bad.j)));
    }
    let tape = fine_a.tape();
    let n = matches.len();
    let ww = window * window;
    if n == 0 {
        return Ok(Refinement { coords_b: tape.constant(Tensor::zeros(&[0, 2])), coords_a: vec![], variance: vec![] });
    }
    let mut center_a = Vec::with_capacity(2 * n);
    let mut coords_a = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(2 * n * ww);
    let mut pos_x = Vec::with_capacity(n * ww);
    let mut pos_y = Vec::with_capacity(n * ww);
    for m in matches {
        let (ax, ay) = coarse_center_on_fine(m.i, coarse_extent.1);
        center_a.extend_from_slice(&[ax.clamp(0.0, (wf - 1) as f64), ay.clamp(0.0, (hf - 1) as f64)]);
        coords_a.push((grid_to_pixel(ax, FINE_STRIDE), grid_to_pixel(ay, FINE_STRIDE)));
        let (bx, by) = coarse_center_on_fine(m.j, coarse_extent.1);
        let (x0, y0) = (window_start(bx, window, wf), window_start(by, window, hf));
        for dy in 0..window {
            for dx in 0..window {
                let x = (x0 + dx as f64).min((wf - 1) as f64);
                let y = (y0 + dy as f64).min((hf - 1) as f64);
                samples.extend_from_slice(&[x, y]);
                pos_x.push(grid_to_pixel(x, FINE_STRIDE));
                pos_y.push(grid_to_pixel(y, FINE_STRIDE));
            }
        }
    }
    let (gain, bias) = (tape.constant(Tensor::full(&[d], 1.0)), tape.constant(Tensor::zeros(&[d])));
    let qa = fine_a.bilinear_sample(tape.constant(Tensor::from_parts(vec![n, 2], center_a)))?.layer_norm(gain, bias)?;
    let kb = fine_b.bilinear_sample(tape.constant(Tensor::from_parts(vec![n * ww, 2], samples)))?.layer_norm(gain, bias)?;
    let repeat: Vec<usize> = (0..n).flat_map(|k| std::iter::repeat_n(k, ww)).collect();
    let ones_d = tape.constant(Tensor::full(&[d, 1], 1.0));
    let logits = qa.gather_rows(&repeat)?.mul(kb)?.matmul(ones_d)?.reshape(&[n, ww])?;
    let heat = logits.softmax_fixed(1, 1.0 / (d as f64).sqrt())?;
    let px = Tensor::from_parts(vec![n, ww], pos_x);
    let py = Tensor::from_parts(vec![n, ww], pos_y);
    let ones_w = tape.constant(Tensor::full(&[ww, 1], 1.0));
    let ex = heat.mul(tape.constant(px.clone()))?.matmul(ones_w)?;
    let ey = heat.mul(tape.constant(py.clone()))?.matmul(ones_w)?;
    let coords_b = crate::autograd::concat_last(&[ex, ey])?;
    let h = heat.value();
    let variance = (0..n)
        .map(|k| {
            let row = &h.data()[k * ww..(k + 1) * ww];
            let moment = |pos: &Tensor| {
                let p = &pos.data()[k * ww..(k + 1) * ww];
                let m1: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                let m2: f64 = row.iter().zip(p).map(|(a, b)| a * b * b).sum();
                (m2 - m1 * m1).max(0.0)
            };
            moment(&px) + moment(&py)
        })
        .collect();
    Ok(Refinement { coords_b, coords_a, variance })
}

/// Coarse matches with refined B coordinates attached.
pub fn attach_fine(coarse: &[CoarseMatch], refinement: &Refinement<'_>) -> Vec<FineMatch> {
    let b = refinement.coords_b.value();
    coarse
        .iter()
        .enumerate()
        .map(|(k, m)| FineMatch {
            i: m.i,
            j: m.j,
            x_a: refinement.coords_a[k].0,
            y_a: refinement.coords_a[k].1,
            x_b: b.data()[2 * k],
            y_b: b.data()[2 * k + 1],
            score: m.score,
            variance: refinement.variance[k],
        })
        .collect()
}

/// Mean of `-log S(i, j)` over ground-truth pairs; zero when there are none.
pub fn coarse_loss<'t>(log_scores: Var<'t>, gt: &[(usize, usize)]) -> Result<Var<'t>> {
    let tape = log_scores.tape();
    if gt.is_empty() {
        log::warn!("coarse loss over an empty ground-truth set");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let m = log_scores.value().rc()?.1;
    let idx: Vec<usize> = gt.iter().map(|&(i, j)| i * m + j).collect();
    Ok(log_scores.gather_flat(&idx)?.mean().scale(-1.0))
}

/// Mean of `|refined - gt|^2 / max(variance, floor)`; variances act as
/// constant weights.
pub fn fine_loss<'t>(refined: Var<'t>, gt: &Tensor, variance: &[f64]) -> Result<Var<'t>> {
    let tape = refined.tape();
    let n = variance.len();
    if refined.shape() != [n, 2] || gt.shape() != [n, 2] {
        return Err(Error::dim(format!(
            "fine loss shapes differ: refined {:?}, gt {:?}, {n} variances",
            refined.shape(),
            gt.shape()
        )));
    }
    if n == 0 {
        log::warn!("fine loss over an empty match set");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let weights: Vec<f64> = variance.iter().flat_map(|&v| [1.0 / (v.max(VARIANCE_FLOOR) * n as f64); 2]).collect();
    refined.sub(tape.constant(gt.clone()))?.square().weighted_sum(&Tensor::from_parts(vec![n, 2], weights))
}

/// `L_c + L_f + alpha * L_flow`.
pub fn total_loss<'t>(coarse: Var<'t>, fine: Var<'t>, flow: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    if !(alpha >= 0.0) {
        return Err(Error::param(format!("flow weight must be non-negative, got {alpha}")));
    }
    coarse.add(fine)?.add(flow.scale(alpha))
}

/// Scores, mutual-nearest filtering and refinement for one inference pass.
#[allow(clippy::too_many_arguments)]
pub fn match_features<'t>(
    p: &Bound<'t>,
    w: &MatcherWeights,
    coarse_a: Var<'t>,
    coarse_b: Var<'t>,
    fine_a: Var<'t>,
    fine_b: Var<'t>,
    threshold: f64,
    window: usize,
) -> Result<(ScoreMatrix, MatchSet)> {
    let s = coarse_a.shape();
    if s.len() != 3 || s != coarse_b.shape() {
        return Err(Error::dim(format!("coarse maps must share an [H, W, D] shape, got {s:?} and {:?}", coarse_b.shape())));
    }
    let flat = |v: Var<'t>| v.reshape(&[s[0] * s[1], s[2]]);
    let sv = score_matrix(flat(coarse_a)?, flat(coarse_b)?, p.var(w.log_tau).exp())?;
    let scores = sv.to_score_matrix();
    let mut set = mnn_filter(&scores, threshold)?;
    let r = refine_matches(&set.coarse, (s[0], s[1]), fine_a, fine_b, window)?;
    set.fine = attach_fine(&set.coarse, &r);
    Ok((scores, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scores_of(c: &[f64], n: usize, m: usize) -> ScoreMatrix {
        let tape = Tape::new();
        let corr = tape.constant(Tensor::new(vec![n, m], c.to_vec()).unwrap());
        let ls = corr.log_softmax(1).unwrap().add(corr.log_softmax(0).unwrap()).unwrap();
        ScoreVars { correlation: corr, log_scores: ls, temperature: tape.constant(Tensor::scalar(1.0)) }
            .to_score_matrix()
    }

    #[test]
    fn orthonormal_alignment_gives_identity() {
        let tape = Tape::new();
        let e = Tensor::eye(4);
        let fa = tape.constant(e.scale(2.0));
        let fb = tape.constant(e.scale(2.0));
        let s = score_matrix(fa, fb, tape.constant(Tensor::scalar(50.0))).unwrap().to_score_matrix();
        // oracle: brute-force dual softmax of C = 50 * I
        let off = (0.0f64).exp();
        let on = (50.0f64).exp();
        let soft = on / (on + 3.0 * off);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { soft * soft } else { (1.0 - soft) / 3.0 * (1.0 - soft) / 3.0 };
                assert_abs_diff_eq!(s.at(i, j), want, epsilon = 1e-12);
            }
        }
        assert!(s.at(0, 0) > 0.999);
    }

    #[test]
    fn single_token_scores_one() {
        let s = scores_of(&[3.7], 1, 1);
        assert_abs_diff_eq!(s.at(0, 0), 1.0, epsilon = 1e-15);
        let tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(score_matrix(f, tape.constant(Tensor::zeros(&[2, 4])), tape.constant(Tensor::scalar(1.0))).is_err());
        assert!(score_matrix(f, f, tape.constant(Tensor::scalar(0.0))).is_err());
    }

    #[test]
    fn mnn_identity_threshold_and_oracle() {
        let mut c = vec![0.0; 16];
        for k in 0..4 {
            c[k * 5] = 8.0;
        }
        let s = scores_of(&c, 4, 4);
        let set = mnn_filter(&s, 0.2).unwrap();
        assert_eq!(set.coarse.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(mnn_filter(&scores_of(&[0.0; 16], 4, 4), 0.2).unwrap().is_empty());
        assert!(mnn_filter(&s, 1.0).is_err());
    }

    fn brute_mnn(s: &ScoreMatrix, theta: f64) -> Vec<(usize, usize)> {
        let mut out = vec![];
        for i in 0..s.rows() {
            for j in 0..s.cols() {
                let v = s.at(i, j);
                let row_ok = (0..s.cols()).all(|k| s.at(i, k) < v || (s.at(i, k) == v && k >= j));
                let col_ok = (0..s.rows()).all(|k| s.at(k, j) < v || (s.at(k, j) == v && k >= i));
                if row_ok && col_ok && v >= theta {
                    out.push((i, j));
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn mnn_matches_brute_force(c in prop::collection::vec(-4.0f64..4.0, 120), theta in 0.01f64..0.5) {
            let s = scores_of(&c, 10, 12);
            let got: Vec<_> = mnn_filter(&s, theta).unwrap().coarse.iter().map(|m| (m.i, m.j)).collect();
            prop_assert_eq!(got, brute_mnn(&s, theta));
        }

        #[test]
        fn scores_bounded_by_softmax_factors(c in prop::collection::vec(-6.0f64..6.0, 30)) {
            let s = scores_of(&c, 5, 6);
            let row = crate::ops::softmax(&Tensor::new(vec![5, 6], c.clone()).unwrap(), 1, 1.0).unwrap();
            let col = crate::ops::softmax(&Tensor::new(vec![5, 6], c).unwrap(), 0, 1.0).unwrap();
            for k in 0..30 {
                let v = s.scores.data()[k];
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(v <= row.data()[k].min(col.data()[k]) + 1e-15);
            }
        }

        #[test]
        fn mnn_structure_survives_temperature_change(
            noise in prop::collection::vec(-1.0f64..1.0, 36),
            perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
            t in 0.5f64..5.0,
        ) {
            // a unique, dominant maximum in every row and column; for general
            // C the column normalizers can move the argmax
            let c: Vec<f64> = (0..36).map(|k| noise[k] + if perm[k / 6] == k % 6 { 6.0 } else { 0.0 }).collect();
            let scaled: Vec<f64> = c.iter().map(|v| v * t).collect();
            let pairs = |s: &ScoreMatrix| mnn_filter(s, 1e-12).unwrap().coarse.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>();
            let want: Vec<_> = (0..6).map(|i| (i, perm[i])).collect();
            prop_assert_eq!(pairs(&scores_of(&c, 6, 6)), want.clone());
            prop_assert_eq!(pairs(&scores_of(&scaled, 6, 6)), want);
        }
    }

    /// An `[h, w, d]` map with at most one non-zero channel per cell.
    fn one_hot_map(h: usize, w: usize, d: usize, hot: impl Fn(usize, usize) -> Option<(usize, f64)>) -> Tensor {
        let mut t = Tensor::zeros(&[h, w, d]);
        for i in 0..h {
            for j in 0..w {
                if let Some((c, v)) = hot(i, j) {
                    t.data_mut()[(i * w + j) * d + c] = v;
                }
            }
        }
        t
    }

    /// Refinement correlates layer-normalized vectors, so contrast comes
    /// from direction: hot cells carry channel 0, the rest channel 1. A wide
    /// `d` makes the normalized logits (bounded by sqrt(d)) peak sharply.
    fn two_tone(d: usize, hot: impl Fn(usize, usize) -> bool) -> Tensor {
        one_hot_map(16, 16, d, |i, j| Some((if hot(i, j) { 0 } else { 1 }, 1.0)))
    }

    #[test]
    fn delta_heatmap_returns_coarse_center() {
        // interior coarse cell (1, 1) sits at fine 5.5; its window samples
        // 3.5..=7.5, and only the sample at 5.5 lies wholly on rows/cols 5..=6
        let d = 4096;
        let fa = two_tone(d, |_, _| true);
        let fb = two_tone(d, |i, j| (5..=6).contains(&i) && (5..=6).contains(&j));
        let tape = Tape::new();
        let m = [CoarseMatch { i: 5, j: 5, score: 1.0 }];
        let r = refine_matches(&m, (4, 4), tape.constant(fa), tape.constant(fb), 5).unwrap();
        let b = r.coords_b.value();
        assert_abs_diff_eq!(b.data()[0], 11.5, epsilon = 1e-6);
        assert_abs_diff_eq!(b.data()[1], 11.5, epsilon = 1e-6);
        assert!(r.variance[0] < 1e-5, "variance {}", r.variance[0]);
        assert_eq!(r.coords_a, vec![(11.5, 11.5)]);
    }

    #[test]
    fn uniform_heatmap_returns_window_centroid() {
        let fa = Tensor::full(&[8, 8, 4], 0.0);
        let fb = Tensor::full(&[8, 8, 4], 1.0);
        let tape = Tape::new();
        // cell 3 = (row 1, col 1) -> fine 5.5, window clamped to start 3
        let m = [CoarseMatch { i: 0, j: 3, score: 1.0 }];
        let r = refine_matches(&m, (2, 2), tape.constant(fa), tape.constant(fb), 5).unwrap();
        let b = r.coords_b.value();
        // window covers fine 3..=7 -> pixels 6.5..14.5, centroid 10.5
        assert_abs_diff_eq!(b.data()[0], 10.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.data()[1], 10.5, epsilon = 1e-12);
        // variance of a uniform 5-point lattice with spacing 2, both axes
        assert_abs_diff_eq!(r.variance[0], 2.0 * 8.0, epsilon = 1e-9);
    }

    #[test]
    fn one_pixel_offset_peak_recovered() {
        // hot column 6 half-covers the samples at x = 5.5 and 6.5 equally,
        // so the expectation sits at fine 6.0, one pixel right of the coarse
        // center at pixel 11.5
        let d = 4096;
        let fa = two_tone(d, |_, _| true);
        let fb = two_tone(d, |i, j| (5..=6).contains(&i) && j == 6);
        let tape = Tape::new();
        let m = [CoarseMatch { i: 5, j: 5, score: 1.0 }];
        let r = refine_matches(&m, (4, 4), tape.constant(fa), tape.constant(fb), 5).unwrap();
        let b = r.coords_b.value();
        assert!((b.data()[0] - 12.5).abs() < 0.1, "x = {}", b.data()[0]);
        assert!((b.data()[1] - 11.5).abs() < 0.1, "y = {}", b.data()[1]);
    }

    #[test]
    fn refined_coordinates_stay_in_image() {
        let tape = Tape::new();
        let fa = tape.constant(Tensor::new(vec![8, 8, 2], (0..128).map(|v| (v as f64).sin()).collect()).unwrap());
        let fb = tape.constant(Tensor::new(vec![8, 8, 2], (0..128).map(|v| (v as f64 * 0.7).cos()).collect()).unwrap());
        let m: Vec<_> = (0..4).flat_map(|i| (0..4).map(move |j| CoarseMatch { i, j, score: 0.5 })).collect();
        let r = refine_matches(&m, (2, 2), fa, fb, 5).unwrap();
        assert!(r.coords_b.value().data().iter().all(|&v| (0.0..=15.0).contains(&v)));
        assert!(refine_matches(&m, (2, 2), fa, fb, 4).is_err());
        assert!(refine_matches(&[CoarseMatch { i: 4, j: 0, score: 1.0 }], (2, 2), fa, fb, 5).is_err());
    }

    #[test]
    fn coarse_loss_values() {
        let tape = Tape::new();
        let ls = tape.constant(Tensor::new(vec![2, 2], vec![0.0, -3.0, -1.0, -1.0]).unwrap());
        assert_eq!(coarse_loss(ls, &[(0, 0)]).unwrap().value().data()[0], 0.0);
        assert_abs_diff_eq!(coarse_loss(ls, &[(1, 0), (1, 1)]).unwrap().value().data()[0], 1.0);
        assert_eq!(coarse_loss(ls, &[]).unwrap().value().data()[0], 0.0);
    }

    #[test]
    fn fine_loss_values() {
        let tape = Tape::new();
        let gt = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let same = tape.constant(gt.clone());
        assert_eq!(fine_loss(same, &gt, &[1.0]).unwrap().value().data()[0], 0.0);
        let off = tape.constant(Tensor::new(vec![1, 2], vec![4.0, 4.0]).unwrap());
        assert_abs_diff_eq!(fine_loss(off, &gt, &[1.0]).unwrap().value().data()[0], 1.0);
        let gt2 = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let r2 = tape.constant(Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 1.5]).unwrap());
        let a = fine_loss(r2, &gt2, &[0.3, 2.0]).unwrap().value().data()[0];
        let b = fine_loss(r2, &gt2, &[0.6, 4.0]).unwrap().value().data()[0];
        assert_abs_diff_eq!(a, 2.0 * b, epsilon = 1e-12);
        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert_eq!(fine_loss(empty, &Tensor::zeros(&[0, 2]), &[]).unwrap().value().data()[0], 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let tape = Tape::new();
        let s = |v: f64| tape.constant(Tensor::scalar(v));
        assert_eq!(total_loss(s(1.0), s(2.0), s(4.0), 0.25).unwrap().value().data()[0], 4.0);
        assert_eq!(total_loss(s(1.0), s(2.0), s(4.0), 0.0).unwrap().value().data()[0], 3.0);
        assert_eq!(total_loss(s(0.0), s(0.0), s(0.0), 0.25).unwrap().value().data()[0], 0.0);
        assert!(total_loss(s(0.0), s(0.0), s(0.0), -1.0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let set = MatchSet {
            coarse: vec![CoarseMatch { i: 1, j: 2, score: 0.5 }],
            fine: vec![FineMatch { i: 1, j: 2, x_a: 3.5, y_a: 11.5, x_b: 20.25, y_b: 3.0, score: 0.5, variance: 0.75 }],
        };
        let mut buf = Vec::new();
        set.write_jsonl(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
        assert_eq!(MatchSet::read_jsonl(&buf[..]).unwrap(), set);
    }
}
