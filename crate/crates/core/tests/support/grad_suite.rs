//! Central-difference checks of every tape primitive and of the three
//! training losses over randomized inputs, shared by the gradient and
//! acceptance test targets.

// each target uses a different subset
#![allow(dead_code)]

use aspan::autograd::concat_last;
use aspan::flow::{flow_loss, FlowPrediction, FlowTarget};
use aspan::matcher::{coarse_loss, fine_loss, refine_matches, score_matrix, CoarseMatch};
use aspan::{grad_check, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRIALS: u64 = 20;
pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

/// Worst relative error over all trials, per named case.
pub type Report = Vec<(&'static str, f64)>;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for kinked ops.
fn rand_nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_t(rng, shape, 0.05, 1.0).map(|v| if v > 0.525 { v } else { -v })
}

/// Reduces any output to a scalar with fixed non-uniform weights so every
/// output element contributes a distinct gradient.
fn project<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|k| (1.3 * k as f64 + 0.7).sin()).collect())?;
    v.weighted_sum(&w)
}

fn check<G, F>(out: &mut Report, name: &'static str, gen: G, f: F)
where
    G: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let worst = (0..TRIALS)
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let inputs = gen(&mut rng);
            grad_check(|t, v| project(f(t, v)?), &inputs, EPS).unwrap_or(f64::INFINITY)
        })
        .fold(0.0, f64::max);
    out.push((name, worst));
}

pub fn linear_algebra_ops(out: &mut Report) {
    check(out, "matmul", |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[4, 2], -1.0, 1.0)], |_, v| v[0].matmul(v[1]));
    check(out, "matmul_nt", |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[5, 4], -1.0, 1.0)], |_, v| v[0].matmul_nt(v[1]));
    check(out, "transpose", |r| vec![rand_t(r, &[3, 4], -1.0, 1.0)], |_, v| v[0].transpose());
    check(out, "reshape", |r| vec![rand_t(r, &[2, 3, 2], -1.0, 1.0)], |_, v| v[0].reshape(&[3, 4]));
}

pub fn elementwise_ops(out: &mut Report) {
    let pair = |r: &mut ChaCha8Rng| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[3, 4], -1.0, 1.0)];
    check(out, "add", pair, |_, v| v[0].add(v[1]));
    check(out, "sub", pair, |_, v| v[0].sub(v[1]));
    check(out, "mul", pair, |_, v| v[0].mul(v[1]));
    check(out, "add_bias", |r| vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[4], -1.0, 1.0)], |_, v| v[0].add_bias(v[1]));
    check(out, "scale", |r| vec![rand_t(r, &[5], -1.0, 1.0)], |_, v| Ok(v[0].scale(-2.5)));
    check(out, "add_scalar", |r| vec![rand_t(r, &[5], -1.0, 1.0)], |_, v| Ok(v[0].add_scalar(0.3)));
    check(out, "mul_scalar", |r| vec![rand_t(r, &[2, 3], -1.0, 1.0), rand_t(r, &[1], -2.0, 2.0)], |_, v| v[0].mul_scalar(v[1]));
    check(out, "relu", |r| vec![rand_nonzero(r, &[3, 4])], |_, v| Ok(v[0].relu()));
    check(out, "sigmoid", |r| vec![rand_t(r, &[3, 4], -4.0, 4.0)], |_, v| Ok(v[0].sigmoid()));
    check(out, "exp", |r| vec![rand_t(r, &[3, 4], -2.0, 2.0)], |_, v| Ok(v[0].exp()));
    check(out, "ln", |r| vec![rand_t(r, &[3, 4], 0.2, 3.0)], |_, v| Ok(v[0].ln()));
    check(out, "square", |r| vec![rand_t(r, &[3, 4], -2.0, 2.0)], |_, v| Ok(v[0].square()));
}

pub fn softmax_family(out: &mut Report) {
    for axis in [0, 1] {
        check(
            out,
            "softmax",
            |r| vec![rand_t(r, &[3, 5], -2.0, 2.0), rand_t(r, &[1], 0.2, 2.0)],
            move |_, v| v[0].softmax(axis, v[1]),
        );
        check(out, "softmax_fixed", |r| vec![rand_t(r, &[3, 5], -2.0, 2.0)], move |_, v| v[0].softmax_fixed(axis, 0.7));
        check(out, "log_softmax", |r| vec![rand_t(r, &[4, 3], -2.0, 2.0)], move |_, v| v[0].log_softmax(axis));
    }
}

pub fn spatial_ops(out: &mut Report) {
    check(out, "avg_pool", |r| vec![rand_t(r, &[4, 6, 2], -1.0, 1.0)], |_, v| v[0].avg_pool(2));
    check(out, "resize_bilinear", |r| vec![rand_t(r, &[3, 4, 2], -1.0, 1.0)], |_, v| v[0].resize_bilinear(5, 7));
    check(
        out,
        "conv3x3",
        |r| vec![rand_t(r, &[4, 5, 2], -1.0, 1.0), rand_t(r, &[3, 3, 2, 3], -1.0, 1.0), rand_t(r, &[3], -1.0, 1.0)],
        |_, v| v[0].conv3x3(v[1], v[2]),
    );
    check(
        out,
        "bilinear_sample",
        |r| {
            // keep samples off the integer lattice, where the map is kinked
            let coords = rand_t(r, &[6, 2], 0.0, 3.0).map(|c| c.floor() + 0.1 + 0.8 * c.fract());
            vec![rand_t(r, &[4, 5, 3], -1.0, 1.0), coords]
        },
        |_, v| v[0].bilinear_sample(v[1]),
    );
    check(
        out,
        "layer_norm",
        |r| vec![rand_t(r, &[3, 6], -2.0, 2.0), rand_t(r, &[6], 0.5, 1.5), rand_t(r, &[6], -0.5, 0.5)],
        |_, v| v[0].layer_norm(v[1], v[2]),
    );
}

pub fn indexing_and_reductions(out: &mut Report) {
    check(out, "slice_last", |r| vec![rand_t(r, &[3, 5], -1.0, 1.0)], |_, v| v[0].slice_last(1, 3));
    check(out, "gather_rows", |r| vec![rand_t(r, &[4, 3], -1.0, 1.0)], |_, v| v[0].gather_rows(&[2, 0, 2, 3]));
    check(out, "gather_flat", |r| vec![rand_t(r, &[3, 3], -1.0, 1.0)], |_, v| v[0].gather_flat(&[8, 1, 1, 4]));
    check(out, "sum", |r| vec![rand_t(r, &[3, 3], -1.0, 1.0)], |_, v| Ok(v[0].sum().scale(1.7)));
    check(out, "mean", |r| vec![rand_t(r, &[3, 3], -1.0, 1.0)], |_, v| Ok(v[0].mean().scale(1.7)));
    check(
        out,
        "concat_last",
        |r| vec![rand_t(r, &[3, 2], -1.0, 1.0), rand_t(r, &[3, 3], -1.0, 1.0)],
        |_, v| concat_last(&[v[0], v[1]]),
    );
}

pub fn flow_nll_loss(out: &mut Report) {
    check(
        out,
        "flow_loss",
        |r| vec![rand_t(r, &[6, 2], 0.0, 16.0), rand_t(r, &[6, 2], -1.0, 2.0), rand_t(r, &[6, 2], 0.0, 16.0), rand_t(r, &[6, 2], -1.0, 2.0)],
        |_, v| {
            let pred = |m, s| FlowPrediction { mean: m, log_sigma: s, extent: (2, 3), stride: 8, image_extent: (16, 24) };
            let target = |k: usize| FlowTarget {
                coords: Tensor::new(vec![6, 2], (0..12).map(|i| (i * 7 + k) as f64 % 16.0).collect()).unwrap(),
                visible: (0..6).map(|i| (i + k) % 4 != 0).collect(),
            };
            let (ta, tb) = (target(0), target(1));
            Ok(flow_loss(&[(pred(v[0], v[1]), pred(v[2], v[3]))], (&ta, &tb))?.loss)
        },
    );
}

pub fn coarse_matching_loss(out: &mut Report) {
    check(
        out,
        "coarse_loss",
        |r| vec![rand_t(r, &[5, 4], -1.0, 1.0), rand_t(r, &[6, 4], -1.0, 1.0), rand_t(r, &[1], 0.5, 2.5)],
        |_, v| {
            let s = score_matrix(v[0], v[1], v[2].exp())?;
            coarse_loss(s.log_scores, &[(0, 1), (2, 2), (4, 5)])
        },
    );
}

pub fn fine_refinement_loss(out: &mut Report) {
    let matches = [CoarseMatch { i: 0, j: 3, score: 0.9 }, CoarseMatch { i: 2, j: 1, score: 0.8 }];
    let gt = Tensor::new(vec![2, 2], vec![12.0, 3.0, 5.5, 6.0]).unwrap();
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let inputs = vec![rand_t(&mut rng, &[8, 8, 8], -1.0, 1.0), rand_t(&mut rng, &[8, 8, 8], -1.0, 1.0)];
        // the variance weights are constants of the loss; freeze them at
        // the evaluation point
        let tape = Tape::new();
        let base = refine_matches(&matches, (2, 2), tape.constant(inputs[0].clone()), tape.constant(inputs[1].clone()), 5).unwrap();
        let variance = base.variance.clone();
        let err = grad_check(
            |_, v| {
                let r = refine_matches(&matches, (2, 2), v[0], v[1], 5)?;
                fine_loss(r.coords_b, &gt, &variance)
            },
            &inputs,
            EPS,
        )
        .unwrap_or(f64::INFINITY);
        worst = worst.max(err);
    }
    out.push(("fine_loss", worst));
}

pub fn run_suite() -> Report {
    let mut out = Report::new();
    for group in [
        linear_algebra_ops,
        elementwise_ops,
        softmax_family,
        spatial_ops,
        indexing_and_reductions,
        flow_nll_loss,
        coarse_matching_loss,
        fine_refinement_loss,
    ] {
        group(&mut out);
    }
    out
}

