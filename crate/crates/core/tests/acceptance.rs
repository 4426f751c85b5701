//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if
//! any criterion fails. The training criteria share one reference run.

#[path = "support/grad_suite.rs"]
mod grad_suite;

use std::f64::consts::PI;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use aspan::attention::{attend_full, attend_local, compute_span, SpanPolicy};
use aspan::bench::{run_bench, BenchConfig};
use aspan::config::RunConfig;
use aspan::eval::{evaluate, EvalReport};
use aspan::flow::{flow_loss, gaussian_prob, FlowMap, FlowPrediction, FlowTarget};
use aspan::gla::AttentionMode;
use aspan::harness::{ablation_report, ablation_row, ablation_table, train_model};
use aspan::matcher::{CoarseMatch, FineMatch, MatchSet};
use aspan::model::Model;
use aspan::synth::{gen_dataset, SynthConfig, SynthPair};
use aspan::train::MetricsReport;
use aspan::{DType, Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// Training pairs for the reference run.
const TRAIN_PAIRS: usize = 1000;
const HOLDOUT_PAIRS: usize = 64;
const TRAIN_DATA_SEED: u64 = 1;
const HOLDOUT_DATA_SEED: u64 = 2;
const MODEL_SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// The reduced flow loss against `-mean ln p - ln 2 pi` over visible cells
/// of both directions, with `ln p` in closed form and checked against the
/// density wherever the density does not underflow.
fn flow_loss_identity() -> Result<Outcome> {
    let (mut worst, mut density_gap) = (0.0f64, 0.0f64);
    for inst in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(inst);
        let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let n = h * w;
        let image = (8 * h, 8 * w);
        let tape = Tape::new();
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..2 {
            let mean = rand_t(&mut rng, &[n, 2], 0.0, 40.0);
            let log_sigma = rand_t(&mut rng, &[n, 2], -1.5, 3.0);
            let coords = rand_t(&mut rng, &[n, 2], -5.0, 45.0);
            let mut visible: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            visible[0] = true;
            preds.push((mean, log_sigma));
            targets.push(FlowTarget { coords, visible });
        }
        let fp = |k: usize| FlowPrediction {
            mean: tape.constant(preds[k].0.clone()),
            log_sigma: tape.constant(preds[k].1.clone()),
            extent: (h, w),
            stride: 8,
            image_extent: image,
        };
        let got = flow_loss(&[(fp(0), fp(1))], (&targets[0], &targets[1]))?.loss.value().data()[0];

        let (mut sum, mut count) = (0.0, 0usize);
        for ((mean, log_sigma), t) in preds.iter().zip(&targets) {
            for c in (0..n).filter(|&c| t.visible[c]) {
                let (u, s, x) = (mean.data(), log_sigma.data(), t.coords.data());
                let cell = [u[2 * c], u[2 * c + 1], s[2 * c].exp(), s[2 * c + 1].exp()];
                let (dx, dy) = ((x[2 * c] - cell[0]) / cell[2], (x[2 * c + 1] - cell[1]) / cell[3]);
                let log_p = -(dx * dx + dy * dy) / 2.0 - (2.0 * PI * cell[2] * cell[3]).ln();
                // far residuals underflow the density itself
                let p = gaussian_prob(cell, x[2 * c], x[2 * c + 1])?;
                if p > 1e-250 {
                    density_gap = density_gap.max((p.ln() - log_p).abs());
                }
                sum -= log_p;
                count += 1;
            }
        }
        let oracle = sum / count as f64 - (2.0 * PI).ln();
        worst = worst.max((got - oracle).abs());
    }
    Ok(outcome(
        worst <= 1e-9 && density_gap <= 1e-9,
        format!("max |loss - oracle| = {worst:.2e} over 100 instances (tol 1e-9); oracle vs density {density_gap:.2e}"),
    ))
}

fn gradient_suite() -> Result<Outcome> {
    let report = grad_suite::run_suite();
    let (name, worst) = report.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let failed: Vec<&str> = report.iter().filter(|(_, e)| !(*e < grad_suite::TOL)).map(|(n, _)| *n).collect();
    Ok(outcome(
        failed.is_empty(),
        format!(
            "{} cases x {} trials, worst rel err {worst:.2e} ({name}){}",
            report.len(),
            grad_suite::TRIALS,
            if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
        ),
    ))
}

/// Spans forced over a whole 6x6 target with one sample per target cell
/// make local attention a permutation of global attention.
fn local_equals_global() -> Result<Outcome> {
    let (h, w, d) = (6, 6, 8);
    let mut worst = 0.0f64;
    for trial in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let cells: Vec<f64> = (0..h * w)
            .flat_map(|_| [rng.gen_range(0.0..48.0), rng.gen_range(0.0..48.0), 1e4, 1e4])
            .collect();
        let flow = FlowMap { grid: Tensor::new(vec![h, w, 4], cells)?, stride: 8, image_extent: (8 * h, 8 * w) };
        let spans = compute_span(&flow, 1 + (trial as usize % 3), SpanPolicy::Adaptive { n_sigma: 3.0 }, (h, w), 6)?;
        let q = rand_t(&mut rng, &[h * w, d], -1.0, 1.0);
        let k = rand_t(&mut rng, &[h, w, d], -1.0, 1.0);
        let v = rand_t(&mut rng, &[h, w, d], -1.0, 1.0);
        let tape = Tape::new();
        let tau = tape.constant(Tensor::scalar(1.0 / (d as f64).sqrt()));
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k.clone()), tape.constant(v.clone()));
        let local = attend_local(qv, kv, vv, &spans, tau)?;
        let full = attend_full(qv, tape.constant(k.reshape(&[h * w, d])?), tape.constant(v.reshape(&[h * w, d])?), tau)?;
        worst = worst.max(local.value().max_abs_diff(&full.value()));
    }
    Ok(outcome(worst <= 1e-8, format!("max |local - global| = {worst:.2e} on 6x6 grids (tol 1e-8)")))
}

fn mac_scaling() -> Result<Outcome> {
    let t = run_bench(&[64, 96, 128, 192], &BenchConfig::default())?;
    let pass = (t.local_slope - 1.0).abs() <= 0.1 && (t.full_slope - 2.0).abs() <= 0.2;
    Ok(outcome(pass, format!("log-log slope local {:.3} (1.0 +- 0.1), full {:.3} (2.0 +- 0.2)", t.local_slope, t.full_slope)))
}

/// Midpoint rule over a `+-6 sigma` box.
fn gaussian_normalization() -> Result<Outcome> {
    const N: usize = 240;
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let cell = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(0.05..40.0), rng.gen_range(0.05..40.0)];
        let (hx, hy) = (12.0 * cell[2] / N as f64, 12.0 * cell[3] / N as f64);
        let mut total = 0.0;
        for r in 0..N {
            let y = cell[1] - 6.0 * cell[3] + (r as f64 + 0.5) * hy;
            for c in 0..N {
                let x = cell[0] - 6.0 * cell[2] + (c as f64 + 0.5) * hx;
                total += gaussian_prob(cell, x, y)?;
            }
        }
        worst = worst.max((total * hx * hy - 1.0).abs());
    }
    Ok(outcome(worst <= 1e-3, format!("max |integral - 1| = {worst:.2e} over 50 parameter sets (tol 1e-3)")))
}

struct Reference {
    cfg: RunConfig,
    train: Vec<SynthPair>,
    holdout: Vec<SynthPair>,
    model: Model,
    report: MetricsReport,
    eval: EvalReport,
    seconds: f64,
}

fn reference_run() -> Result<Reference> {
    let cfg = RunConfig::default();
    let synth = |n_pairs| SynthConfig { n_pairs, ..cfg.synth.clone() };
    let (_, train) = gen_dataset(&synth(TRAIN_PAIRS), TRAIN_DATA_SEED)?;
    let (_, holdout) = gen_dataset(&synth(HOLDOUT_PAIRS), HOLDOUT_DATA_SEED)?;
    let start = Instant::now();
    let (model, report) = train_model(&cfg, MODEL_SEED, &train, &holdout, None)?;
    let seconds = start.elapsed().as_secs_f64();
    let eval = report.final_eval.clone().expect("holdout is non-empty");
    Ok(Reference { cfg, train, holdout, model, report, eval, seconds })
}

fn reference_training(r: &Reference) -> Outcome {
    let first = r.report.initial.total;
    let last = r.report.epochs.last().map_or(first, |e| e.train.total);
    let drop = 1.0 - last / first;
    let epe = &r.eval.epe_per_block;
    let monotone = epe.windows(2).all(|w| w[1] <= w[0]);
    let pass = drop >= 0.5 && r.eval.precision_5px >= 0.7 && monotone && r.seconds < 1800.0;
    outcome(
        pass,
        format!(
            "loss {first:.3} -> {last:.3} (drop {:.1}%, need 50%), precision@5px {:.3} (need 0.7), epe per block {epe:.3?} ({}), {:.0}s (limit 1800s)",
            100.0 * drop,
            r.eval.precision_5px,
            if monotone { "non-increasing" } else { "increasing" },
            r.seconds
        ),
    )
}

fn uncertainty_separation(r: &Reference) -> Outcome {
    match r.eval.sigma_unmatchable {
        Some(unmatchable) => outcome(
            unmatchable > r.eval.sigma_matchable,
            format!("final-block sigma unmatchable {unmatchable:.4} px vs matchable {:.4} px", r.eval.sigma_matchable),
        ),
        None => outcome(false, "held-out set has no unmatchable cells"),
    }
}

fn ablation(r: &Reference) -> Result<Outcome> {
    let start = Instant::now();
    let mut rows = Vec::new();
    for mode in [AttentionMode::SingleLevel, AttentionMode::FixedSpan] {
        let cfg = RunConfig { model: r.cfg.model.with_mode(mode), ..r.cfg.clone() };
        let (model, report) = train_model(&cfg, MODEL_SEED, &r.train, &[], None)?;
        rows.push(ablation_row(mode, &model, &report, &r.holdout)?);
    }
    // the reference run is the adaptive row; its holdout reports do not
    // touch the weights
    rows.push(ablation_row(AttentionMode::AdaptiveSpan, &r.model, &r.report, &r.holdout)?);
    let report = ablation_report(MODEL_SEED, rows);
    let seconds = start.elapsed().as_secs_f64() + r.seconds;
    print!("{}", ablation_table(&report));

    let tiny = TinyRun::new();
    let (a, b) = (tiny.cli_bytes(&["ablate"], "ablate1"), tiny.cli_bytes(&["ablate"], "ablate2"));
    let deterministic = a == b;
    let verdict = match &report.inversion {
        None => "ordering holds".to_string(),
        Some(msg) => format!("inversion flagged: {msg}"),
    };
    Ok(outcome(
        deterministic && seconds < 5400.0,
        format!("{verdict}; repeated ablation bitwise equal: {deterministic}; {seconds:.0}s (limit 5400s)"),
    ))
}

fn resolution_transfer(r: &Reference) -> Result<Outcome> {
    let channels = r.cfg.synth.channels;
    let big = r.holdout.iter().map(|p| p.spec.render((96, 96), channels)).collect::<Result<Vec<_>>>()?;
    let final_epe = |e: &EvalReport| *e.epe_per_block.last().unwrap_or(&f64::NAN);
    let on = final_epe(&evaluate(&r.model, &big)?);
    let mut off_model = r.model.clone();
    off_model.config.normalized_pe = false;
    let off = final_epe(&evaluate(&off_model, &big)?);
    Ok(outcome(on <= off, format!("96x96 final-block epe: normalized encoding {on:.3} px, raw encoding {off:.3} px")))
}

/// Small config driving the binary end to end.
struct TinyRun {
    dir: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl TinyRun {
    fn new() -> TinyRun {
        let dir = tempfile::tempdir().unwrap();
        let cfg = json!({
            "synth": {"height": 32, "width": 32, "n_pairs": 4},
            "model": {
                "backbone": {"in_channels": 1, "channels": [4, 8, 16], "fine_dim": 8},
                "gla": {"dim": 16, "num_blocks": 2, "coarse_extent": [2, 2], "samples_per_axis": 4},
                "train_extent": [32, 32]
            },
            "train": {"epochs": 1, "batch_size": 2, "holdout": 1},
            "bench_sizes": [32, 48, 64]
        });
        let config = dir.path().join("config.json");
        fs::write(&config, cfg.to_string()).unwrap();
        let data = dir.path().join("data");
        let run = TinyRun { dir, config, data };
        run.cli(&["gen", "--seed", "7", "--out", run.data.to_str().unwrap()]);
        run
    }

    fn cli(&self, args: &[&str]) {
        let out = Command::new(env!("CARGO_BIN_EXE_aspan"))
            .args(args)
            .args(["--config", self.config.to_str().unwrap()])
            .output()
            .expect("binary runs");
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    /// Runs `args` with `--data` and a fresh `--out`; returns the outputs
    /// with wall-clock fields removed.
    fn cli_bytes(&self, args: &[&str], name: &str) -> Vec<(PathBuf, Vec<u8>)> {
        let out = self.dir.path().join(name);
        let mut full = args.to_vec();
        full.extend(["--data", self.data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        self.cli(&full);
        snapshot(&out)
    }
}

/// Every file under `dir`, JSON with timing fields stripped.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.extension().is_some_and(|x| x == "json") {
                let v: Value = serde_json::from_slice(&bytes).unwrap();
                bytes = strip_timing(v).to_string().into_bytes();
            }
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
        }
    }
    out.sort();
    out
}

fn strip_timing(mut v: Value) -> Value {
    match &mut v {
        Value::Object(m) => {
            m.retain(|k, _| !k.ends_with("seconds") && !k.ends_with("_ms"));
            for x in m.values_mut() {
                *x = strip_timing(x.take());
            }
        }
        Value::Array(a) => {
            for x in a.iter_mut() {
                *x = strip_timing(x.take());
            }
        }
        _ => {}
    }
    v
}

fn reproducibility() -> Result<Outcome> {
    let t = TinyRun::new();
    let mut failures = Vec::new();
    let gen = |name: &str| {
        let out = t.dir.path().join(name);
        t.cli(&["gen", "--seed", "7", "--out", out.to_str().unwrap()]);
        snapshot(&out)
    };
    if gen("gen1") != gen("gen2") {
        failures.push("gen");
    }
    let train1 = t.cli_bytes(&["train", "--seed", "3"], "train1");
    if train1 != t.cli_bytes(&["train", "--seed", "3"], "train2") {
        failures.push("train");
    }
    let weights = t.dir.path().join("train1").join("weights");
    let pair = t.data.join("pair_0");
    let (a, b) = (pair.join("image_a.aspt"), pair.join("image_b.aspt"));
    let matched = |name: &str| {
        let out = t.dir.path().join(name);
        let args = ["match", "--weights", weights.to_str().unwrap(), a.to_str().unwrap(), b.to_str().unwrap(), "--viz", "--out", out.to_str().unwrap()];
        t.cli(&args);
        snapshot(&out)
    };
    if matched("match1") != matched("match2") {
        failures.push("match");
    }
    let eval = |name: &str| t.cli_bytes(&["eval", "--weights", weights.to_str().unwrap()], name);
    if eval("eval1") != eval("eval2") {
        failures.push("eval");
    }
    let bench = |name: &str| {
        let out = t.dir.path().join(name);
        t.cli(&["bench", "--out", out.to_str().unwrap()]);
        snapshot(&out)
    };
    if bench("bench1") != bench("bench2") {
        failures.push("bench");
    }
    if t.cli_bytes(&["ablate"], "ablate1") != t.cli_bytes(&["ablate"], "ablate2") {
        failures.push("ablate");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut tensors_ok = true;
    for _ in 0..50 {
        let rank = rng.gen_range(0..4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5)).collect();
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.gen::<u64>() >> 2 | 0x3000_0000_0000_0000) * rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::new(shape, data)?;
        let (back, dtype) = Tensor::from_bytes(&t.to_bytes(DType::F64))?;
        tensors_ok &= dtype == DType::F64 && back.shape() == t.shape() && back.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    if !tensors_ok {
        failures.push("tensor file");
    }
    let fine: Vec<FineMatch> = (0..200)
        .map(|_| FineMatch {
            i: rng.gen_range(0..10_000),
            j: rng.gen_range(0..10_000),
            x_a: rng.gen_range(0.0..1e3),
            y_a: rng.gen::<f64>() * 1e-7,
            x_b: rng.gen_range(-1e3..1e3),
            y_b: rng.gen_range(0.0..1.0),
            score: rng.gen(),
            variance: rng.gen_range(0.0..1e6),
        })
        .collect();
    let set = MatchSet { coarse: fine.iter().map(|m| CoarseMatch { i: m.i, j: m.j, score: m.score }).collect(), fine };
    let mut buf = Vec::new();
    set.write_jsonl(&mut buf)?;
    if MatchSet::read_jsonl(BufReader::new(&buf[..]))? != set {
        failures.push("match set json");
    }
    Ok(outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "gen, train, match, eval, bench, ablate bitwise repeatable; tensor file and match JSON lossless".to_string()
        } else {
            format!("not reproducible: {failures:?}")
        },
    ))
}

fn report(id: usize, name: &str, result: Result<Outcome>) -> bool {
    let o = result.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

/// Criterion numbers given as arguments restrict the run to those.
fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let mut passes = Vec::new();
    let cheap: [(usize, &str, fn() -> Result<Outcome>); 5] = [
        (1, "flow loss equals Gaussian negative log-likelihood", flow_loss_identity),
        (2, "analytic gradients match central differences", gradient_suite),
        (3, "full-span local attention equals global attention", local_equals_global),
        (4, "multiply-add scaling of local and full attention", mac_scaling),
        (5, "Gaussian density integrates to one", gaussian_normalization),
    ];
    for (id, name, f) in cheap {
        if wanted(id) {
            passes.push(report(id, name, f()));
        }
    }
    if (6..=9).any(wanted) {
        match reference_run() {
            Ok(r) => {
                if wanted(6) {
                    passes.push(report(6, "reference training", Ok(reference_training(&r))));
                }
                if wanted(7) {
                    passes.push(report(7, "uncertainty higher on unmatchable cells", Ok(uncertainty_separation(&r))));
                }
                if wanted(8) {
                    passes.push(report(8, "attention-mode ablation", ablation(&r)));
                }
                if wanted(9) {
                    passes.push(report(9, "normalized encoding at 1.5x resolution", resolution_transfer(&r)));
                }
            }
            Err(e) => {
                for id in (6..=9).filter(|&id| wanted(id)) {
                    passes.push(report(id, "training criteria", Err(aspan::Error::Input(format!("reference run failed: {e}")))));
                }
            }
        }
    }
    if wanted(10) {
        passes.push(report(10, "bitwise reproducibility and lossless serialization", reproducibility()));
    }
    let failed = passes.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", passes.len() - failed, passes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
