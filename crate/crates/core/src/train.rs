//! Adam training with a warmup-then-halving schedule and deterministic
//! data-parallel gradient accumulation.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{Model, PairTargets};
use crate::synth::SynthPair;
use crate::tensor::Tensor;

/// Learning rate for `step` (0-based) of `epoch`: linear ramp to `base`
/// over the warmup epochs, then `base * 0.5^floor(epoch / period)`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        let done = (epoch * steps_per_epoch + step + 1) as f64;
        cfg.learning_rate * done / (cfg.warmup_epochs * steps_per_epoch.max(1)) as f64
    } else {
        cfg.learning_rate * 0.5f64.powi((epoch / cfg.halving_period) as i32)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Adam {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam { beta1, beta2, eps, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Mean loss terms over a set of pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub coarse: f64,
    pub fine: f64,
    pub flow: f64,
}

impl LossSummary {
    fn mean(values: &[[f64; 4]]) -> LossSummary {
        let n = values.len().max(1) as f64;
        let s = values.iter().fold([0.0; 4], |a, v| [a[0] + v[0], a[1] + v[1], a[2] + v[2], a[3] + v[3]]);
        LossSummary { total: s[0] / n, coarse: s[1] / n, fine: s[2] / n, flow: s[3] / n }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub learning_rate: f64,
    /// Running mean over the epoch's training steps.
    pub train: LossSummary,
    pub holdout: Option<EvalReport>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Training-set losses before the first update.
    pub initial: LossSummary,
    pub epochs: Vec<EpochMetrics>,
    pub final_eval: Option<EvalReport>,
    pub scaling: Option<crate::bench::ScalingTable>,
}

impl LossSummary {
    pub fn all_finite(&self) -> bool {
        [self.total, self.coarse, self.fine, self.flow].iter().all(|v| v.is_finite())
    }
}

impl MetricsReport {
    pub fn all_finite(&self) -> bool {
        let eval_ok = |e: &Option<EvalReport>| e.as_ref().is_none_or(EvalReport::all_finite);
        self.initial.all_finite()
            && self.epochs.iter().all(|e| e.train.all_finite() && e.learning_rate.is_finite() && eval_ok(&e.holdout))
            && eval_ok(&self.final_eval)
            && self.scaling.as_ref().is_none_or(|s| s.all_finite())
    }
}

/// Loss values and parameter gradients for one pair.
pub fn pair_gradient(model: &Model, pair: &SynthPair, targets: &PairTargets, alpha: f64) -> Result<([f64; 4], Vec<Tensor>)> {
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let fwd = model.forward(&p, &pair.image_a, &pair.image_b)?;
    let losses = model.losses(&fwd, targets, alpha)?;
    let values = losses.values();
    if !values.iter().all(|v| v.is_finite()) {
        return Ok((values, Vec::new()));
    }
    let g = tape.backward(losses.total)?;
    Ok((values, p.vars().iter().map(|&v| g.wrt(v)).collect()))
}

/// Loss values only.
pub fn pair_loss(model: &Model, pair: &SynthPair, targets: &PairTargets, alpha: f64) -> Result<[f64; 4]> {
    let tape = Tape::new();
    let p = model.store.bind_frozen(&tape);
    let fwd = model.forward(&p, &pair.image_a, &pair.image_b)?;
    Ok(model.losses(&fwd, targets, alpha)?.values())
}

pub fn mean_loss(model: &Model, pairs: &[SynthPair], targets: &[PairTargets], alpha: f64) -> Result<LossSummary> {
    let v = pairs.par_iter().zip(targets).map(|(p, t)| pair_loss(model, p, t, alpha)).collect::<Result<Vec<_>>>()?;
    Ok(LossSummary::mean(&v))
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    step: usize,
    pair_seeds: Vec<u64>,
    losses: Vec<[f64; 4]>,
    learning_rate: f64,
    parameter_norms: Vec<(&'a str, f64)>,
}

fn write_dump(
    dir: Option<&Path>,
    model: &Model,
    epoch: usize,
    step: usize,
    pair_seeds: Vec<u64>,
    losses: &[[f64; 4]],
    learning_rate: f64,
) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    let dump = NanDump {
        epoch,
        step,
        pair_seeds,
        losses: losses.to_vec(),
        learning_rate,
        parameter_norms: model.store.iter().map(|(n, t)| (n, t.data().iter().map(|v| v * v).sum::<f64>().sqrt())).collect(),
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(NAN_DUMP_FILE), serde_json::to_vec_pretty(&dump)?)?;
    Ok(())
}

pub const NAN_DUMP_FILE: &str = "nan_dump.json";

/// Trains `model` in place. `holdout` pairs are evaluated after every epoch
/// when non-empty. A non-finite loss or parameter aborts with
/// [`Error::Numeric`]; when `dump_dir` is given a JSON diagnostic of the
/// offending batch is written there first.
pub fn train(
    model: &mut Model,
    pairs: &[SynthPair],
    holdout: &[SynthPair],
    cfg: &TrainConfig,
    dump_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<MetricsReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("training needs at least one pair".into()));
    }
    let targets = pairs.par_iter().map(PairTargets::from_pair).collect::<Result<Vec<_>>>()?;
    let initial = mean_loss(model, pairs, &targets, cfg.alpha)?;
    log::info!("initial loss {:.4}", initial.total);
    let mut adam = Adam::new(model.store.values(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a41);
    let steps = pairs.len().div_ceil(cfg.batch_size);
    let mut report = MetricsReport { initial, ..Default::default() };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(pairs.len());
        let mut lr = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            lr = learning_rate(cfg, epoch, step, steps);
            let batch_seeds = || batch.iter().map(|&k| pairs[k].spec.seed).collect::<Vec<_>>();
            let results = match batch
                .par_iter()
                .map(|&k| pair_gradient(model, &pairs[k], &targets[k], cfg.alpha))
                .collect::<Result<Vec<_>>>()
            {
                Err(e @ Error::Numeric(_)) => {
                    write_dump(dump_dir, model, epoch, step, batch_seeds(), &[], lr)?;
                    return Err(e);
                }
                r => r?,
            };
            let losses: Vec<[f64; 4]> = results.iter().map(|r| r.0).collect();
            if results.iter().any(|(v, g)| g.is_empty() || !v.iter().all(|x| x.is_finite())) {
                write_dump(dump_dir, model, epoch, step, batch_seeds(), &losses, lr)?;
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch} step {step}: {losses:?}")));
            }
            let mut grads: Vec<Tensor> = model.store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let scale = 1.0 / batch.len() as f64;
            for (values, g) in &results {
                seen.push(*values);
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += scale * b);
                }
            }
            adam.step(model.store.values_mut(), &grads, lr);
            if !model.store.all_finite() {
                write_dump(dump_dir, model, epoch, step, batch_seeds(), &losses, lr)?;
                return Err(Error::Numeric(format!("parameters became non-finite at epoch {epoch} step {step}")));
            }
        }
        let holdout_eval = if holdout.is_empty() { None } else { Some(evaluate(model, holdout)?) };
        let m = EpochMetrics {
            epoch,
            learning_rate: lr,
            train: LossSummary::mean(&seen),
            holdout: holdout_eval,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: loss {:.4} lr {lr:.2e}", m.train.total);
        progress(&m);
        report.epochs.push(m);
    }
    report.final_eval = report.epochs.last().and_then(|e| e.holdout.clone());
    Ok(report)
}
