//! Subcommand bodies shared by the `aspan` binary, the acceptance suite
//! and the FFI layer. Each writes its artifacts under an output directory
//! and returns the report it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{run_bench, BenchConfig, ScalingTable};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::gla::AttentionMode;
use crate::matcher::{MatchSet, COARSE_STRIDE};
use crate::model::{Model, MatchOutput};
use crate::synth::{gen_dataset, read_dataset, write_dataset, DatasetManifest, SynthPair};
use crate::tensor::Tensor;
use crate::train::{train, MetricsReport};
use crate::viz;

pub const WEIGHTS_DIR: &str = "weights";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVAL_FILE: &str = "eval.json";
pub const MATCHES_FILE: &str = "matches.jsonl";
pub const SCALING_FILE: &str = "scaling.json";
pub const ABLATION_FILE: &str = "ablation.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Generates the configured dataset under `out`.
pub fn cmd_gen(cfg: &RunConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    cfg.synth.validate()?;
    let (manifest, pairs) = gen_dataset(&cfg.synth, seed)?;
    write_dataset(out, &manifest, &pairs)?;
    Ok(manifest)
}

/// Splits `pairs` into training and held-out parts, the latter taken from
/// the end.
pub fn split_holdout(mut pairs: Vec<SynthPair>, holdout: usize) -> Result<(Vec<SynthPair>, Vec<SynthPair>)> {
    if holdout >= pairs.len() {
        return Err(Error::Config(format!("holdout {holdout} leaves no training pairs out of {}", pairs.len())));
    }
    let rest = pairs.split_off(pairs.len() - holdout);
    Ok((pairs, rest))
}

/// Trains a freshly initialized model on `pairs`. The positional encoding
/// is normalized to the dataset's extent.
pub fn train_model(
    cfg: &RunConfig,
    seed: u64,
    pairs: &[SynthPair],
    holdout: &[SynthPair],
    dump_dir: Option<&Path>,
) -> Result<(Model, MetricsReport)> {
    cfg.validate()?;
    let mut model_cfg = cfg.model.clone();
    if let Some(p) = pairs.first() {
        model_cfg.train_extent = p.extent();
    }
    let mut model = Model::new(model_cfg, seed)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let report = train(&mut model, pairs, holdout, &tcfg, dump_dir, |_| {})?;
    Ok((model, report))
}

/// Trains on the dataset at `data` and writes `weights/` and
/// `metrics.json` under `out`.
pub fn cmd_train(cfg: &RunConfig, seed: u64, data: &Path, out: &Path) -> Result<MetricsReport> {
    let (_, pairs) = read_dataset(data)?;
    let (pairs, holdout) = split_holdout(pairs, cfg.train.holdout)?;
    let (model, report) = train_model(cfg, seed, &pairs, &holdout, Some(out))?;
    model.save(out.join(WEIGHTS_DIR))?;
    write_json(&out.join(METRICS_FILE), &report)?;
    Ok(report)
}

/// Reads an `[H, W, C]` image from a tensor file (rank 2 or 3) or a binary
/// PGM/PPM.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        return read_pnm(&bytes);
    }
    let (t, _) = Tensor::from_bytes(&bytes)?;
    match t.rank() {
        2 => {
            let s = t.shape().to_vec();
            t.into_shape(&[s[0], s[1], 1])
        }
        3 => Ok(t),
        r => Err(Error::Input(format!("image tensor must have rank 2 or 3, got {r}"))),
    }
}

fn read_pnm(bytes: &[u8]) -> Result<Tensor> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Format("malformed PNM header".into()))?;
        fields.push(field);
    }
    let (w, h, max) = (fields[0], fields[1], fields[2]);
    if max == 0 || max > 255 {
        return Err(Error::Format(format!("unsupported PNM depth {max}")));
    }
    let data = bytes.get(pos + 1..pos + 1 + w * h * channels).ok_or_else(|| Error::Format("truncated PNM data".into()))?;
    Tensor::new(vec![h, w, channels], data.iter().map(|&b| b as f64 / max as f64).collect())
}

/// Files written by [`cmd_match`] with `viz`.
pub const VIZ_FILES: [&str; 3] = ["matches.ppm", "uncertainty.ppm", "spans.ppm"];

/// Matches two images with the weights at `weights`, writes
/// `matches.jsonl` and optionally the three figures under `out`.
pub fn cmd_match(weights: &Path, image_a: &Path, image_b: &Path, out: &Path, viz: bool) -> Result<MatchOutput> {
    let model = Model::load(weights)?;
    let a = read_image(image_a)?;
    let b = read_image(image_b)?;
    let result = model.match_images(&a, &b)?;
    log::info!("{} coarse matches, encoding scales {:?}", result.matches.len(), result.pe_scales);
    fs::create_dir_all(out)?;
    result.matches.write_jsonl(fs::File::create(out.join(MATCHES_FILE))?)?;
    if viz {
        write_figures(&a, &b, &result, out)?;
    }
    Ok(result)
}

/// Match overlay, final-block uncertainty of A, and the fine-level spans of
/// A's cells in B from the final block.
pub fn write_figures(a: &Tensor, b: &Tensor, result: &MatchOutput, out: &Path) -> Result<()> {
    viz::match_overlay(a, b, &result.matches)?.save(out.join(VIZ_FILES[0]))?;
    if let Some((flow_a, _)) = result.flows.last() {
        viz::uncertainty_heatmap(a, flow_a)?.save(out.join(VIZ_FILES[1]))?;
    }
    if let Some(Some((spans_a, _))) = result.spans.last() {
        let (h, _) = spans_a.query_extent;
        let stride = a.shape()[0] / h.max(1);
        viz::span_overlay(a, b, spans_a, stride)?.save(out.join(VIZ_FILES[2]))?;
    }
    Ok(())
}

/// Evaluates the weights at `weights` on every pair of the dataset at
/// `data` and writes `eval.json`.
pub fn cmd_eval(weights: &Path, data: &Path, out: &Path) -> Result<EvalReport> {
    let model = Model::load(weights)?;
    let (_, pairs) = read_dataset(data)?;
    let report = evaluate(&model, &pairs)?;
    write_json(&out.join(EVAL_FILE), &report)?;
    Ok(report)
}

pub fn bench_config(cfg: &RunConfig, seed: u64) -> BenchConfig {
    let g = &cfg.model.gla;
    BenchConfig { dim: g.dim, samples_per_axis: g.samples_per_axis, cell_size: g.cell_size_fine, n_sigma: g.n_sigma, seed }
}

/// Runs the scaling benchmark and writes `scaling.json`. Timings vary
/// between runs; operation counts do not.
pub fn cmd_bench(cfg: &RunConfig, seed: u64, out: &Path) -> Result<ScalingTable> {
    for &s in &cfg.bench_sizes() {
        if s == 0 || s % COARSE_STRIDE != 0 {
            return Err(Error::Config(format!("benchmark size {s} must be a positive multiple of {COARSE_STRIDE}")));
        }
    }
    let table = run_bench(&cfg.bench_sizes(), &bench_config(cfg, seed))?;
    write_json(&out.join(SCALING_FILE), &table)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AttentionMode,
    pub final_loss: f64,
    pub precision_2px: f64,
    pub precision_5px: f64,
    pub recall_5px: f64,
    pub epe_per_block: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    /// Whether precision@5px is ordered adaptive >= fixed >= single-level.
    pub ordered: bool,
    /// Describes the first violated comparison when not ordered.
    pub inversion: Option<String>,
}

pub const ABLATION_MODES: [AttentionMode; 3] =
    [AttentionMode::SingleLevel, AttentionMode::FixedSpan, AttentionMode::AdaptiveSpan];

/// Evaluates a model trained under `mode` on `holdout`.
pub fn ablation_row(mode: AttentionMode, model: &Model, report: &MetricsReport, holdout: &[SynthPair]) -> Result<AblationRow> {
    let eval = evaluate(model, holdout)?;
    log::info!("{mode:?}: precision@5px {:.3}", eval.precision_5px);
    Ok(AblationRow {
        mode,
        final_loss: report.epochs.last().map_or(report.initial.total, |e| e.train.total),
        precision_2px: eval.precision_2px,
        precision_5px: eval.precision_5px,
        recall_5px: eval.recall_5px,
        epe_per_block: eval.epe_per_block,
    })
}

/// Checks the precision@5px ordering of rows listed in [`ABLATION_MODES`]
/// order.
pub fn ablation_report(seed: u64, rows: Vec<AblationRow>) -> AblationReport {
    let inversion = rows.windows(2).find(|w| w[1].precision_5px < w[0].precision_5px).map(|w| {
        format!(
            "{:?} precision@5px {:.4} is below {:?} at {:.4}",
            w[1].mode, w[1].precision_5px, w[0].mode, w[0].precision_5px
        )
    });
    AblationReport { seed, rows, ordered: inversion.is_none(), inversion }
}

/// Trains one model per attention mode with the same seed, data and
/// budget and evaluates each on `holdout`.
pub fn ablate(cfg: &RunConfig, seed: u64, pairs: &[SynthPair], holdout: &[SynthPair]) -> Result<AblationReport> {
    if holdout.is_empty() {
        return Err(Error::Config("ablation needs held-out pairs".into()));
    }
    let mut rows = Vec::new();
    for mode in ABLATION_MODES {
        let mode_cfg = RunConfig { model: cfg.model.with_mode(mode), ..cfg.clone() };
        let (model, report) = train_model(&mode_cfg, seed, pairs, &[], None)?;
        rows.push(ablation_row(mode, &model, &report, holdout)?);
    }
    Ok(ablation_report(seed, rows))
}

/// Runs [`ablate`] on the dataset at `data`, holding out
/// `cfg.train.holdout` pairs (at least one), and writes `ablation.json`.
pub fn cmd_ablate(cfg: &RunConfig, seed: u64, data: &Path, out: &Path) -> Result<AblationReport> {
    let (_, pairs) = read_dataset(data)?;
    let (pairs, holdout) = split_holdout(pairs, cfg.train.holdout.max(1))?;
    let report = ablate(cfg, seed, &pairs, &holdout)?;
    write_json(&out.join(ABLATION_FILE), &report)?;
    Ok(report)
}

/// Fixed-width text table of an ablation report.
pub fn ablation_table(report: &AblationReport) -> String {
    let mut s = format!("{:<14} {:>10} {:>8} {:>8} {:>8}  epe per block\n", "mode", "loss", "p@2px", "p@5px", "r@5px");
    for r in &report.rows {
        let epe: Vec<String> = r.epe_per_block.iter().map(|e| format!("{e:.3}")).collect();
        s += &format!(
            "{:<14} {:>10.4} {:>8.3} {:>8.3} {:>8.3}  {}\n",
            format!("{:?}", r.mode),
            r.final_loss,
            r.precision_2px,
            r.precision_5px,
            r.recall_5px,
            epe.join(" ")
        );
    }
    match &report.inversion {
        Some(msg) => s += &format!("INVERSION: {msg}\n"),
        None => s += "ordering holds: adaptive_span >= fixed_span >= single_level\n",
    }
    s
}

/// `out` or a default directory name when absent.
pub fn out_dir(out: Option<PathBuf>, default: &str) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from(default))
}

/// Reads the run configuration or falls back to defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Matches as a lossless JSON-lines string.
pub fn matches_to_string(m: &MatchSet) -> Result<String> {
    let mut buf = Vec::new();
    m.write_jsonl(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_reader_parses_comments() {
        let mut bytes = b"P5\n# note\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let t = read_pnm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 1]);
        assert_eq!(t.data(), &[0.0, 1.0]);
        assert!(read_pnm(b"P5\n2 1\n255\n\x00").is_err());
    }

    #[test]
    fn ppm_round_trip_through_viz() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::new(vec![1, 2, 1], vec![0.0, 1.0]).unwrap();
        let path = dir.path().join("x.ppm");
        viz::Rgb::from_image(&img).unwrap().save(&path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.shape(), &[1, 2, 3]);
        assert_eq!(back.data()[3], 1.0);
    }

    #[test]
    fn holdout_split() {
        let (_, pairs) = gen_dataset(&crate::synth::SynthConfig { n_pairs: 3, ..Default::default() }, 1).unwrap();
        let (a, b) = split_holdout(pairs.clone(), 1).unwrap();
        assert_eq!((a.len(), b.len()), (2, 1));
        assert_eq!(b[0].spec, pairs[2].spec);
        assert!(split_holdout(pairs, 3).is_err());
    }

    #[test]
    fn inversion_is_flagged() {
        let row = |mode, p| AblationRow { mode, final_loss: 0.0, precision_2px: p, precision_5px: p, recall_5px: 0.0, epe_per_block: vec![] };
        let rows = vec![
            row(AttentionMode::SingleLevel, 0.5),
            row(AttentionMode::FixedSpan, 0.4),
            row(AttentionMode::AdaptiveSpan, 0.6),
        ];
        let inversion = rows.windows(2).find(|w| w[1].precision_5px < w[0].precision_5px).map(|_| "x".to_string());
        let report = AblationReport { seed: 0, rows, ordered: inversion.is_none(), inversion };
        assert!(ablation_table(&report).contains("INVERSION"));
    }
}
