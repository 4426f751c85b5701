//! Initialization block and the stack of global-local attention (GLA) blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    compute_span, global_attention, local_cross_attention, Level, Projection, SpanGrid, SpanPolicy,
    TemperatureSet,
};
use crate::autograd::{concat_last, Var};
use crate::error::{Error, Result};
use crate::flow::{pool_flow, regress_flow, FlowHeadWeights, FlowPrediction};
use crate::nn::{Linear, Mlp};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Global attention at the coarse level only.
    SingleLevel,
    /// Three levels, local spans of constant size.
    FixedSpan,
    /// Three levels, spans sized from the regressed uncertainty.
    AdaptiveSpan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKernel {
    Conv3,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlaConfig {
    pub dim: usize,
    pub num_blocks: usize,
    pub coarse_extent: (usize, usize),
    pub n_sigma: f64,
    pub cell_size_fine: usize,
    pub cell_size_medium: usize,
    pub samples_per_axis: usize,
    pub attention_mode: AttentionMode,
    pub fixed_span_px: f64,
    pub ffn_kernel: FfnKernel,
    /// Share weights between the A->B and B->A directions.
    pub tie_directions: bool,
    /// Initial attention temperature; `None` means `1 / sqrt(dim)`.
    pub init_temperature: Option<f64>,
}

impl Default for GlaConfig {
    fn default() -> Self {
        GlaConfig {
            dim: 64,
            num_blocks: 2,
            coarse_extent: (8, 8),
            n_sigma: 5.0,
            cell_size_fine: 4,
            cell_size_medium: 2,
            samples_per_axis: 8,
            attention_mode: AttentionMode::AdaptiveSpan,
            fixed_span_px: 13.0,
            ffn_kernel: FfnKernel::Conv3,
            tie_directions: true,
            init_temperature: None,
        }
    }
}

impl GlaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_blocks == 0 {
            return bad("num_blocks must be >= 1");
        }
        if self.coarse_extent.0 == 0 || self.coarse_extent.1 == 0 {
            return bad("coarse extent must be at least 1x1");
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            return bad("dim must be a positive multiple of 4");
        }
        if self.cell_size_fine == 0 || self.cell_size_medium == 0 || self.samples_per_axis == 0 {
            return bad("cell sizes and samples per axis must be >= 1");
        }
        if self.n_sigma <= 0.0 || self.fixed_span_px <= 0.0 {
            return bad("span scales must be positive");
        }
        if matches!(self.init_temperature, Some(t) if t <= 0.0) {
            return bad("init temperature must be positive");
        }
        Ok(())
    }

    pub fn temperature(&self) -> f64 {
        self.init_temperature.unwrap_or(1.0 / (self.dim as f64).sqrt())
    }

    pub fn span_policy(&self) -> SpanPolicy {
        match self.attention_mode {
            AttentionMode::FixedSpan => SpanPolicy::Fixed { half_extent_px: self.fixed_span_px },
            _ => SpanPolicy::Adaptive { n_sigma: self.n_sigma },
        }
    }
}

/// `F + LN(K(F || M))` with `K` a 3x3 conv or a per-position linear map.
#[derive(Clone, Debug)]
pub struct FfnWeights {
    pub kind: FfnKernel,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl FfnWeights {
    pub fn declare<R: Rng>(b: &mut ParamBuilder<R>, name: &str, d: usize, kind: FfnKernel) -> Result<Self> {
        b.push_scope(name);
        let kernel = match kind {
            FfnKernel::Conv3 => b.glorot("kernel", &[3, 3, 2 * d, d], 18 * d, 9 * d)?,
            FfnKernel::Linear => b.glorot("kernel", &[2 * d, d], 2 * d, d)?,
        };
        let out = FfnWeights {
            kind,
            kernel,
            bias: b.constant("bias", &[d], 0.0)?,
            ln_gain: b.constant("ln_gain", &[d], 1.0)?,
            ln_bias: b.constant("ln_bias", &[d], 0.0)?,
        };
        b.pop_scope();
        Ok(out)
    }
}

/// Residual update of `f` (`[H, W, D]`) with message `m` of the same shape.
pub fn ffn<'t>(p: &Bound<'t>, w: &FfnWeights, f: Var<'t>, m: Var<'t>) -> Result<Var<'t>> {
    if f.shape() != m.shape() {
        return Err(Error::dim(format!("ffn inputs differ: {:?} vs {:?}", f.shape(), m.shape())));
    }
    let x = concat_last(&[f, m])?;
    let y = match w.kind {
        FfnKernel::Conv3 => x.conv3x3(p.var(w.kernel), p.var(w.bias))?,
        FfnKernel::Linear => {
            let shape = f.shape();
            let d = shape[2];
            let lin = Linear { weight: w.kernel, bias: w.bias, d_in: 2 * d, d_out: d };
            lin.forward(p, x)?
        }
    };
    f.add(y.layer_norm(p.var(w.ln_gain), p.var(w.ln_bias))?)
}

/// Concatenates three same-extent messages and maps them to width `D`.
pub fn fuse_messages<'t>(p: &Bound<'t>, mlp: &Mlp, mc: Var<'t>, mm: Var<'t>, mf: Var<'t>) -> Result<Var<'t>> {
    let (sc, sm, sf) = (mc.shape(), mm.shape(), mf.shape());
    if sc != sm || sm != sf {
        return Err(Error::dim(format!("message extents differ: {sc:?} {sm:?} {sf:?}")));
    }
    mlp.forward(p, concat_last(&[mc, mm, mf])?)
}

/// `(coarse, medium, fine)` levels of one feature map.
pub struct Pyramid<'t> {
    pub coarse: Var<'t>,
    pub medium: Var<'t>,
    pub fine: Var<'t>,
}

/// Medium = 2x average pool of the fine map; coarse = bilinear resize of the
/// medium map to exactly `coarse_extent`.
pub fn build_pyramid<'t>(fine: Var<'t>, coarse_extent: (usize, usize)) -> Result<Pyramid<'t>> {
    let shape = fine.shape();
    if shape.len() != 3 {
        return Err(Error::dim(format!("pyramid input must be [H, W, D], got {shape:?}")));
    }
    let medium = fine.avg_pool(2)?;
    let coarse = medium.resize_bilinear(coarse_extent.0, coarse_extent.1)?;
    Ok(Pyramid { coarse, medium, fine })
}

/// Weights of one direction of one GLA block.
#[derive(Clone, Debug)]
pub struct DirectionWeights {
    pub coarse: Projection,
    pub medium: Projection,
    pub fine: Projection,
    pub fuse: Mlp,
    pub ffn: FfnWeights,
    pub flow_head: FlowHeadWeights,
    pub temperatures: TemperatureSet,
}

impl DirectionWeights {
    fn declare<R: Rng>(b: &mut ParamBuilder<R>, name: &str, cfg: &GlaConfig) -> Result<Self> {
        let d = cfg.dim;
        b.push_scope(name);
        let out = DirectionWeights {
            coarse: Projection::declare(b, "coarse", d)?,
            medium: Projection::declare(b, "medium", d)?,
            fine: Projection::declare(b, "fine", d)?,
            fuse: Mlp::declare(b, "fuse", &[3 * d, d, d])?,
            ffn: FfnWeights::declare(b, "ffn", d, cfg.ffn_kernel)?,
            flow_head: FlowHeadWeights::declare(b, "flow_head", d)?,
            temperatures: TemperatureSet::declare(b, "log_tau", cfg.temperature())?,
        };
        b.pop_scope();
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    /// One entry when directions are tied, two (A->B, B->A) otherwise.
    pub directions: Vec<DirectionWeights>,
}

impl BlockWeights {
    pub fn direction(&self, k: usize) -> &DirectionWeights {
        &self.directions[k.min(self.directions.len() - 1)]
    }
}

#[derive(Clone, Debug)]
pub struct InitRound {
    pub proj: Projection,
    pub ffn: FfnWeights,
    pub log_tau: ParamId,
}

#[derive(Clone, Debug)]
pub struct GlaWeights {
    pub init: Vec<InitRound>,
    pub blocks: Vec<BlockWeights>,
}

pub const INIT_ROUNDS: usize = 2;

impl GlaWeights {
    pub fn declare<R: Rng>(b: &mut ParamBuilder<R>, cfg: &GlaConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        b.push_scope("gla");
        let mut init = Vec::with_capacity(INIT_ROUNDS);
        for r in 0..INIT_ROUNDS {
            b.push_scope(&format!("init{r}"));
            init.push(InitRound {
                proj: Projection::declare(b, "proj", d)?,
                ffn: FfnWeights::declare(b, "ffn", d, cfg.ffn_kernel)?,
                log_tau: b.constant("log_tau", &[1], cfg.temperature().ln())?,
            });
            b.pop_scope();
        }
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for k in 0..cfg.num_blocks {
            b.push_scope(&format!("block{k}"));
            let dirs = if cfg.tie_directions { 1 } else { 2 };
            let directions = (0..dirs)
                .map(|dk| DirectionWeights::declare(b, &format!("dir{dk}"), cfg))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(BlockWeights { directions });
            b.pop_scope();
        }
        b.pop_scope();
        Ok(GlaWeights { init, blocks })
    }
}

/// Downsamples both maps to the coarse extent, runs two symmetric rounds of
/// global cross attention + FFN there, and adds the upsampled residual back.
pub fn init_block<'t>(
    p: &Bound<'t>,
    rounds: &[InitRound],
    cfg: &GlaConfig,
    fa: Var<'t>,
    fb: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (h0, w0) = cfg.coarse_extent;
    let ca0 = fa.resize_bilinear(h0, w0)?;
    let cb0 = fb.resize_bilinear(h0, w0)?;
    let (mut ca, mut cb) = (ca0, cb0);
    for round in rounds {
        let tau = p.var(round.log_tau).exp();
        let ma = global_attention(p, &round.proj, ca, cb, tau)?;
        let mb = global_attention(p, &round.proj, cb, ca, tau)?;
        let next_a = ffn(p, &round.ffn, ca, ma)?;
        let next_b = ffn(p, &round.ffn, cb, mb)?;
        ca = next_a;
        cb = next_b;
    }
    let up = |c: Var<'t>, c0: Var<'t>, f: Var<'t>| -> Result<Var<'t>> {
        let s = f.shape();
        f.add(c.sub(c0)?.resize_bilinear(s[0], s[1])?)
    };
    Ok((up(ca, ca0, fa)?, up(cb, cb0, fb)?))
}

/// Output of one GLA block.
pub struct BlockOutput<'t> {
    pub fa: Var<'t>,
    pub fb: Var<'t>,
    pub flow_a: FlowPrediction<'t>,
    pub flow_b: FlowPrediction<'t>,
    /// Fine-level spans used in each direction (absent in single-level mode).
    pub spans: Option<(SpanGrid, SpanGrid)>,
}

/// Message for one direction: `source` attends to `target`.
#[allow(clippy::too_many_arguments)]
fn direction_update<'t>(
    p: &Bound<'t>,
    w: &DirectionWeights,
    cfg: &GlaConfig,
    src: &Pyramid<'t>,
    tgt: &Pyramid<'t>,
    flow: &FlowPrediction<'t>,
) -> Result<(Var<'t>, Option<SpanGrid>)> {
    let fine_shape = src.fine.shape();
    let (h, wd) = (fine_shape[0], fine_shape[1]);
    let tau_c = w.temperatures.get(p, Level::Coarse)?;
    let mc = global_attention(p, &w.coarse, src.coarse, tgt.coarse, tau_c)?.resize_bilinear(h, wd)?;
    let (mm, mf, spans) = match cfg.attention_mode {
        AttentionMode::SingleLevel => {
            let zeros = src.fine.tape().constant(Tensor::zeros(&fine_shape));
            (zeros, zeros, None)
        }
        AttentionMode::FixedSpan | AttentionMode::AdaptiveSpan => {
            let policy = cfg.span_policy();
            let g = cfg.samples_per_axis;
            let flow_fine = flow.to_flow_map();
            let flow_medium = pool_flow(&flow_fine, 2)?;
            let tf = tgt.fine.shape();
            let tm = tgt.medium.shape();
            let spans_f = compute_span(&flow_fine, cfg.cell_size_fine, policy, (tf[0], tf[1]), g)?;
            let spans_m = compute_span(&flow_medium, cfg.cell_size_medium, policy, (tm[0], tm[1]), g)?;
            let tau_f = w.temperatures.get(p, Level::Fine)?;
            let tau_m = w.temperatures.get(p, Level::Medium)?;
            let mf = local_cross_attention(p, &w.fine, src.fine, tgt.fine, &spans_f, tau_f)?;
            let mm = local_cross_attention(p, &w.medium, src.medium, tgt.medium, &spans_m, tau_m)?
                .resize_bilinear(h, wd)?;
            (mm, mf, Some(spans_f))
        }
    };
    let m = fuse_messages(p, &w.fuse, mc, mm, mf)?;
    Ok((ffn(p, &w.ffn, src.fine, m)?, spans))
}

/// One GLA block: regress flow from the input features, attend at three
/// levels in both directions, fuse, and update with the FFN.
pub fn gla_block<'t>(
    p: &Bound<'t>,
    w: &BlockWeights,
    cfg: &GlaConfig,
    fa: Var<'t>,
    fb: Var<'t>,
    image_extent: (usize, usize),
) -> Result<BlockOutput<'t>> {
    let flow_a = regress_flow(p, &w.direction(0).flow_head, fa, 8, image_extent)?;
    let flow_b = regress_flow(p, &w.direction(1).flow_head, fb, 8, image_extent)?;
    let pa = build_pyramid(fa, cfg.coarse_extent)?;
    let pb = build_pyramid(fb, cfg.coarse_extent)?;
    let (na, sa) = direction_update(p, w.direction(0), cfg, &pa, &pb, &flow_a)?;
    let (nb, sb) = direction_update(p, w.direction(1), cfg, &pb, &pa, &flow_b)?;
    let spans = sa.zip(sb);
    Ok(BlockOutput { fa: na, fb: nb, flow_a, flow_b, spans })
}

pub struct StackOutput<'t> {
    pub fa: Var<'t>,
    pub fb: Var<'t>,
    /// Per block: `(flow of A, flow of B)`.
    pub flows: Vec<(FlowPrediction<'t>, FlowPrediction<'t>)>,
    /// Per block fine-level spans, when the mode uses them.
    pub spans: Vec<Option<(SpanGrid, SpanGrid)>>,
}

/// Initialization block followed by every GLA block.
pub fn run_stack<'t>(
    p: &Bound<'t>,
    w: &GlaWeights,
    cfg: &GlaConfig,
    fa: Var<'t>,
    fb: Var<'t>,
    image_extent: (usize, usize),
) -> Result<StackOutput<'t>> {
    if fa.shape() != fb.shape() {
        return Err(Error::dim(format!("feature maps differ: {:?} vs {:?}", fa.shape(), fb.shape())));
    }
    let (mut a, mut b) = init_block(p, &w.init, cfg, fa, fb)?;
    let mut flows = Vec::with_capacity(w.blocks.len());
    let mut spans = Vec::with_capacity(w.blocks.len());
    for block in &w.blocks {
        let out = gla_block(p, block, cfg, a, b, image_extent)?;
        flows.push((out.flow_a, out.flow_b));
        spans.push(out.spans);
        a = out.fa;
        b = out.fb;
    }
    Ok(StackOutput { fa: a, fb: b, flows, spans })
}
