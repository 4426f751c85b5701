//! The full matcher: backbone, positional encoding, GLA stack, coarse
//! matching, refinement and the training objective.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::SpanGrid;
use crate::autograd::{Tape, Var};
use crate::backbone::BackboneWeights;
use crate::config::ModelConfig;
use crate::encoding::{normalized_pe, sinusoidal_pe};
use crate::error::{Error, Result};
use crate::flow::{flow_loss, FlowMap, FlowTarget};
use crate::gla::{run_stack, GlaWeights, StackOutput};
use crate::matcher::{
    attach_fine, coarse_loss, fine_loss, mnn_filter, refine_matches, score_matrix, total_loss, CoarseMatch,
    MatchSet, MatcherWeights, ScoreMatrix, ScoreVars, COARSE_STRIDE,
};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::synth::{gt_coarse_matches, SynthPair};
use crate::tensor::Tensor;

/// Pixel intensities are centered by this offset before the backbone.
pub const IMAGE_OFFSET: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub backbone: BackboneWeights,
    pub gla: GlaWeights,
    pub matcher: MatcherWeights,
}

impl ModelWeights {
    fn declare<R: Rng>(b: &mut ParamBuilder<R>, cfg: &ModelConfig) -> Result<Self> {
        Ok(ModelWeights {
            backbone: BackboneWeights::declare(b, &cfg.backbone)?,
            gla: GlaWeights::declare(b, &cfg.gla)?,
            matcher: MatcherWeights::declare(b)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub weights: ModelWeights,
}

/// Supervision for one pair at the stride-8 level.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTargets {
    pub flow_a: FlowTarget,
    pub flow_b: FlowTarget,
    /// Flat `(A cell, B cell)` pairs.
    pub matches: Vec<(usize, usize)>,
}

impl PairTargets {
    pub fn from_pair(pair: &SynthPair) -> Result<PairTargets> {
        let (flow_a, flow_b) = pair.cell_targets(COARSE_STRIDE)?;
        Ok(PairTargets { flow_a, flow_b, matches: gt_coarse_matches(pair, COARSE_STRIDE)? })
    }
}

/// Differentiable outputs of one forward pass.
pub struct Forward<'t> {
    pub stack: StackOutput<'t>,
    pub fine_a: Var<'t>,
    pub fine_b: Var<'t>,
    pub scores: ScoreVars<'t>,
    pub coarse_extent: (usize, usize),
    pub image_extent: (usize, usize),
    /// Encoding coordinate scales `(alpha, beta)`.
    pub pe_scales: (f64, f64),
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub coarse: Var<'t>,
    pub fine: Var<'t>,
    pub flow: Var<'t>,
}

impl LossTerms<'_> {
    /// `(total, coarse, fine, flow)` values.
    pub fn values(&self) -> [f64; 4] {
        [self.total, self.coarse, self.fine, self.flow].map(|v| v.value().data()[0])
    }
}

/// Inference result for one image pair.
#[derive(Clone, Debug)]
pub struct MatchOutput {
    pub scores: ScoreMatrix,
    pub matches: MatchSet,
    /// Per block `(flow of A, flow of B)`.
    pub flows: Vec<(FlowMap, FlowMap)>,
    pub spans: Vec<Option<(SpanGrid, SpanGrid)>>,
    pub pe_scales: (f64, f64),
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::fresh(&mut rng);
        let weights = ModelWeights::declare(&mut b, &config)?;
        Ok(Model { config, store: b.finish(), weights })
    }

    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Model> {
        config.validate()?;
        let n = store.len();
        let mut b = ParamBuilder::existing(store);
        let weights = ModelWeights::declare(&mut b, &config)?;
        let store = b.finish();
        if store.len() != n {
            return Err(Error::Config("weights contain extra parameters".into()));
        }
        Ok(Model { config, store, weights })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.store.save(dir, Some(serde_json::to_value(&self.config)?))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Model> {
        let (store, cfg) = ParamStore::load(dir)?;
        let cfg = cfg.ok_or_else(|| Error::Format("weights manifest has no model config".into()))?;
        let config: ModelConfig = serde_json::from_value(cfg)?;
        Model::from_store(config, store)
    }

    /// Encoding for a `grid` of stride-8 cells; returns the grid and scales.
    pub fn positional_encoding(&self, grid: (usize, usize)) -> Result<(Tensor, (f64, f64))> {
        let d = self.config.gla.dim;
        let train = (self.config.train_extent.0 / COARSE_STRIDE, self.config.train_extent.1 / COARSE_STRIDE);
        let pe = if self.config.normalized_pe { normalized_pe(grid.0, grid.1, train, d)? } else { sinusoidal_pe(grid.0, grid.1, d)? };
        let scales = if self.config.normalized_pe { pe.scales() } else { (1.0, 1.0) };
        if grid != train {
            log::info!("feature grid {grid:?} differs from training grid {train:?}; encoding scales {scales:?}");
        }
        Ok((pe.grid, scales))
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, image_a: &Tensor, image_b: &Tensor) -> Result<Forward<'t>> {
        if image_a.shape() != image_b.shape() {
            return Err(Error::Input(format!(
                "images differ in shape: {:?} vs {:?}",
                image_a.shape(),
                image_b.shape()
            )));
        }
        let tape = p.vars().first().map(|v| v.tape()).ok_or_else(|| Error::Config("empty parameter set".into()))?;
        let image_extent = (image_a.shape()[0], image_a.shape().get(1).copied().unwrap_or(0));
        let prep = |img: &Tensor| tape.constant(img.map(|v| v - IMAGE_OFFSET));
        let (ca, fine_a) = self.weights.backbone.forward(p, prep(image_a))?;
        let (cb, fine_b) = self.weights.backbone.forward(p, prep(image_b))?;
        let s = ca.shape();
        let coarse_extent = (s[0], s[1]);
        let (pe, pe_scales) = self.positional_encoding(coarse_extent)?;
        let pe = tape.constant(pe);
        let stack = run_stack(p, &self.weights.gla, &self.config.gla, ca.add(pe)?, cb.add(pe)?, image_extent)?;
        let n = coarse_extent.0 * coarse_extent.1;
        let d = s[2];
        let tau = p.var(self.weights.matcher.log_tau).exp();
        let scores = score_matrix(stack.fa.reshape(&[n, d])?, stack.fb.reshape(&[n, d])?, tau)?;
        Ok(Forward { stack, fine_a, fine_b, scores, coarse_extent, image_extent, pe_scales })
    }

    /// `L_c + L_f + alpha * L_flow` against `targets`; refinement is
    /// supervised on the ground-truth coarse matches.
    pub fn losses<'t>(&self, fwd: &Forward<'t>, targets: &PairTargets, alpha: f64) -> Result<LossTerms<'t>> {
        let lc = coarse_loss(fwd.scores.log_scores, &targets.matches)?;
        let gt_coarse: Vec<CoarseMatch> = targets.matches.iter().map(|&(i, j)| CoarseMatch { i, j, score: 1.0 }).collect();
        let r = refine_matches(&gt_coarse, fwd.coarse_extent, fwd.fine_a, fwd.fine_b, self.config.window)?;
        let gt_xy: Vec<f64> = targets
            .matches
            .iter()
            .flat_map(|&(i, _)| [targets.flow_a.coords.data()[2 * i], targets.flow_a.coords.data()[2 * i + 1]])
            .collect();
        let gt = Tensor::new(vec![gt_coarse.len(), 2], gt_xy)?;
        let lf = fine_loss(r.coords_b, &gt, &r.variance)?;
        let lflow = flow_loss(&fwd.stack.flows, (&targets.flow_a, &targets.flow_b))?.loss;
        Ok(LossTerms { total: total_loss(lc, lf, lflow, alpha)?, coarse: lc, fine: lf, flow: lflow })
    }

    /// Inference without gradient tracking.
    pub fn match_images(&self, image_a: &Tensor, image_b: &Tensor) -> Result<MatchOutput> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let fwd = self.forward(&p, image_a, image_b)?;
        let scores = fwd.scores.to_score_matrix();
        let mut matches = mnn_filter(&scores, self.config.threshold)?;
        let r = refine_matches(&matches.coarse, fwd.coarse_extent, fwd.fine_a, fwd.fine_b, self.config.window)?;
        matches.fine = attach_fine(&matches.coarse, &r);
        let flows = fwd.stack.flows.iter().map(|(a, b)| (a.to_flow_map(), b.to_flow_map())).collect();
        Ok(MatchOutput { scores, matches, flows, spans: fwd.stack.spans, pe_scales: fwd.pe_scales })
    }
}
