//! Small convolutional extractor producing stride-8 and stride-2 feature maps.
//!
//! Stack: `conv -> relu -> pool2` (stride 2, tapped for the fine map through
//! a projection conv), `conv -> relu -> pool2` (stride 4), `conv -> pool2`
//! (stride 8).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::tensor::Tensor;

/// A feature grid at a given stride relative to its source image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub grid: Tensor,
    pub stride: usize,
    /// `(H_img, W_img)` of the source image.
    pub image_extent: (usize, usize),
}

impl FeatureMap {
    pub fn extent(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }

    pub fn dim(&self) -> usize {
        self.grid.last_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output widths of the three conv blocks; the last is the model width D.
    pub channels: [usize; 3],
    /// Width of the stride-2 map.
    pub fine_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { in_channels: 1, channels: [16, 32, 64], fine_dim: 32 }
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn declare<R: Rng>(b: &mut ParamBuilder<R>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        b.push_scope(name);
        let kernel = b.glorot("kernel", &[3, 3, d_in, d_out], 9 * d_in, 9 * d_out)?;
        let bias = b.constant("bias", &[d_out], 0.0)?;
        b.pop_scope();
        Ok(ConvLayer { kernel, bias })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv3x3(p.var(self.kernel), p.var(self.bias))
    }
}

/// Parameter handles of the extractor.
#[derive(Clone, Debug)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub blocks: [ConvLayer; 3],
    pub fine_proj: ConvLayer,
}

impl BackboneWeights {
    pub fn declare<R: Rng>(b: &mut ParamBuilder<R>, config: &BackboneConfig) -> Result<Self> {
        let [c1, c2, c3] = config.channels;
        b.push_scope("backbone");
        let blocks = [
            ConvLayer::declare(b, "conv1", config.in_channels, c1)?,
            ConvLayer::declare(b, "conv2", c1, c2)?,
            ConvLayer::declare(b, "conv3", c2, c3)?,
        ];
        let fine_proj = ConvLayer::declare(b, "fine_proj", c1, config.fine_dim)?;
        b.pop_scope();
        Ok(BackboneWeights { config: config.clone(), blocks, fine_proj })
    }

    /// Returns `(stride-8 map, stride-2 map)` for an `[H, W, C]` image.
    pub fn forward<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = image.shape();
        check_image(&shape, self.config.in_channels)?;
        let x1 = self.blocks[0].forward(p, image)?.relu().avg_pool(2)?;
        let fine = self.fine_proj.forward(p, x1)?;
        let x2 = self.blocks[1].forward(p, x1)?.relu().avg_pool(2)?;
        let x3 = self.blocks[2].forward(p, x2)?.avg_pool(2)?;
        Ok((x3, fine))
    }
}

pub(crate) fn check_image(shape: &[usize], channels: usize) -> Result<()> {
    match shape {
        [h, w, c] if *c == channels => {
            if h % 8 != 0 || w % 8 != 0 || *h == 0 || *w == 0 {
                Err(Error::Input(format!("image extent {h}x{w} must be a non-zero multiple of 8")))
            } else {
                Ok(())
            }
        }
        _ => Err(Error::Input(format!("expected [H, W, {channels}] image, got {shape:?}"))),
    }
}

/// Inference-only extraction without gradient tracking.
pub fn extract_features(
    image: &Tensor,
    weights: &BackboneWeights,
    store: &ParamStore,
) -> Result<(FeatureMap, FeatureMap)> {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let img = tape.constant(image.clone());
    let (c, f) = weights.forward(&p, img)?;
    let extent = (image.shape()[0], image.shape()[1]);
    Ok((
        FeatureMap { grid: (*c.value()).clone(), stride: 8, image_extent: extent },
        FeatureMap { grid: (*f.value()).clone(), stride: 2, image_extent: extent },
    ))
}
