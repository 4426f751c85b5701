//! Procedural image pairs related by a homography, with exact dense flow and
//! visibility.
//!
//! A scene is a function of normalized coordinates `(u, v)` (the image
//! occupies `[0, 1]^2`), so a [`PairSpec`] can be rendered at any extent.
//! Pixel `x` covers normalized `u = (x + 0.5) / W`; the pixel-space
//! homography is `S Hn S^-1` with `S` that affine map.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{grid_to_pixel, pixel_to_grid, FlowTarget};
use crate::tensor::Tensor;

/// Row-major 3x3 projective map acting on column vectors `(x, y, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn translation(tx: f64, ty: f64) -> Homography {
        Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        ((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w)
    }

    pub fn compose(&self, rhs: &Homography) -> Homography {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        Homography(out)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Homography> {
        let d = self.det();
        if d.abs() < 1e-12 {
            return Err(Error::Domain(format!("singular homography (det {d})")));
        }
        let m = &self.0;
        let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
            [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
            [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
        ];
        Ok(Homography(adj.map(|row| row.map(|v| v / d))))
    }

    /// Pixel-space map `S Hn S^-1` for an `(H, W)` image.
    pub fn to_pixels(&self, extent: (usize, usize)) -> Homography {
        let (h, w) = (extent.0 as f64, extent.1 as f64);
        let s = Homography([[w, 0.0, -0.5], [0.0, h, -0.5], [0.0, 0.0, 1.0]]);
        let s_inv = Homography([[1.0 / w, 0.0, 0.5 / w], [0.0, 1.0 / h, 0.5 / h], [0.0, 0.0, 1.0]]);
        s.compose(self).compose(&s_inv)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpTier {
    Easy,
    Medium,
    Hard,
}

/// Bounds on the random warp, all in normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpConfig {
    pub max_rotation_deg: f64,
    /// Isotropic scale drawn log-uniformly from `[1/max_scale, max_scale]`.
    pub max_scale: f64,
    pub max_translation: f64,
    pub max_perspective: f64,
}

impl WarpConfig {
    pub fn tier(tier: WarpTier) -> WarpConfig {
        match tier {
            WarpTier::Easy => WarpConfig { max_rotation_deg: 8.0, max_scale: 1.1, max_translation: 0.08, max_perspective: 0.05 },
            WarpTier::Medium => WarpConfig { max_rotation_deg: 20.0, max_scale: 1.25, max_translation: 0.15, max_perspective: 0.15 },
            WarpTier::Hard => WarpConfig { max_rotation_deg: 40.0, max_scale: 1.45, max_translation: 0.22, max_perspective: 0.3 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_pairs: usize,
    pub tier: WarpTier,
    /// Overrides the tier bounds when present.
    pub warp: Option<WarpConfig>,
    pub noise_octaves: usize,
    /// Lattice cells per unit length at the lowest octave.
    pub noise_base_frequency: f64,
    pub n_shapes: usize,
    pub occluder_prob: f64,
    pub max_occluders: usize,
    pub gain_jitter: f64,
    pub bias_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            channels: 1,
            n_pairs: 8,
            tier: WarpTier::Easy,
            warp: None,
            noise_octaves: 4,
            noise_base_frequency: 4.0,
            n_shapes: 10,
            occluder_prob: 0.5,
            max_occluders: 2,
            gain_jitter: 0.1,
            bias_jitter: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_extent((self.height, self.width))?;
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) {
            return Err(Error::Config("occluder_prob must lie in [0, 1]".into()));
        }
        if self.noise_octaves == 0 || self.noise_base_frequency <= 0.0 {
            return Err(Error::Config("noise needs at least one octave and a positive frequency".into()));
        }
        Ok(())
    }

    pub fn warp_bounds(&self) -> WarpConfig {
        self.warp.unwrap_or_else(|| WarpConfig::tier(self.tier))
    }
}

pub fn check_extent(extent: (usize, usize)) -> Result<()> {
    if extent.0 == 0 || extent.1 == 0 || extent.0 % 8 != 0 || extent.1 % 8 != 0 {
        return Err(Error::Config(format!(
            "image extent {}x{} must be a non-zero multiple of 8",
            extent.0, extent.1
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Disc { cx: f64, cy: f64, r: f64, value: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64, value: f64 },
}

impl Shape {
    fn value_at(&self, u: f64, v: f64) -> Option<f64> {
        match *self {
            Shape::Disc { cx, cy, r, value } => ((u - cx).powi(2) + (v - cy).powi(2) <= r * r).then_some(value),
            Shape::Rect { x0, y0, x1, y1, value } => (u >= x0 && u <= x1 && v >= y0 && v <= y1).then_some(value),
        }
    }
}

/// Texture defined on the whole plane in normalized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub noise_seed: u64,
    pub octaves: usize,
    pub base_frequency: f64,
    pub shapes: Vec<Shape>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: usize, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((octave as u64) << 48 ^ splitmix(ix as u64 ^ splitmix(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl Scene {
    /// Intensity in `[0, 1]` at normalized `(u, v)` for channel `c`.
    pub fn sample(&self, u: f64, v: f64, channel: usize) -> f64 {
        for s in self.shapes.iter().rev() {
            if let Some(val) = s.value_at(u, v) {
                return (val + 0.15 * channel as f64).fract();
            }
        }
        let seed = self.noise_seed.wrapping_add(channel as u64);
        let mut acc = 0.0;
        let mut norm = 0.0;
        for o in 0..self.octaves {
            let f = self.base_frequency * (1u64 << o) as f64;
            let amp = 0.5f64.powi(o as i32);
            let (x, y) = (u * f, v * f);
            let (ix, iy) = (x.floor(), y.floor());
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            let (tx, ty) = (smooth(x - ix), smooth(y - iy));
            let (ix, iy) = (ix as i64, iy as i64);
            let l = |dx: i64, dy: i64| lattice(seed, o, ix + dx, iy + dy);
            let top = l(0, 0) * (1.0 - tx) + l(1, 0) * tx;
            let bottom = l(0, 1) * (1.0 - tx) + l(1, 1) * tx;
            acc += amp * (top * (1.0 - ty) + bottom * ty);
            norm += amp;
        }
        acc / norm
    }
}

/// Occluder pasted into B, normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub value: f64,
}

impl Occluder {
    fn covers(&self, u: f64, v: f64) -> bool {
        u >= self.x0 && u <= self.x1 && v >= self.y0 && v <= self.y1
    }
}

/// Resolution-free description of one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub seed: u64,
    pub scene: Scene,
    /// Normalized A -> B map.
    pub warp: Homography,
    pub occluders: Vec<Occluder>,
    pub gain: f64,
    pub bias: f64,
}

fn sym(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound <= 0.0 {
        0.0
    } else {
        rng.gen_range(-bound..=bound)
    }
}

fn sample_warp(rng: &mut ChaCha8Rng, bounds: &WarpConfig) -> Homography {
    loop {
        let theta = sym(rng, bounds.max_rotation_deg).to_radians();
        let log_s = sym(rng, bounds.max_scale.max(1.0).ln());
        let s = log_s.exp();
        let (tx, ty) = (sym(rng, bounds.max_translation), sym(rng, bounds.max_translation));
        let (px, py) = (sym(rng, bounds.max_perspective), sym(rng, bounds.max_perspective));
        let (c, sn) = (theta.cos() * s, theta.sin() * s);
        let to_center = Homography::translation(-0.5, -0.5);
        let linear = Homography([[c, -sn, 0.0], [sn, c, 0.0], [px, py, 1.0]]);
        let back = Homography::translation(0.5 + tx, 0.5 + ty);
        let h = back.compose(&linear).compose(&to_center);
        if h.det().abs() >= 1e-6 {
            return h;
        }
    }
}

impl PairSpec {
    pub fn sample(seed: u64, cfg: &SynthConfig) -> PairSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise_seed = rng.gen();
        let shapes = (0..cfg.n_shapes)
            .map(|_| {
                let value = rng.gen_range(0.0..1.0);
                if rng.gen_bool(0.5) {
                    Shape::Disc { cx: rng.gen(), cy: rng.gen(), r: rng.gen_range(0.03..0.12), value }
                } else {
                    let (x0, y0): (f64, f64) = (rng.gen(), rng.gen());
                    let (w, h) = (rng.gen_range(0.04..0.2), rng.gen_range(0.04..0.2));
                    Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h, value }
                }
            })
            .collect();
        let scene = Scene { noise_seed, octaves: cfg.noise_octaves, base_frequency: cfg.noise_base_frequency, shapes };
        let warp = sample_warp(&mut rng, &cfg.warp_bounds());
        let mut occluders = Vec::new();
        if cfg.max_occluders > 0 && rng.gen_bool(cfg.occluder_prob) {
            for _ in 0..rng.gen_range(1..=cfg.max_occluders) {
                let (w, h) = (rng.gen_range(0.1..0.25), rng.gen_range(0.1..0.25));
                let (x0, y0) = (rng.gen_range(0.0..1.0 - w), rng.gen_range(0.0..1.0 - h));
                occluders.push(Occluder { x0, y0, x1: x0 + w, y1: y0 + h, value: rng.gen() });
            }
        }
        let gain = 1.0 + sym(&mut rng, cfg.gain_jitter);
        let bias = sym(&mut rng, cfg.bias_jitter);
        PairSpec { seed, scene, warp, occluders, gain, bias }
    }

    fn occluded(&self, xb: f64, yb: f64, extent: (usize, usize)) -> bool {
        let (u, v) = ((xb + 0.5) / extent.1 as f64, (yb + 0.5) / extent.0 as f64);
        self.occluders.iter().any(|o| o.covers(u, v))
    }

    /// Renders the pair at `extent`.
    pub fn render(&self, extent: (usize, usize), channels: usize) -> Result<SynthPair> {
        check_extent(extent)?;
        let (h, w) = extent;
        let fwd = self.warp.to_pixels(extent);
        let bwd = fwd.inverse()?;
        let mut image_a = Vec::with_capacity(h * w * channels);
        let mut image_b = Vec::with_capacity(h * w * channels);
        let mut flow_ab = Vec::with_capacity(h * w * 2);
        let mut flow_ba = Vec::with_capacity(h * w * 2);
        let mut vis_a = Vec::with_capacity(h * w);
        let mut vis_b = Vec::with_capacity(h * w);
        let norm = |x: f64, y: f64| ((x + 0.5) / w as f64, (y + 0.5) / h as f64);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let (u, v) = norm(xf, yf);
                for c in 0..channels {
                    image_a.push(self.scene.sample(u, v, c));
                }
                let (xb, yb) = fwd.apply(xf, yf);
                flow_ab.extend_from_slice(&[xb, yb]);
                vis_a.push(f64::from(u8::from(in_frame(xb, yb, extent) && !self.occluded(xb, yb, extent))));

                let (xa, ya) = bwd.apply(xf, yf);
                flow_ba.extend_from_slice(&[xa, ya]);
                let under = self.occluded(xf, yf, extent);
                vis_b.push(f64::from(u8::from(in_frame(xa, ya, extent) && !under)));
                let (ua, va) = norm(xa, ya);
                for c in 0..channels {
                    let val = match self.occluders.iter().rev().find(|o| o.covers(u, v)) {
                        Some(o) => o.value,
                        None => (self.gain * self.scene.sample(ua, va, c) + self.bias).clamp(0.0, 1.0),
                    };
                    image_b.push(val);
                }
            }
        }
        Ok(SynthPair {
            spec: self.clone(),
            image_a: Tensor::from_parts(vec![h, w, channels], image_a),
            image_b: Tensor::from_parts(vec![h, w, channels], image_b),
            flow_ab: Tensor::from_parts(vec![h, w, 2], flow_ab),
            flow_ba: Tensor::from_parts(vec![h, w, 2], flow_ba),
            vis_a: Tensor::from_parts(vec![h, w], vis_a),
            vis_b: Tensor::from_parts(vec![h, w], vis_b),
        })
    }
}

fn in_frame(x: f64, y: f64, extent: (usize, usize)) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (extent.1 - 1) as f64 && y <= (extent.0 - 1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub spec: PairSpec,
    pub image_a: Tensor,
    pub image_b: Tensor,
    /// `[H, W, 2]` B pixel `(x, y)` of every A pixel.
    pub flow_ab: Tensor,
    pub flow_ba: Tensor,
    /// `[H, W]` with 1 for visible, 0 otherwise.
    pub vis_a: Tensor,
    pub vis_b: Tensor,
}

pub fn gen_pair(seed: u64, cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    PairSpec::sample(seed, cfg).render((cfg.height, cfg.width), cfg.channels)
}

impl SynthPair {
    pub fn extent(&self) -> (usize, usize) {
        (self.image_a.shape()[0], self.image_a.shape()[1])
    }

    pub fn pixel_warp(&self) -> Homography {
        self.spec.warp.to_pixels(self.extent())
    }

    /// Analytic flow targets at cell centers of a stride-`stride` grid:
    /// `(A -> B, B -> A)`.
    pub fn cell_targets(&self, stride: usize) -> Result<(FlowTarget, FlowTarget)> {
        let extent = self.extent();
        let fwd = self.pixel_warp();
        let bwd = fwd.inverse()?;
        let (gh, gw) = (extent.0 / stride, extent.1 / stride);
        let build = |map: &Homography, a_to_b: bool| {
            let mut coords = Vec::with_capacity(gh * gw * 2);
            let mut visible = Vec::with_capacity(gh * gw);
            for i in 0..gh {
                for j in 0..gw {
                    let (px, py) = (grid_to_pixel(j as f64, stride), grid_to_pixel(i as f64, stride));
                    let (tx, ty) = map.apply(px, py);
                    coords.extend_from_slice(&[tx, ty]);
                    let occ = if a_to_b { self.spec.occluded(tx, ty, extent) } else { self.spec.occluded(px, py, extent) };
                    visible.push(in_frame(tx, ty, extent) && !occ);
                }
            }
            FlowTarget { coords: Tensor::from_parts(vec![gh * gw, 2], coords), visible }
        };
        Ok((build(&fwd, true), build(&bwd, false)))
    }
}

/// Nearest B cell of every visible A cell center, kept when the B cell's
/// center maps back to the same A cell and is itself visible. Flat row-major
/// indices `(i_a, j_b)`.
pub fn gt_coarse_matches(pair: &SynthPair, stride: usize) -> Result<Vec<(usize, usize)>> {
    let (ta, tb) = pair.cell_targets(stride)?;
    let (h, w) = pair.extent();
    let (gh, gw) = (h / stride, w / stride);
    let nearest = |x: f64, y: f64| -> Option<usize> {
        let (c, r) = (pixel_to_grid(x, stride).round(), pixel_to_grid(y, stride).round());
        (c >= 0.0 && r >= 0.0 && (c as usize) < gw && (r as usize) < gh).then(|| r as usize * gw + c as usize)
    };
    let mut out = Vec::new();
    for i in 0..gh * gw {
        if !ta.visible[i] {
            continue;
        }
        let Some(j) = nearest(ta.coords.data()[2 * i], ta.coords.data()[2 * i + 1]) else { continue };
        if !tb.visible[j] {
            continue;
        }
        if nearest(tb.coords.data()[2 * j], tb.coords.data()[2 * j + 1]) == Some(i) {
            out.push((i, j));
        }
    }
    Ok(out)
}

pub const DATASET_FORMAT: &str = "aspan-dataset";
pub const DATASET_MANIFEST: &str = "manifest.json";
const PAIR_FILES: [&str; 6] = ["image_a", "image_b", "flow_ab", "flow_ba", "vis_a", "vis_b"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub name: String,
    pub spec: PairSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: SynthConfig,
    pub pairs: Vec<PairEntry>,
}

/// Per-pair seeds derived from the dataset seed.
pub fn pair_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

/// Generates `cfg.n_pairs` pairs in parallel; order and content depend only
/// on `(cfg, seed)`.
pub fn gen_dataset(cfg: &SynthConfig, seed: u64) -> Result<(DatasetManifest, Vec<SynthPair>)> {
    cfg.validate()?;
    let pairs = pair_seeds(seed, cfg.n_pairs).into_par_iter().map(|s| gen_pair(s, cfg)).collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        seed,
        config: cfg.clone(),
        pairs: pairs.iter().enumerate().map(|(k, p)| PairEntry { name: format!("pair_{k}"), spec: p.spec.clone() }).collect(),
    };
    Ok((manifest, pairs))
}

pub fn write_dataset(dir: impl AsRef<Path>, manifest: &DatasetManifest, pairs: &[SynthPair]) -> Result<()> {
    let dir = dir.as_ref();
    if manifest.pairs.len() != pairs.len() {
        return Err(Error::Input(format!("manifest lists {} pairs, got {}", manifest.pairs.len(), pairs.len())));
    }
    fs::create_dir_all(dir)?;
    for (entry, pair) in manifest.pairs.iter().zip(pairs) {
        let sub = dir.join(&entry.name);
        fs::create_dir_all(&sub)?;
        let tensors = [&pair.image_a, &pair.image_b, &pair.flow_ab, &pair.flow_ba, &pair.vis_a, &pair.vis_b];
        for (name, t) in PAIR_FILES.iter().zip(tensors) {
            t.save(sub.join(format!("{name}.aspt")))?;
        }
    }
    let mut json = serde_json::to_vec_pretty(manifest)?;
    json.push(b'\n');
    fs::write(dir.join(DATASET_MANIFEST), json)?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<SynthPair>)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(DATASET_MANIFEST))?)?;
    if manifest.format != DATASET_FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!("unsupported dataset {} v{}", manifest.format, manifest.version)));
    }
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for entry in &manifest.pairs {
        let sub = dir.join(&entry.name);
        let mut t = Vec::with_capacity(6);
        for name in PAIR_FILES {
            t.push(Tensor::load(sub.join(format!("{name}.aspt")))?);
        }
        let [image_a, image_b, flow_ab, flow_ba, vis_a, vis_b]: [Tensor; 6] =
            t.try_into().map_err(|_| Error::Format("pair file count".into()))?;
        let (h, w) = (image_a.shape()[0], image_a.shape().get(1).copied().unwrap_or(0));
        let ok = image_a.rank() == 3
            && image_b.shape() == image_a.shape()
            && flow_ab.shape() == [h, w, 2]
            && flow_ba.shape() == [h, w, 2]
            && vis_a.shape() == [h, w]
            && vis_b.shape() == [h, w];
        if !ok {
            return Err(Error::Format(format!("{} has inconsistent tensor shapes", entry.name)));
        }
        pairs.push(SynthPair { spec: entry.spec.clone(), image_a, image_b, flow_ab, flow_ba, vis_a, vis_b });
    }
    Ok((manifest, pairs))
}
