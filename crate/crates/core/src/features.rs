//! Frozen per-patch feature extraction.
//!
//! The built-in extractor describes each patch by its mean color (shifted by
//! a per-stream center) and a low-amplitude sinusoidal position code, then rotates
//! that description into `width` dimensions with a frozen orthonormal map.
//! Two independent maps produce the two streams a model consumes: the
//! input stream fed to grouping and the target stream used by the losses.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Video;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{ParamId, ParamStore, Tensor};

const POSITION_FREQS: [f64; 2] = [1.0, 2.0];
const RAW_WIDTH: usize = 3 + 4 * POSITION_FREQS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Synthetic,
    File,
}

/// Dense features `[T, L, D]` of one video. Never trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub values: Tensor,
    pub grid: (usize, usize),
    pub source: FeatureSource,
}

impl PatchFeatures {
    pub fn new(values: Tensor, grid: (usize, usize), source: FeatureSource) -> Result<Self> {
        if values.ndim() != 3 || values.shape()[1] != grid.0 * grid.1 {
            return Err(Error::shape("PatchFeatures", values.shape(), &[grid.0, grid.1]));
        }
        if let Some(index) = values.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            values,
            grid,
            source,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_patches(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// `[L, D]` features of frame `t`.
    pub fn frame(&self, t: usize) -> Tensor {
        self.values.index_outer(t)
    }

    /// Frames `start..start + len`.
    pub fn frames(&self, start: usize, len: usize) -> Result<PatchFeatures> {
        let per = self.num_patches() * self.width();
        if start + len > self.num_frames() || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "frames {start}..{} of {}",
                start + len,
                self.num_frames()
            )));
        }
        let values = Tensor::new(
            &[len, self.num_patches(), self.width()],
            self.values.data()[start * per..(start + len) * per].to_vec(),
        )?;
        PatchFeatures::new(values, self.grid, self.source)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Output width D.
    pub width: usize,
    /// Seed of the two frozen projections.
    pub seed: u64,
    pub color_gain: f64,
    /// Value subtracted from each color channel before projection.
    pub input_color_center: f64,
    pub target_color_center: f64,
    pub input_position_gain: f64,
    pub target_position_gain: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            width: 16,
            seed: 0,
            color_gain: 1.0,
            input_color_center: 0.0,
            target_color_center: 0.35,
            input_position_gain: 0.1,
            target_position_gain: 0.0,
        }
    }
}

/// Frozen `[RAW_WIDTH, width]` map with orthonormal rows (or columns when
/// `width < RAW_WIDTH`), so it preserves inner products whenever it can.
fn orthonormal_projection(seed: u64, tag: &str, width: usize) -> Vec<f64> {
    let n = RAW_WIDTH.max(width);
    let mut rng = stream(seed, tag, &[]);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    let mut out = Vec::with_capacity(RAW_WIDTH * width);
    for r in rows.iter().take(RAW_WIDTH) {
        out.extend_from_slice(&r[..width]);
    }
    out
}

fn position_code(r: usize, c: usize, rows: usize, cols: usize) -> [f64; 4 * POSITION_FREQS.len()] {
    let mut out = [0.0; 4 * POSITION_FREQS.len()];
    let (y, x) = ((r as f64 + 0.5) / rows as f64, (c as f64 + 0.5) / cols as f64);
    for (i, f) in POSITION_FREQS.iter().enumerate() {
        let (ay, ax) = (std::f64::consts::PI * f * y, std::f64::consts::PI * f * x);
        out[4 * i..4 * i + 4].copy_from_slice(&[ay.sin(), ay.cos(), ax.sin(), ax.cos()]);
    }
    out
}

/// Mean color of every patch, `[T, L, 3]` flattened.
fn patch_colors(video: &Video) -> Result<Vec<f64>> {
    let s = video.frames.shape();
    let (t_len, h, w) = (s[0], s[1], s[2]);
    let p = video.patch_size;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::IndivisibleFrame {
            height: h,
            width: w,
            patch: p,
        });
    }
    let (rows, cols) = (h / p, w / p);
    let px = video.frames.data();
    let mut out = vec![0.0; t_len * rows * cols * 3];
    let norm = 1.0 / (p * p) as f64;
    for t in 0..t_len {
        for y in 0..h {
            for x in 0..w {
                let i = (y / p) * cols + x / p;
                let src = ((t * h + y) * w + x) * 3;
                let dst = (t * rows * cols + i) * 3;
                for ch in 0..3 {
                    out[dst + ch] += px[src + ch] * norm;
                }
            }
        }
    }
    Ok(out)
}

fn project(
    colors: &[f64],
    grid: (usize, usize),
    t_len: usize,
    cfg: &FeatureConfig,
    color_center: f64,
    position_gain: f64,
    map: &[f64],
) -> Result<Tensor> {
    let (rows, cols) = grid;
    let l = rows * cols;
    let d = cfg.width;
    let mut out = vec![0.0; t_len * l * d];
    let mut raw = [0.0; RAW_WIDTH];
    for t in 0..t_len {
        for i in 0..l {
            let c = &colors[(t * l + i) * 3..(t * l + i) * 3 + 3];
            for ch in 0..3 {
                raw[ch] = cfg.color_gain * (c[ch] - color_center);
            }
            for (k, v) in position_code(i / cols, i % cols, rows, cols).iter().enumerate() {
                raw[3 + k] = position_gain * v;
            }
            let o = &mut out[(t * l + i) * d..(t * l + i + 1) * d];
            for (k, rv) in raw.iter().enumerate() {
                for (ov, mv) in o.iter_mut().zip(&map[k * d..(k + 1) * d]) {
                    *ov += rv * mv;
                }
            }
        }
    }
    Tensor::new(&[t_len, l, d], out)
}

/// Input-stream and target-stream features of `video`. A pure function of
/// the video and `cfg`.
pub fn extract_synthetic(video: &Video, cfg: &FeatureConfig) -> Result<(PatchFeatures, PatchFeatures)> {
    if cfg.width == 0 {
        return Err(Error::Config("feature width must be positive".into()));
    }
    let colors = patch_colors(video)?;
    let t_len = video.num_frames();
    let s = video.frames.shape();
    let grid = (s[1] / video.patch_size, s[2] / video.patch_size);
    let in_map = orthonormal_projection(cfg.seed, "features-inputs", cfg.width);
    let tg_map = orthonormal_projection(cfg.seed, "features-targets", cfg.width);
    let inputs = project(&colors, grid, t_len, cfg, cfg.input_color_center, cfg.input_position_gain, &in_map)?;
    let targets = project(&colors, grid, t_len, cfg, cfg.target_color_center, cfg.target_position_gain, &tg_map)?;
    Ok((
        PatchFeatures::new(inputs, grid, FeatureSource::Synthetic)?,
        PatchFeatures::new(targets, grid, FeatureSource::Synthetic)?,
    ))
}

/// Registers the learned `[L, M]` positional embedding under `name`,
/// drawn i.i.d. from `N(0, std²)`.
pub fn positional_embedding<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    num_positions: usize,
    width: usize,
    std: f64,
    rng: &mut R,
) -> Result<ParamId> {
    if num_positions == 0 || width == 0 {
        return Err(Error::Config("positional embedding extents must be positive".into()));
    }
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Config(format!("positional embedding std must be positive, got {std}")));
    }
    store.register(name, Tensor::randn(&[num_positions, width], std, rng))
}
