//! Synthetic moving-sprite videos with patch-level ground truth.
//!
//! Sprites are patch-aligned and move by whole patches per frame, so the
//! ground-truth correspondence between the patches of consecutive frames is
//! exact. Each sprite carries a per-patch color texture; patch contents are
//! therefore distinguishable inside a sprite and travel with it.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteShape {
    Rect,
    Ellipse,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Bounce,
    Wrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Patch edge in pixels.
    pub patch_size: usize,
    /// Frames per generated clip; training segments are cut from clips.
    pub clip_len: usize,
    pub num_sprites: usize,
    /// Sprite edge range in patches, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Per-axis speed bound in patches per frame.
    pub max_speed: i32,
    pub allow_static: bool,
    pub shape: SpriteShape,
    pub motion: Motion,
    /// Base colors; each sprite of a video gets a distinct entry.
    pub palette: Vec<[f64; 3]>,
    pub texture_amplitude: f64,
    pub background_noise: f64,
    /// Whether sprites may overlap at their initial placement.
    pub allow_overlap: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            grid_rows: 8,
            grid_cols: 8,
            patch_size: 4,
            clip_len: 8,
            num_sprites: 3,
            min_size: 2,
            max_size: 3,
            max_speed: 1,
            allow_static: false,
            shape: SpriteShape::Rect,
            motion: Motion::Bounce,
            palette: default_palette(),
            texture_amplitude: 0.12,
            background_noise: 0.04,
            allow_overlap: false,
        }
    }
}

pub fn default_palette() -> Vec<[f64; 3]> {
    vec![
        [0.8, 0.2, 0.2],
        [0.2, 0.8, 0.2],
        [0.2, 0.2, 0.8],
        [0.8, 0.8, 0.2],
        [0.8, 0.2, 0.8],
        [0.2, 0.8, 0.8],
        [0.85, 0.5, 0.15],
        [0.5, 0.2, 0.85],
    ]
}

impl DataSpec {
    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn height(&self) -> usize {
        self.grid_rows * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.grid_cols * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_rows == 0 || self.grid_cols == 0 || self.patch_size == 0 {
            return bad("grid and patch extents must be positive".into());
        }
        if self.clip_len == 0 {
            return bad("clip_len must be positive".into());
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad(format!(
                "invalid sprite size range {}..={}",
                self.min_size, self.max_size
            ));
        }
        if self.max_size > self.grid_rows.min(self.grid_cols) {
            return bad(format!(
                "sprites of size {} do not fit a {}x{} grid",
                self.max_size, self.grid_rows, self.grid_cols
            ));
        }
        if self.num_sprites > self.palette.len() {
            return bad(format!(
                "{} sprites need at least as many palette colors (have {})",
                self.num_sprites,
                self.palette.len()
            ));
        }
        if self.num_sprites >= u16::MAX as usize {
            return bad("too many sprites".into());
        }
        if self.max_speed < 0 || (!self.allow_static && self.max_speed == 0) {
            return bad("max_speed must be positive unless allow_static".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteMeta {
    /// Instance id in the ground-truth masks (background is 0).
    pub id: u16,
    pub shape: SpriteShape,
    pub color: [f64; 3],
    /// Edge lengths in patches, (rows, cols).
    pub size: (usize, usize),
    pub initial_velocity: (i32, i32),
    /// Top-left patch per frame.
    pub positions: Vec<(i32, i32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub seed: u64,
    pub index: u64,
    pub sprites: Vec<SpriteMeta>,
}

/// One clip. Patch `i` of a frame sits at `(i / cols, i % cols)`.
#[derive(Debug, Clone)]
pub struct Video {
    /// `[T, H, W, 3]` in `[0, 1]`.
    pub frames: Tensor,
    /// `[T, L]`, 0 = background.
    pub gt_masks: Vec<u16>,
    /// `[T - 1, L]`: patch of frame `t + 1` that the content of patch
    /// `(t, i)` moved to, or -1 for background, occluded or exited content.
    pub gt_correspondence: Vec<i32>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub meta: VideoMeta,
}

impl Video {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn masks_frame(&self, t: usize) -> &[u16] {
        let l = self.num_patches();
        &self.gt_masks[t * l..(t + 1) * l]
    }

    pub fn correspondence_frame(&self, t: usize) -> &[i32] {
        let l = self.num_patches();
        &self.gt_correspondence[t * l..(t + 1) * l]
    }

    /// Frames `start..start + len`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Video> {
        let t = self.num_frames();
        if len == 0 || start + len > t {
            return Err(Error::InvalidArgument(format!(
                "segment {start}..{} of a {t}-frame clip",
                start + len
            )));
        }
        let l = self.num_patches();
        let per_frame: usize = self.frames.shape()[1..].iter().product();
        let mut shape = self.frames.shape().to_vec();
        shape[0] = len;
        let frames = Tensor::new(
            &shape,
            self.frames.data()[start * per_frame..(start + len) * per_frame].to_vec(),
        )?;
        let mut meta = self.meta.clone();
        for s in &mut meta.sprites {
            s.positions = s.positions[start..start + len].to_vec();
        }
        Ok(Video {
            frames,
            gt_masks: self.gt_masks[start * l..(start + len) * l].to_vec(),
            gt_correspondence: self.gt_correspondence[start * l..(start + len - 1) * l].to_vec(),
            grid: self.grid,
            patch_size: self.patch_size,
            meta,
        })
    }
}

/// Several videos of identical shape.
#[derive(Debug, Clone, Default)]
pub struct VideoBatch {
    pub videos: Vec<Video>,
}

impl VideoBatch {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// `[B, T, H, W, 3]`
    pub fn frames(&self) -> Result<Tensor> {
        let parts: Vec<Tensor> = self.videos.iter().map(|v| v.frames.clone()).collect();
        Tensor::stack(&parts)
    }
}

struct SpritePlan {
    meta: SpriteMeta,
    /// Per-patch color offset, row-major over the sprite's patches.
    texture: Vec<[f64; 3]>,
}

fn centered_direction(c: [f64; 3]) -> [f64; 3] {
    let v = [c[0] - 0.5, c[1] - 0.5, c[2] - 0.5];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Texture offsets whose resulting patch colors point in well-separated
/// directions around the sprite's base color.
fn sample_texture<R: Rng>(rng: &mut R, base: [f64; 3], n: usize, amplitude: f64) -> Vec<[f64; 3]> {
    let mut out: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut dirs: Vec<[f64; 3]> = Vec::with_capacity(n);
    let min_sep = 0.35 * amplitude;
    for _ in 0..n {
        let mut best = None;
        let mut best_sep = -1.0;
        for _ in 0..200 {
            let o = [
                rng.gen_range(-amplitude..=amplitude),
                rng.gen_range(-amplitude..=amplitude),
                rng.gen_range(-amplitude..=amplitude),
            ];
            let c = [
                (base[0] + o[0]).clamp(0.0, 1.0),
                (base[1] + o[1]).clamp(0.0, 1.0),
                (base[2] + o[2]).clamp(0.0, 1.0),
            ];
            let d = centered_direction(c);
            let sep = dirs.iter().map(|e| dist(*e, d)).fold(f64::INFINITY, f64::min);
            if sep > best_sep {
                best_sep = sep;
                best = Some((o, d));
            }
            if sep >= min_sep {
                break;
            }
        }
        let (o, d) = best.expect("at least one draw");
        out.push(o);
        dirs.push(d);
    }
    out
}

fn overlaps(a: (i32, i32, usize, usize), b: (i32, i32, usize, usize)) -> bool {
    let (ar, ac, ah, aw) = a;
    let (br, bc, bh, bw) = b;
    ar < br + bh as i32 && br < ar + ah as i32 && ac < bc + bw as i32 && bc < ac + aw as i32
}

fn plan_sprites<R: Rng>(spec: &DataSpec, rng: &mut R) -> Result<Vec<SpritePlan>> {
    let mut colors = spec.palette.clone();
    colors.shuffle(rng);
    let (rows, cols) = (spec.grid_rows as i32, spec.grid_cols as i32);
    let mut placed: Vec<(i32, i32, usize, usize)> = Vec::new();
    let mut plans = Vec::with_capacity(spec.num_sprites);
    for s in 0..spec.num_sprites {
        let shape = match spec.shape {
            SpriteShape::Mixed => {
                if rng.gen_bool(0.5) {
                    SpriteShape::Rect
                } else {
                    SpriteShape::Ellipse
                }
            }
            other => other,
        };
        let mut found = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let h = rng.gen_range(spec.min_size..=spec.max_size);
            let w = rng.gen_range(spec.min_size..=spec.max_size);
            let r = rng.gen_range(0..=rows - h as i32);
            let c = rng.gen_range(0..=cols - w as i32);
            let rect = (r, c, h, w);
            if spec.allow_overlap || placed.iter().all(|p| !overlaps(*p, rect)) {
                found = Some(rect);
                break;
            }
        }
        let (r, c, h, w) = found.ok_or(Error::Placement {
            attempts: PLACEMENT_ATTEMPTS,
        })?;
        placed.push((r, c, h, w));
        let velocity = loop {
            let v = (
                rng.gen_range(-spec.max_speed..=spec.max_speed),
                rng.gen_range(-spec.max_speed..=spec.max_speed),
            );
            if spec.allow_static || v != (0, 0) {
                break v;
            }
        };
        let color = colors[s];
        let texture = sample_texture(rng, color, h * w, spec.texture_amplitude);
        plans.push(SpritePlan {
            meta: SpriteMeta {
                id: (s + 1) as u16,
                shape,
                color,
                size: (h, w),
                initial_velocity: velocity,
                positions: vec![(r, c)],
            },
            texture,
        });
    }
    Ok(plans)
}

fn advance(pos: i32, vel: &mut i32, extent: usize, limit: usize, motion: Motion) -> i32 {
    match motion {
        Motion::Wrap => (pos + *vel).rem_euclid(limit as i32),
        Motion::Bounce => {
            let max = (limit - extent) as i32;
            let mut next = pos + *vel;
            if next < 0 || next > max {
                *vel = -*vel;
                next = pos + *vel;
            }
            next.clamp(0, max)
        }
    }
}

fn inside_shape(shape: SpriteShape, y: f64, x: f64, h: f64, w: f64) -> bool {
    match shape {
        SpriteShape::Ellipse => {
            let (cy, cx) = (h / 2.0, w / 2.0);
            let (dy, dx) = ((y - cy) / cy, (x - cx) / cx);
            dy * dy + dx * dx <= 1.0
        }
        _ => true,
    }
}

/// Generates video `index` of the dataset keyed by `seed`.
pub fn generate(spec: &DataSpec, seed: u64, index: u64) -> Result<Video> {
    spec.validate()?;
    let mut rng = stream(seed, "video", &[index]);
    let mut plans = plan_sprites(spec, &mut rng)?;
    let (rows, cols, p) = (spec.grid_rows, spec.grid_cols, spec.patch_size);
    let (hgt, wid) = (spec.height(), spec.width());
    let t_len = spec.clip_len;
    let l = rows * cols;

    for plan in &mut plans {
        let (mut vr, mut vc) = plan.meta.initial_velocity;
        let (h, w) = plan.meta.size;
        for _ in 1..t_len {
            let (r, c) = *plan.meta.positions.last().expect("initial position");
            let nr = advance(r, &mut vr, h, rows, spec.motion);
            let nc = advance(c, &mut vc, w, cols, spec.motion);
            plan.meta.positions.push((nr, nc));
        }
    }

    let background: Vec<f64> = (0..hgt * wid * 3)
        .map(|_| 0.5 + rng.gen_range(-spec.background_noise..=spec.background_noise))
        .collect();

    let mut frames = Vec::with_capacity(t_len * hgt * wid * 3);
    let mut gt_masks = Vec::with_capacity(t_len * l);
    let mut owner_pix = vec![0u16; hgt * wid];
    for t in 0..t_len {
        let mut img = background.clone();
        owner_pix.fill(0);
        for plan in &plans {
            let (r, c) = plan.meta.positions[t];
            let (h, w) = plan.meta.size;
            let (ph, pw) = ((h * p) as f64, (w * p) as f64);
            for ly in 0..h * p {
                for lx in 0..w * p {
                    if !inside_shape(plan.meta.shape, ly as f64 + 0.5, lx as f64 + 0.5, ph, pw) {
                        continue;
                    }
                    let y = (r * p as i32 + ly as i32).rem_euclid(hgt as i32) as usize;
                    let x = (c * p as i32 + lx as i32).rem_euclid(wid as i32) as usize;
                    let off = plan.texture[(ly / p) * w + lx / p];
                    for ch in 0..3 {
                        img[(y * wid + x) * 3 + ch] = (plan.meta.color[ch] + off[ch]).clamp(0.0, 1.0);
                    }
                    owner_pix[y * wid + x] = plan.meta.id;
                }
            }
        }
        frames.extend_from_slice(&img);
        // Patch label = owner of the most pixels (ties to the nearer sprite).
        for pr in 0..rows {
            for pc in 0..cols {
                let mut counts = vec![0usize; plans.len() + 1];
                for y in pr * p..(pr + 1) * p {
                    for x in pc * p..(pc + 1) * p {
                        counts[owner_pix[y * wid + x] as usize] += 1;
                    }
                }
                let mut best = 0usize;
                for (id, &n) in counts.iter().enumerate() {
                    if n >= counts[best] && n > 0 {
                        best = id;
                    }
                }
                gt_masks.push(best as u16);
            }
        }
    }

    let mut gt_correspondence = Vec::with_capacity(t_len.saturating_sub(1) * l);
    for t in 0..t_len.saturating_sub(1) {
        let now = &gt_masks[t * l..(t + 1) * l];
        let next = &gt_masks[(t + 1) * l..(t + 2) * l];
        for i in 0..l {
            let id = now[i];
            if id == 0 {
                gt_correspondence.push(-1);
                continue;
            }
            let plan = &plans[id as usize - 1];
            let (r0, c0) = plan.meta.positions[t];
            let (r1, c1) = plan.meta.positions[t + 1];
            let (pr, pc) = ((i / cols) as i32, (i % cols) as i32);
            let (dr, dc) = match spec.motion {
                Motion::Wrap => (
                    (pr + r1 - r0).rem_euclid(rows as i32),
                    (pc + c1 - c0).rem_euclid(cols as i32),
                ),
                Motion::Bounce => (pr + r1 - r0, pc + c1 - c0),
            };
            let inside = dr >= 0 && dc >= 0 && dr < rows as i32 && dc < cols as i32;
            let j = (dr * cols as i32 + dc) as usize;
            if inside && next[j] == id {
                gt_correspondence.push(j as i32);
            } else {
                gt_correspondence.push(-1);
            }
        }
    }

    Ok(Video {
        frames: Tensor::new(&[t_len, hgt, wid, 3], frames)?,
        gt_masks,
        gt_correspondence,
        grid: (rows, cols),
        patch_size: p,
        meta: VideoMeta {
            seed,
            index,
            sprites: plans.into_iter().map(|p| p.meta).collect(),
        },
    })
}

pub fn generate_batch(spec: &DataSpec, seed: u64, indices: &[u64]) -> Result<VideoBatch> {
    let videos = indices
        .iter()
        .map(|&i| generate(spec, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoBatch { videos })
}

/// Iterator over `n_videos` training segments of `segment_len` frames; the
/// segment start inside each clip is keyed by `(seed, index)`.
pub fn dataset_stream(
    spec: &DataSpec,
    n_videos: u64,
    seed: u64,
    segment_len: usize,
) -> impl Iterator<Item = Result<Video>> + '_ {
    (0..n_videos).map(move |i| sample_segment(spec, seed, i, segment_len))
}

pub fn sample_segment(spec: &DataSpec, seed: u64, index: u64, segment_len: usize) -> Result<Video> {
    if segment_len == 0 || segment_len > spec.clip_len {
        return Err(Error::Config(format!(
            "segment length {segment_len} does not fit clips of {} frames",
            spec.clip_len
        )));
    }
    let clip = generate(spec, seed, index)?;
    let start = stream(seed, "segment", &[index]).gen_range(0..=spec.clip_len - segment_len);
    clip.segment(start, segment_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_sprite(velocity_bound: i32, allow_static: bool) -> DataSpec {
        DataSpec {
            num_sprites: 1,
            max_speed: velocity_bound,
            allow_static,
            clip_len: 5,
            ..DataSpec::default()
        }
    }

    #[test]
    fn static_sprite_correspondence_is_identity() {
        let spec = one_sprite(0, true);
        let v = generate(&spec, 3, 0).unwrap();
        for t in 0..4 {
            for (i, &j) in v.correspondence_frame(t).iter().enumerate() {
                if v.masks_frame(t)[i] != 0 {
                    assert_eq!(j, i as i32);
                } else {
                    assert_eq!(j, -1);
                }
            }
        }
    }

    #[test]
    fn unit_column_velocity_shifts_by_one_column() {
        let spec = DataSpec {
            motion: Motion::Wrap,
            ..one_sprite(1, false)
        };
        // find a video whose sprite moves by (0, 1)
        let v = (0..200)
            .map(|i| generate(&spec, 11, i).unwrap())
            .find(|v| v.meta.sprites[0].initial_velocity == (0, 1))
            .expect("some video moves right");
        let cols = v.grid.1;
        for t in 0..4 {
            for (i, &j) in v.correspondence_frame(t).iter().enumerate() {
                if j >= 0 {
                    let (r, c) = (i / cols, i % cols);
                    assert_eq!(j as usize, r * cols + (c + 1) % cols);
                }
            }
        }
    }

    #[test]
    fn overlapping_sprites_nearer_wins_and_occluded_marked() {
        let spec = DataSpec {
            num_sprites: 2,
            allow_overlap: true,
            min_size: 3,
            max_size: 4,
            grid_rows: 5,
            grid_cols: 5,
            clip_len: 4,
            ..DataSpec::default()
        };
        let mut saw_occlusion = false;
        for i in 0..50 {
            let v = generate(&spec, 5, i).unwrap();
            let l = v.num_patches();
            for t in 0..v.num_frames() {
                for (pi, &id) in v.masks_frame(t).iter().enumerate() {
                    // sprite 2 is drawn last: wherever it covers a patch it owns it
                    let s2 = &v.meta.sprites[1];
                    let (r, c) = s2.positions[t];
                    let (pr, pc) = ((pi / 5) as i32, (pi % 5) as i32);
                    if pr >= r && pr < r + s2.size.0 as i32 && pc >= c && pc < c + s2.size.1 as i32 {
                        assert_eq!(id, 2);
                    }
                }
            }
            for t in 0..v.num_frames() - 1 {
                for pi in 0..l {
                    if v.masks_frame(t)[pi] == 1 && v.correspondence_frame(t)[pi] == -1 {
                        saw_occlusion = true;
                    }
                    let j = v.correspondence_frame(t)[pi];
                    if j >= 0 {
                        assert_eq!(v.masks_frame(t + 1)[j as usize], v.masks_frame(t)[pi]);
                    }
                }
            }
        }
        assert!(saw_occlusion);
    }

    #[test]
    fn correspondence_is_an_injection() {
        let spec = DataSpec::default();
        for i in 0..20 {
            let v = generate(&spec, 9, i).unwrap();
            for t in 0..v.num_frames() - 1 {
                let mut seen = std::collections::HashSet::new();
                for &j in v.correspondence_frame(t) {
                    if j >= 0 {
                        assert!(seen.insert(j));
                    }
                }
            }
            assert!(v.frames.is_finite());
            assert!(v.frames.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn impossible_placement_errors() {
        let spec = DataSpec {
            num_sprites: 5,
            min_size: 4,
            max_size: 4,
            grid_rows: 4,
            grid_cols: 4,
            ..DataSpec::default()
        };
        assert!(matches!(generate(&spec, 0, 0), Err(Error::Placement { .. })));
    }

    #[test]
    fn stream_is_deterministic_and_may_be_empty() {
        let spec = DataSpec::default();
        let a: Vec<Video> = dataset_stream(&spec, 3, 7, 4).map(|v| v.unwrap()).collect();
        let b: Vec<Video> = dataset_stream(&spec, 3, 7, 4).map(|v| v.unwrap()).collect();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frames, y.frames);
            assert_eq!(x.gt_masks, y.gt_masks);
            assert_eq!(x.num_frames(), 4);
        }
        assert_eq!(dataset_stream(&spec, 0, 7, 4).count(), 0);
    }

    #[test]
    fn ellipses_render() {
        let spec = DataSpec {
            shape: SpriteShape::Ellipse,
            min_size: 3,
            ..DataSpec::default()
        };
        let v = generate(&spec, 1, 0).unwrap();
        assert!(v.gt_masks.iter().any(|&m| m != 0));
    }
}
