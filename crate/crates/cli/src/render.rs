//! Mask overlays as binary PPM (P6) and per-slot masks as PGM (P5).

use std::fs;
use std::path::Path;

use log::info;
use serde_json::json;
use videosaur::data::{generate, Video};
use videosaur::features::extract_synthetic;
use videosaur::grouping::slot_noise;
use videosaur::model::infer_masks;
use videosaur::Tensor;

use crate::commands::{load_for_inference, write_json};
use crate::error::CliError;

const SLOT_COLORS: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Frame `t` blended half-and-half with the color of each pixel's label.
fn overlay(video: &Video, t: usize, labels: &[usize], scale: usize) -> Image {
    let s = video.frames.shape();
    let (h, w) = (s[1], s[2]);
    let (cols, p) = (video.grid.1, video.patch_size);
    let px = video.frames.data();
    let mut pixels = Vec::with_capacity(h * w * scale * scale * 3);
    for y in 0..h * scale {
        for x in 0..w * scale {
            let (fy, fx) = (y / scale, x / scale);
            let src = ((t * h + fy) * w + fx) * 3;
            let color = SLOT_COLORS[labels[(fy / p) * cols + fx / p] % SLOT_COLORS.len()];
            for ch in 0..3 {
                let v = 0.5 * px[src + ch] + 0.5 * color[ch] as f64 / 255.0;
                pixels.push(to_byte(v));
            }
        }
    }
    Image {
        width: w * scale,
        height: h * scale,
        channels: 3,
        pixels,
    }
}

/// Soft mask of slot `k` in frame `t` of `[T, L, K]` masks, one block per patch.
fn slot_mask(masks: &Tensor, t: usize, k: usize, grid: (usize, usize), block: usize) -> Image {
    let (rows, cols) = grid;
    let s = masks.shape();
    let (l, kk) = (s[1], s[2]);
    let d = masks.data();
    let mut pixels = Vec::with_capacity(rows * cols * block * block);
    for y in 0..rows * block {
        for x in 0..cols * block {
            let i = (y / block) * cols + x / block;
            pixels.push(to_byte(d[(t * l + i) * kk + k]));
        }
    }
    Image {
        width: cols * block,
        height: rows * block,
        channels: 1,
        pixels,
    }
}

fn argmax_labels(masks: &Tensor, t: usize) -> Vec<usize> {
    let s = masks.shape();
    let (l, k) = (s[1], s[2]);
    let d = &masks.data()[t * l * k..(t + 1) * l * k];
    d.chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn render(
    checkpoint: &Path,
    out: &Path,
    videos: u64,
    seed: u64,
    slots: Option<usize>,
    scale: usize,
) -> Result<(), CliError> {
    if scale == 0 {
        return Err(CliError::Config("--scale must be at least 1".into()));
    }
    let trainer = load_for_inference(checkpoint, &[])?;
    let cfg = &trainer.config;
    let k = slots.unwrap_or(cfg.model.num_slots);
    if k == 0 {
        return Err(CliError::Config("--slots must be at least 1".into()));
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut files = Vec::new();
    for v in 0..videos {
        let video = generate(&cfg.data, seed, v)?;
        let (inputs, _) = extract_synthetic(&video, &cfg.features)?;
        let noise = slot_noise(cfg.seed, v, k, cfg.model.slot_dim);
        let (masks, _) = infer_masks(&trainer.model, &trainer.store, &inputs, &noise)?;
        for t in 0..video.num_frames() {
            let stem = format!("video{v:03}_frame{t:02}");
            let mut save = |name: String, img: Image| -> Result<(), CliError> {
                img.save(&out.join(&name))?;
                files.push(name);
                Ok(())
            };
            save(format!("{stem}_pred.ppm"), overlay(&video, t, &argmax_labels(&masks, t), scale))?;
            let gt: Vec<usize> = video.masks_frame(t).iter().map(|&id| id as usize).collect();
            save(format!("{stem}_gt.ppm"), overlay(&video, t, &gt, scale))?;
            for slot in 0..k {
                let block = video.patch_size * scale;
                save(format!("{stem}_slot{slot}.pgm"), slot_mask(&masks, t, slot, video.grid, block))?;
            }
        }
    }
    write_json(
        &out.join("index.json"),
        &json!({
            "checkpoint": checkpoint.display().to_string(),
            "seed": seed,
            "num_slots": k,
            "files": files,
        }),
    )?;
    info!("wrote {} images to {}", files.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_payload() {
        let img = Image {
            width: 2,
            height: 1,
            channels: 1,
            pixels: vec![0, 255],
        };
        assert_eq!(img.encode(), b"P5\n2 1\n255\n\x00\xff".to_vec());
    }

    #[test]
    fn slot_mask_upscales_patches() {
        let masks = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.25, 0.75]).unwrap();
        let img = slot_mask(&masks, 0, 1, (1, 2), 2);
        assert_eq!((img.width, img.height), (4, 2));
        assert_eq!(img.pixels, vec![0, 0, 191, 191, 0, 0, 191, 191]);
        assert_eq!(argmax_labels(&masks, 0), vec![0, 1]);
    }
}
