//! Unsupervised segmentation metrics over patch-level mask volumes.
//!
//! Ground-truth id 0 is background. FG-ARI ignores background positions;
//! mBO excludes background as an instance but keeps background patches in
//! every IoU denominator.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::argmax_rows;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Predicted,
    GroundTruth,
}

/// Hard labels for `T` frames of `L` patches, frame-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    pub labels: Vec<u32>,
    pub num_frames: usize,
    pub num_patches: usize,
    pub kind: MaskKind,
}

impl MaskVolume {
    pub fn new(labels: Vec<u32>, num_frames: usize, num_patches: usize, kind: MaskKind) -> Result<Self> {
        if labels.len() != num_frames * num_patches {
            return Err(Error::shape("mask_volume", &[labels.len()], &[num_frames, num_patches]));
        }
        Ok(Self {
            labels,
            num_frames,
            num_patches,
            kind,
        })
    }

    pub fn ground_truth(ids: &[u16], num_frames: usize, num_patches: usize) -> Result<Self> {
        Self::new(
            ids.iter().map(|&i| i as u32).collect(),
            num_frames,
            num_patches,
            MaskKind::GroundTruth,
        )
    }

    /// Hardens `[T, L, K]` soft masks by per-patch argmax.
    pub fn from_soft(soft: &Tensor) -> Result<Self> {
        if soft.ndim() != 3 {
            return Err(Error::InvalidArgument(format!(
                "soft masks must be [T, L, K], got {:?}",
                soft.shape()
            )));
        }
        let (t, l) = (soft.shape()[0], soft.shape()[1]);
        let labels = argmax_rows(soft).into_iter().map(|k| k as u32).collect();
        Self::new(labels, t, l, MaskKind::Predicted)
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        &self.labels[t * self.num_patches..(t + 1) * self.num_patches]
    }

    fn check_pair(&self, other: &MaskVolume) -> Result<()> {
        if (self.num_frames, self.num_patches) != (other.num_frames, other.num_patches) {
            return Err(Error::shape(
                "metrics",
                &[self.num_frames, self.num_patches],
                &[other.num_frames, other.num_patches],
            ));
        }
        Ok(())
    }
}

fn pairs(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

fn dense<T: Copy + Eq + Hash>(xs: &[T]) -> (Vec<usize>, usize) {
    let mut ids = HashMap::new();
    let out = xs
        .iter()
        .map(|x| {
            let next = ids.len();
            *ids.entry(*x).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

/// Adjusted Rand index from the contingency table. Both partitions being
/// single clusters (zero denominator) scores 1.0.
pub fn ari<A, B>(labels_a: &[A], labels_b: &[B]) -> Result<f64>
where
    A: Copy + Eq + Hash,
    B: Copy + Eq + Hash,
{
    if labels_a.len() != labels_b.len() {
        return Err(Error::shape("ari", &[labels_a.len()], &[labels_b.len()]));
    }
    if labels_a.is_empty() {
        return Err(Error::InvalidArgument("ari of empty labelings".into()));
    }
    let (a, na) = dense(labels_a);
    let (b, nb) = dense(labels_b);
    let mut table = vec![0u64; na * nb];
    for (&i, &j) in a.iter().zip(&b) {
        table[i * nb + j] += 1;
    }
    let mut rows = vec![0u64; na];
    let mut cols = vec![0u64; nb];
    let mut index = 0.0;
    for i in 0..na {
        for j in 0..nb {
            let c = table[i * nb + j];
            rows[i] += c;
            cols[j] += c;
            index += pairs(c as f64);
        }
    }
    let sum_a: f64 = rows.iter().map(|&c| pairs(c as f64)).sum();
    let sum_b: f64 = cols.iter().map(|&c| pairs(c as f64)).sum();
    let total = pairs(labels_a.len() as f64);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max = 0.5 * (sum_a + sum_b);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// A metric value plus whether it was defined by convention because the
/// ground truth had no foreground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub empty_foreground: bool,
}

impl Score {
    fn empty() -> Self {
        Self {
            value: 1.0,
            empty_foreground: true,
        }
    }
}

fn fg_ari_slices(pred: &[u32], gt: &[u32]) -> Result<Score> {
    let (p, g): (Vec<u32>, Vec<u32>) = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g != 0)
        .map(|(&p, &g)| (p, g))
        .unzip();
    if g.is_empty() {
        return Ok(Score::empty());
    }
    Ok(Score {
        value: ari(&p, &g)?,
        empty_foreground: false,
    })
}

fn mbo_slices(pred: &[u32], gt: &[u32]) -> Score {
    let mut gt_sizes: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_sizes: BTreeMap<u32, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        *pred_sizes.entry(p).or_default() += 1;
        if g != 0 {
            *gt_sizes.entry(g).or_default() += 1;
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    if gt_sizes.is_empty() {
        return Score::empty();
    }
    let mut best: BTreeMap<u32, f64> = BTreeMap::new();
    for (&(g, p), &i) in &inter {
        let union = gt_sizes[&g] + pred_sizes[&p] - i;
        let iou = i as f64 / union as f64;
        let b = best.entry(g).or_insert(0.0);
        if iou > *b {
            *b = iou;
        }
    }
    let total: f64 = gt_sizes.keys().map(|g| best.get(g).copied().unwrap_or(0.0)).sum();
    Score {
        value: total / gt_sizes.len() as f64,
        empty_foreground: false,
    }
}

/// ARI over all foreground positions of the whole video at once, so an
/// object that changes slot between frames is penalized.
pub fn fg_ari_video(pred: &MaskVolume, gt: &MaskVolume) -> Result<Score> {
    pred.check_pair(gt)?;
    fg_ari_slices(&pred.labels, &gt.labels)
}

/// Mean over GT instances of the best IoU with any predicted mask, both
/// taken over the whole video volume. Matching is not exclusive.
pub fn mbo_video(pred: &MaskVolume, gt: &MaskVolume) -> Result<Score> {
    pred.check_pair(gt)?;
    Ok(mbo_slices(&pred.labels, &gt.labels))
}

fn per_frame<F>(pred: &MaskVolume, gt: &MaskVolume, f: F) -> Result<Score>
where
    F: Fn(&[u32], &[u32]) -> Result<Score>,
{
    pred.check_pair(gt)?;
    let mut values = Vec::new();
    for t in 0..pred.num_frames {
        let s = f(pred.frame(t), gt.frame(t))?;
        if !s.empty_foreground {
            values.push(s.value);
        }
    }
    if values.is_empty() {
        return Ok(Score::empty());
    }
    Ok(Score {
        value: values.iter().sum::<f64>() / values.len() as f64,
        empty_foreground: false,
    })
}

/// Mean FG-ARI over frames that have foreground.
pub fn fg_ari_image(pred: &MaskVolume, gt: &MaskVolume) -> Result<Score> {
    per_frame(pred, gt, fg_ari_slices)
}

/// Mean per-frame mBO over frames that have foreground.
pub fn mbo_image(pred: &MaskVolume, gt: &MaskVolume) -> Result<Score> {
    per_frame(pred, gt, |p, g| Ok(mbo_slices(p, g)))
}

/// Regular tiling of the patch grid into `k_blocks` rectangles, identical in
/// every frame. The factorization closest to the grid's aspect ratio wins.
pub fn block_pattern_masks(grid: (usize, usize), num_frames: usize, k_blocks: usize) -> Result<MaskVolume> {
    let (rows, cols) = grid;
    if k_blocks == 0 || k_blocks > rows * cols {
        return Err(Error::InvalidArgument(format!(
            "{k_blocks} blocks cannot tile a {rows}x{cols} grid"
        )));
    }
    let aspect = (rows as f64 / cols as f64).ln();
    let (br, bc) = (1..=k_blocks)
        .filter(|r| k_blocks % r == 0 && *r <= rows && k_blocks / r <= cols)
        .map(|r| (r, k_blocks / r))
        .min_by(|a, b| {
            let da = ((a.0 as f64 / a.1 as f64).ln() - aspect).abs();
            let db = ((b.0 as f64 / b.1 as f64).ln() - aspect).abs();
            da.total_cmp(&db)
        })
        .ok_or_else(|| {
            Error::InvalidArgument(format!("{k_blocks} blocks cannot tile a {rows}x{cols} grid"))
        })?;
    let frame: Vec<u32> = (0..rows * cols)
        .map(|p| {
            let (i, j) = (p / cols, p % cols);
            ((i * br / rows) * bc + j * bc / cols) as u32
        })
        .collect();
    MaskVolume::new(frame.repeat(num_frames), num_frames, rows * cols, MaskKind::Predicted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub index: u64,
    pub fg_ari_video: f64,
    pub mbo_video: f64,
    pub fg_ari_image: f64,
    pub mbo_image: f64,
    pub empty_foreground: bool,
}

impl VideoMetrics {
    pub fn compute(index: u64, pred: &MaskVolume, gt: &MaskVolume) -> Result<Self> {
        let fv = fg_ari_video(pred, gt)?;
        let mv = mbo_video(pred, gt)?;
        let fi = fg_ari_image(pred, gt)?;
        let mi = mbo_image(pred, gt)?;
        Ok(Self {
            index,
            fg_ari_video: fv.value,
            mbo_video: mv.value,
            fg_ari_image: fi.value,
            mbo_image: mi.value,
            empty_foreground: fv.empty_foreground,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fg_ari_video: f64,
    pub mbo_video: f64,
    pub fg_ari_image_mean: f64,
    pub mbo_image_mean: f64,
    pub num_videos: usize,
    pub empty_foreground_videos: usize,
    pub per_video: Vec<VideoMetrics>,
}

impl MetricsReport {
    pub fn from_videos(per_video: Vec<VideoMetrics>) -> Self {
        let n = per_video.len().max(1) as f64;
        let mean = |f: fn(&VideoMetrics) -> f64| per_video.iter().map(f).sum::<f64>() / n;
        Self {
            fg_ari_video: mean(|v| v.fg_ari_video),
            mbo_video: mean(|v| v.mbo_video),
            fg_ari_image_mean: mean(|v| v.fg_ari_image),
            mbo_image_mean: mean(|v| v.mbo_image),
            num_videos: per_video.len(),
            empty_foreground_videos: per_video.iter().filter(|v| v.empty_foreground).count(),
            per_video,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct O(n²) pair counting.
    pub(crate) fn pair_count_ari(a: &[u32], b: &[u32]) -> f64 {
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut total) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                total += 1.0;
                if sa && sb {
                    both += 1.0;
                }
                if sa {
                    only_a += 1.0;
                }
                if sb {
                    only_b += 1.0;
                }
            }
        }
        if total == 0.0 {
            return 1.0;
        }
        let expected = only_a * only_b / total;
        let max = 0.5 * (only_a + only_b);
        if max == expected {
            return 1.0;
        }
        (both - expected) / (max - expected)
    }

    fn vol(labels: &[u32], t: usize, kind: MaskKind) -> MaskVolume {
        MaskVolume::new(labels.to_vec(), t, labels.len() / t, kind).unwrap()
    }

    #[test]
    fn ari_basics() {
        let a = [0u32, 0, 1, 1, 2, 2];
        assert_eq!(ari(&a, &a).unwrap(), 1.0);
        assert_eq!(ari(&a, &[5u32, 5, 7, 7, 9, 9]).unwrap(), 1.0);
        assert_eq!(ari(&a, &[3u32; 6]).unwrap(), 0.0);
        assert_eq!(ari(&[1u32; 4], &[2u32; 4]).unwrap(), 1.0);
        assert!(ari(&a, &[0u32; 5]).is_err());
    }

    #[test]
    fn hand_contingency_two_objects() {
        let gt = [1u32, 1, 1, 2, 2, 2, 0, 0];
        let pred = [0u32, 0, 1, 1, 1, 1, 3, 3];
        let s = fg_ari_video(&vol(&pred, 1, MaskKind::Predicted), &vol(&gt, 1, MaskKind::GroundTruth)).unwrap();
        let want = pair_count_ari(&pred[..6], &gt[..6]);
        assert!((s.value - want).abs() < 1e-12);
        // table [[2,1],[0,3]]: index 1+3=4, rows 3,3 -> 6, cols 2,4 -> 7, total 15
        let hand = (4.0 - 6.0 * 7.0 / 15.0) / (0.5 * 13.0 - 6.0 * 7.0 / 15.0);
        assert!((s.value - hand).abs() < 1e-12);
    }

    #[test]
    fn identity_swap_hurts_video_score_only() {
        let gt = [1u32, 1, 2, 2, 1, 1, 2, 2];
        let pred = [0u32, 0, 1, 1, 1, 1, 0, 0];
        let (p, g) = (vol(&pred, 2, MaskKind::Predicted), vol(&gt, 2, MaskKind::GroundTruth));
        let video = fg_ari_video(&p, &g).unwrap().value;
        let image = fg_ari_image(&p, &g).unwrap().value;
        assert_eq!(image, 1.0);
        assert!(video < image);
    }

    #[test]
    fn mbo_hand_case() {
        let mut gt = vec![0u32; 8];
        let mut pred = vec![0u32; 8];
        for (t, l) in [(0, 0), (0, 1), (1, 0)] {
            gt[t * 4 + l] = 1;
        }
        for (t, l) in [(0, 0), (1, 0), (1, 3)] {
            pred[t * 4 + l] = 1;
        }
        let s = mbo_video(&vol(&pred, 2, MaskKind::Predicted), &vol(&gt, 2, MaskKind::GroundTruth)).unwrap();
        assert_eq!(s.value, 0.5);
    }

    #[test]
    fn perfect_and_disjoint_masks() {
        let gt = [0u32, 1, 1, 2, 0, 3];
        let pred = [4u32, 0, 0, 1, 4, 2];
        let (p, g) = (vol(&pred, 2, MaskKind::Predicted), vol(&gt, 2, MaskKind::GroundTruth));
        assert_eq!(mbo_video(&p, &g).unwrap().value, 1.0);
        assert_eq!(fg_ari_video(&p, &g).unwrap().value, 1.0);
        let gt = [0u32, 1, 0, 0];
        let pred = [0u32, 1, 0, 1];
        // GT 1 overlaps only label 1: IoU 1/2
        let s = mbo_video(&vol(&pred, 1, MaskKind::Predicted), &vol(&gt, 1, MaskKind::GroundTruth)).unwrap();
        assert_eq!(s.value, 0.5);
        let gt = [0u32, 1, 2, 0, 0, 0];
        let pred = [0u32, 0, 1, 1, 1, 0];
        // GT 1 sits inside pred 0 (IoU 1/3), GT 2 inside pred 1 (IoU 1/3)
        let s = mbo_video(&vol(&pred, 1, MaskKind::Predicted), &vol(&gt, 1, MaskKind::GroundTruth)).unwrap();
        assert!((s.value - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_foreground_is_flagged() {
        let g = vol(&[0, 0, 0, 0], 2, MaskKind::GroundTruth);
        let p = vol(&[0, 1, 0, 1], 2, MaskKind::Predicted);
        for s in [
            fg_ari_video(&p, &g).unwrap(),
            mbo_video(&p, &g).unwrap(),
            fg_ari_image(&p, &g).unwrap(),
        ] {
            assert_eq!(s, Score::empty());
        }
    }

    #[test]
    fn block_patterns() {
        let q = block_pattern_masks((4, 4), 3, 4).unwrap();
        assert_eq!(q.frame(0), &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
        assert_eq!(q.frame(2), q.frame(0));
        assert!(block_pattern_masks((4, 4), 1, 1).unwrap().labels.iter().all(|&l| l == 0));
        let all = block_pattern_masks((3, 4), 1, 12).unwrap();
        assert_eq!(all.labels, (0..12).collect::<Vec<u32>>());
        assert!(block_pattern_masks((4, 4), 1, 17).is_err());
        assert!(block_pattern_masks((2, 2), 1, 3).is_err());
    }

    #[test]
    fn from_soft_takes_argmax() {
        let soft = Tensor::new(&[1, 2, 3], vec![0.1, 0.7, 0.2, 0.5, 0.2, 0.3]).unwrap();
        assert_eq!(MaskVolume::from_soft(&soft).unwrap().labels, vec![1, 0]);
    }

    fn labels(max_len: usize, max_label: u32) -> impl Strategy<Value = (Vec<u32>, Vec<u32>)> {
        (1..=max_len).prop_flat_map(move |n| {
            (
                prop::collection::vec(0..max_label, n),
                prop::collection::vec(0..max_label, n),
            )
        })
    }

    proptest! {
        #[test]
        fn ari_matches_pair_counting((a, b) in labels(40, 6)) {
            let got = ari(&a, &b).unwrap();
            prop_assert!((got - pair_count_ari(&a, &b)).abs() < 1e-12);
            prop_assert!((got - ari(&b, &a).unwrap()).abs() < 1e-15);
            let renamed: Vec<u32> = a.iter().map(|x| 100 - 3 * x).collect();
            prop_assert!((got - ari(&renamed, &b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn single_frame_image_equals_video((p, g) in labels(30, 4)) {
            let n = p.len();
            let pv = MaskVolume::new(p, 1, n, MaskKind::Predicted).unwrap();
            let gv = MaskVolume::new(g, 1, n, MaskKind::GroundTruth).unwrap();
            prop_assert_eq!(fg_ari_video(&pv, &gv).unwrap(), fg_ari_image(&pv, &gv).unwrap());
            prop_assert_eq!(mbo_video(&pv, &gv).unwrap(), mbo_image(&pv, &gv).unwrap());
        }

        #[test]
        fn relabeled_foreground_scores_one((g, perm_seed) in (prop::collection::vec(0u32..5, 1..30), any::<u32>())) {
            let n = g.len();
            let p: Vec<u32> = g.iter().map(|&x| if x == 0 { perm_seed % 7 } else { (x * 7 + perm_seed) % 1000 }).collect();
            let pv = MaskVolume::new(p, 1, n, MaskKind::Predicted).unwrap();
            let gv = MaskVolume::new(g, 1, n, MaskKind::GroundTruth).unwrap();
            prop_assert_eq!(fg_ari_video(&pv, &gv).unwrap().value, 1.0);
        }

        #[test]
        fn mbo_monotone_when_adding_true_positives((g, p) in labels(30, 3), pick in any::<prop::sample::Index>()) {
            let n = g.len();
            let fg: Vec<usize> = (0..n).filter(|&i| g[i] != 0).collect();
            prop_assume!(!fg.is_empty());
            let target = g[fg[pick.index(fg.len())]];
            let iou = |lab: u32| {
                let inter = (0..n).filter(|&j| g[j] == target && p[j] == lab).count() as f64;
                let uni = (0..n).filter(|&j| g[j] == target || p[j] == lab).count() as f64;
                inter / uni
            };
            let matched = (0..3u32).max_by(|&a, &b| iou(a).total_cmp(&iou(b))).unwrap();
            let gv = MaskVolume::new(g.clone(), 1, n, MaskKind::GroundTruth).unwrap();
            let score = |labels: &[u32]| {
                let pv = MaskVolume::new(labels.to_vec(), 1, n, MaskKind::Predicted).unwrap();
                mbo_video(&pv, &gv).unwrap().value
            };
            let mut grown = p.clone();
            if let Some(j) = (0..n).find(|&j| g[j] == target && p[j] != matched) {
                grown[j] = matched;
            }
            prop_assert!(score(&grown) >= score(&p) - 1e-12);
        }
    }
}
