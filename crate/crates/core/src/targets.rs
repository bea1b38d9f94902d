//! Self-supervised temporal similarity targets.
//!
//! For a frame pair `(t, t + k)` the affinity matrix holds the cosine
//! similarity between every patch of frame `t` and every patch of frame
//! `t + k`. Each row becomes a distribution over where the patch's content
//! went: a tempered softmax restricted to the non-negative similarities.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows_values, L2_NORM_EPS};
use crate::error::{Error, Result};
use crate::features::PatchFeatures;
use crate::tensor::Tensor;

/// Cosine similarities `[L, L]` between frame `t` and frame `t + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub values: Tensor,
    pub t: usize,
    pub k: usize,
}

fn normalized_rows(h: &Tensor) -> Vec<f64> {
    let w = h.shape()[1];
    let mut out = h.data().to_vec();
    for row in out.chunks_mut(w) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_NORM_EPS);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

impl AffinityMatrix {
    /// Affinity between frame `t` and frame `t + k` of `h`.
    pub fn between(h: &PatchFeatures, t: usize, k: usize) -> Result<Self> {
        if t + k >= h.num_frames() {
            return Err(Error::InvalidArgument(format!(
                "frame {} is out of range for {} frames",
                t + k,
                h.num_frames()
            )));
        }
        Ok(Self {
            values: affinity(&h.frame(t), &h.frame(t + k))?,
            t,
            k,
        })
    }
}

/// `normalize(h_t) · normalize(h_tk)ᵀ` for `[L, D]` inputs.
pub fn affinity(h_t: &Tensor, h_tk: &Tensor) -> Result<Tensor> {
    if h_t.ndim() != 2 || h_t.shape() != h_tk.shape() {
        return Err(Error::shape("affinity", h_t.shape(), h_tk.shape()));
    }
    let (l, d) = (h_t.shape()[0], h_t.shape()[1]);
    let a = normalized_rows(h_t);
    let b = normalized_rows(h_tk);
    let mut out = vec![0.0; l * l];
    for i in 0..l {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..l {
            let bj = &b[j * d..(j + 1) * d];
            out[i * l + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    Tensor::new(&[l, l], out)
}

/// Row block of transition probabilities for one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRows {
    pub probs: Tensor,
    /// Rows whose similarities were all negative and fell back to an
    /// unmasked softmax.
    pub degenerate: Vec<bool>,
}

/// Per row: softmax of `A / τ` over the entries with `A ≥ 0`; negative
/// entries are exactly zero. An all-negative row falls back to a softmax over
/// the whole row and is flagged.
pub fn transition_probs(affinity: &Tensor, temperature: f64) -> Result<TransitionRows> {
    if affinity.ndim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "affinity must be 2-D, got {:?}",
            affinity.shape()
        )));
    }
    let w = affinity.shape()[1];
    let rows = affinity.shape()[0];
    let exclude: Vec<bool> = affinity.data().iter().map(|&a| a < 0.0).collect();
    let mut degenerate = vec![false; rows];
    for (r, flag) in degenerate.iter_mut().enumerate() {
        *flag = exclude[r * w..(r + 1) * w].iter().all(|&e| e);
    }
    if !degenerate.iter().any(|&d| d) {
        let probs = softmax_rows_values(affinity, temperature, Some(&exclude))?;
        return Ok(TransitionRows { probs, degenerate });
    }
    let mut data = Vec::with_capacity(affinity.numel());
    for r in 0..rows {
        let row = Tensor::new(&[1, w], affinity.row(r).to_vec())?;
        let mask = (!degenerate[r]).then(|| &exclude[r * w..(r + 1) * w]);
        data.extend(softmax_rows_values(&row, temperature, mask)?.into_data());
    }
    Ok(TransitionRows {
        probs: Tensor::new(affinity.shape(), data)?,
        degenerate,
    })
}

/// Targets for every frame pair `(t, t + k)`, `t = 0..T - k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTargets {
    /// `[T - k, L, L]`
    pub probs: Tensor,
    pub temperature: f64,
    pub shift: usize,
    /// `[(T - k) * L]`
    pub degenerate: Vec<bool>,
}

impl TransitionTargets {
    pub fn num_pairs(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn frame(&self, t: usize) -> Tensor {
        self.probs.index_outer(t)
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }

    /// Shannon entropy (nats) of every row, `[(T - k) * L]`.
    pub fn row_entropies(&self) -> Vec<f64> {
        let w = *self.probs.shape().last().expect("3-D");
        self.probs
            .data()
            .chunks(w)
            .map(|row| row.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum())
            .collect()
    }

    pub fn stats(&self) -> TargetStats {
        let h = self.row_entropies();
        let n = h.len().max(1) as f64;
        TargetStats {
            shift: self.shift,
            temperature: self.temperature,
            pairs: self.num_pairs(),
            rows: h.len(),
            mean_row_entropy: h.iter().sum::<f64>() / n,
            min_row_entropy: h.iter().copied().fold(f64::INFINITY, f64::min),
            max_row_entropy: h.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            degenerate_rows: self.degenerate_count(),
            row_entropies: h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub shift: usize,
    pub temperature: f64,
    pub pairs: usize,
    pub rows: usize,
    pub mean_row_entropy: f64,
    pub min_row_entropy: f64,
    pub max_row_entropy: f64,
    pub degenerate_rows: usize,
    pub row_entropies: Vec<f64>,
}

/// Builds the targets from the target feature stream. `shift = 0` compares
/// each frame with itself.
pub fn build_targets(h: &PatchFeatures, shift: usize, temperature: f64) -> Result<TransitionTargets> {
    let t_len = h.num_frames();
    if shift >= t_len {
        return Err(Error::InvalidArgument(format!(
            "time shift {shift} needs more than {t_len} frames"
        )));
    }
    let pairs = t_len - shift;
    let l = h.num_patches();
    let mut data = Vec::with_capacity(pairs * l * l);
    let mut degenerate = Vec::with_capacity(pairs * l);
    for t in 0..pairs {
        let a = AffinityMatrix::between(h, t, shift)?;
        let rows = transition_probs(&a.values, temperature)?;
        data.extend(rows.probs.into_data());
        degenerate.extend(rows.degenerate);
    }
    Ok(TransitionTargets {
        probs: Tensor::new(&[pairs, l, l], data)?,
        temperature,
        shift,
        degenerate,
    })
}
