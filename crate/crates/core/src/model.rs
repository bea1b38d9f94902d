//! The full model, its loss, the optimizer and the training loop.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{generate, DataSpec, Video};
use crate::decoder::{Decoder, DecoderConfig, DecoderShape, DecoderVars};
use crate::error::{Error, Result};
use crate::features::{extract_synthetic, FeatureConfig, PatchFeatures};
use crate::formats::{ByteReader, ByteWriter, CHECKPOINT_MAGIC};
use crate::grouping::{slot_noise, FrameSlots, GroupingShape, SlotAttention};
use crate::metrics::{block_pattern_masks, MaskVolume, MetricsReport, VideoMetrics};
use crate::rng::stream;
use crate::targets::{build_targets, TransitionTargets};
use crate::tensor::{Gradients, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// K; evaluation may override it.
    pub num_slots: usize,
    /// M
    pub slot_dim: usize,
    pub input_mlp_hidden: usize,
    pub predictor_heads: usize,
    pub predictor_hidden: usize,
    pub first_frame_iters: usize,
    pub later_frame_iters: usize,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_slots: 4,
            slot_dim: 32,
            input_mlp_hidden: 32,
            predictor_heads: 4,
            predictor_hidden: 128,
            first_frame_iters: 3,
            later_frame_iters: 2,
            decoder: DecoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Time shift k between compared frames.
    pub shift: usize,
    /// Softmax temperature τ of the targets.
    pub temperature: f64,
    /// Weight α of the feature reconstruction term.
    pub alpha: f64,
    /// Weight of the temporal similarity term; 0 trains on reconstruction only.
    pub sim_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            shift: 1,
            temperature: 0.075,
            alpha: 0.1,
            sim_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Step at which the learning rate has decayed to `peak / e`;
    /// defaults to `total_steps`.
    pub decay_steps: Option<u64>,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 4e-4,
            warmup_steps: 2500,
            decay_steps: None,
            grad_clip: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataSpec,
    pub features: FeatureConfig,
    /// Frames per training segment.
    pub segment_len: usize,
    /// Size of the training video pool.
    pub num_videos: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Seeds parameter initialization and slot sampling.
    pub seed: u64,
    /// Seeds the training videos and batch composition.
    pub data_seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataSpec::default(),
            features: FeatureConfig::default(),
            segment_len: 4,
            num_videos: 2000,
            batch_size: 8,
            total_steps: 5000,
            seed: 0,
            data_seed: 0,
            checkpoint_every: 1000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.data.validate()?;
        let m = &self.model;
        if m.num_slots == 0 {
            return bad("model.num_slots must be at least 1".into());
        }
        if m.slot_dim == 0 || m.predictor_heads == 0 || m.slot_dim % m.predictor_heads != 0 {
            return bad(format!(
                "model.slot_dim {} is not divisible by model.predictor_heads {}",
                m.slot_dim, m.predictor_heads
            ));
        }
        if m.decoder.alloc_heads == 0 || m.slot_dim % m.decoder.alloc_heads != 0 {
            return bad(format!(
                "model.slot_dim {} is not divisible by model.decoder.alloc_heads {}",
                m.slot_dim, m.decoder.alloc_heads
            ));
        }
        if m.first_frame_iters == 0 || m.later_frame_iters == 0 {
            return bad("slot attention iteration counts must be at least 1".into());
        }
        if self.segment_len == 0 || self.segment_len > self.data.clip_len {
            return bad(format!(
                "segment_len {} must be in 1..={} (data.clip_len)",
                self.segment_len, self.data.clip_len
            ));
        }
        if self.loss.shift >= self.segment_len {
            return bad(format!(
                "loss.shift {} must be smaller than segment_len {}",
                self.loss.shift, self.segment_len
            ));
        }
        if !(self.loss.temperature > 0.0) {
            return bad("loss.temperature must be positive".into());
        }
        if self.loss.alpha < 0.0 || self.loss.sim_weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.batch_size == 0 || self.num_videos == 0 {
            return bad("batch_size and num_videos must be at least 1".into());
        }
        let o = &self.optim;
        if !(o.peak_lr >= 0.0) || !(o.grad_clip > 0.0) || !(o.eps > 0.0) {
            return bad("optim.peak_lr, optim.grad_clip and optim.eps must be positive".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optim.beta1 and optim.beta2 must lie in [0, 1)".into());
        }
        if self.features.width == 0 {
            return bad("features.width must be at least 1".into());
        }
        Ok(())
    }

    pub fn decay_steps(&self) -> u64 {
        self.optim.decay_steps.unwrap_or(self.total_steps)
    }

    /// Linear warmup to `peak_lr`, then exponential decay reaching
    /// `peak_lr / e` at `decay_steps`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let o = &self.optim;
        let warm = if o.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / o.warmup_steps as f64).min(1.0)
        };
        let span = self.decay_steps().saturating_sub(o.warmup_steps).max(1) as f64;
        let past = step.saturating_sub(o.warmup_steps) as f64;
        o.peak_lr * warm * (-past / span).exp()
    }
}

/// Slot attention followed by a per-frame decoder.
#[derive(Debug, Clone)]
pub struct VideoSaur {
    pub grouping: SlotAttention,
    pub decoder: Decoder,
    pub num_patches: usize,
    pub feature_dim: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub slots: Vec<FrameSlots>,
    pub decoded: Vec<DecoderVars>,
}

impl VideoSaur {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        num_patches: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let grouping = SlotAttention::new(
            store,
            "grouping",
            GroupingShape {
                input_dim: feature_dim,
                slot_dim: cfg.slot_dim,
                mlp_hidden: cfg.input_mlp_hidden,
                predictor_heads: cfg.predictor_heads,
                predictor_hidden: cfg.predictor_hidden,
                first_iters: cfg.first_frame_iters,
                later_iters: cfg.later_frame_iters,
            },
            rng,
        )?;
        let decoder = Decoder::new(
            store,
            "decoder",
            DecoderShape {
                num_patches,
                slot_dim: cfg.slot_dim,
                feature_dim,
            },
            &cfg.decoder,
            rng,
        )?;
        Ok(Self {
            grouping,
            decoder,
            num_patches,
            feature_dim,
        })
    }

    /// Groups all frames and decodes the first `decode_frames` of them.
    pub fn forward_partial(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &PatchFeatures,
        noise: &Tensor,
        decode_frames: usize,
    ) -> Result<ForwardVars> {
        if inputs.num_patches() != self.num_patches || inputs.width() != self.feature_dim {
            return Err(Error::shape(
                "forward",
                &[inputs.num_patches(), inputs.width()],
                &[self.num_patches, self.feature_dim],
            ));
        }
        let frames: Vec<Var> = (0..inputs.num_frames())
            .map(|t| g.constant(inputs.frame(t)))
            .collect();
        let slots = self.grouping.group_video(g, store, &frames, noise)?;
        let decoded = slots
            .iter()
            .take(decode_frames)
            .map(|s| self.decoder.decode(g, store, s.slots))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardVars { slots, decoded })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &PatchFeatures,
        noise: &Tensor,
    ) -> Result<ForwardVars> {
        self.forward_partial(g, store, inputs, noise, inputs.num_frames())
    }
}

#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    pub sim: Vec<Var>,
    pub rec: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameLoss {
    pub sim: f64,
    pub rec: f64,
    /// `sim` minus the mean row entropy of the targets.
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub sim: f64,
    pub rec: f64,
    pub kl: f64,
    pub per_frame: Vec<FrameLoss>,
}

impl LossReport {
    pub fn read(g: &Graph, vars: &LossVars, targets: &TransitionTargets) -> Self {
        let l = targets.probs.shape()[1];
        let entropies = targets.row_entropies();
        let per_frame: Vec<FrameLoss> = vars
            .sim
            .iter()
            .zip(&vars.rec)
            .enumerate()
            .map(|(t, (&s, &r))| {
                let h = entropies[t * l..(t + 1) * l].iter().sum::<f64>() / l as f64;
                let sim = g.value(s).item();
                FrameLoss {
                    sim,
                    rec: g.value(r).item(),
                    kl: sim - h,
                }
            })
            .collect();
        Self {
            total: g.value(vars.total).item(),
            sim: per_frame.iter().map(|f| f.sim).sum(),
            rec: per_frame.iter().map(|f| f.rec).sum(),
            kl: per_frame.iter().map(|f| f.kl).sum(),
            per_frame,
        }
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let frames = reports.first().map_or(0, |r| r.per_frame.len());
        let per_frame = (0..frames)
            .map(|t| FrameLoss {
                sim: reports.iter().map(|r| r.per_frame[t].sim).sum::<f64>() / n,
                rec: reports.iter().map(|r| r.per_frame[t].rec).sum::<f64>() / n,
                kl: reports.iter().map(|r| r.per_frame[t].kl).sum::<f64>() / n,
            })
            .collect();
        Self {
            total: reports.iter().map(|r| r.total).sum::<f64>() / n,
            sim: reports.iter().map(|r| r.sim).sum::<f64>() / n,
            rec: reports.iter().map(|r| r.rec).sum::<f64>() / n,
            kl: reports.iter().map(|r| r.kl).sum::<f64>() / n,
            per_frame,
        }
    }
}

/// `Σ_t sim_weight·CE(P_t, y_sim_t) + α·MSE(y_rec_t, h_t)` over the frames
/// `t` that have a target.
pub fn loss(
    g: &mut Graph,
    outputs: &[DecoderVars],
    targets: &TransitionTargets,
    rec_targets: &PatchFeatures,
    cfg: &LossConfig,
) -> Result<LossVars> {
    if targets.shift != cfg.shift {
        return Err(Error::InvalidArgument(format!(
            "targets were built with shift {} but the loss uses {}",
            targets.shift, cfg.shift
        )));
    }
    let pairs = targets.num_pairs();
    if outputs.len() < pairs || rec_targets.num_frames() < pairs {
        return Err(Error::InvalidArgument(format!(
            "{pairs} target frames but {} decoded frames and {} reconstruction frames",
            outputs.len(),
            rec_targets.num_frames()
        )));
    }
    let mut sim = Vec::with_capacity(pairs);
    let mut rec = Vec::with_capacity(pairs);
    let mut total: Option<Var> = None;
    for (t, out) in outputs.iter().take(pairs).enumerate() {
        let s = g.cross_entropy_rows(&targets.frame(t), out.y_sim)?;
        let h = g.constant(rec_targets.frame(t));
        let r = g.mse(out.y_rec, h)?;
        let ws = g.scale(s, cfg.sim_weight);
        let wr = g.scale(r, cfg.alpha);
        let term = g.add(ws, wr)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
        sim.push(s);
        rec.push(r);
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no frames to score".into()))?;
    Ok(LossVars { total, sim, rec })
}

/// One training sample: features of a segment, its targets and the slot
/// noise of its first frame.
#[derive(Debug, Clone)]
pub struct Example {
    pub inputs: PatchFeatures,
    pub targets: TransitionTargets,
    pub noise: Tensor,
}

impl Example {
    pub fn from_video(video: &Video, cfg: &TrainConfig, noise: Tensor) -> Result<Self> {
        let (inputs, target_feats) = extract_synthetic(video, &cfg.features)?;
        let targets = build_targets(&target_feats, cfg.loss.shift, cfg.loss.temperature)?;
        Ok(Self {
            inputs,
            targets,
            noise,
        })
    }
}

/// Loss report and parameter gradients of one example.
pub fn example_gradients(
    model: &VideoSaur,
    store: &ParamStore,
    ex: &Example,
    cfg: &LossConfig,
) -> Result<(LossReport, Gradients)> {
    let mut g = Graph::new();
    let fwd = model.forward_partial(&mut g, store, &ex.inputs, &ex.noise, ex.targets.num_pairs())?;
    let vars = loss(&mut g, &fwd.decoded, &ex.targets, &ex.inputs, cfg)?;
    let report = LossReport::read(&g, &vars, &ex.targets);
    let grads = g.gradients(vars.total, store.len())?;
    Ok((report, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, cfg: &OptimConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = grads.get(id) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).value.data_mut();
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

pub fn gradient_norm(grads: &Gradients, num_params: usize) -> f64 {
    grads.values[..num_params]
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: LossReport,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
}

/// Parameters, optimizer state and step counter of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub model: VideoSaur,
    pub adam: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(config.seed, "init", &[]);
        let model = VideoSaur::new(
            &mut store,
            &config.model,
            config.data.num_patches(),
            config.features.width,
            &mut rng,
        )?;
        let adam = Adam::new(&store);
        Ok(Self {
            config,
            store,
            model,
            adam,
            step: 0,
        })
    }

    /// The batch consumed by optimizer step `step` (1-based).
    pub fn batch(&self, step: u64) -> Result<Vec<Example>> {
        let c = &self.config;
        (0..c.batch_size as u64)
            .into_par_iter()
            .map(|b| {
                let mut rng = stream(c.data_seed, "batch", &[step, b]);
                let index = rng.gen_range(0..c.num_videos);
                let clip = generate(&c.data, c.data_seed, index)?;
                let start = rng.gen_range(0..=c.data.clip_len - c.segment_len);
                let segment = clip.segment(start, c.segment_len)?;
                let sample = step * c.batch_size as u64 + b;
                let noise = slot_noise(c.seed, sample, c.model.num_slots, c.model.slot_dim);
                Example::from_video(&segment, c, noise)
            })
            .collect()
    }

    /// Averages per-example gradients in batch order, clips the global norm
    /// and applies one Adam update.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let results = batch
            .par_iter()
            .map(|ex| example_gradients(&self.model, &self.store, ex, &self.config.loss))
            .collect::<Result<Vec<_>>>()?;
        let n = self.store.len();
        let mut grads = Gradients::empty(n);
        let mut reports = Vec::with_capacity(results.len());
        for (r, g) in results {
            grads.merge(&g);
            reports.push(r);
        }
        grads.scale(1.0 / batch.len() as f64);
        let report = LossReport::mean(&reports);
        let step = self.step + 1;
        let lr = self.config.learning_rate(step);
        let grad_norm = gradient_norm(&grads, n);
        if !report.total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NumericalAbort {
                step,
                lr,
                grad_norm,
                loss: report.total,
            });
        }
        let clip = self.config.optim.grad_clip;
        if grad_norm > clip {
            grads.scale(clip / grad_norm);
        }
        let clipped = gradient_norm(&grads, n);
        self.adam.update(&mut self.store, &grads, lr, &self.config.optim);
        self.step = step;
        Ok(StepReport {
            step,
            lr,
            loss: report,
            grad_norm,
            clipped_grad_norm: clipped,
        })
    }

    /// Runs steps until `until` (capped at `total_steps`); `on_step` returns
    /// `false` to stop early.
    pub fn run<F>(&mut self, until: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepReport) -> Result<bool>,
    {
        let end = until.min(self.config.total_steps);
        while self.step < end {
            let batch = self.batch(self.step + 1)?;
            let report = self.train_step(&batch)?;
            if !on_step(self, &report)? {
                break;
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, data: &DataSpec, seed: u64, num_videos: u64, num_slots: usize) -> Result<MetricsReport> {
        evaluate(&self.model, &self.store, &self.config, data, seed, num_videos, num_slots)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.header(CHECKPOINT_MAGIC, &[]);
        w.str(&serde_json::to_string(&self.config)?);
        w.u64(self.step);
        w.u32(self.store.len() as u32);
        for (i, p) in self.store.iter().enumerate() {
            w.str(&p.name);
            w.u32(p.value.ndim() as u32);
            p.value.shape().iter().for_each(|&d| w.u32(d as u32));
            w.u8(DTYPE_F64);
            p.value.data().iter().for_each(|&v| w.f64(v));
            self.adam.m[i].iter().for_each(|&v| w.f64(v));
            self.adam.v[i].iter().for_each(|&v| w.f64(v));
        }
        w.u64(self.adam.t);
        w.u64(self.config.seed);
        w.u64(self.config.data_seed);
        Ok(w.buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Restores a checkpoint and requires its config to equal `expected`.
    pub fn resume(path: impl AsRef<Path>, expected: &TrainConfig) -> Result<Self> {
        let t = Self::load(path)?;
        let diff = config_diff(&t.config, expected)?;
        if !diff.is_empty() {
            return Err(Error::CheckpointMismatch(format!(
                "config differs from checkpoint at: {}",
                diff.join(", ")
            )));
        }
        Ok(t)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.header(CHECKPOINT_MAGIC, 0)?;
        let config: TrainConfig = serde_json::from_str(&r.str()?)?;
        let mut t = Trainer::new(config)?;
        t.step = r.u64()?;
        let count = r.u32()? as usize;
        if count != t.store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {count} parameters, model has {}",
                t.store.len()
            )));
        }
        for i in 0..count {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::CheckpointMismatch(format!("unknown dtype tag {dtype} for {name}")));
            }
            let id = t
                .store
                .lookup(&name)
                .filter(|id| id.index() == i)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unexpected parameter {name}")))?;
            if t.store.value(id).shape() != shape.as_slice() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: checkpoint shape {shape:?}, model shape {:?}",
                    t.store.value(id).shape()
                )));
            }
            let n: usize = shape.iter().product();
            let mut read = |n: usize| (0..n).map(|_| r.f64()).collect::<Result<Vec<f64>>>();
            t.store.get_mut(id).value = Tensor::new(&shape, read(n)?)?;
            t.adam.m[i] = read(n)?;
            t.adam.v[i] = read(n)?;
        }
        t.adam.t = r.u64()?;
        let (seed, data_seed) = (r.u64()?, r.u64()?);
        if seed != t.config.seed || data_seed != t.config.data_seed {
            return Err(Error::CheckpointMismatch("seed record disagrees with config".into()));
        }
        r.expect_payload(0)?;
        Ok(t)
    }
}

const DTYPE_F64: u8 = 8;

/// Dotted paths of the config keys whose values differ.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Result<Vec<String>> {
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                for (k, va) in x {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    match y.get(k) {
                        Some(vb) => walk(&p, va, vb, out),
                        None => out.push(p),
                    }
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(a)?, &serde_json::to_value(b)?, &mut out);
    Ok(out)
}

/// Per-frame decoder masks `[T, L, K]` and slot-attention maps `[T, L, K]`
/// for a whole video.
pub fn infer_masks(
    model: &VideoSaur,
    store: &ParamStore,
    inputs: &PatchFeatures,
    noise: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, store, inputs, noise)?;
    let masks: Vec<Tensor> = fwd.decoded.iter().map(|d| g.value(d.masks).clone()).collect();
    let attn: Vec<Tensor> = fwd.slots.iter().map(|s| g.value(s.attn).clone()).collect();
    Ok((Tensor::stack(&masks)?, Tensor::stack(&attn)?))
}

/// Decoder-mask metrics on `num_videos` full clips generated from `seed`,
/// grouping with `num_slots` slots.
pub fn evaluate(
    model: &VideoSaur,
    store: &ParamStore,
    cfg: &TrainConfig,
    data: &DataSpec,
    seed: u64,
    num_videos: u64,
    num_slots: usize,
) -> Result<MetricsReport> {
    if num_slots == 0 {
        return Err(Error::Config("number of slots must be at least 1".into()));
    }
    let per_video = (0..num_videos)
        .into_par_iter()
        .map(|i| {
            let video = generate(data, seed, i)?;
            let (inputs, _) = extract_synthetic(&video, &cfg.features)?;
            let noise = slot_noise(cfg.seed, i, num_slots, cfg.model.slot_dim);
            let (masks, _) = infer_masks(model, store, &inputs, &noise)?;
            let pred = MaskVolume::from_soft(&masks)?;
            let gt = MaskVolume::ground_truth(&video.gt_masks, video.num_frames(), video.num_patches())?;
            VideoMetrics::compute(i, &pred, &gt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_videos(per_video))
}

/// Metrics of the fixed `k_blocks` block-pattern masks on the videos
/// `evaluate` would use.
pub fn evaluate_block_pattern(data: &DataSpec, seed: u64, num_videos: u64, k_blocks: usize) -> Result<MetricsReport> {
    let per_video = (0..num_videos)
        .into_par_iter()
        .map(|i| {
            let video = generate(data, seed, i)?;
            let pred = block_pattern_masks(video.grid, video.num_frames(), k_blocks)?;
            let gt = MaskVolume::ground_truth(&video.gt_masks, video.num_frames(), video.num_patches())?;
            VideoMetrics::compute(i, &pred, &gt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_videos(per_video))
}
