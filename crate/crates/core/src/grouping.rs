//! Recurrent slot attention over a video.
//!
//! Frame `t` is grouped by iterating competitive attention from the
//! predicted slots of frame `t - 1`; the first frame starts from slots
//! sampled around a learned Gaussian.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{GruCell, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::rng::stream;
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const SLOT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SlotState {
    /// `[K, M]`
    pub slots: Tensor,
    pub frame: usize,
    /// Final-iteration softmax over slots, `[L, K]`; rows sum to one.
    pub attn: Tensor,
    /// `attn` renormalized over patches, `[L, K]`; columns sum to one.
    pub weights: Tensor,
}

impl SlotState {
    /// Hard assignment of every patch to its highest-attention slot.
    pub fn argmax(&self) -> Vec<usize> {
        argmax_rows(&self.attn)
    }
}

pub(crate) fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let w = *t.shape().last().expect("non-scalar");
    t.data()
        .chunks(w)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Learned Gaussian for the first frame's slots.
#[derive(Debug, Clone)]
pub struct SlotInit {
    pub mu: ParamId,
    pub log_sigma: ParamId,
}

impl SlotInit {
    pub fn new<R: rand::Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mu: store.register(format!("{name}.mu"), Tensor::randn(&[dim], 0.02, rng))?,
            log_sigma: store.register(format!("{name}.log_sigma"), Tensor::zeros(&[dim]))?,
        })
    }

    /// `mu + exp(log_sigma) ⊙ noise` for a `[K, M]` noise draw.
    pub fn sample(&self, g: &mut Graph, store: &ParamStore, noise: &Tensor) -> Result<Var> {
        let mu = g.param(store, self.mu);
        let ls = g.param(store, self.log_sigma);
        let sigma = g.exp(ls);
        let n = g.constant(noise.clone());
        let scaled = g.mul(n, sigma)?;
        g.add(scaled, mu)
    }
}

/// Standard normal `[K, M]` noise for one video; keyed by `(seed, video)` so
/// batch composition never changes it.
pub fn slot_noise(seed: u64, video: u64, num_slots: usize, dim: usize) -> Tensor {
    let mut rng = stream(seed, "slots", &[video]);
    let data = (0..num_slots * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(&[num_slots, dim], data).expect("shape matches")
}

/// One pre-norm transformer block over the slot set.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl Predictor {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, true, rng)?,
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[dim, hidden, dim], true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, slots: Var) -> Result<Var> {
        let n = self.norm_attn.forward(g, store, slots)?;
        let a = self.attn.forward(g, store, n, n)?;
        let x = g.add(slots, a)?;
        let n = self.norm_mlp.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, n)?;
        g.add(x, m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupingShape {
    pub input_dim: usize,
    pub slot_dim: usize,
    pub mlp_hidden: usize,
    pub predictor_heads: usize,
    pub predictor_hidden: usize,
    pub first_iters: usize,
    pub later_iters: usize,
}

/// Keys and values of one frame, shared by all iterations on that frame.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedInputs {
    pub keys: Var,
    pub values: Var,
}

/// Graph handles for one grouped frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameSlots {
    pub slots: Var,
    pub attn: Var,
    pub weights: Var,
}

impl FrameSlots {
    pub fn state(&self, g: &Graph, frame: usize) -> SlotState {
        SlotState {
            slots: g.value(self.slots).clone(),
            frame,
            attn: g.value(self.attn).clone(),
            weights: g.value(self.weights).clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlotAttention {
    pub shape: GroupingShape,
    pub input_norm: LayerNorm,
    pub input_mlp: Mlp,
    pub kv_norm: LayerNorm,
    pub slot_norm: LayerNorm,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub gru: GruCell,
    pub init: SlotInit,
    pub predictor: Predictor,
}

impl SlotAttention {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        shape: GroupingShape,
        rng: &mut R,
    ) -> Result<Self> {
        if shape.first_iters == 0 || shape.later_iters == 0 {
            return Err(Error::Config("slot attention needs at least one iteration".into()));
        }
        let (d, m) = (shape.input_dim, shape.slot_dim);
        let p = |s: &str| format!("{name}.{s}");
        Ok(Self {
            input_norm: LayerNorm::new(store, &p("input_norm"), d)?,
            input_mlp: Mlp::new(store, &p("input_mlp"), &[d, shape.mlp_hidden, m], false, rng)?,
            kv_norm: LayerNorm::new(store, &p("kv_norm"), m)?,
            slot_norm: LayerNorm::new(store, &p("slot_norm"), m)?,
            to_q: Linear::new(store, &p("q"), m, m, false, rng)?,
            to_k: Linear::new(store, &p("k"), m, m, false, rng)?,
            to_v: Linear::new(store, &p("v"), m, m, false, rng)?,
            gru: GruCell::new(store, &p("gru"), m, rng)?,
            init: SlotInit::new(store, &p("init"), m, rng)?,
            predictor: Predictor::new(
                store,
                &p("predictor"),
                m,
                shape.predictor_heads,
                shape.predictor_hidden,
                rng,
            )?,
            shape,
        })
    }

    /// Input MLP, layer norm, key and value projections for one `[L, D]` frame.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<ProjectedInputs> {
        let x = self.input_norm.forward(g, store, h)?;
        let x = self.input_mlp.forward(g, store, x)?;
        let x = self.kv_norm.forward(g, store, x)?;
        Ok(ProjectedInputs {
            keys: self.to_k.forward(g, store, x)?,
            values: self.to_v.forward(g, store, x)?,
        })
    }

    /// One competitive attention iteration followed by the GRU update.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, slots: Var, inputs: ProjectedInputs) -> Result<FrameSlots> {
        if g.shape(slots)[0] == 0 {
            return Err(Error::InvalidArgument("slot attention needs K ≥ 1".into()));
        }
        let m = self.shape.slot_dim as f64;
        let n = self.slot_norm.forward(g, store, slots)?;
        let q = self.to_q.forward(g, store, n)?;
        let qt = g.transpose(q)?;
        let logits = g.matmul(inputs.keys, qt)?;
        let attn = g.softmax_rows(logits, m.sqrt(), None)?;
        let shifted = g.add_scalar(attn, SLOT_EPS);
        let mass = g.sum_axis(shifted, 0)?;
        let weights = g.div(shifted, mass)?;
        let wt = g.transpose(weights)?;
        let updates = g.matmul(wt, inputs.values)?;
        let slots = self.gru.forward(g, store, slots, updates)?;
        Ok(FrameSlots { slots, attn, weights })
    }

    /// Projects `h` and runs `iterations` steps from `slots`.
    pub fn group_frame(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        slots: Var,
        iterations: usize,
    ) -> Result<FrameSlots> {
        if iterations == 0 {
            return Err(Error::InvalidArgument("group_frame needs ≥ 1 iteration".into()));
        }
        let inputs = self.project(g, store, h)?;
        let mut out = self.step(g, store, slots, inputs)?;
        for _ in 1..iterations {
            out = self.step(g, store, out.slots, inputs)?;
        }
        Ok(out)
    }

    /// Groups every frame of `frames` (each `[L, D]`); `noise` is the
    /// `[K, M]` draw for the first frame.
    pub fn group_video(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &[Var],
        noise: &Tensor,
    ) -> Result<Vec<FrameSlots>> {
        if noise.ndim() != 2 || noise.shape()[0] == 0 || noise.shape()[1] != self.shape.slot_dim {
            return Err(Error::InvalidArgument(format!(
                "slot noise must be [K ≥ 1, {}], got {:?}",
                self.shape.slot_dim,
                noise.shape()
            )));
        }
        let mut out: Vec<FrameSlots> = Vec::with_capacity(frames.len());
        for &h in frames {
            let (start, iters) = match out.last() {
                None => (self.init.sample(g, store, noise)?, self.shape.first_iters),
                Some(prev) => (self.predictor.forward(g, store, prev.slots)?, self.shape.later_iters),
            };
            out.push(self.group_frame(g, store, h, start, iters)?);
        }
        Ok(out)
    }
}
