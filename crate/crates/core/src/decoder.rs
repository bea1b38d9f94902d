//! Slot decoders.
//!
//! The mixer decodes all positions at once: position queries attend over the
//! slots (allocation), a single-head attention blends the raw slots per
//! position (mixing), and a shared MLP renders the blend into similarity
//! logits and reconstructed features. The broadcast decoder runs the MLP on
//! every (slot, position) pair and blends by per-slot alpha logits, so its
//! cost grows linearly with the slot count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::positional_embedding;
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::rng::stream;
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Mixer,
    Broadcast,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixer" => Ok(Self::Mixer),
            "broadcast" => Ok(Self::Broadcast),
            other => Err(Error::Config(format!("unknown decoder `{other}` (mixer|broadcast)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    /// Render MLP width.
    pub hidden: usize,
    /// Render MLP depth, output heads included.
    pub layers: usize,
    pub alloc_layers: usize,
    pub alloc_heads: usize,
    pub alloc_hidden: usize,
    /// Init scale of the learned positional embedding.
    pub pos_init_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            kind: DecoderKind::Mixer,
            hidden: 128,
            layers: 3,
            alloc_layers: 2,
            alloc_heads: 4,
            alloc_hidden: 128,
            pos_init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderShape {
    pub num_patches: usize,
    pub slot_dim: usize,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    /// `[L, L]`
    pub y_sim: Var,
    /// `[L, D]`
    pub y_rec: Var,
    /// `[L, K]`
    pub masks: Var,
}

impl DecoderVars {
    pub fn output(&self, g: &Graph) -> DecoderOutput {
        DecoderOutput {
            y_sim: g.value(self.y_sim).clone(),
            y_rec: g.value(self.y_rec).clone(),
            masks: g.value(self.masks).clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub y_sim: Tensor,
    pub y_rec: Tensor,
    pub masks: Tensor,
}

/// Shared trunk with a similarity head and a reconstruction head.
#[derive(Debug, Clone)]
pub struct RenderMlp {
    pub trunk: Mlp,
    pub sim_head: Linear,
    pub rec_head: Linear,
}

impl RenderMlp {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        shape: DecoderShape,
        cfg: &DecoderConfig,
        extra_out: usize,
        rng: &mut R,
    ) -> Result<(Self, Option<Linear>)> {
        if cfg.layers < 2 {
            return Err(Error::Config("decoder.layers must be at least 2".into()));
        }
        let mut dims = vec![shape.slot_dim];
        dims.extend(std::iter::repeat(cfg.hidden).take(cfg.layers - 1));
        let trunk = Mlp::new(store, &format!("{name}.trunk"), &dims, false, rng)?;
        let sim_head = Linear::new(store, &format!("{name}.sim"), cfg.hidden, shape.num_patches, true, rng)?;
        let rec_head = Linear::new(store, &format!("{name}.rec"), cfg.hidden, shape.feature_dim, true, rng)?;
        let extra = if extra_out > 0 {
            Some(Linear::new(store, &format!("{name}.alpha"), cfg.hidden, extra_out, true, rng)?)
        } else {
            None
        };
        Ok((Self { trunk, sim_head, rec_head }, extra))
    }

    fn trunk(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.trunk.forward(g, store, x)?;
        Ok(g.relu(h))
    }

    /// `(y_sim, y_rec)` for an input of width `M`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let h = self.trunk(g, store, x)?;
        Ok((
            self.sim_head.forward(g, store, h)?,
            self.rec_head.forward(g, store, h)?,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct AllocLayer {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Mixer {
    pub alloc: Vec<AllocLayer>,
    pub alloc_out: LayerNorm,
    pub mix_norm_f: LayerNorm,
    pub mix_norm_s: LayerNorm,
    pub u_q: Linear,
    pub u_k: Linear,
    pub render: RenderMlp,
}

#[derive(Debug, Clone)]
pub struct Broadcast {
    pub render: RenderMlp,
    pub alpha: Linear,
}

#[derive(Debug, Clone)]
pub enum DecoderBody {
    Mixer(Mixer),
    Broadcast(Broadcast),
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub shape: DecoderShape,
    pub pos_emb: ParamId,
    pub body: DecoderBody,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        shape: DecoderShape,
        cfg: &DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let m = shape.slot_dim;
        let pos_emb = positional_embedding(store, &format!("{name}.pos_emb"), shape.num_patches, m, cfg.pos_init_std, rng)?;
        let body = match cfg.kind {
            DecoderKind::Mixer => {
                if cfg.alloc_layers == 0 {
                    return Err(Error::Config("decoder.alloc_layers must be at least 1".into()));
                }
                let mut alloc = Vec::with_capacity(cfg.alloc_layers);
                for i in 0..cfg.alloc_layers {
                    let p = |s: &str| format!("{name}.alloc.{i}.{s}");
                    alloc.push(AllocLayer {
                        norm_q: LayerNorm::new(store, &p("norm_q"), m)?,
                        norm_kv: LayerNorm::new(store, &p("norm_kv"), m)?,
                        attn: MultiHeadAttention::new(store, &p("attn"), m, cfg.alloc_heads, false, rng)?,
                        norm_mlp: LayerNorm::new(store, &p("norm_mlp"), m)?,
                        mlp: Mlp::new(store, &p("mlp"), &[m, cfg.alloc_hidden, m], false, rng)?,
                    });
                }
                let p = |s: &str| format!("{name}.{s}");
                DecoderBody::Mixer(Mixer {
                    alloc,
                    alloc_out: LayerNorm::new(store, &p("alloc_out"), m)?,
                    mix_norm_f: LayerNorm::new(store, &p("mix.norm_f"), m)?,
                    mix_norm_s: LayerNorm::new(store, &p("mix.norm_s"), m)?,
                    u_q: Linear::new(store, &p("mix.q"), m, m, false, rng)?,
                    u_k: Linear::new(store, &p("mix.k"), m, m, false, rng)?,
                    render: RenderMlp::new(store, &p("render"), shape, cfg, 0, rng)?.0,
                })
            }
            DecoderKind::Broadcast => {
                let (render, alpha) = RenderMlp::new(store, &format!("{name}.render"), shape, cfg, 1, rng)?;
                DecoderBody::Broadcast(Broadcast {
                    render,
                    alpha: alpha.expect("requested"),
                })
            }
        };
        Ok(Self { shape, pos_emb, body })
    }

    pub fn kind(&self) -> DecoderKind {
        match self.body {
            DecoderBody::Mixer(_) => DecoderKind::Mixer,
            DecoderBody::Broadcast(_) => DecoderKind::Broadcast,
        }
    }

    fn check_slots(&self, g: &Graph, slots: Var) -> Result<()> {
        let s = g.shape(slots);
        if s.len() != 2 || s[0] == 0 || s[1] != self.shape.slot_dim {
            return Err(Error::shape("decode", s, &[0, self.shape.slot_dim]));
        }
        Ok(())
    }

    /// Decodes one frame's `[K, M]` slots.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, slots: Var) -> Result<DecoderVars> {
        self.check_slots(g, slots)?;
        let pos = g.param(store, self.pos_emb);
        match &self.body {
            DecoderBody::Mixer(mx) => {
                let f = mx.allocate(g, store, slots, pos)?;
                let (slot_mix, masks) = mx.mix(g, store, f, slots)?;
                let (y_sim, y_rec) = mx.render_mix(g, store, slot_mix, pos)?;
                Ok(DecoderVars { y_sim, y_rec, masks })
            }
            DecoderBody::Broadcast(b) => b.decode(g, store, slots, pos),
        }
    }
}

/// A freshly initialized decoder and a fixed `[K, M]` slot draw, for cost
/// measurements across slot counts.
pub struct DecodeProbe {
    pub store: ParamStore,
    pub decoder: Decoder,
    pub slots: Tensor,
}

impl DecodeProbe {
    pub fn new(shape: DecoderShape, cfg: &DecoderConfig, num_slots: usize, seed: u64) -> Result<Self> {
        if num_slots == 0 {
            return Err(Error::Config("number of slots must be at least 1".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "decode-probe", &[]);
        let decoder = Decoder::new(&mut store, "decoder", shape, cfg, &mut rng)?;
        let slots = Tensor::randn(&[num_slots, shape.slot_dim], 1.0, &mut rng);
        Ok(Self { store, decoder, slots })
    }

    /// Runs one forward decode and returns its floating-point operation count.
    pub fn run(&self) -> Result<u64> {
        let mut g = Graph::new();
        let s = g.constant(self.slots.clone());
        self.decoder.decode(&mut g, &self.store, s)?;
        Ok(g.flops())
    }
}

impl Mixer {
    /// Position queries attend over the slots; positions never interact.
    pub fn allocate(&self, g: &mut Graph, store: &ParamStore, slots: Var, pos: Var) -> Result<Var> {
        let mut x = pos;
        for layer in &self.alloc {
            let q = layer.norm_q.forward(g, store, x)?;
            let kv = layer.norm_kv.forward(g, store, slots)?;
            let a = layer.attn.forward(g, store, q, kv)?;
            x = g.add(x, a)?;
            let n = layer.norm_mlp.forward(g, store, x)?;
            let m = layer.mlp.forward(g, store, n)?;
            x = g.add(x, m)?;
        }
        self.alloc_out.forward(g, store, x)
    }

    /// Single-head attention from allocated features to raw slots:
    /// `(A · slots, A)` with `A` softmaxed over slots.
    pub fn mix(&self, g: &mut Graph, store: &ParamStore, features: Var, slots: Var) -> Result<(Var, Var)> {
        let m = g.shape(slots)[1] as f64;
        let f = self.mix_norm_f.forward(g, store, features)?;
        let q = self.u_q.forward(g, store, f)?;
        let s = self.mix_norm_s.forward(g, store, slots)?;
        let k = self.u_k.forward(g, store, s)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let a = g.softmax_rows(logits, m.sqrt(), None)?;
        Ok((g.matmul(a, slots)?, a))
    }

    pub fn render_mix(&self, g: &mut Graph, store: &ParamStore, slot_mix: Var, pos: Var) -> Result<(Var, Var)> {
        let x = g.add(slot_mix, pos)?;
        self.render.forward(g, store, x)
    }
}

impl Broadcast {
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, slots: Var, pos: Var) -> Result<DecoderVars> {
        let (k, m) = (g.shape(slots)[0], g.shape(slots)[1]);
        let l = g.shape(pos)[0];
        let s3 = g.reshape(slots, &[k, 1, m])?;
        let x = g.add(s3, pos)?;
        let h = self.render.trunk(g, store, x)?;
        let sim = self.render.sim_head.forward(g, store, h)?;
        let rec = self.render.rec_head.forward(g, store, h)?;
        let alpha = self.alpha.forward(g, store, h)?;
        let alpha = g.reshape(alpha, &[k, l])?;
        let alpha = g.transpose(alpha)?;
        let masks = g.softmax_rows(alpha, 1.0, None)?;
        let mt = g.transpose(masks)?;
        let w = g.reshape(mt, &[k, l, 1])?;
        let blend = |g: &mut Graph, v: Var| -> Result<Var> {
            let width = g.shape(v)[2];
            let p = g.mul(v, w)?;
            let s = g.sum_axis(p, 0)?;
            g.reshape(s, &[l, width])
        };
        Ok(DecoderVars {
            y_sim: blend(g, sim)?,
            y_rec: blend(g, rec)?,
            masks,
        })
    }
}
