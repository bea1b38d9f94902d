//! Parameterized layers. Each layer owns `ParamId`s into a shared
//! [`ParamStore`] and records its forward pass on a [`Graph`].

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-a..a))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape matches")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), xavier(in_dim, out_dim, rng))?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Linear layer whose weight starts at zero.
    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]))?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Stack of linear layers with ReLU between them (not after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width, input first. With `zero_last` the final
    /// layer starts at zero so a residual branch is the identity at init.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        zero_last: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("{name}: an MLP needs at least two widths")));
        }
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, w) in dims.windows(2).enumerate() {
            let lname = format!("{name}.{i}");
            layers.push(if zero_last && i + 1 == n {
                Linear::zeroed(store, &lname, w[0], w[1], true)?
            } else {
                Linear::new(store, &lname, w[0], w[1], true, rng)?
            });
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit with equal input and hidden widths:
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// n  = tanh(x W_n + (r ⊙ h) U_n + b_n)
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_n: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_n: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_n: ParamId,
    pub dim: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = |s: &str, rng: &mut R| store.register(format!("{name}.{s}"), xavier(dim, dim, rng));
        let w_z = w("w_z", rng)?;
        let w_r = w("w_r", rng)?;
        let w_n = w("w_n", rng)?;
        let u_z = w("u_z", rng)?;
        let u_r = w("u_r", rng)?;
        let u_n = w("u_n", rng)?;
        let mut b = |s: &str| store.register(format!("{name}.{s}"), Tensor::zeros(&[dim]));
        Ok(Self {
            w_z,
            w_r,
            w_n,
            u_z,
            u_r,
            u_n,
            b_z: b("b_z")?,
            b_r: b("b_r")?,
            b_n: b("b_n")?,
            dim,
        })
    }

    fn gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        h: Var,
        (w, u, b): (ParamId, ParamId, ParamId),
    ) -> Result<Var> {
        let w = g.param(store, w);
        let u = g.param(store, u);
        let b = g.param(store, b);
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        g.add(s, b)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h_prev: Var, x: Var) -> Result<Var> {
        if g.shape(h_prev) != g.shape(x) || g.shape(x).last() != Some(&self.dim) {
            return Err(Error::shape("gru_cell", g.shape(h_prev), g.shape(x)));
        }
        let z = self.gate(g, store, x, h_prev, (self.w_z, self.u_z, self.b_z))?;
        let z = g.sigmoid(z);
        let r = self.gate(g, store, x, h_prev, (self.w_r, self.u_r, self.b_r))?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h_prev)?;
        let n = self.gate(g, store, x, rh, (self.w_n, self.u_n, self.b_n))?;
        let n = g.tanh(n);
        // h' = n + z ⊙ (h - n)
        let d = g.sub(h_prev, n)?;
        let zd = g.mul(z, d)?;
        g.add(n, zd)
    }
}

/// Multi-head scaled dot-product attention. Queries attend over the rows
/// of `context`; the softmax runs over context rows.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        zero_out: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {dim} is not divisible by {heads} heads"
            )));
        }
        let to_q = Linear::new(store, &format!("{name}.q"), dim, dim, false, rng)?;
        let to_k = Linear::new(store, &format!("{name}.k"), dim, dim, false, rng)?;
        let to_v = Linear::new(store, &format!("{name}.v"), dim, dim, false, rng)?;
        let to_out = if zero_out {
            Linear::zeroed(store, &format!("{name}.out"), dim, dim, true)?
        } else {
            Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?
        };
        Ok(Self {
            to_q,
            to_k,
            to_v,
            to_out,
            heads,
            dim,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        context: Var,
    ) -> Result<Var> {
        let q = self.to_q.forward(g, store, queries)?;
        let k = self.to_k.forward(g, store, context)?;
        let v = self.to_v.forward(g, store, context)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let axis = g.shape(q).len() - 1;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, axis, lo, hi)?,
                    g.slice(k, axis, lo, hi)?,
                    g.slice(v, axis, lo, hi)?,
                )
            };
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let attn = g.softmax_rows(logits, 1.0 / scale, None)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, axis)?
        };
        self.to_out.forward(g, store, o)
    }
}
