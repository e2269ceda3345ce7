//! Layers shared by the encoders and the dual-path model.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{ParamGroup, ParamId, ParamStore};
use crate::tensor::DenseTensor;

pub const LN_EPS: f64 = 1e-5;

/// Tensor with entries drawn from N(0, std²).
pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> DenseTensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    DenseTensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Affine map over the last axis: `x W + b`, with `W` of shape `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let w = normal(&[in_dim, out_dim], (1.0 / in_dim as f64).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w, group);
        let bias = store.add(format!("{name}.bias"), DenseTensor::zeros([out_dim]), group);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gain = store.add(format!("{name}.gain"), DenseTensor::full([dim], 1.0), group);
        let bias = store.add(format!("{name}.bias"), DenseTensor::zeros([dim]), group);
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Two-layer head `d -> d/2 -> out` with GELU and dropout after the hidden layer.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl MlpHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let h = (dim / 2).max(1);
        Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), dim, h, group, rng),
            out: Linear::new(store, &format!("{name}.fc2"), h, out_dim, group, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        dropout: f64,
        rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let mut h = g.gelu(h)?;
        if let Some(rng) = rng {
            h = g.dropout(h, dropout, rng)?;
        }
        self.out.forward(g, store, h)
    }
}

/// Keys and values projected once and split into heads: `[B, heads, L, d/heads]`.
#[derive(Clone, Copy, Debug)]
pub struct KeyValue {
    pub keys: Var,
    pub values: Var,
}

/// Multi-head scaled dot-product attention with separate Q/K/V/output maps.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, group, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, group, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, group, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, group, rng),
            heads,
            dim,
        })
    }

    /// `[B, L, d] -> [B, heads, L, d/heads]`
    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape("attention input", &s, &[self.dim]));
        }
        let r = g.reshape(x, &[s[0], s[1], self.heads, self.dim / self.heads])?;
        g.permute(r, &[0, 2, 1, 3])
    }

    pub fn project_kv(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<KeyValue> {
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        Ok(KeyValue {
            keys: self.split_heads(g, k)?,
            values: self.split_heads(g, v)?,
        })
    }

    /// Attends `query [B|1, Lq, d]` over precomputed keys/values. `bias`, if
    /// given, is added to the scores and must broadcast to `[B, heads, Lq, Lk]`.
    /// Returns the output `[B, Lq, d]` and the post-softmax weights.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        kv: KeyValue,
        bias: Option<Var>,
    ) -> Result<(Var, Var)> {
        let q = self.q.forward(g, store, query)?;
        let qh = self.split_heads(g, q)?;
        let kt = g.transpose_last(kv.keys)?;
        let scores = g.matmul(qh, kt)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let mut scores = g.scale(scores, scale)?;
        if let Some(b) = bias {
            scores = g.add(scores, b)?;
        }
        let weights = g.softmax(scores, 3)?;
        let ctx = g.matmul(weights, kv.values)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let s = g.shape(ctx).to_vec();
        let merged = g.reshape(ctx, &[s[0], s[1], self.dim])?;
        let out = self.o.forward(g, store, merged)?;
        Ok((out, weights))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        context: Var,
        bias: Option<Var>,
    ) -> Result<(Var, Var)> {
        let kv = self.project_kv(g, store, context)?;
        self.attend(g, store, query, kv, bias)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}
