//! Transformer building blocks. Layers only hold [`ParamId`]s; values live in
//! a [`ParamStore`] so the same layout can run in `f32` or `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Mask, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]));
        Self { weight, bias }
    }

    /// Zero-initialised projection, used where a sublayer must start as a
    /// no-op on its residual stream.
    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn num_scalars<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.weight).len() + store.value(self.bias).len()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[1, dim], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Output of [`MultiHeadAttention::forward`]: the projected values plus the
/// node holding the `[heads × queries × keys]` weights.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub values: Var,
    pub weights: Var,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        memory: Var,
        mask: &Mask<T>,
    ) -> Result<AttentionOutput> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let weights = g.attention(q, k, v, self.heads, mask)?;
        let values = self.output.forward(g, weights)?;
        Ok(AttentionOutput { values, weights })
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.ff1"), dim, hidden, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        self.outer.forward(g, h)
    }
}

/// Network width settings shared by every transformer in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 2,
            layers: 2,
            ffn: 256,
        }
    }
}

/// Post-norm self-attention block: `x = LN(x + Attn(x)); x = LN(x + FFN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dims: Dims, rng: &mut impl Rng) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.self"), dims.d_model, dims.heads, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.self_norm"), dims.d_model),
            ffn: FeedForward::new(store, name, dims.d_model, dims.ffn, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dims.d_model),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, mask: &Mask<T>) -> Result<(Var, Var)> {
        let a = self.attn.forward(g, x, x, mask)?;
        let x = g.add(x, a.values)?;
        let x = self.attn_norm.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let x = g.add(x, f)?;
        Ok((self.ffn_norm.forward(g, x)?, a.weights))
    }
}

/// Pre-norm block whose output projections start at zero, so at
/// initialisation it passes its input through unchanged:
/// `x = x + Attn(LN(x)); x = x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl ResidualBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dims: Dims, rng: &mut impl Rng) -> Self {
        let d = dims.d_model;
        let attn = MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.self.q"), d, d, rng),
            key: Linear::new(store, &format!("{name}.self.k"), d, d, rng),
            value: Linear::new(store, &format!("{name}.self.v"), d, d, rng),
            output: Linear::zeros(store, &format!("{name}.self.o"), d, d),
            heads: dims.heads,
        };
        let ffn = FeedForward {
            inner: Linear::new(store, &format!("{name}.ff1"), d, dims.ffn, rng),
            outer: Linear::zeros(store, &format!("{name}.ff2"), dims.ffn, d),
        };
        Self {
            attn,
            attn_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
            ffn,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.attn_norm.forward(g, x)?;
        let a = self.attn.forward(g, h, h, &Mask::None)?;
        let x = g.add(x, a.values)?;
        let h = self.ffn_norm.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// Token embedding + sinusoidal positions + a stack of [`EncoderLayer`]s.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub dims: Dims,
}

impl TransformerEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dims: Dims,
        rng: &mut impl Rng,
    ) -> Self {
        let embedding = store.add_uniform(format!("{name}.embedding"), &[vocab, dims.d_model], 0.5, rng);
        Self::with_embedding(store, name, embedding, dims, rng)
    }

    /// Builds the layer stack on top of an existing embedding table.
    pub fn with_embedding<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        embedding: ParamId,
        dims: Dims,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..dims.layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), dims, rng))
            .collect();
        Self {
            embedding,
            layers,
            dims,
        }
    }

    /// Embeds `ids` and adds positions.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.embedding);
        let e = g.embed(table, ids)?;
        let pos = g.input(sinusoidal(ids.len(), self.dims.d_model));
        g.add(e, pos)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        let x = self.embed(g, ids)?;
        self.forward_embedded(g, x)
    }

    /// Runs the layer stack on rows that are already embedded.
    pub fn forward_embedded<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x, &Mask::None)?.0;
        }
        Ok(x)
    }
}

/// Fixed sinusoidal position table `[len × dim]`.
pub fn sinusoidal<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * dim];
    for p in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = p as f64 * rate;
            data[p * dim + i] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, dim], data).unwrap()
}
