//! Parameterized network layers on top of the differentiation graph.
//!
//! Feature maps are `[C, T, F]` (channels, frames, bins); sequence layers work
//! on `[N, L, D]` batches with features on the last axis. Weights are drawn
//! uniformly from `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases start at zero
//! and normalization gains at one.

pub mod gradcheck;
pub mod suite;

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

/// Causal 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (kt, kf) = kernel;
        if kf % 2 == 0 {
            return invalid(format!("{name}: frequency kernel {kf} must be odd"));
        }
        Ok(Self {
            weight: store.add_uniform(format!("{name}.weight"), &[cout, cin, kt, kf], cin * kt * kf, rng)?,
            bias: store.add_const(format!("{name}.bias"), &[cout], 0.0)?,
            dilation,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d_causal(x, w, b, self.dilation)
    }
}

/// Affine map over one axis; as a 1x1 convolution when applied to axis 0 of `[C, T, F]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_uniform(format!("{name}.weight"), &[cout, cin], cin, rng)?,
            bias: Some(store.add_const(format!("{name}.bias"), &[cout], 0.0)?),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, axis: usize) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b, axis)
    }
}

/// Normalization over the channel axis only, with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_const(format!("{name}.gain"), &[channels], 1.0)?,
            bias: store.add_const(format!("{name}.bias"), &[channels], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, axis: usize) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, axis, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            slope: store.add_const(format!("{name}.slope"), &[channels], PRELU_INIT)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, axis: usize) -> Result<Var> {
        let a = g.param(store, self.slope);
        g.prelu(x, a, axis)
    }
}

/// `A(x) * sigmoid(G(x))` with two parallel causal convolutions.
#[derive(Clone, Debug)]
pub struct GatedConv2d {
    pub value: Conv2d,
    pub gate: Conv2d,
}

impl GatedConv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            value: Conv2d::new(store, &format!("{name}.value"), cin, cout, kernel, 1, rng)?,
            gate: Conv2d::new(store, &format!("{name}.gate"), cin, cout, kernel, 1, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.value.forward(g, store, x)?;
        let gate = self.gate.forward(g, store, x)?;
        let s = g.sigmoid(gate);
        g.mul(a, s)
    }
}

/// Kernel of every dense-block convolution (time x frequency).
pub const DENSE_KERNEL: (usize, usize) = (2, 3);

/// Stack of dilated causal convolutions; layer `i` (dilation `2^i`) sees the
/// block input concatenated with all earlier layer outputs.
#[derive(Clone, Debug)]
pub struct DilatedDenseBlock {
    pub layers: Vec<(Conv2d, LayerNorm, PRelu)>,
    pub channels: usize,
}

impl DilatedDenseBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return invalid(format!("{name}: dense block depth must be >= 1"));
        }
        let layers = (0..depth)
            .map(|i| {
                Ok((
                    Conv2d::new(
                        store,
                        &format!("{name}.{i}.conv"),
                        channels * (i + 1),
                        channels,
                        DENSE_KERNEL,
                        1 << i,
                        rng,
                    )?,
                    LayerNorm::new(store, &format!("{name}.{i}.norm"), channels)?,
                    PRelu::new(store, &format!("{name}.{i}.act"), channels)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, channels })
    }

    /// Frames of context seen by the last output: `1 + sum_i (kT - 1) 2^i`.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.layers.len()).map(|i| (DENSE_KERNEL.0 - 1) << i).sum::<usize>()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut skip = x;
        let mut out = x;
        for (i, (conv, norm, act)) in self.layers.iter().enumerate() {
            let h = conv.forward(g, store, skip)?;
            let h = norm.forward(g, store, h, 0)?;
            out = act.forward(g, store, h, 0)?;
            if i + 1 < self.layers.len() {
                skip = g.concat0(&[out, skip])?;
            }
        }
        Ok(out)
    }
}

/// Single-layer GRU.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w_ih: store.add_uniform(format!("{name}.w_ih"), &[3 * hidden, input], input, rng)?,
            w_hh: store.add_uniform(format!("{name}.w_hh"), &[3 * hidden, hidden], hidden, rng)?,
            bias: store.add_const(format!("{name}.bias"), &[3 * hidden], 0.0)?,
            hidden,
        })
    }

    /// `x: [N, L, D]` to `[N, L, H]`; `reverse` reads each sequence back to front.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, reverse: bool) -> Result<Var> {
        let wi = g.param(store, self.w_ih);
        let wh = g.param(store, self.w_hh);
        let b = g.param(store, self.bias);
        g.gru(x, wi, wh, b, reverse)
    }
}

/// Self-attention with learned query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return invalid(format!("{name}: width {dim} not divisible by {heads} heads"));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng)?,
            heads,
        })
    }

    /// `x: [N, L, D]`; full attention within each of the `N` sequences.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let q = self.query.forward(g, store, x, 2)?;
        let k = self.key.forward(g, store, x, 2)?;
        let v = self.value.forward(g, store, x, 2)?;
        let a = g.attention(q, k, v, self.heads)?;
        self.output.forward(g, store, a, 2)
    }
}

/// Transformer layer whose position-wise feed-forward is a bidirectional GRU:
/// `y = LN(x + MHA(x))`, `out = LN(y + W PReLU([GRU_fwd(y), GRU_bwd(y)]))`.
#[derive(Clone, Debug)]
pub struct ImprovedTransformer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn_forward: Gru,
    pub ffn_backward: Gru,
    pub ffn_act: PRelu,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

impl ImprovedTransformer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            ffn_forward: Gru::new(store, &format!("{name}.ffn.gru_fwd"), dim, ffn_hidden, rng)?,
            ffn_backward: Gru::new(store, &format!("{name}.ffn.gru_bwd"), dim, ffn_hidden, rng)?,
            ffn_act: PRelu::new(store, &format!("{name}.ffn.act"), 2 * ffn_hidden)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn.out"), 2 * ffn_hidden, dim, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    /// `x: [N, L, D]` to the same shape; the recurrence runs along `L` only.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.attention.forward(g, store, x)?;
        let r = g.add(x, a)?;
        let y = self.norm1.forward(g, store, r, 2)?;
        let fwd = self.ffn_forward.forward(g, store, y, false)?;
        let bwd = self.ffn_backward.forward(g, store, y, true)?;
        let both = concat_last(g, fwd, bwd)?;
        let h = self.ffn_act.forward(g, store, both, 2)?;
        let f = self.ffn_out.forward(g, store, h, 2)?;
        let r2 = g.add(y, f)?;
        self.norm2.forward(g, store, r2, 2)
    }
}

/// Concatenates two `[N, L, Da]`, `[N, L, Db]` tensors along the last axis.
pub fn concat_last<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    // move features to the front, stack, move back
    let at = g.permute3(a, [2, 0, 1])?;
    let bt = g.permute3(b, [2, 0, 1])?;
    let c = g.concat0(&[at, bt])?;
    g.permute3(c, [1, 2, 0])
}
