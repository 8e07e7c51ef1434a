use std::sync::Arc;

use rand::Rng;

use super::graph::{ConvGeom, Graph, Var};
use super::params::{Init, ParamId, ParamSet};
use crate::scalar::Scalar;

/// A token-major feature map living on a graph.
#[derive(Debug, Clone, Copy)]
pub struct FMap {
    pub var: Var,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(&format!("{name}.weight"), &[inputs, outputs], init, rng);
        let bias = bias.then(|| ps.add(&format!("{name}.bias"), &[outputs], Init::Zeros, rng));
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(ps, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Square convolution with zero padding, computed as patch extraction plus a matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_ch;
        let weight = ps.add(&format!("{name}.weight"), &[fan_in, out_ch], Init::He(fan_in), rng);
        let bias = ps.add(&format!("{name}.bias"), &[out_ch], Init::Zeros, rng);
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: FMap) -> FMap {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let pad = self.kernel / 2;
        let ho = (x.h + 2 * pad - self.kernel) / self.stride + 1;
        let wo = (x.w + 2 * pad - self.kernel) / self.stride + 1;
        let cols = if self.kernel == 1 && self.stride == 1 {
            x.var
        } else {
            g.im2col(
                x.var,
                ConvGeom {
                    h: x.h,
                    w: x.w,
                    c: x.c,
                    k: self.kernel,
                    stride: self.stride,
                    pad,
                    ho,
                    wo,
                },
            )
        };
        let w = g.param(ps, self.weight);
        let y = g.matmul(cols, w);
        let b = g.param(ps, self.bias);
        let y = g.add_row(y, b);
        FMap {
            var: y,
            h: ho,
            w: wo,
            c: self.out_ch,
        }
    }
}

/// Stack of 3x3 conv + ReLU stages. The first stage keeps the resolution,
/// every later stage halves it.
#[derive(Debug, Clone)]
pub struct ConvTower {
    pub stages: Vec<Conv2d>,
}

impl ConvTower {
    pub fn new<S: Scalar, R: Rng>(ps: &mut ParamSet<S>, name: &str, in_ch: usize, channels: &[usize], rng: &mut R) -> Self {
        let mut stages = Vec::with_capacity(channels.len());
        let mut prev = in_ch;
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            stages.push(Conv2d::new(ps, &format!("{name}.stage{i}"), prev, c, 3, stride, rng));
            prev = c;
        }
        ConvTower { stages }
    }

    /// Overall downsampling factor of the last stage.
    pub fn stride(&self) -> usize {
        1 << self.stages.len().saturating_sub(1)
    }

    /// Runs the stages, calling `between(level, map)` after each one; the
    /// returned map feeds the next stage. Returns every level's output.
    pub fn forward_with<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        x: FMap,
        mut between: impl FnMut(&mut Graph<S>, usize, FMap) -> FMap,
    ) -> Vec<FMap> {
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (i, conv) in self.stages.iter().enumerate() {
            let y = conv.forward(g, ps, cur);
            let y = FMap { var: g.relu(y.var), ..y };
            let y = between(g, i, y);
            levels.push(y);
            cur = y;
        }
        levels
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: FMap) -> Vec<FMap> {
        self.forward_with(g, ps, x, |_, _, m| m)
    }
}

/// Layer normalisation with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar, R: Rng>(ps: &mut ParamSet<S>, name: &str, dim: usize, rng: &mut R) -> Self {
        LayerNorm {
            gain: ps.add(&format!("{name}.gain"), &[dim], Init::Ones, rng),
            bias: ps.add(&format!("{name}.bias"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: Var) -> Var {
        let n = g.layer_norm(x, S::from_f64_lossy(1e-5));
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        let init = Init::Normal((1.0 / dim as f64).sqrt());
        MultiHeadAttention {
            query: Linear::new(ps, &format!("{name}.q"), dim, dim, true, init, rng),
            key: Linear::new(ps, &format!("{name}.k"), dim, dim, true, init, rng),
            value: Linear::new(ps, &format!("{name}.v"), dim, dim, true, init, rng),
            output: Linear::new(ps, &format!("{name}.o"), dim, dim, true, init, rng),
            heads,
            dim,
        }
    }

    /// Attends `queries[nq, dim]` over `keys[nk, dim]` / `values[nk, dim]`.
    /// `mask[i * nk + j]` false forbids query `i` from seeing key `j`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        queries: Var,
        keys: Var,
        values: Var,
        mask: Option<Arc<[bool]>>,
    ) -> Var {
        let q = self.query.forward(g, ps, queries);
        let k = self.key.forward(g, ps, keys);
        let v = self.value.forward(g, ps, values);
        let dh = self.dim / self.heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, (h + 1) * dh),
                    g.slice_cols(k, h * dh, (h + 1) * dh),
                    g.slice_cols(v, h * dh, (h + 1) * dh),
                )
            };
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, mask.clone());
            g.record_attention(attn);
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.output.forward(g, ps, cat)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden, true, Init::He(dim), rng),
            down: Linear::new(
                ps,
                &format!("{name}.down"),
                hidden,
                dim,
                true,
                Init::Normal((1.0 / hidden as f64).sqrt()),
                rng,
            ),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: Var) -> Var {
        let h = self.up.forward(g, ps, x);
        let h = g.gelu(h);
        self.down.forward(g, ps, h)
    }
}

/// Pre-norm transformer encoder block: self-attention then feed-forward, both residual.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        EncoderBlock {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim, rng),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim, rng),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, 2 * dim, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: Var) -> Var {
        let n = self.norm1.forward(g, ps, x);
        let a = self.attn.forward(g, ps, n, n, n, None);
        let x = g.add(x, a);
        let n = self.norm2.forward(g, ps, x);
        let f = self.ffn.forward(g, ps, n);
        g.add(x, f)
    }
}
