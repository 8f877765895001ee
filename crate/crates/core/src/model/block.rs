//! One hierarchical block: CNN stack, per-step linear layer, output context
//! layer and self-attention.
//!
//! CNN stack wiring, for a stack input `x0` with `c_in` channels:
//!
//! ```text
//! layer 1..4:  s = LLP(Sconv(x))            c -> width (pointwise)
//!              x = LLP(Tconv([x0, s]))      c_in + width, depthwise
//! layer 5:     x = LLP(Conv(x))             c_in + width -> width
//! ```
//!
//! where `LLP` is layer norm then LeakyReLU (the zero padding belongs to the
//! next convolution). The "initial input" each Sconv output is joined with is
//! the stack input `x0`; see [`sconv_skip_source`].

use ndarray::{Array2, ArrayView2};

use crate::nn::attention::{AttentionCache, SelfAttention};
use crate::nn::layers::{
    concat_channels, leaky_relu, leaky_relu_backward, split_channels, Conv1d, DepthwiseConv1d,
    LayerNorm, LayerNormCache, Linear, NormAct, NormActCache,
};
use crate::nn::{ParamBuilder, ParamSet, Real};

use super::ModelConfig;

/// Number of separable (Sconv + Tconv) layers ahead of the plain convolution.
pub const SEPARABLE_LAYERS: usize = 4;

#[derive(Debug, Clone)]
struct SeparableLayer {
    sconv: Conv1d,
    s_act: NormAct,
    tconv: DepthwiseConv1d,
    t_act: NormAct,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub in_channels: usize,
    pub width: usize,
    separable: Vec<SeparableLayer>,
    conv: Conv1d,
    conv_act: NormAct,
    linear: Linear,
    context_conv: Conv1d,
    context_norm: LayerNorm,
    attention: SelfAttention,
}

struct SeparableCache<F> {
    input: Array2<F>,
    s: NormActCache<F>,
    joined: Array2<F>,
    t: NormActCache<F>,
}

pub struct BlockCache<F> {
    stack_input: Array2<F>,
    layers: Vec<SeparableCache<F>>,
    conv_input: Array2<F>,
    conv: NormActCache<F>,
    context_input: Array2<F>,
    context_act: Array2<F>,
    context_norm: LayerNormCache<F>,
    context: Array2<F>,
    attention: AttentionCache<F>,
}

/// Tensor whose channels are joined with each Sconv output before the Tconv:
/// the CNN stack input.
fn sconv_skip_source<'a, F: Real>(stack_input: ArrayView2<'a, F>) -> ArrayView2<'a, F> {
    stack_input
}

impl Block {
    pub fn new(b: &mut ParamBuilder, name: &str, in_channels: usize, cfg: &ModelConfig) -> Self {
        let w = cfg.block_width;
        let joined = in_channels + w;
        let separable = (0..SEPARABLE_LAYERS)
            .map(|l| {
                let src = if l == 0 { in_channels } else { joined };
                let n = format!("{name}.stack.{l}");
                SeparableLayer {
                    sconv: Conv1d::new(b, &format!("{n}.sconv"), src, w, 1),
                    s_act: NormAct::new(b, &format!("{n}.sconv_norm"), w),
                    tconv: DepthwiseConv1d::new(b, &format!("{n}.tconv"), joined, cfg.tconv_kernel),
                    t_act: NormAct::new(b, &format!("{n}.tconv_norm"), joined),
                }
            })
            .collect();
        let n = format!("{name}.stack.{SEPARABLE_LAYERS}");
        Self {
            in_channels,
            width: w,
            separable,
            conv: Conv1d::new(b, &format!("{n}.conv"), joined, w, cfg.tconv_kernel),
            conv_act: NormAct::new(b, &format!("{n}.conv_norm"), w),
            linear: Linear::new(b, &format!("{name}.linear"), w, w),
            context_conv: Conv1d::new(b, &format!("{name}.context.conv"), w, w, cfg.context_kernel),
            context_norm: LayerNorm::new(b, &format!("{name}.context.norm"), w),
            attention: SelfAttention::new(b, &format!("{name}.attention"), w, cfg.attn_heads),
        }
    }

    /// Closed-form parameter count of a block.
    pub fn param_count(in_channels: usize, cfg: &ModelConfig) -> usize {
        let w = cfg.block_width;
        let joined = in_channels + w;
        let mut n = 0;
        for l in 0..SEPARABLE_LAYERS {
            let src = if l == 0 { in_channels } else { joined };
            n += Conv1d::param_count(src, w, 1)
                + LayerNorm::param_count(w)
                + DepthwiseConv1d::param_count(joined, cfg.tconv_kernel)
                + LayerNorm::param_count(joined);
        }
        n + Conv1d::param_count(joined, w, cfg.tconv_kernel)
            + LayerNorm::param_count(w)
            + Linear::param_count(w, w)
            + Conv1d::param_count(w, w, cfg.context_kernel)
            + LayerNorm::param_count(w)
            + SelfAttention::param_count(w)
    }

    /// Channel count of each Tconv (depthwise) layer.
    pub fn tconv_channels(&self) -> usize {
        self.in_channels + self.width
    }

    pub fn tconv_params(&self) -> Vec<(usize, usize)> {
        self.separable
            .iter()
            .map(|l| (l.tconv.channels, l.tconv.kernel))
            .collect()
    }

    /// Returns `(context, attention)` and the cache for the backward pass.
    pub fn forward<F: Real>(
        &self,
        p: &ParamSet<F>,
        input: Array2<F>,
    ) -> ((Array2<F>, Array2<F>), BlockCache<F>) {
        assert_eq!(input.ncols(), self.in_channels, "block input channels");
        let mut x = input.clone();
        let mut layers = Vec::with_capacity(SEPARABLE_LAYERS);
        for layer in &self.separable {
            let s = layer
                .s_act
                .forward(p, layer.sconv.forward(p, x.view()).view());
            let joined = concat_channels(&[sconv_skip_source(input.view()), s.out.view()]);
            let t = layer
                .t_act
                .forward(p, layer.tconv.forward(p, joined.view()).view());
            let next = t.out.clone();
            layers.push(SeparableCache {
                input: x,
                s,
                joined,
                t,
            });
            x = next;
        }
        let conv = self
            .conv_act
            .forward(p, self.conv.forward(p, x.view()).view());
        let lin = self.linear.forward(p, conv.out.view());
        let context_act = leaky_relu(self.context_conv.forward(p, lin.view()));
        let (context, context_norm) = self.context_norm.forward(p, context_act.view());
        let (attn, attention) = self.attention.forward(p, context.view());
        let cache = BlockCache {
            stack_input: input,
            layers,
            conv_input: x,
            conv,
            context_input: lin,
            context_act,
            context_norm,
            context: context.clone(),
            attention,
        };
        ((context, attn), cache)
    }

    /// Backward pass; returns the gradient with respect to the block input.
    pub fn backward<F: Real>(
        &self,
        p: &ParamSet<F>,
        g: &mut ParamSet<F>,
        cache: &BlockCache<F>,
        d_context: ArrayView2<F>,
        d_attn: ArrayView2<F>,
    ) -> Array2<F> {
        let mut d_ctx =
            self.attention
                .backward(p, g, cache.context.view(), &cache.attention, d_attn);
        d_ctx += &d_context;
        let d_act = self
            .context_norm
            .backward(p, g, &cache.context_norm, d_ctx.view());
        let d_conv_out = leaky_relu_backward(cache.context_act.view(), d_act.view());
        let d_lin = self
            .context_conv
            .backward(p, g, cache.context_input.view(), d_conv_out.view());
        let d_conv_act = self
            .linear
            .backward(p, g, cache.conv.out.view(), d_lin.view(), true)
            .expect("input grad");
        let d_conv = self.conv_act.backward(p, g, &cache.conv, d_conv_act.view());
        let mut dx = self
            .conv
            .backward(p, g, cache.conv_input.view(), d_conv.view());

        let mut d_stack_input = Array2::<F>::zeros(cache.stack_input.raw_dim());
        for (layer, lc) in self.separable.iter().zip(&cache.layers).rev() {
            let d_t = layer.t_act.backward(p, g, &lc.t, dx.view());
            let d_joined = layer.tconv.backward(p, g, lc.joined.view(), d_t.view());
            let parts = split_channels(d_joined.view(), &[self.in_channels, self.width]);
            d_stack_input += &parts[0];
            let d_s = layer.s_act.backward(p, g, &lc.s, parts[1]);
            dx = layer.sconv.backward(p, g, lc.input.view(), d_s.view());
        }
        // the first layer's input is the stack input itself
        d_stack_input += &dx;
        d_stack_input
    }
}
