//! The SHINE network.
//!
//! ```text
//! meg [T, C] -> Linear(C, proj_hidden) -> LeakyReLU -> Linear(., d_init) = init
//! block 1 input: init
//! block i input: [init, context_{i-1}, attention_{i-1}]
//! head input:    [init, context_n, attention_n]
//!   -> Conv(kernel 3) -> LeakyReLU -> BiLSTM -> Linear(2 * lstm_hidden, K)
//! ```
//!
//! The output head has no activation: the training objective is invariant to
//! the scale and offset of each output row.

pub mod block;
pub mod checkpoint;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    concat_channels, leaky_relu, leaky_relu_backward, split_channels, Conv1d, Linear,
};
use crate::nn::lstm::{reverse_time, Lstm, LstmCache};
use crate::nn::{ParamBuilder, ParamSet, Real};
use crate::signal::{neg_pearson_loss_grad, DegenerateRowPolicy, LossOutput};

pub use block::{Block, BlockCache};

/// Fixed depth of the CNN stack inside every block.
pub const CNN_STACK_LAYERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Width between the two initial linear layers.
    pub proj_hidden: usize,
    pub d_init: usize,
    pub n_blocks: usize,
    pub block_width: usize,
    pub cnn_stack_layers: usize,
    pub tconv_kernel: usize,
    pub context_kernel: usize,
    pub head_kernel: usize,
    pub attn_heads: usize,
    pub lstm_hidden: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 306,
            proj_hidden: 128,
            d_init: 64,
            n_blocks: 6,
            block_width: 64,
            cnn_stack_layers: CNN_STACK_LAYERS,
            tconv_kernel: 3,
            context_kernel: 9,
            head_kernel: 3,
            attn_heads: 1,
            lstm_hidden: 64,
            out_channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("proj_hidden", self.proj_hidden),
            ("d_init", self.d_init),
            ("n_blocks", self.n_blocks),
            ("block_width", self.block_width),
            ("tconv_kernel", self.tconv_kernel),
            ("context_kernel", self.context_kernel),
            ("head_kernel", self.head_kernel),
            ("attn_heads", self.attn_heads),
            ("lstm_hidden", self.lstm_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.cnn_stack_layers != CNN_STACK_LAYERS {
            return Err(Error::InvalidConfig(format!(
                "cnn_stack_layers must be {CNN_STACK_LAYERS}, got {}",
                self.cnn_stack_layers
            )));
        }
        if !matches!(self.out_channels, 1 | 12) {
            return Err(Error::InvalidConfig(format!(
                "out_channels must be 1 or 12, got {}",
                self.out_channels
            )));
        }
        for (name, k) in [
            ("tconv_kernel", self.tconv_kernel),
            ("context_kernel", self.context_kernel),
            ("head_kernel", self.head_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be odd, got {k}")));
            }
        }
        if self.block_width % self.attn_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "block_width {} is not divisible by attn_heads {}",
                self.block_width, self.attn_heads
            )));
        }
        Ok(())
    }

    /// Input channels of block `index` (0-based).
    pub fn block_input_channels(&self, index: usize) -> usize {
        if index == 0 {
            self.d_init
        } else {
            self.d_init + 2 * self.block_width
        }
    }

    pub fn min_sequence_len(&self) -> usize {
        self.context_kernel
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let blocks: usize = (0..self.n_blocks)
            .map(|i| Block::param_count(self.block_input_channels(i), self))
            .sum();
        Linear::param_count(self.in_channels, self.proj_hidden)
            + Linear::param_count(self.proj_hidden, self.d_init)
            + blocks
            + Conv1d::param_count(
                self.d_init + 2 * self.block_width,
                self.block_width,
                self.head_kernel,
            )
            + 2 * Lstm::param_count(self.block_width, self.lstm_hidden)
            + Linear::param_count(2 * self.lstm_hidden, self.out_channels)
    }
}

/// Layer layout; owns parameter indices but no values.
#[derive(Debug, Clone)]
struct Layout {
    proj_in: Linear,
    proj_out: Linear,
    blocks: Vec<Block>,
    head_conv: Conv1d,
    lstm_fwd: Lstm,
    lstm_bwd: Lstm,
    output: Linear,
}

#[derive(Debug, Clone)]
pub struct ShineModel {
    config: ModelConfig,
    layout: Layout,
    params: ParamSet<f32>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache<F> {
    input: Array2<F>,
    proj_hidden: Array2<F>,
    init: Array2<F>,
    block_inputs_shape: Vec<usize>,
    blocks: Vec<BlockCache<F>>,
    head_input: Array2<F>,
    head_act: Array2<F>,
    lstm_fwd: LstmCache<F>,
    lstm_bwd_input: Array2<F>,
    lstm_bwd: LstmCache<F>,
    lstm_out: Array2<F>,
}

/// Loss and parameter gradients for one window.
pub struct WindowGrad<F> {
    pub loss: LossOutput,
    pub grads: ParamSet<F>,
    /// Prediction `[T, K]`.
    pub output: Array2<F>,
}

impl ShineModel {
    /// Builds a model with parameters drawn from `cfg.seed`.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(ChaCha8Rng::seed_from_u64(cfg.seed));
        let layout = Layout::new(&mut b, &cfg);
        let params = b.finish();
        debug_assert_eq!(params.numel(), cfg.param_count());
        Ok(Self {
            config: cfg,
            layout,
            params,
        })
    }

    /// Rebuilds a model from a config and matching parameter tensors.
    pub fn from_parts(cfg: ModelConfig, params: ParamSet<f32>) -> Result<Self> {
        let mut model = Self::init(cfg)?;
        if model.params.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (a, b) in model.params.tensors().iter().zip(params.tensors()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::InvalidConfig(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.layout.blocks
    }

    /// Name of the final linear layer's weight tensor.
    pub fn output_weight_name(&self) -> &str {
        &self.params.get(self.layout.output.weight).name
    }

    fn check_input(&self, channels: usize, t: usize) -> Result<()> {
        if channels != self.config.in_channels {
            return Err(Error::shape(&[self.config.in_channels, t], &[channels, t]));
        }
        if t < self.config.min_sequence_len() {
            return Err(Error::SequenceTooShort {
                len: t,
                min: self.config.min_sequence_len(),
            });
        }
        Ok(())
    }

    /// Maps MEG `[C, T]` to the output sequence `[K, T]`.
    pub fn forward(&self, meg: ArrayView2<f32>) -> Result<Array2<f32>> {
        let (c, t) = meg.dim();
        self.check_input(c, t)?;
        let x = meg.t().as_standard_layout().into_owned();
        let (out, _) = self.layout.forward(&self.params, x);
        Ok(out.reversed_axes().as_standard_layout().into_owned())
    }

    /// Forward pass on a time-major `[T, C]` input with explicit parameters.
    pub fn forward_time_major<F: Real>(
        &self,
        params: &ParamSet<F>,
        x: Array2<F>,
    ) -> Result<(Array2<F>, ForwardCache<F>)> {
        self.check_input(x.ncols(), x.nrows())?;
        Ok(self.layout.forward(params, x))
    }

    /// Negative-Pearson loss of one window and its parameter gradients.
    ///
    /// `meg` is `[C, T]`, `target` is `[K, T]`.
    pub fn loss_and_grad<F: Real>(
        &self,
        params: &ParamSet<F>,
        meg: ArrayView2<f32>,
        target: ArrayView2<f32>,
        policy: DegenerateRowPolicy,
    ) -> Result<WindowGrad<F>> {
        let (c, t) = meg.dim();
        self.check_input(c, t)?;
        if target.dim() != (self.config.out_channels, t) {
            return Err(Error::shape(&[self.config.out_channels, t], target.shape()));
        }
        let x = Array2::from_shape_fn((t, c), |(i, j)| F::of(meg[[j, i]] as f64));
        let (out, cache) = self.layout.forward(params, x);
        let pred = out.t().mapv(|v| v.to_f64().unwrap_or(f64::NAN));
        let target64 = target.mapv(|v| v as f64);
        let loss = neg_pearson_loss_grad(pred.view(), target64.view(), policy)?;
        let mut grads = params.zeros_like();
        if loss.rows_used > 0 {
            let dout = loss.grad.t().mapv(F::of);
            self.layout
                .backward(params, &mut grads, &cache, dout.view());
        }
        Ok(WindowGrad {
            loss,
            grads,
            output: out,
        })
    }

    /// Runs block `index` alone. `carry` is the previous block's
    /// `(context, attention)` pair and must be `None` for the first block.
    /// All matrices are `[channels, T]`.
    pub fn block_forward<'a>(
        &self,
        index: usize,
        initial_features: ArrayView2<'a, f32>,
        carry: Option<(ArrayView2<'a, f32>, ArrayView2<'a, f32>)>,
    ) -> Result<(Array2<f32>, Array2<f32>)> {
        let block = self
            .layout
            .blocks
            .get(index)
            .ok_or_else(|| Error::InvalidConfig(format!("no block {index}")))?;
        let t = initial_features.ncols();
        if initial_features.nrows() != self.config.d_init {
            return Err(Error::shape(
                &[self.config.d_init, t],
                initial_features.shape(),
            ));
        }
        let input = match (index, carry) {
            (0, None) => initial_features.t().to_owned(),
            (i, Some((ctx, attn))) if i > 0 => {
                let w = self.config.block_width;
                for m in [ctx, attn] {
                    if m.dim() != (w, t) {
                        return Err(Error::shape(&[w, t], m.shape()));
                    }
                }
                concat_channels(&[initial_features.t(), ctx.t(), attn.t()])
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "only blocks after the first take a carry".into(),
                ))
            }
        };
        let input = input.as_standard_layout().into_owned();
        let ((ctx, attn), _) = block.forward(&self.params, input);
        Ok((
            ctx.reversed_axes().as_standard_layout().into_owned(),
            attn.reversed_axes().as_standard_layout().into_owned(),
        ))
    }
}

impl Layout {
    fn new(b: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let proj_in = Linear::new(b, "proj.0", cfg.in_channels, cfg.proj_hidden);
        let proj_out = Linear::new(b, "proj.1", cfg.proj_hidden, cfg.d_init);
        let blocks = (0..cfg.n_blocks)
            .map(|i| Block::new(b, &format!("blocks.{i}"), cfg.block_input_channels(i), cfg))
            .collect();
        let head_in = cfg.d_init + 2 * cfg.block_width;
        Self {
            proj_in,
            proj_out,
            blocks,
            head_conv: Conv1d::new(b, "head.conv", head_in, cfg.block_width, cfg.head_kernel),
            lstm_fwd: Lstm::new(b, "head.lstm.forward", cfg.block_width, cfg.lstm_hidden),
            lstm_bwd: Lstm::new(b, "head.lstm.backward", cfg.block_width, cfg.lstm_hidden),
            output: Linear::new(b, "head.output", 2 * cfg.lstm_hidden, cfg.out_channels),
        }
    }

    fn forward<F: Real>(&self, p: &ParamSet<F>, x: Array2<F>) -> (Array2<F>, ForwardCache<F>) {
        let proj_hidden = leaky_relu(self.proj_in.forward(p, x.view()));
        let init = self.proj_out.forward(p, proj_hidden.view());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut shapes = Vec::with_capacity(self.blocks.len());
        let mut carry: Option<(Array2<F>, Array2<F>)> = None;
        for block in &self.blocks {
            let input = match carry.take() {
                None => init.clone(),
                Some((ctx, attn)) => concat_channels(&[init.view(), ctx.view(), attn.view()]),
            };
            shapes.push(input.ncols());
            let (out, cache) = block.forward(p, input);
            blocks.push(cache);
            carry = Some(out);
        }
        let (ctx, attn) = carry.expect("at least one block");
        let head_input = concat_channels(&[init.view(), ctx.view(), attn.view()]);
        let head_act = leaky_relu(self.head_conv.forward(p, head_input.view()));
        let lstm_fwd = self.lstm_fwd.forward(p, head_act.view());
        let lstm_bwd_input = reverse_time(head_act.view());
        let lstm_bwd = self.lstm_bwd.forward(p, lstm_bwd_input.view());
        let backward_hidden = reverse_time(lstm_bwd.hidden.view());
        let lstm_out = concat_channels(&[lstm_fwd.hidden.view(), backward_hidden.view()]);
        let out = self.output.forward(p, lstm_out.view());
        let cache = ForwardCache {
            input: x,
            proj_hidden,
            init,
            block_inputs_shape: shapes,
            blocks,
            head_input,
            head_act,
            lstm_fwd,
            lstm_bwd_input,
            lstm_bwd,
            lstm_out,
        };
        (out, cache)
    }

    fn backward<F: Real>(
        &self,
        p: &ParamSet<F>,
        g: &mut ParamSet<F>,
        cache: &ForwardCache<F>,
        dout: ArrayView2<F>,
    ) {
        let h = self.lstm_fwd.hidden;
        let d_lstm = self
            .output
            .backward(p, g, cache.lstm_out.view(), dout, true)
            .expect("input grad");
        let parts = split_channels(d_lstm.view(), &[h, h]);
        let mut d_head_act =
            self.lstm_fwd
                .backward(p, g, cache.head_act.view(), &cache.lstm_fwd, parts[0]);
        let d_bwd_hidden = reverse_time(parts[1]);
        let d_rev = self.lstm_bwd.backward(
            p,
            g,
            cache.lstm_bwd_input.view(),
            &cache.lstm_bwd,
            d_bwd_hidden.view(),
        );
        d_head_act += &reverse_time(d_rev.view());
        let d_head_pre = leaky_relu_backward(cache.head_act.view(), d_head_act.view());
        let d_head_in = self
            .head_conv
            .backward(p, g, cache.head_input.view(), d_head_pre.view());

        let d_init_w = cache.init.ncols();
        let w = self.blocks[0].width;
        let parts = split_channels(d_head_in.view(), &[d_init_w, w, w]);
        let mut d_init = parts[0].to_owned();
        let mut d_ctx = parts[1].to_owned();
        let mut d_attn = parts[2].to_owned();
        for (i, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let d_input = block.backward(p, g, bc, d_ctx.view(), d_attn.view());
            if i == 0 {
                d_init += &d_input;
            } else {
                debug_assert_eq!(d_input.ncols(), cache.block_inputs_shape[i]);
                let parts = split_channels(d_input.view(), &[d_init_w, w, w]);
                d_init += &parts[0];
                d_ctx = parts[1].to_owned();
                d_attn = parts[2].to_owned();
            }
        }
        let d_hidden = self
            .proj_out
            .backward(p, g, cache.proj_hidden.view(), d_init.view(), true)
            .expect("input grad");
        let d_hidden = leaky_relu_backward(cache.proj_hidden.view(), d_hidden.view());
        self.proj_in
            .backward(p, g, cache.input.view(), d_hidden.view(), false);
    }
}
