//! Time-major layers. Activations are `[T, C]` matrices: one row per time
//! step, one column per channel. Every layer exposes a forward pass and a
//! backward pass that accumulates parameter gradients into a [`ParamSet`]
//! and returns the gradient with respect to its input.
//!
//! Convolutions are length preserving: an odd kernel `k` sees `k / 2` zero
//! samples past either end of the sequence.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{ParamBuilder, ParamId, ParamSet};
use super::Real;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LN_EPS: f64 = 1e-5;

/// Fully connected map applied independently at every time step.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: b.uniform(format!("{name}.weight"), vec![out_dim, in_dim], in_dim),
            bias: b.constant(format!("{name}.bias"), vec![out_dim], 0.0),
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward<F: Real>(&self, p: &ParamSet<F>, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&p.view2(self.weight).t());
        y += &p.view1(self.bias);
        y
    }

    /// Accumulates gradients; returns `dx` unless `need_input_grad` is false.
    pub fn backward<F: Real>(
        &self,
        p: &ParamSet<F>,
        g: &mut ParamSet<F>,
        x: ArrayView2<F>,
        dy: ArrayView2<F>,
        need_input_grad: bool,
    ) -> Option<Array2<F>> {
        general_mat_mul(
            F::one(),
            &dy.t(),
            &x,
            F::one(),
            &mut g.view2_mut(self.weight),
        );
        {
            let mut gb = g.view1_mut(self.bias);
            gb += &dy.sum_axis(Axis(0));
        }
        need_input_grad.then(|| dy.dot(&p.view2(self.weight)))
    }
}

/// Row ranges `(out_rows, in_rows)` touched by tap `j` of a centered kernel.
fn tap_ranges(t: usize, j: usize, pad: usize) -> Option<(usize, usize, usize)> {
    let shift = j as isize - pad as isize;
    let start = (-shift).max(0) as usize;
    let end = (t as isize - shift).min(t as isize);
    if end <= start as isize {
        return None;
    }
    let end = end as usize;
    Some((start, end, (start as isize + shift) as usize))
}

/// Dense temporal convolution, weight layout `[out, in, kernel]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
    ) -> Self {
        Self {
            weight: b.uniform(
                format!("{name}.weight"),
                vec![out_dim, in_dim, kernel],
                in_dim * kernel,
            ),
            bias: b.constant(format!("{name}.bias"), vec![out_dim], 0.0),
            in_dim,
            out_dim,
            kernel,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize, kernel: usize) -> usize {
        in_dim * out_dim * kernel + out_dim
    }

    pub fn forward<F: Real>(&self, p: &ParamSet<F>, x: ArrayView2<F>) -> Array2<F> {
        let t = x.nrows();
        let w = p.view3(self.weight);
        let mut y = Array2::zeros((t, self.out_dim));
        y += &p.view1(self.bias);
        let pad = self.kernel / 2;
        for j in 0..self.kernel {
            if let Some((o0, o1, i0)) = tap_ranges(t, j, pad) {
                let len = o1 - o0;
                let wj = w.slice(s![.., .., j]);
                general_mat_mul(
                    F::one(),
                    &x.slice(s![i0..i0 + len, ..]),
                    &wj.t(),
                    F::one(),
                    &mut y.slice_mut(s![o0..o1, ..]),
                );
            }
        }
        y
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamSet<F>,
        g: &mut ParamSet<F>,
        x: ArrayView2<F>,
        dy: ArrayView2<F>,
    ) -> Array2<F> {
        let t = x.nrows();
        let w = p.view3(self.weight);
        let mut dx = Array2::zeros(x.raw_dim());
        let pad = self.kernel / 2;
        {
            let mut gb = g.view1_mut(self.bias);
            gb += &dy.sum_axis(Axis(0));
        }
        for j in 0..self.kernel {
            if let Some((o0, o1, i0)) = tap_ranges(t, j, pad) {
                let len = o1 - o0;
                let dy_j = dy.slice(s![o0..o1, ..]);
                let x_j = x.slice(s![i0..i0 + len, ..]);
                {
                    let mut gw = g.view3_mut(self.weight);
                    let mut gwj = gw.slice_mut(s![.., .., j]);
                    general_mat_mul(F::one(), &dy_j.t(), &x_j, F::one(), &mut gwj);
                }
                general_mat_mul(
                    F::one(),
                    &dy_j,
                    &w.slice(s![.., .., j]),
                    F::one(),
                    &mut dx.slice_mut(s![i0..i0 + len, ..]),
                );
            }
        }
        dx
    }
}

/// Temporal convolution with one filter per channel (groups == channels).
/// Weight layout `[channels, 1, kernel]`.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, kernel: usize) -> Self {
        Self {
            weight: b.uniform(format!("{name}.weight"), vec![channels, 1, kernel], kernel),
            bias: b.constant(format!("{name}.bias"), vec![channels], 0.0),
            channels,
            kernel,
        }
    }

    pub fn param_count(channels: usize, kernel: usize) -> usize {
        channels * kernel + channels
    }

    /// Filter taps as `[kernel][channels]` so the inner loops run over
    /// contiguous channels.
    fn taps<F: Real>(&self, p: &ParamSet<F>) -> Array2<F> {
        let w = p.view3(self.weight);
        Array2::from_shape_fn((self.kernel, self.channels), |(j, c)| w[[c, 0, j]])
    }

    pub fn forward<F: Real>(&self, p: &ParamSet<F>, x: ArrayView2<F>) -> Array2<F> {
        let t = x.nrows();
        let taps = self.taps(p);
        let mut y = Array2::zeros((t, self.channels));
        y += &p.view1(self.bias);
        let pad = self.kernel / 2;
        let xs = x.as_standard_layout();
        for j in 0..self.kernel {
            let wj = taps.row(j);
            let wj = wj.as_slice().expect("contiguous taps");
            if let Some((o0, o1, i0)) = tap_ranges(t, j, pad) {
                for (k, to) in (o0..o1).enumerate() {
                    let xr = xs.row(i0 + k);
                    let xr = xr.as_slice().expect("contiguous row");
                    let mut yr = y.row_mut(to);
                    let yr = yr.as_slice_mut().expect("contiguous row");
                    for ((yv, &xv), &wv) in yr.iter_mut().zip(xr).zip(wj) {
                        *yv += wv * xv;
                    }
                }
            }
        }
        y
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamSet<F>,
        g: &mut ParamSet<F>,
        x: ArrayView2<F>,
        dy: ArrayView2<F>,
    ) -> Array2<F> {
        let t = x.nrows();
        let c = self.channels;
        let taps = self.taps(p);
        let mut dtaps = Array2::<F>::zeros((self.kernel, c));
        let mut dx = Array2::zeros((t, c));
        let pad = self.kernel / 2;
        let xs = x.as_standard_layout();
        let dys = dy.as_standard_layout();
        for j in 0..self.kernel {
            if let Some((o0, o1, i0)) = tap_ranges(t, j, pad) {
                let wj = taps.row(j).to_vec();
                let mut acc = vec![F::zero(); c];
                for (k, to) in (o0..o1).enumerate() {
                    let xr = xs.row(i0 + k);
                    let xr = xr.as_slice().expect("contiguous row");
                    let dyr = dys.row(to);
                    let dyr = dyr.as_slice().expect("contiguous row");
                    let mut dxr = dx.row_mut(i0 + k);
                    let dxr = dxr.as_slice_mut().expect("contiguous row");
                    for ch in 0..c {
                        acc[ch] += dyr[ch] * xr[ch];
                        dxr[ch] += wj[ch] * dyr[ch];
                    }
                }
                dtaps.row_mut(j).assign(&Array1::from(acc));
            }
        }
        {
            let mut gw = g.view3_mut(self.weight);
            for ch in 0..c {
                for j in 0..self.kernel {
                    gw[[ch, 0, j]] += dtaps[[j, ch]];
                }
            }
        }
        {
            let mut gb = g.view1_mut(self.bias);
            gb += &dy.sum_axis(Axis(0));
        }
        dx
    }
}

/// Layer normalization across channels at every time step.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    inv_std: Vec<F>,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Self {
            gamma: b.constant(format!("{name}.gamma"), vec![channels], 1.0),
            beta: b.constant(format!("{name}.beta"), vec![channels], 0.0),
            channels,
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<F: Real>(
        &self,
        p: &ParamSet<F>,
        x: ArrayView2<F>,
    ) -> (Array2<F>, LayerNormCache<F>) {
        let (t, c) = x.dim();
        let n = F::of(c as f64);
        let eps = F::of(LN_EPS);
        let gamma = p.view1(self.gamma);
        let beta = p.view1(self.beta);
        let mut xhat = x.as_standard_layout().into_owned();
        let mut y = Array2::zeros((t, c));
        let mut inv_std = Vec::with_capacity(t);
        for (mut xr, mut yr) in xhat.axis_iter_mut(Axis(0)).zip(y.axis_iter_mut(Axis(0))) {
            let row = xr.as_slice_mut().expect("contiguous row");
            let mean = super::real::sum(row) / n;
            for v in row.iter_mut() {
                *v -= mean;
            }
            let var = super::real::dot(row, row) / n;
            let inv = F::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v *= inv;
            }
            inv_std.push(inv);
            for ((o, &h), (&gm, &bt)) in yr
                .iter_mut()
                .zip(row.iter())
                .zip(gamma.iter().zip(beta.iter()))
            {
                *o = h * gm + bt;
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamSet<F>,
        g: &mut ParamSet<F>,
        cache: &LayerNormCache<F>,
        dy: ArrayView2<F>,
    ) -> Array2<F> {
        let (t, c) = dy.dim();
        let n = F::of(c as f64);
        let gamma = p.view1(self.gamma).to_vec();
        let mut dgamma = vec![F::zero(); c];
        let mut dx = Array2::zeros((t, c));
        let dys = dy.as_standard_layout();
        let mut dxhat = vec![F::zero(); c];
        for i in 0..t {
            let xr = cache.xhat.row(i);
            let xr = xr.as_slice().expect("contiguous row");
            let dyr = dys.row(i);
            let dyr = dyr.as_slice().expect("contiguous row");
            for ch in 0..c {
                dgamma[ch] += dyr[ch] * xr[ch];
                dxhat[ch] = dyr[ch] * gamma[ch];
            }
            let m1 = super::real::sum(&dxhat) / n;
            let m2 = super::real::dot(&dxhat, xr) / n;
            let inv = cache.inv_std[i];
            let mut dxr = dx.row_mut(i);
            for ch in 0..c {
                dxr[ch] = inv * (dxhat[ch] - m1 - xr[ch] * m2);
            }
        }
        for (gv, d) in g.view1_mut(self.gamma).iter_mut().zip(dgamma) {
            *gv += d;
        }
        {
            let mut gb = g.view1_mut(self.beta);
            gb += &dys.sum_axis(Axis(0));
        }
        dx
    }
}

pub fn leaky_relu<F: Real>(mut x: Array2<F>) -> Array2<F> {
    let slope = F::of(LEAKY_SLOPE);
    x.mapv_inplace(|v| if v > F::zero() { v } else { v * slope });
    x
}

/// Backward of [`leaky_relu`] given its output (the sign is preserved).
pub fn leaky_relu_backward<F: Real>(y: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
    let slope = F::of(LEAKY_SLOPE);
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(&y).for_each(|d, &v| {
        if v <= F::zero() {
            *d *= slope;
        }
    });
    dx
}

/// Concatenates `[T, C_i]` matrices along channels.
pub fn concat_channels<F: Real>(parts: &[ArrayView2<F>]) -> Array2<F> {
    ndarray::concatenate(Axis(1), parts).expect("equal time lengths")
}

/// Splits the channel axis at the given widths.
pub fn split_channels<'a, F: Real>(
    x: ArrayView2<'a, F>,
    widths: &[usize],
) -> Vec<ArrayView2<'a, F>> {
    let mut out = Vec::with_capacity(widths.len());
    let mut start = 0;
    for &w in widths {
        out.push(x.slice_move(s![.., start..start + w]));
        start += w;
    }
    debug_assert_eq!(start, x.ncols());
    out
}

/// LayerNorm followed by LeakyReLU, with the trailing zero padding supplied
/// by whichever convolution consumes the result.
#[derive(Debug, Clone)]
pub struct NormAct {
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct NormActCache<F> {
    norm: LayerNormCache<F>,
    pub out: Array2<F>,
}

impl NormAct {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Self {
            norm: LayerNorm::new(b, name, channels),
        }
    }

    pub fn forward<F: Real>(&self, p: &ParamSet<F>, x: ArrayView2<F>) -> NormActCache<F> {
        let (y, norm) = self.norm.forward(p, x);
        NormActCache {
            norm,
            out: leaky_relu(y),
        }
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamSet<F>,
        g: &mut ParamSet<F>,
        cache: &NormActCache<F>,
        dy: ArrayView2<F>,
    ) -> Array2<F> {
        let d = leaky_relu_backward(cache.out.view(), dy);
        self.norm.backward(p, g, &cache.norm, d.view())
    }
}
