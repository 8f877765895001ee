//! Scaled dot-product self-attention over time steps.
//!
//! The full `T x T` score matrix is never materialized: the forward pass
//! streams one query row at a time and keeps only the row log-sum-exp, and
//! the backward pass recomputes each probability row from it. Memory stays
//! linear in `T`, which matters for 7500-step windows.

use ndarray::{Array2, ArrayView2};

use super::layers::Linear;
use super::params::{ParamBuilder, ParamSet};
use super::real::{self, Real};

/// Query rows whose key/value gradient updates are applied together.
const ROW_GROUP: usize = 4;

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    q: Array2<F>,
    kt: Array2<F>,
    vt: Array2<F>,
    out: Array2<F>,
    lse: Array2<F>,
}

impl SelfAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            query: Linear::new(b, &format!("{name}.query"), dim, dim),
            key: Linear::new(b, &format!("{name}.key"), dim, dim),
            value: Linear::new(b, &format!("{name}.value"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        3 * Linear::param_count(dim, dim)
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward<F: Real>(
        &self,
        p: &ParamSet<F>,
        x: ArrayView2<F>,
    ) -> (Array2<F>, AttentionCache<F>) {
        let t = x.nrows();
        let q = self.query.forward(p, x);
        let kt = self
            .key
            .forward(p, x)
            .reversed_axes()
            .as_standard_layout()
            .into_owned();
        let vt = self
            .value
            .forward(p, x)
            .reversed_axes()
            .as_standard_layout()
            .into_owned();
        let hd = self.head_dim();
        let scale = F::one() / F::of(hd as f64).sqrt();
        let kt_flat = kt.as_slice().expect("standard layout");
        let vt_flat = vt.as_slice().expect("standard layout");
        let mut out = Array2::<F>::zeros((t, self.dim));
        let mut lse = Array2::<F>::zeros((t, self.heads));
        let mut scores = vec![F::zero(); t];
        let mut coef = vec![F::zero(); hd];
        let mut acc = vec![F::zero(); hd];
        for h in 0..self.heads {
            let c0 = h * hd;
            for i in 0..t {
                for (k, a) in coef.iter_mut().enumerate() {
                    *a = scale * q[[i, c0 + k]];
                }
                real::combine_rows(&mut scores, &coef, &kt_flat[c0 * t..], t);
                let m = real::max(&scores);
                for v in scores.iter_mut() {
                    *v -= m;
                }
                F::exp_in_place(&mut scores);
                let l = real::sum(&scores);
                real::dot_rows(&mut acc, &scores, &vt_flat[c0 * t..], t);
                for (k, &a) in acc.iter().enumerate() {
                    out[[i, c0 + k]] = a / l;
                }
                lse[[i, h]] = m + l.ln();
            }
        }
        let cache = AttentionCache {
            q,
            kt,
            vt,
            out: out.clone(),
            lse,
        };
        (out, cache)
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamSet<F>,
        g: &mut ParamSet<F>,
        x: ArrayView2<F>,
        cache: &AttentionCache<F>,
        dout: ArrayView2<F>,
    ) -> Array2<F> {
        let t = x.nrows();
        let hd = self.head_dim();
        let scale = F::one() / F::of(hd as f64).sqrt();
        let kt = cache.kt.as_slice().expect("standard layout");
        let vt = cache.vt.as_slice().expect("standard layout");
        let mut dq = Array2::<F>::zeros((t, self.dim));
        let mut dkt = vec![F::zero(); self.dim * t];
        let mut dvt = vec![F::zero(); self.dim * t];
        let mut prob = vec![vec![F::zero(); t]; ROW_GROUP];
        let mut dscore = vec![vec![F::zero(); t]; ROW_GROUP];
        let mut q_coef = vec![vec![F::zero(); hd]; ROW_GROUP];
        let mut go_coef = vec![vec![F::zero(); hd]; ROW_GROUP];
        let mut dq_row = vec![F::zero(); hd];
        for h in 0..self.heads {
            let c0 = h * hd;
            for r0 in (0..t).step_by(ROW_GROUP) {
                let n = (t - r0).min(ROW_GROUP);
                for r in 0..n {
                    let i = r0 + r;
                    let mut delta = F::zero();
                    for k in 0..hd {
                        q_coef[r][k] = scale * cache.q[[i, c0 + k]];
                        go_coef[r][k] = dout[[i, c0 + k]];
                        delta += dout[[i, c0 + k]] * cache.out[[i, c0 + k]];
                    }
                    let pr = &mut prob[r];
                    real::combine_rows(pr, &q_coef[r], &kt[c0 * t..], t);
                    let shift = cache.lse[[i, h]];
                    for v in pr.iter_mut() {
                        *v -= shift;
                    }
                    F::exp_in_place(pr);
                    // score gradient: p * (dp - delta) with dp = dout . v
                    let ds = &mut dscore[r];
                    real::combine_rows(ds, &go_coef[r], &vt[c0 * t..], t);
                    for (d, &pv) in ds.iter_mut().zip(pr.iter()) {
                        *d = pv * (*d - delta);
                    }
                    real::dot_rows(&mut dq_row, ds, &kt[c0 * t..], t);
                    for (k, &v) in dq_row.iter().enumerate() {
                        dq[[i, c0 + k]] = scale * v;
                    }
                }
                let go: Vec<&[F]> = go_coef[..n].iter().map(|v| v.as_slice()).collect();
                let pr: Vec<&[F]> = prob[..n].iter().map(|v| v.as_slice()).collect();
                real::update_rows(&mut dvt[c0 * t..(c0 + hd) * t], t, &go, &pr);
                // dk = scale * ds^T q, and q_coef already carries the scale
                let qc: Vec<&[F]> = q_coef[..n].iter().map(|v| v.as_slice()).collect();
                let ds: Vec<&[F]> = dscore[..n].iter().map(|v| v.as_slice()).collect();
                real::update_rows(&mut dkt[c0 * t..(c0 + hd) * t], t, &qc, &ds);
            }
        }
        let dk = Array2::from_shape_vec((self.dim, t), dkt)
            .expect("shape")
            .reversed_axes();
        let dv = Array2::from_shape_vec((self.dim, t), dvt)
            .expect("shape")
            .reversed_axes();
        let mut dx = self
            .query
            .backward(p, g, x, dq.view(), true)
            .expect("input grad");
        dx += &self
            .key
            .backward(p, g, x, dk.view(), true)
            .expect("input grad");
        dx += &self
            .value
            .backward(p, g, x, dv.view(), true)
            .expect("input grad");
        dx
    }
}
