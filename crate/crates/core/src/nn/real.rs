use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the network. Implemented for `f32`
/// (training and inference) and `f64` (gradient verification).
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Replaces every element with its exponential.
    fn exp_in_place(xs: &mut [Self]);

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Real for f32 {
    fn exp_in_place(xs: &mut [f32]) {
        for x in xs.iter_mut() {
            *x = fast_exp(*x);
        }
    }
}

impl Real for f64 {
    fn exp_in_place(xs: &mut [f64]) {
        for x in xs.iter_mut() {
            *x = x.exp();
        }
    }
}

/// Branch-free `exp` for `f32`, accurate to a couple of ulp over the clamped
/// range and simple enough for the compiler to vectorize.
#[inline(always)]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    // 1.5 * 2^23: adding and subtracting rounds to the nearest integer.
    const SHIFTER: f32 = 12_582_912.0;
    let x = if x < -87.0 { -87.0 } else { x };
    let x = if x > 88.0 { 88.0 } else { x };
    let shifted = x * LOG2E + SHIFTER;
    let n = shifted - SHIFTER;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    // the low mantissa bits of `shifted` hold n in two's complement
    let n_bits = shifted.to_bits().wrapping_sub(SHIFTER.to_bits());
    let scale = f32::from_bits(n_bits.wrapping_add(127) << 23);
    p * scale
}

/// Sum of a slice with eight interleaved accumulators (fixed order).
#[inline]
pub fn sum<F: Real>(x: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let chunks = x.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] += c[k];
        }
    }
    let mut total = F::zero();
    for a in acc {
        total += a;
    }
    for &v in rest {
        total += v;
    }
    total
}

/// Dot product with eight interleaved accumulators (fixed order).
#[inline]
pub fn dot<F: Real>(x: &[F], y: &[F]) -> F {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [F::zero(); 8];
    let cx = x.chunks_exact(8);
    let cy = y.chunks_exact(8);
    let (rx, ry) = (cx.remainder(), cy.remainder());
    for (a, b) in cx.zip(cy) {
        for k in 0..8 {
            acc[k] += a[k] * b[k];
        }
    }
    let mut total = F::zero();
    for a in acc {
        total += a;
    }
    for (&a, &b) in rx.iter().zip(ry) {
        total += a * b;
    }
    total
}

#[inline]
pub fn max<F: Real>(x: &[F]) -> F {
    let mut acc = [F::neg_infinity(); 8];
    let chunks = x.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] = if c[k] > acc[k] { c[k] } else { acc[k] };
        }
    }
    let mut m = F::neg_infinity();
    for a in acc.into_iter().chain(rest.iter().copied()) {
        if a > m {
            m = a;
        }
    }
    m
}

/// `y += a * x`
#[inline]
pub fn axpy<F: Real>(y: &mut [F], a: F, x: &[F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

const LANES: usize = 8;

#[inline(always)]
fn lanes<F: Copy>(x: &[F], j: usize) -> &[F; LANES] {
    x[j..j + LANES].try_into().expect("lane width")
}

/// `out[j] = sum_c coef[c] * mat[c * stride + j]` for `j < out.len()`.
pub fn combine_rows<F: Real>(out: &mut [F], coef: &[F], mat: &[F], stride: usize) {
    let n = out.len();
    out.iter_mut().for_each(|v| *v = F::zero());
    for (c, &a) in coef.iter().enumerate() {
        axpy(out, a, &mat[c * stride..c * stride + n]);
    }
}

/// `out[c] = dot(x, mat[c * stride..][..x.len()])` for every `c < out.len()`.
pub fn dot_rows<F: Real>(out: &mut [F], x: &[F], mat: &[F], stride: usize) {
    let n = x.len();
    let full = n - n % LANES;
    for c0 in (0..out.len()).step_by(4) {
        let group = (out.len() - c0).min(4);
        let zero = [F::zero(); 0];
        let mut rows: [&[F]; 4] = [&zero; 4];
        for (g, row) in rows.iter_mut().enumerate().take(group) {
            *row = &mat[(c0 + g) * stride..(c0 + g) * stride + n];
        }
        let mut acc = [[F::zero(); LANES]; 4];
        if group == 4 {
            for j in (0..full).step_by(LANES) {
                let xs = lanes(x, j);
                for g in 0..4 {
                    let r = lanes(rows[g], j);
                    for l in 0..LANES {
                        acc[g][l] += xs[l] * r[l];
                    }
                }
            }
        } else {
            for j in (0..full).step_by(LANES) {
                let xs = lanes(x, j);
                for g in 0..group {
                    let r = lanes(rows[g], j);
                    for l in 0..LANES {
                        acc[g][l] += xs[l] * r[l];
                    }
                }
            }
        }
        for g in 0..group {
            let mut total = F::zero();
            for a in acc[g] {
                total += a;
            }
            for j in full..n {
                total += x[j] * rows[g][j];
            }
            out[c0 + g] = total;
        }
    }
}

/// `mat[c * stride + j] += sum_r coef[r][c] * xs[r][j]`: a rank-`R` update of
/// the rows of `mat`, reading and writing each row once.
pub fn update_rows<F: Real>(mat: &mut [F], stride: usize, coef: &[&[F]], xs: &[&[F]]) {
    debug_assert_eq!(coef.len(), xs.len());
    let n = xs.first().map_or(0, |x| x.len());
    let rows = coef.first().map_or(0, |c| c.len());
    let full = n - n % LANES;
    let mut a = vec![F::zero(); coef.len()];
    for c in 0..rows {
        for (a, k) in a.iter_mut().zip(coef) {
            *a = k[c];
        }
        let row = &mut mat[c * stride..c * stride + n];
        for j in (0..full).step_by(LANES) {
            let dst: &mut [F; LANES] = (&mut row[j..j + LANES]).try_into().expect("lane width");
            let mut acc = *dst;
            for (&a, x) in a.iter().zip(xs) {
                let x = lanes(x, j);
                for l in 0..LANES {
                    acc[l] += a * x[l];
                }
            }
            *dst = acc;
        }
        for j in full..n {
            for (&a, x) in a.iter().zip(xs) {
                row[j] += a * x[j];
            }
        }
    }
}
