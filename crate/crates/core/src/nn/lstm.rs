//! Single-direction LSTM with gate order (input, forget, cell, output) and a
//! single bias vector. Bidirectional use runs a second instance over the
//! time-reversed sequence.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::layers::Linear;
use super::params::{ParamBuilder, ParamId, ParamSet};
use super::real::{self, Real};

#[derive(Debug, Clone)]
pub struct Lstm {
    pub input: Linear,
    pub recurrent: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmCache<F> {
    /// Activated gates per step, `[T, 4H]`.
    gates: Array2<F>,
    cell: Array2<F>,
    cell_tanh: Array2<F>,
    pub hidden: Array2<F>,
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl Lstm {
    pub fn new(b: &mut ParamBuilder, name: &str, in_dim: usize, hidden: usize) -> Self {
        Self {
            input: Linear::new(b, &format!("{name}.input"), in_dim, 4 * hidden),
            recurrent: b.uniform(
                format!("{name}.recurrent"),
                vec![4 * hidden, hidden],
                hidden,
            ),
            in_dim,
            hidden,
        }
    }

    pub fn param_count(in_dim: usize, hidden: usize) -> usize {
        Linear::param_count(in_dim, 4 * hidden) + 4 * hidden * hidden
    }

    pub fn forward<F: Real>(&self, p: &ParamSet<F>, x: ArrayView2<F>) -> LstmCache<F> {
        let t = x.nrows();
        let h = self.hidden;
        let mut gates = self.input.forward(p, x);
        let w_hh = p.view2(self.recurrent);
        let mut cell = Array2::<F>::zeros((t, h));
        let mut cell_tanh = Array2::<F>::zeros((t, h));
        let mut hidden = Array2::<F>::zeros((t, h));
        let mut h_prev = vec![F::zero(); h];
        let mut c_prev = vec![F::zero(); h];
        for step in 0..t {
            let mut z = gates.row_mut(step);
            for r in 0..4 * h {
                let wr = w_hh.row(r);
                z[r] += real::dot(wr.as_slice().expect("contiguous"), &h_prev);
            }
            for k in 0..h {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h + k]);
                let gc = z[2 * h + k].tanh();
                let o = sigmoid(z[3 * h + k]);
                z[k] = i;
                z[h + k] = f;
                z[2 * h + k] = gc;
                z[3 * h + k] = o;
                let c = f * c_prev[k] + i * gc;
                let tc = c.tanh();
                cell[[step, k]] = c;
                cell_tanh[[step, k]] = tc;
                let hv = o * tc;
                hidden[[step, k]] = hv;
                c_prev[k] = c;
                h_prev[k] = hv;
            }
        }
        LstmCache {
            gates,
            cell,
            cell_tanh,
            hidden,
        }
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamSet<F>,
        g: &mut ParamSet<F>,
        x: ArrayView2<F>,
        cache: &LstmCache<F>,
        dh_out: ArrayView2<F>,
    ) -> Array2<F> {
        let t = x.nrows();
        let h = self.hidden;
        let w_hh = p.view2(self.recurrent);
        let mut dz = Array2::<F>::zeros((t, 4 * h));
        let mut dh_next = vec![F::zero(); h];
        let mut dc_next = vec![F::zero(); h];
        for step in (0..t).rev() {
            let gt = cache.gates.row(step);
            for k in 0..h {
                let (i, f, gc, o) = (gt[k], gt[h + k], gt[2 * h + k], gt[3 * h + k]);
                let dh = dh_out[[step, k]] + dh_next[k];
                let tc = cache.cell_tanh[[step, k]];
                let dc = dc_next[k] + dh * o * (F::one() - tc * tc);
                let c_prev = if step > 0 {
                    cache.cell[[step - 1, k]]
                } else {
                    F::zero()
                };
                dz[[step, k]] = dc * gc * i * (F::one() - i);
                dz[[step, h + k]] = dc * c_prev * f * (F::one() - f);
                dz[[step, 2 * h + k]] = dc * i * (F::one() - gc * gc);
                dz[[step, 3 * h + k]] = dh * tc * o * (F::one() - o);
                dc_next[k] = dc * f;
            }
            // dh_prev = W_hh^T dz
            let dzr = dz.row(step);
            dh_next.iter_mut().for_each(|v| *v = F::zero());
            for r in 0..4 * h {
                let wr = w_hh.row(r);
                real::axpy(&mut dh_next, dzr[r], wr.as_slice().expect("contiguous"));
            }
        }
        // dW_hh = dz[1..]^T h[..T-1]
        if t > 1 {
            let prev = cache.hidden.slice(s![..t - 1, ..]);
            let dz_tail = dz.slice(s![1.., ..]);
            ndarray::linalg::general_mat_mul(
                F::one(),
                &dz_tail.t(),
                &prev,
                F::one(),
                &mut g.view2_mut(self.recurrent),
            );
        }
        self.input
            .backward(p, g, x, dz.view(), true)
            .expect("input grad")
    }
}

/// Reverses the time axis.
pub fn reverse_time<F: Real>(x: ArrayView2<F>) -> Array2<F> {
    let mut out = x.to_owned();
    out.invert_axis(Axis(0));
    out.as_standard_layout().into_owned()
}
