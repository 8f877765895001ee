//! Minimal differentiable building blocks for 1-D sequence models.

pub mod attention;
pub mod layers;
pub mod lstm;
pub mod params;
pub mod real;

pub use params::{ParamBuilder, ParamId, ParamSet, Tensor};
pub use real::Real;

#[cfg(test)]
mod tests {
    use super::attention::SelfAttention;
    use super::layers::*;
    use super::lstm::Lstm;
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks parameter and input gradients of `f` against central differences
    /// on `loss = sum(f(x) * probe)`.
    fn check<Fwd, Bwd>(params: ParamSet<f64>, x: Array2<f64>, fwd: Fwd, bwd: Bwd)
    where
        Fwd: Fn(&ParamSet<f64>, &Array2<f64>) -> Array2<f64>,
        Bwd: Fn(&ParamSet<f64>, &mut ParamSet<f64>, &Array2<f64>, &Array2<f64>) -> Array2<f64>,
    {
        let y = fwd(&params, &x);
        let probe = random(y.dim(), 99);
        let loss = |p: &ParamSet<f64>, x: &Array2<f64>| (fwd(p, x) * &probe).sum();
        let mut grads = params.zeros_like();
        let dx = bwd(&params, &mut grads, &x, &probe);
        let h = 1e-6;
        let tol = 1e-6;
        for (ti, t) in params.tensors().iter().enumerate() {
            for k in 0..t.data.len() {
                let mut up = params.clone();
                up.tensors_mut()[ti].data[k] += h;
                let mut down = params.clone();
                down.tensors_mut()[ti].data[k] -= h;
                let num = (loss(&up, &x) - loss(&down, &x)) / (2.0 * h);
                let ana = grads.tensors()[ti].data[k];
                assert!(
                    (num - ana).abs() <= tol * (1.0 + num.abs()),
                    "{}[{k}]: numeric {num} analytic {ana}",
                    t.name
                );
            }
        }
        for idx in 0..x.len() {
            let mut up = x.clone();
            up.as_slice_mut().unwrap()[idx] += h;
            let mut down = x.clone();
            down.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss(&params, &up) - loss(&params, &down)) / (2.0 * h);
            let ana = dx.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() <= tol * (1.0 + num.abs()),
                "input[{idx}]: numeric {num} analytic {ana}"
            );
        }
    }

    fn builder() -> ParamBuilder {
        ParamBuilder::new(ChaCha8Rng::seed_from_u64(3))
    }

    /// Perturbs zero-initialized tensors so bias and gain paths are exercised.
    fn jitter(p: ParamSet<f32>) -> ParamSet<f64> {
        let mut p = p.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in p.tensors_mut() {
            for v in &mut t.data {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        p
    }

    #[test]
    fn linear_gradients() {
        let mut b = builder();
        let layer = Linear::new(&mut b, "lin", 4, 3);
        check(
            jitter(b.finish()),
            random((7, 4), 1),
            |p, x| layer.forward(p, x.view()),
            |p, g, x, dy| layer.backward(p, g, x.view(), dy.view(), true).unwrap(),
        );
    }

    #[test]
    fn conv_gradients() {
        let mut b = builder();
        let layer = Conv1d::new(&mut b, "conv", 3, 2, 5);
        check(
            jitter(b.finish()),
            random((9, 3), 2),
            |p, x| layer.forward(p, x.view()),
            |p, g, x, dy| layer.backward(p, g, x.view(), dy.view()),
        );
    }

    #[test]
    fn conv_handles_sequences_shorter_than_kernel() {
        let mut b = builder();
        let layer = Conv1d::new(&mut b, "conv", 2, 2, 9);
        check(
            jitter(b.finish()),
            random((3, 2), 2),
            |p, x| layer.forward(p, x.view()),
            |p, g, x, dy| layer.backward(p, g, x.view(), dy.view()),
        );
    }

    #[test]
    fn depthwise_gradients() {
        let mut b = builder();
        let layer = DepthwiseConv1d::new(&mut b, "dw", 5, 3);
        check(
            jitter(b.finish()),
            random((8, 5), 3),
            |p, x| layer.forward(p, x.view()),
            |p, g, x, dy| layer.backward(p, g, x.view(), dy.view()),
        );
    }

    #[test]
    fn depthwise_matches_dense_with_diagonal_weights() {
        let mut b = builder();
        let dw = DepthwiseConv1d::new(&mut b, "dw", 3, 3);
        let dense = Conv1d::new(&mut b, "dense", 3, 3, 3);
        let mut p = b.finish();
        let w = p.view3(dw.weight).to_owned();
        {
            let mut wd = p.view3_mut(dense.weight);
            wd.fill(0.0);
            for c in 0..3 {
                for j in 0..3 {
                    wd[[c, c, j]] = w[[c, 0, j]];
                }
            }
        }
        let x = random((6, 3), 4).mapv(|v| v as f32);
        let a = dw.forward(&p, x.view());
        let d = dense.forward(&p, x.view());
        for (u, v) in a.iter().zip(d.iter()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut b = builder();
        let layer = LayerNorm::new(&mut b, "ln", 6);
        check(
            jitter(b.finish()),
            random((5, 6), 4),
            |p, x| layer.forward(p, x.view()).0,
            |p, g, x, dy| {
                let (_, cache) = layer.forward(p, x.view());
                layer.backward(p, g, &cache, dy.view())
            },
        );
    }

    #[test]
    fn norm_act_gradients() {
        let mut b = builder();
        let layer = NormAct::new(&mut b, "llp", 4);
        check(
            jitter(b.finish()),
            random((6, 4), 5),
            |p, x| layer.forward(p, x.view()).out,
            |p, g, x, dy| {
                let cache = layer.forward(p, x.view());
                layer.backward(p, g, &cache, dy.view())
            },
        );
    }

    #[test]
    fn attention_gradients() {
        for heads in [1, 2] {
            let mut b = builder();
            let layer = SelfAttention::new(&mut b, "attn", 4, heads);
            check(
                jitter(b.finish()),
                random((11, 4), 6),
                |p, x| layer.forward(p, x.view()).0,
                |p, g, x, dy| {
                    let (_, cache) = layer.forward(p, x.view());
                    layer.backward(p, g, x.view(), &cache, dy.view())
                },
            );
        }
    }

    #[test]
    fn attention_matches_dense_softmax() {
        let mut b = builder();
        let layer = SelfAttention::new(&mut b, "attn", 3, 1);
        let p = b.finish().cast::<f64>();
        let x = random((10, 3), 7);
        let (out, _) = layer.forward(&p, x.view());
        let q = layer.query.forward(&p, x.view());
        let k = layer.key.forward(&p, x.view());
        let v = layer.value.forward(&p, x.view());
        let mut s = q.dot(&k.t()) / 3f64.sqrt();
        for mut row in s.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|z| (z - m).exp());
            let l = row.sum();
            row.mapv_inplace(|z| z / l);
        }
        let expected = s.dot(&v);
        for (a, e) in out.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_gradients() {
        let mut b = builder();
        let layer = Lstm::new(&mut b, "lstm", 3, 4);
        check(
            jitter(b.finish()),
            random((9, 3), 8),
            |p, x| layer.forward(p, x.view()).hidden,
            |p, g, x, dy| {
                let cache = layer.forward(p, x.view());
                layer.backward(p, g, x.view(), &cache, dy.view())
            },
        );
    }

    #[test]
    fn depthwise_param_count_closed_form() {
        assert_eq!(DepthwiseConv1d::param_count(192, 3), 768);
        let mut b = builder();
        DepthwiseConv1d::new(&mut b, "dw", 192, 3);
        assert_eq!(b.finish().numel(), 768);
    }
}
