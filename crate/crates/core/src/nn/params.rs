use ndarray::{ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, ArrayViewMut3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Real;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F> Tensor<F> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered collection of named tensors. Used for both parameters and their
/// gradients; the order is the registration order and never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    tensors: Vec<Tensor<F>>,
}

impl<F> Default for ParamSet<F> {
    fn default() -> Self {
        Self {
            tensors: Vec::new(),
        }
    }
}

impl<F: Real> ParamSet<F> {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![F::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| G::of(v.to_f64().unwrap())).collect(),
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(ParamId)
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.tensors[id.0].data[..])
    }

    pub fn view1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(&mut self.tensors[id.0].data[..])
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, F> {
        let t = &self.tensors[id.0];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("rank-2 tensor")
    }

    pub fn view2_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        let t = &mut self.tensors[id.0];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data).expect("rank-2 tensor")
    }

    pub fn view3(&self, id: ParamId) -> ArrayView3<'_, F> {
        let t = &self.tensors[id.0];
        ArrayView3::from_shape((t.shape[0], t.shape[1], t.shape[2]), &t.data)
            .expect("rank-3 tensor")
    }

    pub fn view3_mut(&mut self, id: ParamId) -> ArrayViewMut3<'_, F> {
        let t = &mut self.tensors[id.0];
        ArrayViewMut3::from_shape((t.shape[0], t.shape[1], t.shape[2]), &mut t.data)
            .expect("rank-3 tensor")
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= factor;
            }
        }
    }

    /// Euclidean norm over every element, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Registers parameters in a fixed order, drawing initial values from a
/// seeded generator.
pub struct ParamBuilder {
    pub params: ParamSet<f32>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            params: ParamSet::default(),
            rng,
        }
    }

    /// Weight drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.push(name, shape, data)
    }

    pub fn constant(&mut self, name: String, shape: Vec<usize>, value: f32) -> ParamId {
        let n = shape.iter().product();
        self.params.push(name, shape, vec![value; n])
    }

    pub fn finish(self) -> ParamSet<f32> {
        self.params
    }
}
