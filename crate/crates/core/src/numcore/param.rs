use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64, f64),
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)); rank-2 shapes only.
    Glorot,
}

/// Draws a tensor of `shape` under `init`.
pub fn init_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> Result<Tensor<T>> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!("invalid parameter shape {shape:?}")));
    }
    let len: usize = shape.iter().product();
    let uniform = |a: f64, b: f64, rng: &mut R| -> Vec<T> {
        (0..len).map(|_| T::of(rng.gen_range(a..b))).collect()
    };
    let data = match init {
        Init::Zeros => vec![T::zero(); len],
        Init::Const(c) => vec![T::of(c); len],
        Init::Uniform(a, b) => {
            if !(a < b) {
                return Err(Error::invalid(format!("uniform init needs a < b, got ({a}, {b})")));
            }
            uniform(a, b, rng)
        }
        Init::Glorot => {
            if shape.len() != 2 {
                return Err(Error::invalid(format!("glorot init needs a rank-2 shape, got {shape:?}")));
            }
            let bound = glorot_bound(shape[0], shape[1]);
            uniform(-bound, bound, rng)
        }
    };
    Tensor::new(shape.to_vec(), data)
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether weight decay applies to this parameter.
    pub decay: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            decay,
        }
    }

    pub fn init<R: Rng + ?Sized>(name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> Result<Self> {
        Ok(Self::new(name, init_tensor(shape, init, rng)?, true))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Owns every parameter of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn insert(&mut self, param: Parameter<T>) -> Result<ParamId> {
        if self.find(&param.name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name {:?}", param.name)));
        }
        self.params.push(param);
        Ok(ParamId(self.params.len() - 1))
    }

    /// Registers a freshly initialized parameter.
    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        decay: bool,
        rng: &mut R,
    ) -> Result<ParamId> {
        let mut p = Parameter::init(name, shape, init, rng)?;
        p.decay = decay;
        self.insert(p)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Adds a backward pass's gradients into the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(&self) -> T {
        self.params.iter().map(|p| p.grad.sum_sq()).sum::<T>().sqrt()
    }

    /// Copies all values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::invalid("parameter stores differ in size"));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::invalid(format!("parameter layout mismatch at {:?}", a.name)));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the parameter did not take part in the loss.
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = init_tensor(&[2, 2], Init::Zeros, &mut rng).unwrap();
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn glorot_bound_300() {
        // sqrt(6 / 600) = sqrt(0.01) = 0.1
        assert!((glorot_bound(300, 300) - 0.1).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = init_tensor(&[300, 300], Init::Glorot, &mut rng).unwrap();
        let max = t.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max <= 0.1);
        assert!(max > 0.099);
    }

    #[test]
    fn uniform_is_seed_deterministic() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            init_tensor::<f64, _>(&[3], Init::Uniform(-0.05, 0.05), &mut rng).unwrap()
        };
        let a = draw();
        assert_eq!(a, draw());
        assert!(a.data().iter().all(|x| x.abs() <= 0.05));
    }

    #[test]
    fn invalid_inits_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(init_tensor::<f64, _>(&[], Init::Zeros, &mut rng).is_err());
        assert!(init_tensor::<f64, _>(&[2, 0], Init::Zeros, &mut rng).is_err());
        assert!(init_tensor::<f64, _>(&[2], Init::Uniform(0.1, 0.1), &mut rng).is_err());
        assert!(init_tensor::<f64, _>(&[4], Init::Glorot, &mut rng).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        store.add("w", &[2], Init::Zeros, true, &mut rng).unwrap();
        assert!(store.add("w", &[2], Init::Zeros, true, &mut rng).is_err());
    }
}
