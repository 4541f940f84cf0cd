use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::tape::{Gradients, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer { kind: OptimizerKind::Sgd, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer { kind: OptimizerKind::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr),
        }
    }
}

/// Weight initialisation schemes, both fan-in scaled uniform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-√(6/fan_in), √(6/fan_in))`, for layers followed by relu.
    He,
    /// `U(-√(6/(fan_in+fan_out)), …)`, for sigmoid or linear outputs.
    Xavier,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
struct Parameter {
    value: Tensor,
    grad: Option<Tensor>,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        let n = value.numel();
        Parameter { value, grad: None, m: vec![0.0; n], v: vec![0.0; n], steps: 0 }
    }
}

/// Named parameters, their accumulated gradients and optimiser moments.
///
/// Paths are kept sorted, so iteration order (and hence checkpoint layout)
/// is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(path) {
            return Err(Error::Usage(format!("duplicate parameter path `{path}`")));
        }
        self.params.insert(path.to_string(), Parameter::new(value));
        Ok(())
    }

    /// Registers a `fan_in × fan_out` weight matrix drawn from `init`.
    pub fn init_matrix(
        &mut self,
        path: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = match init {
            Init::He => (6.0 / fan_in as f64).sqrt(),
            Init::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::Zeros => 0.0,
        };
        let data = (0..fan_in * fan_out)
            .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
            .collect();
        self.insert(path, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn init_zeros(&mut self, path: &str, shape: &[usize]) -> Result<()> {
        self.insert(path, Tensor::zeros(shape))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn value(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path).map(|p| &mut p.value)
    }

    pub fn grad(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path).and_then(|p| p.grad.as_ref())
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{path}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                path,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters whose path starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.count_with_prefix("")
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Adds the gradients of every trainable parameter leaf on `tape`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (var, path) in tape.param_vars() {
            let Some(g) = grads.get(*var) else { continue };
            let p = self
                .params
                .get_mut(path)
                .ok_or_else(|| Error::Usage(format!("unknown parameter `{path}`")))?;
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => p.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.values().all(|p| p.grad.as_ref().map_or(true, Tensor::is_finite))
    }

    /// Applies one optimiser update to every parameter that has a gradient
    /// and is not `frozen`, then clears all gradients.
    pub fn step(&mut self, opt: &Optimizer, frozen: impl Fn(&str) -> bool) -> Result<()> {
        let any = self.params.iter().any(|(k, p)| p.grad.is_some() && !frozen(k));
        if !any {
            return Err(Error::Usage("optimizer step without gradients".into()));
        }
        self.step += 1;
        for (path, p) in self.params.iter_mut() {
            if frozen(path) {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            let g = g.data();
            match opt.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.value.data_mut().iter_mut().zip(g) {
                        *w -= opt.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    p.steps += 1;
                    let t = p.steps as i32;
                    let c1 = 1.0 - opt.beta1.powi(t);
                    let c2 = 1.0 - opt.beta2.powi(t);
                    let w = p.value.data_mut();
                    for i in 0..w.len() {
                        p.m[i] = opt.beta1 * p.m[i] + (1.0 - opt.beta1) * g[i];
                        p.v[i] = opt.beta2 * p.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                        let mhat = p.m[i] / c1;
                        let vhat = p.v[i] / c2;
                        w[i] -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
                    }
                }
            }
        }
        self.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with_grad(w: f64, g: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::vector(vec![w])).unwrap();
        s.params.get_mut("w").unwrap().grad = Some(Tensor::vector(vec![g]));
        s
    }

    #[test]
    fn sgd_step() {
        let mut s = store_with_grad(1.0, 2.0);
        s.step(&Optimizer::sgd(0.1), |_| false).unwrap();
        assert!((s.value("w").unwrap().item() - 0.8).abs() < 1e-15);
        assert!(s.grad("w").is_none());
    }

    #[test]
    fn adam_first_step_moves_against_gradient() {
        for g in [2.0, -0.003] {
            let mut s = store_with_grad(1.0, g);
            s.step(&Optimizer::adam(1e-3), |_| false).unwrap();
            let w = s.value("w").unwrap().item();
            assert!((w - 1.0).signum() == -g.signum());
            // bias-corrected first step has magnitude ≈ lr
            assert!(((w - 1.0).abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut s = store_with_grad(1.0, 2.0);
        s.insert("enc.w", Tensor::vector(vec![0.123456789])).unwrap();
        s.params.get_mut("enc.w").unwrap().grad = Some(Tensor::vector(vec![5.0]));
        let before = s.value("enc.w").unwrap().clone();
        s.step(&Optimizer::adam(0.5), |p| p.starts_with("enc.")).unwrap();
        assert_eq!(s.value("enc.w").unwrap().data()[0].to_bits(), before.data()[0].to_bits());
        assert_ne!(s.value("w").unwrap().item(), 1.0);
    }

    #[test]
    fn step_without_gradients_is_usage_error() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(s.step(&Optimizer::sgd(0.1), |_| false), Err(Error::Usage(_))));
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParameterStore::new();
        s.init_matrix("he", 24, 10, Init::He, &mut rng).unwrap();
        s.init_matrix("xa", 24, 10, Init::Xavier, &mut rng).unwrap();
        let he = (6.0f64 / 24.0).sqrt();
        let xa = (6.0f64 / 34.0).sqrt();
        assert!(s.value("he").unwrap().data().iter().all(|v| v.abs() < he));
        assert!(s.value("xa").unwrap().data().iter().all(|v| v.abs() < xa));
        assert_eq!(s.value("he").unwrap().shape(), &[24, 10]);
    }
}
