//! Dense tensors and the named parameter store.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor with an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::Shape(format!(
                "tensor values length {} does not match shape {:?} (numel {})",
                values.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, values, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, values: vec![F::zero(); numel], grad: None }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], values: vec![value], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Replace the gradient accumulator. Length must match the value buffer.
    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor numel {}",
                grad.len(),
                self.values.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Which sub-network a parameter belongs to. Optimizer steps filter on this,
/// which is what keeps the alternating objectives from touching each other's
/// weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Encoder,
    Discriminator,
    Scorer,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Encoder => 0,
            Role::Discriminator => 1,
            Role::Scorer => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Role> {
        match tag {
            0 => Some(Role::Encoder),
            1 => Some(Role::Discriminator),
            2 => Some(Role::Scorer),
            _ => None,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::Encoder => write!(f, "encoder"),
            Role::Discriminator => write!(f, "discriminator"),
            Role::Scorer => write!(f, "scorer"),
        }
    }
}

#[derive(Clone, Debug)]
struct Param<F: Scalar> {
    role: Role,
    tensor: Tensor<F>,
}

/// Named map of trainable tensors, partitioned by [`Role`].
///
/// Iteration order is the lexicographic name order, so every walk over the
/// store is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<F: Scalar> {
    params: BTreeMap<String, Param<F>>,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, role: Role, tensor: Tensor<F>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name.to_string(), Param { role, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.params.get(name).map(|p| p.role)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar components across all parameters.
    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Role, &Tensor<F>)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p.role, &p.tensor))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, Role, &mut Tensor<F>)> {
        self.params.iter_mut().map(|(n, p)| (n.as_str(), p.role, &mut p.tensor))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.clear_grad();
        }
    }

    /// One plain SGD step `p <- p - lr * grad(p)` over every parameter with
    /// the given role. Other roles are untouched; gradients of the updated
    /// parameters are cleared.
    pub fn sgd_step(&mut self, role: Role, lr: F) -> Result<()> {
        // Validate first so a missing gradient leaves the store unmodified.
        for (name, p) in self.params.iter() {
            if p.role == role && p.tensor.grad().is_none() {
                return Err(Error::MissingGrad(name.clone()));
            }
        }
        for p in self.params.values_mut() {
            if p.role != role {
                continue;
            }
            let grad = p.tensor.grad.take().expect("validated above");
            for (v, g) in p.tensor.values.iter_mut().zip(grad.iter()) {
                *v = *v - lr * *g;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Role, Vec<f64>)]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        for (name, role, vals) in values {
            let t = Tensor::new(vec![vals.len()], vals.clone()).unwrap();
            s.insert(name, *role, t).unwrap();
        }
        s
    }

    #[test]
    fn tensor_rejects_length_mismatch() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("w", Role::Encoder, Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("w", Role::Scorer, Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn sgd_step_applies_update_and_clears_grad() {
        let mut s = store_with(&[("w", Role::Encoder, vec![1.0])]);
        s.get_mut("w").unwrap().set_grad(vec![0.5]).unwrap();
        s.sgd_step(Role::Encoder, 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().values(), &[0.95]);
        assert!(s.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn sgd_step_leaves_other_roles_bitwise_identical() {
        let mut s = store_with(&[
            ("d.w", Role::Discriminator, vec![0.25, -1.5]),
            ("e.w", Role::Encoder, vec![2.0]),
        ]);
        s.get_mut("d.w").unwrap().set_grad(vec![1.0, 1.0]).unwrap();
        s.get_mut("e.w").unwrap().set_grad(vec![1.0]).unwrap();
        let before: Vec<u64> =
            s.get("e.w").unwrap().values().iter().map(|v| v.to_bits()).collect();
        s.sgd_step(Role::Discriminator, 0.1).unwrap();
        let after: Vec<u64> =
            s.get("e.w").unwrap().values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        // Encoder grad untouched by the discriminator step.
        assert!(s.get("e.w").unwrap().grad().is_some());
    }

    #[test]
    fn sgd_step_errors_on_missing_grad() {
        let mut s = store_with(&[("w", Role::Encoder, vec![1.0])]);
        match s.sgd_step(Role::Encoder, 0.1) {
            Err(Error::MissingGrad(name)) => assert_eq!(name, "w"),
            other => panic!("expected missing-grad error, got {other:?}"),
        }
    }

    #[test]
    fn two_steps_on_quadratic_match_closed_form() {
        // loss = x^2, grad = 2x; x <- x(1 - 2*lr) each step.
        let mut s = store_with(&[("x", Role::Encoder, vec![1.0])]);
        for _ in 0..2 {
            let x = s.get("x").unwrap().values()[0];
            s.get_mut("x").unwrap().set_grad(vec![2.0 * x]).unwrap();
            s.sgd_step(Role::Encoder, 0.1).unwrap();
        }
        let x = s.get("x").unwrap().values()[0];
        assert!((x - 0.64).abs() < 1e-12);
    }
}
