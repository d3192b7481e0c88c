use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors for one model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Self {
        self.insert(name, tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::ParamMismatch(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        check_same_layout(&self.tensors, &other.tensors)
    }

    /// Largest absolute element-wise difference against `other`.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.tensors
            .iter()
            .filter_map(|(k, t)| other.get(k).map(|o| t.max_abs_diff(o)))
            .fold(0.0, f64::max)
    }

    pub(crate) fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }
}

/// Gradient of a scalar loss with respect to every parameter of a graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn from_map(entries: BTreeMap<String, Tensor>) -> Self {
        Self { entries }
    }

    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            entries: params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.entries.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(mut self, max_norm: f64) -> Self {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for t in self.entries.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        self
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), t.map(|v| v * s)))
                .collect(),
        }
    }

    /// Element-wise sum; both maps must share names and shapes.
    pub fn added(&self, other: &GradientMap) -> Result<Self> {
        check_same_layout(&self.entries, &other.entries)?;
        Ok(Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), t.zip_map(&other.entries[k], |a, b| a + b)))
                .collect(),
        })
    }

    pub fn check_matches(&self, params: &ParamSet) -> Result<()> {
        check_same_layout(&params.tensors, &self.entries)
    }
}

fn check_same_layout(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ParamMismatch(format!(
            "{} tensors vs {} tensors",
            a.len(),
            b.len()
        )));
    }
    for (name, t) in a {
        let o = b
            .get(name)
            .ok_or_else(|| Error::ParamMismatch(format!("`{name}` missing")))?;
        if o.shape() != t.shape() {
            return Err(Error::ParamMismatch(format!(
                "`{name}`: {:?} vs {:?}",
                t.shape(),
                o.shape()
            )));
        }
    }
    Ok(())
}

/// One plain gradient-descent step `theta - eta * grad`. The input set is left
/// untouched.
pub fn sgd_step(params: &ParamSet, grads: &GradientMap, eta: f64) -> Result<ParamSet> {
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {eta}")));
    }
    grads.check_matches(params)?;
    let tensors = params
        .iter()
        .map(|(k, t)| (k.clone(), t.zip_map(&grads.entries[k], |p, g| p - eta * g)))
        .collect();
    Ok(ParamSet::from_map(tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamSet {
        ParamSet::new().with("theta", Tensor::vector(vec![v]))
    }

    fn grad(v: f64) -> GradientMap {
        GradientMap::from_map([("theta".to_string(), Tensor::vector(vec![v]))].into())
    }

    #[test]
    fn sgd_step_arithmetic() {
        let out = sgd_step(&one(1.0), &grad(2.0), 0.1).unwrap();
        assert!((out.get("theta").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let p = one(3.25);
        assert_eq!(sgd_step(&p, &grad(0.0), 0.5).unwrap(), p);
    }

    #[test]
    fn sgd_quadratic_three_steps() {
        // loss 0.5 (theta - 5)^2, gradient theta - 5
        let mut p = one(0.0);
        for _ in 0..3 {
            let g = grad(p.get("theta").unwrap().item() - 5.0);
            p = sgd_step(&p, &g, 0.5).unwrap();
        }
        assert!((p.get("theta").unwrap().item() - 4.375).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_mismatch_and_bad_rate() {
        let p = one(1.0);
        let bad = GradientMap::from_map([("other".to_string(), Tensor::vector(vec![1.0]))].into());
        assert!(matches!(sgd_step(&p, &bad, 0.1), Err(Error::ParamMismatch(_))));
        assert!(sgd_step(&p, &grad(1.0), 0.0).is_err());
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let g = GradientMap::from_map([("a".to_string(), Tensor::vector(vec![3.0, 4.0]))].into());
        let c = g.clip_global_norm(1.0);
        assert!((c.global_norm() - 1.0).abs() < 1e-12);
        let small = GradientMap::from_map([("a".to_string(), Tensor::vector(vec![0.3]))].into());
        assert_eq!(small.clone().clip_global_norm(1.0), small);
    }
}
