//! Named trainable tensors and their optimizer state.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::ops::{BnConfig, BnStats};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Trainable, weight decay applies.
    Weight,
    /// Trainable, exempt from weight decay (BN affine, biases).
    NoDecay,
    /// Running statistic; persisted but never trained.
    Buffer,
}

impl ParamRole {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::Buffer)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
    pub role: ParamRole,
}

/// Ordered map from parameter name to tensor, gradient and momentum buffer.
/// Iteration order is insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        role: ParamRole,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Spec(format!("duplicate parameter `{name}`")));
        }
        let shape = value.shape();
        self.entries.insert(
            name,
            Param {
                value,
                grad: Tensor::zeros(shape),
                momentum: Tensor::zeros(shape),
                role,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.param(name)?.value)
    }

    /// Value lookup that also checks the expected shape.
    pub fn get_shaped(&self, name: &str, shape: Shape) -> Result<&Tensor<T>> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {}, expected {shape}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.param_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "cannot assign {} to `{name}` of shape {}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Element count over trainable tensors (buffers excluded).
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.role.is_trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds every gradient in `grads` into the matching grad buffer.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = self.param_mut(name)?;
            if p.grad.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has shape {}, expected {}",
                    g.shape(),
                    p.grad.shape()
                )));
            }
            for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the BN running buffers.
    pub fn apply_bn_updates(
        &mut self,
        updates: &[(String, BnStats<T>)],
        cfg: BnConfig,
    ) -> Result<()> {
        for (prefix, stats) in updates {
            let mean_name = format!("{prefix}.running_mean");
            let var_name = format!("{prefix}.running_var");
            let mut mean = self.get(&mean_name)?.clone();
            let mut var = self.get(&var_name)?.clone();
            stats.update_running(mean.data_mut(), var.data_mut(), cfg);
            self.set(&mean_name, mean)?;
            self.set(&var_name, var)?;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                            momentum: p.momentum.cast(),
                            role: p.role,
                        },
                    )
                })
                .collect(),
        }
    }

    /// True when both stores hold the same names, roles and bitwise-equal values.
    pub fn values_equal(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((ka, a), (kb, b))| {
                    ka == kb
                        && a.role == b.role
                        && a.value.shape() == b.value.shape()
                        && a.value
                            .data()
                            .iter()
                            .zip(b.value.data())
                            .all(|(x, y)| x.to_bits_eq(*y))
                })
    }
}

trait BitEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Element> BitEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        // Element is f32 or f64; compare through f64 which is exact for both,
        // then separate signed zeros and NaN payload-free equality.
        let (a, b) = (self.as_f64(), other.as_f64());
        a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
    }
}

/// Parameter gradients produced by a backward pass, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn new() -> Self {
        Gradients {
            map: IndexMap::new(),
        }
    }

    pub fn accumulate(&mut self, name: &str, grad: Tensor<T>) -> Result<()> {
        match self.map.get_mut(name) {
            Some(existing) => {
                *existing = crate::tensor::add(existing, &grad)?;
            }
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_duplicates() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b", Tensor::zeros(Shape::vector(2)), ParamRole::Weight)
            .unwrap();
        s.insert("a", Tensor::zeros(Shape::vector(3)), ParamRole::Buffer)
            .unwrap();
        assert!(s
            .insert("a", Tensor::zeros(Shape::vector(1)), ParamRole::Weight)
            .is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(s.trainable_count(), 2);
    }

    #[test]
    fn accumulate_checks_shapes() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::zeros(Shape::vector(2)), ParamRole::Weight)
            .unwrap();
        let mut g = Gradients::new();
        g.accumulate("w", Tensor::full(Shape::vector(2), 1.5))
            .unwrap();
        g.accumulate("w", Tensor::full(Shape::vector(2), 0.5))
            .unwrap();
        s.accumulate(&g).unwrap();
        assert_eq!(s.param("w").unwrap().grad.data(), &[2.0, 2.0]);
        let mut bad = Gradients::new();
        bad.accumulate("w", Tensor::zeros(Shape::vector(3)))
            .unwrap();
        assert!(s.accumulate(&bad).is_err());
    }

    #[test]
    fn bitwise_equality_distinguishes_signed_zero() {
        let mut a = ParamStore::<f32>::new();
        a.insert("w", Tensor::full(Shape::vector(1), 0.0), ParamRole::Weight)
            .unwrap();
        let mut b = a.clone();
        assert!(a.values_equal(&b));
        b.set("w", Tensor::full(Shape::vector(1), -0.0)).unwrap();
        assert!(!a.values_equal(&b));
    }
}
