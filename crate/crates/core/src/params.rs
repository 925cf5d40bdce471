//! Named parameter sets and their binding onto a tape.
//!
//! A model describes its parameters as a flat, ordered list of
//! [`ParamSpec`]s. The same list drives initialization, shape-only counting,
//! checkpoint tables and the optimizer, so the order is part of the model's
//! contract.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `N(0, std^2)`.
    Normal(f64),
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`; shape must be `(in, out)`.
    XavierUniform,
    /// `U(-b, b)`.
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn sample<T: Scalar>(&self, rng: &mut Rng) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::Normal(std) => Tensor::randn(&self.shape, rng).map(|x| x * T::of(std)),
            Init::XavierUniform => {
                let fan_in = self.shape[0];
                let fan_out: usize = self.shape[1..].iter().product();
                let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::uniform(&self.shape, -b, b, rng)
            }
            Init::Uniform(b) => Tensor::uniform(&self.shape, -b, b, rng),
        }
    }
}

/// Total element count of a layout.
pub fn layout_numel(layout: &[ParamSpec]) -> usize {
    layout.iter().map(ParamSpec::numel).sum()
}

/// An ordered set of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    /// Initialize every entry of `layout` in order from `rng`.
    pub fn init(layout: &[ParamSpec], rng: &mut Rng) -> Self {
        let pairs = layout
            .iter()
            .map(|s| (s.name.clone(), s.sample(rng)))
            .collect();
        Self::from_pairs(pairs).expect("layouts have unique names")
    }

    pub fn from_pairs(pairs: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(pairs.len());
        let mut tensors = Vec::with_capacity(pairs.len());
        let mut index = HashMap::with_capacity(pairs.len());
        for (i, (n, t)) in pairs.into_iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate parameter name `{n}`")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
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

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Names and shapes agree entry by entry.
    pub fn same_structure<U: Scalar>(&self, other: &ParamSet<U>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Error naming the first entry where `self` and `layout` differ.
    pub fn check_layout(&self, layout: &[ParamSpec]) -> Result<()> {
        if self.len() != layout.len() {
            return Err(Error::config(format!(
                "parameter set has {} entries, layout has {}",
                self.len(),
                layout.len()
            )));
        }
        for ((n, t), s) in self.iter().zip(layout) {
            if n != s.name || t.shape() != s.shape.as_slice() {
                return Err(Error::config(format!(
                    "parameter `{n}` {:?} does not match layout entry `{}` {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(())
    }

    /// Place every tensor on `tape`, as trainable leaves if `trainable`.
    pub fn bind<'a>(&'a self, tape: &'a Tape<T>, trainable: bool) -> Bound<'a, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        Bound {
            tape,
            set: self,
            vars,
        }
    }

    /// View existing tape nodes, one per entry in order, as this set's
    /// parameters. Only names and shapes of `self` are used.
    pub fn bind_vars<'a>(&'a self, tape: &'a Tape<T>, vars: &[Var]) -> Result<Bound<'a, T>> {
        if vars.len() != self.len() {
            return Err(Error::config(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.len()
            )));
        }
        for ((n, t), &v) in self.iter().zip(vars) {
            if tape.shape(v) != t.shape() {
                return Err(Error::dim(
                    "bind_vars",
                    format!("`{n}` is {:?}, var is {:?}", t.shape(), tape.shape(v)),
                ));
            }
        }
        Ok(Bound {
            tape,
            set: self,
            vars: vars.to_vec(),
        })
    }
}

/// A [`ParamSet`] placed on a tape.
pub struct Bound<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.set
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_follows_layout_order() {
        let layout = vec![
            ParamSpec::new("a", &[2, 3], Init::XavierUniform),
            ParamSpec::new("b", &[3], Init::Zeros),
        ];
        let p = ParamSet::<f32>::init(&layout, &mut Rng::new(0));
        assert_eq!(p.names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(p.numel(), layout_numel(&layout));
        p.check_layout(&layout).unwrap();
        let bound = (6.0f32 / 5.0).sqrt();
        assert!(p.get("a").unwrap().data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::<f32>::zeros(&[1]);
        assert!(ParamSet::from_pairs(vec![("x".into(), t.clone()), ("x".into(), t)]).is_err());
    }
}
