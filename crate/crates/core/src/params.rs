//! Named parameter storage with a FROZEN/TRAINABLE partition, and the binder
//! that lifts parameters onto a [`Tape`] for one forward pass.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Frozen,
    Trainable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tag: Option<Tag>,
    pub value: Array2<f64>,
}

/// Parameters in insertion order. Order is part of the checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tag: Tag, value: Array2<f64>) -> Result<()> {
        self.insert_raw(name.into(), Some(tag), value)
    }

    /// Adds a parameter without a tag; [`ParamStore::validate`] will reject it.
    pub fn insert_untagged(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<()> {
        self.insert_raw(name.into(), None, value)
    }

    fn insert_raw(&mut self, name: String, tag: Option<Tag>, value: Array2<f64>) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tag, value });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    /// Value of a parameter the caller registered itself.
    pub(crate) fn value(&self, name: &str) -> &Array2<f64> {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"))
    }

    pub fn tag(&self, name: &str) -> Result<Tag> {
        let i = self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        self.params[*i].tag.ok_or_else(|| Error::Untagged(name.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match self.params.iter().find(|p| p.tag.is_none()) {
            Some(p) => Err(Error::Untagged(p.name.clone())),
            None => Ok(()),
        }
    }

    fn names_with(&self, tag: Tag) -> Result<Vec<&str>> {
        self.validate()?;
        Ok(self
            .params
            .iter()
            .filter(|p| p.tag == Some(tag))
            .map(|p| p.name.as_str())
            .collect())
    }

    /// Names of the parameters updated by training.
    pub fn trainable_parameters(&self) -> Result<Vec<&str>> {
        self.names_with(Tag::Trainable)
    }

    pub fn frozen_parameters(&self) -> Result<Vec<&str>> {
        self.names_with(Tag::Frozen)
    }

    pub fn scalar_count(&self, tag: Tag) -> usize {
        self.params
            .iter()
            .filter(|p| p.tag == Some(tag))
            .map(|p| p.value.len())
            .sum()
    }
}

pub(crate) fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn fan_in_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng))
}

/// Lifts stored parameters onto a tape. Trainable parameters become
/// gradient-tracked variables; frozen ones become constants, so no gradient
/// can ever reach them.
pub struct Binder<'a> {
    store: &'a ParamStore,
    pub tape: Tape,
    bound: HashMap<&'a str, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Result<Self> {
        store.validate()?;
        Ok(Self {
            store,
            tape: Tape::new(),
            bound: HashMap::new(),
        })
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let i = *self
            .store
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"));
        let p = &self.store.params[i];
        let value = p.value.clone();
        let v = match p.tag {
            Some(Tag::Trainable) => self.tape.variable(value),
            _ => self.tape.constant(value),
        };
        self.bound.insert(p.name.as_str(), v);
        v
    }

    /// Gradients of `root` for every trainable parameter touched by the pass.
    pub fn gradients(&self, root: Var) -> Vec<(String, Array2<f64>)> {
        let mut grads: Gradients = self.tape.backward(root);
        let mut out: Vec<(String, Array2<f64>)> = self
            .bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.to_string(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn partition_and_untagged() {
        let mut s = ParamStore::new();
        s.insert("enc.w", Tag::Frozen, array![[1.0]]).unwrap();
        s.insert("dec.w", Tag::Trainable, array![[2.0, 3.0]]).unwrap();
        assert_eq!(s.trainable_parameters().unwrap(), vec!["dec.w"]);
        assert_eq!(s.frozen_parameters().unwrap(), vec!["enc.w"]);
        assert_eq!(s.tag("enc.w").unwrap(), Tag::Frozen);
        assert_eq!(s.scalar_count(Tag::Trainable), 2);
        assert!(s.insert("dec.w", Tag::Frozen, array![[0.0]]).is_err());

        s.insert_untagged("loose", array![[0.0]]).unwrap();
        assert!(matches!(s.trainable_parameters(), Err(Error::Untagged(n)) if n == "loose"));
        assert!(matches!(s.tag("loose"), Err(Error::Untagged(_))));
        assert!(Binder::new(&s).is_err());
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut s = ParamStore::new();
        s.insert("a", Tag::Frozen, array![[2.0]]).unwrap();
        s.insert("b", Tag::Trainable, array![[3.0]]).unwrap();
        let mut b = Binder::new(&s).unwrap();
        let (a, w) = (b.param("a"), b.param("b"));
        assert_eq!(b.param("a"), a);
        let y = b.tape.mul(a, w);
        let grads = b.gradients(y);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, "b");
        assert_eq!(grads[0].1, array![[2.0]]);
    }
}
