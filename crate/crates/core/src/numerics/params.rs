use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Named parameter tensors with per-subtree freezing.
///
/// Names are dotted paths (`blocks.0.attn.wq`). Freezing `blocks` freezes
/// every name equal to `blocks` or starting with `blocks.`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
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

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.frozen.insert(prefix.into());
    }

    pub fn unfreeze(&mut self, prefix: &str) {
        self.frozen.remove(prefix);
    }

    pub fn frozen_prefixes(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| {
            p.is_empty()
                || name == p
                || (name.len() > p.len() && name.starts_with(p.as_str()) && name.as_bytes()[p.len()] == b'.')
        })
    }

    /// Moves every tensor of `other` under `prefix.` into this set.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamSet<T>) -> Result<()> {
        for (name, t) in other.tensors {
            self.insert(format!("{prefix}.{name}"), t)?;
        }
        for f in other.frozen {
            self.frozen.insert(format!("{prefix}.{f}"));
        }
        Ok(())
    }

    /// Copies out the tensors under `prefix.`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamSet<T> {
        let lead = format!("{prefix}.");
        let mut out = ParamSet::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&lead) {
                out.tensors.insert(rest.to_string(), t.clone());
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Hex SHA-256 over names, shapes and little-endian f32 values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.ndim() as u64).to_le_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.le_f32_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradSet<T = f32> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradSet<T> {
    pub fn new() -> Self {
        GradSet {
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum; names are visited in sorted order so the reduction
    /// order never depends on how the sets were produced.
    pub fn accumulate(&mut self, other: &GradSet<T>) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::Shape(format!("gradient `{name}` shape differs")));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| *v * *v)
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn freezing_is_by_subtree() {
        let mut p = ParamSet::<f32>::new();
        p.freeze("encoder");
        assert!(p.is_frozen("encoder"));
        assert!(p.is_frozen("encoder.blocks.0.w"));
        assert!(!p.is_frozen("encoder_head.w"));
        assert!(!p.is_frozen("policy.w"));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(vec![3])).unwrap();
        let before = p.fingerprint();
        assert_eq!(before, p.clone().fingerprint());
        p.get_mut("w").unwrap().data_mut()[1] = 1e-7;
        assert_ne!(before, p.fingerprint());
    }

    #[test]
    fn prefix_round_trip() {
        let mut inner = ParamSet::<f32>::new();
        inner.insert("w", Tensor::full(vec![2], 3.0)).unwrap();
        let mut outer = ParamSet::<f32>::new();
        outer.merge_prefixed("enc", inner.clone()).unwrap();
        assert!(outer.contains("enc.w"));
        assert_eq!(outer.extract_prefixed("enc").get("w").unwrap(), inner.get("w").unwrap());
    }
}
