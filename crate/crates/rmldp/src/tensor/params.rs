use std::collections::BTreeMap;

use super::Tensor;

/// Named collection of tensors with deterministic (lexicographic) iteration
/// order. Houses model parameters and any auxiliary trainables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of element counts over all entries.
    pub fn total_dim(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// All entries concatenated into one vector, in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten): same names and shapes, data
    /// taken from `flat`. Panics if the length disagrees.
    pub fn unflatten(&self, flat: &[f64]) -> ParamSet {
        assert_eq!(flat.len(), self.total_dim(), "unflatten length mismatch");
        let mut out = ParamSet::new();
        let mut off = 0;
        for (name, t) in &self.entries {
            let n = t.len();
            let data = flat[off..off + n].to_vec();
            out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data).unwrap());
            off += n;
        }
        out
    }

    /// Copy entries from `other` under a name prefix.
    pub fn insert_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (name, t) in other.iter() {
            self.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet { entries: iter.into_iter().collect() }
    }
}
