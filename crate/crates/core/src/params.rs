use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// Named parameter arrays, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    /// Same names with zero-filled arrays.
    pub fn zeros_like(&self) -> Params {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Params {
        Params {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Copy of every entry with `prefix` prepended to its name.
    pub fn with_prefix(&self, prefix: &str) -> Params {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Params) {
        self.map.extend(other.map);
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.map {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Names whose shapes differ from `expected`, plus missing and extra names.
    pub fn shape_mismatches(&self, expected: &BTreeMap<String, Vec<usize>>) -> Vec<String> {
        let mut bad = Vec::new();
        for (name, shape) in expected {
            match self.map.get(name) {
                None => bad.push(format!("missing {name}")),
                Some(t) if t.shape() != shape.as_slice() => {
                    bad.push(format!("{name}: expected {shape:?}, found {:?}", t.shape()))
                }
                _ => {}
            }
        }
        for name in self.map.keys() {
            if !expected.contains_key(name) {
                bad.push(format!("unexpected {name}"));
            }
        }
        bad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_sees_bit_changes() {
        let mut p = Params::new();
        p.insert("a", Tensor::new(vec![2], vec![0.0, 1.0]));
        let d0 = p.digest();
        p.get_mut("a").unwrap().data_mut()[0] = -0.0;
        assert_ne!(d0, p.digest());
    }

    #[test]
    fn prefix_round_trip() {
        let mut p = Params::new();
        p.insert("w", Tensor::scalar(1.0));
        assert_eq!(p.with_prefix("gen/").strip_prefix("gen/"), p);
    }
}
