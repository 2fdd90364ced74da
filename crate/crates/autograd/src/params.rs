use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::graph::Array;

/// Named parameter arrays, ordered by name.
///
/// Values are reference counted so binding a store to a [`crate::Graph`] does
/// not copy weights; mutation goes through [`ParamStore::get_mut`], which
/// copies on write if a tape still holds the old value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Array>>,
}

impl ParamStore {
    pub const fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(
            name.into(),
            Arc::new(value.as_standard_layout().into_owned()),
        );
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name).map(|a| a.as_ref())
    }

    pub(crate) fn get_arc(&self, name: &str) -> Option<Arc<Array>> {
        self.params.get(name).cloned()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array> {
        self.params
            .remove(name)
            .map(|a| Arc::try_unwrap(a).unwrap_or_else(|a| (*a).clone()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Total scalar count over all arrays.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Scalar count over names starting with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, a)| a.len())
            .sum()
    }

    /// Copy of the entries under `prefix`, renamed to `new_prefix`.
    pub fn extract(&self, prefix: &str, new_prefix: &str) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter_map(|(n, v)| {
                n.strip_prefix(prefix)
                    .map(|rest| (format!("{new_prefix}{rest}"), Arc::clone(v)))
            })
            .collect();
        ParamStore { params }
    }

    /// Inserts every entry of `other`, replacing existing names.
    pub fn merge(&mut self, other: &ParamStore) {
        for (n, v) in &other.params {
            self.params.insert(n.clone(), Arc::clone(v));
        }
    }

    /// Little-endian bytes of every array under `prefix`, in name order.
    pub fn bytes_with_prefix(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, a) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Uniform `U(-bound, bound)` array.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Array {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..=bound))
}

/// Default convolution weight init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// where fan-in is the product of every dimension after the first.
pub fn conv_weight(shape: &[usize], rng: &mut impl Rng) -> Array {
    let fan_in: usize = shape[1..].iter().product();
    uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

pub fn zeros(shape: &[usize]) -> Array {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Array {
    ArrayD::ones(IxDyn(shape))
}
