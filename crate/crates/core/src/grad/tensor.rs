use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Rank 0 (`dims == []`) is a scalar holding one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {expected} values, got {}", values.len()),
            ));
        }
        Ok(Self { dims, values })
    }

    pub fn scalar(v: f64) -> Self {
        Self { dims: Vec::new(), values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "empty vector tensor");
        Self { dims: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], v: f64) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), values: vec![v; n] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rows and columns when viewed as a matrix (rank ≤ 1 is a single row).
    pub(crate) fn as_matrix(&self) -> (usize, usize) {
        match self.dims.len() {
            0 => (1, 1),
            1 => (1, self.dims[0]),
            _ => {
                let cols = *self.dims.last().unwrap();
                (self.values.len() / cols, cols)
            }
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { dims: self.dims.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Name → tensor map with lexicographic iteration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NamedParams(BTreeMap<String, Tensor>);

impl NamedParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    /// Zero tensors with the same names and dims.
    pub fn zeros_like(&self) -> Self {
        Self(self.0.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.dims()))).collect())
    }

    /// Global L2 norm over every tensor.
    pub fn global_norm(&self) -> f64 {
        self.0.values().map(Tensor::squared_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.values_mut() {
            t.values_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Elementwise `self += other` on matching names.
    pub fn add_assign(&mut self, other: &NamedParams) -> Result<()> {
        for (name, t) in other.iter() {
            let dst = self
                .0
                .get_mut(name)
                .ok_or_else(|| Error::usage(format!("unknown parameter `{name}`")))?;
            if dst.dims() != t.dims() {
                return Err(Error::shape("add_assign", format!("`{name}`: {:?} vs {:?}", dst.dims(), t.dims())));
            }
            dst.values_mut().iter_mut().zip(t.values()).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Union of two disjoint parameter sets.
    pub fn merged(&self, other: &NamedParams) -> Result<Self> {
        let mut out = self.clone();
        for (k, t) in other.iter() {
            if out.insert(k.clone(), t.clone()).is_some() {
                return Err(Error::usage(format!("duplicate parameter `{k}`")));
            }
        }
        Ok(out)
    }

    /// Parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self(self.0.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, t)| (k.clone(), t.clone())).collect())
    }
}

impl FromIterator<(String, Tensor)> for NamedParams {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl IntoIterator for NamedParams {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_must_match_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Shape { .. })));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn named_params_iterate_lexicographically() {
        let mut p = NamedParams::new();
        p.insert("b", Tensor::scalar(1.0));
        p.insert("a", Tensor::scalar(2.0));
        p.insert("c.x", Tensor::scalar(3.0));
        let names: Vec<_> = p.names().cloned().collect();
        assert_eq!(names, ["a", "b", "c.x"]);
    }

    #[test]
    fn global_norm_and_scale() {
        let mut p = NamedParams::new();
        p.insert("a", Tensor::vector(vec![3.0]));
        p.insert("b", Tensor::vector(vec![4.0]));
        assert_eq!(p.global_norm(), 5.0);
        p.scale(0.5);
        assert_eq!(p.global_norm(), 2.5);
    }
}
