use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Ordered `(name, shape)` entries describing a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl Layout {
    pub fn new(entries: Vec<(String, Vec<usize>)>) -> Self {
        Self { entries }
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|(_, s)| numel(s)).sum()
    }

    /// Half-open offset range of every entry.
    pub fn ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut at = 0;
        self.entries
            .iter()
            .map(|(_, s)| {
                let r = at..at + numel(s);
                at = r.end;
                r
            })
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }
}

/// Flattened model parameters with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl ParameterVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Layout(format!("{} values for a layout of {}", values.len(), layout.total())));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total();
        Self { values: vec![0.0; n], layout }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Layout("parameter vectors have different layouts".into()))
        }
    }

    /// Splits into one tensor per layout entry.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.layout
            .entries
            .iter()
            .zip(self.layout.ranges())
            .map(|((_, shape), r)| Tensor::new(shape.clone(), self.values[r].to_vec()))
            .collect()
    }

    pub fn from_tensors(layout: Arc<Layout>, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != layout.entries.len() {
            return Err(Error::Layout(format!("{} tensors for {} layout entries", tensors.len(), layout.entries.len())));
        }
        let mut values = Vec::with_capacity(layout.total());
        for ((name, shape), t) in layout.entries.iter().zip(tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Layout(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
            values.extend_from_slice(t.data());
        }
        Ok(Self { values, layout })
    }

    /// Records every entry as a leaf on `tape`.
    pub fn vars<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.to_tensors().into_iter().map(|t| tape.input(t)).collect()
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        let r = self.layout.ranges()[i].clone();
        &self.values[r]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { values: self.values.iter().map(|&v| f(v)).collect(), layout: self.layout.clone() }
    }

    /// Element-wise combination; panics on differing lengths.
    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.len(), other.len(), "parameter vector length mismatch");
        Self {
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn digest(&self) -> String {
        crate::rng::digest_f64s(&self.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Arc<Layout> {
        Arc::new(Layout::new(vec![("a".into(), vec![2, 3]), ("b".into(), vec![3]), ("c".into(), vec![1, 1, 2, 2])]))
    }

    proptest! {
        #[test]
        fn flatten_round_trip_is_exact(values in proptest::collection::vec(-1e6f64..1e6, 13)) {
            let p = ParameterVector::new(layout(), values.clone()).unwrap();
            let back = ParameterVector::from_tensors(layout(), &p.to_tensors()).unwrap();
            prop_assert_eq!(back.values, values);
        }
    }

    #[test]
    fn length_must_match_layout() {
        assert!(ParameterVector::new(layout(), vec![0.0; 12]).is_err());
        assert_eq!(layout().total(), 13);
        assert_eq!(layout().ranges()[2], 9..13);
    }
}
