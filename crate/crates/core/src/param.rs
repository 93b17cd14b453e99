//! Flat parameter vectors with a named layout.
//!
//! Every trainable weight of a model lives in one `ParameterVector`; the
//! `ParamLayout` fixes the flattening order so gradients, Fisher diagonals
//! and priors all index the same coordinates.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        LayoutEntry {
            name: name.into(),
            shape,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
}

impl ParamLayout {
    pub fn new(entries: Vec<LayoutEntry>) -> Self {
        ParamLayout { entries }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(LayoutEntry::len).sum()
    }

    /// Index range of the `idx`-th entry within the flat vector.
    pub fn range(&self, idx: usize) -> Range<usize> {
        let start: usize = self.entries[..idx].iter().map(LayoutEntry::len).sum();
        start..start + self.entries[idx].len()
    }
}

/// Flat view of all trainable weights, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let n = layout.total_len();
        ParameterVector {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::shape(format!(
                "layout holds {} parameters, got {} values",
                layout.total_len(),
                values.len()
            )));
        }
        Ok(ParameterVector { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
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

    fn check_same_layout(&self, other: &ParameterVector) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::shape(format!(
                "parameter vectors differ in length: {} vs {}",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(())
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &ParameterVector) -> Result<()> {
        self.check_same_layout(x)?;
        for (s, &v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParameterVector) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new(vec![
            LayoutEntry::new("l0.weight", vec![3, 2]),
            LayoutEntry::new("l0.bias", vec![3]),
        ]))
    }

    #[test]
    fn total_len_is_sum_of_entry_products() {
        assert_eq!(layout().total_len(), 9);
    }

    #[test]
    fn ranges_partition_the_vector() {
        let l = layout();
        assert_eq!(l.range(0), 0..6);
        assert_eq!(l.range(1), 6..9);
    }

    #[test]
    fn from_values_rejects_wrong_length() {
        let err = ParameterVector::from_values(layout(), vec![0.0; 4]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn axpy_and_norm() {
        let l = layout();
        let mut a = ParameterVector::zeros(l.clone());
        let b = ParameterVector::from_values(l, vec![1.0; 9]).unwrap();
        a.axpy(2.0, &b).unwrap();
        assert_eq!(a.values()[0], 2.0);
        assert!((a.l2_norm() - (4.0 * 9.0f64).sqrt()).abs() < 1e-15);
    }
}
