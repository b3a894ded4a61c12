//! Flat parameter storage with named segments.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::scalar::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// `(rows, cols)` for two-dimensional segments.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Canonical segment registry. Segment order fixes the flattened order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn new(named_shapes: Vec<(String, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let segments = named_shapes
            .into_iter()
            .map(|(name, shape)| {
                let seg = Segment { name, shape, offset };
                offset += seg.len();
                seg
            })
            .collect();
        Layout { segments, len: offset }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn range_of(&self, name: &str) -> Range<usize> {
        self.segment(name)
            .unwrap_or_else(|| panic!("no segment named `{name}`"))
            .range()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec<T = f64> {
    layout: Arc<Layout>,
    data: Vec<T>,
}

/// The f64 working copy used by all metric arithmetic.
pub type ParameterVector = ParamVec<f64>;

impl<T: Real> ParamVec<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![T::zero(); layout.len()];
        ParamVec { layout, data }
    }

    pub fn from_vec(layout: Arc<Layout>, data: Vec<T>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::Input(format!(
                "parameter data has {} elements, layout expects {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(ParamVec { layout, data })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segment(&self, name: &str) -> &[T] {
        &self.data[self.layout.range_of(name)]
    }

    pub fn segment_mut(&mut self, name: &str) -> &mut [T] {
        let r = self.layout.range_of(name);
        &mut self.data[r]
    }

    /// `(segment, slice)` pairs in canonical order.
    pub fn segments(&self) -> impl Iterator<Item = (&Segment, &[T])> {
        self.layout.segments().iter().map(move |s| (s, &self.data[s.range()]))
    }

    pub fn to_f64(&self) -> ParameterVector {
        ParamVec {
            layout: Arc::clone(&self.layout),
            data: self.data.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamVec<U> {
        ParamVec {
            layout: Arc::clone(&self.layout),
            data: self.data.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamVec<impl Real>) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    /// First segment holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.segments()
            .find(|(_, xs)| xs.iter().any(|x| !x.is_finite()))
            .map(|(s, _)| s.name.as_str())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::BYTES);
        for &x in &self.data {
            x.put_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(layout: Arc<Layout>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != layout.len() * T::BYTES {
            return Err(Error::Input(format!(
                "expected {} bytes for {} parameters, got {}",
                layout.len() * T::BYTES,
                layout.len(),
                bytes.len()
            )));
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::get_le).collect();
        Ok(ParamVec { layout, data })
    }
}

impl ParamVec<f64> {
    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn scaled(&self, k: f64) -> Self {
        self.map(|x| x * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ParamVec {
            layout: Arc::clone(&self.layout),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.len(), other.len(), "parameter vectors differ in length");
        ParamVec {
            layout: Arc::clone(&self.layout),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot of unequal lengths");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity, `None` when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<Layout> {
        Arc::new(Layout::new(vec![("w".into(), vec![2, 3]), ("b".into(), vec![3])]))
    }

    #[test]
    fn offsets_and_lengths() {
        let l = layout();
        assert_eq!(l.len(), 9);
        assert_eq!(l.range_of("b"), 6..9);
        assert_eq!(l.segment("w").unwrap().matrix_dims(), Some((2, 3)));
        assert_eq!(l.segment("b").unwrap().matrix_dims(), None);
    }

    #[test]
    fn byte_round_trip() {
        let v = ParamVec::<f32>::from_vec(layout(), (0..9).map(|i| i as f32 * 0.25).collect()).unwrap();
        let back = ParamVec::<f32>::from_le_bytes(layout(), &v.to_le_bytes()).unwrap();
        assert_eq!(v, back);
        assert!(ParamVec::<f64>::from_le_bytes(layout(), &v.to_le_bytes()).is_err());
    }

    #[test]
    fn non_finite_reports_segment() {
        let mut v = ParamVec::<f64>::zeros(layout());
        assert_eq!(v.first_non_finite(), None);
        v.segment_mut("b")[1] = f64::NAN;
        assert_eq!(v.first_non_finite(), Some("b"));
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert!((cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap()).abs() < 1e-15);
        assert!((cosine(&[1.0, 1.0], &[-2.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
    }
}
