use indexmap::IndexMap;
use ndarray::{ArrayD, ArrayView1, ArrayView2, IxDyn, Zip};

use crate::error::{Error, Result};

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        let t = self.get(name)?;
        t.view()
            .into_dimensionality()
            .map_err(|_| Error::Shape(format!("{name} is not a vector: {:?}", t.shape())))
    }

    pub fn matrix(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        let t = self.get(name)?;
        t.view()
            .into_dimensionality()
            .map_err(|_| Error::Shape(format!("{name} is not a matrix: {:?}", t.shape())))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Adds `value` into the tensor `name`, creating a zero tensor of the same shape first.
    pub fn accumulate(&mut self, name: &str, value: ArrayD<f64>) {
        match self.tensors.get_mut(name) {
            Some(t) => *t += &value,
            None => {
                self.tensors.insert(name.to_string(), value);
            }
        }
    }

    pub fn accumulate_1d(&mut self, name: &str, value: ndarray::Array1<f64>) {
        self.accumulate(name, value.into_dyn());
    }

    pub fn accumulate_2d(&mut self, name: &str, value: ndarray::Array2<f64>) {
        self.accumulate(name, value.into_dyn());
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m: f64 = 0.0;
        for (k, v) in &self.tensors {
            match other.tensors.get(k) {
                Some(o) if o.shape() == v.shape() => {
                    Zip::from(v).and(o).for_each(|a, b| m = m.max((a - b).abs()));
                }
                _ => return f64::INFINITY,
            }
        }
        if other.len() != self.len() {
            return f64::INFINITY;
        }
        m
    }

    /// Rounds every value to single precision, the storage format of checkpoints.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|t| t.shape())
    }

    pub(crate) fn from_parts(parts: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut s = Self::new();
        for (name, shape, data) in parts {
            let t = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            s.insert(name, t);
        }
        Ok(s)
    }
}

/// Trainable parameters plus non-trainable normalization statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    pub params: ParamStore,
    pub buffers: ParamStore,
}
