use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Matrix;
use crate::{Error, Result};

/// Handle to one named parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter '{name}'");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-normal weights for a `fan_in x fan_out` linear map.
    pub fn add_he(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        self.add_normal(name, fan_in, fan_out, std, rng)
    }

    pub fn add_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let n = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Copies every parameter whose name starts with `prefix` from `other`,
    /// requiring matching shapes. Returns how many arrays were copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let id = self
                .find(name)
                .ok_or_else(|| Error::DimensionMismatch(format!("parameter '{name}' missing in target model")))?;
            if self.get(id).shape() != value.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "parameter '{name}': checkpoint {:?} vs model {:?}",
                    value.shape(),
                    self.get(id).shape()
                )));
            }
            *self.get_mut(id) = value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for m in &mut self.values {
            for v in m.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// A zero-filled store with identical names and shapes.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }
}
