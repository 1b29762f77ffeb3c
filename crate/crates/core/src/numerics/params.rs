use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::{Matrix, Real};
use super::NumericsError;

/// A trainable tensor with its declared dimensions (rank 1 or 2).
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub dims: Vec<usize>,
    pub value: Matrix<T>,
}

/// Named trainable parameters, iterated in sorted-name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, Parameter<T>>,
    pub rng_seed: u64,
}

fn matrix_shape(dims: &[usize]) -> (usize, usize) {
    match dims {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => panic!("parameters are rank 1 or 2, got {dims:?}"),
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the store seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl<T: Real> ParameterStore<T> {
    pub fn new(rng_seed: u64) -> Self {
        Self { entries: BTreeMap::new(), rng_seed }
    }

    /// Register and initialize parameters.
    ///
    /// Rank-2 entries are drawn uniformly from `±sqrt(6 / (fan_in + fan_out))`;
    /// rank-1 entries are zero, except names ending in `.gain`, which start at one.
    /// Each entry draws from its own stream seeded by `(rng_seed, name)`.
    pub fn init_parameters(&mut self, spec: &[(String, Vec<usize>)]) -> Result<(), NumericsError> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in spec {
            if !seen.insert(name.as_str()) || self.entries.contains_key(name) {
                return Err(NumericsError::DuplicateParameter(name.clone()));
            }
        }
        for (name, dims) in spec {
            let (rows, cols) = matrix_shape(dims);
            let value = if dims.len() == 2 {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.rng_seed, name));
                let data = (0..rows * cols).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
                Matrix::from_vec(rows, cols, data)
            } else if name.ends_with(".gain") {
                Matrix::filled(rows, cols, T::one())
            } else {
                Matrix::zeros(rows, cols)
            };
            self.entries.insert(name.clone(), Parameter { dims: dims.clone(), value });
        }
        Ok(())
    }

    /// Insert a parameter with an explicit value (checkpoint loading, tests).
    pub fn insert(&mut self, name: &str, dims: Vec<usize>, value: Matrix<T>) -> Result<(), NumericsError> {
        if matrix_shape(&dims) != value.shape() {
            return Err(NumericsError::Shape {
                op: "insert",
                detail: format!("{name}: dims {dims:?} disagree with {}x{}", value.rows(), value.cols()),
            });
        }
        if self.entries.contains_key(name) {
            return Err(NumericsError::DuplicateParameter(name.to_string()));
        }
        self.entries.insert(name.to_string(), Parameter { dims, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<T>)> {
        self.entries.iter_mut()
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

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Parameter { dims: p.dims.clone(), value: p.value.cast() }))
                .collect(),
            rng_seed: self.rng_seed,
        }
    }
}
