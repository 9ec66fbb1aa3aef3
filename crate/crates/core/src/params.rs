//! Named parameter storage and seeded initializers.

// f64 math under no_std; redundant when std is linked.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::archive::{ArchiveEntry, TensorData};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An ordered collection of named tensors belonging to one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a tensor. Panics on duplicate names (a model-construction bug).
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn to_entries(&self) -> Vec<ArchiveEntry> {
        self.iter()
            .map(|(name, t)| ArchiveEntry::from_tensor(name, t))
            .collect()
    }

    /// Overwrites every parameter from `entries`, which must contain each name
    /// with the exact shape and element type. Extra entries are ignored.
    pub fn load_entries(&mut self, entries: &[ArchiveEntry]) -> Result<()> {
        let by_name: BTreeMap<&str, &ArchiveEntry> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut staged = Vec::with_capacity(self.tensors.len());
        for (name, current) in self.iter() {
            let entry = by_name
                .get(name)
                .ok_or_else(|| Error::MissingKey(name.to_string()))?;
            if entry.dims != current.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: current.shape().to_vec(),
                    found: entry.dims.clone(),
                });
            }
            if entry.data.dtype() != T::DTYPE {
                return Err(Error::DtypeMismatch {
                    name: name.to_string(),
                    expected: T::DTYPE,
                    found: entry.data.dtype(),
                });
            }
            staged.push(entry.to_tensor::<T>()?);
        }
        self.tensors = staged;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

impl TensorData {
    pub fn dtype(&self) -> crate::real::DType {
        match self {
            TensorData::F32(_) => crate::real::DType::F32,
            TensorData::F64(_) => crate::real::DType::F64,
        }
    }
}

pub fn uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..=bound)))
}

pub fn normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}

/// Conv weight `out×in×k×k` whose flattened rows (or columns, when there are
/// more rows than the fan-in) are orthonormal, scaled by `gain`.
pub fn orthogonal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], gain: f64) -> Tensor<T> {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let (m, n) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    // m vectors of length n, Gram–Schmidt orthonormalized.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Tensor::from_fn(shape, |i| {
        let (r, c) = (i / cols, i % cols);
        let v = if rows <= cols { basis[r][c] } else { basis[c][r] };
        T::from_f64(gain * v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Tensor<f64> = orthogonal(&mut rng, &[4, 2, 3, 3], 1.0);
        let d = w.data();
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..18).map(|i| d[a * 18 + i] * d[b * 18 + i]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn load_rejects_missing_and_mismatched() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a.weight", Tensor::zeros(&[2, 3]));
        store.insert("a.bias", Tensor::zeros(&[2]));
        let mut entries = store.to_entries();
        entries.pop();
        assert_eq!(
            store.clone().load_entries(&entries),
            Err(Error::MissingKey("a.bias".into()))
        );
        let transposed = ArchiveEntry::from_tensor("a.weight", &Tensor::<f32>::zeros(&[3, 2]));
        let entries = [transposed, ArchiveEntry::from_tensor("a.bias", &Tensor::<f32>::zeros(&[2]))];
        assert!(matches!(
            store.clone().load_entries(&entries),
            Err(Error::ShapeMismatch { .. })
        ));
        let wrong_dtype: ParamStore<f64> = store.cast();
        assert!(matches!(
            store.load_entries(&wrong_dtype.to_entries()),
            Err(Error::DtypeMismatch { .. })
        ));
    }
}
