// f64 math under no_std; redundant when std is linked.
#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::format;
use alloc::vec::Vec;

use crate::archive::ArchiveEntry;
use crate::error::{Error, Result};
use crate::graph::{Bound, Grads};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay, one moment pair per parameter of a store.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update using the gradients of `bound` (the store's leaves
    /// in a graph). Parameters without a gradient keep their values but
    /// their moments still decay.
    pub fn step(&mut self, store: &mut ParamStore<T>, bound: &Bound, grads: &Grads<T>) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::from_f64(self.cfg.lr * bc2.sqrt() / bc1);
        let eps = T::from_f64(self.cfg.eps * bc2.sqrt());
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        for (i, (param, (m, v))) in store
            .tensors_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            let grad = grads.get(bound.vars[i]);
            let pd = param.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            match grad {
                Some(gt) => {
                    for (((p, mm), vv), &gv) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(gt.data()) {
                        *mm = b1t * *mm + one_b1 * gv;
                        *vv = b2t * *vv + one_b2 * gv * gv;
                        *p -= lr * *mm / (vv.sqrt() + eps);
                    }
                }
                None => {
                    for (mm, vv) in md.iter_mut().zip(vd.iter_mut()) {
                        *mm *= b1t;
                        *vv *= b2t;
                    }
                }
            }
        }
    }

    pub fn to_entries(&self, prefix: &str, store: &ParamStore<T>) -> Vec<ArchiveEntry> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        out.push(ArchiveEntry::scalar_f64(&format!("{prefix}.step"), self.step as f64));
        for (i, (name, _)) in store.iter().enumerate() {
            out.push(ArchiveEntry::from_tensor(&format!("{prefix}.m.{name}"), &self.m[i]));
            out.push(ArchiveEntry::from_tensor(&format!("{prefix}.v.{name}"), &self.v[i]));
        }
        out
    }

    /// Restores moments saved by [`Adam::to_entries`].
    pub fn load_entries(&mut self, prefix: &str, store: &ParamStore<T>, entries: &[ArchiveEntry]) -> Result<()> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::MissingKey(name.into()))
        };
        let step = find(&format!("{prefix}.step"))?.first_f64().unwrap_or(0.0);
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (name, t) in store.iter() {
            for (kind, dst) in [("m", &mut m), ("v", &mut v)] {
                let key = format!("{prefix}.{kind}.{name}");
                let e = find(&key)?;
                if e.dims != t.shape() {
                    return Err(Error::ShapeMismatch {
                        name: key,
                        expected: t.shape().to_vec(),
                        found: e.dims.clone(),
                    });
                }
                dst.push(e.to_tensor()?);
            }
        }
        self.step = step as u64;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
