use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{arg_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    value: Arc<Tensor<T>>,
    frozen: bool,
    m: Tensor<T>,
    v: Tensor<T>,
    step: u64,
}

/// Named parameters with per-name freeze flags and Adam moments.
///
/// Iteration order is the lexicographic order of names, which fixes the
/// order of every reduction that walks the store.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Entry<T>>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub(crate) params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor<T>) {
        self.params.insert(name.into(), g);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds `other` into `self` name by name.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (name, g) in &other.params {
            match self.params.get_mut(name) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.params.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return arg_err(format!("duplicate parameter {name}"));
        }
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.entries.insert(
            name,
            Entry {
                value: Arc::new(value),
                frozen: false,
                m,
                v,
                step: 0,
            },
        );
        Ok(())
    }

    fn entry(&self, name: &str) -> Result<&Entry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.value)
    }

    pub(crate) fn shared(&self, name: &str) -> Result<Arc<Tensor<T>>> {
        Ok(Arc::clone(&self.entry(name)?.value))
    }

    /// Replaces a value, keeping its shape, freeze flag and optimizer state.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?;
        if e.value.shape() != value.shape() {
            return arg_err(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                e.value.shape(),
                value.shape()
            ));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool> {
        Ok(self.entry(name)?.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?
            .frozen = frozen;
        Ok(())
    }

    /// Sets every freeze flag from a predicate over names.
    pub fn freeze_where(&mut self, frozen: impl Fn(&str) -> bool) {
        for (name, e) in self.entries.iter_mut() {
            e.frozen = frozen(name);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), e.value.as_ref(), e.frozen))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn num_values_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    /// First-moment, second-moment and step count of a parameter.
    pub fn optimizer_state(&self, name: &str) -> Result<(&Tensor<T>, &Tensor<T>, u64)> {
        let e = self.entry(name)?;
        Ok((&e.m, &e.v, e.step))
    }

    /// Clears all Adam moments, e.g. between training stages.
    pub fn reset_optimizer(&mut self) {
        for e in self.entries.values_mut() {
            e.m = Tensor::zeros(e.value.shape());
            e.v = Tensor::zeros(e.value.shape());
            e.step = 0;
        }
    }

    /// Hex SHA-256 prefix over the little-endian bytes of one parameter.
    pub fn checksum(&self, name: &str) -> Result<String> {
        let e = self.entry(name)?;
        let mut h = Sha256::new();
        for v in e.value.data() {
            h.update((v.as_f64() as f32).to_le_bytes());
        }
        let digest = h.finalize();
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.entries
            .keys()
            .map(|k| (k.clone(), self.checksum(k).expect("known name")))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            value: Arc::new(e.value.cast()),
                            frozen: e.frozen,
                            m: e.m.cast(),
                            v: e.v.cast(),
                            step: e.step,
                        },
                    )
                })
                .collect(),
        }
    }

    /// One Adam update with bias correction.
    ///
    /// Frozen parameters are skipped entirely: neither their value nor their
    /// moments nor their step count change. Unfrozen parameters without a
    /// gradient entry are also left alone.
    pub fn adam_step(&mut self, grads: &Gradients<T>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in &grads.params {
            let e = self.entries.get(name).ok_or_else(|| Error::Argument(format!("gradient for unknown parameter {name}")))?;
            if e.value.shape() != g.shape() {
                return arg_err(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    e.value.shape()
                ));
            }
        }
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        for (name, g) in &grads.params {
            let e = self.entries.get_mut(name).expect("validated");
            if e.frozen {
                continue;
            }
            e.step += 1;
            let bc1 = T::one() - b1.powi(e.step as i32);
            let bc2 = T::one() - b2.powi(e.step as i32);
            let w = Arc::make_mut(&mut e.value);
            let (m, v) = (e.m.data_mut(), e.v.data_mut());
            for (i, (wv, &gv)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * gv;
                v[i] = b2 * v[i] + (T::one() - b2) * gv * gv;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *wv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
