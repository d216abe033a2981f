//! Named parameters, the AdamW optimizer, and the checkpoint format.
//!
//! A checkpoint is a pair of files: a flat blob of little-endian `f64` values,
//! one parameter after another, and a JSON manifest mapping each parameter name
//! to its shape and byte offset in the blob.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ParamId = usize;

#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }
}

/// Every trainable tensor of a model, addressable by id or by unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        tensor.set_requires_grad(true);
        let n = tensor.numel();
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> std::ops::Range<ParamId> {
        0..self.params.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            let _ = p.tensor.set_grad(None);
        }
    }

    /// Name of the first parameter holding a non-finite gradient, if any.
    pub fn first_non_finite_grad(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
            .map(|p| p.name.as_str())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Writes the value blob and its JSON manifest.
    pub fn save_checkpoint(&self, bin_path: &Path, manifest_path: &Path) -> Result<()> {
        let mut blob = Vec::with_capacity(self.num_values() * 8);
        let mut entries = Vec::with_capacity(self.params.len());
        for p in &self.params {
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for v in p.tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            dtype: "f64-le".into(),
            total_bytes: blob.len() as u64,
            params: entries,
        };
        fs::write(bin_path, &blob).map_err(|e| Error::io(bin_path, e))?;
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::format(manifest_path, e.to_string()))?;
        fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
        Ok(())
    }

    /// Loads values into an already-built store. Every parameter in the store
    /// must appear in the manifest with the same shape.
    pub fn load_checkpoint(&mut self, bin_path: &Path, manifest_path: &Path) -> Result<()> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(manifest_path, e.to_string()))?;
        let blob = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
        if manifest.dtype != "f64-le" {
            return Err(Error::format(
                manifest_path,
                format!("unsupported dtype {:?}", manifest.dtype),
            ));
        }
        if manifest.params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters but the model has {}",
                manifest.params.len(),
                self.params.len()
            )));
        }
        for entry in &manifest.params {
            let id = self.id_of(&entry.name).ok_or_else(|| {
                Error::Config(format!("checkpoint parameter {:?} not in model", entry.name))
            })?;
            let p = &mut self.params[id];
            if p.tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {:?}: checkpoint shape {:?} vs model shape {:?}",
                    entry.name,
                    entry.shape,
                    p.tensor.shape()
                )));
            }
            let start = entry.offset as usize;
            let end = start + p.tensor.numel() * 8;
            let bytes = blob.get(start..end).ok_or_else(|| {
                Error::format(bin_path, format!("truncated data for {:?}", entry.name))
            })?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            crate::tensor::check_finite(&values, &entry.name)?;
            p.tensor.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    total_bytes: u64,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamW {
    /// One update of every parameter. Gradients are read, not cleared.
    pub fn step(&self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let missing: Vec<&str> = store
            .params
            .iter()
            .filter(|p| p.tensor.grad().is_none())
            .map(|p| p.name.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Contract(format!(
                "adamw step without gradients for: {}",
                missing.join(", ")
            )));
        }
        let (b1, b2) = self.betas;
        for p in &mut store.params {
            p.step += 1;
            let bc1 = 1.0 - b1.powi(p.step as i32);
            let bc2 = 1.0 - b2.powi(p.step as i32);
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let m = &mut p.first_moment;
            let v = &mut p.second_moment;
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * self.weight_decay * data[i];
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            crate::tensor::check_finite(data, &p.name)?;
        }
        Ok(())
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(shape.to_vec(), data).expect("finite normal draws")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::zeros(shape.to_vec())
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape.to_vec(), 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn scalar_store(p: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new([1], vec![p]).unwrap()).unwrap();
        s.get_mut(id).tensor_mut().set_grad(Some(vec![g])).unwrap();
        s
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut s = scalar_store(1.0, 0.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(0).tensor().data(), &[1.0]);
        assert_eq!(s.get(0).step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0, 1.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.get(0).tensor().data()[0] - 0.9).abs() < 1e-6);
        // grads are left in place for the caller to clear
        assert_eq!(s.get(0).tensor().grad(), Some(&[1.0][..]));
    }

    #[test]
    fn decoupled_decay() {
        let mut s = scalar_store(1.0, 0.0);
        let opt = AdamW {
            weight_decay: 0.1,
            ..AdamW::default()
        };
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.get(0).tensor().data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn missing_grads_listed() {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::zeros([2])).unwrap();
        s.add("b.w", Tensor::zeros([2])).unwrap();
        let err = AdamW::default().step(&mut s, 0.1).unwrap_err().to_string();
        assert!(err.contains("a.w") && err.contains("b.w"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros([1])).unwrap();
        assert!(s.add("w", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add("enc.w", init::normal_tensor(&mut rng, &[3, 4], 1.0)).unwrap();
        s.add("enc.b", init::normal_tensor(&mut rng, &[4], 1.0)).unwrap();
        let (bin, man) = (dir.path().join("p.bin"), dir.path().join("p.json"));
        s.save_checkpoint(&bin, &man).unwrap();
        assert_eq!(std::fs::metadata(&bin).unwrap().len(), 16 * 8);

        let mut t = ParamStore::new();
        t.add("enc.w", Tensor::zeros([3, 4])).unwrap();
        t.add("enc.b", Tensor::zeros([4])).unwrap();
        t.load_checkpoint(&bin, &man).unwrap();
        for (a, b) in s.iter().zip(t.iter()) {
            assert_eq!(a.tensor().data(), b.tensor().data());
        }

        let mut wrong = ParamStore::new();
        wrong.add("enc.w", Tensor::zeros([4, 3])).unwrap();
        wrong.add("enc.b", Tensor::zeros([4])).unwrap();
        let err = wrong.load_checkpoint(&bin, &man).unwrap_err().to_string();
        assert!(err.contains("enc.w"), "{err}");
    }
}
