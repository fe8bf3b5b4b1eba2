//! Checkpoint directories: `manifest.json` plus one `.amdt` file per
//! parameter and per running-statistics buffer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

const FORMAT: &str = "amd-checkpoint/1";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec: ModelSpec,
    pub dtype: DType,
    pub epoch: usize,
    /// Test accuracy per completed epoch.
    pub metric_history: Vec<f64>,
    pub params: Vec<TensorEntry>,
    pub running_mean: Vec<TensorEntry>,
    pub running_var: Vec<TensorEntry>,
}

fn entry(name: &str, suffix: &str, shape: &[usize]) -> TensorEntry {
    TensorEntry {
        name: name.to_string(),
        file: format!("{name}{suffix}.amdt"),
        shape: shape.to_vec(),
    }
}

impl<T: Scalar> Model<T> {
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>, epoch: usize, metric_history: &[f64]) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest {
            format: FORMAT.into(),
            spec: self.spec().clone(),
            dtype: T::DTYPE,
            epoch,
            metric_history: metric_history.to_vec(),
            params: Vec::new(),
            running_mean: Vec::new(),
            running_var: Vec::new(),
        };
        for p in self.params() {
            let e = entry(&p.name, "", p.value.shape());
            p.value.save(dir.join(&e.file))?;
            manifest.params.push(e);
        }
        for r in self.running_stats() {
            let shape = [r.mean.len()];
            let em = entry(&r.name, ".running_mean", &shape);
            Tensor::new(&shape, r.mean.clone())?.save(dir.join(&em.file))?;
            let ev = entry(&r.name, ".running_var", &shape);
            Tensor::new(&shape, r.var.clone())?.save(dir.join(&ev.file))?;
            manifest.running_mean.push(em);
            manifest.running_var.push(ev);
        }
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Rebuilds the model described by the manifest and fills in the stored
    /// tensors.
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Self, Manifest)> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        // Initial values are overwritten; any seed will do.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Model::<T>::new(manifest.spec.clone(), &mut rng)?;
        if manifest.params.len() != model.params().len() || manifest.running_mean.len() != model.running_stats().len()
        {
            return Err(Error::Format(format!(
                "{}: tensor list does not match the model spec",
                dir.display()
            )));
        }
        for (p, e) in model.params_mut().iter_mut().zip(&manifest.params) {
            if p.name != e.name {
                return Err(Error::Format(format!("expected parameter {}, found {}", p.name, e.name)));
            }
            let t = Tensor::<T>::load(dir.join(&e.file))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("checkpoint", t.shape(), p.value.shape()));
            }
            p.value = t;
        }
        for ((r, em), ev) in model
            .running_stats_mut()
            .iter_mut()
            .zip(&manifest.running_mean)
            .zip(&manifest.running_var)
        {
            let mean = Tensor::<T>::load(dir.join(&em.file))?;
            let var = Tensor::<T>::load(dir.join(&ev.file))?;
            if mean.numel() != r.mean.len() || var.numel() != r.var.len() {
                return Err(Error::shape("checkpoint", mean.shape(), &[r.mean.len()]));
            }
            r.mean = mean.into_data();
            r.var = var.into_data();
        }
        Ok((model, manifest))
    }
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("{}: unknown format {}", path.display(), manifest.format)));
    }
    Ok(manifest)
}
