//! Named parameter storage with seeded initialization and safetensors I/O.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;

use crate::random::gaussian_tensor;
use crate::{Error, Result};

/// Owns every trainable parameter and non-trainable buffer of a model.
///
/// Layers hold clones of the underlying tensors; `Var::set` updates storage
/// in place, so optimizer steps and checkpoint loads are visible to them.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        ParamStore {
            dtype,
            device,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> Result<Tensor> {
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let tensor = var.as_tensor().clone();
        if trainable {
            self.params.insert(name, var);
        } else {
            self.buffers.insert(name, var);
        }
        Ok(tensor)
    }

    /// Gaussian parameter with the given standard deviation.
    pub fn normal<S: Into<Shape>, R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: S,
        std: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        let t = gaussian_tensor(shape, DType::F64, &self.device, rng)?.affine(std, 0.0)?;
        self.insert(name.into(), t, true)
    }

    pub fn zeros<S: Into<Shape>>(&mut self, name: impl Into<String>, shape: S) -> Result<Tensor> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(name.into(), t, true)
    }

    pub fn ones<S: Into<Shape>>(&mut self, name: impl Into<String>, shape: S) -> Result<Tensor> {
        let t = Tensor::ones(shape, self.dtype, &self.device)?;
        self.insert(name.into(), t, true)
    }

    /// A non-trainable tensor that is still saved with the checkpoint.
    pub fn buffer(&mut self, name: impl Into<String>, init: Tensor) -> Result<Var> {
        let name = name.into();
        self.insert(name.clone(), init, false)?;
        Ok(self.buffers[&name].clone())
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn named_trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn num_trainable(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every parameter and buffer.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrite values from a snapshot. Names and shapes must match exactly.
    pub fn load_snapshot(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if values.len() != expected {
            return Err(Error::Checkpoint(format!(
                "snapshot has {} tensors, model has {expected}",
                values.len()
            )));
        }
        for (name, var) in self.params.iter().chain(&self.buffers) {
            let src = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Snapshot of the trainable parameters only.
    pub fn trainable_snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrite trainable parameters, leaving buffers untouched.
    pub fn load_trainable(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors supplied for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (name, var) in &self.params {
            let src = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: HashMap<String, Tensor> = self.snapshot()?.into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        self.load_snapshot(&map.into_iter().collect())
    }
}
