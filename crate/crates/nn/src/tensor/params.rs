use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let params = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let mut bytes = Vec::with_capacity(t.numel() * std::mem::size_of::<T>());
                T::write_le(t.data(), &mut bytes);
                CheckpointEntry { name: name.clone(), shape: t.shape().to_vec(), data: B64.encode(bytes) }
            })
            .collect();
        Checkpoint { format: FORMAT.into(), version: VERSION, dtype: T::DTYPE.into(), meta, params }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TensorError> {
        ck.check_header::<T>()?;
        let mut store = ParamStore::new();
        for e in &ck.params {
            let bytes = B64.decode(&e.data).map_err(|err| TensorError::Checkpoint(format!("{}: {err}", e.name)))?;
            let data = T::read_le(&bytes).ok_or_else(|| TensorError::Checkpoint(format!("{}: ragged payload", e.name)))?;
            let t = Tensor::from_vec(&e.shape, data).map_err(|err| TensorError::Checkpoint(format!("{}: {err}", e.name)))?;
            store.add(e.name.clone(), t);
        }
        Ok(store)
    }

    /// Overwrites values by name; names and shapes must line up exactly.
    pub fn load_values(&mut self, ck: &Checkpoint) -> Result<(), TensorError> {
        let other = Self::from_checkpoint(ck)?;
        if other.names != self.names {
            return Err(TensorError::Checkpoint("parameter names differ from the model's".into()));
        }
        for (mine, theirs) in self.tensors.iter().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(TensorError::Checkpoint(format!("shape {:?} vs {:?}", theirs.shape(), mine.shape())));
            }
        }
        self.tensors = other.tensors;
        Ok(())
    }
}

const FORMAT: &str = "hitpix-params";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Base64 of the little-endian payload.
    pub data: String,
}

/// JSON container: parameter name → shape + little-endian payload, plus
/// free-form model metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub meta: serde_json::Value,
    pub params: Vec<CheckpointEntry>,
}

impl Checkpoint {
    fn check_header<T: Real>(&self) -> Result<(), TensorError> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported container {} v{}", self.format, self.version)));
        }
        if self.dtype != T::DTYPE {
            return Err(TensorError::Checkpoint(format!("payload is {}, expected {}", self.dtype, T::DTYPE)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TensorError> {
        serde_json::from_str(text).map_err(|e| TensorError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        std::fs::write(path, self.to_json()).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::randn(&[3, 4], 1.0, &mut rng));
        let mut odd = Tensor::zeros(&[3]);
        odd.data_mut().copy_from_slice(&[f32::MIN_POSITIVE, -0.0, 1e-45]);
        store.add("odd", odd);
        let ck = store.to_checkpoint(serde_json::json!({"k": 1}));
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        let restored = ParamStore::<f32>::from_checkpoint(&back).unwrap();
        for id in store.ids() {
            let a: Vec<u32> = store.get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = restored.get(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(back.meta["k"], 1);
    }

    #[test]
    fn checkpoint_rejects_mismatch() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2]));
        let ck = store.to_checkpoint(serde_json::Value::Null);
        assert!(ParamStore::<f64>::from_checkpoint(&ck).is_err());
        let mut other = ParamStore::<f32>::new();
        other.add("w", Tensor::zeros(&[3]));
        assert!(other.load_values(&ck).is_err());
    }
}
