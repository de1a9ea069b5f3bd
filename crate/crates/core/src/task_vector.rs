//! Task vectors: per-layer deltas between a fine-tuned checkpoint and the
//! pre-trained base it started from.

use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor_store::{validate_compatibility, Checkpoint, LayerCatalog, Tensor};

/// Metadata key holding the hex SHA-256 of the base checkpoint's header.
pub const BASE_FINGERPRINT_KEY: &str = "taskvec.base_fingerprint";
/// Metadata key holding the task label.
pub const TASK_ID_KEY: &str = "taskvec.task_id";

/// Hex SHA-256 digest of a checkpoint's serialized header.
pub fn header_fingerprint(ckpt: &Checkpoint) -> String {
    hex::encode(Sha256::digest(ckpt.header_json().as_bytes()))
}

/// Delta weights `finetuned - base`, stored in the base dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    id: String,
    deltas: Checkpoint,
}

impl TaskVector {
    pub fn new(id: impl Into<String>, deltas: Checkpoint) -> Self {
        Self {
            id: id.into(),
            deltas,
        }
    }

    /// Builds a task vector from per-layer f64 values (test and tooling helper).
    pub fn from_values(
        id: impl Into<String>,
        layers: &[(&str, crate::tensor_store::Dtype, Vec<usize>, Vec<f64>)],
    ) -> Result<Self> {
        let mut deltas = Checkpoint::new();
        for (name, dtype, shape, values) in layers {
            deltas.insert(*name, Tensor::from_f64(*dtype, shape.clone(), values)?);
        }
        Ok(Self::new(id, deltas))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn deltas(&self) -> &Checkpoint {
        &self.deltas
    }

    pub fn into_deltas(self) -> Checkpoint {
        self.deltas
    }

    pub fn catalog(&self) -> LayerCatalog {
        self.deltas.catalog()
    }

    /// Layer values decoded to f64, in catalog order.
    pub fn layer_values(&self) -> Vec<Vec<f64>> {
        self.deltas.iter().map(|(_, t)| t.to_f64_vec()).collect()
    }

    /// Reads a task vector file; the id comes from the stored metadata,
    /// falling back to the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let deltas = Checkpoint::load(path)?;
        let id = deltas
            .metadata()
            .and_then(|m| m.get(TASK_ID_KEY).cloned())
            .unwrap_or_else(|| file_stem(path));
        Ok(Self { id, deltas })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = self.deltas.clone();
        out.insert_metadata(TASK_ID_KEY, self.id.clone());
        out.save(path)
    }
}

pub(crate) fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".to_string())
}

/// Computes `finetuned - base` per element. The result records the base
/// header fingerprint in its metadata.
pub fn diff(finetuned: &Checkpoint, base: &Checkpoint, id: impl Into<String>) -> Result<TaskVector> {
    validate_compatibility(&[finetuned, base])?;
    let layers: Vec<(String, Tensor)> = base
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(name, b)| {
            let f = finetuned.get(name).expect("validated");
            let values: Vec<f64> = f
                .to_f64_vec()
                .into_iter()
                .zip(b.to_f64_vec())
                .map(|(f, b)| f - b)
                .collect();
            (name.to_string(), b.rebuild_with(&values, None))
        })
        .collect();
    let mut deltas = Checkpoint::new();
    for (name, t) in layers {
        deltas.insert(name, t);
    }
    deltas.insert_metadata(BASE_FINGERPRINT_KEY, header_fingerprint(base));
    Ok(TaskVector::new(id, deltas))
}

/// Returns `base + coeff * delta`, stored in the base dtype and carrying the
/// base metadata.
pub fn apply(base: &Checkpoint, delta: &TaskVector, coeff: f64) -> Result<Checkpoint> {
    if !coeff.is_finite() {
        return Err(Error::invalid(format!("coefficient {coeff} is not finite")));
    }
    validate_compatibility(&[base, delta.deltas()])?;
    let layers: Vec<(String, Tensor)> = base
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(name, b)| {
            let d = delta.deltas().get(name).expect("validated").to_f64_vec();
            let values: Vec<f64> = b
                .to_f64_vec()
                .into_iter()
                .zip(d)
                .map(|(b, d)| b + coeff * d)
                .collect();
            (name.to_string(), b.rebuild_with(&values, None))
        })
        .collect();
    let mut out = Checkpoint::new();
    for (name, t) in layers {
        out.insert(name, t);
    }
    out.set_metadata(base.metadata().cloned());
    Ok(out)
}

/// `sum_k coeff_k * tau_k`, accumulated in f64 in input order.
pub fn linear_combine(terms: &[(&TaskVector, f64)]) -> Result<TaskVector> {
    let (first, _) = terms
        .first()
        .ok_or_else(|| Error::invalid("linear_combine needs at least one term"))?;
    let ckpts: Vec<&Checkpoint> = terms.iter().map(|(tv, _)| tv.deltas()).collect();
    validate_compatibility(&ckpts)?;
    let layers: Vec<(String, Tensor)> = first
        .deltas()
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(name, proto)| {
            let mut acc = vec![0.0f64; proto.numel()];
            for (tv, c) in terms {
                let values = tv.deltas().get(name).expect("validated").to_f64_vec();
                for (a, v) in acc.iter_mut().zip(values) {
                    *a += c * v;
                }
            }
            (name.to_string(), proto.rebuild_with(&acc, None))
        })
        .collect();
    let mut deltas = Checkpoint::new();
    for (name, t) in layers {
        deltas.insert(name, t);
    }
    Ok(TaskVector::new("combined", deltas))
}
