//! Layer saliency scores and the pruning masks derived from them.
//!
//! A layer's saliency for task `k` is the mean absolute deviation of that
//! task's delta from the cross-task mean delta at the same layer. Layers
//! whose score does not exceed the `floor(L * eta)`-th smallest score of the
//! row are dropped for that task, and the shared mask keeps a layer if any
//! task keeps it.

use std::borrow::Borrow;
use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::counter_u64;
use crate::task_vector::TaskVector;
use crate::tensor_store::{validate_compatibility, Checkpoint, LayerCatalog};

/// Pruning ratio used when none is given.
pub const DEFAULT_ETA: f64 = 0.7;

mod bits {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(values: &[bool], s: S) -> Result<S::Ok, S::Error> {
        values.iter().map(|&b| b as u8).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        Vec::<u8>::deserialize(d)?
            .into_iter()
            .map(|v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("mask value {other} is not 0 or 1"))),
            })
            .collect()
    }

    pub mod rows {
        use super::*;

        pub fn serialize<S: Serializer>(rows: &[Vec<bool>], s: S) -> Result<S::Ok, S::Error> {
            rows.iter()
                .map(|r| r.iter().map(|&b| b as u8).collect::<Vec<_>>())
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<bool>>, D::Error> {
            Vec::<Vec<u8>>::deserialize(d)?
                .into_iter()
                .map(|r| {
                    r.into_iter()
                        .map(|v| match v {
                            0 => Ok(false),
                            1 => Ok(true),
                            other => Err(serde::de::Error::custom(format!(
                                "mask value {other} is not 0 or 1"
                            ))),
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// K x L matrix of nonnegative layer scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMatrix {
    pub task_ids: Vec<String>,
    pub layer_names: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl SaliencyMatrix {
    /// Checks dimensions and score sanity.
    pub fn validate(&self) -> Result<()> {
        if self.task_ids.is_empty() || self.layer_names.is_empty() {
            return Err(Error::invalid("saliency matrix needs at least one task and one layer"));
        }
        if self.scores.len() != self.task_ids.len() {
            return Err(Error::invalid(format!(
                "{} score rows for {} tasks",
                self.scores.len(),
                self.task_ids.len()
            )));
        }
        for (id, row) in self.task_ids.iter().zip(&self.scores) {
            if row.len() != self.layer_names.len() {
                return Err(Error::invalid(format!(
                    "task {id:?} has {} scores for {} layers",
                    row.len(),
                    self.layer_names.len()
                )));
            }
            if row.iter().any(|s| s.is_nan()) {
                return Err(Error::invalid(format!("task {id:?} has a NaN saliency score")));
            }
        }
        Ok(())
    }
}

/// Per-task binary layer masks produced by [`threshold_mask`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMaskSet {
    pub task_ids: Vec<String>,
    pub layer_names: Vec<String>,
    #[serde(with = "bits::rows")]
    pub masks: Vec<Vec<bool>>,
    pub eta: f64,
}

/// One keep/prune flag per layer, shared by all tasks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedMask {
    pub layer_names: Vec<String>,
    #[serde(with = "bits")]
    pub values: Vec<bool>,
}

impl SharedMask {
    pub fn all_ones(layer_names: Vec<String>) -> Self {
        let values = vec![true; layer_names.len()];
        Self { layer_names, values }
    }

    pub fn all_zeros(layer_names: Vec<String>) -> Self {
        let values = vec![false; layer_names.len()];
        Self { layer_names, values }
    }

    pub fn ones(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Element-level keep flags, one flat vector per layer in catalog order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterMask {
    pub layer_names: Vec<String>,
    pub entries: Vec<Vec<bool>>,
}

impl ParameterMask {
    pub fn ones(&self) -> usize {
        self.entries.iter().flatten().filter(|&&v| v).count()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }
}

/// Number of pruned positions, `floor(len * eta)`.
///
/// A tolerance of 1e-9 absorbs representation error in products such as
/// `100 * 0.29`.
pub fn pruned_count(len: usize, eta: f64) -> usize {
    ((len as f64 * eta + 1e-9).floor() as usize).min(len)
}

pub(crate) fn check_eta(eta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(Error::invalid(format!("eta {eta} must lie in [0, 1]")))
    }
}

/// Validates a task-vector list and decodes it as `[task][layer][element]`.
pub(crate) fn decode_task_vectors<T: Borrow<TaskVector>>(
    tvs: &[T],
) -> Result<(LayerCatalog, Vec<Vec<Vec<f64>>>)> {
    if tvs.is_empty() {
        return Err(Error::invalid("at least one task vector is required"));
    }
    let ckpts: Vec<&Checkpoint> = tvs.iter().map(|t| t.borrow().deltas()).collect();
    let catalog = validate_compatibility(&ckpts)?;
    let values = tvs
        .iter()
        .map(|t| t.borrow().layer_values())
        .collect();
    Ok((catalog, values))
}

fn task_ids<T: Borrow<TaskVector>>(tvs: &[T]) -> Vec<String> {
    tvs.iter().map(|t| t.borrow().id().to_string()).collect()
}

/// Mean absolute deviation of each task's layer from the cross-task mean.
pub fn compute_saliency<T: Borrow<TaskVector>>(tvs: &[T]) -> Result<SaliencyMatrix> {
    let (catalog, values) = decode_task_vectors(tvs)?;
    let k = values.len();
    // columns[l][k]
    let columns: Vec<Vec<f64>> = (0..catalog.len())
        .into_par_iter()
        .map(|l| {
            let d = values[0][l].len();
            let mean: Vec<f64> = (0..d)
                .map(|i| values.iter().map(|task| task[l][i]).sum::<f64>() / k as f64)
                .collect();
            values
                .iter()
                .map(|task| {
                    if d == 0 {
                        return 0.0;
                    }
                    let total: f64 = task[l].iter().zip(&mean).map(|(v, m)| (v - m).abs()).sum();
                    total / d as f64
                })
                .collect()
        })
        .collect();
    Ok(SaliencyMatrix {
        task_ids: task_ids(tvs),
        layer_names: catalog.names(),
        scores: transpose(&columns, k),
    })
}

/// Mean absolute value of each task's layer; the ablation score that ignores
/// the other tasks.
pub fn compute_absolute_score<T: Borrow<TaskVector>>(tvs: &[T]) -> Result<SaliencyMatrix> {
    let (catalog, values) = decode_task_vectors(tvs)?;
    let scores = values
        .iter()
        .map(|task| {
            task.iter()
                .map(|layer| {
                    if layer.is_empty() {
                        0.0
                    } else {
                        layer.iter().map(|v| v.abs()).sum::<f64>() / layer.len() as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok(SaliencyMatrix {
        task_ids: task_ids(tvs),
        layer_names: catalog.names(),
        scores,
    })
}

fn transpose(columns: &[Vec<f64>], rows: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|k| columns.iter().map(|col| col[k]).collect())
        .collect()
}

/// Keeps, per task, the layers scoring strictly above the
/// `floor(L * eta)`-th smallest score of that task (1-indexed).
pub fn threshold_mask(s: &SaliencyMatrix, eta: f64) -> Result<LayerMaskSet> {
    check_eta(eta)?;
    s.validate()?;
    let len = s.layer_names.len();
    let cut = pruned_count(len, eta);
    let masks = s
        .scores
        .iter()
        .map(|row| {
            if cut == 0 {
                return vec![true; len];
            }
            if cut == len {
                return vec![false; len];
            }
            let mut order: Vec<usize> = (0..len).collect();
            order.sort_by(|&a, &b| {
                row[a]
                    .partial_cmp(&row[b])
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| s.layer_names[a].cmp(&s.layer_names[b]))
            });
            let threshold = row[order[cut - 1]];
            row.iter().map(|&v| v > threshold).collect()
        })
        .collect();
    Ok(LayerMaskSet {
        task_ids: s.task_ids.clone(),
        layer_names: s.layer_names.clone(),
        masks,
        eta,
    })
}

/// Elementwise OR across the per-task masks.
pub fn or_masks(ms: &LayerMaskSet) -> Result<SharedMask> {
    let len = ms.layer_names.len();
    if ms.masks.is_empty() {
        return Err(Error::invalid("mask set has no tasks"));
    }
    if let Some(bad) = ms.masks.iter().find(|m| m.len() != len) {
        return Err(Error::invalid(format!(
            "mask row of length {} for {len} layers",
            bad.len()
        )));
    }
    let values = (0..len).map(|l| ms.masks.iter().any(|m| m[l])).collect();
    Ok(SharedMask {
        layer_names: ms.layer_names.clone(),
        values,
    })
}

/// Random layer mask keeping exactly `L - floor(L * eta)` layers.
///
/// Each layer draws a key from the counter generator keyed by
/// `(seed, layer name, 0)`; the layers with the smallest keys are kept,
/// which selects a uniformly random subset.
pub fn random_layer_mask(layer_names: &[String], eta: f64, seed: u64) -> Result<SharedMask> {
    check_eta(eta)?;
    let len = layer_names.len();
    let keep = len - pruned_count(len, eta);
    let mut order: Vec<(u64, usize)> = layer_names
        .iter()
        .enumerate()
        .map(|(l, name)| (counter_u64(seed, name, 0), l))
        .collect();
    order.sort_unstable();
    let mut values = vec![false; len];
    for &(_, l) in order.iter().take(keep) {
        values[l] = true;
    }
    Ok(SharedMask {
        layer_names: layer_names.to_vec(),
        values,
    })
}

/// Parameter-wise variant: scores every element by its absolute deviation
/// from the cross-task mean, keeps per task the elements strictly above the
/// `floor(P * eta)`-th smallest score across the whole task vector, and ORs
/// the per-task masks.
pub fn parameter_saliency_mask<T: Borrow<TaskVector>>(tvs: &[T], eta: f64) -> Result<ParameterMask> {
    check_eta(eta)?;
    let (catalog, values) = decode_task_vectors(tvs)?;
    let k = values.len();
    let means: Vec<Vec<f64>> = (0..catalog.len())
        .map(|l| {
            (0..values[0][l].len())
                .map(|i| values.iter().map(|task| task[l][i]).sum::<f64>() / k as f64)
                .collect()
        })
        .collect();
    let total = catalog.total_elements();
    let cut = pruned_count(total, eta);

    let mut entries: Vec<Vec<bool>> = means.iter().map(|m| vec![false; m.len()]).collect();
    for task in &values {
        let scores: Vec<Vec<f64>> = task
            .iter()
            .zip(&means)
            .map(|(layer, mean)| layer.iter().zip(mean).map(|(v, m)| (v - m).abs()).collect())
            .collect();
        let threshold = if cut == 0 {
            None
        } else {
            let mut flat: Vec<f64> = scores.iter().flatten().copied().collect();
            // ties do not affect the value at a fixed rank
            let (_, nth, _) = flat.select_nth_unstable_by(cut - 1, |a, b| a.total_cmp(b));
            Some(*nth)
        };
        for (mask, layer) in entries.iter_mut().zip(&scores) {
            for (m, &score) in mask.iter_mut().zip(layer) {
                if threshold.is_none_or(|t| score > t) {
                    *m = true;
                }
            }
        }
    }
    Ok(ParameterMask {
        layer_names: catalog.names(),
        entries,
    })
}
