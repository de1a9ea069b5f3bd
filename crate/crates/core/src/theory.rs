//! Neuron diversity across task vectors, a synthetic check of the
//! discriminative-neuron separation it predicts, and the H-score metric.

use std::borrow::Borrow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::task_vector::TaskVector;
use crate::tensor_store::{validate_compatibility, Checkpoint, Dtype};

/// A set of flat element indices inside one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeuronSelector {
    pub layer_name: String,
    pub index_set: Vec<usize>,
}

impl NeuronSelector {
    pub fn new(layer_name: impl Into<String>, index_set: Vec<usize>) -> Self {
        Self {
            layer_name: layer_name.into(),
            index_set,
        }
    }

    fn validate(&self, numel: usize) -> Result<()> {
        if self.index_set.is_empty() {
            return Err(Error::invalid("neuron selector is empty"));
        }
        let mut sorted = self.index_set.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("neuron selector has duplicate indices"));
        }
        if let Some(&bad) = sorted.last().filter(|&&i| i >= numel) {
            return Err(Error::invalid(format!(
                "index {bad} out of range for layer {:?} with {numel} elements",
                self.layer_name
            )));
        }
        Ok(())
    }
}

/// Euclidean distance of each task's selected block from the cross-task
/// mean block.
pub fn diversity<T: Borrow<TaskVector>>(tvs: &[T], sel: &NeuronSelector) -> Result<Vec<f64>> {
    if tvs.is_empty() {
        return Err(Error::invalid("at least one task vector is required"));
    }
    let ckpts: Vec<&Checkpoint> = tvs.iter().map(|t| t.borrow().deltas()).collect();
    validate_compatibility(&ckpts)?;
    let layer = ckpts[0]
        .get(&sel.layer_name)
        .ok_or_else(|| Error::invalid(format!("no layer named {:?}", sel.layer_name)))?;
    sel.validate(layer.numel())?;
    let blocks: Vec<Vec<f64>> = ckpts
        .iter()
        .map(|c| {
            let values = c.get(&sel.layer_name).expect("validated").to_f64_vec();
            sel.index_set.iter().map(|&i| values[i]).collect()
        })
        .collect();
    Ok(block_diversity(&blocks))
}

fn block_diversity(blocks: &[Vec<f64>]) -> Vec<f64> {
    let k = blocks.len() as f64;
    let width = blocks[0].len();
    let mean: Vec<f64> = (0..width)
        .map(|i| blocks.iter().map(|b| b[i]).sum::<f64>() / k)
        .collect();
    blocks
        .iter()
        .map(|b| {
            b.iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Parameters of the synthetic separation experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub dim: usize,
    pub selected: usize,
    pub signal: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks < 2 {
            return Err(Error::invalid("at least two tasks are required"));
        }
        if self.selected == 0 || self.selected > self.dim {
            return Err(Error::invalid(format!(
                "selected neuron count {} must lie in 1..={}",
                self.selected, self.dim
            )));
        }
        if !(self.signal > 0.0 && self.signal.is_finite()) {
            return Err(Error::invalid("signal must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be nonnegative"));
        }
        Ok(())
    }
}

/// Outcome of one synthetic trial.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiversityReport {
    #[serde(rename = "K")]
    pub tasks: usize,
    #[serde(skip)]
    pub dv_per_task: Vec<f64>,
    pub dv_k1: f64,
    pub dv_k2: f64,
    /// `dv_k1 / dv_k2`; infinite when `dv_k2` is zero (serialized as null).
    pub ratio: f64,
    #[serde(rename = "sqrt_K")]
    pub sqrt_k: f64,
    pub passed: bool,
}

impl DiversityReport {
    /// Distance of the ratio above the `sqrt(K)` threshold.
    pub fn margin(&self) -> f64 {
        self.ratio - self.sqrt_k
    }
}

/// Plants a discriminative block in task 0 and checks that its diversity
/// exceeds that of a non-discriminative task (task 1) by more than `sqrt(K)`.
///
/// Task 0's selected coordinates (the first `selected` indices) hold
/// `signal * u` for a random unit vector `u`; every other coordinate of every
/// task is zero-mean Gaussian noise with standard deviation `noise`.
pub fn synthetic_task_vectors(spec: &SyntheticSpec) -> Result<(Vec<TaskVector>, NeuronSelector)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let direction: Vec<f64> = loop {
        let raw: Vec<f64> = (0..spec.selected)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            break raw.iter().map(|v| v / norm).collect();
        }
    };
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut tvs = Vec::with_capacity(spec.tasks);
    for k in 0..spec.tasks {
        let values: Vec<f64> = (0..spec.dim)
            .map(|i| {
                if k == 0 && i < spec.selected {
                    spec.signal * direction[i]
                } else if spec.noise == 0.0 {
                    0.0
                } else {
                    noise.sample(&mut rng)
                }
            })
            .collect();
        tvs.push(TaskVector::from_values(
            format!("task{k}"),
            &[("neurons", Dtype::F64, vec![spec.dim], values)],
        )?);
    }
    Ok((tvs, NeuronSelector::new("neurons", (0..spec.selected).collect())))
}

pub fn prop1_experiment(spec: &SyntheticSpec) -> Result<DiversityReport> {
    let (tvs, sel) = synthetic_task_vectors(spec)?;
    let dv = diversity(&tvs, &sel)?;
    let (dv_k1, dv_k2) = (dv[0], dv[1]);
    let sqrt_k = (spec.tasks as f64).sqrt();
    let ratio = if dv_k2 > 0.0 { dv_k1 / dv_k2 } else { f64::INFINITY };
    Ok(DiversityReport {
        tasks: spec.tasks,
        dv_per_task: dv,
        dv_k1,
        dv_k2,
        ratio,
        sqrt_k,
        passed: ratio > sqrt_k,
    })
}

/// Harmonic mean of the average in-domain and out-of-domain scores.
pub fn h_score(id_avg: f64, ood_avg: f64) -> Result<f64> {
    if !(id_avg > 0.0 && ood_avg > 0.0 && id_avg.is_finite() && ood_avg.is_finite()) {
        return Err(Error::invalid(format!(
            "scores must be positive and finite, got {id_avg} and {ood_avg}"
        )));
    }
    Ok(2.0 * id_avg * ood_avg / (id_avg + ood_avg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tvs(blocks: &[&[f64]]) -> Vec<TaskVector> {
        blocks
            .iter()
            .enumerate()
            .map(|(k, b)| {
                TaskVector::from_values(format!("t{k}"), &[("x", Dtype::F64, vec![b.len()], b.to_vec())])
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn diversity_examples() {
        let all = NeuronSelector::new("x", vec![0, 1]);
        assert_eq!(diversity(&tvs(&[&[1.0, 2.0], &[1.0, 2.0]]), &all).unwrap(), vec![0.0, 0.0]);
        assert_eq!(diversity(&tvs(&[&[1.0, 0.0], &[3.0, 0.0]]), &all).unwrap(), vec![1.0, 1.0]);

        let picked = NeuronSelector::new("x", vec![2, 0]);
        let dv = diversity(&tvs(&[&[1.0, 9.0, 0.0], &[3.0, -9.0, 0.0]]), &picked).unwrap();
        assert_eq!(dv, vec![1.0, 1.0]);
    }

    #[test]
    fn selector_errors() {
        let t = tvs(&[&[1.0, 2.0]]);
        assert!(diversity(&t, &NeuronSelector::new("x", vec![])).is_err());
        assert!(diversity(&t, &NeuronSelector::new("x", vec![0, 0])).is_err());
        assert!(diversity(&t, &NeuronSelector::new("x", vec![2])).is_err());
        assert!(diversity(&t, &NeuronSelector::new("y", vec![0])).is_err());
    }

    fn spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            tasks: 8,
            dim: 64,
            selected: 8,
            signal: 1.0,
            noise: 0.01,
            seed,
        }
    }

    #[test]
    fn zero_noise_separates() {
        let r = prop1_experiment(&SyntheticSpec { noise: 0.0, ..spec(1) }).unwrap();
        // task 1 sees only the mean shift signal / K
        assert!((r.dv_k2 - 1.0 / 8.0).abs() < 1e-12);
        assert!((r.dv_k1 - 7.0 / 8.0).abs() < 1e-12);
        assert!(r.passed);
    }

    #[test]
    fn deterministic_and_well_formed() {
        assert_eq!(prop1_experiment(&spec(5)).unwrap(), prop1_experiment(&spec(5)).unwrap());
        let r = prop1_experiment(&SyntheticSpec { signal: 0.01, ..spec(5) }).unwrap();
        assert_eq!(r.dv_per_task.len(), 8);
        assert!(r.dv_per_task.iter().all(|&d| d >= 0.0));
        let json = serde_json::to_value(&r).unwrap();
        for key in ["K", "dv_k1", "dv_k2", "ratio", "sqrt_K", "passed"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn synthetic_settings_are_validated() {
        assert!(prop1_experiment(&SyntheticSpec { tasks: 1, ..spec(0) }).is_err());
        assert!(prop1_experiment(&SyntheticSpec { signal: 0.0, ..spec(0) }).is_err());
        assert!(prop1_experiment(&SyntheticSpec { noise: -1.0, ..spec(0) }).is_err());
        assert!(prop1_experiment(&SyntheticSpec { selected: 65, ..spec(0) }).is_err());
    }

    #[test]
    fn h_score_values() {
        assert_eq!(format!("{:.1}", h_score(69.1, 51.3).unwrap()), "58.9");
        assert_eq!(format!("{:.1}", h_score(48.0, 61.5).unwrap()), "53.9");
        assert_eq!(h_score(42.0, 42.0).unwrap(), 42.0);
        assert!(h_score(0.0, 10.0).is_err());
        assert!(h_score(10.0, -1.0).is_err());
    }
}
