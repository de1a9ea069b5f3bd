//! Random instance generation and a deliberately naive reference
//! implementation of the scoring, masking and merging rules. The reference
//! works on plain nested vectors, uses integer arithmetic for every count,
//! and brute-forces rank decisions by pairwise comparison.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskvec::{Checkpoint, Dtype, Tensor, TaskVector};

/// One random merging problem: a base model and K task vectors, all F64 so
/// that values compare at 1e-12.
pub struct Instance {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub base: Vec<Vec<f64>>,
    /// `[task][layer][element]`
    pub tasks: Vec<Vec<Vec<f64>>>,
}

impl Instance {
    pub fn random(seed: u64, max_k: usize, max_l: usize, max_elems: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=max_k);
        let l = rng.random_range(1..=max_l);
        // zero-padded so lexicographic order equals creation order
        let mut names: Vec<String> = (0..l).map(|i| format!("block.{i:02}.weight")).collect();
        names.sort();
        let shapes: Vec<Vec<usize>> = (0..l)
            .map(|_| {
                let n = rng.random_range(1..=max_elems);
                if n % 2 == 0 && rng.random_bool(0.5) {
                    vec![2, n / 2]
                } else {
                    vec![n]
                }
            })
            .collect();
        let integer_valued = rng.random_bool(0.3);
        let draw = |rng: &mut ChaCha8Rng| {
            if integer_valued {
                rng.random_range(-3i32..=3) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        };
        let base = shapes
            .iter()
            .map(|s| (0..s.iter().product::<usize>()).map(|_| draw(&mut rng)).collect())
            .collect();
        let tasks = (0..k)
            .map(|_| {
                shapes
                    .iter()
                    .map(|s| (0..s.iter().product::<usize>()).map(|_| draw(&mut rng)).collect())
                    .collect()
            })
            .collect();
        Self {
            names,
            shapes,
            base,
            tasks,
        }
    }

    pub fn base_checkpoint(&self) -> Checkpoint {
        to_checkpoint(&self.names, &self.shapes, &self.base, Dtype::F64)
    }

    pub fn task_vectors(&self) -> Vec<TaskVector> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(k, t)| TaskVector::new(format!("task{k}"), to_checkpoint(&self.names, &self.shapes, t, Dtype::F64)))
            .collect()
    }

    pub fn total(&self) -> usize {
        self.base.iter().map(Vec::len).sum()
    }
}

pub fn to_checkpoint(names: &[String], shapes: &[Vec<usize>], values: &[Vec<f64>], dtype: Dtype) -> Checkpoint {
    let mut c = Checkpoint::new();
    for ((n, s), v) in names.iter().zip(shapes).zip(values) {
        c.insert(n.clone(), Tensor::from_f64(dtype, s.clone(), v).unwrap());
    }
    c
}

pub fn layers_of(c: &Checkpoint) -> Vec<Vec<f64>> {
    c.iter().map(|(_, t)| t.to_f64_vec()).collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// floor(len * num / den) in integers.
pub fn floor_ratio(len: usize, num: usize, den: usize) -> usize {
    len * num / den
}

/// ceil(len * num / den) in integers.
pub fn ceil_ratio(len: usize, num: usize, den: usize) -> usize {
    (len * num).div_ceil(den)
}

pub fn naive_saliency(tasks: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let k = tasks.len();
    let mut scores = vec![vec![0.0; tasks[0].len()]; k];
    for l in 0..tasks[0].len() {
        let d = tasks[0][l].len();
        for (row, task) in scores.iter_mut().zip(tasks) {
            let mut total = 0.0;
            for i in 0..d {
                let mut mean = 0.0;
                for other in tasks {
                    mean += other[l][i];
                }
                mean /= k as f64;
                total += (task[l][i] - mean).abs();
            }
            row[l] = total / d as f64;
        }
    }
    scores
}

/// Per-task mask: position l is kept iff its score is strictly greater than
/// the `cut`-th smallest score. The `cut`-th smallest value is found as the
/// smallest v whose count of scores <= v reaches `cut`.
pub fn naive_threshold(scores: &[Vec<f64>], cut: usize) -> Vec<Vec<bool>> {
    scores
        .iter()
        .map(|row| {
            let len = row.len();
            if cut == 0 {
                return vec![true; len];
            }
            if cut >= len {
                return vec![false; len];
            }
            let threshold = row
                .iter()
                .copied()
                .filter(|&v| row.iter().filter(|&&w| w <= v).count() >= cut)
                .fold(f64::INFINITY, f64::min);
            row.iter().map(|&v| v > threshold).collect()
        })
        .collect()
}

pub fn naive_or(masks: &[Vec<bool>]) -> Vec<bool> {
    let mut out = vec![false; masks[0].len()];
    for m in masks {
        for (o, &v) in out.iter_mut().zip(m) {
            *o = *o || v;
        }
    }
    out
}

pub fn naive_task_arithmetic(base: &[Vec<f64>], tasks: &[Vec<Vec<f64>>], lambda: f64, mask: &[bool]) -> Vec<Vec<f64>> {
    let mut out = base.to_vec();
    for (l, layer) in out.iter_mut().enumerate() {
        if !mask[l] {
            continue;
        }
        for (i, v) in layer.iter_mut().enumerate() {
            let mut delta = 0.0;
            for task in tasks {
                delta += lambda * task[l][i];
            }
            *v += delta;
        }
    }
    out
}

/// Keep flags for the `keep` largest magnitudes, earlier positions winning
/// ties, decided by counting how many elements outrank each one.
pub fn naive_top_magnitude(task: &[Vec<f64>], keep: usize) -> Vec<Vec<bool>> {
    let flat: Vec<f64> = task.iter().flatten().copied().collect();
    let kept: Vec<bool> = (0..flat.len())
        .map(|e| {
            let outranked_by = (0..flat.len())
                .filter(|&j| flat[j].abs() > flat[e].abs() || (flat[j].abs() == flat[e].abs() && j < e))
                .count();
            outranked_by < keep
        })
        .collect();
    let mut it = kept.into_iter();
    task.iter().map(|layer| layer.iter().map(|_| it.next().unwrap()).collect()).collect()
}

pub fn naive_mwp(task: &[Vec<f64>], keep: usize) -> Vec<Vec<f64>> {
    let flags = naive_top_magnitude(task, keep);
    task.iter()
        .zip(&flags)
        .map(|(layer, f)| layer.iter().zip(f).map(|(&v, &k)| if k { v } else { 0.0 }).collect())
        .collect()
}

pub fn naive_ties(
    base: &[Vec<f64>],
    tasks: &[Vec<Vec<f64>>],
    keep: usize,
    lambda: f64,
    mask: &[bool],
) -> Vec<Vec<f64>> {
    let masked: Vec<Vec<Vec<f64>>> = tasks
        .iter()
        .map(|t| {
            t.iter()
                .enumerate()
                .map(|(l, layer)| if mask[l] { layer.clone() } else { vec![0.0; layer.len()] })
                .collect()
        })
        .collect();
    let trimmed: Vec<Vec<Vec<f64>>> = masked.iter().map(|t| naive_mwp(t, keep)).collect();
    let mut out = base.to_vec();
    for (l, layer) in out.iter_mut().enumerate() {
        if !mask[l] {
            continue;
        }
        for (i, v) in layer.iter_mut().enumerate() {
            let total: f64 = trimmed.iter().map(|t| t[l][i]).sum();
            let merged = if total == 0.0 {
                0.0
            } else {
                let agreeing: Vec<f64> = trimmed
                    .iter()
                    .map(|t| t[l][i])
                    .filter(|&x| x != 0.0 && (x > 0.0) == (total > 0.0))
                    .collect();
                agreeing.iter().sum::<f64>() / agreeing.len() as f64
            };
            *v += lambda * merged;
        }
    }
    out
}

pub fn naive_pcb(
    base: &[Vec<f64>],
    tasks: &[Vec<Vec<f64>>],
    beta: &[Vec<Vec<f64>>],
    lambdas: &[f64],
    mask: &[bool],
) -> Vec<Vec<f64>> {
    let mut out = base.to_vec();
    for (l, layer) in out.iter_mut().enumerate() {
        if !mask[l] {
            continue;
        }
        for (i, v) in layer.iter_mut().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..tasks.len() {
                num += beta[k][l][i] * lambdas[k] * tasks[k][l][i];
                den += beta[k][l][i];
            }
            if den > 0.0 {
                *v += num / den;
            }
        }
    }
    out
}
