//! Merging algorithms and task-vector preprocessing baselines.
//!
//! Every mask-aware merge follows the same pattern: the merged delta is
//! computed per layer, and any layer (or element) switched off by the mask
//! is copied byte-for-byte from the base checkpoint.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::counter_uniform;
use crate::saliency::{decode_task_vectors, ParameterMask, SharedMask};
use crate::task_vector::TaskVector;
use crate::tensor_store::{validate_compatibility, validate_shapes, Checkpoint, LayerCatalog, Tensor};

pub const DEFAULT_TASK_ARITHMETIC_LAMBDA: f64 = 0.3;
pub const DEFAULT_TIES_LAMBDA: f64 = 0.3;
pub const DEFAULT_TIES_KEEP_FRACTION: f64 = 0.2;
pub const DEFAULT_PCB_LAMBDA: f64 = 1.2;
pub const DEFAULT_WISE_FT_ALPHA: f64 = 0.5;

/// Layer-level or element-level keep mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Mask {
    Layer(SharedMask),
    Parameter(ParameterMask),
}

impl Mask {
    fn check(&self, catalog: &LayerCatalog) -> Result<()> {
        let names = catalog.names();
        match self {
            Mask::Layer(m) => {
                if m.values.len() != names.len() || m.layer_names.len() != names.len() {
                    return Err(Error::invalid(format!(
                        "mask has {} entries but the checkpoint has {} layers",
                        m.values.len(),
                        names.len()
                    )));
                }
                if m.layer_names != names {
                    return Err(Error::invalid("mask layer names do not match the checkpoint"));
                }
            }
            Mask::Parameter(m) => {
                if m.layer_names != names || m.entries.len() != names.len() {
                    return Err(Error::invalid(
                        "parameter mask layers do not match the checkpoint",
                    ));
                }
                for (info, entry) in catalog.layers().iter().zip(&m.entries) {
                    if entry.len() != info.numel() {
                        return Err(Error::invalid(format!(
                            "parameter mask for {:?} has {} elements, expected {}",
                            info.name,
                            entry.len(),
                            info.numel()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn keeps_layer(&self, l: usize) -> bool {
        match self {
            Mask::Layer(m) => m.values[l],
            Mask::Parameter(m) => m.entries[l].iter().any(|&v| v),
        }
    }

    fn elements(&self, l: usize) -> Option<&[bool]> {
        match self {
            Mask::Layer(_) => None,
            Mask::Parameter(m) => Some(&m.entries[l]),
        }
    }

    /// Kept layers (layer masks) or kept elements (parameter masks).
    pub fn ones(&self) -> usize {
        match self {
            Mask::Layer(m) => m.ones(),
            Mask::Parameter(m) => m.ones(),
        }
    }

    /// Per-layer flag: true when the whole layer reverts to the base.
    pub fn pruned_layers(&self) -> Vec<bool> {
        match self {
            Mask::Layer(m) => m.values.iter().map(|&v| !v).collect(),
            Mask::Parameter(m) => m.entries.iter().map(|e| !e.iter().any(|&v| v)).collect(),
        }
    }

    fn zero_masked(&self, values: &mut [Vec<Vec<f64>>]) {
        for task in values {
            for (l, layer) in task.iter_mut().enumerate() {
                match self.elements(l) {
                    None if !self.keeps_layer(l) => layer.iter_mut().for_each(|v| *v = 0.0),
                    None => {}
                    Some(keep) => layer
                        .iter_mut()
                        .zip(keep)
                        .filter(|(_, &k)| !k)
                        .for_each(|(v, _)| *v = 0.0),
                }
            }
        }
    }
}

impl From<SharedMask> for Mask {
    fn from(m: SharedMask) -> Self {
        Mask::Layer(m)
    }
}

impl From<ParameterMask> for Mask {
    fn from(m: ParameterMask) -> Self {
        Mask::Parameter(m)
    }
}

/// Builds `base + delta(l)` for every layer, honouring the mask.
fn assemble<F>(base: &Checkpoint, catalog: &LayerCatalog, mask: Option<&Mask>, delta: F) -> Checkpoint
where
    F: Fn(usize) -> Vec<f64> + Sync,
{
    let layers: Vec<(String, Tensor)> = catalog
        .layers()
        .par_iter()
        .enumerate()
        .map(|(l, info)| {
            let b = base.get(&info.name).expect("validated");
            if mask.is_some_and(|m| !m.keeps_layer(l)) {
                return (info.name.clone(), b.clone());
            }
            let d = delta(l);
            let values: Vec<f64> = b.to_f64_vec().into_iter().zip(d).map(|(b, d)| b + d).collect();
            let revert: Option<Vec<bool>> = mask
                .and_then(|m| m.elements(l))
                .map(|keep| keep.iter().map(|&k| !k).collect());
            (info.name.clone(), b.rebuild_with(&values, revert.as_deref()))
        })
        .collect();
    let mut out = Checkpoint::new();
    for (name, t) in layers {
        out.insert(name, t);
    }
    out.set_metadata(base.metadata().cloned());
    out
}

/// Validates base and task vectors together and decodes the deltas.
fn prepare<T: Borrow<TaskVector>>(
    base: &Checkpoint,
    tvs: &[T],
    mask: Option<&Mask>,
) -> Result<(LayerCatalog, Vec<Vec<Vec<f64>>>)> {
    let (_, values) = decode_task_vectors(tvs)?;
    let mut all: Vec<&Checkpoint> = vec![base];
    all.extend(tvs.iter().map(|t| t.borrow().deltas()));
    let catalog = validate_compatibility(&all)?;
    if let Some(m) = mask {
        m.check(&catalog)?;
    }
    Ok((catalog, values))
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} {v} is not finite")))
    }
}

/// Elementwise mean of the checkpoints, stored in the first one's dtype.
pub fn weight_average<C: Borrow<Checkpoint>>(ckpts: &[C]) -> Result<Checkpoint> {
    let refs: Vec<&Checkpoint> = ckpts.iter().map(|c| c.borrow()).collect();
    let catalog = validate_compatibility(&refs)?;
    let k = refs.len() as f64;
    let first = refs[0];
    let layers: Vec<(String, Tensor)> = catalog
        .layers()
        .par_iter()
        .map(|info| {
            let mut acc = vec![0.0f64; info.numel()];
            for c in &refs {
                for (a, v) in acc.iter_mut().zip(c.get(&info.name).expect("validated").to_f64_vec()) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= k);
            let proto = first.get(&info.name).expect("validated");
            (info.name.clone(), proto.rebuild_with(&acc, None))
        })
        .collect();
    let mut out = Checkpoint::new();
    for (name, t) in layers {
        out.insert(name, t);
    }
    out.set_metadata(first.metadata().cloned());
    Ok(out)
}

fn weighted_sum(values: &[Vec<Vec<f64>>], l: usize, coeff: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut acc = vec![0.0f64; values[0][l].len()];
    for (k, task) in values.iter().enumerate() {
        let c = coeff(k);
        for (a, v) in acc.iter_mut().zip(&task[l]) {
            *a += c * v;
        }
    }
    acc
}

/// `base + mask * sum_k lambda * tau_k`.
pub fn task_arithmetic<T: Borrow<TaskVector>>(
    base: &Checkpoint,
    tvs: &[T],
    lambda: f64,
    mask: Option<&Mask>,
) -> Result<Checkpoint> {
    check_finite("lambda", lambda)?;
    let (catalog, values) = prepare(base, tvs, mask)?;
    Ok(assemble(base, &catalog, mask, |l| weighted_sum(&values, l, |_| lambda)))
}

/// Number of elements retained when keeping `fraction` of `total`.
pub fn kept_count(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction - 1e-9).ceil().max(0.0) as usize).min(total)
}

fn check_keep_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("keep fraction {f} must lie in (0, 1]")))
    }
}

/// Zeroes all but the `kept_count` largest-magnitude elements of one task,
/// ranked across every layer. Ties go to the earlier (layer, index).
fn trim_top_magnitude(task: &mut [Vec<f64>], fraction: f64) {
    let total: usize = task.iter().map(Vec::len).sum();
    let keep = kept_count(total, fraction);
    if keep == total {
        return;
    }
    let mut order: Vec<(usize, usize)> = task
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| (0..layer.len()).map(move |i| (l, i)))
        .collect();
    order.sort_by(|&(la, ia), &(lb, ib)| {
        task[lb][ib]
            .abs()
            .total_cmp(&task[la][ia].abs())
            .then((la, ia).cmp(&(lb, ib)))
    });
    for &(l, i) in &order[keep..] {
        task[l][i] = 0.0;
    }
}

/// Ties-Merging: mask, trim each task vector to its top `keep_fraction`
/// magnitudes, elect a sign per parameter from the summed trimmed values,
/// average the values that agree with it, and add `lambda` times the result.
pub fn ties_merge<T: Borrow<TaskVector>>(
    base: &Checkpoint,
    tvs: &[T],
    keep_fraction: f64,
    lambda: f64,
    mask: Option<&Mask>,
) -> Result<Checkpoint> {
    check_keep_fraction(keep_fraction)?;
    check_finite("lambda", lambda)?;
    let (catalog, mut values) = prepare(base, tvs, mask)?;
    if let Some(m) = mask {
        m.zero_masked(&mut values);
    }
    values
        .par_iter_mut()
        .for_each(|task| trim_top_magnitude(task, keep_fraction));
    Ok(assemble(base, &catalog, mask, |l| {
        (0..values[0][l].len())
            .map(|i| lambda * disjoint_mean(values.iter().map(|task| task[l][i])))
            .collect()
    }))
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Mean of the values whose sign matches the sign of their sum; 0 when the
/// sum is exactly zero.
fn disjoint_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let elected = sign(values.clone().sum::<f64>());
    if elected == 0 {
        return 0.0;
    }
    let (sum, count) = values
        .filter(|&v| sign(v) == elected)
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}

/// Per-task (one value per task) or per-task-per-layer merging coefficients,
/// as produced by AdaMerging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaTable {
    pub task_ids: Vec<String>,
    /// `None` for task-wise coefficients, broadcast across layers.
    pub layer_names: Option<Vec<String>>,
    pub lambdas: Vec<Vec<f64>>,
}

impl LambdaTable {
    /// Task-wise table broadcasting one coefficient per task.
    pub fn task_wise(task_ids: Vec<String>, lambdas: &[f64]) -> Self {
        Self {
            task_ids,
            layer_names: None,
            lambdas: lambdas.iter().map(|&v| vec![v]).collect(),
        }
    }

    /// Resolves the table to a K x L grid aligned with the given task and
    /// layer order. Rows are matched by task id, columns by layer name.
    pub fn resolve(&self, task_ids: &[String], layer_names: &[String]) -> Result<Vec<Vec<f64>>> {
        if self.lambdas.len() != self.task_ids.len() {
            return Err(Error::invalid(format!(
                "lambda table has {} rows for {} task ids",
                self.lambdas.len(),
                self.task_ids.len()
            )));
        }
        if self.task_ids.len() != task_ids.len() {
            return Err(Error::invalid(format!(
                "lambda table covers {} tasks but {} task vectors were given",
                self.task_ids.len(),
                task_ids.len()
            )));
        }
        let column_of: Option<Vec<usize>> = match &self.layer_names {
            None => None,
            Some(names) => {
                if names.len() != layer_names.len() {
                    return Err(Error::invalid(format!(
                        "lambda table has {} layers, checkpoint has {}",
                        names.len(),
                        layer_names.len()
                    )));
                }
                let index: BTreeMap<&str, usize> =
                    names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
                Some(
                    layer_names
                        .iter()
                        .map(|n| {
                            index.get(n.as_str()).copied().ok_or_else(|| {
                                Error::invalid(format!("lambda table lacks layer {n:?}"))
                            })
                        })
                        .collect::<Result<_>>()?,
                )
            }
        };
        task_ids
            .iter()
            .map(|id| {
                let row = self
                    .task_ids
                    .iter()
                    .position(|t| t == id)
                    .map(|r| &self.lambdas[r])
                    .ok_or_else(|| Error::invalid(format!("lambda table lacks task {id:?}")))?;
                let resolved: Vec<f64> = match &column_of {
                    None if row.len() == 1 => vec![row[0]; layer_names.len()],
                    None => {
                        return Err(Error::invalid(format!(
                            "task-wise lambda row for {id:?} must hold one value, found {}",
                            row.len()
                        )))
                    }
                    Some(cols) if row.len() == cols.len() => cols.iter().map(|&c| row[c]).collect(),
                    Some(cols) => {
                        return Err(Error::invalid(format!(
                            "lambda row for {id:?} has {} values for {} layers",
                            row.len(),
                            cols.len()
                        )))
                    }
                };
                if let Some(bad) = resolved.iter().find(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("lambda {bad} for {id:?} is not finite")));
                }
                Ok(resolved)
            })
            .collect()
    }
}

/// Applies externally optimised AdaMerging coefficients scaled by `eta`:
/// `base + mask * sum_k eta * lambda_k^l * tau_k^l`.
pub fn adamerging_apply<T: Borrow<TaskVector>>(
    base: &Checkpoint,
    tvs: &[T],
    lambdas: &LambdaTable,
    eta: f64,
    mask: Option<&Mask>,
) -> Result<Checkpoint> {
    crate::saliency::check_eta(eta)?;
    let (catalog, values) = prepare(base, tvs, mask)?;
    let ids: Vec<String> = tvs.iter().map(|t| t.borrow().id().to_string()).collect();
    let grid = lambdas.resolve(&ids, &catalog.names())?;
    Ok(assemble(base, &catalog, mask, |l| {
        weighted_sum(&values, l, |k| eta * grid[k][l])
    }))
}

/// PCB-style weighted merge with externally supplied importance weights:
/// per element, `sum_k beta_k * lambda_k * tau_k / sum_k beta_k`, or 0
/// where all weights vanish.
pub fn pcb_apply<T: Borrow<TaskVector>, C: Borrow<Checkpoint>>(
    base: &Checkpoint,
    tvs: &[T],
    beta: &[C],
    lambdas: &[f64],
    mask: Option<&Mask>,
) -> Result<Checkpoint> {
    let (catalog, values) = prepare(base, tvs, mask)?;
    let k = values.len();
    if beta.len() != k || lambdas.len() != k {
        return Err(Error::invalid(format!(
            "{k} task vectors need {k} beta inputs and {k} lambdas (got {} and {})",
            beta.len(),
            lambdas.len()
        )));
    }
    for &l in lambdas {
        check_finite("lambda", l)?;
    }
    let mut weights: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k);
    for (i, b) in beta.iter().enumerate() {
        let b = b.borrow();
        validate_shapes(base, b, &format!("beta {i}"))?;
        let layers: Vec<Vec<f64>> = catalog
            .layers()
            .iter()
            .map(|info| b.get(&info.name).expect("validated").to_f64_vec())
            .collect();
        if layers.iter().flatten().any(|&w| w.is_nan() || w < 0.0) {
            return Err(Error::invalid(format!("beta {i} has negative or NaN weights")));
        }
        weights.push(layers);
    }
    Ok(assemble(base, &catalog, mask, |l| {
        (0..values[0][l].len())
            .map(|i| {
                let (num, den) = (0..k).fold((0.0, 0.0), |(num, den), t| {
                    let w = weights[t][l][i];
                    (num + w * lambdas[t] * values[t][l][i], den + w)
                });
                if den > 0.0 {
                    num / den
                } else {
                    0.0
                }
            })
            .collect()
    }))
}

fn rebuild_task_vector(tv: &TaskVector, values: &[Vec<f64>]) -> TaskVector {
    let mut deltas = Checkpoint::new();
    for ((name, t), v) in tv.deltas().iter().zip(values) {
        deltas.insert(name, t.rebuild_with(v, None));
    }
    deltas.set_metadata(tv.deltas().metadata().cloned());
    TaskVector::new(tv.id(), deltas)
}

/// Drop-and-rescale: zeroes each element with probability `p` and scales the
/// survivors by `1 / (1 - p)`. Element `i` of layer `name` uses the counter
/// draw keyed by `(seed, name, i)`.
pub fn dare(tv: &TaskVector, p: f64, seed: u64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("drop rate {p} must lie in [0, 1)")));
    }
    let scale = 1.0 / (1.0 - p);
    let values: Vec<Vec<f64>> = tv
        .deltas()
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(name, t)| {
            t.to_f64_vec()
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    if counter_uniform(seed, name, i as u64) < p {
                        0.0
                    } else {
                        v * scale
                    }
                })
                .collect()
        })
        .collect();
    Ok(rebuild_task_vector(tv, &values))
}

/// Magnitude pruning: keeps the global top `keep_fraction` of elements by
/// absolute value, without rescaling.
pub fn mwp(tv: &TaskVector, keep_fraction: f64) -> Result<TaskVector> {
    check_keep_fraction(keep_fraction)?;
    let mut values = tv.layer_values();
    trim_top_magnitude(&mut values, keep_fraction);
    Ok(rebuild_task_vector(tv, &values))
}

/// Linear interpolation `(1 - alpha) * base + alpha * finetuned`.
pub fn wise_ft(base: &Checkpoint, finetuned: &Checkpoint, alpha: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} must lie in [0, 1]")));
    }
    let catalog = validate_compatibility(&[base, finetuned])?;
    let mut out = Checkpoint::new();
    for info in catalog.layers() {
        let b = base.get(&info.name).expect("validated");
        let f = finetuned.get(&info.name).expect("validated").to_f64_vec();
        let values: Vec<f64> = b
            .to_f64_vec()
            .into_iter()
            .zip(f)
            .map(|(b, f)| (1.0 - alpha) * b + alpha * f)
            .collect();
        out.insert(info.name.clone(), b.rebuild_with(&values, None));
    }
    out.set_metadata(base.metadata().cloned());
    Ok(out)
}

/// Merge algorithm selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    WeightAverage,
    TaskArithmetic,
    Ties,
    AdamergingApply,
    PcbApply,
    WiseFt,
}

impl MergeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::WeightAverage => "weight_average",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::AdamergingApply => "adamerging_apply",
            MergeMethod::PcbApply => "pcb_apply",
            MergeMethod::WiseFt => "wise_ft",
        }
    }

    /// Whether the method combines task vectors and honours a mask.
    pub fn is_mask_aware(self) -> bool {
        !matches!(self, MergeMethod::WeightAverage | MergeMethod::WiseFt)
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "weight_average" => Ok(MergeMethod::WeightAverage),
            "task_arithmetic" => Ok(MergeMethod::TaskArithmetic),
            "ties" => Ok(MergeMethod::Ties),
            "adamerging_apply" | "adamerging" => Ok(MergeMethod::AdamergingApply),
            "pcb_apply" | "pcb" => Ok(MergeMethod::PcbApply),
            "wise_ft" => Ok(MergeMethod::WiseFt),
            _ => Err(Error::invalid(format!("unknown merge method {s:?}"))),
        }
    }
}

/// Merging coefficients in the shape a method expects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    Scalar(f64),
    PerTask(Vec<f64>),
    Table(LambdaTable),
}

impl LambdaSpec {
    /// One coefficient per task, broadcasting a scalar.
    pub fn per_task(&self, k: usize) -> Result<Vec<f64>> {
        match self {
            LambdaSpec::Scalar(v) => Ok(vec![*v; k]),
            LambdaSpec::PerTask(v) if v.len() == k => Ok(v.clone()),
            LambdaSpec::PerTask(v) => Err(Error::invalid(format!(
                "{} lambdas given for {k} tasks",
                v.len()
            ))),
            LambdaSpec::Table(_) => Err(Error::invalid("a per-layer lambda table is only valid for adamerging")),
        }
    }
}

/// Declarative description of a merge, recorded in the output metadata.
///
/// Bulk inputs (masks, importance weights) are summarised rather than
/// embedded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub task_ids: Vec<String>,
    pub lambda: Option<LambdaSpec>,
    pub eta: Option<f64>,
    pub mask_source: String,
    pub mask_ones: Option<usize>,
    pub keep_fraction: Option<f64>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub preprocess: Option<String>,
}

/// Metadata key holding the canonical JSON recipe.
pub const RECIPE_KEY: &str = "merge.recipe";

impl MergeRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.keep_fraction.is_some() && self.method != MergeMethod::Ties {
            return Err(Error::invalid("keep_fraction only applies to ties"));
        }
        if let Some(eta) = self.eta {
            crate::saliency::check_eta(eta)?;
        }
        match (&self.lambda, self.method) {
            (Some(LambdaSpec::Table(_)), m) if m != MergeMethod::AdamergingApply => {
                Err(Error::invalid(format!("{m} does not take a per-layer lambda table")))
            }
            (Some(LambdaSpec::PerTask(_)), MergeMethod::TaskArithmetic | MergeMethod::Ties) => Err(
                Error::invalid(format!("{} takes a single scalar lambda", self.method)),
            ),
            _ => Ok(()),
        }
    }

    /// Canonical single-line JSON (fixed field order, no whitespace).
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("recipe serializes")
    }
}
