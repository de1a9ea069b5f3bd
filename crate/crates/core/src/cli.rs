//! Command-line front end.
//!
//! Exit codes: 0 success, 2 I/O or file format, 3 incompatible checkpoints,
//! 4 invalid arguments or recipe. Logs go to stderr; reports go to the
//! `--report` file or stdout.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::merge::{
    adamerging_apply, dare, mwp, pcb_apply, task_arithmetic, ties_merge, weight_average, wise_ft,
    LambdaSpec, LambdaTable, Mask, MergeMethod, MergeRecipe, DEFAULT_PCB_LAMBDA,
    DEFAULT_TASK_ARITHMETIC_LAMBDA, DEFAULT_TIES_KEEP_FRACTION, DEFAULT_TIES_LAMBDA,
    DEFAULT_WISE_FT_ALPHA, RECIPE_KEY,
};
use crate::saliency::{
    compute_absolute_score, compute_saliency, or_masks, parameter_saliency_mask, random_layer_mask,
    threshold_mask, SaliencyMatrix, SharedMask, DEFAULT_ETA,
};
use crate::task_vector::{diff, file_stem, TaskVector};
use crate::tensor_store::Checkpoint;
use crate::theory::{h_score, prop1_experiment, SyntheticSpec};

/// Environment variable capping worker threads (0 or unset = automatic).
pub const THREADS_ENV: &str = "TASKVEC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "taskvec", version, about = "Task-vector merging with layer-wise pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute the task vector `finetuned - base`.
    Diff(DiffArgs),
    /// Write the layer saliency matrix of a set of task vectors.
    Saliency(SaliencyArgs),
    /// Compute per-task layer masks and the shared OR mask.
    Mask(MaskArgs),
    /// Merge checkpoints, optionally pruning low-saliency layers first.
    Merge(Box<MergeArgs>),
    /// Run the synthetic neuron-diversity separation experiment.
    Prop1(Prop1Args),
    /// Harmonic mean of in-domain and out-of-domain averages.
    Hscore(HscoreArgs),
}

#[derive(Debug, Args, Default)]
struct Inputs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pre-trained checkpoint.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Fine-tuned checkpoint (repeatable, order is preserved).
    #[arg(long)]
    finetuned: Vec<PathBuf>,
    /// Task-vector file (repeatable, order is preserved).
    #[arg(long)]
    taskvec: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct DiffArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Task label stored in the output (defaults to the fine-tuned file stem).
    #[arg(long)]
    task_id: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum ScoreKind {
    /// Mean absolute deviation from the cross-task mean.
    Saliency,
    /// Mean absolute value of each task's own layer.
    Absolute,
}

#[derive(Debug, Args)]
struct SaliencyArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_enum)]
    score: Option<ScoreKind>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum MaskKind {
    /// Layer saliency thresholding with OR across tasks.
    Saliency,
    /// Same, scored by mean absolute value.
    Absolute,
    /// Random layers with the same retention count.
    Random,
    /// Parameter-wise saliency thresholding.
    Parameter,
    /// No pruning.
    None,
}

#[derive(Debug, Args)]
struct MaskArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Pruning ratio in [0, 1].
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_enum)]
    mask_kind: Option<MaskKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MergeArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// weight-average | task-arithmetic | ties | adamerging | pcb | wise-ft
    #[arg(long)]
    method: Option<String>,
    /// Pruning ratio for the layer mask (0 disables pruning).
    #[arg(long)]
    eta: Option<f64>,
    /// Scalar or comma-separated per-task coefficients.
    #[arg(long)]
    lambda: Option<String>,
    /// JSON coefficient table for adamerging.
    #[arg(long)]
    lambda_table: Option<PathBuf>,
    /// Multiplier applied to adamerging coefficients (defaults to eta).
    #[arg(long)]
    coeff_scale: Option<f64>,
    /// Fraction of parameters kept by the ties trim step.
    #[arg(long)]
    keep_fraction: Option<f64>,
    /// Importance-weight checkpoint per task for pcb (repeatable, task order).
    #[arg(long)]
    beta: Vec<PathBuf>,
    /// Precomputed mask JSON (a shared mask or a `mask` report).
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_enum)]
    mask_kind: Option<MaskKind>,
    /// Interpolation weight for wise-ft.
    #[arg(long)]
    alpha: Option<f64>,
    /// Drop-and-rescale each task vector with this drop rate first.
    #[arg(long)]
    dare: Option<f64>,
    /// Magnitude-prune each task vector to this kept fraction first.
    #[arg(long)]
    mwp: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Prop1Args {
    #[arg(long, default_value_t = 8)]
    tasks: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    selected: usize,
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to run.
    #[arg(long, default_value_t = 1)]
    trials: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HscoreArgs {
    /// Average in-domain score.
    id: f64,
    /// Average out-of-domain score.
    ood: f64,
}

/// Values a JSON config file may supply.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    base: Option<PathBuf>,
    #[serde(default)]
    finetuned: Vec<PathBuf>,
    #[serde(default)]
    taskvec: Vec<PathBuf>,
    method: Option<String>,
    eta: Option<f64>,
    lambda: Option<Value>,
    lambda_table: Option<PathBuf>,
    coeff_scale: Option<f64>,
    keep_fraction: Option<f64>,
    #[serde(default)]
    beta: Vec<PathBuf>,
    mask: Option<PathBuf>,
    mask_kind: Option<MaskKind>,
    score: Option<ScoreKind>,
    alpha: Option<f64>,
    dare: Option<f64>,
    mwp: Option<f64>,
    seed: Option<u64>,
    task_id: Option<String>,
    out: Option<PathBuf>,
    report: Option<PathBuf>,
}

impl Inputs {
    /// Merges flags over the config file.
    fn resolve(&mut self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if self.base.is_some() {
            cfg.base = self.base.take();
        }
        if !self.finetuned.is_empty() {
            cfg.finetuned = std::mem::take(&mut self.finetuned);
        }
        if !self.taskvec.is_empty() {
            cfg.taskvec = std::mem::take(&mut self.taskvec);
        }
        Ok(cfg)
    }
}

fn pick<T>(flag: Option<T>, config: Option<T>) -> Option<T> {
    flag.or(config)
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::invalid(format!("missing required --{flag}")))
}

fn log(msg: impl AsRef<str>) {
    eprintln!("taskvec: {}", msg.as_ref());
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("{THREADS_ENV}={raw:?} is not a thread count")))?;
    if threads > 0 {
        // a second call within one process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            log(format!("error: {e}"));
            if e.exit_code() == 4 {
                eprintln!("Run `taskvec --help` for usage.");
            }
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Diff(args) => cmd_diff(args),
        Command::Saliency(args) => cmd_saliency(args),
        Command::Mask(args) => cmd_mask(args),
        Command::Merge(args) => cmd_merge(*args),
        Command::Prop1(args) => cmd_prop1(args),
        Command::Hscore(args) => cmd_hscore(args),
    }
}

fn ensure_distinct(inputs: &[&Path], output: &Path) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let out = canon(output);
    if inputs.iter().any(|p| canon(p) == out) {
        return Err(Error::invalid(format!(
            "output {} would overwrite an input",
            output.display()
        )));
    }
    Ok(())
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    paths.par_iter().map(Checkpoint::load).collect()
}

/// Task vectors from `--taskvec` files, or from `--finetuned` minus `--base`.
fn load_task_vectors(cfg: &RunConfig, base: Option<&Checkpoint>) -> Result<Vec<TaskVector>> {
    if !cfg.taskvec.is_empty() {
        if !cfg.finetuned.is_empty() {
            return Err(Error::invalid("give either --taskvec or --finetuned, not both"));
        }
        return cfg.taskvec.par_iter().map(TaskVector::load).collect();
    }
    if cfg.finetuned.is_empty() {
        return Err(Error::invalid("no task vectors: pass --taskvec or --base with --finetuned"));
    }
    let owned;
    let base = match base {
        Some(b) => b,
        None => {
            owned = Checkpoint::load(require(cfg.base.as_ref(), "base")?)?;
            &owned
        }
    };
    let finetuned = load_all(&cfg.finetuned)?;
    finetuned
        .iter()
        .zip(&cfg.finetuned)
        .map(|(ft, path)| diff(ft, base, file_stem(path)))
        .collect()
}

fn write_json(value: &Value, path: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn cmd_diff(mut args: DiffArgs) -> Result<()> {
    let cfg = args.inputs.resolve()?;
    let base_path = require(cfg.base.clone(), "base")?;
    let [ft_path] = cfg.finetuned.as_slice() else {
        return Err(Error::invalid("diff takes exactly one --finetuned checkpoint"));
    };
    let out = require(args.out.or(cfg.out.clone()), "out")?;
    ensure_distinct(&[&base_path, ft_path], &out)?;
    let base = Checkpoint::load(&base_path)?;
    let ft = Checkpoint::load(ft_path)?;
    let id = pick(args.task_id, cfg.task_id.clone()).unwrap_or_else(|| file_stem(ft_path));
    let tv = diff(&ft, &base, id)?;
    tv.save(&out)?;
    log(format!("wrote task vector {:?} to {}", tv.id(), out.display()));
    Ok(())
}

fn score_matrix(kind: ScoreKind, tvs: &[TaskVector]) -> Result<SaliencyMatrix> {
    match kind {
        ScoreKind::Saliency => compute_saliency(tvs),
        ScoreKind::Absolute => compute_absolute_score(tvs),
    }
}

fn cmd_saliency(mut args: SaliencyArgs) -> Result<()> {
    let cfg = args.inputs.resolve()?;
    let tvs = load_task_vectors(&cfg, None)?;
    let kind = pick(args.score, cfg.score).unwrap_or(ScoreKind::Saliency);
    let matrix = score_matrix(kind, &tvs)?;
    let report = pick(args.report, cfg.report);
    write_json(&serde_json::to_value(&matrix).expect("serializes"), report.as_deref())
}

/// Mask plus the JSON describing how it was obtained.
struct MaskOutcome {
    mask: Option<Mask>,
    report: Value,
}

fn build_mask(kind: MaskKind, tvs: &[TaskVector], eta: f64, seed: u64) -> Result<MaskOutcome> {
    let names = tvs[0].catalog().names();
    match kind {
        MaskKind::Saliency | MaskKind::Absolute => {
            let score = if kind == MaskKind::Saliency {
                ScoreKind::Saliency
            } else {
                ScoreKind::Absolute
            };
            let matrix = score_matrix(score, tvs)?;
            let per_task = threshold_mask(&matrix, eta)?;
            let shared = or_masks(&per_task)?;
            let report = json!({
                "mask_kind": kind_name(kind),
                "eta": eta,
                "saliency": matrix,
                "task_masks": per_task,
                "shared_mask": shared,
            });
            Ok(MaskOutcome {
                mask: Some(Mask::Layer(shared)),
                report,
            })
        }
        MaskKind::Random => {
            let shared = random_layer_mask(&names, eta, seed)?;
            let report = json!({
                "mask_kind": "random",
                "eta": eta,
                "seed": seed,
                "shared_mask": shared,
            });
            Ok(MaskOutcome {
                mask: Some(Mask::Layer(shared)),
                report,
            })
        }
        MaskKind::Parameter => {
            let mask = parameter_saliency_mask(tvs, eta)?;
            let per_layer: Vec<usize> = mask
                .entries
                .iter()
                .map(|e| e.iter().filter(|&&v| v).count())
                .collect();
            let report = json!({
                "mask_kind": "parameter",
                "eta": eta,
                "layer_names": mask.layer_names,
                "kept_per_layer": per_layer,
                "kept": mask.ones(),
                "total": mask.total(),
            });
            Ok(MaskOutcome {
                mask: Some(Mask::Parameter(mask)),
                report,
            })
        }
        MaskKind::None => Ok(MaskOutcome {
            mask: None,
            report: json!({"mask_kind": "none"}),
        }),
    }
}

fn kind_name(kind: MaskKind) -> &'static str {
    match kind {
        MaskKind::Saliency => "saliency",
        MaskKind::Absolute => "absolute",
        MaskKind::Random => "random",
        MaskKind::Parameter => "parameter",
        MaskKind::None => "none",
    }
}

fn cmd_mask(mut args: MaskArgs) -> Result<()> {
    let cfg = args.inputs.resolve()?;
    let tvs = load_task_vectors(&cfg, None)?;
    let eta = pick(args.eta, cfg.eta).unwrap_or(DEFAULT_ETA);
    let kind = pick(args.mask_kind, cfg.mask_kind).unwrap_or(MaskKind::Saliency);
    let seed = pick(args.seed, cfg.seed).unwrap_or(0);
    let outcome = build_mask(kind, &tvs, eta, seed)?;
    write_json(&outcome.report, pick(args.report, cfg.report).as_deref())
}

fn read_mask_file(path: &Path) -> Result<SharedMask> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let value = value.get("shared_mask").cloned().unwrap_or(value);
    serde_json::from_value(value).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn parse_lambda(raw: &Value) -> Result<LambdaSpec> {
    let from_text = |s: &str| -> Result<LambdaSpec> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("cannot parse lambda {s:?}")))?;
        Ok(match parts.as_slice() {
            [one] => LambdaSpec::Scalar(*one),
            _ => LambdaSpec::PerTask(parts),
        })
    };
    match raw {
        Value::String(s) => from_text(s),
        other => serde_json::from_value(other.clone())
            .map_err(|e| Error::invalid(format!("cannot parse lambda: {e}"))),
    }
}

fn read_lambda_table(path: &Path) -> Result<LambdaTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn scalar_lambda(spec: &LambdaSpec) -> Result<f64> {
    match spec {
        LambdaSpec::Scalar(v) => Ok(*v),
        _ => Err(Error::invalid("this method takes a single scalar --lambda")),
    }
}

fn cmd_merge(mut args: MergeArgs) -> Result<()> {
    let cfg = args.inputs.resolve()?;
    let method: MergeMethod = require(pick(args.method.take(), cfg.method.clone()), "method")?.parse()?;
    let base_path = require(cfg.base.clone(), "base")?;
    let out = require(pick(args.out.take(), cfg.out.clone()), "out")?;
    let report_path = pick(args.report.take(), cfg.report.clone());
    let seed = pick(args.seed, cfg.seed).unwrap_or(0);
    let keep_fraction = pick(args.keep_fraction, cfg.keep_fraction);
    if keep_fraction.is_some() && method != MergeMethod::Ties {
        return Err(Error::invalid("--keep-fraction only applies to ties"));
    }
    let lambda = match pick(args.lambda.take().map(Value::String), cfg.lambda.clone()) {
        Some(raw) => Some(parse_lambda(&raw)?),
        None => None,
    };
    let mut inputs: Vec<&Path> = vec![&base_path];
    inputs.extend(cfg.finetuned.iter().map(PathBuf::as_path));
    inputs.extend(cfg.taskvec.iter().map(PathBuf::as_path));
    ensure_distinct(&inputs, &out)?;

    let base = Checkpoint::load(&base_path)?;
    let mut recipe = MergeRecipe {
        method,
        task_ids: Vec::new(),
        lambda: None,
        eta: None,
        mask_source: "none".into(),
        mask_ones: None,
        keep_fraction: None,
        alpha: None,
        seed: None,
        preprocess: None,
    };

    let (merged, pruned) = match method {
        MergeMethod::WeightAverage => {
            let cks = load_all(&cfg.finetuned)?;
            if cks.is_empty() {
                return Err(Error::invalid("weight-average needs --finetuned checkpoints"));
            }
            recipe.task_ids = cfg.finetuned.iter().map(|p| file_stem(p)).collect();
            let mut merged = weight_average(&cks)?;
            merged.set_metadata(base.metadata().cloned());
            (merged, None)
        }
        MergeMethod::WiseFt => {
            let [ft_path] = cfg.finetuned.as_slice() else {
                return Err(Error::invalid("wise-ft takes exactly one --finetuned checkpoint"));
            };
            let alpha = pick(args.alpha, cfg.alpha).unwrap_or(DEFAULT_WISE_FT_ALPHA);
            recipe.task_ids = vec![file_stem(ft_path)];
            recipe.alpha = Some(alpha);
            (wise_ft(&base, &Checkpoint::load(ft_path)?, alpha)?, None)
        }
        _ => {
            let mut tvs = load_task_vectors(&cfg, Some(&base))?;
            recipe.task_ids = tvs.iter().map(|t| t.id().to_string()).collect();

            let dare_rate = pick(args.dare, cfg.dare);
            let mwp_keep = pick(args.mwp, cfg.mwp);
            match (dare_rate, mwp_keep) {
                (Some(_), Some(_)) => return Err(Error::invalid("choose one of --dare and --mwp")),
                (Some(p), None) => {
                    tvs = tvs.iter().map(|t| dare(t, p, seed)).collect::<Result<_>>()?;
                    recipe.preprocess = Some(format!("dare(p={p})"));
                    recipe.seed = Some(seed);
                }
                (None, Some(f)) => {
                    tvs = tvs.iter().map(|t| mwp(t, f)).collect::<Result<_>>()?;
                    recipe.preprocess = Some(format!("mwp(keep={f})"));
                }
                (None, None) => {}
            }

            let eta = pick(args.eta, cfg.eta).unwrap_or(DEFAULT_ETA);
            crate::saliency::check_eta(eta)?;
            recipe.eta = Some(eta);
            let mask = match pick(args.mask.take(), cfg.mask.clone()) {
                Some(path) => {
                    recipe.mask_source = format!("file:{}", file_stem(&path));
                    Some(Mask::Layer(read_mask_file(&path)?))
                }
                None => {
                    let kind = pick(args.mask_kind, cfg.mask_kind).unwrap_or(MaskKind::Saliency);
                    recipe.mask_source = kind_name(kind).into();
                    if kind == MaskKind::Random {
                        recipe.seed = Some(seed);
                    }
                    build_mask(kind, &tvs, eta, seed)?.mask
                }
            };
            recipe.mask_ones = mask.as_ref().map(Mask::ones);

            let merged = match method {
                MergeMethod::TaskArithmetic => {
                    let spec = lambda.unwrap_or(LambdaSpec::Scalar(DEFAULT_TASK_ARITHMETIC_LAMBDA));
                    let l = scalar_lambda(&spec)?;
                    recipe.lambda = Some(spec);
                    task_arithmetic(&base, &tvs, l, mask.as_ref())?
                }
                MergeMethod::Ties => {
                    let spec = lambda.unwrap_or(LambdaSpec::Scalar(DEFAULT_TIES_LAMBDA));
                    let l = scalar_lambda(&spec)?;
                    let keep = keep_fraction.unwrap_or(DEFAULT_TIES_KEEP_FRACTION);
                    recipe.lambda = Some(spec);
                    recipe.keep_fraction = Some(keep);
                    ties_merge(&base, &tvs, keep, l, mask.as_ref())?
                }
                MergeMethod::AdamergingApply => {
                    let table = match (pick(args.lambda_table.take(), cfg.lambda_table.clone()), lambda) {
                        (Some(path), None) => read_lambda_table(&path)?,
                        (None, Some(spec)) => {
                            LambdaTable::task_wise(recipe.task_ids.clone(), &spec.per_task(tvs.len())?)
                        }
                        (Some(_), Some(_)) => {
                            return Err(Error::invalid("give either --lambda or --lambda-table"))
                        }
                        (None, None) => {
                            return Err(Error::invalid("adamerging needs --lambda-table or --lambda"))
                        }
                    };
                    let scale = pick(args.coeff_scale, cfg.coeff_scale).unwrap_or(eta);
                    recipe.lambda = Some(LambdaSpec::Table(table.clone()));
                    adamerging_apply(&base, &tvs, &table, scale, mask.as_ref())?
                }
                MergeMethod::PcbApply => {
                    let spec = lambda.unwrap_or(LambdaSpec::Scalar(DEFAULT_PCB_LAMBDA));
                    let lambdas = spec.per_task(tvs.len())?;
                    let beta_paths = if args.beta.is_empty() { cfg.beta.clone() } else { args.beta.clone() };
                    if beta_paths.is_empty() {
                        return Err(Error::invalid("pcb needs one --beta file per task"));
                    }
                    let beta = load_all(&beta_paths)?;
                    recipe.lambda = Some(spec);
                    pcb_apply(&base, &tvs, &beta, &lambdas, mask.as_ref())?
                }
                MergeMethod::WeightAverage | MergeMethod::WiseFt => unreachable!(),
            };
            (merged, mask.map(|m| m.pruned_layers()))
        }
    };

    recipe.validate()?;
    let mut merged = merged;
    merged.insert_metadata(RECIPE_KEY, recipe.to_canonical_json());
    merged.save(&out)?;
    log(format!("wrote merged checkpoint to {}", out.display()));

    let names = base.catalog().names();
    let pruned = pruned.unwrap_or_else(|| vec![false; names.len()]);
    let layers: Vec<Value> = names
        .iter()
        .zip(&pruned)
        .map(|(n, p)| json!({"name": n, "pruned": p}))
        .collect();
    let summary = json!({
        "method": method.as_str(),
        "eta": recipe.eta,
        "lambda": recipe.lambda,
        "mask_source": recipe.mask_source,
        "mask_ones": recipe.mask_ones,
        "layers": layers,
        "output": out,
    });
    write_json(&summary, report_path.as_deref())
}

fn cmd_prop1(args: Prop1Args) -> Result<()> {
    if args.trials == 0 {
        return Err(Error::invalid("--trials must be at least 1"));
    }
    let reports = (0..args.trials)
        .map(|t| {
            prop1_experiment(&SyntheticSpec {
                tasks: args.tasks,
                dim: args.dim,
                selected: args.selected,
                signal: args.signal,
                noise: args.noise,
                seed: args.seed.wrapping_add(t),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let value = if let [single] = reports.as_slice() {
        serde_json::to_value(single).expect("serializes")
    } else {
        let passed = reports.iter().filter(|r| r.passed).count();
        json!({
            "trials": reports.len(),
            "passed": passed,
            "pass_rate": passed as f64 / reports.len() as f64,
            "reports": reports,
        })
    };
    write_json(&value, args.report.as_deref())
}

fn cmd_hscore(args: HscoreArgs) -> Result<()> {
    let h = h_score(args.id, args.ood)?;
    println!("{h:.1}");
    Ok(())
}
