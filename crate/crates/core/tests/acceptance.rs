//! Acceptance criteria. Runs as a plain binary so each criterion prints one
//! status line under `cargo test`; any failure makes the process exit 1.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskvec::merge::{
    adamerging_apply, dare, mwp, pcb_apply, task_arithmetic, ties_merge, LambdaTable,
};
use taskvec::saliency::{compute_saliency, or_masks, threshold_mask};
use taskvec::task_vector::diff;
use taskvec::theory::{h_score, prop1_experiment, SyntheticSpec};
use taskvec::{Checkpoint, Dtype, Mask, SaliencyMatrix, SharedMask, TaskVector, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    o.detail = format!("{} ({:.3}s)", o.detail, elapsed.as_secs_f64());
    if let Some(limit) = limit {
        if elapsed > limit {
            o.passed = false;
            o.detail = format!("{}; over the {:.0}s budget", o.detail, limit.as_secs_f64());
        }
    }
    o
}

const TABLE: [(f64, f64, f64); 17] = [
    (48.0, 61.5, 53.9),
    (90.5, 49.7, 64.2),
    (65.8, 61.3, 63.5),
    (69.1, 51.3, 58.9),
    (72.8, 60.9, 66.3),
    (72.9, 58.0, 64.6),
    (72.7, 61.3, 66.5),
    (71.1, 53.2, 60.9),
    (75.4, 56.5, 64.6),
    (73.7, 53.7, 62.1),
    (76.1, 56.6, 64.9),
    (80.1, 57.7, 67.1),
    (77.3, 61.7, 68.6),
    (81.1, 57.6, 67.4),
    (77.1, 61.4, 68.4),
    (75.8, 53.2, 62.5),
    (77.3, 59.7, 67.4),
];

fn ac1_h_score() -> Outcome {
    let mut worst = 0.0f64;
    for &(id, ood, printed) in &TABLE {
        match h_score(id, ood) {
            Ok(h) => worst = worst.max((h - printed).abs()),
            Err(e) => return outcome(false, format!("h_score({id}, {ood}) failed: {e}")),
        }
    }
    outcome(worst <= 0.05, format!("{} triples, max |error| {worst:.4}", TABLE.len()))
}

fn ac2_oracle() -> Outcome {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let inst = Instance::random(0xAC2_0000 + seed, 5, 12, 16);
        let tvs = inst.task_vectors();
        let base = inst.base_checkpoint();
        let l = inst.names.len();

        let s = compute_saliency(&tvs).unwrap();
        let scores = naive_saliency(&inst.tasks);
        worst = worst.max(max_abs_diff(&s.scores, &scores));

        let mut shared = vec![true; l];
        for (num, den) in [(0, 10), (3, 10), (7, 10), (10, 10)] {
            let masks = threshold_mask(&s, num as f64 / den as f64).unwrap();
            let want = naive_threshold(&scores, floor_ratio(l, num, den));
            if masks.masks != want {
                failures.push(format!("seed {seed}: threshold mask at {num}/{den}"));
            }
            let or = or_masks(&masks).unwrap();
            if or.values != naive_or(&want) {
                failures.push(format!("seed {seed}: OR mask at {num}/{den}"));
            }
            if num == 3 {
                shared = or.values;
            }
        }
        let mask = Mask::Layer(SharedMask {
            layer_names: inst.names.clone(),
            values: shared.clone(),
        });

        let got = task_arithmetic(&base, &tvs, 0.3, Some(&mask)).unwrap();
        worst = worst.max(max_abs_diff(
            &layers_of(&got),
            &naive_task_arithmetic(&inst.base, &inst.tasks, 0.3, &shared),
        ));

        for tenths in [1usize, 2, 5, 10] {
            let frac = tenths as f64 / 10.0;
            let keep = ceil_ratio(inst.total(), tenths, 10);
            let got = ties_merge(&base, &tvs, frac, 0.3, Some(&mask)).unwrap();
            worst = worst.max(max_abs_diff(
                &layers_of(&got),
                &naive_ties(&inst.base, &inst.tasks, keep, 0.3, &shared),
            ));
            for (tv, raw) in tvs.iter().zip(&inst.tasks) {
                let pruned = layers_of(mwp(tv, frac).unwrap().deltas());
                let kept: Vec<bool> = pruned.iter().flatten().map(|&v| v != 0.0).collect();
                let want = naive_top_magnitude(raw, keep);
                let want_kept: Vec<bool> = want
                    .iter()
                    .flatten()
                    .zip(raw.iter().flatten())
                    .map(|(&k, &v)| k && v != 0.0)
                    .collect();
                if kept != want_kept {
                    failures.push(format!("seed {seed}: mwp selection at {frac}"));
                }
                worst = worst.max(max_abs_diff(&pruned, &naive_mwp(raw, keep)));
            }
        }

        let beta_values: Vec<Vec<Vec<f64>>> = inst
            .tasks
            .iter()
            .enumerate()
            .map(|(k, t)| {
                t.iter()
                    .enumerate()
                    .map(|(li, layer)| {
                        (0..layer.len())
                            .map(|i| ((k * 5 + li * 7 + i * 3 + seed as usize) % 5) as f64 * 0.25)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let beta: Vec<Checkpoint> = beta_values
            .iter()
            .map(|b| to_checkpoint(&inst.names, &inst.shapes, b, Dtype::F64))
            .collect();
        let lambdas: Vec<f64> = (0..tvs.len()).map(|k| 1.2 - 0.1 * k as f64).collect();
        let got = pcb_apply(&base, &tvs, &beta, &lambdas, Some(&mask)).unwrap();
        worst = worst.max(max_abs_diff(
            &layers_of(&got),
            &naive_pcb(&inst.base, &inst.tasks, &beta_values, &lambdas, &shared),
        ));
    }
    let passed = failures.is_empty() && worst <= 1e-12;
    let mut detail = format!("100 instances, max value error {worst:.2e}");
    if !failures.is_empty() {
        detail = format!("{detail}; {} decision mismatches, first: {}", failures.len(), failures[0]);
    }
    outcome(passed, detail)
}

fn ac3_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC3);
    let mut runs = 0;
    for trial in 0..24u64 {
        let inst = loop {
            let i = Instance::random(0xAC3_0000 + trial * 97 + rng.random_range(0..50), 1, 12, 16);
            if i.names.len() >= 2 {
                break i;
            }
        };
        let l = inst.names.len();
        let dtype = Dtype::ALL[trial as usize % 4];
        // any eta strictly above 1/L
        let eta = 1.0 / l as f64 + rng.random_range(1e-6..1.0 - 1.0 / l as f64);
        let base = to_checkpoint(&inst.names, &inst.shapes, &inst.base, dtype);
        let ft_values: Vec<Vec<f64>> = inst
            .base
            .iter()
            .zip(&inst.tasks[0])
            .map(|(b, d)| b.iter().zip(d).map(|(x, y)| x + y).collect())
            .collect();
        let ft = to_checkpoint(&inst.names, &inst.shapes, &ft_values, dtype);
        let tv = diff(&ft, &base, "only").unwrap();
        let tvs = [tv];
        let shared = or_masks(&threshold_mask(&compute_saliency(&tvs).unwrap(), eta).unwrap()).unwrap();
        let mask = Mask::Layer(shared);
        let table = LambdaTable::task_wise(vec!["only".into()], &[0.3]);
        let weights: Vec<Vec<f64>> = inst.tasks[0].iter().map(|l| l.iter().map(|v| v.abs()).collect()).collect();
        let beta = [to_checkpoint(&inst.names, &inst.shapes, &weights, Dtype::F32)];
        let merged = [
            task_arithmetic(&base, &tvs, 0.3, Some(&mask)).unwrap(),
            ties_merge(&base, &tvs, 0.2, 0.3, Some(&mask)).unwrap(),
            adamerging_apply(&base, &tvs, &table, eta, Some(&mask)).unwrap(),
            pcb_apply(&base, &tvs, &beta, &[1.2], Some(&mask)).unwrap(),
        ];
        for (m, name) in merged.iter().zip(["task_arithmetic", "ties", "adamerging", "pcb"]) {
            if m.to_bytes() != base.to_bytes() {
                return outcome(false, format!("trial {trial} ({dtype:?}, L={l}, eta={eta:.3}): {name} differs from base"));
            }
            runs += 1;
        }
    }
    outcome(true, format!("{runs} merges bitwise equal to base"))
}

fn ac4_cardinality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC4);
    let mut checked = 0;
    for m in 0..50 {
        let k = rng.random_range(1..=8);
        let l = rng.random_range(1..=24);
        let names: Vec<String> = (0..l).map(|i| format!("layer.{i:02}")).collect();
        let scores: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let mut row: Vec<f64> = Vec::with_capacity(l);
                while row.len() < l {
                    let v: f64 = rng.random_range(0.0..10.0);
                    if !row.contains(&v) {
                        row.push(v);
                    }
                }
                row
            })
            .collect();
        let s = SaliencyMatrix {
            task_ids: (0..k).map(|i| format!("t{i}")).collect(),
            layer_names: names,
            scores,
        };
        for (eta, pruned) in [(0.0, 0), (0.3, l * 3 / 10), (0.7, l * 7 / 10), (1.0, l)] {
            let set = threshold_mask(&s, eta).unwrap();
            let shared = or_masks(&set).unwrap();
            for row in &set.masks {
                let ones = row.iter().filter(|&&b| b).count();
                if ones != l - pruned {
                    return outcome(false, format!("matrix {m}, eta {eta}: {ones} ones, expected {}", l - pruned));
                }
                if row.iter().zip(&shared.values).any(|(&t, &o)| t && !o) {
                    return outcome(false, format!("matrix {m}, eta {eta}: shared mask misses a kept layer"));
                }
            }
            checked += 1;
        }
    }
    outcome(true, format!("50 matrices x 4 ratios ({checked} cases)"))
}

/// Task vectors of continuous F32 values, so no two layer scores tie.
fn f32_task_vectors(seed: u64, transform: impl Fn(usize, f64) -> f64) -> Vec<TaskVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=6);
    let l = rng.random_range(2..=12);
    let sizes: Vec<usize> = (0..l).map(|_| rng.random_range(1..=32)).collect();
    (0..k)
        .map(|t| {
            let mut c = Checkpoint::new();
            for (li, &n) in sizes.iter().enumerate() {
                let scale = rng.random_range(0.1..2.0);
                let values: Vec<f64> = (0..n)
                    .map(|_| transform(li, rng.random_range(-1.0..1.0) * scale))
                    .collect();
                c.insert(format!("enc.{li:02}"), Tensor::from_f64(Dtype::F32, vec![n], &values).unwrap());
            }
            TaskVector::new(format!("t{t}"), c)
        })
        .collect()
}

fn ac5_invariance() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let seed = 0xAC5_0000 + seed;
        let plain = f32_task_vectors(seed, |_, v| v);
        let s = compute_saliency(&plain).unwrap();
        let shifts: Vec<f64> = (0..s.layer_names.len()).map(|l| 0.75 - 0.125 * l as f64).collect();
        for factor in [0.5, 3.0, 17.25] {
            let scaled = f32_task_vectors(seed, |_, v| v * factor);
            let ss = compute_saliency(&scaled).unwrap();
            for eta in [0.0, 0.3, 0.5, 0.7, 1.0] {
                let a = threshold_mask(&s, eta).unwrap();
                let b = threshold_mask(&ss, eta).unwrap();
                if a.masks != b.masks {
                    return outcome(false, format!("seed {seed}: masks change under scaling by {factor} at eta {eta}"));
                }
            }
        }
        let shifted = f32_task_vectors(seed, |l, v| v + shifts[l]);
        let sh = compute_saliency(&shifted).unwrap();
        worst = worst.max(max_abs_diff(&s.scores, &sh.scores));
    }
    outcome(worst <= 1e-6, format!("20 seeds, max saliency drift under per-layer shift {worst:.2e}"))
}

fn ac6_dare() -> Outcome {
    const N: usize = 100_000;
    const P: f64 = 0.9;
    let mut c = Checkpoint::new();
    c.insert("w", Tensor::from_f64(Dtype::F32, vec![N], &vec![2.0; N]).unwrap());
    let tv = TaskVector::new("const", c);
    let a = dare(&tv, P, 1234).unwrap();
    let b = dare(&tv, P, 1234).unwrap();
    let values = a.deltas().get("w").unwrap().to_f64_vec();
    let mean = values.iter().sum::<f64>() / N as f64;
    // each output is 2/(1-p) with probability 1-p, else 0
    let sigma = 2.0 * (P / (1.0 - P)).sqrt();
    let se = sigma / (N as f64).sqrt();
    let identical = a.deltas().to_bytes() == b.deltas().to_bytes();
    let within = (mean - 2.0).abs() <= 3.0 * se;
    outcome(
        within && identical,
        format!("mean {mean:.4}, 3 SE = {:.4}, reproducible bytes: {identical}", 3.0 * se),
    )
}

fn ac7_prop1() -> Outcome {
    let mut passed = 0;
    for seed in 0..100u64 {
        let report = prop1_experiment(&SyntheticSpec {
            tasks: 8,
            dim: 64,
            selected: 8,
            signal: 1.0,
            noise: 0.01,
            seed,
        })
        .unwrap();
        if report.passed {
            passed += 1;
        }
    }
    outcome(passed >= 95, format!("{passed}/100 seeds with ratio above sqrt(8)"))
}

fn ac8_round_trip() -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("tempdir: {e}")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC8);
    let mut per_dtype = BTreeMap::new();
    for i in 0..50 {
        let mut c = Checkpoint::new();
        let count = rng.random_range(1..=8);
        for t in 0..count {
            let dtype = Dtype::ALL[(i + t) % 4];
            let rank = rng.random_range(0..=3);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(0..=5)).collect();
            let numel: usize = shape.iter().product();
            // arbitrary bit patterns, NaN payloads included
            let data: Vec<u8> = (0..numel * dtype.size()).map(|_| rng.random()).collect();
            let name = format!("m{}.{}", rng.random_range(0..1000), t);
            c.insert(name, Tensor::new(dtype, shape, data).unwrap());
            *per_dtype.entry(dtype.as_str()).or_insert(0) += 1;
        }
        if rng.random_bool(0.5) {
            c.insert_metadata("format", "pt");
            c.insert_metadata("note", format!("checkpoint {i}"));
        }
        let first = dir.path().join(format!("a{i}.safetensors"));
        let second = dir.path().join(format!("b{i}.safetensors"));
        c.save(&first).unwrap();
        let loaded = Checkpoint::load(&first).unwrap();
        loaded.save(&second).unwrap();
        let (x, y) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
        if x != y || loaded != c {
            return outcome(false, format!("checkpoint {i} changed across save/load/save"));
        }
    }
    outcome(true, format!("50 checkpoints byte-identical, tensors per dtype {per_dtype:?}"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("AC1 H-score reproduction", Some(Duration::from_secs(1)), ac1_h_score),
        ("AC2 oracle equivalence", Some(Duration::from_secs(30)), ac2_oracle),
        ("AC3 pretrained recovery", Some(Duration::from_secs(1)), ac3_recovery),
        ("AC4 mask cardinality and OR dominance", None, ac4_cardinality),
        ("AC5 scale and translation invariance", None, ac5_invariance),
        ("AC6 DARE unbiasedness", None, ac6_dare),
        ("AC7 synthetic diversity separation", Some(Duration::from_secs(10)), ac7_prop1),
        ("AC8 safetensors round-trip", None, ac8_round_trip),
    ];
    let mut failed = 0;
    for (name, limit, run) in criteria {
        let o = match std::panic::catch_unwind(|| timed(limit, run)) {
            Ok(o) => o,
            Err(_) => outcome(false, "panicked"),
        };
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {}", o.detail);
        if !o.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
