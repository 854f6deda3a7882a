//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oner_core::backbone::{Backbone, BackboneConfig, Image};
use oner_core::losses::{loss_align, loss_ipr, loss_itc, loss_tsc, PatchLabels, TscSign};
use oner_core::metrics::{
    aupr, auroc, build_matrices, evaluate, forgetting_measure_e, forgetting_measure_s, MetricMatrix,
};
use oner_core::numerics::{cosine_similarity, l2_normalize, LbfgsConfig, Tape, Tensor, Var};
use oner_core::pipeline::{
    decode_experience, encode_experience, prototype_bytes_per_task, EngineState, RunConfig,
};
use oner_core::prompt_bank::PromptBank;
use oner_core::prototypes::{
    coverage_objective, refine_image_prototype, select_pixel_prototype_indices, ImagePrototypeBank,
    PixelPrototypeBank,
};
use oner_core::synthdata::{generate_all, Split, TaskDataset};
use oner_core::Error;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    l2_normalize(&rand_vec(rng, d)).unwrap()
}

// ---------------------------------------------------------------------------
// 1. gradients

const H: f64 = 1e-6;

/// Largest relative error between the tape gradient and central differences,
/// measured on the whole gradient vector.
fn fd_error(x: &[f64], f: &dyn Fn(&[f64]) -> f64, analytic: &[f64]) -> f64 {
    let mut numeric = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + H;
        let up = f(&probe);
        probe[i] = x[i] - H;
        let down = f(&probe);
        probe[i] = x[i];
        numeric[i] = (up - down) / (2.0 * H);
    }
    let diff: f64 = numeric
        .iter()
        .zip(analytic)
        .map(|(n, a)| (n - a).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(&numeric).max(norm(analytic)).max(1e-8);
    diff / scale
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Evaluates `build` on a fresh tape with `x` as the only gradient leaf.
fn value_and_grad(
    shape: &[usize],
    x: &[f64],
    build: &dyn Fn(&mut Tape, Var) -> Var,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::new(shape.to_vec(), x.to_vec()).unwrap());
    let loss = build(&mut tape, v);
    tape.backward(loss).unwrap();
    (tape.value(loss).item().unwrap(), tape.grad(v).into_data())
}

fn check_leaf(shape: &[usize], x: &[f64], build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    let (_, g) = value_and_grad(shape, x, build);
    let f = |p: &[f64]| value_and_grad(shape, p, build).0;
    fd_error(x, &f, &g)
}

fn pixel_bank(rng: &mut ChaCha8Rng, tasks: usize, per_task: usize, d: usize) -> PixelPrototypeBank {
    let mut bank = PixelPrototypeBank::new(per_task, d);
    for t in 1..=tasks {
        let rows: Vec<Vec<f64>> = (0..per_task).map(|_| rand_unit(rng, d)).collect();
        bank.integrate(t as u32, Tensor::from_rows(&rows).unwrap())
            .unwrap();
    }
    bank
}

fn image_bank(rng: &mut ChaCha8Rng, tasks: usize, d: usize) -> ImagePrototypeBank {
    let mut bank = ImagePrototypeBank::new(d);
    for t in 1..=tasks {
        bank.integrate(t as u32, rand_unit(rng, d)).unwrap();
    }
    bank
}

/// Gradient of the full training objective with respect to every trainable
/// prompt parameter, through prompt assembly and the prompted backbone.
fn total_loss_instance(rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let cfg = BackboneConfig {
        image_size: 8,
        patch_size: 4,
        dim: 8,
        blocks: 2,
        heads: 2,
        mlp_ratio: 2,
        seed,
        ..BackboneConfig::default()
    };
    let backbone = Backbone::new(cfg).unwrap();
    let d = cfg.dim;
    let np = cfg.num_patches();
    let image = Image::new(8, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let base = backbone.encode(&image).unwrap().image.into_data();
    let mut bank = PromptBank::new(2, d, 2).unwrap();
    bank.expand(1, seed).unwrap();
    bank.expand(2, seed + 1).unwrap();
    let target = rand_unit(rng, d);
    let history = pixel_bank(rng, 1, 3, d);
    let labels = PatchLabels((0..np).map(|i| (i % 3) as u32).collect());

    let shapes: Vec<Vec<usize>> = bank
        .trainable_parameters()
        .tensors
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let flat: Vec<f64> = bank
        .trainable_parameters()
        .tensors
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();

    let eval = |x: &[f64]| -> (f64, Vec<f64>) {
        let mut b = bank.clone();
        let mut at = 0;
        for (t, shape) in b.trainable_tensors_mut().into_iter().zip(&shapes) {
            let n: usize = shape.iter().product();
            *t = Tensor::new(shape.clone(), x[at..at + n].to_vec()).unwrap();
            at += n;
        }
        let mut tape = Tape::new();
        let asm = b.assemble_on_tape(&mut tape, &base).unwrap();
        let (out, _) = backbone
            .forward(&mut tape, &image, Some(asm.prompt), false)
            .unwrap();
        let align = loss_align(&mut tape, out.image, &target).unwrap();
        let itc = loss_itc(&mut tape, out.patches, &history).unwrap();
        let (tsc, _, _) = loss_tsc(&mut tape, out.patches, &labels, TscSign::Contrastive).unwrap();
        let s = tape.add(align, itc).unwrap();
        let total = tape.add(s, tsc).unwrap();
        tape.backward(total).unwrap();
        let grad = asm
            .trainable
            .flat()
            .iter()
            .flat_map(|&v| tape.grad(v).into_data())
            .collect();
        (tape.value(total).item().unwrap(), grad)
    };
    let (_, g) = eval(&flat);
    fd_error(&flat, &|x| eval(x).0, &g)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut count = 0;
    let mut record = |name: &'static str, err: f64, worst: &mut Vec<(&str, f64)>| {
        count += 1;
        match worst.iter_mut().find(|(n, _)| *n == name) {
            Some((_, w)) => *w = w.max(err),
            None => worst.push((name, err)),
        }
    };

    for _ in 0..25 {
        let d = rng.random_range(2..12);
        let x = rand_vec(&mut rng, d);
        let target = rand_unit(&mut rng, d);
        let e = check_leaf(&[d], &x, &|t, v| loss_align(t, v, &target).unwrap());
        record("align", e, &mut worst);
    }
    for _ in 0..25 {
        let (n, d) = (rng.random_range(2..8), rng.random_range(2..8));
        let x = rand_vec(&mut rng, n * d);
        let (tasks, per) = (rng.random_range(1..3), rng.random_range(1..4));
        let bank = pixel_bank(&mut rng, tasks, per, d);
        let e = check_leaf(&[n, d], &x, &|t, v| loss_itc(t, v, &bank).unwrap());
        record("itc", e, &mut worst);
    }
    for _ in 0..25 {
        let (n, d) = (rng.random_range(3..9), rng.random_range(2..8));
        let x = rand_vec(&mut rng, n * d);
        let mut labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
        labels[0] = 0;
        labels[1] = 1;
        labels[2] = 0;
        let labels = PatchLabels(labels);
        let sign = if rng.random_bool(0.5) {
            TscSign::Contrastive
        } else {
            TscSign::Literal
        };
        let e = check_leaf(&[n, d], &x, &|t, v| {
            loss_tsc(t, v, &labels, sign).unwrap().0
        });
        record("tsc", e, &mut worst);
    }
    for _ in 0..25 {
        let d = rng.random_range(2..10);
        let x = rand_vec(&mut rng, d);
        let raw = rand_unit(&mut rng, d);
        let tasks = rng.random_range(0..4);
        let hist = image_bank(&mut rng, tasks, d);
        let e = check_leaf(&[d], &x, &|t, v| loss_ipr(t, v, &raw, &hist).unwrap());
        record("ipr", e, &mut worst);
    }
    for i in 0..10 {
        let e = total_loss_instance(&mut rng, 500 + i);
        record("prompted_total", e, &mut worst);
    }

    let elapsed = start.elapsed();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let per: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        count >= 100 && max < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "{count} instances, max rel err {max:.2e} ({}), {:.1}s",
            per.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. freeze and rehearsal audit

struct Snapshot {
    frozen: Vec<Vec<u8>>,
    images: Vec<Vec<u8>>,
    pixels: Vec<Vec<u8>>,
    weights: String,
}

fn snapshot(state: &EngineState) -> Snapshot {
    let bytes = |v: &[f64]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
    Snapshot {
        frozen: state
            .prompts()
            .components()
            .iter()
            .filter(|c| c.frozen)
            .map(|c| c.to_le_bytes())
            .collect(),
        images: state
            .image_bank()
            .entries()
            .iter()
            .map(|(_, p)| bytes(p))
            .collect(),
        pixels: state
            .pixel_bank()
            .entries()
            .iter()
            .map(|(_, p)| p.to_le_bytes())
            .collect(),
        weights: state.backbone().weight_digest(),
    }
}

fn criterion_audit(cfg: &RunConfig, data: &[TaskDataset]) -> Outcome {
    let mut state = EngineState::new(cfg.engine()).unwrap();
    let mut violations = Vec::new();
    let mut checked = 0;
    for ds in data {
        let before = snapshot(&state);
        let report = state.train_task(ds).unwrap();
        let after = snapshot(&state);
        for (i, b) in before.frozen.iter().enumerate() {
            checked += 1;
            if after.frozen.get(i) != Some(b) {
                violations.push(format!("task {}: frozen component {i} changed", ds.task_id));
            }
        }
        for (name, b, a) in [
            ("image", &before.images, &after.images),
            ("pixel", &before.pixels, &after.pixels),
        ] {
            for (i, e) in b.iter().enumerate() {
                checked += 1;
                if a.get(i) != Some(e) {
                    violations.push(format!(
                        "task {}: {name} bank entry {i} changed",
                        ds.task_id
                    ));
                }
            }
        }
        if before.weights != after.weights {
            violations.push(format!("task {}: backbone weights changed", ds.task_id));
        }
        if report.accessed.is_empty() {
            violations.push(format!("task {}: empty access log", ds.task_id));
        }
        for id in &report.accessed {
            checked += 1;
            if id.task != ds.task_id || id.split != Split::Train {
                violations.push(format!("task {}: accessed {id}", ds.task_id));
            }
        }
        // Newly trained components are frozen once the task ends.
        if state.prompts().components().iter().any(|c| !c.frozen) {
            violations.push(format!(
                "task {}: unfrozen component after training",
                ds.task_id
            ));
        }
    }
    // No raw samples are retained: the experience is exactly prompts + prototypes.
    let d = cfg.backbone.dim;
    let bytes = encode_experience(&state, None).unwrap();
    let config_len = serde_json::to_vec(state.config()).unwrap().len();
    let prompts_len = 16 + state.prompts().len() * (8 + 4 * (2 * d + cfg.train.prompt_len * d));
    let banks_len =
        8 + 12 + data.len() * prototype_bytes_per_task(d, state.config().prototypes_per_task());
    let expected = 8 + 4 * 12 + config_len + prompts_len + banks_len + 4;
    if bytes.len() != expected {
        violations.push(format!(
            "experience is {} bytes, expected {expected}",
            bytes.len()
        ));
    }
    outcome(
        violations.is_empty(),
        if violations.is_empty() {
            format!("{} tasks, {checked} checks, 0 violations", data.len())
        } else {
            format!("{} violations: {}", violations.len(), violations.join("; "))
        },
    )
}

// ---------------------------------------------------------------------------
// 3. pixel prototype selection against brute force

fn euclidean_radius(points: &Tensor, centers: &[Vec<f64>]) -> f64 {
    coverage_objective(points, centers.iter().map(Vec::as_slice)).sqrt()
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

fn criterion_ispp() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_ratio: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=3usize.min(n));
        let h = rng.random_range(0..=2);
        // Quantized coordinates make distance ties common.
        let quant = |rng: &mut ChaCha8Rng| f64::from(rng.random_range(-4i32..=4)) / 4.0;
        let pts = Tensor::matrix(n, d, (0..n * d).map(|_| quant(&mut rng)).collect()).unwrap();
        let mut history = PixelPrototypeBank::new(h.max(1), d);
        let mut hist_rows = Vec::new();
        if h > 0 {
            let rows: Vec<Vec<f64>> = (0..h).map(|_| rand_unit(&mut rng, d)).collect();
            history
                .integrate(1, Tensor::from_rows(&rows).unwrap())
                .unwrap();
            hist_rows = rows;
        }
        let picked = select_pixel_prototype_indices(&pts, &history, k).unwrap();
        let again = select_pixel_prototype_indices(&pts, &history, k).unwrap();
        if picked != again {
            failures += 1;
            continue;
        }
        let centers = |idx: &[usize]| -> Vec<Vec<f64>> {
            idx.iter()
                .map(|&i| pts.row(i).to_vec())
                .chain(hist_rows.iter().cloned())
                .collect()
        };
        let greedy = euclidean_radius(&pts, &centers(&picked));
        let optimum = subsets(n, k)
            .iter()
            .map(|s| euclidean_radius(&pts, &centers(s)))
            .fold(f64::INFINITY, f64::min);
        if greedy > 2.0 * optimum + 1e-12 {
            failures += 1;
        }
        if optimum > 0.0 {
            worst_ratio = worst_ratio.max(greedy / optimum);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && elapsed < Duration::from_secs(30),
        format!(
            "200 instances, {failures} failures, worst greedy/optimum radius {worst_ratio:.3}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. image prototype refinement against a grid search

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

fn criterion_ipr() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cfg = LbfgsConfig::default();
    let mut worst_angle: f64 = 0.0;
    let mut failures = Vec::new();
    for case in 0..50 {
        let raw = rand_unit(&mut rng, 2);
        let tasks = rng.random_range(1..4);
        let hist = image_bank(&mut rng, tasks, 2);
        let refined = refine_image_prototype(&raw, &hist, &cfg).unwrap();
        let steps = 62_832;
        let (mut best, mut best_theta) = (f64::INFINITY, 0.0);
        for s in 0..steps {
            let theta = s as f64 * std::f64::consts::TAU / steps as f64;
            let p = [theta.cos(), theta.sin()];
            let l = -cosine_similarity(&p, &raw).unwrap()
                + hist
                    .entries()
                    .iter()
                    .map(|(_, h)| cosine_similarity(&p, h).unwrap())
                    .fold(f64::NEG_INFINITY, f64::max);
            if l < best {
                best = l;
                best_theta = theta;
            }
        }
        let got = refined.prototype[1].atan2(refined.prototype[0]);
        let angle = circular_distance(got, best_theta);
        worst_angle = worst_angle.max(angle);
        if angle > 0.01 {
            failures.push(format!("case {case}: {angle:.4} rad"));
        }
    }
    let mut descents = 0;
    for _ in 0..50 {
        let d = rng.random_range(2..=32);
        let raw = rand_unit(&mut rng, d);
        let tasks = rng.random_range(0..5);
        let hist = image_bank(&mut rng, tasks, d);
        let refined = refine_image_prototype(&raw, &hist, &cfg).unwrap();
        if refined.refined_loss <= refined.raw_loss {
            descents += 1;
        } else {
            failures.push(format!("d={d}: loss rose"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "50 d=2 cases, worst angle {worst_angle:.2e} rad; {descents}/50 no-ascent cases{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. metrics against direct oracles

fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Threshold sweep in exact rational arithmetic.
fn sweep_aupr(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&l| l).count() as u128;
    // Running sum as a fraction num/den.
    let (mut num, mut den): (u128, u128) = (0, 1);
    let mut prev_tp = 0u128;
    for t in thresholds {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **s >= t && **l)
            .count() as u128;
        let k = scores.iter().filter(|s| **s >= t).count() as u128;
        // (tp - prev_tp) / n_pos * tp / k
        let (a, b) = ((tp - prev_tp) * tp, n_pos * k);
        num = num * b + a * den;
        den *= b;
        let g = gcd(num, den);
        num /= g;
        den /= g;
        prev_tp = tp;
    }
    num as f64 / den as f64
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut mismatches = Vec::new();
    let mut max_aupr_gap: f64 = 0.0;
    for case in 0..500 {
        let n = rng.random_range(2..=30);
        let levels = rng.random_range(2..=12);
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels))
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = auroc(&scores, &labels).unwrap();
        if a != pairwise_auroc(&scores, &labels) {
            mismatches.push(format!("auroc case {case}"));
        }
        let p = aupr(&scores, &labels).unwrap();
        let gap = (p - sweep_aupr(&scores, &labels)).abs();
        max_aupr_gap = max_aupr_gap.max(gap);
        // The rational oracle is exact; allow only final-rounding differences.
        if gap > 1e-15 {
            mismatches.push(format!("aupr case {case}"));
        }
    }
    for case in 0..100 {
        let n = rng.random_range(2..=6);
        let mut m = MetricMatrix::new("m", n);
        let mut cells = vec![vec![0.0; n]; n];
        for (j, row) in cells.iter_mut().enumerate() {
            for (i, cell) in row.iter_mut().enumerate().take(j + 1) {
                *cell = rng.random_range(0.0..1.0);
                m.set(j + 1, i + 1, *cell).unwrap();
            }
        }
        let mut sum = 0.0;
        for i in 0..n - 1 {
            let mut best = f64::NEG_INFINITY;
            for row in cells.iter().take(n - 1).skip(i) {
                best = best.max(row[i] - cells[n - 1][i]);
            }
            sum += best;
        }
        if forgetting_measure_e(&m).unwrap() != sum / (n - 1) as f64 {
            mismatches.push(format!("fm_e case {case}"));
        }
        let known = rand_vec(&mut rng, n);
        let pred = rand_vec(&mut rng, n);
        let mut s = 0.0;
        for i in 0..n {
            s += known[i] - pred[i];
        }
        if forgetting_measure_s(&known, &pred).unwrap() != s / n as f64 {
            mismatches.push(format!("fm_s case {case}"));
        }
    }
    outcome(
        mismatches.is_empty(),
        format!(
            "500 auroc/aupr + 100 fm_e/fm_s instances, {} mismatches, max aupr gap {max_aupr_gap:.1e}{}",
            mismatches.len(),
            if mismatches.is_empty() {
                String::new()
            } else {
                format!(": {}", mismatches.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. end to end

fn criterion_end_to_end(cfg: &RunConfig, data: &[TaskDataset]) -> Outcome {
    let start = Instant::now();
    let mut state = EngineState::new(cfg.engine()).unwrap();
    let mut history = Vec::new();
    for ds in data {
        state.train_task(ds).unwrap();
        history.push(evaluate(&state, &data[..ds.task_id as usize]).unwrap());
    }
    let elapsed = start.elapsed();
    let last = history.last().unwrap();
    let matrices = build_matrices(&history).unwrap();
    let fm = forgetting_measure_e(&matrices[0]).unwrap();
    let min_img = last.iter().map(|m| m.image_auroc).fold(1.0, f64::min);
    let min_pix = last.iter().map(|m| m.pixel_auroc).fold(1.0, f64::min);
    let per: Vec<String> = last
        .iter()
        .map(|m| format!("t{} {:.3}/{:.3}", m.task, m.image_auroc, m.pixel_auroc))
        .collect();
    outcome(
        min_img >= 0.85 && min_pix >= 0.80 && fm <= 0.05 && elapsed < Duration::from_secs(600),
        format!(
            "image/patch AUROC {}; FM_e(image AUROC) {fm:.4}; {:.1}s",
            per.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. parameter count

fn criterion_parameter_count(cfg: &RunConfig, data: &[TaskDataset]) -> Outcome {
    let mut failures = Vec::new();
    let mut checked = 0;
    for (mc, d, lp) in [(1, 4, 1), (2, 8, 3), (3, 16, 2), (2, 32, 4), (5, 6, 7)] {
        let mut bank = PromptBank::new(mc, d, lp).unwrap();
        for t in 1..=4u32 {
            bank.expand(t, u64::from(t)).unwrap();
            checked += 1;
            let count = bank.trainable_parameters().count;
            if count != mc * (2 * d + lp * d) {
                failures.push(format!("M_c={mc} d={d} L_p={lp} task {t}: {count}"));
            }
        }
    }
    // Inside the pipeline: just before each task's epochs, after expansion.
    let mut state = EngineState::new(cfg.engine()).unwrap();
    let (mc, d, lp) = (
        cfg.train.components_per_task,
        cfg.backbone.dim,
        cfg.train.prompt_len,
    );
    for ds in data.iter().take(2) {
        let mut probe = state.prompts().clone();
        probe.expand(ds.task_id, 0).unwrap();
        checked += 1;
        if probe.trainable_parameters().count != mc * (2 * d + lp * d) {
            failures.push(format!("pipeline task {}", ds.task_id));
        }
        state.train_task(ds).unwrap();
        if state.prompts().trainable_parameters().count != 0 {
            failures.push(format!(
                "task {}: trainable parameters after freeze",
                ds.task_id
            ));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{checked} expansions, count == M_c*(2d + L_p*d) in all{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. persistence

fn criterion_persistence(cfg: &RunConfig, data: &[TaskDataset]) -> Outcome {
    let mut problems = Vec::new();
    let mut state = EngineState::new(cfg.engine()).unwrap();
    for ds in data.iter().take(2) {
        state.train_task(ds).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.oner");
    oner_core::pipeline::save_experience(&state, &path).unwrap();
    let loaded = oner_core::pipeline::load_experience(&path).unwrap();
    let expected = state.rounded_to_f32();
    if loaded.config() != expected.config()
        || loaded.prompts() != expected.prompts()
        || loaded.image_bank() != expected.image_bank()
        || loaded.pixel_bank() != expected.pixel_bank()
        || loaded.backbone().weight_digest() != state.backbone().weight_digest()
    {
        problems.push("round trip differs from the f32-rounded state".to_string());
    }
    let bytes = std::fs::read(&path).unwrap();
    if encode_experience(&loaded, None).unwrap() != bytes {
        problems.push("re-encoding a loaded file changes bytes".to_string());
    }

    let mut corrupt = bytes.clone();
    corrupt[0] ^= 0xff;
    match decode_experience(&corrupt) {
        Err(Error::Parse { reason, .. }) if reason.contains("bad magic") => {}
        other => problems.push(format!("bad magic not reported: {other:?}")),
    }
    let mut corrupt = bytes.clone();
    corrupt[4] = 2;
    if !matches!(
        decode_experience(&corrupt),
        Err(Error::Parse { offset: 4, .. })
    ) {
        problems.push("bad version not reported at offset 4".to_string());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut flips = 0;
    for _ in 0..100 {
        let mut c = bytes.clone();
        let i = rng.random_range(8..c.len());
        c[i] ^= 1 << rng.random_range(0..8);
        if matches!(decode_experience(&c), Err(Error::Parse { .. })) {
            flips += 1;
        }
    }
    if flips != 100 {
        problems.push(format!("{} bit flips accepted", 100 - flips));
    }
    let mut truncations = 0;
    for _ in 0..100 {
        let n = rng.random_range(0..bytes.len());
        let result = std::panic::catch_unwind(|| decode_experience(&bytes[..n]));
        match result {
            Ok(Err(Error::Parse { .. })) => truncations += 1,
            Ok(other) => problems.push(format!("truncation to {n}: {:?}", other.map(|_| ()))),
            Err(_) => problems.push(format!("truncation to {n} panicked")),
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "bit-exact f32 round trip; magic/version/100 bit flips rejected; {truncations}/100 truncations rejected{}",
            if problems.is_empty() {
                String::new()
            } else {
                format!("; problems: {}", problems.join("; "))
            }
        ),
    )
}

fn main() -> ExitCode {
    let cfg = RunConfig::default();
    let data = generate_all(cfg.engine().geometry(), &cfg.data).expect("default data generates");

    type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 gradient suite", Box::new(criterion_gradients)),
        (
            "2 freeze/rehearsal audit",
            Box::new(|| criterion_audit(&cfg, &data)),
        ),
        ("3 ISPP oracle", Box::new(criterion_ispp)),
        ("4 IPR oracle", Box::new(criterion_ipr)),
        ("5 metric oracles", Box::new(criterion_metrics)),
        (
            "6 end-to-end synthetic run",
            Box::new(|| criterion_end_to_end(&cfg, &data)),
        ),
        (
            "7 parameter-count law",
            Box::new(|| criterion_parameter_count(&cfg, &data)),
        ),
        (
            "8 persistence",
            Box::new(|| criterion_persistence(&cfg, &data)),
        ),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| outcome(false, "panicked"));
        let tag = if result.passed { "PASS" } else { "FAIL" };
        if !result.passed {
            failed += 1;
        }
        println!("criterion {name}: {tag}: {}", result.detail);
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
