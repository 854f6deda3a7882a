use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::Path;
use std::time::Instant;

use serde_json::json;

use oner_core::metrics::{score_testsets, MetricReport, ScoreDump, TaskMetrics};
use oner_core::pipeline::{load_experience, save_experience, write_atomic, EngineState, RunConfig};
use oner_core::synthdata::{
    export_datasets, generate_all, import_datasets, read_image_f32, TaskDataset,
};
use oner_core::{Error, Result};

use crate::manifest::{artifact, checkpoint_path, with_suffix, RunManifest, Seeds, TaskTiming};

const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

/// Writes to stdout; a closed pipe (`oner inspect | head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_json(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::from_json(DEFAULT_CONFIG)?,
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

pub fn train(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let start = Instant::now();
    let cfg = load_config(config, seed)?;
    let data = generate_all(cfg.engine().geometry(), &cfg.data)?;
    let mut state = EngineState::new(cfg.engine())?;
    let mut tasks = Vec::with_capacity(data.len());
    let mut artifacts = Vec::new();
    for ds in &data {
        let report = state.train_task(ds)?;
        let checkpoint = checkpoint_path(out, ds.task_id);
        save_experience(&state, &checkpoint)?;
        let final_loss = report.epoch_losses.last().map_or(f64::NAN, |l| l.total);
        log::info!(
            "task {} trained in {:.2}s, final loss {final_loss:.5}",
            ds.task_id,
            report.elapsed.as_secs_f64()
        );
        tasks.push(TaskTiming {
            task: ds.task_id,
            seconds: report.elapsed.as_secs_f64(),
            final_loss,
            ipr_status: format!("{:?}", report.ipr_status),
            checkpoint: checkpoint.clone(),
        });
        artifacts.push(artifact(&checkpoint)?);
    }
    save_experience(&state, out)?;
    artifacts.push(artifact(out)?);

    let manifest_path = RunManifest::path_for(out);
    let manifest = RunManifest {
        config_digest: cfg.digest()?,
        seeds: Seeds {
            backbone: cfg.backbone.seed,
            train: cfg.train.seed,
            data: cfg.data.seed,
        },
        tasks,
        total_seconds: start.elapsed().as_secs_f64(),
        artifacts,
    };
    manifest.write(&manifest_path)?;
    emit(&format!(
        "trained {} tasks in {:.2}s; experience {}; manifest {}\n",
        data.len(),
        manifest.total_seconds,
        out.display(),
        manifest_path.display()
    ))
}

/// Test splits for the first `tasks` tasks, from a dataset directory or a
/// run configuration.
fn load_testsets(data: &Path, state: &EngineState, tasks: usize) -> Result<Vec<TaskDataset>> {
    let all = if data.is_dir() {
        import_datasets(data)?
    } else {
        let cfg = load_config(Some(data), None)?;
        generate_all(cfg.engine().geometry(), &cfg.data)?
    };
    if all.len() < tasks {
        return Err(Error::Domain(format!(
            "{} provides {} tasks but the experience was trained on {tasks}",
            data.display(),
            all.len()
        )));
    }
    let geometry = state.config().geometry();
    if let Some(ds) = all.iter().find(|d| d.geometry != geometry) {
        return Err(Error::Domain(format!(
            "task {} has {}px images with {}px patches; the experience expects {}px with {}px",
            ds.task_id,
            ds.geometry.image_size,
            ds.geometry.patch_size,
            geometry.image_size,
            geometry.patch_size
        )));
    }
    Ok(all.into_iter().take(tasks).collect())
}

pub fn eval(experience: &Path, data: &Path, report: &Path, dump: Option<&Path>) -> Result<()> {
    let state = load_experience(experience)?;
    let n = state.tasks_completed();
    if n == 0 {
        return Err(Error::Domain(format!(
            "{} holds no trained tasks",
            experience.display()
        )));
    }
    let testsets = load_testsets(data, &state, n)?;

    // Forgetting needs the metric of every old task after every later task.
    let mut checkpoints = Vec::with_capacity(n);
    if n >= 2 {
        for j in 1..n as u32 {
            let path = checkpoint_path(experience, j);
            if !path.exists() {
                return Err(Error::Domain(format!(
                    "FM_e needs the per-task checkpoint {} (written by `oner train`); it is missing",
                    path.display()
                )));
            }
            let cp = load_experience(&path)?;
            if cp.tasks_completed() != j as usize || cp.config() != state.config() {
                return Err(Error::Domain(format!(
                    "{} is not the task-{j} checkpoint of {}",
                    path.display(),
                    experience.display()
                )));
            }
            checkpoints.push(cp);
        }
    }

    let dumps = score_testsets(&state, &testsets)?;
    let final_metrics: Vec<TaskMetrics> = dumps
        .iter()
        .map(ScoreDump::metrics)
        .collect::<Result<_>>()?;
    let history = if n >= 2 {
        let mut rows = Vec::with_capacity(n);
        for (j, cp) in checkpoints.iter().enumerate() {
            rows.push(oner_core::metrics::evaluate(cp, &testsets[..=j])?);
        }
        rows.push(final_metrics.clone());
        Some(rows)
    } else {
        None
    };
    let metric_report = MetricReport::new(final_metrics, history.as_deref())?;

    let text = metric_report.to_text();
    write_atomic(report, metric_report.to_json()?.as_bytes())?;
    write_atomic(&with_suffix(report, ".txt"), text.as_bytes())?;
    if let Some(path) = dump {
        write_atomic(path, serde_json::to_string(&dumps)?.as_bytes())?;
    }
    emit(&text)
}

pub fn score(experience: &Path, image: &Path, out: &Path) -> Result<()> {
    let state = load_experience(experience)?;
    let side = state.config().backbone.image_size;
    let img = read_image_f32(image, side)?;
    let result = state.score_image(&img)?;
    let bytes: Vec<u8> = result
        .patch_scores
        .iter()
        .flat_map(|&s| (s as f32).to_le_bytes())
        .collect();
    write_atomic(out, &bytes)?;
    let grid = state.config().backbone.grid();
    let mut argmax = 0;
    for (i, &s) in result.patch_scores.iter().enumerate() {
        if s > result.patch_scores[argmax] {
            argmax = i;
        }
    }
    let summary = json!({
        "experience": experience,
        "image": image,
        "image_score": result.image_score,
        "grid": [grid, grid],
        "patch_scores": result.patch_scores,
        "max_patch": { "index": argmax, "row": argmax / grid, "col": argmax % grid },
        "map_file": out,
        "map_format": "f32 little-endian, row-major grid",
    });
    let summary_path = with_suffix(out, ".json");
    write_atomic(
        &summary_path,
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    emit(&format!("image_score = {:.6}\n", result.image_score))
}

pub fn inspect(experience: &Path) -> Result<()> {
    let state = load_experience(experience)?;
    let cfg = state.config();
    let prompts = state.prompts();
    let frozen = prompts.components().iter().filter(|c| c.frozen).count();
    let mut out = String::new();
    let _ = writeln!(out, "experience = {}", experience.display());
    let _ = writeln!(out, "tasks_completed = {}", state.tasks_completed());
    let _ = writeln!(out, "dim = {}", cfg.backbone.dim);
    let _ = writeln!(out, "backbone_seed = {}", cfg.backbone.seed);
    let _ = writeln!(
        out,
        "backbone_parameters = {}",
        state.backbone().parameter_count()
    );
    let _ = writeln!(out, "prompt_components = {}", prompts.len());
    let _ = writeln!(out, "prompt_components_frozen = {frozen}");
    let _ = writeln!(out, "prompt_components_per_task = {}", prompts.per_task());
    let _ = writeln!(out, "prompt_len = {}", prompts.prompt_len());
    let _ = writeln!(
        out,
        "trainable_parameters = {}",
        prompts.trainable_parameters().count
    );
    let _ = writeln!(out, "image_prototypes = {}", state.image_bank().len());
    let _ = writeln!(
        out,
        "pixel_prototypes_per_task = {}",
        state.pixel_bank().per_task()
    );
    let _ = writeln!(
        out,
        "pixel_prototypes_total = {}",
        state.pixel_bank().total_rows()
    );
    for (i, c) in prompts.components().iter().enumerate() {
        let _ = writeln!(
            out,
            "component.{i} = task {} {}",
            c.owner_task,
            if c.frozen { "frozen" } else { "trainable" }
        );
    }
    emit(&out)
}

pub fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let data = generate_all(cfg.engine().geometry(), &cfg.data)?;
    export_datasets(out, &data)?;
    let samples: usize = data.iter().map(|d| d.train.len() + d.test.len()).sum();
    emit(&format!(
        "wrote {} tasks ({samples} samples) to {}\n",
        data.len(),
        out.display()
    ))
}
