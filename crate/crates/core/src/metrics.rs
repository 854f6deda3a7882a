//! Ranking metrics, metric matrices and forgetting measures.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::EngineState;
use crate::synthdata::TaskDataset;

fn check_inputs(scores: &[f64], labels: &[bool], op: &'static str) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op,
            expected: vec![scores.len()],
            got: vec![labels.len()],
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::domain(format!("{op}: score {i} is not finite")));
    }
    Ok(())
}

/// Sorts indices by descending score and yields groups of tied scores as
/// `(positives, negatives)` counts.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut pos, mut neg) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        groups.push((pos, neg));
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels, "auroc")?;
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::domain(
            "auroc needs both positive and negative labels",
        ));
    }
    // Twice the Mann-Whitney U, kept in integers so ties are exact.
    let mut twice_u: u128 = 0;
    let mut neg_below: u64 = n_neg;
    for (pos, neg) in tie_groups(scores, labels) {
        neg_below -= neg;
        twice_u += u128::from(pos) * u128::from(2 * neg_below + neg);
    }
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall step curve, thresholds at each distinct
/// score in descending order.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels, "aupr")?;
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    if n_pos == 0 {
        return Err(Error::domain("aupr needs at least one positive label"));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area = 0.0;
    for (pos, neg) in tie_groups(scores, labels) {
        tp += pos;
        fp += neg;
        if pos > 0 {
            area += (pos as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area)
}

/// `M[j][i]`: metric for task `i` after training task `j` (both 1-based, `i <= j`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMatrix {
    pub name: String,
    rows: Vec<Vec<Option<f64>>>,
}

impl MetricMatrix {
    pub fn new(name: impl Into<String>, tasks: usize) -> Self {
        Self {
            name: name.into(),
            rows: (1..=tasks).map(|j| vec![None; j]).collect(),
        }
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    fn check(&self, j: usize, i: usize) -> Result<()> {
        if i == 0 || j == 0 || i > j || j > self.tasks() {
            return Err(Error::contract(format!(
                "{}: cell M[{j}][{i}] is outside the lower triangle of a {}-task matrix",
                self.name,
                self.tasks()
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, j: usize, i: usize, value: f64) -> Result<()> {
        self.check(j, i)?;
        if !value.is_finite() {
            return Err(Error::domain(format!(
                "{}: M[{j}][{i}] is not finite",
                self.name
            )));
        }
        self.rows[j - 1][i - 1] = Some(value);
        Ok(())
    }

    pub fn get(&self, j: usize, i: usize) -> Result<f64> {
        self.check(j, i)?;
        self.rows[j - 1][i - 1]
            .ok_or_else(|| Error::domain(format!("{}: cell M[{j}][{i}] is missing", self.name)))
    }

    /// Final-row values, the accuracy after the last task.
    pub fn last_row(&self) -> Result<Vec<f64>> {
        let n = self.tasks();
        (1..=n).map(|i| self.get(n, i)).collect()
    }
}

/// Average over old tasks of the largest drop from any earlier checkpoint to
/// the final one. Negative when the final model improved.
pub fn forgetting_measure_e(m: &MetricMatrix) -> Result<f64> {
    let n = m.tasks();
    if n < 2 {
        return Err(Error::domain("forgetting measure needs at least two tasks"));
    }
    let mut sum = 0.0;
    for i in 1..n {
        let last = m.get(n, i)?;
        let mut worst = f64::NEG_INFINITY;
        for j in i..n {
            worst = worst.max(m.get(j, i)? - last);
        }
        sum += worst;
    }
    Ok(sum / (n - 1) as f64)
}

/// Mean gap between task-known and task-predicted metric values.
pub fn forgetting_measure_s(known: &[f64], predicted: &[f64]) -> Result<f64> {
    if known.len() != predicted.len() {
        return Err(Error::Shape {
            op: "forgetting_measure_s",
            expected: vec![known.len()],
            got: vec![predicted.len()],
        });
    }
    if known.is_empty() {
        return Err(Error::domain(
            "forgetting_measure_s needs at least one task",
        ));
    }
    let sum: f64 = known.iter().zip(predicted).map(|(k, p)| k - p).sum();
    Ok(sum / known.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: u32,
    pub image_auroc: f64,
    pub image_aupr: f64,
    pub pixel_auroc: f64,
    pub pixel_aupr: f64,
}

pub const METRIC_NAMES: [&str; 4] = ["image_auroc", "image_aupr", "pixel_auroc", "pixel_aupr"];

impl TaskMetrics {
    pub fn values(&self) -> [f64; 4] {
        [
            self.image_auroc,
            self.image_aupr,
            self.pixel_auroc,
            self.pixel_aupr,
        ]
    }
}

/// Raw scores and labels behind one task's metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDump {
    pub task: u32,
    pub sample_ids: Vec<String>,
    pub image_scores: Vec<f64>,
    pub image_labels: Vec<bool>,
    pub patch_scores: Vec<f64>,
    pub patch_labels: Vec<bool>,
}

impl ScoreDump {
    pub fn metrics(&self) -> Result<TaskMetrics> {
        Ok(TaskMetrics {
            task: self.task,
            image_auroc: auroc(&self.image_scores, &self.image_labels)?,
            image_aupr: aupr(&self.image_scores, &self.image_labels)?,
            pixel_auroc: auroc(&self.patch_scores, &self.patch_labels)?,
            pixel_aupr: aupr(&self.patch_scores, &self.patch_labels)?,
        })
    }
}

/// Scores every test image of every set; images run in parallel, results
/// keep test-set order.
pub fn score_testsets(state: &EngineState, testsets: &[TaskDataset]) -> Result<Vec<ScoreDump>> {
    let patch = state.config().backbone.patch_size;
    testsets
        .iter()
        .map(|ds| {
            if ds.test.is_empty() {
                return Err(Error::domain(format!(
                    "task {} has an empty test set",
                    ds.task_id
                )));
            }
            let scored = ds
                .test
                .par_iter()
                .map(|s| Ok((state.score_image(&s.image)?, s.patch_labels(patch)?)))
                .collect::<Result<Vec<_>>>()?;
            let mut dump = ScoreDump {
                task: ds.task_id,
                sample_ids: ds.test.iter().map(|s| s.id.to_string()).collect(),
                image_scores: Vec::with_capacity(ds.test.len()),
                image_labels: ds.test.iter().map(|s| s.is_anomalous).collect(),
                patch_scores: Vec::new(),
                patch_labels: Vec::new(),
            };
            for (result, labels) in scored {
                dump.image_scores.push(result.image_score);
                dump.patch_scores.extend(result.patch_scores);
                dump.patch_labels.extend(labels);
            }
            Ok(dump)
        })
        .collect()
}

pub fn evaluate(state: &EngineState, testsets: &[TaskDataset]) -> Result<Vec<TaskMetrics>> {
    score_testsets(state, testsets)?
        .iter()
        .map(ScoreDump::metrics)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_task: Vec<TaskMetrics>,
    pub mean: TaskMetrics,
    /// FM_e per metric, present when per-task checkpoints were evaluated.
    pub forgetting: Option<Vec<(String, f64)>>,
    pub matrices: Vec<MetricMatrix>,
}

impl MetricReport {
    /// Builds the report from the metrics after the final task, plus the
    /// metrics after every earlier checkpoint when available.
    pub fn new(
        final_metrics: Vec<TaskMetrics>,
        history: Option<&[Vec<TaskMetrics>]>,
    ) -> Result<Self> {
        if final_metrics.is_empty() {
            return Err(Error::domain("metric report needs at least one task"));
        }
        let n = final_metrics.len() as f64;
        let mut mean = TaskMetrics::default();
        for m in &final_metrics {
            mean.image_auroc += m.image_auroc / n;
            mean.image_aupr += m.image_aupr / n;
            mean.pixel_auroc += m.pixel_auroc / n;
            mean.pixel_aupr += m.pixel_aupr / n;
        }
        let (forgetting, matrices) = match history {
            None => (None, Vec::new()),
            Some(rows) => {
                let matrices = build_matrices(rows)?;
                let fm = matrices
                    .iter()
                    .map(|m| Ok((m.name.clone(), forgetting_measure_e(m)?)))
                    .collect::<Result<Vec<_>>>()?;
                (Some(fm), matrices)
            }
        };
        Ok(Self {
            per_task: final_metrics,
            mean,
            forgetting,
            matrices,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One `key = value` line per metric.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in &self.per_task {
            for (name, v) in METRIC_NAMES.iter().zip(m.values()) {
                let _ = writeln!(out, "task{}.{name} = {v:.6}", m.task);
            }
        }
        for (name, v) in METRIC_NAMES.iter().zip(self.mean.values()) {
            let _ = writeln!(out, "acc.{name} = {v:.6}");
        }
        if let Some(fm) = &self.forgetting {
            for (name, v) in fm {
                let _ = writeln!(out, "fm_e.{name} = {v:.6}");
            }
        }
        out
    }
}

/// `rows[j-1]` holds the metrics for tasks `1..=j` after training task `j`.
pub fn build_matrices(rows: &[Vec<TaskMetrics>]) -> Result<Vec<MetricMatrix>> {
    let n = rows.len();
    let mut matrices: Vec<MetricMatrix> = METRIC_NAMES
        .iter()
        .map(|m| MetricMatrix::new(*m, n))
        .collect();
    for (j, row) in rows.iter().enumerate() {
        if row.len() != j + 1 {
            return Err(Error::contract(format!(
                "checkpoint {} evaluated {} tasks, expected {}",
                j + 1,
                row.len(),
                j + 1
            )));
        }
        for (i, m) in row.iter().enumerate() {
            for (mat, v) in matrices.iter_mut().zip(m.values()) {
                mat.set(j + 1, i + 1, v)?;
            }
        }
    }
    Ok(matrices)
}
