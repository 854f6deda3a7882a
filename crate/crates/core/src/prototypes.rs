//! Semantic prototype banks: one refined image-level vector per task and
//! `N_s` selected patch-level vectors per task.

use crate::backbone::{Backbone, Image};
use crate::error::{Error, Result};
use crate::losses::loss_ipr;
use crate::numerics::{
    l2_normalize, lbfgs_minimize, norm, squared_distance, LbfgsConfig, LbfgsStatus, Tape, Tensor,
};

/// Rows read back from 32-bit storage are only unit-norm to about 1e-7.
const UNIT_TOLERANCE: f64 = 1e-6;

fn check_next_task(last: Option<u32>, task: u32) -> Result<()> {
    let expected = last.map_or(1, |t| t + 1);
    if task != expected {
        return Err(Error::contract(format!(
            "prototype bank: integrate task {task}, expected task {expected}"
        )));
    }
    Ok(())
}

fn check_unit(row: &[f64], what: &str) -> Result<()> {
    let n = norm(row);
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::domain(format!(
            "{what}: row has norm {n}, expected 1"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePrototypeBank {
    dim: usize,
    entries: Vec<(u32, Vec<f64>)>,
}

impl ImagePrototypeBank {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u32, Vec<f64>)] {
        &self.entries
    }

    pub fn last_task(&self) -> Option<u32> {
        self.entries.last().map(|(t, _)| *t)
    }

    pub fn get(&self, task: u32) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, p)| p.as_slice())
    }

    pub fn integrate(&mut self, task: u32, prototype: Vec<f64>) -> Result<()> {
        check_next_task(self.last_task(), task)?;
        if prototype.len() != self.dim {
            return Err(Error::Shape {
                op: "ImagePrototypeBank::integrate",
                expected: vec![self.dim],
                got: vec![prototype.len()],
            });
        }
        check_unit(&prototype, "image prototype")?;
        self.entries.push((task, prototype));
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelPrototypeBank {
    per_task: usize,
    dim: usize,
    entries: Vec<(u32, Tensor)>,
}

impl PixelPrototypeBank {
    pub fn new(per_task: usize, dim: usize) -> Self {
        Self {
            per_task,
            dim,
            entries: Vec::new(),
        }
    }

    /// `N_s`
    pub fn per_task(&self) -> usize {
        self.per_task
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u32, Tensor)] {
        &self.entries
    }

    pub fn last_task(&self) -> Option<u32> {
        self.entries.last().map(|(t, _)| *t)
    }

    pub fn total_rows(&self) -> usize {
        self.entries.len() * self.per_task
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().flat_map(|(_, p)| p.row_iter())
    }

    /// Every stored row, unit-normalized, stacked into one matrix.
    pub fn normalized_rows(&self) -> Result<Tensor> {
        let rows = self.rows().map(l2_normalize).collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    pub fn integrate(&mut self, task: u32, prototypes: Tensor) -> Result<()> {
        check_next_task(self.last_task(), task)?;
        if prototypes.shape() != [self.per_task, self.dim] {
            return Err(Error::Shape {
                op: "PixelPrototypeBank::integrate",
                expected: vec![self.per_task, self.dim],
                got: prototypes.shape().to_vec(),
            });
        }
        for r in prototypes.row_iter() {
            check_unit(r, "pixel prototype")?;
        }
        self.entries.push((task, prototypes));
        Ok(())
    }
}

/// Mean un-prompted image-level feature over `images`, unit-normalized.
pub fn compute_raw_prototype<'a>(
    backbone: &Backbone,
    images: impl IntoIterator<Item = &'a Image>,
) -> Result<Vec<f64>> {
    let features = images
        .into_iter()
        .map(|img| backbone.encode(img).map(|f| f.image.into_data()))
        .collect::<Result<Vec<_>>>()?;
    raw_prototype_from_features(&features)
}

pub fn raw_prototype_from_features(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = features.first() else {
        return Err(Error::domain("raw prototype of an empty dataset"));
    };
    let mut mean = vec![0.0; first.len()];
    for f in features {
        if f.len() != mean.len() {
            return Err(Error::Shape {
                op: "raw_prototype",
                expected: vec![mean.len()],
                got: vec![f.len()],
            });
        }
        mean.iter_mut().zip(f).for_each(|(m, x)| *m += x);
    }
    let n = features.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    l2_normalize(&mean)
}

#[derive(Clone, Debug)]
pub struct RefinedPrototype {
    /// Unit-norm refined prototype.
    pub prototype: Vec<f64>,
    pub status: LbfgsStatus,
    pub iterations: usize,
    pub raw_loss: f64,
    pub refined_loss: f64,
}

/// Minimizes the similarity-minus-separation objective from `raw` with L-BFGS.
///
/// The objective is scale invariant, so only the direction of the optimum is
/// meaningful; the result is returned unit-normalized. When the line search
/// gives up, the best iterate found so far is kept and the status says so.
pub fn refine_image_prototype(
    raw: &[f64],
    history: &ImagePrototypeBank,
    cfg: &LbfgsConfig,
) -> Result<RefinedPrototype> {
    let start = l2_normalize(raw)?;
    let objective = |x: &[f64], grad: &mut [f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(x.to_vec())?);
        let l = loss_ipr(&mut tape, v, &start, history)?;
        tape.backward(l)?;
        grad.copy_from_slice(tape.grad(v).data());
        tape.value(l).item()
    };
    let result = lbfgs_minimize(objective, &start, cfg)?;
    if result.status == LbfgsStatus::LineSearchFailed {
        log::warn!(
            "image prototype refinement stopped early after {} iterations",
            result.iterations
        );
    }
    let prototype = l2_normalize(&result.x)?;
    let raw_loss = crate::losses::ipr_value(&start, &start, history)?;
    let refined_loss = crate::losses::ipr_value(&prototype, &start, history)?;
    Ok(RefinedPrototype {
        prototype,
        status: result.status,
        iterations: result.iterations,
        raw_loss,
        refined_loss,
    })
}

/// `max_{m ∈ points} min_{c ∈ centers} ‖m − c‖²`; infinite when there are no centers.
pub fn coverage_objective<'a>(
    points: &Tensor,
    centers: impl IntoIterator<Item = &'a [f64]> + Clone,
) -> f64 {
    points
        .row_iter()
        .map(|m| {
            centers
                .clone()
                .into_iter()
                .map(|c| squared_distance(m, c))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Greedy farthest-first selection of `n_select` rows of `candidates`,
/// aware of the rows already stored in `history`. Returns row indices in
/// pick order.
///
/// The first pick is the row farthest from the history (from the candidate
/// centroid when the history is empty); every later pick is the row farthest
/// from history ∪ picks. Ties go to the lowest row index.
pub fn select_pixel_prototype_indices(
    candidates: &Tensor,
    history: &PixelPrototypeBank,
    n_select: usize,
) -> Result<Vec<usize>> {
    let n = if candidates.is_empty() {
        0
    } else {
        candidates.rows()
    };
    if n == 0 {
        return Err(Error::domain("pixel prototype selection over no features"));
    }
    if n_select > n {
        return Err(Error::domain(format!(
            "cannot select {n_select} prototypes from {n} features"
        )));
    }
    if !history.is_empty() && history.dim() != candidates.cols() {
        return Err(Error::Shape {
            op: "select_pixel_prototypes",
            expected: vec![history.dim()],
            got: vec![candidates.cols()],
        });
    }

    let mut nearest: Vec<f64> = if history.is_empty() {
        let d = candidates.cols();
        let mut centroid = vec![0.0; d];
        for r in candidates.row_iter() {
            centroid.iter_mut().zip(r).for_each(|(c, x)| *c += x);
        }
        centroid.iter_mut().for_each(|c| *c /= n as f64);
        candidates
            .row_iter()
            .map(|r| squared_distance(r, &centroid))
            .collect()
    } else {
        candidates
            .row_iter()
            .map(|r| {
                history
                    .rows()
                    .map(|h| squared_distance(r, h))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut picked = vec![false; n];
    let mut order = Vec::with_capacity(n_select);
    for _ in 0..n_select {
        let mut best: Option<(usize, f64)> = None;
        for (i, &dist) in nearest.iter().enumerate() {
            if picked[i] {
                continue;
            }
            if best.is_none_or(|(_, b)| dist > b) {
                best = Some((i, dist));
            }
        }
        let (idx, _) = best.expect("n_select <= n leaves an unpicked row");
        picked[idx] = true;
        order.push(idx);
        // After the seed, distances are measured to history ∪ picks.
        if order.len() == 1 && history.is_empty() {
            nearest.iter_mut().for_each(|d| *d = f64::INFINITY);
        }
        let chosen = candidates.row(idx);
        for (i, r) in candidates.row_iter().enumerate() {
            let d = squared_distance(r, chosen);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    Ok(order)
}

/// The selected rows, copied bit-exactly from `candidates`.
pub fn select_pixel_prototypes(
    candidates: &Tensor,
    history: &PixelPrototypeBank,
    n_select: usize,
) -> Result<Tensor> {
    let order = select_pixel_prototype_indices(candidates, history, n_select)?;
    let d = candidates.cols();
    let data = order
        .iter()
        .flat_map(|&i| candidates.row(i).iter().copied())
        .collect();
    Tensor::matrix(order.len(), d, data)
}
