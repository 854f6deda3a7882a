//! Training objectives.
//!
//! Every loss is recorded on a [`Tape`] so gradients reach the prompt
//! components. Cosine-based losses normalize their inputs internally and are
//! therefore invariant to positive rescaling of any row.
//!
//! Normalization conventions: `itc` is averaged over patches and the two
//! `tsc` terms are averaged over their ordered pair counts, so loss
//! magnitudes do not depend on `N_p`. Max over an empty history is 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::prototypes::{ImagePrototypeBank, PixelPrototypeBank};

/// Per-patch segment class ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLabels(pub Vec<u32>);

impl PatchLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Which sign convention `tsc` uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TscSign {
    /// `L_neg − L_pos`: minimizing pulls same-class patches together.
    #[default]
    Contrastive,
    /// `L_pos − L_neg` taken literally, kept for comparison runs.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub align: f64,
    pub itc: f64,
    pub tsc: f64,
    pub total: f64,
    pub same_class_pairs: usize,
    pub cross_class_pairs: usize,
}

/// `‖k_I − i_t‖₂`, differentiable in `image_feature`.
pub fn loss_align(tape: &mut Tape, image_feature: Var, prototype: &[f64]) -> Result<Var> {
    let shape = tape.value(image_feature).shape().to_vec();
    if tape.value(image_feature).len() != prototype.len() {
        return Err(Error::Shape {
            op: "loss_align",
            expected: shape,
            got: vec![prototype.len()],
        });
    }
    let target = tape.constant(Tensor::new(shape, prototype.to_vec())?);
    let diff = tape.sub(image_feature, target)?;
    tape.norm(diff)
}

/// Mean over patches of the maximum cosine to any historical pixel prototype.
pub fn loss_itc(tape: &mut Tape, patches: Var, history: &PixelPrototypeBank) -> Result<Var> {
    let d = tape.value(patches).cols();
    if history.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)?));
    }
    if history.dim() != d {
        return Err(Error::Shape {
            op: "loss_itc",
            expected: vec![history.dim()],
            got: vec![d],
        });
    }
    let bank = tape.constant(history.normalized_rows()?);
    let unit = tape.normalize_rows(patches)?;
    let sims = tape.matmul_t(unit, bank)?;
    let best = tape.row_max(sims)?;
    tape.mean(best)
}

/// Returns the loss node together with (same-class, cross-class) ordered pair counts.
pub fn loss_tsc(
    tape: &mut Tape,
    patches: Var,
    labels: &PatchLabels,
    sign: TscSign,
) -> Result<(Var, usize, usize)> {
    let n = tape.value(patches).rows();
    if labels.len() != n {
        return Err(Error::Shape {
            op: "loss_tsc",
            expected: vec![n],
            got: vec![labels.len()],
        });
    }
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels.0[i] == labels.0[j] {
                n_pos += 1;
            } else {
                n_neg += 1;
            }
        }
    }
    let direction = match sign {
        TscSign::Contrastive => 1.0,
        TscSign::Literal => -1.0,
    };
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            weights[i * n + j] = if labels.0[i] == labels.0[j] {
                -direction / n_pos as f64
            } else {
                direction / n_neg as f64
            };
        }
    }
    let w = tape.constant(Tensor::matrix(n, n, weights)?);
    let unit = tape.normalize_rows(patches)?;
    let sims = tape.matmul_t(unit, unit)?;
    let weighted = tape.mul(sims, w)?;
    Ok((tape.sum(weighted)?, n_pos, n_neg))
}

/// `−cos(i, i_raw) + max_{h ∈ history} cos(i, h)`.
pub fn loss_ipr(
    tape: &mut Tape,
    prototype: Var,
    raw: &[f64],
    history: &ImagePrototypeBank,
) -> Result<Var> {
    let shape = tape.value(prototype).shape().to_vec();
    let raw = tape.constant(Tensor::new(shape.clone(), raw.to_vec())?);
    let sim = tape.cosine(prototype, raw)?;
    let sim = tape.neg(sim)?;
    if history.is_empty() {
        return Ok(sim);
    }
    let mut cosines = Vec::with_capacity(history.len());
    for (_, h) in history.entries() {
        let h = tape.constant(Tensor::new(shape.clone(), h.clone())?);
        cosines.push(tape.cosine(prototype, h)?);
    }
    let stacked = tape.concat_rows(&cosines)?;
    let dist = tape.max_all(stacked)?;
    tape.add(sim, dist)
}

/// `align + tsc + itc`, unweighted.
pub fn loss_total(align: f64, tsc: f64, itc: f64) -> Result<LossReport> {
    if !(align.is_finite() && tsc.is_finite() && itc.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss_total(align={align}, tsc={tsc}, itc={itc})"
        )));
    }
    Ok(LossReport {
        align,
        itc,
        tsc,
        total: align + tsc + itc,
        ..Default::default()
    })
}

/// Evaluates `loss_ipr` without keeping the tape.
pub fn ipr_value(prototype: &[f64], raw: &[f64], history: &ImagePrototypeBank) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(prototype.to_vec())?);
    let l = loss_ipr(&mut tape, p, raw, history)?;
    tape.value(l).item()
}
