//! Limited-memory BFGS with an Armijo backtracking line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::{dot, norm};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    /// Number of curvature pairs kept.
    pub history: usize,
    pub max_iterations: usize,
    pub grad_tolerance: f64,
    /// Sufficient-decrease constant.
    pub armijo_c1: f64,
    pub shrink: f64,
    pub max_halvings: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            max_iterations: 100,
            grad_tolerance: 1e-8,
            armijo_c1: 1e-4,
            shrink: 0.5,
            max_halvings: 30,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 {
            return Err(Error::config("lbfgs: history size must be at least 1"));
        }
        if !(self.grad_tolerance > 0.0 && self.armijo_c1 > 0.0 && self.armijo_c1 < 1.0) {
            return Err(Error::config("lbfgs: tolerances must be positive"));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::config("lbfgs: shrink factor must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LbfgsStatus {
    Converged,
    MaxIterations,
    /// The line search could not find sufficient decrease; the best iterate is returned.
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub status: LbfgsStatus,
}

/// Minimizes `objective`, which returns the value at `x` and writes the
/// gradient into its second argument.
pub fn lbfgs_minimize<F>(mut objective: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    cfg.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = objective(&x, &mut g)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain(
            "lbfgs: objective is not finite at the starting point",
        ));
    }

    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut status = LbfgsStatus::MaxIterations;
    let mut iterations = 0;
    let mut g_new = vec![0.0; n];

    while iterations < cfg.max_iterations {
        if norm(&g) <= cfg.grad_tolerance {
            status = LbfgsStatus::Converged;
            break;
        }
        let mut d = two_loop(&g, &pairs);
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // Curvature information went stale; fall back to steepest descent.
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if pairs.is_empty() {
            (1.0 / norm(&g)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            if let Ok(ft) = objective(&trial, &mut g_new) {
                if ft.is_finite()
                    && g_new.iter().all(|v| v.is_finite())
                    && ft <= f + cfg.armijo_c1 * step * slope
                {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            step *= cfg.shrink;
        }
        let Some((x_new, f_new)) = accepted else {
            log::warn!("lbfgs: line search failed after {iterations} iterations");
            status = LbfgsStatus::LineSearchFailed;
            break;
        };
        iterations += 1;

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if pairs.len() == cfg.history {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        f = f_new;
        g.copy_from_slice(&g_new);
    }
    if status == LbfgsStatus::MaxIterations && norm(&g) <= cfg.grad_tolerance {
        status = LbfgsStatus::Converged;
    }

    Ok(LbfgsResult {
        x,
        value: f,
        iterations,
        status,
    })
}

/// Returns `-H·g` for the implicit inverse-Hessian approximation.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|qi| *qi *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|qi| *qi = -*qi);
    q
}
