//! Analytic gradients against central finite differences.

use std::collections::BTreeSet;

use super::train::{batch_loss, loss_and_gradient, TrainExample};
use super::{EncoderModel, ModelError, Result};
use crate::rng::SeededRng;

/// Central-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h^2).
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error O(h^4).
    FivePoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Minimum number of coordinates to probe.
    pub coords: usize,
    /// Central-difference step.
    pub step: f64,
    pub stencil: Stencil,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged by absolute error. Round-off in the
    /// difference quotient is about `f64::EPSILON * loss / step`, ~1e-11 for
    /// typical losses, so the floor must sit well above that.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { coords: 200, step: 1e-4, stencil: Stencil::FivePoint, floor: 1e-5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Coordinates that can influence the loss: embedding rows of tokens and
/// positions present in the batch, every other tensor in full.
fn eligible(model: &EncoderModel, batch: &[TrainExample]) -> Vec<(String, Vec<usize>)> {
    let lay = model.layout();
    let d = model.config().hidden;
    let tokens: BTreeSet<usize> = batch.iter().flat_map(|e| e.input.ids.iter().map(|&t| t as usize)).collect();
    let max_pos = batch.iter().map(|e| e.input.ids.len()).max().unwrap_or(0);
    lay.named
        .iter()
        .map(|(name, slot)| {
            let idx: Vec<usize> = if *slot == lay.tok_emb {
                tokens.iter().flat_map(|&t| slot.off + t * d..slot.off + (t + 1) * d).collect()
            } else if *slot == lay.pos_emb {
                (slot.off..slot.off + max_pos * d).collect()
            } else {
                slot.range().collect()
            };
            (name.clone(), idx)
        })
        .collect()
}

/// Probe a seeded, per-tensor stratified sample of at least `opts.coords`
/// coordinates and return the largest relative error
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(model: &EncoderModel, batch: &[TrainExample], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (_, grad) = loss_and_gradient(model, batch)?;
    let pools = eligible(model, batch);
    let nonempty = pools.iter().filter(|(_, p)| !p.is_empty()).count().max(1);
    let quota = opts.coords.div_ceil(nonempty);
    let mut rng = SeededRng::derive(opts.seed, "grad-check");
    let mut picked: Vec<(String, usize)> = Vec::new();
    let mut leftovers: Vec<(String, usize)> = Vec::new();
    for (name, pool) in &pools {
        let take = quota.min(pool.len());
        let sel = rng.sample_indices(pool.len(), pool.len());
        for (k, &i) in sel.iter().enumerate() {
            if k < take {
                picked.push((name.clone(), pool[i]));
            } else {
                leftovers.push((name.clone(), pool[i]));
            }
        }
    }
    if picked.len() < opts.coords {
        let need = (opts.coords - picked.len()).min(leftovers.len());
        for i in rng.sample_indices(leftovers.len(), need) {
            picked.push(leftovers[i].clone());
        }
    }

    let mut probe = model.clone();
    let mut checks = Vec::with_capacity(picked.len());
    for (tensor, index) in picked {
        let orig = probe.params()[index];
        let mut at = |offset: f64| -> Result<f64> {
            probe.params_mut()[index] = orig + offset;
            batch_loss(&probe, batch)
        };
        let h = opts.step;
        let numeric = match opts.stencil {
            Stencil::ThreePoint => (at(h)? - at(-h)?) / (2.0 * h),
            Stencil::FivePoint => (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h),
        };
        probe.params_mut()[index] = orig;
        if !numeric.is_finite() {
            return Err(ModelError::NonFinite(format!("finite difference at {tensor}[{index}]")));
        }
        let analytic = grad[index];
        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        let rel_error = (analytic - numeric).abs() / denom;
        checks.push(CoordCheck { tensor, index, analytic, numeric, rel_error });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, checks })
}
