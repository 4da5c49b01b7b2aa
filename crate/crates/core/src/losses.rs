//! Density, count and auxiliary losses, all summed rather than averaged.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::density::{DensityGrid, KernelSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Count-loss weight on the primary branch.
    pub alpha: f64,
    /// Consistency weight between blurred auxiliary maps and the primary map.
    pub beta1: f64,
    /// Count-loss weight on each auxiliary branch.
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1e-2,
            beta1: 1.0,
            beta2: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `sum_p (F_p - D_p)^2`.
pub fn mse_density_loss(tape: &mut Tape, prediction: Var, target: &DensityGrid) -> Result<Var> {
    let shape = tape.shape(prediction).to_vec();
    if shape != [1, target.height(), target.width()] {
        return Err(Error::invalid(format!(
            "prediction {shape:?} does not match a {}x{} density map",
            target.height(),
            target.width()
        )));
    }
    let d = tape.constant(Tensor::new(shape, target.values().to_vec())?);
    tape.sq_diff_sum(prediction, d)
}

/// `|sum(F) - c|`.
pub fn count_loss(tape: &mut Tape, prediction: Var, count: f64) -> Result<Var> {
    if !(count.is_finite() && count >= 0.0) {
        return Err(Error::invalid(format!("count must be finite and >= 0, got {count}")));
    }
    let s = tape.sum_all(prediction)?;
    let d = tape.add_scalar(s, -count)?;
    tape.abs_scalar(d)
}

/// How the primary map enters the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimaryCoupling {
    /// The primary map is a constant target.
    StopGradient,
    /// Gradients flow into the primary branch as well.
    Symmetric,
}

/// `beta1 * sum_k ||F_k * h_k - F_0||^2 + beta2 * sum_k |sum(F_k) - c|`, with
/// `F_0` detached.
pub fn aux_loss(
    tape: &mut Tape,
    aux: &[Var],
    primary: Var,
    kernels: &[KernelSpec],
    count: f64,
    w: &LossWeights,
) -> Result<Var> {
    aux_loss_with(tape, aux, primary, kernels, count, w, PrimaryCoupling::StopGradient)
}

pub fn aux_loss_with(
    tape: &mut Tape,
    aux: &[Var],
    primary: Var,
    kernels: &[KernelSpec],
    count: f64,
    w: &LossWeights,
    coupling: PrimaryCoupling,
) -> Result<Var> {
    if aux.is_empty() {
        return Err(Error::invalid("aux_loss needs at least one auxiliary map"));
    }
    if aux.len() != kernels.len() {
        return Err(Error::invalid(format!(
            "{} auxiliary maps for {} kernels",
            aux.len(),
            kernels.len()
        )));
    }
    let target = match coupling {
        PrimaryCoupling::StopGradient => tape.detach(primary)?,
        PrimaryCoupling::Symmetric => primary,
    };

    let mut terms = Vec::with_capacity(2 * aux.len());
    if w.beta1 != 0.0 {
        for (&f_k, h_k) in aux.iter().zip(kernels) {
            let blurred = tape.kernel_convolve(f_k, &h_k.weights)?;
            let c = tape.sq_diff_sum(blurred, target)?;
            terms.push(tape.scale(c, w.beta1)?);
        }
    }
    if w.beta2 != 0.0 {
        for &f_k in aux {
            let c = count_loss(tape, f_k, count)?;
            terms.push(tape.scale(c, w.beta2)?);
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.add_all(&terms)
}

/// One prediction inside a mixed batch.
#[derive(Debug, Clone, Copy)]
pub enum BatchTerm<'a> {
    Full { prediction: Var, density: &'a DensityGrid },
    Weak { prediction: Var, count: f64 },
}

/// `sum_full MSE + alpha * sum_weak count_loss`.
pub fn base_loss(tape: &mut Tape, batch: &[BatchTerm<'_>], alpha: f64) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("base_loss needs a non-empty batch"));
    }
    let terms = batch
        .iter()
        .map(|t| match *t {
            BatchTerm::Full { prediction, density } => mse_density_loss(tape, prediction, density),
            BatchTerm::Weak { prediction, count } => {
                let c = count_loss(tape, prediction, count)?;
                tape.scale(c, alpha)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms)
}
