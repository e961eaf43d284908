//! Training objectives built on the tape's fused loss nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LossKind, Scalar, Tape, Tensor, Var};

pub const DEFAULT_SMOOTH: f64 = 1e-6;

/// Weight of the hybrid term in the generator objective.
pub const HYBRID_WEIGHT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridFocalParams {
    pub lambda: f64,
    pub delta: f64,
    /// Exponent of the focal-Tversky term.
    pub gamma: f64,
    pub smooth: f64,
    /// Exponent of the focal term; `None` means `2·gamma`.
    pub focal_gamma: Option<f64>,
}

impl Default for HybridFocalParams {
    fn default() -> Self {
        HybridFocalParams {
            lambda: 0.5,
            delta: 0.6,
            gamma: 0.5,
            smooth: DEFAULT_SMOOTH,
            focal_gamma: None,
        }
    }
}

impl HybridFocalParams {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.lambda) || !unit.contains(&self.delta) {
            return Err(Error::InvalidConfig(format!(
                "lambda and delta must lie in [0, 1], got {} and {}",
                self.lambda, self.delta
            )));
        }
        if !(self.gamma > 0.0) || !(self.smooth > 0.0) {
            return Err(Error::InvalidConfig("gamma and smooth must be positive".into()));
        }
        if let Some(g) = self.focal_gamma {
            if !(g >= 0.0) {
                return Err(Error::InvalidConfig(format!("focal_gamma must be >= 0, got {g}")));
            }
        }
        Ok(())
    }

    pub fn focal_exponent(&self) -> f64 {
        self.focal_gamma.unwrap_or(2.0 * self.gamma)
    }
}

pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, y: &Tensor<T>, smooth: f64) -> Result<Var> {
    tape.loss(p, y, LossKind::Dice { smooth })
}

/// Mean voxel focal loss; `gamma` is the focusing exponent applied directly.
pub fn focal_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, y: &Tensor<T>, delta: f64, gamma: f64) -> Result<Var> {
    tape.loss(p, y, LossKind::Focal { delta, gamma })
}

pub fn focal_tversky_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: Var,
    y: &Tensor<T>,
    delta: f64,
    gamma: f64,
    smooth: f64,
) -> Result<Var> {
    tape.loss(p, y, LossKind::FocalTversky { delta, gamma, smooth })
}

/// `lambda·focal + (1 − lambda)·focal_tversky`.
pub fn hybrid_focal<T: Scalar>(tape: &mut Tape<T>, p: Var, y: &Tensor<T>, params: &HybridFocalParams) -> Result<Var> {
    let f = focal_loss(tape, p, y, params.delta, params.focal_exponent())?;
    let ft = focal_tversky_loss(tape, p, y, params.delta, params.gamma, params.smooth)?;
    let f = tape.scale(f, params.lambda);
    let ft = tape.scale(ft, 1.0 - params.lambda);
    tape.add(f, ft)
}

pub fn bce<T: Scalar>(tape: &mut Tape<T>, p: Var, y: &Tensor<T>) -> Result<Var> {
    tape.loss(p, y, LossKind::Bce)
}

/// `mean((d_real − 1)²) + mean(d_fake²)`.
pub fn d_loss<T: Scalar>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    if tape.shape(d_real) != tape.shape(d_fake) {
        return Err(Error::ShapeMismatch(format!(
            "patch maps differ: {:?} vs {:?}",
            tape.shape(d_real),
            tape.shape(d_fake)
        )));
    }
    let real = tape.squared_error(d_real, 1.0);
    let fake = tape.squared_error(d_fake, 0.0);
    tape.add(real, fake)
}

/// `mean((d_fake − 1)²)`.
pub fn g_adv<T: Scalar>(tape: &mut Tape<T>, d_fake: Var) -> Var {
    tape.squared_error(d_fake, 1.0)
}

/// `g_adv + 5·hybrid_focal`.
pub fn g_total<T: Scalar>(
    tape: &mut Tape<T>,
    d_fake: Var,
    p: Var,
    y: &Tensor<T>,
    params: &HybridFocalParams,
) -> Result<Var> {
    let adv = g_adv(tape, d_fake);
    let h = hybrid_focal(tape, p, y, params)?;
    let h = tape.scale(h, HYBRID_WEIGHT);
    tape.add(adv, h)
}
