//! Variance-preserving gamma-path math: schedule coefficients, noising,
//! denoiser-parameterized velocity, and display-time conversion.
//!
//! The noise coordinate is the logarithmic noise-to-signal ratio
//! `gamma = ln(sigma^2 / alpha^2)`, with `sigma^2 = sigmoid(gamma)` and
//! `alpha^2 = sigmoid(-gamma)` so that `alpha^2 + sigma^2 = 1` on the path.

use alloc::format;

use crate::error::{CoreError, CoreResult};
use crate::mat::Mat;
use crate::num;

/// Magnitude beyond which the logistic schedule is numerically saturated;
/// larger inputs are clamped before exponentiation.
pub const GAMMA_CLIP: f64 = 50.0;

/// Logarithmic noise-to-signal ratio (dimensionless nats of log-NSR).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Gamma(pub f64);

impl Gamma {
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

/// Variance-preserving schedule coefficients at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathCoeffs {
    pub alpha: f64,
    pub sigma: f64,
}

impl PathCoeffs {
    /// Recovers the noise level `ln(sigma^2 / alpha^2)` of this pair.
    pub fn gamma_of(self) -> Gamma {
        Gamma(2.0 * (num::ln(self.sigma) - num::ln(self.alpha)))
    }

    /// `d(sigma)/d(gamma) / sigma = alpha^2 / 2` on the VP gamma path.
    pub fn log_sigma_slope(self) -> f64 {
        0.5 * self.alpha * self.alpha
    }
}

/// Schedule coefficients `alpha = sqrt(sigmoid(-gamma))`,
/// `sigma = sqrt(sigmoid(gamma))`.
pub fn coeffs(gamma: Gamma) -> CoreResult<PathCoeffs> {
    if !gamma.is_finite() {
        return Err(CoreError::InvalidInput(format!(
            "coeffs requires finite gamma, got {}",
            gamma.0
        )));
    }
    let g = gamma.0.clamp(-GAMMA_CLIP, GAMMA_CLIP);
    Ok(PathCoeffs {
        alpha: num::sqrt(num::sigmoid(-g)),
        sigma: num::sqrt(num::sigmoid(g)),
    })
}

/// Display-only optimal-transport flow time `t = sigmoid(gamma / 2)`.
///
/// Used for plot axes, never for dynamics: under this repo's conventions
/// clean data sits at `gamma -> -inf`, which the formula maps to `t = 0`.
pub fn t_ot_of_gamma(gamma: Gamma) -> f64 {
    num::sigmoid(gamma.0 / 2.0)
}

/// A noised embedding sequence `z_gamma = alpha * z + sigma * eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySequence {
    pub values: Mat,
    pub gamma: Gamma,
}

/// Forms `alpha_gamma * z + sigma_gamma * eps` for a clean L×D sequence.
pub fn noise(clean: &Mat, gamma: Gamma, eps: &Mat) -> CoreResult<NoisySequence> {
    if clean.shape() != eps.shape() {
        return Err(CoreError::InvalidInput(format!(
            "noise shape mismatch: clean {:?} vs eps {:?}",
            clean.shape(),
            eps.shape()
        )));
    }
    let c = coeffs(gamma)?;
    let values = clean.zip_map(eps, |z, e| c.alpha * z + c.sigma * e);
    Ok(NoisySequence { values, gamma })
}

/// Velocity `dz/d(gamma) = (alpha^2/2) z_gamma - (alpha/2) z_hat` implied by
/// a denoiser prediction on the VP gamma path.
pub fn velocity_from_denoiser(z_gamma: &NoisySequence, z_hat: &Mat) -> CoreResult<Mat> {
    if z_gamma.values.shape() != z_hat.shape() {
        return Err(CoreError::InvalidInput(format!(
            "velocity shape mismatch: state {:?} vs denoised {:?}",
            z_gamma.values.shape(),
            z_hat.shape()
        )));
    }
    let c = coeffs(z_gamma.gamma)?;
    let drift = 0.5 * c.alpha * c.alpha;
    let pull = 0.5 * c.alpha;
    Ok(z_gamma.values.zip_map(z_hat, |z, zh| drift * z - pull * zh))
}
