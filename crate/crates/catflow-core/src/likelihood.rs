//! The ODE-based evidence lower bound on sequence log-likelihood, its
//! divergence estimators, and perplexity reporting.
//!
//! The bound has four terms: the constant `LD/2`, the prior term
//! `-||z_b||^2 / (2 sigma_b^2)`, the decoder term `sum_i ln x_hat^(i, x_i)`
//! at the clean end, and the divergence integral
//! `-int_a^b (alpha/2) div z_hat dgamma` accumulated by the trapezoid rule
//! on the same gamma grid the Heun solver walks.

use alloc::format;
use alloc::vec::Vec;

use crate::denoiser::Denoise;
use crate::embedding::EmbeddingTable;
use crate::error::{CoreError, CoreResult};
use crate::gamma::{coeffs, Gamma};
use crate::mat::Mat;
use crate::num;
use crate::rng::Rng;
use crate::sampler::heun_step;
use crate::scheduler::{sampling_grid, SchedulerParams};

/// Hard cap on the flattened dimension for exact Jacobian traces.
pub const EXACT_DIVERGENCE_CAP: usize = 64;

/// Relative step for the directional finite differences: cbrt(machine eps).
fn fd_step(scale: f64) -> f64 {
    num::cbrt(f64::EPSILON) * (1.0 + num::abs(scale))
}

/// Exact divergence (Jacobian trace) of a flattened vector field by central
/// differences of each output coordinate along its own input coordinate.
pub fn divergence_exact(field: &dyn Fn(&[f64]) -> Vec<f64>, point: &[f64]) -> CoreResult<f64> {
    if point.len() > EXACT_DIVERGENCE_CAP {
        return Err(CoreError::Capacity(format!(
            "exact divergence capped at dimension {EXACT_DIVERGENCE_CAP}, got {}",
            point.len()
        )));
    }
    let mut total = 0.0;
    let mut probe = point.to_vec();
    for d in 0..point.len() {
        let h = fd_step(point[d]);
        probe[d] = point[d] + h;
        let plus = field(&probe)[d];
        probe[d] = point[d] - h;
        let minus = field(&probe)[d];
        probe[d] = point[d];
        total += (plus - minus) / (2.0 * h);
    }
    Ok(total)
}

/// Unbiased divergence estimate from `probes` Rademacher vectors `v`:
/// mean of `v . (J v)`, with `J v` obtained by a central directional
/// difference. Returns the estimate and its standard error.
pub fn divergence_hutchinson(
    field: &dyn Fn(&[f64]) -> Vec<f64>,
    point: &[f64],
    probes: usize,
    rng: &mut Rng,
) -> CoreResult<(f64, f64)> {
    if probes == 0 {
        return Err(CoreError::InvalidInput(
            "hutchinson needs at least one probe".into(),
        ));
    }
    let n = point.len();
    let scale = point.iter().fold(0.0_f64, |m, &x| m.max(num::abs(x)));
    let h = fd_step(scale);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut plus = point.to_vec();
    let mut minus = point.to_vec();
    for _ in 0..probes {
        let mut v = Vec::with_capacity(n);
        for d in 0..n {
            let sign = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
            v.push(sign);
            plus[d] = point[d] + h * sign;
            minus[d] = point[d] - h * sign;
        }
        let f_plus = field(&plus);
        let f_minus = field(&minus);
        let mut dot = 0.0;
        for d in 0..n {
            dot += v[d] * (f_plus[d] - f_minus[d]) / (2.0 * h);
        }
        sum += dot;
        sum_sq += dot * dot;
    }
    let mean = sum / probes as f64;
    let var = (sum_sq / probes as f64 - mean * mean).max(0.0);
    let se = num::sqrt(var / probes as f64);
    Ok((mean, se))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceMode {
    Exact,
    /// Hutchinson probing with the given probe count per quadrature node.
    Hutchinson(usize),
}

/// The four bound terms plus derived reporting quantities, averaged over
/// the requested number of state draws.
#[derive(Debug, Clone, Copy)]
pub struct ElboEstimate {
    pub constant: f64,
    pub prior_term: f64,
    pub decoder_term: f64,
    /// Already negated: the bound's `-int (alpha/2) div z_hat dgamma`.
    pub divergence_term: f64,
    pub total: f64,
    pub per_token_nll: f64,
    pub ppl: f64,
    /// Standard error of the per-draw totals.
    pub std_err: f64,
    pub draws: usize,
}

/// Perplexity from a per-token NLL in nats.
pub fn ppl(per_token_nll: f64) -> f64 {
    num::exp(per_token_nll)
}

/// Evidence-lower-bound estimate for one token sequence.
///
/// Draws `z_a ~ N(alpha_a embed(x), sigma_a^2 I)`, integrates the model ODE
/// from `a` up to `b` with the Heun solver while accumulating the divergence
/// integral on the same grid, and assembles the four bound terms. The
/// decoder term is evaluated at `(z_a, a)` with zero self-conditioning, and
/// later integration steps thread predictions exactly as sampling does.
#[allow(clippy::too_many_arguments)]
pub fn elbo(
    tokens: &[usize],
    den: &dyn Denoise,
    table: &EmbeddingTable,
    sched: &SchedulerParams,
    steps: usize,
    mode: DivergenceMode,
    draws: usize,
    rng: &mut Rng,
) -> CoreResult<ElboEstimate> {
    if steps < 8 {
        return Err(CoreError::InvalidInput(format!(
            "the likelihood integration needs N >= 8 steps, got {steps}"
        )));
    }
    if draws == 0 {
        return Err(CoreError::InvalidInput("need at least one draw".into()));
    }
    let l = tokens.len();
    let d = den.dim();
    let clean = table.embed(tokens)?;

    // Ascending grid a = grid[0] < ... < grid[N] = b.
    let mut grid = sampling_grid(steps, sched)?;
    grid.reverse();
    let c_a = coeffs(grid[0])?;
    let c_b = coeffs(grid[steps])?;

    let mut totals = Vec::with_capacity(draws);
    let mut acc = ElboAccum::default();
    for _ in 0..draws {
        let eps = rng.normal_mat(l, d);
        let mut z = clean.zip_map(&eps, |zc, e| c_a.alpha * zc + c_a.sigma * e);
        let mut z_sc = Mat::zeros(l, d);

        // Decoder term at the clean end, zero self-conditioning. This same
        // prediction seeds the self-conditioning thread.
        let first = den.predict(&z, grid[0], &z_sc)?;
        let mut decoder = 0.0;
        for (i, &t) in tokens.iter().enumerate() {
            decoder += first.log_probs.at(i, t);
        }

        let mut div_integral = 0.0;
        let mut f_prev = divergence_node(den, &z, grid[0], &z_sc, mode, rng)?;
        z_sc = first.z_hat;
        for k in 0..steps {
            let (next, slope1, slope2) = heun_step(den, &z, grid[k], grid[k + 1], &z_sc)?;
            let _ = slope1;
            z = next;
            z_sc = slope2.z_hat;
            let f_next = divergence_node(den, &z, grid[k + 1], &z_sc, mode, rng)?;
            div_integral += 0.5 * (f_prev + f_next) * (grid[k + 1].0 - grid[k].0);
            f_prev = f_next;
            if !div_integral.is_finite() || !z.all_finite() {
                return Err(CoreError::NumericalFailure(format!(
                    "non-finite likelihood accumulation at gamma {}",
                    grid[k + 1].0
                )));
            }
        }

        let constant = (l * d) as f64 / 2.0;
        let prior = -z.norm_sq() / (2.0 * c_b.sigma * c_b.sigma);
        let divergence = -div_integral;
        let total = constant + prior + decoder + divergence;
        acc.add(constant, prior, decoder, divergence);
        totals.push(total);
    }

    let n = draws as f64;
    let constant = acc.constant / n;
    let prior_term = acc.prior / n;
    let decoder_term = acc.decoder / n;
    let divergence_term = acc.divergence / n;
    let total = constant + prior_term + decoder_term + divergence_term;
    let mean_total: f64 = totals.iter().sum::<f64>() / n;
    debug_assert!((total - mean_total).abs() < 1e-9 * (1.0 + num::abs(mean_total)));
    let var = totals
        .iter()
        .map(|&t| (t - mean_total) * (t - mean_total))
        .sum::<f64>()
        / n;
    let per_token_nll = -total / l as f64;
    Ok(ElboEstimate {
        constant,
        prior_term,
        decoder_term,
        divergence_term,
        total,
        per_token_nll,
        ppl: ppl(per_token_nll),
        std_err: num::sqrt(var / n),
        draws,
    })
}

#[derive(Default)]
struct ElboAccum {
    constant: f64,
    prior: f64,
    decoder: f64,
    divergence: f64,
}

impl ElboAccum {
    fn add(&mut self, c: f64, p: f64, d: f64, v: f64) {
        self.constant += c;
        self.prior += p;
        self.decoder += d;
        self.divergence += v;
    }
}

/// `(alpha/2) * div z_hat` at one quadrature node; self-conditioning is held
/// fixed while differentiating with respect to the state.
fn divergence_node(
    den: &dyn Denoise,
    z: &Mat,
    gamma: Gamma,
    z_sc: &Mat,
    mode: DivergenceMode,
    rng: &mut Rng,
) -> CoreResult<f64> {
    let rows = z.rows();
    let cols = z.cols();
    let field = |flat: &[f64]| -> Vec<f64> {
        let m = Mat::from_vec(rows, cols, flat.to_vec());
        den.z_hat(&m, gamma, z_sc)
            .expect("denoiser evaluation inside divergence")
            .into_data()
    };
    let div = match mode {
        DivergenceMode::Exact => divergence_exact(&field, z.data())?,
        DivergenceMode::Hutchinson(probes) => {
            divergence_hutchinson(&field, z.data(), probes, rng)?.0
        }
    };
    let c = coeffs(gamma)?;
    Ok(0.5 * c.alpha * div)
}
