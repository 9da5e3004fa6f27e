//! Learnable Gumbel noise scheduler: the entropy model `H_gamma`, quantile
//! sampling, stratified training draws, sampling grids, and an offline
//! least-squares fit used by tests.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::gamma::Gamma;
use crate::num;
use crate::rng::Rng;

/// Quantile clip applied everywhere gammas are drawn from the scheduler.
pub const QUANTILE_CLIP: f64 = 1e-5;

/// Learnable Gumbel parameters (`h_inf`, location `mu`, scale `beta`).
///
/// Positivity of `h_inf` and `beta` is kept by storing unconstrained reals
/// and mapping through softplus, so the optimizer never needs projections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerParams {
    pub raw_h_inf: f64,
    pub mu: f64,
    pub raw_beta: f64,
}

impl SchedulerParams {
    /// Default initialization for a vocabulary of size `vocab`: the entropy
    /// ceiling starts at the uniform bound `ln V`, with a wide scale so the
    /// informative region is covered early in training.
    pub fn init_for_vocab(vocab: usize) -> Self {
        let h = num::ln(vocab.max(2) as f64);
        SchedulerParams {
            raw_h_inf: num::softplus_inv(h),
            mu: 0.0,
            raw_beta: num::softplus_inv(2.0),
        }
    }

    pub fn from_constrained(h_inf: f64, mu: f64, beta: f64) -> CoreResult<Self> {
        if !(h_inf > 0.0 && beta > 0.0) {
            return Err(CoreError::InvalidInput(format!(
                "scheduler parameters need h_inf > 0 and beta > 0, got {h_inf}, {beta}"
            )));
        }
        Ok(SchedulerParams {
            raw_h_inf: num::softplus_inv(h_inf),
            mu,
            raw_beta: num::softplus_inv(beta),
        })
    }

    pub fn h_inf(&self) -> f64 {
        num::softplus(self.raw_h_inf)
    }

    pub fn beta(&self) -> f64 {
        num::softplus(self.raw_beta)
    }

    pub fn raw(&self) -> [f64; 3] {
        [self.raw_h_inf, self.mu, self.raw_beta]
    }

    pub fn from_raw(raw: [f64; 3]) -> Self {
        SchedulerParams {
            raw_h_inf: raw[0],
            mu: raw[1],
            raw_beta: raw[2],
        }
    }

    /// Clip range `[a, b]`: the lower and upper 1e-5 quantiles. Recomputed
    /// from the current parameters at every use, since it moves as the
    /// scheduler learns.
    pub fn clip_range(&self) -> (Gamma, Gamma) {
        let a = quantile(QUANTILE_CLIP, self).expect("clip quantile in range");
        let b = quantile(1.0 - QUANTILE_CLIP, self).expect("clip quantile in range");
        (a, b)
    }
}

/// Entropy model `H_gamma = h_inf * exp(-exp(-(gamma - mu) / beta))`.
pub fn entropy_model(gamma: Gamma, params: &SchedulerParams) -> f64 {
    params.h_inf() * num::exp(-num::exp(-(gamma.0 - params.mu) / params.beta()))
}

/// Gumbel density `pi(gamma)` implied by quantile sampling.
pub fn density(gamma: Gamma, params: &SchedulerParams) -> f64 {
    let beta = params.beta();
    let w = num::exp(-(gamma.0 - params.mu) / beta);
    w * num::exp(-w) / beta
}

/// Gumbel CDF; inverse of [`quantile`].
pub fn cdf(gamma: Gamma, params: &SchedulerParams) -> f64 {
    num::exp(-num::exp(-(gamma.0 - params.mu) / params.beta()))
}

/// Quantile `gamma = mu - beta * ln(-ln q)`; strictly increasing in `q`.
pub fn quantile(q: f64, params: &SchedulerParams) -> CoreResult<Gamma> {
    if !(q > 0.0 && q < 1.0) {
        return Err(CoreError::InvalidInput(format!(
            "quantile requires q in (0, 1), got {q}"
        )));
    }
    Ok(Gamma(params.mu - params.beta() * num::ln(-num::ln(q))))
}

/// Stratified training draws: one shared uniform offset `u`, then
/// `q_i = clip((i + u) / B mod 1, 1e-5, 1 - 1e-5)` mapped through the
/// quantile. The returned gammas are plain constants, so no gradient can
/// reach the scheduler parameters through them.
pub fn sample_training_gammas(batch: usize, rng: &mut Rng, params: &SchedulerParams) -> Vec<Gamma> {
    let u = rng.uniform();
    stratified_gammas(batch, u, params)
}

/// Deterministic core of [`sample_training_gammas`] given the offset.
pub fn stratified_gammas(batch: usize, offset: f64, params: &SchedulerParams) -> Vec<Gamma> {
    let b = batch.max(1) as f64;
    (0..batch.max(1))
        .map(|i| {
            let q = ((i as f64 + offset) / b) % 1.0;
            let q = q.clamp(QUANTILE_CLIP, 1.0 - QUANTILE_CLIP);
            quantile(q, params).expect("clipped quantile in range")
        })
        .collect()
}

/// Sampling grid of `n + 1` strictly decreasing gammas:
/// `gamma_k = quantile(clip(1 - k/N))`, so `gamma_0 = b` (noisiest) and
/// `gamma_N = a` (cleanest).
pub fn sampling_grid(n: usize, params: &SchedulerParams) -> CoreResult<Vec<Gamma>> {
    if n < 1 {
        return Err(CoreError::InvalidInput("sampling grid needs N >= 1".into()));
    }
    Ok((0..=n)
        .map(|k| {
            let q = (1.0 - k as f64 / n as f64).clamp(QUANTILE_CLIP, 1.0 - QUANTILE_CLIP);
            quantile(q, params).expect("clipped quantile in range")
        })
        .collect())
}

/// Result of the offline least-squares fit.
#[derive(Debug, Clone, Copy)]
pub struct FitOutcome {
    pub params: SchedulerParams,
    /// Set when the fitted mode lies left of every observed gamma, i.e. the
    /// data never constrained the rising part of the curve.
    pub degenerate: bool,
    pub final_loss: f64,
}

/// Offline least-squares fit of the Gumbel entropy model to `(gamma, loss)`
/// pairs; the online path in training uses the per-step scheduler loss
/// instead. Test surface only.
pub fn fit_check(pairs: &[(f64, f64)]) -> CoreResult<FitOutcome> {
    if pairs.len() < 10 {
        return Err(CoreError::FitFailure(format!(
            "need at least 10 pairs, got {}",
            pairs.len()
        )));
    }
    let g_min = pairs.iter().fold(f64::INFINITY, |m, p| m.min(p.0));
    let g_max = pairs.iter().fold(f64::NEG_INFINITY, |m, p| m.max(p.0));
    if !(g_max - g_min).is_finite() || g_max - g_min < 1e-9 {
        return Err(CoreError::FitFailure(
            "all gammas coincide; the profile shape is unidentifiable".into(),
        ));
    }
    let ell_max = pairs.iter().fold(0.0_f64, |m, p| m.max(p.1));
    let mut p = SchedulerParams {
        raw_h_inf: num::softplus_inv(ell_max.max(0.1)),
        mu: 0.0,
        raw_beta: num::softplus_inv(2.0),
    };

    // Adam on the three unconstrained parameters with analytic gradients.
    let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.02);
    let mut m = [0.0; 3];
    let mut v = [0.0; 3];
    let inv_n = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    for t in 1..=40_000u32 {
        let h = p.h_inf();
        let beta = p.beta();
        let mut grad = [0.0; 3];
        loss = 0.0;
        for &(g, ell) in pairs {
            let w = num::exp(-(g - p.mu) / beta);
            let h_g = h * num::exp(-w);
            let resid = h_g - ell;
            loss += resid * resid * inv_n;
            let d_h = num::exp(-w);
            let d_w = -h * num::exp(-w);
            let dw_dmu = w / beta;
            let dw_dbeta = w * (g - p.mu) / (beta * beta);
            grad[0] += 2.0 * resid * d_h * num::sigmoid(p.raw_h_inf) * inv_n;
            grad[1] += 2.0 * resid * d_w * dw_dmu * inv_n;
            grad[2] += 2.0 * resid * d_w * dw_dbeta * num::sigmoid(p.raw_beta) * inv_n;
        }
        let mut raw = p.raw();
        for k in 0..3 {
            m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
            v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
            let m_hat = m[k] / (1.0 - num::exp(t as f64 * num::ln(b1)));
            let v_hat = v[k] / (1.0 - num::exp(t as f64 * num::ln(b2)));
            raw[k] -= lr * m_hat / (num::sqrt(v_hat) + eps);
        }
        p = SchedulerParams::from_raw(raw);
    }
    let degenerate = p.mu < g_min;
    Ok(FitOutcome {
        params: p,
        degenerate,
        final_loss: loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn unit_params() -> SchedulerParams {
        SchedulerParams::from_constrained(1.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn entropy_model_anchors() {
        let p = SchedulerParams::from_constrained(3.0, 1.2, 0.7).unwrap();
        let at_mu = entropy_model(Gamma(1.2), &p);
        assert!((at_mu - 3.0 / core::f64::consts::E).abs() < 1e-12);
        assert!((entropy_model(Gamma(1e6), &p) - 3.0).abs() < 1e-12);
        assert!(entropy_model(Gamma(-1e6), &p).abs() < 1e-300);
    }

    #[test]
    fn quantile_values() {
        let p = unit_params();
        let at_inv_e = quantile(num::exp(-1.0), &p).unwrap();
        assert!(at_inv_e.0.abs() < 1e-12);

        let p2 = SchedulerParams::from_constrained(1.0, 1.0, 2.0).unwrap();
        // High-precision evaluation of 1 - 2 ln(-ln 0.9).
        assert!((quantile(0.9, &p2).unwrap().0 - 5.500734654624891).abs() < 1e-9);

        let (a, b) = unit_params().clip_range();
        assert!((a.0 - -2.4434703576820562).abs() < 1e-9, "a = {}", a.0);
        assert!((b.0 - 11.512920464949395).abs() < 1e-9, "b = {}", b.0);

        assert!(quantile(0.0, &p).is_err());
        assert!(quantile(1.0, &p).is_err());
        assert!(quantile(-0.5, &p).is_err());
    }

    #[test]
    fn stratified_draws_cover_strata() {
        let p = unit_params();
        let g = stratified_gammas(4, 0.0, &p);
        let expect_q = [1e-5, 0.25, 0.5, 0.75];
        for (gi, &q) in g.iter().zip(expect_q.iter()) {
            assert!((gi.0 - quantile(q, &p).unwrap().0).abs() < 1e-12);
        }
        // One pre-clip q per stratum for arbitrary offsets.
        let b = 8;
        let u = 0.6180339887;
        for i in 0..b {
            let q = (i as f64 + u) / b as f64;
            assert!(q >= i as f64 / b as f64 && q < (i + 1) as f64 / b as f64);
        }
    }

    /// Empirical CDF of stratified-quantile draws matches the Gumbel CDF.
    #[test]
    fn draw_distribution_matches_gumbel() {
        let p = SchedulerParams::from_constrained(2.0, 0.5, 1.5).unwrap();
        let mut rng = Rng::seed_from(77);
        let batch = 100;
        let mut draws = Vec::new();
        for _ in 0..10_000 {
            for g in sample_training_gammas(batch, &mut rng, &p) {
                draws.push(g.0);
            }
        }
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let mut kolmogorov: f64 = 0.0;
        for (i, &g) in draws.iter().enumerate() {
            let emp = (i + 1) as f64 / n;
            kolmogorov = kolmogorov.max(num::abs(emp - cdf(Gamma(g), &p)));
        }
        assert!(kolmogorov < 0.01, "Kolmogorov distance {kolmogorov}");
    }

    #[test]
    fn grid_endpoints_and_midpoint() {
        let p = unit_params();
        let grid = sampling_grid(2, &p).unwrap();
        let (a, b) = p.clip_range();
        assert_eq!(grid[0].0, b.0);
        assert_eq!(grid[2].0, a.0);
        // -ln(-ln 0.5)
        assert!((grid[1].0 - 0.36651292058166435).abs() < 1e-9);
        assert!(sampling_grid(0, &p).is_err());
    }

    #[test]
    fn fit_recovers_noiseless_parameters() {
        let truth = SchedulerParams::from_constrained(4.0, 1.5, 0.8).unwrap();
        let pairs: Vec<(f64, f64)> = (0..60)
            .map(|i| {
                let g = -3.0 + 9.0 * i as f64 / 59.0;
                (g, entropy_model(Gamma(g), &truth))
            })
            .collect();
        let fit = fit_check(&pairs).unwrap();
        assert!(!fit.degenerate);
        assert!((fit.params.h_inf() - 4.0).abs() / 4.0 < 0.01);
        assert!((fit.params.mu - 1.5).abs() / 1.5 < 0.01);
        assert!((fit.params.beta() - 0.8).abs() / 0.8 < 0.01);
    }

    #[test]
    fn fit_recovers_under_noise() {
        let truth = SchedulerParams::from_constrained(4.0, 1.5, 0.8).unwrap();
        let mut rng = Rng::seed_from(31);
        let pairs: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let g = -3.0 + 9.0 * i as f64 / 199.0;
                (g, entropy_model(Gamma(g), &truth) + 0.01 * rng.normal())
            })
            .collect();
        let fit = fit_check(&pairs).unwrap();
        assert!((fit.params.h_inf() - 4.0).abs() / 4.0 < 0.05);
        assert!((fit.params.mu - 1.5).abs() / 1.5 < 0.05);
        assert!((fit.params.beta() - 0.8).abs() / 0.8 < 0.05);
    }

    #[test]
    fn fit_flags_constant_profile_as_degenerate() {
        let pairs: Vec<(f64, f64)> = (0..40).map(|i| (-2.0 + 0.2 * i as f64, 1.3)).collect();
        let fit = fit_check(&pairs).unwrap();
        assert!(fit.degenerate, "mu = {}", fit.params.mu);
        assert!((fit.params.h_inf() - 1.3).abs() < 0.05);
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        assert!(fit_check(&[(0.0, 1.0); 5]).is_err());
        assert!(fit_check(&[(2.0, 1.0); 32]).is_err());
    }

    proptest! {
        /// CDF/quantile inverse pair: H(quantile(q)) = h_inf * q.
        #[test]
        fn inverse_pair(q in 1e-4_f64..0.9999, h in 0.1_f64..10.0, mu in -3.0_f64..3.0, beta in 0.05_f64..4.0) {
            let p = SchedulerParams::from_constrained(h, mu, beta).unwrap();
            let g = quantile(q, &p).unwrap();
            prop_assert!((entropy_model(g, &p) - h * q).abs() < 1e-9);
            prop_assert!((cdf(g, &p) - q).abs() < 1e-9);
        }

        /// Quantile is strictly increasing and the grid strictly decreasing.
        #[test]
        fn monotone_quantiles(q in 1e-4_f64..0.99, dq in 1e-6_f64..0.009, n in 1usize..40) {
            let p = unit_params();
            prop_assert!(quantile(q + dq, &p).unwrap().0 > quantile(q, &p).unwrap().0);
            let grid = sampling_grid(n, &p).unwrap();
            for w in grid.windows(2) {
                prop_assert!(w[0].0 > w[1].0);
            }
        }

        /// Clipping bounds every drawn gamma inside [a, b].
        #[test]
        fn draws_respect_clip(seed in 0u64..500, batch in 1usize..64) {
            let p = SchedulerParams::from_constrained(3.0, -1.0, 2.5).unwrap();
            let (a, b) = p.clip_range();
            let mut rng = Rng::seed_from(seed);
            for g in sample_training_gammas(batch, &mut rng, &p) {
                prop_assert!(g.0 >= a.0 - 1e-12 && g.0 <= b.0 + 1e-12);
            }
        }
    }
}
