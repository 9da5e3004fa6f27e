//! Self-test suite behind `catflow oracle-check`: every derived-oracle
//! comparison the library's correctness rests on, runnable by operators.
//! Each check prints one pass/fail line; any failure exits with code 4.

use catflow_core::corpus::MarkovProcess;
use catflow_core::denoiser::{
    bayes_posterior_contextfree, bayes_posterior_sequence, markov_posterior_marginals,
};
use catflow_core::embedding::EmbeddingTable;
use catflow_core::gamma::{coeffs, noise, velocity_from_denoiser, Gamma, NoisySequence};
use catflow_core::likelihood::{divergence_exact, divergence_hutchinson};
use catflow_core::mat::{log_softmax_row, Mat};
use catflow_core::objective::{bias_logits, bregman, ce_loss, NegEntropy};
use catflow_core::rng::Rng;
use catflow_core::sampler::{euler_step, solver_order_ratios, LinearFieldDenoiser};
use catflow_core::scheduler::{
    self, entropy_model, fit_check, quantile, sample_training_gammas, SchedulerParams,
};
use catflow_core::trainer::{
    training_loss_and_grads, StepSetup, TrainConfig, TrainObjective, TrainState,
};

pub struct OracleReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckResult = Result<String, String>;

fn check(name: &'static str, run: impl FnOnce() -> CheckResult) -> OracleReport {
    match run() {
        Ok(detail) => OracleReport {
            name,
            passed: true,
            detail,
        },
        Err(detail) => OracleReport {
            name,
            passed: false,
            detail,
        },
    }
}

/// Runs every oracle suite; `quick` trims Monte-Carlo sizes.
pub fn run_all(quick: bool) -> Vec<OracleReport> {
    vec![
        check("vp-path-identity", || vp_path_identity(quick)),
        check("noise-second-moment", || noise_second_moment(quick)),
        check("euler-vs-frozen-ode", euler_vs_frozen_ode),
        check("solver-orders", solver_orders),
        check("quantile-inverse-pair", quantile_inverse_pair),
        check("stratified-draw-cdf", || stratified_draw_cdf(quick)),
        check("gumbel-fit-recovery", gumbel_fit_recovery),
        check("bregman-tower-identity", bregman_tower_identity),
        check("posterior-matching-grid", posterior_matching_grid),
        check("cross-entropy-values", cross_entropy_values),
        check("bayes-vs-direct-gaussian", bayes_vs_direct_gaussian),
        check("bias-logits-vs-posterior", bias_logits_vs_posterior),
        check("forward-backward-vs-enumeration", fb_vs_enumeration),
        check("divergence-estimators", || divergence_estimators(quick)),
        check("gradient-audit", gradient_audit),
    ]
}

fn vp_path_identity(quick: bool) -> CheckResult {
    let n = if quick { 2_000 } else { 10_000 };
    let mut rng = Rng::seed_from(101);
    let mut worst_identity = 0.0_f64;
    let mut worst_round_trip = 0.0_f64;
    for _ in 0..n {
        let g = (rng.uniform() - 0.5) * 60.0;
        let c = coeffs(Gamma(g)).map_err(|e| e.to_string())?;
        worst_identity = worst_identity.max((c.alpha * c.alpha + c.sigma * c.sigma - 1.0).abs());
        if g.abs() < 30.0 {
            worst_round_trip = worst_round_trip.max((c.gamma_of().value() - g).abs());
        }
    }
    if worst_identity > 1e-12 {
        return Err(format!("alpha^2+sigma^2 drifted by {worst_identity:e}"));
    }
    if worst_round_trip > 1e-9 {
        return Err(format!("gamma round trip off by {worst_round_trip:e}"));
    }
    Ok(format!(
        "identity residual {worst_identity:.2e}, round trip {worst_round_trip:.2e} over {n} draws"
    ))
}

fn noise_second_moment(quick: bool) -> CheckResult {
    let n = if quick { 20_000 } else { 100_000 };
    let mut rng = Rng::seed_from(7);
    let z = rng.normal_mat(3, 4);
    let g = Gamma(0.9);
    let c = coeffs(g).map_err(|e| e.to_string())?;
    let expected = c.alpha * c.alpha * z.norm_sq() + c.sigma * c.sigma * 12.0;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let eps = rng.normal_mat(3, 4);
        let v = noise(&z, g, &eps)
            .map_err(|e| e.to_string())?
            .values
            .norm_sq();
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let se = ((sum_sq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
    if (mean - expected).abs() > 3.0 * se {
        return Err(format!("moment {mean:.4} vs {expected:.4} (se {se:.4})"));
    }
    Ok(format!("{mean:.4} vs {expected:.4} within 3 x {se:.5}"))
}

fn euler_vs_frozen_ode() -> CheckResult {
    let mut rng = Rng::seed_from(14);
    let z0 = rng.normal_mat(1, 3);
    let z_hat = rng.normal_mat(1, 3);
    let (g0, g1) = (1.2, 0.7);
    let stepped = euler_step(
        &z0,
        &z_hat,
        coeffs(Gamma(g0)).map_err(|e| e.to_string())?,
        coeffs(Gamma(g1)).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    // RK4 reference on the frozen-prediction velocity.
    let f = |g: f64, z: &Mat| -> Mat {
        velocity_from_denoiser(
            &NoisySequence {
                values: z.clone(),
                gamma: Gamma(g),
            },
            &z_hat,
        )
        .expect("velocity")
    };
    let steps = 2_000;
    let h = (g1 - g0) / steps as f64;
    let mut z = z0.clone();
    let mut g = g0;
    for _ in 0..steps {
        let k1 = f(g, &z);
        let mut z2 = z.clone();
        z2.axpy(h / 2.0, &k1);
        let k2 = f(g + h / 2.0, &z2);
        let mut z3 = z.clone();
        z3.axpy(h / 2.0, &k2);
        let k3 = f(g + h / 2.0, &z3);
        let mut z4 = z.clone();
        z4.axpy(h, &k3);
        let k4 = f(g + h, &z4);
        for j in 0..z.len() {
            z.data_mut()[j] +=
                h / 6.0 * (k1.data()[j] + 2.0 * k2.data()[j] + 2.0 * k3.data()[j] + k4.data()[j]);
        }
        g += h;
    }
    let diff = stepped.sub(&z).max_abs();
    if diff > 1e-10 {
        return Err(format!("chart step vs integrated ODE differ by {diff:e}"));
    }
    Ok(format!("closed-form step within {diff:.1e} of fine RK4"))
}

fn solver_orders() -> CheckResult {
    let mut rng = Rng::seed_from(25);
    let den = LinearFieldDenoiser {
        matrix: rng.normal_mat(3, 3).scale(0.25),
        vocab: 2,
    };
    let sched = SchedulerParams::from_constrained(1.0, 0.0, 1.0).map_err(|e| e.to_string())?;
    let (lo, hi) = sched.clip_range();
    let z0 = rng.normal_mat(1, 3);
    let ratios = solver_order_ratios(&den, &z0, hi, lo, &[64, 128]);
    for &(n, euler_ratio, heun_ratio) in &ratios {
        if !(1.6..=2.4).contains(&euler_ratio) {
            return Err(format!("euler ratio at n={n}: {euler_ratio:.3}"));
        }
        if !(3.2..=4.8).contains(&heun_ratio) {
            return Err(format!("heun ratio at n={n}: {heun_ratio:.3}"));
        }
    }
    let sum: String = ratios
        .iter()
        .map(|(n, e, h)| format!("n={n}: euler {e:.2} heun {h:.2}; "))
        .collect();
    Ok(sum)
}

fn quantile_inverse_pair() -> CheckResult {
    let p = SchedulerParams::from_constrained(3.0, -0.7, 1.4).map_err(|e| e.to_string())?;
    let mut worst = 0.0_f64;
    for i in 1..1000 {
        let q = i as f64 / 1000.0;
        let g = quantile(q, &p).map_err(|e| e.to_string())?;
        worst = worst.max((entropy_model(g, &p) - p.h_inf() * q).abs());
    }
    if worst > 1e-9 {
        return Err(format!("inverse-pair residual {worst:e}"));
    }
    Ok(format!("H(quantile(q)) = H_inf q within {worst:.1e}"))
}

fn stratified_draw_cdf(quick: bool) -> CheckResult {
    let p = SchedulerParams::from_constrained(2.0, 0.5, 1.5).map_err(|e| e.to_string())?;
    let mut rng = Rng::seed_from(77);
    let rounds = if quick { 2_000 } else { 10_000 };
    let mut draws = Vec::with_capacity(rounds * 100);
    for _ in 0..rounds {
        for g in sample_training_gammas(100, &mut rng, &p) {
            draws.push(g.0);
        }
    }
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = draws.len() as f64;
    let mut kolmogorov = 0.0_f64;
    for (i, &g) in draws.iter().enumerate() {
        let emp = (i + 1) as f64 / n;
        kolmogorov = kolmogorov.max((emp - scheduler::cdf(Gamma(g), &p)).abs());
    }
    if kolmogorov > 0.01 {
        return Err(format!("Kolmogorov distance {kolmogorov:.4}"));
    }
    Ok(format!(
        "Kolmogorov distance {kolmogorov:.4} over {} draws",
        draws.len()
    ))
}

fn gumbel_fit_recovery() -> CheckResult {
    let truth = SchedulerParams::from_constrained(4.0, 1.5, 0.8).map_err(|e| e.to_string())?;
    let pairs: Vec<(f64, f64)> = (0..60)
        .map(|i| {
            let g = -3.0 + 9.0 * i as f64 / 59.0;
            (g, entropy_model(Gamma(g), &truth))
        })
        .collect();
    let fit = fit_check(&pairs).map_err(|e| e.to_string())?;
    let rel = [
        (fit.params.h_inf() - 4.0).abs() / 4.0,
        (fit.params.mu - 1.5).abs() / 1.5,
        (fit.params.beta() - 0.8).abs() / 0.8,
    ];
    if rel.iter().any(|&r| r > 0.01) {
        return Err(format!("relative errors {rel:?}"));
    }
    Ok(format!(
        "recovered (h_inf, mu, beta) within {:.3}%",
        rel.iter().fold(0.0_f64, |m, &r| m.max(r)) * 100.0
    ))
}

fn bregman_tower_identity() -> CheckResult {
    let mut rng = Rng::seed_from(13);
    let mut worst = 0.0_f64;
    for v in [2usize, 3, 8] {
        let simplex = |rng: &mut Rng| {
            let mut p: Vec<f64> = (0..v).map(|_| rng.uniform() + 1e-3).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            p
        };
        let p_star = simplex(&mut rng);
        let q1 = simplex(&mut rng);
        let q2 = simplex(&mut rng);
        let gap = |q: &[f64]| -> Result<f64, String> {
            let mut expect = 0.0;
            for k in 0..v {
                let mut one_hot = vec![0.0; v];
                one_hot[k] = 1.0;
                expect +=
                    p_star[k] * bregman(&NegEntropy, &one_hot, q).map_err(|e| e.to_string())?;
            }
            Ok(expect - bregman(&NegEntropy, &p_star, q).map_err(|e| e.to_string())?)
        };
        worst = worst.max((gap(&q1)? - gap(&q2)?).abs());
    }
    if worst > 1e-12 {
        return Err(format!("q-dependence residual {worst:e}"));
    }
    Ok(format!(
        "q-independence residual {worst:.1e} at V in {{2,3,8}}"
    ))
}

fn posterior_matching_grid() -> CheckResult {
    let p_star = [0.2, 0.3, 0.5];
    let res = 0.01;
    let steps = (1.0 / res) as usize;
    let mut best = (f64::INFINITY, [0.0; 3]);
    for i in 1..steps {
        for j in 1..steps - i {
            let q = [i as f64 * res, j as f64 * res, 1.0 - (i + j) as f64 * res];
            if q[2] <= 0.0 {
                continue;
            }
            let expect: f64 =
                -(p_star[0] * q[0].ln() + p_star[1] * q[1].ln() + p_star[2] * q[2].ln());
            if expect < best.0 {
                best = (expect, q);
            }
        }
    }
    for k in 0..3 {
        if (best.1[k] - p_star[k]).abs() > res + 1e-9 {
            return Err(format!("argmin {:?} vs target {p_star:?}", best.1));
        }
    }
    Ok(format!("grid argmin {:?} matches the posterior", best.1))
}

fn cross_entropy_values() -> CheckResult {
    let probs = Mat::from_vec(2, 3, vec![0.5, 0.3, 0.2, 0.1, 0.8, 0.1]);
    let loss = ce_loss(&probs, &[0, 1]).map_err(|e| e.to_string())?;
    let want = -(0.5_f64.ln() + 0.8_f64.ln()) / 2.0;
    if (loss - want).abs() > 1e-12 {
        return Err(format!("hand value: {loss} vs {want}"));
    }
    // Factorized-joint equivalence.
    let joint = -(0.5_f64 * 0.8).ln() / 2.0;
    if (loss - joint).abs() > 1e-12 {
        return Err(format!("joint form: {loss} vs {joint}"));
    }
    Ok(format!("hand CE {loss:.9} matches both forms"))
}

fn bayes_vs_direct_gaussian() -> CheckResult {
    let mut rng = Rng::seed_from(15);
    let table = EmbeddingTable::init_random(3, 2, &mut rng).map_err(|e| e.to_string())?;
    let prior = [0.5, 0.2, 0.3];
    let g = Gamma(0.8);
    let c = coeffs(g).map_err(|e| e.to_string())?;
    let z = [0.37, -1.2];
    let post = bayes_posterior_contextfree(&z, g, &table, &prior).map_err(|e| e.to_string())?;
    let mut weights = [0.0; 3];
    for k in 0..3 {
        let mut sq = 0.0;
        for j in 0..2 {
            let diff = z[j] - c.alpha * table.row(k)[j];
            sq += diff * diff;
        }
        weights[k] = prior[k] * (-sq / (2.0 * c.sigma * c.sigma)).exp();
    }
    let total: f64 = weights.iter().sum();
    let mut worst = 0.0_f64;
    for k in 0..3 {
        worst = worst.max((post[k] - weights[k] / total).abs());
    }
    if worst > 1e-10 {
        return Err(format!("posterior residual {worst:e}"));
    }
    Ok(format!("softmax form within {worst:.1e} of direct Bayes"))
}

fn bias_logits_vs_posterior() -> CheckResult {
    let mut rng = Rng::seed_from(40);
    let table = EmbeddingTable::init_random(6, 3, &mut rng).map_err(|e| e.to_string())?;
    let prior = [0.1_f64, 0.3, 0.05, 0.25, 0.2, 0.1];
    let g = Gamma(0.4);
    let z = NoisySequence {
        values: rng.normal_mat(2, 3),
        gamma: g,
    };
    let bias = bias_logits(&z, &table, 1.0).map_err(|e| e.to_string())?;
    let mut worst = 0.0_f64;
    for i in 0..2 {
        let mut row: Vec<f64> = (0..6).map(|k| bias.at(i, k) + prior[k].ln()).collect();
        log_softmax_row(&mut row);
        let post = bayes_posterior_contextfree(z.values.row(i), g, &table, &prior)
            .map_err(|e| e.to_string())?;
        for k in 0..6 {
            worst = worst.max((row[k].exp() - post[k]).abs());
        }
    }
    if worst > 1e-12 {
        return Err(format!("bias/posterior residual {worst:e}"));
    }
    Ok(format!(
        "full-ramp bias reproduces the posterior within {worst:.1e}"
    ))
}

fn fb_vs_enumeration() -> CheckResult {
    let mut rng = Rng::seed_from(3);
    let table = EmbeddingTable::init_random(3, 2, &mut rng).map_err(|e| e.to_string())?;
    let init = vec![0.5, 0.25, 0.25];
    let trans = Mat::from_vec(3, 3, vec![0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.25, 0.25, 0.5]);
    let process = MarkovProcess::order1(init, trans).map_err(|e| e.to_string())?;
    let mut worst = 0.0_f64;
    for &g in &[Gamma(-2.0), Gamma(0.0), Gamma(2.5)] {
        let z = rng.normal_mat(3, 2);
        let slow = bayes_posterior_sequence(&z, g, &table, &process).map_err(|e| e.to_string())?;
        let fast =
            markov_posterior_marginals(&z, g, &table, &process).map_err(|e| e.to_string())?;
        for i in 0..3 {
            for k in 0..3 {
                worst = worst.max((slow.at(i, k) - fast.at(i, k)).abs());
            }
        }
    }
    if worst > 1e-10 {
        return Err(format!("marginal residual {worst:e}"));
    }
    Ok(format!(
        "forward-backward within {worst:.1e} of enumeration"
    ))
}

fn divergence_estimators(quick: bool) -> CheckResult {
    let mut rng = Rng::seed_from(3);
    let n = 6;
    let a = rng.normal_mat(n, n);
    let at = a.transpose();
    let field =
        move |z: &[f64]| -> Vec<f64> { Mat::from_vec(1, n, z.to_vec()).matmul(&at).into_data() };
    let point: Vec<f64> = (0..n).map(|i| 0.1 * i as f64).collect();
    let trace: f64 = (0..n).map(|i| a.at(i, i)).sum();
    let exact = divergence_exact(&field, &point).map_err(|e| e.to_string())?;
    if (exact - trace).abs() > 1e-7 {
        return Err(format!("exact divergence {exact} vs trace {trace}"));
    }
    let probes = if quick { 20_000 } else { 100_000 };
    let (est, se) =
        divergence_hutchinson(&field, &point, probes, &mut rng).map_err(|e| e.to_string())?;
    if (est - trace).abs() > 3.0 * se.max(1e-9) {
        return Err(format!("hutchinson {est} vs trace {trace} (se {se})"));
    }
    // Quadratic field with a hand Jacobian.
    let sq = |z: &[f64]| -> Vec<f64> { z.iter().map(|&x| x * x).collect() };
    let div = divergence_exact(&sq, &[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    if (div - 12.0).abs() > 1e-7 {
        return Err(format!("square-field divergence {div} vs 12"));
    }
    Ok(format!(
        "exact within {:.1e}; hutchinson {est:.4} vs {trace:.4} (se {se:.4})",
        (exact - trace).abs()
    ))
}

fn gradient_audit() -> CheckResult {
    let mut cfg = TrainConfig::new(5, 3, 2);
    cfg.hidden = 6;
    cfg.gamma_features = 4;
    cfg.batch = 3;
    cfg.seed = 4;
    let den_cfg = cfg.denoiser_config();
    let state = TrainState::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut rng = Rng::seed_from(99);
    let process = MarkovProcess::uniform_iid(cfg.vocab);
    let batch = process.generate(cfg.seq_len, cfg.batch, &mut rng);
    let mut flat = Vec::new();
    for seq in &batch {
        flat.extend_from_slice(seq);
    }
    let rows = cfg.batch * cfg.seq_len;
    let mut worst = 0.0_f64;
    for objective in [TrainObjective::CrossEntropy, TrainObjective::Mse] {
        let setup = StepSetup {
            gammas: sample_training_gammas(
                cfg.batch,
                &mut rng,
                &SchedulerParams::init_for_vocab(cfg.vocab),
            ),
            flat_tokens: flat.clone(),
            eps: rng.normal_mat(rows, cfg.dim),
            z_sc: rng.normal_mat(rows, cfg.dim).scale(0.3),
            seq_len: cfg.seq_len,
            bias_ramp: 0.7,
            objective,
        };
        let breakdown =
            training_loss_and_grads(&state.den, &state.table, &state.sched, &den_cfg, &setup)
                .map_err(|e| e.to_string())?;
        let h = 1e-5;
        // Spot-check a spread of parameters in each group against central
        // finite differences of the matching loss component.
        for (fi, field) in state.den.fields().into_iter().enumerate() {
            let stride = (field.len() / 5).max(1);
            for k in (0..field.len()).step_by(stride) {
                let mut plus = state.den.clone();
                plus.fields_mut()[fi].data_mut()[k] += h;
                let mut minus = state.den.clone();
                minus.fields_mut()[fi].data_mut()[k] -= h;
                let f_plus =
                    training_loss_and_grads(&plus, &state.table, &state.sched, &den_cfg, &setup)
                        .map_err(|e| e.to_string())?
                        .model;
                let f_minus =
                    training_loss_and_grads(&minus, &state.table, &state.sched, &den_cfg, &setup)
                        .map_err(|e| e.to_string())?
                        .model;
                let numeric = (f_plus - f_minus) / (2.0 * h);
                let analytic = breakdown.grads[fi].data()[k];
                let denom = numeric.abs().max(analytic.abs()).max(1e-5);
                let rel = (analytic - numeric).abs() / denom;
                worst = worst.max(rel);
                if rel > 1e-4 {
                    return Err(format!(
                        "{objective:?} field {fi} entry {k}: analytic {analytic} vs {numeric}"
                    ));
                }
            }
        }
        for k in 0..3 {
            let mut raw_plus = state.sched.raw();
            raw_plus[k] += h;
            let mut raw_minus = state.sched.raw();
            raw_minus[k] -= h;
            let f_plus = training_loss_and_grads(
                &state.den,
                &state.table,
                &SchedulerParams::from_raw(raw_plus),
                &den_cfg,
                &setup,
            )
            .map_err(|e| e.to_string())?
            .scheduler;
            let f_minus = training_loss_and_grads(
                &state.den,
                &state.table,
                &SchedulerParams::from_raw(raw_minus),
                &den_cfg,
                &setup,
            )
            .map_err(|e| e.to_string())?
            .scheduler;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let analytic = breakdown.grads[12].data()[k];
            let denom = numeric.abs().max(analytic.abs()).max(1e-5);
            let rel = (analytic - numeric).abs() / denom;
            worst = worst.max(rel);
            if rel > 1e-4 {
                return Err(format!(
                    "{objective:?} scheduler raw {k}: analytic {analytic} vs {numeric}"
                ));
            }
        }
    }
    Ok(format!("worst relative gradient error {worst:.2e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        for report in run_all(true) {
            assert!(report.passed, "{}: {}", report.name, report.detail);
        }
    }
}
