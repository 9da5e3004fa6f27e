//! Loss functions: generic Bregman divergence, the cross-entropy
//! instantiation used for training, the scheduler fitting loss, the MSE loss
//! for the collapse ablation, and the tokenwise logit bias.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::embedding::EmbeddingTable;
use crate::error::{CoreError, CoreResult};
use crate::gamma::{coeffs, Gamma, NoisySequence};
use crate::mat::Mat;
use crate::num;
use crate::scheduler::{entropy_model, SchedulerParams};

const SIMPLEX_TOL: f64 = 1e-6;

/// A convex generator for Bregman divergences: the function and its
/// gradient on the probability simplex.
pub trait ConvexGenerator {
    fn f(&self, p: &[f64]) -> f64;
    fn grad(&self, p: &[f64], out: &mut [f64]);
}

/// Negative entropy `f(p) = sum p ln p` (with `0 ln 0 = 0`); its Bregman
/// divergence is KL, and against one-hot targets it is cross-entropy.
pub struct NegEntropy;

impl ConvexGenerator for NegEntropy {
    fn f(&self, p: &[f64]) -> f64 {
        p.iter()
            .map(|&x| if x > 0.0 { x * num::ln(x) } else { 0.0 })
            .sum()
    }

    fn grad(&self, p: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(p) {
            *o = num::ln(x) + 1.0;
        }
    }
}

/// Squared Euclidean norm `f(p) = ||p||^2`; test-surface generator whose
/// Bregman divergence is the squared distance.
pub struct SquaredNorm;

impl ConvexGenerator for SquaredNorm {
    fn f(&self, p: &[f64]) -> f64 {
        p.iter().map(|&x| x * x).sum()
    }

    fn grad(&self, p: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(p) {
            *o = 2.0 * x;
        }
    }
}

fn check_simplex(name: &str, p: &[f64]) -> CoreResult<()> {
    let mut sum = 0.0;
    for &x in p {
        if x < -SIMPLEX_TOL {
            return Err(CoreError::InvalidInput(format!(
                "{name} has negative entry {x}"
            )));
        }
        sum += x;
    }
    if num::abs(sum - 1.0) > SIMPLEX_TOL {
        return Err(CoreError::InvalidInput(format!(
            "{name} sums to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Bregman divergence `D_f(p, q) = f(p) - f(q) - grad_f(q) . (p - q)`.
///
/// Nonnegative for convex `f`; zero-probability prediction entries where the
/// target is positive surface as an infinite-divergence signal, not an error.
pub fn bregman(gen: &dyn ConvexGenerator, p: &[f64], q: &[f64]) -> CoreResult<f64> {
    if p.len() != q.len() {
        return Err(CoreError::InvalidInput(format!(
            "bregman length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_simplex("target p", p)?;
    check_simplex("prediction q", q)?;
    let mut grad_q = Vec::new();
    grad_q.resize(q.len(), 0.0);
    gen.grad(q, &mut grad_q);
    let mut inner = 0.0;
    for ((&g, &pi), &qi) in grad_q.iter().zip(p).zip(q) {
        let diff = pi - qi;
        if diff == 0.0 {
            continue; // convention 0 * (+-inf) = 0 at coinciding entries
        }
        if g.is_infinite() {
            return Ok(f64::INFINITY);
        }
        inner += g * diff;
    }
    let d = gen.f(p) - gen.f(q) - inner;
    // Rounding can leave a tiny negative residue at p == q.
    if d < 0.0 && d > -1e-12 {
        return Ok(0.0);
    }
    Ok(d)
}

/// Mean cross-entropy in nats: `-(1/L) sum_i ln probs[i, x_i]`.
///
/// Zero probability at a target token propagates as `+inf`, not an error.
pub fn ce_loss(probs: &Mat, tokens: &[usize]) -> CoreResult<f64> {
    if probs.rows() != tokens.len() {
        return Err(CoreError::InvalidInput(format!(
            "ce_loss has {} prob rows for {} tokens",
            probs.rows(),
            tokens.len()
        )));
    }
    let mut total = 0.0;
    for (i, &t) in tokens.iter().enumerate() {
        if t >= probs.cols() {
            return Err(CoreError::InvalidInput(format!(
                "token id {t} out of range for vocab {}",
                probs.cols()
            )));
        }
        check_simplex("probs row", probs.row(i))?;
        total -= num::ln(probs.at(i, t));
    }
    Ok(total / tokens.len() as f64)
}

/// Scheduler fitting loss `(ell_detached - H_gamma(params))^2`.
///
/// `ell_detached` must already be detached from the main model; gradients of
/// this loss flow only into the scheduler parameters.
pub fn scheduler_loss(ell_detached: f64, gamma: Gamma, params: &SchedulerParams) -> f64 {
    let resid = ell_detached - entropy_model(gamma, params);
    resid * resid
}

/// Tape node for `H_gamma` from the three unconstrained scheduler leaves, so
/// the scheduler trains through the same autodiff path as everything else.
pub fn scheduler_entropy_node(
    g: &mut Graph,
    raw_h_inf: Var,
    mu: Var,
    raw_beta: Var,
    gamma: Gamma,
) -> Var {
    let h = g.softplus(raw_h_inf);
    let beta = g.softplus(raw_beta);
    let gamma_c = g.constant(Mat::scalar(gamma.0));
    let diff = g.sub(gamma_c, mu);
    let inv_beta = g.recip(beta);
    let ratio = g.mul(diff, inv_beta);
    let neg_ratio = g.scale(ratio, -1.0);
    let w = g.exp(neg_ratio);
    let neg_w = g.scale(w, -1.0);
    let outer = g.exp(neg_w);
    g.mul(h, outer)
}

/// Tape node for the squared scheduler residual at one noise level.
pub fn scheduler_loss_node(
    g: &mut Graph,
    raw_h_inf: Var,
    mu: Var,
    raw_beta: Var,
    gamma: Gamma,
    ell_detached: f64,
) -> Var {
    let h_g = scheduler_entropy_node(g, raw_h_inf, mu, raw_beta, gamma);
    let ell = g.constant(Mat::scalar(ell_detached));
    let resid = g.sub(ell, h_g);
    g.square(resid)
}

/// Squared error `||z - z_hat||^2` (lambda(gamma) fixed to 1); used only by
/// the embedding-collapse ablation.
pub fn mse_loss(z_hat: &Mat, z: &Mat) -> CoreResult<f64> {
    if z_hat.shape() != z.shape() {
        return Err(CoreError::InvalidInput(format!(
            "mse_loss shape mismatch: {:?} vs {:?}",
            z_hat.shape(),
            z.shape()
        )));
    }
    Ok(z_hat.zip_map(z, |a, b| a - b).norm_sq())
}

/// Tokenwise logit bias: entry `(i, k) = r * (alpha/sigma^2) * e_k . z_i`
/// (the additive constant of the Gaussian log-likelihood is dropped).
pub fn bias_logits(z_gamma: &NoisySequence, table: &EmbeddingTable, r: f64) -> CoreResult<Mat> {
    if !(0.0..=1.0).contains(&r) {
        return Err(CoreError::InvalidInput(format!(
            "bias ramp r must lie in [0, 1], got {r}"
        )));
    }
    if z_gamma.values.cols() != table.dim() {
        return Err(CoreError::InvalidInput(format!(
            "bias_logits width mismatch: state {} vs table {}",
            z_gamma.values.cols(),
            table.dim()
        )));
    }
    let c = coeffs(z_gamma.gamma)?;
    let scale = r * c.alpha / (c.sigma * c.sigma);
    Ok(z_gamma.values.matmul_nt(table.rows()).scale(scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec;

    fn simplex(rng: &mut Rng, v: usize) -> Vec<f64> {
        let mut p: Vec<f64> = (0..v).map(|_| rng.uniform() + 1e-3).collect();
        let s: f64 = p.iter().sum();
        for x in p.iter_mut() {
            *x /= s;
        }
        p
    }

    #[test]
    fn bregman_identity_and_one_hot() {
        let q = vec![0.2, 0.5, 0.3];
        assert_eq!(bregman(&NegEntropy, &q, &q).unwrap(), 0.0);
        // One-hot target reduces to -ln q_k.
        let one_hot = vec![0.0, 1.0, 0.0];
        let d = bregman(&NegEntropy, &one_hot, &q).unwrap();
        assert!((d - -num::ln(0.5)).abs() < 1e-12);
        // Zero prediction mass where the target is positive -> infinity.
        let q0 = vec![0.0, 0.5, 0.5];
        assert_eq!(
            bregman(&NegEntropy, &vec![1.0, 0.0, 0.0], &q0).unwrap(),
            f64::INFINITY
        );
        // Coinciding zero entries stay finite.
        assert!(bregman(&NegEntropy, &vec![0.0, 0.4, 0.6], &q0)
            .unwrap()
            .is_finite());
    }

    /// Direct KL oracle for the negative-entropy generator.
    #[test]
    fn bregman_neg_entropy_is_kl() {
        let mut rng = Rng::seed_from(6);
        for _ in 0..50 {
            let p = simplex(&mut rng, 6);
            let q = simplex(&mut rng, 6);
            let d = bregman(&NegEntropy, &p, &q).unwrap();
            let kl: f64 = p
                .iter()
                .zip(q.iter())
                .map(|(&pi, &qi)| pi * num::ln(pi / qi))
                .sum();
            assert!((d - kl).abs() < 1e-12, "{d} vs {kl}");
            assert!(d >= 0.0);
        }
    }

    /// Convexity spot-check: f(midpoint) <= mean of endpoints.
    #[test]
    fn generators_are_convex_on_random_pairs() {
        let mut rng = Rng::seed_from(61);
        for _ in 0..100 {
            let p = simplex(&mut rng, 5);
            let q = simplex(&mut rng, 5);
            let mid: Vec<f64> = p
                .iter()
                .zip(q.iter())
                .map(|(&a, &b)| 0.5 * (a + b))
                .collect();
            for gen in [&NegEntropy as &dyn ConvexGenerator, &SquaredNorm] {
                assert!(gen.f(&mid) <= 0.5 * (gen.f(&p) + gen.f(&q)) + 1e-12);
            }
        }
    }

    /// Tower identity: E_p*[D_f(1_x, q)] - D_f(p*, q) does not depend on q.
    #[test]
    fn tower_identity_by_enumeration() {
        let mut rng = Rng::seed_from(13);
        for v in [2usize, 3, 8] {
            let p_star = simplex(&mut rng, v);
            let q1 = simplex(&mut rng, v);
            let q2 = simplex(&mut rng, v);
            for gen in [&NegEntropy as &dyn ConvexGenerator, &SquaredNorm] {
                let gap = |q: &[f64]| -> f64 {
                    let mut expect = 0.0;
                    for k in 0..v {
                        let mut one_hot = vec![0.0; v];
                        one_hot[k] = 1.0;
                        expect += p_star[k] * bregman(gen, &one_hot, q).unwrap();
                    }
                    expect - bregman(gen, &p_star, q).unwrap()
                };
                let diff = gap(&q1) - gap(&q2);
                assert!(diff.abs() < 1e-12, "V={v} residual {diff}");
            }
        }
    }

    /// Posterior matching: the simplex grid minimizer of E[D_f(1_x, q)] is
    /// p* itself, to within the grid resolution.
    #[test]
    fn posterior_matching_grid_search() {
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
                let mut expect = 0.0;
                for k in 0..3 {
                    let mut one_hot = [0.0; 3];
                    one_hot[k] = 1.0;
                    expect += p_star[k] * bregman(&NegEntropy, &one_hot, &q).unwrap();
                }
                if expect < best.0 {
                    best = (expect, q);
                }
            }
        }
        for k in 0..3 {
            assert!(
                (best.1[k] - p_star[k]).abs() <= res + 1e-9,
                "component {k}: {} vs {}",
                best.1[k],
                p_star[k]
            );
        }
    }

    #[test]
    fn ce_loss_values() {
        let v = 3;
        let uniform = Mat::filled(4, v, 1.0 / v as f64);
        let loss = ce_loss(&uniform, &[0, 1, 2, 0]).unwrap();
        assert!((loss - num::ln(v as f64)).abs() < 1e-12);

        let mut perfect = Mat::zeros(2, v);
        perfect.set(0, 1, 1.0);
        perfect.set(1, 2, 1.0);
        assert_eq!(ce_loss(&perfect, &[1, 2]).unwrap(), 0.0);
        // Zero probability at the target is an infinite-loss signal.
        assert_eq!(ce_loss(&perfect, &[0, 2]).unwrap(), f64::INFINITY);

        let probs = Mat::from_vec(2, 3, vec![0.5, 0.3, 0.2, 0.1, 0.8, 0.1]);
        let loss = ce_loss(&probs, &[0, 1]).unwrap();
        assert!((loss - 0.45814536593707755).abs() < 1e-12);

        assert!(ce_loss(&probs, &[0]).is_err());
        assert!(ce_loss(&probs, &[0, 9]).is_err());
    }

    /// Factorized-variational equivalence: the mean CE equals the joint
    /// product form -(1/L) ln prod_i q_i(x_i).
    #[test]
    fn ce_equals_factorized_joint() {
        let mut rng = Rng::seed_from(3);
        let l = 6;
        let v = 5;
        let mut probs = Mat::zeros(l, v);
        let mut tokens = Vec::new();
        for i in 0..l {
            let row = simplex(&mut rng, v);
            probs.row_mut(i).copy_from_slice(&row);
            tokens.push((rng.next_u64() % v as u64) as usize);
        }
        let ce = ce_loss(&probs, &tokens).unwrap();
        let mut joint = 1.0;
        for (i, &t) in tokens.iter().enumerate() {
            joint *= probs.at(i, t);
        }
        let from_joint = -num::ln(joint) / l as f64;
        assert!((ce - from_joint).abs() < 1e-12);
        assert!(ce >= 0.0);
    }

    #[test]
    fn scheduler_loss_values_and_gradient() {
        let p = SchedulerParams::from_constrained(2.0, 0.5, 1.0).unwrap();
        let g = Gamma(1.0);
        let h = entropy_model(g, &p);
        assert_eq!(scheduler_loss(h, g, &p), 0.0);
        assert!((scheduler_loss(h + 0.1, g, &p) - 0.01).abs() < 1e-12);
        assert!(scheduler_loss(h - 0.3, g, &p) >= 0.0);

        // Gradient of the tape version w.r.t. mu against central differences.
        let ell = h + 0.25;
        let eval = |mu: f64| -> f64 {
            let q = SchedulerParams {
                raw_h_inf: p.raw_h_inf,
                mu,
                raw_beta: p.raw_beta,
            };
            scheduler_loss(ell, g, &q)
        };
        let hstep = 1e-6;
        let numeric = (eval(p.mu + hstep) - eval(p.mu - hstep)) / (2.0 * hstep);
        let mut graph = Graph::new();
        let rh = graph.leaf(Mat::scalar(p.raw_h_inf));
        let mu = graph.leaf(Mat::scalar(p.mu));
        let rb = graph.leaf(Mat::scalar(p.raw_beta));
        let loss = scheduler_loss_node(&mut graph, rh, mu, rb, g, ell);
        graph.backward(loss).unwrap();
        let analytic = graph.grad(mu).at(0, 0);
        assert!(
            (analytic - numeric).abs() / numeric.abs().max(1e-9) < 1e-6,
            "{analytic} vs {numeric}"
        );
    }

    #[test]
    fn mse_loss_values() {
        let z = Mat::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
        assert_eq!(mse_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(mse_loss(&Mat::zeros(2, 2), &z).unwrap(), z.norm_sq());
        assert!(mse_loss(&z, &Mat::zeros(1, 2)).is_err());
    }

    /// The embedding gradient of the MSE objective,
    /// `2 (x_hat_k - delta_{k,x})(E^T x_hat - e_x)`, against both the tape
    /// and central finite differences.
    #[test]
    fn mse_embedding_gradient_formula() {
        let mut rng = Rng::seed_from(21);
        let v = 4;
        let d = 3;
        let table = EmbeddingTable::init_random(v, d, &mut rng).unwrap();
        let probs = simplex(&mut rng, v);
        let target = 2usize;

        let loss_of = |rows: &Mat| -> f64 {
            let mut z_hat = vec![0.0; d];
            for k in 0..v {
                for j in 0..d {
                    z_hat[j] += probs[k] * rows.at(k, j);
                }
            }
            let mut total = 0.0;
            for j in 0..d {
                let diff = z_hat[j] - rows.at(target, j);
                total += diff * diff;
            }
            total
        };

        let rows = table.rows().clone();
        let mut z_hat = vec![0.0; d];
        for k in 0..v {
            for j in 0..d {
                z_hat[j] += probs[k] * rows.at(k, j);
            }
        }
        let residual: Vec<f64> = (0..d).map(|j| z_hat[j] - rows.at(target, j)).collect();

        let h = 1e-6;
        for k in 0..v {
            for j in 0..d {
                let delta = if k == target { 1.0 } else { 0.0 };
                let analytic = 2.0 * (probs[k] - delta) * residual[j];
                let mut plus = rows.clone();
                plus.set(k, j, plus.at(k, j) + h);
                let mut minus = rows.clone();
                minus.set(k, j, minus.at(k, j) - h);
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                assert!(
                    (analytic - numeric).abs() / numeric.abs().max(1e-6) < 1e-6,
                    "entry ({k},{j}): {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn bias_logits_ramp_behavior() {
        let mut rng = Rng::seed_from(30);
        let table = EmbeddingTable::init_random(5, 3, &mut rng).unwrap();
        let z = NoisySequence {
            values: rng.normal_mat(2, 3),
            gamma: Gamma(0.3),
        };
        let zero = bias_logits(&z, &table, 0.0).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let full = bias_logits(&z, &table, 1.0).unwrap();
        let half = bias_logits(&z, &table, 0.5).unwrap();
        for i in 0..2 {
            for k in 0..5 {
                assert!((half.at(i, k) - 0.5 * full.at(i, k)).abs() < 1e-15);
            }
        }
        // Entry check against the explicit inner product.
        let c = coeffs(z.gamma).unwrap();
        let want = c.alpha / (c.sigma * c.sigma)
            * z.values
                .row(1)
                .iter()
                .zip(table.row(3))
                .map(|(&a, &b)| a * b)
                .sum::<f64>();
        assert!((full.at(1, 3) - want).abs() < 1e-12);
        assert!(bias_logits(&z, &table, 1.5).is_err());
    }
}
