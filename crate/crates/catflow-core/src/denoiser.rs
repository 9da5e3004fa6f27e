//! The learnable denoiser `x_hat(z_gamma, gamma, z_sc)` and the closed-form
//! Bayes-posterior oracles used as ground truth in tests and evaluations.
//!
//! The network is a per-token two-layer perceptron with one
//! mean-pool-plus-concatenate context-mixing layer and tanh activations.
//! Gamma conditioning enters through a sinusoidal feature vector, and the
//! self-conditioning input is fused as `z + z W_in + z_sc W_sc` with both
//! fusion matrices zero-initialized, so at initialization the fused input
//! equals `z_gamma` exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::corpus::MarkovProcess;
use crate::embedding::EmbeddingTable;
use crate::error::{CoreError, CoreResult};
use crate::gamma::{coeffs, Gamma};
use crate::mat::{log_softmax, Mat};
use crate::num;
use crate::rng::Rng;

/// Network shape knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub vocab: usize,
    pub dim: usize,
    pub hidden: usize,
    /// Width of the sinusoidal gamma feature vector (even).
    pub gamma_features: usize,
}

impl DenoiserConfig {
    pub fn new(vocab: usize, dim: usize, hidden: usize) -> Self {
        DenoiserConfig {
            vocab,
            dim,
            hidden,
            gamma_features: 16,
        }
    }
}

/// Sinusoidal features of the scalar noise level; frequencies are geometric
/// so both the broad trend and the informative region are resolvable.
pub fn gamma_features(gamma: Gamma, width: usize) -> Vec<f64> {
    let pairs = (width / 2).max(1);
    let mut out = Vec::with_capacity(pairs * 2);
    for j in 0..pairs {
        let t = if pairs == 1 {
            0.5
        } else {
            j as f64 / (pairs - 1) as f64
        };
        // omega from 0.1 to 4.0, geometric.
        let omega = 0.1 * num::exp(t * num::ln(40.0));
        out.push(num::sin(omega * gamma.0));
        out.push(num::cos(omega * gamma.0));
    }
    out
}

/// All trainable denoiser weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub w_in: Mat,
    pub w_sc: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w_gamma: Mat,
    pub w_mix: Mat,
    pub b_mix: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub w_out: Mat,
    pub b_out: Mat,
}

/// Stable field order used by the optimizer, EMA, and checkpoints.
pub const DENOISER_FIELDS: [&str; 11] = [
    "w_in", "w_sc", "w1", "b1", "w_gamma", "w_mix", "b_mix", "w2", "b2", "w_out", "b_out",
];

impl DenoiserParams {
    pub fn init(cfg: &DenoiserConfig, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        let h = cfg.hidden;
        let f = cfg.gamma_features;
        let v = cfg.vocab;
        let scaled = |rng: &mut Rng, rows: usize, cols: usize| {
            let s = 1.0 / num::sqrt(rows as f64);
            rng.normal_mat(rows, cols).scale(s)
        };
        DenoiserParams {
            w_in: Mat::zeros(d, d),
            w_sc: Mat::zeros(d, d),
            w1: scaled(rng, d, h),
            b1: Mat::zeros(1, h),
            w_gamma: scaled(rng, f, h),
            w_mix: scaled(rng, 2 * h, h),
            b_mix: Mat::zeros(1, h),
            w2: scaled(rng, h, h),
            b2: Mat::zeros(1, h),
            w_out: scaled(rng, h, v),
            b_out: Mat::zeros(1, v),
        }
    }

    pub fn fields(&self) -> [&Mat; 11] {
        [
            &self.w_in,
            &self.w_sc,
            &self.w1,
            &self.b1,
            &self.w_gamma,
            &self.w_mix,
            &self.b_mix,
            &self.w2,
            &self.b2,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Mat; 11] {
        [
            &mut self.w_in,
            &mut self.w_sc,
            &mut self.w1,
            &mut self.b1,
            &mut self.w_gamma,
            &mut self.w_mix,
            &mut self.b_mix,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

/// Per-token prediction: logits, the probability simplex rows, their logs,
/// and the synthesized continuous denoiser `z_hat = probs . E`.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub logits: Mat,
    pub log_probs: Mat,
    pub probs: Mat,
    pub z_hat: Mat,
}

impl DenoiserOutput {
    fn from_logits(logits: Mat, table: &EmbeddingTable) -> Self {
        let log_probs = log_softmax(&logits);
        let probs = log_probs.map(num::exp);
        let z_hat = probs.matmul(table.rows());
        DenoiserOutput {
            logits,
            log_probs,
            probs,
            z_hat,
        }
    }
}

/// Handles to a denoiser's weights on a tape, plus the table leaf.
pub struct TapeDenoiser {
    pub vars: [Var; 11],
    pub table: Var,
}

impl TapeDenoiser {
    /// Registers every weight (and the embedding table) as a tape leaf.
    pub fn register(g: &mut Graph, params: &DenoiserParams, table: &EmbeddingTable) -> Self {
        let fields = params.fields();
        let vars = core::array::from_fn(|i| g.leaf(fields[i].clone()));
        let table = g.leaf(table.rows().clone());
        TapeDenoiser { vars, table }
    }

    /// Differentiable forward pass over a batch of `batch` sequences of
    /// length `seq_len`, flattened to `batch*seq_len` rows. `gammas` holds
    /// one noise level per sequence; `z_sc` is consumed as a constant
    /// (already stop-gradiented by the caller). Returns the logits node.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        cfg: &DenoiserConfig,
        z_gamma: Var,
        gammas: &[Gamma],
        seq_len: usize,
        z_sc: Var,
        bias_ramp: f64,
    ) -> CoreResult<Var> {
        let batch = gammas.len();
        if g.value(z_gamma).rows() != batch * seq_len {
            return Err(CoreError::InvalidInput(format!(
                "forward expects {} rows, got {}",
                batch * seq_len,
                g.value(z_gamma).rows()
            )));
        }
        let [w_in, w_sc, w1, b1, w_gamma, w_mix, b_mix, w2, b2, w_out, b_out] = self.vars;

        // Input fusion: z + z W_in + z_sc W_sc.
        let skip_in = g.matmul(z_gamma, w_in);
        let skip_sc = g.matmul(z_sc, w_sc);
        let fused = g.add(z_gamma, skip_in);
        let fused = g.add(fused, skip_sc);

        // Per-token features plus per-sequence gamma conditioning.
        let mut gf = Mat::zeros(batch, cfg.gamma_features);
        for (i, &gm) in gammas.iter().enumerate() {
            gf.row_mut(i)
                .copy_from_slice(&gamma_features(gm, cfg.gamma_features));
        }
        let gf = g.constant(gf);
        let gf_proj = g.matmul(gf, w_gamma);
        let gf_rows = g.repeat_rows(gf_proj, seq_len);
        let pre1 = g.matmul(fused, w1);
        let pre1 = g.add_row_vec(pre1, b1);
        let pre1 = g.add(pre1, gf_rows);
        let h1 = g.tanh(pre1);

        // Mean-pool context mixing.
        let pooled = g.mean_pool_rows(h1, seq_len);
        let ctx = g.repeat_rows(pooled, seq_len);
        let cat = g.concat_cols(h1, ctx);
        let pre_mix = g.matmul(cat, w_mix);
        let pre_mix = g.add_row_vec(pre_mix, b_mix);
        let h_mix = g.tanh(pre_mix);

        let pre2 = g.matmul(h_mix, w2);
        let pre2 = g.add_row_vec(pre2, b2);
        let h2 = g.tanh(pre2);

        let head = g.matmul(h2, w_out);
        let head = g.add_row_vec(head, b_out);

        // Tokenwise bias r * (alpha/sigma^2) e_k . z, per sequence.
        let mut factors = Vec::with_capacity(batch * seq_len);
        for &gm in gammas {
            let c = coeffs(gm)?;
            let f = bias_ramp * c.alpha / (c.sigma * c.sigma);
            for _ in 0..seq_len {
                factors.push(f);
            }
        }
        let raw_bias = g.matmul_nt(z_gamma, self.table);
        let bias = g.row_scale(raw_bias, factors);
        Ok(g.add(head, bias))
    }
}

/// Inference-mode forward pass; mirrors [`TapeDenoiser::forward`] operation
/// for operation so both produce bit-identical logits.
#[allow(clippy::too_many_arguments)]
pub fn forward_infer(
    params: &DenoiserParams,
    table: &EmbeddingTable,
    cfg: &DenoiserConfig,
    z_gamma: &Mat,
    gammas: &[Gamma],
    seq_len: usize,
    z_sc: &Mat,
    bias_ramp: f64,
) -> CoreResult<DenoiserOutput> {
    let batch = gammas.len();
    if z_gamma.rows() != batch * seq_len {
        return Err(CoreError::InvalidInput(format!(
            "forward expects {} rows, got {}",
            batch * seq_len,
            z_gamma.rows()
        )));
    }
    if z_sc.shape() != z_gamma.shape() {
        return Err(CoreError::InvalidInput(format!(
            "self-conditioning shape {:?} differs from state {:?}",
            z_sc.shape(),
            z_gamma.shape()
        )));
    }

    let skip_in = z_gamma.matmul(&params.w_in);
    let skip_sc = z_sc.matmul(&params.w_sc);
    let fused = z_gamma.add(&skip_in).add(&skip_sc);

    let mut gf = Mat::zeros(batch, cfg.gamma_features);
    for (i, &gm) in gammas.iter().enumerate() {
        gf.row_mut(i)
            .copy_from_slice(&gamma_features(gm, cfg.gamma_features));
    }
    let gf_proj = gf.matmul(&params.w_gamma);
    let mut pre1 = fused.matmul(&params.w1);
    for i in 0..pre1.rows() {
        for (x, &b) in pre1.row_mut(i).iter_mut().zip(params.b1.row(0)) {
            *x += b;
        }
    }
    let mut gf_rows = Mat::zeros(batch * seq_len, gf_proj.cols());
    for i in 0..batch {
        for k in 0..seq_len {
            gf_rows
                .row_mut(i * seq_len + k)
                .copy_from_slice(gf_proj.row(i));
        }
    }
    let pre1 = pre1.add(&gf_rows);
    let h1 = pre1.map(num::tanh);

    let mut pooled = Mat::zeros(batch, h1.cols());
    let inv = 1.0 / seq_len as f64;
    for i in 0..batch {
        for k in 0..seq_len {
            let src = h1.row(i * seq_len + k);
            for (o, &x) in pooled.row_mut(i).iter_mut().zip(src) {
                *o += x * inv;
            }
        }
    }
    let mut cat = Mat::zeros(batch * seq_len, 2 * h1.cols());
    for i in 0..batch * seq_len {
        cat.row_mut(i)[..h1.cols()].copy_from_slice(h1.row(i));
        cat.row_mut(i)[h1.cols()..].copy_from_slice(pooled.row(i / seq_len));
    }
    let mut pre_mix = cat.matmul(&params.w_mix);
    for i in 0..pre_mix.rows() {
        for (x, &b) in pre_mix.row_mut(i).iter_mut().zip(params.b_mix.row(0)) {
            *x += b;
        }
    }
    let h_mix = pre_mix.map(num::tanh);

    let mut pre2 = h_mix.matmul(&params.w2);
    for i in 0..pre2.rows() {
        for (x, &b) in pre2.row_mut(i).iter_mut().zip(params.b2.row(0)) {
            *x += b;
        }
    }
    let h2 = pre2.map(num::tanh);

    let mut logits = h2.matmul(&params.w_out);
    for i in 0..logits.rows() {
        for (x, &b) in logits.row_mut(i).iter_mut().zip(params.b_out.row(0)) {
            *x += b;
        }
    }
    let mut bias = z_gamma.matmul_nt(table.rows());
    for (i, &gm) in gammas.iter().enumerate() {
        let c = coeffs(gm)?;
        let f = bias_ramp * c.alpha / (c.sigma * c.sigma);
        for k in 0..seq_len {
            for x in bias.row_mut(i * seq_len + k) {
                *x *= f;
            }
        }
    }
    let logits = logits.add(&bias);
    Ok(DenoiserOutput::from_logits(logits, table))
}

/// Anything that maps a noisy state to per-token probabilities and the
/// synthesized denoised embedding. `z` is one sequence (L×D rows).
pub trait Denoise {
    fn vocab(&self) -> usize;
    fn dim(&self) -> usize;
    fn predict(&self, z: &Mat, gamma: Gamma, z_sc: &Mat) -> CoreResult<DenoiserOutput>;

    fn z_hat(&self, z: &Mat, gamma: Gamma, z_sc: &Mat) -> CoreResult<Mat> {
        Ok(self.predict(z, gamma, z_sc)?.z_hat)
    }
}

/// The trained network as a [`Denoise`] instance (single-sequence view).
pub struct NeuralDenoiser<'a> {
    pub params: &'a DenoiserParams,
    pub table: &'a EmbeddingTable,
    pub cfg: &'a DenoiserConfig,
    pub bias_ramp: f64,
}

impl Denoise for NeuralDenoiser<'_> {
    fn vocab(&self) -> usize {
        self.cfg.vocab
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn predict(&self, z: &Mat, gamma: Gamma, z_sc: &Mat) -> CoreResult<DenoiserOutput> {
        forward_infer(
            self.params,
            self.table,
            self.cfg,
            z,
            &[gamma],
            z.rows(),
            z_sc,
            self.bias_ramp,
        )
    }
}

/// Context-free Bayes posterior for one noisy row under a token prior:
/// `softmax_k [ ln prior_k + (alpha/sigma^2) e_k . z - alpha^2 ||e_k||^2 / (2 sigma^2) ]`.
pub fn bayes_posterior_contextfree(
    z_row: &[f64],
    gamma: Gamma,
    table: &EmbeddingTable,
    prior: &[f64],
) -> CoreResult<Vec<f64>> {
    if prior.len() != table.vocab() {
        return Err(CoreError::InvalidInput(format!(
            "prior has {} entries for vocab {}",
            prior.len(),
            table.vocab()
        )));
    }
    if z_row.len() != table.dim() {
        return Err(CoreError::InvalidInput(format!(
            "state width {} does not match embedding dim {}",
            z_row.len(),
            table.dim()
        )));
    }
    let c = coeffs(gamma)?;
    let snr = c.alpha / (c.sigma * c.sigma);
    let quad = c.alpha * c.alpha / (2.0 * c.sigma * c.sigma);
    let mut logits: Vec<f64> = (0..table.vocab())
        .map(|k| {
            let e = table.row(k);
            let dot: f64 = e.iter().zip(z_row).map(|(&a, &b)| a * b).sum();
            let norm_sq: f64 = e.iter().map(|&a| a * a).sum();
            (if prior[k] > 0.0 {
                num::ln(prior[k])
            } else {
                f64::NEG_INFINITY
            }) + snr * dot
                - quad * norm_sq
        })
        .collect();
    crate::mat::log_softmax_row(&mut logits);
    Ok(logits.into_iter().map(num::exp).collect())
}

/// Exact sequence posterior marginals by exhaustive enumeration over all
/// `V^L` sequences, weighted by process probability times the Gaussian
/// likelihood of the observed state. Test oracle; capped at `V^L <= 1e5`.
pub fn bayes_posterior_sequence(
    z: &Mat,
    gamma: Gamma,
    table: &EmbeddingTable,
    process: &MarkovProcess,
) -> CoreResult<Mat> {
    let v = table.vocab();
    let l = z.rows();
    let mut total = 1.0_f64;
    for _ in 0..l {
        total *= v as f64;
    }
    if total > 1e5 {
        return Err(CoreError::Capacity(format!(
            "V^L = {total} exceeds the enumeration cap of 1e5"
        )));
    }
    let c = coeffs(gamma)?;
    let snr = c.alpha / (c.sigma * c.sigma);
    let quad = c.alpha * c.alpha / (2.0 * c.sigma * c.sigma);

    let count = total as usize;
    let mut log_w = Vec::with_capacity(count);
    let mut seq = vec![0usize; l];
    let mut max_lw = f64::NEG_INFINITY;
    for idx in 0..count {
        let mut rem = idx;
        for s in seq.iter_mut() {
            *s = rem % v;
            rem /= v;
        }
        let mut lw = process.log_prob(&seq);
        for (i, &tok) in seq.iter().enumerate() {
            let e = table.row(tok);
            let dot: f64 = e.iter().zip(z.row(i)).map(|(&a, &b)| a * b).sum();
            let norm_sq: f64 = e.iter().map(|&a| a * a).sum();
            lw += snr * dot - quad * norm_sq;
        }
        if lw > max_lw {
            max_lw = lw;
        }
        log_w.push(lw);
    }
    let mut marginals = Mat::zeros(l, v);
    let mut total_w = 0.0;
    for (idx, &lw) in log_w.iter().enumerate() {
        let w = num::exp(lw - max_lw);
        total_w += w;
        let mut rem = idx;
        for i in 0..l {
            let tok = rem % v;
            rem /= v;
            marginals.set(i, tok, marginals.at(i, tok) + w);
        }
    }
    marginals.scale_in_place(1.0 / total_w);
    Ok(marginals)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|&x| num::exp(x - max)).sum();
    max + num::ln(sum)
}

/// Exact sequence posterior marginals for an order-0 or order-1 process by
/// the forward-backward recursion; scales as `O(L V^2)` so it can serve as
/// the Bayes-oracle denoiser on sequence lengths enumeration cannot reach.
pub fn markov_posterior_marginals(
    z: &Mat,
    gamma: Gamma,
    table: &EmbeddingTable,
    process: &MarkovProcess,
) -> CoreResult<Mat> {
    let v = table.vocab();
    let l = z.rows();
    let c = coeffs(gamma)?;
    let snr = c.alpha / (c.sigma * c.sigma);
    let quad = c.alpha * c.alpha / (2.0 * c.sigma * c.sigma);

    let mut emit = Mat::zeros(l, v);
    for i in 0..l {
        for k in 0..v {
            let e = table.row(k);
            let dot: f64 = e.iter().zip(z.row(i)).map(|(&a, &b)| a * b).sum();
            let norm_sq: f64 = e.iter().map(|&a| a * a).sum();
            emit.set(i, k, snr * dot - quad * norm_sq);
        }
    }
    let log_init: Vec<f64> = process
        .initial()
        .iter()
        .map(|&p| {
            if p > 0.0 {
                num::ln(p)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();

    if process.order() == 0 || l == 1 {
        let mut out = Mat::zeros(l, v);
        for i in 0..l {
            let mut row: Vec<f64> = (0..v).map(|k| log_init[k] + emit.at(i, k)).collect();
            crate::mat::log_softmax_row(&mut row);
            for k in 0..v {
                out.set(i, k, num::exp(row[k]));
            }
        }
        return Ok(out);
    }

    let trans = process
        .transition()
        .ok_or_else(|| CoreError::InvalidInput("order-1 process lacks a transition".into()))?;
    let log_t: Vec<Vec<f64>> = (0..v)
        .map(|j| {
            (0..v)
                .map(|k| {
                    let p = trans.at(j, k);
                    if p > 0.0 {
                        num::ln(p)
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect()
        })
        .collect();

    let mut fwd = Mat::zeros(l, v);
    for k in 0..v {
        fwd.set(0, k, log_init[k] + emit.at(0, k));
    }
    let mut scratch = vec![0.0; v];
    for i in 1..l {
        for k in 0..v {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = fwd.at(i - 1, j) + log_t[j][k];
            }
            fwd.set(i, k, log_sum_exp(&scratch) + emit.at(i, k));
        }
    }
    let mut bwd = Mat::zeros(l, v);
    for i in (0..l - 1).rev() {
        for j in 0..v {
            for (k, s) in scratch.iter_mut().enumerate() {
                *s = log_t[j][k] + emit.at(i + 1, k) + bwd.at(i + 1, k);
            }
            bwd.set(i, j, log_sum_exp(&scratch));
        }
    }
    let mut out = Mat::zeros(l, v);
    for i in 0..l {
        let mut row: Vec<f64> = (0..v).map(|k| fwd.at(i, k) + bwd.at(i, k)).collect();
        crate::mat::log_softmax_row(&mut row);
        for k in 0..v {
            out.set(i, k, num::exp(row[k]));
        }
    }
    Ok(out)
}

/// The posterior oracle as a [`Denoise`] instance; exact for order-0 and
/// order-1 processes via forward-backward. Ignores self-conditioning.
pub struct BayesDenoiser<'a> {
    pub table: &'a EmbeddingTable,
    pub process: &'a MarkovProcess,
}

impl Denoise for BayesDenoiser<'_> {
    fn vocab(&self) -> usize {
        self.table.vocab()
    }

    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn predict(&self, z: &Mat, gamma: Gamma, _z_sc: &Mat) -> CoreResult<DenoiserOutput> {
        let probs = markov_posterior_marginals(z, gamma, self.table, self.process)?;
        let log_probs = probs.map(|p| {
            if p > 0.0 {
                num::ln(p)
            } else {
                f64::NEG_INFINITY
            }
        });
        let z_hat = probs.matmul(self.table.rows());
        // Posterior probabilities are their own softmax fixed point; reuse
        // the log-probabilities as logits.
        Ok(DenoiserOutput {
            logits: log_probs.clone(),
            log_probs,
            probs,
            z_hat,
        })
    }
}
