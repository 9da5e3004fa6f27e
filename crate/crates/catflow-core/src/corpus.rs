//! Synthetic token processes with known statistics, evaluation metrics, and
//! the loss-geometry profiler. These stand in for real corpora so every
//! number the artifact reports can be checked against an exact reference.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::denoiser::Denoise;
use crate::embedding::EmbeddingTable;
use crate::error::{CoreError, CoreResult};
use crate::gamma::{noise, Gamma};
use crate::mat::Mat;
use crate::num;
use crate::rng::Rng;

const STOCHASTIC_TOL: f64 = 1e-9;

/// An order-0 (i.i.d.) or order-1 Markov token process.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovProcess {
    order: u8,
    initial: Vec<f64>,
    transition: Option<Mat>,
}

fn check_distribution(name: &str, p: &[f64]) -> CoreResult<()> {
    let mut sum = 0.0;
    for &x in p {
        if x < 0.0 {
            return Err(CoreError::InvalidInput(format!(
                "{name} has negative probability {x}"
            )));
        }
        sum += x;
    }
    if num::abs(sum - 1.0) > STOCHASTIC_TOL {
        return Err(CoreError::InvalidInput(format!(
            "{name} sums to {sum}, not 1"
        )));
    }
    Ok(())
}

impl MarkovProcess {
    pub fn iid(dist: Vec<f64>) -> CoreResult<Self> {
        check_distribution("initial distribution", &dist)?;
        Ok(MarkovProcess {
            order: 0,
            initial: dist,
            transition: None,
        })
    }

    pub fn uniform_iid(vocab: usize) -> Self {
        MarkovProcess {
            order: 0,
            initial: vec![1.0 / vocab as f64; vocab],
            transition: None,
        }
    }

    pub fn order1(initial: Vec<f64>, transition: Mat) -> CoreResult<Self> {
        check_distribution("initial distribution", &initial)?;
        if transition.rows() != initial.len() || transition.cols() != initial.len() {
            return Err(CoreError::InvalidInput(format!(
                "transition is {:?}, expected {0}x{0} for vocab {0}",
                initial.len()
            )));
        }
        for r in 0..transition.rows() {
            check_distribution("transition row", transition.row(r))?;
        }
        let process = MarkovProcess {
            order: 1,
            initial,
            transition: Some(transition),
        };
        if !process.is_irreducible() {
            return Err(CoreError::InvalidInput(
                "transition graph is not irreducible; no stationary distribution".into(),
            ));
        }
        Ok(process)
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    pub fn vocab(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition(&self) -> Option<&Mat> {
        self.transition.as_ref()
    }

    /// Reachability check on positive-probability edges, both directions.
    fn is_irreducible(&self) -> bool {
        let Some(t) = &self.transition else {
            return true;
        };
        let v = self.vocab();
        let reach_from = |start: usize, forward: bool| -> usize {
            let mut seen = vec![false; v];
            let mut stack = vec![start];
            seen[start] = true;
            let mut count = 1;
            while let Some(i) = stack.pop() {
                for j in 0..v {
                    let p = if forward { t.at(i, j) } else { t.at(j, i) };
                    if p > 0.0 && !seen[j] {
                        seen[j] = true;
                        count += 1;
                        stack.push(j);
                    }
                }
            }
            count
        };
        reach_from(0, true) == v && reach_from(0, false) == v
    }

    /// Stationary distribution by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        match &self.transition {
            None => self.initial.clone(),
            Some(t) => {
                let v = self.vocab();
                let mut pi = vec![1.0 / v as f64; v];
                for _ in 0..20_000 {
                    let mut next = vec![0.0; v];
                    for (i, &p) in pi.iter().enumerate() {
                        for (j, n) in next.iter_mut().enumerate() {
                            *n += p * t.at(i, j);
                        }
                    }
                    let mut delta = 0.0;
                    for (a, b) in next.iter().zip(pi.iter()) {
                        delta += num::abs(a - b);
                    }
                    pi = next;
                    if delta < 1e-14 {
                        break;
                    }
                }
                pi
            }
        }
    }

    /// Entropy rate in nats per token, with respect to the stationary law.
    pub fn entropy_rate(&self) -> f64 {
        match &self.transition {
            None => -self
                .initial
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * num::ln(p))
                .sum::<f64>(),
            Some(t) => {
                let pi = self.stationary();
                let mut h = 0.0;
                for (i, &w) in pi.iter().enumerate() {
                    for j in 0..self.vocab() {
                        let p = t.at(i, j);
                        if p > 0.0 {
                            h -= w * p * num::ln(p);
                        }
                    }
                }
                h
            }
        }
    }

    /// Log-probability of a full sequence under the process.
    pub fn log_prob(&self, tokens: &[usize]) -> f64 {
        if tokens.is_empty() {
            return 0.0;
        }
        let ln_or_neg_inf = |p: f64| {
            if p > 0.0 {
                num::ln(p)
            } else {
                f64::NEG_INFINITY
            }
        };
        let mut lp = ln_or_neg_inf(self.initial[tokens[0]]);
        match &self.transition {
            None => {
                for &t in &tokens[1..] {
                    lp += ln_or_neg_inf(self.initial[t]);
                }
            }
            Some(tr) => {
                for w in tokens.windows(2) {
                    lp += ln_or_neg_inf(tr.at(w[0], w[1]));
                }
            }
        }
        lp
    }

    pub fn sample_sequence(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut current = rng.categorical(&self.initial);
        out.push(current);
        for _ in 1..len {
            current = match &self.transition {
                None => rng.categorical(&self.initial),
                Some(t) => rng.categorical(t.row(current)),
            };
            out.push(current);
        }
        out
    }

    /// Exact samples from the process.
    pub fn generate(&self, len: usize, count: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        (0..count).map(|_| self.sample_sequence(len, rng)).collect()
    }
}

/// `-(1/L) ln P(tokens)` in nats per token; the exponential of this is the
/// toy generative perplexity. Zero-probability transitions propagate as
/// `+inf` rather than an error.
pub fn true_nll(process: &MarkovProcess, tokens: &[usize]) -> CoreResult<f64> {
    if tokens.is_empty() {
        return Err(CoreError::InvalidInput(
            "true_nll needs a nonempty sequence".into(),
        ));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= process.vocab()) {
        return Err(CoreError::InvalidInput(format!(
            "token id {bad} out of range for vocab {}",
            process.vocab()
        )));
    }
    Ok(-process.log_prob(tokens) / tokens.len() as f64)
}

/// Entropy of the within-sequence empirical unigram distribution
/// (counts / L), in nats.
pub fn sequence_entropy(tokens: &[usize]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let max = tokens.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    for &t in tokens {
        counts[t] += 1;
    }
    let n = tokens.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * num::ln(p)
        })
        .sum()
}

/// Sources of training batches; all randomness flows through the supplied
/// generator so checkpointed runs resume bit-identically.
pub trait BatchSource {
    fn vocab(&self) -> usize;
    fn draw(&self, batch: usize, seq_len: usize, rng: &mut Rng) -> Vec<Vec<usize>>;
}

impl BatchSource for MarkovProcess {
    fn vocab(&self) -> usize {
        MarkovProcess::vocab(self)
    }

    fn draw(&self, batch: usize, seq_len: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        self.generate(seq_len, batch, rng)
    }
}

/// Batches drawn uniformly from a fixed in-memory corpus.
pub struct CorpusSource {
    pub vocab: usize,
    pub sequences: Vec<Vec<usize>>,
}

impl BatchSource for CorpusSource {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn draw(&self, batch: usize, seq_len: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        (0..batch)
            .map(|_| {
                let idx = (rng.next_u64() % self.sequences.len() as u64) as usize;
                let seq = &self.sequences[idx];
                assert!(
                    seq.len() >= seq_len,
                    "corpus sequence shorter than requested length"
                );
                seq[..seq_len].to_vec()
            })
            .collect()
    }
}

/// One Monte-Carlo point of the loss-geometry profile.
#[derive(Debug, Clone, Copy)]
pub struct ProfilePoint {
    pub gamma: f64,
    pub ce_mean: f64,
    pub ce_se: f64,
}

/// Monte-Carlo cross-entropy of a denoiser at each grid noise level, with
/// standard errors. Self-conditioning is fed zeros: the profile measures the
/// single-pass loss geometry.
pub fn loss_profile(
    den: &dyn Denoise,
    table: &EmbeddingTable,
    grid: &[Gamma],
    eval_set: &[Vec<usize>],
    draws_per_seq: usize,
    rng: &mut Rng,
) -> CoreResult<Vec<ProfilePoint>> {
    if eval_set.is_empty() || draws_per_seq == 0 {
        return Err(CoreError::InvalidInput(
            "loss profile needs sequences and at least one draw".into(),
        ));
    }
    let mut out = Vec::with_capacity(grid.len());
    for &g in grid {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut n = 0.0;
        for seq in eval_set {
            let z = table.embed(seq)?;
            for _ in 0..draws_per_seq {
                let eps = rng.normal_mat(z.rows(), z.cols());
                let zg = noise(&z, g, &eps)?;
                let zero_sc = Mat::zeros(z.rows(), z.cols());
                let pred = den.predict(&zg.values, g, &zero_sc)?;
                let mut ce = 0.0;
                for (i, &t) in seq.iter().enumerate() {
                    ce -= pred.log_probs.at(i, t);
                }
                ce /= seq.len() as f64;
                sum += ce;
                sum_sq += ce * ce;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        out.push(ProfilePoint {
            gamma: g.0,
            ce_mean: mean,
            ce_se: num::sqrt(var / n),
        });
    }
    Ok(out)
}

/// Central finite differences of the moving-average-smoothed profile.
/// Returns `(gamma, dH/dgamma)` for the interior grid points.
pub fn profile_derivative(
    points: &[(f64, f64)],
    smooth_window: usize,
) -> CoreResult<Vec<(f64, f64)>> {
    if points.len() < 3 {
        return Err(CoreError::InvalidInput(format!(
            "profile derivative needs at least 3 points, got {}",
            points.len()
        )));
    }
    let half = smooth_window.max(1) / 2;
    let n = points.len();
    // Windows shrink symmetrically at the edges so smoothing stays unbiased
    // on linear segments.
    let smoothed: Vec<f64> = (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            points[i - h..=i + h].iter().map(|p| p.1).sum::<f64>() / (2 * h + 1) as f64
        })
        .collect();
    Ok((1..n - 1)
        .map(|i| {
            let dg = points[i + 1].0 - points[i - 1].0;
            ((points[i].0), (smoothed[i + 1] - smoothed[i - 1]) / dg)
        })
        .collect())
}

/// A named toy task: process plus embedding geometry.
#[derive(Debug, Clone)]
pub struct TaskPreset {
    pub name: &'static str,
    pub vocab: usize,
    pub dim: usize,
    pub seq_len: usize,
    pub process: MarkovProcess,
}

/// Fixed referents used throughout evaluation: `iid8`, `markov4`,
/// `markov16`.
pub fn preset(name: &str) -> Option<TaskPreset> {
    match name {
        "iid8" => Some(TaskPreset {
            name: "iid8",
            vocab: 8,
            dim: 4,
            seq_len: 1,
            process: MarkovProcess::uniform_iid(8),
        }),
        "markov4" => {
            let trans = Mat::from_vec(
                4,
                4,
                vec![
                    0.55, 0.25, 0.12, 0.08, //
                    0.10, 0.60, 0.20, 0.10, //
                    0.05, 0.15, 0.55, 0.25, //
                    0.30, 0.05, 0.15, 0.50,
                ],
            );
            let probe = MarkovProcess {
                order: 1,
                initial: vec![0.25; 4],
                transition: Some(trans.clone()),
            };
            let process = MarkovProcess::order1(probe.stationary(), trans)
                .expect("markov4 preset is irreducible");
            Some(TaskPreset {
                name: "markov4",
                vocab: 4,
                dim: 4,
                seq_len: 16,
                process,
            })
        }
        "markov16" => {
            let v = 16;
            let mut rng = Rng::seed_from(0xC0FFEE);
            let mut trans = Mat::zeros(v, v);
            for i in 0..v {
                let mut total = 0.0;
                for j in 0..v {
                    let w = num::exp(1.5 * rng.normal()) + if i == j { 2.0 } else { 0.0 };
                    trans.set(i, j, w);
                    total += w;
                }
                for j in 0..v {
                    trans.set(i, j, trans.at(i, j) / total);
                }
            }
            let probe = MarkovProcess {
                order: 1,
                initial: vec![1.0 / v as f64; v],
                transition: Some(trans.clone()),
            };
            let process = MarkovProcess::order1(probe.stationary(), trans)
                .expect("markov16 preset is irreducible");
            Some(TaskPreset {
                name: "markov16",
                vocab: 16,
                dim: 8,
                seq_len: 32,
                process,
            })
        }
        _ => None,
    }
}

pub fn preset_names() -> [&'static str; 3] {
    ["iid8", "markov4", "markov16"]
}

/// Serializes a corpus in the shared line format: a `# vocab=V order=k
/// seed=s` header, then one space-separated id sequence per line.
pub fn format_corpus(vocab: usize, order: u8, seed: u64, sequences: &[Vec<usize>]) -> String {
    let mut out = format!("# vocab={vocab} order={order} seed={seed}\n");
    for seq in sequences {
        let mut first = true;
        for &t in seq {
            if !first {
                out.push(' ');
            }
            out.push_str(&format!("{t}"));
            first = false;
        }
        out.push('\n');
    }
    out
}

/// Parses the corpus line format; returns `(vocab, sequences)`.
pub fn parse_corpus(text: &str) -> CoreResult<(usize, Vec<Vec<usize>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::InvalidInput("empty corpus file".into()))?;
    let mut vocab = None;
    if let Some(rest) = header.strip_prefix('#') {
        for field in rest.split_whitespace() {
            if let Some(v) = field.strip_prefix("vocab=") {
                vocab = v.parse::<usize>().ok();
            }
        }
    }
    let vocab = vocab.ok_or_else(|| {
        CoreError::InvalidInput("corpus header must declare `# vocab=V order=k seed=s`".into())
    })?;
    let mut sequences = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut seq = Vec::new();
        for tok in line.split_whitespace() {
            let id: usize = tok.parse().map_err(|_| {
                CoreError::InvalidInput(format!("line {}: bad token `{tok}`", lineno + 2))
            })?;
            if id >= vocab {
                return Err(CoreError::InvalidInput(format!(
                    "line {}: token {id} out of range for vocab {vocab}",
                    lineno + 2
                )));
            }
            seq.push(id);
        }
        sequences.push(seq);
    }
    if sequences.is_empty() {
        return Err(CoreError::InvalidInput("corpus has no sequences".into()));
    }
    Ok((vocab, sequences))
}
