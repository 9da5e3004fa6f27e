//! Command implementations shared by the binary and the test suites.

use std::path::{Path, PathBuf};

use catflow_core::corpus::{
    self, loss_profile, profile_derivative, sequence_entropy, true_nll, BatchSource, MarkovProcess,
};
use catflow_core::denoiser::{BayesDenoiser, Denoise, NeuralDenoiser};
use catflow_core::gamma::{t_ot_of_gamma, Gamma};
use catflow_core::likelihood::{elbo, DivergenceMode, ElboEstimate};
use catflow_core::rng::Rng;
use catflow_core::sampler::sample;
use catflow_core::scheduler;
use catflow_core::trainer::{train_step, StepReport, TrainState};

use crate::checkpoint::{self, EvalBundle};
use crate::config::{DivKind, ObjectiveKind, RunConfig, TaskSource};
use crate::report::{num, CsvFile};
use crate::CliError;

/// Deterministic per-item seed derivation, independent of worker count.
fn item_seed(base: u64, index: u64) -> u64 {
    base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5851_F42D_4C95_7F2D
}

/// Runs `f` over the items on up to `workers` threads; output order matches
/// input order regardless of scheduling.
pub fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync,
{
    let workers = workers.max(1);
    if workers == 1 || items.len() <= 1 {
        return items
            .into_iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect();
    }
    let mut indexed: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let chunk = indexed.len().div_ceil(workers);
    let mut results: Vec<(usize, R)> = Vec::with_capacity(indexed.len());
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        while !indexed.is_empty() {
            let take = chunk.min(indexed.len());
            let batch: Vec<(usize, T)> = indexed.drain(..take).collect();
            let f = &f;
            handles.push(scope.spawn(move || {
                batch
                    .into_iter()
                    .map(|(i, t)| (i, f(i, t)))
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            results.extend(h.join().expect("worker panicked"));
        }
    });
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, r)| r).collect()
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub config: RunConfig,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub last_report: Option<StepReport>,
}

/// Trains to completion with periodic checkpoints and a CSV log; the final
/// checkpoint (including EMA weights) lands at `<out>/final.ckpt`.
pub fn run_train(rc: &RunConfig, quiet: bool) -> Result<TrainOutcome, CliError> {
    let data = rc.task_data()?;
    let cfg = rc.train_config()?;
    let mut state = TrainState::new(cfg)?;
    let source: &dyn BatchSource = match &data.source {
        TaskSource::Preset(p) => &p.process,
        TaskSource::Corpus(c) => c,
    };

    std::fs::create_dir_all(&rc.out)?;
    std::fs::write(rc.out.join("config.json"), rc.to_json())?;
    let log_path = rc.out.join("train_log.csv");
    let mut log = CsvFile::create(
        &log_path,
        rc.hash(),
        &[
            "step",
            "ce",
            "scheduler_loss",
            "r",
            "h_inf",
            "mu",
            "beta",
            "grad_norm",
        ],
    )?;

    let mut last = None;
    for step in 0..rc.steps {
        let report = train_step(&mut state, source)?;
        let is_log_step = rc.log_every > 0 && (step % rc.log_every == 0 || step + 1 == rc.steps);
        if is_log_step {
            log.row(&[
                report.step.to_string(),
                num(report.ce),
                num(report.scheduler_loss),
                num(report.r),
                num(report.h_inf),
                num(report.mu),
                num(report.beta),
                num(report.grad_norm),
            ])?;
            if !quiet && (rc.steps <= 20 || step % (rc.log_every * 10) == 0) {
                eprintln!(
                    "step {:>7}  ce {:.4}  sched {:.5}  r {:.3}  H\u{221e} {:.3}",
                    report.step, report.ce, report.scheduler_loss, report.r, report.h_inf
                );
            }
        }
        if rc.ckpt_every > 0 && (step + 1) % rc.ckpt_every == 0 && step + 1 != rc.steps {
            checkpoint::save(
                &state,
                rc,
                &rc.out.join(format!("ckpt_{:08}.ckpt", step + 1)),
            )?;
        }
        last = Some(report);
    }
    log.finish()?;
    let final_checkpoint = rc.out.join("final.ckpt");
    checkpoint::save(&state, rc, &final_checkpoint)?;
    Ok(TrainOutcome {
        state,
        config: rc.clone(),
        final_checkpoint,
        log_path,
        last_report: last,
    })
}

pub struct SampleOpts {
    pub count: usize,
    pub steps: usize,
    pub seed: u64,
    pub workers: usize,
    pub trajectory: Option<PathBuf>,
    pub config_hash: u64,
}

/// Draws samples from a checkpoint's EMA weights. Returns the token rows;
/// the caller decides where to print them.
pub fn run_sample(bundle: &EvalBundle, opts: &SampleOpts) -> Result<Vec<Vec<usize>>, CliError> {
    let den = NeuralDenoiser {
        params: &bundle.den,
        table: &bundle.table,
        cfg: &bundle.cfg,
        bias_ramp: bundle.bias_ramp,
    };
    let seq_len = bundle.seq_len;
    if let Some(path) = &opts.trajectory {
        // Trajectory capture for the first sample only.
        let mut rng = Rng::seed_from(item_seed(opts.seed, 0));
        let (_, traj) = sample(&den, opts.steps, seq_len, &mut rng, &bundle.sched, true)?;
        let traj = traj.expect("capture requested");
        let mut csv = CsvFile::create(path, opts.config_hash, &["step", "gamma", "mean_norm"])?;
        for (k, state) in traj.states.iter().enumerate() {
            let mean_norm = state.norm() / (state.rows() as f64).sqrt();
            csv.row(&[k.to_string(), num(traj.grid[k].0), num(mean_norm)])?;
        }
        csv.finish()?;
    }
    let items: Vec<u64> = (0..opts.count as u64).collect();
    let rows = parallel_map(items, opts.workers, |_, i| {
        let mut rng = Rng::seed_from(item_seed(opts.seed, i));
        sample(&den, opts.steps, seq_len, &mut rng, &bundle.sched, false).map(|(tokens, _)| tokens)
    });
    rows.into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::from)
}

pub struct EvalOpts {
    pub steps: usize,
    pub draws: usize,
    pub div: DivKind,
    pub probes: usize,
    pub seed: u64,
    pub workers: usize,
}

/// Per-sequence likelihood bounds; rows land in a CSV with one line per
/// sequence plus the derived per-token NLL and perplexity.
pub fn run_eval_nll(
    bundle: &EvalBundle,
    sequences: &[Vec<usize>],
    opts: &EvalOpts,
    csv_path: Option<&Path>,
    config_hash: u64,
) -> Result<Vec<ElboEstimate>, CliError> {
    let den = NeuralDenoiser {
        params: &bundle.den,
        table: &bundle.table,
        cfg: &bundle.cfg,
        bias_ramp: bundle.bias_ramp,
    };
    let mode = match opts.div {
        DivKind::Exact => DivergenceMode::Exact,
        DivKind::Hutchinson => DivergenceMode::Hutchinson(opts.probes),
    };
    let items: Vec<Vec<usize>> = sequences.to_vec();
    let estimates = parallel_map(items, opts.workers, |i, seq| {
        let mut rng = Rng::seed_from(item_seed(opts.seed, i as u64));
        elbo(
            &seq,
            &den,
            &bundle.table,
            &bundle.sched,
            opts.steps,
            mode,
            opts.draws,
            &mut rng,
        )
    });
    let estimates: Vec<ElboEstimate> = estimates
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::from)?;

    if let Some(path) = csv_path {
        let mut csv = CsvFile::create(
            path,
            config_hash,
            &[
                "seq",
                "constant",
                "prior",
                "decoder",
                "divergence",
                "total",
                "per_token_nll",
                "ppl",
                "std_err",
            ],
        )?;
        for (i, est) in estimates.iter().enumerate() {
            csv.row(&[
                i.to_string(),
                num(est.constant),
                num(est.prior_term),
                num(est.decoder_term),
                num(est.divergence_term),
                num(est.total),
                num(est.per_token_nll),
                num(est.ppl),
                num(est.std_err),
            ])?;
        }
        csv.finish()?;
    }
    Ok(estimates)
}

pub struct ProfileOpts {
    pub points: usize,
    pub draws: usize,
    pub eval_seqs: usize,
    pub oracle: bool,
    pub seed: u64,
}

pub struct ProfileRow {
    pub gamma: f64,
    pub t_ot: f64,
    pub h_model: f64,
    pub density: f64,
    pub ce_mean: f64,
    pub ce_se: f64,
}

/// Loss-geometry profile: the scheduler's model curve `H_gamma` and its
/// density alongside the measured Monte-Carlo cross-entropy, plus the
/// smoothed derivative of the measured profile.
pub fn run_profile(
    bundle: &EvalBundle,
    process: &MarkovProcess,
    seq_len: usize,
    opts: &ProfileOpts,
    csv_path: Option<&Path>,
    config_hash: u64,
) -> Result<Vec<ProfileRow>, CliError> {
    if opts.points < 3 {
        return Err(CliError::Usage("profile needs at least 3 points".into()));
    }
    let mut rng = Rng::seed_from(opts.seed);
    let grid: Vec<Gamma> = (0..opts.points)
        .map(|i| {
            let q = 0.005 + 0.99 * i as f64 / (opts.points - 1) as f64;
            scheduler::quantile(q, &bundle.sched).expect("central quantile")
        })
        .collect();
    let eval_set = process.generate(seq_len, opts.eval_seqs, &mut rng);

    let neural = NeuralDenoiser {
        params: &bundle.den,
        table: &bundle.table,
        cfg: &bundle.cfg,
        bias_ramp: bundle.bias_ramp,
    };
    let oracle = BayesDenoiser {
        table: &bundle.table,
        process,
    };
    let den: &dyn Denoise = if opts.oracle { &oracle } else { &neural };
    let points = loss_profile(den, &bundle.table, &grid, &eval_set, opts.draws, &mut rng)?;

    let rows: Vec<ProfileRow> = points
        .iter()
        .map(|p| ProfileRow {
            gamma: p.gamma,
            t_ot: t_ot_of_gamma(Gamma(p.gamma)),
            h_model: scheduler::entropy_model(Gamma(p.gamma), &bundle.sched),
            density: scheduler::density(Gamma(p.gamma), &bundle.sched),
            ce_mean: p.ce_mean,
            ce_se: p.ce_se,
        })
        .collect();
    let measured: Vec<(f64, f64)> = points.iter().map(|p| (p.gamma, p.ce_mean)).collect();
    let deriv = profile_derivative(&measured, 3)?;

    if let Some(path) = csv_path {
        let mut csv = CsvFile::create(
            path,
            config_hash,
            &[
                "gamma",
                "t_ot",
                "h_model",
                "pi",
                "ce_mean",
                "ce_se",
                "dce_dgamma",
            ],
        )?;
        for (i, row) in rows.iter().enumerate() {
            let d = if i == 0 || i + 1 == rows.len() {
                String::new()
            } else {
                num(deriv[i - 1].1)
            };
            csv.row(&[
                num(row.gamma),
                num(row.t_ot),
                num(row.h_model),
                num(row.density),
                num(row.ce_mean),
                num(row.ce_se),
                d,
            ])?;
        }
        csv.finish()?;
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct AblateOpts {
    pub task: String,
    pub seeds: u64,
    pub steps: u64,
    pub eval_seqs: usize,
    pub elbo_steps: usize,
    pub elbo_draws: usize,
    pub probes: usize,
    pub sample_count: usize,
    pub sample_steps: usize,
}

impl Default for AblateOpts {
    fn default() -> Self {
        AblateOpts {
            task: "markov16".into(),
            seeds: 3,
            steps: 2500,
            eval_seqs: 6,
            elbo_steps: 48,
            elbo_draws: 2,
            probes: 12,
            sample_count: 48,
            sample_steps: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblateRow {
    pub experiment: &'static str,
    pub variant: &'static str,
    pub seed: u64,
    pub final_ce: f64,
    pub elbo_nll: f64,
    pub elbo_ppl: f64,
    pub gen_nll: f64,
    pub gen_ppl: f64,
    pub entropy: f64,
    pub mean_nnd: f64,
}

/// Runs the self-conditioning on/off pair and the CE-vs-MSE pair over the
/// requested seeds and reports likelihood, sample-quality, and embedding
/// geometry metrics for each run. The baseline configuration (CE with
/// self-conditioning at 0.25) is shared between the two experiments, so
/// three trainings per seed cover both pairs.
pub fn run_ablate(
    base: &RunConfig,
    opts: &AblateOpts,
    csv_path: Option<&Path>,
) -> Result<Vec<AblateRow>, CliError> {
    let preset = corpus::preset(&opts.task)
        .ok_or_else(|| CliError::Usage(format!("unknown task `{}`", opts.task)))?;
    let mut rows = Vec::new();
    let variants: [(&'static str, f64, ObjectiveKind); 3] = [
        ("baseline", base.p_sc.max(0.25), ObjectiveKind::Ce),
        ("sc_off", 0.0, ObjectiveKind::Ce),
        ("mse", base.p_sc.max(0.25), ObjectiveKind::Mse),
    ];
    for (tag, p_sc, objective) in variants {
        for seed in 0..opts.seeds {
            let mut rc = base.clone();
            rc.task = Some(opts.task.clone());
            rc.corpus = None;
            rc.steps = opts.steps;
            rc.seed = seed;
            rc.p_sc = p_sc;
            rc.objective = objective;
            // MSE gradients on the summed residual are large; a shared
            // max-norm keeps the comparison stable for both objectives.
            rc.grad_clip = if rc.grad_clip > 0.0 {
                rc.grad_clip
            } else {
                50.0
            };
            // Short paired runs want an EMA horizon they can actually reach.
            if rc.ema_decay >= 0.9999 && opts.steps < 10_000 {
                rc.ema_decay = 0.999;
            }
            rc.out = base.out.join(format!("{tag}_s{seed}"));
            rc.ckpt_every = 0;
            let outcome = run_train(&rc, true)?;
            match tag {
                "baseline" => {
                    let row = evaluate_run(
                        "self_conditioning",
                        "sc_on",
                        seed,
                        &outcome,
                        &preset.process,
                        opts,
                    )?;
                    rows.push(AblateRow {
                        experiment: "objective",
                        variant: "ce",
                        ..row.clone()
                    });
                    rows.push(row);
                }
                "sc_off" => rows.push(evaluate_run(
                    "self_conditioning",
                    "sc_off",
                    seed,
                    &outcome,
                    &preset.process,
                    opts,
                )?),
                _ => rows.push(evaluate_run(
                    "objective",
                    "mse",
                    seed,
                    &outcome,
                    &preset.process,
                    opts,
                )?),
            }
        }
    }
    rows.sort_by_key(|r| (r.experiment, r.variant, r.seed));
    if let Some(path) = csv_path {
        let mut csv = CsvFile::create(
            path,
            base.hash(),
            &[
                "experiment",
                "variant",
                "seed",
                "final_ce",
                "elbo_nll",
                "elbo_ppl",
                "gen_nll",
                "gen_ppl",
                "entropy",
                "mean_nnd",
            ],
        )?;
        for r in &rows {
            csv.row(&[
                r.experiment.to_string(),
                r.variant.to_string(),
                r.seed.to_string(),
                num(r.final_ce),
                num(r.elbo_nll),
                num(r.elbo_ppl),
                num(r.gen_nll),
                num(r.gen_ppl),
                num(r.entropy),
                num(r.mean_nnd),
            ])?;
        }
        csv.finish()?;
    }
    Ok(rows)
}

fn evaluate_run(
    experiment: &'static str,
    variant: &'static str,
    seed: u64,
    outcome: &TrainOutcome,
    process: &MarkovProcess,
    opts: &AblateOpts,
) -> Result<AblateRow, CliError> {
    let bundle = checkpoint::eval_bundle(&outcome.state)?;
    let seq_len = outcome.state.config.seq_len;
    let mut rng = Rng::seed_from(item_seed(seed, 7));

    // Likelihood bound on fresh sequences from the true process.
    let eval_seqs = process.generate(seq_len, opts.eval_seqs, &mut rng);
    let eval_opts = EvalOpts {
        steps: opts.elbo_steps,
        draws: opts.elbo_draws,
        div: DivKind::Hutchinson,
        probes: opts.probes,
        seed: item_seed(seed, 11),
        workers: 1,
    };
    let estimates = run_eval_nll(&bundle, &eval_seqs, &eval_opts, None, 0)?;
    let elbo_nll = estimates.iter().map(|e| e.per_token_nll).sum::<f64>() / estimates.len() as f64;

    // Toy generative quality: score model samples under the true process.
    let samples = run_sample(
        &bundle,
        &SampleOpts {
            count: opts.sample_count,
            steps: opts.sample_steps,
            seed: item_seed(seed, 13),
            workers: 1,
            trajectory: None,
            config_hash: 0,
        },
    )?;
    let mut gen_nll = 0.0;
    let mut entropy = 0.0;
    for s in &samples {
        gen_nll += true_nll(process, s)? / samples.len() as f64;
        entropy += sequence_entropy(s) / samples.len() as f64;
    }

    let nnd = bundle.table.nnd_distribution()?;
    let mean_nnd = nnd.iter().sum::<f64>() / nnd.len() as f64;

    Ok(AblateRow {
        experiment,
        variant,
        seed,
        final_ce: outcome.last_report.map(|r| r.ce).unwrap_or(f64::NAN),
        elbo_nll,
        elbo_ppl: elbo_nll.exp(),
        gen_nll,
        gen_ppl: gen_nll.exp(),
        entropy,
        mean_nnd,
    })
}

/// Resolves evaluation sequences for `eval-nll`: either drawn fresh from a
/// preset process or read from a corpus file.
pub fn eval_sequences(
    rc: &RunConfig,
    count: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, CliError> {
    match rc.task_data()?.source {
        TaskSource::Preset(p) => {
            let mut rng = Rng::seed_from(item_seed(seed, 0xE5A1));
            Ok(p.process.generate(seq_len, count, &mut rng))
        }
        TaskSource::Corpus(c) => Ok(c
            .sequences
            .iter()
            .take(count)
            .map(|s| s[..seq_len.min(s.len())].to_vec())
            .collect()),
    }
}
