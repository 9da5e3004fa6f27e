use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use catflow::checkpoint;
use catflow::config::{seed_from_env, DivKind, ObjectiveKind, RunConfig};
use catflow::oracles;
use catflow::runner::{self, AblateOpts, EvalOpts, ProfileOpts, SampleOpts};
use catflow::CliError;
use catflow_core::corpus;

/// Embedding-space categorical flow models: train, sample, evaluate
/// likelihood bounds, profile the noise scheduler, and run ablations.
#[derive(Parser)]
#[command(name = "catflow", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum DivArg {
    Exact,
    Hutchinson,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Ce,
    Mse,
}

/// Flags shared by every subcommand; values override the config file,
/// which overrides `CATFLOW_SEED`, which overrides defaults.
#[derive(Args)]
struct Common {
    /// JSON run configuration; flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named toy task: iid8, markov4, markov16.
    #[arg(long)]
    task: Option<String>,
    /// Corpus file (one sequence per line with a `# vocab=...` header).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "p-sc")]
    p_sc: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "sched-lr")]
    sched_lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long = "seq-len")]
    seq_len: Option<usize>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long = "ema-decay")]
    ema_decay: Option<f64>,
    #[arg(long = "bias-ramp")]
    bias_ramp: Option<u64>,
    #[arg(long = "grad-clip")]
    grad_clip: Option<f64>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long = "sampler-steps")]
    sampler_steps: Option<usize>,
    #[arg(long = "elbo-draws")]
    elbo_draws: Option<usize>,
    /// Divergence estimator for the likelihood bound.
    #[arg(long, value_enum)]
    div: Option<DivArg>,
    /// Probe count for the Hutchinson estimator.
    #[arg(long)]
    probes: Option<usize>,
    /// Worker threads for per-sequence parallel work.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "ckpt-every")]
    ckpt_every: Option<u64>,
    #[arg(long = "log-every")]
    log_every: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut rc = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if self.config.is_none() {
            if let Some(seed) = seed_from_env() {
                rc.seed = seed;
            }
        }
        if let Some(v) = &self.task {
            rc.task = Some(v.clone());
            rc.corpus = None;
        }
        if let Some(v) = &self.corpus {
            rc.corpus = Some(v.clone());
            if self.task.is_none() {
                rc.task = None;
            }
        }
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    rc.$field = v;
                }
            };
        }
        set!(steps);
        set!(batch);
        set!(seed);
        set!(p_sc);
        set!(lr);
        set!(hidden);
        set!(warmup);
        set!(ema_decay);
        set!(bias_ramp);
        set!(grad_clip);
        set!(sampler_steps);
        set!(elbo_draws);
        set!(probes);
        set!(workers);
        set!(ckpt_every);
        set!(log_every);
        if let Some(v) = self.sched_lr {
            rc.sched_lr = Some(v);
        }
        if let Some(v) = self.dim {
            rc.dim = Some(v);
        }
        if let Some(v) = self.seq_len {
            rc.seq_len = Some(v);
        }
        if let Some(v) = self.objective {
            rc.objective = match v {
                ObjectiveArg::Ce => ObjectiveKind::Ce,
                ObjectiveArg::Mse => ObjectiveKind::Mse,
            };
        }
        if let Some(v) = self.div {
            rc.div = match v {
                DivArg::Exact => DivKind::Exact,
                DivArg::Hutchinson => DivKind::Hutchinson,
            };
        }
        if let Some(v) = &self.out {
            rc.out = v.clone();
        }
        Ok(rc)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes checkpoints and a CSV training log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Draw token sequences from a checkpoint (one line per sample).
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of sequences to draw.
        #[arg(long, default_value_t = 16)]
        num: usize,
        /// Dump the first sample's trajectory (step, gamma, mean norm).
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Estimate the per-sequence likelihood bound; emits one CSV row each.
    EvalNll {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of evaluation sequences.
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Loss-geometry profile: scheduler curve, density, and measured CE.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 33)]
        points: usize,
        /// Monte-Carlo draws per sequence per grid point.
        #[arg(long, default_value_t = 8)]
        draws: usize,
        #[arg(long = "eval-seqs", default_value_t = 32)]
        eval_seqs: usize,
        /// Profile the Bayes-oracle denoiser instead of the network.
        #[arg(long)]
        oracle: bool,
    },
    /// Paired self-conditioning and CE-vs-MSE runs with a comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long = "eval-seqs", default_value_t = 6)]
        eval_seqs: usize,
        #[arg(long = "sample-count", default_value_t = 48)]
        sample_count: usize,
    },
    /// Run every derived-oracle suite; exits 4 if any comparison fails.
    OracleCheck {
        /// Trim Monte-Carlo sizes for a faster pass.
        #[arg(long)]
        quick: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train { common } => {
            let rc = common.resolve()?;
            let outcome = runner::run_train(&rc, false)?;
            println!(
                "trained {} steps; checkpoint at {}",
                rc.steps,
                outcome.final_checkpoint.display()
            );
            println!("log at {}", outcome.log_path.display());
            Ok(())
        }
        Cmd::Sample {
            common,
            ckpt,
            num,
            trajectory,
        } => {
            let rc = common.resolve()?;
            let (state, _) = checkpoint::load(&ckpt)?;
            let bundle = checkpoint::eval_bundle(&state)?;
            let samples = runner::run_sample(
                &bundle,
                &SampleOpts {
                    count: num,
                    steps: rc.sampler_steps,
                    seed: rc.seed,
                    workers: rc.workers,
                    trajectory,
                    config_hash: rc.hash(),
                },
            )?;
            let mut stdout = String::new();
            for row in &samples {
                let line: Vec<String> = row.iter().map(|t| t.to_string()).collect();
                stdout.push_str(&line.join(" "));
                stdout.push('\n');
            }
            print!("{stdout}");
            Ok(())
        }
        Cmd::EvalNll {
            common,
            ckpt,
            count,
        } => {
            let rc = common.resolve()?;
            let (state, ckpt_rc) = checkpoint::load(&ckpt)?;
            let bundle = checkpoint::eval_bundle(&state)?;
            // Sequences come from the run's own task unless overridden.
            let data_rc = if rc.task.is_some() || rc.corpus.is_some() {
                rc.clone()
            } else {
                ckpt_rc
            };
            let sequences = runner::eval_sequences(&data_rc, count, bundle.seq_len, rc.seed)?;
            std::fs::create_dir_all(&rc.out)?;
            let csv = rc.out.join("eval_nll.csv");
            let estimates = runner::run_eval_nll(
                &bundle,
                &sequences,
                &EvalOpts {
                    steps: rc.sampler_steps,
                    draws: rc.elbo_draws,
                    div: rc.div,
                    probes: rc.probes,
                    seed: rc.seed,
                    workers: rc.workers,
                },
                Some(&csv),
                rc.hash(),
            )?;
            let mean_nll =
                estimates.iter().map(|e| e.per_token_nll).sum::<f64>() / estimates.len() as f64;
            println!(
                "sequences={} mean_per_token_nll={:.6} mean_ppl={:.4} csv={}",
                estimates.len(),
                mean_nll,
                mean_nll.exp(),
                csv.display()
            );
            Ok(())
        }
        Cmd::Profile {
            common,
            ckpt,
            points,
            draws,
            eval_seqs,
            oracle,
        } => {
            let rc = common.resolve()?;
            let (state, ckpt_rc) = checkpoint::load(&ckpt)?;
            let bundle = checkpoint::eval_bundle(&state)?;
            let data_rc = if rc.task.is_some() || rc.corpus.is_some() {
                rc.clone()
            } else {
                ckpt_rc
            };
            let task_name = data_rc
                .task
                .clone()
                .ok_or_else(|| CliError::Usage("profile needs a preset task".into()))?;
            let preset = corpus::preset(&task_name)
                .ok_or_else(|| CliError::Usage(format!("unknown task `{task_name}`")))?;
            std::fs::create_dir_all(&rc.out)?;
            let csv = rc.out.join("profile.csv");
            runner::run_profile(
                &bundle,
                &preset.process,
                bundle.seq_len,
                &ProfileOpts {
                    points,
                    draws,
                    eval_seqs,
                    oracle,
                    seed: rc.seed,
                },
                Some(&csv),
                rc.hash(),
            )?;
            println!("profile written to {}", csv.display());
            Ok(())
        }
        Cmd::Ablate {
            common,
            seeds,
            eval_seqs,
            sample_count,
        } => {
            let rc = common.resolve()?;
            let task = rc.task.clone().unwrap_or_else(|| "markov16".to_string());
            let defaults = AblateOpts::default();
            let opts = AblateOpts {
                task,
                seeds,
                steps: rc.steps,
                eval_seqs,
                elbo_steps: rc.sampler_steps.min(64),
                elbo_draws: rc.elbo_draws.min(4),
                probes: rc.probes.min(16),
                sample_count,
                sample_steps: rc.sampler_steps.min(defaults.sample_steps),
            };
            std::fs::create_dir_all(&rc.out)?;
            let csv = rc.out.join("ablate.csv");
            let rows = runner::run_ablate(&rc, &opts, Some(&csv))?;
            println!(
                "{:<18} {:<8} {:>4} {:>10} {:>10} {:>10} {:>10} {:>9}",
                "experiment",
                "variant",
                "seed",
                "final_ce",
                "elbo_ppl",
                "gen_nll",
                "entropy",
                "nnd"
            );
            for r in &rows {
                println!(
                    "{:<18} {:<8} {:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>9.4}",
                    r.experiment,
                    r.variant,
                    r.seed,
                    r.final_ce,
                    r.elbo_ppl,
                    r.gen_nll,
                    r.entropy,
                    r.mean_nnd
                );
            }
            println!("table written to {}", csv.display());
            Ok(())
        }
        Cmd::OracleCheck { quick } => {
            let reports = oracles::run_all(quick);
            let mut failed = 0usize;
            for r in &reports {
                println!(
                    "[{}] {:<32} {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                if !r.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                Err(CliError::Oracle(format!(
                    "{failed} of {} oracle suites failed",
                    reports.len()
                )))
            } else {
                println!("all {} oracle suites passed", reports.len());
                Ok(())
            }
        }
    }
}
