use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use msdda_core::alignment::{
    finetune_dpo, make_pairs, read_pairs_csv, reward_soup, write_pairs_csv,
};
use msdda_core::diffusion::{
    read_points_csv, sample_with, write_points_csv, Dataset2D, SamplerOptions,
};
use msdda_core::harness::{
    additivity_suite, analytic_suite, compare_msdda_soup, decomposition_suite, error_chain,
    evaluate, format_eval_csv, gradcheck, ln2_check, pretrained_model, run_experiment,
    theorem1_suite, CheckReport, EvalRecord, ExperimentConfig, PRETRAINED_FILE, SWEEP_FILE,
};
use msdda_core::msdda::{
    format_sweep_csv, msdda_sample_with, pareto_sweep_with, FusionEnsemble, SweepInputs,
};
use msdda_core::nn::save_checkpoint;
use msdda_core::oracle::{GridSpec, RandomMdpSpec};
use msdda_core::rng::derive_seed;
use msdda_core::{EpsilonModel, PreferenceWeights};

/// Multi-objective diffusion alignment experiments and exactness checks.
#[derive(Debug, Parser)]
#[command(name = "msdda", version)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config. Defaults to `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train (or reuse) the pretrained model and write the dataset.
    Pretrain,
    /// Sample preference pairs for one objective.
    Pairs(ObjectiveArgs),
    /// Fine-tune one objective's model with the step-level DPO loss.
    Align(AlignArgs),
    /// Sample from one model.
    Sample(SampleArgs),
    /// Sample with denoising-time fusion of several aligned models.
    Msdda(FusionArgs),
    /// Sample from the parameter interpolation of two aligned models.
    Soup(SoupArgs),
    /// Sweep the preference weight for MSDDA, Reward Soup and the single models.
    Pareto,
    /// Mean and standard error of each reward (and weighted rewards) over a sample file.
    Eval(EvalArgs),
    /// Exactness checks on discrete and Gaussian oracle problems.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Step-level DPO loss at theta = pre and its gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// The full pipeline: pretrain, pairs, align, sweep, evaluate.
    Run,
}

#[derive(Debug, Args)]
struct ObjectiveArgs {
    /// Objective name from the config.
    #[arg(long)]
    objective: String,
    /// Pretrained checkpoint; defaults to `<out>/pretrained.json`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[command(flatten)]
    objective: ObjectiveArgs,
    /// Preference pairs; defaults to `<out>/pairs_<objective>.csv`.
    #[arg(long)]
    pairs: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SamplingArgs {
    /// Number of samples; defaults to the config's sweep size.
    #[arg(short, long)]
    n: Option<usize>,
    /// Inference-grid stride.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Output CSV, relative to `--out`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    sampling: SamplingArgs,
}

#[derive(Debug, Args)]
struct FusionArgs {
    /// Aligned checkpoints; defaults to `<out>/aligned_<name>.json` per objective.
    #[arg(long, num_args = 1..)]
    models: Vec<PathBuf>,
    /// Preference weights, comma separated; one value `w` means `(w, 1 - w)`.
    #[arg(long, value_delimiter = ',', required = true)]
    w: Vec<f64>,
    #[command(flatten)]
    sampling: SamplingArgs,
}

#[derive(Debug, Args)]
struct SoupArgs {
    /// Weight on the first model.
    #[arg(long)]
    w: f64,
    /// First aligned checkpoint; defaults to the first objective's.
    #[arg(long)]
    a: Option<PathBuf>,
    /// Second aligned checkpoint; defaults to the second objective's.
    #[arg(long)]
    b: Option<PathBuf>,
    #[command(flatten)]
    sampling: SamplingArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Sample CSV (one point per row).
    #[arg(long)]
    samples: PathBuf,
    /// Weights on the first objective at which to also evaluate `r^w`.
    #[arg(long, value_delimiter = ',')]
    w: Vec<f64>,
    /// Method label for the output rows.
    #[arg(long, default_value = "samples")]
    method: String,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// Number of random instances.
    #[arg(long)]
    instances: Option<usize>,
    /// Grid size S.
    #[arg(long, default_value_t = 41)]
    states: usize,
    /// Grid half-width L.
    #[arg(long, default_value_t = 3.0)]
    half_width: f64,
    /// Horizon T.
    #[arg(long, default_value_t = 4)]
    horizon: usize,
    /// Number of rewards M.
    #[arg(long, default_value_t = 2)]
    rewards: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[command(flatten)]
    verdict: Verdict,
}

/// How a check's outcome is judged.
#[derive(Debug, Clone, Copy, Args)]
struct Verdict {
    /// Exit with status 4 if the check fails.
    #[arg(long = "assert")]
    assert: bool,
    /// Replace the check's default tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
}

impl OracleArgs {
    fn spec(&self) -> RandomMdpSpec {
        RandomMdpSpec {
            grid: GridSpec {
                states: self.states,
                half_width: self.half_width,
            },
            horizon: self.horizon,
            rewards: self.rewards,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Subcommand)]
enum OracleCommand {
    /// Fused single-reward optimal policies equal the weighted-reward optimal policy.
    VerifyTheorem1(OracleArgs),
    /// Q of the weighted reward equals the weighted sum of the single-reward Qs.
    Additivity(OracleArgs),
    /// The terminal reward equals V_0 plus the advantages along each rollout.
    Decomposition {
        #[command(flatten)]
        oracle: OracleArgs,
        /// Rollouts per reward and instance.
        #[arg(long, default_value_t = 10_000)]
        rollouts: usize,
    },
    /// Closed-form tilted Gaussian posterior against numerical integration.
    Analytic {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[command(flatten)]
        verdict: Verdict,
    },
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Random parameter coordinates to check.
    #[arg(long, default_value_t = 100)]
    coords: usize,
    #[command(flatten)]
    verdict: Verdict,
}

/// A failed `--assert` check.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// The config file could not be read or is invalid.
#[derive(Debug)]
struct ConfigFailed(String);

impl std::fmt::Display for ConfigFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigFailed {}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn load(cli: &Cli) -> anyhow::Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p).map_err(|e| ConfigFailed(error_chain(&e)))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Ctx { cfg, out })
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn objective(&self, name: &str) -> anyhow::Result<usize> {
        match self.cfg.objectives.iter().position(|o| o.name == name) {
            Some(i) => Ok(i),
            None => {
                let names: Vec<&str> = self
                    .cfg
                    .objectives
                    .iter()
                    .map(|o| o.name.as_str())
                    .collect();
                Err(msdda_core::Error::Param {
                    field: "objective",
                    reason: format!("{name:?} is not one of {names:?}"),
                }
                .into())
            }
        }
    }

    fn pretrained(&self, model: Option<&PathBuf>) -> anyhow::Result<EpsilonModel> {
        let path = model.map_or_else(|| self.out.join(PRETRAINED_FILE), |p| self.path(p));
        EpsilonModel::load(&path)
            .with_context(|| format!("loading {}; run `msdda pretrain` first?", path.display()))
    }

    fn aligned_path(&self, i: usize) -> PathBuf {
        self.out
            .join(format!("aligned_{}.json", self.cfg.objectives[i].name))
    }

    fn aligned(&self, explicit: Option<&PathBuf>, i: usize) -> anyhow::Result<EpsilonModel> {
        let path = explicit.map_or_else(|| self.aligned_path(i), |p| self.path(p));
        EpsilonModel::load(&path)
            .with_context(|| format!("loading {}; run `msdda align` first?", path.display()))
    }

    fn write_samples(
        &self,
        sampling: &SamplingArgs,
        default: &str,
        xs: &[Vec<f64>],
    ) -> anyhow::Result<()> {
        let path = self.path(sampling.output.as_deref().unwrap_or(Path::new(default)));
        write_points_csv(&path, xs)?;
        println!("wrote {} samples to {}", xs.len(), path.display());
        Ok(())
    }

    fn sampling(&self, s: &SamplingArgs, label: &str) -> (usize, u64, SamplerOptions) {
        (
            s.n.unwrap_or(self.cfg.sweep.n),
            derive_seed(self.cfg.seed, label),
            SamplerOptions {
                stride: s.stride,
                first_index: 0,
            },
        )
    }
}

fn report(mut rep: CheckReport, v: Verdict) -> anyhow::Result<bool> {
    if let Some(t) = v.tolerance {
        rep.tolerance = t;
    }
    println!("{rep}");
    Ok(rep.passed())
}

fn conclude(passed: bool, v: Verdict, what: &str) -> anyhow::Result<()> {
    if v.assert && !passed {
        return Err(CheckFailed(what.to_string()).into());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(msdda_core::Error::Param {
                field: "threads",
                reason: "must be at least 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    // Checks need no config or output directory.
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Oracle(cmd) => {
            let (rep, v) = match cmd {
                OracleCommand::VerifyTheorem1(a) => (
                    theorem1_suite(&a.spec(), a.instances.unwrap_or(50), seed)?,
                    a.verdict,
                ),
                OracleCommand::Additivity(a) => (
                    additivity_suite(&a.spec(), a.instances.unwrap_or(50), seed)?,
                    a.verdict,
                ),
                OracleCommand::Decomposition { oracle, rollouts } => (
                    decomposition_suite(
                        &oracle.spec(),
                        oracle.instances.unwrap_or(1),
                        *rollouts,
                        seed,
                    )?,
                    oracle.verdict,
                ),
                OracleCommand::Analytic { instances, verdict } => {
                    (analytic_suite(*instances, seed)?, *verdict)
                }
            };
            let name = rep.name;
            return conclude(report(rep, v)?, v, name);
        }
        Command::Gradcheck(a) => {
            // The tolerance override applies to the gradient comparison only.
            let ln2 = report(
                ln2_check(seed)?,
                Verdict {
                    tolerance: None,
                    ..a.verdict
                },
            )?;
            let grad = report(gradcheck(a.coords, seed)?, a.verdict)?;
            return conclude(ln2 && grad, a.verdict, "step-level DPO loss");
        }
        _ => {}
    }

    let ctx = Ctx::load(&cli)?;
    let cfg = &ctx.cfg;
    match cli.command {
        Command::Pretrain => {
            let model = pretrained_model(cfg, &ctx.out)?;
            let data = Dataset2D::generate(&cfg.dataset_spec())?;
            write_points_csv(ctx.out.join("dataset.csv"), &data.points)?;
            println!(
                "pretrained model ({} parameters) at {}",
                model.params().flat().len(),
                ctx.out.join(PRETRAINED_FILE).display()
            );
        }
        Command::Pairs(a) => {
            let i = ctx.objective(&a.objective)?;
            let pre = ctx.pretrained(a.model.as_ref())?;
            let obj = &cfg.objectives[i];
            let pairs = make_pairs(&pre, &obj.reward, obj.pairs, cfg.seeds().pairs[i])?;
            let path = ctx.out.join(format!("pairs_{}.csv", obj.name));
            write_pairs_csv(&path, &pairs)?;
            println!("wrote {} pairs to {}", pairs.len(), path.display());
        }
        Command::Align(a) => {
            let i = ctx.objective(&a.objective.objective)?;
            let pre = ctx.pretrained(a.objective.model.as_ref())?;
            let obj = &cfg.objectives[i];
            let pairs_path = a.pairs.as_ref().map_or_else(
                || ctx.out.join(format!("pairs_{}.csv", obj.name)),
                |p| ctx.path(p),
            );
            let pairs = read_pairs_csv(&pairs_path).with_context(|| {
                format!("reading {}; run `msdda pairs` first?", pairs_path.display())
            })?;
            let (model, trace) = finetune_dpo(&pre, &pairs, &cfg.dpo_hyper(i), obj.eta)?;
            let path = ctx.aligned_path(i);
            let meta = [("objective".to_string(), obj.name.clone())]
                .into_iter()
                .collect();
            save_checkpoint(&path, &model.to_checkpoint(meta))?;
            println!(
                "aligned {} (loss {:.4} -> {:.4}) at {}",
                obj.name,
                trace.first().unwrap_or(f64::NAN),
                trace.last().unwrap_or(f64::NAN),
                path.display()
            );
        }
        Command::Sample(a) => {
            let model = EpsilonModel::load(ctx.path(&a.model))?;
            let (n, seed, opts) = ctx.sampling(&a.sampling, "sample");
            ctx.write_samples(
                &a.sampling,
                "samples.csv",
                &sample_with(&model, n, seed, opts)?,
            )?;
        }
        Command::Msdda(a) => {
            let models = if a.models.is_empty() {
                (0..cfg.objectives.len())
                    .map(|i| ctx.aligned(None, i))
                    .collect::<anyhow::Result<Vec<_>>>()?
            } else {
                a.models
                    .iter()
                    .map(|p| Ok(EpsilonModel::load(ctx.path(p))?))
                    .collect::<anyhow::Result<Vec<_>>>()?
            };
            let w = if a.w.len() == 1 && models.len() == 2 {
                PreferenceWeights::pair(a.w[0])?
            } else {
                PreferenceWeights::new(a.w.clone())?
            };
            if w.len() != models.len() {
                bail!(msdda_core::Error::Param {
                    field: "w",
                    reason: format!("{} weights for {} models", w.len(), models.len()),
                });
            }
            let ens = FusionEnsemble::new(models, w)?;
            let (n, seed, opts) = ctx.sampling(&a.sampling, "sample");
            ctx.write_samples(
                &a.sampling,
                "msdda.csv",
                &msdda_sample_with(&ens, n, seed, opts)?,
            )?;
        }
        Command::Soup(a) => {
            let soup = reward_soup(
                &ctx.aligned(a.a.as_ref(), 0)?,
                &ctx.aligned(a.b.as_ref(), 1)?,
                a.w,
            )?;
            let (n, seed, opts) = ctx.sampling(&a.sampling, "sample");
            ctx.write_samples(&a.sampling, "soup.csv", &sample_with(&soup, n, seed, opts)?)?;
        }
        Command::Pareto => {
            let (a, b, pre) = (
                ctx.aligned(None, 0)?,
                ctx.aligned(None, 1)?,
                ctx.pretrained(None)?,
            );
            let sweep = pareto_sweep_with(
                SweepInputs {
                    model_a: &a,
                    model_b: &b,
                    pretrained: Some(&pre),
                    r1: &cfg.objectives[0].reward,
                    r2: &cfg.objectives[1].reward,
                },
                &cfg.sweep.weights,
                cfg.sweep.n,
                cfg.seeds().sweep,
                SamplerOptions {
                    stride: cfg.sweep.stride,
                    first_index: 0,
                },
            )?;
            let rows: Vec<_> = sweep.into_iter().map(|p| p.row).collect();
            let path = ctx.out.join(SWEEP_FILE);
            fs::write(&path, format_sweep_csv(&rows))
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::Eval(a) => {
            let xs = read_points_csv(ctx.path(&a.samples))?;
            let rewards: Vec<_> = cfg.objectives.iter().map(|o| o.reward.clone()).collect();
            let ws =
                a.w.iter()
                    .map(|&w| PreferenceWeights::pair(w))
                    .collect::<msdda_core::Result<Vec<_>>>()?;
            let rep = evaluate(&xs, &rewards, &ws)?;
            let records: Vec<EvalRecord> = rep
                .rows
                .into_iter()
                .map(|row| EvalRecord {
                    method: a.method.clone(),
                    w: None,
                    row,
                })
                .collect();
            print!("{}", format_eval_csv(&records));
        }
        Command::Run => {
            let outputs = run_experiment(cfg, &ctx.out)?;
            println!(
                "{:>5} {:>10} {:>10} {:>10} {:>8}",
                "w", "msdda", "soup", "diff", "se"
            );
            for c in compare_msdda_soup(&outputs.eval) {
                println!(
                    "{:>5.2} {:>10.4} {:>10.4} {:>+10.4} {:>8.4}{}",
                    c.w,
                    c.msdda.mean,
                    c.soup.mean,
                    c.difference(),
                    c.combined_se(),
                    if c.msdda_ahead() { "  *" } else { "" }
                );
            }
            println!("outputs in {}", ctx.out.display());
        }
        Command::Oracle(_) | Command::Gradcheck(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 4;
    }
    if err.downcast_ref::<ConfigFailed>().is_some() {
        return 2;
    }
    match err
        .chain()
        .find_map(|e| e.downcast_ref::<msdda_core::Error>())
    {
        Some(e) if e.is_numeric() => 3,
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
