use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use aop_core::agent::AgentMode;
use aop_core::harness::{self, ExperimentSpec, ProbeSettings};

#[derive(Parser)]
#[command(name = "aop", version, about = "Adaptive online planning experiments")]
struct Cli {
    /// Worker threads for seed- and population-level parallelism.
    #[arg(long, env = "AOP_WORKERS", global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a spec: one JSONL log per seed plus summary.csv and spec.json.
    Run(SpecArgs),
    /// Grid over the horizon thresholds; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_delimiter = ',', default_value = "4,8,14")]
        sigma: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "10,25,40")]
        eps: Vec<f64>,
    },
    /// Evaluate the prior alone at regular intervals; writes probe.csv.
    Probe {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 250)]
        every: u64,
        #[arg(long, default_value_t = 200)]
        probe_horizon: usize,
    },
    /// Figure-data CSVs from JSONL logs.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Moving-average window for the reward curve.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Regret decomposition and bound check on random tabular MDPs.
    RegretSweep {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "regret_sweep.csv")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment spec (JSON). Omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Replace the spec's seed list; repeatable.
    #[arg(long)]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<AgentMode>,
    /// Agent config assignment such as `planner.pop_size=20`; repeatable.
    #[arg(long = "override")]
    overrides: Vec<String>,
}

impl SpecArgs {
    fn load(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                ExperimentSpec::from_json(&text)
                    .with_context(|| format!("in {}", path.display()))?
            }
            None => ExperimentSpec::default(),
        };
        if !self.seed.is_empty() {
            spec.seeds = self.seed.clone();
        }
        if let Some(out) = &self.out {
            spec.output_dir = out.clone();
        }
        if let Some(mode) = self.mode {
            spec.mode = mode;
        }
        spec.overrides.extend(self.overrides.iter().cloned());
        spec.validate()?;
        Ok(spec)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("AOP_WORKERS must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    match cli.command {
        Command::Run(args) => {
            let spec = args.load()?;
            let s = harness::run(&spec)?;
            println!(
                "{} ({}): reward {:.4} ± {:.4}, planning {:.2}% of MPC-8 -> {}",
                s.name,
                s.mode,
                s.mean_reward,
                s.std_reward,
                100.0 * s.mean_planning_fraction,
                spec.run_dir().display()
            );
        }
        Command::Sweep { spec, sigma, eps } => {
            let spec = spec.load()?;
            for r in harness::sweep_thresholds(&spec, &sigma, &eps)? {
                println!(
                    "sigma {:>5} eps {:>5}: reward {:.4} ± {:.4}, planning {:.2}%",
                    r.sigma_thres,
                    r.eps_thres,
                    r.mean_reward,
                    r.std_reward,
                    100.0 * r.planning_fraction
                );
            }
        }
        Command::Probe {
            spec,
            every,
            probe_horizon,
        } => {
            let spec = spec.load()?;
            let settings = ProbeSettings {
                every,
                horizon: probe_horizon,
            };
            let points = harness::degradation_probe(&spec, &settings)?;
            println!(
                "{} probe points -> {}",
                points.len(),
                spec.run_dir().join("probe.csv").display()
            );
        }
        Command::Report { logs, out, window } => {
            harness::report(&logs, &out, window)?;
            println!("report written to {}", out.display());
        }
        Command::RegretSweep {
            instances,
            seed,
            out,
        } => {
            let rows = harness::regret_sweep_csv(instances, seed, &out)?;
            let violations = rows.iter().filter(|r| !r.holds).count();
            let max_gap = rows.iter().map(|r| r.identity_gap).fold(0.0, f64::max);
            let negative_sr = rows.iter().filter(|r| r.sr < 0.0).count();
            println!(
                "{} instances: {violations} bound violations, max identity gap {max_gap:.2e}, \
                 {negative_sr} with negative short-term regret -> {}",
                rows.len(),
                out.display()
            );
        }
    }
    Ok(())
}
