use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use coagent::harness::{compare_runs, load_records, run_experiment, ExperimentConfig, Metric};
use coagent::option_net::Topology;
use coagent::oracle::suite::{run_suite, VerifyConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "coagent",
    version,
    about = "Option networks as coagent networks: experiments and exact checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train seeded learners on Four Rooms and write CSVs.
    Run(RunArgs),
    /// Cross-check the exact gradient forms on the bundled fixtures.
    Verify(VerifyArgs),
    /// Compare two run directories at a horizon.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON file mirroring ExperimentConfig; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, e.g. "0,1,2".
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    topology: Option<Topology>,
    /// Layer list, e.g. "1,2,2".
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    temp_beta: Option<f64>,
    #[arg(long)]
    temp_pi: Option<f64>,
    #[arg(long)]
    lr_q: Option<f64>,
    #[arg(long)]
    lr_pi: Option<f64>,
    #[arg(long)]
    lr_beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    ma_window: Option<usize>,
    #[arg(long)]
    legacy_updates: bool,
    /// Single seed, 500,000 episodes.
    #[arg(long)]
    long_mode: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Write the full per-case report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    dir_a: PathBuf,
    dir_b: PathBuf,
    /// steps | discounted_return
    #[arg(long, default_value = "steps")]
    metric: Metric,
    /// Episode at which to compare; defaults to the run length.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 500)]
    window: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Verify(args) => verify(args),
        Command::Compare(args) => compare(args),
    }
}

fn build_config(args: RunArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    if let Some(episodes) = args.episodes {
        config.episodes = episodes;
    }
    if let Some(topology) = args.topology {
        config.topology = topology;
    }
    if let Some(layers) = &args.layers {
        config = config.with_layers(layers)?;
    }
    let h = &mut config.hyper;
    for (field, value) in [
        (&mut h.tau_beta, args.temp_beta),
        (&mut h.tau_pi, args.temp_pi),
        (&mut h.alpha_q, args.lr_q),
        (&mut h.alpha_pi, args.lr_pi),
        (&mut h.alpha_beta, args.lr_beta),
        (&mut h.gamma, args.gamma),
    ] {
        if let Some(v) = value {
            *field = v;
        }
    }
    if let Some(t_max) = args.t_max {
        config.t_max = t_max;
    }
    if let Some(w) = args.ma_window {
        config.ma_window = w;
    }
    if args.legacy_updates {
        config.legacy_update_mode = true;
    }
    if args.long_mode {
        config = config.long_mode();
    }
    config.validate()?;
    Ok(config)
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let config = build_config(args)?;
    log::info!(
        "{} on {} seed(s), {} episodes -> {}",
        config.spec().label(),
        config.seeds.len(),
        config.episodes,
        config.output_dir.display()
    );
    let outcome = run_experiment(&config)?;
    for (seed, error) in &outcome.failures {
        eprintln!("seed {seed} failed: {error}");
    }
    println!(
        "{} run(s) written to {}",
        outcome.records.len(),
        config.output_dir.display()
    );
    Ok(if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn verify(args: VerifyArgs) -> Result<ExitCode> {
    let config = VerifyConfig {
        draws: args.draws,
        seed: args.seed,
        ..VerifyConfig::default()
    };
    let report = run_suite(&config)?;
    let m = &report.maxima;
    println!("cases checked:                  {}", report.cases.len());
    println!("max |full - coagent_sum|:       {:.3e}", m.full_vs_coagent_sum);
    println!("max relative |full - fd|:       {:.3e}", m.fd_rel_dev);
    println!("max |full - hocpgt|:            {:.3e}", m.full_vs_hocpgt);
    println!("max Bellman residual:           {:.3e}", m.bellman);
    println!("max P_beta_pi row-sum error:    {:.3e}", m.kernel_rows);
    println!("max advantage identity error:   {:.3e}", m.advantage);
    println!("max generalized kernel error:   {:.3e}", m.generalized_kernel);
    if let Some(path) = &args.report {
        let text = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    let breaches = report.breaches();
    for b in &breaches {
        eprintln!("BREACH {b}");
    }
    Ok(if breaches.is_empty() {
        println!("all tolerances met");
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn compare(args: CompareArgs) -> Result<ExitCode> {
    let a = load_records(&args.dir_a)?;
    let b = load_records(&args.dir_b)?;
    let horizon = match args.horizon {
        Some(h) => h,
        None => a.first().map_or(0, |r| r.episodes()),
    };
    if horizon == 0 {
        bail!("empty runs in {}", args.dir_a.display());
    }
    let c = compare_runs(&a, &b, args.metric, horizon, args.window)?;
    println!("{}", serde_json::to_string_pretty(&c)?);
    Ok(ExitCode::SUCCESS)
}
