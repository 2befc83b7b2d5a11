use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fairmdp::harness::{run_experiment, ExperimentConfig, Mode};
use fairmdp::offline::generate_uniform_dataset;
use fairmdp::{Error, FairnessKind, StepRule};

/// Fair policies for multi-agent tabular MDPs.
///
/// MODE is one of plan, online, offline, pg, oracle, or `dataset` to write a
/// uniform-policy dataset for later offline runs. Flags override the
/// matching fields of the TOML config.
#[derive(Parser, Debug)]
#[command(name = "fairmdp", version)]
struct Cli {
    mode: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory (or file for `dataset`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// max-min, proportional or alpha:<value>.
    #[arg(long)]
    fairness: Option<FairnessKind>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Online episodes, or dataset size.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Multiplier on the confidence widths (1 keeps the theoretical ones).
    #[arg(long)]
    width_scale: Option<f64>,
    #[arg(long)]
    grid_step: Option<f64>,
    #[arg(long)]
    instance_seed: Option<u64>,
    #[arg(long)]
    mdp_file: Option<PathBuf>,
    /// JSON-lines dataset for offline mode.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Policy-gradient iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Policy-gradient batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Policy-gradient step size.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    fw_iters: Option<usize>,
    #[arg(long)]
    fw_tol: Option<f64>,
    /// diminishing or line-search.
    #[arg(long)]
    fw_step: Option<StepRule>,
    #[arg(long)]
    dump_policy: bool,
    #[arg(long)]
    threads: Option<usize>,
    /// Log more (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn build_config(cli: &Cli, mode: Mode) -> fairmdp::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.mode = mode;
    if let Some(v) = &cli.seeds {
        cfg.seeds = v.clone();
    }
    if let Some(v) = &cli.out {
        cfg.out = v.clone();
    }
    if let Some(v) = cli.fairness {
        cfg.fairness = v;
    }
    if let Some(v) = cli.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = cli.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = cli.delta {
        cfg.delta = v;
    }
    if let Some(v) = cli.width_scale {
        cfg.width_scale = v;
    }
    if let Some(v) = cli.grid_step {
        cfg.grid_step = v;
    }
    if let Some(v) = cli.instance_seed {
        cfg.instance_seed = Some(v);
    }
    if let Some(v) = &cli.mdp_file {
        cfg.mdp_file = Some(v.clone());
    }
    if let Some(v) = &cli.data {
        cfg.dataset = Some(v.clone());
    }
    if let Some(v) = cli.iters {
        cfg.pg.iterations = v;
    }
    if let Some(v) = cli.batch {
        cfg.pg.batch_size = v;
    }
    if let Some(v) = cli.step {
        cfg.pg.step_size = v;
    }
    if let Some(v) = cli.fw_iters {
        cfg.solver.max_iterations = v;
    }
    if let Some(v) = cli.fw_tol {
        cfg.solver.tolerance = v;
    }
    if let Some(v) = cli.fw_step {
        cfg.solver.step_rule = v;
    }
    if cli.dump_policy {
        cfg.dump_policy = true;
    }
    if let Some(v) = cli.threads {
        cfg.parallelism = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_dataset(cli: &Cli) -> fairmdp::Result<()> {
    let cfg = build_config(cli, Mode::Offline)?;
    let seed = cfg.seeds[0];
    let mdp = cfg.instance(seed)?;
    let data = generate_uniform_dataset(&mdp, cfg.episodes, seed)?;
    let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("dataset.jsonl"));
    data.write_jsonl(BufWriter::new(File::create(&path)?))?;
    println!("wrote {} episodes to {}", data.len(), path.display());
    Ok(())
}

fn run(cli: &Cli) -> fairmdp::Result<()> {
    if cli.mode == "dataset" {
        return write_dataset(cli);
    }
    let mode: Mode = cli.mode.parse()?;
    let cfg = build_config(cli, mode)?;
    let summary = run_experiment(&cfg)?;
    let agg = &summary.aggregate;
    if let (Some(last), Some(col)) = (agg.rows.last(), agg.header.iter().position(|h| h.ends_with("_mean"))) {
        println!("{} = {:.6} (last row, {} seeds)", agg.header[col], last[col], summary.outputs.len());
    }
    println!("results in {}", summary.out_dir.display());
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_config_error() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
