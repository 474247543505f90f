//! `tglrn`: synthesize data, train, evaluate, export predictions, run the
//! gradient suite and dump learned graphs.
//!
//! Failures print one line `ERROR:<exit code>:<message>` to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tglrn::checkpoint;
use tglrn::config::RunConfig;
use tglrn::data::synth::{self, SynthConfig, Topology};
use tglrn::data::{Dataset, FlowSeries, Split};
use tglrn::gradsuite;
use tglrn::model::Model;
use tglrn::roadnet::RoadNetwork;
use tglrn::trainer::{self, Hooks};
use tglrn::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "tglrn", version, about = "Dynamic-graph traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: edges.csv, flow.csv, planted.csv.
    Synth {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value = "chain")]
        topology: String,
        #[arg(long, default_value_t = 8)]
        nodes: usize,
        #[arg(long, default_value_t = 2016)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Steps per coupling regime; 0 disables switching.
        #[arg(long, default_value_t = 36)]
        regime_period: usize,
        #[arg(long, default_value_t = 0.8)]
        coupling_a: f64,
        #[arg(long, default_value_t = 0.0)]
        coupling_b: f64,
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
        #[arg(long, default_value_t = 288.0)]
        period: f64,
        #[arg(long, default_value_t = 50.0)]
        level: f64,
        #[arg(long, default_value_t = 20.0)]
        amplitude: f64,
    },
    /// Train a model; writes checkpoint.bin, history.csv and config.txt to `out_dir`.
    Train(ConfigArgs),
    /// Evaluate a checkpoint; prints and writes metrics.csv.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Export predictions.csv (`t,horizon,sensor,value`).
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump eval-mode adjacency matrices and hop-choice histograms.
    InspectGraph {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Window (position within the split) whose adjacencies are dumped.
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::State(_) => EXIT_CONFIG,
            Error::Input(_) | Error::Parse { .. } | Error::Format(_) | Error::Io { .. } => EXIT_DATA,
            Error::Numeric(_) => EXIT_NUMERIC,
        };
        Failure { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("bad arguments").trim_start_matches("error: ").to_string();
            eprintln!("ERROR:{EXIT_CONFIG}:{first}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ERROR:{}:{}", f.code, f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth {
            out,
            topology,
            nodes,
            steps,
            seed,
            regime_period,
            coupling_a,
            coupling_b,
            noise_std,
            period,
            level,
            amplitude,
        } => {
            let cfg = SynthConfig {
                nodes,
                steps,
                topology: topology.parse::<Topology>()?,
                regime_period,
                coupling_a,
                coupling_b,
                noise_std,
                period,
                level,
                amplitude,
                seed,
            };
            let data = synth::generate(&cfg)?;
            data.write(&out)?;
            println!(
                "wrote {} ({} nodes, {} steps, {} planted couplings)",
                out.display(),
                nodes,
                steps,
                data.planted.len()
            );
            Ok(())
        }
        Command::Train(args) => train(&args),
        Command::Eval { cfg, checkpoint, split } => eval(&cfg, checkpoint, split.into()),
        Command::Predict { cfg, checkpoint, split } => predict(&cfg, checkpoint, split.into()),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::InspectGraph { cfg, checkpoint, split, window } => inspect(&cfg, checkpoint, split.into(), window),
    }
}

fn effective_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if cfg.threads > 0 {
        // A second call fails harmlessly; the pool is process-global.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    Ok(cfg)
}

fn load_flows(cfg: &RunConfig) -> CliResult<FlowSeries> {
    let nodes = (cfg.nodes > 0).then_some(cfg.nodes);
    Ok(FlowSeries::load(&cfg.flows, nodes)?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn train(args: &ConfigArgs) -> CliResult<()> {
    let cfg = effective_config(args)?;
    let flows = load_flows(&cfg)?;
    let nodes = flows.nodes();
    let network = RoadNetwork::load_edges(&cfg.edges, nodes)?;
    let data = Dataset::prepare(flows, cfg.input_len, cfg.horizon, cfg.ratios(), cfg.per_sensor_scaler)?;
    let mut model = Model::new(cfg.model_config(nodes), network, data.scaler.clone(), cfg.seed)?;
    create_dir(&cfg.out_dir)?;
    let echo = cfg.out_dir.join("config.txt");
    std::fs::write(&echo, cfg.to_text()).map_err(|e| Error::io(&echo, e))?;
    log::info!(
        "training on {} windows ({} val, {} test), {} parameters",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        model.store.num_scalars()
    );
    let outcome = trainer::train(&mut model, &data, &cfg.train_config(), Hooks::default())?;
    outcome.history.write_csv(&cfg.out_dir.join("history.csv"))?;
    checkpoint::save(&cfg.out_dir.join("checkpoint.bin"), &model, &cfg)?;
    println!(
        "best epoch {} of {}: val MAE {:.4}; wrote {}",
        outcome.best_epoch,
        outcome.history.records.len(),
        outcome.best_val_mae,
        cfg.out_dir.display()
    );
    Ok(())
}

/// Loads the checkpoint and the flows, windowed with the checkpoint's scaler.
fn restore(args: &ConfigArgs, checkpoint_path: Option<PathBuf>) -> CliResult<(RunConfig, Model, Dataset)> {
    let cfg = effective_config(args)?;
    let path = checkpoint_path.unwrap_or_else(|| cfg.out_dir.join("checkpoint.bin"));
    let flows = load_flows(&cfg)?;
    let (_, model) = checkpoint::load(&path, Some(flows.nodes()))?;
    if model.config.input_len != cfg.input_len || model.config.horizon != cfg.horizon {
        return Err(Error::config(format!(
            "checkpoint uses input_len {} / horizon {}, config says {} / {}",
            model.config.input_len, model.config.horizon, cfg.input_len, cfg.horizon
        ))
        .into());
    }
    let data = Dataset::with_scaler(flows, cfg.input_len, cfg.horizon, cfg.ratios(), model.scaler.clone())?;
    create_dir(&cfg.out_dir)?;
    Ok((cfg, model, data))
}

fn eval(args: &ConfigArgs, checkpoint_path: Option<PathBuf>, split: Split) -> CliResult<()> {
    let (cfg, model, data) = restore(args, checkpoint_path)?;
    let report = trainer::evaluate(&model, &data, split, cfg.mape_threshold)?;
    let ha = trainer::baseline_ha(&data, split, cfg.mape_threshold)?;
    report.write_csv(&cfg.out_dir.join("metrics.csv"))?;
    ha.write_csv(&cfg.out_dir.join("metrics_ha.csv"))?;
    println!("split {}: {} windows", split.name(), data.split(split).len());
    println!("{:>8} {:>10} {:>10} {:>9}   {:>10}", "horizon", "MAE", "RMSE", "MAPE%", "HA MAE");
    for (h, (m, b)) in report.per_horizon.iter().zip(&ha.per_horizon).enumerate() {
        println!("{:>8} {:>10.4} {:>10.4} {:>9.3}   {:>10.4}", h + 1, m.mae, m.rmse, m.mape, b.mae);
    }
    let (m, b) = (report.overall, ha.overall);
    println!("{:>8} {:>10.4} {:>10.4} {:>9.3}   {:>10.4}", "all", m.mae, m.rmse, m.mape, b.mae);
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Failure {
    Failure { code: EXIT_DATA, message: format!("writing {}: {e}", path.display()) }
}

fn predict(args: &ConfigArgs, checkpoint_path: Option<PathBuf>, split: Split) -> CliResult<()> {
    let (cfg, model, data) = restore(args, checkpoint_path)?;
    let preds = trainer::predict_split(&model, &data, split)?;
    let path = cfg.out_dir.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["t", "horizon", "sensor", "value"]).map_err(|e| csv_error(&path, e))?;
    for (start, p) in &preds {
        for h in 0..p.rows() {
            let t = start + data.input_len() + h;
            for s in 0..p.cols() {
                w.write_record([t.to_string(), (h + 1).to_string(), s.to_string(), p.get(h, s).to_string()])
                    .map_err(|e| csv_error(&path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!("wrote {} ({} windows)", path.display(), preds.len());
    Ok(())
}

fn gradcheck(seed: u64) -> CliResult<()> {
    let reports = gradsuite::run_suite(seed)?;
    let mut failed = 0;
    for c in &reports {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!("{status:>4}  {:<36} max rel err {:.3e}", c.name, c.report.max_rel_error());
        for p in c.report.failures() {
            println!("        {} (entry {}): {:.3e}", p.name, p.worst_index, p.max_rel_error);
        }
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        return Err(Failure { code: EXIT_GRADCHECK, message: format!("{failed} of {} gradient cases failed", reports.len()) });
    }
    println!("all {} gradient cases passed", reports.len());
    Ok(())
}

fn inspect(args: &ConfigArgs, checkpoint_path: Option<PathBuf>, split: Split, window: usize) -> CliResult<()> {
    let (cfg, model, data) = restore(args, checkpoint_path)?;
    let starts = &data.split(split).starts;
    let Some(&chosen) = starts.get(window) else {
        return Err(Error::input(format!("window {window} out of range: the {} split has {} windows", split.name(), starts.len())).into());
    };
    let dir = cfg.out_dir.join("graphs");
    create_dir(&dir)?;

    let snapshots = model.inspect_graphs(&data.input(chosen))?;
    for (s, snap) in snapshots.iter().enumerate() {
        let t = chosen + s;
        let path = dir.join(format!("adjacency_t{t:06}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["from", "to", "weight", "edge_prob"]).map_err(|e| csv_error(&path, e))?;
        for i in 0..snap.adjacency.rows() {
            for j in 0..snap.adjacency.cols() {
                let a = snap.adjacency.get(i, j);
                if a != 0.0 {
                    w.write_record([i.to_string(), j.to_string(), a.to_string(), snap.edge_probs.get(i, j).to_string()])
                        .map_err(|e| csv_error(&path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let hops_path = dir.join("hops.csv");
    let mut w = csv::Writer::from_path(&hops_path).map_err(|e| csv_error(&hops_path, e))?;
    w.write_record(["t", "sensor", "hop"]).map_err(|e| csv_error(&hops_path, e))?;
    for (s, snap) in snapshots.iter().enumerate() {
        for (i, h) in snap.hops.iter().enumerate() {
            w.write_record([(chosen + s).to_string(), i.to_string(), h.to_string()]).map_err(|e| csv_error(&hops_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&hops_path, e))?;

    // Histogram over every window of the split and every input step.
    let l = model.config.hop_group;
    let mut counts = vec![0usize; l];
    for &start in starts {
        for snap in model.inspect_graphs(&data.input(start))? {
            for &h in &snap.hops {
                counts[h - 1] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let hist_path = dir.join("hop_histogram.csv");
    let mut w = csv::Writer::from_path(&hist_path).map_err(|e| csv_error(&hist_path, e))?;
    w.write_record(["hop", "count", "fraction"]).map_err(|e| csv_error(&hist_path, e))?;
    println!("hop choices over the {} split ({} windows):", split.name(), starts.len());
    for (k, &c) in counts.iter().enumerate() {
        let frac = c as f64 / total.max(1) as f64;
        w.write_record([(k + 1).to_string(), c.to_string(), frac.to_string()]).map_err(|e| csv_error(&hist_path, e))?;
        println!("  S^{:<3} {:>8} {:>7.2}%", k + 1, c, 100.0 * frac);
    }
    w.flush().map_err(|e| Error::io(&hist_path, e))?;
    println!("wrote {} adjacency dumps for window starting at t={chosen} to {}", snapshots.len(), dir.display());
    Ok(())
}
