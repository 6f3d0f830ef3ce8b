//! Command-line surface: profile, train, simulate, search and trace tools.
//!
//! Every command writes a `manifest.json` (or `<output>.manifest.json` for
//! single-file outputs) recording what was run.

use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::estimator::{build_lookup_table, train, EstimatorModel, RuntimePredictor, TableConfig, TrainConfig};
use crate::metrics::{self, ExportFormat};
use crate::model_spec::{profiled_kernels, ModelSpec, ParallelismConfig};
use crate::profiler::{generate_profile, ingest_profile_csv, write_profile_csv, DeviceProfile, OraclePredictor};
use crate::search::{self, EstimatorSource, Objective};
use crate::sim::{self, load_cluster_config};
use crate::workload::{compute_stats, load_trace, poisson_arrivals, save_trace, synth_trace, TraceDistribution};

#[derive(Debug, Parser)]
#[command(name = "servesim", version, about = "Simulate LLM inference serving and search deployments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Price every kernel of a model on a device with the analytical oracle
    /// and write a profile CSV.
    Profile(ProfileArgs),
    /// Fit per-kernel runtime models to a profile CSV.
    Train(TrainArgs),
    /// Run one cluster simulation over a trace and export metrics.
    Simulate(SimulateArgs),
    /// Search deployment configurations for the best capacity per dollar.
    Search(SearchArgs),
    /// Print length statistics of a trace.
    WorkloadStats(StatsArgs),
    /// Sample a synthetic trace from a length distribution file.
    GenTrace(GenTraceArgs),
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Model spec TOML.
    #[arg(long)]
    pub model_spec: PathBuf,
    /// Device TOML, or a built-in SKU (A100-80G, H100-80G).
    #[arg(long)]
    pub device: String,
    /// Tensor-parallel degrees to profile; invalid shardings are skipped.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub tp: Vec<u64>,
    /// Largest batch size on the grid.
    #[arg(long, default_value_t = 512)]
    pub max_batch_size: u64,
    /// Recorded in the manifest; the oracle itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Profile CSV to fit.
    #[arg(long)]
    pub profile: PathBuf,
    /// Seed of the forest's split sampling.
    #[arg(long, default_value_t = 0x5eed)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub n_trees: usize,
    /// Output model JSON; a `.report.json` with per-kernel errors is
    /// written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Cluster config TOML.
    #[arg(long)]
    pub cluster_config: PathBuf,
    /// Trace CSV. Rows without arrival times get the config's [arrivals].
    #[arg(long)]
    pub trace: PathBuf,
    /// Trained model JSON. Without it kernel times come from the device
    /// oracle.
    #[arg(long)]
    pub estimator: Option<PathBuf>,
    /// Query the trained model directly instead of its lookup table.
    #[arg(long)]
    pub no_table: bool,
    /// Seed of generated arrivals.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the config's arrival rate (Poisson).
    #[arg(long)]
    pub qps: Option<f64>,
    /// Submit every request at time zero.
    #[arg(long = "static", conflicts_with = "qps")]
    pub static_arrivals: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: ExportFormat,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Search config TOML.
    #[arg(long)]
    pub search_config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Concurrent configuration evaluations. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Load fractions of capacity at which SLOs are checked; the first one
    /// ranks. Falls back to the search config, whose default is 0.85.
    #[arg(long, value_delimiter = ',')]
    pub capacity_fraction: Vec<f64>,
    #[arg(long, value_enum)]
    pub objective: Option<Objective>,
    /// Pre-trained model per SKU, as SKU=PATH; repeatable.
    #[arg(long, value_parser = parse_sku_path)]
    pub estimator: Vec<(String, PathBuf)>,
    /// Price kernels with the device oracle instead of trained models.
    #[arg(long, conflicts_with = "estimator")]
    pub oracle: bool,
    /// Also write the ranked table in this format to stdout.
    #[arg(long, value_enum)]
    pub format: Option<ExportFormat>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Trace CSV.
    #[arg(long)]
    pub trace: PathBuf,
    /// Row label; defaults to the file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Also write the statistics to this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: ExportFormat,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    /// Length distribution TOML.
    #[arg(long)]
    pub distribution: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub num_requests: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add Poisson arrival times at this rate.
    #[arg(long)]
    pub qps: Option<f64>,
    /// Output trace CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_sku_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((sku, path)) if !sku.is_empty() && !path.is_empty() => Ok((sku.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected SKU=PATH, got `{s}`")),
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} error: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError {
        kind: "input",
        message: e.to_string(),
    }
}

fn output<E: std::fmt::Display>(e: E) -> CliError {
    CliError {
        kind: "output",
        message: e.to_string(),
    }
}

fn run_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError {
        kind: "run",
        message: e.to_string(),
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    /// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set.
    pub timestamp_unix: u64,
}

impl RunManifest {
    fn new(command: &str, seed: Option<u64>) -> Self {
        let timestamp_unix = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or_else(|| {
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0)
            });
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix,
        }
    }

    fn input(&mut self, p: impl AsRef<Path>) {
        self.inputs.push(p.as_ref().display().to_string());
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(output)? + "\n";
        std::fs::write(path, text).map_err(|e| output(format!("{}: {e}", path.display())))
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<File, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| output(format!("{}: {e}", parent.display())))?;
    }
    File::create(path).map_err(|e| output(format!("{}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Profile(a) => cmd_profile(a),
        Command::Train(a) => cmd_train(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Search(a) => cmd_search(a),
        Command::WorkloadStats(a) => cmd_workload_stats(a),
        Command::GenTrace(a) => cmd_gen_trace(a),
    }
}

pub fn cmd_profile(a: ProfileArgs) -> Result<(), CliError> {
    let mut m = RunManifest::new("profile", Some(a.seed));
    let spec = ModelSpec::from_path(&a.model_spec).map_err(input)?;
    let dev = DeviceProfile::load(&a.device).map_err(input)?;
    m.input(&a.model_spec);
    m.input(&a.device);
    let tps: Vec<u64> = a
        .tp
        .iter()
        .copied()
        .filter(|&tp| spec.check_parallelism(&ParallelismConfig::new(tp, 1, 1)).is_ok())
        .collect();
    if tps.is_empty() {
        return Err(input(format!("no valid tensor-parallel degree among {:?}", a.tp)));
    }
    let records = generate_profile(&spec, &tps, &dev, a.max_batch_size).map_err(run_err)?;
    write_profile_csv(create(&a.out)?, &records).map_err(output)?;
    m.outputs.push(a.out.display().to_string());
    m.write(&sidecar(&a.out, ".manifest.json"))?;
    eprintln!("wrote {} rows for tp {:?} to {}", records.len(), tps, a.out.display());
    Ok(())
}

pub fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut m = RunManifest::new("train", Some(a.seed));
    let records = ingest_profile_csv(&a.profile).map_err(input)?;
    m.input(&a.profile);
    let mut cfg = TrainConfig::default();
    cfg.forest.seed = a.seed;
    cfg.forest.n_trees = a.n_trees;
    let model = train(&records, &cfg).map_err(run_err)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(output)?;
    }
    model.save(&a.out).map_err(output)?;
    let report = model.report();
    let report_path = sidecar(&a.out, ".report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).map_err(output)? + "\n").map_err(output)?;
    for op in &report.ops {
        let held = op.held_out_mape.map(|v| format!("{:.2}%", 100.0 * v)).unwrap_or_else(|| "-".into());
        eprintln!("{:<28} {:>6} points  fit {:>6.2}%  held-out {held}", op.op, op.points, 100.0 * op.fit_mape);
    }
    m.outputs.push(a.out.display().to_string());
    m.outputs.push(report_path.display().to_string());
    m.write(&sidecar(&a.out, ".manifest.json"))
}

pub fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut m = RunManifest::new("simulate", Some(a.seed));
    let loaded = load_cluster_config(&a.cluster_config).map_err(input)?;
    m.input(&a.cluster_config);
    m.input(&loaded.model_spec_path);
    m.input(&loaded.device_ref);
    let cluster = loaded.cluster;
    let mut trace = load_trace(&a.trace).map_err(input)?;
    m.input(&a.trace);
    if a.static_arrivals {
        trace = sim::ArrivalConfig::Static.apply(&trace, a.seed).map_err(input)?;
    } else if let Some(qps) = a.qps {
        trace = poisson_arrivals(&trace, qps, a.seed).map_err(input)?;
    } else if trace.iter().any(|r| r.arrival_time.is_none()) {
        let arrivals = loaded
            .arrivals
            .ok_or_else(|| input("trace has no arrival times; set [arrivals] in the cluster config or pass --qps"))?;
        trace = arrivals.apply(&trace, a.seed).map_err(input)?;
    }
    let static_mode = trace.iter().all(|r| r.arrival_time == Some(0.0));

    let tp = cluster.parallelism.tp_degree;
    let predictor: Box<dyn RuntimePredictor> = match &a.estimator {
        None => Box::new(OraclePredictor::new(&cluster.model, &[tp], &cluster.device).map_err(input)?),
        Some(path) => {
            m.input(path);
            let model = EstimatorModel::load(path).map_err(input)?;
            let ops = profiled_kernels(&cluster.model, tp).map_err(input)?;
            model.covers(&ops).map_err(input)?;
            if a.no_table {
                Box::new(model)
            } else {
                Box::new(build_lookup_table(&model, TableConfig::default()))
            }
        }
    };
    let res = sim::run(&cluster, &trace, predictor.as_ref()).map_err(run_err)?;
    let report = metrics::compute(&res, static_mode).map_err(run_err)?;
    let files = metrics::export(&report, &a.out, a.format).map_err(output)?;
    m.outputs = files.iter().map(|f| a.out.join(f).display().to_string()).collect();
    m.write(&a.out.join("manifest.json"))?;
    let s = &report.summary;
    eprintln!(
        "{} requests, makespan {:.3}s, ttft p90 {:.4}s, tbt p99 {:.4}s, mfu {:.3}",
        report.requests.len(),
        res.makespan,
        s.ttft.as_ref().map_or(f64::NAN, |d| d.p90),
        s.tbt.as_ref().map_or(f64::NAN, |d| d.p99),
        report.cluster.mfu
    );
    if !res.violations.is_empty() {
        return Err(run_err(format!("{} scheduler violations: {}", res.violations.len(), res.violations[0])));
    }
    Ok(())
}

pub fn cmd_search(a: SearchArgs) -> Result<(), CliError> {
    let loaded = match a.seed {
        Some(seed) => search::load_search_config_with_seed(&a.search_config, seed),
        None => search::load_search_config(&a.search_config),
    }
    .map_err(input)?;
    let mut inputs = loaded.inputs;
    if !a.capacity_fraction.is_empty() {
        inputs.options.capacity_fractions = a.capacity_fraction.clone();
    }
    if let Some(o) = a.objective {
        inputs.options.objective = o;
    }
    if a.oracle {
        inputs.options.estimator = EstimatorSource::Oracle;
    } else if !a.estimator.is_empty() {
        inputs.options.estimator = EstimatorSource::Files(a.estimator.iter().cloned().collect());
    }
    inputs.options.workers = a.workers.max(1);

    let mut m = RunManifest::new("search", Some(inputs.options.seed));
    m.input(&a.search_config);
    for p in &loaded.referenced {
        m.input(p);
    }
    if let EstimatorSource::Files(f) = &inputs.options.estimator {
        for p in f.values() {
            m.input(p);
        }
    }
    let outcome = search::run_search(&inputs).map_err(run_err)?;
    let files = search::write_outputs(&outcome, &a.out).map_err(output)?;
    m.outputs = files.iter().map(|f| a.out.join(f).display().to_string()).collect();
    m.write(&a.out.join("manifest.json"))?;
    match a.format {
        Some(ExportFormat::Csv) => search::write_results_csv(std::io::stdout().lock(), &outcome.results).map_err(output)?,
        Some(ExportFormat::Json) => println!("{}", serde_json::to_string_pretty(&outcome.results).map_err(output)?),
        None => print!("{}", search::summary_text(&outcome)),
    }
    Ok(())
}

pub fn cmd_workload_stats(a: StatsArgs) -> Result<(), CliError> {
    let mut m = RunManifest::new("workload-stats", None);
    let trace = load_trace(&a.trace).map_err(input)?;
    m.input(&a.trace);
    let stats = compute_stats(&trace).map_err(input)?;
    let name = a
        .name
        .clone()
        .unwrap_or_else(|| a.trace.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    print!("{}", stats.table(&name));
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(output)?;
        let path = match a.format {
            ExportFormat::Json => {
                let p = dir.join("stats.json");
                std::fs::write(&p, serde_json::to_string_pretty(&stats).map_err(output)? + "\n").map_err(output)?;
                p
            }
            ExportFormat::Csv => {
                let p = dir.join("stats.csv");
                let mut w = csv::Writer::from_writer(create(&p)?);
                w.write_record([
                    "trace", "num_requests", "prefill_mean", "prefill_median", "prefill_p90", "decode_mean",
                    "decode_median", "decode_p90", "pd_ratio_median", "pd_ratio_std",
                ])
                .map_err(output)?;
                w.write_record([
                    name.clone(),
                    stats.num_requests.to_string(),
                    stats.prefill.mean.to_string(),
                    stats.prefill.median.to_string(),
                    stats.prefill.p90.to_string(),
                    stats.decode.mean.to_string(),
                    stats.decode.median.to_string(),
                    stats.decode.p90.to_string(),
                    stats.pd_ratio_median.to_string(),
                    stats.pd_ratio_std.to_string(),
                ])
                .map_err(output)?;
                w.flush().map_err(output)?;
                p
            }
        };
        m.outputs.push(path.display().to_string());
        m.write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

pub fn cmd_gen_trace(a: GenTraceArgs) -> Result<(), CliError> {
    let mut m = RunManifest::new("gen-trace", Some(a.seed));
    let text = std::fs::read_to_string(&a.distribution).map_err(|e| input(format!("{}: {e}", a.distribution.display())))?;
    let dist = TraceDistribution::from_toml(&text).map_err(input)?;
    m.input(&a.distribution);
    let mut trace = synth_trace(&dist, a.num_requests, a.seed).map_err(run_err)?;
    if let Some(qps) = a.qps {
        // separate stream from the lengths
        trace = poisson_arrivals(&trace, qps, a.seed.wrapping_add(1)).map_err(run_err)?;
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(output)?;
    }
    save_trace(&a.out, &trace).map_err(output)?;
    m.outputs.push(a.out.display().to_string());
    m.write(&sidecar(&a.out, ".manifest.json"))
}
