//! Deployment search: enumerate configurations, find each one's capacity
//! by bisection on arrival rate, score it per dollar, check latency SLOs
//! and extract Pareto frontiers.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{build_lookup_table, train, EstimatorModel, RuntimePredictor, TableConfig, TrainConfig};
use crate::metrics::{self, percentile};
use crate::model_spec::{ModelSpec, ParallelismConfig};
use crate::profiler::{generate_profile, DeviceProfile, OraclePredictor};
use crate::scheduler::{MemoryConfig, PolicyConfig, PolicyKind, RoutingPolicy};
use crate::sim::{self, BatchPricer, ClusterConfig, SimulationResult};
use crate::workload::{cap_total_length, load_trace, poisson_arrivals, synth_trace, Request, TraceDistribution};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search space is empty: {0}")]
    EmptySpace(String),
    #[error("no hourly rate for SKU `{0}`")]
    UnknownSku(String),
    #[error("search config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error(transparent)]
    Profile(#[from] crate::profiler::ProfileError),
    #[error(transparent)]
    Spec(#[from] crate::model_spec::ModelSpecError),
    #[error(transparent)]
    Workload(#[from] crate::workload::WorkloadError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub skus: Vec<String>,
    pub tp_degrees: Vec<u64>,
    #[serde(default = "default_pp")]
    pub pp_degrees: Vec<u64>,
    pub schedulers: Vec<PolicyKind>,
    pub batch_sizes: Vec<u64>,
    /// Only expands Sarathi configurations.
    #[serde(default = "default_chunks")]
    pub chunk_sizes: Vec<u64>,
    #[serde(default = "default_max_gpus")]
    pub max_gpus_total: u64,
}

fn default_pp() -> Vec<u64> {
    vec![1]
}

fn default_chunks() -> Vec<u64> {
    vec![512]
}

fn default_max_gpus() -> u64 {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slos {
    pub ttft_p90_max: f64,
    pub tbt_p99_max: f64,
    /// Capacity threshold on p99 scheduling delay.
    pub delay_p99_max: f64,
}

impl Default for Slos {
    fn default() -> Self {
        Self {
            ttft_p90_max: 2.0,
            tbt_p99_max: 0.2,
            delay_p99_max: 5.0,
        }
    }
}

impl Slos {
    pub fn unbounded() -> Self {
        Self {
            ttft_p90_max: f64::INFINITY,
            tbt_p99_max: f64::INFINITY,
            delay_p99_max: 5.0,
        }
    }
}

/// Dollars per GPU-hour by SKU. Defaults are placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable(pub BTreeMap<String, f64>);

impl Default for CostTable {
    fn default() -> Self {
        Self(BTreeMap::from([("A100-80G".to_string(), 2.0), ("H100-80G".to_string(), 4.0)]))
    }
}

impl CostTable {
    pub fn rate(&self, sku: &str) -> Result<f64, SearchError> {
        match self.0.get(sku) {
            Some(&r) if r > 0.0 && r.is_finite() => Ok(r),
            Some(&r) => Err(SearchError::Invalid(format!("hourly rate for `{sku}` must be positive, got {r}"))),
            None => Err(SearchError::UnknownSku(sku.to_string())),
        }
    }
}

/// Capacity per dollar-hour of the GPUs a deployment rents.
pub fn qps_per_dollar(capacity: f64, gpus: u64, sku: &str, cost: &CostTable) -> Result<f64, SearchError> {
    let rate = cost.rate(sku)?;
    Ok(capacity / (gpus as f64 * rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentConfig {
    pub sku: String,
    pub parallelism: ParallelismConfig,
    pub scheduler: PolicyConfig,
}

impl DeploymentConfig {
    pub fn id(&self) -> String {
        let p = &self.parallelism;
        let mut id = format!(
            "{}_tp{}_pp{}_r{}_{}_bs{}",
            self.sku, p.tp_degree, p.pp_degree, p.num_replicas, self.scheduler.policy, self.scheduler.max_batch_size
        );
        if self.scheduler.policy == PolicyKind::SarathiServe {
            id.push_str(&format!("_c{}", self.scheduler.chunk_size));
        }
        id
    }

    pub fn gpus(&self) -> u64 {
        self.parallelism.total_gpus()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub config_id: String,
    pub reason: String,
}

fn sorted_unique(v: &[u64]) -> Vec<u64> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Every valid deployment in `space`, in knob order: SKU (as listed), TP,
/// PP, scheduler, batch size, chunk size. Replicas fill the GPU budget.
pub fn enumerate(
    space: &SearchSpace,
    spec: &ModelSpec,
    devices: &BTreeMap<String, DeviceProfile>,
    memory: &MemoryConfig,
) -> Result<(Vec<DeploymentConfig>, Vec<Skipped>), SearchError> {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    let mut schedulers = space.schedulers.clone();
    schedulers.sort();
    schedulers.dedup();
    for sku in &space.skus {
        let dev = devices
            .get(sku)
            .ok_or_else(|| SearchError::Invalid(format!("no device profile for SKU `{sku}`")))?;
        for &tp in &sorted_unique(&space.tp_degrees) {
            for &pp in &sorted_unique(&space.pp_degrees) {
                let per_replica = tp * pp;
                let replicas = space.max_gpus_total.checked_div(per_replica).unwrap_or(0);
                let par = ParallelismConfig::new(tp, pp, replicas.max(1));
                let base_reason = if replicas == 0 {
                    Some(format!("tp {tp} x pp {pp} exceeds the {} GPU budget", space.max_gpus_total))
                } else {
                    spec.check_parallelism(&par).err().map(|e| e.to_string())
                };
                for &policy in &schedulers {
                    let chunks = if policy == PolicyKind::SarathiServe {
                        sorted_unique(&space.chunk_sizes)
                    } else {
                        vec![default_chunk_for(space)]
                    };
                    for &bs in &sorted_unique(&space.batch_sizes) {
                        for &chunk in &chunks {
                            let cfg = DeploymentConfig {
                                sku: sku.clone(),
                                parallelism: par,
                                scheduler: PolicyConfig::new(policy, bs).with_chunk(chunk),
                            };
                            let reason = base_reason.clone().or_else(|| {
                                let cluster = ClusterConfig {
                                    memory: *memory,
                                    ..ClusterConfig::new(spec.clone(), dev.clone(), par, cfg.scheduler)
                                };
                                cluster.validate().and_then(|_| Ok(cluster.memory_plan()?)).err().map(|e| e.to_string())
                            });
                            match reason {
                                Some(reason) => skipped.push(Skipped {
                                    config_id: cfg.id(),
                                    reason,
                                }),
                                None => out.push(cfg),
                            }
                        }
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(SearchError::EmptySpace(format!("{} configurations skipped", skipped.len())));
    }
    Ok((out, skipped))
}

fn default_chunk_for(space: &SearchSpace) -> u64 {
    space.chunk_sizes.first().copied().unwrap_or(512)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityParams {
    /// First upper probe; doubled while feasible.
    pub initial_qps: f64,
    /// Stop once `(hi - lo) / lo` is at most this.
    pub tolerance: f64,
    /// Rates below this count as no capacity.
    pub min_qps: f64,
    pub max_doublings: u32,
}

impl Default for CapacityParams {
    fn default() -> Self {
        Self {
            initial_qps: 1.0,
            tolerance: 0.02,
            min_qps: 1e-3,
            max_doublings: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capacity {
    pub qps: f64,
    pub probes: u32,
    pub reason: Option<String>,
}

/// Largest rate `feasible` accepts, assuming feasibility is monotone
/// decreasing in rate. Doubles an upper bound until it fails, then bisects
/// until the bracket is within `tolerance` of its lower end, returning that
/// lower end.
pub fn find_capacity<F: FnMut(f64) -> bool>(mut feasible: F, params: &CapacityParams) -> Capacity {
    let mut probes = 0;
    let mut probe = |q: f64| {
        probes += 1;
        feasible(q)
    };
    let (mut lo, mut hi) = (0.0_f64, params.initial_qps.max(params.min_qps));
    let mut doublings = 0;
    while probe(hi) {
        lo = hi;
        if doublings == params.max_doublings {
            return Capacity {
                qps: lo,
                probes,
                reason: Some("feasible at every probed rate".into()),
            };
        }
        hi *= 2.0;
        doublings += 1;
    }
    loop {
        if lo > 0.0 && (hi - lo) <= params.tolerance * lo {
            break;
        }
        if lo == 0.0 && hi < params.min_qps {
            return Capacity {
                qps: 0.0,
                probes,
                reason: Some(format!("infeasible at every rate down to {}", params.min_qps)),
            };
        }
        let mid = 0.5 * (lo + hi);
        if probe(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Capacity {
        qps: lo,
        probes,
        reason: None,
    }
}

/// Indices of the points not dominated under (lower latency, higher
/// qps/dollar), in input order.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[b].1.total_cmp(&points[a].1))
    });
    let mut keep = vec![false; points.len()];
    // best qps/dollar among points with strictly lower latency
    let mut best_before = f64::NEG_INFINITY;
    let mut i = 0;
    while i < idx.len() {
        let lat = points[idx[i]].0;
        let mut j = i;
        while j < idx.len() && points[idx[j]].0 == lat {
            j += 1;
        }
        let group_best = points[idx[i]].1;
        for &k in &idx[i..j] {
            let q = points[k].1;
            keep[k] = q == group_best && q > best_before;
        }
        best_before = best_before.max(group_best);
        i = j;
    }
    (0..points.len()).filter(|&k| keep[k]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Capacity under the delay threshold per dollar-hour.
    QpsPerDollar,
    /// Cost of finishing the whole trace submitted at once.
    Makespan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloEval {
    pub fraction: f64,
    pub qps: f64,
    pub ttft_p90: f64,
    pub tbt_p99: f64,
    pub delay_p99: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub config_id: String,
    pub config: DeploymentConfig,
    pub gpus: u64,
    pub capacity_qps: f64,
    pub qps_per_dollar: f64,
    /// At the first evaluation fraction.
    pub ttft_p90: f64,
    pub tbt_p99: f64,
    pub slo_pass: bool,
    pub evaluations: Vec<SloEval>,
    pub probes: u32,
    /// Makespan objective only.
    pub makespan_s: Option<f64>,
    pub cost_usd: Option<f64>,
    pub note: Option<String>,
}

/// Where per-kernel runtimes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorSource {
    /// Profile with the device oracle, train, and sample a lookup table.
    Trained,
    /// Query the device oracle directly.
    Oracle,
    /// Pre-trained models by SKU.
    Files(BTreeMap<String, PathBuf>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Fewest requests in a probe; also the SLO evaluation length.
    pub num_requests: usize,
    /// Probes at rate `q` run at least `q × probe_duration_s` requests so
    /// that overload shows up as queueing even when every batch slot of
    /// the cluster could absorb `num_requests` at once.
    pub probe_duration_s: f64,
    pub max_probe_requests: usize,
    pub seed: u64,
    pub capacity: CapacityParams,
    pub capacity_fractions: Vec<f64>,
    pub objective: Objective,
    pub workers: usize,
    pub estimator: EstimatorSource,
    pub memory: MemoryConfig,
    pub router: RoutingPolicy,
    pub cpu_overhead_per_iter: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            num_requests: 2000,
            probe_duration_s: 60.0,
            max_probe_requests: 100_000,
            seed: 0,
            capacity: CapacityParams::default(),
            capacity_fractions: vec![0.85],
            objective: Objective::QpsPerDollar,
            workers: 1,
            estimator: EstimatorSource::Trained,
            memory: MemoryConfig::default(),
            router: RoutingPolicy::RoundRobin,
            cpu_overhead_per_iter: 0.0,
        }
    }
}

/// Everything a search needs, resolved.
#[derive(Debug, Clone)]
pub struct SearchInputs {
    pub model: ModelSpec,
    pub devices: BTreeMap<String, DeviceProfile>,
    pub space: SearchSpace,
    pub slos: Slos,
    pub cost: CostTable,
    /// Request lengths; arrival times are ignored.
    pub workload: Vec<Request>,
    pub options: SearchOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub config_id: String,
    pub latency_metric: f64,
    pub qps_per_dollar: f64,
    pub slo_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Passing configs by qps/dollar, then failing ones; ties by id.
    pub results: Vec<ConfigResult>,
    pub skipped: Vec<Skipped>,
    pub frontier_ttft_p90: Vec<FrontierPoint>,
    pub frontier_tbt_p99: Vec<FrontierPoint>,
    pub optimum: Option<String>,
}

type Predictors = BTreeMap<(String, u64), Arc<dyn RuntimePredictor + Send>>;

fn build_predictors(inputs: &SearchInputs, configs: &[DeploymentConfig]) -> Result<Predictors, SearchError> {
    let mut keys: Vec<(String, u64)> = configs.iter().map(|c| (c.sku.clone(), c.parallelism.tp_degree)).collect();
    keys.sort();
    keys.dedup();
    let max_bs = configs.iter().map(|c| c.scheduler.max_batch_size).max().unwrap_or(512);
    let opts = &inputs.options;
    let built = crate::parallel::map_with_workers(&keys, opts.workers, |(sku, tp)| {
        let dev = &inputs.devices[sku];
        let p: Arc<dyn RuntimePredictor + Send> = match &opts.estimator {
            EstimatorSource::Oracle => Arc::new(OraclePredictor::new(&inputs.model, &[*tp], dev)?),
            EstimatorSource::Trained => {
                let recs = generate_profile(&inputs.model, &[*tp], dev, max_bs)?;
                let model = train(&recs, &TrainConfig::default())?;
                Arc::new(build_lookup_table(&model, TableConfig::default()))
            }
            EstimatorSource::Files(paths) => {
                let path = paths
                    .get(sku)
                    .ok_or_else(|| SearchError::Invalid(format!("no estimator file for SKU `{sku}`")))?;
                Arc::new(build_lookup_table(&EstimatorModel::load(path)?, TableConfig::default()))
            }
        };
        Ok::<_, SearchError>(((sku.clone(), *tp), p))
    });
    built.into_iter().collect()
}

fn cluster_for(inputs: &SearchInputs, c: &DeploymentConfig) -> ClusterConfig {
    ClusterConfig {
        memory: inputs.options.memory,
        router: inputs.options.router,
        cpu_overhead_per_iter: inputs.options.cpu_overhead_per_iter,
        ..ClusterConfig::new(inputs.model.clone(), inputs.devices[&c.sku].clone(), c.parallelism, c.scheduler)
    }
}

fn simulate_at(
    cluster: &ClusterConfig,
    predictor: &dyn RuntimePredictor,
    workload: &[Request],
    qps: f64,
    seed: u64,
) -> Result<SimulationResult, SearchError> {
    let trace = poisson_arrivals(workload, qps, seed)?;
    Ok(sim::run(cluster, &trace, predictor)?)
}

/// `n` requests cycling through `workload`, renumbered.
fn probe_requests(workload: &[Request], n: usize) -> Vec<Request> {
    (0..n)
        .map(|i| Request {
            id: i as u64,
            ..workload[i % workload.len()].clone()
        })
        .collect()
}

/// Whether `qps` keeps p99 scheduling delay within the threshold. Stops the
/// simulation as soon as enough requests are late to decide the p99.
pub fn probe_capacity(
    cluster: &ClusterConfig,
    predictor: &dyn RuntimePredictor,
    workload: &[Request],
    qps: f64,
    slos: &Slos,
    opts: &SearchOptions,
) -> Result<bool, SearchError> {
    let n = ((qps * opts.probe_duration_s).ceil() as usize).clamp(opts.num_requests.min(opts.max_probe_requests), opts.max_probe_requests);
    let trace = poisson_arrivals(&probe_requests(workload, n), qps, opts.seed)?;
    let stop = sim::EarlyStop {
        delay_threshold: slos.delay_p99_max,
        max_late: n - metrics::rank_index(0.99, n),
    };
    let (res, stopped) = sim::run_with_stop(cluster, &trace, predictor, Some(stop))?;
    Ok(!stopped && latency_percentiles(&res).2 <= slos.delay_p99_max)
}

fn latency_percentiles(res: &SimulationResult) -> (f64, f64, f64) {
    let ttft: Vec<f64> = res.requests.iter().map(|r| r.first_token - r.arrival).collect();
    let delay: Vec<f64> = res.requests.iter().map(|r| r.first_scheduled - r.arrival).collect();
    let tbt: Vec<f64> = res
        .requests
        .iter()
        .flat_map(|r| r.token_times.windows(2).map(|w| w[1] - w[0]))
        .collect();
    let p = |v: &[f64], q| percentile(v, q).unwrap_or(0.0);
    (p(&ttft, 0.9), p(&tbt, 0.99), p(&delay, 0.99))
}

/// Simulates at each `fraction × capacity` and checks the SLOs.
pub fn evaluate_slo(
    cluster: &ClusterConfig,
    predictor: &dyn RuntimePredictor,
    workload: &[Request],
    capacity: f64,
    fractions: &[f64],
    slos: &Slos,
    seed: u64,
) -> Result<Vec<SloEval>, SearchError> {
    fractions
        .iter()
        .map(|&fraction| {
            let qps = fraction * capacity;
            let res = simulate_at(cluster, predictor, workload, qps, seed)?;
            let (ttft_p90, tbt_p99, delay_p99) = latency_percentiles(&res);
            Ok(SloEval {
                fraction,
                qps,
                ttft_p90,
                tbt_p99,
                delay_p99,
                pass: ttft_p90 <= slos.ttft_p90_max && tbt_p99 <= slos.tbt_p99_max,
            })
        })
        .collect()
}

/// Rate at which every request would get its own prefill-only iteration.
fn initial_guess(cluster: &ClusterConfig, predictor: &dyn RuntimePredictor, workload: &[Request]) -> f64 {
    let mean_prompt = workload.iter().map(|r| r.prefill_tokens).sum::<u64>() / workload.len().max(1) as u64;
    let plan = crate::scheduler::BatchPlan {
        prefills: vec![crate::scheduler::PrefillEntry {
            id: 0,
            tokens: mean_prompt.max(1),
            prior_context: 0,
        }],
        ..Default::default()
    };
    let t = BatchPricer::new(cluster, predictor)
        .and_then(|p| p.latency(&plan).map_err(|e| e.into_sim(&plan)))
        .unwrap_or(0.0);
    if t > 0.0 {
        cluster.parallelism.num_replicas as f64 / t
    } else {
        1.0
    }
}

trait IntoSim {
    fn into_sim(self, plan: &crate::scheduler::BatchPlan) -> sim::SimError;
}

impl IntoSim for crate::estimator::EstimatorError {
    fn into_sim(self, plan: &crate::scheduler::BatchPlan) -> sim::SimError {
        sim::SimError::Estimate {
            replica: 0,
            time: 0.0,
            batch: format!("{:?}", plan.composition()),
            source: self,
        }
    }
}

fn evaluate_config(
    inputs: &SearchInputs,
    c: &DeploymentConfig,
    predictor: &dyn RuntimePredictor,
) -> Result<ConfigResult, SearchError> {
    let opts = &inputs.options;
    let cluster = cluster_for(inputs, c);
    let workload = &inputs.workload;
    let mut result = ConfigResult {
        config_id: c.id(),
        config: c.clone(),
        gpus: c.gpus(),
        capacity_qps: 0.0,
        qps_per_dollar: 0.0,
        ttft_p90: f64::NAN,
        tbt_p99: f64::NAN,
        slo_pass: false,
        evaluations: Vec::new(),
        probes: 0,
        makespan_s: None,
        cost_usd: None,
        note: None,
    };
    let rate = inputs.cost.rate(&c.sku)?;
    match opts.objective {
        Objective::Makespan => {
            let trace: Vec<Request> = workload
                .iter()
                .map(|r| Request {
                    arrival_time: Some(0.0),
                    ..r.clone()
                })
                .collect();
            let res = sim::run(&cluster, &trace, predictor)?;
            let (_, tbt_p99, _) = latency_percentiles(&res);
            let makespan = res.makespan;
            result.makespan_s = Some(makespan);
            result.cost_usd = Some(makespan / 3600.0 * c.gpus() as f64 * rate);
            result.capacity_qps = if makespan > 0.0 { workload.len() as f64 / makespan } else { 0.0 };
            result.qps_per_dollar = qps_per_dollar(result.capacity_qps, c.gpus(), &c.sku, &inputs.cost)?;
            result.tbt_p99 = tbt_p99;
            result.slo_pass = tbt_p99 <= inputs.slos.tbt_p99_max;
            result.probes = 1;
        }
        Objective::QpsPerDollar => {
            let mut first_error = None;
            let params = CapacityParams {
                initial_qps: initial_guess(&cluster, predictor, workload),
                ..opts.capacity
            };
            let cap = find_capacity(
                |qps| match probe_capacity(&cluster, predictor, workload, qps, &inputs.slos, opts) {
                    Ok(ok) => ok,
                    Err(e) => {
                        first_error.get_or_insert(e.to_string());
                        false
                    }
                },
                &params,
            );
            result.probes = cap.probes;
            result.capacity_qps = cap.qps;
            result.note = first_error.or(cap.reason);
            if cap.qps > 0.0 {
                result.qps_per_dollar = qps_per_dollar(cap.qps, c.gpus(), &c.sku, &inputs.cost)?;
                result.evaluations = evaluate_slo(
                    &cluster,
                    predictor,
                    workload,
                    cap.qps,
                    &opts.capacity_fractions,
                    &inputs.slos,
                    opts.seed,
                )?;
                if let Some(e) = result.evaluations.first() {
                    result.ttft_p90 = e.ttft_p90;
                    result.tbt_p99 = e.tbt_p99;
                    result.slo_pass = e.pass;
                }
            }
        }
    }
    Ok(result)
}

fn rank(results: &mut [ConfigResult]) {
    results.sort_by(|a, b| {
        b.slo_pass
            .cmp(&a.slo_pass)
            .then(b.qps_per_dollar.total_cmp(&a.qps_per_dollar))
            .then(a.config_id.cmp(&b.config_id))
    });
}

fn frontier(results: &[ConfigResult], latency: fn(&ConfigResult) -> f64) -> Vec<FrontierPoint> {
    let eligible: Vec<&ConfigResult> = results
        .iter()
        .filter(|r| r.capacity_qps > 0.0 && latency(r).is_finite())
        .collect();
    let pts: Vec<(f64, f64)> = eligible.iter().map(|r| (latency(r), r.qps_per_dollar)).collect();
    pareto_frontier(&pts)
        .into_iter()
        .map(|i| FrontierPoint {
            config_id: eligible[i].config_id.clone(),
            latency_metric: pts[i].0,
            qps_per_dollar: pts[i].1,
            slo_pass: eligible[i].slo_pass,
        })
        .collect()
}

/// Evaluates every configuration in `inputs.space` (concurrently, up to
/// `options.workers`) and ranks them. Per-config failures are recorded in
/// the result's note rather than aborting.
pub fn run_search(inputs: &SearchInputs) -> Result<SearchOutcome, SearchError> {
    if inputs.workload.is_empty() {
        return Err(SearchError::Invalid("search workload is empty".into()));
    }
    let (configs, skipped) = enumerate(&inputs.space, &inputs.model, &inputs.devices, &inputs.options.memory)?;
    for c in &configs {
        inputs.cost.rate(&c.sku)?;
    }
    let predictors = build_predictors(inputs, &configs)?;
    let mut results: Vec<ConfigResult> = crate::parallel::map_with_workers(&configs, inputs.options.workers, |c| {
        let p = &predictors[&(c.sku.clone(), c.parallelism.tp_degree)];
        evaluate_config(inputs, c, p.as_ref()).unwrap_or_else(|e| ConfigResult {
            config_id: c.id(),
            config: c.clone(),
            gpus: c.gpus(),
            capacity_qps: 0.0,
            qps_per_dollar: 0.0,
            ttft_p90: f64::NAN,
            tbt_p99: f64::NAN,
            slo_pass: false,
            evaluations: Vec::new(),
            probes: 0,
            makespan_s: None,
            cost_usd: None,
            note: Some(e.to_string()),
        })
    });
    rank(&mut results);
    let optimum = results.first().filter(|r| r.slo_pass && r.capacity_qps > 0.0).map(|r| r.config_id.clone());
    Ok(SearchOutcome {
        frontier_ttft_p90: frontier(&results, |r| r.ttft_p90),
        frontier_tbt_p99: frontier(&results, |r| r.tbt_p99),
        results,
        skipped,
        optimum,
    })
}

/// Search config file, as written on disk.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchFile {
    model_spec: PathBuf,
    space: SearchSpace,
    workload: WorkloadFile,
    #[serde(default)]
    slos: Option<Slos>,
    #[serde(default)]
    costs: Option<BTreeMap<String, f64>>,
    /// Extra device profiles by SKU name.
    #[serde(default)]
    devices: BTreeMap<String, PathBuf>,
    #[serde(default)]
    num_requests: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    capacity_tolerance: Option<f64>,
    #[serde(default)]
    capacity_fractions: Option<Vec<f64>>,
    #[serde(default)]
    objective: Option<Objective>,
    #[serde(default)]
    estimator: Option<String>,
    #[serde(default)]
    estimator_files: BTreeMap<String, PathBuf>,
    #[serde(default)]
    memory: Option<MemoryConfig>,
    #[serde(default)]
    router: Option<RoutingPolicy>,
    #[serde(default)]
    cpu_overhead_per_iter: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadFile {
    #[serde(default)]
    trace: Option<PathBuf>,
    #[serde(default)]
    distribution: Option<TraceDistribution>,
    #[serde(default)]
    distribution_file: Option<PathBuf>,
}

/// A loaded search config plus the files it referenced.
#[derive(Debug, Clone)]
pub struct LoadedSearch {
    pub inputs: SearchInputs,
    pub referenced: Vec<PathBuf>,
}

/// Reads a TOML search config; relative paths resolve against its
/// directory.
pub fn load_search_config(path: impl AsRef<Path>) -> Result<LoadedSearch, SearchError> {
    load_search_config_inner(path.as_ref(), None)
}

/// As [`load_search_config`], with `seed` replacing the file's seed before
/// any workload is sampled.
pub fn load_search_config_with_seed(path: impl AsRef<Path>, seed: u64) -> Result<LoadedSearch, SearchError> {
    load_search_config_inner(path.as_ref(), Some(seed))
}

fn load_search_config_inner(path: &Path, seed_override: Option<u64>) -> Result<LoadedSearch, SearchError> {
    let err = |msg: String| SearchError::Config {
        path: path.to_path_buf(),
        msg,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let f: SearchFile = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut referenced = Vec::new();
    let model_path = base.join(&f.model_spec);
    let model = ModelSpec::from_path(&model_path)?;
    referenced.push(model_path);

    let mut devices = BTreeMap::new();
    for sku in &f.space.skus {
        if let Some(p) = f.devices.get(sku) {
            let p = base.join(p);
            let mut d = DeviceProfile::load(&p.to_string_lossy())?;
            d.sku_name = sku.clone();
            devices.insert(sku.clone(), d);
            referenced.push(p);
        } else {
            let d = DeviceProfile::builtin(sku).ok_or_else(|| err(format!("unknown SKU `{sku}`; add it under [devices]")))?;
            devices.insert(sku.clone(), d);
        }
    }

    let mut options = SearchOptions::default();
    if let Some(n) = f.num_requests {
        options.num_requests = n;
    }
    if let Some(s) = seed_override.or(f.seed) {
        options.seed = s;
    }
    if let Some(t) = f.capacity_tolerance {
        options.capacity.tolerance = t;
    }
    if let Some(fr) = f.capacity_fractions {
        options.capacity_fractions = fr;
    }
    if let Some(o) = f.objective {
        options.objective = o;
    }
    options.estimator = match f.estimator.as_deref() {
        None | Some("trained") => EstimatorSource::Trained,
        Some("oracle") => EstimatorSource::Oracle,
        Some("files") => EstimatorSource::Files(f.estimator_files.iter().map(|(k, v)| (k.clone(), base.join(v))).collect()),
        Some(other) => return Err(err(format!("estimator must be trained, oracle or files, got `{other}`"))),
    };
    if let Some(m) = f.memory {
        options.memory = m;
    }
    if let Some(r) = f.router {
        options.router = r;
    }
    if let Some(c) = f.cpu_overhead_per_iter {
        options.cpu_overhead_per_iter = c;
    }

    let w = f.workload;
    let workload = match (w.trace, w.distribution, w.distribution_file) {
        (Some(t), None, None) => {
            let p = base.join(t);
            let w = load_trace(&p)?;
            referenced.push(p);
            w
        }
        (None, Some(d), None) => synth_trace(&d, options.num_requests, options.seed)?,
        (None, None, Some(df)) => {
            let p = base.join(df);
            let text = std::fs::read_to_string(&p).map_err(|e| err(format!("{}: {e}", p.display())))?;
            let d = TraceDistribution::from_toml(&text)?;
            referenced.push(p);
            synth_trace(&d, options.num_requests, options.seed)?
        }
        _ => {
            return Err(err(
                "[workload] needs exactly one of `trace`, `distribution` or `distribution_file`".into(),
            ))
        }
    };
    let inputs = SearchInputs {
        model,
        devices,
        space: f.space,
        slos: f.slos.unwrap_or_default(),
        cost: f.costs.map(CostTable).unwrap_or_default(),
        workload: Vec::new(),
        options,
    };
    Ok(LoadedSearch {
        inputs: inputs.with_workload(workload),
        referenced,
    })
}

impl SearchInputs {
    /// Installs `requests` as the probe workload: the first
    /// `num_requests`, capped to the model context.
    pub fn with_workload(mut self, requests: Vec<Request>) -> Self {
        let n = self.options.num_requests.min(requests.len());
        self.workload = cap_total_length(&requests[..n], self.model.max_context);
        self
    }
}

fn f(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

pub const RESULTS_CSV_HEADER: &str = "rank,config_id,sku,tp_degree,pp_degree,replicas,gpus,scheduler,batch_size,\
chunk_size,capacity_qps,qps_per_dollar,ttft_p90_s,tbt_p99_s,slo_pass,probes,makespan_s,cost_usd,note";

pub fn write_results_csv<W: Write>(w: W, results: &[ConfigResult]) -> Result<(), SearchError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(RESULTS_CSV_HEADER.split(','))?;
    for (i, r) in results.iter().enumerate() {
        let c = &r.config;
        let chunk = if c.scheduler.policy == PolicyKind::SarathiServe {
            c.scheduler.chunk_size.to_string()
        } else {
            String::new()
        };
        wtr.write_record([
            (i + 1).to_string(),
            r.config_id.clone(),
            c.sku.clone(),
            c.parallelism.tp_degree.to_string(),
            c.parallelism.pp_degree.to_string(),
            c.parallelism.num_replicas.to_string(),
            r.gpus.to_string(),
            c.scheduler.policy.to_string(),
            c.scheduler.max_batch_size.to_string(),
            chunk,
            f(r.capacity_qps),
            f(r.qps_per_dollar),
            f(r.ttft_p90),
            f(r.tbt_p99),
            r.slo_pass.to_string(),
            r.probes.to_string(),
            r.makespan_s.map(f).unwrap_or_default(),
            r.cost_usd.map(f).unwrap_or_default(),
            r.note.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_frontier_csv<W: Write>(w: W, points: &[FrontierPoint]) -> Result<(), SearchError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["config_id", "latency_metric", "qps_per_dollar", "slo_pass"])?;
    for p in points {
        wtr.write_record([p.config_id.clone(), f(p.latency_metric), f(p.qps_per_dollar), p.slo_pass.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Human-readable summary naming the optimum.
pub fn summary_text(o: &SearchOutcome) -> String {
    let mut s = String::new();
    let passing = o.results.iter().filter(|r| r.slo_pass).count();
    s.push_str(&format!(
        "{} configurations evaluated, {} meet the SLOs, {} skipped\n",
        o.results.len(),
        passing,
        o.skipped.len()
    ));
    match o.optimum.as_deref().and_then(|id| o.results.iter().find(|r| r.config_id == id)) {
        Some(r) => s.push_str(&format!(
            "optimum: {} capacity {:.3} qps, {:.5} qps per dollar-hour, ttft p90 {:.3}s, tbt p99 {:.4}s\n",
            r.config_id, r.capacity_qps, r.qps_per_dollar, r.ttft_p90, r.tbt_p99
        )),
        None => s.push_str("optimum: none (no configuration meets the SLOs)\n"),
    }
    s
}

/// Writes the ranked table (CSV and JSON), both frontiers, skipped
/// configs and the summary into `dir`. Returns the file names.
pub fn write_outputs(o: &SearchOutcome, dir: impl AsRef<Path>) -> Result<Vec<String>, SearchError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_results_csv(std::fs::File::create(dir.join("results.csv"))?, &o.results)?;
    std::fs::write(dir.join("results.json"), serde_json::to_string_pretty(o)? + "\n")?;
    write_frontier_csv(std::fs::File::create(dir.join("frontier_ttft_p90.csv"))?, &o.frontier_ttft_p90)?;
    write_frontier_csv(std::fs::File::create(dir.join("frontier_tbt_p99.csv"))?, &o.frontier_tbt_p99)?;
    std::fs::write(dir.join("summary.txt"), summary_text(o))?;
    Ok(["results.csv", "results.json", "frontier_ttft_p90.csv", "frontier_tbt_p99.csv", "summary.txt"]
        .map(String::from)
        .to_vec())
}

/// Per-request metrics of one evaluation run, for inspection.
pub fn metrics_at(
    inputs: &SearchInputs,
    c: &DeploymentConfig,
    predictor: &dyn RuntimePredictor,
    qps: f64,
) -> Result<metrics::MetricsReport, SearchError> {
    let res = simulate_at(&cluster_for(inputs, c), predictor, &inputs.workload, qps, inputs.options.seed)?;
    metrics::compute(&res, false).map_err(|e| SearchError::Invalid(e.to_string()))
}
