//! Request-, replica- and cluster-level metrics over a simulation result,
//! with CSV and JSON export.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{IterationRecord, RequestRecord, SimulationResult};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("percentile of an empty sample")]
    Empty,
    #[error("percentile rank {0} is outside (0, 1]")]
    Rank(f64),
    #[error("request {0} did not complete")]
    Incomplete(u64),
    #[error("metrics csv line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Nearest-rank percentile: the `ceil(q·n)`-th smallest sample.
pub fn percentile(samples: &[f64], q: f64) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(MetricsError::Rank(q));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[rank_index(q, v.len())])
}

/// Zero-based index of the nearest-rank `q` percentile among `n` sorted
/// samples.
pub fn rank_index(q: f64, n: usize) -> usize {
    // q·n is computed in floating point; shave rounding noise so that e.g.
    // 0.9·10 counts as 9, not 9.000000000000002
    let x = q * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (k as usize).clamp(1, n) - 1
}

/// End-to-end latency per output token.
pub fn normalized_latency(r: &RequestRecord, exclude_scheduling_delay: bool) -> f64 {
    let start = if exclude_scheduling_delay { r.first_scheduled } else { r.arrival };
    (r.completion - start) / r.decode_tokens as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: u64,
    pub replica: usize,
    pub arrival: f64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub scheduling_delay: f64,
    pub ttft: f64,
    pub e2e_latency: f64,
    pub normalized_latency: f64,
    pub restarts: u32,
    /// Gaps between consecutive output tokens, first token excluded.
    pub tbt_samples: Vec<f64>,
}

impl RequestMetrics {
    pub fn from_record(r: &RequestRecord, exclude_scheduling_delay: bool) -> Result<Self, MetricsError> {
        if r.completion.is_nan() || r.token_times.len() as u64 != r.decode_tokens {
            return Err(MetricsError::Incomplete(r.id));
        }
        Ok(Self {
            id: r.id,
            replica: r.replica,
            arrival: r.arrival,
            prefill_tokens: r.prefill_tokens,
            decode_tokens: r.decode_tokens,
            scheduling_delay: r.first_scheduled - r.arrival,
            ttft: r.first_token - r.arrival,
            e2e_latency: r.completion - r.arrival,
            normalized_latency: normalized_latency(r, exclude_scheduling_delay),
            restarts: r.restarts,
            tbt_samples: r.token_times.windows(2).map(|w| w[1] - w[0]).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl Distribution {
    pub fn of(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| v[rank_index(q, v.len())];
        Some(Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: at(0.5),
            p90: at(0.9),
            p95: at(0.95),
            p99: at(0.99),
            max: v[v.len() - 1],
        })
    }
}

/// Fraction of peak device flops spent on model flops over the run.
pub fn mfu(iterations: &[IterationRecord], elapsed: f64, devices: u64, peak_flops: f64) -> f64 {
    let denom = elapsed * devices as f64 * peak_flops;
    if denom <= 0.0 {
        return 0.0;
    }
    let flops: f64 = iterations.iter().map(|i| i.flops).sum();
    (flops / denom).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaMetrics {
    pub replica: usize,
    pub busy: f64,
    pub idle: f64,
    pub iterations: usize,
    pub mfu: f64,
    pub kv_utilization_peak: f64,
    /// Time-weighted while batches run.
    pub kv_utilization_mean: f64,
    /// Batch size → iterations.
    pub batch_size_histogram: BTreeMap<usize, usize>,
    /// Tokens per iteration → iterations.
    pub token_histogram: BTreeMap<u64, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub makespan: f64,
    pub mfu: f64,
    pub kv_utilization_peak: f64,
    pub kv_utilization_mean: f64,
    pub total_restarts: u64,
    pub replicas: Vec<ReplicaMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub num_requests: usize,
    pub scheduling_delay: Option<Distribution>,
    pub ttft: Option<Distribution>,
    pub tbt: Option<Distribution>,
    pub e2e_latency: Option<Distribution>,
    pub normalized_latency: Option<Distribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Normalized latency measured from first scheduling instead of arrival.
    pub static_mode: bool,
    pub summary: Summary,
    pub cluster: ClusterMetrics,
    pub requests: Vec<RequestMetrics>,
}

fn replica_metrics(res: &SimulationResult, replica: usize, devices: u64) -> ReplicaMetrics {
    let its: Vec<&IterationRecord> = res.iterations.iter().filter(|i| i.replica == replica).collect();
    let mut batch_size_histogram = BTreeMap::new();
    let mut token_histogram = BTreeMap::new();
    let mut peak: f64 = 0.0;
    let (mut weighted, mut span) = (0.0, 0.0);
    for i in &its {
        *batch_size_histogram.entry(i.batch_size).or_insert(0) += 1;
        *token_histogram.entry(i.prefill_tokens + i.decode_tokens).or_insert(0) += 1;
        let u = i.used_blocks as f64 / i.total_blocks.max(1) as f64;
        peak = peak.max(u);
        weighted += u * (i.end - i.start);
        span += i.end - i.start;
    }
    let s = res.replicas.iter().find(|s| s.replica == replica);
    let owned: Vec<IterationRecord> = its.iter().map(|i| (*i).clone()).collect();
    ReplicaMetrics {
        replica,
        busy: s.map_or(0.0, |s| s.busy),
        idle: s.map_or(0.0, |s| s.idle),
        iterations: its.len(),
        mfu: mfu(&owned, res.makespan, devices, res.peak_flops_per_device),
        kv_utilization_peak: peak,
        kv_utilization_mean: if span > 0.0 { weighted / span } else { 0.0 },
        batch_size_histogram,
        token_histogram,
    }
}

/// Computes every metric of `res`.
pub fn compute(res: &SimulationResult, static_mode: bool) -> Result<MetricsReport, MetricsError> {
    let requests: Vec<RequestMetrics> = res
        .requests
        .iter()
        .map(|r| RequestMetrics::from_record(r, static_mode))
        .collect::<Result<_, _>>()?;
    let col = |f: fn(&RequestMetrics) -> f64| -> Vec<f64> { requests.iter().map(f).collect() };
    let tbt: Vec<f64> = requests.iter().flat_map(|r| r.tbt_samples.iter().copied()).collect();
    let summary = Summary {
        num_requests: requests.len(),
        scheduling_delay: Distribution::of(&col(|r| r.scheduling_delay)),
        ttft: Distribution::of(&col(|r| r.ttft)),
        tbt: Distribution::of(&tbt),
        e2e_latency: Distribution::of(&col(|r| r.e2e_latency)),
        normalized_latency: Distribution::of(&col(|r| r.normalized_latency)),
    };
    let n_rep = res.replicas.len().max(1) as u64;
    let per_replica_devices = res.devices / n_rep;
    let replicas: Vec<ReplicaMetrics> = res
        .replicas
        .iter()
        .map(|s| replica_metrics(res, s.replica, per_replica_devices))
        .collect();
    let busy_total: f64 = replicas.iter().map(|r| r.busy).sum();
    let cluster = ClusterMetrics {
        makespan: res.makespan,
        mfu: mfu(&res.iterations, res.makespan, res.devices, res.peak_flops_per_device),
        kv_utilization_peak: replicas.iter().map(|r| r.kv_utilization_peak).fold(0.0, f64::max),
        kv_utilization_mean: if busy_total > 0.0 {
            replicas.iter().map(|r| r.kv_utilization_mean * r.busy).sum::<f64>() / busy_total
        } else {
            0.0
        },
        total_restarts: requests.iter().map(|r| r.restarts as u64).sum(),
        replicas,
    };
    Ok(MetricsReport {
        static_mode,
        summary,
        cluster,
        requests,
    })
}

pub const REQUEST_CSV_HEADER: &str = "request_id,replica,arrival_s,prefill_tokens,decode_tokens,\
scheduling_delay_s,ttft_s,e2e_latency_s,normalized_latency_s,restarts,tbt_s";

/// Per-request table; `tbt_s` holds the gaps separated by `;`.
pub fn write_requests_csv<W: Write>(w: W, rows: &[RequestMetrics]) -> Result<(), MetricsError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(REQUEST_CSV_HEADER.split(','))?;
    for r in rows {
        let tbt: Vec<String> = r.tbt_samples.iter().map(f64::to_string).collect();
        wtr.write_record([
            r.id.to_string(),
            r.replica.to_string(),
            r.arrival.to_string(),
            r.prefill_tokens.to_string(),
            r.decode_tokens.to_string(),
            r.scheduling_delay.to_string(),
            r.ttft.to_string(),
            r.e2e_latency.to_string(),
            r.normalized_latency.to_string(),
            r.restarts.to_string(),
            tbt.join(";"),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_requests_csv<R: Read>(r: R) -> Result<Vec<RequestMetrics>, MetricsError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<&str> = REQUEST_CSV_HEADER.split(',').collect();
    if rdr.headers()?.iter().collect::<Vec<_>>() != header {
        return Err(MetricsError::Parse {
            line: 1,
            msg: format!("header must be `{REQUEST_CSV_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let bad = |c: usize| MetricsError::Parse {
            line,
            msg: format!("bad value `{}` in column {}", &rec[c], header[c]),
        };
        macro_rules! get {
            ($c:expr) => {
                rec[$c].parse().map_err(|_| bad($c))?
            };
        }
        let tbt_samples = if rec[10].is_empty() {
            Vec::new()
        } else {
            rec[10].split(';').map(|s| s.parse().map_err(|_| bad(10))).collect::<Result<_, _>>()?
        };
        out.push(RequestMetrics {
            id: get!(0),
            replica: get!(1),
            arrival: get!(2),
            prefill_tokens: get!(3),
            decode_tokens: get!(4),
            scheduling_delay: get!(5),
            ttft: get!(6),
            e2e_latency: get!(7),
            normalized_latency: get!(8),
            restarts: get!(9),
            tbt_samples,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Json,
}

/// Writes `report` into `dir`: `requests.csv` + `summary.json` for CSV,
/// or a single `metrics.json` holding everything for JSON.
pub fn export(report: &MetricsReport, dir: impl AsRef<Path>, format: ExportFormat) -> Result<Vec<String>, MetricsError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    match format {
        ExportFormat::Csv => {
            write_requests_csv(std::fs::File::create(dir.join("requests.csv"))?, &report.requests)?;
            let head = MetricsReport {
                requests: Vec::new(),
                ..report.clone()
            };
            std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&head)? + "\n")?;
            Ok(vec!["requests.csv".into(), "summary.json".into()])
        }
        ExportFormat::Json => {
            std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)? + "\n")?;
            Ok(vec!["metrics.json".into()])
        }
    }
}
