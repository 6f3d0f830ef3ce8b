//! Request traces: CSV loading, synthetic length distributions, Poisson
//! arrivals, length capping and trace statistics.

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::percentile;

pub const TRACE_CSV_HEADER: &str = "request_id,arrival_time_s,prefill_tokens,decode_tokens";

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("trace line {line}: {msg}")]
    Row { line: usize, msg: String },
    #[error("trace header must be `{TRACE_CSV_HEADER}` (arrival column optional), got `{0}`")]
    Header(String),
    #[error("trace is empty")]
    Empty,
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("arrival rate must be positive, got {0}")]
    Rate(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    /// Seconds since trace start; `None` until an arrival process assigns it.
    pub arrival_time: Option<f64>,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
}

impl Request {
    pub fn new(id: u64, arrival_time: Option<f64>, prefill_tokens: u64, decode_tokens: u64) -> Self {
        Self {
            id,
            arrival_time,
            prefill_tokens,
            decode_tokens,
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.prefill_tokens + self.decode_tokens
    }

    pub fn pd_ratio(&self) -> f64 {
        self.prefill_tokens as f64 / self.decode_tokens as f64
    }
}

fn arrival_key(r: &Request) -> (f64, u64) {
    (r.arrival_time.unwrap_or(0.0), r.id)
}

/// Sorts by arrival, then id.
pub fn sort_by_arrival(requests: &mut [Request]) {
    requests.sort_by(|a, b| {
        let (ta, ia) = arrival_key(a);
        let (tb, ib) = arrival_key(b);
        ta.total_cmp(&tb).then(ia.cmp(&ib))
    });
}

/// Parses a trace CSV. The arrival column may be absent, or empty on
/// every row; otherwise every row needs one.
pub fn read_trace<R: Read>(reader: R) -> Result<Vec<Request>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(id_col), Some(p_col), Some(d_col)) =
        (col("request_id"), col("prefill_tokens"), col("decode_tokens"))
    else {
        return Err(WorkloadError::Header(header.join(",")));
    };
    let t_col = col("arrival_time_s");
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| WorkloadError::Row {
            line,
            msg: e.to_string(),
        })?;
        let err = |msg: String| WorkloadError::Row { line, msg };
        let count = |c: usize, name: &str| -> Result<u64, WorkloadError> {
            let s = rec.get(c).unwrap_or("");
            let v: u64 = s.parse().map_err(|_| err(format!("{name} `{s}` is not a non-negative integer")))?;
            Ok(v)
        };
        let id = count(id_col, "request_id")?;
        let prefill = count(p_col, "prefill_tokens")?;
        let decode = count(d_col, "decode_tokens")?;
        if prefill == 0 {
            return Err(err("prefill_tokens must be at least 1".into()));
        }
        if decode == 0 {
            return Err(err("decode_tokens must be at least 1".into()));
        }
        let arrival = match t_col.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()) {
            None => None,
            Some(s) => {
                let t: f64 = s.parse().map_err(|_| err(format!("arrival_time_s `{s}` is not a number")))?;
                if !(t.is_finite() && t >= 0.0) {
                    return Err(err(format!("arrival_time_s {t} must be finite and non-negative")));
                }
                Some(t)
            }
        };
        if let Some(first) = out.first() {
            let first: &Request = first;
            if first.arrival_time.is_some() != arrival.is_some() {
                return Err(err("arrival_time_s must be set on every row or on none".into()));
            }
        }
        out.push(Request::new(id, arrival, prefill, decode));
    }
    sort_by_arrival(&mut out);
    Ok(out)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Request>, WorkloadError> {
    read_trace(std::fs::File::open(path)?)
}

pub fn write_trace<W: Write>(w: W, requests: &[Request]) -> Result<(), WorkloadError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TRACE_CSV_HEADER.split(','))?;
    for r in requests {
        let t = r.arrival_time.map(|t| t.to_string()).unwrap_or_default();
        wtr.write_record([r.id.to_string(), t, r.prefill_tokens.to_string(), r.decode_tokens.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_trace(path: impl AsRef<Path>, requests: &[Request]) -> Result<(), WorkloadError> {
    write_trace(std::fs::File::create(path)?, requests)
}

/// Assigns i.i.d. exponential inter-arrival gaps with mean `1 / rate_qps`,
/// in the order given.
pub fn poisson_arrivals(requests: &[Request], rate_qps: f64, seed: u64) -> Result<Vec<Request>, WorkloadError> {
    if !(rate_qps.is_finite() && rate_qps > 0.0) {
        return Err(WorkloadError::Rate(rate_qps));
    }
    let exp = Exp::new(rate_qps).map_err(|e| WorkloadError::Distribution(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    Ok(requests
        .iter()
        .map(|r| {
            let mut gap: f64 = exp.sample(&mut rng);
            while gap <= 0.0 {
                gap = exp.sample(&mut rng);
            }
            t += gap;
            Request {
                arrival_time: Some(t),
                ..r.clone()
            }
        })
        .collect())
}

/// Limits `prefill + decode` to `max_total`. Decode is cut first, down to
/// what the prompt leaves room for; a prompt that alone reaches the cap is
/// cut instead so the decode (at most `max_total - 1`) survives.
pub fn cap_total_length(requests: &[Request], max_total: u64) -> Vec<Request> {
    let cap = max_total.max(2);
    requests
        .iter()
        .map(|r| {
            if r.total_tokens() <= cap {
                return r.clone();
            }
            let (p, d) = if r.prefill_tokens < cap {
                (r.prefill_tokens, cap - r.prefill_tokens)
            } else {
                let d = r.decode_tokens.min(cap - 1);
                (cap - d, d)
            };
            Request {
                prefill_tokens: p,
                decode_tokens: d,
                ..r.clone()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

impl FieldStats {
    fn of(values: &[f64]) -> Self {
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: percentile(values, 0.5).expect("non-empty"),
            p90: percentile(values, 0.9).expect("non-empty"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub num_requests: usize,
    pub prefill: FieldStats,
    pub decode: FieldStats,
    /// Median of per-request prefill/decode ratios.
    pub pd_ratio_median: f64,
    /// Sample standard deviation of per-request ratios.
    pub pd_ratio_std: f64,
}

pub fn compute_stats(requests: &[Request]) -> Result<TraceStats, WorkloadError> {
    if requests.is_empty() {
        return Err(WorkloadError::Empty);
    }
    let p: Vec<f64> = requests.iter().map(|r| r.prefill_tokens as f64).collect();
    let d: Vec<f64> = requests.iter().map(|r| r.decode_tokens as f64).collect();
    let ratios: Vec<f64> = requests.iter().map(Request::pd_ratio).collect();
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = if ratios.len() > 1 {
        ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(TraceStats {
        num_requests: requests.len(),
        prefill: FieldStats::of(&p),
        decode: FieldStats::of(&d),
        pd_ratio_median: percentile(&ratios, 0.5).expect("non-empty"),
        pd_ratio_std: var.sqrt(),
    })
}

impl TraceStats {
    /// One row in the column layout of the usual workload table.
    pub fn table(&self, name: &str) -> String {
        let head = format!(
            "{:<16} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "trace", "queries", "p_mean", "p_med", "p_p90", "d_mean", "d_med", "d_p90", "pd_med", "pd_std"
        );
        let row = format!(
            "{:<16} {:>9} {:>8.0} {:>8.0} {:>8.0} {:>8.0} {:>8.0} {:>8.0} {:>8.2} {:>8.2}",
            name,
            self.num_requests,
            self.prefill.mean,
            self.prefill.median,
            self.prefill.p90,
            self.decode.mean,
            self.decode.median,
            self.decode.p90,
            self.pd_ratio_median,
            self.pd_ratio_std
        );
        format!("{head}\n{row}\n")
    }
}

/// A token-length distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    /// `exp(N(ln median, sigma²))`, rounded and clamped to `[min, max]`.
    Lognormal {
        median: f64,
        sigma: f64,
        #[serde(default = "one")]
        min: u64,
        #[serde(default)]
        max: Option<u64>,
    },
    /// Discrete values drawn with the given relative weights.
    Histogram { values: Vec<u64>, weights: Vec<f64> },
}

fn one() -> u64 {
    1
}

impl LengthDist {
    /// Lognormal through a target median and 90th percentile.
    pub fn lognormal_from_quantiles(median: f64, p90: f64) -> Self {
        // z-score of the 0.9 quantile of N(0, 1)
        const Z90: f64 = 1.281_551_565_545;
        LengthDist::Lognormal {
            median,
            sigma: (p90 / median).ln() / Z90,
            min: 1,
            max: None,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Distribution(m));
        match self {
            LengthDist::Lognormal {
                median,
                sigma,
                min,
                max,
            } => {
                if !(median.is_finite() && *median > 0.0) {
                    return bad(format!("lognormal median {median} must be positive"));
                }
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return bad(format!("lognormal sigma {sigma} must be non-negative"));
                }
                if *min == 0 || max.is_some_and(|m| m < *min) {
                    return bad(format!("length bounds [{min}, {max:?}] must satisfy 1 <= min <= max"));
                }
            }
            LengthDist::Histogram { values, weights } => {
                if values.is_empty() || values.len() != weights.len() {
                    return bad("histogram needs matching non-empty values and weights".into());
                }
                if values.contains(&0) {
                    return bad("histogram values must be at least 1".into());
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
                    return bad("histogram weights must be non-negative with a positive sum".into());
                }
            }
        }
        Ok(())
    }

    fn sampler(&self) -> Result<Sampler, WorkloadError> {
        self.validate()?;
        Ok(match self {
            LengthDist::Lognormal {
                median,
                sigma,
                min,
                max,
            } => Sampler::Lognormal(
                LogNormal::new(median.ln(), *sigma).map_err(|e| WorkloadError::Distribution(e.to_string()))?,
                *min,
                max.unwrap_or(u64::MAX),
            ),
            LengthDist::Histogram { values, weights } => Sampler::Histogram(
                values.clone(),
                WeightedIndex::new(weights).map_err(|e| WorkloadError::Distribution(e.to_string()))?,
            ),
        })
    }
}

enum Sampler {
    Lognormal(LogNormal<f64>, u64, u64),
    Histogram(Vec<u64>, WeightedIndex<f64>),
}

impl Sampler {
    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        match self {
            Sampler::Lognormal(d, lo, hi) => {
                let v = d.sample(rng).round();
                (v.min(u64::MAX as f64) as u64).clamp(*lo, *hi)
            }
            Sampler::Histogram(values, idx) => values[idx.sample(rng)],
        }
    }
}

/// Independent prefill and decode length distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDistribution {
    pub prefill: LengthDist,
    pub decode: LengthDist,
    /// Applied with [`cap_total_length`] after sampling.
    #[serde(default)]
    pub max_total_tokens: Option<u64>,
}

impl TraceDistribution {
    pub fn from_toml(text: &str) -> Result<Self, WorkloadError> {
        let d: Self = toml::from_str(text).map_err(|e| WorkloadError::Distribution(e.to_string()))?;
        d.prefill.validate()?;
        d.decode.validate()?;
        Ok(d)
    }
}

/// `n` requests with ids `0..n` and unset arrivals.
pub fn synth_trace(dist: &TraceDistribution, n: usize, seed: u64) -> Result<Vec<Request>, WorkloadError> {
    let ps = dist.prefill.sampler()?;
    let ds = dist.decode.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reqs: Vec<Request> = (0..n as u64)
        .map(|id| {
            let p = ps.sample(&mut rng);
            let d = ds.sample(&mut rng);
            Request::new(id, None, p, d)
        })
        .collect();
    Ok(match dist.max_total_tokens {
        Some(cap) => cap_total_length(&reqs, cap),
        None => reqs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(p: u64, d: u64) -> Request {
        Request::new(0, None, p, d)
    }

    #[test]
    fn loads_and_sorts_three_rows() {
        let text = "request_id,arrival_time_s,prefill_tokens,decode_tokens\n2,0.5,10,3\n0,0.1,5,1\n1,0.3,7,2\n";
        let t = read_trace(text.as_bytes()).unwrap();
        assert_eq!(t.iter().map(|r| r.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(t[2].arrival_time, Some(0.5));
    }

    #[test]
    fn zero_decode_is_rejected_with_line() {
        let text = "request_id,arrival_time_s,prefill_tokens,decode_tokens\n0,0.0,5,1\n1,0.1,5,0\n";
        let e = read_trace(text.as_bytes()).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let text = "request_id,arrival_time_s,prefill_tokens,decode_tokens\n0,-1,5,1\n";
        assert!(read_trace(text.as_bytes()).is_err());
    }

    #[test]
    fn missing_arrival_column_leaves_arrivals_unset() {
        let text = "request_id,prefill_tokens,decode_tokens\n0,5,1\n1,6,2\n";
        let t = read_trace(text.as_bytes()).unwrap();
        assert!(t.iter().all(|r| r.arrival_time.is_none()));
        let mixed = "request_id,arrival_time_s,prefill_tokens,decode_tokens\n0,,5,1\n1,0.2,6,2\n";
        assert!(read_trace(mixed.as_bytes()).is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let reqs = vec![Request::new(0, Some(0.125), 10, 4), Request::new(1, Some(1.0 / 3.0), 99, 1)];
        let mut buf = Vec::new();
        write_trace(&mut buf, &reqs).unwrap();
        assert_eq!(read_trace(buf.as_slice()).unwrap(), reqs);
    }

    #[test]
    fn poisson_mean_gap_matches_rate() {
        let reqs: Vec<Request> = (0..10_000).map(|i| Request::new(i, None, 1, 1)).collect();
        let a = poisson_arrivals(&reqs, 2.0, 7).unwrap();
        let last = a.last().unwrap().arrival_time.unwrap();
        let mean_gap = last / a.len() as f64;
        assert!((mean_gap - 0.5).abs() / 0.5 < 0.05, "{mean_gap}");
        assert!(a.windows(2).all(|w| w[1].arrival_time > w[0].arrival_time));
        assert_eq!(a, poisson_arrivals(&reqs, 2.0, 7).unwrap());
        assert!(poisson_arrivals(&reqs, 0.0, 7).is_err());
    }

    #[test]
    fn capping_rules() {
        let c = cap_total_length(&[req(3000, 2000), req(5000, 10), req(100, 50)], 4096);
        assert_eq!((c[0].prefill_tokens, c[0].decode_tokens), (3000, 1096));
        assert_eq!((c[1].prefill_tokens, c[1].decode_tokens), (4086, 10));
        assert_eq!((c[2].prefill_tokens, c[2].decode_tokens), (100, 50));
        assert_eq!(cap_total_length(&c, 4096), c);
    }

    #[test]
    fn stats_on_small_trace() {
        let s = compute_stats(&[req(10, 10), req(20, 10), req(30, 10)]).unwrap();
        assert_eq!(s.prefill.mean, 20.0);
        assert_eq!(s.prefill.median, 20.0);
        assert_eq!(s.pd_ratio_median, 2.0);
        let one = compute_stats(&[req(7, 3)]).unwrap();
        assert_eq!(one.prefill.mean, one.prefill.median);
        assert_eq!(one.prefill.median, one.prefill.p90);
        assert!(compute_stats(&[]).is_err());
    }

    #[test]
    fn single_bin_histogram_is_constant() {
        let dist = TraceDistribution {
            prefill: LengthDist::Histogram {
                values: vec![100],
                weights: vec![1.0],
            },
            decode: LengthDist::Histogram {
                values: vec![50],
                weights: vec![1.0],
            },
            max_total_tokens: None,
        };
        let t = synth_trace(&dist, 20, 1).unwrap();
        assert!(t.iter().all(|r| (r.prefill_tokens, r.decode_tokens) == (100, 50)));
        assert!(synth_trace(&dist, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        let bad = LengthDist::Lognormal {
            median: -1.0,
            sigma: 1.0,
            min: 1,
            max: None,
        };
        assert!(bad.validate().is_err());
        let bad = LengthDist::Histogram {
            values: vec![1, 2],
            weights: vec![1.0],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lognormal_fit_reproduces_chat_quantiles() {
        let dist = TraceDistribution {
            prefill: LengthDist::lognormal_from_quantiles(417.0, 1678.0),
            decode: LengthDist::lognormal_from_quantiles(139.0, 484.0),
            max_total_tokens: None,
        };
        let s = compute_stats(&synth_trace(&dist, 50_000, 3).unwrap()).unwrap();
        let targets = [
            (s.prefill.mean, 686.0),
            (s.prefill.median, 417.0),
            (s.prefill.p90, 1678.0),
            (s.decode.mean, 197.0),
            (s.decode.median, 139.0),
            (s.decode.p90, 484.0),
        ];
        for (got, want) in targets {
            assert!((got - want).abs() / want < 0.15, "{got} vs {want}");
        }
    }
}
