//! Operator triage, profiling grids, the analytical device cost oracle and
//! the profile CSV format.
//!
//! The oracle stands in for kernel measurements. It is a smooth roofline:
//! `max(flops / peak_flops, bytes / mem_bandwidth) + kernel_overhead` for
//! compute kernels and a ring model over the link for collectives. Tile and
//! wave quantization effects are not modelled.
//!
//! Profile CSV layout (header is fixed, cells for features outside an
//! operator's schema are left empty):
//!
//! ```text
//! op_name,feature:tp_degree,feature:num_tokens,feature:kv_read_bytes,feature:payload_bytes,runtime_s
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_spec::{profiled_kernels, ModelSpec, ModelSpecError, OpClass, OpShape, OperatorDescriptor};

pub const PROFILE_CSV_HEADER: &str =
    "op_name,feature:tp_degree,feature:num_tokens,feature:kv_read_bytes,feature:payload_bytes,runtime_s";

pub const TOKEN_LEVEL_KERNELS: [&str; 6] = [
    "qkv_proj",
    "attn_out_proj",
    "mlp_up_proj",
    "mlp_down_proj",
    "add_norm",
    "act_fn",
];
pub const SEQUENCE_LEVEL_KERNELS: [&str; 2] = ["attn_prefill", "attn_decode"];
pub const COMMUNICATION_KERNELS: [&str; 3] = ["allreduce", "allgather", "send_recv"];

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("unknown operator `{name}` (known: {known})")]
    UnknownOp { name: String, known: String },
    #[error("profile csv line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error("profile csv header mismatch: {0}")]
    Header(String),
    #[error("invalid device profile: {0}")]
    Device(String),
    #[error(transparent)]
    Spec(#[from] ModelSpecError),
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
}

fn known_ops() -> String {
    TOKEN_LEVEL_KERNELS
        .iter()
        .chain(SEQUENCE_LEVEL_KERNELS.iter())
        .chain(COMMUNICATION_KERNELS.iter())
        .copied()
        .collect::<Vec<_>>()
        .join(", ")
}

/// Nominal hardware characteristics used by the cost oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub sku_name: String,
    /// Dense half-precision flop/s.
    pub peak_flops: f64,
    /// HBM bytes/s.
    pub mem_bandwidth: f64,
    /// Intra-node collective bytes/s per device.
    pub link_bandwidth: f64,
    /// Per-hop latency of a collective step, seconds.
    #[serde(default = "default_link_latency")]
    pub link_latency: f64,
    /// Fixed launch cost per kernel, seconds.
    pub kernel_overhead: f64,
    pub device_mem: u64,
}

fn default_link_latency() -> f64 {
    5e-6
}

impl DeviceProfile {
    /// Nominal datasheet values, not measurements.
    pub fn a100_80g() -> Self {
        Self {
            sku_name: "A100-80G".into(),
            peak_flops: 312e12,
            mem_bandwidth: 2.039e12,
            link_bandwidth: 300e9,
            link_latency: 5e-6,
            kernel_overhead: 4e-6,
            device_mem: 80 * (1 << 30),
        }
    }

    /// Nominal datasheet values, not measurements.
    pub fn h100_80g() -> Self {
        Self {
            sku_name: "H100-80G".into(),
            peak_flops: 989e12,
            mem_bandwidth: 3.35e12,
            link_bandwidth: 450e9,
            link_latency: 4e-6,
            kernel_overhead: 3e-6,
            device_mem: 80 * (1 << 30),
        }
    }

    pub fn builtin(sku: &str) -> Option<Self> {
        match sku {
            "A100-80G" => Some(Self::a100_80g()),
            "H100-80G" => Some(Self::h100_80g()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let positive = [
            ("peak_flops", self.peak_flops),
            ("mem_bandwidth", self.mem_bandwidth),
            ("link_bandwidth", self.link_bandwidth),
            ("kernel_overhead", self.kernel_overhead),
            ("device_mem", self.device_mem as f64),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ProfileError::Device(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.link_latency.is_finite() && self.link_latency >= 0.0) {
            return Err(ProfileError::Device("link_latency must be non-negative".into()));
        }
        if self.kernel_overhead >= 1e-3 {
            return Err(ProfileError::Device(format!(
                "kernel_overhead must be below 1 ms, got {}",
                self.kernel_overhead
            )));
        }
        if self.sku_name.is_empty() {
            return Err(ProfileError::Device("sku_name must not be empty".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ProfileError> {
        let dev: DeviceProfile =
            toml::from_str(text).map_err(|e| ProfileError::Device(e.to_string()))?;
        dev.validate()?;
        Ok(dev)
    }

    /// Loads a device file, or a built-in SKU when `path_or_sku` names one
    /// and no such file exists.
    pub fn load(path_or_sku: &str) -> Result<Self, ProfileError> {
        let path = Path::new(path_or_sku);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| ProfileError::Io {
                path: path_or_sku.into(),
                reason: e.to_string(),
            })?;
            return Self::from_toml(&text);
        }
        Self::builtin(path_or_sku).ok_or_else(|| {
            ProfileError::Device(format!(
                "`{path_or_sku}` is neither a device file nor a built-in SKU (A100-80G, H100-80G)"
            ))
        })
    }
}

/// Input features of a kernel invocation. Only the fields in the kernel's
/// schema are meaningful; the rest stay zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OpFeatures {
    pub num_tokens: f64,
    pub kv_read_bytes: f64,
    pub payload_bytes: f64,
}

impl OpFeatures {
    pub fn tokens(n: f64) -> Self {
        Self {
            num_tokens: n,
            ..Self::default()
        }
    }

    pub fn attention(n: f64, kv_read_bytes: f64) -> Self {
        Self {
            num_tokens: n,
            kv_read_bytes,
            ..Self::default()
        }
    }

    pub fn payload(bytes: f64) -> Self {
        Self {
            payload_bytes: bytes,
            ..Self::default()
        }
    }
}

/// Feature names used by each kernel, in regression column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSchema {
    Tokens,
    TokensAndKv,
    Payload,
}

impl FeatureSchema {
    pub fn for_op(op_name: &str) -> Result<Self, ProfileError> {
        match triage_name(op_name)? {
            OpClass::TokenLevel => Ok(FeatureSchema::Tokens),
            OpClass::SequenceLevel => Ok(FeatureSchema::TokensAndKv),
            OpClass::Communication => Ok(FeatureSchema::Payload),
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        match self {
            FeatureSchema::Tokens => &["num_tokens"],
            FeatureSchema::TokensAndKv => &["num_tokens", "kv_read_bytes"],
            FeatureSchema::Payload => &["payload_bytes"],
        }
    }

    pub fn extract(self, f: &OpFeatures) -> Vec<f64> {
        match self {
            FeatureSchema::Tokens => vec![f.num_tokens],
            FeatureSchema::TokensAndKv => vec![f.num_tokens, f.kv_read_bytes],
            FeatureSchema::Payload => vec![f.payload_bytes],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub op_name: String,
    pub tp_degree: u64,
    pub features: OpFeatures,
    pub runtime: f64,
}

pub fn triage_name(op_name: &str) -> Result<OpClass, ProfileError> {
    if TOKEN_LEVEL_KERNELS.contains(&op_name) {
        Ok(OpClass::TokenLevel)
    } else if SEQUENCE_LEVEL_KERNELS.contains(&op_name) {
        Ok(OpClass::SequenceLevel)
    } else if COMMUNICATION_KERNELS.contains(&op_name) {
        Ok(OpClass::Communication)
    } else {
        Err(ProfileError::UnknownOp {
            name: op_name.into(),
            known: known_ops(),
        })
    }
}

/// Classifies an operator by what its runtime depends on.
pub fn triage(op: &OperatorDescriptor) -> Result<OpClass, ProfileError> {
    triage_name(&op.op_name)
}

/// Bounds of the profiling grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    /// Largest token count in one iteration (defaults to the model context).
    pub max_tokens: u64,
    /// Largest decode batch.
    pub max_batch_size: u64,
    /// Per-layer, per-device KV bytes of one token.
    pub kv_bytes_per_token: u64,
    /// Largest collective payload is `2^max_payload_log2` bytes.
    pub max_payload_log2: u32,
}

impl GridConfig {
    pub fn for_model(spec: &ModelSpec, tp_degree: u64) -> Result<Self, ProfileError> {
        Ok(Self {
            max_tokens: spec.max_context,
            max_batch_size: 512,
            kv_bytes_per_token: spec.kv_bytes_per_token_per_layer(tp_degree)?,
            max_payload_log2: 30,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Tokens,
    PrefillAttention,
    DecodeAttention,
    Payload,
}

impl GridKind {
    pub fn for_op(op_name: &str) -> Result<Self, ProfileError> {
        Ok(match triage_name(op_name)? {
            OpClass::TokenLevel => GridKind::Tokens,
            OpClass::Communication => GridKind::Payload,
            OpClass::SequenceLevel if op_name == "attn_prefill" => GridKind::PrefillAttention,
            OpClass::SequenceLevel => GridKind::DecodeAttention,
        })
    }
}

/// Powers of two from 1 up to and including `max` (appended if `max` is
/// not itself a power of two).
pub fn geometric_points(max: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut v = 1u64;
    while v <= max {
        out.push(v);
        match v.checked_mul(2) {
            Some(n) => v = n,
            None => break,
        }
    }
    if out.last() != Some(&max) && max > 0 {
        out.push(max);
    }
    out
}

/// Deterministic geometric profiling grid.
///
/// * token-level: `num_tokens` ∈ {1, 2, 4, …, max_tokens}
/// * prefill attention: the token grid × prior-context tokens
///   {0, 1, 2, …, 2·max_tokens}, expressed as KV bytes
/// * decode attention: batch {1, …, max_batch} × total context tokens
///   {1, …, max_batch·max_tokens} with context ≥ batch
/// * collectives: payload ∈ {2^0, …, 2^max_payload_log2} bytes, independent
///   of the model
pub fn profile_grid(kind: GridKind, cfg: &GridConfig) -> Vec<OpFeatures> {
    let kvb = cfg.kv_bytes_per_token as f64;
    match kind {
        GridKind::Tokens => geometric_points(cfg.max_tokens)
            .into_iter()
            .map(|n| OpFeatures::tokens(n as f64))
            .collect(),
        GridKind::PrefillAttention => {
            let tokens = geometric_points(cfg.max_tokens);
            let mut prior = vec![0];
            prior.extend(geometric_points(2 * cfg.max_tokens));
            let mut out = Vec::with_capacity(tokens.len() * prior.len());
            for &n in &tokens {
                for &c in &prior {
                    out.push(OpFeatures::attention(n as f64, c as f64 * kvb));
                }
            }
            out
        }
        GridKind::DecodeAttention => {
            let batch = geometric_points(cfg.max_batch_size);
            let ctx = geometric_points(cfg.max_batch_size * cfg.max_tokens);
            let mut out = Vec::new();
            for &n in &batch {
                for &c in ctx.iter().filter(|&&c| c >= n) {
                    out.push(OpFeatures::attention(n as f64, c as f64 * kvb));
                }
            }
            out
        }
        GridKind::Payload => (0..=cfg.max_payload_log2)
            .map(|e| OpFeatures::payload((1u64 << e) as f64))
            .collect(),
    }
}

/// Floating point operations of one kernel invocation on one device.
pub fn op_flops(op: &OperatorDescriptor, f: &OpFeatures) -> f64 {
    let n = f.num_tokens;
    match op.shape {
        OpShape::Matmul {
            in_dim, out_dim, ..
        } => 2.0 * n * in_dim as f64 * out_dim as f64,
        OpShape::Elementwise { width, .. } => {
            let per_elem = if op.op_name == "add_norm" { 6.0 } else { 4.0 };
            per_elem * n * width as f64
        }
        OpShape::Attention {
            q_heads,
            kv_heads,
            head_dim,
        } => {
            let qd = (q_heads * head_dim) as f64;
            let ctx = f.kv_read_bytes / (2 * kv_heads * head_dim * op.elem_bytes) as f64;
            if op.op_name == "attn_prefill" {
                2.0 * qd * n * n + 4.0 * qd * n * ctx
            } else {
                4.0 * qd * ctx
            }
        }
        OpShape::Collective { .. } => 0.0,
    }
}

fn op_bytes(op: &OperatorDescriptor, f: &OpFeatures) -> f64 {
    let n = f.num_tokens;
    let eb = op.elem_bytes as f64;
    match op.shape {
        OpShape::Matmul {
            in_dim, out_dim, ..
        } => {
            let (i, o) = (in_dim as f64, out_dim as f64);
            eb * (i * o + n * i + n * o)
        }
        OpShape::Elementwise { width, .. } => {
            let streams = if op.op_name == "add_norm" { 3.0 } else { 2.0 };
            streams * eb * n * width as f64
        }
        OpShape::Attention {
            q_heads,
            kv_heads,
            head_dim,
        } => {
            if op.op_name == "attn_prefill" {
                let per_tok = (2 * q_heads + 2 * kv_heads) * head_dim;
                eb * n * per_tok as f64 + f.kv_read_bytes
            } else {
                f.kv_read_bytes
            }
        }
        OpShape::Collective { .. } => 0.0,
    }
}

/// Analytical runtime of one kernel invocation, seconds.
pub fn synthetic_oracle(op: &OperatorDescriptor, f: &OpFeatures, dev: &DeviceProfile) -> f64 {
    if let OpShape::Collective { world, .. } = op.shape {
        let p = f.payload_bytes;
        let w = world.max(1) as f64;
        let (volume, hops) = match op.op_name.as_str() {
            "allreduce" => (2.0 * (w - 1.0) / w * p, 2.0 * (w - 1.0)),
            "allgather" => ((w - 1.0) / w * p, w - 1.0),
            _ => (p, 1.0),
        };
        return dev.kernel_overhead + volume / dev.link_bandwidth + hops * dev.link_latency;
    }
    let compute = op_flops(op, f) / dev.peak_flops;
    let memory = op_bytes(op, f) / dev.mem_bandwidth;
    compute.max(memory) + dev.kernel_overhead
}

/// Oracle-generated profile over every kernel of `spec` at each TP degree.
pub fn generate_profile(
    spec: &ModelSpec,
    tp_degrees: &[u64],
    dev: &DeviceProfile,
    max_batch_size: u64,
) -> Result<Vec<ProfileRecord>, ProfileError> {
    let mut out = Vec::new();
    for &tp in tp_degrees {
        let mut cfg = GridConfig::for_model(spec, tp)?;
        cfg.max_batch_size = max_batch_size;
        for op in profiled_kernels(spec, tp)? {
            let kind = GridKind::for_op(&op.op_name)?;
            for point in profile_grid(kind, &cfg) {
                out.push(ProfileRecord {
                    op_name: op.op_name.clone(),
                    tp_degree: tp,
                    features: point,
                    runtime: synthetic_oracle(&op, &point, dev),
                });
            }
        }
    }
    Ok(out)
}

fn fmt_cell(schema: FeatureSchema, name: &str, v: f64) -> String {
    if schema.names().contains(&name) {
        format!("{v}")
    } else {
        String::new()
    }
}

pub fn write_profile_csv<W: Write>(mut w: W, records: &[ProfileRecord]) -> std::io::Result<()> {
    writeln!(w, "{PROFILE_CSV_HEADER}")?;
    for r in records {
        let schema = FeatureSchema::for_op(&r.op_name)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.op_name,
            r.tp_degree,
            fmt_cell(schema, "num_tokens", r.features.num_tokens),
            fmt_cell(schema, "kv_read_bytes", r.features.kv_read_bytes),
            fmt_cell(schema, "payload_bytes", r.features.payload_bytes),
            r.runtime
        )?;
    }
    Ok(())
}

/// Parses profile CSV text. Feature columns may appear in any order; each
/// row must fill exactly the features its operator uses.
pub fn read_profile_csv<R: Read>(reader: R) -> Result<Vec<ProfileRecord>, ProfileError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| ProfileError::Header(e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.first() != Some(&"op_name") || cols.last() != Some(&"runtime_s") {
        return Err(ProfileError::Header(
            "expected first column `op_name` and last column `runtime_s`".into(),
        ));
    }
    let mut feature_cols = Vec::new();
    for (i, c) in cols.iter().enumerate().take(cols.len() - 1).skip(1) {
        let name = c.strip_prefix("feature:").ok_or_else(|| {
            ProfileError::Header(format!("column `{c}` is not of the form feature:<name>"))
        })?;
        if !["tp_degree", "num_tokens", "kv_read_bytes", "payload_bytes"].contains(&name) {
            return Err(ProfileError::Header(format!("unknown feature column `{c}`")));
        }
        feature_cols.push((i, name.to_string()));
    }
    if !feature_cols.iter().any(|(_, n)| n == "tp_degree") {
        return Err(ProfileError::Header("missing column feature:tp_degree".into()));
    }

    let mut out = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx as u64 + 2;
        let row = row.map_err(|e| ProfileError::Row {
            line,
            reason: e.to_string(),
        })?;
        let err = |reason: String| ProfileError::Row { line, reason };
        let op_name = row.get(0).unwrap_or_default().to_string();
        let schema = FeatureSchema::for_op(&op_name).map_err(|e| err(e.to_string()))?;
        let mut features = OpFeatures::default();
        let mut tp_degree = None;
        for (i, name) in &feature_cols {
            let cell = row.get(*i).unwrap_or_default();
            let wanted = name == "tp_degree" || schema.names().contains(&name.as_str());
            if cell.is_empty() {
                if wanted {
                    return Err(err(format!("missing value for feature `{name}`")));
                }
                continue;
            }
            if !wanted {
                return Err(err(format!("feature `{name}` is not used by `{op_name}`")));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| err(format!("feature `{name}` is not a number: {cell:?}")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(err(format!("feature `{name}` must be finite and ≥ 0, got {v}")));
            }
            match name.as_str() {
                "tp_degree" => {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(err(format!("tp_degree must be a positive integer, got {v}")));
                    }
                    tp_degree = Some(v as u64);
                }
                "num_tokens" => features.num_tokens = v,
                "kv_read_bytes" => features.kv_read_bytes = v,
                _ => features.payload_bytes = v,
            }
        }
        for name in schema.names() {
            if !feature_cols.iter().any(|(_, n)| n == name) {
                return Err(err(format!("`{op_name}` needs column feature:{name}")));
            }
        }
        let cell = row.get(cols.len() - 1).unwrap_or_default();
        let runtime: f64 = cell
            .parse()
            .map_err(|_| err(format!("runtime_s is not a number: {cell:?}")))?;
        if !(runtime.is_finite() && runtime > 0.0) {
            return Err(err(format!("runtime_s must be positive, got {runtime}")));
        }
        out.push(ProfileRecord {
            op_name,
            tp_degree: tp_degree.ok_or_else(|| err("missing tp_degree".into()))?,
            features,
            runtime,
        });
    }
    Ok(out)
}

pub fn ingest_profile_csv(path: impl AsRef<Path>) -> Result<Vec<ProfileRecord>, ProfileError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| ProfileError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    read_profile_csv(std::io::BufReader::new(file))
}

/// Prices kernels straight from [`synthetic_oracle`], no fitting.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    device: DeviceProfile,
    kernels: std::collections::BTreeMap<(String, u64), OperatorDescriptor>,
}

impl OraclePredictor {
    pub fn new(spec: &ModelSpec, tp_degrees: &[u64], device: &DeviceProfile) -> Result<Self, ProfileError> {
        let mut kernels = std::collections::BTreeMap::new();
        for &tp in tp_degrees {
            for op in profiled_kernels(spec, tp)? {
                kernels.insert((op.op_name.clone(), tp), op);
            }
        }
        Ok(Self {
            device: device.clone(),
            kernels,
        })
    }
}

impl crate::estimator::RuntimePredictor for OraclePredictor {
    fn predict_op(
        &self,
        op_name: &str,
        tp_degree: u64,
        features: &OpFeatures,
    ) -> Result<f64, crate::estimator::EstimatorError> {
        let op = self
            .kernels
            .get(&(op_name.to_string(), tp_degree))
            .ok_or_else(|| crate::estimator::EstimatorError::NotTrained {
                op_name: op_name.into(),
                tp_degree,
            })?;
        Ok(synthetic_oracle(op, features, &self.device))
    }
}
