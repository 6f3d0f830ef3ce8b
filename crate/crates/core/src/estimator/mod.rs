//! Runtime estimation: per-kernel regressors trained on profile records,
//! the batch feature transforms, and whole-batch time prediction.
//!
//! Each `(op_name, tp_degree)` pair gets its own regressor, fitted on
//! `ln(1 + feature)` inputs against `ln(runtime)`. Queries more than the
//! configured margin outside the training box are rejected rather than
//! extrapolated.

pub mod forest;
pub mod table;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_spec::{ModelSpec, ModelSpecError, OpClass, OpScope, OpShape, OperatorDescriptor, ParallelismConfig};
use crate::profiler::{FeatureSchema, OpFeatures, ProfileError, ProfileRecord};
pub use forest::{Forest, ForestParams};
pub use table::{build_lookup_table, LookupTable, TableConfig};

pub const ESTIMATOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("operator `{op}` has {got} training points, at least {need} required")]
    TooFewPoints { op: String, got: usize, need: usize },
    #[error("no trained model for `{op_name}` at tp_degree {tp_degree}")]
    NotTrained { op_name: String, tp_degree: u64 },
    #[error(
        "`{op}` query {feature} = {value} is outside the allowed range [{lo}, {hi}] \
         (training box plus extrapolation margin)"
    )]
    Extrapolation {
        op: String,
        feature: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("equivalent prefill length needs a non-empty list of positive lengths")]
    EmptyPrefill,
    #[error("estimator file: {0}")]
    Format(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Spec(#[from] ModelSpecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub forest: ForestParams,
    pub min_points: usize,
    /// Allowed relative overshoot past the training box on each feature.
    pub extrapolation_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            forest: ForestParams::default(),
            min_points: 8,
            extrapolation_margin: 0.10,
        }
    }
}

pub fn op_key(op_name: &str, tp_degree: u64) -> String {
    format!("{op_name}@tp{tp_degree}")
}

pub(crate) fn transform(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.ln_1p()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedOp {
    pub op_name: String,
    pub tp_degree: u64,
    pub feature_names: Vec<String>,
    /// Training bounding box, raw feature units.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub n_points: usize,
    /// Mean absolute percentage error on the training points.
    pub fit_mape: f64,
    /// MAPE on every fifth training point, scored by a forest fitted
    /// without them.
    pub held_out_mape: Option<f64>,
    pub forest: Forest,
}

impl TrainedOp {
    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::for_op(&self.op_name).expect("trained ops are known kernels")
    }

    /// Allowed query range per feature: the training box widened by
    /// `margin` relative to its end points.
    pub fn allowed_range(&self, margin: f64) -> Vec<(f64, f64)> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| (lo / (1.0 + margin), hi * (1.0 + margin)))
            .collect()
    }

    pub fn check_range(&self, x: &[f64], margin: f64) -> Result<(), EstimatorError> {
        for ((v, (lo, hi)), name) in x.iter().zip(self.allowed_range(margin)).zip(&self.feature_names) {
            if !(v.is_finite() && *v >= lo && *v <= hi) {
                return Err(EstimatorError::Extrapolation {
                    op: op_key(&self.op_name, self.tp_degree),
                    feature: name.clone(),
                    value: *v,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    fn predict_raw(&self, x: &[f64]) -> f64 {
        self.forest.predict(&transform(x)).exp()
    }
}

/// Anything that can price one kernel invocation.
pub trait RuntimePredictor: Sync {
    fn predict_op(&self, op_name: &str, tp_degree: u64, features: &OpFeatures) -> Result<f64, EstimatorError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorModel {
    pub format_version: u32,
    pub config: TrainConfig,
    pub ops: BTreeMap<String, TrainedOp>,
}

fn mape(pred: &[f64], truth: &[f64]) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| ((p - t) / t).abs())
        .sum();
    s / truth.len().max(1) as f64
}

/// Fits on four fifths of the points and scores the rest.
fn held_out_mape(x: &[Vec<f64>], y: &[f64], params: &ForestParams) -> Option<f64> {
    let (mut fx, mut fy, mut hx, mut hy) = (vec![], vec![], vec![], vec![]);
    for (i, (xi, yi)) in x.iter().zip(y).enumerate() {
        if i % 5 == 2 {
            hx.push(xi.clone());
            hy.push(yi.exp());
        } else {
            fx.push(xi.clone());
            fy.push(*yi);
        }
    }
    if hx.is_empty() || fx.len() < 2 {
        return None;
    }
    let forest = Forest::fit(&fx, &fy, params)?;
    let pred: Vec<f64> = hx.iter().map(|xi| forest.predict(xi).exp()).collect();
    Some(mape(&pred, &hy))
}

fn train_one(
    op_name: &str,
    tp_degree: u64,
    recs: &[&ProfileRecord],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedOp, EstimatorError> {
    if recs.len() < config.min_points {
        return Err(EstimatorError::TooFewPoints {
            op: op_key(op_name, tp_degree),
            got: recs.len(),
            need: config.min_points,
        });
    }
    let schema = FeatureSchema::for_op(op_name)?;
    let raw: Vec<Vec<f64>> = recs.iter().map(|r| schema.extract(&r.features)).collect();
    let x: Vec<Vec<f64>> = raw.iter().map(|r| transform(r)).collect();
    let y: Vec<f64> = recs.iter().map(|r| r.runtime.ln()).collect();
    let d = schema.names().len();
    let mut lower = vec![f64::INFINITY; d];
    let mut upper = vec![f64::NEG_INFINITY; d];
    for r in &raw {
        for j in 0..d {
            lower[j] = lower[j].min(r[j]);
            upper[j] = upper[j].max(r[j]);
        }
    }
    let params = ForestParams {
        seed,
        ..config.forest.clone()
    };
    let forest = Forest::fit(&x, &y, &params).ok_or_else(|| EstimatorError::TooFewPoints {
        op: op_key(op_name, tp_degree),
        got: recs.len(),
        need: config.min_points,
    })?;
    let truth: Vec<f64> = recs.iter().map(|r| r.runtime).collect();
    let fitted: Vec<f64> = x.iter().map(|xi| forest.predict(xi).exp()).collect();
    let held_out_mape = held_out_mape(&x, &y, &params);
    Ok(TrainedOp {
        op_name: op_name.to_string(),
        tp_degree,
        feature_names: schema.names().iter().map(|s| s.to_string()).collect(),
        lower,
        upper,
        n_points: recs.len(),
        fit_mape: mape(&fitted, &truth),
        held_out_mape,
        forest,
    })
}

/// Fits one regressor per `(op_name, tp_degree)` present in `records`.
/// Per-op seeds derive from the config seed and the op's position in key
/// order, so training is reproducible.
pub fn train(records: &[ProfileRecord], config: &TrainConfig) -> Result<EstimatorModel, EstimatorError> {
    let mut groups: BTreeMap<(String, u64), Vec<&ProfileRecord>> = BTreeMap::new();
    for r in records {
        FeatureSchema::for_op(&r.op_name)?;
        groups.entry((r.op_name.clone(), r.tp_degree)).or_default().push(r);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let trained = crate::parallel::map_indexed(groups.len(), |i| {
        let ((name, tp), recs) = &groups[i];
        let seed = config.forest.seed.wrapping_add((i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        train_one(name, *tp, recs, config, seed)
    });
    let mut ops = BTreeMap::new();
    for t in trained {
        let t = t?;
        ops.insert(op_key(&t.op_name, t.tp_degree), t);
    }
    Ok(EstimatorModel {
        format_version: ESTIMATOR_FORMAT_VERSION,
        config: config.clone(),
        ops,
    })
}

impl EstimatorModel {
    pub fn get(&self, op_name: &str, tp_degree: u64) -> Result<&TrainedOp, EstimatorError> {
        self.ops
            .get(&op_key(op_name, tp_degree))
            .ok_or_else(|| EstimatorError::NotTrained {
                op_name: op_name.into(),
                tp_degree,
            })
    }

    pub fn covers(&self, ops: &[OperatorDescriptor]) -> Result<(), EstimatorError> {
        for op in ops {
            self.get(&op.op_name, op.tp_degree)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("estimator serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EstimatorError> {
        let m: EstimatorModel =
            serde_json::from_str(text).map_err(|e| EstimatorError::Format(e.to_string()))?;
        if m.format_version != ESTIMATOR_FORMAT_VERSION {
            return Err(EstimatorError::Format(format!(
                "unsupported format_version {} (expected {ESTIMATOR_FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EstimatorError> {
        std::fs::write(path.as_ref(), self.to_json())
            .map_err(|e| EstimatorError::Format(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EstimatorError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| EstimatorError::Format(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn report(&self) -> TrainingReport {
        TrainingReport {
            format_version: self.format_version,
            ops: self
                .ops
                .values()
                .map(|t| OpReport {
                    op: op_key(&t.op_name, t.tp_degree),
                    points: t.n_points,
                    fit_mape: t.fit_mape,
                    held_out_mape: t.held_out_mape,
                })
                .collect(),
        }
    }
}

impl RuntimePredictor for EstimatorModel {
    fn predict_op(&self, op_name: &str, tp_degree: u64, features: &OpFeatures) -> Result<f64, EstimatorError> {
        let op = self.get(op_name, tp_degree)?;
        let x = op.schema().extract(features);
        op.check_range(&x, self.config.extrapolation_margin)?;
        Ok(op.predict_raw(&x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub points: usize,
    pub fit_mape: f64,
    pub held_out_mape: Option<f64>,
}

/// Per-op training summary written next to a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub format_version: u32,
    pub ops: Vec<OpReport>,
}

/// One request's share of a prefill in the current iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillChunk {
    pub tokens: u64,
    /// Tokens of this request already in the KV cache from earlier chunks.
    pub prior_context: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchComposition {
    pub prefills: Vec<PrefillChunk>,
    /// Context processed so far by each decoding request.
    pub decode_context_lengths: Vec<u64>,
}

impl BatchComposition {
    pub fn num_decode_tokens(&self) -> u64 {
        self.decode_context_lengths.len() as u64
    }

    pub fn prefill_tokens(&self) -> u64 {
        self.prefills.iter().map(|p| p.tokens).sum()
    }

    pub fn total_tokens(&self) -> u64 {
        self.prefill_tokens() + self.num_decode_tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.prefills.is_empty() && self.decode_context_lengths.is_empty()
    }
}

/// `round(√(Σ pᵢ²))`, computed exactly in integers.
pub fn equivalent_prefill_length(prefill_lengths: &[u64]) -> Result<u64, EstimatorError> {
    if prefill_lengths.is_empty() || prefill_lengths.contains(&0) {
        return Err(EstimatorError::EmptyPrefill);
    }
    let sum_sq: u128 = prefill_lengths.iter().map(|&p| (p as u128) * (p as u128)).sum();
    let r = sum_sq.isqrt();
    // √S ≥ r + ½  ⇔  S ≥ r² + r + ¼  ⇔  S > r² + r
    Ok(if sum_sq > r * r + r { r + 1 } else { r } as u64)
}

/// Decode attention features: total KV bytes fetched per layer and the
/// number of decode tokens.
pub fn decode_features_with(context_lengths: &[u64], kv_bytes_per_token: u64) -> OpFeatures {
    let total: u64 = context_lengths.iter().sum();
    OpFeatures::attention(context_lengths.len() as f64, (total * kv_bytes_per_token) as f64)
}

pub fn decode_features(
    batch: &BatchComposition,
    spec: &ModelSpec,
    par: &ParallelismConfig,
) -> Result<OpFeatures, EstimatorError> {
    let kvb = spec.kv_bytes_per_token_per_layer(par.tp_degree)?;
    Ok(decode_features_with(&batch.decode_context_lengths, kvb))
}

fn attention_kv_bytes_per_token(op: &OperatorDescriptor) -> u64 {
    match op.shape {
        OpShape::Attention {
            kv_heads, head_dim, ..
        } => 2 * kv_heads * head_dim * op.elem_bytes,
        _ => 0,
    }
}

/// Kernel invocations of one block for `batch`: `(op, features)` pairs,
/// skipping attention kernels with nothing to do.
pub fn batch_invocations<'a>(
    ops: &'a [OperatorDescriptor],
    batch: &BatchComposition,
) -> Result<Vec<(&'a OperatorDescriptor, OpFeatures)>, EstimatorError> {
    let n = batch.total_tokens() as f64;
    let mut out = Vec::with_capacity(ops.len());
    for op in ops {
        let features = match (op.op_class, op.op_name.as_str()) {
            (OpClass::SequenceLevel, "attn_prefill") => {
                if batch.prefills.is_empty() {
                    continue;
                }
                let lens: Vec<u64> = batch.prefills.iter().map(|p| p.tokens).collect();
                let prior: u64 = batch.prefills.iter().map(|p| p.prior_context).sum();
                OpFeatures::attention(
                    equivalent_prefill_length(&lens)? as f64,
                    (prior * attention_kv_bytes_per_token(op)) as f64,
                )
            }
            (OpClass::SequenceLevel, _) => {
                if batch.decode_context_lengths.is_empty() {
                    continue;
                }
                decode_features_with(&batch.decode_context_lengths, attention_kv_bytes_per_token(op))
            }
            (OpClass::TokenLevel, _) => OpFeatures::tokens(n),
            (OpClass::Communication, _) => match op.shape {
                OpShape::Collective { bytes_per_token, .. } => {
                    OpFeatures::payload(n * bytes_per_token as f64)
                }
                _ => OpFeatures::payload(0.0),
            },
        };
        out.push((op, features));
    }
    Ok(out)
}

/// Predicted execution time of one batch on one pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchTime {
    /// Token- and sequence-level kernels over all layers of the stage.
    pub compute: f64,
    /// Tensor-parallel collectives over all layers of the stage.
    pub tp_comm: f64,
    /// Stage-boundary transfer.
    pub pp_comm: f64,
}

impl BatchTime {
    pub fn total(&self) -> f64 {
        self.compute + self.tp_comm + self.pp_comm
    }

    /// Time the stage is occupied before handing off.
    pub fn stage_time(&self) -> f64 {
        self.compute + self.tp_comm
    }
}

/// Sums per-kernel predictions for `batch` across `layers` blocks plus the
/// stage-level operators in `ops`.
pub fn predict_batch<P: RuntimePredictor + ?Sized>(
    predictor: &P,
    ops: &[OperatorDescriptor],
    layers: u64,
    batch: &BatchComposition,
) -> Result<BatchTime, EstimatorError> {
    let mut t = BatchTime::default();
    if batch.is_empty() {
        return Ok(t);
    }
    let layers = layers as f64;
    for (op, f) in batch_invocations(ops, batch)? {
        let rt = predictor.predict_op(&op.op_name, op.tp_degree, &f)?;
        match (op.scope, op.op_class) {
            (OpScope::PerStage, _) => t.pp_comm += rt,
            (OpScope::PerLayer, OpClass::Communication) => t.tp_comm += layers * rt,
            (OpScope::PerLayer, _) => t.compute += layers * rt,
        }
    }
    Ok(t)
}
