//! Dense runtime lookup tables sampled from a trained model.
//!
//! Each kernel gets a regular grid in `ln(1 + feature)` space covering the
//! model's allowed query range; lookups interpolate (bi)linearly in that
//! space on `ln(runtime)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{op_key, transform, EstimatorError, EstimatorModel, RuntimePredictor};
use crate::profiler::{FeatureSchema, OpFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    /// Grid resolution of two-feature kernels, in samples per doubling of
    /// `1 + feature`.
    pub points_per_octave: u32,
    /// Same for single-feature kernels, which are cheap to sample densely.
    #[serde(default = "default_1d")]
    pub points_per_octave_1d: u32,
}

fn default_1d() -> u32 {
    64
}

impl Default for TableConfig {
    fn default() -> Self {
        Self {
            points_per_octave: 16,
            points_per_octave_1d: default_1d(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OpTable {
    op_name: String,
    tp_degree: u64,
    feature_names: Vec<String>,
    /// Allowed raw query range per feature.
    range: Vec<(f64, f64)>,
    /// Grid coordinates per axis, transformed space.
    axes: Vec<Vec<f64>>,
    /// `ln(runtime)`, row-major with the last axis fastest.
    values: Vec<f64>,
}

fn axis(lo: f64, hi: f64, per_octave: u32) -> Vec<f64> {
    let (a, b) = (lo.ln_1p(), hi.ln_1p());
    if b - a <= 0.0 {
        return vec![a];
    }
    let step = std::f64::consts::LN_2 / per_octave.max(1) as f64;
    let n = ((b - a) / step).ceil() as usize;
    (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
}

/// Position of `v` in `axis` as (lower index, weight of upper neighbour).
fn locate(axis: &[f64], v: f64) -> (usize, f64) {
    if axis.len() == 1 {
        return (0, 0.0);
    }
    let v = v.clamp(axis[0], axis[axis.len() - 1]);
    let i = axis.partition_point(|&a| a <= v).clamp(1, axis.len() - 1) - 1;
    let w = (v - axis[i]) / (axis[i + 1] - axis[i]);
    (i, w)
}

impl OpTable {
    fn lookup(&self, x: &[f64]) -> f64 {
        let t = transform(x);
        match self.axes.len() {
            1 => {
                let (i, w) = locate(&self.axes[0], t[0]);
                let v0 = self.values[i];
                let v1 = *self.values.get(i + 1).unwrap_or(&v0);
                (v0 + w * (v1 - v0)).exp()
            }
            _ => {
                let stride = self.axes[1].len();
                let (i, wi) = locate(&self.axes[0], t[0]);
                let (j, wj) = locate(&self.axes[1], t[1]);
                let at = |a: usize, b: usize| {
                    let a = a.min(self.axes[0].len() - 1);
                    let b = b.min(stride - 1);
                    self.values[a * stride + b]
                };
                let v = (1.0 - wi) * ((1.0 - wj) * at(i, j) + wj * at(i, j + 1))
                    + wi * ((1.0 - wj) * at(i + 1, j) + wj * at(i + 1, j + 1));
                v.exp()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupTable {
    pub format_version: u32,
    pub config: TableConfig,
    tables: BTreeMap<String, OpTable>,
}

/// Samples every kernel of `model` onto a dense grid.
pub fn build_lookup_table(model: &EstimatorModel, config: TableConfig) -> LookupTable {
    let margin = model.config.extrapolation_margin;
    let tables = model
        .ops
        .iter()
        .map(|(key, op)| {
            let range = op.allowed_range(margin);
            let per_octave = if range.len() == 1 {
                config.points_per_octave_1d
            } else {
                config.points_per_octave
            };
            let axes: Vec<Vec<f64>> = range.iter().map(|&(lo, hi)| axis(lo, hi, per_octave)).collect();
            let values: Vec<f64> = match axes.len() {
                1 => axes[0]
                    .iter()
                    .map(|&a| op.forest.predict(&[a]))
                    .collect(),
                _ => axes[0]
                    .iter()
                    .flat_map(|&a| axes[1].iter().map(move |&b| (a, b)))
                    .map(|(a, b)| op.forest.predict(&[a, b]))
                    .collect(),
            };
            (
                key.clone(),
                OpTable {
                    op_name: op.op_name.clone(),
                    tp_degree: op.tp_degree,
                    feature_names: op.feature_names.clone(),
                    range,
                    axes,
                    values,
                },
            )
        })
        .collect();
    LookupTable {
        format_version: super::ESTIMATOR_FORMAT_VERSION,
        config,
        tables,
    }
}

impl LookupTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EstimatorError> {
        serde_json::from_str(text).map_err(|e| EstimatorError::Format(e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tables.values().map(|t| t.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }
}

impl RuntimePredictor for LookupTable {
    fn predict_op(&self, op_name: &str, tp_degree: u64, features: &OpFeatures) -> Result<f64, EstimatorError> {
        let t = self
            .tables
            .get(&op_key(op_name, tp_degree))
            .ok_or_else(|| EstimatorError::NotTrained {
                op_name: op_name.into(),
                tp_degree,
            })?;
        let x = FeatureSchema::for_op(op_name)?.extract(features);
        for ((v, (lo, hi)), name) in x.iter().zip(&t.range).zip(&t.feature_names) {
            if !(v.is_finite() && v >= lo && v <= hi) {
                return Err(EstimatorError::Extrapolation {
                    op: op_key(op_name, tp_degree),
                    feature: name.clone(),
                    value: *v,
                    lo: *lo,
                    hi: *hi,
                });
            }
        }
        Ok(t.lookup(&x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{train, TrainConfig};
    use crate::model_spec::{AttentionVariant, ModelSpec};
    use crate::profiler::{generate_profile, DeviceProfile};

    fn model() -> EstimatorModel {
        let spec = ModelSpec {
            name: "t".into(),
            num_layers: 2,
            hidden_dim: 256,
            num_q_heads: 4,
            num_kv_heads: 4,
            head_dim: 64,
            mlp_dim: 1024,
            vocab_size: 100,
            max_context: 512,
            param_bytes_per_element: 2,
            attention_variant: AttentionVariant::Mha,
        };
        let recs = generate_profile(&spec, &[1], &DeviceProfile::a100_80g(), 32).unwrap();
        train(&recs, &TrainConfig::default()).unwrap()
    }

    #[test]
    fn table_matches_model_at_grid_nodes() {
        let m = model();
        let t = build_lookup_table(&m, TableConfig::default());
        for n in [1.0, 64.0, 512.0] {
            let f = OpFeatures::tokens(n);
            let a = m.predict_op("qkv_proj", 1, &f).unwrap();
            let b = t.predict_op("qkv_proj", 1, &f).unwrap();
            assert!(((a - b) / a).abs() < 0.02);
        }
        assert!(!t.is_empty());
    }

    #[test]
    fn table_rejects_out_of_range() {
        let t = build_lookup_table(&model(), TableConfig::default());
        assert!(t.predict_op("act_fn", 1, &OpFeatures::tokens(10_000.0)).is_err());
        assert!(t.predict_op("act_fn", 4, &OpFeatures::tokens(1.0)).is_err());
    }

    #[test]
    fn locate_interpolates() {
        let ax = vec![0.0, 1.0, 2.0];
        assert_eq!(locate(&ax, 1.5), (1, 0.5));
        assert_eq!(locate(&ax, 2.0), (1, 1.0));
        assert_eq!(locate(&ax, -1.0), (0, 0.0));
    }
}
