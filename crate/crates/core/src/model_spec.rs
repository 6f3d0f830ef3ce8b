//! Declarative transformer model specs and their per-device view under
//! tensor/pipeline parallel sharding.
//!
//! A spec file is a flat TOML table:
//!
//! ```toml
//! schema_version = 1
//! name = "llama2-7b"
//! num_layers = 32
//! hidden_dim = 4096
//! num_q_heads = 32
//! num_kv_heads = 32
//! head_dim = 128
//! mlp_dim = 11008
//! vocab_size = 32000
//! max_context = 4096
//! param_bytes_per_element = 2
//! attention_variant = "MHA"   # or "GQA"
//! ```
//!
//! Weight accounting covers the projection matrices, the input embedding
//! and the LM head. Norm gains and biases are ignored.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Spec files written with a newer layout are rejected.
pub const SCHEMA_VERSION: i64 = 1;

const REQUIRED_COUNTS: [&str; 10] = [
    "num_layers",
    "hidden_dim",
    "num_q_heads",
    "num_kv_heads",
    "head_dim",
    "mlp_dim",
    "vocab_size",
    "max_context",
    "param_bytes_per_element",
    "schema_version",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelSpecError {
    #[error("cannot read model spec {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("model spec is not valid TOML: {0}")]
    Syntax(String),
    #[error("model spec is missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("model spec key `{field}` must be a positive integer, got {value}")]
    NonPositive { field: &'static str, value: String },
    #[error("model spec key `{field}` has the wrong type: {reason}")]
    BadType { field: &'static str, reason: String },
    #[error("unsupported schema_version {0} (this build reads version {SCHEMA_VERSION})")]
    SchemaVersion(i64),
    #[error("model spec invariant violated: {0}")]
    Invariant(String),
    #[error("invalid sharding: {0}")]
    Sharding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttentionVariant {
    #[serde(rename = "MHA")]
    Mha,
    #[serde(rename = "GQA")]
    Gqa,
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionVariant::Mha => f.write_str("MHA"),
            AttentionVariant::Gqa => f.write_str("GQA"),
        }
    }
}

/// Validated transformer architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub num_q_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub mlp_dim: u64,
    pub vocab_size: u64,
    pub max_context: u64,
    pub param_bytes_per_element: u64,
    pub attention_variant: AttentionVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParallelismConfig {
    pub tp_degree: u64,
    pub pp_degree: u64,
    pub num_replicas: u64,
}

impl ParallelismConfig {
    pub fn new(tp_degree: u64, pp_degree: u64, num_replicas: u64) -> Self {
        Self {
            tp_degree,
            pp_degree,
            num_replicas,
        }
    }

    pub fn gpus_per_replica(&self) -> u64 {
        self.tp_degree * self.pp_degree
    }

    pub fn total_gpus(&self) -> u64 {
        self.gpus_per_replica() * self.num_replicas
    }
}

impl Default for ParallelismConfig {
    fn default() -> Self {
        Self::new(1, 1, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpClass {
    TokenLevel,
    SequenceLevel,
    Communication,
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpClass::TokenLevel => "token-level",
            OpClass::SequenceLevel => "sequence-level",
            OpClass::Communication => "communication",
        };
        f.write_str(s)
    }
}

/// Which operand axis a matmul is split along under tensor parallelism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShardAxis {
    /// Column-parallel: the output features are split.
    Output,
    /// Row-parallel: the input features are split.
    Input,
}

/// Per-device operand shape of an operator after sharding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpShape {
    Matmul {
        in_dim: u64,
        out_dim: u64,
        axis: ShardAxis,
    },
    Elementwise {
        width: u64,
        /// Whether `width` is split across TP ranks.
        sharded: bool,
    },
    Attention {
        q_heads: u64,
        kv_heads: u64,
        head_dim: u64,
    },
    Collective {
        /// Bytes moved per token of the batch.
        bytes_per_token: u64,
        /// Number of participating devices.
        world: u64,
    },
}

/// Whether an operator runs once per transformer block or once per
/// pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpScope {
    PerLayer,
    PerStage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorDescriptor {
    /// Unique within one block (e.g. `attn_allreduce`, `mlp_allreduce`).
    pub id: String,
    /// Kernel kind shared by operators with identical runtime behaviour.
    pub op_name: String,
    pub op_class: OpClass,
    pub shape: OpShape,
    pub scope: OpScope,
    pub tp_degree: u64,
    pub elem_bytes: u64,
}

impl OperatorDescriptor {
    /// Operand dimensions with the TP split undone.
    pub fn unsharded_shape(&self) -> OpShape {
        let tp = self.tp_degree;
        match self.shape {
            OpShape::Matmul {
                in_dim,
                out_dim,
                axis: ShardAxis::Output,
            } => OpShape::Matmul {
                in_dim,
                out_dim: out_dim * tp,
                axis: ShardAxis::Output,
            },
            OpShape::Matmul {
                in_dim,
                out_dim,
                axis: ShardAxis::Input,
            } => OpShape::Matmul {
                in_dim: in_dim * tp,
                out_dim,
                axis: ShardAxis::Input,
            },
            OpShape::Elementwise { width, sharded } => OpShape::Elementwise {
                width: if sharded { width * tp } else { width },
                sharded,
            },
            OpShape::Attention {
                q_heads,
                kv_heads,
                head_dim,
            } => OpShape::Attention {
                q_heads: q_heads * tp,
                kv_heads: kv_heads * tp,
                head_dim,
            },
            c @ OpShape::Collective { .. } => c,
        }
    }
}

impl ModelSpec {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ModelSpecError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ModelSpecError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        parse_model_spec(&text)
    }

    pub fn validate(&self) -> Result<(), ModelSpecError> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("mlp_dim", self.mlp_dim),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
            ("param_bytes_per_element", self.param_bytes_per_element),
        ];
        for (field, value) in counts {
            if value == 0 {
                return Err(ModelSpecError::NonPositive {
                    field,
                    value: "0".into(),
                });
            }
        }
        if self.num_q_heads * self.head_dim != self.hidden_dim {
            return Err(ModelSpecError::Invariant(format!(
                "num_q_heads × head_dim must equal hidden_dim ({} × {} != {})",
                self.num_q_heads, self.head_dim, self.hidden_dim
            )));
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(ModelSpecError::Invariant(format!(
                "num_kv_heads ({}) must divide num_q_heads ({})",
                self.num_kv_heads, self.num_q_heads
            )));
        }
        let is_mha = self.num_kv_heads == self.num_q_heads;
        match (self.attention_variant, is_mha) {
            (AttentionVariant::Mha, false) => Err(ModelSpecError::Invariant(format!(
                "attention_variant MHA requires num_kv_heads == num_q_heads ({} != {})",
                self.num_kv_heads, self.num_q_heads
            ))),
            (AttentionVariant::Gqa, true) => Err(ModelSpecError::Invariant(
                "attention_variant GQA requires num_kv_heads < num_q_heads".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn to_toml(&self) -> String {
        format!(
            "schema_version = {SCHEMA_VERSION}\nname = {:?}\nnum_layers = {}\nhidden_dim = {}\n\
             num_q_heads = {}\nnum_kv_heads = {}\nhead_dim = {}\nmlp_dim = {}\nvocab_size = {}\n\
             max_context = {}\nparam_bytes_per_element = {}\nattention_variant = \"{}\"\n",
            self.name,
            self.num_layers,
            self.hidden_dim,
            self.num_q_heads,
            self.num_kv_heads,
            self.head_dim,
            self.mlp_dim,
            self.vocab_size,
            self.max_context,
            self.param_bytes_per_element,
            self.attention_variant
        )
    }

    /// Checks that `par` is a legal sharding of this model.
    pub fn check_parallelism(&self, par: &ParallelismConfig) -> Result<(), ModelSpecError> {
        if par.tp_degree == 0 || par.pp_degree == 0 || par.num_replicas == 0 {
            return Err(ModelSpecError::Sharding(
                "tp_degree, pp_degree and num_replicas must be positive".into(),
            ));
        }
        if !self.num_layers.is_multiple_of(par.pp_degree) {
            return Err(ModelSpecError::Sharding(format!(
                "num_layers {} is not divisible by pp_degree {}",
                self.num_layers, par.pp_degree
            )));
        }
        if !self.num_kv_heads.is_multiple_of(par.tp_degree) {
            return Err(ModelSpecError::Sharding(format!(
                "num_kv_heads {} is not divisible by tp_degree {}",
                self.num_kv_heads, par.tp_degree
            )));
        }
        if !self.mlp_dim.is_multiple_of(par.tp_degree) {
            return Err(ModelSpecError::Sharding(format!(
                "mlp_dim {} is not divisible by tp_degree {}",
                self.mlp_dim, par.tp_degree
            )));
        }
        Ok(())
    }

    pub fn layers_per_stage(&self, par: &ParallelismConfig) -> Result<u64, ModelSpecError> {
        self.check_parallelism(par)?;
        Ok(self.num_layers / par.pp_degree)
    }

    /// Element count of one block's projection weights before sharding.
    pub fn layer_param_elements(&self) -> u64 {
        let h = self.hidden_dim;
        let qkv = h * (self.num_q_heads + 2 * self.num_kv_heads) * self.head_dim;
        let out = self.num_q_heads * self.head_dim * h;
        let mlp = 2 * h * self.mlp_dim;
        qkv + out + mlp
    }

    pub fn embedding_elements(&self) -> u64 {
        self.vocab_size * self.hidden_dim
    }

    /// Parameter bytes held by one device of pipeline stage `stage`.
    ///
    /// The vocab dimension of the embedding and LM head is sharded across
    /// TP ranks; the input embedding lives on the first stage and the LM
    /// head on the last.
    pub fn param_bytes_for_stage(
        &self,
        par: &ParallelismConfig,
        stage: u64,
    ) -> Result<u64, ModelSpecError> {
        let layers = self.layers_per_stage(par)?;
        if stage >= par.pp_degree {
            return Err(ModelSpecError::Sharding(format!(
                "stage {stage} out of range for pp_degree {}",
                par.pp_degree
            )));
        }
        let tp = par.tp_degree;
        let mut elems = layers * self.layer_param_elements() / tp;
        if stage == 0 {
            elems += self.embedding_elements().div_ceil(tp);
        }
        if stage + 1 == par.pp_degree {
            elems += self.embedding_elements().div_ceil(tp);
        }
        Ok(elems * self.param_bytes_per_element)
    }

    /// Largest per-device parameter footprint across stages.
    pub fn param_bytes_per_device(&self, par: &ParallelismConfig) -> Result<u64, ModelSpecError> {
        (0..par.pp_degree.max(1))
            .map(|s| self.param_bytes_for_stage(par, s))
            .try_fold(0, |acc, b| Ok(acc.max(b?)))
    }

    /// KV bytes one token occupies in a single layer on one device.
    pub fn kv_bytes_per_token_per_layer(&self, tp_degree: u64) -> Result<u64, ModelSpecError> {
        if tp_degree == 0 || tp_degree > self.num_kv_heads || !self.num_kv_heads.is_multiple_of(tp_degree) {
            return Err(ModelSpecError::Sharding(format!(
                "tp_degree {tp_degree} cannot shard {} kv heads",
                self.num_kv_heads
            )));
        }
        Ok(2 * (self.num_kv_heads / tp_degree) * self.head_dim * self.param_bytes_per_element)
    }

    /// KV bytes one token occupies on one device across its stage's layers.
    pub fn kv_bytes_per_token_per_device(
        &self,
        par: &ParallelismConfig,
    ) -> Result<u64, ModelSpecError> {
        let per_layer = self.kv_bytes_per_token_per_layer(par.tp_degree)?;
        Ok(per_layer * self.layers_per_stage(par)?)
    }

    /// Bytes of the hidden-state tensor for one token.
    pub fn activation_bytes_per_token(&self) -> u64 {
        self.hidden_dim * self.param_bytes_per_element
    }
}

/// Parses a model spec document; errors name the offending field.
pub fn parse_model_spec(text: &str) -> Result<ModelSpec, ModelSpecError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ModelSpecError::Syntax(e.to_string()))?;

    let count = |field: &'static str| -> Result<u64, ModelSpecError> {
        let value = table.get(field).ok_or(ModelSpecError::MissingKey(field))?;
        match value {
            toml::Value::Integer(i) if *i > 0 => Ok(*i as u64),
            toml::Value::Integer(i) => Err(ModelSpecError::NonPositive {
                field,
                value: i.to_string(),
            }),
            other => Err(ModelSpecError::BadType {
                field,
                reason: format!("expected integer, found {}", other.type_str()),
            }),
        }
    };

    for field in REQUIRED_COUNTS {
        count(field)?;
    }
    let version = count("schema_version")? as i64;
    if version != SCHEMA_VERSION {
        return Err(ModelSpecError::SchemaVersion(version));
    }

    let name = match table.get("name") {
        Some(toml::Value::String(s)) if !s.is_empty() => s.clone(),
        Some(toml::Value::String(_)) => {
            return Err(ModelSpecError::BadType {
                field: "name",
                reason: "must not be empty".into(),
            })
        }
        Some(other) => {
            return Err(ModelSpecError::BadType {
                field: "name",
                reason: format!("expected string, found {}", other.type_str()),
            })
        }
        None => return Err(ModelSpecError::MissingKey("name")),
    };
    let attention_variant = match table.get("attention_variant") {
        Some(toml::Value::String(s)) => match s.as_str() {
            "MHA" => AttentionVariant::Mha,
            "GQA" => AttentionVariant::Gqa,
            other => {
                return Err(ModelSpecError::BadType {
                    field: "attention_variant",
                    reason: format!("expected \"MHA\" or \"GQA\", found {other:?}"),
                })
            }
        },
        Some(other) => {
            return Err(ModelSpecError::BadType {
                field: "attention_variant",
                reason: format!("expected string, found {}", other.type_str()),
            })
        }
        None => return Err(ModelSpecError::MissingKey("attention_variant")),
    };

    let spec = ModelSpec {
        name,
        num_layers: count("num_layers")?,
        hidden_dim: count("hidden_dim")?,
        num_q_heads: count("num_q_heads")?,
        num_kv_heads: count("num_kv_heads")?,
        head_dim: count("head_dim")?,
        mlp_dim: count("mlp_dim")?,
        vocab_size: count("vocab_size")?,
        max_context: count("max_context")?,
        param_bytes_per_element: count("param_bytes_per_element")?,
        attention_variant,
    };
    spec.validate()?;
    Ok(spec)
}

/// Per-device operator set of one pipeline stage: every block operator
/// once, followed by stage-level operators.
pub fn derive_operators(
    spec: &ModelSpec,
    par: &ParallelismConfig,
) -> Result<Vec<OperatorDescriptor>, ModelSpecError> {
    spec.validate()?;
    spec.check_parallelism(par)?;
    let tp = par.tp_degree;
    let h = spec.hidden_dim;
    let d = spec.head_dim;
    let q = spec.num_q_heads / tp;
    let kv = spec.num_kv_heads / tp;
    let eb = spec.param_bytes_per_element;

    let op = |id: &str, op_name: &str, op_class, shape, scope| OperatorDescriptor {
        id: id.to_string(),
        op_name: op_name.to_string(),
        op_class,
        shape,
        scope,
        tp_degree: tp,
        elem_bytes: eb,
    };
    let norm = OpShape::Elementwise {
        width: h,
        sharded: false,
    };
    let attention = OpShape::Attention {
        q_heads: q,
        kv_heads: kv,
        head_dim: d,
    };
    let allreduce = OpShape::Collective {
        bytes_per_token: h * eb,
        world: tp,
    };
    use OpClass::*;
    use OpScope::*;

    let mut ops = vec![
        op("attn_norm", "add_norm", TokenLevel, norm, PerLayer),
        op(
            "qkv_proj",
            "qkv_proj",
            TokenLevel,
            OpShape::Matmul {
                in_dim: h,
                out_dim: (q + 2 * kv) * d,
                axis: ShardAxis::Output,
            },
            PerLayer,
        ),
        op("attn_prefill", "attn_prefill", SequenceLevel, attention, PerLayer),
        op("attn_decode", "attn_decode", SequenceLevel, attention, PerLayer),
        op(
            "attn_out_proj",
            "attn_out_proj",
            TokenLevel,
            OpShape::Matmul {
                in_dim: q * d,
                out_dim: h,
                axis: ShardAxis::Input,
            },
            PerLayer,
        ),
    ];
    if tp > 1 {
        ops.push(op("attn_allreduce", "allreduce", Communication, allreduce, PerLayer));
    }
    ops.extend([
        op("mlp_norm", "add_norm", TokenLevel, norm, PerLayer),
        op(
            "mlp_up_proj",
            "mlp_up_proj",
            TokenLevel,
            OpShape::Matmul {
                in_dim: h,
                out_dim: spec.mlp_dim / tp,
                axis: ShardAxis::Output,
            },
            PerLayer,
        ),
        op(
            "act_fn",
            "act_fn",
            TokenLevel,
            OpShape::Elementwise {
                width: spec.mlp_dim / tp,
                sharded: true,
            },
            PerLayer,
        ),
        op(
            "mlp_down_proj",
            "mlp_down_proj",
            TokenLevel,
            OpShape::Matmul {
                in_dim: spec.mlp_dim / tp,
                out_dim: h,
                axis: ShardAxis::Input,
            },
            PerLayer,
        ),
    ]);
    if tp > 1 {
        ops.push(op("mlp_allreduce", "allreduce", Communication, allreduce, PerLayer));
    }
    if par.pp_degree > 1 {
        ops.push(send_recv_descriptor(spec, tp));
    }
    Ok(ops)
}

/// Stage-boundary activation transfer.
pub fn send_recv_descriptor(spec: &ModelSpec, tp_degree: u64) -> OperatorDescriptor {
    OperatorDescriptor {
        id: "send_recv".into(),
        op_name: "send_recv".into(),
        op_class: OpClass::Communication,
        shape: OpShape::Collective {
            bytes_per_token: spec.activation_bytes_per_token(),
            world: 2,
        },
        scope: OpScope::PerStage,
        tp_degree,
        elem_bytes: spec.param_bytes_per_element,
    }
}

/// Distinct kernels a profile must cover for `spec` at `tp_degree`,
/// including the pipeline transfer.
pub fn profiled_kernels(
    spec: &ModelSpec,
    tp_degree: u64,
) -> Result<Vec<OperatorDescriptor>, ModelSpecError> {
    let par = ParallelismConfig::new(tp_degree, 1, 1);
    let mut out: Vec<OperatorDescriptor> = Vec::new();
    for op in derive_operators(spec, &par)? {
        if !out.iter().any(|o| o.op_name == op.op_name) {
            out.push(op);
        }
    }
    out.push(send_recv_descriptor(spec, tp_degree));
    Ok(out)
}
