//! KV-cache memory planning and paged block accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SchedulerError;
use crate::model_spec::{ModelSpec, ParallelismConfig};
use crate::profiler::DeviceProfile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub block_size: u64,
    /// Fraction of blocks kept free when admitting new work.
    pub watermark_fraction: f64,
    /// Fraction of device memory set aside for activations and workspace.
    pub activation_reserve_fraction: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            watermark_fraction: 0.01,
            activation_reserve_fraction: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub kv_capacity_tokens: u64,
    pub block_size: u64,
    pub num_blocks: u64,
    pub watermark_blocks: u64,
    /// KV bytes of one token on the most loaded device.
    pub kv_bytes_per_token: u64,
}

impl MemoryPlan {
    /// Plan from the bytes left for KV after parameters and reserve.
    pub fn from_free_bytes(
        free_bytes: u64,
        kv_bytes_per_token: u64,
        block_size: u64,
        watermark_fraction: f64,
    ) -> Result<Self, SchedulerError> {
        if block_size == 0 || kv_bytes_per_token == 0 {
            return Err(SchedulerError::Config("block size and KV bytes per token must be positive".into()));
        }
        let num_blocks = free_bytes / (block_size * kv_bytes_per_token);
        if num_blocks == 0 {
            return Err(SchedulerError::InsufficientMemory(format!(
                "{free_bytes} free bytes hold no {block_size}-token block"
            )));
        }
        Ok(Self {
            kv_capacity_tokens: num_blocks * block_size,
            block_size,
            num_blocks,
            watermark_blocks: (watermark_fraction.clamp(0.0, 1.0) * num_blocks as f64).floor() as u64,
            kv_bytes_per_token,
        })
    }

    pub fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.block_size)
    }
}

/// KV capacity of one replica device after parameters and the activation
/// reserve.
pub fn plan_memory(
    spec: &ModelSpec,
    par: &ParallelismConfig,
    dev: &DeviceProfile,
    cfg: &MemoryConfig,
) -> Result<MemoryPlan, SchedulerError> {
    let params = spec.param_bytes_per_device(par)?;
    let reserve = (cfg.activation_reserve_fraction.clamp(0.0, 1.0) * dev.device_mem as f64) as u64;
    let used = params.saturating_add(reserve);
    if used >= dev.device_mem {
        return Err(SchedulerError::InsufficientMemory(format!(
            "insufficient device memory: {params} parameter bytes + {reserve} reserve on a {} byte device",
            dev.device_mem
        )));
    }
    let kvb = spec.kv_bytes_per_token_per_device(par)?;
    MemoryPlan::from_free_bytes(dev.device_mem - used, kvb, cfg.block_size, cfg.watermark_fraction)
}

/// Block ownership for one replica.
#[derive(Debug, Clone)]
pub struct BlockManager {
    plan: MemoryPlan,
    used: u64,
    owned: BTreeMap<u64, u64>,
}

impl BlockManager {
    pub fn new(plan: MemoryPlan) -> Self {
        Self {
            plan,
            used: 0,
            owned: BTreeMap::new(),
        }
    }

    pub fn plan(&self) -> &MemoryPlan {
        &self.plan
    }

    pub fn free_blocks(&self) -> u64 {
        self.plan.num_blocks - self.used
    }

    pub fn used_blocks(&self) -> u64 {
        self.used
    }

    pub fn owned(&self, request: u64) -> u64 {
        self.owned.get(&request).copied().unwrap_or(0)
    }

    /// Extra blocks `request` needs to hold `tokens` tokens.
    pub fn growth(&self, request: u64, tokens: u64) -> u64 {
        self.plan.blocks_for(tokens).saturating_sub(self.owned(request))
    }

    /// Grows `request`'s allocation to cover `tokens` tokens.
    pub fn reserve(&mut self, request: u64, tokens: u64) -> Result<(), SchedulerError> {
        let extra = self.growth(request, tokens);
        if extra > self.free_blocks() {
            return Err(SchedulerError::Internal(format!(
                "request {request} needs {extra} blocks, {} free",
                self.free_blocks()
            )));
        }
        self.used += extra;
        *self.owned.entry(request).or_insert(0) += extra;
        Ok(())
    }

    pub fn release(&mut self, request: u64) -> u64 {
        let n = self.owned.remove(&request).unwrap_or(0);
        self.used -= n;
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::AttentionVariant;

    fn spec() -> ModelSpec {
        ModelSpec {
            name: "7b".into(),
            num_layers: 32,
            hidden_dim: 4096,
            num_q_heads: 32,
            num_kv_heads: 32,
            head_dim: 128,
            mlp_dim: 11008,
            vocab_size: 32000,
            max_context: 4096,
            param_bytes_per_element: 2,
            attention_variant: AttentionVariant::Mha,
        }
    }

    #[test]
    fn toy_plan_arithmetic() {
        let p = MemoryPlan::from_free_bytes(1000, 10, 16, 0.0).unwrap();
        assert_eq!((p.num_blocks, p.kv_capacity_tokens), (6, 96));
    }

    #[test]
    fn model_too_large_is_an_error() {
        let mut dev = DeviceProfile::a100_80g();
        dev.device_mem = 1 << 30;
        let e = plan_memory(&spec(), &ParallelismConfig::new(1, 1, 1), &dev, &MemoryConfig::default());
        assert!(e.unwrap_err().to_string().contains("insufficient device memory"));
    }

    #[test]
    fn doubling_tp_more_than_doubles_capacity() {
        let dev = DeviceProfile::a100_80g();
        let cfg = MemoryConfig::default();
        let a = plan_memory(&spec(), &ParallelismConfig::new(1, 1, 1), &dev, &cfg).unwrap();
        let b = plan_memory(&spec(), &ParallelismConfig::new(2, 1, 1), &dev, &cfg).unwrap();
        assert!(b.kv_capacity_tokens > 2 * a.kv_capacity_tokens);
        let free = dev.device_mem as f64 * 0.9 - spec().param_bytes_per_device(&ParallelismConfig::new(1, 1, 1)).unwrap() as f64;
        assert!((a.kv_capacity_tokens * a.kv_bytes_per_token) as f64 <= free);
    }

    #[test]
    fn block_accounting() {
        let plan = MemoryPlan::from_free_bytes(10 * 16, 1, 16, 0.0).unwrap();
        let mut m = BlockManager::new(plan);
        m.reserve(1, 17).unwrap();
        assert_eq!(m.used_blocks(), 2);
        assert_eq!(m.growth(1, 32), 0);
        assert_eq!(m.growth(1, 33), 1);
        assert!(m.reserve(2, 16 * 9).is_err());
        assert_eq!(m.release(1), 2);
        assert_eq!(m.free_blocks(), 10);
    }
}
