//! Replica-level batching and KV memory management, plus the global router
//! and the pipeline stage schedule.
//!
//! A [`ReplicaScheduler`] owns one replica's waiting queue, running set and
//! block manager. Each call to [`ReplicaScheduler::schedule`] forms the next
//! [`BatchPlan`]; [`ReplicaScheduler::complete`] applies its effects once the
//! simulator has advanced past the batch.
//!
//! Preemption frees all of a request's blocks and re-queues it. On
//! readmission it rebuilds the discarded KV state (the prompt plus every
//! emitted token but the newest) as a prefill; that work is counted in
//! `recomputed_tokens`.

pub mod memory;
pub mod router;
pub mod stage;

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{BatchComposition, PrefillChunk};
use crate::model_spec::ModelSpecError;
use crate::workload::Request;
pub use memory::{plan_memory, BlockManager, MemoryConfig, MemoryPlan};
pub use router::{Route, Router, RoutingPolicy};
pub use stage::{split_round_robin, stage_schedule};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("{0}")]
    InsufficientMemory(String),
    #[error(
        "request {id} needs {need} KV blocks but the replica has {usable} usable \
         ({total} total, {watermark} watermark)"
    )]
    RequestTooLarge {
        id: u64,
        need: u64,
        usable: u64,
        total: u64,
        watermark: u64,
    },
    #[error("scheduler config: {0}")]
    Config(String),
    #[error("scheduler invariant violated: {0}")]
    Internal(String),
    #[error(transparent)]
    Spec(#[from] ModelSpecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    FasterTransformer,
    OrcaPlus,
    Vllm,
    SarathiServe,
    #[serde(rename = "lightllm")]
    LightLlm,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::FasterTransformer,
        PolicyKind::OrcaPlus,
        PolicyKind::Vllm,
        PolicyKind::SarathiServe,
        PolicyKind::LightLlm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::FasterTransformer => "faster_transformer",
            PolicyKind::OrcaPlus => "orca_plus",
            PolicyKind::Vllm => "vllm",
            PolicyKind::SarathiServe => "sarathi_serve",
            PolicyKind::LightLlm => "lightllm",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = SchedulerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| SchedulerError::Config(format!("unknown scheduler `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    pub max_batch_size: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens_per_iter: u64,
    /// Per-iteration token budget of chunked prefill; Sarathi only.
    #[serde(default = "default_chunk")]
    pub chunk_size: u64,
}

fn default_max_tokens() -> u64 {
    4096
}

fn default_chunk() -> u64 {
    512
}

impl PolicyConfig {
    pub fn new(policy: PolicyKind, max_batch_size: u64) -> Self {
        Self {
            policy,
            max_batch_size,
            max_tokens_per_iter: default_max_tokens(),
            chunk_size: default_chunk(),
        }
    }

    pub fn with_chunk(mut self, chunk_size: u64) -> Self {
        self.chunk_size = chunk_size;
        self
    }

    /// Tokens one iteration may carry.
    pub fn token_limit(&self) -> u64 {
        match self.policy {
            PolicyKind::SarathiServe => self.chunk_size,
            _ => self.max_tokens_per_iter,
        }
    }

    /// LightLLM allocates KV per token.
    pub fn memory_config(&self, base: MemoryConfig) -> MemoryConfig {
        match self.policy {
            PolicyKind::LightLlm => MemoryConfig {
                block_size: 1,
                ..base
            },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.max_batch_size == 0 || self.max_tokens_per_iter == 0 || self.chunk_size == 0 {
            return Err(SchedulerError::Config(
                "max_batch_size, max_tokens_per_iter and chunk_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One request's progress on a replica.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq {
    pub id: u64,
    pub arrival: f64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    /// Output tokens emitted, kept across restarts.
    pub emitted: u64,
    /// Tokens the current attempt must prefill.
    pub prefill_target: u64,
    /// Tokens of the current attempt's prefill done so far.
    pub prefilled: u64,
    /// Tokens held in the KV cache.
    pub kv_len: u64,
    pub restarts: u32,
    pub recomputed_tokens: u64,
}

impl Seq {
    pub fn from_request(r: &Request) -> Self {
        Self {
            id: r.id,
            arrival: r.arrival_time.unwrap_or(0.0),
            prefill_tokens: r.prefill_tokens,
            decode_tokens: r.decode_tokens,
            emitted: 0,
            prefill_target: r.prefill_tokens,
            prefilled: 0,
            kv_len: 0,
            restarts: 0,
            recomputed_tokens: 0,
        }
    }

    pub fn in_prefill(&self) -> bool {
        self.prefilled < self.prefill_target
    }

    pub fn finished(&self) -> bool {
        self.emitted >= self.decode_tokens
    }

    /// Largest KV footprint the request can reach.
    pub fn peak_kv(&self) -> u64 {
        self.prefill_tokens + self.decode_tokens
    }

    fn key(&self) -> (f64, u64) {
        (self.arrival, self.id)
    }

    fn restart(&mut self) {
        self.recomputed_tokens += self.kv_len;
        self.restarts += 1;
        self.prefill_target = if self.emitted == 0 {
            self.prefill_tokens
        } else {
            self.prefill_tokens + self.emitted - 1
        };
        self.prefilled = 0;
        self.kv_len = 0;
    }
}

fn before(a: &Seq, b: &Seq) -> bool {
    let (ta, ia) = a.key();
    let (tb, ib) = b.key();
    ta.total_cmp(&tb).then(ia.cmp(&ib)).is_lt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillEntry {
    pub id: u64,
    pub tokens: u64,
    /// KV tokens the request already holds.
    pub prior_context: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeEntry {
    pub id: u64,
    /// KV tokens after this step's token is appended.
    pub context: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub prefills: Vec<PrefillEntry>,
    pub decodes: Vec<DecodeEntry>,
    /// Requests evicted while forming this plan.
    pub preempted: Vec<u64>,
}

impl BatchPlan {
    pub fn total_current_tokens(&self) -> u64 {
        self.prefills.iter().map(|p| p.tokens).sum::<u64>() + self.decodes.len() as u64
    }

    pub fn batch_size(&self) -> usize {
        self.prefills.len() + self.decodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefills.is_empty() && self.decodes.is_empty()
    }

    pub fn composition(&self) -> BatchComposition {
        BatchComposition {
            prefills: self
                .prefills
                .iter()
                .map(|p| PrefillChunk {
                    tokens: p.tokens,
                    prior_context: p.prior_context,
                })
                .collect(),
            decode_context_lengths: self.decodes.iter().map(|d| d.context).collect(),
        }
    }

    /// Whether the plan is within `cfg`'s size and token limits. A lone
    /// prompt longer than the token limit runs by itself.
    pub fn within_limits(&self, cfg: &PolicyConfig) -> bool {
        let size_ok = self.batch_size() as u64 <= cfg.max_batch_size;
        let tokens = self.total_current_tokens();
        let lone_prompt = cfg.policy != PolicyKind::SarathiServe && self.prefills.len() == 1 && self.decodes.is_empty();
        size_ok && (tokens <= cfg.token_limit() || lone_prompt)
    }
}

/// Effects of one completed batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Completion {
    /// Requests that emitted a token.
    pub emitted: Vec<u64>,
    /// Requests that emitted their last token.
    pub finished: Vec<Seq>,
}

#[derive(Debug, Clone)]
pub struct ReplicaScheduler {
    cfg: PolicyConfig,
    mem: BlockManager,
    waiting: VecDeque<Seq>,
    /// Sorted by arrival, then id.
    running: Vec<Seq>,
    /// FasterTransformer: members of the batch in flight.
    group: Vec<u64>,
}

impl ReplicaScheduler {
    pub fn new(cfg: PolicyConfig, plan: MemoryPlan) -> Result<Self, SchedulerError> {
        cfg.validate()?;
        if cfg.policy == PolicyKind::LightLlm && plan.block_size != 1 {
            return Err(SchedulerError::Config("lightllm needs a block size of 1".into()));
        }
        Ok(Self {
            cfg,
            mem: BlockManager::new(plan),
            waiting: VecDeque::new(),
            running: Vec::new(),
            group: Vec::new(),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &BlockManager {
        &self.mem
    }

    pub fn outstanding(&self) -> usize {
        self.waiting.len() + self.running.len()
    }

    pub fn running(&self) -> &[Seq] {
        &self.running
    }

    pub fn waiting(&self) -> impl Iterator<Item = &Seq> {
        self.waiting.iter()
    }

    pub fn is_idle(&self) -> bool {
        self.waiting.is_empty() && self.running.is_empty()
    }

    fn usable_blocks(&self) -> u64 {
        let plan = self.mem.plan();
        match self.cfg.policy {
            PolicyKind::FasterTransformer => plan.num_blocks,
            _ => plan.num_blocks - plan.watermark_blocks,
        }
    }

    /// Queues a request. Fails if it could never fit on this replica.
    pub fn enqueue(&mut self, r: &Request) -> Result<(), SchedulerError> {
        let seq = Seq::from_request(r);
        let plan = *self.mem.plan();
        let need = plan.blocks_for(seq.peak_kv());
        if need > self.usable_blocks() {
            return Err(SchedulerError::RequestTooLarge {
                id: r.id,
                need,
                usable: self.usable_blocks(),
                total: plan.num_blocks,
                watermark: plan.watermark_blocks,
            });
        }
        self.push_waiting(seq);
        Ok(())
    }

    fn push_waiting(&mut self, seq: Seq) {
        let pos = self.waiting.partition_point(|s| before(s, &seq));
        self.waiting.insert(pos, seq);
    }

    fn push_running(&mut self, seq: Seq) {
        let pos = self.running.partition_point(|s| before(s, &seq));
        self.running.insert(pos, seq);
    }

    /// Blocks the decoding members of `running` need for one more token.
    fn decode_growth(&self) -> u64 {
        self.running
            .iter()
            .filter(|s| !s.in_prefill() && !s.finished())
            .map(|s| self.mem.growth(s.id, s.kv_len + 1))
            .sum()
    }

    /// Evicts the latest-arrived running requests until the next decode
    /// step leaves `keep_free` blocks.
    fn make_decode_room(&mut self, keep_free: u64) -> Vec<u64> {
        let mut out = Vec::new();
        while self.running.len() > 1 && self.mem.free_blocks() < self.decode_growth() + keep_free {
            let mut victim = self.running.pop().expect("non-empty");
            self.mem.release(victim.id);
            victim.restart();
            out.push(victim.id);
            self.push_waiting(victim);
        }
        out
    }

    fn admit_front(&mut self) -> Seq {
        let seq = self.waiting.pop_front().expect("non-empty");
        self.mem
            .reserve(seq.id, seq.prefill_target)
            .expect("admission checked free blocks");
        seq
    }

    /// Forms the next batch. An empty plan means nothing can run.
    pub fn schedule(&mut self) -> Result<BatchPlan, SchedulerError> {
        let plan = match self.cfg.policy {
            PolicyKind::FasterTransformer => self.schedule_ft(),
            PolicyKind::Vllm => self.schedule_vllm(),
            PolicyKind::OrcaPlus | PolicyKind::LightLlm => self.schedule_orca(),
            PolicyKind::SarathiServe => self.schedule_sarathi(),
        }?;
        self.check()?;
        Ok(plan)
    }

    fn decode_entries(&mut self, budget: u64) -> Result<Vec<DecodeEntry>, SchedulerError> {
        let mut out = Vec::new();
        for i in 0..self.running.len() {
            if out.len() as u64 >= budget {
                break;
            }
            let s = &self.running[i];
            if s.in_prefill() || s.finished() {
                continue;
            }
            let (id, context) = (s.id, s.kv_len + 1);
            self.mem.reserve(id, context)?;
            out.push(DecodeEntry { id, context });
        }
        Ok(out)
    }

    fn schedule_ft(&mut self) -> Result<BatchPlan, SchedulerError> {
        let mut plan = BatchPlan::default();
        if !self.running.is_empty() {
            plan.decodes = self.decode_entries(u64::MAX)?;
            return Ok(plan);
        }
        let limit = self.cfg.token_limit();
        let mut tokens = 0;
        while let Some(s) = self.waiting.front() {
            if plan.prefills.len() as u64 >= self.cfg.max_batch_size {
                break;
            }
            let t = s.prefill_target;
            let lone = plan.prefills.is_empty();
            if tokens + t > limit && !lone {
                break;
            }
            let need = self.mem.plan().blocks_for(s.peak_kv());
            if need > self.mem.free_blocks() {
                break;
            }
            let s = self.waiting.pop_front().expect("non-empty");
            self.mem.reserve(s.id, s.peak_kv())?;
            tokens += t;
            plan.prefills.push(PrefillEntry {
                id: s.id,
                tokens: t,
                prior_context: 0,
            });
            self.push_running(s);
            if tokens > limit {
                break;
            }
        }
        self.group = self.running.iter().map(|s| s.id).collect();
        Ok(plan)
    }

    fn schedule_vllm(&mut self) -> Result<BatchPlan, SchedulerError> {
        let mut plan = BatchPlan::default();
        let limit = self.cfg.token_limit();
        let watermark = self.mem.plan().watermark_blocks;
        let reserved = self.decode_growth();
        let mut tokens = 0;
        let mut admitted = Vec::new();
        while let Some(s) = self.waiting.front() {
            if (self.running.len() + admitted.len()) as u64 >= self.cfg.max_batch_size {
                break;
            }
            let t = s.prefill_target;
            if tokens + t > limit && !admitted.is_empty() {
                break;
            }
            let need = self.mem.plan().blocks_for(t);
            if self.mem.free_blocks() < need + reserved + watermark {
                break;
            }
            let s = self.admit_front();
            tokens += t;
            plan.prefills.push(PrefillEntry {
                id: s.id,
                tokens: t,
                prior_context: 0,
            });
            admitted.push(s);
            if tokens > limit {
                break;
            }
        }
        if !admitted.is_empty() {
            for s in admitted {
                self.push_running(s);
            }
            return Ok(plan);
        }
        plan.preempted = self.make_decode_room(watermark);
        plan.decodes = self.decode_entries(u64::MAX)?;
        Ok(plan)
    }

    fn schedule_orca(&mut self) -> Result<BatchPlan, SchedulerError> {
        let mut plan = BatchPlan {
            preempted: self.make_decode_room(0),
            ..BatchPlan::default()
        };
        let limit = self.cfg.token_limit();
        let watermark = self.mem.plan().watermark_blocks;
        let reserved = self.decode_growth();
        let mut tokens = 0;
        let mut admitted = Vec::new();
        let mut lone = false;
        while let Some(s) = self.waiting.front() {
            if (self.running.len() + admitted.len()) as u64 >= self.cfg.max_batch_size {
                break;
            }
            let t = s.prefill_target;
            if tokens + t > limit {
                // an oversized prompt runs alone
                if !(admitted.is_empty() && t > limit) {
                    break;
                }
                lone = true;
            }
            let need = self.mem.plan().blocks_for(t);
            if self.mem.free_blocks() < need + reserved + watermark {
                break;
            }
            let s = self.admit_front();
            tokens += t;
            plan.prefills.push(PrefillEntry {
                id: s.id,
                tokens: t,
                prior_context: 0,
            });
            admitted.push(s);
            if lone {
                break;
            }
        }
        if !lone {
            plan.decodes = self.decode_entries(limit - tokens)?;
        }
        for s in admitted {
            self.push_running(s);
        }
        Ok(plan)
    }

    fn schedule_sarathi(&mut self) -> Result<BatchPlan, SchedulerError> {
        let mut plan = BatchPlan {
            preempted: self.make_decode_room(0),
            ..BatchPlan::default()
        };
        let mut budget = self.cfg.token_limit();
        plan.decodes = self.decode_entries(budget)?;
        budget -= plan.decodes.len() as u64;
        for s in &self.running {
            if budget == 0 {
                break;
            }
            if s.in_prefill() {
                let c = (s.prefill_target - s.prefilled).min(budget);
                budget -= c;
                plan.prefills.push(PrefillEntry {
                    id: s.id,
                    tokens: c,
                    prior_context: s.kv_len,
                });
            }
        }
        let watermark = self.mem.plan().watermark_blocks;
        while budget > 0 && (self.running.len() as u64) < self.cfg.max_batch_size {
            let Some(s) = self.waiting.front() else {
                break;
            };
            let need = self.mem.plan().blocks_for(s.prefill_target);
            if self.mem.free_blocks() < need + watermark {
                break;
            }
            let s = self.admit_front();
            let c = s.prefill_target.min(budget);
            budget -= c;
            plan.prefills.push(PrefillEntry {
                id: s.id,
                tokens: c,
                prior_context: 0,
            });
            self.push_running(s);
        }
        Ok(plan)
    }


    /// Applies a finished batch: advances prefills, appends decode tokens,
    /// and retires requests that emitted their last token.
    pub fn complete(&mut self, plan: &BatchPlan) -> Result<Completion, SchedulerError> {
        let mut done = Completion::default();
        let pos: std::collections::HashMap<u64, usize> =
            self.running.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        let index_of = |id: u64| {
            pos.get(&id)
                .copied()
                .ok_or_else(|| SchedulerError::Internal(format!("request {id} in plan is not running")))
        };
        for p in &plan.prefills {
            let i = index_of(p.id)?;
            let s = &mut self.running[i];
            s.prefilled += p.tokens;
            s.kv_len = s.prefilled;
            if !s.in_prefill() && s.emitted == 0 {
                s.emitted = 1;
                done.emitted.push(s.id);
            }
        }
        for d in &plan.decodes {
            let i = index_of(d.id)?;
            let s = &mut self.running[i];
            s.kv_len += 1;
            s.emitted += 1;
            done.emitted.push(s.id);
        }
        if self.cfg.policy == PolicyKind::FasterTransformer {
            if self.running.iter().all(Seq::finished) {
                for s in std::mem::take(&mut self.running) {
                    self.mem.release(s.id);
                    done.finished.push(s);
                }
                self.group.clear();
            }
        } else {
            let (finished, running): (Vec<Seq>, Vec<Seq>) =
                std::mem::take(&mut self.running).into_iter().partition(Seq::finished);
            self.running = running;
            for s in finished {
                self.mem.release(s.id);
                done.finished.push(s);
            }
        }
        // FT keeps finished members until the group ends; report each once
        done.finished.sort_by_key(|s| s.id);
        self.check()?;
        Ok(done)
    }

    /// FasterTransformer: ids of the batch in flight, fixed from formation
    /// until every member finishes.
    pub fn group(&self) -> &[u64] {
        &self.group
    }

    /// Structural invariants of the replica state.
    pub fn check(&self) -> Result<(), SchedulerError> {
        let plan = self.mem.plan();
        if self.mem.used_blocks() > plan.num_blocks {
            return Err(SchedulerError::Internal(format!(
                "{} blocks allocated of {}",
                self.mem.used_blocks(),
                plan.num_blocks
            )));
        }
        for s in &self.running {
            if self.mem.owned(s.id) < plan.blocks_for(s.kv_len) {
                return Err(SchedulerError::Internal(format!(
                    "request {} holds {} tokens in {} blocks",
                    s.id,
                    s.kv_len,
                    self.mem.owned(s.id)
                )));
            }
        }
        // linear in the queue length, so only in debug builds
        if cfg!(debug_assertions) {
            let running: std::collections::HashSet<u64> = self.running.iter().map(|s| s.id).collect();
            if let Some(w) = self.waiting.iter().find(|w| running.contains(&w.id)) {
                return Err(SchedulerError::Internal(format!("request {} both waiting and running", w.id)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(blocks: u64, block_size: u64, watermark: f64) -> MemoryPlan {
        MemoryPlan::from_free_bytes(blocks * block_size, 1, block_size, watermark).unwrap()
    }

    fn req(id: u64, t: f64, p: u64, d: u64) -> Request {
        Request::new(id, Some(t), p, d)
    }

    fn run_to_completion(s: &mut ReplicaScheduler) -> usize {
        let mut iters = 0;
        while !s.is_idle() {
            let p = s.schedule().unwrap();
            assert!(!p.is_empty());
            assert!(p.within_limits(s.config()));
            s.complete(&p).unwrap();
            iters += 1;
        }
        iters
    }

    #[test]
    fn sarathi_fills_chunk_after_decodes() {
        let cfg = PolicyConfig::new(PolicyKind::SarathiServe, 64).with_chunk(512);
        let mut s = ReplicaScheduler::new(cfg, plan(10_000, 16, 0.0)).unwrap();
        for i in 0..10 {
            s.enqueue(&req(i, 0.0, 8, 100)).unwrap();
        }
        let p = s.schedule().unwrap();
        s.complete(&p).unwrap();
        s.enqueue(&req(10, 1.0, 2000, 10)).unwrap();
        let p = s.schedule().unwrap();
        assert_eq!(p.decodes.len(), 10);
        assert_eq!(p.prefills, vec![PrefillEntry { id: 10, tokens: 502, prior_context: 0 }]);
        assert_eq!(p.total_current_tokens(), 512);
    }

    #[test]
    fn vllm_preempts_latest_arrival_under_watermark() {
        // 20 blocks of 4 tokens, 2 watermark blocks
        let cfg = PolicyConfig::new(PolicyKind::Vllm, 8);
        let mut s = ReplicaScheduler::new(cfg, plan(20, 4, 0.1)).unwrap();
        s.enqueue(&req(0, 0.0, 16, 40)).unwrap();
        s.enqueue(&req(1, 1.0, 16, 40)).unwrap();
        s.enqueue(&req(2, 2.0, 16, 40)).unwrap();
        let p = s.schedule().unwrap();
        assert_eq!(p.prefills.len(), 3);
        s.complete(&p).unwrap();
        s.enqueue(&req(3, 3.0, 8, 4)).unwrap();
        let mut preempted = Vec::new();
        for _ in 0..40 {
            let p = s.schedule().unwrap();
            preempted.extend(p.preempted.iter().copied());
            s.complete(&p).unwrap();
            if !preempted.is_empty() {
                break;
            }
        }
        assert_eq!(preempted, vec![2]);
        assert!(s.waiting().any(|w| w.id == 2 && w.restarts == 1));
        run_to_completion(&mut s);
    }

    #[test]
    fn faster_transformer_keeps_batch_until_all_finish() {
        let cfg = PolicyConfig::new(PolicyKind::FasterTransformer, 4);
        let mut s = ReplicaScheduler::new(cfg, plan(1000, 16, 0.0)).unwrap();
        s.enqueue(&req(0, 0.0, 10, 2)).unwrap();
        s.enqueue(&req(1, 0.0, 10, 5)).unwrap();
        let p = s.schedule().unwrap();
        assert_eq!(p.prefills.len(), 2);
        s.complete(&p).unwrap();
        s.enqueue(&req(2, 0.5, 10, 1)).unwrap();
        let group = s.group().to_vec();
        for _ in 0..4 {
            let p = s.schedule().unwrap();
            assert!(p.prefills.is_empty());
            assert_eq!(s.group(), group.as_slice());
            s.complete(&p).unwrap();
        }
        assert!(s.group().is_empty());
        let p = s.schedule().unwrap();
        assert_eq!(p.prefills[0].id, 2);
    }

    #[test]
    fn single_request_iteration_counts() {
        for policy in PolicyKind::ALL {
            let cfg = PolicyConfig::new(policy, 8).with_chunk(4);
            let bs = if policy == PolicyKind::LightLlm { 1 } else { 16 };
            let mut s = ReplicaScheduler::new(cfg, plan(100, bs, 0.0)).unwrap();
            s.enqueue(&req(0, 0.0, 8, 3)).unwrap();
            let want = if policy == PolicyKind::SarathiServe { 2 + 2 } else { 1 + 2 };
            assert_eq!(run_to_completion(&mut s), want, "{policy}");
        }
    }

    #[test]
    fn oversized_prompt_runs_alone() {
        let mut cfg = PolicyConfig::new(PolicyKind::OrcaPlus, 8);
        cfg.max_tokens_per_iter = 100;
        let mut s = ReplicaScheduler::new(cfg, plan(1000, 16, 0.0)).unwrap();
        s.enqueue(&req(0, 0.0, 300, 2)).unwrap();
        s.enqueue(&req(1, 0.0, 10, 2)).unwrap();
        let p = s.schedule().unwrap();
        assert_eq!(p.prefills.len(), 1);
        assert!(p.within_limits(&cfg));
        s.complete(&p).unwrap();
        run_to_completion(&mut s);
    }

    #[test]
    fn request_that_never_fits_is_rejected() {
        let cfg = PolicyConfig::new(PolicyKind::Vllm, 8);
        let mut s = ReplicaScheduler::new(cfg, plan(4, 16, 0.0)).unwrap();
        assert!(matches!(
            s.enqueue(&req(0, 0.0, 60, 10)),
            Err(SchedulerError::RequestTooLarge { .. })
        ));
    }
}
