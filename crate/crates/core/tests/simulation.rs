use proptest::prelude::*;

use servesim::metrics;
use servesim::model_spec::AttentionVariant;
use servesim::profiler::OraclePredictor;
use servesim::scheduler::{PolicyConfig, PolicyKind, RoutingPolicy};
use servesim::sim::{self, ClusterConfig, SimulationResult};
use servesim::workload::{poisson_arrivals, Request};
use servesim::{DeviceProfile, ModelSpec, ParallelismConfig};

const POLICIES: [PolicyKind; 5] = [
    PolicyKind::FasterTransformer,
    PolicyKind::OrcaPlus,
    PolicyKind::Vllm,
    PolicyKind::SarathiServe,
    PolicyKind::LightLlm,
];

fn small_model() -> ModelSpec {
    ModelSpec {
        name: "tiny".into(),
        num_layers: 8,
        hidden_dim: 1024,
        num_q_heads: 8,
        num_kv_heads: 8,
        head_dim: 128,
        mlp_dim: 2816,
        vocab_size: 32000,
        max_context: 2048,
        param_bytes_per_element: 2,
        attention_variant: AttentionVariant::Mha,
    }
}

fn cluster(policy: PolicyKind, bs: u64, mem_gib: u64, replicas: u64) -> (ClusterConfig, OraclePredictor) {
    let spec = small_model();
    let dev = DeviceProfile {
        device_mem: mem_gib << 30,
        ..DeviceProfile::a100_80g()
    };
    let mut cfg = PolicyConfig::new(policy, bs);
    cfg.chunk_size = 256;
    let c = ClusterConfig {
        router: RoutingPolicy::RoundRobin,
        ..ClusterConfig::new(spec.clone(), dev.clone(), ParallelismConfig::new(1, 1, replicas), cfg)
    };
    let p = OraclePredictor::new(&spec, &[1], &dev).unwrap();
    (c, p)
}

fn arb_lengths() -> impl Strategy<Value = Vec<Request>> {
    prop::collection::vec((1u64..1500, 1u64..500), 1..120).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (p, d))| Request::new(i as u64, None, p, d))
            .collect()
    })
}

fn check(res: &SimulationResult, trace: &[Request], cfg: &PolicyConfig) -> Result<(), TestCaseError> {
    prop_assert!(res.violations.is_empty(), "{:?}", res.violations.first());
    for it in &res.iterations {
        prop_assert!(it.used_blocks <= it.total_blocks);
        prop_assert!(it.batch_size as u64 <= cfg.max_batch_size);
        let tokens = it.prefill_tokens + it.decode_tokens;
        if cfg.policy == PolicyKind::SarathiServe {
            prop_assert!(tokens <= cfg.chunk_size);
        } else if !(it.num_prefills == 1 && it.decode_tokens == 0) {
            prop_assert!(tokens <= cfg.max_tokens_per_iter);
        }
    }
    prop_assert_eq!(res.requests.len(), trace.len());
    for (r, q) in res.requests.iter().zip(trace) {
        // every request finishes, preempted or not
        prop_assert!(r.completion.is_finite());
        prop_assert_eq!(r.token_times.len() as u64, q.decode_tokens);
        prop_assert!(r.prefill_tokens_processed >= q.prefill_tokens);
        if r.restarts == 0 {
            prop_assert_eq!(r.prefill_tokens_processed, q.prefill_tokens);
        }
        prop_assert!(r.first_scheduled >= r.arrival);
        prop_assert!(r.first_token > r.first_scheduled);
        prop_assert!(r.token_times.windows(2).all(|w| w[0] <= w[1]));
    }
    for s in &res.replicas {
        prop_assert!((s.busy + s.idle - res.makespan).abs() <= 1e-9 * res.makespan.max(1.0));
    }
    let report = metrics::compute(res, false).unwrap();
    let want: u64 = trace.iter().map(|q| q.decode_tokens - 1).sum();
    let got: usize = report.requests.iter().map(|m| m.tbt_samples.len()).sum();
    prop_assert_eq!(got as u64, want);
    for m in &report.requests {
        let q = &trace[m.id as usize];
        prop_assert_eq!(m.tbt_samples.len() as u64, q.decode_tokens - 1);
    }
    let peak = res
        .iterations
        .iter()
        .map(|i| i.used_blocks as f64 / i.total_blocks as f64)
        .fold(0.0, f64::max);
    prop_assert_eq!(report.cluster.kv_utilization_peak, peak);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scheduler_and_timeline_invariants(
        lengths in arb_lengths(),
        policy in prop::sample::select(POLICIES.to_vec()),
        qps in 0.5f64..40.0,
        mem in prop::sample::select(vec![4u64, 6, 24]),
        seed in any::<u64>(),
    ) {
        let (c, p) = cluster(policy, 32, mem, 2);
        let trace = poisson_arrivals(&lengths, qps, seed).unwrap();
        let res = sim::run(&c, &trace, &p).unwrap();
        check(&res, &trace, &c.scheduler)?;
    }

    #[test]
    fn no_idle_gap_while_requests_wait(
        lengths in arb_lengths(),
        policy in prop::sample::select(vec![PolicyKind::OrcaPlus, PolicyKind::Vllm, PolicyKind::SarathiServe]),
        qps in 0.5f64..40.0,
        seed in any::<u64>(),
    ) {
        // ample memory, so only the batch size can hold a request back
        let (c, p) = cluster(policy, 32, 40, 1);
        let trace = poisson_arrivals(&lengths, qps, seed).unwrap();
        let res = sim::run(&c, &trace, &p).unwrap();
        let mut its = res.iterations.clone();
        its.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in its.windows(2) {
            let (end, next) = (w[0].end, w[1].start);
            if next - end <= 1e-9 {
                continue;
            }
            for r in &res.requests {
                prop_assert!(
                    !(r.arrival < end - 1e-9 && r.first_scheduled >= next - 1e-9),
                    "request {} waited through idle gap [{end}, {next}]", r.id
                );
            }
        }
    }
}

#[test]
fn faster_transformer_groups_are_fixed() {
    let (c, p) = cluster(PolicyKind::FasterTransformer, 8, 24, 1);
    let lengths: Vec<Request> = (0..200).map(|i| Request::new(i, None, 50 + 37 * (i % 13), 5 + 11 * (i % 7))).collect();
    let trace = poisson_arrivals(&lengths, 5.0, 3).unwrap();
    let res = sim::run(&c, &trace, &p).unwrap();
    // members of a group start together and leave together
    let mut groups: std::collections::BTreeMap<u64, Vec<f64>> = Default::default();
    for r in &res.requests {
        groups.entry(r.first_scheduled.to_bits()).or_default().push(r.completion);
    }
    for done in groups.values() {
        assert!(done.iter().all(|&t| t == done[0]));
        assert!(done.len() <= 8);
    }
    for it in &res.iterations {
        assert!(it.num_prefills == 0 || it.decode_tokens == 0);
    }
}

#[test]
fn mean_delay_grows_with_load() {
    let lengths: Vec<Request> = (0..600).map(|i| Request::new(i, None, 200 + 97 * (i % 17), 20 + 13 * (i % 11))).collect();
    for policy in [PolicyKind::Vllm, PolicyKind::SarathiServe] {
        let (c, p) = cluster(policy, 32, 8, 1);
        let mean_delay = |qps: f64| -> f64 {
            (0..4)
                .map(|seed| {
                    let trace = poisson_arrivals(&lengths, qps, seed).unwrap();
                    let res = sim::run(&c, &trace, &p).unwrap();
                    res.requests.iter().map(|r| r.first_scheduled - r.arrival).sum::<f64>() / res.requests.len() as f64
                })
                .sum::<f64>()
                / 4.0
        };
        let delays: Vec<f64> = [2.0, 8.0, 32.0, 128.0].into_iter().map(mean_delay).collect();
        assert!(delays.windows(2).all(|w| w[0] <= w[1]), "{policy:?}: {delays:?}");
    }
}

#[test]
fn ttft_covers_first_iteration() {
    let (c, p) = cluster(PolicyKind::Vllm, 16, 24, 1);
    let lengths: Vec<Request> = (0..50).map(|i| Request::new(i, None, 100 + i * 20, 10)).collect();
    let trace = poisson_arrivals(&lengths, 3.0, 1).unwrap();
    let res = sim::run(&c, &trace, &p).unwrap();
    for r in &res.requests {
        let first = res.iterations.iter().find(|i| i.start == r.first_scheduled).unwrap();
        assert!(r.first_token - r.arrival >= first.end - first.start);
    }
}
