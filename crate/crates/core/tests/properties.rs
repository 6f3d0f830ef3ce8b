use proptest::prelude::*;

use servesim::estimator::equivalent_prefill_length;
use servesim::metrics::percentile;
use servesim::model_spec::{derive_operators, AttentionVariant};
use servesim::profiler::{synthetic_oracle, triage, OpFeatures};
use servesim::search::{find_capacity, pareto_frontier, CapacityParams};
use servesim::workload::{cap_total_length, compute_stats, read_trace, write_trace, Request};
use servesim::{DeviceProfile, ModelSpec, ParallelismConfig};

fn spec(layers: u64, heads: u64, kv_heads: u64) -> ModelSpec {
    ModelSpec {
        name: "prop".into(),
        num_layers: layers,
        hidden_dim: heads * 64,
        num_q_heads: heads,
        num_kv_heads: kv_heads,
        head_dim: 64,
        mlp_dim: heads * 64 * 4,
        vocab_size: 32000,
        max_context: 4096,
        param_bytes_per_element: 2,
        attention_variant: if kv_heads == heads { AttentionVariant::Mha } else { AttentionVariant::Gqa },
    }
}

fn arb_spec() -> impl Strategy<Value = ModelSpec> {
    (1u64..=6, 0u32..=3, 0u32..=3).prop_map(|(l, h, g)| {
        let heads = 8 << h;
        let kv = (heads >> g).max(8);
        spec(8 * l, heads, kv)
    })
}

fn arb_requests(max: usize) -> impl Strategy<Value = Vec<Request>> {
    // a valid trace has arrivals on every row or on none
    let rows = prop::collection::vec((1u64..5000, 1u64..3000, 0.0f64..1e4), 1..max);
    (rows, any::<bool>()).prop_map(|(v, timed)| {
        v.into_iter()
            .enumerate()
            .map(|(i, (p, d, a))| Request::new(i as u64, timed.then_some(a), p, d))
            .collect()
    })
}

proptest! {
    #[test]
    fn stage_layers_sum_to_model_layers(s in arb_spec(), pp in prop::sample::select(vec![1u64, 2, 4, 8])) {
        let par = ParallelismConfig::new(1, pp, 1);
        let per = s.layers_per_stage(&par).unwrap();
        prop_assert_eq!(per * pp, s.num_layers);
    }

    #[test]
    fn kv_bytes_scale_inversely_with_tp(s in arb_spec(), k in prop::sample::select(vec![1u64, 2, 4, 8])) {
        let one = s.kv_bytes_per_token_per_layer(1).unwrap();
        prop_assert_eq!(s.kv_bytes_per_token_per_layer(k).unwrap() * k, one);
    }

    #[test]
    fn operators_are_deterministic_and_triaged(s in arb_spec(), tp in prop::sample::select(vec![1u64, 2, 4, 8]), pp in prop::sample::select(vec![1u64, 2])) {
        let par = ParallelismConfig::new(tp, pp, 1);
        let a = derive_operators(&s, &par).unwrap();
        prop_assert_eq!(&a, &derive_operators(&s, &par).unwrap());
        for op in &a {
            prop_assert!(triage(op).is_ok(), "{} not triaged", op.op_name);
        }
    }

    #[test]
    fn oracle_is_monotone_and_above_overhead(
        s in arb_spec(),
        n in 0.0f64..8192.0, dn in 0.0f64..4096.0,
        kv in 0.0f64..1e9, dkv in 0.0f64..1e9,
        pl in 0.0f64..1e9, dpl in 0.0f64..1e9,
    ) {
        let dev = DeviceProfile::a100_80g();
        for op in derive_operators(&s, &ParallelismConfig::new(2, 2, 1)).unwrap() {
            let f = OpFeatures { num_tokens: n, kv_read_bytes: kv, payload_bytes: pl };
            let base = synthetic_oracle(&op, &f, &dev);
            prop_assert!(base >= dev.kernel_overhead);
            for g in [
                OpFeatures { num_tokens: n + dn, ..f },
                OpFeatures { kv_read_bytes: kv + dkv, ..f },
                OpFeatures { payload_bytes: pl + dpl, ..f },
            ] {
                prop_assert!(synthetic_oracle(&op, &g, &dev) >= base, "{} decreased", op.op_name);
            }
        }
    }

    #[test]
    fn equivalent_prefill_is_permutation_invariant_and_subadditive(
        a in prop::collection::vec(1u64..100_000, 1..40),
        b in prop::collection::vec(1u64..100_000, 1..40),
        seed in any::<u64>(),
    ) {
        let mut shuffled = a.clone();
        let k = (seed as usize) % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(equivalent_prefill_length(&a).unwrap(), equivalent_prefill_length(&shuffled).unwrap());
        let joined: Vec<u64> = a.iter().chain(&b).copied().collect();
        let (ea, eb, ej) = (
            equivalent_prefill_length(&a).unwrap(),
            equivalent_prefill_length(&b).unwrap(),
            equivalent_prefill_length(&joined).unwrap(),
        );
        // rounding to the nearest token can cost one on each side
        prop_assert!(ej <= ea + eb + 1);
        prop_assert!(ej >= ea.max(eb));
    }

    #[test]
    fn trace_round_trip(reqs in arb_requests(60)) {
        let mut buf = Vec::new();
        write_trace(&mut buf, &reqs).unwrap();
        let back = read_trace(buf.as_slice()).unwrap();
        let mut sorted = reqs.clone();
        servesim::workload::sort_by_arrival(&mut sorted);
        prop_assert_eq!(back, sorted);
    }

    #[test]
    fn capping_is_idempotent(reqs in arb_requests(60), cap in 2u64..6000) {
        let once = cap_total_length(&reqs, cap);
        prop_assert_eq!(cap_total_length(&once, cap), once);
    }

    #[test]
    fn stats_ignore_order(mut reqs in arb_requests(60)) {
        let a = compute_stats(&reqs).unwrap();
        reqs.reverse();
        let b = compute_stats(&reqs).unwrap();
        prop_assert_eq!(a.prefill, b.prefill);
        prop_assert_eq!(a.decode, b.decode);
        prop_assert_eq!(a.pd_ratio_median, b.pd_ratio_median);
        prop_assert!((a.pd_ratio_std - b.pd_ratio_std).abs() <= 1e-9 * a.pd_ratio_std.max(1.0));
    }

    #[test]
    fn percentile_monotone_and_order_free(mut v in prop::collection::vec(-1e6f64..1e6, 1..200), q1 in 0.0f64..=1.0, q2 in 0.0f64..=1.0) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(percentile(&v, lo).unwrap() <= percentile(&v, hi).unwrap());
        let p = percentile(&v, hi).unwrap();
        v.reverse();
        prop_assert_eq!(percentile(&v, hi).unwrap(), p);
    }

    #[test]
    fn frontier_is_non_dominated_and_covers(pts in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..80)) {
        let front = pareto_frontier(&pts);
        let dominates = |a: (f64, f64), b: (f64, f64)| a.0 <= b.0 && a.1 >= b.1 && (a.0 < b.0 || a.1 > b.1);
        for &i in &front {
            for &j in &front {
                prop_assert!(!dominates(pts[j], pts[i]));
            }
        }
        for (k, &p) in pts.iter().enumerate() {
            if !front.contains(&k) {
                prop_assert!(front.iter().any(|&i| dominates(pts[i], p) || pts[i] == p));
            }
        }
    }

    #[test]
    fn capacity_brackets_a_monotone_threshold(t in 0.01f64..1e5) {
        let c = find_capacity(|q| q <= t, &CapacityParams::default());
        prop_assert!(0.99 * c.qps <= t);
        prop_assert!(1.05 * c.qps > t);
    }
}
