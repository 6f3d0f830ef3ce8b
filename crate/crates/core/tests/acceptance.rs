//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 4 8`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use servesim::estimator::{
    build_lookup_table, equivalent_prefill_length, predict_batch, train, BatchComposition, PrefillChunk, RuntimePredictor, TableConfig, TrainConfig,
};
use servesim::model_spec::{derive_operators, profiled_kernels, AttentionVariant, OpScope, OpShape};
use servesim::profiler::{
    generate_profile, profile_grid, synthetic_oracle, GridConfig, GridKind, OpFeatures, OraclePredictor,
};
use servesim::scheduler::{PolicyConfig, PolicyKind, RoutingPolicy};
use servesim::search::{
    find_capacity, pareto_frontier, run_search, CapacityParams, CostTable, EstimatorSource, SearchInputs,
    SearchOptions, SearchSpace, Slos,
};
use servesim::sim::{self, ClusterConfig};
use servesim::workload::{compute_stats, load_trace, poisson_arrivals, synth_trace, LengthDist, TraceDistribution};
use servesim::{DeviceProfile, ModelSpec, ParallelismConfig};

type Outcome = Result<String, String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn llama7b() -> ModelSpec {
    ModelSpec::from_path(configs_dir().join("models/llama2-7b.toml")).unwrap()
}

fn llama70b() -> ModelSpec {
    ModelSpec::from_path(configs_dir().join("models/llama2-70b.toml")).unwrap()
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

// 1 --------------------------------------------------------------------------

fn prefill_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let k = rng.random_range(1..=64);
        let lens: Vec<u64> = (0..k).map(|_| rng.random_range(1..=32_768)).collect();
        let got = equivalent_prefill_length(&lens).map_err(|e| e.to_string())?;
        let exact = (lens.iter().map(|&p| (p as f64).powi(2)).sum::<f64>()).sqrt();
        let err = (got as f64 - exact).abs();
        worst = worst.max(err);
        if err > 0.5 + 1e-9 {
            return Err(format!("{lens:?}: got {got}, sqrt of sum of squares is {exact}"));
        }
    }
    Ok(format!("10000 batches, max |result - sqrt(sum p^2)| = {worst:.3}"))
}

// 2 --------------------------------------------------------------------------

fn off_grid_point(kind: GridKind, cfg: &GridConfig, rng: &mut ChaCha8Rng) -> OpFeatures {
    let kvb = cfg.kv_bytes_per_token as f64;
    let max_t = cfg.max_tokens;
    match kind {
        GridKind::Tokens => OpFeatures::tokens(rng.random_range(1..=max_t) as f64),
        GridKind::PrefillAttention => {
            let n = log_uniform(rng, 1.0, max_t as f64).round();
            let prior = if rng.random_bool(0.2) {
                0.0
            } else {
                log_uniform(rng, 1.0, 2.0 * max_t as f64).round()
            };
            OpFeatures::attention(n, prior * kvb)
        }
        GridKind::DecodeAttention => {
            let b = log_uniform(rng, 1.0, cfg.max_batch_size as f64).round() as u64;
            let ctx: u64 = (0..b).map(|_| rng.random_range(1..=max_t)).sum();
            OpFeatures::attention(b as f64, ctx as f64 * kvb)
        }
        GridKind::Payload => OpFeatures::payload(log_uniform(rng, 1.0, (1u64 << cfg.max_payload_log2) as f64).round()),
    }
}

fn estimator_fidelity() -> Outcome {
    let start = Instant::now();
    let dev = DeviceProfile::a100_80g();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_model = (0.0, String::new());
    let mut worst_table = (0.0, String::new());
    let mut checked = 0;
    for (spec, tps) in [(llama7b(), vec![1, 2, 4]), (llama70b(), vec![8])] {
        let recs = generate_profile(&spec, &tps, &dev, 512).map_err(|e| e.to_string())?;
        let model = train(&recs, &TrainConfig::default()).map_err(|e| e.to_string())?;
        let table = build_lookup_table(&model, TableConfig::default());
        for &tp in &tps {
            let mut cfg = GridConfig::for_model(&spec, tp).map_err(|e| e.to_string())?;
            cfg.max_batch_size = 512;
            for op in profiled_kernels(&spec, tp).map_err(|e| e.to_string())? {
                let kind = GridKind::for_op(&op.op_name).map_err(|e| e.to_string())?;
                let grid = profile_grid(kind, &cfg);
                let (mut model_err, mut table_err) = (0.0, 0.0_f64);
                let mut n = 0;
                while n < 200 {
                    let f = off_grid_point(kind, &cfg, &mut rng);
                    if grid.contains(&f) {
                        continue;
                    }
                    let truth = synthetic_oracle(&op, &f, &dev);
                    let m = model.predict_op(&op.op_name, tp, &f).map_err(|e| e.to_string())?;
                    let t = table.predict_op(&op.op_name, tp, &f).map_err(|e| e.to_string())?;
                    model_err += rel(m, truth);
                    table_err = table_err.max(rel(t, m));
                    n += 1;
                }
                let mape = model_err / n as f64;
                let key = format!("{}/{}@tp{tp}", spec.name, op.op_name);
                if mape > worst_model.0 {
                    worst_model = (mape, key.clone());
                }
                if table_err > worst_table.0 {
                    worst_table = (table_err, key.clone());
                }
                if mape > 0.05 {
                    return Err(format!("{key}: held-out MAPE {:.2}% > 5%", 100.0 * mape));
                }
                if table_err > 0.02 {
                    return Err(format!("{key}: table differs from model by {:.2}% > 2%", 100.0 * table_err));
                }
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > 60.0 {
        return Err(format!("took {secs:.1}s > 60s"));
    }
    Ok(format!(
        "{checked} kernels x 200 off-grid points, worst MAPE {:.2}% ({}), worst table gap {:.2}% ({}), {secs:.1}s",
        100.0 * worst_model.0,
        worst_model.1,
        100.0 * worst_table.0,
        worst_table.1
    ))
}

// 3 --------------------------------------------------------------------------

/// Batch time composed directly from the oracle, kernel by kernel.
fn oracle_batch_time(spec: &ModelSpec, par: &ParallelismConfig, dev: &DeviceProfile, b: &BatchComposition) -> f64 {
    let ops = derive_operators(spec, par).unwrap();
    let layers = spec.num_layers / par.pp_degree;
    let kvb = spec.kv_bytes_per_token_per_layer(par.tp_degree).unwrap() as f64;
    let n = (b.prefills.iter().map(|p| p.tokens).sum::<u64>() + b.decode_context_lengths.len() as u64) as f64;
    let mut total = 0.0;
    for op in &ops {
        let f = match op.op_name.as_str() {
            "attn_prefill" if b.prefills.is_empty() => continue,
            "attn_prefill" => {
                let sq: f64 = b.prefills.iter().map(|p| (p.tokens as f64).powi(2)).sum();
                let prior: u64 = b.prefills.iter().map(|p| p.prior_context).sum();
                OpFeatures::attention(sq.sqrt().round(), prior as f64 * kvb)
            }
            "attn_decode" if b.decode_context_lengths.is_empty() => continue,
            "attn_decode" => OpFeatures::attention(
                b.decode_context_lengths.len() as f64,
                b.decode_context_lengths.iter().sum::<u64>() as f64 * kvb,
            ),
            _ => match op.shape {
                OpShape::Collective { bytes_per_token, .. } => OpFeatures::payload(n * bytes_per_token as f64),
                _ => OpFeatures::tokens(n),
            },
        };
        let t = synthetic_oracle(op, &f, dev);
        total += match op.scope {
            OpScope::PerLayer => layers as f64 * t,
            OpScope::PerStage => t,
        };
    }
    total
}

fn random_batch(rng: &mut ChaCha8Rng) -> BatchComposition {
    loop {
        let np = rng.random_range(0..=4);
        let mut budget = 3000;
        let mut prefills = Vec::new();
        for _ in 0..np {
            if budget == 0 {
                break;
            }
            let tokens = rng.random_range(1..=budget.min(2048));
            budget -= tokens;
            let prior_context = if rng.random_bool(0.5) { 0 } else { rng.random_range(1..=4096 - tokens) };
            prefills.push(PrefillChunk { tokens, prior_context });
        }
        let nd = if rng.random_bool(0.2) { 0 } else { rng.random_range(1..=256) };
        let decode_context_lengths = (0..nd).map(|_| rng.random_range(1..=4096)).collect();
        let b = BatchComposition {
            prefills,
            decode_context_lengths,
        };
        if !b.is_empty() {
            return b;
        }
    }
}

fn batch_composition() -> Outcome {
    let spec = llama7b();
    let dev = DeviceProfile::a100_80g();
    let recs = generate_profile(&spec, &[1, 2], &dev, 512).map_err(|e| e.to_string())?;
    let model = train(&recs, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let table = build_lookup_table(&model, TableConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pars = [(1, 1), (2, 1), (1, 2), (2, 2)].map(|(tp, pp)| ParallelismConfig::new(tp, pp, 1));
    let mut worst: f64 = 0.0;
    let mut sum = 0.0;
    for i in 0..1000 {
        let par = &pars[i % pars.len()];
        let b = random_batch(&mut rng);
        let ops = derive_operators(&spec, par).map_err(|e| e.to_string())?;
        let got = predict_batch(&table, &ops, spec.num_layers / par.pp_degree, &b)
            .map_err(|e| e.to_string())?
            .total();
        let want = oracle_batch_time(&spec, par, &dev, &b);
        let err = rel(got, want);
        worst = worst.max(err);
        sum += err;
        if err > 0.05 {
            return Err(format!("tp{} pp{} batch {b:?}: {got} vs oracle {want}", par.tp_degree, par.pp_degree));
        }
    }
    Ok(format!("1000 mixed batches, mean error {:.2}%, max {:.2}%", sum / 10.0, 100.0 * worst))
}

// 4 --------------------------------------------------------------------------

fn chat_like() -> TraceDistribution {
    TraceDistribution {
        prefill: LengthDist::lognormal_from_quantiles(417.0, 1678.0),
        decode: LengthDist::lognormal_from_quantiles(139.0, 484.0),
        max_total_tokens: Some(4096),
    }
}

fn check_run(policy: PolicyKind, seed: u64) -> Result<String, String> {
    let spec = llama7b();
    // tight KV so that preemption and queueing happen
    let dev = DeviceProfile {
        sku_name: "A100-20G".into(),
        device_mem: 20 << 30,
        ..DeviceProfile::a100_80g()
    };
    let bs = if policy == PolicyKind::FasterTransformer { 16 } else { 64 };
    let cfg = PolicyConfig::new(policy, bs);
    let cluster = ClusterConfig {
        router: RoutingPolicy::LeastOutstanding,
        cpu_overhead_per_iter: 2e-4,
        ..ClusterConfig::new(spec.clone(), dev.clone(), ParallelismConfig::new(1, 1, 2), cfg)
    };
    let predictor = OraclePredictor::new(&spec, &[1], &dev).map_err(|e| e.to_string())?;
    let lengths = synth_trace(&chat_like(), 10_000, seed).map_err(|e| e.to_string())?;
    let qps = if policy == PolicyKind::FasterTransformer { 3.0 } else { 12.0 };
    let trace = poisson_arrivals(&lengths, qps, seed).map_err(|e| e.to_string())?;
    let res = sim::run(&cluster, &trace, &predictor).map_err(|e| e.to_string())?;
    if let Some(v) = res.violations.first() {
        return Err(format!("{} violations, first: {v}", res.violations.len()));
    }
    let limit = cfg.max_tokens_per_iter;
    for it in &res.iterations {
        let tokens = it.prefill_tokens + it.decode_tokens;
        if it.used_blocks > it.total_blocks {
            return Err(format!("{} of {} KV blocks in use at t={}", it.used_blocks, it.total_blocks, it.start));
        }
        if it.batch_size as u64 > bs {
            return Err(format!("batch of {} > {bs} at t={}", it.batch_size, it.start));
        }
        let lone_prompt = it.num_prefills == 1 && it.decode_tokens == 0;
        let over = match policy {
            PolicyKind::SarathiServe => tokens > cfg.chunk_size,
            _ => tokens > limit && !lone_prompt,
        };
        if over {
            return Err(format!("{tokens} tokens in one iteration at t={}", it.start));
        }
        if it.end < it.start {
            return Err(format!("iteration ends before it starts at t={}", it.start));
        }
    }
    let mut decode_steps = 0;
    let mut prefill_work = 0;
    for r in &res.requests {
        if r.token_times.len() as u64 != r.decode_tokens {
            return Err(format!("request {} emitted {} of {} tokens", r.id, r.token_times.len(), r.decode_tokens));
        }
        if r.prefill_tokens_processed != r.prefill_tokens + r.recomputed_tokens {
            return Err(format!("request {}: prefill work does not balance", r.id));
        }
        let ordered = r.arrival <= r.first_scheduled
            && r.first_scheduled < r.first_token
            && r.token_times.windows(2).all(|w| w[0] <= w[1])
            && r.token_times.first() == Some(&r.first_token)
            && r.completion >= *r.token_times.last().unwrap();
        if !ordered {
            return Err(format!("request {} timeline out of order", r.id));
        }
        decode_steps += r.decode_tokens - 1;
        prefill_work += r.prefill_tokens_processed;
    }
    let it_decode: u64 = res.iterations.iter().map(|i| i.decode_tokens).sum();
    let it_prefill: u64 = res.iterations.iter().map(|i| i.prefill_tokens).sum();
    if it_decode != decode_steps || it_prefill != prefill_work {
        return Err(format!(
            "token totals differ: decode {it_decode} vs {decode_steps}, prefill {it_prefill} vs {prefill_work}"
        ));
    }
    if policy == PolicyKind::FasterTransformer {
        // a batch runs start to finish with fixed membership: requests that
        // start together finish together, and nothing joins in between
        let mut groups: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
        for r in &res.requests {
            groups.entry((r.replica, r.first_scheduled.to_bits())).or_default().push(r.completion);
        }
        let mut spans: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        for ((rep, start), ends) in &groups {
            if ends.iter().any(|&e| e != ends[0]) {
                return Err(format!("batch starting at {} released members at different times", f64::from_bits(*start)));
            }
            spans.entry(*rep).or_default().push((f64::from_bits(*start), ends[0]));
        }
        for s in spans.values_mut() {
            s.sort_by(|a, b| a.0.total_cmp(&b.0));
            if s.windows(2).any(|w| w[1].0 < w[0].1) {
                return Err("a new batch started before the previous one finished".into());
            }
        }
    }
    let restarts: u32 = res.requests.iter().map(|r| r.restarts).sum();
    Ok(format!("{} iterations, {restarts} restarts", res.iterations.len()))
}

fn scheduler_invariants() -> Outcome {
    let mut parts = Vec::new();
    for (i, policy) in PolicyKind::ALL.into_iter().enumerate() {
        let detail = check_run(policy, 40 + i as u64).map_err(|e| format!("{policy}: {e}"))?;
        parts.push(format!("{policy} {detail}"));
    }
    Ok(format!("10000 requests per policy, zero violations; {}", parts.join("; ")))
}

// 5 --------------------------------------------------------------------------

fn servesim(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_servesim"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("servesim {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

/// Files of `dir` except the run manifest, which records the output path.
fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let cfgs = configs_dir();
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let trace = d.join("trace.csv");
    servesim(&["gen-trace", "--distribution", &s(&cfgs.join("workloads/chat-4k.toml")), "--num-requests", "1500", "--seed", "5", "--out", &s(&trace)])?;
    for (out, format) in [("sim_a", "csv"), ("sim_b", "csv"), ("sim_c", "json"), ("sim_d", "json")] {
        servesim(&[
            "simulate",
            "--cluster-config",
            &s(&cfgs.join("cluster-llama2-7b.toml")),
            "--trace",
            &s(&trace),
            "--seed",
            "9",
            "--format",
            format,
            "--out",
            &s(&d.join(out)),
        ])?;
    }
    let search_cfg = d.join("search.toml");
    std::fs::write(
        &search_cfg,
        format!(
            r#"model_spec = "{}"
seed = 3
num_requests = 300
estimator = "oracle"

[workload]
distribution_file = "{}"

[space]
skus = ["A100-80G", "H100-80G"]
tp_degrees = [1, 2]
schedulers = ["vllm", "sarathi_serve"]
batch_sizes = [32]
max_gpus_total = 4
"#,
            s(&cfgs.join("models/llama2-7b.toml")),
            s(&cfgs.join("workloads/chat-4k.toml"))
        ),
    )
    .map_err(|e| e.to_string())?;
    for (out, workers) in [("search_1", "1"), ("search_1b", "1"), ("search_8", "8")] {
        servesim(&["search", "--search-config", &s(&search_cfg), "--workers", workers, "--out", &s(&d.join(out))])?;
    }
    let pairs = [("sim_a", "sim_b"), ("sim_c", "sim_d"), ("search_1", "search_1b"), ("search_1", "search_8")];
    let mut files = 0;
    for (a, b) in pairs {
        let (fa, fb) = (outputs(&d.join(a)), outputs(&d.join(b)));
        if fa.is_empty() || fa != fb {
            let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
            return Err(format!("{a} and {b} differ in {differing:?}"));
        }
        files += fa.len();
    }
    Ok(format!("simulate x2 (csv, json) and search at 1, 1, 8 workers: {files} output files byte-identical"))
}

// 6 --------------------------------------------------------------------------

fn capacity_search() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let threshold = log_uniform(&mut rng, 0.01, 5000.0);
        let feasible = |q: f64| q <= threshold;
        // brute force: finest relative scan from 1e-3 upward
        let mut q = 1e-3;
        let mut scan = 0.0;
        while q < 1e5 {
            if feasible(q) {
                scan = q;
            }
            q *= 1.0001;
        }
        let params = CapacityParams {
            initial_qps: log_uniform(&mut rng, 0.1, 100.0),
            ..CapacityParams::default()
        };
        let cap = find_capacity(feasible, &params).qps;
        let err = rel(cap, scan);
        worst = worst.max(err);
        if err > 0.02 {
            return Err(format!("threshold {threshold}: search {cap} vs scan {scan}"));
        }
        if !feasible(0.99 * cap) || feasible(1.05 * cap) {
            return Err(format!("threshold {threshold}: capacity {cap} not at the feasibility edge"));
        }
    }
    Ok(format!("50 thresholds, worst gap to fine scan {:.2}%", 100.0 * worst))
}

// 7 --------------------------------------------------------------------------

fn brute_force_frontier(pts: &[(f64, f64)]) -> Vec<usize> {
    (0..pts.len())
        .filter(|&i| {
            !pts.iter().any(|&(l, q)| l <= pts[i].0 && q >= pts[i].1 && (l < pts[i].0 || q > pts[i].1))
        })
        .collect()
}

fn pareto() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut total = 0;
    for set in 0..1000 {
        let n = rng.random_range(1..=60);
        // a coarse grid half the time so ties and duplicates occur
        let coarse = set % 2 == 0;
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                if coarse {
                    (rng.random_range(0..8) as f64 * 0.25, rng.random_range(0..8) as f64 * 0.1)
                } else {
                    (rng.random_range(0.01..10.0), rng.random_range(0.0..5.0))
                }
            })
            .collect();
        let got = pareto_frontier(&pts);
        let want = brute_force_frontier(&pts);
        if got != want {
            return Err(format!("set {set}: {got:?} vs brute force {want:?} for {pts:?}"));
        }
        total += got.len();
    }
    Ok(format!("1000 point sets, {total} frontier points, all equal to brute force"))
}

// 8 --------------------------------------------------------------------------

fn desk_model() -> ModelSpec {
    ModelSpec {
        name: "desk-1b".into(),
        num_layers: 16,
        hidden_dim: 2048,
        num_q_heads: 16,
        num_kv_heads: 16,
        head_dim: 128,
        mlp_dim: 5504,
        vocab_size: 32000,
        max_context: 4096,
        param_bytes_per_element: 2,
        attention_variant: AttentionVariant::Mha,
    }
}

fn rigged_devices() -> BTreeMap<String, DeviceProfile> {
    let base = DeviceProfile {
        device_mem: 24 << 30,
        ..DeviceProfile::a100_80g()
    };
    let compute = DeviceProfile {
        sku_name: "COMPUTE-RICH".into(),
        peak_flops: 800e12,
        mem_bandwidth: 1.8e12,
        ..base.clone()
    };
    let bandwidth = DeviceProfile {
        sku_name: "BANDWIDTH-RICH".into(),
        peak_flops: 100e12,
        mem_bandwidth: 3.0e12,
        ..base
    };
    [compute, bandwidth].into_iter().map(|d| (d.sku_name.clone(), d)).collect()
}

fn desk_inputs(dist: &TraceDistribution) -> Result<SearchInputs, String> {
    let model = desk_model();
    let requests = synth_trace(dist, 400, 8).map_err(|e| e.to_string())?;
    let devices = rigged_devices();
    let inputs = SearchInputs {
        space: SearchSpace {
            skus: devices.keys().cloned().collect(),
            tp_degrees: vec![1, 2],
            pp_degrees: vec![1],
            schedulers: vec![PolicyKind::Vllm, PolicyKind::SarathiServe],
            batch_sizes: vec![128],
            chunk_sizes: vec![512],
            max_gpus_total: 2,
        },
        cost: CostTable(devices.keys().map(|k| (k.clone(), 1.0)).collect()),
        devices,
        slos: Slos::unbounded(),
        workload: Vec::new(),
        options: SearchOptions {
            num_requests: 400,
            probe_duration_s: 20.0,
            seed: 8,
            estimator: EstimatorSource::Oracle,
            ..SearchOptions::default()
        },
        model,
    };
    Ok(inputs.with_workload(requests))
}

fn workload_dependence() -> Outcome {
    let chat = chat_like();
    let bwb = TraceDistribution {
        prefill: LengthDist::lognormal_from_quantiles(1037.0, 1453.0),
        decode: LengthDist::lognormal_from_quantiles(1601.0, 2149.0),
        max_total_tokens: Some(4096),
    };
    let mut best = Vec::new();
    let mut tables = Vec::new();
    for (name, dist) in [("chat-like", &chat), ("bwb-like", &bwb)] {
        let inputs = desk_inputs(dist)?;
        let pd = compute_stats(&inputs.workload).map_err(|e| e.to_string())?.pd_ratio_median;
        let out = run_search(&inputs).map_err(|e| e.to_string())?;
        if out.results.len() < 8 {
            return Err(format!("{name}: only {} configurations", out.results.len()));
        }
        let opt = out.optimum.clone().ok_or(format!("{name}: no optimum"))?;
        let qpd: BTreeMap<String, f64> = out.results.iter().map(|r| (r.config_id.clone(), r.qps_per_dollar)).collect();
        best.push((name, pd, opt));
        tables.push(qpd);
    }
    let (a, b) = (&best[0].2, &best[1].2);
    if a == b {
        return Err(format!("both traces pick {a}"));
    }
    // cost of running each trace on the other's optimum
    let loss_a = tables[0][a] / tables[0][b];
    let loss_b = tables[1][b] / tables[1][a];
    let detail = format!(
        "{} (P:D median {:.2}) -> {a}; {} (P:D median {:.2}) -> {b}; cross-applied optimum costs {loss_a:.2}x and {loss_b:.2}x",
        best[0].0, best[0].1, best[1].0, best[1].1
    );
    if loss_a < 1.2 || loss_b < 1.2 {
        return Err(detail);
    }
    Ok(detail)
}

// 9 --------------------------------------------------------------------------

/// Published statistics of the 4k-capped traces: mean/median/p90 of prefill and decode
/// lengths, P:D median and std.
const PUBLISHED_STATS: [(&str, [f64; 8]); 3] = [
    ("chat_1m_4k.csv", [686.0, 417.0, 1678.0, 197.0, 139.0, 484.0, 2.3, 228.0]),
    ("bwb_4k.csv", [1067.0, 1037.0, 1453.0, 1612.0, 1601.0, 2149.0, 0.65, 0.37]),
    ("arxiv_4k.csv", [2588.0, 2730.0, 3702.0, 291.0, 167.0, 372.0, 15.7, 16.0]),
];

fn stats_via_cli(trace: &Path, dir: &Path) -> Result<serde_json::Value, String> {
    let s = |p: &Path| p.to_string_lossy().into_owned();
    servesim(&["workload-stats", "--trace", &s(trace), "--out", &s(dir), "--format", "json"])?;
    let text = std::fs::read_to_string(dir.join("stats.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn row(v: &serde_json::Value) -> [f64; 8] {
    let g = |a: &str, b: &str| v[a][b].as_f64().unwrap();
    [
        g("prefill", "mean"),
        g("prefill", "median"),
        g("prefill", "p90"),
        g("decode", "mean"),
        g("decode", "median"),
        g("decode", "p90"),
        v["pd_ratio_median"].as_f64().unwrap(),
        v["pd_ratio_std"].as_f64().unwrap(),
    ]
}

fn trace_statistics() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    if let Ok(dir) = std::env::var("SERVESIM_TRACE_DIR") {
        let mut done = Vec::new();
        for (i, (file, want)) in PUBLISHED_STATS.iter().enumerate() {
            let path = Path::new(&dir).join(file);
            if !path.is_file() {
                continue;
            }
            let got = row(&stats_via_cli(&path, &tmp.path().join(i.to_string()))?);
            // printed precision: integers for lengths, as given for ratios
            for (k, (&g, &w)) in got.iter().zip(want).enumerate() {
                let ok = if k < 6 { g.round() == w } else { rel(g, w) <= 0.05 };
                if !ok {
                    return Err(format!("{file} column {k}: {g} vs published {w}"));
                }
            }
            done.push(*file);
        }
        if !done.is_empty() {
            return Ok(format!("real traces {done:?} match the published rows"));
        }
    }
    let golden: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixtures_dir().join("chat_1000.golden.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let got = stats_via_cli(&fixtures_dir().join("chat_1000.csv"), tmp.path())?;
    if got["num_requests"] != golden["num_requests"] {
        return Err("row count differs".into());
    }
    let (g, w) = (row(&got), row(&golden));
    for k in 0..8 {
        let ok = match k {
            1 | 2 | 4 | 5 => g[k] == w[k],
            _ => rel(g[k], w[k]) <= 1e-12,
        };
        if !ok {
            return Err(format!("column {k}: {} vs golden {}", g[k], w[k]));
        }
    }
    // library path agrees with the CLI
    let lib = compute_stats(&load_trace(fixtures_dir().join("chat_1000.csv")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    if lib.prefill.median != g[1] {
        return Err("library and CLI disagree".into());
    }
    Ok(format!(
        "no real traces supplied (SERVESIM_TRACE_DIR); bundled 1000-row fixture matches golden stats: prefill {:.2}/{}/{}, decode {:.3}/{}/{}",
        g[0], g[1], g[2], g[3], g[4], g[5]
    ))
}

// 10 -------------------------------------------------------------------------

fn gqa_mha_ratio() -> Outcome {
    let gqa = llama70b();
    let mha = ModelSpec {
        num_kv_heads: gqa.num_kv_heads * 8,
        attention_variant: AttentionVariant::Mha,
        ..gqa.clone()
    };
    for tp in [1, 2, 4, 8] {
        let par = ParallelismConfig::new(tp, 1, 1);
        let a = gqa.kv_bytes_per_token_per_device(&par).map_err(|e| e.to_string())?;
        let b = mha.kv_bytes_per_token_per_device(&par).map_err(|e| e.to_string())?;
        if b != 8 * a {
            return Err(format!("tp{tp}: MHA {b} vs GQA {a} bytes per token"));
        }
    }
    let a = gqa.kv_bytes_per_token_per_device(&ParallelismConfig::new(1, 1, 1)).unwrap();
    Ok(format!("{} GQA {a} B/token, MHA {} B/token, exactly 8x at tp 1, 2, 4, 8", gqa.name, 8 * a))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "prefill equivalence", prefill_equivalence),
        (2, "estimator fidelity", estimator_fidelity),
        (3, "batch prediction", batch_composition),
        (4, "scheduler invariants", scheduler_invariants),
        (5, "determinism", determinism),
        (6, "capacity search", capacity_search),
        (7, "pareto frontier", pareto),
        (8, "workload dependence", workload_dependence),
        (9, "trace statistics", trace_statistics),
        (10, "gqa/mha kv ratio", gqa_mha_ratio),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n:>2} {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
