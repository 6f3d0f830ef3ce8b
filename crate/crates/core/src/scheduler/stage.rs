//! Synchronous pipeline-parallel microbatch schedule.

/// Makespan of running `times[s][m]` (stage `s`, microbatch `m`) through
/// the pipeline, where stage `s` starts microbatch `m` once stage `s - 1`
/// has finished it and handed it over in `comm[m]` seconds, and once it has
/// finished microbatch `m - 1` itself.
pub fn stage_schedule(times: &[Vec<f64>], comm: &[f64]) -> f64 {
    let Some(first) = times.first() else {
        return 0.0;
    };
    let mut prev = vec![0.0; first.len()];
    for (s, row) in times.iter().enumerate() {
        let mut cur = Vec::with_capacity(row.len());
        let mut free_at: f64 = 0.0;
        for (m, &t) in row.iter().enumerate() {
            let ready = if s == 0 { 0.0 } else { prev[m] + comm.get(m).copied().unwrap_or(0.0) };
            free_at = ready.max(free_at) + t;
            cur.push(free_at);
        }
        prev = cur;
    }
    prev.last().copied().unwrap_or(0.0)
}

/// Deals `n` items onto `parts` microbatches round-robin, dropping empty
/// ones.
pub fn split_round_robin<T: Clone>(items: &[T], parts: usize) -> Vec<Vec<T>> {
    let parts = parts.max(1);
    let mut out = vec![Vec::new(); parts];
    for (i, it) in items.iter().enumerate() {
        out[i % parts].push(it.clone());
    }
    out.retain(|v| !v.is_empty());
    out
}
