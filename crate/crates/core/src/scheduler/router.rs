//! Global request routing across replicas.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum RoutingPolicy {
    #[default]
    RoundRobin,
    LeastOutstanding,
    /// Requests wait in a global pool until some replica has fewer than
    /// `threshold` outstanding requests.
    Deferred { threshold: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Replica(usize),
    Deferred,
}

#[derive(Debug, Clone)]
pub struct Router {
    policy: RoutingPolicy,
    next: usize,
    pool: VecDeque<usize>,
}

fn least_loaded(outstanding: &[usize]) -> usize {
    // min_by_key keeps the first minimum, so ties go to the lowest id
    (0..outstanding.len()).min_by_key(|&i| outstanding[i]).unwrap_or(0)
}

impl Router {
    pub fn new(policy: RoutingPolicy) -> Self {
        Self {
            policy,
            next: 0,
            pool: VecDeque::new(),
        }
    }

    /// Routes request `req` given per-replica outstanding counts
    /// (waiting + running).
    pub fn route(&mut self, req: usize, outstanding: &[usize]) -> Route {
        assert!(!outstanding.is_empty(), "router needs at least one replica");
        match self.policy {
            RoutingPolicy::RoundRobin => {
                let r = self.next % outstanding.len();
                self.next = r + 1;
                Route::Replica(r)
            }
            RoutingPolicy::LeastOutstanding => Route::Replica(least_loaded(outstanding)),
            RoutingPolicy::Deferred { .. } => {
                self.pool.push_back(req);
                Route::Deferred
            }
        }
    }

    /// Drains pooled requests onto replicas under the threshold, oldest
    /// first. Updates `outstanding` as it assigns.
    pub fn dispatch(&mut self, outstanding: &mut [usize]) -> Vec<(usize, usize)> {
        let RoutingPolicy::Deferred { threshold } = self.policy else {
            return Vec::new();
        };
        let mut out = Vec::new();
        while let Some(&req) = self.pool.front() {
            let r = least_loaded(outstanding);
            if outstanding[r] >= threshold.max(1) {
                break;
            }
            self.pool.pop_front();
            outstanding[r] += 1;
            out.push((req, r));
        }
        out
    }

    pub fn pooled(&self) -> usize {
        self.pool.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_cycles() {
        let mut r = Router::new(RoutingPolicy::RoundRobin);
        let got: Vec<Route> = (0..5).map(|i| r.route(i, &[0, 0, 0])).collect();
        let want: Vec<Route> = [0, 1, 2, 0, 1].into_iter().map(Route::Replica).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn least_outstanding_breaks_ties_low() {
        let mut r = Router::new(RoutingPolicy::LeastOutstanding);
        assert_eq!(r.route(0, &[4, 1, 4]), Route::Replica(1));
        assert_eq!(r.route(1, &[2, 2]), Route::Replica(0));
    }

    #[test]
    fn deferred_holds_until_below_threshold() {
        let mut r = Router::new(RoutingPolicy::Deferred { threshold: 2 });
        for i in 0..5 {
            assert_eq!(r.route(i, &[0, 0]), Route::Deferred);
        }
        let mut load = vec![0, 1];
        let got = r.dispatch(&mut load);
        assert_eq!(got, vec![(0, 0), (1, 0), (2, 1)]);
        assert_eq!(load, vec![2, 2]);
        assert_eq!(r.pooled(), 2);
    }
}
