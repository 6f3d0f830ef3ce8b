//! Bagged regression-tree ensemble with linear leaf models.
//!
//! Each leaf fits an ordinary least-squares plane to its samples, and splits
//! are scored by the residual of those leaf fits (variance reduction when
//! leaves are constant). Callers are expected to feed log-transformed
//! inputs, where kernel runtimes are close to piecewise linear, so a
//! handful of points per octave is enough.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Draw each tree's sample with replacement.
    pub bootstrap: bool,
    /// Leaves predict a least-squares plane instead of the sample mean.
    pub linear_leaves: bool,
    /// Probability that each candidate split position is considered at a
    /// node (at least one always is).
    #[serde(default = "one")]
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 32,
            max_depth: 12,
            min_samples_leaf: 2,
            bootstrap: false,
            linear_leaves: true,
            split_fraction: 0.5,
            seed: 0x5eed,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// `coef[0]` is the intercept, `coef[1..]` the per-feature slopes.
    Leaf { coef: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { coef } => {
                    return coef[0] + coef[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub params: ForestParams,
    pub n_features: usize,
    trees: Vec<Tree>,
    /// Target range seen in training; predictions are clamped to it,
    /// widened by half its span.
    y_range: (f64, f64),
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a ForestParams,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn build(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { coef: vec![] });
        let split = if depth < self.params.max_depth && idx.len() >= 2 * self.params.min_samples_leaf {
            self.best_split(idx)
        } else {
            None
        };
        match split {
            Some((feature, threshold)) => {
                let mid = partition(idx, |&i| self.x[i][feature] <= threshold);
                let (l, r) = idx.split_at_mut(mid);
                let left = self.build(l, depth + 1);
                let right = self.build(r, depth + 1);
                self.nodes[id] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
            }
            None => {
                self.nodes[id] = Node::Leaf {
                    coef: self.fit_leaf(idx),
                };
            }
        }
        id
    }

    fn best_split(&mut self, idx: &[usize]) -> Option<(usize, f64)> {
        let n = idx.len();
        let d = self.x[idx[0]].len();
        let min_leaf = self.params.min_samples_leaf.max(1);
        let linear = self.params.linear_leaves;
        let mut all = Moments::new(d);
        for &i in idx {
            all.add(&self.x[i], self.y[i]);
        }
        let parent_sse = all.sse(linear);
        if parent_sse <= 1e-12 * n as f64 {
            return None;
        }
        // With linear leaves every child must keep spread on each axis the
        // parent varies along, or its slope there is unidentified.
        let varies: Vec<bool> = (0..d)
            .map(|g| {
                let first = self.x[idx[0]][g];
                idx.iter().any(|&i| self.x[i][g] != first)
            })
            .collect();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut fallback: Option<(f64, usize, f64)> = None;
        let frac = self.params.split_fraction;
        let mut order: Vec<usize> = idx.to_vec();
        for f in 0..d {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let spread_ok = if linear {
                spread_mask(self.x, &order, &varies)
            } else {
                vec![true; n]
            };
            let mut left = Moments::new(d);
            for k in 0..n - 1 {
                left.add(&self.x[order[k]], self.y[order[k]]);
                let nl = k + 1;
                let nr = n - nl;
                let (xa, xb) = (self.x[order[k]][f], self.x[order[k + 1]][f]);
                if nl < min_leaf || nr < min_leaf || xa == xb || !spread_ok[k] {
                    continue;
                }
                let sampled = frac >= 1.0 || self.rng.random_bool(frac.max(0.0));
                if !sampled && fallback.is_some() {
                    continue;
                }
                let right = all.minus(&left);
                let sse = left.sse(linear) + right.sse(linear);
                let slot = if sampled { &mut best } else { &mut fallback };
                if slot.is_none_or(|(b, _, _)| sse < b - 1e-12 * parent_sse) {
                    // Random cut inside the gap so trees disagree where no
                    // sample pins the boundary.
                    let u: f64 = self.rng.random_range(0.05..0.95);
                    *slot = Some((sse, f, xa + u * (xb - xa)));
                }
            }
        }
        best.or(fallback).filter(|(sse, _, _)| *sse < parent_sse * (1.0 - 1e-9))
            .map(|(_, f, t)| (f, t))
    }

    fn fit_leaf(&self, idx: &[usize]) -> Vec<f64> {
        let d = self.x[idx[0]].len();
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        if !self.params.linear_leaves {
            let mut c = vec![0.0; d + 1];
            c[0] = mean;
            return c;
        }
        least_squares(idx.iter().map(|&i| (self.x[i].as_slice(), self.y[i])), d)
            .unwrap_or_else(|| {
                let mut c = vec![0.0; d + 1];
                c[0] = mean;
                c
            })
    }
}

/// `mask[k]` is true when splitting `order` after position `k` leaves both
/// sides with at least two distinct values on every axis in `varies`.
fn spread_mask(x: &[Vec<f64>], order: &[usize], varies: &[bool]) -> Vec<bool> {
    let n = order.len();
    let mut mask = vec![true; n];
    for (g, _) in varies.iter().enumerate().filter(|(_, v)| **v) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut left = vec![false; n];
        for k in 0..n {
            let v = x[order[k]][g];
            lo = lo.min(v);
            hi = hi.max(v);
            left[k] = hi > lo;
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in (1..n).rev() {
            let v = x[order[k]][g];
            lo = lo.min(v);
            hi = hi.max(v);
            mask[k - 1] &= left[k - 1] && hi > lo;
        }
        mask[n - 1] = false;
    }
    mask
}

/// Running sums for an affine least-squares fit: `[1, x…]ᵀ[1, x…]`,
/// `[1, x…]ᵀy` and `yᵀy`.
#[derive(Clone)]
struct Moments {
    d: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yty: f64,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self {
            d,
            xtx: vec![0.0; (d + 1) * (d + 1)],
            xty: vec![0.0; d + 1],
            yty: 0.0,
        }
    }

    fn add(&mut self, x: &[f64], y: f64) {
        let m = self.d + 1;
        let row = |j: usize| if j == 0 { 1.0 } else { x[j - 1] };
        for r in 0..m {
            let xr = row(r);
            for c in 0..m {
                self.xtx[r * m + c] += xr * row(c);
            }
            self.xty[r] += xr * y;
        }
        self.yty += y * y;
    }

    fn minus(&self, other: &Moments) -> Moments {
        Moments {
            d: self.d,
            xtx: self.xtx.iter().zip(&other.xtx).map(|(a, b)| a - b).collect(),
            xty: self.xty.iter().zip(&other.xty).map(|(a, b)| a - b).collect(),
            yty: self.yty - other.yty,
        }
    }

    /// Residual sum of squares of the constant (or affine) fit.
    fn sse(&self, linear: bool) -> f64 {
        let m = self.d + 1;
        let n = self.xtx[0];
        if n <= 0.0 {
            return 0.0;
        }
        let mean = self.xty[0] / n;
        let constant = (self.yty - n * mean * mean).max(0.0);
        if !linear {
            return constant;
        }
        let mut a = vec![vec![0.0; m + 1]; m];
        for r in 0..m {
            for c in 0..m {
                a[r][c] = self.xtx[r * m + c];
            }
            if r > 0 {
                a[r][r] += 1e-9 * (1.0 + a[r][r]);
            }
            a[r][m] = self.xty[r];
        }
        match solve(a) {
            Some(b) => {
                let explained: f64 = b.iter().zip(&self.xty).map(|(b, v)| b * v).sum();
                (self.yty - explained).clamp(0.0, constant)
            }
            None => constant,
        }
    }
}

fn partition<F: Fn(&usize) -> bool>(v: &mut [usize], pred: F) -> usize {
    let mut k = 0;
    for i in 0..v.len() {
        if pred(&v[i]) {
            v.swap(i, k);
            k += 1;
        }
    }
    k
}

/// Least-squares plane through `(x, y)` samples with a small ridge on the
/// slopes; dimensions without spread get a zero slope.
fn least_squares<'a>(samples: impl Iterator<Item = (&'a [f64], f64)> + Clone, d: usize) -> Option<Vec<f64>> {
    let n = samples.clone().count() as f64;
    if n == 0.0 {
        return None;
    }
    let mut mx = vec![0.0; d];
    let mut my = 0.0;
    for (x, y) in samples.clone() {
        for j in 0..d {
            mx[j] += x[j] / n;
        }
        my += y / n;
    }
    // Centered normal equations: (XᵀX + λI) b = Xᵀy
    let mut a = vec![vec![0.0; d + 1]; d];
    for (x, y) in samples {
        for r in 0..d {
            let xr = x[r] - mx[r];
            for c in 0..d {
                a[r][c] += xr * (x[c] - mx[c]);
            }
            a[r][d] += xr * (y - my);
        }
    }
    for (r, row) in a.iter_mut().enumerate() {
        let spread = row[r];
        if spread < 1e-12 {
            // no variation along this axis
            row.iter_mut().for_each(|v| *v = 0.0);
            row[r] = 1.0;
        } else {
            row[r] += 1e-9 * spread;
        }
    }
    let slopes = solve(a)?;
    let intercept = my - slopes.iter().zip(&mx).map(|(b, m)| b * m).sum::<f64>();
    let mut coef = Vec::with_capacity(d + 1);
    coef.push(intercept);
    coef.extend(slopes);
    coef.iter().all(|c| c.is_finite()).then_some(coef)
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let d = a.len();
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..d {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=d {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..d).map(|i| a[i][d] / a[i][i]).collect())
}

fn tree_seed(seed: u64, tree: usize) -> u64 {
    seed ^ (tree as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn fit_tree(x: &[Vec<f64>], y: &[f64], params: &ForestParams, t: usize) -> Tree {
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(params.seed, t));
    let mut idx: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let mut b = Builder {
        x,
        y,
        params,
        rng,
        nodes: Vec::new(),
    };
    b.build(&mut idx, 0);
    Tree { nodes: b.nodes }
}

impl Forest {
    /// Fits the ensemble. Trees are independent and seeded by index, so the
    /// result does not depend on how many threads build them.
    pub fn fit(x: &[Vec<f64>], y: &[f64], params: &ForestParams) -> Option<Self> {
        if x.is_empty() || x.len() != y.len() || params.n_trees == 0 {
            return None;
        }
        let n_features = x[0].len();
        if x.iter().any(|r| r.len() != n_features) {
            return None;
        }
        let trees = crate::parallel::map_indexed(params.n_trees, |t| fit_tree(x, y, params, t));
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = 0.5 * (hi - lo);
        Some(Self {
            params: params.clone(),
            n_features,
            trees,
            y_range: (lo - pad, hi + pad),
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        (s / self.trees.len() as f64).clamp(self.y_range.0, self.y_range.1)
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_plane_exactly_on_linear_data() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 7) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 1.5 + 2.0 * r[0] - 0.5 * r[1]).collect();
        let params = ForestParams {
            min_samples_leaf: 8,
            ..ForestParams::default()
        };
        let f = Forest::fit(&x, &y, &params).unwrap();
        for (r, t) in x.iter().zip(&y) {
            assert!((f.predict(r) - t).abs() < 1e-6);
        }
        assert!((f.predict(&[10.5, 3.0]) - (1.5 + 21.0 - 1.5)).abs() < 1e-6);
    }

    #[test]
    fn constant_leaves_match_step_function() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| if i < 10 { 1.0 } else { 5.0 }).collect();
        let params = ForestParams {
            linear_leaves: false,
            bootstrap: false,
            n_trees: 1,
            ..ForestParams::default()
        };
        let f = Forest::fit(&x, &y, &params).unwrap();
        assert_eq!(f.predict(&[2.0]), 1.0);
        assert_eq!(f.predict(&[15.0]), 5.0);
    }

    #[test]
    fn seeded_fit_is_deterministic() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64).ln_1p()]).collect();
        let y: Vec<f64> = (0..30).map(|i| ((i * i) as f64 + 3.0).ln()).collect();
        let a = Forest::fit(&x, &y, &ForestParams::default()).unwrap();
        let b = Forest::fit(&x, &y, &ForestParams::default()).unwrap();
        assert_eq!(a, b);
        let other = ForestParams {
            seed: 99,
            ..ForestParams::default()
        };
        assert_ne!(a, Forest::fit(&x, &y, &other).unwrap());
    }

    #[test]
    fn rejects_ragged_input() {
        assert!(Forest::fit(&[vec![1.0], vec![1.0, 2.0]], &[1.0, 2.0], &ForestParams::default()).is_none());
        assert!(Forest::fit(&[], &[], &ForestParams::default()).is_none());
    }
}
