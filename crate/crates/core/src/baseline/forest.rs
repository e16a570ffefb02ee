// SPDX-License-Identifier: Apache-2.0

//! Bagged regression trees with variance-reduction splits.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(self, dim: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => ((dim as f64).sqrt().round() as usize).clamp(1, dim),
            MaxFeatures::All => dim,
            MaxFeatures::Count(n) => n.clamp(1, dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    pub max_features: MaxFeatures,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 200,
            min_leaf: 2,
            max_features: MaxFeatures::Sqrt,
            max_depth: None,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_leaf == 0 {
            return Err(Error::Config("forest needs n_trees >= 1 and min_leaf >= 1".into()));
        }
        if let MaxFeatures::Count(0) = self.max_features {
            return Err(Error::Config("max_features count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }
}

/// Best (feature, threshold, child SSE) for the rows `idx`, scanning
/// midpoints between consecutive distinct values. Ties keep the earliest
/// feature in `features` and the lowest threshold.
pub fn best_split(x: &[Vec<f64>], y: &[f64], idx: &[usize], features: &[usize], min_leaf: usize) -> Option<(usize, f64, f64)> {
    let n = idx.len();
    if n < 2 * min_leaf {
        return None;
    }
    let total: f64 = idx.iter().map(|&i| y[i]).sum();
    let total_sq: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
    let mut best: Option<(usize, f64, f64)> = None;
    let mut order = idx.to_vec();
    for &f in features {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        let (mut ls, mut lsq) = (0.0, 0.0);
        for k in 0..n - 1 {
            let yi = y[order[k]];
            ls += yi;
            lsq += yi * yi;
            let nl = k + 1;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let (a, b) = (x[order[k]][f], x[order[k + 1]][f]);
            if a == b {
                continue;
            }
            let rs = total - ls;
            let rsq = total_sq - lsq;
            let sse = (lsq - ls * ls / nl as f64) + (rsq - rs * rs / nr as f64);
            let threshold = a + (b - a) / 2.0;
            if best.is_none_or(|(_, _, s)| sse < s - 1e-12 * s.abs().max(1.0)) {
                best = Some((f, threshold, sse));
            }
        }
    }
    best
}

fn mean_of(y: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64
}

pub fn fit_tree(x: &[Vec<f64>], y: &[f64], rows: Vec<usize>, params: &ForestParams, rng: &mut ChaCha8Rng) -> Tree {
    let dim = x[0].len();
    let k = params.max_features.resolve(dim);
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut stack = vec![(0usize, rows, 0usize)];
    while let Some((slot, idx, depth)) = stack.pop() {
        let value = mean_of(y, &idx);
        let constant = idx.iter().all(|&i| y[i] == y[idx[0]]);
        let depth_ok = params.max_depth.is_none_or(|d| depth < d);
        let split = if constant || !depth_ok {
            None
        } else {
            let features: Vec<usize> = if k == dim {
                (0..dim).collect()
            } else {
                let mut f = sample(rng, dim, k).into_vec();
                f.sort_unstable();
                f
            };
            best_split(x, y, &idx, &features, params.min_leaf)
        };
        match split {
            None => nodes[slot] = Node::Leaf { value },
            Some((feature, threshold, _)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][feature] <= threshold);
                let left = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                let right = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[slot] = Node::Split { feature, threshold, left, right };
                stack.push((right, r, depth + 1));
                stack.push((left, l, depth + 1));
            }
        }
    }
    Tree { nodes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub dim: usize,
    pub params: ForestParams,
    pub seed: u64,
    pub trees: Vec<Tree>,
}

fn check_xy(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::Shape { expected: x.len(), actual: y.len() });
    }
    let dim = x.first().map(Vec::len).unwrap_or(0);
    if let Some(bad) = x.iter().find(|r| r.len() != dim) {
        return Err(Error::Shape { expected: dim, actual: bad.len() });
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Training("non-finite value in training data".into()));
    }
    Ok(dim)
}

impl RandomForest {
    /// Trees are seeded independently from `(seed, tree index)`, so the
    /// result does not depend on `exec`.
    pub fn train(x: &[Vec<f64>], y: &[f64], params: &ForestParams, seed: u64, exec: Execution) -> Result<Self> {
        params.validate()?;
        let dim = check_xy(x, y)?;
        if x.len() < 2 {
            return Err(Error::Training(format!("random forest needs >= 2 training rows, got {}", x.len())));
        }
        let n = x.len();
        let trees = exec.map_range(params.n_trees, |t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64 + 1);
            let rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            fit_tree(x, y, rows, params, &mut rng)
        });
        Ok(RandomForest {
            dim,
            params: params.clone(),
            seed,
            trees,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Shape { expected: self.dim, actual: x.len() });
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }
}
