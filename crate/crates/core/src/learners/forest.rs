use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_fit_input, Learner, Predictor};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Regression forest: bootstrap rows, a random subset of `mtry` features per
/// split, squared-error splits.
#[derive(Debug, Clone)]
pub struct ForestLearner {
    trees: usize,
    max_depth: usize,
    min_leaf: usize,
    mtry: Option<usize>,
    bootstrap: bool,
}

impl ForestLearner {
    pub fn new(trees: usize, max_depth: usize, min_leaf: usize, mtry: Option<usize>) -> Result<Self> {
        if trees == 0 || min_leaf == 0 {
            return Err(Error::invalid("forest needs trees >= 1 and min_leaf >= 1"));
        }
        if mtry == Some(0) {
            return Err(Error::invalid("mtry must be at least 1"));
        }
        Ok(ForestLearner {
            trees,
            max_depth,
            min_leaf,
            mtry,
            bootstrap: true,
        })
    }

    /// Grow every tree on the full index set instead of a bootstrap sample.
    pub fn without_bootstrap(mut self) -> Self {
        self.bootstrap = false;
        self
    }

    pub fn default_trees() -> usize {
        50
    }

    pub fn default_max_depth() -> usize {
        8
    }

    pub fn default_min_leaf() -> usize {
        5
    }
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] <= threshold { left } else { right },
            }
        }
    }
}

struct ForestPredictor {
    trees: Vec<Tree>,
}

impl Predictor for ForestPredictor {
    fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }
}

struct Grower<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    mtry: usize,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    pairs: Vec<(f64, f64)>,
    features: Vec<usize>,
}

impl Grower<'_> {
    fn grow(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        let n = rows.len() as f64;
        let mean = rows.iter().map(|&i| self.y[i]).sum::<f64>() / n;
        self.nodes.push(Node::Leaf(mean));
        let constant = rows.iter().all(|&i| self.y[i] == self.y[rows[0]]);
        if depth >= self.max_depth || rows.len() < 2 * self.min_leaf || constant {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(rows) else {
            return id;
        };
        let mut k = 0;
        for r in 0..rows.len() {
            if self.x[(rows[r], feature)] <= threshold {
                rows.swap(r, k);
                k += 1;
            }
        }
        let (lo, hi) = rows.split_at_mut(k);
        let left = self.grow(lo, depth + 1);
        let right = self.grow(hi, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<(usize, f64)> {
        let p = self.features.len();
        for s in 0..self.mtry {
            let j = self.rng.random_range(s..p);
            self.features.swap(s, j);
        }
        let total: f64 = rows.iter().map(|&i| self.y[i]).sum();
        let n = rows.len();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..self.mtry {
            let feature = self.features[f];
            self.pairs.clear();
            self.pairs.extend(rows.iter().map(|&i| (self.x[(i, feature)], self.y[i])));
            self.pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_sum = 0.0;
            for k in 1..n {
                left_sum += self.pairs[k - 1].1;
                if k < self.min_leaf || n - k < self.min_leaf || self.pairs[k - 1].0 == self.pairs[k].0 {
                    continue;
                }
                let right_sum = total - left_sum;
                // Maximising this is equivalent to minimising the child SSE.
                let score = left_sum * left_sum / k as f64 + right_sum * right_sum / (n - k) as f64;
                if best.is_none_or(|b| score > b.0) {
                    let threshold = 0.5 * (self.pairs[k - 1].0 + self.pairs[k].0);
                    best = Some((score, feature, threshold));
                }
            }
        }
        let parent = total * total / n as f64;
        best.filter(|b| b.0 > parent * (1.0 + 1e-12) + 1e-12)
            .map(|(_, f, t)| (f, t))
    }
}

impl Learner for ForestLearner {
    fn name(&self) -> &str {
        "forest"
    }

    fn hyperparams(&self) -> BTreeMap<String, f64> {
        let mut h = BTreeMap::new();
        h.insert("trees".to_string(), self.trees as f64);
        h.insert("max_depth".to_string(), self.max_depth as f64);
        h.insert("min_leaf".to_string(), self.min_leaf as f64);
        h.insert("mtry".to_string(), self.mtry.map_or(f64::NAN, |m| m as f64));
        h
    }

    fn fit(&self, responses: &[f64], covariates: &DMatrix<f64>, indices: &[usize], seed: u64) -> Result<Box<dyn Predictor>> {
        check_fit_input(responses, covariates, indices)?;
        let p = covariates.ncols();
        if p == 0 {
            return Err(Error::invalid("forest needs at least one covariate"));
        }
        let mtry = self.mtry.unwrap_or((p / 3).max(1)).min(p);
        let mut trees = Vec::with_capacity(self.trees);
        for t in 0..self.trees {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[t as u64]));
            let mut rows: Vec<usize> = if self.bootstrap {
                (0..indices.len())
                    .map(|_| indices[rng.random_range(0..indices.len())])
                    .collect()
            } else {
                indices.to_vec()
            };
            let mut g = Grower {
                x: covariates,
                y: responses,
                max_depth: self.max_depth,
                min_leaf: self.min_leaf,
                mtry,
                nodes: Vec::new(),
                rng,
                pairs: Vec::with_capacity(rows.len()),
                features: (0..p).collect(),
            };
            g.grow(&mut rows, 0);
            trees.push(Tree { nodes: g.nodes });
        }
        Ok(Box::new(ForestPredictor { trees }))
    }
}
