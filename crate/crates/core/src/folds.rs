use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Random partition of `0..n` into `k` balanced folds labelled `1..=k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    k: usize,
    assignments: Vec<usize>,
}

pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::invalid(format!("{k} folds requested for {n} observations")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % k + 1;
    }
    Ok(FoldPlan { k, assignments })
}

impl FoldPlan {
    /// Degenerate plan with one fold whose training set is every row.
    ///
    /// Only meant for checking that cross-fitted estimators collapse to
    /// their in-sample counterparts.
    #[doc(hidden)]
    pub fn no_split(n: usize) -> FoldPlan {
        FoldPlan {
            k: 1,
            assignments: vec![1; n],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.assignments.len()
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn label(&self, i: usize) -> usize {
        self.assignments[i]
    }

    /// Rows in fold `label`.
    pub fn held_out(&self, label: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignments[i] == label).collect()
    }

    /// Rows outside fold `label`; every row when the plan has a single fold.
    pub fn training(&self, label: usize) -> Vec<usize> {
        if self.k == 1 {
            return (0..self.n()).collect();
        }
        (0..self.n()).filter(|&i| self.assignments[i] != label).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.assignments {
            s[l - 1] += 1;
        }
        s
    }
}
