use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::math::clamp_r;

/// Observations of a binary outcome `y`, scalar exposure `a` and covariates `x` (n × p).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<f64>,
    x: DMatrix<f64>,
    column_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        a: Vec<f64>,
        x: DMatrix<f64>,
        column_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 observations, got {n}")));
        }
        if a.len() != n || x.nrows() != n {
            return Err(Error::invalid(format!(
                "length mismatch: y has {n}, a has {}, x has {} rows",
                a.len(),
                x.nrows()
            )));
        }
        if let Some(names) = &column_names {
            if names.len() != x.ncols() {
                return Err(Error::invalid(format!(
                    "{} column names for {} covariates",
                    names.len(),
                    x.ncols()
                )));
            }
        }
        if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("outcome at row {i} is {} (must be 0 or 1)", y[i])));
        }
        if let Some(i) = a.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite exposure at row {i}")));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite covariate at row {}, column {}",
                k % n,
                k / n
            )));
        }
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        if ones == 0 || ones == n {
            return Err(Error::invalid("outcome must contain both 0 and 1"));
        }
        Ok(Dataset {
            y,
            a,
            x,
            column_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    /// Row `i` of `x` copied into a vector.
    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Rows of `x` with the exposure prepended, i.e. the n × (p+1) matrix `(A, X)`.
    pub fn ax_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let p = self.p();
        DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { self.a[i] } else { self.x[(i, j - 1)] })
    }

    /// Observations reordered (or subsampled) by `idx`.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let y = idx.iter().map(|&i| self.y[i]).collect();
        let a = idx.iter().map(|&i| self.a[i]).collect();
        let x = self.x.select_rows(idx);
        Dataset::new(y, a, x, self.column_names.clone())
    }

    pub fn control_count(&self) -> usize {
        self.y.iter().filter(|&&v| v == 0.0).count()
    }
}

/// Per-observation nuisance values plugged into the estimating equation.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisancePredictions {
    r_hat: Vec<f64>,
    m_hat: Vec<f64>,
    w_hat: Vec<f64>,
    fold_id: Vec<usize>,
    r_clipped: usize,
}

impl NuisancePredictions {
    /// Unit weights, a single fold; `r_hat` is clamped to `[-R_CLIP, R_CLIP]`.
    pub fn new(r_hat: Vec<f64>, m_hat: Vec<f64>) -> Result<Self> {
        if r_hat.len() != m_hat.len() {
            return Err(Error::invalid("r_hat and m_hat lengths differ"));
        }
        if r_hat.iter().chain(&m_hat).any(|v| v.is_nan()) {
            return Err(Error::numerical("NaN in nuisance predictions"));
        }
        let mut r_clipped = 0;
        let r_hat = r_hat
            .into_iter()
            .map(|r| {
                let (v, hit) = clamp_r(r);
                r_clipped += hit as usize;
                v
            })
            .collect::<Vec<_>>();
        if m_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite m_hat"));
        }
        let n = r_hat.len();
        Ok(NuisancePredictions {
            r_hat,
            m_hat,
            w_hat: vec![1.0; n],
            fold_id: vec![1; n],
            r_clipped,
        })
    }

    pub fn with_weights(mut self, w_hat: Vec<f64>) -> Result<Self> {
        if w_hat.len() != self.r_hat.len() {
            return Err(Error::invalid("w_hat length differs from r_hat"));
        }
        if w_hat.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("weights must be strictly positive and finite"));
        }
        self.w_hat = w_hat;
        Ok(self)
    }

    pub fn with_folds(mut self, fold_id: Vec<usize>) -> Result<Self> {
        if fold_id.len() != self.r_hat.len() {
            return Err(Error::invalid("fold_id length differs from r_hat"));
        }
        self.fold_id = fold_id;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.r_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_hat.is_empty()
    }

    pub fn r_hat(&self) -> &[f64] {
        &self.r_hat
    }

    pub fn m_hat(&self) -> &[f64] {
        &self.m_hat
    }

    pub fn w_hat(&self) -> &[f64] {
        &self.w_hat
    }

    pub fn fold_id(&self) -> &[usize] {
        &self.fold_id
    }

    /// Number of `r_hat` entries that hit the clip bound.
    pub fn r_clipped(&self) -> usize {
        self.r_clipped
    }

    pub(crate) fn check_against(&self, data: &Dataset) -> Result<()> {
        if self.len() != data.n() {
            return Err(Error::invalid(format!(
                "predictions cover {} observations, dataset has {}",
                self.len(),
                data.n()
            )));
        }
        Ok(())
    }
}
