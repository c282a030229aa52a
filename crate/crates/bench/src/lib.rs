//! Fixtures shared by the benchmarks.

use drlogit_core::simulate::Dgp;
use drlogit_core::{Dataset, DgpSpec, NuisancePredictions};

/// A draw from the standard conditional Gaussian design.
pub fn standard_data(n: usize, p: usize, seed: u64) -> Dataset {
    Dgp::new(&DgpSpec::standard(n, p))
        .and_then(|d| d.sample(n, seed))
        .expect("standard design")
}

/// A draw together with the true nuisance values.
pub fn with_oracle(n: usize, p: usize, seed: u64) -> (Dataset, NuisancePredictions) {
    let dgp = Dgp::new(&DgpSpec::standard(n, p)).expect("standard design");
    let data = dgp.sample(n, seed).expect("sample");
    let preds = dgp.truth().oracle(&data).expect("oracle");
    (data, preds)
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixtures_have_requested_shape() {
        let d = super::standard_data(40, 3, 1);
        assert_eq!((d.n(), d.p()), (40, 3));
        let (d, p) = super::with_oracle(30, 2, 2);
        assert_eq!(p.len(), d.n());
    }
}
