//! Fixtures shared by the criterion benches.

use ndarray::{Array1, Array2};
use rand::Rng;

use inner_core::nn::{InitScheme, NetworkSpec};
use inner_core::rng::seeded;
use inner_core::{Cohort, InnerModel};

/// Uniform covariates in [-1, 1], pain in [0, 10], fair-coin labels.
pub fn random_cohort(n: usize, p: usize, seed: u64) -> Cohort {
    let mut r = seeded(seed);
    let z = Array2::from_shape_simple_fn((n, p), || r.random_range(-1.0..1.0));
    let x = Array1::from_shape_simple_fn(n, || r.random_range(0.0..10.0));
    let y = (0..n).map(|_| u8::from(r.random_bool(0.5))).collect();
    Cohort::new(z, x, Some(y)).expect("valid cohort")
}

pub fn relu_model(p: usize, hidden: &[usize], seed: u64) -> InnerModel {
    InnerModel::init(&NetworkSpec::relu_regressor(p, hidden), InitScheme::default(), seed).expect("valid model")
}

/// Scores on a coarse grid, so ties are common, with matching labels.
pub fn tied_scores(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut r = seeded(seed);
    let scores = (0..n).map(|_| f64::from(r.random_range(0..1000u32)) / 1000.0).collect();
    let labels = (0..n).map(|_| u8::from(r.random_bool(0.3))).collect();
    (scores, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(random_cohort(20, 3, 1), random_cohort(20, 3, 1));
        assert_eq!(tied_scores(50, 2), tied_scores(50, 2));
        assert_eq!(relu_model(3, &[4], 5).flat_params(), relu_model(3, &[4], 5).flat_params());
    }
}
