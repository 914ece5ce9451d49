//! Convex tasks whose optimum is known to high precision.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, ExampleStore, Targets};
use crate::fl::model::{logistic_hessian, LossKind};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Quadratic,
    Logistic,
}

/// A store, its loss and the minimizer of the full-data loss.
#[derive(Debug, Clone)]
pub struct SynthTask {
    pub store: ExampleStore,
    pub loss: LossKind,
    pub optimum: Vec<f64>,
    pub optimal_loss: f64,
}

impl SynthTask {
    /// Least-squares task over an existing store with real targets.
    pub fn quadratic_from_store(store: ExampleStore) -> Result<Self, DataError> {
        let Targets::Real(y) = &store.targets else {
            return Err(DataError::Invalid("quadratic task needs real targets".into()));
        };
        let (n, d) = store.features.dim();
        let x = DMatrix::from_row_iterator(n, d, store.features.iter().copied());
        let y = DVector::from_column_slice(y);
        let gram = x.transpose() * &x;
        let chol = gram.cholesky().ok_or(DataError::Singular)?;
        // reject numerically rank-deficient designs too
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v.abs()), b.max(v.abs())));
        if !(lo > hi * 1e-7) {
            return Err(DataError::Singular);
        }
        let optimum: Vec<f64> = chol.solve(&(x.transpose() * y)).iter().copied().collect();
        Ok(Self::finish(store, LossKind::Quadratic, optimum))
    }

    fn finish(store: ExampleStore, loss: LossKind, optimum: Vec<f64>) -> Self {
        let optimal_loss = loss.evaluate(&optimum, &store).loss;
        SynthTask { store, loss, optimum, optimal_loss }
    }

    /// `F(w) - F(w*)` on the full store.
    pub fn gap(&self, params: &[f64]) -> f64 {
        self.loss.evaluate(params, &self.store).loss - self.optimal_loss
    }
}

/// Least-squares task `0.5 |Xw - y|^2 / n` whose Hessian `X'X/n` has
/// eigenvalues spaced evenly on `[1/conditioning, 1]`.
pub fn synth_quadratic(n: usize, dim: usize, conditioning: f64, noise: f64, seed: u64) -> Result<SynthTask, DataError> {
    if dim == 0 || n < dim {
        return Err(DataError::Invalid(format!("need n >= dim >= 1, got n = {n}, dim = {dim}")));
    }
    if !(conditioning >= 1.0) || !conditioning.is_finite() {
        return Err(DataError::Invalid(format!("conditioning must be finite and >= 1, got {conditioning}")));
    }
    let mut rng = rng::stream(seed, Purpose::Synthetic, 0, 0);
    let mut gauss = |r, c| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u = gauss(n, dim).qr().q();
    let v = gauss(dim, dim).qr().q();
    let spectrum = DVector::from_fn(dim, |i, _| {
        let t = if dim == 1 { 1.0 } else { i as f64 / (dim - 1) as f64 };
        let lambda = 1.0 / conditioning + t * (1.0 - 1.0 / conditioning);
        (n as f64 * lambda).sqrt()
    });
    let x = u * DMatrix::from_diagonal(&spectrum) * v.transpose();
    let truth = gauss(dim, 1);
    let eps = gauss(n, 1) * noise;
    let y = &x * truth + eps;
    let features = Array2::from_shape_fn((n, dim), |(i, j)| x[(i, j)]);
    let store = ExampleStore::new(features, Targets::Real(y.iter().copied().collect()))?;
    SynthTask::quadratic_from_store(store)
}

/// L2-regularized logistic regression on Gaussian features with labels
/// drawn from a logistic model.
pub fn synth_logistic(n: usize, dim: usize, reg: f64, seed: u64) -> Result<SynthTask, DataError> {
    if dim == 0 || n == 0 {
        return Err(DataError::Invalid("empty logistic task".into()));
    }
    if !(reg > 0.0) {
        return Err(DataError::Invalid(format!("regularization must be positive, got {reg}")));
    }
    let mut rng = rng::stream(seed, Purpose::Synthetic, 0, 1);
    let features = Array2::from_shape_simple_fn((n, dim), || rng.sample::<f64, _>(StandardNormal));
    let truth = Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
    let labels = features
        .dot(&truth)
        .iter()
        .map(|z| u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-z).exp())))
        .collect();
    let store = ExampleStore::new(features, Targets::Labels { labels, classes: 2 })?;
    let loss = LossKind::Logistic { reg };
    let optimum = logistic_optimum(&store, reg, &vec![0.0; dim])?;
    Ok(SynthTask::finish(store, loss, optimum))
}

/// Damped Newton iteration to full-gradient norm below `1e-10`.
pub fn logistic_optimum(store: &ExampleStore, reg: f64, start: &[f64]) -> Result<Vec<f64>, DataError> {
    let loss = LossKind::Logistic { reg };
    let all: Vec<usize> = (0..store.len()).collect();
    let mut w = start.to_vec();
    for _ in 0..200 {
        let (f, g) = loss.loss_grad(&w, store, &all);
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-10 {
            return Ok(w);
        }
        let h = logistic_hessian(&w, store, reg);
        let d = h.nrows();
        let h = DMatrix::from_row_iterator(d, d, h.iter().copied());
        let step = h
            .cholesky()
            .ok_or(DataError::Singular)?
            .solve(&DVector::from_column_slice(&g));
        let slope: f64 = -g.iter().zip(step.iter()).map(|(a, b)| a * b).sum::<f64>();
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = w.iter().zip(step.iter()).map(|(a, b)| a - t * b).collect();
            let ft = loss.loss_grad(&trial, store, &all).0;
            if ft <= f + 1e-4 * t * slope || t < 1e-12 {
                w = trial;
                break;
            }
            t *= 0.5;
        }
    }
    Err(DataError::Invalid("Newton iteration did not reach gradient norm 1e-10".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;

    #[test]
    fn identity_design_with_zero_targets() {
        let store = ExampleStore::new(Array2::eye(3), Targets::Real(vec![0.0; 3])).unwrap();
        let task = SynthTask::quadratic_from_store(store).unwrap();
        assert_eq!(task.optimum, vec![0.0; 3]);
        let w0 = [1.0, 2.0, -2.0];
        // 0.5 |w|^2 / n with n = 3
        assert_relative_eq!(task.gap(&w0), 0.5 * 9.0 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn constructed_spectrum_has_requested_conditioning() {
        let task = synth_quadratic(200, 12, 10.0, 0.1, 4).unwrap();
        let (n, d) = task.store.features.dim();
        let x = DMatrix::from_row_iterator(n, d, task.store.features.iter().copied());
        let eig = SymmetricEigen::new(x.transpose() * x / n as f64).eigenvalues;
        let max = eig.max();
        let min = eig.min();
        assert_relative_eq!(max, 1.0, max_relative = 1e-10);
        assert_relative_eq!(max / min, 10.0, max_relative = 1e-10);
    }

    #[test]
    fn quadratic_optimum_zeroes_gradient() {
        let task = synth_quadratic(80, 6, 5.0, 0.3, 1).unwrap();
        let all: Vec<usize> = (0..80).collect();
        let g = task.loss.loss_grad(&task.optimum, &task.store, &all).1;
        assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn rank_deficient_design_is_singular() {
        let x = ndarray::array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let store = ExampleStore::new(x, Targets::Real(vec![1.0, 0.0, 1.0])).unwrap();
        assert!(matches!(SynthTask::quadratic_from_store(store), Err(DataError::Singular)));
    }

    #[test]
    fn logistic_optimum_is_start_independent() {
        let task = synth_logistic(300, 5, 0.01, 3).unwrap();
        let other = logistic_optimum(&task.store, 0.01, &[3.0, -2.0, 1.0, 0.5, -4.0]).unwrap();
        for (a, b) in task.optimum.iter().zip(&other) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
