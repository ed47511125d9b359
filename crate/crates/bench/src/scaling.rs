//! Wall-time scaling of pathwise evaluation versus location-scale sampling
//! in the number of test locations.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pathwise_core::conditioning::{
    gaussian_update, posterior_moments, Dataset, PosteriorPath, SolverChoice,
};
use pathwise_core::linalg::cholesky;
use pathwise_core::prior::{
    build_rff_basis, sample_exact, sample_prior_path, PathBasis, PriorPath, SamplePath,
};
use pathwise_core::Kernel;

use crate::error::Result;

/// A fixed regression problem shared by both timings.
pub struct ScalingProblem {
    pub kernel: Kernel,
    pub data: Dataset,
    pub path: PosteriorPath<PriorPath>,
}

impl ScalingProblem {
    pub fn new(
        kernel: Kernel,
        n_train: usize,
        num_features: usize,
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = kernel.dim();
        let x = DMatrix::from_fn(n_train, d, |_, _| rng.random::<f64>());
        let f = sample_exact(&kernel, &x, 1, rng)?.row(0).transpose();
        let sd = noise.sqrt();
        let y = DVector::from_fn(n_train, |i, _| {
            f[i] + sd * Distribution::<f64>::sample(&StandardNormal, rng)
        });
        let data = Dataset::new(x, y, noise)?;
        let basis: PathBasis = build_rff_basis(&kernel, num_features, rng)?.into();
        let prior = sample_prior_path(&basis, 1, rng).pop().expect("one path");
        let path = gaussian_update(prior, &kernel, &data, &SolverChoice::DirectCholesky, rng)?;
        Ok(ScalingProblem { kernel, data, path })
    }

    fn points(&self, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, self.kernel.dim(), |_, _| rng.random::<f64>())
    }

    /// Seconds to evaluate the posterior path at `n` new points (best of
    /// `reps`).
    pub fn time_pathwise(&self, n: usize, reps: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        let xs = self.points(n, rng);
        let mut best = f64::INFINITY;
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            let v = self.path.eval(&xs)?;
            best = best.min(t.elapsed().as_secs_f64());
            std::hint::black_box(v);
        }
        Ok(best)
    }

    /// Seconds for one joint posterior draw at `n` new points via the
    /// posterior covariance and its Cholesky factor (best of `reps`).
    pub fn time_location_scale(&self, n: usize, reps: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        let xs = self.points(n, rng);
        let mut best = f64::INFINITY;
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            let m = posterior_moments(&self.kernel, &self.data, &xs)?;
            let jitter = 1e-6 * m.covariance.diagonal().mean().abs();
            let f = cholesky(&m.covariance, jitter)?;
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
            let v = &m.mean + f.l() * z;
            best = best.min(t.elapsed().as_secs_f64());
            std::hint::black_box(v);
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::stream;
    use pathwise_core::KernelFamily;

    #[test]
    fn timings_are_positive() {
        let mut rng = stream(1, &[]);
        let k = Kernel::isotropic(KernelFamily::SquaredExponential, 1, 0.2, 1.0).unwrap();
        let p = ScalingProblem::new(k, 8, 32, 1e-2, &mut rng).unwrap();
        assert!(p.time_pathwise(64, 2, &mut rng).unwrap() > 0.0);
        assert!(p.time_location_scale(64, 1, &mut rng).unwrap() > 0.0);
    }
}
