//! Distances and error measures for grading approximate samplers.

use nalgebra::{DMatrix, DVector};

use crate::conditioning::GaussianMoments;
use crate::error::{check_dim, Error, Result};
use crate::kernels::Kernel;
use crate::linalg::psd_sqrt;
use crate::prior::FourierFeatureMap;

/// Default Sinkhorn regularization, relative to the mean pairwise cost.
pub const DEFAULT_SINKHORN_REG: f64 = 1e-2;

/// `S` draws (rows) of process values at `n` locations.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    values: DMatrix<f64>,
    locations: DMatrix<f64>,
}

impl SampleBatch {
    pub fn new(values: DMatrix<f64>, locations: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::InvalidArgument(
                "a sample batch needs at least two draws".into(),
            ));
        }
        check_dim("batch locations", values.ncols(), locations.nrows())?;
        Ok(SampleBatch { values, locations })
    }

    /// A batch of points with no associated locations (e.g. SDE states).
    pub fn from_points(values: DMatrix<f64>) -> Result<Self> {
        let n = values.ncols();
        Self::new(values, DMatrix::zeros(n, 0))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn locations(&self) -> &DMatrix<f64> {
        &self.locations
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
}

/// Sample mean and unbiased sample covariance.
pub fn empirical_moments(batch: &SampleBatch) -> GaussianMoments {
    let s = batch.values.nrows() as f64;
    let mean = batch.values.row_mean().transpose();
    let mut centered = batch.values.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (s - 1.0);
    GaussianMoments::new(mean, cov).expect("Gram matrices are symmetric")
}

/// Worst standardized errors of empirical moments against a target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentErrors {
    pub mean: f64,
    pub covariance: f64,
}

/// Entrywise `|estimate − target| / stderr`, using `√(Σᵢᵢ/S)` for means and
/// the Gaussian value `√((ΣᵢᵢΣⱼⱼ + Σᵢⱼ²)/S)` for covariances.
///
/// Variances below `1e-10` of the largest are floored so that degenerate
/// entries are compared against a tiny but nonzero error scale.
pub fn standardized_errors(batch: &SampleBatch, target: &GaussianMoments) -> Result<MomentErrors> {
    check_dim("target dimension", batch.values.ncols(), target.dim())?;
    let est = empirical_moments(batch);
    let s = batch.len() as f64;
    let t = &target.covariance;
    let floor = 1e-10 * t.diagonal().amax().max(f64::MIN_POSITIVE);
    let var = t.diagonal().map(|v| v.max(floor));
    let n = target.dim();
    let mut mean_z = 0.0f64;
    let mut cov_z = 0.0f64;
    for i in 0..n {
        mean_z = mean_z.max((est.mean[i] - target.mean[i]).abs() / (var[i] / s).sqrt());
        for j in i..n {
            let se = ((var[i] * var[j] + t[(i, j)].powi(2)) / s).sqrt();
            cov_z = cov_z.max((est.covariance[(i, j)] - t[(i, j)]).abs() / se);
        }
    }
    Ok(MomentErrors {
        mean: mean_z,
        covariance: cov_z,
    })
}

/// 2-Wasserstein distance between Gaussians (Bures formula).
///
/// Squared distances below a round-off floor proportional to the traces
/// are reported as zero.
pub fn w2_gaussian(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    check_dim("moment dimension", a.dim(), b.dim())?;
    let root_b = psd_sqrt(&b.covariance)?;
    let mut inner = &root_b * &a.covariance * &root_b;
    crate::linalg::symmetrize(&mut inner);
    let cross = psd_sqrt(&inner)?.trace();
    let ta = a.covariance.trace();
    let tb = b.covariance.trace();
    let d2 = (&a.mean - &b.mean).norm_squared() + ta + tb - 2.0 * cross;
    let floor = 64.0 * f64::EPSILON * (ta.abs() + tb.abs());
    if d2 <= floor {
        Ok(0.0)
    } else {
        Ok(d2.sqrt())
    }
}

fn squared_distances(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let na: DVector<f64> =
        DVector::from_iterator(a.nrows(), a.row_iter().map(|r| r.norm_squared()));
    let nb: DVector<f64> =
        DVector::from_iterator(b.nrows(), b.row_iter().map(|r| r.norm_squared()));
    let mut c = a * b.transpose() * -2.0;
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            c[(i, j)] = (c[(i, j)] + na[i] + nb[j]).max(0.0);
        }
    }
    c
}

/// Entropic optimal transport between two point clouds with uniform weights.
///
/// The regularization is `reg` times the mean squared pairwise distance.
/// Returns the square root of the transport cost `⟨P, C⟩` of the entropic
/// plan `P`. `max_iter` bounds the total number of scaling iterations.
///
/// Scaling iterations run on a kernel into which the dual potentials are
/// periodically absorbed, and the regularization is lowered geometrically
/// to its target, so small `reg` stays stable.
pub fn sinkhorn_distance(
    a: &SampleBatch,
    b: &SampleBatch,
    reg: f64,
    max_iter: usize,
) -> Result<f64> {
    check_dim("point dimension", a.values.ncols(), b.values.ncols())?;
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(Error::InvalidArgument(
            "Sinkhorn regularization must be positive".into(),
        ));
    }
    // Symmetric by construction: always transport the lexicographically
    // smaller batch onto the larger one.
    let (x, y) = if batch_order(&a.values, &b.values) {
        (&a.values, &b.values)
    } else {
        (&b.values, &a.values)
    };
    let c = squared_distances(x, y);
    let (n, m) = c.shape();
    let mean_cost = c.mean();
    if mean_cost == 0.0 {
        return Ok(0.0);
    }
    let target_eps = reg * mean_cost;
    let wa = 1.0 / n as f64;
    let wb = 1.0 / m as f64;
    let tol = 1e-4;
    let mut f = DVector::<f64>::zeros(n);
    let mut g = DVector::<f64>::zeros(m);
    let mut eps = mean_cost.max(target_eps);
    let mut iterations = 0usize;
    let mut kernel = DMatrix::<f64>::zeros(n, m);
    let build = |kernel: &mut DMatrix<f64>, f: &DVector<f64>, g: &DVector<f64>, eps: f64| {
        for j in 0..m {
            let cj = c.column(j);
            let mut kj = kernel.column_mut(j);
            for i in 0..n {
                kj[i] = ((f[i] + g[j] - cj[i]) / eps).exp();
            }
        }
    };
    loop {
        let last_stage = eps <= target_eps;
        build(&mut kernel, &f, &g, eps);
        let mut u = DVector::<f64>::from_element(n, 1.0);
        let mut v = DVector::<f64>::from_element(m, 1.0);
        let mut stage_iter = 0;
        loop {
            let kv = &kernel * &v;
            // L1 row-marginal error; column marginals are exact after each
            // v-update.
            let err: f64 = (0..n).map(|i| (u[i] * kv[i] * wb - 1.0).abs()).sum::<f64>() * wa;
            if stage_iter > 0 && err < tol {
                break;
            }
            if iterations >= max_iter {
                return Err(Error::NotConverged {
                    iterations,
                    residual: err,
                });
            }
            if !last_stage && stage_iter >= 50 {
                break;
            }
            for i in 0..n {
                u[i] = 1.0 / (wb * kv[i]).max(f64::MIN_POSITIVE);
            }
            let ku = kernel.tr_mul(&u);
            for j in 0..m {
                v[j] = 1.0 / (wa * ku[j]).max(f64::MIN_POSITIVE);
            }
            iterations += 1;
            stage_iter += 1;
            let big = u
                .iter()
                .chain(v.iter())
                .any(|s| !(1e-100..1e100).contains(s));
            if big {
                absorb(&mut f, &mut g, &mut u, &mut v, eps);
                build(&mut kernel, &f, &g, eps);
            }
        }
        absorb(&mut f, &mut g, &mut u, &mut v, eps);
        if last_stage {
            break;
        }
        eps = (eps * 0.5).max(target_eps);
    }
    build(&mut kernel, &f, &g, eps);
    let cost = kernel.component_mul(&c).sum() * wa * wb;
    Ok(cost.max(0.0).sqrt())
}

fn absorb(
    f: &mut DVector<f64>,
    g: &mut DVector<f64>,
    u: &mut DVector<f64>,
    v: &mut DVector<f64>,
    eps: f64,
) {
    for (fi, ui) in f.iter_mut().zip(u.iter_mut()) {
        *fi += eps * ui.ln();
        *ui = 1.0;
    }
    for (gj, vj) in g.iter_mut().zip(v.iter_mut()) {
        *gj += eps * vj.ln();
        *vj = 1.0;
    }
}

fn batch_order(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    if a.nrows() != b.nrows() {
        return a.nrows() < b.nrows();
    }
    for (x, y) in a.iter().zip(b.iter()) {
        if x != y {
            return x < y;
        }
    }
    true
}

/// `max |φ(x)ᵀφ(x') − k(x, x')|` over all pairs of grid points.
pub fn kernel_sup_error(k: &Kernel, basis: &FourierFeatureMap, grid: &DMatrix<f64>) -> Result<f64> {
    if grid.nrows() == 0 {
        return Err(Error::InvalidArgument("grid must be nonempty".into()));
    }
    check_dim("basis dimension", k.dim(), basis.dim())?;
    let phi = basis.features(grid)?;
    let approx = &phi * phi.transpose();
    Ok((approx - k.eval_symmetric(grid)?).amax())
}
