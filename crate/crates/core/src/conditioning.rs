//! Pathwise updates that turn prior draws into posterior draws, and the exact
//! Gaussian moments used to check them.
//!
//! Every update has the form `f(·) + k(·, Z) v`, where `v` solves
//! `(K(Z, Z) + Λ) v = t − f(Z)` for some targets `t` and diagonal noise `Λ`.
//! Random terms (`ε`, `u`) are drawn once, when the update is built, so a
//! [`PosteriorPath`] is a fixed function.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{rows_of, Covariance, Kernel, KernelConfig};
use crate::linalg::{
    cg_solve, cholesky, pivoted_cholesky, psd_sqrt, solve_psd, symmetrize, CgReport,
    CholeskyFactor, IncrementalCholesky, Preconditioner, DEFAULT_CG_TOL, DEFAULT_PRECOND_RANK,
    JITTER_LADDER,
};
use crate::prior::{BasisRecord, FourierFeatureMap, PathBasis, PriorPath, SamplePath};

/// Observations `y` at rows of `x` with Gaussian noise variance `σ²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    noise_variance: f64,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, noise_variance: f64) -> Result<Self> {
        check_dim("observation count", x.nrows(), y.len())?;
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(Error::InvalidArgument(
                "noise variance must be finite and nonnegative".into(),
            ));
        }
        Ok(Dataset {
            x,
            y,
            noise_variance,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Mean and covariance of process values at a finite set of locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianMoments {
    /// Checks shapes and symmetry (relative `1e-10`), then symmetrizes.
    pub fn new(mean: DVector<f64>, mut covariance: DMatrix<f64>) -> Result<Self> {
        check_dim("covariance rows", mean.len(), covariance.nrows())?;
        check_dim("covariance columns", mean.len(), covariance.ncols())?;
        let scale = covariance.amax().max(f64::MIN_POSITIVE);
        let asym = (&covariance - covariance.transpose()).amax() / scale;
        if asym > 1e-10 {
            return Err(Error::Asymmetric(asym));
        }
        symmetrize(&mut covariance);
        Ok(GaussianMoments { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws `count` samples, one per row.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let root = psd_sqrt(&self.covariance)?;
        let z = DMatrix::from_fn(self.dim(), count, |_, _| StandardNormal.sample(rng));
        let mut out = (root * z).transpose();
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        Ok(out)
    }
}

/// How the linear systems of an update are solved.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum SolverChoice {
    #[default]
    DirectCholesky,
    ConjugateGradients {
        tol: f64,
        max_iter: usize,
        precond_rank: usize,
    },
}

impl SolverChoice {
    pub fn cg_default(n: usize) -> Self {
        SolverChoice::ConjugateGradients {
            tol: DEFAULT_CG_TOL,
            max_iter: 10 * n.max(10),
            precond_rank: DEFAULT_PRECOND_RANK,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            SolverChoice::DirectCholesky => Ok(()),
            SolverChoice::ConjugateGradients { tol, max_iter, .. } => {
                if !(*tol > 0.0) || *max_iter == 0 {
                    Err(Error::InvalidArgument(
                        "CG tolerance and iteration cap must be positive".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Inducing locations `Z` with a distribution over `u = f(Z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InducingModel {
    z: DMatrix<f64>,
    param: InducingParam,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InducingParam {
    /// `u ~ N(mean, covariance)`.
    Moments {
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
    },
    /// Pseudo-observations `ỹ` with per-point noise variances `σ̃²`.
    PseudoData {
        targets: DVector<f64>,
        noise: DVector<f64>,
    },
}

impl InducingModel {
    pub fn moments(
        z: DMatrix<f64>,
        mean: DVector<f64>,
        mut covariance: DMatrix<f64>,
    ) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "need at least one inducing location".into(),
            ));
        }
        check_dim("inducing mean", z.nrows(), mean.len())?;
        check_dim("inducing covariance rows", z.nrows(), covariance.nrows())?;
        check_dim("inducing covariance columns", z.nrows(), covariance.ncols())?;
        symmetrize(&mut covariance);
        // Fails on covariances that are not PSD.
        psd_sqrt(&covariance)?;
        Ok(InducingModel {
            z,
            param: InducingParam::Moments { mean, covariance },
        })
    }

    pub fn pseudo_data(
        z: DMatrix<f64>,
        targets: DVector<f64>,
        noise: DVector<f64>,
    ) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "need at least one inducing location".into(),
            ));
        }
        check_dim("pseudo-observations", z.nrows(), targets.len())?;
        check_dim("pseudo-noise", z.nrows(), noise.len())?;
        if noise.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(
                "pseudo-noise must be strictly positive".into(),
            ));
        }
        Ok(InducingModel {
            z,
            param: InducingParam::PseudoData { targets, noise },
        })
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn param(&self) -> &InducingParam {
        &self.param
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    /// Moments of `u` implied by either parameterization.
    ///
    /// For pseudo-data, `μ_u = K(K+Λ)⁻¹ỹ` and `Σ_u = K − K(K+Λ)⁻¹K`, which
    /// equals `(K⁻¹ + Λ⁻¹)⁻¹`.
    pub fn u_moments(&self, k: &Kernel) -> Result<GaussianMoments> {
        match &self.param {
            InducingParam::Moments { mean, covariance } => {
                GaussianMoments::new(mean.clone(), covariance.clone())
            }
            InducingParam::PseudoData { targets, noise } => {
                let data = Dataset {
                    x: self.z.clone(),
                    y: targets.clone(),
                    noise_variance: 0.0,
                };
                heteroscedastic_moments(k, k, &data, noise, &self.z)
            }
        }
    }
}

/// `a + Σ_ab Σ_bb⁻¹ (β − b)`.
pub fn matheron_finite(
    a_sample: &DVector<f64>,
    b_sample: &DVector<f64>,
    beta: &DVector<f64>,
    sigma_ab: &DMatrix<f64>,
    sigma_bb: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_dim("Σ_ab rows", a_sample.len(), sigma_ab.nrows())?;
    check_dim("Σ_ab columns", b_sample.len(), sigma_ab.ncols())?;
    check_dim("conditioning value", b_sample.len(), beta.len())?;
    let f = cholesky(sigma_bb, max_jitter(sigma_bb))?;
    Ok(a_sample + sigma_ab * f.solve_vec(&(beta - b_sample))?)
}

fn max_jitter(k: &DMatrix<f64>) -> f64 {
    JITTER_LADDER[JITTER_LADDER.len() - 1] * k.diagonal().mean().abs()
}

/// Exact moments of `f(X_*) | y` under the prior covariance `cov`.
pub fn posterior_moments<C: Covariance + ?Sized>(
    cov: &C,
    data: &Dataset,
    xs: &DMatrix<f64>,
) -> Result<GaussianMoments> {
    decoupled_moments(cov, cov, data, xs)
}

/// Moments of `f̃(X_*) + C_u(X_*, X)(C_u(X, X) + σ²I)⁻¹(y − f̃(X) − ε)` with
/// `f̃ ~ GP(0, C_p)`: the prior drawn under one covariance, the update built
/// from another.
///
/// With `A = (C_u + σ²I)⁻¹ C_u(X, X_*)` the covariance is
/// `C_p** − C_p*ₙ A − Aᵀ C_pₙ* + Aᵀ(C_pₙₙ + σ²I)A` and the mean is `Aᵀy`.
pub fn decoupled_moments<P, U>(
    prior_cov: &P,
    update_cov: &U,
    data: &Dataset,
    xs: &DMatrix<f64>,
) -> Result<GaussianMoments>
where
    P: Covariance + ?Sized,
    U: Covariance + ?Sized,
{
    let noise = DVector::from_element(data.len(), data.noise_variance);
    heteroscedastic_moments(prior_cov, update_cov, data, &noise, xs)
}

fn heteroscedastic_moments<P, U>(
    prior_cov: &P,
    update_cov: &U,
    data: &Dataset,
    noise: &DVector<f64>,
    xs: &DMatrix<f64>,
) -> Result<GaussianMoments>
where
    P: Covariance + ?Sized,
    U: Covariance + ?Sized,
{
    check_dim("test location columns", prior_cov.input_dim(), xs.ncols())?;
    let cp_ss = prior_cov.covariance_symmetric(xs)?;
    if data.is_empty() {
        return GaussianMoments::new(DVector::zeros(xs.nrows()), cp_ss);
    }
    check_dim(
        "training location columns",
        prior_cov.input_dim(),
        data.x.ncols(),
    )?;
    let mut ku = update_cov.covariance_symmetric(&data.x)?;
    for i in 0..data.len() {
        ku[(i, i)] += noise[i];
    }
    let f = cholesky(&ku, max_jitter(&ku))?;
    let a = solve_psd(&f, &update_cov.covariance(&data.x, xs)?)?;
    let mean = a.transpose() * &data.y;
    let mut cp_nn = prior_cov.covariance_symmetric(&data.x)?;
    for i in 0..data.len() {
        cp_nn[(i, i)] += noise[i];
    }
    let cp_sn = prior_cov.covariance(xs, &data.x)?;
    let cross = &cp_sn * &a;
    let mut cov = cp_ss - &cross - cross.transpose() + a.transpose() * cp_nn * &a;
    symmetrize(&mut cov);
    GaussianMoments::new(mean, cov)
}

/// Moments of the decoupled approximate posterior: a prior drawn from the
/// feature map's induced kernel `φφᵀ`, updated with the exact kernel.
pub fn decoupled_posterior_covariance(
    basis: &FourierFeatureMap,
    data: &Dataset,
    xs: &DMatrix<f64>,
) -> Result<GaussianMoments> {
    decoupled_moments(basis, basis.kernel(), data, xs)
}

enum SolverState {
    Direct(Arc<CholeskyFactor>),
    Cg {
        gram: DMatrix<f64>,
        precond: Option<Preconditioner>,
        tol: f64,
        max_iter: usize,
    },
}

/// The solve behind an update, prepared once and reused for many paths.
pub struct PathUpdate {
    kernel: Kernel,
    centers: Arc<DMatrix<f64>>,
    noise: DVector<f64>,
    state: SolverState,
    last_report: std::sync::Mutex<Option<CgReport>>,
}

fn check_distinct(x: &DMatrix<f64>, noise: &DVector<f64>) -> Result<()> {
    let rows: Vec<Vec<u64>> = x
        .row_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    let mut seen = std::collections::HashMap::new();
    for (i, r) in rows.iter().enumerate() {
        if let Some(&j) = seen.get(r) {
            let j: usize = j;
            if noise[i] == 0.0 || noise[j] == 0.0 {
                return Err(Error::DuplicateCenter(i));
            }
        } else {
            seen.insert(r.clone(), i);
        }
    }
    Ok(())
}

impl PathUpdate {
    /// Prepares solves against `K(centers, centers) + diag(noise)`.
    pub fn new(
        kernel: &Kernel,
        centers: DMatrix<f64>,
        noise: DVector<f64>,
        solver: &SolverChoice,
    ) -> Result<Self> {
        solver.validate()?;
        check_dim("center columns", kernel.dim(), centers.ncols())?;
        check_dim("noise entries", centers.nrows(), noise.len())?;
        if noise.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(
                "noise variances must be nonnegative".into(),
            ));
        }
        check_distinct(&centers, &noise)?;
        let mut gram = kernel.eval_symmetric(&centers)?;
        for i in 0..noise.len() {
            gram[(i, i)] += noise[i];
        }
        let state = match *solver {
            SolverChoice::DirectCholesky => {
                SolverState::Direct(Arc::new(cholesky(&gram, max_jitter(&gram))?))
            }
            SolverChoice::ConjugateGradients {
                tol,
                max_iter,
                precond_rank,
            } => {
                let precond = if precond_rank == 0 || gram.nrows() == 0 {
                    None
                } else {
                    let kernel_only = kernel.eval_symmetric(&centers)?;
                    let low = pivoted_cholesky(&kernel_only, precond_rank.min(gram.nrows()))?;
                    // A tiny floor keeps the preconditioner defined for noise-free systems.
                    let floor = 1e-10 * kernel.variance();
                    let diag = noise.map(|s| s.max(floor));
                    Some(Preconditioner::with_diagonal(&low, &diag)?)
                };
                SolverState::Cg {
                    gram,
                    precond,
                    tol,
                    max_iter,
                }
            }
        };
        Ok(PathUpdate {
            kernel: kernel.clone(),
            centers: Arc::new(centers),
            noise,
            state,
            last_report: std::sync::Mutex::new(None),
        })
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    pub fn noise(&self) -> &DVector<f64> {
        &self.noise
    }

    /// Report of the most recent CG solve, if the solver is iterative.
    pub fn last_cg_report(&self) -> Option<CgReport> {
        self.last_report.lock().expect("report lock").clone()
    }

    /// `(K + Λ)⁻¹ rhs`
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("right-hand side", self.centers.nrows(), rhs.len())?;
        match &self.state {
            SolverState::Direct(f) => f.solve_vec(rhs),
            SolverState::Cg {
                gram,
                precond,
                tol,
                max_iter,
            } => {
                let (v, report) = cg_solve(|p| gram * p, rhs, precond.as_ref(), *tol, *max_iter)?;
                let converged = report.converged;
                let (iterations, residual) = (report.iterations, report.final_residual_norm);
                *self.last_report.lock().expect("report lock") = Some(report);
                if !converged {
                    return Err(Error::NotConverged {
                        iterations,
                        residual,
                    });
                }
                Ok(v)
            }
        }
    }

    /// Column-wise `(K + Λ)⁻¹ rhs`, for updating many paths at once.
    pub fn solve_many(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("right-hand side rows", self.centers.nrows(), rhs.nrows())?;
        match &self.state {
            SolverState::Direct(f) => solve_psd(f, rhs),
            SolverState::Cg { .. } => {
                let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
                for c in 0..rhs.ncols() {
                    out.set_column(c, &self.solve(&rhs.column(c).into_owned())?);
                }
                Ok(out)
            }
        }
    }

    /// Builds `prior + k(·, Z)(K + Λ)⁻¹(targets − prior(Z))`.
    ///
    /// `draws` are the random terms already folded into `targets`; they are
    /// stored for reproducibility only.
    pub fn apply<P: SamplePath>(
        &self,
        prior: P,
        targets: DVector<f64>,
        draws: DVector<f64>,
    ) -> Result<PosteriorPath<P>> {
        check_dim("update targets", self.centers.nrows(), targets.len())?;
        check_dim("prior dimension", self.kernel.dim(), prior.dim())?;
        let at_centers = prior.eval(&self.centers)?;
        let residual = targets - at_centers;
        let coefficients = self.solve(&residual)?;
        let factor = match &self.state {
            SolverState::Direct(f) => Some(f.clone()),
            SolverState::Cg { .. } => None,
        };
        Ok(PosteriorPath {
            prior,
            kernel: self.kernel.clone(),
            centers: self.centers.clone(),
            coefficients,
            noise: self.noise.clone(),
            draws,
            residual,
            factor,
        })
    }
}

/// `f(·) + k(·, Z) v`, a prior path plus a canonical-basis update.
#[derive(Clone, Debug)]
pub struct PosteriorPath<P> {
    prior: P,
    kernel: Kernel,
    centers: Arc<DMatrix<f64>>,
    coefficients: DVector<f64>,
    noise: DVector<f64>,
    draws: DVector<f64>,
    residual: DVector<f64>,
    factor: Option<Arc<CholeskyFactor>>,
}

impl<P: SamplePath> PosteriorPath<P> {
    /// A path with no conditioning yet; the base case for [`rank1_update`].
    pub fn unconditioned(prior: P, kernel: &Kernel) -> Result<Self> {
        check_dim("prior dimension", kernel.dim(), prior.dim())?;
        Ok(PosteriorPath {
            prior,
            kernel: kernel.clone(),
            centers: Arc::new(DMatrix::zeros(0, kernel.dim())),
            coefficients: DVector::zeros(0),
            noise: DVector::zeros(0),
            draws: DVector::zeros(0),
            residual: DVector::zeros(0),
            factor: Some(Arc::new(cholesky(&DMatrix::zeros(0, 0), 0.0)?)),
        })
    }

    pub fn prior(&self) -> &P {
        &self.prior
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coefficients
    }

    /// Noise variances attached to each center.
    pub fn noise(&self) -> &DVector<f64> {
        &self.noise
    }

    /// The random terms drawn when the update was built.
    pub fn draws(&self) -> &DVector<f64> {
        &self.draws
    }

    /// `k(X, Z) v`
    pub fn update_term(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if self.centers.nrows() == 0 {
            return Ok(DVector::zeros(x.nrows()));
        }
        Ok(self.kernel.eval(x, &self.centers)? * &self.coefficients)
    }
}

impl<P: SamplePath> SamplePath for PosteriorPath<P> {
    fn dim(&self) -> usize {
        self.kernel.dim()
    }

    fn eval(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.prior.eval(x)? + self.update_term(x)?)
    }

    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.prior.gradient(point)?;
        let mut c = vec![0.0; self.dim()];
        for i in 0..self.centers.nrows() {
            for (j, cj) in c.iter_mut().enumerate() {
                *cj = self.centers[(i, j)];
            }
            let dk = self.kernel.gradient(point, &c)?;
            for (gj, dj) in g.iter_mut().zip(dk) {
                *gj += self.coefficients[i] * dj;
            }
        }
        Ok(g)
    }
}

/// Serialized form of a posterior path over a Fourier-feature prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub basis: BasisRecord,
    pub weights: Vec<f64>,
    pub kernel: KernelConfig,
    /// Row-major `n × dim`.
    pub centers: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub noise: Vec<f64>,
    pub draws: Vec<f64>,
    pub residual: Vec<f64>,
}

impl PosteriorPath<PriorPath> {
    pub fn to_record(&self) -> Result<PosteriorRecord> {
        let basis = match self.prior.basis() {
            PathBasis::Fourier(b) => BasisRecord::from((**b).clone()),
            PathBasis::KarhunenLoeve(_) => {
                return Err(Error::Unsupported(
                    "KL eigenfunctions are closures and cannot be serialized",
                ))
            }
        };
        if self.prior.has_mean() {
            return Err(Error::Unsupported("mean functions cannot be serialized"));
        }
        Ok(PosteriorRecord {
            basis,
            weights: self.prior.weights().iter().copied().collect(),
            kernel: self.kernel.config(),
            centers: rows_of(&self.centers),
            coefficients: self.coefficients.iter().copied().collect(),
            noise: self.noise.iter().copied().collect(),
            draws: self.draws.iter().copied().collect(),
            residual: self.residual.iter().copied().collect(),
        })
    }

    pub fn from_record(r: PosteriorRecord) -> Result<Self> {
        let basis = FourierFeatureMap::try_from(r.basis)?;
        let prior = PriorPath::new(PathBasis::from(basis), DVector::from_vec(r.weights))?;
        let kernel = Kernel::try_from(r.kernel)?;
        let d = kernel.dim();
        if !r.centers.len().is_multiple_of(d.max(1)) {
            return Err(Error::Serialization(
                "center data is not a whole number of rows".into(),
            ));
        }
        let n = r.centers.len() / d.max(1);
        check_dim("serialized coefficients", n, r.coefficients.len())?;
        check_dim("serialized noise", n, r.noise.len())?;
        check_dim("serialized residual", n, r.residual.len())?;
        Ok(PosteriorPath {
            prior,
            kernel,
            centers: Arc::new(DMatrix::from_row_slice(n, d, &r.centers)),
            coefficients: DVector::from_vec(r.coefficients),
            noise: DVector::from_vec(r.noise),
            draws: DVector::from_vec(r.draws),
            residual: DVector::from_vec(r.residual),
            factor: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&self.to_record()?).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: PosteriorRecord =
            serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        Self::from_record(r)
    }
}

fn normal_vector<R: Rng + ?Sized>(variances: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    variances.map(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v.sqrt() * z
    })
}

/// Noise-free update: `v = K⁻¹(y − f(X))`.
pub fn canonical_update<P: SamplePath>(
    path: P,
    k: &Kernel,
    data: &Dataset,
    solver: &SolverChoice,
) -> Result<PosteriorPath<P>> {
    if data.noise_variance != 0.0 {
        return Err(Error::InvalidArgument(
            "canonical update requires noise-free data".into(),
        ));
    }
    let upd = PathUpdate::new(k, data.x.clone(), DVector::zeros(data.len()), solver)?;
    upd.apply(path, data.y.clone(), DVector::zeros(0))
}

/// Noisy update: draws `ε ~ N(0, σ²I)` and sets `v = (K + σ²I)⁻¹(y − f(X) − ε)`.
pub fn gaussian_update<P: SamplePath, R: Rng + ?Sized>(
    path: P,
    k: &Kernel,
    data: &Dataset,
    solver: &SolverChoice,
    rng: &mut R,
) -> Result<PosteriorPath<P>> {
    if !(data.noise_variance > 0.0) {
        return Err(Error::InvalidArgument(
            "Gaussian update requires positive noise variance".into(),
        ));
    }
    let noise = DVector::from_element(data.len(), data.noise_variance);
    let eps = normal_vector(&noise, rng);
    gaussian_update_with_noise(path, k, data, solver, eps)
}

/// [`gaussian_update`] with caller-supplied noise draws.
pub fn gaussian_update_with_noise<P: SamplePath>(
    path: P,
    k: &Kernel,
    data: &Dataset,
    solver: &SolverChoice,
    eps: DVector<f64>,
) -> Result<PosteriorPath<P>> {
    check_dim("noise draws", data.len(), eps.len())?;
    let noise = DVector::from_element(data.len(), data.noise_variance);
    let upd = PathUpdate::new(k, data.x.clone(), noise, solver)?;
    upd.apply(path, &data.y - &eps, eps)
}

/// Draws `u ~ N(μ_u, Σ_u)` and sets `v = K(Z, Z)⁻¹(u − f(Z))`.
pub fn sparse_update<P: SamplePath, R: Rng + ?Sized>(
    path: P,
    k: &Kernel,
    inducing: &InducingModel,
    solver: &SolverChoice,
    rng: &mut R,
) -> Result<PosteriorPath<P>> {
    let InducingParam::Moments { mean, covariance } = &inducing.param else {
        return Err(Error::InvalidArgument(
            "sparse update expects the moment parameterization".into(),
        ));
    };
    let root = psd_sqrt(covariance)?;
    let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
    let u = mean + root * z;
    let upd = PathUpdate::new(
        k,
        inducing.z.clone(),
        DVector::zeros(inducing.len()),
        solver,
    )?;
    upd.apply(path, u.clone(), u)
}

/// Draws `ε̃ ~ N(0, Λ)` and sets `v = (K(Z, Z) + Λ)⁻¹(ỹ − f(Z) − ε̃)`.
pub fn pseudo_data_update<P: SamplePath, R: Rng + ?Sized>(
    path: P,
    k: &Kernel,
    inducing: &InducingModel,
    solver: &SolverChoice,
    rng: &mut R,
) -> Result<PosteriorPath<P>> {
    let InducingParam::PseudoData { targets, noise } = &inducing.param else {
        return Err(Error::InvalidArgument(
            "pseudo-data update expects the pseudo-data parameterization".into(),
        ));
    };
    let eps = normal_vector(noise, rng);
    let upd = PathUpdate::new(k, inducing.z.clone(), noise.clone(), solver)?;
    upd.apply(path, targets - &eps, eps)
}

/// Conditions on one more observation, drawing its noise when `noise > 0`.
pub fn rank1_update<P: SamplePath + Clone, R: Rng + ?Sized>(
    post: &PosteriorPath<P>,
    new_point: &[f64],
    new_value: f64,
    noise: f64,
    rng: &mut R,
) -> Result<PosteriorPath<P>> {
    let eps = if noise > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        noise.sqrt() * z
    } else {
        0.0
    };
    rank1_update_with_noise(post, new_point, new_value, noise, eps)
}

/// [`rank1_update`] with a caller-supplied noise draw.
///
/// Extends the stored factor by one row, so the cost is `O(n²)`.
pub fn rank1_update_with_noise<P: SamplePath + Clone>(
    post: &PosteriorPath<P>,
    new_point: &[f64],
    new_value: f64,
    noise: f64,
    eps: f64,
) -> Result<PosteriorPath<P>> {
    let d = post.dim();
    check_dim("new point", d, new_point.len())?;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(
            "noise variance must be nonnegative".into(),
        ));
    }
    let n = post.centers.nrows();
    let mut centers = DMatrix::zeros(n + 1, d);
    centers.view_mut((0, 0), (n, d)).copy_from(&*post.centers);
    for j in 0..d {
        centers[(n, j)] = new_point[j];
    }
    let mut noise_all = post.noise.clone().insert_row(n, noise);
    check_distinct(&centers, &noise_all)?;

    let factor = match &post.factor {
        Some(f) => f.clone(),
        None => {
            let mut gram = post.kernel.eval_symmetric(&post.centers)?;
            for i in 0..n {
                gram[(i, i)] += post.noise[i];
            }
            Arc::new(cholesky(&gram, max_jitter(&gram))?)
        }
    };
    let jitter = factor.jitter_used();
    let mut inc = IncrementalCholesky::from_factor(&factor);
    let x_new = DMatrix::from_row_slice(1, d, new_point);
    let cross = post.kernel.eval(&post.centers, &x_new)?;
    inc.push(cross.as_slice(), post.kernel.variance() + noise + jitter)?;
    let mut full = inc.to_factor();
    if jitter > 0.0 {
        full = CholeskyFactor::with_jitter(full, jitter);
    }
    noise_all[n] = noise;

    let at_new = post.prior.eval(&x_new)?[0];
    let residual = post
        .residual
        .clone()
        .insert_row(n, new_value - eps - at_new);
    let coefficients = full.solve_vec(&residual)?;
    let draws = if post.draws.len() == n {
        post.draws.clone().insert_row(n, eps)
    } else {
        post.draws.clone()
    };
    Ok(PosteriorPath {
        prior: post.prior.clone(),
        kernel: post.kernel.clone(),
        centers: Arc::new(centers),
        coefficients,
        noise: noise_all,
        draws,
        residual,
        factor: Some(Arc::new(full)),
    })
}

/// Bayesian linear-model update of the weights in the path's own basis:
/// `w' = w + Σ_w Φᵀ(Φ Σ_w Φᵀ + σ²I)⁻¹(y − Φw − ε)`.
pub struct WeightSpaceUpdate {
    basis: PathBasis,
    phi: DMatrix<f64>,
    /// `Σ_w Φᵀ`
    gain: DMatrix<f64>,
    factor: CholeskyFactor,
    data: Dataset,
}

impl WeightSpaceUpdate {
    pub fn new(basis: &PathBasis, data: &Dataset) -> Result<Self> {
        let l = basis.num_features();
        let phi = basis.features(&data.x)?;
        if data.noise_variance == 0.0 && data.len() > l {
            return Err(Error::SingularFeatureGram);
        }
        let sw = basis.weight_variances();
        let mut gain = phi.transpose();
        for (i, s) in sw.iter().enumerate() {
            gain.row_mut(i).scale_mut(*s);
        }
        let mut gram = &phi * &gain;
        for i in 0..data.len() {
            gram[(i, i)] += data.noise_variance;
        }
        symmetrize(&mut gram);
        let factor = cholesky(&gram, 0.0).map_err(|e| match e {
            Error::NotPositiveDefinite { .. } if data.noise_variance == 0.0 => {
                Error::SingularFeatureGram
            }
            other => other,
        })?;
        Ok(WeightSpaceUpdate {
            basis: basis.clone(),
            phi,
            gain,
            factor,
            data: data.clone(),
        })
    }

    pub fn apply(&self, path: &PriorPath, eps: &DVector<f64>) -> Result<PriorPath> {
        if !path.basis().same_as(&self.basis) {
            return Err(Error::InvalidArgument(
                "path basis differs from the prepared update".into(),
            ));
        }
        check_dim("noise draws", self.data.len(), eps.len())?;
        let mut at_x = &self.phi * path.weights();
        if path.has_mean() {
            at_x = path.eval(&self.data.x)?;
        }
        let r = &self.data.y - at_x - eps;
        let w = path.weights() + &self.gain * self.factor.solve_vec(&r)?;
        path.with_weights(w)
    }
}

/// Weight-space update of a finite-basis path; draws `ε ~ N(0, σ²I)` when
/// `σ² > 0`.
pub fn weight_space_update<R: Rng + ?Sized>(
    path: &PriorPath,
    data: &Dataset,
    rng: &mut R,
) -> Result<PriorPath> {
    let upd = WeightSpaceUpdate::new(path.basis(), data)?;
    let eps = normal_vector(&DVector::from_element(data.len(), data.noise_variance), rng);
    upd.apply(path, &eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use crate::prior::{build_rff_basis, sample_prior_path};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn se1() -> Kernel {
        Kernel::isotropic(KernelFamily::SquaredExponential, 1, 0.2, 1.0).unwrap()
    }

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn rff_path(k: &Kernel, l: usize, seed: u64) -> PriorPath {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = PathBasis::from(build_rff_basis(k, l, &mut rng).unwrap());
        sample_prior_path(&basis, 1, &mut rng).pop().unwrap()
    }

    #[test]
    fn matheron_zero_residual_and_independence() {
        let a = DVector::from_vec(vec![0.3, -1.0]);
        let b = DVector::from_vec(vec![0.5]);
        let sab = DMatrix::from_row_slice(2, 1, &[0.2, 0.1]);
        let sbb = DMatrix::from_element(1, 1, 2.0);
        assert_eq!(matheron_finite(&a, &b, &b, &sab, &sbb).unwrap(), a);
        let zero = DMatrix::zeros(2, 1);
        let beta = DVector::from_element(1, 7.0);
        assert_eq!(matheron_finite(&a, &b, &beta, &zero, &sbb).unwrap(), a);
        let shifted = matheron_finite(&a, &b, &beta, &sab, &sbb).unwrap();
        assert!((shifted[0] - (0.3 + 0.1 * 6.5)).abs() < 1e-14);
    }

    #[test]
    fn posterior_interpolates_noise_free_data() {
        let k = se1();
        let x = col(&[0.1, 0.4, 0.8]);
        let data = Dataset::new(x.clone(), DVector::from_vec(vec![1.0, -0.5, 0.25]), 0.0).unwrap();
        let m = posterior_moments(&k, &data, &x).unwrap();
        assert!((m.mean - data.y()).amax() < 1e-8);
        assert!(m.covariance.amax() < 1e-8);
    }

    #[test]
    fn empty_dataset_gives_prior() {
        let k = se1();
        let data = Dataset::new(DMatrix::zeros(0, 1), DVector::zeros(0), 0.0).unwrap();
        let xs = col(&[0.0, 0.5]);
        let m = posterior_moments(&k, &data, &xs).unwrap();
        assert_eq!(m.mean, DVector::zeros(2));
        assert_eq!(m.covariance, k.eval_symmetric(&xs).unwrap());
    }

    #[test]
    fn posterior_matches_dense_joint_conditioning() {
        // Oracle: partition the 3×3 joint covariance and apply the Schur
        // complement with an explicit inverse of the 2×2 block.
        let k = se1();
        let pts = [0.1, 0.35, 0.2];
        let joint = k.eval_symmetric(&col(&pts)).unwrap();
        let (a, b, c) = (joint[(0, 0)], joint[(0, 1)], joint[(1, 1)]);
        let det = a * c - b * b;
        let inv = DMatrix::from_row_slice(2, 2, &[c / det, -b / det, -b / det, a / det]);
        let kxs = DVector::from_vec(vec![joint[(0, 2)], joint[(1, 2)]]);
        let y = DVector::from_vec(vec![0.7, -0.2]);
        let mean = (kxs.transpose() * &inv * &y)[0];
        let var = joint[(2, 2)] - (kxs.transpose() * &inv * &kxs)[0];
        let data = Dataset::new(col(&pts[..2]), y, 0.0).unwrap();
        let m = posterior_moments(&k, &data, &col(&pts[2..])).unwrap();
        assert!((m.mean[0] - mean).abs() < 1e-10);
        assert!((m.covariance[(0, 0)] - var).abs() < 1e-10);
    }

    #[test]
    fn canonical_update_interpolates() {
        let k = Kernel::isotropic(KernelFamily::SquaredExponential, 1, 0.1, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // One random point per sixteenth of the interval.
        let x = DMatrix::from_fn(16, 1, |i, _| (i as f64 + rng.random::<f64>()) / 16.0);
        let y = DVector::from_fn(16, |_, _| rng.random::<f64>() - 0.5);
        let data = Dataset::new(x.clone(), y.clone(), 0.0).unwrap();
        let post = canonical_update(
            rff_path(&k, 256, 2),
            &k,
            &data,
            &SolverChoice::DirectCholesky,
        )
        .unwrap();
        assert!((post.eval(&x).unwrap() - y).amax() < 1e-6);
    }

    #[test]
    fn canonical_update_on_own_values_is_identity() {
        let k = se1();
        let path = rff_path(&k, 64, 3);
        let x = col(&[0.1, 0.5, 0.9]);
        let y = path.eval(&x).unwrap();
        let data = Dataset::new(x, y, 0.0).unwrap();
        let post =
            canonical_update(path.clone(), &k, &data, &SolverChoice::DirectCholesky).unwrap();
        assert!(post.coefficients().amax() < 1e-12);
        let grid = col(&[0.0, 0.33, 0.77]);
        assert!((post.eval(&grid).unwrap() - path.eval(&grid).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn canonical_update_rejects_duplicates_and_noise() {
        let k = se1();
        let data = Dataset::new(col(&[0.2, 0.2]), DVector::from_vec(vec![1.0, 1.0]), 0.0).unwrap();
        let r = canonical_update(rff_path(&k, 8, 4), &k, &data, &SolverChoice::DirectCholesky);
        assert!(matches!(r, Err(Error::DuplicateCenter(1))));
        let noisy = Dataset::new(col(&[0.2]), DVector::from_vec(vec![1.0]), 0.1).unwrap();
        assert!(canonical_update(
            rff_path(&k, 8, 4),
            &k,
            &noisy,
            &SolverChoice::DirectCholesky
        )
        .is_err());
    }

    #[test]
    fn huge_noise_leaves_prior_unchanged() {
        let k = se1();
        let path = rff_path(&k, 128, 5);
        let data = Dataset::new(
            col(&[0.1, 0.3, 0.6, 0.9]),
            DVector::from_element(4, 2.0),
            1e6,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let post = gaussian_update(
            path.clone(),
            &k,
            &data,
            &SolverChoice::DirectCholesky,
            &mut rng,
        )
        .unwrap();
        let grid = DMatrix::from_fn(101, 1, |i, _| i as f64 / 100.0);
        let dev = (post.eval(&grid).unwrap() - path.eval(&grid).unwrap()).amax();
        assert!(dev < 1e-2);
    }

    #[test]
    fn cg_and_cholesky_coefficients_agree() {
        let k = se1();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 128;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let data = Dataset::new(x, y, 1e-2).unwrap();
        let eps = DVector::from_fn(n, |_, _| {
            0.1 * {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            }
        });
        let path = rff_path(&k, 64, 8);
        let direct = gaussian_update_with_noise(
            path.clone(),
            &k,
            &data,
            &SolverChoice::DirectCholesky,
            eps.clone(),
        )
        .unwrap();
        let cg = SolverChoice::ConjugateGradients {
            tol: 1e-10,
            max_iter: 2000,
            precond_rank: 16,
        };
        let iter = gaussian_update_with_noise(path, &k, &data, &cg, eps).unwrap();
        let rel =
            (direct.coefficients() - iter.coefficients()).norm() / direct.coefficients().norm();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn cg_non_convergence_is_reported() {
        let k = se1();
        let x = DMatrix::from_fn(64, 1, |i, _| i as f64 / 63.0);
        let data = Dataset::new(x, DVector::from_element(64, 1.0), 1e-6).unwrap();
        let cg = SolverChoice::ConjugateGradients {
            tol: 1e-12,
            max_iter: 2,
            precond_rank: 0,
        };
        let r = gaussian_update_with_noise(rff_path(&k, 8, 9), &k, &data, &cg, DVector::zeros(64));
        assert!(matches!(r, Err(Error::NotConverged { .. })));
    }

    #[test]
    fn sparse_update_with_deterministic_u_interpolates() {
        let k = se1();
        let path = rff_path(&k, 128, 10);
        let z = col(&[0.2, 0.5, 0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let same = InducingModel::moments(z.clone(), path.eval(&z).unwrap(), DMatrix::zeros(3, 3))
            .unwrap();
        let post = sparse_update(
            path.clone(),
            &k,
            &same,
            &SolverChoice::DirectCholesky,
            &mut rng,
        )
        .unwrap();
        assert!(post.coefficients().amax() < 1e-10);
        let mu = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let q = InducingModel::moments(z.clone(), mu.clone(), DMatrix::zeros(3, 3)).unwrap();
        let post = sparse_update(path, &k, &q, &SolverChoice::DirectCholesky, &mut rng).unwrap();
        assert!((post.eval(&z).unwrap() - mu).amax() < 1e-6);
        assert!(pseudo_data_update(
            rff_path(&k, 8, 1),
            &k,
            &q,
            &SolverChoice::DirectCholesky,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn pseudo_data_with_huge_noise_is_prior() {
        let k = se1();
        let path = rff_path(&k, 128, 12);
        let z = col(&[0.2, 0.5, 0.7]);
        let q = InducingModel::pseudo_data(
            z,
            DVector::from_element(3, 1.0),
            DVector::from_element(3, 1e6),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let post = pseudo_data_update(
            path.clone(),
            &k,
            &q,
            &SolverChoice::DirectCholesky,
            &mut rng,
        )
        .unwrap();
        let grid = DMatrix::from_fn(101, 1, |i, _| i as f64 / 100.0);
        assert!((post.eval(&grid).unwrap() - path.eval(&grid).unwrap()).amax() < 1e-2);
        assert!(
            InducingModel::pseudo_data(col(&[0.1]), DVector::zeros(1), DVector::zeros(1)).is_err()
        );
    }

    #[test]
    fn pseudo_data_moments_match_information_form() {
        let k = se1();
        let z = col(&[0.1, 0.4, 0.6, 0.95]);
        let lam = DVector::from_vec(vec![0.1, 0.5, 0.2, 1.0]);
        let q = InducingModel::pseudo_data(
            z.clone(),
            DVector::from_vec(vec![1.0, 0.0, -1.0, 0.5]),
            lam.clone(),
        )
        .unwrap();
        let m = q.u_moments(&k).unwrap();
        let kzz = k.eval_symmetric(&z).unwrap();
        let info =
            kzz.clone().try_inverse().unwrap() + DMatrix::from_diagonal(&lam.map(|l| 1.0 / l));
        let sigma = info.try_inverse().unwrap();
        assert!((m.covariance - sigma).amax() < 1e-9);
    }

    #[test]
    fn pseudo_data_conditioning_beats_tiny_jitter() {
        let k = se1();
        let z = DMatrix::from_fn(64, 1, |i, _| i as f64 / 63.0);
        let kzz = k.eval_symmetric(&z).unwrap();
        let b = DVector::from_fn(64, |i, _| (i as f64).sin());
        let iters = |shift: f64| {
            let a = &kzz + DMatrix::identity(64, 64) * shift;
            cg_solve(|v| &a * v, &b, None, 1e-8, 10_000)
                .unwrap()
                .1
                .iterations
        };
        assert!(iters(1.0) <= iters(1e-6));
    }

    #[test]
    fn rank1_base_case_matches_canonical() {
        let k = se1();
        let path = rff_path(&k, 64, 14);
        let base = PosteriorPath::unconditioned(path.clone(), &k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let one = rank1_update(&base, &[0.3], 0.8, 0.0, &mut rng).unwrap();
        let data = Dataset::new(col(&[0.3]), DVector::from_element(1, 0.8), 0.0).unwrap();
        let batch = canonical_update(path, &k, &data, &SolverChoice::DirectCholesky).unwrap();
        assert!((one.coefficients() - batch.coefficients()).amax() < 1e-12);
    }

    #[test]
    fn rank1_sequence_matches_batch() {
        let k = se1();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let n = 16;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let eps = DVector::from_fn(n, |_, _| {
            0.05 * {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            }
        });
        let data = Dataset::new(x.clone(), y.clone(), 1e-2).unwrap();
        let path = rff_path(&k, 64, 17);
        let batch = gaussian_update_with_noise(
            path.clone(),
            &k,
            &data,
            &SolverChoice::DirectCholesky,
            eps.clone(),
        )
        .unwrap();
        let order = [5, 0, 12, 3, 9, 15, 1, 7, 10, 2, 14, 6, 11, 4, 13, 8];
        let mut post = PosteriorPath::unconditioned(path, &k).unwrap();
        for &i in &order {
            post = rank1_update_with_noise(&post, &[x[(i, 0)]], y[i], 1e-2, eps[i]).unwrap();
        }
        for (pos, &i) in order.iter().enumerate() {
            let diff = (post.coefficients()[pos] - batch.coefficients()[i]).abs();
            assert!(diff < 1e-8 * batch.coefficients().amax().max(1.0), "{diff}");
        }
    }

    #[test]
    fn rank1_on_own_value_changes_nothing() {
        let k = se1();
        let path = rff_path(&k, 64, 18);
        let data = Dataset::new(col(&[0.1, 0.7]), DVector::from_vec(vec![0.5, -0.5]), 0.0).unwrap();
        let post = canonical_update(path, &k, &data, &SolverChoice::DirectCholesky).unwrap();
        let at = post.eval(&col(&[0.4])).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let more = rank1_update(&post, &[0.4], at, 0.0, &mut rng).unwrap();
        let grid = DMatrix::from_fn(21, 1, |i, _| i as f64 / 20.0);
        assert!((more.eval(&grid).unwrap() - post.eval(&grid).unwrap()).amax() < 1e-8);
        assert!(matches!(
            rank1_update(&post, &[0.7], 0.0, 0.0, &mut rng),
            Err(Error::DuplicateCenter(2))
        ));
    }

    #[test]
    fn weight_space_fixed_point_and_interpolation() {
        let k = se1();
        let path = rff_path(&k, 32, 20);
        let x = col(&[0.2, 0.6]);
        let data = Dataset::new(x.clone(), path.eval(&x).unwrap(), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let same = weight_space_update(&path, &data, &mut rng).unwrap();
        assert!((same.weights() - path.weights()).amax() < 1e-10);
        let one = Dataset::new(col(&[0.45]), DVector::from_element(1, 1.3), 0.0).unwrap();
        let hit = weight_space_update(&path, &one, &mut rng).unwrap();
        assert!((hit.eval(&col(&[0.45])).unwrap()[0] - 1.3).abs() < 1e-10);
        let many = Dataset::new(
            DMatrix::from_fn(40, 1, |i, _| i as f64 / 40.0),
            DVector::zeros(40),
            0.0,
        )
        .unwrap();
        assert!(matches!(
            weight_space_update(&path, &many, &mut rng),
            Err(Error::SingularFeatureGram)
        ));
    }

    #[test]
    fn decoupled_mean_is_exact_posterior_mean() {
        let k = se1();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let basis = build_rff_basis(&k, 16, &mut rng).unwrap();
        let data = Dataset::new(
            col(&[0.1, 0.5, 0.8]),
            DVector::from_vec(vec![0.3, 1.0, -0.4]),
            0.0,
        )
        .unwrap();
        let xs = DMatrix::from_fn(10, 1, |i, _| i as f64 / 9.0);
        let dec = decoupled_posterior_covariance(&basis, &data, &xs).unwrap();
        let exact = posterior_moments(&k, &data, &xs).unwrap();
        assert!((dec.mean - exact.mean).amax() < 1e-8);
    }

    #[test]
    fn decoupled_with_exact_basis_is_exact() {
        // A KL basis of a rank-3 kernel reproduces that kernel exactly.
        use crate::prior::{BasisFn, KlBasis};
        let fs: Vec<BasisFn> = (0..3)
            .map(|i| -> BasisFn { Arc::new(move |x: &[f64]| (x[0] * (i + 1) as f64).cos()) })
            .collect();
        let kl = KlBasis::new(1, fs, vec![1.0, 0.5, 0.25]).unwrap();
        let data =
            Dataset::new(col(&[0.1, 0.9]), DVector::from_vec(vec![0.3, -0.4]), 0.05).unwrap();
        let xs = col(&[0.0, 0.4, 0.7]);
        let dec = decoupled_moments(&kl, &kl, &data, &xs).unwrap();
        let exact = posterior_moments(&kl, &data, &xs).unwrap();
        assert!((dec.covariance - exact.covariance).amax() < 1e-12);
    }

    #[test]
    fn delta_prior_variance_bounded_below() {
        let delta = Kernel::isotropic(KernelFamily::KroneckerDelta, 1, 1.0, 1.0).unwrap();
        let k = se1();
        let data = Dataset::new(col(&[0.1, 0.3, 0.5]), DVector::zeros(3), 0.0).unwrap();
        let xs = DMatrix::from_fn(17, 1, |i, _| 0.02 + i as f64 / 16.5);
        let m = decoupled_moments(&delta, &k, &data, &xs).unwrap();
        let kxx = k.eval_symmetric(data.x()).unwrap();
        let kinv = kxx.try_inverse().unwrap();
        let ksn = k.eval(&xs, data.x()).unwrap();
        let closed = DMatrix::identity(17, 17) + &ksn * &kinv * &kinv * ksn.transpose();
        assert!((&m.covariance - &closed).amax() < 1e-6 * closed.amax());
        assert!(m.covariance.diagonal().iter().all(|v| *v >= 1.0 - 1e-10));
    }

    #[test]
    fn posterior_path_round_trips_through_json() {
        let k = se1();
        let data = Dataset::new(col(&[0.1, 0.5]), DVector::from_vec(vec![0.3, 1.0]), 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let post = gaussian_update(
            rff_path(&k, 16, 24),
            &k,
            &data,
            &SolverChoice::DirectCholesky,
            &mut rng,
        )
        .unwrap();
        let back = PosteriorPath::<PriorPath>::from_json(&post.to_json().unwrap()).unwrap();
        let grid = DMatrix::from_fn(9, 1, |i, _| i as f64 / 8.0);
        assert_eq!(back.eval(&grid).unwrap(), post.eval(&grid).unwrap());
        assert_eq!(back.draws(), post.draws());
    }

    #[test]
    fn evaluation_consumes_no_randomness() {
        let k = se1();
        let data = Dataset::new(col(&[0.1, 0.5]), DVector::from_vec(vec![0.3, 1.0]), 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let post = gaussian_update(
            rff_path(&k, 16, 26),
            &k,
            &data,
            &SolverChoice::DirectCholesky,
            &mut rng,
        )
        .unwrap();
        let grid = col(&[0.25, 0.75]);
        assert_eq!(post.eval(&grid).unwrap(), post.eval(&grid).unwrap());
    }

    #[test]
    fn posterior_gradient_matches_finite_differences() {
        let k = Kernel::new(KernelFamily::Matern52, vec![0.3, 0.4], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let basis = PathBasis::from(build_rff_basis(&k, 64, &mut rng).unwrap());
        let path = sample_prior_path(&basis, 1, &mut rng).pop().unwrap();
        let x = DMatrix::from_fn(5, 2, |_, _| rng.random::<f64>());
        let data = Dataset::new(x, DVector::from_fn(5, |_, _| rng.random::<f64>()), 1e-3).unwrap();
        let post =
            gaussian_update(path, &k, &data, &SolverChoice::DirectCholesky, &mut rng).unwrap();
        let p = [0.37, 0.61];
        let g = post.gradient(&p).unwrap();
        for j in 0..2 {
            let h = 1e-6;
            let (mut a, mut b) = (p, p);
            a[j] += h;
            b[j] -= h;
            let fa = post.eval(&DMatrix::from_row_slice(1, 2, &a)).unwrap()[0];
            let fb = post.eval(&DMatrix::from_row_slice(1, 2, &b)).unwrap()[0];
            assert!((g[j] - (fa - fb) / (2.0 * h)).abs() < 1e-5);
        }
    }
}
