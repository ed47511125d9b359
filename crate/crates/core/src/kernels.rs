//! Stationary covariance functions, their spectral densities, and frequency
//! sampling for random Fourier features.
//!
//! All spectral quantities use the Fourier pair
//! `k(x - x') = ∫ exp(2πi ωᵀ(x - x')) ρ(ω) dω`, so that a frequency drawn from
//! `ρ / σ²` enters a feature as `cos(2π ωᵀx + τ)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Matern12,
    Matern32,
    Matern52,
    KroneckerDelta,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::SquaredExponential => "squared_exponential",
            KernelFamily::Matern12 => "matern12",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Matern52 => "matern52",
            KernelFamily::KroneckerDelta => "kronecker_delta",
        }
    }

    /// Matérn smoothness, or `None` for families that are not Matérn.
    pub fn smoothness(self) -> Option<f64> {
        match self {
            KernelFamily::Matern12 => Some(0.5),
            KernelFamily::Matern32 => Some(1.5),
            KernelFamily::Matern52 => Some(2.5),
            _ => None,
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "squared_exponential" | "se" | "rbf" => Ok(KernelFamily::SquaredExponential),
            "matern12" | "matern_12" | "matern_1_2" => Ok(KernelFamily::Matern12),
            "matern32" | "matern_32" | "matern_3_2" => Ok(KernelFamily::Matern32),
            "matern52" | "matern_52" | "matern_5_2" => Ok(KernelFamily::Matern52),
            "kronecker_delta" | "delta" => Ok(KernelFamily::KroneckerDelta),
            other => Err(Error::InvalidArgument(format!(
                "unknown kernel family `{other}`"
            ))),
        }
    }
}

/// Plain config record for a kernel: `{family, lengthscales, variance}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub lengthscales: Vec<f64>,
    pub variance: f64,
}

/// A stationary kernel with per-dimension lengthscales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelConfig", into = "KernelConfig")]
pub struct Kernel {
    family: KernelFamily,
    lengthscales: Vec<f64>,
    variance: f64,
}

impl TryFrom<KernelConfig> for Kernel {
    type Error = Error;

    fn try_from(c: KernelConfig) -> Result<Self> {
        Kernel::new(c.family, c.lengthscales, c.variance)
    }
}

impl From<Kernel> for KernelConfig {
    fn from(k: Kernel) -> Self {
        KernelConfig {
            family: k.family,
            lengthscales: k.lengthscales,
            variance: k.variance,
        }
    }
}

impl Kernel {
    pub fn new(family: KernelFamily, lengthscales: Vec<f64>, variance: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::InvalidArgument(
                "kernel needs at least one lengthscale".into(),
            ));
        }
        if lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidArgument(
                "lengthscales must be positive and finite".into(),
            ));
        }
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::InvalidArgument(
                "kernel variance must be positive and finite".into(),
            ));
        }
        Ok(Kernel {
            family,
            lengthscales,
            variance,
        })
    }

    /// Isotropic kernel in `dim` dimensions.
    pub fn isotropic(
        family: KernelFamily,
        dim: usize,
        lengthscale: f64,
        variance: f64,
    ) -> Result<Self> {
        Kernel::new(family, vec![lengthscale; dim], variance)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn config(&self) -> KernelConfig {
        self.clone().into()
    }

    /// Kernel profile as a function of the lengthscale-scaled distance.
    fn profile(&self, r: f64) -> f64 {
        let s = self.variance;
        match self.family {
            KernelFamily::SquaredExponential => s * (-0.5 * r * r).exp(),
            KernelFamily::Matern12 => s * (-r).exp(),
            KernelFamily::Matern32 => {
                let a = 3f64.sqrt() * r;
                s * (1.0 + a) * (-a).exp()
            }
            KernelFamily::Matern52 => {
                let a = 5f64.sqrt() * r;
                s * (1.0 + a + a * a / 3.0) * (-a).exp()
            }
            KernelFamily::KroneckerDelta => {
                if r == 0.0 {
                    s
                } else {
                    0.0
                }
            }
        }
    }

    /// `k(x, x')` for two points given as coordinate slices.
    pub fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        debug_assert_eq!(y.len(), self.dim());
        if self.family == KernelFamily::KroneckerDelta {
            // Exact coordinate equality.
            return if x == y { self.variance } else { 0.0 };
        }
        let r2: f64 = x
            .iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let u = (a - b) / l;
                u * u
            })
            .sum();
        self.profile(r2.sqrt())
    }

    /// Gradient of `x ↦ k(x, y)`.
    pub fn gradient(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_dim("kernel gradient", self.dim(), x.len())?;
        check_dim("kernel gradient", self.dim(), y.len())?;
        let u: Vec<f64> = x
            .iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| (a - b) / l)
            .collect();
        let r = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = self.variance;
        // factor such that ∂k/∂x_j = factor · u_j / l_j
        let factor = match self.family {
            KernelFamily::SquaredExponential => -s * (-0.5 * r * r).exp(),
            KernelFamily::Matern12 => {
                if r == 0.0 {
                    0.0
                } else {
                    -s * (-r).exp() / r
                }
            }
            KernelFamily::Matern32 => -3.0 * s * (-(3f64.sqrt()) * r).exp(),
            KernelFamily::Matern52 => {
                let a = 5f64.sqrt() * r;
                -(5.0 / 3.0) * s * (1.0 + a) * (-a).exp()
            }
            KernelFamily::KroneckerDelta => {
                return Err(Error::Unsupported(
                    "the Kronecker delta kernel is not differentiable",
                ))
            }
        };
        Ok(u.iter()
            .zip(&self.lengthscales)
            .map(|(uj, l)| factor * uj / l)
            .collect())
    }

    /// Kernel matrix with entries `k(xᵢ, x'ⱼ)`; rows of `x` and `x2` are points.
    pub fn eval(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("kernel input columns", self.dim(), x.ncols())?;
        check_dim("kernel input columns", self.dim(), x2.ncols())?;
        let a = rows_of(x);
        let b = rows_of(x2);
        let d = self.dim();
        let mut out = DMatrix::zeros(x.nrows(), x2.nrows());
        for j in 0..x2.nrows() {
            let bj = &b[j * d..(j + 1) * d];
            for i in 0..x.nrows() {
                out[(i, j)] = self.value(&a[i * d..(i + 1) * d], bj);
            }
        }
        Ok(out)
    }

    /// Symmetric kernel matrix `k(X, X)`.
    pub fn eval_symmetric(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("kernel input columns", self.dim(), x.ncols())?;
        let a = rows_of(x);
        let d = self.dim();
        let n = x.nrows();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            out[(j, j)] = self.variance;
            for i in (j + 1)..n {
                let v = self.value(&a[i * d..(i + 1) * d], &a[j * d..(j + 1) * d]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }
}

/// Anything that can produce a covariance matrix between two location sets.
///
/// Implemented by [`Kernel`] and by the finite bases in [`crate::prior`], whose
/// induced kernels are `φ(x)ᵀ Σ_w φ(x')`.
pub trait Covariance {
    fn input_dim(&self) -> usize;

    fn covariance(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    fn covariance_symmetric(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.covariance(a, a)
    }
}

impl Covariance for Kernel {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn covariance(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.eval(a, b)
    }

    fn covariance_symmetric(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.eval_symmetric(a)
    }
}

/// Row-major copy of a location matrix.
pub(crate) fn rows_of(x: &DMatrix<f64>) -> Vec<f64> {
    let (n, d) = x.shape();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            out.push(x[(i, j)]);
        }
    }
    out
}

/// Γ(k/2) for a positive integer k.
fn gamma_half_integer(k: u32) -> f64 {
    debug_assert!(k > 0);
    let (mut g, mut x) = if k.is_multiple_of(2) {
        (1.0, 1.0)
    } else {
        (PI.sqrt(), 0.5)
    };
    let target = k as f64 / 2.0;
    while x < target {
        g *= x;
        x += 1.0;
    }
    g
}

/// Spectral density and frequency sampler for a stationary kernel.
#[derive(Clone, Debug)]
pub struct SpectralSampler {
    kernel: Kernel,
    /// Normalizing constant of the unit-lengthscale Matérn density.
    matern_constant: f64,
}

impl SpectralSampler {
    pub fn new(kernel: &Kernel) -> Result<Self> {
        let matern_constant = match kernel.family.smoothness() {
            Some(nu) => {
                let d = kernel.dim() as f64;
                let two_nu = (2.0 * nu) as u32;
                let num = gamma_half_integer(two_nu + kernel.dim() as u32);
                let den = gamma_half_integer(two_nu);
                2f64.powf(d) * PI.powf(d / 2.0) * num * (2.0 * nu).powf(nu) / den
            }
            None if kernel.family == KernelFamily::KroneckerDelta => {
                return Err(Error::UnsupportedFamily(kernel.family.name()))
            }
            None => 0.0,
        };
        Ok(SpectralSampler {
            kernel: kernel.clone(),
            matern_constant,
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// Spectral density ρ(ω); integrates to the kernel variance.
    pub fn density(&self, omega: &[f64]) -> Result<f64> {
        check_dim("frequency", self.kernel.dim(), omega.len())?;
        let ls = &self.kernel.lengthscales;
        let jacobian: f64 = ls.iter().product();
        let s2: f64 = omega.iter().zip(ls).map(|(w, l)| (w * l) * (w * l)).sum();
        let unit = match self.kernel.family.smoothness() {
            Some(nu) => {
                let d = self.kernel.dim() as f64;
                self.matern_constant * (2.0 * nu + 4.0 * PI * PI * s2).powf(-(nu + d / 2.0))
            }
            None => (2.0 * PI).powf(self.kernel.dim() as f64 / 2.0) * (-2.0 * PI * PI * s2).exp(),
        };
        Ok(self.kernel.variance * jacobian * unit)
    }

    /// Draws `count` i.i.d. frequencies from `ρ / σ²`, one per row.
    ///
    /// Squared-exponential frequencies are Gaussian with standard deviation
    /// `1 / (2π l)`; Matérn-ν frequencies are multivariate Student-t with `2ν`
    /// degrees of freedom and the same scale.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        if count == 0 {
            return Err(Error::InvalidArgument(
                "frequency count must be at least 1".into(),
            ));
        }
        let d = self.kernel.dim();
        let chi = self.kernel.family.smoothness().map(|nu| {
            (
                nu,
                ChiSquared::new(2.0 * nu).expect("positive degrees of freedom"),
            )
        });
        let mut out = DMatrix::zeros(count, d);
        for i in 0..count {
            let scale = match &chi {
                Some((nu, dist)) => {
                    let g: f64 = dist.sample(rng);
                    (2.0 * nu / g).sqrt()
                }
                None => 1.0,
            };
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                out[(i, j)] = z * scale / (2.0 * PI * self.kernel.lengthscales[j]);
            }
        }
        Ok(out)
    }
}

/// Convenience wrapper matching the free-function form of the sampler.
pub fn sample_frequencies<R: Rng + ?Sized>(
    sampler: &SpectralSampler,
    count: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    sampler.sample(count, rng)
}

/// Convenience wrapper for [`Kernel::eval`].
pub fn eval_kernel(k: &Kernel, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    k.eval(x, x2)
}
