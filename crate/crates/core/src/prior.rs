//! Draws from centered GP priors: exact location-scale samples on finite
//! location sets, and evaluable approximate prior functions built from random
//! Fourier features or truncated Karhunen–Loève expansions.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{Covariance, Kernel, KernelConfig, SpectralSampler};
use crate::linalg::{cholesky, psd_sqrt, symmetrize, JITTER_LADDER};

/// An evaluable random function.
pub trait SamplePath {
    fn dim(&self) -> usize;

    /// Values at the rows of `x`.
    fn eval(&self, x: &DMatrix<f64>) -> Result<DVector<f64>>;

    /// Gradient at a single point.
    fn gradient(&self, _point: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Unsupported("this path type has no gradient"))
    }
}

impl<P: SamplePath + ?Sized> SamplePath for Arc<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        (**self).eval(x)
    }

    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        (**self).gradient(point)
    }
}

impl<P: SamplePath + ?Sized> SamplePath for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        (**self).eval(x)
    }

    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        (**self).gradient(point)
    }
}

/// Evaluates any path at the rows of `x`.
pub fn eval_path<P: SamplePath + ?Sized>(path: &P, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    path.eval(x)
}

fn default_max_jitter(k: &DMatrix<f64>) -> f64 {
    JITTER_LADDER[JITTER_LADDER.len() - 1] * k.diagonal().mean().abs()
}

/// `count` exact joint draws of `f(X) ~ N(0, K(X, X))`, one per row.
pub fn sample_exact<R: Rng + ?Sized>(
    k: &Kernel,
    x: &DMatrix<f64>,
    count: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "exact sampling needs at least one location".into(),
        ));
    }
    let kxx = k.eval_symmetric(x)?;
    let f = cholesky(&kxx, default_max_jitter(&kxx))?;
    let n = x.nrows();
    let z = DMatrix::from_fn(n, count, |_, _| StandardNormal.sample(rng));
    Ok((f.l() * z).transpose())
}

/// Mean and covariance of `f(X_new) | f(X_done) = f_done`.
pub fn conditional_moments(
    k: &Kernel,
    x_done: &DMatrix<f64>,
    f_done: &DVector<f64>,
    x_new: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_dim("conditioning values", x_done.nrows(), f_done.len())?;
    let kdd = k.eval_symmetric(x_done)?;
    let fac = cholesky(&kdd, default_max_jitter(&kdd))?;
    let kdn = k.eval(x_done, x_new)?;
    let a = fac.solve_lower(&kdn)?;
    let lf = fac.solve_lower(&DMatrix::from_column_slice(
        f_done.len(),
        1,
        f_done.as_slice(),
    ))?;
    let mean = (a.transpose() * lf).column(0).into_owned();
    let mut cov = k.eval_symmetric(x_new)? - a.transpose() * &a;
    symmetrize(&mut cov);
    Ok((mean, cov))
}

fn find_row(x: &DMatrix<f64>, row: usize, among: &DMatrix<f64>, upto: usize) -> Option<usize> {
    (0..upto).find(|&i| (0..x.ncols()).all(|j| among[(i, j)] == x[(row, j)]))
}

/// Draws `f(X_new)` from the exact conditional given `f(X_done) = f_done`.
///
/// Locations that coincide exactly with conditioned (or earlier new)
/// locations reuse those values, so the joint draw stays consistent.
pub fn sample_exact_conditional<R: Rng + ?Sized>(
    k: &Kernel,
    x_done: &DMatrix<f64>,
    f_done: &DVector<f64>,
    x_new: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if x_done.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "conditional sampling needs conditioned locations".into(),
        ));
    }
    check_dim("conditioning values", x_done.nrows(), f_done.len())?;
    check_dim("location columns", x_done.ncols(), x_new.ncols())?;
    enum Source {
        Known(usize),
        Fresh(usize),
    }
    let mut sources = Vec::with_capacity(x_new.nrows());
    let mut fresh_rows: Vec<usize> = Vec::new();
    for i in 0..x_new.nrows() {
        if let Some(j) = find_row(x_new, i, x_done, x_done.nrows()) {
            sources.push(Source::Known(j));
        } else if let Some(p) = fresh_rows
            .iter()
            .position(|&r| (0..x_new.ncols()).all(|c| x_new[(r, c)] == x_new[(i, c)]))
        {
            sources.push(Source::Fresh(p));
        } else {
            sources.push(Source::Fresh(fresh_rows.len()));
            fresh_rows.push(i);
        }
    }
    let mut fresh_values = DVector::zeros(fresh_rows.len());
    if !fresh_rows.is_empty() {
        let xf = x_new.select_rows(&fresh_rows);
        let (mean, cov) = conditional_moments(k, x_done, f_done, &xf)?;
        let root = psd_sqrt(&cov)?;
        let z = DVector::from_fn(fresh_rows.len(), |_, _| StandardNormal.sample(rng));
        fresh_values = mean + root * z;
    }
    Ok(DVector::from_iterator(
        sources.len(),
        sources.iter().map(|s| match s {
            Source::Known(j) => f_done[*j],
            Source::Fresh(p) => fresh_values[*p],
        }),
    ))
}

/// Random Fourier feature map `φⱼ(x) = a·cos(2π ωⱼᵀx + τⱼ)`, `a = √(2σ²/ℓ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisRecord", into = "BasisRecord")]
pub struct FourierFeatureMap {
    kernel: Kernel,
    frequencies: DMatrix<f64>,
    phases: DVector<f64>,
    amplitude: f64,
}

/// Flat serialized form of a [`FourierFeatureMap`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisRecord {
    /// Always `"cosine"`: real features with uniform random phases.
    pub feature_type: String,
    pub kernel: KernelConfig,
    pub num_features: usize,
    /// Row-major `num_features × dim`.
    pub frequencies: Vec<f64>,
    pub phases: Vec<f64>,
    pub amplitude: f64,
}

impl From<FourierFeatureMap> for BasisRecord {
    fn from(b: FourierFeatureMap) -> Self {
        let (l, d) = b.frequencies.shape();
        let mut freq = Vec::with_capacity(l * d);
        for i in 0..l {
            for j in 0..d {
                freq.push(b.frequencies[(i, j)]);
            }
        }
        BasisRecord {
            feature_type: "cosine".into(),
            kernel: b.kernel.config(),
            num_features: l,
            frequencies: freq,
            phases: b.phases.iter().copied().collect(),
            amplitude: b.amplitude,
        }
    }
}

impl TryFrom<BasisRecord> for FourierFeatureMap {
    type Error = Error;

    fn try_from(r: BasisRecord) -> Result<Self> {
        if r.feature_type != "cosine" {
            return Err(Error::Serialization(format!(
                "unknown feature type `{}`",
                r.feature_type
            )));
        }
        let kernel = Kernel::try_from(r.kernel)?;
        let d = kernel.dim();
        check_dim(
            "serialized frequencies",
            r.num_features * d,
            r.frequencies.len(),
        )?;
        check_dim("serialized phases", r.num_features, r.phases.len())?;
        FourierFeatureMap::from_parts(
            kernel,
            DMatrix::from_row_slice(r.num_features, d, &r.frequencies),
            DVector::from_vec(r.phases),
        )
    }
}

impl FourierFeatureMap {
    /// Assembles a feature map from explicit frequencies and phases.
    pub fn from_parts(
        kernel: Kernel,
        frequencies: DMatrix<f64>,
        phases: DVector<f64>,
    ) -> Result<Self> {
        let l = frequencies.nrows();
        if l == 0 {
            return Err(Error::InvalidArgument(
                "feature map needs at least one feature".into(),
            ));
        }
        check_dim("frequency columns", kernel.dim(), frequencies.ncols())?;
        check_dim("phase count", l, phases.len())?;
        if phases.iter().any(|t| !(0.0..2.0 * PI).contains(t)) {
            return Err(Error::InvalidArgument("phases must lie in [0, 2π)".into()));
        }
        let amplitude = (2.0 * kernel.variance() / l as f64).sqrt();
        Ok(FourierFeatureMap {
            kernel,
            frequencies,
            phases,
            amplitude,
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn frequencies(&self) -> &DMatrix<f64> {
        &self.frequencies
    }

    pub fn phases(&self) -> &DVector<f64> {
        &self.phases
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn num_features(&self) -> usize {
        self.frequencies.nrows()
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    /// Feature matrix `Φ` with rows `φ(xᵢ)ᵀ`.
    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("location columns", self.dim(), x.ncols())?;
        let mut arg = x * self.frequencies.transpose();
        let l = self.num_features();
        for j in 0..l {
            let tau = self.phases[j];
            for v in arg.column_mut(j).iter_mut() {
                *v = self.amplitude * (2.0 * PI * *v + tau).cos();
            }
        }
        Ok(arg)
    }

    /// Jacobian of `φ` at a point, `dim × ℓ`.
    pub fn feature_gradient(&self, point: &[f64]) -> Result<DMatrix<f64>> {
        check_dim("gradient point", self.dim(), point.len())?;
        let (l, d) = self.frequencies.shape();
        let mut out = DMatrix::zeros(d, l);
        for j in 0..l {
            let dot: f64 = (0..d).map(|c| self.frequencies[(j, c)] * point[c]).sum();
            let s = -self.amplitude * (2.0 * PI * dot + self.phases[j]).sin() * 2.0 * PI;
            for c in 0..d {
                out[(c, j)] = s * self.frequencies[(j, c)];
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))
    }
}

impl Covariance for FourierFeatureMap {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn covariance(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.features(a)? * self.features(b)?.transpose())
    }

    fn covariance_symmetric(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let f = self.features(a)?;
        Ok(&f * f.transpose())
    }
}

/// Samples frequencies from the kernel's spectral density and uniform phases.
pub fn build_rff_basis<R: Rng + ?Sized>(
    k: &Kernel,
    num_features: usize,
    rng: &mut R,
) -> Result<FourierFeatureMap> {
    let sampler = SpectralSampler::new(k)?;
    let frequencies = sampler.sample(num_features, rng)?;
    let phases = DVector::from_fn(num_features, |_, _| rng.random_range(0.0..2.0 * PI));
    FourierFeatureMap::from_parts(k.clone(), frequencies, phases)
}

pub type BasisFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Caller-supplied eigenpairs of a covariance operator, largest first.
#[derive(Clone)]
pub struct KlBasis {
    dim: usize,
    eigenfunctions: Vec<BasisFn>,
    eigenvalues: Vec<f64>,
}

impl fmt::Debug for KlBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KlBasis")
            .field("dim", &self.dim)
            .field("eigenvalues", &self.eigenvalues)
            .finish_non_exhaustive()
    }
}

impl KlBasis {
    pub fn new(dim: usize, eigenfunctions: Vec<BasisFn>, eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidArgument(
                "KL basis needs at least one eigenpair".into(),
            ));
        }
        check_dim(
            "eigenfunction count",
            eigenvalues.len(),
            eigenfunctions.len(),
        )?;
        if eigenvalues.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument(
                "KL eigenvalues must be positive".into(),
            ));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument(
                "KL eigenvalues must be nonincreasing".into(),
            ));
        }
        Ok(KlBasis {
            dim,
            eigenfunctions,
            eigenvalues,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Keeps the leading `level` eigenpairs.
    pub fn truncate(&self, level: usize) -> Result<Self> {
        if level == 0 || level > self.len() {
            return Err(Error::InvalidArgument(format!(
                "truncation level {level} out of range"
            )));
        }
        Ok(KlBasis {
            dim: self.dim,
            eigenfunctions: self.eigenfunctions[..level].to_vec(),
            eigenvalues: self.eigenvalues[..level].to_vec(),
        })
    }

    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("location columns", self.dim, x.ncols())?;
        let mut out = DMatrix::zeros(x.nrows(), self.len());
        let mut point = vec![0.0; self.dim];
        for i in 0..x.nrows() {
            for (c, p) in point.iter_mut().enumerate() {
                *p = x[(i, c)];
            }
            for (j, f) in self.eigenfunctions.iter().enumerate() {
                out[(i, j)] = f(&point);
            }
        }
        Ok(out)
    }
}

impl Covariance for KlBasis {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn covariance(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut fa = self.features(a)?;
        for (j, l) in self.eigenvalues.iter().enumerate() {
            fa.column_mut(j).scale_mut(*l);
        }
        Ok(fa * self.features(b)?.transpose())
    }
}

/// A finite basis shared by many paths.
#[derive(Clone, Debug)]
pub enum PathBasis {
    Fourier(Arc<FourierFeatureMap>),
    KarhunenLoeve(Arc<KlBasis>),
}

impl From<FourierFeatureMap> for PathBasis {
    fn from(b: FourierFeatureMap) -> Self {
        PathBasis::Fourier(Arc::new(b))
    }
}

impl From<KlBasis> for PathBasis {
    fn from(b: KlBasis) -> Self {
        PathBasis::KarhunenLoeve(Arc::new(b))
    }
}

impl PathBasis {
    pub fn dim(&self) -> usize {
        match self {
            PathBasis::Fourier(b) => b.dim(),
            PathBasis::KarhunenLoeve(b) => b.dim(),
        }
    }

    pub fn num_features(&self) -> usize {
        match self {
            PathBasis::Fourier(b) => b.num_features(),
            PathBasis::KarhunenLoeve(b) => b.len(),
        }
    }

    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            PathBasis::Fourier(b) => b.features(x),
            PathBasis::KarhunenLoeve(b) => b.features(x),
        }
    }

    /// Prior variances of the weights: ones for Fourier features, the
    /// eigenvalues for a KL expansion.
    pub fn weight_variances(&self) -> DVector<f64> {
        match self {
            PathBasis::Fourier(b) => DVector::from_element(b.num_features(), 1.0),
            PathBasis::KarhunenLoeve(b) => DVector::from_column_slice(b.eigenvalues()),
        }
    }

    pub fn same_as(&self, other: &PathBasis) -> bool {
        match (self, other) {
            (PathBasis::Fourier(a), PathBasis::Fourier(b)) => Arc::ptr_eq(a, b),
            (PathBasis::KarhunenLoeve(a), PathBasis::KarhunenLoeve(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl Covariance for PathBasis {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn covariance(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            PathBasis::Fourier(f) => f.covariance(a, b),
            PathBasis::KarhunenLoeve(f) => f.covariance(a, b),
        }
    }
}

pub type MeanFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `f̃(·) = φ(·)ᵀ w`, optionally shifted by a deterministic mean.
#[derive(Clone)]
pub struct PriorPath {
    basis: PathBasis,
    weights: DVector<f64>,
    mean: Option<MeanFn>,
}

impl fmt::Debug for PriorPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PriorPath")
            .field("basis", &self.basis)
            .field("weights", &self.weights)
            .field("has_mean", &self.mean.is_some())
            .finish()
    }
}

impl PriorPath {
    pub fn new(basis: PathBasis, weights: DVector<f64>) -> Result<Self> {
        check_dim("weight count", basis.num_features(), weights.len())?;
        Ok(PriorPath {
            basis,
            weights,
            mean: None,
        })
    }

    pub fn with_mean(mut self, mean: MeanFn) -> Self {
        self.mean = Some(mean);
        self
    }

    pub fn basis(&self) -> &PathBasis {
        &self.basis
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn has_mean(&self) -> bool {
        self.mean.is_some()
    }

    /// Same basis and mean, new weights.
    pub fn with_weights(&self, weights: DVector<f64>) -> Result<Self> {
        check_dim("weight count", self.basis.num_features(), weights.len())?;
        Ok(PriorPath {
            basis: self.basis.clone(),
            weights,
            mean: self.mean.clone(),
        })
    }
}

impl SamplePath for PriorPath {
    fn dim(&self) -> usize {
        self.basis.dim()
    }

    fn eval(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut out = self.basis.features(x)? * &self.weights;
        if let Some(m) = &self.mean {
            let mut point = vec![0.0; x.ncols()];
            for i in 0..x.nrows() {
                for (c, p) in point.iter_mut().enumerate() {
                    *p = x[(i, c)];
                }
                out[i] += m(&point);
            }
        }
        Ok(out)
    }

    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        if self.mean.is_some() {
            return Err(Error::Unsupported(
                "paths with a mean function have no gradient",
            ));
        }
        match &self.basis {
            PathBasis::Fourier(b) => Ok((b.feature_gradient(point)? * &self.weights)
                .iter()
                .copied()
                .collect()),
            PathBasis::KarhunenLoeve(_) => {
                Err(Error::Unsupported("KL eigenfunctions carry no derivatives"))
            }
        }
    }
}

/// Draws `count` independent weight vectors for one shared basis.
pub fn sample_prior_path<R: Rng + ?Sized>(
    basis: &PathBasis,
    count: usize,
    rng: &mut R,
) -> Vec<PriorPath> {
    let sd = basis.weight_variances().map(f64::sqrt);
    (0..count)
        .map(|_| {
            let w = DVector::from_fn(sd.len(), |i, _| {
                let z: f64 = StandardNormal.sample(rng);
                sd[i] * z
            });
            PriorPath {
                basis: basis.clone(),
                weights: w,
                mean: None,
            }
        })
        .collect()
}

/// One path from a truncated KL expansion, `wᵢ ~ N(0, λᵢ)`.
pub fn build_kl_path<R: Rng + ?Sized>(basis: Arc<KlBasis>, rng: &mut R) -> PriorPath {
    sample_prior_path(&PathBasis::KarhunenLoeve(basis), 1, rng)
        .pop()
        .expect("one path requested")
}

/// Location index shared by many tabulated draws.
#[derive(Debug)]
pub struct LocationTable {
    locations: DMatrix<f64>,
    index: HashMap<Vec<u64>, usize>,
}

impl LocationTable {
    pub fn new(locations: DMatrix<f64>) -> Self {
        let mut index = HashMap::with_capacity(locations.nrows());
        for i in 0..locations.nrows() {
            let key: Vec<u64> = locations.row(i).iter().map(|v| v.to_bits()).collect();
            index.entry(key).or_insert(i);
        }
        LocationTable { locations, index }
    }

    pub fn locations(&self) -> &DMatrix<f64> {
        &self.locations
    }

    fn lookup(&self, x: &DMatrix<f64>, row: usize) -> Option<usize> {
        let key: Vec<u64> = x.row(row).iter().map(|v| v.to_bits()).collect();
        self.index.get(&key).copied()
    }
}

/// An exact prior draw known only on a finite location set.
#[derive(Clone, Debug)]
pub struct TabulatedPath {
    table: Arc<LocationTable>,
    values: DVector<f64>,
}

impl TabulatedPath {
    pub fn new(table: Arc<LocationTable>, values: DVector<f64>) -> Result<Self> {
        check_dim("tabulated values", table.locations.nrows(), values.len())?;
        Ok(TabulatedPath { table, values })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }
}

impl SamplePath for TabulatedPath {
    fn dim(&self) -> usize {
        self.table.locations.ncols()
    }

    fn eval(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_dim("location columns", self.dim(), x.ncols())?;
        let mut out = DVector::zeros(x.nrows());
        for i in 0..x.nrows() {
            let j = self.table.lookup(x, i).ok_or(Error::NotTabulated(i))?;
            out[i] = self.values[j];
        }
        Ok(out)
    }
}

/// Exact joint prior draws on `x`, wrapped as evaluable tabulated paths.
pub fn sample_exact_paths<R: Rng + ?Sized>(
    k: &Kernel,
    x: &DMatrix<f64>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<TabulatedPath>> {
    let draws = sample_exact(k, x, count, rng)?;
    let table = Arc::new(LocationTable::new(x.clone()));
    Ok((0..count)
        .map(|s| TabulatedPath {
            table: table.clone(),
            values: draws.row(s).transpose(),
        })
        .collect())
}
