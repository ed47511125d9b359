//! Dense PSD linear algebra: jittered Cholesky, triangular solves, symmetric
//! square roots, partial pivoted Cholesky, and preconditioned conjugate
//! gradients.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Relative jitter ladder, scaled by the mean diagonal of the input.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

pub const DEFAULT_CG_TOL: f64 = 1e-8;
pub const DEFAULT_PRECOND_RANK: usize = 16;

const SYMMETRY_TOL: f64 = 1e-10;

/// Lower-triangular factor of `A + jitter·I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    jitter_used: f64,
}

impl CholeskyFactor {
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub(crate) fn with_jitter(mut f: CholeskyFactor, jitter: f64) -> CholeskyFactor {
        f.jitter_used = jitter;
        f
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// `L⁻¹ B`
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("triangular solve rows", self.dim(), b.nrows())?;
        let mut x = b.clone();
        forward_substitute(&self.l, &mut x);
        Ok(x)
    }

    /// `(L Lᵀ)⁻¹ b` for a single right-hand side.
    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("solve rows", self.dim(), b.len())?;
        let mut x = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        forward_substitute(&self.l, &mut x);
        backward_substitute_transposed(&self.l, &mut x);
        Ok(DVector::from_column_slice(x.as_slice()))
    }
}

fn forward_substitute(l: &DMatrix<f64>, x: &mut DMatrix<f64>) {
    let n = l.nrows();
    for c in 0..x.ncols() {
        for k in 0..n {
            let v = x[(k, c)] / l[(k, k)];
            x[(k, c)] = v;
            if v != 0.0 {
                let lk = &l.as_slice()[k * n..(k + 1) * n];
                for i in (k + 1)..n {
                    x[(i, c)] -= lk[i] * v;
                }
            }
        }
    }
}

fn backward_substitute_transposed(l: &DMatrix<f64>, x: &mut DMatrix<f64>) {
    let n = l.nrows();
    for c in 0..x.ncols() {
        for k in (0..n).rev() {
            let lk = &l.as_slice()[k * n..(k + 1) * n];
            let mut s = x[(k, c)];
            for i in (k + 1)..n {
                s -= lk[i] * x[(i, c)];
            }
            x[(k, c)] = s / lk[k];
        }
    }
}

fn relative_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut scale = 0.0f64;
    let mut diff = 0.0f64;
    for j in 0..n {
        for i in 0..n {
            scale = scale.max(a[(i, j)].abs());
            if i > j {
                diff = diff.max((a[(i, j)] - a[(j, i)]).abs());
            }
        }
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Replaces `a` by `(a + aᵀ) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

fn check_square(a: &DMatrix<f64>) -> Result<()> {
    check_dim("square matrix", a.nrows(), a.ncols())
}

/// Unpivoted left-looking factorization; `None` on a nonpositive pivot.
fn factor_in_place(a: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        for i in j..n {
            col[i] = a[(i, j)];
        }
        col[j] += jitter;
        let ajj = col[j];
        for k in 0..j {
            let ljk = l[(j, k)];
            if ljk != 0.0 {
                let lk = &l.as_slice()[k * n..(k + 1) * n];
                for i in j..n {
                    col[i] -= lk[i] * ljk;
                }
            }
        }
        let d = col[j];
        if !(d.is_finite() && d > f64::EPSILON * ajj.abs()) || d <= 0.0 {
            return None;
        }
        let s = d.sqrt();
        let lj = &mut l.as_mut_slice()[j * n..(j + 1) * n];
        lj[j] = s;
        for i in (j + 1)..n {
            lj[i] = col[i] / s;
        }
    }
    Some(l)
}

/// Cholesky factor of `a + jitter·I`, with the smallest jitter from
/// [`JITTER_LADDER`] (times the mean diagonal) that succeeds without
/// exceeding `max_jitter`.
pub fn cholesky(a: &DMatrix<f64>, max_jitter: f64) -> Result<CholeskyFactor> {
    check_square(a)?;
    let asym = relative_asymmetry(a);
    if asym > SYMMETRY_TOL {
        return Err(Error::Asymmetric(asym));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(CholeskyFactor {
            l: DMatrix::zeros(0, 0),
            jitter_used: 0.0,
        });
    }
    let mean_diag = a.diagonal().mean();
    let mut failure = Error::NotPositiveDefinite {
        step: 0,
        jitter: 0.0,
    };
    for (step, rel) in JITTER_LADDER.iter().enumerate() {
        let jitter = rel * mean_diag.abs();
        if step > 0 && jitter > max_jitter {
            break;
        }
        if let Some(l) = factor_in_place(a, jitter) {
            return Ok(CholeskyFactor {
                l,
                jitter_used: jitter,
            });
        }
        failure = Error::NotPositiveDefinite { step, jitter };
    }
    Err(failure)
}

/// Solves `(L Lᵀ) X = B`.
pub fn solve_psd(f: &CholeskyFactor, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("solve rows", f.dim(), b.nrows())?;
    let mut x = b.clone();
    forward_substitute(&f.l, &mut x);
    backward_substitute_transposed(&f.l, &mut x);
    Ok(x)
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues down to
/// `-1e-8·‖A‖_F` are clamped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(a)?;
    let asym = relative_asymmetry(a);
    if asym > 1e-8 {
        return Err(Error::Asymmetric(asym));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let norm = sym.norm();
    if norm == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min < -1e-8 * norm {
        return Err(Error::NotPsd(min));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, r) in roots.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*r);
    }
    let mut s = scaled * v.transpose();
    symmetrize(&mut s);
    Ok(s)
}

/// Partial pivoted Cholesky factor `R` (n×r) with `R Rᵀ ≈ A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankFactor {
    factor: DMatrix<f64>,
    pivots: Vec<usize>,
}

impl LowRankFactor {
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn pivots(&self) -> &[usize] {
        &self.pivots
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    /// `trace(A - R Rᵀ)` for the matrix this factor was built from.
    pub fn trace_residual(&self, a: &DMatrix<f64>) -> f64 {
        a.trace() - self.factor.norm_squared()
    }
}

/// Greedy partial Cholesky pivoting on the largest remaining diagonal.
pub fn pivoted_cholesky(a: &DMatrix<f64>, rank: usize) -> Result<LowRankFactor> {
    check_square(a)?;
    let n = a.nrows();
    if rank == 0 || rank > n {
        return Err(Error::InvalidArgument(format!(
            "pivoted Cholesky rank {rank} outside 1..={n}"
        )));
    }
    let mut diag: Vec<f64> = a.diagonal().iter().copied().collect();
    let mut used = vec![false; n];
    let mut r = DMatrix::<f64>::zeros(n, rank);
    let mut pivots = Vec::with_capacity(rank);
    for k in 0..rank {
        let (p, &dp) = diag
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("rank <= n leaves a pivot");
        if dp <= 0.0 {
            break;
        }
        used[p] = true;
        pivots.push(p);
        let s = dp.sqrt();
        for i in 0..n {
            if used[i] && i != p {
                continue;
            }
            let mut v = a[(i, p)];
            for j in 0..k {
                v -= r[(i, j)] * r[(p, j)];
            }
            r[(i, k)] = if i == p { s } else { v / s };
        }
        for i in 0..n {
            if !used[i] {
                diag[i] -= r[(i, k)] * r[(i, k)];
            }
        }
        diag[p] = 0.0;
    }
    Ok(LowRankFactor { factor: r, pivots })
}

/// Applies `(R Rᵀ + D)⁻¹` through the low-rank inverse identity.
#[derive(Clone, Debug)]
pub struct Preconditioner {
    factor: DMatrix<f64>,
    diag_inv: DVector<f64>,
    inner: CholeskyFactor,
}

impl Preconditioner {
    /// Preconditioner for `R Rᵀ + noise·I`.
    pub fn new(f: &LowRankFactor, noise: f64) -> Result<Self> {
        let n = f.factor.nrows();
        Self::with_diagonal(f, &DVector::from_element(n, noise))
    }

    /// Preconditioner for `R Rᵀ + diag(d)`; `d` must be strictly positive.
    pub fn with_diagonal(f: &LowRankFactor, diag: &DVector<f64>) -> Result<Self> {
        check_dim("preconditioner diagonal", f.factor.nrows(), diag.len())?;
        if diag.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidArgument(
                "preconditioner diagonal must be positive".into(),
            ));
        }
        let diag_inv = diag.map(|d| 1.0 / d);
        let mut scaled = f.factor.clone();
        for (i, di) in diag_inv.iter().enumerate() {
            scaled.row_mut(i).scale_mut(*di);
        }
        let mut inner = f.factor.transpose() * scaled;
        for i in 0..inner.nrows() {
            inner[(i, i)] += 1.0;
        }
        symmetrize(&mut inner);
        let inner = cholesky(&inner, 0.0)?;
        Ok(Preconditioner {
            factor: f.factor.clone(),
            diag_inv,
            inner,
        })
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let dv = v.component_mul(&self.diag_inv);
        let t = self.factor.transpose() * &dv;
        let s = self
            .inner
            .solve_vec(&t)
            .expect("shapes fixed at construction");
        let correction = (&self.factor * s).component_mul(&self.diag_inv);
        dv - correction
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgReport {
    pub iterations: usize,
    pub final_residual_norm: f64,
    pub converged: bool,
}

/// Preconditioned conjugate gradients for an SPD operator.
///
/// Stops when `‖b - A v‖ ≤ tol·‖b‖`, verified on the true residual.
/// Reaching `max_iter` is reported through [`CgReport::converged`].
pub fn cg_solve<F>(
    apply_a: F,
    b: &DVector<f64>,
    precond: Option<&Preconditioner>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, CgReport)>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(
            "CG tolerance must be positive".into(),
        ));
    }
    let n = b.len();
    let bnorm = b.norm();
    let mut x = DVector::zeros(n);
    if bnorm == 0.0 {
        return Ok((
            x,
            CgReport {
                iterations: 0,
                final_residual_norm: 0.0,
                converged: true,
            },
        ));
    }
    let target = tol * bnorm;
    let precondition = |r: &DVector<f64>| match precond {
        Some(p) => p.apply(r),
        None => r.clone(),
    };
    let mut r = b.clone();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut iterations = 0;
    let mut rnorm = bnorm;
    while iterations < max_iter {
        iterations += 1;
        let ap = apply_a(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        rnorm = r.norm();
        if rnorm <= target {
            // Confirm on the true residual before declaring convergence.
            r = b - apply_a(&x);
            rnorm = r.norm();
            if rnorm <= target {
                return Ok((
                    x,
                    CgReport {
                        iterations,
                        final_residual_norm: rnorm / bnorm,
                        converged: true,
                    },
                ));
            }
            z = precondition(&r);
            rz = r.dot(&z);
            p = z.clone();
            continue;
        }
        z = precondition(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + p * beta;
    }
    Ok((
        x,
        CgReport {
            iterations,
            final_residual_norm: rnorm / bnorm,
            converged: false,
        },
    ))
}

/// Solves against every column of `b`, reusing one preconditioner.
pub fn cg_solve_many<F>(
    apply_a: F,
    b: &DMatrix<f64>,
    precond: Option<&Preconditioner>,
    tol: f64,
    max_iter: usize,
) -> Result<(DMatrix<f64>, Vec<CgReport>)>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut out = DMatrix::zeros(b.nrows(), b.ncols());
    let mut reports = Vec::with_capacity(b.ncols());
    for c in 0..b.ncols() {
        let rhs = b.column(c).into_owned();
        let (x, rep) = cg_solve(&apply_a, &rhs, precond, tol, max_iter)?;
        out.set_column(c, &x);
        reports.push(rep);
    }
    Ok((out, reports))
}

/// Cholesky factor grown one row at a time, stored as packed lower rows.
///
/// Appending a point costs one triangular solve, `O(n²)`.
#[derive(Clone, Debug, Default)]
pub struct IncrementalCholesky {
    packed: Vec<f64>,
    n: usize,
}

impl IncrementalCholesky {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_factor(f: &CholeskyFactor) -> Self {
        let n = f.dim();
        let mut packed = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                packed.push(f.l[(i, j)]);
            }
        }
        IncrementalCholesky { packed, n }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.packed[start..start + i + 1]
    }

    /// `L⁻¹ b`
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(b.len(), self.n);
        let mut x = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let row = self.row(i);
            let s: f64 = row[..i].iter().zip(&x).map(|(a, b)| a * b).sum();
            x.push((b[i] - s) / row[i]);
        }
        x
    }

    /// `L⁻ᵀ y`
    pub fn solve_upper(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.n);
        let mut x = y.to_vec();
        for i in (0..self.n).rev() {
            let row = self.row(i);
            x[i] /= row[i];
            let xi = x[i];
            for (xj, lij) in x[..i].iter_mut().zip(&row[..i]) {
                *xj -= lij * xi;
            }
        }
        x
    }

    /// Appends a point with covariances `cross` against the existing points
    /// and (jittered) variance `diag`. Returns `L⁻¹ cross`.
    pub fn push(&mut self, cross: &[f64], diag: f64) -> Result<Vec<f64>> {
        check_dim("incremental Cholesky cross terms", self.n, cross.len())?;
        let l = self.solve_lower(cross);
        let d = diag - l.iter().map(|v| v * v).sum::<f64>();
        if !(d.is_finite() && d > f64::EPSILON * diag.abs()) {
            return Err(Error::NotPositiveDefinite {
                step: 0,
                jitter: 0.0,
            });
        }
        self.packed.extend_from_slice(&l);
        self.packed.push(d.sqrt());
        self.n += 1;
        Ok(l)
    }

    pub fn to_factor(&self) -> CholeskyFactor {
        let mut l = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i).iter().enumerate() {
                l[(i, j)] = *v;
            }
        }
        CholeskyFactor {
            l,
            jitter_used: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{Kernel, KernelFamily};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let mut a = &b * b.transpose();
        for i in 0..n {
            a[(i, i)] += 0.5;
        }
        a
    }

    fn se_matrix(rng: &mut ChaCha8Rng, n: usize, noise: f64) -> DMatrix<f64> {
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let k = Kernel::isotropic(KernelFamily::SquaredExponential, 1, 0.2, 1.0).unwrap();
        let mut m = k.eval_symmetric(&x).unwrap();
        for i in 0..n {
            m[(i, i)] += noise;
        }
        m
    }

    /// Gaussian elimination with partial pivoting, independent of the
    /// factorization code.
    fn gauss_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
        let n = a.nrows();
        let mut m = a.clone();
        let mut r = b.clone();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| m[(i, k)].abs().total_cmp(&m[(j, k)].abs()))
                .unwrap();
            m.swap_rows(k, p);
            r.swap_rows(k, p);
            for i in (k + 1)..n {
                let f = m[(i, k)] / m[(k, k)];
                for j in k..n {
                    m[(i, j)] -= f * m[(k, j)];
                }
                r[i] -= f * r[k];
            }
        }
        let mut x = DVector::zeros(n);
        for i in (0..n).rev() {
            let mut s = r[i];
            for j in (i + 1)..n {
                s -= m[(i, j)] * x[j];
            }
            x[i] = s / m[(i, i)];
        }
        x
    }

    #[test]
    fn identity_factor() {
        let f = cholesky(&DMatrix::identity(4, 4), 0.0).unwrap();
        assert_eq!(f.l(), &DMatrix::identity(4, 4));
        assert_eq!(f.jitter_used(), 0.0);
    }

    #[test]
    fn two_by_two_by_hand() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let f = cholesky(&a, 0.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2f64.sqrt()]);
        assert!((f.l() - expected).norm() < 1e-15);
    }

    #[test]
    fn rank_deficient_needs_jitter() {
        let a = DMatrix::from_element(3, 3, 1.0);
        match cholesky(&a, 0.0) {
            Err(Error::NotPositiveDefinite { step: 0, .. }) => {}
            other => panic!("expected failure at step 0, got {other:?}"),
        }
        let f = cholesky(&a, 1e-6).unwrap();
        assert!(f.jitter_used() > 0.0);
        let err = (f.reconstruct() - &a).norm() / a.norm();
        assert!(err < 3.0 * 1e-8 + f.jitter_used() * 3f64.sqrt());
        assert!(f.l().diagonal().iter().all(|d| *d > 0.0));
    }

    #[test]
    fn asymmetric_input_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(cholesky(&a, 0.0), Err(Error::Asymmetric(_))));
        assert!(matches!(psd_sqrt(&a), Err(Error::Asymmetric(_))));
    }

    #[test]
    fn solve_recovers_unit_vector_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_spd(&mut rng, 6);
        let f = cholesky(&a, 0.0).unwrap();
        let e1 = DMatrix::from_fn(6, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let b = f.reconstruct() * &e1;
        let x = solve_psd(&f, &b).unwrap();
        assert!((x - e1).norm() < 1e-12);

        let id = cholesky(&DMatrix::identity(3, 3), 0.0).unwrap();
        let b = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        assert_eq!(solve_psd(&id, &b).unwrap(), b);
        assert!(solve_psd(&id, &DMatrix::zeros(4, 1)).is_err());
    }

    #[test]
    fn solve_matches_elimination_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_spd(&mut rng, 8);
        let b = DVector::from_fn(8, |_, _| rng.random::<f64>());
        let f = cholesky(&a, 0.0).unwrap();
        let x = f.solve_vec(&b).unwrap();
        let oracle = gauss_solve(&a, &b);
        assert!((x - oracle).norm() < 1e-10);
    }

    #[test]
    fn psd_sqrt_cases() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = psd_sqrt(&d).unwrap();
        assert!((s - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).norm() < 1e-14);
        assert_eq!(
            psd_sqrt(&DMatrix::zeros(3, 3)).unwrap(),
            DMatrix::zeros(3, 3)
        );

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let root = random_spd(&mut rng, 5);
        let a = &root * &root;
        let s = psd_sqrt(&a).unwrap();
        assert!((&s * &s - &a).norm() / a.norm() < 1e-7);
        assert!((&s - s.transpose()).amax() < 1e-10);
        // Unique PSD root: recovers the construction.
        assert!((&s - &root).norm() / root.norm() < 1e-7);

        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(psd_sqrt(&neg), Err(Error::NotPsd(_))));
    }

    #[test]
    fn pivoted_cholesky_rules() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let f = pivoted_cholesky(&d, 1).unwrap();
        assert_eq!(f.pivots(), &[0]);
        assert!((f.factor()[(0, 0)] - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(f.factor()[(1, 0)], 0.0);
        assert_eq!(f.factor()[(2, 0)], 0.0);
        assert!(pivoted_cholesky(&d, 0).is_err());
        assert!(pivoted_cholesky(&d, 4).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_spd(&mut rng, 10);
        let full = pivoted_cholesky(&a, 10).unwrap();
        assert!((full.factor() * full.factor().transpose() - &a).amax() < 1e-8);
        assert!(full.trace_residual(&a).abs() < 1e-8);
    }

    #[test]
    fn pivoted_cholesky_on_clustered_kernel_matrix() {
        // 32 points in 4 tight clusters: rank-8 captures almost all of the trace.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let centers = [0.1, 0.35, 0.6, 0.9];
        let x = DMatrix::from_fn(32, 1, |i, _| {
            centers[i % 4] + 0.01 * (rng.random::<f64>() - 0.5)
        });
        let k = Kernel::isotropic(KernelFamily::SquaredExponential, 1, 0.2, 1.0).unwrap();
        let a = k.eval_symmetric(&x).unwrap();
        let f = pivoted_cholesky(&a, 8).unwrap();
        let residual = f.trace_residual(&a);
        // The full factorization has zero residual; rank 8 is measured at ~1e-4 of the trace.
        assert!(residual < 0.01 * a.trace(), "residual {residual}");
        let full = pivoted_cholesky(&a, 32).unwrap();
        assert!(full.trace_residual(&a).abs() < 1e-8);
    }

    #[test]
    fn cg_identity_one_iteration() {
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let (x, rep) = cg_solve(|v| v.clone(), &b, None, 1e-8, 10).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert!((x - b).norm() < 1e-15);
    }

    #[test]
    fn cg_reports_nonconvergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = se_matrix(&mut rng, 64, 1e-6);
        let b = DVector::from_element(64, 1.0);
        let (_, rep) = cg_solve(|v| &a * v, &b, None, 1e-12, 3).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 3);
        assert!(cg_solve(|v| v.clone(), &b, None, 0.0, 3).is_err());
    }

    #[test]
    fn cg_matches_cholesky_on_512_kernel_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = se_matrix(&mut rng, 512, 1e-3);
        let b = DVector::from_fn(512, |_, _| rng.random::<f64>() - 0.5);
        let direct = cholesky(&a, 0.0).unwrap().solve_vec(&b).unwrap();
        let (plain, plain_rep) = cg_solve(|v| &a * v, &b, None, 1e-10, 4 * 512).unwrap();
        assert!(plain_rep.converged);
        assert!((&plain - &direct).norm() / direct.norm() < 1e-6);

        let low = pivoted_cholesky(&a, DEFAULT_PRECOND_RANK).unwrap();
        let pre = Preconditioner::new(&low, 1e-3).unwrap();
        let (x, rep) = cg_solve(|v| &a * v, &b, Some(&pre), 1e-10, 4 * 512).unwrap();
        assert!(rep.converged);
        assert!((&x - &direct).norm() / direct.norm() < 1e-6);
        assert!(
            rep.iterations < plain_rep.iterations,
            "{} vs {}",
            rep.iterations,
            plain_rep.iterations
        );
    }

    #[test]
    fn preconditioner_inverts_low_rank_plus_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = DMatrix::from_fn(7, 3, |_, _| rng.random::<f64>());
        let low = LowRankFactor {
            factor: r.clone(),
            pivots: vec![0, 1, 2],
        };
        let diag = DVector::from_fn(7, |i, _| 0.1 + i as f64 * 0.05);
        let p = Preconditioner::with_diagonal(&low, &diag).unwrap();
        let m = &r * r.transpose() + DMatrix::from_diagonal(&diag);
        let v = DVector::from_fn(7, |_, _| rng.random::<f64>());
        assert!((&m * p.apply(&v) - v).norm() < 1e-12);
    }

    #[test]
    fn multi_rhs_reuses_preconditioner() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = se_matrix(&mut rng, 100, 1e-2);
        let b = DMatrix::from_fn(100, 3, |_, _| rng.random::<f64>());
        let pre = Preconditioner::new(&pivoted_cholesky(&a, 8).unwrap(), 1e-2).unwrap();
        let (x, reps) = cg_solve_many(|v| &a * v, &b, Some(&pre), 1e-10, 400).unwrap();
        assert!(reps.iter().all(|r| r.converged));
        let direct = solve_psd(&cholesky(&a, 0.0).unwrap(), &b).unwrap();
        assert!((x - direct).norm() / b.norm() < 1e-6);
    }

    #[test]
    fn larger_noise_never_needs_more_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let k = se_matrix(&mut rng, 200, 0.0);
        let b = DVector::from_fn(200, |_, _| rng.random::<f64>() - 0.5);
        let mut last = usize::MAX;
        for noise in [1e-6, 1e-4, 1e-2, 1.0] {
            let a = &k + DMatrix::identity(200, 200) * noise;
            let (_, rep) = cg_solve(|v| &a * v, &b, None, 1e-8, 4000).unwrap();
            assert!(rep.converged);
            assert!(
                rep.iterations <= last,
                "noise {noise}: {} > {last}",
                rep.iterations
            );
            last = rep.iterations;
        }
    }

    #[test]
    fn incremental_matches_batch_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_spd(&mut rng, 9);
        let mut inc = IncrementalCholesky::new();
        for i in 0..9 {
            let cross: Vec<f64> = (0..i).map(|j| a[(i, j)]).collect();
            inc.push(&cross, a[(i, i)]).unwrap();
        }
        let batch = cholesky(&a, 0.0).unwrap();
        assert!((inc.to_factor().l() - batch.l()).norm() < 1e-12);
        let b: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
        let x = inc.solve_upper(&inc.solve_lower(&b));
        let direct = batch.solve_vec(&DVector::from_vec(b)).unwrap();
        assert!((DVector::from_vec(x) - direct).norm() < 1e-10);
        let round = IncrementalCholesky::from_factor(&batch);
        assert_eq!(round.len(), 9);
        // Duplicating an existing row is singular.
        let cross: Vec<f64> = (0..9).map(|j| a[(0, j)]).collect();
        assert!(inc.clone().push(&cross, a[(0, 0)]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn trace_residual_monotone_in_rank(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = DMatrix::from_fn(16, 10, |_, _| rng.random::<f64>() - 0.5);
            let a = &b * b.transpose();
            let mut last = f64::INFINITY;
            for r in 1..=16 {
                let t = pivoted_cholesky(&a, r).unwrap().trace_residual(&a);
                prop_assert!(t <= last + 1e-10);
                prop_assert!(t >= -1e-10);
                last = t;
            }
            prop_assert!(last.abs() < 1e-8);
        }

        #[test]
        fn cholesky_reconstructs(seed in 0u64..1000, n in 1usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(&mut rng, n);
            let f = cholesky(&a, 0.0).unwrap();
            prop_assert!((f.reconstruct() - &a).norm() / a.norm() < n as f64 * 1e-8);
            let s = psd_sqrt(&a).unwrap();
            prop_assert!((&s - s.transpose()).amax() < 1e-10);
        }
    }
}
