//! Accuracy versus cost of posterior samplers.
//!
//! For each training-set size, draws a training set from the prior, computes
//! the exact posterior at random test locations, and compares `samples`
//! draws of each (prior, update) combination against it in 2-Wasserstein
//! distance between Gaussians. The Monte Carlo floor is the same distance
//! for an equally sized batch of exact posterior draws.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use pathwise_core::conditioning::{
    posterior_moments, Dataset, GaussianMoments, PathUpdate, SolverChoice, WeightSpaceUpdate,
};
use pathwise_core::metrics::{empirical_moments, w2_gaussian, SampleBatch};
use pathwise_core::prior::{build_rff_basis, sample_exact, PathBasis, PriorPath};
use pathwise_core::{Kernel, KernelFamily};

use crate::config::{config_hash, stream};
use crate::error::{BenchError, Result};
use crate::median;
use crate::report::{Cell, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Exact,
    Rff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Canonical,
    Gaussian,
    GaussianCg,
    Sparse,
    PseudoData,
    WeightSpace,
}

impl PriorKind {
    fn name(self) -> &'static str {
        match self {
            PriorKind::Exact => "exact",
            PriorKind::Rff => "rff",
        }
    }
}

impl UpdateKind {
    fn name(self) -> &'static str {
        match self {
            UpdateKind::Canonical => "canonical",
            UpdateKind::Gaussian => "gaussian",
            UpdateKind::GaussianCg => "gaussian_cg",
            UpdateKind::Sparse => "sparse",
            UpdateKind::PseudoData => "pseudo_data",
            UpdateKind::WeightSpace => "weight_space",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyConfig {
    #[serde(default)]
    pub seed: u64,
    pub kernel: KernelFamily,
    pub lengthscale: f64,
    #[serde(default = "one")]
    pub variance: f64,
    pub dim: usize,
    pub n_train: Vec<usize>,
    pub n_test: usize,
    pub num_features: usize,
    /// Inducing locations for the sparse and pseudo-data updates.
    pub num_inducing: usize,
    pub noise_variance: f64,
    pub samples: usize,
    #[serde(default = "one_usize")]
    pub repeats: usize,
    pub priors: Vec<PriorKind>,
    pub updates: Vec<UpdateKind>,
    #[serde(default)]
    pub record_timing: bool,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl AccuracyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.dim == 0 || self.n_test == 0 || self.repeats == 0 {
            return bad("dim, n_test and repeats must be positive");
        }
        if self.samples < 2 {
            return bad("samples must be at least 2");
        }
        if self.n_train.is_empty() || self.n_train.contains(&0) {
            return bad("n_train must list positive sizes");
        }
        if !(self.noise_variance > 0.0) {
            return bad(
                "noise_variance must be positive (the canonical update uses noise-free data)",
            );
        }
        if self.num_features == 0 || self.num_inducing == 0 {
            return bad("num_features and num_inducing must be positive");
        }
        Kernel::isotropic(self.kernel, self.dim, self.lengthscale, self.variance)?;
        Ok(())
    }
}

pub const COLUMNS: [&str; 10] = [
    "prior",
    "update",
    "n_train",
    "samples",
    "num_features",
    "w2",
    "w2_floor",
    "time_cached_s",
    "time_uncached_s",
    "status",
];

struct Problem {
    k: Kernel,
    noisy: Dataset,
    clean: Dataset,
    xs: DMatrix<f64>,
    z: DMatrix<f64>,
}

fn uniform(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random::<f64>())
}

fn normals(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn problem(cfg: &AccuracyConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Problem> {
    let k = Kernel::isotropic(cfg.kernel, cfg.dim, cfg.lengthscale, cfg.variance)?;
    let x = uniform(n, cfg.dim, rng);
    let f = sample_exact(&k, &x, 1, rng)?.row(0).transpose();
    let sd = cfg.noise_variance.sqrt();
    let y = DVector::from_fn(n, |i, _| {
        f[i] + sd * Distribution::<f64>::sample(&StandardNormal, rng)
    });
    let xs = uniform(cfg.n_test, cfg.dim, rng);
    let z = uniform(cfg.num_inducing, cfg.dim, rng);
    Ok(Problem {
        noisy: Dataset::new(x.clone(), y, cfg.noise_variance)?,
        clean: Dataset::new(x, f, 0.0)?,
        k,
        xs,
        z,
    })
}

/// A prepared sampler: everything that can be cached across draws.
struct Prepared {
    centers: DMatrix<f64>,
    update: Option<PathUpdate>,
    weight_space: Option<WeightSpaceUpdate>,
    /// Per-draw targets are `targets + root·z` (noise or inducing draws).
    targets: DVector<f64>,
    root: DMatrix<f64>,
    negate: bool,
}

fn prepare(
    p: &Problem,
    update: UpdateKind,
    basis: Option<&PathBasis>,
    m: usize,
) -> Result<Prepared> {
    let n = p.noisy.len();
    let direct = SolverChoice::DirectCholesky;
    let diag_root = |v: f64, len: usize| DMatrix::from_diagonal_element(len, len, v.sqrt());
    Ok(match update {
        UpdateKind::Canonical => Prepared {
            centers: p.clean.x().clone(),
            update: Some(PathUpdate::new(
                &p.k,
                p.clean.x().clone(),
                DVector::zeros(n),
                &direct,
            )?),
            weight_space: None,
            targets: p.clean.y().clone(),
            root: DMatrix::zeros(n, n),
            negate: false,
        },
        UpdateKind::Gaussian | UpdateKind::GaussianCg => {
            let solver = if update == UpdateKind::Gaussian {
                direct
            } else {
                SolverChoice::cg_default(n)
            };
            let noise = DVector::from_element(n, p.noisy.noise_variance());
            Prepared {
                centers: p.noisy.x().clone(),
                update: Some(PathUpdate::new(&p.k, p.noisy.x().clone(), noise, &solver)?),
                weight_space: None,
                targets: p.noisy.y().clone(),
                root: diag_root(p.noisy.noise_variance(), n),
                negate: true,
            }
        }
        UpdateKind::Sparse => {
            let q = posterior_moments(&p.k, &p.noisy, &p.z)?;
            let root = pathwise_core::linalg::psd_sqrt(&q.covariance)?;
            Prepared {
                centers: p.z.clone(),
                update: Some(PathUpdate::new(
                    &p.k,
                    p.z.clone(),
                    DVector::zeros(p.z.nrows()),
                    &direct,
                )?),
                weight_space: None,
                targets: q.mean,
                root,
                negate: false,
            }
        }
        UpdateKind::PseudoData => {
            let rows: Vec<usize> = (0..m.min(n)).collect();
            let z = p.noisy.x().select_rows(&rows);
            let y = p.noisy.y().select_rows(&rows);
            let noise = DVector::from_element(rows.len(), p.noisy.noise_variance());
            Prepared {
                update: Some(PathUpdate::new(&p.k, z.clone(), noise, &direct)?),
                centers: z,
                weight_space: None,
                targets: y,
                root: diag_root(p.noisy.noise_variance(), rows.len()),
                negate: true,
            }
        }
        UpdateKind::WeightSpace => {
            let basis = basis.ok_or(pathwise_core::Error::Unsupported(
                "weight-space update needs a finite basis prior",
            ))?;
            Prepared {
                centers: p.noisy.x().clone(),
                update: None,
                weight_space: Some(WeightSpaceUpdate::new(basis, &p.noisy)?),
                targets: p.noisy.y().clone(),
                root: diag_root(p.noisy.noise_variance(), n),
                negate: true,
            }
        }
    })
}

/// `samples` posterior draws at the test locations, one per row.
fn draw_batch(
    p: &Problem,
    prep: &Prepared,
    prior: PriorKind,
    basis: Option<&PathBasis>,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let c = prep.centers.nrows();
    let s = p.xs.nrows();
    if let Some(ws) = &prep.weight_space {
        let basis = basis.expect("weight-space prepared without a basis");
        let phi_s = basis.features(&p.xs)?;
        let mut out = DMatrix::zeros(samples, s);
        for i in 0..samples {
            let w = DVector::from_fn(basis.num_features(), |_, _| StandardNormal.sample(rng));
            let eps = &prep.root * DVector::from_fn(c, |_, _| StandardNormal.sample(rng));
            let post = ws.apply(&PriorPath::new(basis.clone(), w)?, &eps)?;
            out.row_mut(i)
                .copy_from(&(&phi_s * post.weights()).transpose());
        }
        return Ok(out);
    }
    let all = DMatrix::from_fn(c + s, p.xs.ncols(), |i, j| {
        if i < c {
            prep.centers[(i, j)]
        } else {
            p.xs[(i - c, j)]
        }
    });
    // (c + s) × samples prior values.
    let f = match prior {
        PriorKind::Exact => sample_exact(&p.k, &all, samples, rng)?.transpose(),
        PriorKind::Rff => {
            let basis = basis.expect("rff prior without a basis");
            basis.features(&all)? * normals(basis.num_features(), samples, rng)
        }
    };
    let draws = &prep.root * normals(c, samples, rng);
    let mut rhs = DMatrix::from_fn(c, samples, |i, j| prep.targets[i] - f[(i, j)]);
    if prep.negate {
        rhs -= &draws;
    } else {
        rhs += &draws;
    }
    let upd = prep.update.as_ref().expect("kernel-space update");
    let v = upd.solve_many(&rhs)?;
    let kxc = p.k.eval(&p.xs, &prep.centers)?;
    Ok((f.rows(c, s) + kxc * v).transpose())
}

struct Outcome {
    w2: f64,
    floor: f64,
    cached: f64,
    uncached: f64,
}

fn run_one(
    cfg: &AccuracyConfig,
    p: &Problem,
    truth_noisy: &GaussianMoments,
    truth_clean: &GaussianMoments,
    prior: PriorKind,
    update: UpdateKind,
    rng: &mut ChaCha8Rng,
) -> Result<Outcome> {
    let basis: Option<PathBasis> = match prior {
        PriorKind::Rff => Some(build_rff_basis(&p.k, cfg.num_features, rng)?.into()),
        PriorKind::Exact => None,
    };
    if update == UpdateKind::WeightSpace && prior == PriorKind::Exact {
        return Err(pathwise_core::Error::Unsupported(
            "weight-space update needs a finite basis prior",
        )
        .into());
    }
    let t0 = Instant::now();
    let prep = prepare(p, update, basis.as_ref(), cfg.num_inducing)?;
    let build = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let values = draw_batch(p, &prep, prior, basis.as_ref(), cfg.samples, rng)?;
    let sampling = t1.elapsed().as_secs_f64();
    let truth = if update == UpdateKind::Canonical {
        truth_clean
    } else {
        truth_noisy
    };
    let emp = empirical_moments(&SampleBatch::new(values, p.xs.clone())?);
    let w2 = w2_gaussian(&emp, truth)?;
    let reference = truth.sample(cfg.samples, rng)?;
    let floor = w2_gaussian(
        &empirical_moments(&SampleBatch::new(reference, p.xs.clone())?),
        truth,
    )?;
    let (cached, uncached) = if cfg.record_timing {
        (build + sampling, sampling + build * cfg.samples as f64)
    } else {
        (0.0, 0.0)
    };
    Ok(Outcome {
        w2,
        floor,
        cached,
        uncached,
    })
}

/// Runs the sweep and returns one row per (prior, update, n_train) with
/// medians over repeats. A failing combination yields a row whose status is
/// the error tag and whose numeric columns are NaN.
pub fn run_accuracy_cost(cfg: &AccuracyConfig) -> Result<Table> {
    cfg.validate()?;
    let mut table = Table::new("accuracy-cost", config_hash(cfg)?, cfg.seed, &COLUMNS);
    for (ni, &n) in cfg.n_train.iter().enumerate() {
        let mut results: Vec<Vec<Result<Outcome>>> = vec![];
        for r in 0..cfg.repeats {
            let mut rng = stream(cfg.seed, &[1, ni as u64, r as u64]);
            let p = problem(cfg, n, &mut rng)?;
            let truth_noisy = posterior_moments(&p.k, &p.noisy, &p.xs)?;
            let truth_clean = posterior_moments(&p.k, &p.clean, &p.xs)?;
            let mut row = vec![];
            for (pi, &prior) in cfg.priors.iter().enumerate() {
                for (ui, &update) in cfg.updates.iter().enumerate() {
                    let mut rng = stream(cfg.seed, &[2, ni as u64, r as u64, pi as u64, ui as u64]);
                    row.push(run_one(
                        cfg,
                        &p,
                        &truth_noisy,
                        &truth_clean,
                        prior,
                        update,
                        &mut rng,
                    ));
                }
            }
            results.push(row);
        }
        let mut idx = 0;
        for &prior in &cfg.priors {
            for &update in &cfg.updates {
                let outcomes: Vec<&Result<Outcome>> = results.iter().map(|row| &row[idx]).collect();
                idx += 1;
                let mut cells: Vec<Cell> = vec![
                    prior.name().into(),
                    update.name().into(),
                    n.into(),
                    cfg.samples.into(),
                ];
                cells.push(if prior == PriorKind::Rff {
                    cfg.num_features.into()
                } else {
                    0usize.into()
                });
                if let Some(Err(e)) = outcomes.iter().find(|o| o.is_err()) {
                    cells.extend([
                        f64::NAN.into(),
                        f64::NAN.into(),
                        f64::NAN.into(),
                        f64::NAN.into(),
                    ]);
                    cells.push(e.kind().into());
                } else {
                    let ok: Vec<&Outcome> =
                        outcomes.iter().map(|o| o.as_ref().ok().unwrap()).collect();
                    let med = |f: fn(&Outcome) -> f64| median(ok.iter().map(|o| f(o)).collect());
                    cells.push(med(|o| o.w2).into());
                    cells.push(med(|o| o.floor).into());
                    cells.push(med(|o| o.cached).into());
                    cells.push(med(|o| o.uncached).into());
                    cells.push("ok".into());
                }
                table.push(cells);
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AccuracyConfig {
        AccuracyConfig {
            seed: 3,
            kernel: KernelFamily::SquaredExponential,
            lengthscale: 0.3,
            variance: 1.0,
            dim: 1,
            n_train: vec![4],
            n_test: 8,
            num_features: 64,
            num_inducing: 4,
            noise_variance: 1e-2,
            samples: 2000,
            repeats: 1,
            priors: vec![PriorKind::Exact, PriorKind::Rff],
            updates: vec![UpdateKind::Gaussian, UpdateKind::WeightSpace],
            record_timing: false,
        }
    }

    #[test]
    fn rows_cover_the_grid_and_tag_failures() {
        let t = run_accuracy_cost(&cfg()).unwrap();
        assert_eq!(t.rows().len(), 4);
        let status: Vec<String> = t
            .rows()
            .iter()
            .map(|r| match &r[9] {
                Cell::Text(s) => s.clone(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(status, ["ok", "unsupported", "ok", "ok"]);
        assert!(t.float(1, "w2").unwrap().is_nan());
        assert_eq!(t.float(0, "time_cached_s"), Some(0.0));
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = run_accuracy_cost(&cfg()).unwrap().to_csv();
        let b = run_accuracy_cost(&cfg()).unwrap().to_csv();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = cfg();
        c.samples = 1;
        assert!(matches!(run_accuracy_cost(&c), Err(BenchError::Config(_))));
        let mut c = cfg();
        c.n_train = vec![];
        assert!(c.validate().is_err());
    }
}
