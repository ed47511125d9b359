//! Parallel Thompson sampling on functions drawn from a GP prior.
//!
//! The black box is a single prior draw, revealed lazily: each query is
//! drawn from the exact conditional given all earlier query values, then
//! observed with Gaussian noise. Round 0 queries `batch_size` uniform
//! points; every later round fits the posterior to all observations and
//! queries the minimizers of `batch_size` posterior draws.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use pathwise_core::conditioning::{
    gaussian_update, posterior_moments, Dataset, SolverChoice, WeightSpaceUpdate,
};
use pathwise_core::linalg::cholesky;
use pathwise_core::prior::{
    build_rff_basis, sample_exact, sample_exact_conditional, sample_prior_path, PathBasis,
    SamplePath,
};
use pathwise_core::{Kernel, KernelFamily};

use crate::config::{config_hash, stream};
use crate::error::{BenchError, Result};
use crate::report::Table;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// RFF prior plus the kernel-space Gaussian update, optimized by
    /// multistart gradient descent.
    Pathwise,
    /// Joint posterior draws on a random candidate set.
    LocationScale,
    /// Bayesian linear model on `num_features + n` random Fourier features.
    WeightSpace,
    /// Uniform random queries.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThompsonConfig {
    #[serde(default)]
    pub seed: u64,
    pub dim: usize,
    pub strategy: Strategy,
    pub rounds: usize,
    pub batch_size: usize,
    #[serde(default = "default_kernel")]
    pub kernel: KernelFamily,
    /// Defaults to `sqrt(dim / 100)`.
    #[serde(default)]
    pub lengthscale: Option<f64>,
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
    #[serde(default = "default_features")]
    pub num_features: usize,
    #[serde(default = "default_discretization")]
    pub num_discretization: usize,
    #[serde(default = "default_starts")]
    pub num_starts: usize,
    #[serde(default = "default_steps")]
    pub num_steps: usize,
    /// Initial step length as a multiple of the lengthscale.
    #[serde(default = "default_step_scale")]
    pub step_scale: f64,
    #[serde(default = "default_candidates")]
    pub num_candidates: usize,
    #[serde(default)]
    pub record_timing: bool,
}

fn default_kernel() -> KernelFamily {
    KernelFamily::Matern52
}
fn default_noise() -> f64 {
    1e-3
}
fn default_features() -> usize {
    1024
}
fn default_discretization() -> usize {
    1024
}
fn default_starts() -> usize {
    32
}
fn default_steps() -> usize {
    100
}
fn default_step_scale() -> f64 {
    0.1
}
fn default_candidates() -> usize {
    2048
}

impl ThompsonConfig {
    pub fn new(
        dim: usize,
        strategy: Strategy,
        rounds: usize,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        ThompsonConfig {
            seed,
            dim,
            strategy,
            rounds,
            batch_size,
            kernel: default_kernel(),
            lengthscale: None,
            noise_variance: default_noise(),
            num_features: default_features(),
            num_discretization: default_discretization(),
            num_starts: default_starts(),
            num_steps: default_steps(),
            step_scale: default_step_scale(),
            num_candidates: default_candidates(),
            record_timing: false,
        }
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale.unwrap_or((self.dim as f64 / 100.0).sqrt())
    }

    pub fn kernel(&self) -> Result<Kernel> {
        Ok(Kernel::isotropic(
            self.kernel,
            self.dim,
            self.lengthscale(),
            1.0,
        )?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.dim == 0 || self.batch_size == 0 {
            return bad("dim and batch_size must be positive");
        }
        if !(self.noise_variance > 0.0) {
            return bad("noise_variance must be positive");
        }
        if self.num_starts == 0 || self.num_discretization < self.num_starts {
            return bad("need 0 < num_starts <= num_discretization");
        }
        if self.num_features == 0 || self.num_candidates == 0 || !(self.step_scale > 0.0) {
            return bad("num_features, num_candidates and step_scale must be positive");
        }
        self.kernel()?;
        Ok(())
    }
}

pub const COLUMNS: [&str; 5] = [
    "round",
    "evaluations",
    "best_value",
    "wall_time_s",
    "fallbacks",
];

/// Lazily revealed prior draw with noisy observations.
pub struct BlackBox {
    k: Kernel,
    x: DMatrix<f64>,
    f: DVector<f64>,
    noise_sd: f64,
}

impl BlackBox {
    pub fn new(k: Kernel, noise_variance: f64) -> Self {
        let d = k.dim();
        BlackBox {
            k,
            x: DMatrix::zeros(0, d),
            f: DVector::zeros(0),
            noise_sd: noise_variance.sqrt(),
        }
    }

    /// Reveals `f` at the rows of `points`; returns `(f, y)`.
    pub fn query(
        &mut self,
        points: &DMatrix<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let f = if self.x.nrows() == 0 {
            sample_exact(&self.k, points, 1, rng)?.row(0).transpose()
        } else {
            sample_exact_conditional(&self.k, &self.x, &self.f, points, rng)?
        };
        let n = self.x.nrows();
        let mut x = self.x.clone().resize_vertically(n + points.nrows(), 0.0);
        x.rows_mut(n, points.nrows()).copy_from(points);
        self.x = x;
        self.f = self.f.clone().resize_vertically(n + f.len(), 0.0);
        self.f.rows_mut(n, f.len()).copy_from(&f);
        let y = f.map(|v| v + self.noise_sd * Distribution::<f64>::sample(&StandardNormal, rng));
        Ok((f, y))
    }

    pub fn best(&self) -> f64 {
        self.f.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn uniform(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random::<f64>())
}

/// Result of a multistart minimization.
#[derive(Clone, Debug)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub value: f64,
    /// True when every descent diverged and the best discretization point was
    /// returned instead.
    pub fell_back: bool,
}

/// Minimizes a path over `[0, 1]^d`: evaluates `num_discretization` random
/// points, starts normalized-gradient descent from the best `num_starts`, and
/// halves the step whenever a step fails to decrease the value.
pub fn multistart_minimize<P: SamplePath + ?Sized>(
    path: &P,
    cfg: &ThompsonConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Minimum> {
    let d = path.dim();
    let cand = uniform(cfg.num_discretization, d, rng);
    let vals = path.eval(&cand)?;
    let mut order: Vec<usize> = (0..cand.nrows()).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let fallback = Minimum {
        point: cand.row(order[0]).iter().copied().collect(),
        value: vals[order[0]],
        fell_back: true,
    };
    let mut best: Option<Minimum> = None;
    let eval_at =
        |x: &[f64]| -> Result<f64> { Ok(path.eval(&DMatrix::from_row_slice(1, d, x))?[0]) };
    for &s in order.iter().take(cfg.num_starts) {
        let mut x: Vec<f64> = cand.row(s).iter().copied().collect();
        let mut fx = vals[s];
        let mut step = cfg.step_scale * cfg.lengthscale();
        let mut diverged = false;
        for _ in 0..cfg.num_steps {
            let g = path.gradient(&x)?;
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                diverged = true;
                break;
            }
            if norm == 0.0 {
                break;
            }
            let xn: Vec<f64> = x
                .iter()
                .zip(&g)
                .map(|(xi, gi)| (xi - step * gi / norm).clamp(0.0, 1.0))
                .collect();
            let fnew = eval_at(&xn)?;
            if !fnew.is_finite() {
                diverged = true;
                break;
            }
            if fnew < fx {
                x = xn;
                fx = fnew;
            } else {
                step *= 0.5;
            }
        }
        if !diverged && fx.is_finite() && best.as_ref().is_none_or(|b| fx < b.value) {
            best = Some(Minimum {
                point: x,
                value: fx,
                fell_back: false,
            });
        }
    }
    Ok(best.unwrap_or(fallback))
}

/// Chooses the next batch of queries; returns the points and the number of
/// optimizer fallbacks.
fn propose(
    cfg: &ThompsonConfig,
    k: &Kernel,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, usize)> {
    let d = cfg.dim;
    let kappa = cfg.batch_size;
    let mut out = DMatrix::zeros(kappa, d);
    let mut fallbacks = 0;
    match cfg.strategy {
        Strategy::Random => return Ok((uniform(kappa, d, rng), 0)),
        Strategy::Pathwise => {
            let basis: PathBasis = build_rff_basis(k, cfg.num_features, rng)?.into();
            for (i, prior) in sample_prior_path(&basis, kappa, rng)
                .into_iter()
                .enumerate()
            {
                let post = gaussian_update(prior, k, data, &SolverChoice::DirectCholesky, rng)?;
                let m = multistart_minimize(&post, cfg, rng)?;
                fallbacks += m.fell_back as usize;
                out.row_mut(i).copy_from_slice(&m.point);
            }
        }
        Strategy::WeightSpace => {
            let basis: PathBasis = build_rff_basis(k, cfg.num_features + data.len(), rng)?.into();
            let upd = WeightSpaceUpdate::new(&basis, data)?;
            let sd = data.noise_variance().sqrt();
            for (i, prior) in sample_prior_path(&basis, kappa, rng)
                .into_iter()
                .enumerate()
            {
                let eps = DVector::from_fn(data.len(), |_, _| {
                    sd * Distribution::<f64>::sample(&StandardNormal, rng)
                });
                let post = upd.apply(&prior, &eps)?;
                let m = multistart_minimize(&post, cfg, rng)?;
                fallbacks += m.fell_back as usize;
                out.row_mut(i).copy_from_slice(&m.point);
            }
        }
        Strategy::LocationScale => {
            let cand = uniform(cfg.num_candidates, d, rng);
            let post = posterior_moments(k, data, &cand)?;
            let jitter = 1e-6 * post.covariance.diagonal().mean().abs();
            let f = cholesky(&post.covariance, jitter)?;
            let z = DMatrix::from_fn(cand.nrows(), kappa, |_, _| StandardNormal.sample(rng));
            let draws = f.l() * z;
            for i in 0..kappa {
                let col = draws.column(i) + &post.mean;
                out.row_mut(i).copy_from(&cand.row(col.argmin().0));
            }
        }
    }
    Ok((out, fallbacks))
}

/// Runs `rounds` rounds after the random initial round. Returns one row per
/// round (including round 0) with the best noise-free value found so far.
pub fn run_thompson(cfg: &ThompsonConfig) -> Result<Table> {
    cfg.validate()?;
    let mut table = Table::new("thompson", config_hash(cfg)?, cfg.seed, &COLUMNS);
    let k = cfg.kernel()?;
    let mut box_rng = stream(cfg.seed, &[10]);
    let mut rng = stream(cfg.seed, &[11]);
    let mut bb = BlackBox::new(k.clone(), cfg.noise_variance);
    let start = Instant::now();
    let init = uniform(cfg.batch_size, cfg.dim, &mut box_rng);
    let (_, mut ys) = bb.query(&init, &mut box_rng)?;
    let mut xs = init;
    let elapsed = |t: &Instant| {
        if cfg.record_timing {
            t.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    table.push(vec![
        0usize.into(),
        xs.nrows().into(),
        bb.best().into(),
        elapsed(&start).into(),
        0usize.into(),
    ]);
    for round in 1..=cfg.rounds {
        let data = Dataset::new(xs.clone(), ys.clone(), cfg.noise_variance)?;
        let (q, fallbacks) = propose(cfg, &k, &data, &mut rng)?;
        let (_, y) = bb.query(&q, &mut box_rng)?;
        let n = xs.nrows();
        xs = xs.resize_vertically(n + q.nrows(), 0.0);
        xs.rows_mut(n, q.nrows()).copy_from(&q);
        ys = ys.resize_vertically(n + y.len(), 0.0);
        ys.rows_mut(n, y.len()).copy_from(&y);
        table.push(vec![
            round.into(),
            xs.nrows().into(),
            bb.best().into(),
            elapsed(&start).into(),
            fallbacks.into(),
        ]);
    }
    Ok(table)
}

/// Final best value of a run.
pub fn final_best(table: &Table) -> f64 {
    table
        .float(table.rows().len() - 1, "best_value")
        .unwrap_or(f64::NAN)
}
