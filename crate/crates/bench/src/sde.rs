//! GP-drift simulation of a stochastic FitzHugh–Nagumo neuron.
//!
//! States follow the Euler–Maruyama recursion
//! `x_{t+1} = x_t + τ f(x_t, a_t) + √τ ε_t` with `ε_t ~ N(0, Σ)`.
//! The drift is either the ground truth or a sparse GP fitted to noisy
//! one-step increments. GP rollouts use one of two strategies:
//!
//! * pathwise: each trajectory freezes one posterior drift path per output
//!   (RFF prior plus pseudo-data update) and evaluates it in O(1) per step;
//! * exact: each step draws the next increment from its exact conditional
//!   given the pseudo-data and the trajectory so far, extending a Cholesky
//!   factor by one row per step (O(t²) per step, O(T³) per trajectory).

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use pathwise_core::conditioning::{PathUpdate, PosteriorPath, SolverChoice};
use pathwise_core::linalg::IncrementalCholesky;
use pathwise_core::metrics::{sinkhorn_distance, SampleBatch};
use pathwise_core::prior::{
    build_rff_basis, sample_prior_path, FourierFeatureMap, PathBasis, PriorPath,
};
use pathwise_core::{Error as CoreError, Kernel, KernelFamily};

use crate::config::{config_hash, stream};
use crate::error::{BenchError, Result};
use crate::report::Table;

/// FitzHugh–Nagumo constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FhnParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for FhnParams {
    fn default() -> Self {
        FhnParams {
            alpha: 0.75,
            beta: 0.75,
            gamma: 20.0,
        }
    }
}

pub fn fitzhugh_nagumo_drift_with(x: [f64; 2], a: f64, p: &FhnParams) -> [f64; 2] {
    let [v, w] = x;
    [
        v - v * v * v / 3.0 - w + a,
        (v - p.beta * w + p.alpha) / p.gamma,
    ]
}

/// Tangent `(v − v³/3 − w + a, (v − βw + α)/γ)` with the default constants.
pub fn fitzhugh_nagumo_drift(x: [f64; 2], a: f64) -> [f64; 2] {
    fitzhugh_nagumo_drift_with(x, a, &FhnParams::default())
}

/// The fixed point of the noise-free drift under a constant current `a`.
pub fn rest_point(a: f64, p: &FhnParams) -> [f64; 2] {
    // w = (v + α)/β on the recovery nullcline; solve the cubic by Newton.
    let g = |v: f64| v - v * v * v / 3.0 - (v + p.alpha) / p.beta + a;
    let dg = |v: f64| 1.0 - v * v - 1.0 / p.beta;
    let mut v = -1.0;
    for _ in 0..100 {
        let step = g(v) / dg(v);
        v -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    [v, (v + p.alpha) / p.beta]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Row-major 2×2 diffusion covariance.
    #[serde(default = "default_diffusion")]
    pub diffusion: [f64; 4],
    /// Current injected from step `control_start` on; zero before.
    #[serde(default = "default_control")]
    pub control: f64,
    #[serde(default)]
    pub control_start: usize,
    /// Mean initial state; defaults to the rest point without current.
    #[serde(default)]
    pub initial_state: Option<[f64; 2]>,
    #[serde(default)]
    pub initial_sd: f64,
    /// Pathwise trajectories.
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    /// Trajectories per exact batch (two batches calibrate the noise floor).
    #[serde(default = "default_exact_trajectories")]
    pub exact_trajectories: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_inducing")]
    pub num_inducing: usize,
    /// Matérn-5/2 lengthscales over `(v, w, a)`.
    #[serde(default = "default_lengthscales")]
    pub lengthscales: [f64; 3],
    #[serde(default = "default_features")]
    pub num_features: usize,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<usize>,
    #[serde(default = "default_reg")]
    pub sinkhorn_reg: f64,
    #[serde(default = "default_sinkhorn_iter")]
    pub sinkhorn_max_iter: usize,
    #[serde(default)]
    pub record_timing: bool,
}

fn default_tau() -> f64 {
    0.25
}
fn default_steps() -> usize {
    1000
}
fn default_diffusion() -> [f64; 4] {
    [1e-4, 0.0, 0.0, 1e-4]
}
fn default_control() -> f64 {
    0.5
}
fn default_trajectories() -> usize {
    1000
}
fn default_exact_trajectories() -> usize {
    256
}
fn default_n_train() -> usize {
    256
}
fn default_inducing() -> usize {
    32
}
fn default_lengthscales() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}
fn default_features() -> usize {
    128
}
fn default_checkpoints() -> Vec<usize> {
    vec![250, 500, 1000]
}
fn default_reg() -> f64 {
    pathwise_core::metrics::DEFAULT_SINKHORN_REG
}
fn default_sinkhorn_iter() -> usize {
    5000
}

impl Default for SdeConfig {
    fn default() -> Self {
        crate::config::parse("").expect("defaults parse")
    }
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if !(self.tau > 0.0) || self.steps == 0 {
            return bad("tau must be positive and steps at least 1");
        }
        let [s00, s01, s10, s11] = self.diffusion;
        if s01 != s10 || s00 < 0.0 || s11 < 0.0 || s00 * s11 < s01 * s01 {
            return bad("diffusion must be a symmetric PSD 2x2 matrix");
        }
        if self.initial_sd < 0.0 {
            return bad("initial_sd must be nonnegative");
        }
        Ok(())
    }

    pub fn control_at(&self, t: usize) -> f64 {
        if t >= self.control_start {
            self.control
        } else {
            0.0
        }
    }

    fn diffusion_root(&self) -> [[f64; 2]; 2] {
        let [s00, s01, _, s11] = self.diffusion;
        let l00 = s00.sqrt();
        let l10 = if l00 > 0.0 { s01 / l00 } else { 0.0 };
        let l11 = (s11 - l10 * l10).max(0.0).sqrt();
        [[l00, 0.0], [l10, l11]]
    }

    fn gp_noise(&self) -> Result<[f64; 2]> {
        if self.diffusion[1] != 0.0 {
            return Err(CoreError::Unsupported("GP drift models need a diagonal diffusion").into());
        }
        if !(self.diffusion[0] > 0.0 && self.diffusion[3] > 0.0) {
            return Err(CoreError::Unsupported("GP drift models need a positive diffusion").into());
        }
        Ok([self.diffusion[0] / self.tau, self.diffusion[3] / self.tau])
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn diffusion_step(root: &[[f64; 2]; 2], tau: f64, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let (z0, z1) = (normal(rng), normal(rng));
    let s = tau.sqrt();
    [s * root[0][0] * z0, s * (root[1][0] * z0 + root[1][1] * z1)]
}

/// One random dynamical system per trajectory.
pub trait Dynamics {
    /// Begins a new trajectory (fresh drift draw where applicable).
    fn start(&mut self, rng: &mut ChaCha8Rng) -> Result<()>;

    /// `x_{t+1} − x_t` given the state and current.
    fn increment(&mut self, x: [f64; 2], a: f64, rng: &mut ChaCha8Rng) -> Result<[f64; 2]>;
}

/// A fixed drift function with Euler–Maruyama diffusion.
pub struct KnownDrift<F> {
    drift: F,
    tau: f64,
    root: [[f64; 2]; 2],
}

impl<F: FnMut([f64; 2], f64) -> [f64; 2]> KnownDrift<F> {
    pub fn new(drift: F, cfg: &SdeConfig) -> Self {
        KnownDrift {
            drift,
            tau: cfg.tau,
            root: cfg.diffusion_root(),
        }
    }
}

impl<F: FnMut([f64; 2], f64) -> [f64; 2]> Dynamics for KnownDrift<F> {
    fn start(&mut self, _rng: &mut ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    fn increment(&mut self, x: [f64; 2], a: f64, rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
        let f = (self.drift)(x, a);
        let e = diffusion_step(&self.root, self.tau, rng);
        Ok([self.tau * f[0] + e[0], self.tau * f[1] + e[1]])
    }
}

pub fn ground_truth(cfg: &SdeConfig) -> KnownDrift<impl FnMut([f64; 2], f64) -> [f64; 2]> {
    KnownDrift::new(fitzhugh_nagumo_drift, cfg)
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<[f64; 2]>,
    /// Set when the state overflowed and the trajectory was cut short.
    pub truncated: bool,
}

const OVERFLOW: f64 = 1e6;

/// Simulates `count` trajectories of `cfg.steps` steps, one drift draw and
/// one noise stream each.
pub fn simulate_sde(
    dynamics: &mut dyn Dynamics,
    cfg: &SdeConfig,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let x0 = cfg
        .initial_state
        .unwrap_or_else(|| rest_point(0.0, &FhnParams::default()));
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        dynamics.start(rng)?;
        let mut x = [
            x0[0] + cfg.initial_sd * normal(rng),
            x0[1] + cfg.initial_sd * normal(rng),
        ];
        let mut states = Vec::with_capacity(cfg.steps + 1);
        states.push(x);
        let mut truncated = false;
        for t in 0..cfg.steps {
            let dx = dynamics.increment(x, cfg.control_at(t), rng)?;
            x = [x[0] + dx[0], x[1] + dx[1]];
            if !x.iter().all(|v| v.is_finite() && v.abs() < OVERFLOW) {
                truncated = true;
                break;
            }
            states.push(x);
        }
        out.push(Trajectory { states, truncated });
    }
    Ok(out)
}

/// Independent sparse GPs (one per state component) over `(v, w, a)`,
/// conditioned on pseudo-data subsampled from noisy one-step increments.
#[derive(Clone, Debug)]
pub struct DriftModel {
    pub kernels: [Kernel; 2],
    pub z: DMatrix<f64>,
    pub targets: [DVector<f64>; 2],
    pub noise: [f64; 2],
}

/// Training inputs are uniform on `[−2.5, 2.5] × [−1, 2] × [0, 1]`; targets
/// are `(x' − x)/τ` from one ground-truth step. The first `num_inducing`
/// pairs become the pseudo-data, with noise variance `Σᵢᵢ/τ`.
pub fn fit_drift_model(cfg: &SdeConfig, rng: &mut ChaCha8Rng) -> Result<DriftModel> {
    cfg.validate()?;
    let noise = cfg.gp_noise()?;
    if cfg.num_inducing == 0 || cfg.num_inducing > cfg.n_train {
        return Err(BenchError::Config(
            "need 0 < num_inducing <= n_train".into(),
        ));
    }
    let mut truth = ground_truth(cfg);
    let n = cfg.n_train;
    let mut x = DMatrix::zeros(n, 3);
    let mut y = [DVector::zeros(n), DVector::zeros(n)];
    for i in 0..n {
        let s = [rng.random_range(-2.5..2.5), rng.random_range(-1.0..2.0)];
        let a = rng.random_range(0.0..1.0);
        x[(i, 0)] = s[0];
        x[(i, 1)] = s[1];
        x[(i, 2)] = a;
        let dx = truth.increment(s, a, rng)?;
        y[0][i] = dx[0] / cfg.tau;
        y[1][i] = dx[1] / cfg.tau;
    }
    let m = cfg.num_inducing;
    let rows: Vec<usize> = (0..m).collect();
    let z = x.select_rows(&rows);
    let targets = [y[0].select_rows(&rows), y[1].select_rows(&rows)];
    let kernel = |t: &DVector<f64>| -> Result<Kernel> {
        let mean = t.mean();
        let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
        Ok(Kernel::new(
            KernelFamily::Matern52,
            cfg.lengthscales.to_vec(),
            var.max(1e-6),
        )?)
    };
    Ok(DriftModel {
        kernels: [kernel(&targets[0])?, kernel(&targets[1])?],
        z,
        targets,
        noise,
    })
}

/// A posterior path over a Fourier-feature prior, unpacked for
/// allocation-free single-point evaluation.
#[derive(Clone, Debug)]
pub struct FrozenPath {
    frequencies: Vec<f64>,
    phases: Vec<f64>,
    weights: Vec<f64>,
    centers: Vec<f64>,
    coefficients: Vec<f64>,
    kernel: Kernel,
    dim: usize,
}

impl FrozenPath {
    pub fn new(path: &PosteriorPath<PriorPath>) -> Result<Self> {
        let PathBasis::Fourier(map) = path.prior().basis() else {
            return Err(CoreError::Unsupported("frozen paths need a Fourier basis").into());
        };
        if path.prior().has_mean() {
            return Err(CoreError::Unsupported("frozen paths carry no mean function").into());
        }
        let dim = map.dim();
        let l = map.num_features();
        let freq = map.frequencies();
        Ok(FrozenPath {
            frequencies: (0..l)
                .flat_map(|j| (0..dim).map(move |c| 2.0 * PI * freq[(j, c)]))
                .collect(),
            phases: map.phases().iter().copied().collect(),
            weights: path
                .prior()
                .weights()
                .iter()
                .map(|w| w * map.amplitude())
                .collect(),
            centers: (0..path.centers().nrows())
                .flat_map(|i| (0..dim).map(move |c| path.centers()[(i, c)]))
                .collect(),
            coefficients: path.coefficients().iter().copied().collect(),
            kernel: path.kernel().clone(),
            dim,
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let mut prior = 0.0;
        for ((om, ph), w) in self
            .frequencies
            .chunks_exact(d)
            .zip(&self.phases)
            .zip(&self.weights)
        {
            let dot: f64 = om.iter().zip(x).map(|(a, b)| a * b).sum();
            prior += w * (dot + ph).cos();
        }
        let update: f64 = self
            .centers
            .chunks_exact(d)
            .zip(&self.coefficients)
            .map(|(z, c)| c * self.kernel.value(x, z))
            .sum();
        prior + update
    }
}

/// Pathwise rollouts: RFF prior plus pseudo-data update, frozen per
/// trajectory.
pub struct PathwiseGp {
    model: DriftModel,
    bases: [PathBasis; 2],
    updates: [PathUpdate; 2],
    current: Vec<FrozenPath>,
    tau: f64,
    root: [[f64; 2]; 2],
}

impl PathwiseGp {
    /// When both outputs have the same kernel family and lengthscales they
    /// share one set of frequencies and phases (with independent weights),
    /// so each step evaluates the cosines once.
    pub fn new(model: &DriftModel, cfg: &SdeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let [k0, k1] = &model.kernels;
        let first = build_rff_basis(k0, cfg.num_features, rng)?;
        let second = if shares_spectrum(k0, k1) {
            FourierFeatureMap::from_parts(
                k1.clone(),
                first.frequencies().clone(),
                first.phases().clone(),
            )?
        } else {
            build_rff_basis(k1, cfg.num_features, rng)?
        };
        let mk_update = |i: usize| -> Result<PathUpdate> {
            let noise = DVector::from_element(model.z.nrows(), model.noise[i]);
            Ok(PathUpdate::new(
                &model.kernels[i],
                model.z.clone(),
                noise,
                &SolverChoice::DirectCholesky,
            )?)
        };
        Ok(PathwiseGp {
            model: model.clone(),
            bases: [first.into(), second.into()],
            updates: [mk_update(0)?, mk_update(1)?],
            current: Vec::new(),
            tau: cfg.tau,
            root: cfg.diffusion_root(),
        })
    }
}

fn shares_spectrum(a: &Kernel, b: &Kernel) -> bool {
    a.family() == b.family() && a.lengthscales() == b.lengthscales()
}

/// Evaluates two frozen paths at one point, reusing the cosines and kernel
/// profiles when their frequencies, phases and centers coincide.
pub fn eval_pair(paths: &[FrozenPath], x: &[f64]) -> [f64; 2] {
    let (a, b) = (&paths[0], &paths[1]);
    if a.frequencies != b.frequencies
        || a.phases != b.phases
        || a.centers != b.centers
        || !shares_spectrum(&a.kernel, &b.kernel)
    {
        return [a.eval(x), b.eval(x)];
    }
    let d = a.dim;
    let (mut fa, mut fb) = (0.0, 0.0);
    for (((om, ph), wa), wb) in a
        .frequencies
        .chunks_exact(d)
        .zip(&a.phases)
        .zip(&a.weights)
        .zip(&b.weights)
    {
        let dot: f64 = om.iter().zip(x).map(|(u, v)| u * v).sum();
        let c = (dot + ph).cos();
        fa += wa * c;
        fb += wb * c;
    }
    let scale = b.kernel.variance() / a.kernel.variance();
    for ((z, ca), cb) in a
        .centers
        .chunks_exact(d)
        .zip(&a.coefficients)
        .zip(&b.coefficients)
    {
        let k = a.kernel.value(x, z);
        fa += ca * k;
        fb += cb * k * scale;
    }
    [fa, fb]
}

impl Dynamics for PathwiseGp {
    fn start(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        self.current.clear();
        for i in 0..2 {
            let prior = sample_prior_path(&self.bases[i], 1, rng)
                .pop()
                .expect("one path");
            let sd = self.model.noise[i].sqrt();
            let eps = DVector::from_fn(self.model.z.nrows(), |_, _| sd * normal(rng));
            let post = self.updates[i].apply(prior, &self.model.targets[i] - &eps, eps)?;
            self.current.push(FrozenPath::new(&post)?);
        }
        Ok(())
    }

    fn increment(&mut self, x: [f64; 2], a: f64, rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
        let f = eval_pair(&self.current, &[x[0], x[1], a]);
        let e = diffusion_step(&self.root, self.tau, rng);
        Ok([self.tau * f[0] + e[0], self.tau * f[1] + e[1]])
    }
}

#[derive(Clone, Debug)]
struct ExactState {
    factor: IncrementalCholesky,
    /// `L⁻¹ y` for the conditioned observations.
    whitened: Vec<f64>,
    points: Vec<f64>,
}

/// Exact rollouts: every increment is drawn from its conditional given the
/// pseudo-data and the earlier increments of the same trajectory.
pub struct ExactGp {
    kernels: [Kernel; 2],
    noise: [f64; 2],
    base: [ExactState; 2],
    current: Vec<ExactState>,
    tau: f64,
}

impl ExactGp {
    pub fn new(model: &DriftModel, cfg: &SdeConfig) -> Result<Self> {
        let mk = |i: usize| -> Result<ExactState> {
            let k = &model.kernels[i];
            let mut st = ExactState {
                factor: IncrementalCholesky::new(),
                whitened: Vec::new(),
                points: Vec::new(),
            };
            for r in 0..model.z.nrows() {
                let p: Vec<f64> = model.z.row(r).iter().copied().collect();
                push_observation(
                    &mut st,
                    k,
                    model.noise[i],
                    &p,
                    Some(model.targets[i][r]),
                    0.0,
                )?;
            }
            Ok(st)
        };
        Ok(ExactGp {
            kernels: model.kernels.clone(),
            noise: model.noise,
            base: [mk(0)?, mk(1)?],
            current: Vec::new(),
            tau: cfg.tau,
        })
    }
}

/// Appends an observation at `p`. With `value = None` the observation is
/// drawn from its conditional using the standard normal `z` and returned.
fn push_observation(
    st: &mut ExactState,
    k: &Kernel,
    noise: f64,
    p: &[f64],
    value: Option<f64>,
    z: f64,
) -> Result<f64> {
    let d = p.len();
    let cross: Vec<f64> = st.points.chunks_exact(d).map(|q| k.value(q, p)).collect();
    let diag = k.value(p, p) + noise;
    let l = st.factor.push(&cross, diag)?;
    let sd = (diag - l.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let mean: f64 = l.iter().zip(&st.whitened).map(|(a, b)| a * b).sum();
    let (y, w) = match value {
        Some(y) => (y, (y - mean) / sd),
        None => (mean + sd * z, z),
    };
    st.whitened.push(w);
    st.points.extend_from_slice(p);
    Ok(y)
}

impl Dynamics for ExactGp {
    fn start(&mut self, _rng: &mut ChaCha8Rng) -> Result<()> {
        self.current = self.base.to_vec();
        Ok(())
    }

    fn increment(&mut self, x: [f64; 2], a: f64, rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
        let p = [x[0], x[1], a];
        let mut out = [0.0; 2];
        for (i, o) in out.iter_mut().enumerate() {
            let z = normal(rng);
            *o = self.tau
                * push_observation(
                    &mut self.current[i],
                    &self.kernels[i],
                    self.noise[i],
                    &p,
                    None,
                    z,
                )?;
        }
        Ok(out)
    }
}

/// States at step `t` of the trajectories that reached it, as `k × 2`.
pub fn states_at(trajs: &[Trajectory], t: usize) -> DMatrix<f64> {
    let alive: Vec<&[f64; 2]> = trajs.iter().filter_map(|tr| tr.states.get(t)).collect();
    DMatrix::from_fn(alive.len(), 2, |i, j| alive[i][j])
}

pub const COLUMNS: [&str; 9] = [
    "t",
    "pathwise_vs_exact",
    "exact_vs_exact",
    "ratio",
    "pathwise_s_per_traj",
    "exact_s_per_traj",
    "speedup",
    "pathwise_truncated",
    "exact_truncated",
];

/// Fits the drift model, runs `trajectories` pathwise rollouts and two
/// batches of `exact_trajectories` exact rollouts, and compares the state
/// clouds at each checkpoint. The pathwise cloud is compared on its first
/// `exact_trajectories` members so both distances use equal batch sizes.
/// The speedup is the ratio of per-trajectory wall times.
pub fn run_sde(cfg: &SdeConfig) -> Result<Table> {
    cfg.validate()?;
    if cfg.exact_trajectories < 2 || cfg.trajectories < cfg.exact_trajectories {
        return Err(BenchError::Config(
            "need 2 <= exact_trajectories <= trajectories".into(),
        ));
    }
    if cfg.checkpoints.iter().any(|&t| t > cfg.steps) {
        return Err(BenchError::Config(
            "checkpoints must not exceed steps".into(),
        ));
    }
    let mut table = Table::new("sde", config_hash(cfg)?, cfg.seed, &COLUMNS);
    let model = fit_drift_model(cfg, &mut stream(cfg.seed, &[20]))?;

    let t0 = Instant::now();
    let mut rng = stream(cfg.seed, &[21]);
    let mut pathwise = PathwiseGp::new(&model, cfg, &mut rng)?;
    let pw = simulate_sde(&mut pathwise, cfg, cfg.trajectories, &mut rng)?;
    let pw_time = t0.elapsed().as_secs_f64() / cfg.trajectories as f64;

    let t1 = Instant::now();
    let mut exact = ExactGp::new(&model, cfg)?;
    let ex_a = simulate_sde(
        &mut exact,
        cfg,
        cfg.exact_trajectories,
        &mut stream(cfg.seed, &[22]),
    )?;
    let ex_time = t1.elapsed().as_secs_f64() / cfg.exact_trajectories as f64;
    let ex_b = simulate_sde(
        &mut exact,
        cfg,
        cfg.exact_trajectories,
        &mut stream(cfg.seed, &[23]),
    )?;

    let (pw_s, ex_s, speedup) = if cfg.record_timing {
        (pw_time, ex_time, ex_time / pw_time)
    } else {
        (0.0, 0.0, f64::NAN)
    };
    let count = |t: &[Trajectory]| t.iter().filter(|x| x.truncated).count();
    let cloud = |t: &[Trajectory], s: usize| SampleBatch::from_points(states_at(t, s));
    for &t in &cfg.checkpoints {
        let pw_cloud = cloud(&pw[..cfg.exact_trajectories], t)?;
        let a = cloud(&ex_a, t)?;
        let b = cloud(&ex_b, t)?;
        let d_pw = sinkhorn_distance(&pw_cloud, &a, cfg.sinkhorn_reg, cfg.sinkhorn_max_iter)?;
        let floor = sinkhorn_distance(&b, &a, cfg.sinkhorn_reg, cfg.sinkhorn_max_iter)?;
        table.push(vec![
            t.into(),
            d_pw.into(),
            floor.into(),
            (d_pw / floor).into(),
            pw_s.into(),
            ex_s.into(),
            speedup.into(),
            count(&pw).into(),
            (count(&ex_a) + count(&ex_b)).into(),
        ]);
    }
    Ok(table)
}
