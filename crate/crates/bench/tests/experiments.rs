use pathwise_bench::accuracy::{run_accuracy_cost, AccuracyConfig, PriorKind, UpdateKind};
use pathwise_bench::config::stream;
use pathwise_bench::median;
use pathwise_bench::sde::{ground_truth, simulate_sde, SdeConfig};
use pathwise_bench::thompson::{run_thompson, Strategy, ThompsonConfig};
use pathwise_core::KernelFamily;

fn accuracy_cfg(prior: PriorKind, update: UpdateKind) -> AccuracyConfig {
    AccuracyConfig {
        seed: 11,
        kernel: KernelFamily::SquaredExponential,
        lengthscale: 0.2,
        variance: 1.0,
        dim: 1,
        n_train: vec![8],
        n_test: 16,
        num_features: 64,
        num_inducing: 4,
        noise_variance: 1e-2,
        samples: 20_000,
        repeats: 5,
        priors: vec![prior],
        updates: vec![update],
        record_timing: false,
    }
}

#[test]
fn exact_gaussian_sampler_sits_at_the_monte_carlo_floor() {
    let t = run_accuracy_cost(&accuracy_cfg(PriorKind::Exact, UpdateKind::Gaussian)).unwrap();
    let (w2, floor) = (t.float(0, "w2").unwrap(), t.float(0, "w2_floor").unwrap());
    assert!(w2 <= 1.5 * floor, "{w2} vs floor {floor}");
}

#[test]
fn rff_canonical_error_shrinks_as_features_double() {
    let mut meds = vec![];
    // Many test points and few noise-free observations, so the distance is
    // not dominated by the near-null directions of the posterior covariance.
    for l in [16, 32, 64, 128, 256] {
        let w2: Vec<f64> = (0..8)
            .map(|seed| {
                let mut cfg = accuracy_cfg(PriorKind::Rff, UpdateKind::Canonical);
                cfg.num_features = l;
                cfg.n_train = vec![4];
                cfg.n_test = 64;
                cfg.repeats = 1;
                cfg.seed = seed;
                run_accuracy_cost(&cfg).unwrap().float(0, "w2").unwrap()
            })
            .collect();
        meds.push(median(w2));
    }
    assert!(meds.windows(2).all(|w| w[1] < w[0]), "{meds:?}");
}

#[test]
fn cg_sampler_is_as_accurate_as_direct() {
    let cfg = AccuracyConfig {
        updates: vec![UpdateKind::Gaussian, UpdateKind::GaussianCg],
        ..accuracy_cfg(PriorKind::Exact, UpdateKind::Gaussian)
    };
    let t = run_accuracy_cost(&cfg).unwrap();
    for row in 0..2 {
        let (w2, floor) = (
            t.float(row, "w2").unwrap(),
            t.float(row, "w2_floor").unwrap(),
        );
        assert!(w2 <= 1.5 * floor, "row {row}: {w2} vs floor {floor}");
    }
}

#[test]
fn thompson_round_zero_is_random_search() {
    let a = run_thompson(&ThompsonConfig::new(2, Strategy::Pathwise, 0, 3, 4)).unwrap();
    let b = run_thompson(&ThompsonConfig::new(2, Strategy::Random, 0, 3, 4)).unwrap();
    assert_eq!(a.float(0, "best_value"), b.float(0, "best_value"));
}

#[test]
fn thompson_is_reproducible() {
    let mut cfg = ThompsonConfig::new(2, Strategy::Pathwise, 3, 2, 9);
    cfg.num_features = 128;
    let a = run_thompson(&cfg).unwrap().to_csv();
    assert_eq!(a, run_thompson(&cfg).unwrap().to_csv());
    cfg.seed = 10;
    assert_ne!(a, run_thompson(&cfg).unwrap().to_csv());
}

#[test]
fn ground_truth_oscillates() {
    let cfg = SdeConfig::default();
    let mut truth = ground_truth(&cfg);
    let trajs = simulate_sde(&mut truth, &cfg, 8, &mut stream(12, &[])).unwrap();
    for t in trajs {
        assert_eq!(t.states.len(), 1001);
        let v: Vec<f64> = t.states[300..].iter().map(|s| s[0]).collect();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo > 2.0 * 0.5, "amplitude {}", (hi - lo) / 2.0);
    }
}
