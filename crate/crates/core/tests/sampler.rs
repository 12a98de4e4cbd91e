use proptest::prelude::*;
use thermo_diffusion::data::DatasetSpec;
use thermo_diffusion::sampler::{controlled_forward_ensemble, reverse_sample};
use thermo_diffusion::stats::Moments;
use thermo_diffusion::*;

fn terminal_moments(e: &TrajectoryEnsemble<f64>, coord: usize) -> Moments<f64> {
    let mut m = Moments::new();
    for p in 0..e.paths {
        m.push(e.terminal(p)[coord]);
    }
    m
}

fn exact(p: &Process, spec: DatasetSpec<f64>) -> Field {
    ScoreField::exact_for(&spec.prepare().unwrap(), p).unwrap()
}

#[test]
fn gaussian_reverse_recovers_standard_normal() {
    for p in [Process::ve(10.0, 1).unwrap(), Process::vp(10.0, 0.5, 1).unwrap()] {
        let f = exact(&p, DatasetSpec::standard_gaussian(1));
        let e = reverse_sample(&p, &f, 512, &SamplerConfig::with_steps(512), 3).unwrap();
        let m = terminal_moments(&e, 0);
        let sd = m.variance().sqrt();
        assert!(m.mean().abs() <= 4.0 * sd / 512f64.sqrt(), "{:?}: mean {}", p.kind, m.mean());
        assert!((0.85..=1.15).contains(&m.variance()), "{:?}: variance {}", p.kind, m.variance());
    }
}

#[test]
fn uniform_reverse_recovers_the_cube() {
    let p = Process::ve(10.0, 1).unwrap();
    let f = exact(&p, DatasetSpec::uniform(1));
    let e = reverse_sample(&p, &f, 512, &SamplerConfig::with_steps(512), 8).unwrap();
    let m = terminal_moments(&e, 0);
    // Standard error of the mean for Uniform[0, 1] is (1/√12)/√512.
    assert!((m.mean() - 0.5).abs() <= 4.0 / (12f64.sqrt() * 512f64.sqrt()), "mean {}", m.mean());
    assert!((0.8 / 12.0..=1.2 / 12.0).contains(&m.variance()), "variance {}", m.variance());
    let inside = (0..e.paths).filter(|&i| (-0.05..=1.05).contains(&e.terminal(i)[0])).count();
    assert!(inside as f64 >= 0.99 * e.paths as f64, "{inside} of {}", e.paths);
}

#[test]
fn zero_field_only_accumulates_noise() {
    let p = Process::ve(10.0, 2).unwrap();
    let e = reverse_sample(&p, &ScoreField::zero(&p), 4096, &SamplerConfig::with_steps(64), 1).unwrap();
    for i in 0..2 {
        let m = terminal_moments(&e, i);
        // Backward pure diffusion adds v(t_max) − v(t_min) on top of the prior draw.
        let added = p.variance_increment(SamplerConfig::default().t_max).unwrap() - p.variance_increment(1e-4).unwrap();
        let expect = p.prior_variance() + added;
        assert!(m.variance() >= p.prior_variance());
        assert!((m.variance() / expect - 1.0).abs() < 0.1, "{} vs {expect}", m.variance());
    }
}

#[test]
fn controlled_forward_is_the_time_reflected_reverse_run() {
    let p = Process::vp(15.0, 0.3, 2).unwrap();
    let f = exact(&p, DatasetSpec::standard_gaussian(2));
    let cfg = SamplerConfig { steps: 40, record_every: 4, ..SamplerConfig::default() };
    let r = reverse_sample(&p, &f, 16, &cfg, 6).unwrap();
    let c = controlled_forward_ensemble(&p, &f, 16, &cfg, 6).unwrap();
    assert_eq!(r.states, c.states);
    assert_eq!(r.clock, Clock::T);
    assert_eq!(c.clock, Clock::Tau);
    for (t, tau) in r.times.iter().zip(&c.times) {
        assert!((t + tau - 1.0).abs() < 1e-15);
    }
    assert!(c.times.windows(2).all(|w| w[1] > w[0]));
    for (a, b) in c.forward_times().iter().zip(&r.times) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn controlled_marginal_variance_falls_toward_the_data() {
    let p = Process::ve(10.0, 1).unwrap();
    let f = exact(&p, DatasetSpec::standard_gaussian(1));
    let cfg = SamplerConfig { steps: 512, record_every: 32, ..SamplerConfig::default() };
    let e = controlled_forward_ensemble(&p, &f, 4096, &cfg, 2).unwrap();
    let vars: Vec<f64> = (0..e.times.len()).map(|k| Moments::from_slice(&e.slice_at(k)).variance()).collect();
    assert!(vars.windows(2).all(|w| w[1] < w[0]), "{vars:?}");
    assert!((vars[0] / p.prior_variance() - 1.0).abs() < 0.05);
    assert!((vars.last().unwrap() - 1.0).abs() < 0.1);
}

#[test]
fn ensemble_marginal_matches_the_analytic_marginal() {
    let p = Process::ve(10.0, 2).unwrap();
    let data = DatasetSpec::standard_gaussian(2).prepare().unwrap();
    let f = ScoreField::exact_for(&data, &p).unwrap();
    let cfg = SamplerConfig { steps: 512, record_every: 256, ..SamplerConfig::default() };
    let e = controlled_forward_ensemble(&p, &f, 8192, &cfg, 4).unwrap();
    let t = e.forward_times()[1];
    assert!((t - 0.5).abs() < 1e-12);
    let norms = |xs: &[f64]| -> Estimate<f64> {
        let v: Vec<f64> = xs.chunks(2).map(|x| f.score(x, t).unwrap().iter().map(|s| s * s).sum()).collect();
        Estimate::from_samples(&v).unwrap()
    };
    let traj = norms(&e.slice_at(1));
    let analytic = norms(&data.marginal_batch(&p, t, 8192, 4, 0).unwrap());
    let z = (traj.value - analytic.value) / traj.stderr.hypot(analytic.stderr);
    assert!(z.abs() <= 4.0, "{traj:?} vs {analytic:?}");
}

#[test]
fn euler_maruyama_has_weak_order_one() {
    // Data N(1, 1), VE σ = 10, exact score. Terminal mean and variance of the
    // continuous reverse process come from the moment ODEs, integrated by RK4.
    let p = Process::ve(10.0, 1).unwrap();
    let mu = 1.0;
    let f = exact(&p, DatasetSpec::GaussianProduct { mean: vec![mu], variance: vec![1.0] });
    let base = SamplerConfig::default();
    let (t_hi, t_lo) = (base.t_max, base.t_min);
    let coef = |t: f64| (p.g_squared(t).unwrap(), 1.0 + p.variance_increment(t).unwrap());
    // In forward time t running down: dm/dt = g²(m − μ)/w, dV/dt = 2g²V/w − g².
    let rhs = |t: f64, (m, v): (f64, f64)| {
        let (g2, w) = coef(t);
        (g2 * (m - mu) / w, 2.0 * g2 * v / w - g2)
    };
    let n = 200_000;
    let h = -(t_hi - t_lo) / n as f64;
    let mut y = (0.0, p.prior_variance());
    let add = |a: (f64, f64), b: (f64, f64), s: f64| (a.0 + s * b.0, a.1 + s * b.1);
    for k in 0..n {
        let t = t_hi + k as f64 * h;
        let k1 = rhs(t, y);
        let k2 = rhs(t + 0.5 * h, add(y, k1, 0.5 * h));
        let k3 = rhs(t + 0.5 * h, add(y, k2, 0.5 * h));
        let k4 = rhs(t + h, add(y, k3, h));
        y = add(y, (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0, k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1), h / 6.0);
    }
    let (mean_ref, var_ref) = y;

    let paths = 1_000_000;
    let errs: Vec<(f64, f64)> = [8, 16, 32]
        .iter()
        .map(|&steps| {
            let cfg = SamplerConfig { steps, record_every: steps, ..SamplerConfig::default() };
            let e = reverse_sample(&p, &f, paths, &cfg, 11).unwrap();
            let m = terminal_moments(&e, 0);
            ((m.mean() - mean_ref).abs(), (m.variance() - var_ref).abs())
        })
        .collect();
    for w in errs.windows(2) {
        let (rm, rv) = (w[0].0 / w[1].0, w[0].1 / w[1].1);
        assert!((1.5..=3.0).contains(&rm), "mean errors {errs:?}");
        assert!((1.5..=3.0).contains(&rv), "variance errors {errs:?}");
    }
}

#[test]
fn seeded_ensembles_repeat() {
    let p = Process::ve(10.0, 3).unwrap();
    let f = exact(&p, DatasetSpec::uniform(3));
    let cfg = SamplerConfig::with_steps(32);
    let a = reverse_sample(&p, &f, 50, &cfg, 77).unwrap();
    assert_eq!(a, reverse_sample(&p, &f, 50, &cfg, 77).unwrap());
    assert_ne!(a.states, reverse_sample(&p, &f, 50, &cfg, 78).unwrap().states);
    let fewer = reverse_sample(&p, &f, 20, &cfg, 77).unwrap();
    assert_eq!(fewer.states[..], a.states[..fewer.states.len()]);
}

#[test]
fn mismatched_process_is_rejected() {
    let p = Process::ve(10.0, 1).unwrap();
    let q = Process::ve(20.0, 1).unwrap();
    assert!(matches!(reverse_sample(&p, &ScoreField::zero(&q), 4, &SamplerConfig::with_steps(4), 0), Err(Error::ProcessMismatch)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn binary_format_roundtrips(paths in 0usize..6, d in 1usize..4, steps in 1usize..10, seed in 0u64..1000) {
        let p = Process::ve(10.0, d).unwrap();
        let f = exact(&p, DatasetSpec::standard_gaussian(d));
        let e = controlled_forward_ensemble(&p, &f, paths, &SamplerConfig::with_steps(steps), seed).unwrap();
        let mut buf = Vec::new();
        e.write_binary(&mut buf).unwrap();
        prop_assert_eq!(TrajectoryEnsemble::<f64>::read_binary(&buf[..]).unwrap(), e.clone());
        prop_assert!(e.states.iter().all(|v| v.is_finite()));
        prop_assert!(buf.len() > 8);
        let cut = buf.len() - 1;
        prop_assert!(TrajectoryEnsemble::<f64>::read_binary(&buf[..cut]).is_err());
    }
}
