//! Acceptance gate: one test per criterion, each printing a PASS line
//! (run with `--nocapture` to see them) and enforcing the pinned
//! tolerances and runtime budgets.

use std::time::{Duration, Instant};

use fedrate_core::ceo_sim::{simulate_ceo, simulate_dithered_quantizer, StepPolicy};
use fedrate_core::fl_planner::{
    bits_per_iteration, convergence_bound, min_iterations, ConvexProblemParams, DConvention,
};
use fedrate_core::fl_sim::{make_problem, run_many, EstimatorConfig, ProblemKind};
use fedrate_core::problem::ProblemSpec;
use fedrate_core::rate_region::{
    check_membership, classic_comparison_sum_rate, subset_rate_bound, sum_rate_closed_form,
    sum_rate_numeric, waterfill_noise_rates, DistortionAllocation, MembershipOptions,
    NumericOptions, RateAllocation, RatePoint, Verdict,
};
use fedrate_core::rng::Stream;
use fedrate_core::unit::RateUnit;

/// Deterministic uniform draw in `[lo, hi)`.
fn uniform(stream: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * (stream.uniform_01() - f64::MIN_POSITIVE).max(0.0)
}

/// 1. On identical instances the general numeric solver reproduces the
/// closed-form sum rate to 1e-6 relative, across random shapes and a
/// feasible distortion grid. Budget: 5 s.
#[test]
fn c01_closed_form_equivalence() {
    let start = Instant::now();
    let mut stream = Stream::keyed(0xACCE, &[1]);
    let opts = NumericOptions::default();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = 1 + (stream.next_u64() % 8) as usize;
        let dims = 1 + (stream.next_u64() % 4) as usize;
        let sx = uniform(&mut stream, 0.3, 3.0);
        let sn = uniform(&mut stream, 0.2, 4.0);
        let spec = ProblemSpec::identical(dims, k, sx, sn).unwrap();
        let floor = sn / k as f64;
        for slack in [0.08, 0.5, 1.5, 4.0] {
            let d_dim = floor * (1.0 + slack);
            let closed =
                sum_rate_closed_form(dims, k, sx, sn, d_dim, RateUnit::Bits).unwrap();
            let numeric = sum_rate_numeric(
                &spec,
                d_dim * dims as f64,
                RateUnit::Bits,
                &opts,
            )
            .unwrap()
            .sum_rate;
            let rel = (numeric - closed).abs() / closed.max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            assert!(
                rel <= 1e-6,
                "K={k} P={dims} sx={sx} sn={sn} d={d_dim}: rel err {rel}"
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    println!(
        "PASS  1/10 closed-form equivalence: worst rel err {worst:.2e} over 20 instances x 4 distortions [{:.2?}]",
        elapsed
    );
}

/// Minimum total rate (bits) on the two-device constraint manifold by
/// brute force: two 400-point sweeps (grid one rate, solve the other from
/// the balance equality, and symmetrically) plus the exact single-device
/// corners. Shares no logic with the KKT solver.
fn brute_force_two_device_bits(s1: f64, s2: f64, d: f64) -> f64 {
    let inv_d = 1.0 / d;
    let caps = [1.0 / s1, 1.0 / s2];
    let rate = |sigma_sq: f64, c: f64| -> f64 { -0.5 * (1.0 - sigma_sq * c).log2() };
    let precision = |sigma_sq: f64, r_bits: f64| (1.0 - (-2.0 * r_bits).exp2()) / sigma_sq;
    let mut best = f64::INFINITY;
    // Single-device corners (the other rate exactly zero).
    if inv_d < caps[0] {
        best = best.min(rate(s1, inv_d));
    }
    if inv_d < caps[1] {
        best = best.min(rate(s2, inv_d));
    }
    const POINTS: usize = 400;
    let mut sweep = |sigma_grid: f64, cap_grid: f64, sigma_solved: f64, cap_solved: f64| {
        // Grid rate range: from the smallest precision the constraint can
        // leave this device, up to just below its precision cap.
        let c_lo = (inv_d - cap_solved).max(0.0);
        let c_hi = (cap_grid * (1.0 - 1e-9)).min(inv_d);
        if c_hi <= c_lo {
            return;
        }
        let r_lo = rate(sigma_grid, c_lo);
        let r_hi = rate(sigma_grid, c_hi);
        for i in 1..POINTS {
            let r = r_lo + (r_hi - r_lo) * i as f64 / POINTS as f64;
            let c_other = inv_d - precision(sigma_grid, r);
            if c_other <= 0.0 || c_other >= cap_solved {
                continue;
            }
            best = best.min(r + rate(sigma_solved, c_other));
        }
    };
    sweep(s1, caps[0], s2, caps[1]);
    sweep(s2, caps[1], s1, caps[0]);
    best
}

/// 2. The water-filling solver matches a brute-force manifold minimum to
/// 1e-3 bits over a 10x10x10 grid of two-device instances. Budget: 30 s.
#[test]
fn c02_waterfill_against_brute_force() {
    let start = Instant::now();
    let sigmas: Vec<f64> = (0..10)
        .map(|i| 0.2 * (5.0f64 / 0.2).powf(i as f64 / 9.0))
        .collect();
    let slacks: Vec<f64> = (0..10)
        .map(|i| 0.05 * (8.0f64 / 0.05).powf(i as f64 / 9.0))
        .collect();
    let mut worst = 0.0f64;
    for &s1 in &sigmas {
        for &s2 in &sigmas {
            let spec = ProblemSpec::new(vec![1.0], vec![vec![s1], vec![s2]]).unwrap();
            let floor = 1.0 / (1.0 / s1 + 1.0 / s2);
            for &t in &slacks {
                let d = floor * (1.0 + t);
                let solved = waterfill_noise_rates(&spec, 0, d, RateUnit::Bits).unwrap();
                let kkt: f64 = solved.rates.iter().sum();
                let oracle = brute_force_two_device_bits(s1, s2, d);
                let diff = (kkt - oracle).abs();
                worst = worst.max(diff);
                assert!(
                    diff <= 1e-3,
                    "s=({s1:.3},{s2:.3}) d={d:.4}: kkt {kkt} vs brute force {oracle}"
                );
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    println!(
        "PASS  2/10 water-filling vs brute force: worst gap {worst:.2e} bits over 1000 cells [{:.2?}]",
        elapsed
    );
}

/// 3. Worked two-device instance: noise (1, 4) at distortion 1 splits as
/// exactly (1.5, 0.5) bits, with a balance residual at roundoff.
#[test]
fn c03_worked_instance_exact() {
    let start = Instant::now();
    let spec = ProblemSpec::new(vec![1.0], vec![vec![1.0], vec![4.0]]).unwrap();
    let solved = waterfill_noise_rates(&spec, 0, 1.0, RateUnit::Bits).unwrap();
    assert_eq!(solved.rates, vec![1.5, 0.5]);
    assert!(
        solved.balance_residual.abs() <= 1e-12,
        "residual {}",
        solved.balance_residual
    );
    println!(
        "PASS  3/10 worked instance: rates ({}, {}) bits exactly, residual {:.1e} [{:.2?}]",
        solved.rates[0],
        solved.rates[1],
        solved.balance_residual,
        start.elapsed()
    );
}

/// 4. Membership: the worked certificate's subset bounds match their
/// derived values, the empty subset binds at exactly zero, and the
/// accept/reject examples come out as derived.
#[test]
fn c04_membership_certificates() {
    let start = Instant::now();
    let spec = ProblemSpec::new(vec![1.0], vec![vec![1.0], vec![4.0]]).unwrap();
    let rates_col = [1.5, 0.5];
    let b0 = subset_rate_bound(&spec, 0, &rates_col, 1.0, &[0], RateUnit::Bits).unwrap();
    let b1 = subset_rate_bound(&spec, 0, &rates_col, 1.0, &[1], RateUnit::Bits).unwrap();
    let b01 = subset_rate_bound(&spec, 0, &rates_col, 1.0, &[0, 1], RateUnit::Bits).unwrap();
    let empty = subset_rate_bound(&spec, 0, &rates_col, 1.0, &[], RateUnit::Bits).unwrap();
    assert!((b0 - 1.915_037_499_278_844).abs() < 1e-12, "bound {b0}");
    assert!((b1 - 0.546_554_702_195_740_7).abs() < 1e-12, "bound {b1}");
    assert_eq!(b01, 2.5);
    assert_eq!(empty, 0.0, "empty subset must bind at exactly zero");

    let allocation = DistortionAllocation::new(&spec, vec![1.0], 1.0).unwrap();
    let rates =
        RateAllocation::new(&spec, vec![vec![1.5], vec![0.5]], RateUnit::Bits).unwrap();
    let opts = MembershipOptions::default();
    let accept = check_membership(
        &spec,
        &RatePoint::with_decomposition(vec![2.0, 1.0], vec![vec![2.0], vec![1.0]], RateUnit::Bits)
            .unwrap(),
        &allocation,
        &rates,
        &opts,
    )
    .unwrap();
    assert_eq!(accept.verdict, Verdict::Accept);
    let reject = check_membership(
        &spec,
        &RatePoint::with_decomposition(vec![1.0, 1.0], vec![vec![1.0], vec![1.0]], RateUnit::Bits)
            .unwrap(),
        &allocation,
        &rates,
        &opts,
    )
    .unwrap();
    assert_eq!(reject.verdict, Verdict::Reject);
    assert!(!reject.violations.is_empty());
    println!(
        "PASS  4/10 membership: bounds ({b0:.4}, {b1:.4}, {b01}) bits, empty = 0 exactly, accept/reject as derived [{:.2?}]",
        start.elapsed()
    );
}

/// 5. The unbiasedness premium: at a distortion where classical (biased)
/// estimation is free, the unbiased sum rate stays strictly positive.
#[test]
fn c05_unbiased_rate_stays_positive() {
    let start = Instant::now();
    let mut stream = Stream::keyed(0xACCE, &[5]);
    let mut min_unbiased = f64::INFINITY;
    for _ in 0..10 {
        let k = 1 + (stream.next_u64() % 6) as usize;
        let dims = 1 + (stream.next_u64() % 3) as usize;
        let sx = uniform(&mut stream, 0.5, 2.0);
        // Keep the floor below the target distortion 2 sigma_X^2.
        let sn_hi = (k as f64 * sx).min(4.0);
        let sn = uniform(&mut stream, 0.1, sn_hi);
        let d_dim = 2.0 * sx;
        let unbiased = sum_rate_closed_form(dims, k, sx, sn, d_dim, RateUnit::Bits).unwrap();
        let classic =
            classic_comparison_sum_rate(dims, k, sx, sn, d_dim, RateUnit::Bits).unwrap();
        assert!(
            unbiased > 0.0,
            "K={k} P={dims} sx={sx} sn={sn}: unbiased rate {unbiased}"
        );
        assert_eq!(classic, 0.0, "classical value must be free at D = 2 sigma_X^2");
        min_unbiased = min_unbiased.min(unbiased);
    }
    println!(
        "PASS  5/10 unbiased premium: sum rate >= {min_unbiased:.4} bits on 10 instances where the classical value is 0 [{:.2?}]",
        start.elapsed()
    );
}

/// 6. Monte Carlo achievability on the worked instance: empirical MSE in
/// 1 +/- 4 sqrt(2/n) for at least 19 of 20 seeds, and every conditional
/// bias regression slope within 1%. Budget: 20 s.
#[test]
fn c06_monte_carlo_achievability() {
    let start = Instant::now();
    let spec = ProblemSpec::new(vec![1.0], vec![vec![1.0], vec![4.0]]).unwrap();
    let rates =
        RateAllocation::new(&spec, vec![vec![1.5], vec![0.5]], RateUnit::Bits).unwrap();
    let n = 100_000;
    let tol = 4.0 * (2.0 / n as f64).sqrt();
    let mut hits = 0;
    let mut worst_mse: f64 = 1.0;
    for seed in 1..=20u64 {
        let report = &simulate_ceo(&spec, &rates, n, seed).unwrap()[0];
        if (report.empirical_mse - 1.0).abs() <= tol {
            hits += 1;
        }
        if (report.empirical_mse - 1.0).abs() > (worst_mse - 1.0).abs() {
            worst_mse = report.empirical_mse;
        }
        assert!(
            (0.99..=1.01).contains(&report.bias_slope),
            "seed {seed}: slope {}",
            report.bias_slope
        );
    }
    assert!(hits >= 19, "only {hits}/20 seeds inside 1 +/- {tol:.4}");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(20), "took {elapsed:?}");
    println!(
        "PASS  6/10 Monte Carlo achievability: {hits}/20 seeds in 1 +/- {tol:.4}, worst MSE {worst_mse:.5}, slopes within 1% [{:.2?}]",
        elapsed
    );
}

/// 7. Planner formulas: the worked iteration count, the bound inversion
/// across 100 random draws, and bitwise equality of the per-iteration
/// price with the closed-form sum rate.
#[test]
fn c07_planner_formulas() {
    let start = Instant::now();
    let worked = ConvexProblemParams::new(1.0, 1.0, 1.0).unwrap();
    assert_eq!(min_iterations(&worked, 2.0).unwrap(), 6);

    let mut stream = Stream::keyed(0xACCE, &[7]);
    for _ in 0..100 {
        let params = ConvexProblemParams::new(
            uniform(&mut stream, 0.1, 10.0),
            uniform(&mut stream, 0.01, 50.0),
            uniform(&mut stream, 0.001, 5.0),
        )
        .unwrap();
        let d = uniform(&mut stream, 0.0, 20.0);
        let t = min_iterations(&params, d).unwrap();
        let bound = convergence_bound(&params, d, t).unwrap();
        assert!(
            bound <= params.epsilon * (1.0 + 1e-12),
            "bound {bound} exceeds target {}",
            params.epsilon
        );
    }
    for _ in 0..50 {
        let k = 1 + (stream.next_u64() % 8) as usize;
        let dims = 1 + (stream.next_u64() % 4) as usize;
        let sx = uniform(&mut stream, 0.05, 10.0);
        let sn = uniform(&mut stream, 0.05, 10.0);
        let d = sn / k as f64 * (1.0 + uniform(&mut stream, 0.01, 20.0));
        let bits = bits_per_iteration(sx, sn, k, dims, d, DConvention::PerDimension).unwrap();
        let closed = sum_rate_closed_form(dims, k, sx, sn, d, RateUnit::Bits).unwrap();
        assert!(
            bits == closed,
            "price {bits} differs from closed form {closed} at K={k} P={dims}"
        );
    }
    println!(
        "PASS  7/10 planner formulas: worked T = 6, bound inverted on 100 draws, price == closed form bitwise on 50 draws [{:.2?}]",
        start.elapsed()
    );
}

/// 8. End-to-end convergence: training a quadratic with the idealized
/// distortion-D estimator for T = min_iterations(eps) meets eps in the
/// seed average over 40 seeds. Budget: 60 s.
#[test]
fn c08_training_meets_the_bound() {
    let start = Instant::now();
    let problem = make_problem(ProblemKind::Quadratic, 2, 3.0, 42).unwrap();
    let eps = 0.3;
    let d = 0.5;
    let params = ConvexProblemParams::new(problem.a, problem.l, eps).unwrap();
    let t = min_iterations(&params, d).unwrap();
    assert!(convergence_bound(&params, d, t).unwrap() <= eps);
    let seeds: Vec<u64> = (1..=40).collect();
    let traces = run_many(
        &problem,
        &[],
        &EstimatorConfig::SyntheticNoise { d },
        t,
        &seeds,
    )
    .unwrap();
    let mean = traces.iter().map(|tr| tr.averaged_subopt).sum::<f64>() / seeds.len() as f64;
    assert!(
        mean <= eps,
        "seed-averaged suboptimality {mean} exceeds target {eps} at T = {t}"
    );
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "PASS  8/10 end-to-end convergence: mean suboptimality {mean:.4} <= {eps} over 40 seeds at T = {t} [{:.2?}]",
        elapsed
    );
}

/// 9. Late-training limit: as the gradient second moment vanishes, the
/// per-iteration price converges to the noise-only term within 1e-9.
#[test]
fn c09_late_training_limit() {
    let start = Instant::now();
    let (k, dims, sn, d) = (3usize, 2usize, 1.0, 0.9);
    let limit = -(dims as f64) * (k as f64 / 2.0) * (1.0 - sn / (k as f64 * d)).log2();
    let mut prev_gap = f64::INFINITY;
    for sx in [1e-3, 1e-6, 1e-9, 1e-12] {
        let bits = bits_per_iteration(sx, sn, k, dims, d, DConvention::PerDimension).unwrap();
        let gap = (bits - limit).abs();
        assert!(gap <= prev_gap * (1.0 + 1e-12), "gap grew: {prev_gap} -> {gap}");
        prev_gap = gap;
    }
    assert!(
        prev_gap <= 1e-9,
        "price is {prev_gap:.2e} from the noise-only limit at sigma_X^2 = 1e-12"
    );
    println!(
        "PASS  9/10 late-training limit: within {prev_gap:.1e} of {limit:.6} bits at sigma_X^2 = 1e-12 [{:.2?}]",
        start.elapsed()
    );
}

/// 10. Determinism: identical seeds give bit-identical simulator output
/// regardless of thread-pool size, for all three simulators.
#[test]
fn c10_bit_identical_across_parallelism() {
    let start = Instant::now();
    let spec = ProblemSpec::new(vec![1.0], vec![vec![1.0], vec![4.0]]).unwrap();
    let rates =
        RateAllocation::new(&spec, vec![vec![1.5], vec![0.5]], RateUnit::Bits).unwrap();
    let problem = make_problem(ProblemKind::Quadratic, 2, 2.0, 7).unwrap();
    let seeds: Vec<u64> = (1..=6).collect();

    let run_all = |threads: usize| -> String {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let ceo = simulate_ceo(&spec, &rates, 20_000, 5).unwrap();
            let dither =
                simulate_dithered_quantizer(&spec, &rates, &StepPolicy::default(), 20_000, 5)
                    .unwrap();
            let training = run_many(
                &problem,
                &[],
                &EstimatorConfig::SyntheticNoise { d: 0.5 },
                50,
                &seeds,
            )
            .unwrap();
            format!(
                "{}\n{}\n{}",
                serde_json::to_string(&ceo).unwrap(),
                serde_json::to_string(&dither).unwrap(),
                serde_json::to_string(&training).unwrap()
            )
        })
    };

    let single = run_all(1);
    let quad = run_all(4);
    let again = run_all(4);
    assert!(single == quad, "1-thread and 4-thread outputs differ");
    assert!(quad == again, "repeated 4-thread runs differ");
    println!(
        "PASS 10/10 determinism: {} bytes of simulator output bit-identical across pool sizes 1 and 4 [{:.2?}]",
        single.len(),
        start.elapsed()
    );
}
