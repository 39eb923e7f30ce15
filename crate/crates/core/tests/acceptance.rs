//! End-to-end acceptance checks for the whole crate. Each test covers one
//! numbered criterion and prints a single PASS/FAIL verdict line (visible
//! with `cargo test --test acceptance -- --nocapture`).
//!
//! Every check is fully deterministic: all randomness flows from fixed seeds
//! through counter-based generators, so these are regression tests, not
//! flaky statistical tests.

use aggmom::chain::{generate_random_chain, TransitionMatrix};
use aggmom::estimators::{
    error_metric, estimate_cls, estimate_mom, estimate_mom_nonstationary, EstimatorKind,
};
use aggmom::experiments::{
    aggregate_by_tk, derive_seed, fit_loglog_slope, run_sweep, write_records, AggregateRow,
    ExperimentConfig,
};
use aggmom::linalg::Matrix;
use aggmom::noise::{apply_noise_ensemble, NoiseModel, NoiseSpec};
use aggmom::simulate::{realization_rng, simulate_ensemble, Ensemble};
use std::time::{Duration, Instant};

fn verdict(name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {}: {} ({})",
        name,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
    assert!(pass, "acceptance {} failed: {}", name, detail);
}

/// The (S, concentration) grid shared by the closed-form criteria.
fn chain_grid() -> Vec<(usize, f64)> {
    vec![(2, 0.5), (5, 0.5), (10, 0.5), (2, 5.0), (5, 5.0), (10, 5.0)]
}

const POPULATION_GRID: [u64; 4] = [1, 10, 100, 10_000];

#[test]
fn a01_second_moment_identity_recovers_the_transition_matrix() {
    let start = Instant::now();
    let grid = chain_grid();
    let mut rng = realization_rng(4, 0);
    let mut worst = 0.0f64;
    for c in 0..50 {
        let (s, d) = grid[c % grid.len()];
        let p = generate_random_chain(s, d, &mut rng).unwrap();
        for &n in &POPULATION_GRID {
            let mom = p.analytic_moments(n).unwrap();
            let recovered = mom.lambda0.invert().unwrap().matmul(&mom.lambda1).unwrap();
            worst = worst.max(recovered.max_abs_diff(p.matrix()));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "01 second-moment identity",
        worst < 1e-9 && elapsed < Duration::from_secs(1),
        &format!(
            "max |Lambda0^-1 Lambda1 - P| = {:.2e}, {:?}",
            worst, elapsed
        ),
    );
}

#[test]
fn a02_closed_form_inverse_matches_numerical_inversion() {
    let start = Instant::now();
    let grid = chain_grid();
    let mut rng = realization_rng(4, 0);
    let mut worst = 0.0f64;
    for c in 0..50 {
        let (s, d) = grid[c % grid.len()];
        let p = generate_random_chain(s, d, &mut rng).unwrap();
        for &n in &POPULATION_GRID {
            let mom = p.analytic_moments(n).unwrap();
            let closed = mom.lambda0_inverse().unwrap();
            let numeric = mom.lambda0.invert().unwrap();
            worst = worst.max(closed.max_abs_diff(&numeric));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "02 closed-form second-moment inverse",
        worst < 1e-10 && elapsed < Duration::from_secs(1),
        &format!("max |closed - numeric| = {:.2e}, {:?}", worst, elapsed),
    );
}

const MC_SEED: u64 = 0x30303;
const MC_K: usize = 100_000;

fn monte_carlo_ensemble() -> (TransitionMatrix, Ensemble) {
    let p =
        generate_random_chain(3, 5.0, &mut realization_rng(derive_seed(MC_SEED, 0, 1), 0)).unwrap();
    let ens = simulate_ensemble(&p, 50, 2, MC_K, None, derive_seed(MC_SEED, 0, 2)).unwrap();
    (p, ens)
}

/// Worst |empirical - target| / SE over per-realization samples of one
/// statistic; `sample(k)` yields the statistic for realization `k`.
fn worst_z(k: usize, target: f64, sample: impl Fn(usize) -> f64) -> f64 {
    let n = k as f64;
    let mut mean = 0.0;
    for idx in 0..k {
        mean += sample(idx);
    }
    mean /= n;
    let mut var = 0.0;
    for idx in 0..k {
        let d = sample(idx) - mean;
        var += d * d;
    }
    var /= n - 1.0;
    let se = (var / n).sqrt();
    if se == 0.0 {
        if (mean - target).abs() == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (mean - target).abs() / se
    }
}

#[test]
fn a03_simulated_count_moments_match_the_closed_forms() {
    let start = Instant::now();
    let (p, ens) = monte_carlo_ensemble();
    let mom = p.analytic_moments(50).unwrap();
    let series = ens.series();
    let at = |k: usize, t: usize, i: usize| series[k].row(t)[i];
    let mut z = 0.0f64;
    for i in 0..3 {
        z = z.max(worst_z(MC_K, mom.m[i], |k| at(k, 0, i)));
        for j in 0..3 {
            let (mi, mj) = (mom.m[i], mom.m[j]);
            z = z.max(worst_z(MC_K, mom.sigma0.get(i, j), |k| {
                (at(k, 0, i) - mi) * (at(k, 0, j) - mj)
            }));
            z = z.max(worst_z(MC_K, mom.sigma1.get(i, j), |k| {
                (at(k, 0, i) - mi) * (at(k, 1, j) - mj)
            }));
            z = z.max(worst_z(MC_K, mom.lambda0.get(i, j), |k| {
                at(k, 0, i) * at(k, 0, j)
            }));
            z = z.max(worst_z(MC_K, mom.lambda1.get(i, j), |k| {
                at(k, 0, i) * at(k, 1, j)
            }));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "03 simulated moments",
        z <= 3.0 && elapsed < Duration::from_secs(30),
        &format!("worst |empirical-analytic| = {:.2} SE, {:?}", z, elapsed),
    );
}

#[test]
fn a04_latent_moments_recovered_through_detection_noise() {
    let start = Instant::now();
    let (p, ens) = monte_carlo_ensemble();
    let mom = p.analytic_moments(50).unwrap();
    let cases: [(&str, Vec<f64>); 2] = [
        ("binomial:0.5", vec![0.5; 3]),
        ("state_binomial:0.9,0.5,0.2", vec![0.9, 0.5, 0.2]),
    ];
    let mut z = 0.0f64;
    for (case_idx, (spec_text, alphas)) in cases.iter().enumerate() {
        let model = NoiseSpec::parse(spec_text).unwrap().build(3).unwrap();
        let noisy = apply_noise_ensemble(
            &model,
            &ens,
            &mut realization_rng(derive_seed(MC_SEED, case_idx as u64, 3), 0),
        )
        .unwrap();
        let series = noisy.series();
        // per-realization recovered counts: divide by the detection rate
        let rec = |k: usize, t: usize, i: usize| series[k].row(t)[i] / alphas[i];
        for i in 0..3 {
            z = z.max(worst_z(MC_K, mom.m[i], |k| rec(k, 0, i)));
            for j in 0..3 {
                let (mi, mj) = (mom.m[i], mom.m[j]);
                z = z.max(worst_z(MC_K, mom.sigma1.get(i, j), |k| {
                    (rec(k, 0, i) - mi) * (rec(k, 1, j) - mj)
                }));
                z = z.max(worst_z(MC_K, mom.lambda1.get(i, j), |k| {
                    rec(k, 0, i) * rec(k, 1, j)
                }));
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "04 latent-moment recovery under noise",
        z <= 3.0 && elapsed < Duration::from_secs(60),
        &format!("worst |recovered-analytic| = {:.2} SE, {:?}", z, elapsed),
    );
}

/// Seed for the shared 10-state chain behind the convergence-rate and
/// plateau checks. The decay/plateau rates under test are properties of a
/// given chain, so both tests condition on one chain with every state
/// carrying usable stationary mass; this is the smallest RNG-stream seed
/// whose draw keeps all stationary masses above 5e-3 (low-concentration
/// rows routinely park some state below 1/(N*T*K), where any estimator is
/// data-starved and mean errors stop reflecting the sampling rate).
const RATE_CHAIN_SEED: u64 = 1;

fn rate_chain() -> TransitionMatrix {
    generate_random_chain(10, 0.5, &mut realization_rng(RATE_CHAIN_SEED, 0)).unwrap()
}

/// Mean raw error of one estimator over `trials` fresh data draws from
/// `chain` at (t, k), with noise applied and the matching model handed to
/// the estimator.
fn mean_error_at(
    chain: &TransitionMatrix,
    model: &NoiseModel,
    t: usize,
    k: usize,
    trials: u64,
    tag_base: u64,
    estimator: EstimatorKind,
) -> f64 {
    let mut mean = 0.0;
    for trial in 0..trials {
        let tag = tag_base + trial;
        let ens = simulate_ensemble(chain, 100, t, k, None, derive_seed(RATE_CHAIN_SEED, tag, 1))
            .unwrap();
        let noisy = apply_noise_ensemble(
            model,
            &ens,
            &mut realization_rng(derive_seed(RATE_CHAIN_SEED, tag, 2), 0),
        )
        .unwrap();
        let est = match estimator {
            EstimatorKind::Mom => estimate_mom(&noisy, model, 100.0).unwrap(),
            EstimatorKind::Cls => estimate_cls(&noisy).unwrap(),
            _ => unreachable!("rate checks only exercise mom and cls"),
        };
        mean += error_metric(&est.p_raw, chain).unwrap() / trials as f64;
    }
    mean
}

#[test]
fn a05_error_decays_like_one_over_total_observations() {
    let start = Instant::now();
    let chain = rate_chain();
    let cells: [(usize, usize); 4] = [(1000, 1), (10_000, 1), (10_000, 10), (10_000, 100)];
    let mut detail = String::new();
    let mut pass = true;
    for (ni, noise_text) in ["none", "binomial:0.75", "binomial:0.5"].iter().enumerate() {
        let model = NoiseSpec::parse(noise_text).unwrap().build(10).unwrap();
        let rows: Vec<AggregateRow> = cells
            .iter()
            .enumerate()
            .map(|(ci, &(t, k))| {
                let tag_base = (ni * 100 + ci * 10) as u64;
                let mean = mean_error_at(&chain, &model, t, k, 10, tag_base, EstimatorKind::Mom);
                AggregateRow {
                    tk: (t * k) as u64,
                    estimator: "mom".to_string(),
                    count: 10,
                    failed: 0,
                    mean_mse_raw: Some(mean),
                    ci95_mse_raw: None,
                    mean_mse_projected: None,
                    ci95_mse_projected: None,
                    mean_stat_err: None,
                    ci95_stat_err: None,
                }
            })
            .collect();
        let (slope, r2) = fit_loglog_slope(&rows, "mom").unwrap();
        pass &= (-1.2..=-0.8).contains(&slope);
        detail.push_str(&format!(
            "{}: slope {:.3} (r2 {:.3}); ",
            noise_text, slope, r2
        ));
    }
    detail.push_str(&format!("{:?}", start.elapsed()));
    verdict("05 consistency slope", pass, &detail);
}

#[test]
fn a06_least_squares_plateaus_where_the_moment_estimator_keeps_converging() {
    let start = Instant::now();
    let chain = rate_chain();
    let s = 10;
    let noise_var = Matrix::identity(s).scale(5.0);
    let model = NoiseSpec::parse("gaussian:5").unwrap().build(s).unwrap();
    let pred = error_metric(&chain.cls_noisy_limit(100, &noise_var).unwrap(), &chain).unwrap();
    let cls5 = mean_error_at(&chain, &model, 10_000, 10, 10, 900, EstimatorKind::Cls);
    let cls6 = mean_error_at(&chain, &model, 10_000, 100, 10, 910, EstimatorKind::Cls);
    let mom6 = mean_error_at(&chain, &model, 10_000, 100, 10, 910, EstimatorKind::Mom);
    let plateau_ratio = cls5 / cls6;
    let limit_gap = (cls6 / pred - 1.0).abs();
    let separation = cls6 / mom6;
    let pass = plateau_ratio > 0.5 && plateau_ratio < 2.0 && limit_gap <= 0.2 && separation >= 10.0;
    verdict(
        "06 least-squares plateau",
        pass,
        &format!(
            "cls mse 1e5/1e6 = {:.3}, |emp/limit - 1| = {:.3}, cls/mom at 1e6 = {:.0}x, {:?}",
            plateau_ratio,
            limit_gap,
            separation,
            start.elapsed()
        ),
    );
}

#[test]
fn a07_population_size_barely_moves_the_error() {
    let start = Instant::now();
    let populations = [10u64, 100, 1000, 10_000];
    let model = NoiseSpec::none().build(5).unwrap();
    let mut means = [0.0f64; 4];
    let trials = 10;
    for trial in 0..trials as u64 {
        // the chain is shared across population sizes so the comparison is
        // paired: only N varies within a trial
        let chain =
            generate_random_chain(5, 5.0, &mut realization_rng(derive_seed(701, trial, 1), 0))
                .unwrap();
        for (ni, &n) in populations.iter().enumerate() {
            let ens = simulate_ensemble(
                &chain,
                n,
                100,
                1,
                None,
                derive_seed(701, trial, 10 + ni as u64),
            )
            .unwrap();
            let est = estimate_mom(&ens, &model, n as f64).unwrap();
            means[ni] += error_metric(&est.p_raw, &chain).unwrap() / trials as f64;
        }
    }
    let max = means.iter().cloned().fold(f64::MIN, f64::max);
    let min = means.iter().cloned().fold(f64::MAX, f64::min);
    let ratio = max / min;
    verdict(
        "07 population-size independence",
        ratio < 2.0,
        &format!(
            "mean mse by N = {:?}, max/min = {:.3}, {:?}",
            means
                .iter()
                .map(|m| format!("{:.2e}", m))
                .collect::<Vec<_>>(),
            ratio,
            start.elapsed()
        ),
    );
}

#[test]
fn a08_baselines_lose_on_transitions_but_hold_on_the_stationary_law() {
    let start = Instant::now();
    let config = ExperimentConfig {
        s: 10,
        d: 0.5,
        n: 100,
        t_list: vec![100],
        k_list: vec![1000],
        noise: NoiseSpec::none(),
        estimators: vec![
            EstimatorKind::Mom,
            EstimatorKind::Naive,
            EstimatorKind::Limle,
        ],
        trials: 5,
        master_seed: 801,
        estimate_params: false,
        initial_distribution: None,
    };
    let records = run_sweep(&config, None, false).unwrap();
    let rows = aggregate_by_tk(&records);
    let row = |est: &str| rows.iter().find(|r| r.estimator == est).unwrap();
    let (mom_raw, mom_stat) = (
        row("mom").mean_mse_raw.unwrap(),
        row("mom").mean_stat_err.unwrap(),
    );
    let (naive_raw, naive_stat) = (
        row("naive").mean_mse_raw.unwrap(),
        row("naive").mean_stat_err.unwrap(),
    );
    let (limle_raw, limle_stat) = (
        row("limle").mean_mse_raw.unwrap(),
        row("limle").mean_stat_err.unwrap(),
    );
    let pass = naive_raw >= 10.0 * mom_raw
        && limle_raw >= 10.0 * mom_raw
        && naive_stat <= 3.0 * mom_stat
        && limle_stat <= 3.0 * mom_stat;
    verdict(
        "08 baseline comparison",
        pass,
        &format!(
            "P-error naive/mom = {:.0}x, limle/mom = {:.0}x; stationary naive/mom = {:.2}x, limle/mom = {:.2}x, {:?}",
            naive_raw / mom_raw,
            limle_raw / mom_raw,
            naive_stat / mom_stat,
            limle_stat / mom_stat,
            start.elapsed()
        ),
    );
}

fn loglin_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts
        .iter()
        .map(|p| {
            let e = p.1 - (intercept + slope * p.0);
            e * e
        })
        .sum();
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    (slope, r2)
}

#[test]
fn a09_pair_indicator_autocovariance_decays_geometrically() {
    let start = Instant::now();
    let sizes = [2usize, 3, 4, 5];
    let mut min_r2 = f64::INFINITY;
    let mut worst_slope = f64::MIN;
    let mut fitted = 0usize;
    let mut pass = true;
    let mut rng = realization_rng(901, 0);
    for c in 0..20 {
        let s = sizes[c % sizes.len()];
        let p = generate_random_chain(s, 5.0, &mut rng).unwrap();
        for i in 0..s {
            for j in 0..s {
                let curve = p.autocovariance_curve(i, j, 50).unwrap();
                let (g1, g50) = (curve[0].abs(), curve[49].abs());
                if g1 >= 1e-14 || g50 >= 1e-14 {
                    pass &= g50 < g1;
                }
                let pts: Vec<(f64, f64)> = curve
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| g.abs() >= 1e-14)
                    .map(|(idx, g)| ((idx + 1) as f64, g.abs().ln()))
                    .collect();
                if pts.len() >= 3 {
                    let (slope, r2) = loglin_fit(&pts);
                    min_r2 = min_r2.min(r2);
                    worst_slope = worst_slope.max(slope);
                    fitted += 1;
                    pass &= slope < 0.0 && r2 > 0.9;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "09 autocovariance decay",
        pass && elapsed < Duration::from_secs(5),
        &format!(
            "{} fits, min r2 = {:.3}, max slope = {:.3}, {:?}",
            fitted, min_r2, worst_slope, elapsed
        ),
    );
}

#[test]
fn a10_estimated_detection_parameters_match_known_parameter_accuracy() {
    let start = Instant::now();
    let base = ExperimentConfig {
        s: 5,
        d: 5.0,
        n: 100,
        t_list: vec![1000],
        k_list: vec![100],
        noise: NoiseSpec::parse("binomial:0.5").unwrap(),
        estimators: vec![EstimatorKind::Mom],
        trials: 5,
        master_seed: 1001,
        estimate_params: false,
        initial_distribution: None,
    };
    let known = run_sweep(&base, None, false).unwrap();
    let mut with_est = base.clone();
    with_est.estimate_params = true;
    let estimated = run_sweep(&with_est, None, false).unwrap();
    // identical seeds mean both sweeps saw byte-identical noisy data
    assert_eq!(known.len(), estimated.len());
    let mean = |rs: &[aggmom::ExperimentRecord]| -> f64 {
        let ok: Vec<f64> = rs
            .iter()
            .filter(|r| r.status == "ok")
            .map(|r| r.mse_raw.unwrap())
            .collect();
        ok.iter().sum::<f64>() / ok.len() as f64
    };
    let (mse_known, mse_est) = (mean(&known), mean(&estimated));
    let ratio = (mse_est / mse_known).max(mse_known / mse_est);
    let mut params_ok = true;
    let mut n_range = (f64::MAX, f64::MIN);
    let mut a_range = (f64::MAX, f64::MIN);
    for r in &estimated {
        let (n_hat, a_hat) = (r.n_hat.unwrap(), r.alpha_hat.unwrap());
        params_ok &= (90.0..=110.0).contains(&n_hat) && (0.45..=0.55).contains(&a_hat);
        n_range = (n_range.0.min(n_hat), n_range.1.max(n_hat));
        a_range = (a_range.0.min(a_hat), a_range.1.max(a_hat));
    }
    verdict(
        "10 estimated detection parameters",
        ratio <= 2.0 && params_ok,
        &format!(
            "mse est/known = {:.3}, N in [{:.1}, {:.1}], alpha in [{:.3}, {:.3}], {:?}",
            mse_est / mse_known,
            n_range.0,
            n_range.1,
            a_range.0,
            a_range.1,
            start.elapsed()
        ),
    );
}

#[test]
fn a11_per_step_estimator_recovers_dynamics_from_a_point_mass_start() {
    let start = Instant::now();
    let p = TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
    let ens = simulate_ensemble(&p, 100, 5, 100_000, Some(&[1.0, 0.0]), 1101).unwrap();
    let model = NoiseSpec::none().build(2).unwrap();
    let est = estimate_mom_nonstationary(&ens, &model, 100.0).unwrap();
    let worst = est.p_projected.matrix().max_abs_diff(p.matrix());
    verdict(
        "11 per-step recovery",
        worst < 0.02,
        &format!(
            "max entry error = {:.4}{}{}, {:?}",
            worst,
            if est.warning.is_some() {
                ", warning: "
            } else {
                ""
            },
            est.warning.as_deref().unwrap_or(""),
            start.elapsed()
        ),
    );
}

#[test]
fn a12_sweeps_are_byte_identical_across_runs_and_worker_counts() {
    let start = Instant::now();
    let config = ExperimentConfig {
        s: 3,
        d: 1.0,
        n: 20,
        t_list: vec![10, 20],
        k_list: vec![1, 2],
        noise: NoiseSpec::parse("state_binomial:0.9,0.5,0.2").unwrap(),
        estimators: vec![
            EstimatorKind::Mom,
            EstimatorKind::Cls,
            EstimatorKind::Limle,
            EstimatorKind::Naive,
            EstimatorKind::MomNonstationary,
        ],
        trials: 2,
        master_seed: 1201,
        estimate_params: false,
        initial_distribution: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..3)
        .map(|i| dir.path().join(format!("r{}.csv", i)))
        .collect();
    write_records(&paths[0], &run_sweep(&config, Some(1), false).unwrap()).unwrap();
    write_records(&paths[1], &run_sweep(&config, Some(1), false).unwrap()).unwrap();
    write_records(&paths[2], &run_sweep(&config, Some(4), false).unwrap()).unwrap();
    let bytes: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let pass = bytes[0] == bytes[1] && bytes[0] == bytes[2];
    verdict(
        "12 byte-identical sweeps",
        pass,
        &format!(
            "{} bytes, rerun match: {}, worker-count match: {}, {:?}",
            bytes[0].len(),
            bytes[0] == bytes[1],
            bytes[0] == bytes[2],
            start.elapsed()
        ),
    );
}
