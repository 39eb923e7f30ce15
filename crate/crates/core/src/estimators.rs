//! Transition matrix estimators for noisy aggregate count data.
//!
//! The main estimator inverts the closed-form stationary moments: recover
//! the hidden-count mean and lag-one covariance through the noise model,
//! then read the transition matrix off the identity
//! `P = diag(mu)^-1 (Sigma_1 / N + mu mu^T)`. It is consistent as `T*K`
//! grows for every supported noise model. The baselines kept alongside it
//! are plain conditional least squares (consistent without noise, biased
//! with it), a marginal-only estimate (`P` rows all equal to the estimated
//! stationary distribution), a likelihood fit that ignores cross-time
//! dependence, and a per-time-step variant for non-stationary starts.

use crate::chain::TransitionMatrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::noise::{NoiseModel, MARGINAL_FLOOR};
use crate::simulate::Ensemble;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Estimator identifiers used in records, configs, and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Mom,
    Cls,
    Limle,
    Naive,
    MomNonstationary,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Mom => "mom",
            EstimatorKind::Cls => "cls",
            EstimatorKind::Limle => "limle",
            EstimatorKind::Naive => "naive",
            EstimatorKind::MomNonstationary => "mom_nonstationary",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "mom" => Ok(EstimatorKind::Mom),
            "cls" => Ok(EstimatorKind::Cls),
            "limle" => Ok(EstimatorKind::Limle),
            "naive" => Ok(EstimatorKind::Naive),
            "mom_nonstationary" => Ok(EstimatorKind::MomNonstationary),
            other => Err(Error::Config(format!("unknown estimator: {}", other))),
        }
    }
}

/// An estimated transition matrix, before and after projection onto the
/// row-stochastic set. Error metrics default to the raw estimate; the
/// projected one is what downstream consumers should run.
#[derive(Debug, Clone)]
pub struct EstimatedTransition {
    pub estimator: EstimatorKind,
    pub p_raw: Matrix,
    pub p_projected: TransitionMatrix,
    pub warning: Option<String>,
}

/// Pooled stationary moment estimates recovered from an observed ensemble.
#[derive(Debug, Clone)]
pub struct MomentEstimates {
    /// Mean observed count vector over all time steps and realizations.
    pub m_y: Vec<f64>,
    /// Recovered mean hidden count vector.
    pub m_n: Vec<f64>,
    /// Normalized recovered marginal (sums to 1).
    pub mu: Vec<f64>,
    /// Recovered lag-one covariance of the hidden counts.
    pub sigma1: Matrix,
}

fn recovered_marginal(
    ens: &Ensemble,
    model: &NoiseModel,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let s = ens.s();
    if model.s() != s {
        return Err(Error::DimensionMismatch(format!(
            "ensemble over {} states, noise model over {}",
            s,
            model.s()
        )));
    }
    let mut m_y = vec![0.0f64; s];
    for cs in ens.series() {
        for t in 0..cs.t_len() {
            for (acc, &v) in m_y.iter_mut().zip(cs.row(t)) {
                *acc += v;
            }
        }
    }
    let scale = (ens.t_len() * ens.k()) as f64;
    for v in m_y.iter_mut() {
        *v /= scale;
    }
    let m_n = model.recover_mean(&m_y)?;
    let total: f64 = m_n.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::InsufficientData(
            "recovered mean counts sum to zero".into(),
        ));
    }
    let mu = m_n.iter().map(|&v| v / total).collect();
    Ok((m_y, m_n, mu))
}

/// Pooled moment recovery: observed mean, recovered mean and marginal, and
/// the recovered lag-one covariance
/// `Sigma_1 = A^-1 [ mean over t,k of r_t r_{t+1}^T ] A^-T`
/// with residuals `r_t = y_t - m_y`. Requires `T >= 2`.
pub fn moment_estimates(ens: &Ensemble, model: &NoiseModel) -> Result<MomentEstimates> {
    if ens.t_len() < 2 {
        return Err(Error::InsufficientData(
            "lagged moments need at least two time steps".into(),
        ));
    }
    let s = ens.s();
    let (m_y, m_n, mu) = recovered_marginal(ens, model)?;

    let mut cov_y = Matrix::zeros(s, s);
    let mut resid = vec![0.0f64; s];
    let mut resid_next = vec![0.0f64; s];
    for cs in ens.series() {
        for t in 0..cs.t_len() - 1 {
            for ((r, &v), &m) in resid.iter_mut().zip(cs.row(t)).zip(&m_y) {
                *r = v - m;
            }
            for ((r, &v), &m) in resid_next.iter_mut().zip(cs.row(t + 1)).zip(&m_y) {
                *r = v - m;
            }
            for (i, &ri) in resid.iter().enumerate() {
                if ri == 0.0 {
                    continue;
                }
                let row = cov_y.row_mut(i);
                for (acc, &rj) in row.iter_mut().zip(&resid_next) {
                    *acc += ri * rj;
                }
            }
        }
    }
    let scale = ((ens.t_len() - 1) * ens.k()) as f64;
    let cov_y = cov_y.scale(1.0 / scale);
    let sigma1 = model.recover_lagged_cov(&cov_y)?;
    Ok(MomentEstimates {
        m_y,
        m_n,
        mu,
        sigma1,
    })
}

/// Evaluates the moment identity
/// `P = diag(mu_t)^-1 (sigma1 / n + mu_t mu_next^T)`.
///
/// Fed with exact stationary moments this returns the true matrix; fed with
/// estimated ones it is the moment estimator. Errors with
/// [`Error::SingularMarginal`] when some `mu_t(i)` is not positive.
pub fn mom_from_moments(mu_t: &[f64], mu_next: &[f64], sigma1: &Matrix, n: f64) -> Result<Matrix> {
    let s = mu_t.len();
    if sigma1.rows() != s || sigma1.cols() != s || mu_next.len() != s {
        return Err(Error::DimensionMismatch(
            "marginal and covariance shapes disagree".into(),
        ));
    }
    if n.is_nan() || n <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "population size must be positive, got {}",
            n
        )));
    }
    let mut p = Matrix::zeros(s, s);
    for (i, &mui) in mu_t.iter().enumerate() {
        if mui <= MARGINAL_FLOOR {
            return Err(Error::SingularMarginal(i));
        }
        for (j, &mnj) in mu_next.iter().enumerate() {
            p.set(i, j, (sigma1.get(i, j) / n + mui * mnj) / mui);
        }
    }
    Ok(p)
}

/// Ratio form of conditional least squares on uncentered second moments:
/// `P = Lambda_0^-1 Lambda_1`.
pub fn cls_from_moments(lambda0: &Matrix, lambda1: &Matrix) -> Result<Matrix> {
    lambda0.invert()?.matmul(lambda1)
}

fn finish(
    estimator: EstimatorKind,
    p_raw: Matrix,
    warning: Option<String>,
) -> Result<EstimatedTransition> {
    let p_projected = project_to_stochastic(&p_raw)?;
    Ok(EstimatedTransition {
        estimator,
        p_raw,
        p_projected,
        warning,
    })
}

/// Moment estimator for stationary ensembles: recover marginal and lag-one
/// covariance through the noise model, then invert the moment identity.
/// `n` is the (known or separately estimated) population size.
pub fn estimate_mom(ens: &Ensemble, model: &NoiseModel, n: f64) -> Result<EstimatedTransition> {
    let est = moment_estimates(ens, model)?;
    let p_raw = mom_from_moments(&est.mu, &est.mu, &est.sigma1, n)?;
    finish(EstimatorKind::Mom, p_raw, None)
}

/// Plain conditional least squares of `y_{t+1}` on `y_t`, ignoring the noise
/// model entirely. Consistent on noise-free counts; on noisy observations it
/// converges to `(Lambda_0 + Var(noise))^-1 Lambda_1` instead of `P`.
pub fn estimate_cls(ens: &Ensemble) -> Result<EstimatedTransition> {
    if ens.t_len() < 2 {
        return Err(Error::InsufficientData(
            "least squares needs at least two time steps".into(),
        ));
    }
    let s = ens.s();
    let mut lambda0 = Matrix::zeros(s, s);
    let mut lambda1 = Matrix::zeros(s, s);
    for cs in ens.series() {
        for t in 0..cs.t_len() - 1 {
            let yt = cs.row(t);
            let yn = cs.row(t + 1);
            for i in 0..s {
                let vi = yt[i];
                if vi == 0.0 {
                    continue;
                }
                let r0 = lambda0.row_mut(i);
                for (acc, &vj) in r0.iter_mut().zip(yt) {
                    *acc += vi * vj;
                }
                let r1 = lambda1.row_mut(i);
                for (acc, &vj) in r1.iter_mut().zip(yn) {
                    *acc += vi * vj;
                }
            }
        }
    }
    let scale = 1.0 / (((ens.t_len() - 1) * ens.k()) as f64);
    let p_raw = cls_from_moments(&lambda0.scale(scale), &lambda1.scale(scale))?;
    finish(EstimatorKind::Cls, p_raw, None)
}

/// Marginal-only baseline: every row of the estimate is the recovered
/// stationary marginal. Its stationary distribution is right by
/// construction, but it carries no transition information at all.
pub fn estimate_naive(ens: &Ensemble, model: &NoiseModel) -> Result<EstimatedTransition> {
    let (_, _, mu) = recovered_marginal(ens, model)?;
    let s = mu.len();
    let mut p_raw = Matrix::zeros(s, s);
    for i in 0..s {
        p_raw.row_mut(i).copy_from_slice(&mu);
    }
    finish(EstimatorKind::Naive, p_raw, None)
}

/// Settings of the likelihood baseline optimizer.
const LIMLE_RESTARTS: usize = 8;
const LIMLE_ITERATIONS: usize = 2000;
const LIMLE_STEP: f64 = 0.1;
const LIMLE_TOL: f64 = 1e-9;
const LIMLE_TOL_WINDOW: usize = 10;

/// Likelihood baseline: treats the recovered counts at each time step as an
/// independent multinomial sample from the marginal `mu_1 P^{t-1}` and
/// maximizes that (misspecified) likelihood over `mu_1` and `P` by gradient
/// ascent on softmax parameters, best of [`LIMLE_RESTARTS`] starts.
///
/// Because the objective only sees per-step marginals, stationary data
/// identifies the stationary distribution but not the transitions; the
/// estimate converges to the true matrix only when marginals actually move.
pub fn estimate_limle(
    ens: &Ensemble,
    model: &NoiseModel,
    seed: u64,
) -> Result<EstimatedTransition> {
    let s = ens.s();
    if model.s() != s {
        return Err(Error::DimensionMismatch(format!(
            "ensemble over {} states, noise model over {}",
            s,
            model.s()
        )));
    }
    // Collapse realizations: the objective only depends on the per-step sums
    // of recovered counts, clipped below at zero.
    let t_len = ens.t_len();
    let mut counts = Matrix::zeros(t_len, s);
    for cs in ens.series() {
        for t in 0..t_len {
            let rec = model.recover_mean(cs.row(t))?;
            let row = counts.row_mut(t);
            for (acc, v) in row.iter_mut().zip(rec) {
                *acc += v.max(0.0);
            }
        }
    }
    let total: f64 = counts.data().iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::OptimizationFailed(
            "no positive recovered counts to fit".into(),
        ));
    }

    if t_len < 2 {
        let p_raw = Matrix::from_vec(s, s, vec![1.0 / s as f64; s * s]).unwrap();
        return finish(
            EstimatorKind::Limle,
            p_raw,
            Some("single time step cannot identify transitions; returning uniform rows".into()),
        );
    }

    // Warm start at the marginal-only solution; remaining restarts random.
    let pooled: Vec<f64> = (0..s)
        .map(|j| (0..t_len).map(|t| counts.get(t, j)).sum::<f64>() / total)
        .collect();
    let warm: Vec<f64> = pooled.iter().map(|&x| (x + 1e-9).ln()).collect();

    let mut best: Option<(f64, Vec<f64>, Matrix)> = None;
    for restart in 0..LIMLE_RESTARTS {
        let (w0, z0) = if restart == 0 {
            let mut z = Matrix::zeros(s, s);
            for i in 0..s {
                z.row_mut(i).copy_from_slice(&warm);
            }
            (warm.clone(), z)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(restart as u64);
            let w = (0..s)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let z = Matrix::from_vec(
                s,
                s,
                (0..s * s)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
            .unwrap();
            (w, z)
        };
        if let Some((value, w, z)) = ascend(&counts, total, w0, z0) {
            let better = match &best {
                Some((b, _, _)) => value > *b,
                None => true,
            };
            if better {
                best = Some((value, w, z));
            }
        }
    }
    let (_, w, z) = best
        .ok_or_else(|| Error::OptimizationFailed("no restart reached a finite objective".into()))?;

    let mut p_raw = Matrix::zeros(s, s);
    for i in 0..s {
        let row = softmax(z.row(i));
        p_raw.row_mut(i).copy_from_slice(&row);
    }
    let _mu1 = softmax(&w);
    finish(EstimatorKind::Limle, p_raw, None)
}

/// Gradient ascent on the normalized marginal log likelihood. Returns the
/// best objective value reached and the parameters at it, or `None` if the
/// objective never became finite.
fn ascend(
    counts: &Matrix,
    total: f64,
    mut w: Vec<f64>,
    mut z: Matrix,
) -> Option<(f64, Vec<f64>, Matrix)> {
    let t_len = counts.rows();
    let s = counts.cols();
    let mut history: Vec<f64> = Vec::with_capacity(LIMLE_ITERATIONS);
    let mut mus = vec![vec![0.0f64; s]; t_len];
    let mut grads = vec![vec![0.0f64; s]; t_len];

    let mut best_value = f64::NEG_INFINITY;
    let mut best_params: Option<(Vec<f64>, Matrix)> = None;

    for _ in 0..LIMLE_ITERATIONS {
        let p_rows: Vec<Vec<f64>> = (0..s).map(|i| softmax(z.row(i))).collect();
        mus[0] = softmax(&w);
        for t in 1..t_len {
            let (prev, cur) = {
                let (a, b) = mus.split_at_mut(t);
                (&a[t - 1], &mut b[0])
            };
            cur.fill(0.0);
            for i in 0..s {
                let m = prev[i];
                if m == 0.0 {
                    continue;
                }
                for j in 0..s {
                    cur[j] += m * p_rows[i][j];
                }
            }
        }

        // objective and marginal gradients, normalized by the total count
        let mut value = 0.0;
        for t in 0..t_len {
            let g = &mut grads[t];
            for j in 0..s {
                let c = counts.get(t, j);
                let m = mus[t][j].max(1e-300);
                if c > 0.0 {
                    value += c * m.ln();
                    g[j] = c / m / total;
                } else {
                    g[j] = 0.0;
                }
            }
        }
        value /= total;
        if !value.is_finite() {
            return best_params.map(|(bw, bz)| (best_value, bw, bz));
        }
        if value > best_value {
            best_value = value;
            best_params = Some((w.clone(), z.clone()));
        }
        history.push(value);
        if history.len() > LIMLE_TOL_WINDOW {
            let old = history[history.len() - 1 - LIMLE_TOL_WINDOW];
            if value - old < LIMLE_TOL {
                break;
            }
        }

        // back-propagate through mu_{t+1} = mu_t P
        for t in (0..t_len - 1).rev() {
            let (gt, gn) = {
                let (a, b) = grads.split_at_mut(t + 1);
                (&mut a[t], &b[0])
            };
            for i in 0..s {
                let mut acc = gt[i];
                let p_row = &p_rows[i];
                for j in 0..s {
                    acc += p_row[j] * gn[j];
                }
                gt[i] = acc;
            }
        }

        // transition gradient: dL/dP_ij = sum_t mu_t(i) g_{t+1}(j)
        let mut gp = Matrix::zeros(s, s);
        for t in 0..t_len - 1 {
            let m = &mus[t];
            let g = &grads[t + 1];
            for (i, &mi) in m.iter().enumerate() {
                if mi == 0.0 {
                    continue;
                }
                let row = gp.row_mut(i);
                for (acc, &gj) in row.iter_mut().zip(g) {
                    *acc += mi * gj;
                }
            }
        }

        // softmax chain rule and ascent step
        for (i, p_row) in p_rows.iter().enumerate() {
            let dot: f64 = p_row.iter().zip(gp.row(i)).map(|(p, g)| p * g).sum();
            for ((zj, &pj), &gj) in z.row_mut(i).iter_mut().zip(p_row).zip(gp.row(i)) {
                *zj += LIMLE_STEP * pj * (gj - dot);
            }
        }
        let mu1 = &mus[0];
        let g1 = &grads[0];
        let dot: f64 = mu1.iter().zip(g1).map(|(p, g)| p * g).sum();
        for i in 0..s {
            w[i] += LIMLE_STEP * mu1[i] * (g1[i] - dot);
        }
    }
    best_params.map(|(bw, bz)| (best_value, bw, bz))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-time-step moment estimator for non-stationary ensembles: estimates
/// `mu_t` and `Sigma_{t,t+1}` across realizations at each step, applies the
/// moment identity per step, and averages the per-step estimates. Steps
/// whose estimated marginal vanishes somewhere are skipped with a warning.
pub fn estimate_mom_nonstationary(
    ens: &Ensemble,
    model: &NoiseModel,
    n: f64,
) -> Result<EstimatedTransition> {
    let s = ens.s();
    let k = ens.k();
    let t_len = ens.t_len();
    if k < 2 {
        return Err(Error::InsufficientData(
            "per-step moments need at least two realizations".into(),
        ));
    }
    if t_len < 2 {
        return Err(Error::InsufficientData(
            "per-step transitions need at least two time steps".into(),
        ));
    }
    if model.s() != s {
        return Err(Error::DimensionMismatch(format!(
            "ensemble over {} states, noise model over {}",
            s,
            model.s()
        )));
    }

    // per-step observed means
    let mut means = Matrix::zeros(t_len, s);
    for cs in ens.series() {
        for t in 0..t_len {
            let row = means.row_mut(t);
            for (acc, &v) in row.iter_mut().zip(cs.row(t)) {
                *acc += v;
            }
        }
    }
    let means = means.scale(1.0 / k as f64);

    let mut mus: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let m_n = model.recover_mean(means.row(t))?;
        let total: f64 = m_n.iter().sum();
        if total.is_nan() || total <= 0.0 {
            mus.push(vec![0.0; s]);
            continue;
        }
        mus.push(m_n.iter().map(|&v| v / total).collect());
    }

    let mut sum = Matrix::zeros(s, s);
    let mut used = 0usize;
    let mut skipped = 0usize;
    for t in 0..t_len - 1 {
        // cross-realization sample covariance between y_t and y_{t+1}
        let mut cov = Matrix::zeros(s, s);
        for cs in ens.series() {
            for i in 0..s {
                let ri = cs.row(t)[i] - means.get(t, i);
                if ri == 0.0 {
                    continue;
                }
                let row = cov.row_mut(i);
                for ((acc, &nj), &mj) in row.iter_mut().zip(cs.row(t + 1)).zip(means.row(t + 1)) {
                    *acc += ri * (nj - mj);
                }
            }
        }
        let cov = cov.scale(1.0 / (k - 1) as f64);
        let sigma = model.recover_lagged_cov(&cov)?;
        match mom_from_moments(&mus[t], &mus[t + 1], &sigma, n) {
            Ok(p_t) => {
                sum = sum.add(&p_t)?;
                used += 1;
            }
            Err(Error::SingularMarginal(_)) => {
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::InsufficientData(
            "every time step had a vanishing marginal".into(),
        ));
    }
    let p_raw = sum.scale(1.0 / used as f64);
    let warning = if skipped > 0 {
        Some(format!(
            "skipped {} of {} time steps with vanishing marginals",
            skipped,
            t_len - 1
        ))
    } else {
        None
    };
    finish(EstimatorKind::MomNonstationary, p_raw, warning)
}

/// Euclidean projection of a vector onto the probability simplex.
pub fn project_row_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut theta = 0.0;
    let mut rho = 0;
    for (idx, &u) in sorted.iter().enumerate() {
        acc += u;
        let candidate = (acc - 1.0) / (idx + 1) as f64;
        if u - candidate > 0.0 {
            rho = idx + 1;
            theta = candidate;
        }
    }
    debug_assert!(rho > 0);
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Projects every row of a square matrix onto the simplex, yielding a valid
/// transition matrix (the nearest one in Frobenius norm).
pub fn project_to_stochastic(m: &Matrix) -> Result<TransitionMatrix> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "projection needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.data().iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("projection input"));
    }
    let s = m.rows();
    let mut out = Matrix::zeros(s, s);
    for i in 0..s {
        let row = project_row_to_simplex(m.row(i));
        // renormalize away the last few ulps so row sums are exact
        let sum: f64 = row.iter().sum();
        let r = out.row_mut(i);
        for (dst, v) in r.iter_mut().zip(row) {
            *dst = v / sum;
        }
    }
    TransitionMatrix::new(out)
}

/// Mean squared entrywise error `(1/S^2) ||P_hat - P||_F^2`. By convention
/// this is evaluated on the raw (unprojected) estimate.
pub fn error_metric(p_hat: &Matrix, p_true: &TransitionMatrix) -> Result<f64> {
    let s = p_true.s();
    if p_hat.rows() != s || p_hat.cols() != s {
        return Err(Error::DimensionMismatch(format!(
            "estimate is {}x{}, truth is {}x{}",
            p_hat.rows(),
            p_hat.cols(),
            s,
            s
        )));
    }
    let mut acc = 0.0;
    for (a, b) in p_hat.data().iter().zip(p_true.matrix().data()) {
        acc += (a - b) * (a - b);
    }
    Ok(acc / (s * s) as f64)
}

/// Mean squared error between stationary distributions,
/// `(1/S) ||pi(P_hat) - pi(P)||^2`, evaluated on the projected estimate.
/// Returns `None` when the projected estimate has no unique stationary
/// distribution, which callers should report as a missing value.
pub fn stationary_error_metric(
    p_hat_projected: &TransitionMatrix,
    p_true: &TransitionMatrix,
) -> Result<Option<f64>> {
    let s = p_true.s();
    if p_hat_projected.s() != s {
        return Err(Error::DimensionMismatch(format!(
            "estimate over {} states, truth over {}",
            p_hat_projected.s(),
            s
        )));
    }
    let pi_true = p_true.stationary_distribution()?;
    let pi_hat = match p_hat_projected.stationary_distribution() {
        Ok(pi) => pi,
        Err(Error::NonErgodic) => return Ok(None),
        Err(e) => return Err(e),
    };
    let acc: f64 = pi_hat
        .iter()
        .zip(&pi_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(Some(acc / s as f64))
}
