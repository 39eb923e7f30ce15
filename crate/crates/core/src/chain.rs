//! Ergodic finite-state Markov chains and their population-level moments.
//!
//! A population of `N` individuals moves independently under a shared
//! row-stochastic matrix `P`. At stationarity the vector of state counts
//! `n_t` is exchangeable-multinomial, and its first two moments (including
//! the lag-one cross moments) are available in closed form. Those closed
//! forms are what the moment estimators invert, so they live here next to
//! the chain itself.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

/// Tolerance for row sums of a stochastic matrix.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Entry floor applied when generating random chains; keeps every generated
/// chain strictly positive and therefore ergodic.
pub const ENTRY_FLOOR: f64 = 1e-12;

/// Row-stochastic transition matrix over `S` states.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    p: Matrix,
}

/// Stationary single-step marginals of one individual: `mu[i] = pi(i)` and
/// `pair[i][j] = Pr(x_t = i, x_{t+1} = j) = pi(i) P(i,j)`.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub mu: Vec<f64>,
    pub pair: Matrix,
}

/// Exact stationary moments of the aggregate count vector for a population
/// of `n` independent individuals: mean `m`, covariance `sigma0`, lag-one
/// cross covariance `sigma1`, and the matching uncentered second moments
/// `lambda0 = E[n_t n_t^T]`, `lambda1 = E[n_t n_{t+1}^T]`.
#[derive(Debug, Clone)]
pub struct AnalyticMoments {
    pub n: u64,
    pub m: Vec<f64>,
    pub sigma0: Matrix,
    pub sigma1: Matrix,
    pub lambda0: Matrix,
    pub lambda1: Matrix,
}

impl AnalyticMoments {
    /// Closed-form inverse of `lambda0`. Because `lambda0` is a scaled
    /// diagonal plus a rank-one term, its inverse is available without a
    /// linear solve:
    ///
    /// `lambda0^-1 = (1/N) diag(1/mu) - ((N-1)/N^2) 11^T`
    ///
    /// Errors when some state has zero stationary mass, in which case
    /// `lambda0` is genuinely singular.
    pub fn lambda0_inverse(&self) -> Result<Matrix> {
        let s = self.m.len();
        let nf = self.n as f64;
        if self.m.iter().any(|&x| x <= 0.0) {
            return Err(Error::SingularMatrix);
        }
        let mut out = Matrix::zeros(s, s);
        let offdiag = (nf - 1.0) / (nf * nf);
        for i in 0..s {
            let mu_i = self.m[i] / nf;
            for j in 0..s {
                let v = if i == j { 1.0 / (nf * mu_i) } else { 0.0 };
                out.set(i, j, v - offdiag);
            }
        }
        Ok(out)
    }
}

impl TransitionMatrix {
    /// Validates and wraps a square matrix: entries must be finite and
    /// non-negative, and every row must sum to 1 within [`ROW_SUM_TOL`].
    pub fn new(p: Matrix) -> Result<Self> {
        if !p.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "transition matrix must be square, got {}x{}",
                p.rows(),
                p.cols()
            )));
        }
        for i in 0..p.rows() {
            let row = p.row(i);
            if row.iter().any(|&x| x.is_nan() || x < 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "row {} has a negative or non-finite entry",
                    i
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "row {} sums to {}, not 1",
                    i, sum
                )));
            }
        }
        Ok(TransitionMatrix { p })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        TransitionMatrix::new(Matrix::from_rows(rows)?)
    }

    /// Number of states.
    pub fn s(&self) -> usize {
        self.p.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.p.row(i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p.get(i, j)
    }

    /// Unique stationary distribution `pi` with `pi P = pi`, `sum pi = 1`.
    ///
    /// Solves `(P^T - I) x = 0` with the last equation replaced by the
    /// normalization constraint. For chains without a unique stationary
    /// distribution (e.g. several closed classes) that system is singular
    /// and [`Error::NonErgodic`] is returned. Irreducible periodic chains
    /// still have a unique solution and are not rejected.
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        let s = self.s();
        let mut a = self.p.transpose();
        for i in 0..s {
            let v = a.get(i, i);
            a.set(i, i, v - 1.0);
        }
        for j in 0..s {
            a.set(s - 1, j, 1.0);
        }
        let mut b = vec![0.0; s];
        b[s - 1] = 1.0;
        let mut pi = a.solve(&b).map_err(|e| match e {
            Error::SingularMatrix => Error::NonErgodic,
            other => other,
        })?;
        // Solver round-off can leave harmless tiny negatives on nearly
        // unreachable states; clamp and renormalize.
        for x in pi.iter_mut() {
            if *x < 0.0 {
                if *x < -1e-9 {
                    return Err(Error::NonErgodic);
                }
                *x = 0.0;
            }
        }
        let total: f64 = pi.iter().sum();
        for x in pi.iter_mut() {
            *x /= total;
        }
        Ok(pi)
    }

    /// Stationary marginals of a single individual.
    pub fn marginals(&self) -> Result<Marginals> {
        let mu = self.stationary_distribution()?;
        let pair = pairwise_marginal(self, &mu)?;
        Ok(Marginals { mu, pair })
    }

    /// Closed-form stationary moments of the count vector for population
    /// size `n`.
    pub fn analytic_moments(&self, n: u64) -> Result<AnalyticMoments> {
        if n == 0 {
            return Err(Error::InvalidParameter(
                "population size must be positive".into(),
            ));
        }
        let Marginals { mu, pair } = self.marginals()?;
        let nf = n as f64;
        let outer = Matrix::outer(&mu, &mu);
        let dmu = Matrix::diag(&mu);

        let m = mu.iter().map(|x| nf * x).collect();
        let sigma0 = dmu.sub(&outer)?.scale(nf);
        let sigma1 = pair.sub(&outer)?.scale(nf);
        let lambda0 = dmu.add(&outer.scale(nf - 1.0))?.scale(nf);
        let lambda1 = pair.add(&outer.scale(nf - 1.0))?.scale(nf);
        Ok(AnalyticMoments {
            n,
            m,
            sigma0,
            sigma1,
            lambda0,
            lambda1,
        })
    }

    /// Stationary autocovariance of the single-individual pair indicator
    /// `Z_t = 1{x_t = i, x_{t+1} = j}` at lag `k >= 1`:
    ///
    /// `Cov(Z_t, Z_{t+k}) = mu(i,j) (P^{k-1})_{j,i} P(i,j) - mu(i,j)^2`.
    pub fn single_individual_autocovariance(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        Ok(self.autocovariance_curve(i, j, k)?[k - 1])
    }

    /// Autocovariances of the pair indicator for lags `1..=k_max`, sharing
    /// the incremental matrix powers across lags.
    pub fn autocovariance_curve(&self, i: usize, j: usize, k_max: usize) -> Result<Vec<f64>> {
        let s = self.s();
        if i >= s || j >= s {
            return Err(Error::DimensionMismatch(format!(
                "state pair ({}, {}) out of range for {} states",
                i, j, s
            )));
        }
        if k_max == 0 {
            return Err(Error::InvalidParameter("lag must be at least 1".into()));
        }
        let mu = self.stationary_distribution()?;
        let mu_ij = mu[i] * self.get(i, j);
        let p_ij = self.get(i, j);
        let mut power = Matrix::identity(s);
        let mut out = Vec::with_capacity(k_max);
        for _ in 1..=k_max {
            out.push(mu_ij * power.get(j, i) * p_ij - mu_ij * mu_ij);
            power = power.matmul(&self.p)?;
        }
        Ok(out)
    }

    /// Probability limit of the plain conditional-least-squares transition
    /// estimate when observations carry additive noise with per-step
    /// covariance `noise_var`: `(Lambda_0 + Var) ^ -1 Lambda_1`.
    ///
    /// With `noise_var = 0` this is exactly `P`; any nonzero noise shrinks
    /// the estimate away from `P`, which is the bias the moment estimator
    /// corrects.
    pub fn cls_noisy_limit(&self, n: u64, noise_var: &Matrix) -> Result<Matrix> {
        let s = self.s();
        if noise_var.rows() != s || noise_var.cols() != s {
            return Err(Error::DimensionMismatch(format!(
                "noise covariance must be {}x{}",
                s, s
            )));
        }
        let moments = self.analytic_moments(n)?;
        moments
            .lambda0
            .add(noise_var)?
            .invert()?
            .matmul(&moments.lambda1)
    }
}

/// Joint stationary pair probabilities `mu(i,j) = mu[i] * P(i,j)` for a
/// strictly positive probability vector `mu`.
pub fn pairwise_marginal(p: &TransitionMatrix, mu: &[f64]) -> Result<Matrix> {
    let s = p.s();
    if mu.len() != s {
        return Err(Error::DimensionMismatch(format!(
            "marginal length {} does not match {} states",
            mu.len(),
            s
        )));
    }
    let total: f64 = mu.iter().sum();
    if mu.iter().any(|&x| x.is_nan() || x <= 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(
            "marginal must be strictly positive and sum to 1".into(),
        ));
    }
    let mut pair = Matrix::zeros(s, s);
    for (i, &mui) in mu.iter().enumerate() {
        for j in 0..s {
            pair.set(i, j, mui * p.get(i, j));
        }
    }
    Ok(pair)
}

/// Draws a random ergodic chain: each row is Dirichlet with concentration
/// `d / s` per entry, floored at [`ENTRY_FLOOR`] and renormalized. Small `d`
/// gives near-deterministic rows, large `d` near-uniform rows; the floor
/// keeps every entry positive so the result is always ergodic.
pub fn generate_random_chain<R: Rng + ?Sized>(
    s: usize,
    d: f64,
    rng: &mut R,
) -> Result<TransitionMatrix> {
    if s < 2 {
        return Err(Error::InvalidParameter(
            "chain needs at least 2 states".into(),
        ));
    }
    if !d.is_finite() || d <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "concentration must be positive and finite, got {}",
            d
        )));
    }
    let gamma = Gamma::new(d / s as f64, 1.0)
        .map_err(|e| Error::InvalidParameter(format!("gamma shape: {}", e)))?;
    let mut m = Matrix::zeros(s, s);
    for i in 0..s {
        let row = m.row_mut(i);
        let mut total = 0.0;
        for x in row.iter_mut() {
            // Gamma draws with tiny shape can underflow to 0; the floor
            // below repairs that.
            *x = gamma.sample(rng);
            total += *x;
        }
        let mut floored = 0.0;
        for x in row.iter_mut() {
            *x = if total > 0.0 { *x / total } else { 0.0 };
            *x = x.max(ENTRY_FLOOR);
            floored += *x;
        }
        for x in row.iter_mut() {
            *x /= floored;
        }
    }
    TransitionMatrix::new(m)
}
