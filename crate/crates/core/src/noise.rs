//! Observation noise on aggregate counts.
//!
//! Every supported model has conditional mean `E[y | n] = A n` for a known
//! invertible matrix `A`, and produces observations that are independent
//! across time steps given the hidden counts. Those two facts are all the
//! moment estimators rely on: first moments are recovered through `A^-1`,
//! and lagged (cross-time) second moments through `A^-1 (.) A^-T`, which is
//! exact for lags >= 1 because the noise at distinct times is independent.
//! Same-time second moments would need the full conditional noise variance
//! and are deliberately not offered.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::simulate::{CountSeries, Ensemble};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};

/// Marginal threshold below which an estimated mean count is considered
/// unobserved.
pub const MARGINAL_FLOOR: f64 = 1e-12;

/// The supported observation models.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseKind {
    /// Observations are the true counts.
    None,
    /// Each individual is detected independently with probability `alpha`:
    /// `y_i ~ Binomial(n_i, alpha)`.
    Binomial { alpha: f64 },
    /// `y_i ~ Poisson(alpha * n_i)`; `alpha` may exceed 1.
    Poisson { alpha: f64 },
    /// Additive white noise `y_i = n_i + Normal(0, sigma2)`.
    Gaussian { sigma2: f64 },
    /// Additive `y_i = n_i + Laplace(b)` with variance `2 b^2`.
    Laplace { b: f64 },
    /// Detection probability depends on the state: `y_i ~ Binomial(n_i, alpha_i)`.
    StateBinomial { alphas: Vec<f64> },
}

/// A noise kind bound to a state count, with its mean matrix `A` and the
/// inverse used for recovery.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    kind: NoiseKind,
    s: usize,
    a: Matrix,
    a_inv: Matrix,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::InvalidParameter(
                "state count must be positive".into(),
            ));
        }
        let a = match &kind {
            NoiseKind::None | NoiseKind::Gaussian { .. } | NoiseKind::Laplace { .. } => {
                if let NoiseKind::Gaussian { sigma2 } = kind {
                    if !sigma2.is_finite() || sigma2 < 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "gaussian variance must be non-negative, got {}",
                            sigma2
                        )));
                    }
                }
                if let NoiseKind::Laplace { b } = kind {
                    if !b.is_finite() || b < 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "laplace scale must be non-negative, got {}",
                            b
                        )));
                    }
                }
                Matrix::identity(s)
            }
            NoiseKind::Binomial { alpha } => {
                if !(*alpha > 0.0 && *alpha <= 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "detection probability must be in (0, 1], got {}",
                        alpha
                    )));
                }
                Matrix::identity(s).scale(*alpha)
            }
            NoiseKind::Poisson { alpha } => {
                if !alpha.is_finite() || *alpha <= 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "poisson rate factor must be positive, got {}",
                        alpha
                    )));
                }
                Matrix::identity(s).scale(*alpha)
            }
            NoiseKind::StateBinomial { alphas } => {
                if alphas.len() != s {
                    return Err(Error::DimensionMismatch(format!(
                        "{} detection probabilities for {} states",
                        alphas.len(),
                        s
                    )));
                }
                if !alphas.iter().all(|&a| a > 0.0 && a <= 1.0) {
                    return Err(Error::InvalidParameter(
                        "state detection probabilities must be in (0, 1]".into(),
                    ));
                }
                Matrix::diag(alphas)
            }
        };
        let a_inv = a.invert()?;
        Ok(NoiseModel { kind, s, a, a_inv })
    }

    pub fn kind(&self) -> &NoiseKind {
        &self.kind
    }

    pub fn s(&self) -> usize {
        self.s
    }

    /// Conditional mean matrix `A` with `E[y | n] = A n`.
    pub fn mean_matrix(&self) -> &Matrix {
        &self.a
    }

    /// Covariance of the additive noise per time step, when the noise is
    /// additive and count-independent (`none`, `gaussian`, `laplace`).
    /// Count-thinning models have state-dependent noise variance and return
    /// `None`.
    pub fn additive_noise_covariance(&self) -> Option<Matrix> {
        match &self.kind {
            NoiseKind::None => Some(Matrix::zeros(self.s, self.s)),
            NoiseKind::Gaussian { sigma2 } => Some(Matrix::identity(self.s).scale(*sigma2)),
            NoiseKind::Laplace { b } => Some(Matrix::identity(self.s).scale(2.0 * b * b)),
            _ => None,
        }
    }

    /// Draws one noisy observation series from a true count series.
    pub fn apply_noise<R: Rng + ?Sized>(
        &self,
        series: &CountSeries,
        rng: &mut R,
    ) -> Result<CountSeries> {
        if series.s() != self.s {
            return Err(Error::DimensionMismatch(format!(
                "series over {} states, model over {}",
                series.s(),
                self.s
            )));
        }
        let needs_integral = matches!(
            self.kind,
            NoiseKind::Binomial { .. }
                | NoiseKind::Poisson { .. }
                | NoiseKind::StateBinomial { .. }
        );
        if needs_integral && !series.is_integral() {
            return Err(Error::InvalidParameter(
                "count-thinning noise requires integer counts".into(),
            ));
        }
        let s = self.s;
        let mut data = Vec::with_capacity(series.data().len());
        let mut integral = true;
        match &self.kind {
            NoiseKind::None => {
                return Ok(series.clone());
            }
            NoiseKind::Binomial { alpha } => {
                for &v in series.data() {
                    data.push(thin(v as u64, *alpha, rng));
                }
            }
            NoiseKind::StateBinomial { alphas } => {
                for (idx, &v) in series.data().iter().enumerate() {
                    data.push(thin(v as u64, alphas[idx % s], rng));
                }
            }
            NoiseKind::Poisson { alpha } => {
                for &v in series.data() {
                    let lambda = alpha * v;
                    if lambda == 0.0 {
                        data.push(0.0);
                    } else {
                        data.push(Poisson::new(lambda).unwrap().sample(rng));
                    }
                }
            }
            NoiseKind::Gaussian { sigma2 } => {
                if *sigma2 == 0.0 {
                    return Ok(series.clone());
                }
                let normal = Normal::new(0.0, sigma2.sqrt()).unwrap();
                for &v in series.data() {
                    data.push(v + normal.sample(rng));
                }
                integral = false;
            }
            NoiseKind::Laplace { b } => {
                if *b == 0.0 {
                    return Ok(series.clone());
                }
                for &v in series.data() {
                    data.push(v + sample_laplace(*b, rng));
                }
                integral = false;
            }
        }
        integral = integral && series.is_integral();
        CountSeries::new(s, series.t_len(), data, integral)
    }

    /// Recovers a hidden-count mean from an observed mean: `A^-1 y`.
    pub fn recover_mean(&self, y_mean: &[f64]) -> Result<Vec<f64>> {
        self.a_inv.matvec(y_mean)
    }

    /// Recovers a lagged hidden-count covariance from an observed one:
    /// `A^-1 C A^-T`. Valid only for lags >= 1, where the observation noise
    /// at the two times is independent.
    pub fn recover_lagged_cov(&self, cov_y: &Matrix) -> Result<Matrix> {
        if cov_y.rows() != self.s || cov_y.cols() != self.s {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be {}x{}",
                self.s, self.s
            )));
        }
        self.a_inv.matmul(cov_y)?.matmul(&self.a_inv.transpose())
    }

    /// Same sandwich recovery for lagged uncentered second moments.
    pub fn recover_lagged_second_moment(&self, second_y: &Matrix) -> Result<Matrix> {
        self.recover_lagged_cov(second_y)
    }
}

fn thin<R: Rng + ?Sized>(n: u64, alpha: f64, rng: &mut R) -> f64 {
    if n == 0 {
        0.0
    } else if alpha >= 1.0 {
        n as f64
    } else {
        Binomial::new(n, alpha).unwrap().sample(rng) as f64
    }
}

fn sample_laplace<R: Rng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>() - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Observed population totals `sum_i y_t(i)` for every time step of every
/// realization, in realization-major order.
pub fn ensemble_totals(ens: &Ensemble) -> Vec<f64> {
    let mut totals = Vec::with_capacity(ens.k() * ens.t_len());
    for cs in ens.series() {
        for t in 0..cs.t_len() {
            totals.push(cs.row(t).iter().sum());
        }
    }
    totals
}

/// Estimated population size and detection probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinomialParams {
    pub n: f64,
    pub alpha: f64,
}

/// Moment-matching estimate of `(N, alpha)` from observed totals under
/// uniform binomial detection: totals are `Binomial(N, alpha)`, so
/// `alpha = 1 - variance/mean` and `N = mean/alpha`.
///
/// Errors when the totals are overdispersed (`variance >= mean`), which is
/// incompatible with binomial detection.
pub fn estimate_binomial_params(totals: &[f64]) -> Result<BinomialParams> {
    if totals.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least two totals to estimate detection".into(),
        ));
    }
    let len = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / len;
    let var = totals.iter().map(|&z| (z - mean) * (z - mean)).sum::<f64>() / (len - 1.0);
    if var.is_nan() || mean.is_nan() || var >= mean {
        return Err(Error::DegenerateTotals {
            mean,
            variance: var,
        });
    }
    let alpha = 1.0 - var / mean;
    Ok(BinomialParams {
        n: mean / alpha,
        alpha,
    })
}

/// State-count-independent description of a noise setting, as written in
/// configs and CLI flags: `none`, `binomial:0.5`, `poisson:1.5`,
/// `gaussian:5`, `laplace:2`, `state_binomial:0.9,0.5,0.2`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: String,
    pub params: Vec<f64>,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            kind: "none".into(),
            params: vec![],
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (kind, rest) = match text.split_once(':') {
            Some((k, r)) => (k.trim(), Some(r)),
            None => (text.trim(), None),
        };
        let params: Vec<f64> = match rest {
            None => vec![],
            Some(r) => r
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad noise parameter: {}", p)))
                })
                .collect::<Result<_>>()?,
        };
        let expected: Option<usize> = match kind {
            "none" => Some(0),
            "binomial" | "poisson" | "gaussian" | "laplace" => Some(1),
            "state_binomial" => None,
            other => {
                return Err(Error::Config(format!("unknown noise kind: {}", other)));
            }
        };
        if let Some(want) = expected {
            if params.len() != want {
                return Err(Error::Config(format!(
                    "noise kind {} takes {} parameter(s), got {}",
                    kind,
                    want,
                    params.len()
                )));
            }
        } else if params.is_empty() {
            return Err(Error::Config(
                "state_binomial needs one probability per state".into(),
            ));
        }
        Ok(NoiseSpec {
            kind: kind.to_string(),
            params,
        })
    }

    /// Canonical `kind:p1,p2` form (just `none` when parameterless).
    pub fn to_spec_string(&self) -> String {
        if self.params.is_empty() {
            self.kind.clone()
        } else {
            format!(
                "{}:{}",
                self.kind,
                self.params
                    .iter()
                    .map(|p| p.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            )
        }
    }

    /// Parameters joined with `;`, safe to embed in a comma-separated record.
    pub fn param_field(&self) -> String {
        self.params
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Binds the spec to a concrete state count.
    pub fn build(&self, s: usize) -> Result<NoiseModel> {
        let kind = match self.kind.as_str() {
            "none" => NoiseKind::None,
            "binomial" => NoiseKind::Binomial {
                alpha: self.params[0],
            },
            "poisson" => NoiseKind::Poisson {
                alpha: self.params[0],
            },
            "gaussian" => NoiseKind::Gaussian {
                sigma2: self.params[0],
            },
            "laplace" => NoiseKind::Laplace { b: self.params[0] },
            "state_binomial" => NoiseKind::StateBinomial {
                alphas: self.params.clone(),
            },
            other => return Err(Error::Config(format!("unknown noise kind: {}", other))),
        };
        NoiseModel::new(kind, s)
    }
}

/// Applies one independent noise draw to every realization of an ensemble.
pub fn apply_noise_ensemble<R: Rng + ?Sized>(
    model: &NoiseModel,
    ens: &Ensemble,
    rng: &mut R,
) -> Result<Ensemble> {
    let noisy = ens
        .series()
        .iter()
        .map(|cs| model.apply_noise(cs, rng))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(noisy)
}
