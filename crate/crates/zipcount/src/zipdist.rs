//! Poisson and zero-inflated Poisson (ZIP) probability functions.
//!
//! The ZIP distribution mixes a point mass at zero (probability `pi`, a
//! "structural" zero) with a Poisson component of rate `lambda`:
//!
//! ```text
//! P(v) = pi + (1 - pi) exp(-lambda)            if v = 0
//! P(v) = (1 - pi) lambda^v exp(-lambda) / v!   if v > 0
//! ```
//!
//! All log-probabilities are evaluated in log space so that extreme
//! parameters (pi logits up to |40|, tiny rates) stay finite, and the
//! negative log-likelihood comes with exact closed-form gradients for
//! training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Poisson};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Observed block count.
pub type CountValue = u64;

/// Lower clamp applied to Poisson rates. Keeps `ln(lambda)` and the NLL
/// gradients finite without noticeably moving any realistic rate.
pub const LAMBDA_FLOOR: f64 = 1e-8;

/// Validated `(pi, lambda)` pair of one ZIP distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZipParams {
    pi: f64,
    lambda: f64,
}

impl ZipParams {
    /// Requires `pi` in `[0, 1]` and `lambda > 0`; `lambda` is clamped up
    /// to [`LAMBDA_FLOOR`].
    pub fn new(pi: f64, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&pi) || !pi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "pi must be in [0, 1], got {pi}"
            )));
        }
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "lambda must be finite and positive, got {lambda}"
            )));
        }
        Ok(Self {
            pi,
            lambda: lambda.max(LAMBDA_FLOOR),
        })
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Value and parameter gradients of one ZIP negative log-likelihood term.
#[derive(Debug, Clone, Copy)]
pub struct NllGrad {
    /// `-ln P(v | sigmoid(pi_logit), lambda)`
    pub nll: f64,
    /// Derivative of `nll` w.r.t. the logit of `pi`.
    pub d_logit_pi: f64,
    /// Derivative of `nll` w.r.t. `lambda`.
    pub d_lambda: f64,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `ln(1 + e^x)`, stable over the whole real line.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(e^a + e^b)` without overflow; exact when one side is `-inf`.
#[inline]
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

#[inline]
fn ln_factorial(u: CountValue) -> f64 {
    // 0! = 1! = 1; ln_gamma(1.0) itself is only zero to within rounding.
    if u < 2 {
        0.0
    } else {
        ln_gamma(u as f64 + 1.0)
    }
}

/// `ln P(u | lambda)` of a Poisson distribution: `u ln(lambda) - lambda - ln(u!)`.
pub fn poisson_log_pmf(u: CountValue, lambda: f64) -> Result<f64> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "lambda must be finite and positive, got {lambda}"
        )));
    }
    Ok(u as f64 * lambda.ln() - lambda - ln_factorial(u))
}

/// `ln P(v | pi, lambda)` of the ZIP mixture.
///
/// The `v = 0` branch is evaluated as `logaddexp(ln pi, ln(1 - pi) - lambda)`
/// so the reduction at `pi = 0` reproduces the plain Poisson log-pmf
/// bit-for-bit. Returns `-inf` for `v > 0` with `pi = 1`.
pub fn zip_log_pmf(v: CountValue, p: &ZipParams) -> f64 {
    // poisson_log_pmf cannot fail: ZipParams guarantees lambda > 0.
    let pois = poisson_log_pmf(v, p.lambda).expect("validated lambda");
    let log_one_minus_pi = (1.0 - p.pi).ln();
    if v == 0 {
        logaddexp(p.pi.ln(), log_one_minus_pi + pois)
    } else {
        log_one_minus_pi + pois
    }
}

/// Expectation of the ZIP distribution: `(1 - pi) * lambda`.
pub fn zip_mean(p: &ZipParams) -> f64 {
    (1.0 - p.pi) * p.lambda
}

/// Negative log-likelihood of one observed count under
/// `ZIP(sigmoid(pi_logit), lambda)` together with its exact gradients.
///
/// Everything touching `pi` is kept in log space (`ln pi = -softplus(-s)`,
/// `ln(1 - pi) = -softplus(s)`), so value and gradients stay finite for
/// logits as extreme as +-40. `lambda` below [`LAMBDA_FLOOR`] is clamped.
pub fn zip_nll_with_grad(v: CountValue, pi_logit: f64, lambda: f64) -> NllGrad {
    let lambda = lambda.max(LAMBDA_FLOOR);
    let pi = sigmoid(pi_logit);
    if v > 0 {
        // ln P = -softplus(s) + v ln(lambda) - lambda - ln(v!)
        let nll = softplus(pi_logit) - (v as f64 * lambda.ln() - lambda - ln_factorial(v));
        NllGrad {
            nll,
            d_logit_pi: pi,
            d_lambda: 1.0 - v as f64 / lambda,
        }
    } else {
        let log_pi = -softplus(-pi_logit);
        let log_pois_zero = -softplus(pi_logit) - lambda;
        let log_p = logaddexp(log_pi, log_pois_zero);
        // Posterior weights of the two mixture branches given v = 0.
        let w_structural = (log_pi - log_p).exp();
        let w_sampling = (log_pois_zero - log_p).exp();
        NllGrad {
            nll: -log_p,
            d_logit_pi: w_sampling * pi - w_structural * (1.0 - pi),
            d_lambda: w_sampling,
        }
    }
}

/// Draws `n` i.i.d. ZIP variates: with probability `pi` a structural zero,
/// otherwise a Poisson(`lambda`) count. Deterministic for a fixed seed.
pub fn zip_sample(p: &ZipParams, rng_seed: u64, n: usize) -> Vec<CountValue> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let structural = Bernoulli::new(p.pi).expect("validated pi");
    let poisson = Poisson::new(p.lambda).expect("validated lambda");
    (0..n)
        .map(|_| {
            if structural.sample(&mut rng) {
                0
            } else {
                poisson.sample(&mut rng) as CountValue
            }
        })
        .collect()
}
