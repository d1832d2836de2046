//! The three training loss terms and their exact gradients.
//!
//! * cross-entropy over positive blocks between the softmaxed positive-bin
//!   logits and the one-hot ground truth,
//! * ZIP negative log-likelihood summed over every block,
//! * absolute error between predicted and ground-truth total counts,
//!
//! combined as `total = omega * ce + nll + count`. Gradients are returned
//! w.r.t. the head outputs: the positive-bin logits and the pi logits. Both
//! the NLL and the count term reach the lambda logits through the shared
//! expectation decode, so the chain rule through the softmax is applied
//! here rather than in the callers.

use ndarray::{Array2, Array3};

use crate::blockgrid::{one_hot_positive, BinScheme, CountMap};
use crate::error::{Error, Result};
use crate::zipdist::{sigmoid, zip_nll_with_grad, CountValue};

/// Weight of the cross-entropy term in the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { omega: 1.0 }
    }
}

impl LossWeights {
    pub fn new(omega: f64) -> Result<Self> {
        if !omega.is_finite() || omega < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "omega must be finite and non-negative, got {omega}"
            )));
        }
        Ok(Self { omega })
    }
}

/// Values and head-output gradients of one total-loss evaluation.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub ce: f64,
    pub nll: f64,
    pub count: f64,
    /// Exactly `omega * ce + nll + count`.
    pub total: f64,
    pub grad_lambda_logits: Array3<f64>,
    pub grad_pi_logits: Array2<f64>,
}

/// Value and gradients of the blockwise ZIP negative log-likelihood.
#[derive(Debug, Clone)]
pub struct NllMapResult {
    pub value: f64,
    pub grad_pi_logits: Array2<f64>,
    pub grad_lambda: Array2<f64>,
}

fn check_grid(logits_hw: (usize, usize), y: &CountMap) -> Result<()> {
    let want = (y.grid.grid_h, y.grid.grid_w);
    if logits_hw != want {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} grid", want.0, want.1),
            actual: format!("{}x{} logits", logits_hw.0, logits_hw.1),
        });
    }
    Ok(())
}

/// Mean cross-entropy over the blocks with a positive ground-truth count,
/// between softmaxed positive-bin logits and the one-hot bin targets.
///
/// Returns the value together with its gradient w.r.t. the logits; the
/// gradient is zero at every zero-count block, and both value and gradient
/// are zero when the map has no positive block.
pub fn ce_positive(
    lambda_logits: &Array3<f64>,
    y: &CountMap,
    scheme: &BinScheme,
) -> Result<(f64, Array3<f64>)> {
    let (ch, h, w) = lambda_logits.dim();
    if ch != scheme.n_positive() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} positive-bin channels", scheme.n_positive()),
            actual: format!("{ch} channels"),
        });
    }
    check_grid((h, w), y)?;

    let targets = one_hot_positive(y, scheme);
    let mut grad = Array3::zeros((ch, h, w));
    if targets.is_empty() {
        return Ok((0.0, grad));
    }
    let m = targets.coords.len() as f64;
    let mut value = 0.0;
    for (row, &(i, j)) in targets.coords.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for k in 0..ch {
            max = max.max(lambda_logits[(k, i, j)]);
        }
        let mut norm = 0.0;
        for k in 0..ch {
            norm += (lambda_logits[(k, i, j)] - max).exp();
        }
        let lse = max + norm.ln();
        for k in 0..ch {
            let softmax = (lambda_logits[(k, i, j)] - lse).exp();
            let target = targets.one_hot[(row, k)];
            grad[(k, i, j)] = (softmax - target) / m;
            if target == 1.0 {
                value += lse - lambda_logits[(k, i, j)];
            }
        }
    }
    Ok((value / m, grad))
}

/// ZIP negative log-likelihood summed over all blocks of the grid, with
/// gradients w.r.t. the pi logits and the lambda map entries.
pub fn zip_nll_map(
    pi_logits: &Array2<f64>,
    lambda_map: &Array2<f64>,
    y: &CountMap,
) -> Result<NllMapResult> {
    check_grid(pi_logits.dim(), y)?;
    if pi_logits.dim() != lambda_map.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?} pi logits", pi_logits.dim()),
            actual: format!("{:?} lambda map", lambda_map.dim()),
        });
    }
    let (h, w) = pi_logits.dim();
    let mut value = 0.0;
    let mut grad_pi_logits = Array2::zeros((h, w));
    let mut grad_lambda = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let lambda = lambda_map[(i, j)];
            if lambda <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "lambda map entry ({i}, {j}) is {lambda}, must be positive"
                )));
            }
            let g = zip_nll_with_grad(y.counts[(i, j)] as CountValue, pi_logits[(i, j)], lambda);
            value += g.nll;
            grad_pi_logits[(i, j)] = g.d_logit_pi;
            grad_lambda[(i, j)] = g.d_lambda;
        }
    }
    Ok(NllMapResult {
        value,
        grad_pi_logits,
        grad_lambda,
    })
}

/// Absolute error between the predicted and ground-truth totals,
/// `|sum(y_pred) - sum(y)|`, with its subgradient over the prediction map:
/// the sign of the residual broadcast to every block, zero at an exact tie.
pub fn count_loss(y_pred: &Array2<f64>, y: &CountMap) -> Result<(f64, Array2<f64>)> {
    check_grid(y_pred.dim(), y)?;
    let residual = y_pred.sum() - y.total() as f64;
    let sign = if residual > 0.0 {
        1.0
    } else if residual < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok((residual.abs(), Array2::from_elem(y_pred.dim(), sign)))
}

/// Per-block softmax of the positive-bin logits and its expectation over
/// the positive centers. Returns `(probs, lambda_map)`.
pub fn softmax_decode(
    lambda_logits: &Array3<f64>,
    scheme: &BinScheme,
) -> Result<(Array3<f64>, Array2<f64>)> {
    let (ch, h, w) = lambda_logits.dim();
    if ch != scheme.n_positive() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} positive-bin channels", scheme.n_positive()),
            actual: format!("{ch} channels"),
        });
    }
    let centers = scheme.positive_centers();
    let mut probs = Array3::zeros((ch, h, w));
    let mut lambda = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut max = f64::NEG_INFINITY;
            for k in 0..ch {
                max = max.max(lambda_logits[(k, i, j)]);
            }
            let mut norm = 0.0;
            for k in 0..ch {
                norm += (lambda_logits[(k, i, j)] - max).exp();
            }
            let mut exp = 0.0;
            for k in 0..ch {
                let p = (lambda_logits[(k, i, j)] - max).exp() / norm;
                probs[(k, i, j)] = p;
                exp += p * centers[k];
            }
            lambda[(i, j)] = exp;
        }
    }
    Ok((probs, lambda))
}

/// Composes the three loss terms from raw head outputs.
///
/// The lambda map is the expectation decode of the softmaxed logits, so the
/// NLL and count gradients are chained back through
/// `d lambda / d logit_k = p_k (b_k - lambda)`; the count gradient also
/// reaches the pi logits through the density `(1 - pi) * lambda`.
pub fn total_loss(
    weights: &LossWeights,
    lambda_logits: &Array3<f64>,
    pi_logits: &Array2<f64>,
    y: &CountMap,
    scheme: &BinScheme,
) -> Result<LossReport> {
    let (ch, h, w) = lambda_logits.dim();
    check_grid((h, w), y)?;
    check_grid(pi_logits.dim(), y)?;

    let (probs, lambda_map) = softmax_decode(lambda_logits, scheme)?;
    let centers = scheme.positive_centers();

    let (ce, grad_ce) = ce_positive(lambda_logits, y, scheme)?;
    let nll = zip_nll_map(pi_logits, &lambda_map, y)?;

    let pi = pi_logits.mapv(sigmoid);
    let density = (1.0 - &pi) * &lambda_map;
    let (count, grad_count_density) = count_loss(&density, y)?;

    let mut grad_lambda_logits = Array3::zeros((ch, h, w));
    let mut grad_pi_logits = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let sign = grad_count_density[(i, j)];
            let d_lambda = nll.grad_lambda[(i, j)] + sign * (1.0 - pi[(i, j)]);
            for k in 0..ch {
                grad_lambda_logits[(k, i, j)] = weights.omega * grad_ce[(k, i, j)]
                    + d_lambda * probs[(k, i, j)] * (centers[k] - lambda_map[(i, j)]);
            }
            let d_pi = -sign * lambda_map[(i, j)];
            grad_pi_logits[(i, j)] =
                nll.grad_pi_logits[(i, j)] + d_pi * pi[(i, j)] * (1.0 - pi[(i, j)]);
        }
    }

    Ok(LossReport {
        ce,
        nll: nll.value,
        count,
        total: weights.omega * ce + nll.value + count,
        grad_lambda_logits,
        grad_pi_logits,
    })
}
