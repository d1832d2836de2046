//! The three-term training loss and a finite-difference spot check.
//!
//! ```bash
//! cargo run --example loss_gradients
//! ```

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zipcount::blockgrid::{default_bins, make_grid, CountMap};
use zipcount::losses::{total_loss, LossWeights};

fn main() -> zipcount::Result<()> {
    let scheme = default_bins(8)?;
    let grid = make_grid(24, 24, 8)?;

    // A 3x3 toy instance: random head outputs, a sparse ground truth.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut lambda_logits =
        Array3::from_shape_fn((scheme.n_positive(), 3, 3), |_| rng.random_range(-1.5..1.5));
    let pi_logits = Array2::from_shape_fn((3, 3), |_| rng.random_range(-2.0..2.0));
    let mut y = CountMap::zeros(grid);
    y.counts[(0, 1)] = 2;
    y.counts[(2, 2)] = 5;

    let weights = LossWeights::default(); // omega = 1
    let report = total_loss(&weights, &lambda_logits, &pi_logits, &y, &scheme)?;
    println!(
        "ce    = {:.6}   (mean over the 2 positive blocks)",
        report.ce
    );
    println!("nll   = {:.6}   (sum over all 9 blocks)", report.nll);
    println!("count = {:.6}   (|predicted total - 7|)", report.count);
    println!("total = {:.6}   (= omega*ce + nll + count)", report.total);

    // Central finite differences against one analytic gradient entry: the
    // same comparison `zipcount grad-check` runs over thousands of entries.
    let (k, i, j) = (2, 0, 1);
    let analytic = report.grad_lambda_logits[(k, i, j)];
    let h = 1e-4;
    let orig = lambda_logits[(k, i, j)];
    lambda_logits[(k, i, j)] = orig + h;
    let up = total_loss(&weights, &lambda_logits, &pi_logits, &y, &scheme)?.total;
    lambda_logits[(k, i, j)] = orig - h;
    let down = total_loss(&weights, &lambda_logits, &pi_logits, &y, &scheme)?.total;
    lambda_logits[(k, i, j)] = orig;
    let fd = (up - down) / (2.0 * h);
    println!("\nd total / d lambda_logits[{k},{i},{j}]:");
    println!("  analytic          = {analytic:.10}");
    println!("  finite difference = {fd:.10}");
    println!("  |diff|            = {:.3e}", (analytic - fd).abs());

    // The composite is affine in omega with slope ce.
    for omega in [0.0, 0.5, 1.0] {
        let r = total_loss(
            &LossWeights { omega },
            &lambda_logits,
            &pi_logits,
            &y,
            &scheme,
        )?;
        println!("omega = {omega:<4} total = {:.6}", r.total);
    }
    Ok(())
}
