//! The zero-inflated Poisson distribution: log-pmf, mean, and sampling.
//!
//! ```bash
//! cargo run --example zip_distribution
//! ```

use zipcount::zipdist::{zip_log_pmf, zip_mean, zip_nll_with_grad, zip_sample, ZipParams};

fn main() -> zipcount::Result<()> {
    // A block that is background 70% of the time; when it is a head
    // region, heads arrive at rate 2.5.
    let p = ZipParams::new(0.7, 2.5)?;

    println!("ZIP(pi = {}, lambda = {})", p.pi(), p.lambda());
    println!("{:>5} {:>12} {:>12}", "v", "P(v)", "log P(v)");
    let mut mass = 0.0;
    for v in 0..=10 {
        let log_p = zip_log_pmf(v, &p);
        mass += log_p.exp();
        println!("{v:>5} {:>12.6} {:>12.4}", log_p.exp(), log_p);
    }
    println!("mass of v <= 10: {mass:.9}");

    // The mean (1 - pi) * lambda against a seeded Monte-Carlo estimate.
    let n = 200_000;
    let draws = zip_sample(&p, 42, n);
    let mc_mean = draws.iter().sum::<u64>() as f64 / n as f64;
    println!("\nanalytic mean    = {:.6}", zip_mean(&p));
    println!("monte-carlo mean = {mc_mean:.6}  ({n} draws, seed 42)");

    // The NLL of an observed count and its exact parameter gradients, the
    // quantities the training loop consumes.
    let g = zip_nll_with_grad(0, 0.8473, 2.5); // pi_logit = logit(0.7)
    println!("\nobserved v = 0:");
    println!("  nll          = {:.6}", g.nll);
    println!(
        "  d/d logit_pi = {:.6}  (negative: more zero-inflation helps)",
        g.d_logit_pi
    );
    println!("  d/d lambda   = {:.6}", g.d_lambda);
    Ok(())
}
