//! Blockwise count modeling with zero-inflated Poisson heads.
//!
//! An image is divided into `r x r` blocks and every block's person count
//! is modeled as an independent ZIP variable: with probability `pi` the
//! block is a structural zero (background, non-head regions), otherwise
//! the count is Poisson with a rate decoded from a classification head
//! over count bins. The crate provides:
//!
//! * [`zipdist`] — numerically stable Poisson/ZIP log-pmfs, expectations,
//!   sampling, and exact NLL gradients;
//! * [`blockgrid`] — point annotations to count maps, bin schemes, one-hot
//!   targets, expectation decode, and the `.bcm` map file format;
//! * [`losses`] — the three-term training loss (cross-entropy over positive
//!   blocks, blockwise ZIP NLL, total-count error) with exact gradients;
//! * [`refmodel`] — linear per-block heads over provided feature maps, a
//!   deterministic AdamW training loop, and checkpoint files;
//! * [`synth`] — scene generator with known structural masks, the oracle
//!   for zero-disentanglement experiments;
//! * [`metrics`] — corpus MAE / RMSE / NAE;
//! * [`cli`] — the command layer behind the `zipcount` binary.
//!
//! # Examples
//!
//! Each major capability has a runnable example:
//!
//! ```text
//! cargo run --example zip_distribution      # pmfs, expectations, sampling
//! cargo run --example quantize_annotations  # points -> blocks -> bins -> .bcm
//! cargo run --example loss_gradients        # the three loss terms + grad check
//! cargo run --example synthetic_scenes      # scene generator and sparsity stats
//! cargo run --example train_demo            # ZIP vs Poisson ablation, end to end
//! cargo run --example evaluate_predictions  # MAE / RMSE / NAE over a corpus
//! cargo run --example checkpoint_roundtrip  # save / load a trained model
//! ```
//!
//! The same flows are scriptable through the `zipcount` binary; see the
//! repository README.

pub mod blockgrid;
pub mod cli;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod refmodel;
pub mod synth;
pub mod zipdist;

pub use error::{Error, Result};
