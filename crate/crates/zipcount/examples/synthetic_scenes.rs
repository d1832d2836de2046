//! Synthetic scenes with known structural zeros, and corpus sparsity stats.
//!
//! ```bash
//! cargo run --example synthetic_scenes
//! ```

use zipcount::blockgrid::{make_grid, sparsity_stats};
use zipcount::synth::{generate_corpus, generate_scene, SceneConfig};

fn main() -> zipcount::Result<()> {
    let grid = make_grid(256, 256, 16)?;
    let cfg = SceneConfig::new(grid, 7);
    let scene = generate_scene(&cfg)?;

    let structural = scene.structural_mask.iter().filter(|&&m| m).count();
    let zero_blocks = scene.count_map.counts.iter().filter(|&&c| c == 0).count();
    let sampling_zeros = zero_blocks - structural;
    println!("one scene ({}x{} blocks):", grid.grid_h, grid.grid_w);
    println!("  heads placed     = {}", scene.count_map.total());
    println!("  structural zeros = {structural} (can never hold a head)");
    println!("  sampling zeros   = {sampling_zeros} (head region, no head landed)");

    // A corpus shares the config; per-scene seeds are derived, so the
    // corpus is reproducible and scenes stay independent.
    let corpus = generate_corpus(&cfg, 25)?;
    let maps: Vec<_> = corpus.iter().map(|s| s.count_map.clone()).collect();
    let stats = sparsity_stats(&maps)?;
    println!("\ncorpus of {} scenes:", corpus.len());
    println!("  blocks        = {}", stats.total_blocks);
    println!("  zero fraction = {:.4}", stats.zero_fraction);
    println!("  count histogram:");
    for (count, blocks) in &stats.histogram {
        println!("    {count:>3} heads: {blocks:>6} blocks");
    }
    Ok(())
}
