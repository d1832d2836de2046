//! Train briefly, checkpoint the model, load it back, and verify the
//! reloaded heads predict identically.
//!
//! ```bash
//! cargo run --example checkpoint_roundtrip
//! ```

use zipcount::blockgrid::{default_bins, make_grid};
use zipcount::refmodel::{
    forward, read_checkpoint, train, write_checkpoint, Checkpoint, TrainConfig,
};
use zipcount::synth::{generate_corpus, SceneConfig};

fn main() -> zipcount::Result<()> {
    let grid = make_grid(192, 192, 16)?;
    let corpus = generate_corpus(&SceneConfig::new(grid, 11), 6)?;
    let data: Vec<_> = corpus
        .iter()
        .map(|s| (s.features.clone(), s.count_map.clone()))
        .collect();
    let scheme = default_bins(16)?;

    let cfg = TrainConfig {
        seed: 11,
        steps: 120,
        ..TrainConfig::default()
    };
    let result = train(&data, &scheme, &cfg)?;
    println!(
        "trained {} steps, final batch loss {:.4}",
        cfg.steps,
        result.curve.last().map(|p| p.total).unwrap_or(f64::NAN)
    );

    let dir = std::env::temp_dir().join("zipcount_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.zcp");
    write_checkpoint(
        &path,
        &Checkpoint {
            scheme: scheme.clone(),
            seed: cfg.seed,
            step: cfg.steps as u64,
            params: result.params.clone(),
        },
    )?;
    println!(
        "wrote {} ({} bytes)",
        path.display(),
        std::fs::metadata(&path)?.len()
    );

    let loaded = read_checkpoint(&path)?;
    assert_eq!(loaded.params, result.params);

    // Identical predictions from the reloaded heads, down to the bit.
    let before = forward(&corpus[0].features, &result.params, &scheme)?;
    let after = forward(&corpus[0].features, &loaded.params, &loaded.scheme)?;
    assert_eq!(before.count.to_bits(), after.count.to_bits());
    println!(
        "reloaded model predicts count {:.4} for scene 0 (truth {}), bit-identical",
        after.count,
        corpus[0].count_map.total()
    );
    Ok(())
}
