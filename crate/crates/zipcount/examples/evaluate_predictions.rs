//! Corpus metrics (MAE, RMSE, NAE) from prediction/truth pairs and from a
//! prediction CSV.
//!
//! ```bash
//! cargo run --example evaluate_predictions
//! ```

use zipcount::metrics::{evaluate, read_predictions_csv, EvalPair};

fn main() -> zipcount::Result<()> {
    let pairs = vec![
        EvalPair {
            image_id: "street".into(),
            truth: 10.0,
            predicted: 12.0,
        },
        EvalPair {
            image_id: "plaza".into(),
            truth: 0.0,
            predicted: 1.0,
        },
        EvalPair {
            image_id: "market".into(),
            truth: 5.0,
            predicted: 5.0,
        },
    ];
    let s = evaluate(&pairs)?;
    println!("images           = {}", s.images);
    println!("positive images  = {}", s.positive_images);
    println!("mae              = {:.6}", s.mae);
    println!("rmse             = {:.6}", s.rmse);
    match s.nae {
        // NAE skips zero-truth images entirely, so "plaza" only affects MAE/RMSE.
        Some(nae) => println!("nae              = {:.6} ({:.2}%)", nae, nae * 100.0),
        None => println!("nae              = undefined (no positive-truth image)"),
    }

    // The same numbers via the CSV interface the CLI consumes.
    let dir = std::env::temp_dir().join("zipcount_example");
    std::fs::create_dir_all(&dir)?;
    let csv_path = dir.join("predictions.csv");
    std::fs::write(&csv_path, "image_id,count\nstreet,12\nplaza,1\nmarket,5\n")?;
    let rows = read_predictions_csv(&csv_path)?;
    println!("\nparsed {} rows from {}", rows.len(), csv_path.display());
    Ok(())
}
