//! Corpus-level counting metrics: MAE, RMSE and NAE.
//!
//! NAE averages the relative error only over images with a positive
//! ground-truth count; a corpus without any such image reports NAE as
//! undefined rather than zero.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Ground-truth and predicted total count of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub image_id: String,
    pub truth: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when no image has a positive ground-truth count.
    pub nae: Option<f64>,
    /// Number of images evaluated.
    pub images: usize,
    /// Number of images with a positive ground-truth count.
    pub positive_images: usize,
}

/// Evaluates a corpus of (truth, prediction) pairs.
///
/// Predictions may be negative (they come from external files); truths
/// must be non-negative.
pub fn evaluate(pairs: &[EvalPair]) -> Result<EvalSummary> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no evaluation pairs".into()));
    }
    for p in pairs {
        if !(p.truth >= 0.0 && p.truth.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "ground-truth count of {} is {}, must be finite and >= 0",
                p.image_id, p.truth
            )));
        }
        if !p.predicted.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "predicted count of {} is {}",
                p.image_id, p.predicted
            )));
        }
    }
    let m = pairs.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut rel_sum = 0.0;
    let mut positives = 0usize;
    for p in pairs {
        let err = (p.truth - p.predicted).abs();
        abs_sum += err;
        sq_sum += err * err;
        if p.truth > 0.0 {
            rel_sum += err / p.truth;
            positives += 1;
        }
    }
    Ok(EvalSummary {
        mae: abs_sum / m,
        rmse: (sq_sum / m).sqrt(),
        nae: (positives > 0).then(|| rel_sum / positives as f64),
        images: pairs.len(),
        positive_images: positives,
    })
}

/// Reads a prediction file: CSV with the exact header `image_id,count`.
pub fn read_predictions_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == "image_id,count" => {}
        Some((_, header)) => {
            return Err(bad(format!(
                "expected header 'image_id,count', found '{header}'"
            )))
        }
        None => return Err(bad("empty prediction file".into())),
    }
    let mut out = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (id, value) = line
            .rsplit_once(',')
            .ok_or_else(|| bad(format!("line {}: no comma", lineno + 1)))?;
        let count: f64 = value
            .trim()
            .parse()
            .map_err(|e| bad(format!("line {}: bad count '{value}': {e}", lineno + 1)))?;
        out.push((id.to_string(), count));
    }
    Ok(out)
}
