//! Synthetic scenes with a known structural/sampling-zero split.
//!
//! The generator partitions the grid into a structural region that never
//! receives a head and a head region where Poisson-many heads land with
//! positional jitter; jitter pushing an annotation across a block boundary
//! is what produces sampling zeros. Features are informative by
//! construction: head-region blocks are mean-shifted against structural
//! ones, with an extra shift per local count, so a linear head can separate
//! them without being handed the answer.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::blockgrid::{points_to_count_map, AnnotationSet, CountMap, GridSpec};
use crate::error::{Error, Result};
use crate::refmodel::FeatureMap;

/// Generator configuration for one scene.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid: GridSpec,
    /// Fraction of blocks that are structurally zero (never get a head).
    pub structural_fraction: f64,
    /// Expected number of heads in the scene.
    pub mean_heads: f64,
    /// Std-dev in pixels of the annotation jitter around block centers.
    pub jitter_sigma: f64,
    pub feature_channels: usize,
    pub seed: u64,
    /// Mean gap between structural and head-region feature distributions,
    /// in units of their (unit) standard deviation.
    pub feature_separation: f64,
    /// Additional feature-mean shift per head counted in the block.
    pub count_shift: f64,
}

impl SceneConfig {
    pub fn new(grid: GridSpec, seed: u64) -> Self {
        Self {
            grid,
            structural_fraction: 0.9,
            mean_heads: 40.0,
            jitter_sigma: 4.0,
            feature_channels: 4,
            seed,
            feature_separation: 1.5,
            count_shift: 0.5,
        }
    }
}

/// A generated scene together with its latent ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub features: FeatureMap,
    pub annotations: AnnotationSet,
    /// `true` at blocks that can never contain a head.
    pub structural_mask: Array2<bool>,
    pub count_map: CountMap,
}

/// SplitMix64 step, used to derive independent per-scene seeds from a base
/// seed so corpora can be generated in parallel yet reproducibly.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates one scene. Deterministic for a fixed config.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SceneTruth> {
    if !(0.0..=1.0).contains(&cfg.structural_fraction) {
        return Err(Error::InvalidParameter(format!(
            "structural_fraction must be in [0, 1], got {}",
            cfg.structural_fraction
        )));
    }
    if cfg.mean_heads < 0.0 || !cfg.mean_heads.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "mean_heads must be non-negative, got {}",
            cfg.mean_heads
        )));
    }
    if cfg.jitter_sigma < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "jitter_sigma must be non-negative, got {}",
            cfg.jitter_sigma
        )));
    }
    if cfg.feature_channels == 0 {
        return Err(Error::InvalidParameter(
            "feature_channels must be >= 1".into(),
        ));
    }
    let grid = cfg.grid;
    let n_blocks = grid.n_blocks();
    let n_structural = ((cfg.structural_fraction * n_blocks as f64).round() as usize).min(n_blocks);
    if n_structural == n_blocks && cfg.mean_heads > 0.0 {
        return Err(Error::InvalidParameter(
            "every block is structural but mean_heads > 0: nowhere to put heads".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Structural region: a random subset of exactly n_structural blocks.
    let mut block_ids: Vec<usize> = (0..n_blocks).collect();
    block_ids.shuffle(&mut rng);
    let mut structural_mask = Array2::from_elem((grid.grid_h, grid.grid_w), false);
    for &id in block_ids.iter().take(n_structural) {
        structural_mask[(id / grid.grid_w, id % grid.grid_w)] = true;
    }
    let head_blocks: Vec<usize> = block_ids[n_structural..].to_vec();

    // Heads: Poisson-many points, each aimed at the center of a uniformly
    // chosen head block and jittered; jitter is redrawn until the point
    // stays inside the image and outside the structural region, so a jitter
    // across a block boundary yields a sampling zero at the aimed block.
    let n_heads = if cfg.mean_heads > 0.0 {
        Poisson::new(cfg.mean_heads)
            .expect("validated mean_heads")
            .sample(&mut rng) as usize
    } else {
        0
    };
    let r = grid.block as f64;
    let jitter = if cfg.jitter_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.jitter_sigma).expect("validated sigma"))
    } else {
        None
    };
    let mut points = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let id = head_blocks[rng.random_range(0..head_blocks.len())];
        let (row, col) = (id / grid.grid_w, id % grid.grid_w);
        let cx = (col as f64 + 0.5) * r;
        let cy = (row as f64 + 0.5) * r;
        let (x, y) = loop {
            let (dx, dy) = match &jitter {
                Some(n) => (n.sample(&mut rng), n.sample(&mut rng)),
                None => (0.0, 0.0),
            };
            let (x, y) = (cx + dx, cy + dy);
            if x < 0.0 || x >= grid.image_w as f64 || y < 0.0 || y >= grid.image_h as f64 {
                continue;
            }
            let land_col = ((x / r).floor() as usize).min(grid.grid_w - 1);
            let land_row = ((y / r).floor() as usize).min(grid.grid_h - 1);
            if !structural_mask[(land_row, land_col)] {
                break (x, y);
            }
        };
        points.push([x, y]);
    }
    let annotations = AnnotationSet {
        image_h: grid.image_h,
        image_w: grid.image_w,
        points,
    };
    let count_map = points_to_count_map(&annotations, &grid)?;

    // Features: unit-variance noise around a mean that is 0 in the
    // structural region and separation + shift * count in the head region.
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut values = Array3::zeros((cfg.feature_channels, grid.grid_h, grid.grid_w));
    for i in 0..grid.grid_h {
        for j in 0..grid.grid_w {
            let mean = if structural_mask[(i, j)] {
                0.0
            } else {
                cfg.feature_separation + cfg.count_shift * count_map.counts[(i, j)] as f64
            };
            for c in 0..cfg.feature_channels {
                values[(c, i, j)] = mean + noise.sample(&mut rng);
            }
        }
    }

    Ok(SceneTruth {
        features: FeatureMap { grid, values },
        annotations,
        structural_mask,
        count_map,
    })
}

/// Generates `n_scenes` scenes with per-scene seeds derived from
/// `cfg.seed` via [`derive_seed`]; scene `i` is independent of the others,
/// so the corpus is stable under parallel generation.
pub fn generate_corpus(cfg: &SceneConfig, n_scenes: usize) -> Result<Vec<SceneTruth>> {
    use rayon::prelude::*;
    (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let scene_cfg = SceneConfig {
                seed: derive_seed(cfg.seed, i as u64),
                ..*cfg
            };
            generate_scene(&scene_cfg)
        })
        .collect()
}

/// Ranking AUC of a pi map against the structural mask: the probability
/// that a uniformly chosen structural block outranks a uniformly chosen
/// non-structural one, ties counted half. Errors when the mask has only
/// one class.
pub fn disentanglement_score(pi_map: &Array2<f64>, truth: &SceneTruth) -> Result<f64> {
    if pi_map.dim() != truth.structural_mask.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?} mask", truth.structural_mask.dim()),
            actual: format!("{:?} pi map", pi_map.dim()),
        });
    }
    let scored: Vec<(f64, bool)> = pi_map
        .iter()
        .zip(truth.structural_mask.iter())
        .map(|(&p, &s)| (p, s))
        .collect();
    ranking_auc(&scored)
}

/// Mann-Whitney AUC with midranks for ties; `true` is the positive class.
pub fn ranking_auc(scored: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scored.iter().filter(|(_, s)| *s).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(format!(
            "AUC undefined: {n_pos} positive and {n_neg} negative blocks"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks are 1-based; tied scores share the average rank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &sorted[i..j] {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockgrid::make_grid;

    fn base_cfg(seed: u64) -> SceneConfig {
        SceneConfig::new(make_grid(256, 256, 16).unwrap(), seed)
    }

    #[test]
    fn all_structural_scene_is_empty() {
        let cfg = SceneConfig {
            structural_fraction: 1.0,
            mean_heads: 0.0,
            ..base_cfg(5)
        };
        let scene = generate_scene(&cfg).unwrap();
        assert_eq!(scene.count_map.total(), 0);
        assert!(scene.structural_mask.iter().all(|&m| m));

        let bad = SceneConfig {
            structural_fraction: 1.0,
            mean_heads: 3.0,
            ..base_cfg(5)
        };
        assert!(generate_scene(&bad).is_err());
    }

    #[test]
    fn zero_jitter_heads_sit_at_block_centers() {
        let cfg = SceneConfig {
            jitter_sigma: 0.0,
            ..base_cfg(11)
        };
        let scene = generate_scene(&cfg).unwrap();
        assert!(scene.count_map.total() > 0);
        let r = cfg.grid.block as f64;
        for p in &scene.annotations.points {
            assert_eq!(p[0].rem_euclid(r), r / 2.0);
            assert_eq!(p[1].rem_euclid(r), r / 2.0);
        }
        // Every zero-count non-structural block is simply a block no head
        // landed in; with zero jitter the bookkeeping is exact.
        for ((i, j), &c) in scene.count_map.counts.indexed_iter() {
            if scene.structural_mask[(i, j)] {
                assert_eq!(c, 0);
            }
        }
    }

    #[test]
    fn structural_blocks_never_have_counts() {
        for seed in 0..5 {
            let scene = generate_scene(&base_cfg(seed)).unwrap();
            for ((i, j), &c) in scene.count_map.counts.indexed_iter() {
                if scene.structural_mask[(i, j)] {
                    assert_eq!(c, 0, "structural block ({i}, {j}) has count {c}");
                }
            }
            assert_eq!(
                scene.count_map.total(),
                scene.annotations.points.len() as u64
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = base_cfg(77);
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a, b);

        let corpus_a = generate_corpus(&cfg, 4).unwrap();
        let corpus_b = generate_corpus(&cfg, 4).unwrap();
        assert_eq!(corpus_a, corpus_b);
        // Scenes differ from each other.
        assert_ne!(corpus_a[0].features, corpus_a[1].features);
    }

    #[test]
    fn zero_fraction_matches_analytic_prediction() {
        // With zero jitter, head placement is a multinomial split of a
        // Poisson total, so each head block is zero w.p. exp(-mean/k).
        let cfg = SceneConfig {
            jitter_sigma: 0.0,
            structural_fraction: 0.8,
            mean_heads: 60.0,
            ..base_cfg(123)
        };
        let n_blocks = cfg.grid.n_blocks() as f64;
        let n_structural = (0.8 * n_blocks).round();
        let n_head_blocks = n_blocks - n_structural;
        let p_sampling_zero = (-cfg.mean_heads / n_head_blocks).exp();
        let expected = (n_structural + n_head_blocks * p_sampling_zero) / n_blocks;

        let corpus = generate_corpus(&cfg, 40).unwrap();
        let maps: Vec<_> = corpus.iter().map(|s| s.count_map.clone()).collect();
        let stats = crate::blockgrid::sparsity_stats(&maps).unwrap();
        // Binomial std-dev over 40 * 256 blocks is about 0.004; allow 4 sigma.
        let sigma = (expected * (1.0 - expected) / (40.0 * n_blocks)).sqrt();
        assert!(
            (stats.zero_fraction - expected).abs() < 4.0 * sigma + 1e-3,
            "observed {} expected {expected}",
            stats.zero_fraction
        );
    }

    #[test]
    fn auc_perfect_and_degenerate() {
        let scene = generate_scene(&base_cfg(9)).unwrap();
        let perfect = scene.structural_mask.mapv(|m| if m { 1.0 } else { 0.0 });
        assert_eq!(disentanglement_score(&perfect, &scene).unwrap(), 1.0);
        let inverted = scene.structural_mask.mapv(|m| if m { 0.0 } else { 1.0 });
        assert_eq!(disentanglement_score(&inverted, &scene).unwrap(), 0.0);

        let constant = Array2::from_elem(scene.structural_mask.dim(), 0.4);
        assert_eq!(disentanglement_score(&constant, &scene).unwrap(), 0.5);

        let all_structural = generate_scene(&SceneConfig {
            structural_fraction: 1.0,
            mean_heads: 0.0,
            ..base_cfg(9)
        })
        .unwrap();
        assert!(matches!(
            disentanglement_score(&constant, &all_structural),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn auc_of_random_scores_is_near_half() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        // 10^4 blocks, half structural: the null distribution of the AUC has
        // sd ~ sqrt((n+1)/(12 n_pos n_neg)) ~ 0.0058; 0.5 +- 0.02 is ~3.5 sigma.
        let scored: Vec<(f64, bool)> = (0..10_000)
            .map(|i| (rng.random::<f64>(), i % 2 == 0))
            .collect();
        let auc = ranking_auc(&scored).unwrap();
        assert!((auc - 0.5).abs() < 0.02, "auc={auc}");
    }
}
