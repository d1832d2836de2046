//! Command implementations behind the `zipcount` binary.
//!
//! Each command returns a report struct that renders to stable `key=value`
//! text lines; commands with an output directory also write a JSON report
//! and a [`RunManifest`] there. File-per-image work runs on a rayon pool
//! sized by `--workers` (or the `ZIPCOUNT_WORKERS` environment variable),
//! with deterministic, order-preserving aggregation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blockgrid::{
    bcm_to_bytes, default_bins, make_grid, points_to_count_map, read_bcm, sparsity_stats,
    write_bcm, write_file_atomic, AnnotationSet, BinScheme, CountMap, SparsityStats,
};
use crate::error::{Error, Result};
use crate::losses::{ce_positive, count_loss, total_loss, zip_nll_map, LossWeights};
use crate::metrics::{evaluate, read_predictions_csv, EvalPair, EvalSummary};
use crate::refmodel::{
    dataset_mean_nll, forward, train, write_checkpoint, Checkpoint, FeatureMap, TrainConfig,
    TrainResult,
};
use crate::synth::{generate_corpus, ranking_auc, SceneConfig};
use crate::zipdist::zip_nll_with_grad;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance record emitted by every command.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the effective configuration JSON.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub input_paths: Vec<String>,
    pub output_paths: Vec<String>,
    pub tool_version: String,
    pub wall_time_ms: u64,
}

impl RunManifest {
    fn new<C: Serialize>(command: &str, config: &C, seed: Option<u64>) -> Self {
        let json = serde_json::to_vec(config).expect("config serializes");
        let hash = format!("{:x}", Sha256::digest(&json));
        Self {
            command: command.to_string(),
            config_hash: hash,
            seed,
            input_paths: Vec::new(),
            output_paths: Vec::new(),
            tool_version: TOOL_VERSION.to_string(),
            wall_time_ms: 0,
        }
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "manifest_command={}", self.command);
        let _ = writeln!(s, "manifest_config_hash={}", self.config_hash);
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "manifest_seed={seed}");
        }
        let _ = writeln!(s, "manifest_tool_version={}", self.tool_version);
        let _ = writeln!(s, "manifest_wall_time_ms={}", self.wall_time_ms);
        s
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Runs `f` on a rayon pool with `workers` threads; falls back to the
/// `ZIPCOUNT_WORKERS` environment variable, then to the rayon default.
pub fn with_worker_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    let workers = workers.or_else(|| {
        std::env::var("ZIPCOUNT_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    match workers {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("worker pool")
            .install(f),
        _ => f(),
    }
}

fn sorted_files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

// ---------------------------------------------------------------------------
// gt-map
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GtMapOptions {
    pub ann_dir: PathBuf,
    pub out_dir: PathBuf,
    pub block: usize,
    pub workers: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct GtMapReport {
    pub outputs: Vec<GtMapEntry>,
    pub failures: Vec<GtMapFailure>,
    pub manifest: RunManifest,
}

#[derive(Debug, Serialize)]
pub struct GtMapEntry {
    pub image_id: String,
    pub path: String,
    pub total: u64,
    pub grid_h: usize,
    pub grid_w: usize,
}

#[derive(Debug, Serialize)]
pub struct GtMapFailure {
    pub file: String,
    pub error: String,
}

impl GtMapReport {
    pub fn text(&self) -> String {
        let mut s = String::new();
        for e in &self.outputs {
            let _ = writeln!(
                s,
                "map={} total={} grid={}x{}",
                e.path, e.total, e.grid_h, e.grid_w
            );
        }
        for f in &self.failures {
            let _ = writeln!(s, "failed={} error={:?}", f.file, f.error);
        }
        let _ = writeln!(s, "files_ok={}", self.outputs.len());
        let _ = writeln!(s, "files_failed={}", self.failures.len());
        s.push_str(&self.manifest.text());
        s
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Converts a directory of annotation JSON files into one `.bcm` count map
/// per image. Files that fail to parse or validate are reported
/// individually; the command is a failure if any file fails.
pub fn cmd_gt_map(opts: &GtMapOptions) -> Result<GtMapReport> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("gt-map", opts, None);

    let files = sorted_files_with_extension(&opts.ann_dir, "json")?;
    if files.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no annotations found in {}",
            opts.ann_dir.display()
        )));
    }
    fs::create_dir_all(&opts.out_dir)?;

    let block = opts.block;
    let out_dir = opts.out_dir.clone();
    let results: Vec<std::result::Result<GtMapEntry, GtMapFailure>> =
        with_worker_pool(opts.workers, || {
            files
                .par_iter()
                .map(|path| {
                    let convert = || -> Result<GtMapEntry> {
                        let ann = AnnotationSet::from_json_file(path)?;
                        let grid = make_grid(ann.image_h, ann.image_w, block)?;
                        let map = points_to_count_map(&ann, &grid)?;
                        let out_path = out_dir.join(format!("{}.bcm", stem_of(path)));
                        write_file_atomic(&out_path, &bcm_to_bytes(&map.to_tensor()))?;
                        Ok(GtMapEntry {
                            image_id: stem_of(path),
                            path: out_path.to_string_lossy().into_owned(),
                            total: map.total(),
                            grid_h: grid.grid_h,
                            grid_w: grid.grid_w,
                        })
                    };
                    convert().map_err(|e| GtMapFailure {
                        file: path.to_string_lossy().into_owned(),
                        error: e.to_string(),
                    })
                })
                .collect()
        });

    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(e) => outputs.push(e),
            Err(f) => failures.push(f),
        }
    }
    manifest.input_paths = files
        .iter()
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    manifest.output_paths = outputs.iter().map(|e| e.path.clone()).collect();
    manifest.wall_time_ms = start.elapsed().as_millis() as u64;
    write_json(&opts.out_dir.join("manifest.json"), &manifest)?;

    let report = GtMapReport {
        outputs,
        failures,
        manifest,
    };
    write_json(&opts.out_dir.join("report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct StatsOptions {
    pub map_dir: PathBuf,
    pub out_dir: Option<PathBuf>,
    /// Optional bin scheme (from `--bins` or `--block`) for a per-bin rollup.
    pub bins: Option<BinScheme>,
}

#[derive(Debug, Serialize)]
pub struct StatsReport {
    pub groups: Vec<GroupStats>,
    pub manifest: RunManifest,
}

#[derive(Debug, Serialize)]
pub struct GroupStats {
    pub grid_h: usize,
    pub grid_w: usize,
    pub files: usize,
    pub stats: SparsityStats,
    /// `(bin label, blocks)` per bin of the configured scheme.
    pub bin_histogram: Option<Vec<(String, u64)>>,
}

impl StatsReport {
    pub fn text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let prefix = format!("grid={}x{}", g.grid_h, g.grid_w);
            let _ = writeln!(s, "{prefix} files={}", g.files);
            let _ = writeln!(s, "{prefix} blocks={}", g.stats.total_blocks);
            let _ = writeln!(s, "{prefix} zero_blocks={}", g.stats.zero_blocks);
            let _ = writeln!(s, "{prefix} zero_fraction={}", g.stats.zero_fraction);
            for (count, blocks) in &g.stats.histogram {
                let _ = writeln!(s, "{prefix} count_{count}={blocks}");
            }
            if let Some(hist) = &g.bin_histogram {
                for (label, blocks) in hist {
                    let _ = writeln!(s, "{prefix} bin_{label}={blocks}");
                }
            }
        }
        s.push_str(&self.manifest.text());
        s
    }
}

/// Aggregates blockwise count histograms over a directory of `.bcm` maps,
/// grouped by grid size when sizes are mixed.
pub fn cmd_stats(opts: &StatsOptions) -> Result<StatsReport> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("stats", opts, None);
    let files = sorted_files_with_extension(&opts.map_dir, "bcm")?;
    if files.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no .bcm maps found in {}",
            opts.map_dir.display()
        )));
    }

    let mut by_size: std::collections::BTreeMap<(usize, usize), Vec<CountMap>> =
        std::collections::BTreeMap::new();
    for path in &files {
        let tensor = read_bcm(path)?;
        let (channels, h, w) = tensor.dim();
        if channels != 1 {
            return Err(Error::Format {
                path: path.clone(),
                detail: format!("expected a 1-channel count map, found {channels} channels"),
            });
        }
        let mut counts = Array2::zeros((h, w));
        for ((_, i, j), &v) in tensor.indexed_iter() {
            if v < 0.0 || (v - v.round()).abs() > 1e-3 {
                return Err(Error::Format {
                    path: path.clone(),
                    detail: format!("value {v} at block ({i}, {j}) is not a count"),
                });
            }
            counts[(i, j)] = v.round() as u32;
        }
        // Block size is not stored in the file; a unit-block grid carries
        // the counts through the shared statistics path.
        let grid = make_grid(h, w, 1)?;
        by_size
            .entry((h, w))
            .or_default()
            .push(CountMap { grid, counts });
    }

    let mut groups = Vec::new();
    for ((h, w), maps) in by_size {
        let stats = sparsity_stats(&maps)?;
        let bin_histogram = opts.bins.as_ref().map(|scheme| {
            let mut hist = vec![0u64; scheme.n_bins()];
            for (&count, &blocks) in &stats.histogram {
                hist[scheme.bin_of(count)] += blocks;
            }
            scheme
                .bins()
                .iter()
                .zip(hist)
                .map(|(b, n)| {
                    let label = match b.hi {
                        Some(hi) if hi == b.lo => format!("{}", b.lo),
                        Some(hi) => format!("{}-{}", b.lo, hi),
                        None => format!("{}+", b.lo),
                    };
                    (label, n)
                })
                .collect()
        });
        groups.push(GroupStats {
            grid_h: h,
            grid_w: w,
            files: maps.len(),
            stats,
            bin_histogram,
        });
    }

    manifest.input_paths = files
        .iter()
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    manifest.wall_time_ms = start.elapsed().as_millis() as u64;
    if let Some(out) = &opts.out_dir {
        fs::create_dir_all(out)?;
        write_json(&out.join("manifest.json"), &manifest)?;
    }
    let report = StatsReport { groups, manifest };
    if let Some(out) = &opts.out_dir {
        write_json(&out.join("report.json"), &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

/// Deliberately corrupt one analytic gradient term; used to verify that the
/// checker actually catches wrong gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InjectedFault {
    CeSignFlip,
    NllSignFlip,
    CountSignFlip,
}

#[derive(Debug, Serialize)]
pub struct GradCheckReport {
    pub passed: bool,
    pub trials: u64,
    pub seed: u64,
    pub per_term: Vec<TermCheck>,
    pub manifest: RunManifest,
}

#[derive(Debug, Serialize)]
pub struct TermCheck {
    pub term: String,
    pub instances: u64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Coordinates of the worst comparison, for debugging failures.
    pub worst_at: String,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn text(&self) -> String {
        let mut s = String::new();
        for t in &self.per_term {
            let _ = writeln!(
                s,
                "term={} instances={} max_rel_error={:e} tolerance={:e} passed={} worst_at={:?}",
                t.term, t.instances, t.max_rel_error, t.tolerance, t.passed, t.worst_at
            );
        }
        let _ = writeln!(s, "passed={}", self.passed);
        s.push_str(&self.manifest.text());
        s
    }
}

struct WorstTracker {
    max: f64,
    at: String,
}

impl WorstTracker {
    fn new() -> Self {
        Self {
            max: 0.0,
            at: String::from("-"),
        }
    }

    fn observe(&mut self, err: f64, at: impl FnOnce() -> String) {
        if err > self.max {
            self.max = err;
            self.at = at();
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Random (lambda logits, pi logits, counts) instance on a small grid whose
/// count-loss residual stays clear of the |.| kink, so central differences
/// are well defined everywhere.
fn random_loss_instance(
    rng: &mut ChaCha8Rng,
    scheme: &BinScheme,
    h: usize,
    w: usize,
) -> (Array3<f64>, Array2<f64>, CountMap) {
    loop {
        let ch = scheme.n_positive();
        let lambda_logits = Array3::from_shape_fn((ch, h, w), |_| rng.random_range(-2.0..2.0));
        let pi_logits = Array2::from_shape_fn((h, w), |_| rng.random_range(-3.0..3.0));
        let grid = make_grid(h * 8, w * 8, 8).expect("positive dims");
        let mut y = CountMap::zeros(grid);
        for c in y.counts.iter_mut() {
            *c = if rng.random_bool(0.6) {
                0
            } else {
                rng.random_range(1..=10)
            };
        }
        let report = total_loss(
            &LossWeights::default(),
            &lambda_logits,
            &pi_logits,
            &y,
            scheme,
        )
        .expect("valid instance");
        if report.count > 0.05 {
            return (lambda_logits, pi_logits, y);
        }
    }
}

/// Verifies every analytic gradient in the crate against central finite
/// differences on `trials` randomized instances per term: the per-sample
/// ZIP NLL, the three loss terms, and the full composite through the
/// softmax-expectation decode.
pub fn cmd_grad_check(
    seed: u64,
    trials: u64,
    fault: Option<InjectedFault>,
) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be ≥ 1".into()));
    }
    let start = Instant::now();
    #[derive(Serialize)]
    struct Config {
        seed: u64,
        trials: u64,
        fault: Option<InjectedFault>,
    }
    let mut manifest = RunManifest::new(
        "grad-check",
        &Config {
            seed,
            trials,
            fault,
        },
        Some(seed),
    );

    const TOL_TERM: f64 = 1e-5;
    const TOL_COMPOSITE: f64 = 1e-4;
    let scheme = default_bins(8)?;
    let weights = LossWeights::default();
    let mut per_term = Vec::new();

    // Per-sample ZIP NLL gradients.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = WorstTracker::new();
        for trial in 0..trials {
            let v = rng.random_range(0..=50u64);
            let s = rng.random_range(-10.0..10.0);
            let lambda = rng.random_range(1e-3f64.ln()..50f64.ln()).exp();
            let g = zip_nll_with_grad(v, s, lambda);
            let h_s = 1e-5;
            let h_l = 1e-5 * lambda.max(0.1);
            let fd_s = (zip_nll_with_grad(v, s + h_s, lambda).nll
                - zip_nll_with_grad(v, s - h_s, lambda).nll)
                / (2.0 * h_s);
            let fd_l = (zip_nll_with_grad(v, s, lambda + h_l).nll
                - zip_nll_with_grad(v, s, lambda - h_l).nll)
                / (2.0 * h_l);
            worst.observe(rel_err(g.d_logit_pi, fd_s), || {
                format!("trial {trial} d_logit_pi (v={v}, s={s}, lambda={lambda})")
            });
            worst.observe(rel_err(g.d_lambda, fd_l), || {
                format!("trial {trial} d_lambda (v={v}, s={s}, lambda={lambda})")
            });
        }
        per_term.push(TermCheck {
            term: "zip_nll_sample".into(),
            instances: trials,
            tolerance: TOL_TERM,
            max_rel_error: worst.max,
            worst_at: worst.at,
            passed: worst.max < TOL_TERM,
        });
    }

    // Cross-entropy over positive blocks.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut worst = WorstTracker::new();
        let flip = if fault == Some(InjectedFault::CeSignFlip) {
            -1.0
        } else {
            1.0
        };
        for trial in 0..trials {
            let (h, w) = if trial % 2 == 0 { (2, 2) } else { (3, 3) };
            let (mut logits, _, y) = random_loss_instance(&mut rng, &scheme, h, w);
            let (_, grad) = ce_positive(&logits, &y, &scheme)?;
            let step = 1e-5;
            for k in 0..scheme.n_positive() {
                for i in 0..h {
                    for j in 0..w {
                        let orig = logits[(k, i, j)];
                        logits[(k, i, j)] = orig + step;
                        let up = ce_positive(&logits, &y, &scheme)?.0;
                        logits[(k, i, j)] = orig - step;
                        let down = ce_positive(&logits, &y, &scheme)?.0;
                        logits[(k, i, j)] = orig;
                        let fd = (up - down) / (2.0 * step);
                        worst.observe(rel_err(flip * grad[(k, i, j)], fd), || {
                            format!("trial {trial} lambda_logits[{k},{i},{j}]")
                        });
                    }
                }
            }
        }
        per_term.push(TermCheck {
            term: "ce".into(),
            instances: trials,
            tolerance: TOL_TERM,
            max_rel_error: worst.max,
            worst_at: worst.at,
            passed: worst.max < TOL_TERM,
        });
    }

    // Blockwise ZIP NLL map (gradients w.r.t. pi logits and lambda entries).
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let mut worst = WorstTracker::new();
        let flip = if fault == Some(InjectedFault::NllSignFlip) {
            -1.0
        } else {
            1.0
        };
        for trial in 0..trials {
            let (h, w) = if trial % 2 == 0 { (2, 2) } else { (3, 3) };
            let grid = make_grid(h * 8, w * 8, 8)?;
            let mut y = CountMap::zeros(grid);
            for c in y.counts.iter_mut() {
                *c = rng.random_range(0..=10);
            }
            let mut pi_logits = Array2::from_shape_fn((h, w), |_| rng.random_range(-3.0..3.0));
            let mut lambda = Array2::from_shape_fn((h, w), |_| rng.random_range(0.5..8.0));
            let r = zip_nll_map(&pi_logits, &lambda, &y)?;
            let step = 1e-5;
            for i in 0..h {
                for j in 0..w {
                    let orig = pi_logits[(i, j)];
                    pi_logits[(i, j)] = orig + step;
                    let up = zip_nll_map(&pi_logits, &lambda, &y)?.value;
                    pi_logits[(i, j)] = orig - step;
                    let down = zip_nll_map(&pi_logits, &lambda, &y)?.value;
                    pi_logits[(i, j)] = orig;
                    let fd = (up - down) / (2.0 * step);
                    worst.observe(rel_err(flip * r.grad_pi_logits[(i, j)], fd), || {
                        format!("trial {trial} pi_logits[{i},{j}]")
                    });

                    let orig = lambda[(i, j)];
                    lambda[(i, j)] = orig + step;
                    let up = zip_nll_map(&pi_logits, &lambda, &y)?.value;
                    lambda[(i, j)] = orig - step;
                    let down = zip_nll_map(&pi_logits, &lambda, &y)?.value;
                    lambda[(i, j)] = orig;
                    let fd = (up - down) / (2.0 * step);
                    worst.observe(rel_err(flip * r.grad_lambda[(i, j)], fd), || {
                        format!("trial {trial} lambda[{i},{j}]")
                    });
                }
            }
        }
        per_term.push(TermCheck {
            term: "nll".into(),
            instances: trials,
            tolerance: TOL_TERM,
            max_rel_error: worst.max,
            worst_at: worst.at,
            passed: worst.max < TOL_TERM,
        });
    }

    // Count loss subgradient.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        let mut worst = WorstTracker::new();
        let flip = if fault == Some(InjectedFault::CountSignFlip) {
            -1.0
        } else {
            1.0
        };
        for trial in 0..trials {
            let (h, w) = (2, 3);
            let grid = make_grid(h * 8, w * 8, 8)?;
            let mut y = CountMap::zeros(grid);
            for c in y.counts.iter_mut() {
                *c = rng.random_range(0..=5);
            }
            // Keep the total residual away from the kink.
            let mut pred = Array2::from_shape_fn((h, w), |(i, j)| {
                y.counts[(i, j)] as f64 + rng.random_range(-1.0..1.0)
            });
            let residual: f64 = pred.sum() - y.total() as f64;
            if residual.abs() < 0.05 {
                pred[(0, 0)] += 0.5;
            }
            let (_, grad) = count_loss(&pred, &y)?;
            let step = 1e-5;
            for i in 0..h {
                for j in 0..w {
                    let orig = pred[(i, j)];
                    pred[(i, j)] = orig + step;
                    let up = count_loss(&pred, &y)?.0;
                    pred[(i, j)] = orig - step;
                    let down = count_loss(&pred, &y)?.0;
                    pred[(i, j)] = orig;
                    let fd = (up - down) / (2.0 * step);
                    worst.observe(rel_err(flip * grad[(i, j)], fd), || {
                        format!("trial {trial} y_pred[{i},{j}]")
                    });
                }
            }
        }
        per_term.push(TermCheck {
            term: "count".into(),
            instances: trials,
            tolerance: TOL_TERM,
            max_rel_error: worst.max,
            worst_at: worst.at,
            passed: worst.max < TOL_TERM,
        });
    }

    // Composite loss through the expectation decode and the density map.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
        let mut worst = WorstTracker::new();
        for trial in 0..trials {
            let (h, w) = if trial % 2 == 0 { (2, 2) } else { (3, 3) };
            let (mut lambda_logits, mut pi_logits, y) =
                random_loss_instance(&mut rng, &scheme, h, w);
            let report = total_loss(&weights, &lambda_logits, &pi_logits, &y, &scheme)?;
            let step = 1e-4;
            for k in 0..scheme.n_positive() {
                for i in 0..h {
                    for j in 0..w {
                        let orig = lambda_logits[(k, i, j)];
                        lambda_logits[(k, i, j)] = orig + step;
                        let up =
                            total_loss(&weights, &lambda_logits, &pi_logits, &y, &scheme)?.total;
                        lambda_logits[(k, i, j)] = orig - step;
                        let down =
                            total_loss(&weights, &lambda_logits, &pi_logits, &y, &scheme)?.total;
                        lambda_logits[(k, i, j)] = orig;
                        let fd = (up - down) / (2.0 * step);
                        worst.observe(rel_err(report.grad_lambda_logits[(k, i, j)], fd), || {
                            format!("trial {trial} lambda_logits[{k},{i},{j}]")
                        });
                    }
                }
            }
            for i in 0..h {
                for j in 0..w {
                    let orig = pi_logits[(i, j)];
                    pi_logits[(i, j)] = orig + step;
                    let up = total_loss(&weights, &lambda_logits, &pi_logits, &y, &scheme)?.total;
                    pi_logits[(i, j)] = orig - step;
                    let down = total_loss(&weights, &lambda_logits, &pi_logits, &y, &scheme)?.total;
                    pi_logits[(i, j)] = orig;
                    let fd = (up - down) / (2.0 * step);
                    worst.observe(rel_err(report.grad_pi_logits[(i, j)], fd), || {
                        format!("trial {trial} pi_logits[{i},{j}]")
                    });
                }
            }
        }
        per_term.push(TermCheck {
            term: "composite".into(),
            instances: trials,
            tolerance: TOL_COMPOSITE,
            max_rel_error: worst.max,
            worst_at: worst.at,
            passed: worst.max < TOL_COMPOSITE,
        });
    }

    manifest.wall_time_ms = start.elapsed().as_millis() as u64;
    let passed = per_term.iter().all(|t| t.passed);
    Ok(GradCheckReport {
        passed,
        trials,
        seed,
        per_term,
        manifest,
    })
}

// ---------------------------------------------------------------------------
// train-demo
// ---------------------------------------------------------------------------

/// Configuration of the end-to-end demo: the training hyperparameters at
/// the top level plus the synthetic-corpus shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainDemoConfig {
    pub seed: u64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub omega: f64,
    pub weight_decay: f64,
    pub pi_init_prior: Option<f64>,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub image_size: usize,
    pub block: usize,
    pub structural_fraction: f64,
    pub mean_heads: f64,
    pub jitter_sigma: f64,
    pub feature_channels: usize,
    pub feature_separation: f64,
    pub count_shift: f64,
    pub calibrate_open_center: bool,
}

impl Default for TrainDemoConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            lr: t.lr,
            warmup_steps: t.warmup_steps,
            steps: t.steps,
            batch_size: t.batch_size,
            omega: t.omega,
            weight_decay: t.weight_decay,
            pi_init_prior: t.pi_init_prior,
            train_scenes: 20,
            test_scenes: 10,
            image_size: 256,
            block: 16,
            structural_fraction: 0.9,
            mean_heads: 40.0,
            jitter_sigma: 4.0,
            feature_channels: 4,
            feature_separation: 1.5,
            count_shift: 0.5,
            calibrate_open_center: true,
        }
    }
}

impl TrainDemoConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    fn train_config(&self, pi_frozen: Option<f64>) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            steps: self.steps,
            batch_size: self.batch_size,
            omega: self.omega,
            weight_decay: self.weight_decay,
            pi_frozen,
            pi_init_prior: self.pi_init_prior,
        }
    }
}

/// Held-out numbers of one trained model.
#[derive(Debug, Clone, Serialize)]
pub struct ModelEval {
    pub holdout_nll: f64,
    pub test_mae: f64,
    pub test_rmse: f64,
    pub test_nae: Option<f64>,
    pub final_train_loss: f64,
}

#[derive(Debug, Serialize)]
pub struct TrainDemoReport {
    pub config: TrainDemoConfig,
    pub zip: ModelEval,
    pub poisson_ablation: ModelEval,
    /// Ranking AUC of the trained pi map against the structural masks,
    /// pooled over the held-out scenes.
    pub disentanglement_auc: f64,
    pub checkpoint_path: String,
    pub loss_curve_path: String,
    pub manifest: RunManifest,
}

impl TrainDemoReport {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "zip_holdout_nll={}", self.zip.holdout_nll);
        let _ = writeln!(
            s,
            "poisson_holdout_nll={}",
            self.poisson_ablation.holdout_nll
        );
        let _ = writeln!(s, "zip_test_mae={}", self.zip.test_mae);
        let _ = writeln!(s, "poisson_test_mae={}", self.poisson_ablation.test_mae);
        let _ = writeln!(s, "zip_test_rmse={}", self.zip.test_rmse);
        let _ = writeln!(s, "poisson_test_rmse={}", self.poisson_ablation.test_rmse);
        let _ = writeln!(s, "disentanglement_auc={}", self.disentanglement_auc);
        let _ = writeln!(
            s,
            "zip_beats_poisson_nll={}",
            self.zip.holdout_nll < self.poisson_ablation.holdout_nll
        );
        let _ = writeln!(
            s,
            "zip_beats_poisson_mae={}",
            self.zip.test_mae < self.poisson_ablation.test_mae
        );
        let _ = writeln!(s, "checkpoint={}", self.checkpoint_path);
        let _ = writeln!(s, "loss_curve={}", self.loss_curve_path);
        s.push_str(&self.manifest.text());
        s
    }
}

fn loss_curve_csv(result: &TrainResult) -> String {
    let mut csv = String::from("step,lr,ce,nll,count,total\n");
    for p in &result.curve {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            p.step, p.lr, p.ce, p.nll, p.count, p.total
        );
    }
    csv
}

fn eval_model(
    params: &crate::refmodel::HeadParams,
    scheme: &BinScheme,
    test: &[(FeatureMap, CountMap)],
    final_train_loss: f64,
) -> Result<ModelEval> {
    let holdout_nll = dataset_mean_nll(params, scheme, test)?;
    let pairs: Vec<EvalPair> = test
        .iter()
        .enumerate()
        .map(|(i, (f, y))| {
            forward(f, params, scheme).map(|out| EvalPair {
                image_id: format!("scene{i:03}"),
                truth: y.total() as f64,
                predicted: out.count,
            })
        })
        .collect::<Result<_>>()?;
    let summary = evaluate(&pairs)?;
    Ok(ModelEval {
        holdout_nll,
        test_mae: summary.mae,
        test_rmse: summary.rmse,
        test_nae: summary.nae,
        final_train_loss,
    })
}

/// Generates a synthetic corpus, trains the ZIP model and the
/// plain-Poisson ablation identically, and reports held-out NLL, counting
/// metrics and the structural-zero ranking AUC.
pub fn cmd_train_demo(cfg: &TrainDemoConfig, out_dir: &Path) -> Result<TrainDemoReport> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("train-demo", cfg, Some(cfg.seed));
    fs::create_dir_all(out_dir)?;

    let grid = make_grid(cfg.image_size, cfg.image_size, cfg.block)?;
    let scene_cfg = SceneConfig {
        grid,
        structural_fraction: cfg.structural_fraction,
        mean_heads: cfg.mean_heads,
        jitter_sigma: cfg.jitter_sigma,
        feature_channels: cfg.feature_channels,
        seed: cfg.seed,
        feature_separation: cfg.feature_separation,
        count_shift: cfg.count_shift,
    };
    let scenes = generate_corpus(&scene_cfg, cfg.train_scenes + cfg.test_scenes)?;

    // The synthetic corpus goes to disk in the standard formats so the rest
    // of the CLI pipeline (stats, eval) can run on it unchanged.
    let corpus_dir = out_dir.join("corpus");
    fs::create_dir_all(&corpus_dir)?;
    for (i, scene) in scenes.iter().enumerate() {
        let kind = if i < cfg.train_scenes {
            "train"
        } else {
            "test"
        };
        scene
            .annotations
            .to_json_file(&corpus_dir.join(format!("{kind}{i:03}.json")))?;
        write_bcm(
            &corpus_dir.join(format!("{kind}{i:03}.bcm")),
            &scene.count_map.to_tensor(),
        )?;
    }

    let train_data: Vec<(FeatureMap, CountMap)> = scenes[..cfg.train_scenes]
        .iter()
        .map(|s| (s.features.clone(), s.count_map.clone()))
        .collect();
    let test_data: Vec<(FeatureMap, CountMap)> = scenes[cfg.train_scenes..]
        .iter()
        .map(|s| (s.features.clone(), s.count_map.clone()))
        .collect();
    if train_data.is_empty() || test_data.is_empty() {
        return Err(Error::InvalidParameter(
            "train_scenes and test_scenes must both be >= 1".into(),
        ));
    }

    let mut scheme = default_bins(cfg.block)?;
    if cfg.calibrate_open_center {
        scheme = scheme.calibrate_open_center(
            train_data
                .iter()
                .flat_map(|(_, y)| y.counts.iter().map(|&c| c as u64).collect::<Vec<_>>()),
        );
    }

    let zip_result = train(&train_data, &scheme, &cfg.train_config(None))?;
    let poisson_result = train(&train_data, &scheme, &cfg.train_config(Some(0.0)))?;

    let zip_eval = eval_model(
        &zip_result.params,
        &scheme,
        &test_data,
        zip_result.curve.last().map(|p| p.total).unwrap_or(f64::NAN),
    )?;
    let poisson_eval = eval_model(
        &poisson_result.params,
        &scheme,
        &test_data,
        poisson_result
            .curve
            .last()
            .map(|p| p.total)
            .unwrap_or(f64::NAN),
    )?;

    // Pool pi scores against the structural masks over the test scenes.
    let mut scored = Vec::new();
    for scene in &scenes[cfg.train_scenes..] {
        let out = forward(&scene.features, &zip_result.params, &scheme)?;
        for (&pi, &structural) in out.pi.iter().zip(scene.structural_mask.iter()) {
            scored.push((pi, structural));
        }
    }
    let auc = ranking_auc(&scored)?;

    let checkpoint_path = out_dir.join("checkpoint.zcp");
    write_checkpoint(
        &checkpoint_path,
        &Checkpoint {
            scheme: scheme.clone(),
            seed: cfg.seed,
            step: cfg.steps as u64,
            params: zip_result.params.clone(),
        },
    )?;
    let curve_path = out_dir.join("loss_curve.csv");
    fs::write(&curve_path, loss_curve_csv(&zip_result))?;
    fs::write(
        out_dir.join("loss_curve_poisson.csv"),
        loss_curve_csv(&poisson_result),
    )?;

    manifest.output_paths = vec![
        checkpoint_path.to_string_lossy().into_owned(),
        curve_path.to_string_lossy().into_owned(),
    ];
    manifest.wall_time_ms = start.elapsed().as_millis() as u64;
    write_json(&out_dir.join("manifest.json"), &manifest)?;

    let report = TrainDemoReport {
        config: cfg.clone(),
        zip: zip_eval,
        poisson_ablation: poisson_eval,
        disentanglement_auc: auc,
        checkpoint_path: checkpoint_path.to_string_lossy().into_owned(),
        loss_curve_path: curve_path.to_string_lossy().into_owned(),
        manifest,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub negative_predictions: usize,
    pub manifest: RunManifest,
}

impl EvalReport {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images={}", self.summary.images);
        let _ = writeln!(s, "positive_images={}", self.summary.positive_images);
        let _ = writeln!(s, "mae={}", self.summary.mae);
        let _ = writeln!(s, "rmse={}", self.summary.rmse);
        match self.summary.nae {
            Some(nae) => {
                let _ = writeln!(s, "nae={nae}");
                let _ = writeln!(s, "nae_percent={}", nae * 100.0);
            }
            None => {
                let _ = writeln!(s, "nae=undefined");
            }
        }
        if self.negative_predictions > 0 {
            let _ = writeln!(
                s,
                "warning_negative_predictions={}",
                self.negative_predictions
            );
        }
        s.push_str(&self.manifest.text());
        s
    }
}

#[derive(Serialize)]
struct EvalOptions<'a> {
    pred_csv: &'a Path,
    ann_dir: &'a Path,
}

/// Scores a prediction CSV against ground-truth annotation files. Every
/// annotated image must have exactly one prediction row, matched by file
/// stem.
pub fn cmd_eval(
    pred_csv: &Path,
    ann_dir: &Path,
    out_dir: Option<&Path>,
    workers: Option<usize>,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("eval", &EvalOptions { pred_csv, ann_dir }, None);

    let predictions = read_predictions_csv(pred_csv)?;
    let mut by_id: std::collections::BTreeMap<String, f64> = std::collections::BTreeMap::new();
    for (id, count) in predictions {
        if by_id.insert(id.clone(), count).is_some() {
            return Err(Error::InvalidParameter(format!(
                "duplicate prediction for image '{id}'"
            )));
        }
    }

    let files = sorted_files_with_extension(ann_dir, "json")?;
    if files.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no annotations found in {}",
            ann_dir.display()
        )));
    }
    let truths: Vec<Result<(String, f64)>> = with_worker_pool(workers, || {
        files
            .par_iter()
            .map(|path| {
                let ann = AnnotationSet::from_json_file(path)?;
                Ok((stem_of(path), ann.points.len() as f64))
            })
            .collect()
    });
    let mut pairs = Vec::with_capacity(files.len());
    for truth in truths {
        let (id, truth) = truth?;
        let predicted = by_id
            .remove(&id)
            .ok_or_else(|| Error::InvalidParameter(format!("no prediction for image '{id}'")))?;
        pairs.push(EvalPair {
            image_id: id,
            truth,
            predicted,
        });
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(Error::InvalidParameter(format!(
            "prediction for unknown image '{extra}'"
        )));
    }

    let negative_predictions = pairs.iter().filter(|p| p.predicted < 0.0).count();
    let summary = evaluate(&pairs)?;
    manifest.input_paths = files
        .iter()
        .map(|p| p.to_string_lossy().into_owned())
        .chain([pred_csv.to_string_lossy().into_owned()])
        .collect();
    manifest.wall_time_ms = start.elapsed().as_millis() as u64;
    if let Some(out) = out_dir {
        fs::create_dir_all(out)?;
        write_json(&out.join("manifest.json"), &manifest)?;
    }
    let report = EvalReport {
        summary,
        negative_predictions,
        manifest,
    };
    if let Some(out) = out_dir {
        write_json(&out.join("report.json"), &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_check_passes_and_rejects_zero_trials() {
        let report = cmd_grad_check(0, 25, None).unwrap();
        assert!(report.passed, "{}", report.text());
        assert_eq!(report.per_term.len(), 5);
        match cmd_grad_check(0, 0, None) {
            Err(Error::InvalidParameter(msg)) => assert!(msg.contains("trials must be ≥ 1")),
            other => panic!("expected parameter error, got {other:?}"),
        }
    }

    #[test]
    fn grad_check_catches_injected_faults() {
        for (fault, term) in [
            (InjectedFault::CeSignFlip, "ce"),
            (InjectedFault::NllSignFlip, "nll"),
            (InjectedFault::CountSignFlip, "count"),
        ] {
            let report = cmd_grad_check(0, 5, Some(fault)).unwrap();
            assert!(!report.passed, "fault {fault:?} not caught");
            let failing: Vec<&str> = report
                .per_term
                .iter()
                .filter(|t| !t.passed)
                .map(|t| t.term.as_str())
                .collect();
            assert_eq!(failing, vec![term], "fault {fault:?}");
        }
    }

    #[test]
    fn eval_pipeline_over_files() {
        let dir = tempfile::tempdir().unwrap();
        let ann_dir = dir.path().join("ann");
        fs::create_dir_all(&ann_dir).unwrap();
        for (name, n_points) in [("a", 3usize), ("b", 0)] {
            let ann = AnnotationSet {
                image_h: 64,
                image_w: 64,
                points: (0..n_points).map(|i| [i as f64 + 0.5, 1.0]).collect(),
            };
            ann.to_json_file(&ann_dir.join(format!("{name}.json")))
                .unwrap();
        }
        let pred = dir.path().join("pred.csv");
        fs::write(&pred, "image_id,count\na,4\nb,-1\n").unwrap();
        let report = cmd_eval(&pred, &ann_dir, None, None).unwrap();
        assert_eq!(report.summary.images, 2);
        assert_eq!(report.negative_predictions, 1);
        assert_eq!(report.summary.mae, 1.0);

        fs::write(&pred, "image_id,count\na,4\n").unwrap();
        assert!(cmd_eval(&pred, &ann_dir, None, None).is_err());
    }
}
