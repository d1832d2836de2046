//! Small trainable reference network over precomputed feature maps.
//!
//! The backbone is replaced by whatever features the caller provides; this
//! module owns the two per-block linear heads (the 1x1-convolution
//! equivalents), the forward decode to a density map, a deterministic
//! first-order training loop with decoupled weight decay, and checkpoint
//! serialization.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blockgrid::{BinScheme, CountMap, GridSpec, ProbMap};
use crate::error::{Error, Result};
use crate::losses::{softmax_decode, total_loss, zip_nll_map, LossWeights};
use crate::zipdist::sigmoid;

/// Per-block feature vectors on a grid, shape `(channels, grid_h, grid_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: GridSpec,
    pub values: Array3<f64>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }
}

/// Weights of the lambda head (positive-bin logits) and the pi head
/// (structural-zero logit).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `(n - 1) x C`
    pub lambda_w: Array2<f64>,
    /// `n - 1`
    pub lambda_b: Array1<f64>,
    /// `C`
    pub pi_w: Array1<f64>,
    pub pi_b: f64,
    /// When set, the pi head is bypassed and every block uses this fixed
    /// structural-zero probability; `Some(0.0)` is the plain-Poisson
    /// ablation.
    pub pi_frozen: Option<f64>,
}

fn logit(p: f64) -> f64 {
    p.ln() - (1.0 - p).ln()
}

impl HeadParams {
    /// Symmetric uniform init scaled by `1 / sqrt(C)`, zero biases. The pi
    /// bias starts at `logit(prior)` when a prior zero fraction is given
    /// (pass `None` for a neutral zero init).
    pub fn init(
        channels: usize,
        scheme: &BinScheme,
        seed: u64,
        pi_init_prior: Option<f64>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidParameter("channels must be >= 1".into()));
        }
        if let Some(p) = pi_init_prior {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "pi init prior must lie strictly inside (0, 1), got {p}"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (channels as f64).sqrt();
        let lambda_w = Array2::from_shape_fn((scheme.n_positive(), channels), |_| {
            rng.random_range(-bound..bound)
        });
        let pi_w = Array1::from_shape_fn(channels, |_| rng.random_range(-bound..bound));
        Ok(Self {
            lambda_w,
            lambda_b: Array1::zeros(scheme.n_positive()),
            pi_w,
            pi_b: pi_init_prior.map(logit).unwrap_or(0.0),
            pi_frozen: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.lambda_w.dim().1
    }

    pub fn n_positive(&self) -> usize {
        self.lambda_w.dim().0
    }

    /// Freezes the pi branch at a fixed probability (`0 <= pi < 1`).
    pub fn with_frozen_pi(mut self, pi: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&pi) {
            return Err(Error::InvalidParameter(format!(
                "frozen pi must lie in [0, 1), got {pi}"
            )));
        }
        self.pi_frozen = Some(pi);
        Ok(self)
    }
}

/// Everything the model predicts for one image.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub lambda_logits: Array3<f64>,
    pub pi_logits: Array2<f64>,
    /// Softmax over the `n - 1` positive bins.
    pub prob_lambda: ProbMap,
    /// Expectation decode of `prob_lambda` over the positive centers.
    pub lambda: Array2<f64>,
    pub pi: Array2<f64>,
    /// `(1 - pi) * lambda`, elementwise.
    pub density: Array2<f64>,
    /// `sum(density)`.
    pub count: f64,
}

/// Raw per-block head outputs: the `(n - 1, h, w)` positive-bin logits and
/// the `(h, w)` pi logits. This is the training-loop path; [`forward`] adds
/// the decoded maps on top.
pub fn head_logits(f: &FeatureMap, params: &HeadParams) -> Result<(Array3<f64>, Array2<f64>)> {
    let (c, h, w) = f.values.dim();
    if c != params.channels() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} feature channels", params.channels()),
            actual: format!("{c} channels"),
        });
    }
    let flat = f
        .values
        .view()
        .into_shape_with_order((c, h * w))
        .expect("contiguous features");

    let logits_flat = params.lambda_w.dot(&flat);
    let mut lambda_logits = logits_flat
        .into_shape_with_order((params.n_positive(), h, w))
        .expect("shape");
    for (k, mut plane) in lambda_logits.outer_iter_mut().enumerate() {
        plane += params.lambda_b[k];
    }

    let pi_logits = match params.pi_frozen {
        Some(p) => Array2::from_elem((h, w), logit(p)),
        None => {
            let row = params.pi_w.dot(&flat) + params.pi_b;
            row.into_shape_with_order((h, w)).expect("shape")
        }
    };
    Ok((lambda_logits, pi_logits))
}

/// Runs both heads on a feature map and decodes the ZIP density.
pub fn forward(f: &FeatureMap, params: &HeadParams, scheme: &BinScheme) -> Result<ModelOutput> {
    if params.n_positive() != scheme.n_positive() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} positive bins", scheme.n_positive()),
            actual: format!("{} head rows", params.n_positive()),
        });
    }
    let (lambda_logits, pi_logits) = head_logits(f, params)?;
    let (probs, lambda) = softmax_decode(&lambda_logits, scheme)?;
    let pi = pi_logits.mapv(sigmoid);
    let density = (1.0 - &pi) * &lambda;
    let count = density.sum();
    Ok(ModelOutput {
        lambda_logits,
        pi_logits,
        prob_lambda: ProbMap::new(f.grid, probs)?,
        lambda,
        pi,
        density,
        count,
    })
}

/// Total predicted count: the sum of the decoded density map.
pub fn predict_count(output: &ModelOutput) -> f64 {
    output.density.sum()
}

/// Training hyperparameters. Deserializes from the JSON config document
/// `{seed, lr, warmup_steps, steps, batch_size, omega, weight_decay}`;
/// the remaining fields all have defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Peak learning rate; warmup ramps linearly from a tenth of it.
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub omega: f64,
    pub weight_decay: f64,
    /// `Some(pi)` trains the plain-Poisson ablation with the pi branch
    /// frozen at that probability.
    pub pi_frozen: Option<f64>,
    /// Initial structural-zero prior for the pi bias; `None` starts neutral.
    pub pi_init_prior: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 0.05,
            warmup_steps: 25,
            steps: 400,
            batch_size: 8,
            omega: 1.0,
            weight_decay: 1e-4,
            pi_frozen: None,
            pi_init_prior: Some(0.9),
        }
    }
}

/// One row of the training loss curve (batch means).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub nll: f64,
    pub count: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: HeadParams,
    pub curve: Vec<LossPoint>,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One AdamW step: bias-corrected moments plus decoupled weight decay.
    fn update(&mut self, params: &mut [f64], grads: &[f64], t: usize, lr: f64, wd: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        for i in 0..params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grads[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + wd * params[i]);
        }
    }
}

fn schedule_lr(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        // Linear ramp from lr/10 to lr over the warmup window.
        let frac = (step + 1) as f64 / cfg.warmup_steps as f64;
        return cfg.lr * (0.1 + 0.9 * frac);
    }
    // One cosine decay from lr to lr/100 over the remaining steps. The
    // count term has a unit-magnitude subgradient, so a constant rate
    // leaves the total count rattling with amplitude proportional to it;
    // annealing lets the count settle.
    let decay_steps = cfg.steps.saturating_sub(cfg.warmup_steps).max(1);
    let progress = (step - cfg.warmup_steps) as f64 / decay_steps as f64;
    let floor = cfg.lr * 0.01;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn check_finite(term: &'static str, value: f64, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term,
            detail: format!("{value} at step {step}"),
        })
    }
}

/// Trains the heads on `(features, counts)` pairs.
///
/// Deterministic given the config seed: initialization, batch order and the
/// optimizer trajectory are all driven by one seeded generator, and
/// gradient accumulation follows a fixed summation order. A non-finite
/// loss aborts naming the offending term.
pub fn train(
    dataset: &[(FeatureMap, CountMap)],
    scheme: &BinScheme,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
    }
    let channels = dataset[0].0.channels();
    for (f, y) in dataset {
        if f.channels() != channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{channels} feature channels"),
                actual: format!("{} channels", f.channels()),
            });
        }
        let (_, h, w) = f.values.dim();
        if (h, w) != (y.grid.grid_h, y.grid.grid_w) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} grid", y.grid.grid_h, y.grid.grid_w),
                actual: format!("{h}x{w} features"),
            });
        }
        if f.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "features",
                detail: "non-finite feature value in dataset".into(),
            });
        }
    }

    let mut params = HeadParams::init(channels, scheme, cfg.seed, cfg.pi_init_prior)?;
    if let Some(p) = cfg.pi_frozen {
        params = params.with_frozen_pi(p)?;
    }
    let weights = LossWeights::new(cfg.omega)?;
    let learn_pi = cfg.pi_frozen.is_none();

    let n_pos = scheme.n_positive();
    let mut adam_lw = AdamState::new(n_pos * channels);
    let mut adam_lb = AdamState::new(n_pos);
    let mut adam_pw = AdamState::new(channels);
    let mut adam_pb = AdamState::new(1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().unwrap());
        }

        let mut g_lw = Array2::<f64>::zeros((n_pos, channels));
        let mut g_lb = Array1::<f64>::zeros(n_pos);
        let mut g_pw = Array1::<f64>::zeros(channels);
        let mut g_pb = 0.0f64;
        let (mut ce, mut nll, mut count, mut tot) = (0.0, 0.0, 0.0, 0.0);

        for &idx in &batch {
            let (f, y) = &dataset[idx];
            let (lambda_logits, pi_logits) = head_logits(f, &params)?;
            let report = total_loss(&weights, &lambda_logits, &pi_logits, y, scheme)?;
            ce += report.ce;
            nll += report.nll;
            count += report.count;
            tot += report.total;

            let (c, h, w) = f.values.dim();
            let flat = f
                .values
                .view()
                .into_shape_with_order((c, h * w))
                .expect("contiguous features");
            let g_logits = report
                .grad_lambda_logits
                .view()
                .into_shape_with_order((n_pos, h * w))
                .expect("contiguous grads");
            g_lw += &g_logits.dot(&flat.t());
            for k in 0..n_pos {
                g_lb[k] += g_logits.row(k).sum();
            }
            if learn_pi {
                let g_pi = report
                    .grad_pi_logits
                    .view()
                    .into_shape_with_order(h * w)
                    .expect("contiguous grads");
                g_pw += &flat.dot(&g_pi);
                g_pb += g_pi.sum();
            }
        }

        let scale = 1.0 / batch.len() as f64;
        let (ce, nll, count, tot) = (ce * scale, nll * scale, count * scale, tot * scale);
        check_finite("ce", ce, step)?;
        check_finite("nll", nll, step)?;
        check_finite("count", count, step)?;
        check_finite("total", tot, step)?;

        let lr = schedule_lr(cfg, step);
        let t = step + 1;
        g_lw *= scale;
        g_lb *= scale;
        adam_lw.update(
            params.lambda_w.as_slice_mut().unwrap(),
            g_lw.as_slice().unwrap(),
            t,
            lr,
            cfg.weight_decay,
        );
        adam_lb.update(
            params.lambda_b.as_slice_mut().unwrap(),
            g_lb.as_slice().unwrap(),
            t,
            lr,
            cfg.weight_decay,
        );
        if learn_pi {
            g_pw *= scale;
            g_pb *= scale;
            adam_pw.update(
                params.pi_w.as_slice_mut().unwrap(),
                g_pw.as_slice().unwrap(),
                t,
                lr,
                cfg.weight_decay,
            );
            let mut pb = [params.pi_b];
            adam_pb.update(&mut pb, &[g_pb], t, lr, cfg.weight_decay);
            params.pi_b = pb[0];
        }

        curve.push(LossPoint {
            step,
            lr,
            ce,
            nll,
            count,
            total: tot,
        });
    }

    Ok(TrainResult { params, curve })
}

/// Mean per-image ZIP negative log-likelihood of a model over a dataset.
pub fn dataset_mean_nll(
    params: &HeadParams,
    scheme: &BinScheme,
    dataset: &[(FeatureMap, CountMap)],
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset is empty".into()));
    }
    let mut sum = 0.0;
    for (f, y) in dataset {
        let out = forward(f, params, scheme)?;
        sum += zip_nll_map(&out.pi_logits, &out.lambda, y)?.value;
    }
    Ok(sum / dataset.len() as f64)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ZCP1";
const TENSOR_MAGIC: &[u8; 4] = b"BCT8";

/// A trained model snapshot: everything needed to rebuild the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scheme: BinScheme,
    pub seed: u64,
    pub step: u64,
    pub params: HeadParams,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    bin_scheme: BinScheme,
    channels: usize,
    n_bins: usize,
    seed: u64,
    step: u64,
    pi_frozen: Option<f64>,
}

fn push_tensor(buf: &mut Vec<u8>, rows: usize, cols: usize, data: &[f64]) {
    debug_assert_eq!(rows * cols, data.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(bytes: &mut impl Read, path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut header = [0u8; 12];
    bytes
        .read_exact(&mut header)
        .map_err(|_| bad("truncated tensor block".into()))?;
    if &header[..4] != TENSOR_MAGIC {
        return Err(bad(format!("bad tensor magic {:?}", &header[..4])));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut data = vec![0u8; rows * cols * 8];
    bytes
        .read_exact(&mut data)
        .map_err(|_| bad("truncated tensor data".into()))?;
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, values))
}

/// Checkpoint file: magic `ZCP1`, a length-prefixed JSON header (bin
/// scheme, channels, bin count, seed, step), then the four head tensors as
/// little-endian f64 blocks. Round-trips bit-exactly.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = CheckpointHeader {
        bin_scheme: ckpt.scheme.clone(),
        channels: ckpt.params.channels(),
        n_bins: ckpt.scheme.n_bins(),
        seed: ckpt.seed,
        step: ckpt.step,
        pi_frozen: ckpt.params.pi_frozen,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    let p = &ckpt.params;
    push_tensor(
        &mut buf,
        p.n_positive(),
        p.channels(),
        p.lambda_w.as_slice().expect("standard layout"),
    );
    push_tensor(&mut buf, 1, p.n_positive(), p.lambda_b.as_slice().unwrap());
    push_tensor(&mut buf, 1, p.channels(), p.pi_w.as_slice().unwrap());
    push_tensor(&mut buf, 1, 1, &[p.pi_b]);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut file = fs::File::open(path)?;
    let mut head = [0u8; 8];
    file.read_exact(&mut head)
        .map_err(|_| bad("file too short".into()))?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {:?}", &head[..4])));
    }
    let header_len = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|_| bad("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).map_err(|e| bad(format!("header: {e}")))?;

    let (rows, cols, lw) = read_tensor(&mut file, path)?;
    if rows != header.n_bins - 1 || cols != header.channels {
        return Err(bad(format!(
            "lambda weights are {rows}x{cols}, header says {}x{}",
            header.n_bins - 1,
            header.channels
        )));
    }
    let (_, n_lb, lb) = read_tensor(&mut file, path)?;
    let (_, n_pw, pw) = read_tensor(&mut file, path)?;
    let (_, n_pb, pb) = read_tensor(&mut file, path)?;
    if n_lb != rows || n_pw != cols || n_pb != 1 {
        return Err(bad("tensor block shapes disagree with header".into()));
    }
    Ok(Checkpoint {
        scheme: header.bin_scheme,
        seed: header.seed,
        step: header.step,
        params: HeadParams {
            lambda_w: Array2::from_shape_vec((rows, cols), lw).expect("shape checked"),
            lambda_b: Array1::from_vec(lb),
            pi_w: Array1::from_vec(pw),
            pi_b: pb[0],
            pi_frozen: header.pi_frozen,
        },
    })
}
