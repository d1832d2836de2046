//! Blockwise quantization of point annotations.
//!
//! An image of `H x W` pixels is divided into `r x r` blocks (zero-padded
//! on the right/bottom when the dimensions do not divide evenly), head
//! annotations are histogrammed into per-block integer counts, and counts
//! are quantized into ordered bins with representative centers for the
//! classification heads.
//!
//! This module also owns the two on-disk formats shared across the toolkit:
//! the annotation JSON document and the `.bcm` binary map file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zipdist::CountValue;

/// Geometry of a blockwise grid over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_h: usize,
    pub image_w: usize,
    pub block: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl GridSpec {
    /// Image height after zero-padding to a multiple of the block size.
    pub fn padded_h(&self) -> usize {
        self.grid_h * self.block
    }

    pub fn padded_w(&self) -> usize {
        self.grid_w * self.block
    }

    pub fn n_blocks(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Builds the grid for an image, rounding the block count up so that a
/// partial final row/column becomes a full (zero-padded) block.
pub fn make_grid(image_h: usize, image_w: usize, block: usize) -> Result<GridSpec> {
    if image_h == 0 || image_w == 0 || block == 0 {
        return Err(Error::InvalidParameter(format!(
            "grid dimensions must be positive, got {image_h}x{image_w} block {block}"
        )));
    }
    Ok(GridSpec {
        image_h,
        image_w,
        block,
        grid_h: image_h.div_ceil(block),
        grid_w: image_w.div_ceil(block),
    })
}

/// Point annotations of one image, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    #[serde(rename = "image_height")]
    pub image_h: usize,
    #[serde(rename = "image_width")]
    pub image_w: usize,
    /// `[x, y]` pairs; valid points satisfy `0 <= x <= W`, `0 <= y <= H`.
    pub points: Vec<[f64; 2]>,
}

impl AnnotationSet {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Rescales the image and every point by `factor`. We make no claim
    /// that this matches any particular dataset preprocessing pipeline.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        Ok(Self {
            image_h: ((self.image_h as f64 * factor).round() as usize).max(1),
            image_w: ((self.image_w as f64 * factor).round() as usize).max(1),
            points: self
                .points
                .iter()
                .map(|p| [p[0] * factor, p[1] * factor])
                .collect(),
        })
    }
}

/// Ground-truth blockwise counts of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMap {
    pub grid: GridSpec,
    /// `grid_h x grid_w` non-negative counts.
    pub counts: Array2<u32>,
}

impl CountMap {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            counts: Array2::zeros((grid.grid_h, grid.grid_w)),
            grid,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Single-channel f32 tensor in `.bcm` layout.
    pub fn to_tensor(&self) -> Array3<f32> {
        let (h, w) = self.counts.dim();
        Array3::from_shape_fn((1, h, w), |(_, i, j)| self.counts[(i, j)] as f32)
    }
}

/// Histograms annotation points into blockwise counts.
///
/// Each point increments block `(floor(y / r), floor(x / r))`; a point on
/// the far image edge (`x == W` or `y == H`) belongs to the last block of
/// its row/column. Points outside `[0, W] x [0, H]` are an error naming
/// the offending index.
pub fn points_to_count_map(ann: &AnnotationSet, grid: &GridSpec) -> Result<CountMap> {
    if ann.image_h != grid.image_h || ann.image_w != grid.image_w {
        return Err(Error::ShapeMismatch {
            expected: format!("image {}x{}", grid.image_h, grid.image_w),
            actual: format!("annotations for {}x{}", ann.image_h, ann.image_w),
        });
    }
    let mut map = CountMap::zeros(*grid);
    let r = grid.block as f64;
    for (index, p) in ann.points.iter().enumerate() {
        let (x, y) = (p[0], p[1]);
        let ok = x >= 0.0 && x <= grid.image_w as f64 && y >= 0.0 && y <= grid.image_h as f64;
        if !ok {
            return Err(Error::PointOutOfBounds {
                index,
                x,
                y,
                width: grid.image_w,
                height: grid.image_h,
            });
        }
        let col = ((x / r).floor() as usize).min(grid.grid_w - 1);
        let row = ((y / r).floor() as usize).min(grid.grid_h - 1);
        map.counts[(row, col)] += 1;
    }
    Ok(map)
}

/// One count bin: the inclusive integer range `lo..=hi`, or `[lo, inf)`
/// when `hi` is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: CountValue,
    pub hi: Option<CountValue>,
}

impl Bin {
    pub fn contains(&self, v: CountValue) -> bool {
        v >= self.lo && self.hi.is_none_or(|hi| v <= hi)
    }
}

/// Serialized form of a [`BinScheme`], also the `--bins` config file format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinSchemeConfig {
    pub bins: Vec<Bin>,
    pub centers: Vec<f64>,
}

/// Ordered count bins partitioning the non-negative integers, with one
/// representative center per bin. The first bin is always `{0}` and the
/// last is open (`[K, inf)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BinSchemeConfig", into = "BinSchemeConfig")]
pub struct BinScheme {
    bins: Vec<Bin>,
    centers: Vec<f64>,
}

impl TryFrom<BinSchemeConfig> for BinScheme {
    type Error = Error;

    fn try_from(cfg: BinSchemeConfig) -> Result<Self> {
        BinScheme::new(cfg.bins, cfg.centers)
    }
}

impl From<BinScheme> for BinSchemeConfig {
    fn from(s: BinScheme) -> Self {
        Self {
            bins: s.bins,
            centers: s.centers,
        }
    }
}

impl BinScheme {
    pub fn new(bins: Vec<Bin>, centers: Vec<f64>) -> Result<Self> {
        if bins.len() < 2 {
            return Err(Error::InvalidBinScheme(
                "need at least the {0} bin and one positive bin".into(),
            ));
        }
        if centers.len() != bins.len() {
            return Err(Error::InvalidBinScheme(format!(
                "{} bins but {} centers",
                bins.len(),
                centers.len()
            )));
        }
        if bins[0] != (Bin { lo: 0, hi: Some(0) }) {
            return Err(Error::InvalidBinScheme(
                "first bin must be exactly {0}".into(),
            ));
        }
        let mut next = 1;
        for (k, b) in bins.iter().enumerate().skip(1) {
            if b.lo != next {
                return Err(Error::InvalidBinScheme(format!(
                    "bin {k} starts at {} but {next} is uncovered",
                    b.lo
                )));
            }
            match b.hi {
                Some(hi) if k + 1 == bins.len() => {
                    return Err(Error::InvalidBinScheme(format!(
                        "last bin must be open, got [{}, {hi}]",
                        b.lo
                    )));
                }
                Some(hi) if hi < b.lo => {
                    return Err(Error::InvalidBinScheme(format!("bin {k} is empty")));
                }
                Some(hi) => next = hi + 1,
                None if k + 1 != bins.len() => {
                    return Err(Error::InvalidBinScheme(format!(
                        "open bin {k} must be last"
                    )));
                }
                None => {}
            }
        }
        for (k, (&c, b)) in centers.iter().zip(&bins).enumerate() {
            let inside = c >= b.lo as f64 && b.hi.is_none_or(|hi| c <= hi as f64);
            if !c.is_finite() || !inside {
                return Err(Error::InvalidBinScheme(format!(
                    "center {c} of bin {k} lies outside the bin"
                )));
            }
            if k > 0 && c <= centers[k - 1] {
                return Err(Error::InvalidBinScheme(
                    "centers must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self { bins, centers })
    }

    /// `{0}, {1}, ..., {k-1}, [k, inf)` with centers `0..k-1` and `open_center`.
    pub fn singletons_with_open(k: CountValue, open_center: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidBinScheme(
                "open threshold must be >= 1".into(),
            ));
        }
        let mut bins: Vec<Bin> = (0..k).map(|v| Bin { lo: v, hi: Some(v) }).collect();
        bins.push(Bin { lo: k, hi: None });
        let mut centers: Vec<f64> = (0..k).map(|v| v as f64).collect();
        centers.push(open_center);
        Self::new(bins, centers)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: BinSchemeConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.try_into()
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    /// Number of positive bins (`n - 1`): everything except `{0}`.
    pub fn n_positive(&self) -> usize {
        self.bins.len() - 1
    }

    pub fn bins(&self) -> &[Bin] {
        &self.bins
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn positive_centers(&self) -> &[f64] {
        &self.centers[1..]
    }

    /// `K`, the smallest count absorbed by the open bin.
    pub fn open_threshold(&self) -> CountValue {
        self.bins[self.bins.len() - 1].lo
    }

    /// Index of the unique bin containing `v`.
    pub fn bin_of(&self, v: CountValue) -> usize {
        // Bins are contiguous and sorted, so a scan from the back is exact.
        self.bins
            .iter()
            .rposition(|b| b.contains(v))
            .expect("bins cover all of N")
    }

    /// Replaces the open-bin center with the empirical mean of the training
    /// counts that fall in the open bin, keeping the default when none do.
    pub fn calibrate_open_center(self, counts: impl IntoIterator<Item = CountValue>) -> Self {
        let k = self.open_threshold();
        let (mut sum, mut n) = (0.0f64, 0u64);
        for v in counts {
            if v >= k {
                sum += v as f64;
                n += 1;
            }
        }
        if n == 0 {
            return self;
        }
        let mut centers = self.centers.clone();
        let mean = sum / n as f64;
        // Guard against a mean tying the previous center (all mass at K = prev + 1).
        centers[self.bins.len() - 1] = mean.max(k as f64);
        Self::new(self.bins.clone(), centers).unwrap_or(self)
    }
}

/// The canonical scheme for block size 8 and its natural extension
/// (`K = r/2` singleton bins plus an open bin) for 16 and 32. Other block
/// sizes need an explicit `--bins` config.
pub fn default_bins(block: usize) -> Result<BinScheme> {
    match block {
        8 | 16 | 32 => {
            let k = (block / 2) as CountValue;
            BinScheme::singletons_with_open(k, k as f64 + 1.0)
        }
        _ => Err(Error::InvalidParameter(format!(
            "no default bin scheme for block size {block}; provide a bin config file"
        ))),
    }
}

/// Per-block categorical distribution over bins. `probs` has shape
/// `(n, h, w)` for a full scheme or `(n - 1, h, w)` for positive bins only.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub grid: GridSpec,
    pub probs: Array3<f64>,
}

impl ProbMap {
    /// Validates shape and per-block normalization (1e-6 tolerance).
    pub fn new(grid: GridSpec, probs: Array3<f64>) -> Result<Self> {
        let (_, h, w) = probs.dim();
        if h != grid.grid_h || w != grid.grid_w {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} grid", grid.grid_h, grid.grid_w),
                actual: format!("{h}x{w} probability map"),
            });
        }
        for i in 0..h {
            for j in 0..w {
                let mut sum = 0.0;
                for k in 0..probs.dim().0 {
                    let p = probs[(k, i, j)];
                    if !(0.0..=1.0 + 1e-9).contains(&p) {
                        return Err(Error::InvalidParameter(format!(
                            "probability {p} at bin {k}, block ({i}, {j})"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::NotNormalized {
                        row: i,
                        col: j,
                        sum,
                    });
                }
            }
        }
        Ok(Self { grid, probs })
    }
}

/// Row-major list of positive blocks with their one-hot bin targets.
#[derive(Debug, Clone)]
pub struct PositiveTargets {
    /// `(row, col)` of each block with a positive count, row-major.
    pub coords: Vec<(usize, usize)>,
    /// One row per positive block, one-hot over the `n - 1` positive bins.
    pub one_hot: Array2<f64>,
}

impl PositiveTargets {
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Selects the blocks with `Y > 0` and one-hot encodes their bin indices
/// over the positive bins. Empty when the map has no positive block.
pub fn one_hot_positive(y: &CountMap, scheme: &BinScheme) -> PositiveTargets {
    let mut coords = Vec::new();
    let mut rows = Vec::new();
    for ((i, j), &c) in y.counts.indexed_iter() {
        if c > 0 {
            coords.push((i, j));
            rows.push(scheme.bin_of(c as CountValue) - 1);
        }
    }
    let mut one_hot = Array2::zeros((coords.len(), scheme.n_positive()));
    for (row, &bin) in rows.iter().enumerate() {
        one_hot[(row, bin)] = 1.0;
    }
    PositiveTargets { coords, one_hot }
}

/// Decodes a probability map into per-block expected counts over the bin
/// centers: full centers for an `n`-channel map, positive centers for an
/// `n - 1`-channel map. Rows off normalization by more than 1e-4 are an
/// error.
pub fn decode_expectation(p: &ProbMap, scheme: &BinScheme) -> Result<Array2<f64>> {
    let (ch, h, w) = p.probs.dim();
    let centers: &[f64] = if ch == scheme.n_bins() {
        scheme.centers()
    } else if ch == scheme.n_positive() {
        scheme.positive_centers()
    } else {
        return Err(Error::ShapeMismatch {
            expected: format!("{} or {} channels", scheme.n_bins(), scheme.n_positive()),
            actual: format!("{ch} channels"),
        });
    };
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut sum = 0.0;
            let mut exp = 0.0;
            for (k, &b) in centers.iter().enumerate() {
                let q = p.probs[(k, i, j)];
                sum += q;
                exp += q * b;
            }
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::NotNormalized {
                    row: i,
                    col: j,
                    sum,
                });
            }
            out[(i, j)] = exp;
        }
    }
    Ok(out)
}

/// Exact histogram of block counts over a corpus, plus the zero fraction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityStats {
    /// Observed count value -> number of blocks with that count.
    pub histogram: BTreeMap<CountValue, u64>,
    pub total_blocks: u64,
    pub zero_blocks: u64,
    pub zero_fraction: f64,
}

pub fn sparsity_stats(maps: &[CountMap]) -> Result<SparsityStats> {
    if maps.is_empty() {
        return Err(Error::EmptyInput("no count maps given".into()));
    }
    let mut histogram = BTreeMap::new();
    let mut total = 0u64;
    for m in maps {
        for &c in m.counts.iter() {
            *histogram.entry(c as CountValue).or_insert(0) += 1;
            total += 1;
        }
    }
    let zero = histogram.get(&0).copied().unwrap_or(0);
    Ok(SparsityStats {
        histogram,
        total_blocks: total,
        zero_blocks: zero,
        zero_fraction: zero as f64 / total as f64,
    })
}

const BCM_MAGIC: &[u8; 4] = b"BCM1";

/// Serializes a `(channels, grid_h, grid_w)` f32 tensor in the `.bcm`
/// layout: magic `BCM1`, little-endian u32 `grid_h`, `grid_w`, `channels`,
/// then the values row-major with the channel outermost.
pub fn bcm_to_bytes(tensor: &Array3<f32>) -> Vec<u8> {
    let (channels, grid_h, grid_w) = tensor.dim();
    let mut buf = Vec::with_capacity(16 + tensor.len() * 4);
    buf.extend_from_slice(BCM_MAGIC);
    buf.extend_from_slice(&(grid_h as u32).to_le_bytes());
    buf.extend_from_slice(&(grid_w as u32).to_le_bytes());
    buf.extend_from_slice(&(channels as u32).to_le_bytes());
    for &v in tensor.as_standard_layout().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Writes a tensor as a `.bcm` file. Round-trips bit-exactly.
pub fn write_bcm(path: &Path, tensor: &Array3<f32>) -> Result<()> {
    fs::write(path, bcm_to_bytes(tensor))?;
    Ok(())
}

/// Reads a `.bcm` file back into a `(channels, grid_h, grid_w)` tensor.
pub fn read_bcm(path: &Path) -> Result<Array3<f32>> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|_| bad("file too short for header".into()))?;
    if &header[..4] != BCM_MAGIC {
        return Err(bad(format!("bad magic {:?}", &header[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (grid_h, grid_w, channels) = (word(4), word(8), word(12));
    let len = channels
        .checked_mul(grid_h)
        .and_then(|n| n.checked_mul(grid_w))
        .ok_or_else(|| bad("dimension overflow".into()))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() != len * 4 {
        return Err(bad(format!(
            "expected {} value bytes, found {}",
            len * 4,
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array3::from_shape_vec((channels, grid_h, grid_w), data)
        .map_err(|e| bad(format!("shape error: {e}")))
}

/// Total mass of a `.bcm` tensor, summed in f64.
pub fn bcm_total(tensor: &Array3<f32>) -> f64 {
    tensor.iter().map(|&v| v as f64).sum()
}

/// Writes `data` to `path` via a sibling temp file and an atomic rename.
pub fn write_file_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r8_scheme() -> BinScheme {
        default_bins(8).unwrap()
    }

    #[test]
    fn make_grid_exact_and_padded() {
        let g = make_grid(1024, 768, 16).unwrap();
        assert_eq!((g.grid_h, g.grid_w), (64, 48));
        assert_eq!((g.padded_h(), g.padded_w()), (1024, 768));

        let g = make_grid(1000, 750, 16).unwrap();
        assert_eq!((g.grid_h, g.grid_w), (63, 47));
        assert_eq!((g.padded_h(), g.padded_w()), (1008, 752));

        let g = make_grid(448, 448, 8).unwrap();
        assert_eq!((g.grid_h, g.grid_w), (56, 56));

        assert!(make_grid(0, 10, 8).is_err());
        assert!(make_grid(10, 10, 0).is_err());
    }

    #[test]
    fn count_map_from_points() {
        let grid = make_grid(64, 64, 16).unwrap();
        let empty = AnnotationSet {
            image_h: 64,
            image_w: 64,
            points: vec![],
        };
        assert_eq!(points_to_count_map(&empty, &grid).unwrap().total(), 0);

        let ann = AnnotationSet {
            image_h: 64,
            image_w: 64,
            points: vec![[17.2, 3.0]],
        };
        let map = points_to_count_map(&ann, &grid).unwrap();
        assert_eq!(map.counts[(0, 1)], 1);
        assert_eq!(map.total(), 1);

        let ann = AnnotationSet {
            image_h: 64,
            image_w: 64,
            points: vec![[17.2, 3.0], [30.9, 15.0]],
        };
        let map = points_to_count_map(&ann, &grid).unwrap();
        assert_eq!(map.counts[(0, 1)], 2);
    }

    #[test]
    fn boundary_points() {
        let grid = make_grid(64, 64, 16).unwrap();
        let ann = AnnotationSet {
            image_h: 64,
            image_w: 64,
            // On an interior boundary and on the far corner.
            points: vec![[16.0, 0.0], [64.0, 64.0]],
        };
        let map = points_to_count_map(&ann, &grid).unwrap();
        assert_eq!(map.counts[(0, 1)], 1);
        assert_eq!(map.counts[(3, 3)], 1);
    }

    #[test]
    fn out_of_bounds_point_is_reported() {
        let grid = make_grid(64, 64, 16).unwrap();
        let ann = AnnotationSet {
            image_h: 64,
            image_w: 64,
            points: vec![[1.0, 1.0], [65.0, 2.0]],
        };
        match points_to_count_map(&ann, &grid) {
            Err(Error::PointOutOfBounds { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected out-of-bounds error, got {other:?}"),
        }
    }

    #[test]
    fn default_bins_r8_is_the_published_scheme() {
        let s = r8_scheme();
        let expected = [
            Bin { lo: 0, hi: Some(0) },
            Bin { lo: 1, hi: Some(1) },
            Bin { lo: 2, hi: Some(2) },
            Bin { lo: 3, hi: Some(3) },
            Bin { lo: 4, hi: None },
        ];
        assert_eq!(s.bins(), &expected);
        assert_eq!(s.centers(), &[0.0, 1.0, 2.0, 3.0, 5.0]);
    }

    #[test]
    fn default_bins_r16_and_unsupported() {
        let s = default_bins(16).unwrap();
        assert_eq!(s.n_bins(), 9);
        assert_eq!(s.open_threshold(), 8);
        assert!(default_bins(7).is_err());
    }

    #[test]
    fn bin_lookup() {
        let s = r8_scheme();
        assert_eq!(s.bin_of(0), 0);
        assert_eq!(s.bin_of(3), 3);
        assert_eq!(s.bin_of(57), 4);
    }

    #[test]
    fn bins_partition_the_integers() {
        for scheme in [r8_scheme(), default_bins(16).unwrap()] {
            for v in 0..=1000u64 {
                let containing = scheme.bins().iter().filter(|b| b.contains(v)).count();
                assert_eq!(containing, 1, "v={v}");
            }
        }
    }

    #[test]
    fn scheme_validation_rejects_bad_shapes() {
        // Missing {0} first bin.
        assert!(BinScheme::new(
            vec![Bin { lo: 0, hi: Some(1) }, Bin { lo: 2, hi: None }],
            vec![0.0, 3.0]
        )
        .is_err());
        // Gap between bins.
        assert!(BinScheme::new(
            vec![Bin { lo: 0, hi: Some(0) }, Bin { lo: 2, hi: None },],
            vec![0.0, 3.0]
        )
        .is_err());
        // Closed last bin.
        assert!(BinScheme::new(
            vec![Bin { lo: 0, hi: Some(0) }, Bin { lo: 1, hi: Some(9) }],
            vec![0.0, 2.0]
        )
        .is_err());
        // Center outside its bin.
        assert!(BinScheme::new(
            vec![Bin { lo: 0, hi: Some(0) }, Bin { lo: 1, hi: None }],
            vec![0.0, 0.5]
        )
        .is_err());
    }

    #[test]
    fn calibrated_open_center_uses_tail_mean() {
        let s = r8_scheme().calibrate_open_center(vec![1, 2, 4, 6, 8]);
        assert_eq!(s.centers()[4], 6.0); // mean of 4, 6, 8
        let s = r8_scheme().calibrate_open_center(vec![1, 2, 3]);
        assert_eq!(s.centers()[4], 5.0); // fallback K + 1
    }

    #[test]
    fn one_hot_positive_selects_positive_blocks() {
        let grid = make_grid(32, 32, 16).unwrap();
        let s = r8_scheme();

        let zero = CountMap::zeros(grid);
        assert!(one_hot_positive(&zero, &s).is_empty());

        let mut y = CountMap::zeros(grid);
        y.counts[(1, 0)] = 2;
        let t = one_hot_positive(&y, &s);
        assert_eq!(t.coords, vec![(1, 0)]);
        assert_eq!(t.one_hot.row(0).to_vec(), vec![0.0, 1.0, 0.0, 0.0]);

        let mut y = CountMap::zeros(grid);
        y.counts[(0, 0)] = 1;
        y.counts[(1, 1)] = 9;
        let t = one_hot_positive(&y, &s);
        assert_eq!(t.coords, vec![(0, 0), (1, 1)]);
        assert_eq!(t.one_hot.row(0).to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.one_hot.row(1).to_vec(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn decode_expectation_cases() {
        let grid = make_grid(16, 16, 16).unwrap();
        let s = r8_scheme();

        // Degenerate distribution on bin {3} over all five bins.
        let mut probs = Array3::zeros((5, 1, 1));
        probs[(3, 0, 0)] = 1.0;
        let p = ProbMap::new(grid, probs).unwrap();
        assert_eq!(decode_expectation(&p, &s).unwrap()[(0, 0)], 3.0);

        // Uniform over the {1}, {2}, {3} positive bins.
        let mut probs = Array3::zeros((4, 1, 1));
        for k in 0..3 {
            probs[(k, 0, 0)] = 1.0 / 3.0;
        }
        let p = ProbMap::new(grid, probs).unwrap();
        assert!((decode_expectation(&p, &s).unwrap()[(0, 0)] - 2.0).abs() < 1e-15);

        // All mass on the open bin decodes to its center.
        let mut probs = Array3::zeros((4, 1, 1));
        probs[(3, 0, 0)] = 1.0;
        let p = ProbMap::new(grid, probs).unwrap();
        assert_eq!(decode_expectation(&p, &s).unwrap()[(0, 0)], 5.0);

        // Unnormalized rows are rejected (bypassing the ProbMap check).
        let p = ProbMap {
            grid,
            probs: Array3::from_elem((4, 1, 1), 0.3),
        };
        assert!(matches!(
            decode_expectation(&p, &s),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn decode_one_hot_identity_below_open_bin() {
        let grid = make_grid(16, 16, 16).unwrap();
        let s = r8_scheme();
        for v in 1..s.open_threshold() {
            let mut probs = Array3::zeros((s.n_positive(), 1, 1));
            probs[(s.bin_of(v) - 1, 0, 0)] = 1.0;
            let p = ProbMap::new(grid, probs).unwrap();
            assert_eq!(decode_expectation(&p, &s).unwrap()[(0, 0)], v as f64);
        }
    }

    #[test]
    fn sparsity_stats_cases() {
        let grid = make_grid(32, 32, 16).unwrap();
        let zeros = vec![CountMap::zeros(grid); 3];
        let stats = sparsity_stats(&zeros).unwrap();
        assert_eq!(stats.zero_fraction, 1.0);

        let mut m = CountMap::zeros(grid);
        m.counts[(1, 0)] = 1;
        m.counts[(1, 1)] = 3;
        let stats = sparsity_stats(&[m]).unwrap();
        assert_eq!(stats.histogram.get(&0), Some(&2));
        assert_eq!(stats.histogram.get(&1), Some(&1));
        assert_eq!(stats.histogram.get(&3), Some(&1));
        assert_eq!(stats.histogram.get(&2), None);
        assert_eq!(stats.zero_fraction, 0.5);

        assert!(sparsity_stats(&[]).is_err());
    }

    #[test]
    fn bcm_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.bcm");
        let tensor =
            Array3::from_shape_fn((2, 3, 4), |(c, i, j)| (c * 100 + i * 10 + j) as f32 * 0.37);
        write_bcm(&path, &tensor).unwrap();
        let back = read_bcm(&path).unwrap();
        assert_eq!(tensor, back);
        // Byte-level: writing the read tensor reproduces the file exactly.
        let bytes = fs::read(&path).unwrap();
        let path2 = dir.path().join("map2.bcm");
        write_bcm(&path2, &back).unwrap();
        assert_eq!(bytes, fs::read(&path2).unwrap());

        fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_bcm(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn annotation_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img1.json");
        let ann = AnnotationSet {
            image_h: 100,
            image_w: 200,
            points: vec![[1.5, 2.25], [199.0, 99.0]],
        };
        ann.to_json_file(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"image_height\":100"));
        assert!(text.contains("\"image_width\":200"));
        assert_eq!(AnnotationSet::from_json_file(&path).unwrap(), ann);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn count_conservation(
                (h, w, pts) in (16usize..512, 16usize..512).prop_flat_map(|(h, w)| {
                    let point = (0.0..w as f64, 0.0..h as f64).prop_map(|(x, y)| [x, y]);
                    (Just(h), Just(w), proptest::collection::vec(point, 0..200))
                }),
                block in prop_oneof![Just(8usize), Just(16), Just(32)],
            ) {
                let grid = make_grid(h, w, block).unwrap();
                let ann = AnnotationSet { image_h: h, image_w: w, points: pts.clone() };
                let map = points_to_count_map(&ann, &grid).unwrap();
                prop_assert_eq!(map.total(), pts.len() as u64);
            }

            #[test]
            fn padding_never_drops_points(
                pts in proptest::collection::vec((0.0..100.0f64, 0.0..90.0f64).prop_map(|(x, y)| [x, y]), 1..100)
            ) {
                // 100x90 is not divisible by 16; the padded grid must keep every point.
                let grid = make_grid(90, 100, 16).unwrap();
                let ann = AnnotationSet { image_h: 90, image_w: 100, points: pts.clone() };
                let map = points_to_count_map(&ann, &grid).unwrap();
                prop_assert_eq!(map.total(), pts.len() as u64);
            }

            #[test]
            fn bcm_bits_round_trip(bits in proptest::collection::vec(any::<u32>(), 1..64)) {
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("t.bcm");
                let n = bits.len();
                let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
                let tensor = Array3::from_shape_vec((1, 1, n), data).unwrap();
                write_bcm(&path, &tensor).unwrap();
                let back = read_bcm(&path).unwrap();
                for (a, b) in tensor.iter().zip(back.iter()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
