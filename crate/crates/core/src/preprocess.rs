//! Turning a (layout raster, height map) pair into a training set.
//!
//! Order of operations in [`build_dataset`]: smooth the height map, tile both
//! grids into base frames, split base frames into train/test, fit min-max
//! statistics on the training targets, normalize every target, and finally
//! expand each base frame into its eight dihedral variants. Splitting before
//! augmentation keeps every variant of a test frame out of training.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::persistence::{load_grid, save_grid, GridDtype};

/// Number of dihedral transforms of the square.
pub const AUGMENTATIONS: u8 = 8;

/// Shuffle generator recorded in dataset manifests.
pub const SPLIT_GENERATOR: &str = "ChaCha8Rng::seed_from_u64 + SliceRandom::shuffle (rand 0.8)";

/// Box-filter size; both sides odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmoothingConfig {
    pub m: usize,
    pub n: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { m: 5, n: 5 }
    }
}

impl SmoothingConfig {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 || m.is_multiple_of(2) || n.is_multiple_of(2) {
            return Err(Error::invalid("smoothing kernel", format!("{m}x{n} must have odd positive sides")));
        }
        Ok(SmoothingConfig { m, n })
    }
}

/// Mean over the `m`×`n` neighborhood of each pixel, clamping out-of-bounds
/// neighbors to the nearest edge pixel.
pub fn smooth(grid: &Grid2D, cfg: SmoothingConfig) -> Result<Grid2D> {
    let SmoothingConfig { m, n } = SmoothingConfig::new(cfg.m, cfg.n)?;
    let (h, w) = (grid.height(), grid.width());
    if h == 0 || w == 0 {
        return Err(Error::invalid("grid", "cannot smooth an empty grid"));
    }
    if m > h || n > w {
        return Err(Error::invalid("smoothing kernel", format!("{m}x{n} is larger than the {h}x{w} grid")));
    }
    let (ry, rx) = ((m / 2) as isize, (n / 2) as isize);
    let clamp = |i: isize, len: usize| i.clamp(0, len as isize - 1) as usize;

    // The box kernel and the clamp are both separable: rows first, then columns.
    let src = grid.values();
    let mut rows = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let s: f64 = (-rx..=rx).map(|d| src[r * w + clamp(c as isize + d, w)]).sum();
            rows[r * w + c] = s / n as f64;
        }
    }
    let (lo, hi) = grid.min_max().expect("non-empty");
    let mut out = grid.clone();
    let dst = out.values_mut();
    for r in 0..h {
        for c in 0..w {
            let s: f64 = (-ry..=ry).map(|d| rows[clamp(r as isize + d, h) * w + c]).sum();
            // A mean cannot leave the input range; clamp away summation rounding.
            dst[r * w + c] = (s / m as f64).clamp(lo, hi);
        }
    }
    Ok(out)
}

/// Min-max statistics of the training targets, in nm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

impl Default for NormStats {
    /// The identity mapping.
    fn default() -> Self {
        NormStats { min: -1.0, max: 1.0 }
    }
}

impl NormStats {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && max >= min) {
            return Err(Error::invalid("normalization", format!("min {min}, max {max}")));
        }
        Ok(NormStats { min, max })
    }

    /// `2·(v − min)/(max − min) − 1`; 0 when `max == min`. Not clipped.
    #[inline]
    pub fn normalize_value(&self, v: f64) -> f64 {
        if self.max == self.min {
            0.0
        } else {
            2.0 * (v - self.min) / (self.max - self.min) - 1.0
        }
    }

    #[inline]
    pub fn denormalize_value(&self, v: f64) -> f64 {
        (v + 1.0) * 0.5 * (self.max - self.min) + self.min
    }

    pub fn normalize(&self, grid: &Grid2D) -> Grid2D {
        grid.map(|v| self.normalize_value(v))
    }

    pub fn denormalize(&self, grid: &Grid2D) -> Grid2D {
        grid.map(|v| self.denormalize_value(v))
    }

    /// Nanometers per normalized unit.
    pub fn scale(&self) -> f64 {
        (self.max - self.min) / 2.0
    }
}

pub fn fit_norm<'a>(grids: impl IntoIterator<Item = &'a Grid2D>) -> Result<NormStats> {
    let (lo, hi) = grids
        .into_iter()
        .filter_map(Grid2D::min_max)
        .reduce(|(a, b), (c, d)| (a.min(c), b.max(d)))
        .ok_or_else(|| Error::invalid("normalization", "no training pixels"))?;
    NormStats::new(lo, hi)
}

/// Source pixel of output `(r, c)` under dihedral element `id` on an `n`×`n` frame.
///
/// 0 identity, 1–3 counter-clockwise rotation by 90/180/270 degrees,
/// 4 horizontal flip (mirror columns), 5 vertical flip (mirror rows),
/// 6 horizontal flip after a 90 degree rotation, 7 vertical flip after a 90 degree rotation.
#[inline]
fn dihedral_source(id: u8, n: usize, r: usize, c: usize) -> (usize, usize) {
    let last = n - 1;
    match id {
        0 => (r, c),
        1 => (c, last - r),
        2 => (last - r, last - c),
        3 => (last - c, r),
        4 => (r, last - c),
        5 => (last - r, c),
        6 => (last - c, last - r),
        7 => (c, r),
        _ => unreachable!(),
    }
}

/// The element that undoes `id`.
pub fn dihedral_inverse(id: u8) -> u8 {
    match id {
        1 => 3,
        3 => 1,
        other => other,
    }
}

/// Apply dihedral element `id` to a square grid.
pub fn dihedral(grid: &Grid2D, id: u8) -> Result<Grid2D> {
    if id >= AUGMENTATIONS {
        return Err(Error::invalid("transform id", format!("{id} is not in 0..=7")));
    }
    let n = grid.height();
    if grid.width() != n {
        return Err(Error::invalid("frame", format!("{}x{} is not square", n, grid.width())));
    }
    let mut out = grid.clone();
    let dst = out.values_mut();
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = dihedral_source(id, n, r, c);
            dst[r * n + c] = grid.get(sr, sc);
        }
    }
    Ok(out)
}

/// Apply the same dihedral element to an input frame and its target.
pub fn augment(input: &Grid2D, target: &Grid2D, id: u8) -> Result<(Grid2D, Grid2D)> {
    if !input.same_dims(target) {
        return Err(Error::shape("input and target frames differ in size"));
    }
    Ok((dihedral(input, id)?, dihedral(target, id)?))
}

/// An aligned pair of subframes cut at `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub row: usize,
    pub col: usize,
    pub input: Grid2D,
    pub target: Grid2D,
}

/// Number of frames [`tile`] yields.
pub fn tile_count(h: usize, w: usize, frame: usize, stride: usize) -> usize {
    if frame == 0 || stride == 0 || frame > h || frame > w {
        return 0;
    }
    ((h - frame) / stride + 1) * ((w - frame) / stride + 1)
}

/// Every fully-contained `frame`×`frame` window at origins that are multiples
/// of `stride`, in row-major origin order.
pub fn tile(input: &Grid2D, target: &Grid2D, frame: usize, stride: usize) -> Result<Vec<FramePair>> {
    if !input.same_dims(target) {
        return Err(Error::shape(format!(
            "input {}x{} vs target {}x{}",
            input.height(),
            input.width(),
            target.height(),
            target.width()
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride", "must be at least 1"));
    }
    if frame == 0 || frame > input.height() || frame > input.width() {
        return Err(Error::invalid(
            "frame size",
            format!("{frame} does not fit a {}x{} grid", input.height(), input.width()),
        ));
    }
    let mut frames = Vec::with_capacity(tile_count(input.height(), input.width(), frame, stride));
    for row in (0..=input.height() - frame).step_by(stride) {
        for col in (0..=input.width() - frame).step_by(stride) {
            frames.push(FramePair {
                row,
                col,
                input: input.window(row, col, frame, frame),
                target: target.window(row, col, frame, frame),
            });
        }
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Label `count` base frames: a seeded shuffle picks exactly
/// `round(count · test_fraction)` of them for the test split.
pub fn split(count: usize, test_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid("test fraction", format!("{test_fraction} is not in (0, 1)")));
    }
    if count < 2 {
        return Err(Error::invalid("split", format!("{count} base frames; need at least 2")));
    }
    let n_test = (count as f64 * test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![Split::Train; count];
    for &i in &order[..n_test] {
        labels[i] = Split::Test;
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub frame_size: usize,
    pub stride: usize,
    pub test_fraction: f64,
    pub smoothing: SmoothingConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            frame_size: 128,
            stride: 128,
            test_fraction: 0.2,
            smoothing: SmoothingConfig::default(),
            seed: 42,
        }
    }
}

/// One augmented subframe pair. `target` is normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub base: usize,
    pub row: usize,
    pub col: usize,
    pub aug: u8,
    pub split: Split,
    pub input: Grid2D,
    pub target: Grid2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub config: DatasetConfig,
    pub norm: NormStats,
    pub pitch_nm: f64,
    pub base_count: usize,
    /// Ordered by base frame, then augmentation id.
    pub samples: Vec<Sample>,
}

impl DataSet {
    pub fn split_samples(&self, which: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == which)
    }

    pub fn count(&self, which: Split) -> usize {
        self.split_samples(which).count()
    }
}

pub fn build_dataset(raster: &Grid2D, heights: &Grid2D, cfg: &DatasetConfig) -> Result<DataSet> {
    if !raster.is_binary() {
        return Err(Error::invalid("input raster", "must be binary"));
    }
    if !raster.same_dims(heights) {
        return Err(Error::shape(format!(
            "raster {}x{} vs height map {}x{}",
            raster.height(),
            raster.width(),
            heights.height(),
            heights.width()
        )));
    }
    let smoothed = smooth(heights, cfg.smoothing)?;
    let bases = tile(raster, &smoothed, cfg.frame_size, cfg.stride)?;
    let labels = split(bases.len(), cfg.test_fraction, cfg.seed)?;
    let norm = fit_norm(bases.iter().zip(&labels).filter(|(_, &l)| l == Split::Train).map(|(b, _)| &b.target))?;

    let mut samples = Vec::with_capacity(bases.len() * AUGMENTATIONS as usize);
    for (base, (pair, &split)) in bases.iter().zip(&labels).enumerate() {
        // Targets are stored as f32 on disk; round now so a reloaded dataset is identical.
        let target = norm.normalize(&pair.target).map(|v| v as f32 as f64);
        for aug in 0..AUGMENTATIONS {
            let (input, target) = augment(&pair.input, &target, aug)?;
            samples.push(Sample { base, row: pair.row, col: pair.col, aug, split, input, target });
        }
    }
    Ok(DataSet { config: cfg.clone(), norm, pitch_nm: raster.pitch_nm(), base_count: bases.len(), samples })
}

const MANIFEST: &str = "manifest.txt";

fn sample_path(dir: &Path, base: usize, aug: u8, side: &str) -> std::path::PathBuf {
    dir.join(format!("sample_{base:05}_{aug}_{side}.cmpg"))
}

/// Write `manifest.txt` plus one `sample_<base>_<aug>_{in,out}.cmpg` pair per sample.
pub fn save_dataset(ds: &DataSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let c = &ds.config;
    let mut m = String::new();
    let _ = writeln!(m, "cmpfcn-dataset 1");
    let _ = writeln!(m, "frame_size {}", c.frame_size);
    let _ = writeln!(m, "stride {}", c.stride);
    let _ = writeln!(m, "test_fraction {}", c.test_fraction);
    let _ = writeln!(m, "smooth_m {}", c.smoothing.m);
    let _ = writeln!(m, "smooth_n {}", c.smoothing.n);
    let _ = writeln!(m, "seed {}", c.seed);
    let _ = writeln!(m, "generator {SPLIT_GENERATOR}");
    let _ = writeln!(m, "pitch_nm {}", ds.pitch_nm);
    let _ = writeln!(m, "norm_min {}", ds.norm.min);
    let _ = writeln!(m, "norm_max {}", ds.norm.max);
    let _ = writeln!(m, "base_frames {}", ds.base_count);
    let _ = writeln!(m, "samples {}", ds.samples.len());
    let _ = writeln!(m, "train {}", ds.count(Split::Train));
    let _ = writeln!(m, "test {}", ds.count(Split::Test));
    for s in ds.samples.iter().filter(|s| s.aug == 0) {
        let _ = writeln!(m, "base {} {} {} {}", s.base, s.row, s.col, s.split.as_str());
    }
    for s in &ds.samples {
        save_grid(&s.input, GridDtype::U8, sample_path(dir, s.base, s.aug, "in"))?;
        save_grid(&s.target, GridDtype::F32, sample_path(dir, s.base, s.aug, "out"))?;
    }
    fs::write(dir.join(MANIFEST), m)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DataSet> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let bad = |line: usize, message: String| Error::Parse { line, message };

    match lines.next() {
        Some((_, "cmpfcn-dataset 1")) => {}
        _ => return Err(bad(1, "not a cmpfcn dataset manifest".into())),
    }

    let mut fields = std::collections::HashMap::new();
    let mut bases = Vec::new();
    for (n, line) in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if key == "base" {
            let f: Vec<&str> = rest.split_whitespace().collect();
            let num = |i: usize| -> Result<usize> {
                f.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad(n, format!("bad base line `{line}`")))
            };
            let split = match f.get(3) {
                Some(&"train") => Split::Train,
                Some(&"test") => Split::Test,
                _ => return Err(bad(n, format!("bad split in `{line}`"))),
            };
            bases.push((num(0)?, num(1)?, num(2)?, split));
        } else {
            fields.insert(key.to_string(), (n, rest.to_string()));
        }
    }
    fn get<T: std::str::FromStr>(fields: &std::collections::HashMap<String, (usize, String)>, key: &str) -> Result<T> {
        let (n, v) = fields.get(key).ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))?;
        v.parse().map_err(|_| Error::Parse { line: *n, message: format!("bad value for `{key}`") })
    }

    let config = DatasetConfig {
        frame_size: get(&fields, "frame_size")?,
        stride: get(&fields, "stride")?,
        test_fraction: get(&fields, "test_fraction")?,
        smoothing: SmoothingConfig::new(get(&fields, "smooth_m")?, get(&fields, "smooth_n")?)?,
        seed: get(&fields, "seed")?,
    };
    let norm = NormStats::new(get(&fields, "norm_min")?, get(&fields, "norm_max")?)?;
    let base_count: usize = get(&fields, "base_frames")?;
    if bases.len() != base_count || bases.iter().enumerate().any(|(i, b)| b.0 != i) {
        return Err(Error::Format("manifest base list does not match base_frames".into()));
    }

    let mut samples = Vec::with_capacity(base_count * AUGMENTATIONS as usize);
    for &(base, row, col, split) in &bases {
        for aug in 0..AUGMENTATIONS {
            let input = load_grid(sample_path(dir, base, aug, "in"))?;
            let target = load_grid(sample_path(dir, base, aug, "out"))?;
            let f = config.frame_size;
            if (input.height(), input.width(), target.height(), target.width()) != (f, f, f, f) {
                return Err(Error::shape(format!("sample {base}/{aug} is not {f}x{f}")));
            }
            samples.push(Sample { base, row, col, aug, split, input, target });
        }
    }
    Ok(DataSet { config, norm, pitch_nm: get(&fields, "pitch_nm")?, base_count, samples })
}
