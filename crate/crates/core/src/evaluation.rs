//! Nanometer-scale accuracy metrics, cross-sections and timed inference.
//!
//! For a set `D` of `h`×`w` frames:
//!
//! ```text
//! L1   = mean over D of ( Σ|y − ŷ| / (h·w) )
//! RMSE = sqrt( mean over D of ( Σ(y − ŷ)² / (h·w) ) )
//! ```

use std::fmt::Write as _;
use std::time::Instant;

use crate::autodiff::Tensor4;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::grid::Grid2D;
use crate::preprocess::{DataSet, Split};
use crate::unet::ModelState;

/// Per-frame error in nm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleError {
    pub l1_nm: f64,
    pub rmse_nm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub l1_nm: f64,
    pub rmse_nm: f64,
    pub sample_count: usize,
    pub per_sample: Vec<SampleError>,
    /// Mean wall-clock forward time per sample, when measured.
    pub seconds_per_sample: f64,
}

impl Metrics {
    /// `sample,l1_nm,rmse_nm`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,l1_nm,rmse_nm\n");
        for (i, e) in self.per_sample.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{}", e.l1_nm, e.rmse_nm);
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "L1={:.6}nm RMSE={:.6}nm n={} t_inf={:.6}s",
            self.l1_nm, self.rmse_nm, self.sample_count, self.seconds_per_sample
        )
    }
}

fn check_pairs(preds: &[Grid2D], truths: &[Grid2D]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("evaluation set", "no samples"));
    }
    if preds.len() != truths.len() {
        return Err(Error::shape(format!("{} predictions for {} ground truths", preds.len(), truths.len())));
    }
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if !p.same_dims(t) {
            return Err(Error::shape(format!(
                "sample {i}: prediction {}x{} vs truth {}x{}",
                p.height(),
                p.width(),
                t.height(),
                t.width()
            )));
        }
    }
    Ok(())
}

/// Mean absolute and mean squared pixel error of one frame.
fn frame_errors(pred: &Grid2D, truth: &Grid2D) -> (f64, f64) {
    let n = pred.values().len() as f64;
    let (abs, sq) = pred
        .values()
        .iter()
        .zip(truth.values())
        .fold((0.0, 0.0), |(a, s), (p, t)| (a + (p - t).abs(), s + (p - t) * (p - t)));
    (abs / n, sq / n)
}

pub fn l1(preds: &[Grid2D], truths: &[Grid2D]) -> Result<f64> {
    Ok(evaluate(preds, truths)?.l1_nm)
}

pub fn rmse(preds: &[Grid2D], truths: &[Grid2D]) -> Result<f64> {
    Ok(evaluate(preds, truths)?.rmse_nm)
}

/// Both metrics plus the per-sample breakdown; timing is left at zero.
pub fn evaluate(preds: &[Grid2D], truths: &[Grid2D]) -> Result<Metrics> {
    check_pairs(preds, truths)?;
    let errs: Vec<(f64, f64)> = preds.iter().zip(truths).map(|(p, t)| frame_errors(p, t)).collect();
    let n = errs.len() as f64;
    Ok(Metrics {
        l1_nm: errs.iter().map(|e| e.0).sum::<f64>() / n,
        rmse_nm: (errs.iter().map(|e| e.1).sum::<f64>() / n).sqrt(),
        sample_count: errs.len(),
        per_sample: errs.iter().map(|&(a, s)| SampleError { l1_nm: a, rmse_nm: s.sqrt() }).collect(),
        seconds_per_sample: 0.0,
    })
}

/// `(x, height)` pairs along `row`, with `x = (col + 0.5)·pitch`.
pub fn cross_section(grid: &Grid2D, row: usize) -> Result<Vec<(f64, f64)>> {
    if row >= grid.height() {
        return Err(Error::invalid("row", format!("{row} is outside 0..{}", grid.height())));
    }
    let pitch = grid.pitch_nm();
    Ok(grid.row(row).iter().enumerate().map(|(c, &h)| ((c as f64 + 0.5) * pitch, h)).collect())
}

/// `x_nm,height_nm[,height2_nm]` for one or two same-width grids.
pub fn cross_section_csv(first: &Grid2D, second: Option<&Grid2D>, row: usize) -> Result<String> {
    let a = cross_section(first, row)?;
    let b = match second {
        Some(g) if g.width() != first.width() => {
            return Err(Error::shape(format!("cross-section widths {} and {}", first.width(), g.width())))
        }
        Some(g) => Some(cross_section(g, row)?),
        None => None,
    };
    let mut s = String::from(if b.is_some() { "x_nm,height_nm,height2_nm\n" } else { "x_nm,height_nm\n" });
    for (i, &(x, h)) in a.iter().enumerate() {
        let _ = write!(s, "{x:.8e},{h:.8e}");
        if let Some(b) = &b {
            let _ = write!(s, ",{:.8e}", b[i].1);
        }
        s.push('\n');
    }
    Ok(s)
}

/// Parse a cross-section CSV back into rows of numbers.
pub fn parse_cross_section_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Parse { line: i + 1, message: format!("bad number in `{l}`") })
        })
        .collect()
}

/// Index into `0..n` after mirror reflection about the last element.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Extend a grid to `h`×`w` (both ≥ current) by reflecting at the far edges.
pub fn reflect_pad(grid: &Grid2D, h: usize, w: usize) -> Grid2D {
    let (gh, gw) = (grid.height(), grid.width());
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        let sr = reflect(r, gh);
        values.extend((0..w).map(|c| grid.get(sr, reflect(c, gw))));
    }
    Grid2D::new(h, w, grid.pitch_nm(), values).expect("dims")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PredictMode {
    /// Non-overlapping frames of the training size, stitched.
    #[default]
    Tiled,
    /// One fully convolutional pass over the whole grid.
    Full,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Heights in nm.
    pub grid: Grid2D,
    pub seconds: f64,
    pub warnings: Vec<String>,
}

fn round_up(n: usize, unit: usize) -> usize {
    n.div_ceil(unit) * unit
}

/// Predict nm heights for a binary layout raster of any size.
pub fn timed_predict(
    model: &ModelState,
    raster: &Grid2D,
    mode: PredictMode,
    parallelism: Parallelism,
) -> Result<Prediction> {
    let start = Instant::now();
    let mut warnings = Vec::new();
    if (raster.pitch_nm() - model.pitch_nm).abs() > 1e-9 * model.pitch_nm.abs().max(1.0) {
        warnings.push(format!(
            "grid pitch {} nm differs from the model's training pitch {} nm",
            raster.pitch_nm(),
            model.pitch_nm
        ));
    }
    if raster.height() == 0 || raster.width() == 0 {
        return Err(Error::invalid("grid", "empty"));
    }
    let (h, w) = (raster.height(), raster.width());
    let unit = match mode {
        PredictMode::Tiled => model.config.frame_size,
        PredictMode::Full => 1 << model.config.depth,
    };
    let padded = reflect_pad(raster, round_up(h, unit), round_up(w, unit));
    let (ph, pw) = (padded.height(), padded.width());

    let tiles: Vec<(usize, usize, usize, usize)> = match mode {
        PredictMode::Full => vec![(0, 0, ph, pw)],
        PredictMode::Tiled => {
            (0..ph / unit).flat_map(|i| (0..pw / unit).map(move |j| (i * unit, j * unit, unit, unit))).collect()
        }
    };
    let outputs = map_indexed(tiles.len(), parallelism, |i| {
        let (r, c, th, tw) = tiles[i];
        let window = padded.window(r, c, th, tw);
        let x = Tensor4::new([1, 1, th, tw], window.values().iter().map(|&v| v as f32).collect())?;
        model.forward(&x)
    });

    let mut out = Grid2D::filled(h, w, raster.pitch_nm(), 0.0)?;
    for (&(r0, c0, th, tw), y) in tiles.iter().zip(outputs) {
        let y = y?;
        for r in r0..(r0 + th).min(h) {
            for c in c0..(c0 + tw).min(w) {
                let v = y.data()[(r - r0) * tw + (c - c0)] as f64;
                out.set(r, c, model.norm.denormalize_value(v));
            }
        }
    }
    Ok(Prediction { grid: out, seconds: start.elapsed().as_secs_f64(), warnings })
}

/// Predict every test sample of `dataset` and score it in nm.
pub fn evaluate_dataset(model: &ModelState, dataset: &DataSet, parallelism: Parallelism) -> Result<Metrics> {
    let samples: Vec<_> = dataset.split_samples(Split::Test).collect();
    if samples.is_empty() {
        return Err(Error::invalid("dataset", "empty test split"));
    }
    let results = map_indexed(samples.len(), parallelism, |i| {
        let s = samples[i];
        let f = s.input.height();
        let x = Tensor4::new([1, 1, f, s.input.width()], s.input.values().iter().map(|&v| v as f32).collect())?;
        let start = Instant::now();
        let y = model.forward(&x)?;
        let secs = start.elapsed().as_secs_f64();
        let pred = Grid2D::new(
            f,
            s.input.width(),
            s.input.pitch_nm(),
            y.data().iter().map(|&v| model.norm.denormalize_value(v as f64)).collect(),
        )?;
        Ok::<_, Error>((pred, dataset.norm.denormalize(&s.target), secs))
    });
    let mut preds = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    let mut total = 0.0;
    for r in results {
        let (p, t, secs) = r?;
        preds.push(p);
        truths.push(t);
        total += secs;
    }
    let mut m = evaluate(&preds, &truths)?;
    m.seconds_per_sample = total / samples.len() as f64;
    Ok(m)
}
