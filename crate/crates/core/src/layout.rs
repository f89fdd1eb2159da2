//! CMPRECT layout files and their rasterization to binary grids.
//!
//! ```text
//! CMPRECT 1
//! DIE <width_nm> <height_nm>
//! # comment
//! <x0> <y0> <x1> <y1>
//! ```

use crate::error::{Error, Result};
use crate::grid::Grid2D;

/// Largest raster `rasterize` will allocate unless told otherwise.
pub const DEFAULT_PIXEL_BUDGET: usize = 1 << 28;

/// Axis-aligned copper rectangle in integer nanometers, half-open on the max side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

/// A die design as a list of copper rectangles. Overlaps are allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RectLayout {
    die_width: i64,
    die_height: i64,
    rects: Vec<Rect>,
}

impl RectLayout {
    pub fn new(die_width: i64, die_height: i64, rects: Vec<Rect>) -> Result<Self> {
        if die_width <= 0 || die_height <= 0 {
            return Err(Error::invalid("die", format!("{die_width}x{die_height} must be positive")));
        }
        let mut layout = RectLayout { die_width, die_height, rects: Vec::with_capacity(rects.len()) };
        for r in rects {
            layout.check(&r).map_err(|m| Error::invalid("rectangle", m))?;
            layout.rects.push(r);
        }
        Ok(layout)
    }

    pub fn die_width(&self) -> i64 {
        self.die_width
    }

    pub fn die_height(&self) -> i64 {
        self.die_height
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    fn check(&self, r: &Rect) -> std::result::Result<(), String> {
        if r.x0 >= r.x1 || r.y0 >= r.y1 {
            return Err("degenerate rectangle".into());
        }
        if r.x0 < 0 || r.y0 < 0 || r.x1 > self.die_width || r.y1 > self.die_height {
            return Err("rectangle outside die extent".into());
        }
        Ok(())
    }
}

pub fn parse_layout(text: &str) -> Result<RectLayout> {
    let mut lines =
        text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let perr = |line: usize, message: &str| Error::Parse { line, message: message.to_string() };

    let (n, header) = lines.next().ok_or_else(|| perr(1, "missing CMPRECT header"))?;
    if header.split_whitespace().collect::<Vec<_>>() != ["CMPRECT", "1"] {
        return Err(perr(n, "malformed header, expected `CMPRECT 1`"));
    }

    let (n, die) = lines.next().ok_or_else(|| perr(n + 1, "missing DIE line"))?;
    let fields: Vec<&str> = die.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != "DIE" {
        return Err(perr(n, "malformed header, expected `DIE <width_nm> <height_nm>`"));
    }
    let die_width = parse_int(fields[1], n)?;
    let die_height = parse_int(fields[2], n)?;
    if die_width <= 0 || die_height <= 0 {
        return Err(perr(n, "die dimensions must be positive"));
    }

    let mut layout = RectLayout { die_width, die_height, rects: Vec::new() };
    for (n, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(perr(n, "expected `<x0> <y0> <x1> <y1>`"));
        }
        let rect = Rect {
            x0: parse_int(fields[0], n)?,
            y0: parse_int(fields[1], n)?,
            x1: parse_int(fields[2], n)?,
            y1: parse_int(fields[3], n)?,
        };
        layout.check(&rect).map_err(|m| perr(n, &m))?;
        layout.rects.push(rect);
    }
    Ok(layout)
}

fn parse_int(field: &str, line: usize) -> Result<i64> {
    field.parse().map_err(|_| Error::Parse { line, message: format!("non-integer coordinate `{field}`") })
}

/// Serialize back to CMPRECT text.
pub fn format_layout(layout: &RectLayout) -> String {
    let mut s = format!("CMPRECT 1\nDIE {} {}\n", layout.die_width, layout.die_height);
    for r in &layout.rects {
        s.push_str(&format!("{} {} {} {}\n", r.x0, r.y0, r.x1, r.y1));
    }
    s
}

pub fn rasterize(layout: &RectLayout, pitch_nm: f64) -> Result<Grid2D> {
    rasterize_with_budget(layout, pitch_nm, DEFAULT_PIXEL_BUDGET)
}

/// Nearest-neighbor sampling: pixel `(r, c)` is copper iff its center
/// `((c + 0.5)·pitch, (r + 0.5)·pitch)` lies in some rectangle, using
/// half-open containment `x0 <= px < x1`.
pub fn rasterize_with_budget(layout: &RectLayout, pitch_nm: f64, max_pixels: usize) -> Result<Grid2D> {
    if !(pitch_nm > 0.0 && pitch_nm.is_finite()) {
        return Err(Error::invalid("pitch", format!("{pitch_nm} must be positive")));
    }
    let h = (layout.die_height as f64 / pitch_nm).ceil() as usize;
    let w = (layout.die_width as f64 / pitch_nm).ceil() as usize;
    if h.checked_mul(w).is_none_or(|n| n > max_pixels) {
        return Err(Error::invalid("pitch", format!("{h}x{w} raster exceeds the {max_pixels}-pixel budget")));
    }

    let mut grid = Grid2D::filled(h, w, pitch_nm, 0.0)?;
    for r in &layout.rects {
        let (c0, c1) = center_span(r.x0, r.x1, pitch_nm, w);
        let (r0, r1) = center_span(r.y0, r.y1, pitch_nm, h);
        for row in r0..r1 {
            grid.values_mut()[row * w + c0..row * w + c1].fill(1.0);
        }
    }
    Ok(grid)
}

#[inline]
fn center(i: usize, pitch: f64) -> f64 {
    (i as f64 + 0.5) * pitch
}

/// Index range `[lo, hi)` of pixels whose centers fall in `[a, b)`.
fn center_span(a: i64, b: i64, pitch: f64, n: usize) -> (usize, usize) {
    let first = |bound: f64| {
        // Estimate, then settle on the exact predicate so rounding in the
        // division cannot disagree with the containment rule.
        let mut i = ((bound / pitch - 0.5).ceil().max(0.0) as usize).min(n);
        while i > 0 && center(i - 1, pitch) >= bound {
            i -= 1;
        }
        while i < n && center(i, pitch) < bound {
            i += 1;
        }
        i
    };
    let lo = first(a as f64);
    let hi = first(b as f64);
    (lo, hi.max(lo))
}
