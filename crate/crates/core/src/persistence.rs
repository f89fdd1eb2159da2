//! Little-endian binary formats.
//!
//! `CMPG` grid:
//!
//! | field    | type        |
//! |----------|-------------|
//! | magic    | `b"CMPG"`   |
//! | version  | u32 (= 1)   |
//! | height   | u32         |
//! | width    | u32         |
//! | pitch_nm | f64         |
//! | dtype    | u8 (0 = f32, 1 = u8) |
//! | payload  | height·width values, row-major |
//!
//! `CMPW` checkpoint:
//!
//! | field        | type |
//! |--------------|------|
//! | magic        | `b"CMPW"` |
//! | version      | u32 (= 1) |
//! | config       | depth u32, base_channels u32, kernel u32, frame_size u32, pitch_nm f64 |
//! | norm         | min f64, max f64 |
//! | epoch        | u32 |
//! | param count  | u32 |
//! | per param    | name_len u16, name bytes, ndim u8, dims u32 × ndim, f32 × Π dims |
//! | adam flag    | u8 (0 = absent, 1 = present) |
//! | adam state   | step u64, then per param: first moment f32 ×n, second moment f32 ×n |
//!
//! Readers consume exactly the declared byte counts, so several records can
//! be concatenated in one stream.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::preprocess::NormStats;
use crate::training::AdamState;
use crate::unet::{ModelState, Param, UNetConfig};

pub const GRID_MAGIC: &[u8; 4] = b"CMPG";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMPW";
pub const FORMAT_VERSION: u32 = 1;

/// Payload element type of a grid file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridDtype {
    F32 = 0,
    U8 = 1,
}

impl GridDtype {
    fn size(self) -> usize {
        match self {
            GridDtype::F32 => 4,
            GridDtype::U8 => 1,
        }
    }
}

/// Map an unexpected EOF to a truncation error naming what was being read.
fn truncated(what: &'static str) -> impl Fn(io::Error) -> Error {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated {what}"))
        } else {
            Error::Io(e)
        }
    }
}

/// Write a grid. Values are stored as f32 (or u8 for binary rasters), so
/// values that are not f32-representable are rounded.
pub fn write_grid<W: Write>(grid: &Grid2D, dtype: GridDtype, mut out: W) -> Result<()> {
    if dtype == GridDtype::U8 && !grid.is_binary() {
        return Err(Error::invalid("dtype", "u8 payload requires a binary grid"));
    }
    let dim = |n: usize| u32::try_from(n).map_err(|_| Error::invalid("grid", "dimension exceeds u32"));
    let mut buf = Vec::with_capacity(25 + grid.values().len() * dtype.size());
    buf.extend_from_slice(GRID_MAGIC);
    buf.write_u32::<LE>(FORMAT_VERSION)?;
    buf.write_u32::<LE>(dim(grid.height())?)?;
    buf.write_u32::<LE>(dim(grid.width())?)?;
    buf.write_f64::<LE>(grid.pitch_nm())?;
    buf.write_u8(dtype as u8)?;
    match dtype {
        GridDtype::F32 => grid.values().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        GridDtype::U8 => buf.extend(grid.values().iter().map(|&v| v as u8)),
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_grid<R: Read>(mut input: R) -> Result<Grid2D> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated("header"))?;
    if &magic != GRID_MAGIC {
        return Err(Error::Format("not a CMPG file".into()));
    }
    let version = input.read_u32::<LE>().map_err(truncated("header"))?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unknown CMPG version {version}")));
    }
    let height = input.read_u32::<LE>().map_err(truncated("header"))? as usize;
    let width = input.read_u32::<LE>().map_err(truncated("header"))? as usize;
    let pitch = input.read_f64::<LE>().map_err(truncated("header"))?;
    let dtype = match input.read_u8().map_err(truncated("header"))? {
        0 => GridDtype::F32,
        1 => GridDtype::U8,
        other => return Err(Error::Format(format!("unknown CMPG dtype {other}"))),
    };
    let count = height.checked_mul(width).ok_or_else(|| Error::Format("grid dimensions overflow".into()))?;
    let mut payload = Vec::new();
    let want = (count * dtype.size()) as u64;
    input.by_ref().take(want).read_to_end(&mut payload)?;
    if (payload.len() as u64) < want {
        return Err(Error::Format("truncated payload".into()));
    }
    let values = match dtype {
        GridDtype::F32 => {
            payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect()
        }
        GridDtype::U8 => payload.iter().map(|&b| b as f64).collect(),
    };
    Grid2D::new(height, width, pitch, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_grid(grid: &Grid2D, dtype: GridDtype, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid(grid, dtype, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Grid2D> {
    read_grid(BufReader::new(File::open(path)?))
}

fn write_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    values.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
}

fn read_f32s<R: Read>(input: &mut R, n: usize, what: &'static str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    input.read_exact(&mut bytes).map_err(truncated(what))?;
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

pub fn write_checkpoint<W: Write>(state: &ModelState, mut out: W) -> Result<()> {
    let u32_of =
        |n: usize, what: &'static str| u32::try_from(n).map_err(|_| Error::invalid(what, format!("{n} exceeds u32")));
    let cfg = &state.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LE>(FORMAT_VERSION)?;
    buf.write_u32::<LE>(u32_of(cfg.depth, "depth")?)?;
    buf.write_u32::<LE>(u32_of(cfg.base_channels, "base_channels")?)?;
    buf.write_u32::<LE>(u32_of(cfg.kernel, "kernel")?)?;
    buf.write_u32::<LE>(u32_of(cfg.frame_size, "frame_size")?)?;
    buf.write_f64::<LE>(state.pitch_nm)?;
    buf.write_f64::<LE>(state.norm.min)?;
    buf.write_f64::<LE>(state.norm.max)?;
    buf.write_u32::<LE>(state.epoch)?;
    buf.write_u32::<LE>(u32_of(state.params.len(), "parameter count")?)?;
    for p in &state.params {
        let name = p.name.as_bytes();
        buf.write_u16::<LE>(u16::try_from(name.len()).map_err(|_| Error::invalid("name", &p.name))?)?;
        buf.extend_from_slice(name);
        buf.write_u8(u8::try_from(p.dims.len()).map_err(|_| Error::invalid("ndim", &p.name))?)?;
        for &d in &p.dims {
            buf.write_u32::<LE>(u32_of(d, "dimension")?)?;
        }
        write_f32s(&mut buf, &p.data);
    }
    match &state.adam {
        None => buf.write_u8(0)?,
        Some(adam) => {
            buf.write_u8(1)?;
            buf.write_u64::<LE>(adam.step)?;
            for (m, v) in adam.first.iter().zip(&adam.second) {
                write_f32s(&mut buf, m);
                write_f32s(&mut buf, v);
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Read a checkpoint. The architecture comes from the file; every
/// parameter's name and shape is checked against what that architecture implies.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelState> {
    let t = truncated("checkpoint");
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(&t)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a CMPW file".into()));
    }
    let version = input.read_u32::<LE>().map_err(&t)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unknown CMPW version {version}")));
    }
    let config = UNetConfig {
        depth: input.read_u32::<LE>().map_err(&t)? as usize,
        base_channels: input.read_u32::<LE>().map_err(&t)? as usize,
        kernel: input.read_u32::<LE>().map_err(&t)? as usize,
        frame_size: input.read_u32::<LE>().map_err(&t)? as usize,
    };
    config.validate().map_err(|e| Error::Format(format!("bad architecture block: {e}")))?;
    let pitch_nm = input.read_f64::<LE>().map_err(&t)?;
    let norm = NormStats::new(input.read_f64::<LE>().map_err(&t)?, input.read_f64::<LE>().map_err(&t)?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let epoch = input.read_u32::<LE>().map_err(&t)?;

    let specs = config.param_specs();
    let count = input.read_u32::<LE>().map_err(&t)? as usize;
    if count != specs.len() {
        return Err(Error::Format(format!(
            "parameter shape mismatch: {count} parameters, architecture needs {}",
            specs.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for spec in &specs {
        let len = input.read_u16::<LE>().map_err(&t)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(&t)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = input.read_u8().map_err(&t)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(input.read_u32::<LE>().map_err(&t)? as usize);
        }
        if name != spec.name || dims != spec.dims {
            return Err(Error::Format(format!(
                "parameter shape mismatch: {name} {dims:?}, expected {} {:?}",
                spec.name, spec.dims
            )));
        }
        let data = read_f32s(&mut input, spec.len(), "checkpoint")?;
        params.push(Param { name, dims, data });
    }

    let adam = match input.read_u8().map_err(&t)? {
        0 => None,
        1 => {
            let step = input.read_u64::<LE>().map_err(&t)?;
            let mut first = Vec::with_capacity(count);
            let mut second = Vec::with_capacity(count);
            for spec in &specs {
                first.push(read_f32s(&mut input, spec.len(), "checkpoint")?);
                second.push(read_f32s(&mut input, spec.len(), "checkpoint")?);
            }
            Some(AdamState { first, second, step })
        }
        other => return Err(Error::Format(format!("bad optimizer-state flag {other}"))),
    };
    Ok(ModelState { config, params, norm, adam, epoch, pitch_nm })
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(state, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
