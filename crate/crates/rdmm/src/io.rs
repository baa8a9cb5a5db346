//! File formats: a small binary tensor container, PGM images with
//! percentile intensity normalization, grayscale figure renders,
//! metrics CSV, and the JSON run manifest. All writes go through a
//! write-temp-then-rename helper so outputs are atomic.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{RdmmError, Result};
use crate::field::{GridSpec, ScalarField, VectorField};
use crate::optimizer::{IterationRecord, RegistrationConfig, RegistrationMetrics};
use crate::synthdata::GenParams;

pub const TENSOR_MAGIC: &[u8; 8] = b"RDMMTNS1";

/// In-memory payload of a tensor file.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64 { dims: Vec<usize>, data: Vec<f64> },
    I32 { dims: Vec<usize>, data: Vec<i32> },
}

impl TensorData {
    pub fn dims(&self) -> &[usize] {
        match self {
            TensorData::F64 { dims, .. } | TensorData::I32 { dims, .. } => dims,
        }
    }
}

fn format_err(offset: usize, detail: impl Into<String>) -> RdmmError {
    RdmmError::Format { offset: offset as u64, detail: detail.into() }
}

/// Atomically replaces `path` with `bytes`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn tensor_to_bytes(t: &TensorData) -> Vec<u8> {
    let (dims, dtype, payload): (&[usize], u8, Vec<u8>) = match t {
        TensorData::F64 { dims, data } => (
            dims,
            0,
            data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        TensorData::I32 { dims, data } => (
            dims,
            1,
            data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    };
    let mut out = Vec::with_capacity(8 + 1 + 4 + dims.len() * 4 + payload.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(dtype);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<TensorData> {
    if bytes.len() < 8 || &bytes[..8] != TENSOR_MAGIC {
        return Err(format_err(0, "bad tensor magic"));
    }
    let mut pos = 8usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(format_err(*pos, "truncated tensor file"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let dtype = take(&mut pos, 1)?[0];
    let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(format_err(pos - 4, format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().product();
    match dtype {
        0 => {
            let raw = take(&mut pos, count * 8)?;
            if pos != bytes.len() {
                return Err(format_err(pos, "trailing bytes after payload"));
            }
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(TensorData::F64 { dims, data })
        }
        1 => {
            let raw = take(&mut pos, count * 4)?;
            if pos != bytes.len() {
                return Err(format_err(pos, "trailing bytes after payload"));
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(TensorData::I32 { dims, data })
        }
        other => Err(format_err(8, format!("unknown dtype tag {other}"))),
    }
}

pub fn write_tensor(path: &Path, t: &TensorData) -> Result<()> {
    atomic_write(path, &tensor_to_bytes(t))
}

pub fn read_tensor(path: &Path) -> Result<TensorData> {
    tensor_from_bytes(&fs::read(path)?)
}

pub fn scalar_to_tensor(f: &ScalarField) -> TensorData {
    TensorData::F64 { dims: f.grid().dims().to_vec(), data: f.values().to_vec() }
}

pub fn tensor_to_scalar(t: &TensorData) -> Result<ScalarField> {
    match t {
        TensorData::F64 { dims, data } => {
            ScalarField::from_vec(&GridSpec::new(dims)?, data.clone())
        }
        TensorData::I32 { dims, data } => ScalarField::from_vec(
            &GridSpec::new(dims)?,
            data.iter().map(|&v| v as f64).collect(),
        ),
    }
}

/// Vector fields and maps are stored component-major with a leading
/// component axis.
pub fn vector_to_tensor(f: &VectorField) -> TensorData {
    let mut dims = vec![f.grid().d()];
    dims.extend_from_slice(f.grid().dims());
    TensorData::F64 { dims, data: f.data().to_vec() }
}

pub fn tensor_to_vector(t: &TensorData) -> Result<VectorField> {
    match t {
        TensorData::F64 { dims, data } => {
            if dims.len() < 2 {
                return Err(RdmmError::Format {
                    offset: 9,
                    detail: "vector tensor needs a component axis".into(),
                });
            }
            let grid = GridSpec::new(&dims[1..])?;
            if dims[0] != grid.d() || data.len() != grid.d() * grid.len() {
                return Err(RdmmError::Format {
                    offset: 9,
                    detail: "component axis does not match grid dimensionality".into(),
                });
            }
            let mut v = VectorField::zeros(&grid);
            v.data_mut().copy_from_slice(data);
            Ok(v)
        }
        TensorData::I32 { .. } => Err(RdmmError::Format {
            offset: 8,
            detail: "vector tensors must be f64".into(),
        }),
    }
}

pub fn preweights_to_tensor(h: &[ScalarField]) -> TensorData {
    let mut dims = vec![h.len()];
    dims.extend_from_slice(h[0].grid().dims());
    let data = h.iter().flat_map(|f| f.values().iter().copied()).collect();
    TensorData::F64 { dims, data }
}

pub fn tensor_to_preweights(t: &TensorData) -> Result<Vec<ScalarField>> {
    match t {
        TensorData::F64 { dims, data } => {
            if dims.len() < 3 {
                return Err(RdmmError::Format {
                    offset: 9,
                    detail: "pre-weight tensor needs a leading kernel axis".into(),
                });
            }
            let grid = GridSpec::new(&dims[1..])?;
            let n = grid.len();
            if data.len() != dims[0] * n {
                return Err(RdmmError::Format {
                    offset: 9,
                    detail: "pre-weight payload does not match dims".into(),
                });
            }
            (0..dims[0])
                .map(|i| ScalarField::from_vec(&grid, data[i * n..(i + 1) * n].to_vec()))
                .collect()
        }
        TensorData::I32 { .. } => Err(RdmmError::Format {
            offset: 8,
            detail: "pre-weight tensors must be f64".into(),
        }),
    }
}

// ---------------------------------------------------------------------------
// PGM

struct PgmImage {
    width: usize,
    height: usize,
    #[cfg_attr(not(test), allow(dead_code))]
    maxval: u32,
    // row-major, one value per pixel
    data: Vec<u32>,
}

fn parse_pgm(bytes: &[u8]) -> Result<PgmImage> {
    let mut pos = 0usize;
    let skip_ws = |pos: &mut usize| {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
    };
    let read_int = |pos: &mut usize| -> Result<u32> {
        skip_ws(pos);
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if *pos == start {
            return Err(format_err(start, "expected integer in PGM header"));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .unwrap()
            .parse()
            .map_err(|_| format_err(start, "integer overflow in PGM header"))
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(format_err(0, "not a binary PGM (P5) file"));
    }
    pos += 2;
    let width = read_int(&mut pos)? as usize;
    let height = read_int(&mut pos)? as usize;
    let maxval = read_int(&mut pos)?;
    if width < 2 || height < 2 {
        return Err(format_err(2, "PGM image must be at least 2x2"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(pos, format!("unsupported maxval {maxval}")));
    }
    // single whitespace byte separates header and payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(pos, "missing separator before PGM payload"));
    }
    pos += 1;
    let n = width * height;
    let wide = maxval > 255;
    let need = n * if wide { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(format_err(bytes.len(), "truncated PGM payload"));
    }
    let data = if wide {
        bytes[pos..pos + need]
            .chunks_exact(2)
            .map(|c| u32::from(c[0]) << 8 | u32::from(c[1]))
            .collect()
    } else {
        bytes[pos..pos + need].iter().map(|&b| u32::from(b)).collect()
    };
    Ok(PgmImage { width, height, maxval, data })
}

fn pgm_bytes(width: usize, height: usize, maxval: u32, data: &[u32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval > 255 {
        for &v in data {
            let v = v.min(maxval) as u16;
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        for &v in data {
            out.push(v.min(maxval) as u8);
        }
    }
    out
}

/// Maps raw intensities to [0,1]: the 0.1th and 99.9th percentiles go
/// to 0 and 1, values outside are clamped; a constant image maps to
/// all zeros.
pub fn normalize_percentiles(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = |q: f64| sorted[(q * (sorted.len() - 1) as f64).round() as usize];
    let lo = rank(0.001);
    let hi = rank(0.999);
    if hi <= lo {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect()
}

fn is_pgm_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("pgm"))
        .unwrap_or(false)
}

/// Reads an image into [0,1] intensities. PGM input is
/// percentile-normalized; tensor input is taken verbatim.
pub fn read_image(path: &Path) -> Result<ScalarField> {
    if is_pgm_path(path) {
        let img = parse_pgm(&fs::read(path)?)?;
        let grid = GridSpec::new(&[img.height, img.width])?;
        let raw: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
        ScalarField::from_vec(&grid, normalize_percentiles(&raw))
    } else {
        tensor_to_scalar(&read_tensor(path)?)
    }
}

/// Writes an image: 16-bit PGM (intensities clamped to [0,1]) or a
/// float tensor, by extension.
pub fn write_image(path: &Path, field: &ScalarField) -> Result<()> {
    if is_pgm_path(path) {
        if field.grid().d() != 2 {
            return Err(RdmmError::InvalidParameter("PGM output is 2D only".into()));
        }
        let dims = field.grid().dims();
        let data: Vec<u32> = field
            .values()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u32)
            .collect();
        atomic_write(path, &pgm_bytes(dims[1], dims[0], 65535, &data))
    } else {
        write_tensor(path, &scalar_to_tensor(field))
    }
}

/// Value-to-gray mapping for rendered figures.
#[derive(Clone, Copy, Debug)]
pub enum FigureKind {
    /// Linear [min, max] -> [0, 255].
    Gray,
    /// Symmetric around zero: [-max|v|, max|v|] -> [0, 255].
    Signed,
    /// Linear over a fixed sigma range, clamped.
    StdMap { lo: f64, hi: f64 },
    /// Linear [0, 2] -> [0, 255], clamped; 1 renders mid-gray.
    DetJac,
}

pub fn render_figure(field: &ScalarField, kind: FigureKind, path: &Path) -> Result<()> {
    if field.grid().d() != 2 {
        return Err(RdmmError::InvalidParameter("figure rendering is 2D only".into()));
    }
    if !field.all_finite() {
        return Err(RdmmError::NonFinite("figure input".into()));
    }
    let (lo, hi) = match kind {
        FigureKind::Gray => {
            let lo = field.values().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = field.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
        FigureKind::Signed => {
            let a = field.values().iter().map(|v| v.abs()).fold(0.0f64, f64::max);
            (-a, a)
        }
        FigureKind::StdMap { lo, hi } => (lo, hi),
        FigureKind::DetJac => (0.0, 2.0),
    };
    let span = hi - lo;
    let data: Vec<u32> = field
        .values()
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                0
            } else {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u32
            }
        })
        .collect();
    let dims = field.grid().dims();
    atomic_write(path, &pgm_bytes(dims[1], dims[0], 255, &data))
}

// ---------------------------------------------------------------------------
// metrics CSV and manifest

/// Fixed-format float with 17 significant digits, locale-independent.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn metrics_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,total,sim,kinetic,omt,range,step_size\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration,
            fmt(r.total),
            fmt(r.sim),
            fmt(r.kinetic),
            fmt(r.omt),
            fmt(r.range),
            fmt(r.step_size),
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[IterationRecord]) -> Result<()> {
    atomic_write(path, metrics_csv(records).as_bytes())
}

/// Everything needed to reproduce one CLI run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen_params: Option<GenParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<RegistrationConfig>,
    #[serde(default)]
    pub inputs: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default)]
    pub per_iteration: Vec<IterationRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RegistrationMetrics>,
    /// Squared pre-weight values used with a foreground mask, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fg_h2: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bg_h2: Option<Vec<f64>>,
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
