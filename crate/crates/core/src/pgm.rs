//! 16-bit binary PGM (P5) read/write.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DenseGrid;

const MAXVAL: f64 = 65535.0;

/// Sidecar describing how stored integers map back to real values:
/// `value = pixel * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgmScale {
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    pub max_value: f64,
    pub sum: f64,
}

fn encode(grid: &DenseGrid, scale: f64) -> Vec<u8> {
    let header = format!("P5\n{} {}\n65535\n", grid.cols(), grid.rows());
    let mut bytes = header.into_bytes();
    bytes.reserve(grid.len() * 2);
    for &v in grid.values() {
        let q = if scale > 0.0 {
            (v / scale).round().clamp(0.0, MAXVAL) as u16
        } else {
            0
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    bytes
}

/// Writes a grid whose values lie in `[0, 1]` with a fixed `1/65535` step.
pub fn write_unit(path: &Path, grid: &DenseGrid) -> Result<()> {
    std::fs::write(path, encode(grid, 1.0 / MAXVAL)).map_err(|e| Error::io(path, e))
}

/// Writes a non-negative grid scaled so its maximum maps to 65535, plus a
/// JSON sidecar (`<path>.json`) holding the scale factor.
pub fn write_scaled(path: &Path, grid: &DenseGrid) -> Result<PgmScale> {
    let max_value = grid.max().max(0.0);
    let scale = if max_value > 0.0 { max_value / MAXVAL } else { 0.0 };
    std::fs::write(path, encode(grid, scale)).map_err(|e| Error::io(path, e))?;
    let sidecar = PgmScale {
        width: grid.cols(),
        height: grid.rows(),
        scale,
        max_value,
        sum: grid.sum(),
    };
    let side_path = sidecar_path(path);
    std::fs::write(&side_path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side_path, e))?;
    Ok(sidecar)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Reads a 16-bit P5 file and multiplies every sample by `scale`.
pub fn read(path: &Path, scale: f64) -> Result<DenseGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };

    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;

    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 65535 {
        return Err(bad("only 16-bit PGM is supported"));
    }
    let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != w * h * 2 {
        return Err(bad("raster size does not match header"));
    }
    let values = raster
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
        .collect();
    DenseGrid::from_vec(h, w, values)
}

/// Rounds unit-range values to the 16-bit grid used on disk.
pub fn quantize_unit(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * MAXVAL).round() / MAXVAL
}

pub fn read_unit(path: &Path) -> Result<DenseGrid> {
    read(path, 1.0 / MAXVAL)
}
