//! Dot annotations, ground-truth density rendering and the fixed Gaussian
//! kernels that tie auxiliary branches to the primary one.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DenseGrid;

/// Location-level annotation: one point per object, in pixel units.
///
/// Pixel `(col, row)` covers `[col, col + 1) x [row, row + 1)`, so its
/// centre sits at `(col + 0.5, row + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DotMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 2]>,
}

impl DotMap {
    pub fn new(width: usize, height: usize, points: Vec<[f64; 2]>) -> Result<Self> {
        let dots = DotMap {
            width,
            height,
            points,
        };
        dots.validate()?;
        Ok(dots)
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("dot map dimensions must be positive"));
        }
        for (i, &[x, y]) in self.points.iter().enumerate() {
            let inside = x.is_finite()
                && y.is_finite()
                && (0.0..self.width as f64).contains(&x)
                && (0.0..self.height as f64).contains(&y);
            if !inside {
                return Err(Error::invalid(format!(
                    "dot {i} at ({x}, {y}) lies outside the {}x{} image",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dots: DotMap = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        dots.validate()?;
        Ok(dots)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Non-negative density map whose sum is the object count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    grid: DenseGrid,
}

impl DensityGrid {
    pub fn from_grid(grid: DenseGrid) -> Result<Self> {
        if grid.values().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("density values must be finite and non-negative"));
        }
        Ok(DensityGrid { grid })
    }

    pub fn width(&self) -> usize {
        self.grid.cols()
    }

    pub fn height(&self) -> usize {
        self.grid.rows()
    }

    pub fn grid(&self) -> &DenseGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        self.grid.values()
    }

    pub fn integral(&self) -> f64 {
        integral(self)
    }
}

pub fn integral(d: &DensityGrid) -> f64 {
    d.grid.sum()
}

/// Renders each dot as an isotropic Gaussian truncated at
/// `truncation_radius * sigma` and clipped to the image, with every dot's
/// footprint rescaled to unit mass.
pub fn render_density(dots: &DotMap, sigma: f64, truncation_radius: f64) -> Result<DensityGrid> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !(truncation_radius >= 2.0 && truncation_radius.is_finite()) {
        return Err(Error::invalid(format!(
            "truncation radius must be at least 2 sigma, got {truncation_radius}"
        )));
    }
    dots.validate()?;

    let (w, h) = (dots.width, dots.height);
    let mut grid = DenseGrid::zeros(h, w);
    let reach = truncation_radius * sigma;
    let reach_px = reach.ceil() as isize + 1;
    let two_var = 2.0 * sigma * sigma;
    let mut footprint: Vec<(usize, f64)> = Vec::new();

    for &[x, y] in &dots.points {
        // Offsets are taken relative to the containing pixel so integer
        // translations reproduce bit-identical footprints.
        let (cx, cy) = (x.floor(), y.floor());
        let (fx, fy) = (x - cx, y - cy);
        let (cx, cy) = (cx as isize, cy as isize);

        footprint.clear();
        let mut mass = 0.0;
        for oy in -reach_px..=reach_px {
            let row = cy + oy;
            if row < 0 || row >= h as isize {
                continue;
            }
            let ddy = oy as f64 + 0.5 - fy;
            for ox in -reach_px..=reach_px {
                let col = cx + ox;
                if col < 0 || col >= w as isize {
                    continue;
                }
                let ddx = ox as f64 + 0.5 - fx;
                let d2 = ddx * ddx + ddy * ddy;
                if d2.sqrt() > reach {
                    continue;
                }
                let g = (-d2 / two_var).exp();
                mass += g;
                footprint.push((row as usize * w + col as usize, g));
            }
        }

        let values = grid.values_mut();
        if mass > 0.0 && mass.is_finite() {
            for &(idx, g) in &footprint {
                values[idx] += g / mass;
            }
        } else {
            // Footprint smaller than a pixel: all mass in the containing pixel.
            values[cy as usize * w + cx as usize] += 1.0;
        }
    }
    DensityGrid::from_grid(grid)
}

/// Fixed unit-mass Gaussian kernel with odd sides.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub rows: usize,
    pub cols: usize,
    pub sigma: f64,
    pub weights: DenseGrid,
}

/// Truncated Gaussian on integer offsets from the kernel centre,
/// normalized to sum to one.
pub fn make_aux_kernel(rows: usize, cols: usize, sigma: f64) -> Result<KernelSpec> {
    if rows == 0 || cols == 0 || rows % 2 == 0 || cols % 2 == 0 {
        return Err(Error::invalid(format!(
            "kernel sides must be odd and positive, got {rows}x{cols}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("kernel sigma must be positive, got {sigma}")));
    }
    let (ry, rx) = ((rows / 2) as f64, (cols / 2) as f64);
    let mut raw = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let dy = r as f64 - ry;
        for c in 0..cols {
            let dx = c as f64 - rx;
            raw.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = raw.iter().sum();
    let weights = raw.into_iter().map(|v| v / total).collect();
    Ok(KernelSpec {
        rows,
        cols,
        sigma,
        weights: DenseGrid::from_vec(rows, cols, weights)?,
    })
}

/// 3x3, 5x5, 3x5 and 5x3 kernels at sigma = 1.
pub fn default_kernel_bank() -> Vec<KernelSpec> {
    [(3, 3), (5, 5), (3, 5), (5, 3)]
        .into_iter()
        .map(|(r, c)| make_aux_kernel(r, c, 1.0).expect("odd sizes"))
        .collect()
}

/// Bank for `k` auxiliary branches: the default four first, then further
/// odd shapes cycling through 1x3, 3x1, 1x5, 5x1, 7x7.
pub fn kernel_bank(k: usize) -> Vec<KernelSpec> {
    const EXTRA: [(usize, usize); 5] = [(1, 3), (3, 1), (1, 5), (5, 1), (7, 7)];
    let mut bank = default_kernel_bank();
    let mut i = 0;
    while bank.len() < k {
        let (r, c) = EXTRA[i % EXTRA.len()];
        // Repeat shapes get a wider sigma so every kernel in the bank differs.
        let sigma = 1.0 + (i / EXTRA.len()) as f64 * 0.5;
        bank.push(make_aux_kernel(r, c, sigma).expect("odd sizes"));
        i += 1;
    }
    bank.truncate(k);
    bank
}
