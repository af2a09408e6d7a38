//! Oriented-gradient feature grids, pyramids, window extraction and PCA.

mod hog;
mod pca;
mod raster;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::map::Map2;

pub use hog::{
    build_pyramid, compute_features, warp_to_canonical, FeaturePyramid, CLIP_MAX, FEATURE_DIM,
    NUM_ORIENTATIONS,
};
pub use pca::{pca_reduce, PcaOutput};
pub use raster::{load_raster, Raster};

/// Default pixels per cell.
pub const DEFAULT_CELL_SIZE: usize = 8;

/// Dense per-cell descriptor array (`rows x cols x dim`, row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    cell_size: usize,
    scale: f64,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        dim: usize,
        cell_size: usize,
        scale: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::Size(format!(
                "feature grid must be non-empty, got {rows}x{cols}x{dim}"
            )));
        }
        if data.len() != rows * cols * dim {
            return Err(Error::Data(format!(
                "feature grid data has {} values, expected {}",
                data.len(),
                rows * cols * dim
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature value {v}")));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            cell_size,
            scale,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            rows,
            cols,
            dim,
            cell_size: DEFAULT_CELL_SIZE,
            scale: 1.0,
            data: vec![0.0; rows * cols * dim],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn cell_size(&self) -> usize {
        self.cell_size
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_cell_size(mut self, cell_size: usize) -> Self {
        self.cell_size = cell_size;
        self
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.cols + col) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// `width` consecutive cells of one row, flattened.
    #[inline]
    pub fn row_span(&self, row: usize, col: usize, width: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.dim;
        &self.data[start..start + width * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Pixel box of the `h x w` cell window at `(row, col)`. Grid cell `(0, 0)`
    /// starts one cell in from the image corner (the trimmed border ring) and
    /// coordinates are divided by the level scale.
    pub fn cell_rect(&self, row: usize, col: usize, h: usize, w: usize) -> Rect {
        let cs = self.cell_size as f64 / self.scale;
        Rect::new(
            (col + 1) as f64 * cs,
            (row + 1) as f64 * cs,
            w as f64 * cs,
            h as f64 * cs,
        )
    }

    /// Pixel size `(width, height)` of the image this grid was computed from.
    pub fn image_extent(&self) -> (f64, f64) {
        let cs = self.cell_size as f64 / self.scale;
        ((self.cols + 2) as f64 * cs, (self.rows + 2) as f64 * cs)
    }

    /// Whether a `h x w` window at `(row, col)` fits inside the grid.
    pub fn contains_window(&self, row: i64, col: i64, h: usize, w: usize) -> bool {
        row >= 0
            && col >= 0
            && row as usize + h <= self.rows
            && col as usize + w <= self.cols
    }

    /// Writes the flat binary dump: `rows, cols, dim, cell_size` as little-endian
    /// u32 followed by row-major little-endian f32 values.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for v in [self.rows, self.cols, self.dim, self.cell_size] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut header = [0u8; 16];
        input
            .read_exact(&mut header)
            .map_err(|e| Error::Data(format!("feature dump header: {e}")))?;
        let field = |i: usize| {
            u32::from_le_bytes([
                header[4 * i],
                header[4 * i + 1],
                header[4 * i + 2],
                header[4 * i + 3],
            ]) as usize
        };
        let (rows, cols, dim, cell_size) = (field(0), field(1), field(2), field(3));
        let n = rows
            .checked_mul(cols)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::Data("feature dump header overflows".into()))?;
        let mut body = vec![0u8; n * 4];
        input
            .read_exact(&mut body)
            .map_err(|e| Error::Data(format!("feature dump body: {e}")))?;
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::new(rows, cols, dim, cell_size, 1.0, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        self.write_binary(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        crate::data_io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_binary(bytes.as_slice())
    }
}

/// Flattened `h x w x dim` descriptor of one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowDescriptor {
    pub values: Vec<f64>,
    pub shape: (usize, usize, usize),
}

impl WindowDescriptor {
    pub fn new(values: Vec<f64>, shape: (usize, usize, usize)) -> Result<Self> {
        if values.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::Data(format!(
                "descriptor length {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(Self { values, shape })
    }
}

/// Accumulates a dot product in four interleaved lanes.
///
/// Every appearance score in the crate goes through this accumulator so that
/// scores reached by different routes (per-window, whole-map, brute force)
/// agree bit-for-bit when they visit the same coefficients in the same order.
#[derive(Clone, Copy, Debug, Default)]
pub struct DotAcc {
    lanes: [f64; 4],
    pos: usize,
}

impl DotAcc {
    #[inline]
    pub fn feed(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), b.len());
        let mut i = 0;
        while self.pos % 4 != 0 && i < a.len() {
            self.lanes[self.pos % 4] += a[i] * b[i];
            self.pos += 1;
            i += 1;
        }
        let a4 = a[i..].chunks_exact(4);
        let b4 = b[i..].chunks_exact(4);
        let rem = a4.remainder().len();
        for (x, y) in a4.zip(b4) {
            self.lanes[0] += x[0] * y[0];
            self.lanes[1] += x[1] * y[1];
            self.lanes[2] += x[2] * y[2];
            self.lanes[3] += x[3] * y[3];
        }
        self.pos += a.len() - i - rem;
        for j in a.len() - rem..a.len() {
            self.lanes[self.pos % 4] += a[j] * b[j];
            self.pos += 1;
        }
    }

    #[inline]
    pub fn finish(&self) -> f64 {
        (self.lanes[0] + self.lanes[1]) + (self.lanes[2] + self.lanes[3])
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = DotAcc::default();
    acc.feed(a, b);
    acc.finish()
}

/// Dot product of a `h x w` filter with the window of `grid` at `(row, col)`.
/// The window must lie inside the grid.
#[inline]
pub fn window_dot(grid: &FeatureGrid, filter: &[f64], row: usize, col: usize, h: usize, w: usize) -> f64 {
    let span = w * grid.dim;
    let mut acc = DotAcc::default();
    for r in 0..h {
        acc.feed(&filter[r * span..(r + 1) * span], grid.row_span(row + r, col, w));
    }
    acc.finish()
}

/// Copies the `h x w` window at `origin = (row, col)` into a flat descriptor.
pub fn extract_window(
    grid: &FeatureGrid,
    origin: (usize, usize),
    h: usize,
    w: usize,
) -> Result<WindowDescriptor> {
    let (row, col) = origin;
    if h == 0 || w == 0 || row + h > grid.rows || col + w > grid.cols {
        return Err(Error::Range(format!(
            "window {h}x{w} at ({row},{col}) outside {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let mut values = Vec::with_capacity(h * w * grid.dim);
    for r in 0..h {
        values.extend_from_slice(grid.row_span(row + r, col, w));
    }
    Ok(WindowDescriptor {
        values,
        shape: (h, w, grid.dim),
    })
}

/// Dense filter response: `out(y, x) = filter . window(y, x)` for every
/// placement of the `h x w` filter that fits in the grid.
pub fn convolve(grid: &FeatureGrid, filter: &[f64], h: usize, w: usize) -> Result<Map2<f64>> {
    if filter.len() != h * w * grid.dim {
        return Err(Error::Data(format!(
            "filter has {} coefficients, expected {}x{}x{}",
            filter.len(),
            h,
            w,
            grid.dim
        )));
    }
    if h == 0 || w == 0 || h > grid.rows || w > grid.cols {
        return Err(Error::Size(format!(
            "{h}x{w} filter does not fit in {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let out_rows = grid.rows - h + 1;
    let out_cols = grid.cols - w + 1;
    let mut out = Map2::filled(out_rows, out_cols, 0.0);
    for y in 0..out_rows {
        let row = out.row_mut(y);
        for (x, v) in row.iter_mut().enumerate() {
            *v = window_dot(grid, filter, y, x, h, w);
        }
    }
    Ok(out)
}
