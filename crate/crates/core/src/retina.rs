//! Variable-resolution retina layouts and their placement-specific linear
//! sampling operators.
//!
//! A layout is a square grid tiled by concentric rings of square cells that
//! get finer towards the centre. Placing the layout on an image at an integer
//! offset yields a sparse row-stochastic operator: every active cell reports
//! the mean of the pixels it covers. Cells that stick out of the image are
//! inactive and simply dropped from the glimpse vector.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Description of a retina: side length in pixels, rings as
/// `(cell_size, thickness)` from the outside in, and the cell size used to
/// tile whatever is left in the middle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetinaSpec {
    pub grid_side: usize,
    #[serde(default)]
    pub rings: Vec<(usize, usize)>,
    #[serde(default = "default_center_cell")]
    pub center_cell: usize,
}

fn default_center_cell() -> usize {
    1
}

impl Default for RetinaSpec {
    /// The 20 × 20 grid: a ring of 4 × 4 cells, a ring of 2 × 2 cells and an
    /// 8 × 8 fovea of single pixels (100 cells).
    fn default() -> Self {
        Self {
            grid_side: 20,
            rings: vec![(4, 4), (2, 2)],
            center_cell: 1,
        }
    }
}

impl RetinaSpec {
    pub fn uniform(side: usize) -> Self {
        Self {
            grid_side: side,
            rings: Vec::new(),
            center_cell: 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("retina spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Side of the residual centre block.
    fn residual(&self) -> Result<usize> {
        let used: usize = self.rings.iter().map(|&(_, t)| 2 * t).sum();
        if used > self.grid_side {
            return Err(Error::Tiling(format!(
                "rings consume {used} pixels of a {}-pixel side",
                self.grid_side
            )));
        }
        Ok(self.grid_side - used)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side == 0 {
            return Err(Error::Tiling("grid_side must be positive".into()));
        }
        if self.center_cell == 0 {
            return Err(Error::Tiling("center_cell must be positive".into()));
        }
        let mut side = self.grid_side;
        let mut prev = usize::MAX;
        for (i, &(cell, thick)) in self.rings.iter().enumerate() {
            if cell == 0 || thick == 0 {
                return Err(Error::Tiling(format!("ring {i} has zero cell size or thickness")));
            }
            if cell > prev {
                return Err(Error::Tiling(format!(
                    "ring {i} cell size {cell} exceeds the enclosing ring's {prev}"
                )));
            }
            if thick % cell != 0 {
                return Err(Error::Tiling(format!(
                    "ring {i} thickness {thick} is not a multiple of its cell size {cell}"
                )));
            }
            if !side.is_multiple_of(cell) {
                return Err(Error::Tiling(format!(
                    "ring {i} outer side {side} is not a multiple of its cell size {cell}"
                )));
            }
            if 2 * thick > side {
                return Err(Error::Tiling(format!(
                    "ring {i} thickness {thick} overflows remaining side {side}"
                )));
            }
            side -= 2 * thick;
            prev = cell;
        }
        let residual = self.residual()?;
        if self.center_cell > prev && residual > 0 {
            return Err(Error::Tiling(format!(
                "center cell {} exceeds innermost ring cell {prev}",
                self.center_cell
            )));
        }
        if residual % self.center_cell != 0 {
            return Err(Error::Tiling(format!(
                "residual centre of side {residual} is not a multiple of the centre cell {}",
                self.center_cell
            )));
        }
        Ok(())
    }
}

/// A single receptive field in grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub row0: usize,
    pub col0: usize,
    pub size: usize,
}

/// Enumerated cells of a layout: outer ring first, centre last, each block in
/// row-major order of the cells' top-left corners.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellLayout {
    pub grid_side: usize,
    pub cells: Vec<Cell>,
}

impl CellLayout {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn area(&self) -> usize {
        self.cells.iter().map(|c| c.size * c.size).sum()
    }
}

fn block_cells(inset: usize, side: usize, cell: usize, hole: Option<(usize, usize)>) -> Vec<Cell> {
    // cells of size `cell` tiling [inset, inset+side)² minus the square hole
    // [h0, h1)² (grid coordinates)
    let mut out = Vec::new();
    let mut r = inset;
    while r < inset + side {
        let mut c = inset;
        while c < inset + side {
            let inside_hole = hole.is_some_and(|(h0, h1)| r >= h0 && r < h1 && c >= h0 && c < h1);
            if !inside_hole {
                out.push(Cell {
                    row0: r,
                    col0: c,
                    size: cell,
                });
            }
            c += cell;
        }
        r += cell;
    }
    out
}

pub fn build_layout(spec: &RetinaSpec) -> Result<CellLayout> {
    spec.validate()?;
    let mut cells = Vec::new();
    let mut inset = 0;
    let mut side = spec.grid_side;
    for &(cell, thick) in &spec.rings {
        let hole = (inset + thick, inset + side - thick);
        cells.extend(block_cells(inset, side, cell, Some(hole)));
        inset += thick;
        side -= 2 * thick;
    }
    if side > 0 {
        cells.extend(block_cells(inset, side, spec.center_cell, None));
    }
    let layout = CellLayout {
        grid_side: spec.grid_side,
        cells,
    };
    let area = layout.area();
    if area != spec.grid_side * spec.grid_side {
        return Err(Error::Tiling(format!(
            "cells cover {area} pixels, grid has {}",
            spec.grid_side * spec.grid_side
        )));
    }
    Ok(layout)
}

/// Integer shift of the retina relative to its home placement over the
/// top-left corner of the image. Serialized as `[dr, dc]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Offset {
    pub dr: i32,
    pub dc: i32,
}

impl Offset {
    pub const HOME: Offset = Offset { dr: 0, dc: 0 };

    pub fn new(dr: i32, dc: i32) -> Self {
        Self { dr, dc }
    }
}

impl From<[i32; 2]> for Offset {
    fn from(v: [i32; 2]) -> Self {
        Self { dr: v[0], dc: v[1] }
    }
}

impl From<Offset> for [i32; 2] {
    fn from(o: Offset) -> Self {
        [o.dr, o.dc]
    }
}

impl std::fmt::Display for Offset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{}]", self.dr, self.dc)
    }
}

/// Cartesian product of row and column shifts, rows outermost.
pub fn enumerate_offsets(row_offsets: &[i32], col_offsets: &[i32]) -> Vec<Offset> {
    row_offsets
        .iter()
        .flat_map(|&dr| col_offsets.iter().map(move |&dc| Offset::new(dr, dc)))
        .collect()
}

/// The 35 offsets used for 28 × 20 face images.
pub fn frey_offsets() -> Vec<Offset> {
    enumerate_offsets(&[-8, -4, 0, 4, 8, 12, 16], &[-8, -4, 0, 4, 8])
}

/// The 36 offsets used for 28 × 28 digits.
pub fn mnist_offsets() -> Vec<Offset> {
    let s = [-4, 0, 4, 8, 12, 16];
    enumerate_offsets(&s, &s)
}

/// Sparse operator `V` for one placement of a layout on an image.
#[derive(Debug, Clone, PartialEq)]
pub struct RetinalTransform {
    rows: usize,
    cols: usize,
    offset: Offset,
    /// Per layout cell.
    active: Vec<bool>,
    /// CSR over active cells.
    row_ptr: Vec<usize>,
    pixels: Vec<usize>,
    weights: Vec<f64>,
    sizes: Vec<usize>,
}

pub fn place(layout: &CellLayout, image_rows: usize, image_cols: usize, offset: Offset) -> RetinalTransform {
    let mut active = Vec::with_capacity(layout.len());
    let mut row_ptr = vec![0];
    let mut pixels = Vec::new();
    let mut weights = Vec::new();
    let mut sizes = Vec::new();
    for cell in &layout.cells {
        let r0 = cell.row0 as i64 + offset.dr as i64;
        let c0 = cell.col0 as i64 + offset.dc as i64;
        let s = cell.size as i64;
        let inside = r0 >= 0 && c0 >= 0 && r0 + s <= image_rows as i64 && c0 + s <= image_cols as i64;
        active.push(inside);
        if !inside {
            continue;
        }
        for r in r0..r0 + s {
            for c in c0..c0 + s {
                pixels.push(r as usize * image_cols + c as usize);
            }
        }
        row_ptr.push(pixels.len());
        weights.push(1.0 / (s * s) as f64);
        sizes.push(cell.size);
    }
    let rt = RetinalTransform {
        rows: image_rows,
        cols: image_cols,
        offset,
        active,
        row_ptr,
        pixels,
        weights,
        sizes,
    };
    if rt.is_blind() {
        log::warn!("retina placement at offset {offset} has no active cells");
    }
    rt
}

/// Glimpse upsampled back to image space.
#[derive(Debug, Clone, PartialEq)]
pub struct Upsampled {
    pub image: Vec<f64>,
    pub missing: Vec<bool>,
}

impl Upsampled {
    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }
}

impl RetinalTransform {
    pub fn image_dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn offset(&self) -> Offset {
        self.offset
    }

    /// Active flag per layout cell.
    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    /// `D^y`, the glimpse length.
    pub fn active_count(&self) -> usize {
        self.weights.len()
    }

    /// True when no cell lies fully inside the image.
    pub fn is_blind(&self) -> bool {
        self.active_count() == 0
    }

    /// Pixel indices feeding active row `r`.
    pub fn row_pixels(&self, r: usize) -> &[usize] {
        &self.pixels[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn row_weight(&self, r: usize) -> f64 {
        self.weights[r]
    }

    pub fn cell_size(&self, r: usize) -> usize {
        self.sizes[r]
    }

    /// `y = V x`.
    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim("retina apply", self.pixel_count(), x.len())?;
        Ok(DVector::from_iterator(
            self.active_count(),
            (0..self.active_count())
                .map(|r| self.row_weight(r) * self.row_pixels(r).iter().map(|&p| x[p]).sum::<f64>()),
        ))
    }

    /// `V A` for a `D × K` matrix `A`.
    pub fn apply_matrix(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("retina apply_matrix", self.pixel_count(), a.nrows())?;
        let mut out = DMatrix::zeros(self.active_count(), a.ncols());
        for r in 0..self.active_count() {
            let w = self.row_weight(r);
            for &p in self.row_pixels(r) {
                for k in 0..a.ncols() {
                    out[(r, k)] += w * a[(p, k)];
                }
            }
        }
        Ok(out)
    }

    /// `Vᵀ B` for a `D^y × K` matrix `B`.
    pub fn transpose_apply_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("retina transpose_apply", self.active_count(), b.nrows())?;
        let mut out = DMatrix::zeros(self.pixel_count(), b.ncols());
        for r in 0..self.active_count() {
            let w = self.row_weight(r);
            for &p in self.row_pixels(r) {
                for k in 0..b.ncols() {
                    out[(p, k)] += w * b[(r, k)];
                }
            }
        }
        Ok(out)
    }

    /// Dense `D^y × D` matrix; meant for small oracles.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(self.active_count(), self.pixel_count());
        for r in 0..self.active_count() {
            for &p in self.row_pixels(r) {
                v[(r, p)] = self.row_weight(r);
            }
        }
        v
    }

    /// Give every covered pixel its cell's value; everything else is missing.
    pub fn upsample(&self, y: &[f64]) -> Result<Upsampled> {
        check_dim("retina upsample", self.active_count(), y.len())?;
        let mut image = vec![0.0; self.pixel_count()];
        let mut missing = vec![true; self.pixel_count()];
        for (r, &v) in y.iter().enumerate() {
            for &p in self.row_pixels(r) {
                image[p] = v;
                missing[p] = false;
            }
        }
        Ok(Upsampled { image, missing })
    }

    /// Mask of pixels covered by some active cell.
    pub fn coverage(&self) -> Vec<bool> {
        let mut cov = vec![false; self.pixel_count()];
        for &p in &self.pixels {
            cov[p] = true;
        }
        cov
    }
}

/// All placements for a layout and offset table.
pub fn place_all(layout: &CellLayout, rows: usize, cols: usize, offsets: &[Offset]) -> Vec<RetinalTransform> {
    offsets.iter().map(|&o| place(layout, rows, cols, o)).collect()
}

/// Identity placement used to condition on a whole image: every pixel is its
/// own active cell.
pub fn identity_transform(rows: usize, cols: usize) -> RetinalTransform {
    let n = rows * cols;
    RetinalTransform {
        rows,
        cols,
        offset: Offset::HOME,
        active: vec![true; n],
        row_ptr: (0..=n).collect(),
        pixels: (0..n).collect(),
        weights: vec![1.0; n],
        sizes: vec![1; n],
    }
}
