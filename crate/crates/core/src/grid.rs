//! Metric-to-cell mapping for the BEV plane and 3-D voxels.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

/// Regular BEV grid over `[x_min, x_max] x [y_min, y_max]`.
///
/// Tensors on this grid are laid out `[C, rows, cols]` with rows along `y`
/// and columns along `x`. Cells are half-open `[edge, edge + step)` except
/// the last cell on each axis, which also contains the upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub rows: usize,
    pub cols: usize,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self::square(51.2, 32)
    }
}

impl BevGridSpec {
    /// Square grid over `[-half, half]^2` with `n x n` cells.
    pub fn square(half: f64, n: usize) -> Self {
        Self {
            x_min: -half,
            x_max: half,
            y_min: -half,
            y_max: half,
            rows: n,
            cols: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return arg(format!("invalid BEV range {self:?}"));
        }
        if self.rows == 0 || self.cols == 0 {
            return arg("BEV grid needs at least one cell per axis");
        }
        Ok(())
    }

    pub fn cell_w(&self) -> f64 {
        (self.x_max - self.x_min) / self.cols as f64
    }

    pub fn cell_h(&self) -> f64 {
        (self.y_max - self.y_min) / self.rows as f64
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// `(row, col)` containing the metric point, or `None` when outside.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = axis_index(x, self.x_min, self.x_max, self.cols)?;
        let row = axis_index(y, self.y_min, self.y_max, self.rows)?;
        Some((row, col))
    }

    pub fn flat_cell_of(&self, x: f64, y: f64) -> Option<usize> {
        self.cell_of(x, y).map(|(r, c)| r * self.cols + c)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.cell_w(),
            self.y_min + (row as f64 + 0.5) * self.cell_h(),
        )
    }

    /// The same grid shifted by one cell along `x`; used as a mutation
    /// fixture for the oracle suite.
    pub fn shifted_one_cell(&self) -> Self {
        let w = self.cell_w();
        Self {
            x_min: self.x_min + w,
            x_max: self.x_max + w,
            ..*self
        }
    }
}

fn axis_index(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let step = (hi - lo) / n as f64;
    let i = ((v - lo) / step).floor() as usize;
    Some(i.min(n - 1))
}

/// Voxel partition of 3-D space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelSpec {
    pub size: [f64; 3],
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for VoxelSpec {
    fn default() -> Self {
        Self {
            size: [0.1, 0.1, 0.2],
            z_min: -5.0,
            z_max: 3.0,
        }
    }
}

impl VoxelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return arg(format!("voxel extents must be positive, got {:?}", self.size));
        }
        if !(self.z_max > self.z_min) {
            return arg("voxel z range is empty");
        }
        Ok(())
    }

    /// Integer voxel key of a point, anchored at the BEV grid origin and
    /// `z_min`. `None` when the point lies outside the vertical range.
    pub fn key(&self, grid: &BevGridSpec, x: f64, y: f64, z: f64) -> Option<[i64; 3]> {
        if !(z >= self.z_min && z <= self.z_max) {
            return None;
        }
        Some([
            ((x - grid.x_min) / self.size[0]).floor() as i64,
            ((y - grid.y_min) / self.size[1]).floor() as i64,
            ((z - self.z_min) / self.size[2]).floor() as i64,
        ])
    }

    pub fn center(&self, grid: &BevGridSpec, key: [i64; 3]) -> [f64; 3] {
        [
            grid.x_min + (key[0] as f64 + 0.5) * self.size[0],
            grid.y_min + (key[1] as f64 + 0.5) * self.size[1],
            self.z_min + (key[2] as f64 + 0.5) * self.size[2],
        ]
    }
}
