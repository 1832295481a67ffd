use crate::error::{Error, Result};

/// Top-left origins of square patches covering an `height x width` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
    pub row_origins: Vec<usize>,
    pub col_origins: Vec<usize>,
}

impl PatchGrid {
    /// Row-major `(row, col)` origins.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        self.row_origins
            .iter()
            .flat_map(|&r| self.col_origins.iter().map(move |&c| (r, c)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.row_origins.len() * self.col_origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=extent - patch).step_by(stride).collect();
    if v.last().is_some_and(|&o| o + patch < extent) {
        v.push(extent - patch);
    }
    v
}

/// Origins at `0, stride, 2 stride, ...` per axis, plus an edge-snapped
/// origin at `extent - patch_size` when the last one leaves pixels uncovered.
pub fn tile_image(height: usize, width: usize, patch_size: usize, stride: usize) -> Result<PatchGrid> {
    if patch_size == 0 || patch_size > height.min(width) {
        return Err(Error::dim(format!("patch {patch_size} does not fit a {height}x{width} image")));
    }
    if stride == 0 || stride > patch_size {
        return Err(Error::config(format!("stride {stride} must be in 1..={patch_size} to cover the image")));
    }
    Ok(PatchGrid {
        patch_size,
        height,
        width,
        row_origins: axis_origins(height, patch_size, stride),
        col_origins: axis_origins(width, patch_size, stride),
    })
}
