use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::Grid3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenLevel {
    Input,
    Stage3,
}

/// A sequence of `N = d·h·w` tokens in raster order over a 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T> {
    /// `[N, D]`.
    pub tokens: Tensor<T>,
    pub grid_dims: [usize; 3],
    /// Voxels per token edge.
    pub patch_size: usize,
    pub level: TokenLevel,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn new(tokens: Tensor<T>, grid_dims: [usize; 3], patch_size: usize, level: TokenLevel) -> Result<Self> {
        let n: usize = grid_dims.iter().product();
        if tokens.shape().len() != 2 || tokens.rows() != n {
            return Err(shape(format!(
                "token matrix {:?} does not match grid {grid_dims:?}",
                tokens.shape()
            )));
        }
        if tokens.cols() == 0 {
            return Err(shape("token width must be positive"));
        }
        Ok(TokenGrid {
            tokens,
            grid_dims,
            patch_size,
            level,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// Splits a crop into non-overlapping `p³` voxel blocks, one raw token per
/// block; the learned patch embedding is applied by the encoder.
pub fn patchify<T: Scalar>(view: &Grid3<T>, patch_size: usize) -> Result<TokenGrid<T>> {
    let dims = view.dims();
    let p = patch_size;
    if p == 0 || dims.iter().any(|&d| d % p != 0 || d == 0) {
        return Err(shape(format!("crop {dims:?} not divisible by patch size {p}")));
    }
    let g = [dims[0] / p, dims[1] / p, dims[2] / p];
    let width = p * p * p;
    let mut data = Vec::with_capacity(view.len());
    for gd in 0..g[0] {
        for gh in 0..g[1] {
            for gw in 0..g[2] {
                for i in 0..p {
                    for j in 0..p {
                        for k in 0..p {
                            data.push(view.at(gd * p + i, gh * p + j, gw * p + k));
                        }
                    }
                }
            }
        }
    }
    TokenGrid::new(
        Tensor::new([g.iter().product(), width], data),
        g,
        p,
        TokenLevel::Input,
    )
}

/// Inverse of [`patchify`] for raw (unembedded) tokens.
pub fn unpatchify<T: Scalar>(tg: &TokenGrid<T>) -> Result<Grid3<T>> {
    let p = tg.patch_size;
    if tg.width() != p * p * p {
        return Err(shape(format!("token width {} is not {p}³", tg.width())));
    }
    let g = tg.grid_dims;
    let dims = [g[0] * p, g[1] * p, g[2] * p];
    let mut out = Grid3::filled(dims, T::zero());
    let data = tg.tokens.data();
    let mut t = 0;
    for gd in 0..g[0] {
        for gh in 0..g[1] {
            for gw in 0..g[2] {
                for i in 0..p {
                    for j in 0..p {
                        for k in 0..p {
                            out.set(gd * p + i, gh * p + j, gw * p + k, data[t]);
                            t += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// For a grid of `cells` cells each covering `block³` voxels, the voxel
/// raster index of every (cell, in-cell) position, cell-major.
pub fn block_layout(cells: [usize; 3], block: usize) -> Vec<u32> {
    let dims = [cells[0] * block, cells[1] * block, cells[2] * block];
    let mut out = Vec::with_capacity(dims.iter().product());
    for cd in 0..cells[0] {
        for ch in 0..cells[1] {
            for cw in 0..cells[2] {
                for i in 0..block {
                    for j in 0..block {
                        for k in 0..block {
                            let (d, h, w) = (cd * block + i, ch * block + j, cw * block + k);
                            out.push(((d * dims[1] + h) * dims[2] + w) as u32);
                        }
                    }
                }
            }
        }
    }
    out
}
