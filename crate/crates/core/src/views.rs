//! Two-view sampling: independent random crops with intensity jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::volume::{Grid3, VolumeSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Crop edge in voxels.
    pub crop_size: usize,
    /// Normalize each crop to zero mean and unit variance before jitter.
    pub normalize: bool,
    /// Intensity jitter; disabled jitter leaves the (normalized) crop as is.
    pub jitter: bool,
    /// Additive shift drawn from `[-max_shift, max_shift]`.
    pub max_shift: f64,
    /// Multiplicative scale drawn from `[1 - max_scale, 1 + max_scale]`.
    pub max_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_size: 32,
            normalize: true,
            jitter: true,
            max_shift: 0.1,
            max_scale: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(invalid("crop_size must be positive"));
        }
        if !(self.max_shift >= 0.0 && self.max_scale >= 0.0 && self.max_scale < 1.0) {
            return Err(invalid("jitter ranges must satisfy max_shift >= 0 and 0 <= max_scale < 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewProvenance {
    pub offset: [usize; 3],
    pub shift: f64,
    pub scale: f64,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair<T> {
    pub u: Grid3<T>,
    pub v: Grid3<T>,
    pub provenance: [ViewProvenance; 2],
}

/// Zero-mean, unit-variance copy; constant grids are only centred.
pub fn normalize<T: Scalar>(g: &Grid3<T>) -> Grid3<T> {
    let n = g.len().max(1) as f64;
    let mean = g.data().iter().map(|x| x.as_f64()).sum::<f64>() / n;
    let var = g.data().iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    g.map(|x| T::lit((x.as_f64() - mean) * inv))
}

/// Draws one crop with its augmentation.
pub fn sample_view<T: Scalar, R: Rng + ?Sized>(
    volume: &VolumeSample<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Grid3<T>, ViewProvenance)> {
    let dims = volume.dims();
    let c = cfg.crop_size;
    if dims.iter().any(|&d| d < c) {
        return Err(invalid(format!("crop {c} larger than volume {dims:?}")));
    }
    let mut offset = [0usize; 3];
    for a in 0..3 {
        offset[a] = rng.gen_range(0..=dims[a] - c);
    }
    let (shift, scale) = if cfg.jitter {
        (
            if cfg.max_shift > 0.0 { rng.gen_range(-cfg.max_shift..=cfg.max_shift) } else { 0.0 },
            if cfg.max_scale > 0.0 { rng.gen_range(1.0 - cfg.max_scale..=1.0 + cfg.max_scale) } else { 1.0 },
        )
    } else {
        (0.0, 1.0)
    };
    let mut crop = volume.voxels.crop(offset, [c, c, c])?;
    if cfg.normalize {
        crop = normalize(&crop);
    }
    if cfg.jitter {
        let (s, k) = (T::lit(shift), T::lit(scale));
        crop.data_mut().iter_mut().for_each(|x| *x = *x * k + s);
    }
    Ok((
        crop,
        ViewProvenance {
            offset,
            shift,
            scale,
            normalized: cfg.normalize,
        },
    ))
}

/// Two independently positioned and augmented crops of `volume`.
pub fn sample_views<T: Scalar, R: Rng + ?Sized>(
    volume: &VolumeSample<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<ViewPair<T>> {
    cfg.validate()?;
    let (u, pu) = sample_view(volume, cfg, rng)?;
    let (v, pv) = sample_view(volume, cfg, rng)?;
    Ok(ViewPair {
        u,
        v,
        provenance: [pu, pv],
    })
}

/// Deterministic centre crop (evaluation path: no jitter).
pub fn center_crop<T: Scalar>(volume: &VolumeSample<T>, size: usize, normalize_crop: bool) -> Result<VolumeSample<T>> {
    let dims = volume.dims();
    if dims.iter().any(|&d| d < size) {
        return Err(invalid(format!("crop {size} larger than volume {dims:?}")));
    }
    let origin = [(dims[0] - size) / 2, (dims[1] - size) / 2, (dims[2] - size) / 2];
    let mut voxels = volume.voxels.crop(origin, [size; 3])?;
    if normalize_crop {
        voxels = normalize(&voxels);
    }
    let roi = match &volume.roi {
        Some(r) => Some(r.crop(origin, [size; 3])?),
        None => None,
    };
    VolumeSample::new(voxels, volume.spacing, volume.label, roi)
}
