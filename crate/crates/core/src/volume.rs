//! 3D scalar volumes, resampling, and on-disk formats.
//!
//! Axis order everywhere is `(d, h, w)` with `w` varying fastest.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, shape, Error, Result};
use crate::scalar::Scalar;

/// Dense 3D grid in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<E> {
    dims: [usize; 3],
    data: Vec<E>,
}

impl<E: Copy> Grid3<E> {
    pub fn new(dims: [usize; 3], data: Vec<E>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(shape(format!(
                "grid dims {dims:?} need {} elements, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Grid3 { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: E) -> Self {
        Grid3 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn at(&self, d: usize, h: usize, w: usize) -> E {
        self.data[self.offset(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: E) {
        let o = self.offset(d, h, w);
        self.data[o] = v;
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Copies the box starting at `origin` with extent `size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if origin[a] + size[a] > self.dims[a] {
                return Err(invalid(format!(
                    "crop {size:?} at {origin:?} exceeds grid {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for d in 0..size[0] {
            for h in 0..size[1] {
                let start = self.offset(origin[0] + d, origin[1] + h, origin[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Ok(Grid3 { dims: size, data })
    }

    pub fn map<F: Copy>(&self, f: impl Fn(E) -> F) -> Grid3<F> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl<T: Scalar> Grid3<T> {
    /// Trilinear sample at a continuous voxel coordinate, clamped to the grid.
    pub fn trilinear(&self, pos: [f64; 3]) -> T {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut fr = [0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let p = pos[a].clamp(0.0, (n - 1) as f64);
            let f = p.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(n - 1);
            fr[a] = p - f;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let pick = |a: usize| (corner >> (2 - a)) & 1 == 1;
            let mut wgt = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                if pick(a) {
                    wgt *= fr[a];
                    idx[a] = hi[a];
                } else {
                    wgt *= 1.0 - fr[a];
                    idx[a] = lo[a];
                }
            }
            if wgt != 0.0 {
                acc += wgt * self.at(idx[0], idx[1], idx[2]).as_f64();
            }
        }
        T::lit(acc)
    }
}

/// A scanned or synthetic volume with physical spacing and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample<T> {
    pub voxels: Grid3<T>,
    /// Millimetres per voxel along `(d, h, w)`.
    pub spacing: [f64; 3],
    pub label: Option<u32>,
    pub roi: Option<Grid3<bool>>,
}

impl<T: Scalar> VolumeSample<T> {
    pub fn new(voxels: Grid3<T>, spacing: [f64; 3], label: Option<u32>, roi: Option<Grid3<bool>>) -> Result<Self> {
        let v = VolumeSample {
            voxels,
            spacing,
            label,
            roi,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if let Some(roi) = &self.roi {
            if roi.dims() != self.voxels.dims() {
                return Err(shape(format!(
                    "roi dims {:?} differ from voxel dims {:?}",
                    roi.dims(),
                    self.voxels.dims()
                )));
            }
        }
        if self.voxels.data().iter().any(|x| !x.is_finite()) {
            return Err(invalid("volume contains non-finite intensities"));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.voxels.dims()
    }

    /// Trilinear resampling to `target` spacing. Output voxel `i` samples
    /// input coordinate `i·target/spacing`; the ROI is resampled the same
    /// way and thresholded at one half.
    pub fn resample(&self, target: [f64; 3]) -> Result<Self> {
        if target.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid(format!("target spacing must be positive, got {target:?}")));
        }
        self.validate()?;
        let src = self.voxels.dims();
        let mut out_dims = [0usize; 3];
        let mut step = [0f64; 3];
        for a in 0..3 {
            step[a] = target[a] / self.spacing[a];
            out_dims[a] = ((src[a] as f64 * self.spacing[a] / target[a]).round() as usize).max(1);
        }
        if out_dims == src && step == [1.0; 3] {
            return Ok(self.clone());
        }
        let roi_f = self.roi.as_ref().map(|r| r.map(|b| if b { 1.0f64 } else { 0.0 }));
        let mut vox = Vec::with_capacity(out_dims.iter().product());
        let mut roi = Vec::new();
        for d in 0..out_dims[0] {
            for h in 0..out_dims[1] {
                for w in 0..out_dims[2] {
                    let p = [d as f64 * step[0], h as f64 * step[1], w as f64 * step[2]];
                    vox.push(self.voxels.trilinear(p));
                    if let Some(rf) = &roi_f {
                        roi.push(rf.trilinear(p) >= 0.5);
                    }
                }
            }
        }
        VolumeSample::new(
            Grid3::new(out_dims, vox)?,
            target,
            self.label,
            if roi_f.is_some() { Some(Grid3::new(out_dims, roi)?) } else { None },
        )
    }

    pub fn cast<U: Scalar>(&self) -> VolumeSample<U> {
        VolumeSample {
            voxels: self.voxels.map(|x| U::lit(x.as_f64())),
            spacing: self.spacing,
            label: self.label,
            roi: self.roi.clone(),
        }
    }
}

pub const RAW_MAGIC: &[u8; 8] = b"SMRTVOL1";
pub const RAW_HEADER_LEN: usize = 48;
const NO_LABEL: u32 = u32::MAX;

/// Encodes the raw volume format: 48-byte header (magic, 3×u32 dims,
/// 3×f32 spacing, u32 label, u32 roi flag, 8 reserved zero bytes), then
/// little-endian f32 voxels, then one byte per voxel of ROI when flagged.
pub fn encode_raw<T: Scalar>(v: &VolumeSample<T>) -> Vec<u8> {
    let dims = v.dims();
    let n = v.voxels.len();
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + 4 * n + n);
    out.extend_from_slice(RAW_MAGIC);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out.extend_from_slice(&v.label.unwrap_or(NO_LABEL).to_le_bytes());
    out.extend_from_slice(&(v.roi.is_some() as u32).to_le_bytes());
    out.extend_from_slice(&[0u8; 8]);
    debug_assert_eq!(out.len(), RAW_HEADER_LEN);
    for &x in v.voxels.data() {
        out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    if let Some(roi) = &v.roi {
        out.extend(roi.data().iter().map(|&b| b as u8));
    }
    out
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], o: usize) -> f32 {
    f32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

pub fn decode_raw<T: Scalar>(bytes: &[u8]) -> Result<VolumeSample<T>> {
    if bytes.len() < RAW_HEADER_LEN || &bytes[..8] != RAW_MAGIC {
        return Err(Error::Format("missing SMRTVOL1 header".into()));
    }
    let dims = [u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize];
    let spacing = [f32_at(bytes, 20) as f64, f32_at(bytes, 24) as f64, f32_at(bytes, 28) as f64];
    let label = match u32_at(bytes, 32) {
        NO_LABEL => None,
        l => Some(l),
    };
    let has_roi = match u32_at(bytes, 36) {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad roi flag {f}"))),
    };
    let n: usize = dims.iter().product();
    let need = RAW_HEADER_LEN + 4 * n + if has_roi { n } else { 0 };
    if bytes.len() != need {
        return Err(Error::Format(format!(
            "raw volume {dims:?} needs {need} bytes, file has {}",
            bytes.len()
        )));
    }
    let vox = (0..n)
        .map(|i| T::lit(f32_at(bytes, RAW_HEADER_LEN + 4 * i) as f64))
        .collect();
    let roi = if has_roi {
        let start = RAW_HEADER_LEN + 4 * n;
        Some(Grid3::new(dims, bytes[start..start + n].iter().map(|&b| b != 0).collect())?)
    } else {
        None
    };
    VolumeSample::new(Grid3::new(dims, vox)?, spacing, label, roi)
}

pub fn write_raw<T: Scalar>(v: &VolumeSample<T>, path: &Path) -> Result<()> {
    let bytes = encode_raw(v);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a volume in either supported format, chosen by content.
pub fn read_volume<T: Scalar>(path: &Path) -> Result<VolumeSample<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(RAW_MAGIC) {
        decode_raw(&bytes)
    } else {
        decode_nifti(&bytes)
    }
}

/// Reads a volume and resamples it to `target_spacing` (mm per axis).
pub fn ingest_volume<T: Scalar>(path: &Path, target_spacing: [f64; 3]) -> Result<VolumeSample<T>> {
    if target_spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(invalid(format!("target spacing must be positive, got {target_spacing:?}")));
    }
    read_volume::<T>(path)?.resample(target_spacing)
}

const NIFTI_HDR: usize = 348;

/// Decodes a single-file NIfTI-1 image (`n+1`). NIfTI stores x fastest, so
/// `(nx, ny, nz)` maps to `(w, h, d)`.
pub fn decode_nifti<T: Scalar>(bytes: &[u8]) -> Result<VolumeSample<T>> {
    if bytes.len() < NIFTI_HDR {
        return Err(Error::Format("file too short for a NIfTI-1 header".into()));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == NIFTI_HDR as i32;
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == NIFTI_HDR as i32;
    if !le && !be {
        return Err(Error::Format("not a NIfTI-1 file (sizeof_hdr != 348)".into()));
    }
    if &bytes[344..347] != b"n+1" {
        return Err(Error::Format("only single-file NIfTI-1 (n+1) is supported".into()));
    }
    let i16_at = |o: usize| {
        let a: [u8; 2] = bytes[o..o + 2].try_into().unwrap();
        if le { i16::from_le_bytes(a) } else { i16::from_be_bytes(a) }
    };
    let f32_at = |o: usize| {
        let a: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
        if le { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }
    };
    let ndim = i16_at(40);
    if !(3..=4).contains(&ndim) {
        return Err(Error::Format(format!("expected a 3D volume, header has {ndim} dims")));
    }
    let nx = i16_at(42);
    let ny = i16_at(44);
    let nz = i16_at(46);
    if ndim == 4 && i16_at(48) > 1 {
        return Err(Error::Format("4D NIfTI with more than one frame".into()));
    }
    if nx <= 0 || ny <= 0 || nz <= 0 {
        return Err(Error::Format("non-positive NIfTI dimension".into()));
    }
    let datatype = i16_at(70);
    let spacing = [f32_at(88) as f64, f32_at(84) as f64, f32_at(80) as f64];
    let offset = f32_at(108) as usize;
    let mut slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let n = nx as usize * ny as usize * nz as usize;
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(Error::Format(format!("unsupported NIfTI datatype {other}"))),
    };
    if offset < NIFTI_HDR || bytes.len() < offset + n * width {
        return Err(Error::Format("NIfTI data shorter than header declares".into()));
    }
    let data = &bytes[offset..offset + n * width];
    let read = |i: usize| -> f64 {
        let s = &data[i * width..(i + 1) * width];
        macro_rules! num {
            ($t:ty) => {{
                let a = s.try_into().unwrap();
                (if le { <$t>::from_le_bytes(a) } else { <$t>::from_be_bytes(a) }) as f64
            }};
        }
        match datatype {
            2 => s[0] as f64,
            256 => s[0] as i8 as f64,
            4 => num!(i16),
            512 => num!(u16),
            8 => num!(i32),
            768 => num!(u32),
            16 => num!(f32),
            _ => num!(f64),
        }
    };
    let vox = (0..n).map(|i| T::lit(read(i) * slope + inter)).collect();
    let dims = [nz as usize, ny as usize, nx as usize];
    let spacing = spacing.map(|s| if s > 0.0 { s } else { 1.0 });
    VolumeSample::new(Grid3::new(dims, vox)?, spacing, None, None)
}

/// Encodes a float32 single-file NIfTI-1 image.
pub fn encode_nifti<T: Scalar>(v: &VolumeSample<T>) -> Vec<u8> {
    let [d, h, w] = v.dims();
    let mut hdr = vec![0u8; 352];
    hdr[0..4].copy_from_slice(&(NIFTI_HDR as i32).to_le_bytes());
    let dim: [i16; 8] = [3, w as i16, h as i16, d as i16, 1, 1, 1, 1];
    for (i, x) in dim.iter().enumerate() {
        hdr[40 + 2 * i..42 + 2 * i].copy_from_slice(&x.to_le_bytes());
    }
    hdr[70..72].copy_from_slice(&16i16.to_le_bytes());
    hdr[72..74].copy_from_slice(&32i16.to_le_bytes());
    let pix: [f32; 4] = [1.0, v.spacing[2] as f32, v.spacing[1] as f32, v.spacing[0] as f32];
    for (i, x) in pix.iter().enumerate() {
        hdr[76 + 4 * i..80 + 4 * i].copy_from_slice(&x.to_le_bytes());
    }
    hdr[108..112].copy_from_slice(&352f32.to_le_bytes());
    hdr[112..116].copy_from_slice(&1f32.to_le_bytes());
    hdr[344..348].copy_from_slice(b"n+1\0");
    for &x in v.voxels.data() {
        hdr.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    hdr
}
