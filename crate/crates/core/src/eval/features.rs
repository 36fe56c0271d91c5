use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, Role};
use crate::error::{invalid, shape, Error, Result};
use crate::masking::patchify;
use crate::nn::ParamStore;
use crate::phantom::{generate_phantom, PhantomSpec, ShapeKind};
use crate::scalar::Scalar;
use crate::views::{center_crop, normalize};
use crate::volume::{read_volume, Grid3, VolumeSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// The semantic-attention [CLS] embedding.
    Cls,
    /// Average pool of the last stage.
    GlobalPool,
}

impl std::str::FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(FeatureSource::Cls),
            "global_pool" | "global" => Ok(FeatureSource::GlobalPool),
            other => Err(invalid(format!("unknown feature source `{other}` (cls or global_pool)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub source: FeatureSource,
    pub dim: usize,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<u32>, source: FeatureSource) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let fm = FeatureMatrix {
            rows,
            labels,
            source,
            dim,
        };
        fm.validate()?;
        Ok(fm)
    }

    pub fn empty(source: FeatureSource, dim: usize) -> Self {
        FeatureMatrix {
            rows: Vec::new(),
            labels: Vec::new(),
            source,
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.labels.len() {
            return Err(invalid("feature rows and labels differ in count"));
        }
        if self.rows.iter().any(|r| r.len() != self.dim) {
            return Err(shape("feature rows differ in width"));
        }
        if self.rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite feature value"));
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            source: self.source,
            dim: self.dim,
        }
    }
}

/// A sample that could not be processed; the run goes on without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub features: FeatureMatrix,
    /// Dataset index of every row.
    pub indices: Vec<usize>,
    pub failures: Vec<SampleFailure>,
}

/// The deterministic model input for a volume: the exact crop, or a
/// centred crop of a larger volume, normalized like the training views.
pub fn prepare_input<T: Scalar>(enc: &Encoder, vol: &VolumeSample<T>, normalize_crop: bool) -> Result<Grid3<T>> {
    let c = enc.cfg.input_size;
    let dims = vol.dims();
    if dims.iter().any(|&d| d < c) {
        return Err(shape(format!("volume {dims:?} is smaller than the model input {c}³")));
    }
    if dims == [c; 3] {
        Ok(if normalize_crop { normalize(&vol.voxels) } else { vol.voxels.clone() })
    } else {
        Ok(center_crop(vol, c, normalize_crop)?.voxels)
    }
}

fn feature_row<T: Scalar>(
    enc: &Encoder,
    params: &ParamStore<T>,
    vol: &VolumeSample<T>,
    source: FeatureSource,
    normalize_crop: bool,
) -> Result<(Vec<f64>, u32)> {
    let label = vol.label.ok_or_else(|| invalid("sample has no class label"))?;
    let x = prepare_input(enc, vol, normalize_crop)?;
    let tg = patchify(&x, enc.cfg.patch)?;
    let out = enc.forward_encoder(params, &tg, None, Role::Teacher, None)?;
    let row = match source {
        FeatureSource::Cls => out.sa.cls_embedding,
        FeatureSource::GlobalPool => out.global_token,
    };
    Ok((row.iter().map(|v| v.as_f64()).collect(), label))
}

/// One feature row per sample: no augmentation, no dropout. Samples that
/// fail are logged and skipped.
pub fn extract_features<T: Scalar>(
    enc: &Encoder,
    params: &ParamStore<T>,
    data: &[VolumeSample<T>],
    source: FeatureSource,
    normalize_crop: bool,
) -> Extraction {
    let dim = match source {
        FeatureSource::Cls => enc.cfg.width(enc.cfg.sa_stage),
        FeatureSource::GlobalPool => enc.cfg.width(4),
    };
    let mut out = Extraction {
        features: FeatureMatrix::empty(source, dim),
        indices: Vec::new(),
        failures: Vec::new(),
    };
    for (i, vol) in data.iter().enumerate() {
        match feature_row(enc, params, vol, source, normalize_crop) {
            Ok((row, label)) => {
                out.features.rows.push(row);
                out.features.labels.push(label);
                out.indices.push(i);
            }
            Err(e) => {
                log::warn!("sample {i}: {e}");
                out.failures.push(SampleFailure {
                    index: i,
                    reason: e.to_string(),
                });
            }
        }
    }
    out
}

/// Recipe for a labeled phantom evaluation set; sample `i` carries one
/// structure of class `classes[i % classes.len()]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSet {
    pub count: usize,
    pub classes: Vec<ShapeKind>,
    pub grid_size: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub contrast: f64,
    pub seed: u64,
}

impl Default for PhantomSet {
    fn default() -> Self {
        PhantomSet {
            count: 30,
            classes: vec![ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Shell],
            grid_size: 32,
            radius_min: 4.0,
            radius_max: 7.0,
            contrast: 1.0,
            seed: 1000,
        }
    }
}

impl PhantomSet {
    pub fn spec(&self, i: usize) -> PhantomSpec {
        PhantomSpec {
            grid_size: self.grid_size,
            n_structures: 1,
            structure_classes: vec![self.classes[i % self.classes.len()]],
            intensity_contrast: self.contrast,
            radius: (self.radius_min, self.radius_max),
            // odd multiplier keeps sample seeds distinct for any base
            seed: self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64),
        }
    }

    pub fn generate<T: Scalar>(&self) -> Result<Vec<VolumeSample<T>>> {
        if self.classes.is_empty() {
            return Err(invalid("phantom set needs at least one class"));
        }
        (0..self.count).map(|i| generate_phantom(&self.spec(i))).collect()
    }
}

/// Every readable volume in `dir`, sorted by file name. Unreadable files
/// are logged and reported, not fatal.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<(Vec<VolumeSample<T>>, Vec<PathBuf>, Vec<SampleFailure>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut vols = Vec::new();
    let mut kept = Vec::new();
    let mut failures = Vec::new();
    for (i, p) in paths.into_iter().enumerate() {
        match read_volume::<T>(&p) {
            Ok(v) => {
                vols.push(v);
                kept.push(p);
            }
            Err(e) => {
                log::warn!("{}: {e}", p.display());
                failures.push(SampleFailure {
                    index: i,
                    reason: format!("{}: {e}", p.display()),
                });
            }
        }
    }
    Ok((vols, kept, failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Encoder, ParamStore<f64>) {
        Encoder::new(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn set(n: usize) -> Vec<VolumeSample<f64>> {
        PhantomSet {
            count: n,
            grid_size: 16,
            radius_min: 2.0,
            radius_max: 3.0,
            ..Default::default()
        }
        .generate()
        .unwrap()
    }

    #[test]
    fn deterministic_and_shaped() {
        let (enc, p) = tiny();
        let data = set(3);
        let a = extract_features(&enc, &p, &data, FeatureSource::Cls, true);
        let b = extract_features(&enc, &p, &data, FeatureSource::Cls, true);
        assert_eq!(a, b);
        assert_eq!(a.features.dim, enc.cfg.width(enc.cfg.sa_stage));
        assert_eq!(a.features.rows[0].len(), a.features.dim);
        let g = extract_features(&enc, &p, &data, FeatureSource::GlobalPool, true);
        assert_eq!(g.features.dim, enc.cfg.width(4));
        assert_eq!(g.features.rows[0].len(), g.features.dim);
        assert_eq!(a.features.labels, vec![0, 1, 2]);
    }

    #[test]
    fn empty_dataset() {
        let (enc, p) = tiny();
        let e = extract_features(&enc, &p, &[], FeatureSource::Cls, true);
        assert!(e.features.is_empty() && e.failures.is_empty());
    }

    #[test]
    fn bad_sample_is_skipped() {
        let (enc, p) = tiny();
        let mut data = set(2);
        data.insert(1, VolumeSample::new(Grid3::filled([8, 8, 8], 0.0), [1.0; 3], Some(0), None).unwrap());
        let e = extract_features(&enc, &p, &data, FeatureSource::Cls, true);
        assert_eq!(e.features.len(), 2);
        assert_eq!(e.indices, vec![0, 2]);
        assert_eq!(e.failures.len(), 1);
        assert_eq!(e.failures[0].index, 1);
    }
}
