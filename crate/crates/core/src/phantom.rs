//! Synthetic phantoms: noisy backgrounds with non-overlapping bright shapes
//! whose voxel masks are known exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Grid3, VolumeSample};

/// Millimetres per voxel of generated phantoms.
pub const PHANTOM_SPACING: f64 = 2.0;

const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Box,
    Shell,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Shell];

    pub fn class_id(self) -> u32 {
        match self {
            ShapeKind::Sphere => 0,
            ShapeKind::Box => 1,
            ShapeKind::Shell => 2,
        }
    }

    pub fn from_class_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid_size: usize,
    pub n_structures: usize,
    pub structure_classes: Vec<ShapeKind>,
    /// Foreground minus background intensity.
    pub intensity_contrast: f64,
    /// Radius range in voxels; a box gets the half-edge of the cube with
    /// the same volume as the sphere of that radius.
    pub radius: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_size: 32,
            n_structures: 1,
            structure_classes: vec![ShapeKind::Sphere],
            intensity_contrast: 1.0,
            radius: (4.0, 7.0),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 8 {
            return Err(invalid(format!("phantom grid_size {} < 8", self.grid_size)));
        }
        if self.n_structures > 0 {
            if self.intensity_contrast == 0.0 || !self.intensity_contrast.is_finite() {
                return Err(invalid("intensity_contrast must be non-zero when structures are requested"));
            }
            if self.structure_classes.is_empty() {
                return Err(invalid("structure_classes is empty"));
            }
        }
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && hi >= lo) {
            return Err(invalid(format!("bad radius range {:?}", self.radius)));
        }
        if 2.0 * hi + 1.0 > self.grid_size as f64 {
            return Err(invalid(format!(
                "radius {hi} does not fit in a {} grid",
                self.grid_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedStructure {
    pub kind: ShapeKind,
    /// Centre in voxel coordinates `(d, h, w)`.
    pub center: [f64; 3],
    pub radius: f64,
}

impl PlacedStructure {
    /// Half-edge of a box with the same volume as the sphere of `radius`.
    pub fn box_half_edge(radius: f64) -> f64 {
        radius * (std::f64::consts::PI / 6.0).cbrt()
    }

    pub fn shell_inner(radius: f64) -> f64 {
        0.6 * radius
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let dd = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.kind {
            ShapeKind::Sphere => dd.iter().map(|x| x * x).sum::<f64>() <= self.radius * self.radius,
            ShapeKind::Box => {
                let a = Self::box_half_edge(self.radius);
                dd.iter().all(|x| x.abs() <= a)
            }
            ShapeKind::Shell => {
                let r2 = dd.iter().map(|x| x * x).sum::<f64>();
                let ri = Self::shell_inner(self.radius);
                r2 <= self.radius * self.radius && r2 >= ri * ri
            }
        }
    }

    /// Axis-aligned bounding extent from the centre.
    pub fn extent(&self) -> f64 {
        match self.kind {
            ShapeKind::Box => Self::box_half_edge(self.radius),
            _ => self.radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom<T> {
    pub volume: VolumeSample<T>,
    pub structures: Vec<PlacedStructure>,
}

/// Generates the phantom described by `spec`; a pure function of `spec`.
pub fn generate_phantom<T: Scalar>(spec: &PhantomSpec) -> Result<VolumeSample<T>> {
    generate_phantom_detailed(spec).map(|p| p.volume)
}

pub fn generate_phantom_detailed<T: Scalar>(spec: &PhantomSpec) -> Result<Phantom<T>> {
    spec.validate()?;
    let n = spec.grid_size;
    let dims = [n, n, n];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut owner: Grid3<u8> = Grid3::filled(dims, 0);
    let mut placed: Vec<PlacedStructure> = Vec::new();
    let mut attempts = 0;
    while placed.len() < spec.n_structures {
        attempts += 1;
        if attempts > MAX_ATTEMPTS * spec.n_structures.max(1) {
            return Err(Error::Placement {
                placed: placed.len(),
                placed_wanted: spec.n_structures,
                attempts: attempts - 1,
            });
        }
        let kind = spec.structure_classes[rng.gen_range(0..spec.structure_classes.len())];
        let radius = if spec.radius.0 == spec.radius.1 {
            spec.radius.0
        } else {
            rng.gen_range(spec.radius.0..spec.radius.1)
        };
        let mut s = PlacedStructure {
            kind,
            center: [0.0; 3],
            radius,
        };
        let ext = s.extent();
        let lo = ext;
        let hi = (n - 1) as f64 - ext;
        for c in s.center.iter_mut() {
            *c = if hi > lo { rng.gen_range(lo..hi) } else { (n - 1) as f64 / 2.0 };
        }
        let voxels = rasterize(&s, n);
        // one-voxel gap between structures
        let clash = voxels.iter().any(|&[d, h, w]| {
            (d.saturating_sub(1)..=(d + 1).min(n - 1)).any(|a| {
                (h.saturating_sub(1)..=(h + 1).min(n - 1))
                    .any(|b| (w.saturating_sub(1)..=(w + 1).min(n - 1)).any(|c| owner.at(a, b, c) != 0))
            })
        });
        if clash || voxels.is_empty() {
            continue;
        }
        let tag = placed.len() as u8 + 1;
        for [d, h, w] in voxels {
            owner.set(d, h, w, tag);
        }
        placed.push(s);
    }

    let sd = 0.1 * if spec.intensity_contrast != 0.0 { spec.intensity_contrast.abs() } else { 1.0 };
    let normal = Normal::new(0.0, sd).expect("finite sd");
    let mut vox = Vec::with_capacity(n * n * n);
    for &o in owner.data() {
        let noise: f64 = normal.sample(&mut rng);
        let base = if o != 0 { spec.intensity_contrast } else { 0.0 };
        vox.push(T::lit(base + noise));
    }
    let roi = owner.map(|o| o != 0);
    let label = dominant_class(&owner, &placed);
    let volume = VolumeSample::new(Grid3::new(dims, vox)?, [PHANTOM_SPACING; 3], label, Some(roi))?;
    Ok(Phantom {
        volume,
        structures: placed,
    })
}

fn rasterize(s: &PlacedStructure, n: usize) -> Vec<[usize; 3]> {
    let ext = s.extent();
    let mut out = Vec::new();
    let range = |c: f64| {
        let lo = (c - ext).floor().max(0.0) as usize;
        let hi = ((c + ext).ceil() as usize).min(n - 1);
        lo..=hi
    };
    for d in range(s.center[0]) {
        for h in range(s.center[1]) {
            for w in range(s.center[2]) {
                if s.contains([d as f64, h as f64, w as f64]) {
                    out.push([d, h, w]);
                }
            }
        }
    }
    out
}

fn dominant_class(owner: &Grid3<u8>, placed: &[PlacedStructure]) -> Option<u32> {
    if placed.is_empty() {
        return None;
    }
    let mut counts = [0usize; 3];
    for &o in owner.data() {
        if o != 0 {
            counts[placed[o as usize - 1].kind.class_id() as usize] += 1;
        }
    }
    let best = (0..3).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
    Some(best as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_phantom_is_noise_only() {
        let spec = PhantomSpec {
            n_structures: 0,
            ..Default::default()
        };
        let v: VolumeSample<f64> = generate_phantom(&spec).unwrap();
        assert!(v.roi.as_ref().unwrap().data().iter().all(|&b| !b));
        assert_eq!(v.label, None);
        let mean = v.voxels.data().iter().sum::<f64>() / v.voxels.len() as f64;
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = PhantomSpec {
            n_structures: 3,
            structure_classes: ShapeKind::ALL.to_vec(),
            radius: (3.0, 5.0),
            seed: 42,
            ..Default::default()
        };
        let a: VolumeSample<f32> = generate_phantom(&spec).unwrap();
        let b: VolumeSample<f32> = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let c: VolumeSample<f32> = generate_phantom(&PhantomSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.voxels, c.voxels);
    }

    #[test]
    fn sphere_voxel_count_matches_enumeration() {
        let spec = PhantomSpec {
            grid_size: 32,
            radius: (5.0, 5.0),
            seed: 7,
            ..Default::default()
        };
        let p: Phantom<f64> = generate_phantom_detailed(&spec).unwrap();
        let s = p.structures[0];
        // oracle: brute-force count of voxel centres inside the sphere
        let mut oracle = 0usize;
        for d in 0..32 {
            for h in 0..32 {
                for w in 0..32 {
                    let r2 = (d as f64 - s.center[0]).powi(2)
                        + (h as f64 - s.center[1]).powi(2)
                        + (w as f64 - s.center[2]).powi(2);
                    if r2 <= 25.0 {
                        oracle += 1;
                    }
                }
            }
        }
        let count = p.volume.roi.unwrap().data().iter().filter(|&&b| b).count();
        assert_eq!(count, oracle);
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 125.0;
        assert!((count as f64 - analytic).abs() <= 0.1 * analytic, "{count} vs {analytic}");
        assert_eq!(p.volume.label, Some(0));
    }

    #[test]
    fn foreground_is_bright() {
        let spec = PhantomSpec {
            intensity_contrast: 2.0,
            seed: 3,
            ..Default::default()
        };
        let v: VolumeSample<f64> = generate_phantom(&spec).unwrap();
        let roi = v.roi.as_ref().unwrap();
        let (mut fg, mut nf) = (0.0, 0);
        for (x, &r) in v.voxels.data().iter().zip(roi.data()) {
            if r {
                fg += x;
                nf += 1;
            }
        }
        assert!((fg / nf as f64 - 2.0).abs() < 0.05);
    }

    #[test]
    fn overcrowded_spec_fails_placement() {
        let spec = PhantomSpec {
            grid_size: 8,
            n_structures: 5,
            radius: (3.0, 3.0),
            ..Default::default()
        };
        assert!(matches!(generate_phantom::<f32>(&spec), Err(Error::Placement { .. })));
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = PhantomSpec {
            grid_size: 4,
            ..Default::default()
        };
        assert!(generate_phantom::<f32>(&bad).is_err());
        let bad = PhantomSpec {
            intensity_contrast: 0.0,
            ..Default::default()
        };
        assert!(generate_phantom::<f32>(&bad).is_err());
    }

    #[test]
    fn structures_do_not_overlap() {
        let spec = PhantomSpec {
            grid_size: 40,
            n_structures: 4,
            structure_classes: ShapeKind::ALL.to_vec(),
            radius: (3.0, 6.0),
            seed: 11,
            ..Default::default()
        };
        let p: Phantom<f32> = generate_phantom_detailed(&spec).unwrap();
        let roi = p.volume.roi.unwrap();
        let total: usize = p
            .structures
            .iter()
            .map(|s| rasterize(s, 40).len())
            .sum();
        assert_eq!(total, roi.data().iter().filter(|&&b| b).count());
    }
}
