use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, Role};
use crate::error::{invalid, shape, Result};
use crate::masking::patchify;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::views::normalize;
use crate::volume::{Grid3, VolumeSample};

use super::metrics::{dice, percentile, MeanSd};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionOptions {
    /// Cover volumes larger than the model input with 50%-overlapping crops.
    pub tiling: bool,
    pub normalize: bool,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            tiling: true,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// Per-voxel attention in `[0, 1]`.
    pub volume: Grid3<f64>,
    /// The raw map was constant; `volume` is all zeros.
    pub constant: bool,
    pub tiles: usize,
}

/// SATT of one model-sized crop on the semantic-attention grid.
pub fn crop_attention<T: Scalar>(enc: &Encoder, params: &ParamStore<T>, crop: &Grid3<T>) -> Result<(Vec<f64>, [usize; 3])> {
    let tg = patchify(crop, enc.cfg.patch)?;
    let out = enc.forward_encoder(params, &tg, None, Role::Teacher, None)?;
    let dims = enc.cfg.stage_grid(enc.cfg.sa_stage);
    Ok((out.sa.satt.iter().map(|x| x.as_f64()).collect(), dims))
}

/// Trilinear interpolation of cell values at continuous cell coordinates
/// (cell `i` has its centre at coordinate `i`), clamped to the grid.
pub fn interpolate_cells(values: &[f64], dims: [usize; 3], c: [f64; 3]) -> f64 {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let x = c[a].clamp(0.0, (dims[a] - 1) as f64);
        lo[a] = x.floor() as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        t[a] = x - lo[a] as f64;
    }
    let at = |d: usize, h: usize, w: usize| values[(d * dims[1] + h) * dims[2] + w];
    let mut acc = 0.0;
    for (dd, wd) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
        for (hh, wh) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
            for (ww, ww_) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
                let w = wd * wh * ww_;
                if w != 0.0 {
                    acc += w * at(dd, hh, ww);
                }
            }
        }
    }
    acc
}

/// Upsamples a cell grid to `out` voxels; voxel centres map to cell
/// coordinates by `(x + 0.5)·n/out − 0.5`.
pub fn upsample_cells(values: &[f64], dims: [usize; 3], out: [usize; 3]) -> Grid3<f64> {
    let mut g = Grid3::filled(out, 0.0);
    let coord = |x: usize, a: usize| (x as f64 + 0.5) * dims[a] as f64 / out[a] as f64 - 0.5;
    for d in 0..out[0] {
        for h in 0..out[1] {
            for w in 0..out[2] {
                g.set(d, h, w, interpolate_cells(values, dims, [coord(d, 0), coord(h, 1), coord(w, 2)]));
            }
        }
    }
    g
}

/// Min–max rescale to `[0, 1]`; constant input gives zeros and `true`.
pub fn rescale_unit(g: &Grid3<f64>) -> (Grid3<f64>, bool) {
    let lo = g.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = g.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 1e-12 * hi.abs().max(1.0)) {
        return (Grid3::filled(g.dims(), 0.0), true);
    }
    (g.map(|x| (x - lo) / span), false)
}

/// Tile origins along one axis: stride half the crop, last tile flush
/// with the end.
fn tile_origins(dim: usize, crop: usize) -> Vec<usize> {
    let stride = (crop / 2).max(1);
    let mut out: Vec<usize> = (0..=dim - crop).step_by(stride).collect();
    if *out.last().expect("dim >= crop") != dim - crop {
        out.push(dim - crop);
    }
    out
}

/// Per-voxel semantic attention of a volume, rescaled to `[0, 1]`.
pub fn attention_volume<T: Scalar>(
    enc: &Encoder,
    params: &ParamStore<T>,
    vol: &VolumeSample<T>,
    opts: AttentionOptions,
) -> Result<AttentionMap> {
    let c = enc.cfg.input_size;
    let dims = vol.dims();
    let prep = |g: Grid3<T>| if opts.normalize { normalize(&g) } else { g };
    if dims == [c; 3] {
        let (satt, sd) = crop_attention(enc, params, &prep(vol.voxels.clone()))?;
        let (volume, constant) = rescale_unit(&upsample_cells(&satt, sd, dims));
        return Ok(AttentionMap {
            volume,
            constant,
            tiles: 1,
        });
    }
    if !opts.tiling || dims.iter().any(|&d| d < c) {
        return Err(shape(format!(
            "volume {dims:?} does not match the model input {c}³ (tiling {})",
            if opts.tiling { "needs every axis >= input" } else { "disabled" }
        )));
    }
    let mut sum = Grid3::filled(dims, 0.0);
    let mut count = Grid3::filled(dims, 0u32);
    let mut tiles = 0;
    for &od in &tile_origins(dims[0], c) {
        for &oh in &tile_origins(dims[1], c) {
            for &ow in &tile_origins(dims[2], c) {
                let crop = vol.voxels.crop([od, oh, ow], [c; 3])?;
                let (satt, sd) = crop_attention(enc, params, &prep(crop))?;
                let up = upsample_cells(&satt, sd, [c; 3]);
                for d in 0..c {
                    for h in 0..c {
                        for w in 0..c {
                            let (x, y, z) = (od + d, oh + h, ow + w);
                            sum.set(x, y, z, sum.at(x, y, z) + up.at(d, h, w));
                            count.set(x, y, z, count.at(x, y, z) + 1);
                        }
                    }
                }
                tiles += 1;
            }
        }
    }
    let mut avg = sum;
    for (a, &n) in avg.data_mut().iter_mut().zip(count.data()) {
        *a /= n as f64;
    }
    let (volume, constant) = rescale_unit(&avg);
    Ok(AttentionMap {
        volume,
        constant,
        tiles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationCase {
    pub dsc: f64,
    /// Attention value at the percentile; voxels strictly above it are predicted.
    pub threshold: f64,
    pub predicted_voxels: usize,
    pub roi_voxels: usize,
}

/// Thresholds an attention map strictly above its own percentile and
/// scores it against the ROI.
pub fn localize_attention(att: &Grid3<f64>, roi: &Grid3<bool>, pct: f64) -> Result<LocalizationCase> {
    if att.dims() != roi.dims() {
        return Err(shape(format!("attention {:?} and roi {:?} differ", att.dims(), roi.dims())));
    }
    let roi_voxels = roi.data().iter().filter(|&&x| x).count();
    if roi_voxels == 0 {
        return Err(invalid("roi is empty"));
    }
    let threshold = percentile(att.data(), pct)?;
    let pred: Vec<bool> = att.data().iter().map(|&v| v > threshold).collect();
    Ok(LocalizationCase {
        dsc: dice(&pred, roi.data())?,
        threshold,
        predicted_voxels: pred.iter().filter(|&&x| x).count(),
        roi_voxels,
    })
}

pub fn zero_shot_localize<T: Scalar>(
    enc: &Encoder,
    params: &ParamStore<T>,
    vol: &VolumeSample<T>,
    pct: f64,
    opts: AttentionOptions,
) -> Result<LocalizationCase> {
    let roi = vol.roi.as_ref().ok_or_else(|| invalid("volume has no roi"))?;
    if !roi.data().iter().any(|&x| x) {
        return Err(invalid("roi is empty"));
    }
    let att = attention_volume(enc, params, vol, opts)?;
    localize_attention(&att.volume, roi, pct)
}

pub const LOCALIZATION_DEFINITION: &str = "prediction = voxels whose rescaled attention is strictly above the \
given percentile of the attention volume; DSC = 2|A∩B|/(|A|+|B|) against the roi; mean ± population sd over cases";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub definition: String,
    pub percentile: f64,
    pub cases: Vec<LocalizationCase>,
    pub dsc: MeanSd,
}

impl LocalizationReport {
    pub fn new(percentile: f64, cases: Vec<LocalizationCase>) -> Self {
        let d: Vec<f64> = cases.iter().map(|c| c.dsc).collect();
        LocalizationReport {
            definition: LOCALIZATION_DEFINITION.into(),
            percentile,
            dsc: MeanSd::of(&d),
            cases,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Encoder, ParamStore<f64>) {
        Encoder::new(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    fn noise(dims: [usize; 3], seed: u64) -> VolumeSample<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        let g = Grid3::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        VolumeSample::new(g, [1.0; 3], None, None).unwrap()
    }

    #[test]
    fn shape_and_range() {
        let (enc, p) = tiny();
        let m = attention_volume(&enc, &p, &noise([16; 3], 0), AttentionOptions::default()).unwrap();
        assert_eq!(m.volume.dims(), [16; 3]);
        assert!(!m.constant);
        let lo = m.volume.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = m.volume.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn tiling_and_its_absence() {
        let (enc, p) = tiny();
        let v = noise([24, 16, 20], 1);
        let m = attention_volume(&enc, &p, &v, AttentionOptions::default()).unwrap();
        assert_eq!(m.volume.dims(), [24, 16, 20]);
        // 24: 0, 8 | 16: 0 | 20: 0, 4
        assert_eq!(m.tiles, 4);
        let off = AttentionOptions {
            tiling: false,
            ..Default::default()
        };
        assert!(attention_volume(&enc, &p, &v, off).is_err());
        assert!(attention_volume(&enc, &p, &noise([8; 3], 0), AttentionOptions::default()).is_err());
    }

    #[test]
    fn constant_guard() {
        let (g, flag) = rescale_unit(&Grid3::filled([4; 3], 0.3));
        assert!(flag && g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tile_origins_cover() {
        assert_eq!(tile_origins(32, 32), vec![0]);
        assert_eq!(tile_origins(40, 32), vec![0, 8]);
        assert_eq!(tile_origins(64, 32), vec![0, 16, 32]);
    }

    #[test]
    fn dsc_cases() {
        let mut roi = Grid3::filled([10; 3], false);
        let mut att = Grid3::filled([10; 3], 0.0);
        for i in 0..100 {
            roi.data_mut()[i] = true;
            att.data_mut()[i] = 1.0;
        }
        // exactly 10% set: the 90th percentile sits at 0, so > 0 is the roi
        assert_eq!(localize_attention(&att, &roi, 90.0).unwrap().dsc, 1.0);
        let flipped = att.map(|x| 1.0 - x);
        assert_eq!(localize_attention(&flipped, &roi, 90.0).unwrap().dsc, 0.0);
        assert!(localize_attention(&att, &Grid3::filled([10; 3], false), 90.0).is_err());
    }

    #[test]
    fn missing_roi_rejected() {
        let (enc, p) = tiny();
        assert!(zero_shot_localize(&enc, &p, &noise([16; 3], 0), 90.0, AttentionOptions::default()).is_err());
    }

    proptest! {
        #[test]
        fn cell_centres_reproduce_values(vals in prop::collection::vec(0.0f64..1.0, 27)) {
            for d in 0..3 { for h in 0..3 { for w in 0..3 {
                let v = interpolate_cells(&vals, [3; 3], [d as f64, h as f64, w as f64]);
                prop_assert!((v - vals[(d * 3 + h) * 3 + w]).abs() < 1e-12);
            }}}
        }

        #[test]
        fn upsampling_preserves_order_of_odd_factor_centres(vals in prop::collection::vec(0.0f64..1.0, 8)) {
            // factor 3: the middle voxel of each cell sits on the cell centre
            let g = upsample_cells(&vals, [2; 3], [6; 3]);
            for c in 0..8 {
                let (d, h, w) = (c / 4, (c / 2) % 2, c % 2);
                prop_assert!((g.at(3 * d + 1, 3 * h + 1, 3 * w + 1) - vals[c]).abs() < 1e-12);
            }
        }

        #[test]
        fn prediction_is_strictly_above_percentile(vals in prop::collection::vec(0.0f64..1.0, 64), k in 1usize..64) {
            let att = Grid3::new([4; 3], vals.clone()).unwrap();
            let mut roi = Grid3::filled([4; 3], false);
            roi.data_mut()[k] = true;
            let c = localize_attention(&att, &roi, 90.0).unwrap();
            let above = vals.iter().filter(|&&v| v > c.threshold).count();
            prop_assert_eq!(c.predicted_voxels, above);
            prop_assert!(c.predicted_voxels as f64 <= 0.1 * 64.0 + 1.0);
        }
    }
}
