//! Replayable label-invariant augmentations.
//!
//! An [`AugmentationRecord`] fixes every random choice of one transform:
//! crop (then resize back to the frame size), rotation about the frame
//! center, and color jitter, applied in that order. The geometric part can be
//! replayed on a CAM at any resolution with the same aspect ratio, so the
//! original image's map can be brought into the augmented image's frame.
//!
//! Rotation is counter-clockwise as displayed (row 0 at the top). Pixels
//! rotated in from outside the frame are zero and flagged invalid.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcam::CamMap;
use crate::sampling::bilinear_clamped;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    /// `(height, width)` of the frame the record was sampled for.
    pub source_size: (usize, usize),
    pub crop: CropBox,
    pub rotation_deg: f64,
    pub jitter: Jitter,
    pub seed: u64,
}

impl AugmentationRecord {
    /// Full-frame crop, no rotation, neutral jitter.
    pub fn identity(source_size: (usize, usize)) -> Self {
        Self {
            source_size,
            crop: CropBox {
                top: 0,
                left: 0,
                height: source_size.0,
                width: source_size.1,
            },
            rotation_deg: 0.0,
            jitter: Jitter::IDENTITY,
            seed: 0,
        }
    }

    pub fn is_spatial_identity(&self) -> bool {
        self.crop.top == 0
            && self.crop.left == 0
            && (self.crop.height, self.crop.width) == self.source_size
            && self.rotation_deg == 0.0
    }

    fn check(&self) -> Result<()> {
        let (h, w) = self.source_size;
        let c = self.crop;
        if c.height == 0 || c.width == 0 || c.top + c.height > h || c.left + c.width > w {
            return Err(Error::Input(format!(
                "crop {c:?} does not fit a {h}x{w} frame"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// `(height, width)` of the images being augmented.
    pub image_size: (usize, usize),
    /// Range of the crop's area as a fraction of the frame; crops are square
    /// relative to the frame's aspect.
    pub crop_scale_range: (f64, f64),
    pub max_rotation_deg: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    /// Hue shifts are drawn from `[-max_hue_shift, max_hue_shift]` (fraction of a turn).
    pub max_hue_shift: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            image_size: (32, 32),
            crop_scale_range: (0.7, 1.0),
            max_rotation_deg: 15.0,
            brightness_range: (0.8, 1.2),
            contrast_range: (0.8, 1.2),
            saturation_range: (0.8, 1.2),
            max_hue_shift: 0.05,
        }
    }
}

impl AugmentPolicy {
    /// A policy whose every sample is the identity transform.
    pub fn identity(image_size: (usize, usize)) -> Self {
        Self {
            image_size,
            crop_scale_range: (1.0, 1.0),
            max_rotation_deg: 0.0,
            brightness_range: (1.0, 1.0),
            contrast_range: (1.0, 1.0),
            saturation_range: (1.0, 1.0),
            max_hue_shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("augment policy: {what}")));
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return bad("image_size has a zero dimension");
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("crop_scale_range must satisfy 0 < lo <= hi <= 1");
        }
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return bad("max_rotation_deg must lie in [0, 180]");
        }
        for (name, (lo, hi)) in [
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
            ("saturation_range", self.saturation_range),
        ] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad(&format!("{name} must satisfy 0 <= lo <= hi"));
            }
        }
        if !(0.0..=0.5).contains(&self.max_hue_shift) {
            return bad("max_hue_shift must lie in [0, 0.5]");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws a record; the same seed and policy always give the same record.
pub fn sample_augmentation(rng_seed: u64, policy: &AugmentPolicy) -> Result<AugmentationRecord> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (h, w) = policy.image_size;
    let scale = uniform(&mut rng, policy.crop_scale_range.0, policy.crop_scale_range.1);
    let side = scale.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let max_rot = policy.max_rotation_deg;
    let rotation_deg = uniform(&mut rng, -max_rot, max_rot);
    let jitter = Jitter {
        brightness: uniform(&mut rng, policy.brightness_range.0, policy.brightness_range.1),
        contrast: uniform(&mut rng, policy.contrast_range.0, policy.contrast_range.1),
        saturation: uniform(&mut rng, policy.saturation_range.0, policy.saturation_range.1),
        hue: uniform(&mut rng, -policy.max_hue_shift, policy.max_hue_shift),
    };
    Ok(AugmentationRecord {
        source_size: (h, w),
        crop: CropBox {
            top,
            left,
            height: ch,
            width: cw,
        },
        rotation_deg,
        jitter,
        seed: rng_seed,
    })
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else if (v.abs() - 1.0).abs() < 1e-12 {
        v.signum()
    } else {
        v
    }
}

/// For every cell of an `(h, w)` grid in the augmented frame, the source
/// coordinate it samples, or `None` when it was rotated in from outside.
fn source_points(record: &AugmentationRecord, (h, w): (usize, usize)) -> Vec<Option<(f64, f64)>> {
    let (sh, sw) = record.source_size;
    let ry = h as f64 / sh as f64;
    let rx = w as f64 / sw as f64;
    let top = record.crop.top as f64 * ry;
    let left = record.crop.left as f64 * rx;
    let crop_h = record.crop.height as f64 * ry;
    let crop_w = record.crop.width as f64 * rx;

    let theta = record.rotation_deg.to_radians();
    let (sin, cos) = (snap(theta.sin()), snap(theta.cos()));
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let tol = 1e-9;

    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let x1 = cx + dx * cos - dy * sin;
            let y1 = cy + dx * sin + dy * cos;
            let inside = y1 >= -0.5 - tol
                && y1 <= h as f64 - 0.5 + tol
                && x1 >= -0.5 - tol
                && x1 <= w as f64 - 0.5 + tol;
            out.push(inside.then(|| {
                (
                    top + (y1 + 0.5) * crop_h / h as f64 - 0.5,
                    left + (x1 + 0.5) * crop_w / w as f64 - 0.5,
                )
            }));
        }
    }
    out
}

fn resample(plane: &[f64], h: usize, w: usize, points: &[Option<(f64, f64)>]) -> Vec<f64> {
    points
        .iter()
        .map(|p| match p {
            Some((y, x)) => bilinear_clamped(plane, h, w, *y, *x),
            None => 0.0,
        })
        .collect()
}

const GRAY: [f64; 3] = [0.299, 0.587, 0.114];

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Color jitter in place on a `[C, H, W]` image with values in `[0, 1]`.
/// Brightness, contrast, saturation, hue, in that order; each is skipped when
/// neutral. Saturation and hue only apply to 3-channel images.
fn jitter_in_place(img: &mut Array3<f64>, j: &Jitter) {
    let channels = img.shape()[0];
    if j.brightness != 1.0 {
        img.mapv_inplace(|v| (v * j.brightness).clamp(0.0, 1.0));
    }
    if j.contrast != 1.0 {
        let mean = if channels == 3 {
            (0..3)
                .map(|c| GRAY[c] * img.index_axis(Axis(0), c).mean().unwrap())
                .sum::<f64>()
        } else {
            img.mean().unwrap()
        };
        img.mapv_inplace(|v| (j.contrast * v + (1.0 - j.contrast) * mean).clamp(0.0, 1.0));
    }
    if channels != 3 {
        return;
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if j.saturation != 1.0 {
        for y in 0..h {
            for x in 0..w {
                let gray: f64 = (0..3).map(|c| GRAY[c] * img[[c, y, x]]).sum();
                for c in 0..3 {
                    let v = j.saturation * img[[c, y, x]] + (1.0 - j.saturation) * gray;
                    img[[c, y, x]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    if j.hue != 0.0 {
        for y in 0..h {
            for x in 0..w {
                let (hh, s, v) = rgb_to_hsv(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
                let (r, g, b) = hsv_to_rgb(hh + j.hue, s, v);
                img[[0, y, x]] = r;
                img[[1, y, x]] = g;
                img[[2, y, x]] = b;
            }
        }
    }
}

/// Crop → resize → rotate → jitter on a `[C, H, W]` image in `[0, 1]`.
pub fn apply_to_image(image: &Array3<f64>, record: &AugmentationRecord) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if (h, w) != record.source_size {
        return Err(Error::Input(format!(
            "image is {h}x{w} but the record was sampled for {:?}",
            record.source_size
        )));
    }
    record.check()?;
    let mut out = if record.is_spatial_identity() {
        image.clone()
    } else {
        let points = source_points(record, (h, w));
        let src = image.as_standard_layout();
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            let plane = src.index_axis(Axis(0), ch);
            let plane = plane.as_slice().unwrap();
            let values = resample(plane, h, w, &points);
            out.index_axis_mut(Axis(0), ch)
                .iter_mut()
                .zip(values)
                .for_each(|(o, v)| *o = v);
        }
        out
    };
    jitter_in_place(&mut out, &record.jitter);
    Ok(out)
}

/// A map brought into the augmented frame, with the cells that carry data.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayedCam {
    pub map: CamMap,
    pub valid: Array2<bool>,
}

/// Applies only the crop/resize/rotation of `record` to `map`.
pub fn replay_spatial(map: &CamMap, record: &AugmentationRecord) -> Result<ReplayedCam> {
    let (h, w) = map.grid.dim();
    let (sh, sw) = record.source_size;
    if h == 0 || w == 0 || h * sw != w * sh {
        return Err(Error::Input(format!(
            "{h}x{w} map is incompatible with a {sh}x{sw} augmentation frame"
        )));
    }
    record.check()?;
    if record.is_spatial_identity() {
        return Ok(ReplayedCam {
            map: map.clone(),
            valid: Array2::from_elem((h, w), true),
        });
    }
    let points = source_points(record, (h, w));
    let grid = map.grid.as_standard_layout();
    let values = resample(grid.as_slice().unwrap(), h, w, &points);
    let valid = Array2::from_shape_vec((h, w), points.iter().map(Option::is_some).collect()).unwrap();
    Ok(ReplayedCam {
        map: CamMap {
            grid: Array2::from_shape_vec((h, w), values).unwrap(),
            ..map.clone()
        },
        valid,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::backbone::LayerId;

    fn cam(grid: Array2<f64>) -> CamMap {
        CamMap {
            grid,
            class_index: 0,
            layer: LayerId::ALL[0],
            differentiable: false,
        }
    }

    fn random_image(seed: u64, size: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((3, size, size), || rng.random_range(0.0..1.0))
    }

    fn rotation(deg: f64, size: usize) -> AugmentationRecord {
        AugmentationRecord {
            rotation_deg: deg,
            ..AugmentationRecord::identity((size, size))
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = AugmentPolicy::default();
        assert_eq!(sample_augmentation(42, &p).unwrap(), sample_augmentation(42, &p).unwrap());
        assert_ne!(sample_augmentation(42, &p).unwrap(), sample_augmentation(43, &p).unwrap());
    }

    #[test]
    fn zero_rotation_policy_never_rotates() {
        let p = AugmentPolicy {
            max_rotation_deg: 0.0,
            ..Default::default()
        };
        for s in 0..200 {
            assert_eq!(sample_augmentation(s, &p).unwrap().rotation_deg, 0.0);
        }
    }

    #[test]
    fn samples_respect_policy_bounds() {
        let p = AugmentPolicy::default();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in 0..10_000 {
            let r = sample_augmentation(s, &p).unwrap();
            lo = lo.min(r.rotation_deg);
            hi = hi.max(r.rotation_deg);
            assert!(r.crop.top + r.crop.height <= 32 && r.crop.left + r.crop.width <= 32);
            let area = (r.crop.height * r.crop.width) as f64 / 1024.0;
            assert!((0.65..=1.0).contains(&area), "area {area}");
            assert!((0.8..=1.2).contains(&r.jitter.brightness));
            assert!((0.8..=1.2).contains(&r.jitter.contrast));
            assert!((0.8..=1.2).contains(&r.jitter.saturation));
            assert!(r.jitter.hue.abs() <= 0.05);
        }
        assert!(lo >= -15.0 && hi <= 15.0);
        // 10k uniform draws come within 0.1 degree of both ends.
        assert!(lo < -14.9 && hi > 14.9);
    }

    #[test]
    fn invalid_policy_is_rejected() {
        let p = AugmentPolicy {
            crop_scale_range: (0.9, 0.5),
            ..Default::default()
        };
        assert!(matches!(sample_augmentation(0, &p), Err(Error::Config(_))));
    }

    #[test]
    fn identity_record_leaves_image_unchanged() {
        let img = random_image(1, 8);
        let out = apply_to_image(&img, &AugmentationRecord::identity((8, 8))).unwrap();
        for (a, b) in img.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        // A policy with degenerate ranges only produces identities.
        let r = sample_augmentation(9, &AugmentPolicy::identity((8, 8))).unwrap();
        assert!(r.is_spatial_identity());
        assert_eq!(r.jitter, Jitter::IDENTITY);
    }

    #[test]
    fn quarter_turn_moves_pixel_like_rot90() {
        let n = 6;
        for (r, c) in [(0, 0), (1, 4), (5, 2), (3, 3)] {
            let mut img = Array3::zeros((3, n, n));
            img[[0, r, c]] = 1.0;
            let out = apply_to_image(&img, &rotation(90.0, n)).unwrap();
            // numpy.rot90 (counter-clockwise): (r, c) -> (n - 1 - c, r)
            let mut expected = Array3::zeros((3, n, n));
            expected[[0, n - 1 - c, r]] = 1.0;
            assert_eq!(out, expected);
        }
    }

    #[test]
    fn jitter_is_pointwise() {
        let img = random_image(2, 6);
        let record = AugmentationRecord {
            jitter: Jitter {
                brightness: 1.1,
                contrast: 0.85,
                saturation: 1.15,
                hue: 0.03,
            },
            ..AugmentationRecord::identity((6, 6))
        };
        let out = apply_to_image(&img, &record).unwrap();
        assert!(img.iter().zip(out.iter()).any(|(a, b)| (a - b).abs() > 1e-3));
        // Transposing pixel positions commutes with the jitter.
        let transposed = img.clone().permuted_axes([0, 2, 1]).as_standard_layout().into_owned();
        let out_t = apply_to_image(&transposed, &record).unwrap();
        for (a, b) in out_t.iter().zip(out.clone().permuted_axes([0, 2, 1]).as_standard_layout().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hsv_round_trip() {
        let img = random_image(3, 5);
        for y in 0..5 {
            for x in 0..5 {
                let (h, s, v) = rgb_to_hsv(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
                let (r, g, b) = hsv_to_rgb(h, s, v);
                assert!((r - img[[0, y, x]]).abs() < 1e-12);
                assert!((g - img[[1, y, x]]).abs() < 1e-12);
                assert!((b - img[[2, y, x]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_size_mismatch_is_an_input_error() {
        let img = random_image(1, 8);
        assert!(matches!(
            apply_to_image(&img, &AugmentationRecord::identity((32, 32))),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn replay_identity_and_jitter_only_are_no_ops() {
        let grid = random_image(4, 4).index_axis(Axis(0), 0).to_owned();
        let m = cam(grid.clone());
        let out = replay_spatial(&m, &AugmentationRecord::identity((32, 32))).unwrap();
        assert_eq!(out.map.grid, grid);
        assert!(out.valid.iter().all(|&v| v));
        let jitter_only = AugmentationRecord {
            jitter: Jitter {
                brightness: 0.8,
                contrast: 1.2,
                saturation: 0.9,
                hue: -0.04,
            },
            ..AugmentationRecord::identity((32, 32))
        };
        assert_eq!(replay_spatial(&m, &jitter_only).unwrap().map.grid, grid);
    }

    #[test]
    fn replay_quarter_turn_on_one_hot_map() {
        for (r, c) in [(0, 1), (2, 3), (3, 0)] {
            let mut grid = Array2::zeros((4, 4));
            grid[[r, c]] = 1.0;
            let out = replay_spatial(&cam(grid), &rotation(90.0, 32)).unwrap();
            let mut expected = Array2::zeros((4, 4));
            expected[[3 - c, r]] = 1.0;
            assert_eq!(out.map.grid, expected);
            assert!(out.valid.iter().all(|&v| v));
        }
    }

    #[test]
    fn replay_rejects_mismatched_aspect() {
        let m = cam(Array2::zeros((4, 2)));
        assert!(matches!(
            replay_spatial(&m, &AugmentationRecord::identity((32, 32))),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn small_rotation_invalidates_corners_only() {
        let out = replay_spatial(&cam(Array2::ones((8, 8))), &rotation(30.0, 32)).unwrap();
        assert!(!out.valid[[0, 0]] && !out.valid[[7, 7]]);
        assert!(out.valid[[4, 4]] && out.valid[[3, 4]]);
    }

    proptest! {
        #[test]
        fn replay_ignores_photometric_fields(seed in 0u64..1000, b in 0.5f64..1.5, hue in -0.2f64..0.2) {
            let policy = AugmentPolicy::default();
            let r = sample_augmentation(seed, &policy).unwrap();
            let mut other = r.clone();
            other.jitter = Jitter { brightness: b, contrast: 2.0 - b, saturation: b, hue };
            let grid = random_image(seed, 8).index_axis(Axis(0), 1).to_owned();
            let a = replay_spatial(&cam(grid.clone()), &r).unwrap();
            let c = replay_spatial(&cam(grid), &other).unwrap();
            prop_assert_eq!(a, c);
        }

        #[test]
        fn augmented_images_stay_in_unit_range(seed in 0u64..1000) {
            let r = sample_augmentation(seed, &AugmentPolicy::default()).unwrap();
            let out = apply_to_image(&random_image(seed, 32), &r).unwrap();
            prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(out.dim(), (3, 32, 32));
        }
    }
}
