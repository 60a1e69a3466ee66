//! Backdoor triggers: a binary mask plus a pixel pattern, stamped onto
//! images with `x * (1 - m) + p * m`.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4, ArrayView3, Axis};
use std::path::{Path, PathBuf};

/// Which image corner a square trigger occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corner {
    BottomRight,
    BottomLeft,
    TopRight,
    TopLeft,
}

impl std::str::FromStr for Corner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottom-right" => Ok(Corner::BottomRight),
            "bottom-left" => Ok(Corner::BottomLeft),
            "top-right" => Ok(Corner::TopRight),
            "top-left" => Ok(Corner::TopLeft),
            other => Err(Error::config("trigger.corner", format!("unknown corner `{other}`"))),
        }
    }
}

/// A mask/pattern trigger pair. The mask is dense and strictly 0/1 so
/// arbitrary trigger supports stay expressible; the pattern lives in [0, 1].
#[derive(Debug, Clone)]
pub struct TriggerSpec {
    pub name: String,
    mask: Array3<f32>,
    pattern: Array3<f32>,
}

impl TriggerSpec {
    pub fn new(name: impl Into<String>, mask: Array3<f32>, pattern: Array3<f32>) -> Result<Self> {
        if mask.dim() != pattern.dim() {
            return Err(Error::shape_mismatch(
                format!("{:?}", mask.dim()),
                format!("{:?}", pattern.dim()),
            ));
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::out_of_range("trigger mask values", "{0, 1}", f64::NAN));
        }
        if pattern.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::out_of_range("trigger pattern values", "[0, 1]", f64::NAN));
        }
        Ok(TriggerSpec {
            name: name.into(),
            mask,
            pattern,
        })
    }

    pub fn mask(&self) -> &Array3<f32> {
        &self.mask
    }

    pub fn pattern(&self) -> &Array3<f32> {
        &self.pattern
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.mask.dim()
    }

    /// Number of mask pixels set to 1 (summed over channels).
    pub fn support_size(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1.0).count()
    }
}

/// Stamp the trigger onto one image: `x * (1 - m) + p * m`.
pub fn apply_trigger(x: ArrayView3<f32>, trigger: &TriggerSpec) -> Result<Array3<f32>> {
    if x.dim() != trigger.shape() {
        return Err(Error::shape_mismatch(
            format!("{:?}", trigger.shape()),
            format!("{:?}", x.dim()),
        ));
    }
    let mut out = x.to_owned();
    ndarray::Zip::from(&mut out)
        .and(&trigger.mask)
        .and(&trigger.pattern)
        .for_each(|o, &m, &p| {
            *o = *o * (1.0 - m) + p * m;
        });
    Ok(out)
}

/// Stamp the trigger onto every image of a batch.
pub fn apply_trigger_batch(x: &Array4<f32>, trigger: &TriggerSpec) -> Result<Array4<f32>> {
    let (_, c, h, w) = x.dim();
    if (c, h, w) != trigger.shape() {
        return Err(Error::shape_mismatch(
            format!("{:?}", trigger.shape()),
            format!("{:?}", (c, h, w)),
        ));
    }
    let mut out = x.clone();
    for mut img in out.axis_iter_mut(Axis(0)) {
        ndarray::Zip::from(&mut img)
            .and(&trigger.mask)
            .and(&trigger.pattern)
            .for_each(|o, &m, &p| {
                *o = *o * (1.0 - m) + p * m;
            });
    }
    Ok(out)
}

/// Square checkerboard trigger in an image corner. The square's own
/// top-left cell is 1 and adjacent cells alternate; the mask covers the
/// square across all channels.
pub fn make_checkerboard_trigger(
    size: usize,
    image_shape: (usize, usize, usize),
    corner: Corner,
) -> Result<TriggerSpec> {
    let (c, h, w) = image_shape;
    if size == 0 || size > h.min(w) {
        return Err(Error::out_of_range(
            "trigger size",
            format!("[1, {}]", h.min(w)),
            size as f64,
        ));
    }
    let (row0, col0) = match corner {
        Corner::BottomRight => (h - size, w - size),
        Corner::BottomLeft => (h - size, 0),
        Corner::TopRight => (0, w - size),
        Corner::TopLeft => (0, 0),
    };
    let mut mask = Array3::zeros((c, h, w));
    let mut pattern = Array3::zeros((c, h, w));
    for ci in 0..c {
        for di in 0..size {
            for dj in 0..size {
                mask[[ci, row0 + di, col0 + dj]] = 1.0;
                if (di + dj) % 2 == 0 {
                    pattern[[ci, row0 + di, col0 + dj]] = 1.0;
                }
            }
        }
    }
    TriggerSpec::new(
        format!("checkerboard-{size}-{corner:?}"),
        mask,
        pattern,
    )
}

/// Write the mask and pattern as grayscale/RGB PNG files for report figures.
/// Returns the (mask, pattern) paths.
pub fn save_trigger_images(trigger: &TriggerSpec, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let (c, h, w) = trigger.shape();
    let mask_path = dir.join("mask.png");
    let pattern_path = dir.join("pattern.png");

    // mask: max over channels, grayscale
    let mut mask_img = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let mut v = 0.0f32;
            for ci in 0..c {
                v = v.max(trigger.mask[[ci, i, j]]);
            }
            mask_img.put_pixel(j as u32, i as u32, image::Luma([(v * 255.0) as u8]));
        }
    }
    mask_img
        .save(&mask_path)
        .map_err(|e| Error::Report(format!("writing {}: {e}", mask_path.display())))?;

    let mut pat_img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = |ci: usize| -> u8 {
                let v = trigger.pattern[[ci.min(c - 1), i, j]];
                (v * 255.0).round().clamp(0.0, 255.0) as u8
            };
            pat_img.put_pixel(j as u32, i as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    pat_img
        .save(&pattern_path)
        .map_err(|e| Error::Report(format!("writing {}: {e}", pattern_path.display())))?;
    Ok((mask_path, pattern_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_fn(shape, |_| rng.gen_range(0.0..=1.0f32))
    }

    fn random_trigger(rng: &mut impl Rng, shape: (usize, usize, usize)) -> TriggerSpec {
        let mask = Array3::from_shape_fn(shape, |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        let pattern = Array3::from_shape_fn(shape, |_| rng.gen_range(0.0..=1.0f32));
        TriggerSpec::new("rand", mask, pattern).unwrap()
    }

    #[test]
    fn zero_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = (3, 8, 8);
        let x = random_image(&mut rng, shape);
        let t = TriggerSpec::new(
            "zero",
            Array3::zeros(shape),
            random_image(&mut rng, shape),
        )
        .unwrap();
        let y = apply_trigger(x.view(), &t).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn full_mask_replaces_with_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = (3, 8, 8);
        let x = random_image(&mut rng, shape);
        let pattern = random_image(&mut rng, shape);
        let t = TriggerSpec::new("one", Array3::ones(shape), pattern.clone()).unwrap();
        let y = apply_trigger(x.view(), &t).unwrap();
        assert_eq!(y, pattern);
    }

    #[test]
    fn stamping_is_idempotent_and_leaves_outside_pixels_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = (3, 16, 16);
        for _ in 0..20 {
            let x = random_image(&mut rng, shape);
            let t = random_trigger(&mut rng, shape);
            let once = apply_trigger(x.view(), &t).unwrap();
            let twice = apply_trigger(once.view(), &t).unwrap();
            assert_eq!(once, twice, "second stamp must be a no-op");
            for ((c, i, j), &v) in once.indexed_iter() {
                if t.mask()[[c, i, j]] == 0.0 {
                    assert_eq!(v, x[[c, i, j]], "outside-mask pixel changed");
                } else {
                    assert_eq!(v, t.pattern()[[c, i, j]]);
                }
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_trigger(&mut rng, (3, 8, 8));
        let x = random_image(&mut rng, (3, 16, 16));
        assert!(apply_trigger(x.view(), &t).is_err());
    }

    #[test]
    fn checkerboard_mask_covers_bottom_right_square() {
        let t = make_checkerboard_trigger(7, (3, 32, 32), Corner::BottomRight).unwrap();
        // 49 pixels per channel
        assert_eq!(t.support_size(), 49 * 3);
        for ((c, i, j), &m) in t.mask().indexed_iter() {
            let inside = (25..32).contains(&i) && (25..32).contains(&j);
            assert_eq!(m == 1.0, inside, "mask wrong at {:?}", (c, i, j));
        }
    }

    #[test]
    fn checkerboard_pattern_alternates_with_top_left_one() {
        // hand enumeration of a 7x7 checkerboard: 25 ones, 24 zeros,
        // adjacent cells differ, the square's own top-left cell is 1
        let t = make_checkerboard_trigger(7, (3, 32, 32), Corner::BottomRight).unwrap();
        let p = t.pattern();
        let mut ones = 0;
        for di in 0..7 {
            for dj in 0..7 {
                let v = p[[0, 25 + di, 25 + dj]];
                if v == 1.0 {
                    ones += 1;
                }
                if dj + 1 < 7 {
                    assert_ne!(v, p[[0, 25 + di, 25 + dj + 1]], "adjacent cells equal");
                }
                if di + 1 < 7 {
                    assert_ne!(v, p[[0, 25 + di + 1, 25 + dj]], "adjacent cells equal");
                }
            }
        }
        assert_eq!(ones, 25);
        assert_eq!(p[[0, 25, 25]], 1.0);
        // everything outside the square is zero
        assert_eq!(p[[0, 0, 0]], 0.0);
    }

    #[test]
    fn single_pixel_trigger() {
        let t = make_checkerboard_trigger(1, (3, 32, 32), Corner::BottomRight).unwrap();
        assert_eq!(t.support_size(), 3);
        assert_eq!(t.pattern()[[0, 31, 31]], 1.0);
    }

    #[test]
    fn oversized_trigger_is_rejected() {
        assert!(make_checkerboard_trigger(33, (3, 32, 32), Corner::BottomRight).is_err());
        assert!(make_checkerboard_trigger(0, (3, 32, 32), Corner::BottomRight).is_err());
    }

    #[test]
    fn trigger_images_round_trip_to_disk() {
        let t = make_checkerboard_trigger(7, (3, 32, 32), Corner::BottomRight).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (m, p) = save_trigger_images(&t, dir.path()).unwrap();
        assert!(m.exists() && p.exists());
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (32, 32));
        assert_eq!(img.get_pixel(25, 25).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(26, 25).0, [0, 0, 0]);
    }
}
