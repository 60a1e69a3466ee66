//! Labeled image datasets: registry, procedural generation with an on-disk
//! PNG cache, subsampling, and poisoning.

use crate::error::{Error, Result};
use crate::trigger::{apply_trigger, TriggerSpec};
use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const DATA_DIR_ENV: &str = "EXITBENCH_DATA_DIR";
pub const REGISTRY_ENV: &str = "EXITBENCH_REGISTRY";

const DEFAULT_REGISTRY: &str = include_str!("../data/registry.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

/// An in-memory labeled image set with (count, C, H, W) images in [0, 1].
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pub name: String,
    images: Array4<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledImageSet {
    pub fn new(
        name: impl Into<String>,
        images: Array4<f32>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let name = name.into();
        if images.len_of(Axis(0)) != labels.len() {
            return Err(Error::shape_mismatch(
                format!("{} labels", images.len_of(Axis(0))),
                format!("{} labels", labels.len()),
            ));
        }
        if num_classes == 0 {
            return Err(Error::out_of_range("num_classes", "[1, inf)", 0.0));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                num_classes,
            });
        }
        if images.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::out_of_range("pixel values", "[0, 1]", f64::NAN));
        }
        Ok(LabeledImageSet {
            name,
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// (C, H, W) of a single image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dim();
        (c, h, w)
    }

    pub fn images(&self) -> &Array4<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(Axis(0), i)
    }

    /// New set holding `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> LabeledImageSet {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (dst, &src) in indices.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), dst)
                .assign(&self.images.index_axis(Axis(0), src));
            labels.push(self.labels[src]);
        }
        LabeledImageSet {
            name: self.name.clone(),
            images,
            labels,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub source: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub gen_seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    datasets: BTreeMap<String, DatasetEntry>,
}

/// The dataset registry, normally parsed from the registry file shipped
/// with the crate (override with `EXITBENCH_REGISTRY`).
#[derive(Debug, Clone)]
pub struct DatasetRegistry {
    entries: BTreeMap<String, DatasetEntry>,
}

impl DatasetRegistry {
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_REGISTRY).expect("built-in registry must parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: RegistryFile = toml::from_str(text)
            .map_err(|e| Error::config("registry", e.to_string()))?;
        Ok(DatasetRegistry {
            entries: file.datasets,
        })
    }

    /// Built-in registry unless `EXITBENCH_REGISTRY` points at a file.
    pub fn from_env() -> Result<Self> {
        match std::env::var(REGISTRY_ENV) {
            Ok(path) => Self::parse(&std::fs::read_to_string(&path)?),
            Err(_) => Ok(Self::builtin()),
        }
    }

    pub fn get(&self, name: &str) -> Result<&DatasetEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownDataset(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }
}

/// Data cache root: `EXITBENCH_DATA_DIR` or `<tmp>/exitbench-data`.
pub fn cache_dir() -> PathBuf {
    match std::env::var(DATA_DIR_ENV) {
        Ok(dir) => PathBuf::from(dir),
        Err(_) => std::env::temp_dir().join("exitbench-data"),
    }
}

/// Load a registered dataset split, materializing it into the PNG cache on
/// first use. Ordering is deterministic (files are read in sorted order).
pub fn load_dataset(name: &str, split: Split) -> Result<LabeledImageSet> {
    let registry = DatasetRegistry::from_env()?;
    load_dataset_with(&registry, name, split, &cache_dir())
}

pub fn load_dataset_with(
    registry: &DatasetRegistry,
    name: &str,
    split: Split,
    cache_root: &Path,
) -> Result<LabeledImageSet> {
    let entry = registry.get(name)?;
    let count = match split {
        Split::Train => entry.train,
        Split::Test => entry.test,
    };
    if count == 0 {
        return Err(Error::EmptySplit {
            name: name.to_string(),
            split: split.as_str().to_string(),
        });
    }
    let dir = cache_root.join(name).join(split.as_str());
    if !split_cache_is_complete(&dir, count) {
        materialize_split(entry, name, split, count, &dir)?;
    }
    read_split_from_disk(entry, name, &dir, count)
}

fn split_cache_is_complete(dir: &Path, count: usize) -> bool {
    let marker = dir.join(".complete");
    match std::fs::read_to_string(&marker) {
        Ok(text) => text.trim() == count.to_string(),
        Err(_) => false,
    }
}

fn materialize_split(
    entry: &DatasetEntry,
    name: &str,
    split: Split,
    count: usize,
    dir: &Path,
) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    let split_id = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    for idx in 0..count {
        let label = idx % entry.classes; // balanced classes, interleaved
        let img = generate_image(entry, split_id, idx as u64, label)?;
        let path = dir.join(format!("img_{idx:05}_{label}.png"));
        save_image_png(&img, &path)?;
    }
    std::fs::write(dir.join(".complete"), count.to_string())?;
    let _ = name;
    Ok(())
}

fn read_split_from_disk(
    entry: &DatasetEntry,
    name: &str,
    dir: &Path,
    count: usize,
) -> Result<LabeledImageSet> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    if files.len() != count {
        return Err(Error::CorruptData {
            path: dir.display().to_string(),
            reason: format!("expected {count} images, found {}", files.len()),
        });
    }
    let (c, h, w) = (entry.channels, entry.height, entry.width);
    let mut images = Array4::zeros((count, c, h, w));
    let mut labels = Vec::with_capacity(count);
    for (i, path) in files.iter().enumerate() {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::CorruptData {
                path: path.display().to_string(),
                reason: "bad file name".into(),
            })?;
        let label: usize = stem
            .rsplit('_')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CorruptData {
                path: path.display().to_string(),
                reason: "missing label suffix".into(),
            })?;
        let img = image::open(path).map_err(|e| Error::CorruptData {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        if rgb.dimensions() != (w as u32, h as u32) {
            return Err(Error::CorruptData {
                path: path.display().to_string(),
                reason: format!("expected {w}x{h}, got {:?}", rgb.dimensions()),
            });
        }
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let px = rgb.get_pixel(wi as u32, hi as u32).0;
                    images[[i, ci, hi, wi]] = px[ci.min(2)] as f32 / 255.0;
                }
            }
        }
        labels.push(label);
    }
    LabeledImageSet::new(name, images, labels, entry.classes)
}

fn save_image_png(img: &Array3<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for hi in 0..h {
        for wi in 0..w {
            let px = |ci: usize| (img[[ci.min(c - 1), hi, wi]] * 255.0).round() as u8;
            out.put_pixel(wi as u32, hi as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    out.save(path).map_err(|e| Error::CorruptData {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Stable per-image seed so regeneration order never matters.
fn image_seed(gen_seed: u64, split_id: u64, idx: u64) -> u64 {
    let mut z = gen_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split_id.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(idx);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn generate_image(
    entry: &DatasetEntry,
    split_id: u64,
    idx: u64,
    label: usize,
) -> Result<Array3<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(entry.gen_seed, split_id, idx));
    let shape = (entry.channels, entry.height, entry.width);
    let img = match entry.source.as_str() {
        "procedural:gratings-v1" => gratings_image(shape, entry.classes, label, &mut rng),
        "procedural:brightness-v1" => brightness_image(shape, label, &mut rng),
        other => {
            return Err(Error::config(
                "registry.source",
                format!("unknown source `{other}`"),
            ))
        }
    };
    Ok(img)
}

/// Oriented sinusoidal gratings: class determines orientation and spatial
/// frequency; phase, orientation jitter, amplitude, per-channel gain, pixel
/// noise, and an occluding patch vary per sample. Low-amplitude and heavily
/// occluded samples are genuinely hard, which keeps exit-confidence
/// distributions spread out; grating mixtures are ambiguous, which keeps
/// superposition-based defenses (STRIP) meaningful.
fn gratings_image(
    shape: (usize, usize, usize),
    classes: usize,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let (c, h, w) = shape;
    let jitter: f64 = rng.gen_range(-0.30..0.30);
    let theta = std::f64::consts::PI * (label as f64 + jitter) / classes as f64;
    let freq = 5.0 + (label % 3) as f64 * 2.0 + rng.gen_range(-0.3..0.3);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp: f64 = rng.gen_range(0.10..0.40);
    let gains: Vec<f64> = (0..c).map(|_| rng.gen_range(0.6..1.0)).collect();
    let (sin_t, cos_t) = theta.sin_cos();
    // contaminating grating from a different class; mixtures near 0.5 are
    // genuinely ambiguous and ratios above 0.5 act as label noise, which
    // keeps converged exit probes from saturating their confidence
    let other = (label + rng.gen_range(1..classes)) % classes;
    let theta2 = std::f64::consts::PI * (other as f64 + rng.gen_range(-0.30..0.30)) / classes as f64;
    let freq2 = 5.0 + (other % 3) as f64 * 2.0 + rng.gen_range(-0.3..0.3);
    let phase2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mix: f64 = rng.gen_range(0.05..0.60);
    let (sin_t2, cos_t2) = theta2.sin_cos();
    // occluding patch over part of the image for roughly half the samples
    let occlude = rng.gen_bool(0.5);
    let (or0, oc0, oh_n, ow_n, oval) = if occlude {
        let ph = rng.gen_range(6..15usize);
        let pw = rng.gen_range(6..15usize);
        (
            rng.gen_range(0..h - ph),
            rng.gen_range(0..w - pw),
            ph,
            pw,
            rng.gen_range(0.2..0.8f64),
        )
    } else {
        (0, 0, 0, 0, 0.0)
    };
    // class-specific background tint: a shallow (color-statistics) cue on
    // top of the deep (orientation) cue, mixed like the gratings
    let tint = |cls: usize, ch: usize| -> f64 {
        (std::f64::consts::TAU * (cls as f64 / classes as f64) + ch as f64 * 2.09).sin()
    };
    let bases: Vec<f64> = (0..c)
        .map(|ci| {
            let t = (1.0 - mix) * tint(label, ci) + mix * tint(other, ci);
            0.5 + 0.16 * t + rng.gen_range(-0.05..0.05)
        })
        .collect();
    let mut img = Array3::zeros((c, h, w));
    for hi in 0..h {
        for wi in 0..w {
            let occluded =
                occlude && hi >= or0 && hi < or0 + oh_n && wi >= oc0 && wi < oc0 + ow_n;
            let coord = (hi as f64 * cos_t + wi as f64 * sin_t) / h as f64;
            let wave = (std::f64::consts::TAU * freq * coord + phase).sin();
            let coord2 = (hi as f64 * cos_t2 + wi as f64 * sin_t2) / h as f64;
            let wave2 = (std::f64::consts::TAU * freq2 * coord2 + phase2).sin();
            let blend = (1.0 - mix) * wave + mix * wave2;
            for ci in 0..c {
                let noise: f64 = rng.gen_range(-0.18..0.18);
                let v = if occluded {
                    oval + noise
                } else {
                    bases[ci] + gains[ci] * amp * blend + noise
                };
                img[[ci, hi, wi]] = quantize(v);
            }
        }
    }
    img
}

/// Two linearly separable classes: dark images (class 0) versus bright
/// images (class 1), separable by mean pixel value. Mean statistics survive
/// global average pooling, so any backbone head can learn this quickly.
fn brightness_image(
    shape: (usize, usize, usize),
    label: usize,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let (c, h, w) = shape;
    let base = if label == 0 { 0.35 } else { 0.65 };
    let mut img = Array3::zeros((c, h, w));
    for hi in 0..h {
        for wi in 0..w {
            for ci in 0..c {
                let noise: f64 = rng.gen_range(-0.10..0.10);
                img[[ci, hi, wi]] = quantize(base + noise);
            }
        }
    }
    img
}

fn quantize(v: f64) -> f32 {
    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    byte as f32 / 255.0
}

/// Floor of `fraction * count` with a tiny guard against binary rounding
/// (e.g. 0.29 * 300 must count as 87).
fn scaled_count(count: usize, fraction: f64) -> usize {
    ((fraction * count as f64) + 1e-9).floor() as usize
}

/// Deterministic choice of `k` indices out of `n`, returned in ascending
/// order. Same (n, k, seed) always picks the same items.
fn choose_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..n).collect();
    // partial Fisher-Yates: the first k slots become the sample
    for i in 0..k.min(n) {
        let j = rng.gen_range(i..n);
        all.swap(i, j);
    }
    let mut picked = all[..k.min(n)].to_vec();
    picked.sort_unstable();
    picked
}

/// Sample `floor(fraction * len)` items (at least one) without replacement.
pub fn subsample(set: &LabeledImageSet, fraction: f64, seed: u64) -> Result<LabeledImageSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::out_of_range("fraction", "(0, 1]", fraction));
    }
    if set.is_empty() {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    let k = scaled_count(set.len(), fraction).max(1);
    let indices = choose_indices(set.len(), k, seed);
    Ok(set.select(&indices))
}

/// Poison `floor(fraction * len)` items in place: stamp the trigger and
/// relabel to `target_label`. Unpoisoned items are untouched and every item
/// keeps its original position.
pub fn poison_dataset(
    set: &LabeledImageSet,
    trigger: &TriggerSpec,
    target_label: usize,
    fraction: f64,
    seed: u64,
) -> Result<LabeledImageSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::out_of_range("fraction", "(0, 1]", fraction));
    }
    if target_label >= set.num_classes() {
        return Err(Error::InvalidLabel {
            label: target_label,
            num_classes: set.num_classes(),
        });
    }
    if set.image_shape() != trigger.shape() {
        return Err(Error::shape_mismatch(
            format!("{:?}", set.image_shape()),
            format!("{:?}", trigger.shape()),
        ));
    }
    let k = scaled_count(set.len(), fraction);
    let indices = choose_indices(set.len(), k, seed);
    let mut images = set.images.clone();
    let mut labels = set.labels.clone();
    for &i in &indices {
        let stamped = apply_trigger(set.image(i), trigger)?;
        images.index_axis_mut(Axis(0), i).assign(&stamped);
        labels[i] = target_label;
    }
    Ok(LabeledImageSet {
        name: format!("{}-poisoned", set.name),
        images,
        labels,
        num_classes: set.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trigger::{make_checkerboard_trigger, Corner};

    fn tiny_set(n: usize, classes: usize) -> LabeledImageSet {
        let images = Array4::from_shape_fn((n, 3, 8, 8), |(i, c, h, w)| {
            ((i * 31 + c * 17 + h * 5 + w) % 97) as f32 / 96.0
        });
        let labels = (0..n).map(|i| i % classes).collect();
        LabeledImageSet::new("tiny", images, labels, classes).unwrap()
    }

    #[test]
    fn invariant_violations_are_rejected() {
        let images = Array4::zeros((4, 3, 8, 8));
        assert!(LabeledImageSet::new("x", images.clone(), vec![0, 1, 2], 3).is_err());
        assert!(LabeledImageSet::new("x", images.clone(), vec![0, 1, 2, 3], 3).is_err());
        let mut bad = images.clone();
        bad[[0, 0, 0, 0]] = 1.5;
        assert!(LabeledImageSet::new("x", bad, vec![0; 4], 3).is_err());
    }

    #[test]
    fn unknown_dataset_is_an_error() {
        let reg = DatasetRegistry::builtin();
        assert!(matches!(
            reg.get("no-such-set"),
            Err(Error::UnknownDataset(_))
        ));
    }

    #[test]
    fn empty_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let reg = DatasetRegistry::builtin();
        let err = load_dataset_with(&reg, "synth2-notest", Split::Test, dir.path());
        assert!(matches!(err, Err(Error::EmptySplit { .. })));
    }

    #[test]
    fn synth2_loads_with_declared_sizes_and_balanced_classes() {
        let dir = tempfile::tempdir().unwrap();
        let reg = DatasetRegistry::builtin();
        let train = load_dataset_with(&reg, "synth2", Split::Train, dir.path()).unwrap();
        assert_eq!(train.len(), 512);
        assert_eq!(train.num_classes(), 2);
        assert_eq!(train.image_shape(), (3, 32, 32));
        let ones = train.labels().iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 256);
        // reload hits the cache and gives identical content
        let again = load_dataset_with(&reg, "synth2", Split::Train, dir.path()).unwrap();
        assert_eq!(train.images(), again.images());
        assert_eq!(train.labels(), again.labels());
    }

    #[test]
    fn cache_file_count_matches_registry_declaration() {
        // independent oracle: count the PNG files on disk
        let dir = tempfile::tempdir().unwrap();
        let reg = DatasetRegistry::builtin();
        let test = load_dataset_with(&reg, "synth2", Split::Test, dir.path()).unwrap();
        let files = std::fs::read_dir(dir.path().join("synth2").join("test"))
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .map(|x| x == "png")
                    .unwrap_or(false)
            })
            .count();
        assert_eq!(files, reg.get("synth2").unwrap().test);
        assert_eq!(test.len(), files);
    }

    #[test]
    fn subsample_identity_and_exact_counts() {
        let set = tiny_set(1000, 4);
        let all = subsample(&set, 1.0, 42).unwrap();
        assert_eq!(all.len(), 1000);
        assert_eq!(all.images(), set.images());

        let small = subsample(&set, 0.01, 7).unwrap();
        assert_eq!(small.len(), 10); // floor(0.01 * 1000), recomputed by hand
        let again = subsample(&set, 0.01, 7).unwrap();
        assert_eq!(small.images(), again.images());
        assert_eq!(small.labels(), again.labels());
        let other = subsample(&set, 0.01, 8).unwrap();
        assert_ne!(small.images(), other.images());
    }

    #[test]
    fn subsample_rejects_bad_fractions() {
        let set = tiny_set(10, 2);
        assert!(subsample(&set, 0.0, 1).is_err());
        assert!(subsample(&set, 1.5, 1).is_err());
        assert!(subsample(&set, -0.1, 1).is_err());
    }

    #[test]
    fn subsample_minimum_one_item() {
        let set = tiny_set(10, 2);
        let one = subsample(&set, 0.01, 3).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn scaled_count_survives_binary_rounding() {
        assert_eq!(scaled_count(1000, 0.01), 10);
        assert_eq!(scaled_count(300, 0.29), 87);
        assert_eq!(scaled_count(200, 0.25), 50);
        assert_eq!(scaled_count(10, 1.0), 10);
    }

    #[test]
    fn poison_full_set_stamps_everything() {
        let set = tiny_set(20, 4);
        let t = make_checkerboard_trigger(3, (3, 8, 8), Corner::BottomRight).unwrap();
        let poisoned = poison_dataset(&set, &t, 2, 1.0, 5).unwrap();
        assert!(poisoned.labels().iter().all(|&l| l == 2));
        for i in 0..20 {
            let img = poisoned.image(i);
            // trigger pattern present inside the mask region
            assert_eq!(img[[0, 5, 5]], 1.0);
            assert_eq!(img[[0, 5, 6]], 0.0);
        }
    }

    #[test]
    fn poison_zero_mask_changes_labels_only() {
        let set = tiny_set(10, 4);
        let t = TriggerSpec::new(
            "null",
            Array3::zeros((3, 8, 8)),
            Array3::zeros((3, 8, 8)),
        )
        .unwrap();
        let poisoned = poison_dataset(&set, &t, 1, 1.0, 5).unwrap();
        assert_eq!(poisoned.images(), set.images());
        assert!(poisoned.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn poison_changes_exactly_floor_fraction_items() {
        let set = tiny_set(200, 4);
        let t = make_checkerboard_trigger(3, (3, 8, 8), Corner::BottomRight).unwrap();
        let poisoned = poison_dataset(&set, &t, 0, 0.25, 3).unwrap();
        // pixel-diff against originals
        let mut changed = 0;
        for i in 0..200 {
            if poisoned.image(i) != set.image(i) {
                changed += 1;
            }
        }
        assert_eq!(changed, 50);
        // untouched items keep original labels and stay bit-identical
        for i in 0..200 {
            if poisoned.image(i) == set.image(i) && poisoned.labels()[i] != 0 {
                assert_eq!(poisoned.labels()[i], set.labels()[i]);
            }
        }
    }

    #[test]
    fn poison_never_touches_pixels_outside_mask() {
        let set = tiny_set(50, 4);
        let t = make_checkerboard_trigger(3, (3, 8, 8), Corner::BottomRight).unwrap();
        let poisoned = poison_dataset(&set, &t, 0, 1.0, 11).unwrap();
        for i in 0..50 {
            let orig = set.image(i);
            let new = poisoned.image(i);
            for ((c, h, w), &m) in t.mask().indexed_iter() {
                if m == 0.0 {
                    assert_eq!(orig[[c, h, w]], new[[c, h, w]]);
                }
            }
        }
    }

    #[test]
    fn poison_validates_target_and_shape() {
        let set = tiny_set(10, 4);
        let t = make_checkerboard_trigger(3, (3, 8, 8), Corner::BottomRight).unwrap();
        assert!(poison_dataset(&set, &t, 9, 0.5, 1).is_err());
        let wrong = make_checkerboard_trigger(3, (3, 16, 16), Corner::BottomRight).unwrap();
        assert!(poison_dataset(&set, &wrong, 1, 0.5, 1).is_err());
    }
}
