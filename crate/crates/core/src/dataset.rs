//! Synthetic shape-segmentation data.
//!
//! Every image is a smooth textured background with a handful of filled
//! shapes painted back to front. Class `0` is background; each other class
//! has a shape kind and a base colour. A shape's colour blends its class
//! colour (weight `color_correlation`) with a random colour, and every pixel
//! carries Gaussian noise, so colour is a strong but noisy cue and clean
//! predictions need spatial context.
//! All randomness of a sample derives from `(seed, split, index)`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stf::{self, Dtype};
use crate::tensor::{LabelMap, Shape, Tensor, IGNORE_LABEL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Radius range of shapes, in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Per-pixel Gaussian noise on every channel.
    pub color_noise_sigma: f64,
    /// Weight of the class colour in a shape's colour; the rest is a random
    /// colour drawn per shape.
    pub color_correlation: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 5,
            height: 64,
            width: 64,
            train_samples: 500,
            val_samples: 100,
            test_samples: 100,
            seed: 0,
            min_shapes: 2,
            max_shapes: 5,
            min_radius: 5.0,
            max_radius: 14.0,
            color_noise_sigma: 0.25,
            color_correlation: 0.8,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > IGNORE_LABEL as usize {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("image extents must be at least 16".into()));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config("min_shapes exceeds max_shapes".into()));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return Err(Error::Config("radius range must satisfy 0 < min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.color_correlation) || self.color_noise_sigma.is_nan() || self.color_noise_sigma < 0.0 {
            return Err(Error::Config(
                "color_correlation must be in [0,1] and color_noise_sigma >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Val => self.val_samples,
            Split::Test => self.test_samples,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub mask: LabelMap,
    pub id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
    Diamond,
}

const KINDS: [ShapeKind; 4] = [
    ShapeKind::Rectangle,
    ShapeKind::Ellipse,
    ShapeKind::Triangle,
    ShapeKind::Diamond,
];

/// Base colour of a class: background is a mid grey, shape classes walk the
/// hue circle.
fn class_color(class: usize, classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.45, 0.45, 0.45];
    }
    let hue = (class - 1) as f64 / (classes - 1) as f64;
    let rgb = |offset: f64| {
        let x = ((hue + offset) * std::f64::consts::TAU).cos();
        0.5 + 0.42 * x
    };
    [rgb(0.0), rgb(2.0 / 3.0), rgb(1.0 / 3.0)]
}

struct Painted {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    /// Triangle orientation: apex up when true.
    up: bool,
}

impl Painted {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
            ShapeKind::Diamond => dy.abs() + dx.abs() <= 1.0,
            ShapeKind::Triangle => {
                // apex at dy = -1 (or +1), base at the opposite edge
                let t = if self.up { (dy + 1.0) / 2.0 } else { (1.0 - dy) / 2.0 };
                (0.0..=1.0).contains(&t) && dx.abs() <= t
            }
        }
    }
}

/// Produces sample `index` of `split`.
pub fn generate_sample(spec: &DatasetSpec, split: Split, index: usize) -> Result<Sample> {
    let (h, w, c) = (spec.height, spec.width, spec.num_classes);
    let mut rng = rng::stream(spec.seed, split.name(), index as u64);
    let noise = Normal::new(0.0, spec.color_noise_sigma.max(1e-12))
        .map_err(|e| Error::Config(e.to_string()))?;

    // background: base colour plus a low-frequency wave per channel
    let bg = class_color(0, c);
    let mut image = vec![0.0f64; 3 * h * w];
    for ch in 0..3 {
        let fy: f64 = rng.random_range(0.5..2.0) * std::f64::consts::TAU / h as f64;
        let fx: f64 = rng.random_range(0.5..2.0) * std::f64::consts::TAU / w as f64;
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.random_range(0.05..0.15);
        for y in 0..h {
            for x in 0..w {
                image[(ch * h + y) * w + x] =
                    bg[ch] + amp * (fy * y as f64 + fx * x as f64 + phase).sin();
            }
        }
    }
    let mut mask = vec![0u8; h * w];

    let shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    for _ in 0..shapes {
        let class = rng.random_range(1..c);
        let kind = KINDS[(class - 1) % KINDS.len()];
        let base = class_color(class, c);
        let stray: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let a = spec.color_correlation;
        let color: [f64; 3] = std::array::from_fn(|ch| a * base[ch] + (1.0 - a) * stray[ch]);
        let ry = rng.random_range(spec.min_radius..=spec.max_radius);
        let rx = rng.random_range(spec.min_radius..=spec.max_radius);
        let shape = Painted {
            kind,
            cy: rng.random_range(0.0..h as f64),
            cx: rng.random_range(0.0..w as f64),
            ry,
            rx,
            up: rng.random::<bool>(),
        };
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    mask[y * w + x] = class as u8;
                    for ch in 0..3 {
                        image[(ch * h + y) * w + x] = color[ch];
                    }
                }
            }
        }
    }
    // per-pixel noise, clamp, and round to f32 so disk round trips are exact
    for v in &mut image {
        let n: f64 = noise.sample(&mut rng);
        *v = ((*v + n).clamp(0.0, 1.0) as f32) as f64;
    }

    Ok(Sample {
        image: Tensor::from_vec(Shape::new([3, h, w])?, image)?,
        mask: LabelMap::new(h, w, mask)?,
        id: format!("{}-{:05}", split.name(), index),
    })
}

pub fn generate(spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count(split))
        .map(|i| generate_sample(spec, split, i))
        .collect()
}

/// Fraction of samples in which each class occupies at least one pixel.
pub fn class_presence(samples: &[Sample], classes: usize) -> Vec<f64> {
    let mut hits = vec![0usize; classes];
    for s in samples {
        let mut seen = vec![false; classes];
        for &l in s.mask.data() {
            if (l as usize) < classes {
                seen[l as usize] = true;
            }
        }
        for (h, s) in hits.iter_mut().zip(seen) {
            *h += s as usize;
        }
    }
    hits.iter()
        .map(|&n| n as f64 / samples.len().max(1) as f64)
        .collect()
}

/// Concrete augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    /// Offset of the output window inside the rescaled canvas; negative
    /// values pad.
    pub offset_y: isize,
    pub offset_x: isize,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        scale: 1.0,
        offset_y: 0,
        offset_x: 0,
    };

    /// Flip with probability 0.5, scale uniform in `[0.5, 2]`, random window.
    pub fn sample(rng: &mut impl Rng, height: usize, width: usize) -> Self {
        let flip = rng.random::<bool>();
        let scale = rng.random_range(0.5..=2.0);
        let (sh, sw) = scaled_size(height, width, scale);
        let mut offset = |scaled: usize, out: usize| {
            if scaled >= out {
                rng.random_range(0..=(scaled - out)) as isize
            } else {
                -(rng.random_range(0..=(out - scaled)) as isize)
            }
        };
        let offset_y = offset(sh, height);
        let offset_x = offset(sw, width);
        AugmentParams {
            flip,
            scale,
            offset_y,
            offset_x,
        }
    }
}

fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let r = |n: usize| ((n as f64 * scale).round() as usize).max(1);
    (r(h), r(w))
}

pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Result<Sample> {
    let (h, w) = (sample.mask.height(), sample.mask.width());
    augment_with(sample, AugmentParams::sample(rng, h, w))
}

/// Flip, rescale (bilinear image, nearest mask), then crop or pad back to the
/// original size. Padding is 0 in the image and ignore in the mask.
pub fn augment_with(sample: &Sample, p: AugmentParams) -> Result<Sample> {
    let (h, w) = (sample.mask.height(), sample.mask.width());
    let (sh, sw) = scaled_size(h, w, p.scale);
    let src = sample.image.data();
    let sy_of = |y: usize| (y as f64 + 0.5) * h as f64 / sh as f64 - 0.5;
    let sx_of = |x: usize| (x as f64 + 0.5) * w as f64 / sw as f64 - 0.5;
    let flip_x = |x: usize| if p.flip { w - 1 - x } else { x };

    let mut image = vec![0.0; 3 * h * w];
    let mut mask = vec![IGNORE_LABEL; h * w];
    for y in 0..h {
        let cy = y as isize + p.offset_y;
        if cy < 0 || cy >= sh as isize {
            continue;
        }
        let cy = cy as usize;
        let fy = sy_of(cy).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        let ny = (((cy as f64 + 0.5) * h as f64 / sh as f64) as usize).min(h - 1);
        for x in 0..w {
            let cx = x as isize + p.offset_x;
            if cx < 0 || cx >= sw as isize {
                continue;
            }
            let cx = cx as usize;
            let fx = sx_of(cx).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let nx = (((cx as f64 + 0.5) * w as f64 / sw as f64) as usize).min(w - 1);
            mask[y * w + x] = sample.mask.get(ny, flip_x(nx));
            for ch in 0..3 {
                let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + flip_x(xx)];
                let v = if ty == 0.0 && tx == 0.0 {
                    at(y0, x0)
                } else {
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                    let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                    top * (1.0 - ty) + bottom * ty
                };
                image[(ch * h + y) * w + x] = v;
            }
        }
    }
    Ok(Sample {
        image: Tensor::from_vec(sample.image.shape().clone(), image)?,
        mask: LabelMap::new(h, w, mask)?,
        id: sample.id.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub split: Split,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub ids: Vec<String>,
}

/// Writes `<dir>/<split>/<id>.image.stf`, `<id>.mask.stf` and
/// `<dir>/<split>/manifest.json`.
pub fn write_split(dir: &Path, spec: &DatasetSpec, split: Split, samples: &[Sample]) -> Result<()> {
    let split_dir = dir.join(split.name());
    fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
    for s in samples {
        stf::write_tensor(split_dir.join(format!("{}.image.stf", s.id)), &s.image, Dtype::F32)?;
        stf::write_labels(split_dir.join(format!("{}.mask.stf", s.id)), &s.mask)?;
    }
    let manifest = SplitManifest {
        split,
        num_classes: spec.num_classes,
        height: spec.height,
        width: spec.width,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    };
    let path = split_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_split(dir: &Path, split: Split) -> Result<(SplitManifest, Vec<Sample>)> {
    let split_dir = dir.join(split.name());
    let path = split_dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SplitManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let samples = manifest
        .ids
        .iter()
        .map(|id| {
            let image = stf::read_tensor(split_dir.join(format!("{id}.image.stf")))?;
            let mask = stf::read_labels(split_dir.join(format!("{id}.mask.stf")))?;
            mask.validate(manifest.num_classes)?;
            Ok(Sample {
                image,
                mask,
                id: id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> DatasetSpec {
        DatasetSpec {
            height: 24,
            width: 20,
            train_samples: 6,
            val_samples: 3,
            test_samples: 2,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small();
        let a = generate_sample(&spec, Split::Train, 0).unwrap();
        let b = generate_sample(&spec, Split::Train, 0).unwrap();
        assert_eq!(a, b);
        let other = DatasetSpec { seed: 1, ..small() };
        assert_ne!(a.image, generate_sample(&other, Split::Train, 0).unwrap().image);
    }

    #[test]
    fn zero_shapes_means_all_background() {
        let spec = DatasetSpec {
            min_shapes: 0,
            max_shapes: 0,
            ..small()
        };
        for s in generate(&spec, Split::Val).unwrap() {
            assert!(s.mask.data().iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn images_in_unit_range_and_masks_valid() {
        let spec = small();
        for s in generate(&spec, Split::Train).unwrap() {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            s.mask.validate(spec.num_classes).unwrap();
            assert_eq!(s.image.dims(), &[3, 24, 20]);
        }
    }

    #[test]
    fn two_classes_only_background_and_one_shape() {
        let spec = DatasetSpec {
            num_classes: 2,
            ..small()
        };
        for s in generate(&spec, Split::Train).unwrap() {
            assert!(s.mask.data().iter().all(|&l| l <= 1));
        }
    }

    #[test]
    fn split_ids_are_disjoint() {
        let spec = small();
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for s in generate(&spec, split).unwrap() {
                assert!(seen.insert(s.id));
            }
        }
        let t0 = generate_sample(&spec, Split::Train, 0).unwrap();
        let v0 = generate_sample(&spec, Split::Val, 0).unwrap();
        assert_ne!(t0.image, v0.image);
    }

    #[test]
    fn identity_augmentation() {
        let s = generate_sample(&small(), Split::Train, 1).unwrap();
        assert_eq!(augment_with(&s, AugmentParams::IDENTITY).unwrap(), s);
    }

    #[test]
    fn flip_mirrors_image_and_mask() {
        let s = generate_sample(&small(), Split::Train, 2).unwrap();
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let f = augment_with(&s, flip).unwrap();
        let (h, w) = (24, 20);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(f.mask.get(y, x), s.mask.get(y, w - 1 - x));
                for ch in 0..3 {
                    assert_eq!(f.image.get(&[ch, y, x]), s.image.get(&[ch, y, w - 1 - x]));
                }
            }
        }
        assert_eq!(augment_with(&f, flip).unwrap(), s);
    }

    #[test]
    fn upscale_center_crop_keeps_labels() {
        let s = generate_sample(&small(), Split::Train, 3).unwrap();
        let p = AugmentParams {
            flip: false,
            scale: 2.0,
            offset_y: 12,
            offset_x: 10,
        };
        let a = augment_with(&s, p).unwrap();
        let originals: HashSet<u8> = s.mask.data().iter().copied().collect();
        assert!(a.mask.data().iter().all(|l| originals.contains(l)));
        // pixel (0,0) of the crop samples source (6,5)
        assert_eq!(a.mask.get(0, 0), s.mask.get(6, 5));
    }

    #[test]
    fn downscale_pads_with_ignore() {
        let s = generate_sample(&small(), Split::Train, 4).unwrap();
        let p = AugmentParams {
            flip: false,
            scale: 0.5,
            offset_y: -3,
            offset_x: 0,
        };
        let a = augment_with(&s, p).unwrap();
        assert_eq!(a.mask.get(0, 0), IGNORE_LABEL);
        assert_eq!(a.image.get(&[0, 0, 0]), Some(0.0));
        assert_eq!(a.mask.get(23, 19), IGNORE_LABEL);
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let spec = small();
        let samples = generate(&spec, Split::Val).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), &spec, Split::Val, &samples).unwrap();
        let (manifest, back) = read_split(dir.path(), Split::Val).unwrap();
        assert_eq!(manifest.ids.len(), 3);
        assert_eq!(back, samples);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::SeedableRng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn augmentation_never_invents_labels(index in 0usize..6, seed in any::<u64>()) {
                let s = generate_sample(&small(), Split::Train, index).unwrap();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let a = augment(&s, &mut rng).unwrap();
                let originals: HashSet<u8> = s.mask.data().iter().copied().collect();
                prop_assert!(a.mask.data().iter().all(|l| *l == IGNORE_LABEL || originals.contains(l)));
                prop_assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
