//! Deterministic synthetic segmentation scenes, labeled/unlabeled splits,
//! paired random augmentations and mini-batch sampling.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor4;
use crate::error::{Error, Result};
use crate::metrics::Mask;

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_semi_axis: f32,
    pub max_semi_axis: f32,
    pub fg_mean: f32,
    pub bg_mean: f32,
    pub texture_sigma: f32,
    /// Box-blur radius of the texture field before rescaling to
    /// `texture_sigma`; 0 gives independent pixel noise.
    pub texture_radius: usize,
    pub margin: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 64,
            min_shapes: 1,
            max_shapes: 3,
            min_semi_axis: 4.0,
            max_semi_axis: 12.0,
            fg_mean: 0.7,
            bg_mean: 0.3,
            texture_sigma: 0.1,
            texture_radius: 1,
            margin: 4,
        }
    }
}

struct Ellipse {
    cy: f32,
    cx: f32,
    a: f32,
    b: f32,
    cos: f32,
    sin: f32,
}

impl Ellipse {
    fn contains(&self, y: f32, x: f32) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Zero-mean Gaussian field with marginal standard deviation `sigma`.
fn texture_field(size: usize, sigma: f32, radius: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let unit = Normal::new(0.0f32, 1.0).expect("valid normal");
    let raw: Vec<f32> = (0..size * size).map(|_| unit.sample(rng)).collect();
    if radius == 0 {
        return raw.into_iter().map(|v| v * sigma).collect();
    }
    let r = radius as isize;
    let n = size as isize;
    let mut blurred = vec![0.0f32; size * size];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0f32;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = ((y + dy).rem_euclid(n), (x + dx).rem_euclid(n));
                    acc += raw[(sy * n + sx) as usize];
                }
            }
            blurred[(y * n + x) as usize] = acc;
        }
    }
    // A (2r+1)^2 box sum of unit normals has variance (2r+1)^2.
    let norm = sigma / (2 * radius + 1) as f32;
    blurred.into_iter().map(|v| v * norm).collect()
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(4) {
            return Err(Error::config("image_size", "must be a positive multiple of 4"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::config("shapes", "need 1 <= min_shapes <= max_shapes"));
        }
        let extent = 2.0 * (self.max_semi_axis + self.margin as f32);
        if self.min_semi_axis < 1.0 || self.min_semi_axis > self.max_semi_axis || extent >= self.size as f32 {
            return Err(Error::config("semi_axis", "ellipses must fit inside the margin"));
        }
        Ok(())
    }

    /// Scene number `index` of the stream identified by `seed`.
    pub fn generate(&self, seed: u64, index: u64) -> (Image, Mask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let n = self.size;
        let count = rng.gen_range(self.min_shapes..=self.max_shapes);
        let shapes: Vec<Ellipse> = (0..count)
            .map(|_| {
                let a = rng.gen_range(self.min_semi_axis..=self.max_semi_axis);
                let b = rng.gen_range(self.min_semi_axis..=self.max_semi_axis);
                let reach = a.max(b) + self.margin as f32;
                let hi = n as f32 - 1.0 - reach;
                let theta = rng.gen_range(0.0..std::f32::consts::PI);
                Ellipse {
                    cy: rng.gen_range(reach..=hi),
                    cx: rng.gen_range(reach..=hi),
                    a,
                    b,
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            })
            .collect();
        let mask = Mask::from_fn(n, n, |y, x| shapes.iter().any(|e| e.contains(y as f32, x as f32)));
        let texture = texture_field(n, self.texture_sigma, self.texture_radius, &mut rng);
        let pixels = mask
            .bits()
            .iter()
            .zip(&texture)
            .map(|(&fg, t)| {
                let mean = if fg { self.fg_mean } else { self.bg_mean };
                (mean + t).clamp(0.0, 1.0)
            })
            .collect();
        (Image { height: n, width: n, pixels }, mask)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<Image>,
    pub test: Vec<LabeledSample>,
}

impl Dataset {
    /// Same dataset with the unlabeled pool removed.
    pub fn without_unlabeled(&self) -> Self {
        Self {
            labeled: self.labeled.clone(),
            unlabeled: Vec::new(),
            test: self.test.clone(),
        }
    }
}

pub fn labeled_count(n_train: usize, labeled_fraction: f64) -> Result<usize> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::config("labeled_fraction", format!("{labeled_fraction} outside (0, 1]")));
    }
    let count = (labeled_fraction * n_train as f64).round() as usize;
    if count == 0 {
        return Err(Error::config(
            "labeled_fraction",
            format!("{labeled_fraction} of {n_train} training images rounds to no labeled items"),
        ));
    }
    Ok(count)
}

/// Train scenes use stream indices `0..n_train`, test scenes follow them.
/// The first `round(labeled_fraction * n_train)` train scenes keep labels.
pub fn generate_dataset(
    scene: &SceneSpec,
    seed: u64,
    n_train: usize,
    n_test: usize,
    labeled_fraction: f64,
) -> Result<Dataset> {
    scene.validate()?;
    let n_labeled = labeled_count(n_train, labeled_fraction)?;
    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(n_train - n_labeled);
    for i in 0..n_train {
        let (image, mask) = scene.generate(seed, i as u64);
        if i < n_labeled {
            labeled.push(LabeledSample { image, mask });
        } else {
            unlabeled.push(image);
        }
    }
    let test = (0..n_test)
        .map(|i| {
            let (image, mask) = scene.generate(seed, (n_train + i) as u64);
            LabeledSample { image, mask }
        })
        .collect();
    Ok(Dataset { labeled, unlabeled, test })
}

/// Label-preserving geometric part of an augmentation: optional flips, then
/// `quarter_turns` counter-clockwise rotations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Geom {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl Geom {
    pub fn is_identity(&self) -> bool {
        *self == Geom::default()
    }

    fn map(&self, mut y: usize, mut x: usize, h: usize, w: usize) -> (usize, usize) {
        if self.hflip {
            x = w - 1 - x;
        }
        if self.vflip {
            y = h - 1 - y;
        }
        let (mut hh, mut ww) = (h, w);
        for _ in 0..self.quarter_turns % 4 {
            (y, x) = (ww - 1 - x, y);
            (hh, ww) = (ww, hh);
        }
        (y, x)
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Moves a row-major `h x w` grid into the transformed frame.
    pub fn apply<T: Copy + Default>(&self, data: &[T], h: usize, w: usize) -> Vec<T> {
        let (_, ow) = self.out_dims(h, w);
        let mut out = vec![T::default(); data.len()];
        for y in 0..h {
            for x in 0..w {
                let (ty, tx) = self.map(y, x, h, w);
                out[ty * ow + tx] = data[y * w + x];
            }
        }
        out
    }

    /// Moves a grid in the transformed frame back to the source frame;
    /// `h x w` are the source dims.
    pub fn invert<T: Copy + Default>(&self, data: &[T], h: usize, w: usize) -> Vec<T> {
        let (_, ow) = self.out_dims(h, w);
        let mut out = vec![T::default(); data.len()];
        for y in 0..h {
            for x in 0..w {
                let (ty, tx) = self.map(y, x, h, w);
                out[y * w + x] = data[ty * ow + tx];
            }
        }
        out
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let (h, w) = mask.dims();
        let (oh, ow) = self.out_dims(h, w);
        Mask::new(oh, ow, self.apply(mask.bits(), h, w)).expect("permutation keeps length")
    }

    pub fn invert_mask(&self, mask: &Mask, source_h: usize, source_w: usize) -> Mask {
        Mask::new(source_h, source_w, self.invert(mask.bits(), source_h, source_w)).expect("permutation keeps length")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub flip_prob: f64,
    pub noise_sigma: f32,
    pub scale_min: f32,
    pub scale_max: f32,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            noise_sigma: 0.05,
            scale_min: 0.9,
            scale_max: 1.1,
        }
    }
}

/// Every random choice of one augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub geom: Geom,
    pub noise: Vec<f32>,
    pub scale: f32,
}

impl AugmentDraw {
    pub fn identity(pixels: usize) -> Self {
        Self {
            geom: Geom::default(),
            noise: vec![0.0; pixels],
            scale: 1.0,
        }
    }

    pub fn sample(spec: &AugmentSpec, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let hflip = rng.gen_bool(spec.flip_prob);
        let vflip = rng.gen_bool(spec.flip_prob);
        let turns: u8 = rng.gen_range(0..4);
        // Non-square grids only admit half turns.
        let quarter_turns = if h == w { turns } else { turns & 2 };
        let normal = Normal::new(0.0f32, spec.noise_sigma.max(0.0)).expect("valid normal");
        let noise = (0..h * w).map(|_| normal.sample(rng)).collect();
        let scale = rng.gen_range(spec.scale_min..=spec.scale_max);
        Self {
            geom: Geom { hflip, vflip, quarter_turns },
            noise,
            scale,
        }
    }

    /// Geometry first (image and mask alike), then noise and intensity
    /// scaling on the image, then clamping to `[0, 1]`.
    pub fn apply(&self, image: &Image, mask: Option<&Mask>) -> (Image, Option<Mask>) {
        let (oh, ow) = self.geom.out_dims(image.height, image.width);
        let moved = self.geom.apply(&image.pixels, image.height, image.width);
        let pixels = moved
            .iter()
            .zip(&self.noise)
            .map(|(p, n)| ((p + n) * self.scale).clamp(0.0, 1.0))
            .collect();
        (
            Image { height: oh, width: ow, pixels },
            mask.map(|m| self.geom.apply_mask(m)),
        )
    }
}

/// Augmented copy of `image` (and `mask`, geometrically only).
pub fn augment(image: &Image, mask: Option<&Mask>, spec: &AugmentSpec, rng: &mut impl Rng) -> (Image, Option<Mask>, Geom) {
    let draw = AugmentDraw::sample(spec, image.height, image.width, rng);
    let (img, m) = draw.apply(image, mask);
    (img, m, draw.geom)
}

/// One augmented view of an image as seen by one student.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Image,
    pub geom: Geom,
    /// Ground truth moved into this view's frame (labeled items only).
    pub mask: Option<Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub clean: Image,
    pub mask: Option<Mask>,
    pub view_s1: View,
    pub view_s2: View,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Student {
    S1,
    S2,
}

impl Student {
    pub fn id(self) -> u8 {
        match self {
            Student::S1 => 1,
            Student::S2 => 2,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Student::S1 => Student::S2,
            Student::S2 => Student::S1,
        }
    }
}

impl BatchItem {
    pub fn view(&self, who: Student) -> &View {
        match who {
            Student::S1 => &self.view_s1,
            Student::S2 => &self.view_s2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegBatch {
    pub labeled: Vec<BatchItem>,
    pub unlabeled: Vec<BatchItem>,
}

fn stack(images: &[&Image]) -> Result<Tensor4> {
    let Some(first) = images.first() else {
        return Err(Error::Argument("cannot stack an empty image list".into()));
    };
    let planes: Vec<&[f32]> = images.iter().map(|i| i.pixels.as_slice()).collect();
    Tensor4::from_planes(&planes, first.height, first.width)
}

impl SegBatch {
    /// Labeled views of one student and the ground truth in that frame.
    pub fn labeled_views(&self, who: Student) -> Result<(Tensor4, Vec<Mask>)> {
        let images: Vec<&Image> = self.labeled.iter().map(|i| &i.view(who).image).collect();
        let masks = self
            .labeled
            .iter()
            .map(|i| i.view(who).mask.clone().ok_or_else(|| Error::Argument("labeled view without mask".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok((stack(&images)?, masks))
    }

    pub fn labeled_clean(&self) -> Result<(Tensor4, Vec<Mask>)> {
        let images: Vec<&Image> = self.labeled.iter().map(|i| &i.clean).collect();
        let masks = self
            .labeled
            .iter()
            .map(|i| i.mask.clone().ok_or_else(|| Error::Argument("labeled item without mask".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok((stack(&images)?, masks))
    }

    pub fn unlabeled_views(&self, who: Student) -> Result<(Tensor4, Vec<Geom>)> {
        let images: Vec<&Image> = self.unlabeled.iter().map(|i| &i.view(who).image).collect();
        let geoms = self.unlabeled.iter().map(|i| i.view(who).geom).collect();
        Ok((stack(&images)?, geoms))
    }

    pub fn unlabeled_clean(&self) -> Result<Tensor4> {
        let images: Vec<&Image> = self.unlabeled.iter().map(|i| &i.clean).collect();
        stack(&images)
    }
}

/// Visits `0..n` in shuffled epochs, reshuffling when an epoch is used up.
#[derive(Clone, Debug)]
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub labeled: usize,
    pub unlabeled: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { labeled: 2, unlabeled: 2 }
    }
}

/// Draws mini-batches and their augmentations. Labeled and unlabeled items
/// use independent random streams, so a run that never asks for unlabeled
/// items is unaffected by the unlabeled pool.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    labeled: EpochSampler,
    unlabeled: EpochSampler,
    labeled_aug: ChaCha8Rng,
    unlabeled_aug: ChaCha8Rng,
    augment: AugmentSpec,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl BatchSampler {
    pub fn new(dataset: &Dataset, seed: u64, augment: AugmentSpec) -> Self {
        Self {
            labeled: EpochSampler::new(dataset.labeled.len(), stream(seed, 1)),
            unlabeled: EpochSampler::new(dataset.unlabeled.len(), stream(seed, 2)),
            labeled_aug: stream(seed, 3),
            unlabeled_aug: stream(seed, 4),
            augment,
        }
    }

    pub fn next_batch(&mut self, dataset: &Dataset, spec: BatchSpec) -> Result<SegBatch> {
        if spec.labeled > dataset.labeled.len() {
            return Err(Error::config(
                "batch_labeled",
                format!("{} labeled items per batch, {} available", spec.labeled, dataset.labeled.len()),
            ));
        }
        if spec.unlabeled > dataset.unlabeled.len() {
            return Err(Error::config(
                "batch_unlabeled",
                format!("{} unlabeled items per batch, {} available", spec.unlabeled, dataset.unlabeled.len()),
            ));
        }
        let aug = self.augment;
        let view = |image: &Image, mask: Option<&Mask>, rng: &mut ChaCha8Rng| {
            let (image, mask, geom) = augment(image, mask, &aug, rng);
            View { image, geom, mask }
        };
        let mut batch = SegBatch::default();
        for _ in 0..spec.labeled {
            let sample = &dataset.labeled[self.labeled.next()];
            batch.labeled.push(BatchItem {
                clean: sample.image.clone(),
                mask: Some(sample.mask.clone()),
                view_s1: view(&sample.image, Some(&sample.mask), &mut self.labeled_aug),
                view_s2: view(&sample.image, Some(&sample.mask), &mut self.labeled_aug),
            });
        }
        for _ in 0..spec.unlabeled {
            let image = &dataset.unlabeled[self.unlabeled.next()];
            batch.unlabeled.push(BatchItem {
                clean: image.clone(),
                mask: None,
                view_s1: view(image, None, &mut self.unlabeled_aug),
                view_s2: view(image, None, &mut self.unlabeled_aug),
            });
        }
        Ok(batch)
    }
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::shape("write_pgm", format!("{} bytes for {width}x{height}", bytes.len())));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn image_to_bytes(image: &Image) -> Vec<u8> {
    image.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn mask_to_bytes(mask: &Mask) -> Vec<u8> {
    mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect()
}

/// Writes every image and mask of `dataset` under `dir` as PGM files.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let mut written = 0;
    let mut put_sample = |prefix: &str, i: usize, s: &LabeledSample| -> Result<()> {
        write_pgm(&dir.join(format!("{prefix}_{i:04}_image.pgm")), s.image.width, s.image.height, &image_to_bytes(&s.image))?;
        write_pgm(&dir.join(format!("{prefix}_{i:04}_mask.pgm")), s.mask.width(), s.mask.height(), &mask_to_bytes(&s.mask))?;
        written += 2;
        Ok(())
    };
    for (i, s) in dataset.labeled.iter().enumerate() {
        put_sample("labeled", i, s)?;
    }
    for (i, s) in dataset.test.iter().enumerate() {
        put_sample("test", i, s)?;
    }
    for (i, img) in dataset.unlabeled.iter().enumerate() {
        write_pgm(&dir.join(format!("unlabeled_{i:04}_image.pgm")), img.width, img.height, &image_to_bytes(img))?;
        written += 1;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec::default()
    }

    #[test]
    fn dataset_is_seeded_and_split() {
        let a = generate_dataset(&small(), 3, 20, 4, 0.1).unwrap();
        let b = generate_dataset(&small(), 3, 20, 4, 0.1).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.labeled.len(), a.unlabeled.len(), a.test.len()), (2, 18, 4));
        let c = generate_dataset(&small(), 4, 20, 4, 0.1).unwrap();
        assert_ne!(a, c);
        let full = generate_dataset(&small(), 3, 10, 1, 1.0).unwrap();
        assert!(full.unlabeled.is_empty());
        assert_eq!(labeled_count(200, 0.1).unwrap(), 20);
        assert!(matches!(generate_dataset(&small(), 3, 4, 1, 0.1), Err(Error::Config { .. })));
        assert!(labeled_count(10, 0.0).is_err());
        assert!(labeled_count(10, 1.5).is_err());
    }

    #[test]
    fn scenes_are_valid() {
        let spec = small();
        for i in 0..40 {
            let (img, mask) = spec.generate(11, i);
            assert!(!mask.is_empty());
            assert!(img.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            for y in 0..spec.size {
                for x in 0..spec.size {
                    let near_border = y < spec.margin || x < spec.margin || y >= spec.size - spec.margin || x >= spec.size - spec.margin;
                    assert!(!(near_border && mask.get(y, x)));
                }
            }
        }
    }

    #[test]
    fn foreground_is_brighter_on_average() {
        let (img, mask) = small().generate(5, 0);
        let mean = |want: bool| {
            let v: Vec<f32> = img.pixels.iter().zip(mask.bits()).filter(|(_, &b)| b == want).map(|(p, _)| *p).collect();
            v.iter().sum::<f32>() / v.len() as f32
        };
        assert!((mean(true) - 0.7).abs() < 0.05);
        assert!((mean(false) - 0.3).abs() < 0.05);
    }

    #[test]
    fn identity_draw_leaves_image_unchanged() {
        let (img, mask) = small().generate(1, 0);
        let (out, m) = AugmentDraw::identity(img.pixels.len()).apply(&img, Some(&mask));
        assert_eq!(out, img);
        assert_eq!(m.unwrap(), mask);
    }

    #[test]
    fn geometry_round_trips_and_preserves_counts() {
        let mask = Mask::from_fn(6, 6, |y, x| y * 3 + x < 7 || (y == 5 && x == 1));
        for bits in 0..16u8 {
            let geom = Geom { hflip: bits & 1 != 0, vflip: bits & 2 != 0, quarter_turns: bits >> 2 };
            let moved = geom.apply_mask(&mask);
            assert_eq!(moved.count(), mask.count());
            assert_eq!(geom.invert_mask(&moved, 6, 6), mask);
        }
        let rect = Mask::from_fn(4, 8, |y, x| x > y);
        let g = Geom { hflip: true, vflip: false, quarter_turns: 1 };
        let moved = g.apply_mask(&rect);
        assert_eq!(moved.dims(), (8, 4));
        assert_eq!(g.invert_mask(&moved, 4, 8), rect);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let g = Geom { hflip: false, vflip: false, quarter_turns: 1 };
        // Top-right corner moves to the top-left.
        let out = g.apply(&[0, 1, 0, 0], 2, 2);
        assert_eq!(out, vec![1, 0, 0, 0]);
    }

    #[test]
    fn independent_streams_give_different_views() {
        let (img, _) = small().generate(2, 0);
        let mut a = ChaCha8Rng::seed_from_u64(100);
        let mut b = ChaCha8Rng::seed_from_u64(200);
        let spec = AugmentSpec::default();
        let differing = (0..1000)
            .filter(|_| augment(&img, None, &spec, &mut a).0 != augment(&img, None, &spec, &mut b).0)
            .count();
        assert!(differing > 990, "{differing}");
    }

    #[test]
    fn sampler_covers_epochs_and_is_seeded() {
        let data = generate_dataset(&small(), 1, 30, 2, 0.2).unwrap();
        let spec = BatchSpec { labeled: 2, unlabeled: 2 };
        let mut s = BatchSampler::new(&data, 9, AugmentSpec::default());
        let batch = s.next_batch(&data, spec).unwrap();
        assert_eq!((batch.labeled.len(), batch.unlabeled.len()), (2, 2));

        let mut s = BatchSampler::new(&data, 9, AugmentSpec::default());
        let mut seen = Vec::new();
        for _ in 0..3 {
            let b = s.next_batch(&data, spec).unwrap();
            for item in &b.labeled {
                seen.push(data.labeled.iter().position(|l| l.image == item.clean).unwrap());
            }
        }
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());

        let mut s1 = BatchSampler::new(&data, 9, AugmentSpec::default());
        let mut s2 = BatchSampler::new(&data, 9, AugmentSpec::default());
        for _ in 0..5 {
            assert_eq!(s1.next_batch(&data, spec).unwrap(), s2.next_batch(&data, spec).unwrap());
        }
        let too_many = BatchSpec { labeled: 7, unlabeled: 0 };
        assert!(matches!(s1.next_batch(&data, too_many), Err(Error::Config { .. })));
    }

    #[test]
    fn labeled_views_carry_transformed_masks() {
        let data = generate_dataset(&small(), 1, 10, 0, 0.5).unwrap();
        let mut s = BatchSampler::new(&data, 3, AugmentSpec::default());
        let b = s.next_batch(&data, BatchSpec { labeled: 2, unlabeled: 1 }).unwrap();
        for item in &b.labeled {
            for who in [Student::S1, Student::S2] {
                let v = item.view(who);
                assert_eq!(v.mask.as_ref().unwrap(), &v.geom.apply_mask(item.mask.as_ref().unwrap()));
                assert_eq!(v.image.pixels.len(), item.clean.pixels.len());
            }
        }
        let (x, masks) = b.labeled_views(Student::S2).unwrap();
        assert_eq!(x.dims(), [2, 1, 64, 64]);
        assert_eq!(masks.len(), 2);
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_pgm(&path, 3, 2, &[0, 255, 0, 255, 0, 255]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
    }
}
