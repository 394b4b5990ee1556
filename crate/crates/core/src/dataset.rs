//! Labeled image datasets: synthesis, loading, disjoint partitioning and
//! geometric augmentation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image geometry: `height × width × channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        let shape = Shape {
            height,
            width,
            channels,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidShape(format!(
                "{}x{}x{} has a zero dimension",
                self.height, self.width, self.channels
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }
}

/// One labeled image. Pixels are stored row-major with channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub shape: Shape,
    pub pixels: Vec<u8>,
}

impl Sample {
    pub fn new(id: u64, label: usize, shape: Shape, pixels: Vec<u8>) -> Result<Self> {
        shape.validate()?;
        if pixels.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.len(),
                got: pixels.len(),
            });
        }
        Ok(Sample {
            id,
            label,
            shape,
            pixels,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[self.shape.index(y, x, c)]
    }

    /// Same id and label, new pixels.
    pub fn with_pixels(&self, pixels: Vec<u8>) -> Sample {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Sample {
            id: self.id,
            label: self.label,
            shape: self.shape,
            pixels,
        }
    }
}

/// An ordered collection of samples sharing one shape and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    shape: Shape,
    num_classes: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(shape: Shape, num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        shape.validate()?;
        if num_classes == 0 {
            return Err(Error::InvalidConfig("dataset needs at least one class".into()));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for (row, s) in samples.iter().enumerate() {
            if s.shape != shape || s.pixels.len() != shape.len() {
                return Err(Error::ShapeMismatch {
                    expected: shape.len(),
                    got: s.pixels.len(),
                });
            }
            if s.label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: s.label,
                    num_classes,
                });
            }
            if !seen.insert(s.id) {
                return Err(Error::InvalidConfig(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Dataset {
            shape,
            num_classes,
            samples,
        })
    }

    pub fn empty(shape: Shape, num_classes: usize) -> Result<Self> {
        Dataset::new(shape, num_classes, Vec::new())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.iter().map(|s| s.id)
    }

    /// New dataset holding clones of the samples at `indices`.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Seeded split into `(first, rest)` where `first` holds
    /// `round(fraction · len)` samples, stratified by class.
    pub fn split_stratified(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut first = Vec::new();
        let mut rest = Vec::new();
        for class_indices in self.indices_by_class() {
            let mut idx = class_indices;
            idx.shuffle(&mut rng);
            let take = ((idx.len() as f64) * fraction).round() as usize;
            first.extend_from_slice(&idx[..take.min(idx.len())]);
            rest.extend_from_slice(&idx[take.min(idx.len())..]);
        }
        first.sort_unstable();
        rest.sort_unstable();
        (self.select(&first), self.select(&rest))
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        by_class
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }
}

/// `n` pairwise-disjoint subsets of a member set plus the id → subset map.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    subsets: Vec<Dataset>,
    origin: HashMap<u64, usize>,
}

impl Partition {
    /// Builds a partition from explicit subsets, checking disjointness.
    pub fn from_subsets(subsets: Vec<Dataset>) -> Result<Self> {
        if subsets.is_empty() {
            return Err(Error::InvalidPartition("no subsets".into()));
        }
        let shape = subsets[0].shape();
        let mut origin = HashMap::new();
        for (i, subset) in subsets.iter().enumerate() {
            if subset.shape() != shape {
                return Err(Error::InvalidPartition("subsets disagree on shape".into()));
            }
            for id in subset.ids() {
                if origin.insert(id, i).is_some() {
                    return Err(Error::InvalidPartition(format!(
                        "sample {id} appears in more than one subset"
                    )));
                }
            }
        }
        Ok(Partition { subsets, origin })
    }

    pub fn subsets(&self) -> &[Dataset] {
        &self.subsets
    }

    pub fn num_subsets(&self) -> usize {
        self.subsets.len()
    }

    pub fn origin(&self, id: u64) -> Option<usize> {
        self.origin.get(&id).copied()
    }

    pub fn origin_map(&self) -> &HashMap<u64, usize> {
        &self.origin
    }

    pub fn total_len(&self) -> usize {
        self.subsets.iter().map(Dataset::len).sum()
    }

    /// Every member with its subset index, subset-major.
    pub fn members(&self) -> impl Iterator<Item = (&Sample, usize)> + '_ {
        self.subsets
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.iter().map(move |s| (s, i)))
    }

    /// Restricts every subset to a seeded `fraction` of its samples
    /// (at least one per nonempty subset), keeping subset indices.
    pub fn sample_fraction(&self, fraction: f64, seed: u64) -> Partition {
        let subsets: Vec<Dataset> = self
            .subsets
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
                let mut idx: Vec<usize> = (0..d.len()).collect();
                idx.shuffle(&mut rng);
                let mut take = ((d.len() as f64) * fraction).round() as usize;
                if !d.is_empty() {
                    take = take.clamp(1, d.len());
                }
                let mut chosen = idx[..take].to_vec();
                chosen.sort_unstable();
                d.select(&chosen)
            })
            .collect();
        Partition::from_subsets(subsets).expect("restriction of a partition stays disjoint")
    }
}

/// Splits `d` into `n` disjoint subsets by stratified, shuffled round-robin.
///
/// Within each class the samples are shuffled, then classes are dealt in
/// order to subsets `0, 1, …, n-1, 0, …` with one running counter, so every
/// subset receives `floor(|d|/n)` or `ceil(|d|/n)` samples and each class is
/// spread within one sample of its ideal share.
pub fn partition_disjoint(d: &Dataset, n: usize, seed: u64) -> Result<Partition> {
    if n < 2 {
        return Err(Error::InvalidPartition(format!("need at least 2 subsets, got {n}")));
    }
    if d.len() < n {
        return Err(Error::InvalidPartition(format!(
            "{} samples cannot fill {n} subsets",
            d.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut next = 0usize;
    for mut class_indices in d.indices_by_class() {
        class_indices.shuffle(&mut rng);
        for i in class_indices {
            buckets[next % n].push(i);
            next += 1;
        }
    }
    let subsets = buckets
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            d.select(&idx)
        })
        .collect();
    Partition::from_subsets(subsets)
}

/// Random geometric augmentation ranges, in the style of common image
/// data generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub horizontal_flip: bool,
    /// Maximum horizontal shift as a fraction of the width.
    pub width_shift: f64,
    /// Maximum vertical shift as a fraction of the height.
    pub height_shift: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Zoom factor drawn from `[1 - zoom, 1 + zoom]`.
    pub zoom: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams::identity()
    }
}

impl AugmentParams {
    pub const fn identity() -> Self {
        AugmentParams {
            horizontal_flip: false,
            width_shift: 0.0,
            height_shift: 0.0,
            rotation_deg: 0.0,
            zoom: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shift_ok = |v: f64| (0.0..1.0).contains(&v);
        if !shift_ok(self.width_shift) || !shift_ok(self.height_shift) {
            return Err(Error::InvalidConfig("shifts must lie in [0, 1)".into()));
        }
        if !(-180.0..=180.0).contains(&self.rotation_deg) {
            return Err(Error::InvalidConfig("rotation must lie in [-180, 180]".into()));
        }
        if !(self.zoom >= 0.0) {
            return Err(Error::InvalidConfig("zoom must be non-negative".into()));
        }
        Ok(())
    }
}

/// A concrete affine warp about the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warp {
    pub flip: bool,
    pub shift_x: f64,
    pub shift_y: f64,
    pub angle_deg: f64,
    pub scale: f64,
}

impl Warp {
    pub const IDENTITY: Warp = Warp {
        flip: false,
        shift_x: 0.0,
        shift_y: 0.0,
        angle_deg: 0.0,
        scale: 1.0,
    };

    pub fn rotation(angle_deg: f64) -> Warp {
        Warp {
            angle_deg,
            ..Warp::IDENTITY
        }
    }
}

/// Draws a warp from `p` and applies it. Deterministic for a fixed seed.
pub fn augment(s: &Sample, p: &AugmentParams, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let symmetric = |rng: &mut ChaCha8Rng, bound: f64| {
        if bound > 0.0 {
            rng.random_range(-bound..=bound)
        } else {
            0.0
        }
    };
    let flip = p.horizontal_flip && rng.random_bool(0.5);
    let shift_x = symmetric(&mut rng, p.width_shift) * s.shape.width as f64;
    let shift_y = symmetric(&mut rng, p.height_shift) * s.shape.height as f64;
    let angle_deg = symmetric(&mut rng, p.rotation_deg);
    let scale = 1.0 + symmetric(&mut rng, p.zoom);
    warp(
        s,
        &Warp {
            flip,
            shift_x,
            shift_y,
            angle_deg,
            scale,
        },
    )
}

/// Applies `w` with bilinear sampling; out-of-frame reads replicate the
/// nearest edge pixel.
pub fn warp(s: &Sample, w: &Warp) -> Sample {
    let shape = s.shape;
    let (h, wd, ch) = (shape.height, shape.width, shape.channels);
    let cx = (wd as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let theta = w.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let scale = if w.scale > 0.0 { w.scale } else { 1.0 };
    let mut out = vec![0u8; s.pixels.len()];
    let mut acc = vec![0.0f64; ch];
    for y in 0..h {
        for x in 0..wd {
            // inverse map: undo shift, then scale, then rotation
            let qx = (x as f64 - cx - w.shift_x) / scale;
            let qy = (y as f64 - cy - w.shift_y) / scale;
            let mut sx = cos * qx + sin * qy + cx;
            let sy = -sin * qx + cos * qy + cy;
            if w.flip {
                sx = (wd as f64 - 1.0) - sx;
            }
            bilinear(s, sx, sy, &mut acc);
            for c in 0..ch {
                out[shape.index(y, x, c)] = acc[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    s.with_pixels(out)
}

/// Rotation about the center by `angle_deg` (counter-clockwise on screen).
pub fn rotate(s: &Sample, angle_deg: f64) -> Sample {
    warp(s, &Warp::rotation(angle_deg))
}

/// Integer translation by `(dx, dy)` pixels with edge replication.
pub fn translate(s: &Sample, dx: i64, dy: i64) -> Sample {
    let shape = s.shape;
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut out = vec![0u8; s.pixels.len()];
    for y in 0..shape.height {
        let sy = clamp(y as i64 - dy, shape.height);
        for x in 0..shape.width {
            let sx = clamp(x as i64 - dx, shape.width);
            for c in 0..shape.channels {
                out[shape.index(y, x, c)] = s.at(sy, sx, c);
            }
        }
    }
    s.with_pixels(out)
}

/// Mirror across the vertical axis.
pub fn flip_horizontal(s: &Sample) -> Sample {
    let shape = s.shape;
    let mut out = vec![0u8; s.pixels.len()];
    for y in 0..shape.height {
        for x in 0..shape.width {
            for c in 0..shape.channels {
                out[shape.index(y, x, c)] = s.at(y, shape.width - 1 - x, c);
            }
        }
    }
    s.with_pixels(out)
}

fn bilinear(s: &Sample, x: f64, y: f64, out: &mut [f64]) {
    let shape = s.shape;
    let x = x.clamp(0.0, (shape.width - 1) as f64);
    let y = y.clamp(0.0, (shape.height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(shape.width - 1);
    let y1 = (y0 + 1).min(shape.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    for (c, o) in out.iter_mut().enumerate() {
        let p00 = s.at(y0, x0, c) as f64;
        let p01 = s.at(y0, x1, c) as f64;
        let p10 = s.at(y1, x0, c) as f64;
        let p11 = s.at(y1, x1, c) as f64;
        let top = p00 + (p01 - p00) * fx;
        let bottom = p10 + (p11 - p10) * fx;
        *o = top + (bottom - top) * fy;
    }
}

/// Knobs for the synthetic image generator.
///
/// Each image is `128 + class_amplitude · P_label + noise_scale · (nuisance +
/// pixel noise)`, where `P_label` is a fixed smooth per-class
/// colour pattern with zero luma, the nuisance is a per-sample smooth random
/// luminance field and
/// `noise_scale = 1 / separation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub shape: Shape,
    pub separation: f64,
    pub seed: u64,
    /// Fraction of samples whose label is replaced by a different class.
    pub label_noise: f64,
    pub class_amplitude: f64,
    pub nuisance_amplitude: f64,
    pub pixel_noise: f64,
    /// Plane waves per nuisance field.
    pub texture_waves: usize,
    /// Largest nuisance frequency, in cycles per image side.
    pub texture_max_freq: f64,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, per_class: usize, shape: Shape, separation: f64, seed: u64) -> Self {
        SyntheticSpec {
            num_classes,
            per_class,
            shape,
            separation,
            seed,
            label_noise: 0.0,
            class_amplitude: 6.0,
            nuisance_amplitude: 40.0,
            pixel_noise: 16.0,
            texture_waves: 6,
            texture_max_freq: 2.0,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.shape.validate()?;
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("synthetic data needs at least 2 classes".into()));
        }
        if self.per_class == 0 {
            return Err(Error::InvalidConfig("per_class must be at least 1".into()));
        }
        if !(self.separation > 0.0) {
            return Err(Error::InvalidConfig("separation must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::InvalidConfig("label_noise must lie in [0, 1)".into()));
        }
        if self.texture_waves == 0 || !(self.texture_max_freq > 0.0 && self.texture_max_freq.is_finite()) {
            return Err(Error::InvalidConfig("texture needs at least one wave and a positive frequency".into()));
        }
        let shape = self.shape;
        let noise_scale = if self.separation.is_infinite() {
            0.0
        } else {
            1.0 / self.separation
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let patterns: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| class_texture(shape, &mut rng))
            .collect();

        let total = self.num_classes * self.per_class;
        let mut samples = Vec::with_capacity(total);
        for i in 0..total {
            let true_class = i % self.num_classes;
            let pattern = &patterns[true_class];
            let nuisance = smooth_field(shape, self.texture_waves, self.texture_max_freq, &mut rng);
            let mut pixels = Vec::with_capacity(shape.len());
            for (p, n) in pattern.iter().zip(&nuisance) {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let v = 128.0
                    + self.class_amplitude * p
                    + noise_scale * (self.nuisance_amplitude * n + self.pixel_noise * eps);
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
            let mut label = true_class;
            if self.label_noise > 0.0 && rng.random_bool(self.label_noise) {
                let offset = rng.random_range(1..self.num_classes);
                label = (true_class + offset) % self.num_classes;
            }
            samples.push(Sample {
                id: i as u64,
                label,
                shape,
                pixels,
            });
        }
        Dataset::new(shape, self.num_classes, samples)
    }
}

/// Convenience wrapper with default generator amplitudes.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    shape: Shape,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    SyntheticSpec::new(num_classes, per_class, shape, separation, seed).generate()
}

// Class pattern: a smooth random field carried on a colour direction with
// zero luma (0.299 R + 0.587 G + 0.114 B = 0), so grayscale views of the
// image do not see it. Single-channel images carry the field directly.
// The pattern is left-right symmetric.
fn class_texture(shape: Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let field = smooth_field(shape, 6, 2.0, rng);
    let chroma: Vec<f64> = if shape.channels >= 3 {
        let a: f64 = rng.random_range(-1.0..=1.0);
        let b: f64 = rng.random_range(-1.0..=1.0);
        // two luma-null basis directions
        let u = [1.0, -0.299 / 0.587, 0.0];
        let v = [0.0, -0.114 / 0.587, 1.0];
        let mut dir: Vec<f64> = (0..3).map(|i| a * u[i] + b * v[i]).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-9);
        dir.iter_mut().for_each(|d| *d *= 3f64.sqrt() / norm);
        dir.resize(shape.channels, 0.0);
        dir
    } else {
        vec![1.0; shape.channels]
    };
    let mut out = vec![0.0; shape.len()];
    for y in 0..shape.height {
        for x in 0..shape.width {
            // mirror-symmetric, so horizontal flips preserve the class
            let mirror = shape.width - 1 - x;
            let value = 0.5 * (field[shape.index(y, x, 0)] + field[shape.index(y, mirror, 0)]) * std::f64::consts::SQRT_2;
            for (c, w) in chroma.iter().enumerate() {
                out[shape.index(y, x, c)] = value * w;
            }
        }
    }
    out
}

// Sum of random plane waves up to `max_freq` cycles, roughly unit
// amplitude, mostly shared across channels.
fn smooth_field(shape: Shape, waves: usize, max_freq: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let count = waves;
    let waves: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let fx = rng.random_range(-max_freq..=max_freq);
            let fy = rng.random_range(-max_freq..=max_freq);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp: f64 = StandardNormal.sample(rng);
            (fx, fy, phase, amp)
        })
        .collect();
    let tint: Vec<f64> = (0..shape.channels)
        .map(|_| 1.0 + 0.25 * rng.random_range(-1.0..=1.0))
        .collect();
    let norm = (count as f64 / 2.0).sqrt();
    let mut out = vec![0.0; shape.len()];
    for y in 0..shape.height {
        for x in 0..shape.width {
            let u = x as f64 / shape.width as f64;
            let v = y as f64 / shape.height as f64;
            let value: f64 = waves
                .iter()
                .map(|&(fx, fy, phase, amp)| amp * (std::f64::consts::TAU * (fx * u + fy * v) + phase).cos())
                .sum::<f64>()
                / norm;
            for (c, t) in tint.iter().enumerate() {
                out[shape.index(y, x, c)] = value * t;
            }
        }
    }
    out
}

/// On-disk dataset encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Csv,
    CifarBinary,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "cifar-binary" | "cifar" => Ok(DataFormat::CifarBinary),
            other => Err(Error::InvalidConfig(format!("unknown data format `{other}`"))),
        }
    }
}

/// Shape and class count declared alongside a data file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl DatasetSchema {
    pub fn shape(&self) -> Result<Shape> {
        Shape::new(self.height, self.width, self.channels)
    }

    pub fn of(d: &Dataset) -> Self {
        let s = d.shape();
        DatasetSchema {
            height: s.height,
            width: s.width,
            channels: s.channels,
            num_classes: d.num_classes(),
        }
    }

    /// Sidecar path for a data file: `<path>.schema.toml`.
    pub fn sidecar_path(data_path: &Path) -> std::path::PathBuf {
        let mut name = data_path.as_os_str().to_owned();
        name.push(".schema.toml");
        name.into()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Loads a dataset; sample ids follow file order starting at 0.
pub fn load_dataset(path: &Path, format: DataFormat, schema: &DatasetSchema) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    match format {
        DataFormat::Csv => read_csv(reader, schema),
        DataFormat::CifarBinary => read_cifar(reader, schema),
    }
}

/// Writes `d` in the given format; the schema sidecar is the caller's job.
pub fn save_dataset(d: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        DataFormat::Csv => write_csv(d, &mut w)?,
        DataFormat::CifarBinary => write_cifar(d, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R, schema: &DatasetSchema) -> Result<Dataset> {
    let shape = schema.shape()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let mut samples = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let row = row + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != shape.len() + 1 {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", shape.len() + 1, record.len()),
            });
        }
        let label: usize = record[0].trim().parse().map_err(|_| Error::Parse {
            row,
            message: format!("bad label `{}`", &record[0]),
        })?;
        if label >= schema.num_classes {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                num_classes: schema.num_classes,
            });
        }
        let mut pixels = Vec::with_capacity(shape.len());
        for field in record.iter().skip(1) {
            let v: u8 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                message: format!("bad pixel value `{field}`"),
            })?;
            pixels.push(v);
        }
        samples.push(Sample {
            id: samples.len() as u64,
            label,
            shape,
            pixels,
        });
    }
    Dataset::new(shape, schema.num_classes, samples)
}

pub fn write_csv<W: Write>(d: &Dataset, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = Vec::with_capacity(d.shape().len() + 1);
    header.push("label".to_string());
    header.extend((0..d.shape().len()).map(|i| format!("p{i}")));
    wtr.write_record(&header).map_err(csv_io)?;
    let mut row = Vec::with_capacity(header.len());
    for s in d.iter() {
        row.clear();
        row.push(s.label.to_string());
        row.extend(s.pixels.iter().map(u8::to_string));
        wtr.write_record(&row).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

// CIFAR records: one label byte, then each channel plane in turn.
pub fn read_cifar<R: Read>(mut reader: R, schema: &DatasetSchema) -> Result<Dataset> {
    let shape = schema.shape()?;
    let plane = shape.height * shape.width;
    let record_len = 1 + shape.len();
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() % record_len != 0 {
        let row = bytes.len() / record_len + 1;
        return Err(Error::Parse {
            row,
            message: format!(
                "truncated record: {} trailing bytes, record size {record_len}",
                bytes.len() % record_len
            ),
        });
    }
    let mut samples = Vec::with_capacity(bytes.len() / record_len);
    for (i, rec) in bytes.chunks_exact(record_len).enumerate() {
        let label = rec[0] as usize;
        if label >= schema.num_classes {
            return Err(Error::LabelOutOfRange {
                row: i + 1,
                label,
                num_classes: schema.num_classes,
            });
        }
        let planar = &rec[1..];
        let mut pixels = vec![0u8; shape.len()];
        for c in 0..shape.channels {
            for p in 0..plane {
                pixels[p * shape.channels + c] = planar[c * plane + p];
            }
        }
        samples.push(Sample {
            id: i as u64,
            label,
            shape,
            pixels,
        });
    }
    Dataset::new(shape, schema.num_classes, samples)
}

pub fn write_cifar<W: Write>(d: &Dataset, mut w: W) -> Result<()> {
    let shape = d.shape();
    let plane = shape.height * shape.width;
    if d.num_classes() > 256 {
        return Err(Error::Format("cifar-binary labels are a single byte".into()));
    }
    let mut rec = vec![0u8; 1 + shape.len()];
    for s in d.iter() {
        rec[0] = s.label as u8;
        for c in 0..shape.channels {
            for p in 0..plane {
                rec[1 + c * plane + p] = s.pixels[p * shape.channels + c];
            }
        }
        w.write_all(&rec)?;
    }
    Ok(())
}

/// Checks that the named id sets are pairwise disjoint.
pub fn audit_disjoint<'a, I>(groups: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, Vec<u64>)>,
{
    let mut owner: BTreeMap<u64, &'a str> = BTreeMap::new();
    for (name, ids) in groups {
        for id in ids {
            if let Some(prev) = owner.insert(id, name) {
                if prev != name {
                    return Err(Error::Hygiene(format!(
                        "sample {id} appears in both `{prev}` and `{name}`"
                    )));
                }
            }
        }
    }
    Ok(())
}
