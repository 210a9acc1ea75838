//! Class-incremental streams with repetition.
//!
//! A stream is an ordered list of [`Experience`]s. Each experience holds a
//! labeled portion whose classes are a mix of previously seen and new classes,
//! and an unlabeled portion drawn according to an [`UnlabeledScenario`].
//! Images come either from the procedural generator ([`synth_image`]) or from
//! a dataset file loaded with [`ingest_dataset`].

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::checkpoint::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A square grayscale image with values in `[0, 1]`.
pub type Image = Array<f64>;

const TEST_SEED_BIT: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnlabeledScenario {
    /// Same classes as the experience's labeled data.
    SameExperience,
    /// Any class of the labeled stream.
    InStream,
    /// Any class at all, including those never labeled.
    RandomAny,
}

impl fmt::Display for UnlabeledScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SameExperience => "same-experience",
            Self::InStream => "in-stream",
            Self::RandomAny => "random-any",
        })
    }
}

impl FromStr for UnlabeledScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same-experience" => Ok(Self::SameExperience),
            "in-stream" => Ok(Self::InStream),
            "random-any" => Ok(Self::RandomAny),
            _ => Err(Error::Config(format!(
                "unknown unlabeled scenario `{s}` (same-experience, in-stream, random-any)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub total_classes: usize,
    pub labeled_classes: usize,
    pub num_experiences: usize,
    pub labeled_per_exp: usize,
    pub unlabeled_per_exp: usize,
    pub classes_per_exp: usize,
    pub repetition_probability: f64,
    pub unlabeled_scenario: UnlabeledScenario,
    pub image_side: usize,
    /// Standard deviation of the per-pixel noise of synthetic images.
    pub noise: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            total_classes: 16,
            labeled_classes: 12,
            num_experiences: 10,
            labeled_per_exp: 128,
            unlabeled_per_exp: 256,
            classes_per_exp: 2,
            repetition_probability: 0.5,
            unlabeled_scenario: UnlabeledScenario::InStream,
            image_side: 16,
            noise: 0.35,
            seed: 0,
        }
    }
}

impl StreamConfig {
    /// Sizes of the original challenge stream, at the desk image resolution.
    pub fn challenge() -> Self {
        Self {
            total_classes: 130,
            labeled_classes: 100,
            num_experiences: 50,
            labeled_per_exp: 500,
            unlabeled_per_exp: 1000,
            classes_per_exp: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_experiences == 0 || self.classes_per_exp == 0 || self.labeled_classes == 0 {
            return fail("experiences, classes and classes_per_exp must be positive".into());
        }
        if self.labeled_classes > self.total_classes {
            return fail(format!(
                "labeled_classes {} exceeds total_classes {}",
                self.labeled_classes, self.total_classes
            ));
        }
        if self.classes_per_exp > self.labeled_classes {
            return fail(format!(
                "classes_per_exp {} exceeds labeled_classes {}",
                self.classes_per_exp, self.labeled_classes
            ));
        }
        if self.labeled_per_exp < self.classes_per_exp {
            return fail(format!(
                "labeled_per_exp {} cannot cover {} classes",
                self.labeled_per_exp, self.classes_per_exp
            ));
        }
        if !(0.0..=1.0).contains(&self.repetition_probability) {
            return fail(format!(
                "repetition_probability {} outside [0, 1]",
                self.repetition_probability
            ));
        }
        let slots = self.num_experiences * self.classes_per_exp;
        if slots < self.labeled_classes {
            return fail(format!(
                "{slots} class slots cannot cover {} labeled classes",
                self.labeled_classes
            ));
        }
        if self.repetition_probability == 0.0 && slots > self.labeled_classes {
            return fail(format!(
                "repetition disabled but {slots} class slots exceed {} classes; \
                 set num_experiences * classes_per_exp == labeled_classes",
                self.labeled_classes
            ));
        }
        if self.image_side < 2 {
            return fail("image_side must be at least 2".into());
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return fail("noise must be non-negative".into());
        }
        Ok(())
    }
}

/// One unit of the stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub index: usize,
    labeled: Vec<(Image, usize)>,
    unlabeled: Vec<Image>,
    unlabeled_truth: Vec<usize>,
    present_classes: BTreeSet<usize>,
}

impl Experience {
    pub fn labeled(&self) -> &[(Image, usize)] {
        &self.labeled
    }

    /// Unlabeled images. Their classes are not exposed here.
    pub fn unlabeled(&self) -> &[Image] {
        &self.unlabeled
    }

    pub fn present_classes(&self) -> &BTreeSet<usize> {
        &self.present_classes
    }

    /// Hidden classes of the unlabeled images, for diagnostics only.
    pub fn diagnostic_unlabeled_classes(&self) -> &[usize] {
        &self.unlabeled_truth
    }
}

/// A class-indexed set of images loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStore {
    pub side: usize,
    pub by_class: Vec<Vec<Image>>,
}

impl ImageStore {
    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn len(&self) -> usize {
        self.by_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Training draws use the leading 80% of a class, test draws the rest.
    fn pick(&self, class_id: usize, instance_seed: u64) -> Image {
        let imgs = &self.by_class[class_id];
        let split = if imgs.len() >= 2 {
            (imgs.len() * 4 / 5).clamp(1, imgs.len() - 1)
        } else {
            imgs.len()
        };
        let raw = instance_seed & !TEST_SEED_BIT;
        let idx = if instance_seed & TEST_SEED_BIT != 0 && split < imgs.len() {
            split + (raw % (imgs.len() - split) as u64) as usize
        } else {
            (raw % split as u64) as usize
        };
        imgs[idx].clone()
    }
}

/// Where stream images come from.
#[derive(Clone, Debug, Default)]
pub enum ImageSource {
    #[default]
    Synthetic,
    Store(Arc<ImageStore>),
}

impl ImageSource {
    fn check(&self, config: &StreamConfig) -> Result<()> {
        if let ImageSource::Store(store) = self {
            if store.side != config.image_side {
                return Err(Error::Config(format!(
                    "dataset images are {0}x{0}, config expects {1}x{1}",
                    store.side, config.image_side
                )));
            }
            let needed = match config.unlabeled_scenario {
                UnlabeledScenario::RandomAny => config.total_classes,
                _ => config.labeled_classes,
            };
            if store.num_classes() < needed {
                return Err(Error::Config(format!(
                    "dataset has {} classes, stream needs {needed}",
                    store.num_classes()
                )));
            }
            if let Some(c) = (0..needed).find(|&c| store.by_class[c].is_empty()) {
                return Err(Error::Config(format!("dataset has no images of class {c}")));
            }
        }
        Ok(())
    }

    pub fn image(&self, class_id: usize, instance_seed: u64, config: &StreamConfig) -> Image {
        match self {
            ImageSource::Synthetic => synth_image(class_id, instance_seed, config.image_side, config.noise),
            ImageSource::Store(store) => store.pick(class_id, instance_seed),
        }
    }
}

/// Procedural image of class `class_id`.
///
/// Each class owns an oriented sinusoidal stripe pattern and an off-center
/// blob; instances add contrast jitter and Gaussian pixel noise. The blob
/// makes every class pattern orientation-bearing.
pub fn synth_image(class_id: usize, instance_seed: u64, side: usize, noise: f64) -> Image {
    let mut proto = ChaCha8Rng::seed_from_u64(0xC1A5_5000_0000_0000 ^ class_id as u64);
    let theta = proto.random_range(0.0..PI);
    let freq = proto.random_range(1.0..3.0);
    let phase = proto.random_range(0.0..2.0 * PI);
    let bx = proto.random_range(0.15..0.85) * side as f64;
    let by = proto.random_range(0.15..0.85) * side as f64;
    let sigma = 0.15 * side as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
    rng.set_stream(class_id as u64);
    let contrast = rng.random_range(0.8..1.2);
    let (s, c) = theta.sin_cos();
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (xf, yf) = (x as f64, y as f64);
            let stripe = (2.0 * PI * freq * (xf * c + yf * s) / side as f64 + phase).sin();
            let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
            let blob = (-d2 / (2.0 * sigma * sigma)).exp();
            let eps: f64 = rng.sample(StandardNormal);
            let v = 0.4 + contrast * (0.25 * stripe + 0.45 * blob) + noise * eps;
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Array::new(vec![side, side], data).expect("square image")
}

/// Rotates counter-clockwise by `90 * k` degrees, `k` in `0..4`.
pub fn rotate_image(image: &Image, k: usize) -> Result<Image> {
    if k > 3 {
        return Err(Error::Invalid(format!("rotation index {k} not in 0..4")));
    }
    image.rotate90(k)
}

/// Flattens images into a `[batch, side * side]` array.
pub fn stack_images<S: Scalar>(images: &[&Image]) -> Result<Array<S>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let dim = first.len();
    let mut data = Vec::with_capacity(images.len() * dim);
    for img in images {
        if img.len() != dim {
            return Err(Error::shape("stack_images", first.shape(), img.shape()));
        }
        data.extend(img.data().iter().map(|&v| S::lit(v)));
    }
    Array::new(vec![images.len(), dim], data)
}

fn class_schedule(config: &StreamConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let k = config.classes_per_exp;
    let mut unseen: Vec<usize> = (0..config.labeled_classes).collect();
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut schedule = Vec::with_capacity(config.num_experiences);
    for t in 0..config.num_experiences {
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        for slot in 0..k {
            let slots_left = (config.num_experiences - t) * k - slot;
            let force_new = !unseen.is_empty() && unseen.len() >= slots_left;
            let old: Vec<usize> = seen.iter().copied().filter(|c| !chosen.contains(c)).collect();
            let draw_old = rng.random_bool(config.repetition_probability);
            let take_old = !old.is_empty() && !force_new && (unseen.is_empty() || draw_old);
            let class = if take_old {
                old[rng.random_range(0..old.len())]
            } else {
                unseen.swap_remove(rng.random_range(0..unseen.len()))
            };
            chosen.push(class);
        }
        seen.extend(chosen.iter().copied());
        schedule.push(chosen);
    }
    schedule
}

/// Builds the full stream, deterministically from `config.seed`.
pub fn generate_stream(config: &StreamConfig, source: &ImageSource) -> Result<Vec<Experience>> {
    config.validate()?;
    source.check(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schedule = class_schedule(config, &mut rng);

    let mut out = Vec::with_capacity(schedule.len());
    for (t, classes) in schedule.into_iter().enumerate() {
        let mut labels: Vec<usize> = (0..config.labeled_per_exp)
            .map(|i| classes[i % classes.len()])
            .collect();
        labels.shuffle(&mut rng);
        let labeled = labels
            .iter()
            .map(|&y| {
                let seed = rng.random::<u64>() & !TEST_SEED_BIT;
                (source.image(y, seed, config), y)
            })
            .collect();

        let mut unlabeled = Vec::with_capacity(config.unlabeled_per_exp);
        let mut truth = Vec::with_capacity(config.unlabeled_per_exp);
        for _ in 0..config.unlabeled_per_exp {
            let y = match config.unlabeled_scenario {
                UnlabeledScenario::SameExperience => classes[rng.random_range(0..classes.len())],
                UnlabeledScenario::InStream => rng.random_range(0..config.labeled_classes),
                UnlabeledScenario::RandomAny => rng.random_range(0..config.total_classes),
            };
            let seed = rng.random::<u64>() & !TEST_SEED_BIT;
            unlabeled.push(source.image(y, seed, config));
            truth.push(y);
        }

        out.push(Experience {
            index: t,
            labeled,
            unlabeled,
            unlabeled_truth: truth,
            present_classes: classes.into_iter().collect(),
        });
    }
    Ok(out)
}

/// Held-out labeled samples, `per_class` for each labeled class. Instance
/// seeds never collide with training draws.
pub fn test_set(config: &StreamConfig, source: &ImageSource, per_class: usize) -> Result<Vec<(Image, usize)>> {
    config.validate()?;
    source.check(config)?;
    if per_class == 0 {
        return Err(Error::Config("test set needs at least one sample per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7E57_7E57_7E57_7E57);
    let mut out = Vec::with_capacity(per_class * config.labeled_classes);
    for y in 0..config.labeled_classes {
        for _ in 0..per_class {
            let seed = rng.random::<u64>() | TEST_SEED_BIT;
            out.push((source.image(y, seed, config), y));
        }
    }
    Ok(out)
}

pub const DATASET_MAGIC: &[u8; 4] = b"CIRD";
pub const DATASET_VERSION: u32 = 1;

/// Serializes labeled grayscale images (pixels quantized to bytes).
pub fn encode_dataset(side: usize, num_classes: usize, records: &[(Image, usize)]) -> Result<Vec<u8>> {
    let side16 = u16::try_from(side).map_err(|_| Error::Invalid("side exceeds u16".into()))?;
    let classes16 = u16::try_from(num_classes).map_err(|_| Error::Invalid("class count exceeds u16".into()))?;
    let mut w = ByteWriter::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.len32(records.len());
    w.u16(side16);
    w.u16(classes16);
    for (img, label) in records {
        if img.shape() != [side, side] {
            return Err(Error::shape("encode_dataset", img.shape(), &[side, side]));
        }
        if *label >= num_classes {
            return Err(Error::Invalid(format!("label {label} out of range")));
        }
        w.u16(*label as u16);
        w.buf
            .extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ImageStore> {
    let mut r = ByteReader::new("dataset", bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let count = r.usize()?;
    let side = r.u16()? as usize;
    let num_classes = r.u16()? as usize;
    if side == 0 || num_classes == 0 {
        return r.fail("side and class count must be positive");
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for i in 0..count {
        let at = r.pos();
        let label = r.u16()? as usize;
        if label >= num_classes {
            return Err(Error::Format {
                kind: "dataset",
                offset: at,
                msg: format!("record {i}: label {label} >= {num_classes} classes"),
            });
        }
        let pixels = r.take(side * side)?;
        let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
        by_class[label].push(Array::new(vec![side, side], data)?);
    }
    r.finish()?;
    Ok(ImageStore { side, by_class })
}

pub fn ingest_dataset(path: &Path) -> Result<ImageStore> {
    decode_dataset(&fs::read(path)?)
}

pub fn write_dataset(path: &Path, side: usize, num_classes: usize, records: &[(Image, usize)]) -> Result<()> {
    fs::write(path, encode_dataset(side, num_classes, records)?)?;
    Ok(())
}
