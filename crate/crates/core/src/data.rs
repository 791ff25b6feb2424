//! Labeled image datasets: binary file format and the synthetic generator.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic     b"S2IL"
//! version   u16
//! samples   u32   classes u16   channels u16   height u16   width u16
//! per sample: label u16, split u8 (0 = train, 1 = test), pixels f32 × C·H·W
//! ```

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DATASET_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"S2IL";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images stored sample-major; a sample's id is its index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    labels: Vec<u16>,
    splits: Vec<Split>,
    pixels: Vec<f32>,
}

impl Dataset {
    pub fn new(classes: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if classes == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config("dataset dimensions must be nonzero".into()));
        }
        if classes > u16::MAX as usize + 1 {
            return Err(Error::Config(format!("{classes} classes do not fit a u16 label")));
        }
        Ok(Dataset {
            classes,
            channels,
            height,
            width,
            labels: Vec::new(),
            splits: Vec::new(),
            pixels: Vec::new(),
        })
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, label: u16, split: Split, image: &[f32]) -> Result<()> {
        if label as usize >= self.classes {
            return Err(Error::contract(format!("label {label} outside {} classes", self.classes)));
        }
        if image.len() != self.image_len() {
            return Err(Error::dim(
                "dataset",
                format!("image of {} values, expected {}", image.len(), self.image_len()),
            ));
        }
        self.labels.push(label);
        self.splits.push(split);
        self.pixels.extend_from_slice(image);
        Ok(())
    }

    pub fn label(&self, id: usize) -> u16 {
        self.labels[id]
    }

    pub fn split(&self, id: usize) -> Split {
        self.splits[id]
    }

    pub fn image(&self, id: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[id * n..(id + 1) * n]
    }

    /// Ids of one split carrying `label`, ascending.
    pub fn ids_of(&self, label: u16, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == label && self.splits[i] == split)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.len() * (3 + 4 * self.image_len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for v in [self.classes - 1, self.channels, self.height, self.width] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        for id in 0..self.len() {
            out.extend_from_slice(&self.labels[id].to_le_bytes());
            out.push(match self.splits[id] {
                Split::Train => 0,
                Split::Test => 1,
            });
            for p in self.image(id) {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::contract(format!("dataset: {d}"));
        if buf.len() < 18 || &buf[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
        let version = u16_at(4);
        if version != DATASET_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        // Stored as classes - 1 so that 65536 labels fit.
        let classes = u16_at(10) as usize + 1;
        let (channels, height, width) = (u16_at(12) as usize, u16_at(14) as usize, u16_at(16) as usize);
        let mut ds = Dataset::new(classes, channels, height, width).map_err(|e| bad(&e.to_string()))?;
        let rec = 3 + 4 * ds.image_len();
        if buf.len() != 18 + n * rec {
            return Err(bad(&format!("expected {} bytes for {n} samples, found {}", 18 + n * rec, buf.len())));
        }
        let mut image = vec![0f32; ds.image_len()];
        for chunk in buf[18..].chunks_exact(rec) {
            let label = u16::from_le_bytes([chunk[0], chunk[1]]);
            let split = match chunk[2] {
                0 => Split::Train,
                1 => Split::Test,
                s => return Err(bad(&format!("unknown split flag {s}"))),
            };
            for (p, b) in image.iter_mut().zip(chunk[3..].chunks_exact(4)) {
                *p = f32::from_le_bytes(b.try_into().unwrap());
            }
            ds.push(label, split, &image)?;
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Parameters of the procedural image generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Std of the additive pixel noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 10,
            per_class: 100,
            size: 32,
            seed: 0,
            noise: 0.25,
        }
    }
}

/// Class-dependent textures: a grating whose orientation and frequency are
/// set by the class, plus a Gaussian blob at a class-specific spot. Phase,
/// small angle jitter and blob strength vary per sample; Gaussian noise is
/// added on top. The first 80% of every class's samples are training data.
pub fn generate_synthetic(synth: &SyntheticConfig) -> Result<Dataset> {
    if synth.classes < 2 {
        return Err(Error::Config("synthetic data needs at least two classes".into()));
    }
    if synth.per_class < 2 || synth.size < 4 {
        return Err(Error::Config("need at least 2 samples per class and 4px images".into()));
    }
    let noise = Normal::new(0.0, synth.noise).map_err(|e| Error::Config(format!("noise std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(synth.seed);
    let mut ds = Dataset::new(synth.classes, 1, synth.size, synth.size)?;
    let s = synth.size as f64;
    let n_train = (synth.per_class * 4) / 5;
    let orientations = synth.classes.div_ceil(2).max(2);
    let mut image = vec![0f32; synth.size * synth.size];
    for c in 0..synth.classes {
        let theta = PI * (c % orientations) as f64 / orientations as f64;
        let freq = if c < orientations { 3.0 } else { 5.5 };
        let golden = 0.618_033_988_75 * c as f64;
        let (bx, by) = (0.25 + 0.5 * golden.fract(), 0.25 + 0.5 * (golden * 2.7).fract());
        for i in 0..synth.per_class {
            let phase = rng.random_range(0.0..2.0 * PI);
            let jitter = rng.random_range(-0.08..0.08);
            let blob = rng.random_range(0.4..0.9);
            let (ct, st) = ((theta + jitter).cos(), (theta + jitter).sin());
            for y in 0..synth.size {
                for x in 0..synth.size {
                    let (u, v) = (x as f64 / s, y as f64 / s);
                    let grating = 0.5 + 0.5 * (2.0 * PI * freq * (u * ct + v * st) + phase).sin();
                    let d2 = (u - bx).powi(2) + (v - by).powi(2);
                    let spot = blob * (-d2 / 0.02).exp();
                    image[y * synth.size + x] = (0.6 * grating + spot + noise.sample(&mut rng)) as f32;
                }
            }
            let split = if i < n_train { Split::Train } else { Split::Test };
            ds.push(c as u16, split, &image)?;
        }
    }
    Ok(ds)
}
