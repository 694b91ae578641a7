//! CIFAR-10 binary ingestion and the resize → encrypt → normalize pipeline.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crypto::{derive_permutation, encrypt_image, BlockPermutation, EncryptionKey};
use crate::error::{Error, Result};
use crate::image::{resize, ImageTensor, Interpolation, CHANNELS};
use crate::scalar::Scalar;
use crate::vit::FloatImage;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD_LEN: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Env var capping preprocessing worker threads; `0` means single-threaded.
pub const THREADS_ENV: &str = "CIPHER_VIT_THREADS";

/// One CIFAR-10 record: a label byte and 3072 channel-planar pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cifar10Record {
    pub label: u8,
    pub pixels: Vec<u8>,
}

impl Cifar10Record {
    pub fn image(&self) -> ImageTensor {
        ImageTensor::new(CIFAR_SIDE, CIFAR_SIDE, self.pixels.clone()).expect("3072 pixels")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CIFAR_RECORD_LEN);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Parses one CIFAR-10 binary batch file.
pub fn load_cifar10(path: &Path) -> Result<Vec<Cifar10Record>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(path, &bytes)
}

fn parse_records(path: &Path, bytes: &[u8]) -> Result<Vec<Cifar10Record>> {
    let whole = bytes.len() - bytes.len() % CIFAR_RECORD_LEN;
    if whole != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: whole as u64,
            reason: format!(
                "file length {} is not a multiple of {CIFAR_RECORD_LEN}",
                bytes.len()
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: (i * CIFAR_RECORD_LEN) as u64,
                    reason: format!("label {} out of range", rec[0]),
                });
            }
            Ok(Cifar10Record {
                label: rec[0],
                pixels: rec[1..].to_vec(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Which records of a split to keep.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Subset {
    /// Keep only these labels, remapped to their position in the list.
    pub classes: Option<Vec<u8>>,
    /// Keep the first `limit` records after class filtering.
    pub limit: Option<usize>,
}

fn split_files(dir: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let files: Vec<PathBuf> = match split {
        Split::Train => TRAIN_FILES
            .iter()
            .map(|f| dir.join(f))
            .filter(|p| p.exists())
            .collect(),
        Split::Test => vec![dir.join(TEST_FILE)]
            .into_iter()
            .filter(|p| p.exists())
            .collect(),
    };
    if files.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no CIFAR-10 {split:?} batch files"),
            ),
        ));
    }
    Ok(files)
}

/// Loads a split from a CIFAR-10 binary directory, in file then record order.
pub fn load_split(dir: &Path, split: Split, subset: &Subset) -> Result<Vec<Cifar10Record>> {
    let mut out = Vec::new();
    for file in split_files(dir, split)? {
        for mut rec in load_cifar10(&file)? {
            if let Some(classes) = &subset.classes {
                match classes.iter().position(|&c| c == rec.label) {
                    Some(i) => rec.label = i as u8,
                    None => continue,
                }
            }
            out.push(rec);
            if subset.limit.is_some_and(|l| out.len() >= l) {
                return Ok(out);
            }
        }
    }
    Ok(out)
}

pub fn write_cifar10(path: &Path, records: &[Cifar10Record]) -> Result<()> {
    let bytes: Vec<u8> = records.iter().flat_map(Cifar10Record::to_bytes).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Orientation of the grating for each class, in units of 18°. Classes 0
/// and 1 are orthogonal so a two-class subset is well separated.
const GRATING_STEPS: [u32; CIFAR_CLASSES] = [0, 5, 2, 7, 4, 9, 6, 1, 8, 3];

/// CIFAR-shaped stand-in data: oriented color gratings with random phase,
/// colors and pixel noise. The class sets the grating orientation. Labels
/// cycle `0..10` so every prefix is balanced.
pub fn synthetic_cifar10(n: usize, seed: u64) -> Vec<Cifar10Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 12.0).expect("positive std");
    let period = 8.0;
    (0..n)
        .map(|i| {
            let label = (i % CIFAR_CLASSES) as u8;
            let theta = GRATING_STEPS[label as usize] as f64 * std::f64::consts::PI / 10.0;
            let (s, c) = theta.sin_cos();
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let lo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..110.0));
            let hi: [f64; 3] = std::array::from_fn(|_| rng.random_range(145.0..255.0));
            let mut pixels = vec![0u8; CIFAR_PIXELS];
            for y in 0..CIFAR_SIDE {
                for x in 0..CIFAR_SIDE {
                    let u = (x as f64 * c + y as f64 * s) * std::f64::consts::TAU / period + phase;
                    let t = 0.5 + 0.5 * u.sin();
                    for ch in 0..CHANNELS {
                        let v = lo[ch] + (hi[ch] - lo[ch]) * t + noise.sample(&mut rng);
                        pixels[(ch * CIFAR_SIDE + y) * CIFAR_SIDE + x] =
                            v.round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            Cifar10Record { label, pixels }
        })
        .collect()
}

/// Writes a synthetic dataset as `data_batch_1.bin` + `test_batch.bin`.
pub fn write_synthetic_dir(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_cifar10(&dir.join(TRAIN_FILES[0]), &synthetic_cifar10(n_train, seed))?;
    write_cifar10(
        &dir.join(TEST_FILE),
        &synthetic_cifar10(n_test, seed ^ 0x5EED_7E57),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncryptionSpec {
    pub key: u64,
    pub patch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSpec {
    pub target_size: usize,
    pub interpolation: Interpolation,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encryption: Option<EncryptionSpec>,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            target_size: 224,
            interpolation: Interpolation::Bilinear,
            mean: [0.5; 3],
            std: [0.5; 3],
            encryption: None,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Parameter("target_size must be positive".into()));
        }
        if self.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Parameter(
                "normalization std must be positive".into(),
            ));
        }
        if let Some(enc) = &self.encryption {
            if enc.patch_size == 0 || !self.target_size.is_multiple_of(enc.patch_size) {
                return Err(Error::Geometry {
                    height: self.target_size,
                    width: self.target_size,
                    patch: enc.patch_size,
                });
            }
        }
        Ok(())
    }
}

/// A labeled, preprocessed image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: FloatImage<T>,
    pub label: usize,
}

/// Worker threads from [`THREADS_ENV`]; unset means all available cores.
pub fn worker_threads() -> usize {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().unwrap_or(0),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

/// Holds the one permutation derived for a run and applies the pipeline
/// to every image of every split.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    spec: PreprocessSpec,
    perm: Option<BlockPermutation>,
    derivations: usize,
}

impl Preprocessor {
    /// Validates `spec` and derives the block permutation, if any, once.
    pub fn new(spec: PreprocessSpec) -> Result<Self> {
        spec.validate()?;
        let perm = spec
            .encryption
            .map(|e| derive_permutation(EncryptionKey(e.key), e.patch_size))
            .transpose()?;
        let derivations = usize::from(perm.is_some());
        Ok(Self {
            spec,
            perm,
            derivations,
        })
    }

    pub fn spec(&self) -> &PreprocessSpec {
        &self.spec
    }

    pub fn permutation(&self) -> Option<&BlockPermutation> {
        self.perm.as_ref()
    }

    /// Number of permutation derivations this preprocessor performed.
    pub fn derivations(&self) -> usize {
        self.derivations
    }

    /// Resize then encrypt, still as 8-bit pixels.
    pub fn transform_u8(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let resized = resize(img, self.spec.target_size, self.spec.interpolation)?;
        match &self.perm {
            Some(p) => encrypt_image(&resized, p),
            None => Ok(resized),
        }
    }

    /// `(pixel/255 − mean[c]) / std[c]`.
    pub fn normalize<T: Scalar>(&self, img: &ImageTensor) -> FloatImage<T> {
        let plane = img.height() * img.width();
        let data = img
            .pixels()
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = i / plane;
                T::of((p as f64 / 255.0 - self.spec.mean[c]) / self.spec.std[c])
            })
            .collect();
        FloatImage {
            height: img.height(),
            width: img.width(),
            data,
        }
    }

    pub fn apply<T: Scalar>(&self, img: &ImageTensor) -> Result<FloatImage<T>> {
        Ok(self.normalize(&self.transform_u8(img)?))
    }

    /// Runs the pipeline over `records`. Output order always equals input
    /// order, whatever the thread count.
    pub fn prepare<T: Scalar>(&self, records: &[Cifar10Record]) -> Result<Vec<Sample<T>>> {
        let one = |r: &Cifar10Record| -> Result<Sample<T>> {
            Ok(Sample {
                image: self.apply(&r.image())?,
                label: r.label as usize,
            })
        };
        let threads = worker_threads();
        if threads <= 1 {
            return records.iter().map(one).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?;
        pool.install(|| records.par_iter().map(one).collect())
    }
}
