//! Block-wise pixel-shuffling cipher.
//!
//! An image is cut into non-overlapping `P × P` blocks. Each block is
//! flattened to a vector of `3·P²` values in `(c, y, x)` order and the
//! vector's positions are shuffled by one keyed permutation. The same
//! permutation is applied to every block of every image.
//!
//! The permutation is a descending Fisher–Yates shuffle of `0..3P²` driven
//! by SplitMix64 seeded with the key, with `j = next_u64 mod (i + 1)`.
//! Both choices are pinned so permutation files are portable.

use std::fmt;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::scalar::Scalar;

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// The secret `K_s`. Every 64-bit value is a valid key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncryptionKey(pub u64);

impl EncryptionKey {
    /// First 16 hex digits of SHA-256 over the key's little-endian bytes.
    /// Safe to log; the key itself is never written to reports.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.0.to_le_bytes());
        hex::encode(&digest[..8])
    }
}

impl fmt::Debug for EncryptionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EncryptionKey({})", self.fingerprint())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPermutation {
    patch_size: usize,
    forward: Vec<usize>,
    inverse: Vec<usize>,
    key: Option<EncryptionKey>,
}

/// Derives the block permutation for `(key, patch_size)`.
pub fn derive_permutation(key: EncryptionKey, patch_size: usize) -> Result<BlockPermutation> {
    if patch_size == 0 {
        return Err(Error::Parameter("patch size must be at least 1".into()));
    }
    let n = CHANNELS * patch_size * patch_size;
    let mut forward: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(key.0);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        forward.swap(i, j);
    }
    let mut perm = BlockPermutation::from_forward(patch_size, forward)?;
    perm.key = Some(key);
    Ok(perm)
}

impl BlockPermutation {
    pub fn identity(patch_size: usize) -> Result<Self> {
        let n = CHANNELS * patch_size * patch_size;
        Self::from_forward(patch_size, (0..n).collect())
    }

    /// Validates that `forward` is a bijection on `0..3P²` and builds its inverse.
    pub fn from_forward(patch_size: usize, forward: Vec<usize>) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::Parameter("patch size must be at least 1".into()));
        }
        let n = CHANNELS * patch_size * patch_size;
        if forward.len() != n {
            return Err(Error::dim("permutation", &[n], &[forward.len()]));
        }
        let mut inverse = vec![usize::MAX; n];
        for (k, &src) in forward.iter().enumerate() {
            if src >= n || inverse[src] != usize::MAX {
                return Err(Error::Parameter(format!(
                    "not a permutation: entry {src} at position {k}"
                )));
            }
            inverse[src] = k;
        }
        Ok(Self {
            patch_size,
            forward,
            inverse,
            key: None,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// `forward[k]` is the plaintext position that lands at ciphertext position `k`.
    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn key(&self) -> Option<EncryptionKey> {
        self.key
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(k, &v)| k == v)
    }

    /// Writes one index per line.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.forward.len() * 4);
        for v in &self.forward {
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_text(path: &Path, patch_size: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut forward = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let v = line.trim().parse::<usize>().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset,
                reason: format!("not an integer: {line:?}"),
            })?;
            forward.push(v);
            offset += line.len() as u64 + 1;
        }
        Self::from_forward(patch_size, forward)
    }
}

/// Canonical file name for a stored permutation.
pub fn permutation_file_name(key: EncryptionKey, patch_size: usize) -> String {
    format!("perm_{}_{}.txt", key.0, patch_size)
}

/// `log2(min((3P²)!, 2⁶⁴))`: the number of key bits that can matter.
pub fn key_space_bits(patch_size: usize) -> f64 {
    let n = CHANNELS * patch_size * patch_size;
    let log2_factorial: f64 = (2..=n).map(|i| (i as f64).log2()).sum();
    log2_factorial.min(64.0)
}

fn check_geometry(img: &ImageTensor, patch: usize) -> Result<()> {
    if patch == 0 || !img.height().is_multiple_of(patch) || !img.width().is_multiple_of(patch) {
        return Err(Error::Geometry {
            height: img.height(),
            width: img.width(),
            patch,
        });
    }
    Ok(())
}

/// For every block: `out_block[k] = in_block[map[k]]`.
fn remap_blocks(img: &ImageTensor, patch: usize, map: &[usize]) -> Result<ImageTensor> {
    check_geometry(img, patch)?;
    let (h, w) = (img.height(), img.width());
    let pp = patch * patch;
    // Offsets of each flattened block position relative to the block origin.
    let rel: Vec<usize> = (0..CHANNELS * pp)
        .map(|k| {
            let (c, rem) = (k / pp, k % pp);
            let (y, x) = (rem / patch, rem % patch);
            (c * h + y) * w + x
        })
        .collect();
    let src = img.pixels();
    let mut out = vec![0u8; src.len()];
    for by in (0..h).step_by(patch) {
        for bx in (0..w).step_by(patch) {
            let origin = by * w + bx;
            for (k, &m) in map.iter().enumerate() {
                out[origin + rel[k]] = src[origin + rel[m]];
            }
        }
    }
    ImageTensor::new(h, w, out)
}

pub fn encrypt_image(img: &ImageTensor, perm: &BlockPermutation) -> Result<ImageTensor> {
    remap_blocks(img, perm.patch_size, &perm.forward)
}

pub fn decrypt_image(img: &ImageTensor, perm: &BlockPermutation) -> Result<ImageTensor> {
    remap_blocks(img, perm.patch_size, &perm.inverse)
}

/// Reorders the input columns of a `d × 3P²` patch-embedding weight so
/// that it maps encrypted blocks to the embeddings `weight` gives the
/// plain blocks: `out[:, k] = weight[:, forward[k]]`.
pub fn permute_embedding_columns<T: Scalar>(
    weight: &Tensor<T>,
    perm: &BlockPermutation,
) -> Result<Tensor<T>> {
    let (rows, cols) = weight.dims2()?;
    if cols != perm.len() {
        return Err(Error::dim(
            "permute_embedding_columns",
            weight.shape(),
            &[perm.len()],
        ));
    }
    let src = weight.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        out.extend(perm.forward.iter().map(|&f| row[f]));
    }
    Tensor::new(vec![rows, cols], out)
}
