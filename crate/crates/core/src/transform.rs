//! Keyed block-wise pixel shuffling.
//!
//! An image is divided into `M x M` blocks; inside each block the
//! `M * M * C` entries (all channels together) are flattened in canonical
//! order — row-major within the block, channel varying fastest — and permuted
//! by the key's secret permutation. The same permutation is applied to every
//! block of every image, so one key defines one fixed linear transform.
//!
//! Key generation is pinned exactly so ciphertexts are reproducible across
//! implementations: the permutation is the downward Fisher-Yates shuffle of
//! the identity array driven by a SplitMix64 stream seeded with the key seed
//! (see [`crate::rng`] for the bounded-draw semantics).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::RngStream;

const KEY_MAGIC: [u8; 4] = *b"KSKY";
const KEY_FORMAT_VERSION: u16 = 1;
/// Header is magic + version + seed + block size + channels.
const KEY_FILE_LEN: usize = 4 + 2 + 8 + 2 + 2;

/// Opaque identity of a key, derived from `(seed, block_size, channels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyId(u64);

impl KeyId {
    fn for_seeded(seed: u64, block_size: usize, channels: usize) -> Self {
        KeyId(mix_id(0x4B53_4B59, seed, block_size, channels))
    }

    fn for_identity(block_size: usize, channels: usize) -> Self {
        KeyId(mix_id(0x4944_4E54, 0, block_size, channels))
    }
}

fn mix_id(tag: u64, seed: u64, block_size: usize, channels: usize) -> u64 {
    let mut h = RngStream::new(tag ^ seed);
    h.next_u64() ^ ((block_size as u64) << 32 | channels as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// A secret block permutation plus its inverse.
///
/// `perm` is a bijection on `{0, …, M*M*C - 1}`; encryption gathers
/// `out[i] = in[perm[i]]` within each block and decryption gathers with
/// `inv_perm`. Keys are immutable and safe to share across threads.
#[derive(Debug, Clone)]
pub struct ShuffleKey {
    key_id: KeyId,
    seed: u64,
    block_size: usize,
    channels: usize,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    identity: bool,
}

impl ShuffleKey {
    /// Generates the key for `seed`: Fisher-Yates over `M*M*C` entries driven
    /// by a SplitMix64 stream seeded with `seed`.
    pub fn generate(seed: u64, block_size: usize, channels: usize) -> Result<Self> {
        if block_size == 0 || channels == 0 {
            return Err(Error::InvalidDimensions(format!(
                "block_size and channels must be >= 1, got M={block_size} C={channels}"
            )));
        }
        let entries = block_size * block_size * channels;
        let perm = RngStream::new(seed).permutation(entries);
        let inv_perm = invert(&perm);
        Ok(Self {
            key_id: KeyId::for_seeded(seed, block_size, channels),
            seed,
            block_size,
            channels,
            perm,
            inv_perm,
            identity: false,
        })
    }

    /// The no-op key: identity permutation. Used for undefended baselines and
    /// tests; not serializable to a key file because it has no defining seed.
    pub fn identity(block_size: usize, channels: usize) -> Result<Self> {
        if block_size == 0 || channels == 0 {
            return Err(Error::InvalidDimensions(format!(
                "block_size and channels must be >= 1, got M={block_size} C={channels}"
            )));
        }
        let entries = block_size * block_size * channels;
        let perm: Vec<usize> = (0..entries).collect();
        Ok(Self {
            key_id: KeyId::for_identity(block_size, channels),
            seed: 0,
            block_size,
            channels,
            inv_perm: perm.clone(),
            perm,
            identity: true,
        })
    }

    pub fn id(&self) -> KeyId {
        self.key_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `M * M * C`, the length of the permuted block vector.
    pub fn entries_per_block(&self) -> usize {
        self.perm.len()
    }

    pub fn is_identity_key(&self) -> bool {
        self.identity
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv_perm(&self) -> &[usize] {
        &self.inv_perm
    }

    /// Applies the key permutation to every block. Output shape equals input
    /// shape; preserves the multiset of values within each block.
    pub fn encrypt(&self, x: &ImageTensor) -> Result<ImageTensor> {
        self.apply_blockwise(x, &self.perm)
    }

    /// Inverse of [`ShuffleKey::encrypt`]: `decrypt(encrypt(x)) == x` bit-exactly.
    pub fn decrypt(&self, y: &ImageTensor) -> Result<ImageTensor> {
        self.apply_blockwise(y, &self.inv_perm)
    }

    /// Pulls a gradient w.r.t. the encrypted image back to plaintext space.
    ///
    /// Encryption is a fixed permutation `y = P x`, so the gradient of any
    /// loss through it is `P^T g`, i.e. the block-wise inverse permutation
    /// applied to `g`. Numerically identical to [`ShuffleKey::decrypt`]; kept
    /// separate because the argument is a gradient, not an image, and is not
    /// range-constrained.
    pub fn backprop_through_encrypt(&self, grad: &ImageTensor) -> Result<ImageTensor> {
        self.apply_blockwise(grad, &self.inv_perm)
    }

    fn check_shape(&self, x: &ImageTensor) -> Result<()> {
        let (h, w, c) = x.shape();
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "image has {c} channels, key expects {}",
                self.channels
            )));
        }
        if h % self.block_size != 0 || w % self.block_size != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {h}x{w} not divisible into {m}x{m} blocks",
                m = self.block_size
            )));
        }
        Ok(())
    }

    fn apply_blockwise(&self, x: &ImageTensor, perm: &[usize]) -> Result<ImageTensor> {
        self.check_shape(x)?;
        let (h, w, c) = x.shape();
        let m = self.block_size;
        let entries = perm.len();
        let src = x.as_slice();
        let mut out = vec![0.0; src.len()];
        let row_stride = w * c;
        for block_y in (0..h).step_by(m) {
            for block_x in (0..w).step_by(m) {
                let base = block_y * row_stride + block_x * c;
                for flat in 0..entries {
                    let s = perm[flat];
                    out[base + offset(flat, m, c, row_stride)] =
                        src[base + offset(s, m, c, row_stride)];
                }
            }
        }
        ImageTensor::new(h, w, c, out)
    }
}

/// Offset of block-flat index `flat` from the block's top-left entry.
///
/// Canonical flatten order: `flat = (row * M + col) * C + ch`.
#[inline]
fn offset(flat: usize, m: usize, c: usize, row_stride: usize) -> usize {
    let row = flat / (m * c);
    let rem = flat % (m * c);
    row * row_stride + rem
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Writes the versioned key header; the permutation itself is never stored
/// and regenerates from the seed.
pub fn write_key_file(key: &ShuffleKey, path: &Path) -> Result<()> {
    if key.is_identity_key() {
        return Err(Error::Config(
            "identity keys have no defining seed and cannot be written".into(),
        ));
    }
    let mut buf = Vec::with_capacity(KEY_FILE_LEN);
    buf.extend_from_slice(&KEY_MAGIC);
    buf.extend_from_slice(&KEY_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&key.seed.to_le_bytes());
    buf.extend_from_slice(&(key.block_size as u16).to_le_bytes());
    buf.extend_from_slice(&(key.channels as u16).to_le_bytes());
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a key file and regenerates the key from its seed.
pub fn read_key_file(path: &Path) -> Result<ShuffleKey> {
    let bytes = fs::read(path)?;
    if bytes.len() < KEY_FILE_LEN {
        return Err(Error::MalformedRecord(format!(
            "key file is {} bytes, expected {KEY_FILE_LEN}",
            bytes.len()
        )));
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if magic != KEY_MAGIC {
        return Err(Error::BadMagic {
            expected: KEY_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != KEY_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: KEY_FORMAT_VERSION,
            found: version,
        });
    }
    if bytes.len() != KEY_FILE_LEN {
        return Err(Error::MalformedRecord(format!(
            "key file has {} trailing bytes",
            bytes.len() - KEY_FILE_LEN
        )));
    }
    let seed = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let block_size = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
    let channels = u16::from_le_bytes([bytes[16], bytes[17]]) as usize;
    ShuffleKey::generate(seed, block_size, channels)
}
