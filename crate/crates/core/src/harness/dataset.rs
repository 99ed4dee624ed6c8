//! Datasets: synthetic class-conditional blobs and the CIFAR-10 binary
//! format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::RngStream;

/// Which side of the train/test split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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

/// Labeled images with identical shapes.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<ImageTensor>,
    labels: Vec<usize>,
    num_classes: usize,
    shape: (usize, usize, usize),
    split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<ImageTensor>,
        labels: Vec<usize>,
        num_classes: usize,
        shape: (usize, usize, usize),
        split: Split,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(img) = images.iter().find(|img| img.shape() != shape) {
            return Err(Error::Data(format!(
                "image shape {:?} differs from dataset shape {:?}",
                img.shape(),
                shape
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            shape,
            split,
        })
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `(height, width, channels)`; well-defined even when empty.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` examples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            shape: self.shape,
            split: self.split,
        }
    }
}

/// Parameters for [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub per_class: usize,
    /// Per-pixel amplitude of the class pattern around mid-gray.
    pub signal: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

/// Class-conditional Gaussian blobs around per-class sign patterns, clamped
/// to `[0, 1]`. Linearly separable by construction at the default noise.
///
/// Each class mean is `0.5 + signal * s_k` with `s_k` a `±1` pattern. When
/// the spatial dimensions are even, the signs are balanced inside every
/// `2 x 2` cell of every channel, so any block-wise permutation-invariant
/// statistic (per-block sums in particular) is identical across classes and a
/// wrongly-keyed model gets no shortcut signal.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    gen_synthetic_split(spec, Split::Train)
}

/// [`gen_synthetic`] for a chosen split: class patterns depend only on the
/// seed, sample noise additionally on the split, so train and test share the
/// same classes but disjoint noise.
pub fn gen_synthetic_split(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    let (k, h, w, c) = (spec.num_classes, spec.height, spec.width, spec.channels);
    if k == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidDimensions(
            "num_classes and image dimensions must be positive".into(),
        ));
    }
    if h * w * c < k {
        return Err(Error::InvalidDimensions(format!(
            "{h}x{w}x{c} image too small to separate {k} classes"
        )));
    }
    let dim = h * w * c;
    let master = RngStream::new(spec.seed);
    let mut pattern_rng = master.derive(b"class-patterns");
    let patterns: Vec<Vec<f64>> = (0..k)
        .map(|_| class_pattern(h, w, c, &mut pattern_rng))
        .collect();

    let mut sample_rng = master.derive(format!("samples-{}", split.as_str()).as_bytes());
    let mut images = Vec::with_capacity(k * spec.per_class);
    let mut labels = Vec::with_capacity(k * spec.per_class);
    for (class, pattern) in patterns.iter().enumerate() {
        for _ in 0..spec.per_class {
            let mut data = Vec::with_capacity(dim);
            for &s in pattern {
                let v = 0.5 + spec.signal * s + spec.noise * sample_rng.next_gaussian();
                data.push(v.clamp(0.0, 1.0));
            }
            images.push(ImageTensor::new(h, w, c, data)?);
            labels.push(class);
        }
    }
    // Interleave classes so any prefix is class-balanced in expectation.
    let mut order_rng = master.derive(format!("order-{}", split.as_str()).as_bytes());
    let order = order_rng.permutation(images.len());
    let images = order.iter().map(|&i| images[i].clone()).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    Dataset::new(images, labels, k, (h, w, c), split)
}

/// A `±1` pattern, balanced inside every `2 x 2` spatial cell per channel
/// when both spatial dimensions are even (iid signs otherwise).
fn class_pattern(h: usize, w: usize, c: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut pattern = vec![0.0; h * w * c];
    if h % 2 == 0 && w % 2 == 0 {
        for cell_y in (0..h).step_by(2) {
            for cell_x in (0..w).step_by(2) {
                for ch in 0..c {
                    let mut signs = [1.0, 1.0, -1.0, -1.0];
                    rng.shuffle(&mut signs);
                    for (slot, &s) in signs.iter().enumerate() {
                        let (dy, dx) = (slot / 2, slot % 2);
                        pattern[((cell_y + dy) * w + cell_x + dx) * c + ch] = s;
                    }
                }
            }
        }
    } else {
        for p in &mut pattern {
            *p = rng.next_sign();
        }
    }
    pattern
}

const CIFAR_RECORD_LEN: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;

/// Loads a CIFAR-10 binary batch: records of one label byte followed by 3072
/// pixel bytes (red, green, blue planes, each row-major 32 x 32), scaled to
/// `[0, 1]`. An empty file is an empty dataset.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::MalformedRecord(format!(
            "file length {} is not a multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::MalformedRecord(format!(
                "label byte {label} out of range"
            )));
        }
        let planes = &record[1..];
        let img = ImageTensor::from_fn(CIFAR_SIDE, CIFAR_SIDE, 3, |y, x, ch| {
            f64::from(planes[ch * CIFAR_SIDE * CIFAR_SIDE + y * CIFAR_SIDE + x]) / 255.0
        })?;
        images.push(img);
        labels.push(label);
    }
    Dataset::new(
        images,
        labels,
        CIFAR_CLASSES,
        (CIFAR_SIDE, CIFAR_SIDE, 3),
        Split::Test,
    )
}
