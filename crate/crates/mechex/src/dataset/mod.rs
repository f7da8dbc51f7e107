//! Data ingestion, preprocessing, and the unpaired canonical/transformed
//! split.
//!
//! The training partition is shuffled under the split seed and cut in half:
//! the first half is transformed (each example by one uniformly drawn
//! mechanism) and the second half stays canonical, so no transformed example
//! has its clean counterpart in the data. Ground-truth mechanism ids live in
//! a sealed section of [`TransformedSet`] that the training path never reads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::Mechanism;
use crate::rng::{stream_rng, SeedRng, Stream};
use crate::tensor::{Real, Tensor};

pub mod idx;
pub mod omniglot;
pub mod synthetic;

pub const MNIST_RAW_SIDE: usize = 28;
pub const MNIST_PADDED_SIDE: usize = 32;
pub const OMNIGLOT_SIDE: usize = 46;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    MnistTrain,
    MnistTest,
    Omniglot,
    Synthetic,
}

/// A stack of single-channel images in `[0, 1]`, shape `[n, 1, h, w]`, with
/// optional class labels.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    pub source: Source,
}

impl ImageSet {
    pub fn new(images: Tensor, labels: Option<Vec<u8>>, source: Source) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::shape(
                "image_set",
                format!("want [N,1,H,W], got {shape:?}"),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != shape[0] {
                return Err(Error::shape(
                    "image_set",
                    format!("{} labels for {} images", l.len(), shape[0]),
                ));
            }
        }
        if !images.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::Contract("image values outside [0,1]".into()));
        }
        Ok(ImageSet {
            images,
            labels,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    /// Subset by index, keeping labels aligned.
    pub fn subset(&self, indices: &[usize]) -> Result<ImageSet> {
        let images = self.images.gather_rows(indices)?;
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(ImageSet {
            images,
            labels,
            source: self.source,
        })
    }
}

/// Ground-truth mechanism assignment, stored apart from the images so the
/// training surface cannot reach it. Only evaluation code should call
/// [`TransformedSet::sealed_mechanisms`].
#[derive(Debug, Clone)]
struct SealedLabels {
    mechanism_ids: Vec<Mechanism>,
}

/// Transformed images plus the sealed evaluation-only record of which
/// mechanism produced each one.
#[derive(Debug, Clone)]
pub struct TransformedSet {
    images: ImageSet,
    sealed: Option<SealedLabels>,
}

impl TransformedSet {
    pub fn new(images: ImageSet, mechanism_ids: Option<Vec<Mechanism>>) -> Result<Self> {
        if let Some(ids) = &mechanism_ids {
            if ids.len() != images.len() {
                return Err(Error::shape(
                    "transformed_set",
                    format!("{} mechanism ids for {} images", ids.len(), images.len()),
                ));
            }
        }
        Ok(TransformedSet {
            images,
            sealed: mechanism_ids.map(|m| SealedLabels { mechanism_ids: m }),
        })
    }

    /// The training-visible surface: images only.
    pub fn images(&self) -> &ImageSet {
        &self.images
    }

    /// Evaluation-only access to the ground-truth mechanism per example.
    /// `None` when the sealed section was stripped.
    pub fn sealed_mechanisms(&self) -> Option<&[Mechanism]> {
        self.sealed.as_ref().map(|s| s.mechanism_ids.as_slice())
    }

    /// Drop the sealed section entirely. The training path must keep working
    /// on the result; a test holds this structurally.
    pub fn without_sealed(mut self) -> Self {
        self.sealed = None;
        self
    }
}

/// Reproducibility record of a half-split: which indices went where and which
/// mechanism each transformed example received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub canonical_indices: Vec<u32>,
    pub transformed_indices: Vec<u32>,
    pub mechanism_ids: Vec<String>,
}

/// Zero-pad 28x28 images to 32x32 (2-px border). Applied before any
/// mechanism; values are untouched otherwise.
pub fn preprocess(raw: &ImageSet) -> Result<ImageSet> {
    if raw.side() != MNIST_RAW_SIDE {
        return Err(Error::shape(
            "preprocess",
            format!("want {MNIST_RAW_SIDE}x{MNIST_RAW_SIDE} input, got {}", raw.side()),
        ));
    }
    let n = raw.len();
    let (rs, ps) = (MNIST_RAW_SIDE, MNIST_PADDED_SIDE);
    let pad = (ps - rs) / 2;
    let src = raw.images.data();
    let mut out = vec![0.0; n * ps * ps];
    for i in 0..n {
        for y in 0..rs {
            let s = i * rs * rs + y * rs;
            let d = i * ps * ps + (y + pad) * ps + pad;
            out[d..d + rs].copy_from_slice(&src[s..s + rs]);
        }
    }
    ImageSet::new(
        Tensor::new(vec![n, 1, ps, ps], out)?,
        raw.labels.clone(),
        raw.source,
    )
}

/// Split a preprocessed training set in half, transform the first half, and
/// return (canonical, transformed, manifest). Deterministic under the seed.
pub fn make_split(
    train: &ImageSet,
    mechanisms: &[Mechanism],
    seed: u64,
) -> Result<(ImageSet, TransformedSet, SplitManifest)> {
    if mechanisms.is_empty() {
        return Err(Error::Config("make_split with empty mechanism list".into()));
    }
    let n = train.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut rng = stream_rng(seed, Stream::Split, 0);
    shuffle(&mut order, &mut rng);

    let half = n.div_ceil(2);
    let transformed_indices = order[..half].to_vec();
    let canonical_indices = order[half..].to_vec();

    use rand::Rng;
    let drawn: Vec<Mechanism> = (0..half)
        .map(|_| mechanisms[rng.random_range(0..mechanisms.len())])
        .collect();

    let canonical = train.subset(&canonical_indices.iter().map(|&i| i as usize).collect::<Vec<_>>())?;

    let mut parts = Vec::with_capacity(half);
    for (k, &idx) in transformed_indices.iter().enumerate() {
        let img = train.images.slice_one(idx as usize)?;
        let mut noise_rng = stream_rng(seed, Stream::Noise, idx as u64);
        parts.push(drawn[k].apply(&img, &mut noise_rng)?);
    }
    let images = Tensor::concat_rows(&parts)?;
    let labels = train
        .labels
        .as_ref()
        .map(|l| transformed_indices.iter().map(|&i| l[i as usize]).collect());
    let transformed = TransformedSet::new(
        ImageSet::new(images, labels, train.source)?,
        Some(drawn.clone()),
    )?;

    let manifest = SplitManifest {
        seed,
        canonical_indices,
        transformed_indices,
        mechanism_ids: drawn.iter().map(|m| m.id().to_string()).collect(),
    };
    Ok((canonical, transformed, manifest))
}

/// Fisher–Yates with the stream rng.
fn shuffle(xs: &mut [u32], rng: &mut SeedRng) {
    use rand::Rng;
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}

/// I.i.d. uniform sampling with replacement from the leading axis.
pub fn sample_indices(n: usize, size: usize, rng: &mut SeedRng) -> Vec<usize> {
    use rand::Rng;
    (0..size).map(|_| rng.random_range(0..n)).collect()
}

/// A minibatch of `size` images drawn uniformly with replacement.
pub fn sample_minibatch(images: &Tensor, size: usize, rng: &mut SeedRng) -> Result<Tensor> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Contract("sample from empty set".into()));
    }
    images.gather_rows(&sample_indices(n, size, rng))
}

/// Sum of all pixel values; cheap integrity check.
pub fn pixel_checksum(set: &ImageSet) -> Real {
    set.images.data().iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::Direction;

    fn tiny_set(n: usize) -> ImageSet {
        let mut data = vec![0.0; n * MNIST_RAW_SIDE * MNIST_RAW_SIDE];
        for (i, chunk) in data.chunks_mut(MNIST_RAW_SIDE * MNIST_RAW_SIDE).enumerate() {
            chunk[i % chunk.len()] = 1.0;
        }
        ImageSet::new(
            Tensor::new(vec![n, 1, MNIST_RAW_SIDE, MNIST_RAW_SIDE], data).unwrap(),
            Some((0..n).map(|i| (i % 10) as u8).collect()),
            Source::Synthetic,
        )
        .unwrap()
    }

    #[test]
    fn preprocess_pads_zero_border() {
        let zero = ImageSet::new(
            Tensor::zeros(vec![1, 1, 28, 28]),
            None,
            Source::Synthetic,
        )
        .unwrap();
        let out = preprocess(&zero).unwrap();
        assert_eq!(out.images.shape(), &[1, 1, 32, 32]);
        assert!(out.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preprocess_offsets_corner_pixel() {
        let mut data = vec![0.0; 28 * 28];
        data[0] = 1.0;
        let set = ImageSet::new(
            Tensor::new(vec![1, 1, 28, 28], data).unwrap(),
            None,
            Source::Synthetic,
        )
        .unwrap();
        let out = preprocess(&set).unwrap();
        assert_eq!(out.images.data()[2 * 32 + 2], 1.0);
    }

    #[test]
    fn preprocess_preserves_checksum() {
        let set = tiny_set(20);
        let out = preprocess(&set).unwrap();
        assert_eq!(pixel_checksum(&set), pixel_checksum(&out));
    }

    #[test]
    fn split_is_deterministic_and_a_partition() {
        let set = preprocess(&tiny_set(31)).unwrap();
        let mechs = [Mechanism::ContrastInvert, Mechanism::Translate(Direction::Right)];
        let (_, _, m1) = make_split(&set, &mechs, 5).unwrap();
        let (_, _, m2) = make_split(&set, &mechs, 5).unwrap();
        assert_eq!(m1, m2);

        let mut all: Vec<u32> = m1
            .canonical_indices
            .iter()
            .chain(&m1.transformed_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..31).collect::<Vec<u32>>());
        let diff = m1.transformed_indices.len() as i64 - m1.canonical_indices.len() as i64;
        assert!(diff.abs() <= 1);

        let (_, _, m3) = make_split(&set, &mechs, 6).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn single_mechanism_split_marks_every_example_with_it() {
        let set = preprocess(&tiny_set(10)).unwrap();
        let (_, transformed, manifest) =
            make_split(&set, &[Mechanism::ContrastInvert], 1).unwrap();
        assert!(manifest.mechanism_ids.iter().all(|m| m == "inv"));
        assert!(transformed
            .sealed_mechanisms()
            .unwrap()
            .iter()
            .all(|&m| m == Mechanism::ContrastInvert));
    }

    #[test]
    fn empty_mechanism_list_is_a_config_error() {
        let set = preprocess(&tiny_set(4)).unwrap();
        assert!(matches!(
            make_split(&set, &[], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mechanism_histogram_is_near_uniform() {
        let set = preprocess(&tiny_set(600)).unwrap();
        // 600 -> 300 transformed; with 3 mechanisms expect 100 +- generous
        // binomial slack (the full-scale 3000 +- 200 bound is checked at the
        // same confidence level).
        let mechs = [
            Mechanism::ContrastInvert,
            Mechanism::GaussianNoise,
            Mechanism::Translate(Direction::Left),
        ];
        let (_, _, manifest) = make_split(&set, &mechs, 9).unwrap();
        for m in &mechs {
            let count = manifest.mechanism_ids.iter().filter(|s| *s == m.id()).count();
            assert!((55..=145).contains(&count), "{}: {count}", m.id());
        }
    }

    #[test]
    fn minibatch_sampling_is_deterministic_and_uniform() {
        let images = Tensor::new(vec![10, 1, 2, 2], (0..40).map(|i| (i % 2) as Real).collect()).unwrap();
        let mut r1 = stream_rng(3, Stream::SampleCanonical, 0);
        let mut r2 = stream_rng(3, Stream::SampleCanonical, 0);
        let a = sample_minibatch(&images, 8, &mut r1).unwrap();
        let b = sample_minibatch(&images, 8, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());

        // single-element set always returns that element
        let one = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let got = sample_minibatch(&one, 1, &mut r1).unwrap();
        assert_eq!(got.data(), one.data());

        // frequencies over many draws stay within 3 sigma of uniform
        let mut rng = stream_rng(11, Stream::SampleTransformed, 0);
        let mut counts = [0u32; 10];
        for i in sample_indices(10, 100_000, &mut rng) {
            counts[i] += 1;
        }
        let sigma = (100_000.0f64 * 0.1 * 0.9).sqrt();
        for &c in &counts {
            assert!((c as f64 - 10_000.0).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn sealed_section_is_invisible_after_stripping() {
        let set = preprocess(&tiny_set(6)).unwrap();
        let (_, transformed, _) = make_split(&set, &[Mechanism::ContrastInvert], 2).unwrap();
        assert!(transformed.sealed_mechanisms().is_some());
        let stripped = transformed.without_sealed();
        assert!(stripped.sealed_mechanisms().is_none());
        assert_eq!(stripped.images().len(), 3);
    }
}
