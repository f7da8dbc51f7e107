//! The ground-truth image transformations, their compositions, and exact
//! inverses (inverses are evaluation-only oracles; training never sees them).
//!
//! Ten mechanisms: translation by 4 pixels in each of the eight directions
//! (diagonals shift 4 px per axis), contrast inversion `x -> 1 - x`, and
//! additive Gaussian noise with zero mean and variance 0.25 followed by a
//! clamp back to `[0, 1]`. Translations zero-fill the vacated band and drop
//! what shifts past the border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, SeedRng, Stream};
use crate::tensor::{Real, Tensor};

pub const TRANSLATION_PIXELS: usize = 4;
pub const NOISE_VARIANCE: Real = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
    UpLeft,
    UpRight,
    DownLeft,
    DownRight,
}

impl Direction {
    /// Content displacement as (rows, cols); negative moves up/left.
    fn delta(self) -> (isize, isize) {
        let d = TRANSLATION_PIXELS as isize;
        match self {
            Direction::Up => (-d, 0),
            Direction::Down => (d, 0),
            Direction::Left => (0, -d),
            Direction::Right => (0, d),
            Direction::UpLeft => (-d, -d),
            Direction::UpRight => (-d, d),
            Direction::DownLeft => (d, -d),
            Direction::DownRight => (d, d),
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::UpLeft => Direction::DownRight,
            Direction::UpRight => Direction::DownLeft,
            Direction::DownLeft => Direction::UpRight,
            Direction::DownRight => Direction::UpLeft,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    Translate(Direction),
    ContrastInvert,
    GaussianNoise,
}

impl Mechanism {
    pub const ALL: [Mechanism; 10] = [
        Mechanism::Translate(Direction::Up),
        Mechanism::Translate(Direction::Down),
        Mechanism::Translate(Direction::Left),
        Mechanism::Translate(Direction::Right),
        Mechanism::Translate(Direction::UpLeft),
        Mechanism::Translate(Direction::UpRight),
        Mechanism::Translate(Direction::DownLeft),
        Mechanism::Translate(Direction::DownRight),
        Mechanism::ContrastInvert,
        Mechanism::GaussianNoise,
    ];

    /// Stable serialization id.
    pub fn id(&self) -> &'static str {
        match self {
            Mechanism::Translate(Direction::Up) => "tr_u",
            Mechanism::Translate(Direction::Down) => "tr_d",
            Mechanism::Translate(Direction::Left) => "tr_l",
            Mechanism::Translate(Direction::Right) => "tr_r",
            Mechanism::Translate(Direction::UpLeft) => "tr_ul",
            Mechanism::Translate(Direction::UpRight) => "tr_ur",
            Mechanism::Translate(Direction::DownLeft) => "tr_dl",
            Mechanism::Translate(Direction::DownRight) => "tr_dr",
            Mechanism::ContrastInvert => "inv",
            Mechanism::GaussianNoise => "noise",
        }
    }

    pub fn from_id(id: &str) -> Option<Mechanism> {
        Mechanism::ALL.into_iter().find(|m| m.id() == id)
    }

    /// The mechanism undoing this one, when it exists. Noise is not
    /// invertible; contrast inversion is its own inverse.
    pub fn exact_inverse(&self) -> Option<Mechanism> {
        match self {
            Mechanism::Translate(d) => Some(Mechanism::Translate(d.opposite())),
            Mechanism::ContrastInvert => Some(Mechanism::ContrastInvert),
            Mechanism::GaussianNoise => None,
        }
    }

    /// Apply to an image tensor whose last two axes are height and width;
    /// leading axes are treated as independent planes. Only the noise
    /// mechanism consumes the rng.
    pub fn apply(&self, image: &Tensor, rng: &mut SeedRng) -> Result<Tensor> {
        let shape = image.shape();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        match self {
            Mechanism::Translate(dir) => {
                if h <= TRANSLATION_PIXELS || w <= TRANSLATION_PIXELS {
                    return Err(Error::shape(
                        "translate",
                        format!("image {h}x{w} too small to shift {TRANSLATION_PIXELS} px"),
                    ));
                }
                let (dy, dx) = dir.delta();
                let planes = image.len() / (h * w);
                let src = image.data();
                let mut out = vec![0.0; image.len()];
                for p in 0..planes {
                    let base = p * h * w;
                    for y in 0..h as isize {
                        let sy = y - dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w as isize {
                            let sx = x - dx;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            out[base + y as usize * w + x as usize] =
                                src[base + sy as usize * w + sx as usize];
                        }
                    }
                }
                Tensor::new(shape.to_vec(), out)
            }
            Mechanism::ContrastInvert => Ok(image.map(invert_value)),
            Mechanism::GaussianNoise => {
                use rand_distr::Distribution;
                let normal = rand_distr::Normal::new(0.0, NOISE_VARIANCE.sqrt() as f64)
                    .expect("valid std");
                let out = image
                    .data()
                    .iter()
                    .map(|&v| (v + normal.sample(rng) as Real).clamp(0.0, 1.0))
                    .collect();
                Tensor::new(shape.to_vec(), out)
            }
        }
    }
}

/// Contrast inversion on the 8-bit pixel lattice:
/// `x -> (255 - round(255 x)) / 255`.
///
/// Every image in the pipeline carries 8-bit-derived intensities, where this
/// equals `1 - x` and double application is a bit-exact involution. Plain
/// floating-point `1 - x` cannot be involutive: the two halves of `[0, 1]`
/// have different representable grids, so some values must shift by an ulp.
pub fn invert_value(v: Real) -> Real {
    (255.0 - (v * 255.0).round()).clamp(0.0, 255.0) / 255.0
}

/// Snap an intensity to the 8-bit lattice `k / 255`; ingestion applies this
/// so that mechanism algebra stays exact on every pipeline image.
pub fn quantize_intensity(v: Real) -> Real {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Left-to-right application of a mechanism chain.
pub fn compose(mechanisms: &[Mechanism], image: &Tensor, rng: &mut SeedRng) -> Result<Tensor> {
    if mechanisms.is_empty() {
        return Err(Error::Contract("compose of empty mechanism list".into()));
    }
    let mut current = image.clone();
    for m in mechanisms {
        current = m.apply(&current, rng)?;
    }
    Ok(current)
}

/// Apply one mechanism to every image of an `[n, 1, h, w]` batch, giving each
/// example its own noise stream derived from `(seed, index_base + i)`.
pub fn apply_batch(m: Mechanism, images: &Tensor, seed: u64, index_base: u64) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(seed, Stream::Noise, index_base + i as u64);
        let row = images.slice_one(i)?;
        parts.push(m.apply(&row, &mut rng)?);
    }
    Tensor::concat_rows(&parts)
}

pub fn parse_mechanism_ids(ids: &[String]) -> Result<Vec<Mechanism>> {
    ids.iter()
        .map(|s| {
            Mechanism::from_id(s)
                .ok_or_else(|| Error::Config(format!("unknown mechanism id `{s}`")))
        })
        .collect()
}
