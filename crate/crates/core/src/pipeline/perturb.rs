//! Strong perturbation `g` of target images and the matching alignment of
//! the weak-branch prediction.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::image::Image;
use crate::losses::ProbMap;

/// Perturbation magnitudes. All zero means "return the input unchanged".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Half-width of the additive brightness jitter.
    pub brightness: f64,
    /// Half-width of the contrast factor jitter around 1.
    pub contrast: f64,
    /// Probability of a horizontal flip.
    pub flip_prob: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            noise: 0.03,
            brightness: 0.1,
            contrast: 0.2,
            flip_prob: 0.5,
        }
    }
}

impl Perturbation {
    pub const NONE: Perturbation = Perturbation {
        noise: 0.0,
        brightness: 0.0,
        contrast: 0.0,
        flip_prob: 0.0,
    };
}

/// Spatial transform taking the unperturbed pixel grid onto the perturbed one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    Identity,
    HorizontalFlip,
}

impl Alignment {
    /// `map[j]` is the unperturbed pixel that lands on perturbed pixel `j`.
    pub fn pixel_map(self, height: usize, width: usize) -> Vec<usize> {
        (0..height * width)
            .map(|j| match self {
                Alignment::Identity => j,
                Alignment::HorizontalFlip => {
                    let (r, c) = (j / width, j % width);
                    r * width + (width - 1 - c)
                }
            })
            .collect()
    }

    pub fn compose(self, other: Alignment) -> Alignment {
        if self == other {
            Alignment::Identity
        } else {
            Alignment::HorizontalFlip
        }
    }

    pub fn apply_image(self, image: &Image) -> Image {
        let map = self.pixel_map(image.height, image.width);
        let mut out = image.clone();
        for (j, &src) in map.iter().enumerate() {
            for c in 0..Image::CHANNELS {
                out.set(c, j, image.get(c, src));
            }
        }
        out
    }
}

/// Column gather aligning a batch of equally sized images laid out
/// image-after-image along the pixel axis.
pub fn batch_alignment_columns(alignments: &[Alignment], height: usize, width: usize) -> Vec<usize> {
    let n = height * width;
    alignments
        .iter()
        .enumerate()
        .flat_map(|(i, a)| a.pixel_map(height, width).into_iter().map(move |p| i * n + p))
        .collect()
}

/// Applies per-image alignments to a weak-branch prediction. Gradients flow
/// through the gather.
pub fn align_probs<'g>(p: &ProbMap<'g>, alignments: &[Alignment], height: usize, width: usize) -> Result<ProbMap<'g>> {
    if alignments.iter().all(|&a| a == Alignment::Identity) {
        return Ok(*p);
    }
    let cols = batch_alignment_columns(alignments, height, width);
    ProbMap::new(p.tensor().select_columns(&cols)?)
}

/// Flip (with probability `flip_prob`), then contrast/brightness jitter and
/// Gaussian noise, clamped to `[0, 1]`. The random stream consumed does not
/// depend on the magnitudes.
pub fn perturb<R: Rng + ?Sized>(image: &Image, cfg: &Perturbation, rng: &mut R) -> (Image, Alignment) {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let alignment = if flip { Alignment::HorizontalFlip } else { Alignment::Identity };
    let contrast = 1.0 + cfg.contrast * (2.0 * rng.random::<f64>() - 1.0);
    let brightness = cfg.brightness * (2.0 * rng.random::<f64>() - 1.0);
    let mut out = alignment.apply_image(image);
    for v in out.data.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        let shifted = *v + (contrast - 1.0) * (*v - 0.5) + brightness + cfg.noise * z;
        *v = shifted.clamp(0.0, 1.0);
    }
    (out, alignment)
}
