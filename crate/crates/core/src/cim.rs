//! Cross-domain image mixing.
//!
//! Source samples are first enriched with long-tail classes pulled from an
//! offline category database, then half of their classes are pasted onto a
//! target image whose labels come from the frozen stage-one model. Pixels
//! near the seams of the mix get double loss weight.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::losses::IGNORE;
use crate::pipeline::model::PixelModel;
use crate::threshold::class_selection_distribution;

/// Chebyshev radius of the seam neighbourhood (a 7×7 window).
pub const BOUNDARY_RADIUS: usize = 3;
pub const BOUNDARY_WEIGHT: f64 = 2.0;

/// Inverted index from class id to the source samples containing it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryDatabase {
    entries: Vec<Vec<usize>>,
}

impl CategoryDatabase {
    /// Samples (by index into `labels`) that contain `class`.
    pub fn samples_with(&self, class: usize) -> &[usize] {
        self.entries.get(class).map_or(&[], Vec::as_slice)
    }

    pub fn classes(&self) -> usize {
        self.entries.len()
    }
}

pub fn build_category_db(labels: &[LabelMap], classes: usize) -> Result<CategoryDatabase> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument {
            name: "labels",
            reason: "category database needs at least one source sample".into(),
        });
    }
    let mut entries = vec![Vec::new(); classes];
    for (i, y) in labels.iter().enumerate() {
        for c in y.classes_present() {
            if let Some(list) = entries.get_mut(c as usize) {
                list.push(i);
            }
        }
    }
    Ok(CategoryDatabase { entries })
}

/// Draws one class from `softmax(−α)`, skipping classes without donors.
/// Returns `None` when no class has a donor.
pub fn sample_paste_class<R: Rng + ?Sized>(db: &CategoryDatabase, alpha: &[f64], rng: &mut R) -> Option<usize> {
    let mut weights = class_selection_distribution(alpha);
    for (c, w) in weights.iter_mut().enumerate() {
        if db.samples_with(c).is_empty() {
            *w = 0.0;
        }
    }
    WeightedIndex::new(&weights).ok().map(|d| d.sample(rng))
}

/// Copies the pixels of `count` sampled classes from random donors into the
/// sample, keeping donor coordinates. Later pastes overwrite earlier ones.
pub fn long_tail_paste<R: Rng + ?Sized>(
    image: &Image,
    labels: &LabelMap,
    sources: &[(Image, LabelMap)],
    db: &CategoryDatabase,
    alpha: &[f64],
    count: usize,
    rng: &mut R,
) -> Result<(Image, LabelMap)> {
    let mut x = image.clone();
    let mut y = labels.clone();
    for _ in 0..count {
        let Some(class) = sample_paste_class(db, alpha, rng) else {
            break;
        };
        let donors = db.samples_with(class);
        let (dx, dy) = &sources[donors[rng.random_range(0..donors.len())]];
        if !dx.same_extent(x.height, x.width) || dy.data.len() != y.data.len() {
            return Err(Error::ShapeMismatch {
                op: "long_tail_paste",
                left: vec![x.height, x.width],
                right: vec![dx.height, dx.width],
            });
        }
        for p in 0..y.data.len() {
            if dy.data[p] as usize == class {
                y.data[p] = dy.data[p];
                for c in 0..Image::CHANNELS {
                    x.set(c, p, dx.get(c, p));
                }
            }
        }
    }
    Ok((x, y))
}

/// Selects `⌈K/2⌉` of the `K` labelled classes uniformly without
/// replacement and marks their pixels.
pub fn make_mix_mask<R: Rng + ?Sized>(labels: &LabelMap, rng: &mut R) -> Result<Vec<bool>> {
    let present = labels.classes_present();
    if present.is_empty() {
        return Err(Error::NoClasses);
    }
    let take = present.len().div_ceil(2);
    let mut chosen = [false; 256];
    for i in index::sample(rng, present.len(), take) {
        chosen[present[i] as usize] = true;
    }
    Ok(labels.data.iter().map(|&l| l != IGNORE && chosen[l as usize]).collect())
}

/// Unfiltered argmax labels of the frozen stage-one model.
pub fn pseudo_labels(frozen: &PixelModel, image: &Image) -> Result<LabelMap> {
    frozen.predict(image)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixResult {
    pub image: Image,
    pub labels: LabelMap,
    pub mask: Vec<bool>,
    pub weights: Vec<f64>,
}

/// `x_m = I_m · x_{s'} + (1 − I_m) · x_t`, likewise for labels, plus the
/// seam weights.
pub fn mix(
    source_image: &Image,
    source_labels: &LabelMap,
    target_image: &Image,
    target_labels: &LabelMap,
    mask: &[bool],
) -> Result<MixResult> {
    let (h, w) = (source_image.height, source_image.width);
    let extents = [
        (target_image.height, target_image.width),
        (source_labels.height, source_labels.width),
        (target_labels.height, target_labels.width),
    ];
    if extents.iter().any(|&e| e != (h, w)) || mask.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "mix",
            left: vec![h, w],
            right: vec![target_image.height, target_image.width, mask.len()],
        });
    }
    let mut image = target_image.clone();
    let mut labels = target_labels.clone();
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        labels.data[p] = source_labels.data[p];
        for c in 0..Image::CHANNELS {
            image.set(c, p, source_image.get(c, p));
        }
    }
    let weights = boundary_weights(mask, h, w);
    Ok(MixResult {
        image,
        labels,
        mask: mask.to_vec(),
        weights,
    })
}

/// Pixels whose mask value differs from at least one 4-neighbour.
pub fn mask_boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for r in 0..height {
        for c in 0..width {
            let v = mask[r * width + c];
            let differs = |rr: usize, cc: usize| mask[rr * width + cc] != v;
            out[r * width + c] = (r > 0 && differs(r - 1, c))
                || (r + 1 < height && differs(r + 1, c))
                || (c > 0 && differs(r, c - 1))
                || (c + 1 < width && differs(r, c + 1));
        }
    }
    out
}

/// Square (Chebyshev) dilation of a pixel set; the window is clipped at
/// the image border.
pub fn dilate(set: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    // Separable: along rows, then along columns.
    let mut rows = vec![false; set.len()];
    for r in 0..height {
        for c in 0..width {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(width - 1);
            rows[r * width + c] = (lo..=hi).any(|cc| set[r * width + cc]);
        }
    }
    let mut out = vec![false; set.len()];
    for r in 0..height {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(height - 1);
        for c in 0..width {
            out[r * width + c] = (lo..=hi).any(|rr| rows[rr * width + c]);
        }
    }
    out
}

/// Loss weight 2 within the 7×7 neighbourhood of the mask boundary, else 1.
pub fn boundary_weights(mask: &[bool], height: usize, width: usize) -> Vec<f64> {
    let boundary = mask_boundary(mask, height, width);
    dilate(&boundary, height, width, BOUNDARY_RADIUS)
        .into_iter()
        .map(|near| if near { BOUNDARY_WEIGHT } else { 1.0 })
        .collect()
}
