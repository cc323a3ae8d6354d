//! Entropy-family losses for unsupervised domain adaptation.
//!
//! Every loss consumes probability maps laid out as `[classes, pixels]`
//! (softmax lives in the model) and averages over the pixels selected by a
//! [`LossMask`]. Probabilities pass through [`Tensor::safe_log`] before any
//! logarithm, so `0 · log 0` evaluates to `0`.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Label value excluded from every supervised loss.
pub const IGNORE: u8 = 255;

/// Per-pixel class probabilities, shape `[classes, pixels]`.
#[derive(Clone, Copy, Debug)]
pub struct ProbMap<'g> {
    tensor: Tensor<'g>,
    classes: usize,
    pixels: usize,
}

impl<'g> ProbMap<'g> {
    pub fn new(tensor: Tensor<'g>) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "prob_map",
                left: shape,
                right: vec![0, 0],
            });
        }
        Ok(Self {
            tensor,
            classes: shape[0],
            pixels: shape[1],
        })
    }

    /// Softmax over the class axis of `[classes, pixels]` logits.
    pub fn from_logits(logits: Tensor<'g>) -> Result<Self> {
        Self::new(logits.softmax(0)?)
    }

    pub fn tensor(&self) -> Tensor<'g> {
        self.tensor
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn detach(&self) -> Self {
        Self {
            tensor: self.tensor.detach(),
            ..*self
        }
    }

    pub fn is_detached(&self) -> bool {
        !self.tensor.requires_grad()
    }

    /// Probability of `class` at `pixel`.
    pub fn at(&self, class: usize, pixel: usize) -> f64 {
        self.tensor.values()[class * self.pixels + pixel]
    }

    fn same_extent(&self, other: &ProbMap<'_>, op: &'static str) -> Result<()> {
        if self.classes != other.classes || self.pixels != other.pixels {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![self.classes, self.pixels],
                right: vec![other.classes, other.pixels],
            });
        }
        Ok(())
    }
}

/// Pixels admitted into an unsupervised loss (the set `I_t`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossMask {
    selected: Vec<bool>,
}

impl LossMask {
    pub fn new(selected: Vec<bool>) -> Self {
        Self { selected }
    }

    pub fn full(pixels: usize) -> Self {
        Self::new(vec![true; pixels])
    }

    pub fn empty(pixels: usize) -> Self {
        Self::new(vec![false; pixels])
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.selected
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    fn check(&self, pixels: usize, op: &'static str) -> Result<()> {
        if self.selected.len() != pixels {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![pixels],
                right: vec![self.selected.len()],
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Focal exponent.
    pub gamma: f64,
    /// Weight of the unsupervised target loss.
    pub lambda_u: f64,
    /// Weight of the mixed-sample loss.
    pub lambda_m: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            lambda_u: 0.05,
            lambda_m: 1.0,
        }
    }
}

/// `-(1/|I|) Σ_{n∈I} Σ_c p log p`
pub fn shannon_entropy_loss<'g>(p: &ProbMap<'g>, mask: &LossMask) -> Result<Tensor<'g>> {
    mask.check(p.pixels, "shannon_entropy_loss")?;
    let t = p.tensor;
    let per_pixel = t.mul(t.safe_log())?.sum_axis(0)?.neg();
    per_pixel.masked_mean(mask.as_slice())
}

/// Masked mean of `Σ_c p̂ (log p̂ − (1−p*)^γ log p*)`.
///
/// `p_hat` acts as a fixed soft target and must already be detached; the
/// gradient reaches `p_star` only.
pub fn adjusted_kl_loss<'g>(p_hat: &ProbMap<'g>, p_star: &ProbMap<'g>, mask: &LossMask, gamma: f64) -> Result<Tensor<'g>> {
    p_hat.same_extent(p_star, "adjusted_kl_loss")?;
    mask.check(p_hat.pixels, "adjusted_kl_loss")?;
    if !p_hat.is_detached() {
        return Err(Error::NotDetached("p_hat"));
    }
    let target = p_hat.tensor;
    let pred = p_star.tensor;
    let weight = pred.neg().add_scalar(1.0).clamp(0.0, 1.0).pow(gamma);
    let inner = target.safe_log().sub(weight.mul(pred.safe_log())?)?;
    target.mul(inner)?.sum_axis(0)?.masked_mean(mask.as_slice())
}

/// `L_shan(p̂) + L_KL'(detach(p̂), p*)`.
///
/// The Shannon term trains the weak branch `p_hat`; the adjusted KL term
/// treats it as a soft pseudo label and trains only `p_star`. In value the
/// `log p̂` terms cancel, leaving the masked mean of `−Σ_c p̂ (1−p*)^γ log p*`.
pub fn unsupervised_focal_loss<'g>(p_hat: &ProbMap<'g>, p_star: &ProbMap<'g>, mask: &LossMask, gamma: f64) -> Result<Tensor<'g>> {
    p_hat.same_extent(p_star, "unsupervised_focal_loss")?;
    let shannon = shannon_entropy_loss(p_hat, mask)?;
    let kl = adjusted_kl_loss(&p_hat.detach(), p_star, mask, gamma)?;
    shannon.add(kl)
}

/// Constant one-hot encoding of `labels` plus the mask of labelled pixels.
fn one_hot<'g>(p: &ProbMap<'g>, labels: &[u8]) -> Result<(Tensor<'g>, Vec<bool>)> {
    if labels.len() != p.pixels {
        return Err(Error::ShapeMismatch {
            op: "labels",
            left: vec![p.classes, p.pixels],
            right: vec![labels.len()],
        });
    }
    let mut hot = vec![0.0; p.classes * p.pixels];
    let mut valid = vec![false; p.pixels];
    for (n, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        if label as usize >= p.classes {
            return Err(Error::LabelOutOfRange {
                label,
                pixel: n,
                classes: p.classes,
            });
        }
        hot[label as usize * p.pixels + n] = 1.0;
        valid[n] = true;
    }
    let t = p.tensor.graph().constant(hot, &[p.classes, p.pixels])?;
    Ok((t, valid))
}

/// Per-pixel `−(1−p[y])^γ log p[y]`, zero on ignored pixels.
fn per_pixel_focal<'g>(p: &ProbMap<'g>, labels: &[u8], gamma: f64) -> Result<(Tensor<'g>, Vec<bool>)> {
    let (hot, valid) = one_hot(p, labels)?;
    let t = p.tensor;
    let log_p = t.safe_log();
    let term = if gamma == 0.0 {
        log_p
    } else {
        t.neg().add_scalar(1.0).clamp(0.0, 1.0).pow(gamma).mul(log_p)?
    };
    Ok((hot.mul(term)?.sum_axis(0)?.neg(), valid))
}

/// Mean over labelled pixels of `−log p[y]`.
pub fn supervised_ce_loss<'g>(p: &ProbMap<'g>, labels: &[u8]) -> Result<Tensor<'g>> {
    let (per_pixel, valid) = per_pixel_focal(p, labels, 0.0)?;
    per_pixel.masked_mean(&valid)
}

/// Mean over labelled pixels of `−(1−p[y])^γ log p[y]`.
pub fn supervised_focal_loss<'g>(p: &ProbMap<'g>, labels: &[u8], gamma: f64) -> Result<Tensor<'g>> {
    let (per_pixel, valid) = per_pixel_focal(p, labels, gamma)?;
    per_pixel.masked_mean(&valid)
}

/// Evaluates both sides of the focal decomposition for a one-hot target:
/// `(L_s_focal(y, p), L_shan(y) + L_KL'(y, p))`.
pub fn focal_decomposition_check(y: &ProbMap<'_>, p: &ProbMap<'_>, gamma: f64) -> Result<(f64, f64)> {
    y.same_extent(p, "focal_decomposition_check")?;
    let labels = one_hot_labels(y)?;
    let supervised = supervised_focal_loss(p, &labels, gamma)?.item();
    let full = LossMask::full(p.pixels);
    let target = y.detach();
    let shannon = shannon_entropy_loss(&target, &full)?.item();
    let kl = adjusted_kl_loss(&target, p, &full, gamma)?.item();
    Ok((supervised, shannon + kl))
}

/// Class index of every pixel of an exactly one-hot map.
fn one_hot_labels(y: &ProbMap<'_>) -> Result<Vec<u8>> {
    let v = y.tensor.values();
    (0..y.pixels)
        .map(|n| {
            let mut hot = None;
            for c in 0..y.classes {
                match v[c * y.pixels + n] {
                    x if x == 1.0 && hot.is_none() => hot = Some(c as u8),
                    0.0 => {}
                    _ => return Err(Error::NotOneHot { pixel: n }),
                }
            }
            hot.ok_or(Error::NotOneHot { pixel: n })
        })
        .collect()
}

/// `−(1/(2|I|)) Σ_{n∈I} Σ_c p²`, in its plain pixel-mean form.
pub fn maximum_square_loss<'g>(p: &ProbMap<'g>, mask: &LossMask) -> Result<Tensor<'g>> {
    mask.check(p.pixels, "maximum_square_loss")?;
    let t = p.tensor;
    t.mul(t)?.sum_axis(0)?.scale(-0.5).masked_mean(mask.as_slice())
}

/// Weighted cross-entropy `Σ w·(−log p[y]) / Σ w` over labelled pixels.
pub fn mixed_ce_loss<'g>(p: &ProbMap<'g>, labels: &[u8], weights: &[f64]) -> Result<Tensor<'g>> {
    if weights.len() != p.pixels {
        return Err(Error::ShapeMismatch {
            op: "mixed_ce_loss",
            left: vec![p.classes, p.pixels],
            right: vec![weights.len()],
        });
    }
    let (per_pixel, valid) = per_pixel_focal(p, labels, 0.0)?;
    let w: Vec<f64> = weights.iter().zip(&valid).map(|(&w, &v)| if v { w } else { 0.0 }).collect();
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        return per_pixel.masked_mean(&valid);
    }
    let w = p.tensor.graph().constant(w, &[p.pixels])?;
    Ok(per_pixel.mul(w)?.sum().scale(1.0 / total))
}

/// Probability maps and labels for one training step.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs<'g, 'a> {
    pub source: ProbMap<'g>,
    pub source_labels: &'a [u8],
    /// Weakly perturbed target branch `p̂_t`, aligned to `strong`.
    pub weak: ProbMap<'g>,
    /// Strongly perturbed target branch `p_{t*}`.
    pub strong: ProbMap<'g>,
    pub mask: &'a LossMask,
}

/// Cross-domain mixed sample for the second stage.
#[derive(Clone, Copy, Debug)]
pub struct MixedInputs<'g, 'a> {
    pub probs: ProbMap<'g>,
    pub labels: &'a [u8],
    pub weights: &'a [f64],
}

/// Components of a composite objective. `total` is the optimized scalar.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'g> {
    pub supervised: Tensor<'g>,
    pub unsupervised: Tensor<'g>,
    pub mixed: Option<Tensor<'g>>,
    pub total: Tensor<'g>,
}

impl LossTerms<'_> {
    /// `(L_s, L_u, L_m, total)`, with `L_m = 0` when absent.
    pub fn values(&self) -> [f64; 4] {
        [
            self.supervised.item(),
            self.unsupervised.item(),
            self.mixed.map_or(0.0, |m| m.item()),
            self.total.item(),
        ]
    }
}

/// `L_s + λ_u · L_u`
pub fn stage1_loss<'g>(inputs: &StepInputs<'g, '_>, cfg: &LossConfig) -> Result<LossTerms<'g>> {
    let supervised = supervised_ce_loss(&inputs.source, inputs.source_labels)?;
    let unsupervised = unsupervised_focal_loss(&inputs.weak, &inputs.strong, inputs.mask, cfg.gamma)?;
    let total = supervised.add(unsupervised.scale(cfg.lambda_u))?;
    Ok(LossTerms {
        supervised,
        unsupervised,
        mixed: None,
        total,
    })
}

/// `L_s + λ_u · L_u + λ_m · L_m`
pub fn stage2_loss<'g>(inputs: &StepInputs<'g, '_>, mixed: &MixedInputs<'g, '_>, cfg: &LossConfig) -> Result<LossTerms<'g>> {
    let stage1 = stage1_loss(inputs, cfg)?;
    let mixed_loss = mixed_ce_loss(&mixed.probs, mixed.labels, mixed.weights)?;
    let total = stage1.total.add(mixed_loss.scale(cfg.lambda_m))?;
    Ok(LossTerms {
        mixed: Some(mixed_loss),
        total,
        ..stage1
    })
}
