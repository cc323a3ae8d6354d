//! Class-level dynamic confidence thresholds.
//!
//! Each class keeps its own threshold `α[c]`, refreshed after every target
//! sample by an exponential moving average towards a per-sample estimate.
//! The estimate is read off the class's descending confidence list at an
//! index that shrinks as `α[c]` falls, so classes the model is unsure about
//! get progressively lower bars.

use std::io::Write;

use crate::error::{Error, Result};
use crate::losses::{LossMask, ProbMap};

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdState {
    pub alpha: Vec<f64>,
    /// Historical memory of the moving average.
    pub a: f64,
    /// Global proportion of pixels kept per class.
    pub b: f64,
    /// Exponent regularizing the proportion for low-threshold classes.
    pub d: f64,
    /// Initial threshold.
    pub t0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdParams {
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub t0: f64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            a: 0.9,
            b: 0.8,
            d: 8.0,
            t0: 0.8,
        }
    }
}

impl ThresholdState {
    pub fn new(classes: usize, params: ThresholdParams) -> Self {
        Self {
            alpha: vec![params.t0; classes],
            a: params.a,
            b: params.b,
            d: params.d,
            t0: params.t0,
        }
    }

    pub fn with_defaults(classes: usize) -> Self {
        Self::new(classes, ThresholdParams::default())
    }

    pub fn classes(&self) -> usize {
        self.alpha.len()
    }

    /// One full refresh from a sample: estimate, then blend into `alpha`.
    pub fn update(&mut self, confidence: &[f64], labels: &[usize]) -> Result<()> {
        let estimate = per_sample_threshold(confidence, labels, self)?;
        self.alpha = ema_update(self, &estimate)?;
        Ok(())
    }
}

/// Per-pixel maximum probability and its class (lowest index on ties).
pub fn confidence_and_argmax(p: &ProbMap<'_>) -> (Vec<f64>, Vec<usize>) {
    let (classes, pixels) = (p.classes(), p.pixels());
    let v = p.tensor().values();
    let mut conf = vec![f64::NEG_INFINITY; pixels];
    let mut label = vec![0; pixels];
    for c in 0..classes {
        let row = &v[c * pixels..(c + 1) * pixels];
        for n in 0..pixels {
            if row[n] > conf[n] {
                conf[n] = row[n];
                label[n] = c;
            }
        }
    }
    (conf, label)
}

/// Position in a descending list of `len` confidences used as the class
/// estimate: `floor(b · (e^{α−1})^d · len)`, clamped to a valid index.
pub fn threshold_index(alpha: f64, b: f64, d: f64, len: usize) -> usize {
    debug_assert!(len > 0);
    let factor = b * ((alpha - 1.0).exp()).powf(d);
    let idx = (factor * len as f64).floor();
    if idx.is_nan() || idx < 0.0 {
        0
    } else {
        (idx as usize).min(len - 1)
    }
}

/// Threshold estimate `α'` from one sample. Classes that never win a pixel
/// keep their previous threshold.
pub fn per_sample_threshold(confidence: &[f64], labels: &[usize], state: &ThresholdState) -> Result<Vec<f64>> {
    if confidence.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "per_sample_threshold labels",
            expected: confidence.len(),
            got: labels.len(),
        });
    }
    let classes = state.classes();
    let mut lists: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for (pixel, (&conf, &label)) in confidence.iter().zip(labels).enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                label: label.min(u8::MAX as usize) as u8,
                pixel,
                classes,
            });
        }
        lists[label].push(conf);
    }
    Ok(lists
        .into_iter()
        .zip(&state.alpha)
        .map(|(mut list, &prev)| {
            if list.is_empty() {
                return prev;
            }
            list.sort_by(|x, y| y.total_cmp(x));
            list[threshold_index(prev, state.b, state.d, list.len())]
        })
        .collect())
}

/// `α_k = a · α_{k−1} + (1 − a) · α'`
pub fn ema_update(state: &ThresholdState, estimate: &[f64]) -> Result<Vec<f64>> {
    if estimate.len() != state.classes() {
        return Err(Error::LengthMismatch {
            what: "ema_update estimate",
            expected: state.classes(),
            got: estimate.len(),
        });
    }
    Ok(state
        .alpha
        .iter()
        .zip(estimate)
        .map(|(&prev, &cur)| state.a * prev + (1.0 - state.a) * cur)
        .collect())
}

/// Pixels whose confidence strictly exceeds the threshold of their class.
pub fn adaptive_mask(confidence: &[f64], labels: &[usize], alpha: &[f64]) -> Result<LossMask> {
    if confidence.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "adaptive_mask",
            left: vec![confidence.len()],
            right: vec![labels.len()],
        });
    }
    confidence
        .iter()
        .zip(labels)
        .map(|(&conf, &label)| {
            alpha.get(label).map(|&t| conf > t).ok_or(Error::LengthMismatch {
                what: "adaptive_mask alpha",
                expected: label + 1,
                got: alpha.len(),
            })
        })
        .collect::<Result<Vec<bool>>>()
        .map(LossMask::new)
}

/// Pixels whose confidence strictly exceeds a single global threshold.
pub fn fixed_mask(confidence: &[f64], t: f64) -> LossMask {
    LossMask::new(confidence.iter().map(|&c| c > t).collect())
}

/// Class sampling distribution `softmax(−α)`: lower thresholds, which mark
/// harder classes, are drawn more often.
pub fn class_selection_distribution(alpha: &[f64]) -> Vec<f64> {
    let max = alpha.iter().map(|a| -a).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = alpha.iter().map(|a| (-a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Appends `step,class_id,alpha` rows for the current thresholds.
pub fn write_alpha_rows(out: &mut impl Write, step: usize, alpha: &[f64]) -> std::io::Result<()> {
    for (class, a) in alpha.iter().enumerate() {
        writeln!(out, "{step},{class},{a}")?;
    }
    Ok(())
}

pub const ALPHA_CSV_HEADER: &str = "step,class_id,alpha";
