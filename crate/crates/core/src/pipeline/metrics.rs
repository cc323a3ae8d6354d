//! Confusion-matrix based segmentation metrics.

use std::io::Write;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::losses::IGNORE;
use crate::pipeline::model::PixelModel;

/// Accumulated `classes × classes` confusion counts, rows are ground truth
/// and columns predictions. Pixels labelled [`IGNORE`] are skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, prediction: &LabelMap, truth: &LabelMap) -> Result<()> {
        if prediction.data.len() != truth.data.len() {
            return Err(Error::LengthMismatch {
                what: "prediction",
                expected: truth.data.len(),
                got: prediction.data.len(),
            });
        }
        for (pixel, (&p, &t)) in prediction.data.iter().zip(&truth.data).enumerate() {
            if t == IGNORE {
                continue;
            }
            for l in [p, t] {
                if l as usize >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        pixel,
                        classes: self.classes,
                    });
                }
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn at(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[truth * self.classes + prediction]
    }

    pub fn evaluation(&self) -> Evaluation {
        let k = self.classes;
        let iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.at(c, c);
                let fn_: u64 = (0..k).map(|p| self.at(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|t| self.at(t, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..k).map(|c| self.at(c, c)).sum();
        Evaluation {
            iou,
            miou,
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        }
    }
}

/// Per-class IoU (`None` for classes absent from both prediction and truth,
/// which are left out of the mean) and summary scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

impl Evaluation {
    /// IoU of `class` in percentage points, 0 when undefined.
    pub fn class_points(&self, class: usize) -> f64 {
        100.0 * self.iou.get(class).copied().flatten().unwrap_or(0.0)
    }

    pub fn miou_points(&self) -> f64 {
        100.0 * self.miou
    }

    /// `class_id,iou` rows; undefined IoUs are written as empty fields.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "class_id,iou")?;
        for (c, iou) in self.iou.iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{c},{v}")?,
                None => writeln!(out, "{c},")?,
            }
        }
        writeln!(out, "mean,{}", self.miou)
    }
}

pub fn evaluate_predictions(predictions: &[LabelMap], truths: &[LabelMap], classes: usize) -> Result<Evaluation> {
    let mut confusion = Confusion::new(classes);
    for (p, t) in predictions.iter().zip(truths) {
        confusion.add(p, t)?;
    }
    Ok(confusion.evaluation())
}

pub fn evaluate_miou(model: &PixelModel, dataset: &[(Image, LabelMap)]) -> Result<Evaluation> {
    let mut confusion = Confusion::new(model.classes);
    for (x, y) in dataset {
        confusion.add(&model.predict(x)?, y)?;
    }
    Ok(confusion.evaluation())
}
