//! Per-pixel dense classifier and its input features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::losses::ProbMap;

/// Colour, 3×3 local mean and 3×3 local standard deviation per channel.
pub const FEATURE_DIM: usize = 9;

/// Feature matrix laid out `[FEATURE_DIM, pixels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub pixels: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn of(image: &Image) -> Self {
        let (h, w) = (image.height, image.width);
        let n = h * w;
        let mut data = vec![0.0; FEATURE_DIM * n];
        for ch in 0..Image::CHANNELS {
            let plane = &image.data[ch * n..(ch + 1) * n];
            data[ch * n..(ch + 1) * n].copy_from_slice(plane);
            for r in 0..h {
                for c in 0..w {
                    let (mut sum, mut sq, mut count) = (0.0, 0.0, 0.0);
                    for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                        for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                            let v = plane[rr * w + cc];
                            sum += v;
                            sq += v * v;
                            count += 1.0;
                        }
                    }
                    let mean = sum / count;
                    let var = (sq / count - mean * mean).max(0.0);
                    data[(3 + ch) * n + r * w + c] = mean;
                    data[(6 + ch) * n + r * w + c] = var.sqrt();
                }
            }
        }
        Self { pixels: n, data }
    }

    /// Stacks several feature matrices along the pixel axis.
    pub fn concat(parts: &[Features]) -> Self {
        let pixels: usize = parts.iter().map(|f| f.pixels).sum();
        let mut data = Vec::with_capacity(FEATURE_DIM * pixels);
        for d in 0..FEATURE_DIM {
            for f in parts {
                data.extend_from_slice(&f.data[d * f.pixels..(d + 1) * f.pixels]);
            }
        }
        Self { pixels, data }
    }
}

/// Two-layer tanh network applied independently at every pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelModel {
    pub classes: usize,
    pub hidden: usize,
    /// `[hidden, FEATURE_DIM]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[classes, hidden]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Model parameters registered as leaves of one graph.
pub struct BoundModel<'g> {
    pub w1: Tensor<'g>,
    pub b1: Tensor<'g>,
    pub w2: Tensor<'g>,
    pub b2: Tensor<'g>,
}

impl PixelModel {
    pub fn init<R: Rng + ?Sized>(classes: usize, hidden: usize, rng: &mut R) -> Self {
        let s1 = (6.0 / (FEATURE_DIM + hidden) as f64).sqrt();
        let s2 = (6.0 / (hidden + classes) as f64).sqrt();
        let mut draw = |n: usize, s: f64| (0..n).map(|_| rng.random_range(-s..s)).collect::<Vec<_>>();
        let w1 = draw(hidden * FEATURE_DIM, s1);
        let w2 = draw(classes * hidden, s2);
        Self {
            classes,
            hidden,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; classes],
        }
    }

    /// All-zero parameters: uniform predictions everywhere.
    pub fn zeros(classes: usize, hidden: usize) -> Self {
        Self {
            classes,
            hidden,
            w1: vec![0.0; hidden * FEATURE_DIM],
            b1: vec![0.0; hidden],
            w2: vec![0.0; classes * hidden],
            b2: vec![0.0; classes],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters flattened as `w1, b1, w2, b2`.
    pub fn flatten(&self) -> Vec<f64> {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .into_iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.parameter_count());
        let mut out = self.clone();
        let mut rest = flat;
        for v in [&mut out.w1, &mut out.b1, &mut out.w2, &mut out.b2] {
            let (head, tail) = rest.split_at(v.len());
            v.copy_from_slice(head);
            rest = tail;
        }
        out
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> Result<BoundModel<'g>> {
        Ok(BoundModel {
            w1: g.leaf(self.w1.clone(), &[self.hidden, FEATURE_DIM])?,
            b1: g.leaf(self.b1.clone(), &[self.hidden])?,
            w2: g.leaf(self.w2.clone(), &[self.classes, self.hidden])?,
            b2: g.leaf(self.b2.clone(), &[self.classes])?,
        })
    }

    /// Plain gradient step using the gradients accumulated in `bound`.
    pub fn sgd_step(&mut self, bound: &BoundModel<'_>, lr: f64) {
        for (param, leaf) in [
            (&mut self.w1, bound.w1),
            (&mut self.b1, bound.b1),
            (&mut self.w2, bound.w2),
            (&mut self.b2, bound.b2),
        ] {
            for (p, g) in param.iter_mut().zip(leaf.grad_or_zeros()) {
                *p -= lr * g;
            }
        }
    }

    /// Class probabilities `[classes, pixels]` without recording gradients.
    pub fn probabilities(&self, features: &Features) -> Result<Vec<f64>> {
        let g = Graph::new();
        let x = g.constant(features.data.clone(), &[FEATURE_DIM, features.pixels])?;
        let bound = BoundModel {
            w1: g.constant(self.w1.clone(), &[self.hidden, FEATURE_DIM])?,
            b1: g.constant(self.b1.clone(), &[self.hidden])?,
            w2: g.constant(self.w2.clone(), &[self.classes, self.hidden])?,
            b2: g.constant(self.b2.clone(), &[self.classes])?,
        };
        let p = bound.forward(x)?;
        Ok(p.tensor().to_vec())
    }

    /// Argmax labels, lowest class index on ties.
    pub fn predict(&self, image: &Image) -> Result<LabelMap> {
        let probs = self.probabilities(&Features::of(image))?;
        let n = image.pixels();
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.classes {
                    if probs[c * n + p] > probs[best * n + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(image.height, image.width, labels)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let model: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if model.parameter_count() != model.hidden * (FEATURE_DIM + 1) + model.classes * (model.hidden + 1) {
            return Err(Error::InvalidArgument {
                name: "model",
                reason: "parameter arrays do not match the declared sizes".into(),
            });
        }
        Ok(model)
    }
}

impl<'g> BoundModel<'g> {
    /// Accumulated gradients flattened in [`PixelModel::flatten`] order.
    pub fn gradient(&self) -> Vec<f64> {
        [self.w1, self.b1, self.w2, self.b2]
            .into_iter()
            .flat_map(|t| t.grad_or_zeros())
            .collect()
    }

    pub fn logits(&self, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let hidden = self.w1.matmul(x)?.add_bias(self.b1)?.tanh();
        self.w2.matmul(hidden)?.add_bias(self.b2)
    }

    pub fn forward(&self, x: Tensor<'g>) -> Result<ProbMap<'g>> {
        ProbMap::from_logits(self.logits(x)?)
    }

    pub fn probs(&self, features: &Features) -> Result<ProbMap<'g>> {
        let x = self.w1.graph().constant(features.data.clone(), &[FEATURE_DIM, features.pixels])?;
        self.forward(x)
    }
}
