//! Binary loss landscapes: loss and `d loss / d p` as a function of the
//! learnable probability `p`, with gradients taken by the autodiff engine.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::{self, LossMask, ProbMap};

pub const CSV_HEADER: &str = "loss_kind,p,loss,grad";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Shannon,
    MaxSquare,
    Focal,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Shannon, LossKind::MaxSquare, LossKind::Focal];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Shannon => "shannon",
            LossKind::MaxSquare => "maxsquare",
            LossKind::Focal => "focal",
        }
    }

    /// Parses a `--kind` argument; `all` expands to every kind.
    pub fn parse_selection(s: &str) -> Result<Vec<LossKind>> {
        if s == "all" {
            Ok(Self::ALL.to_vec())
        } else {
            Ok(vec![s.parse()?])
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownLossKind(s.to_string()))
    }
}

/// Evenly spaced probabilities in `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lo: 0.0005,
            hi: 0.9995,
            points: 1999,
        }
    }
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if self.points < 3 || !(0.0 < self.lo && self.lo < self.hi && self.hi < 1.0) {
            return Err(Error::InvalidArgument {
                name: "grid",
                reason: format!("need >= 3 points inside (0, 1), got {self:?}"),
            });
        }
        Ok(())
    }

    pub fn at(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            return self.hi;
        }
        self.lo + (self.hi - self.lo) * i as f64 / (self.points - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveSample {
    pub p: f64,
    pub loss: f64,
    pub dloss_dp: f64,
}

/// The binary loss of `kind` at distribution `(p, 1 − p)`, plus its
/// derivative. For the focal loss the estimate `(p_hat, 1 − p_hat)` is held
/// fixed, so its Shannon term is a constant offset.
pub fn evaluate(kind: LossKind, p: f64, p_hat: f64, gamma: f64) -> Result<CurveSample> {
    let g = Graph::new();
    let x = g.leaf(vec![p], &[1])?;
    let first = g.constant(vec![1.0, 0.0], &[2, 1])?;
    let second = g.constant(vec![0.0, 1.0], &[2, 1])?;
    let probs = ProbMap::new(first.mul(x)?.add(second.mul(x.neg().add_scalar(1.0))?)?)?;
    let mask = LossMask::full(1);
    let loss = match kind {
        LossKind::Shannon => losses::shannon_entropy_loss(&probs, &mask)?,
        LossKind::MaxSquare => losses::maximum_square_loss(&probs, &mask)?,
        LossKind::Focal => {
            let estimate = ProbMap::new(g.constant(vec![p_hat, 1.0 - p_hat], &[2, 1])?)?;
            losses::unsupervised_focal_loss(&estimate, &probs, &mask, gamma)?
        }
    };
    g.backward(loss)?;
    Ok(CurveSample {
        p,
        loss: loss.item(),
        dloss_dp: x.grad_or_zeros()[0],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub kind: LossKind,
    pub p_hat: f64,
    pub gamma: f64,
    pub grid: Grid,
    pub samples: Vec<CurveSample>,
}

pub fn curve(kind: LossKind, p_hat: f64, gamma: f64, grid: Grid) -> Result<Curve> {
    grid.validate()?;
    if !(0.0 < p_hat && p_hat < 1.0) {
        return Err(Error::InvalidArgument {
            name: "p_hat",
            reason: format!("{p_hat} is not in (0, 1)"),
        });
    }
    let samples = (0..grid.points)
        .map(|i| evaluate(kind, grid.at(i), p_hat, gamma))
        .collect::<Result<_>>()?;
    Ok(Curve {
        kind,
        p_hat,
        gamma,
        grid,
        samples,
    })
}

const GOLDEN_TOL: f64 = 1e-4;

impl Curve {
    fn loss_at(&self, p: f64) -> f64 {
        evaluate(self.kind, p, self.p_hat, self.gamma).map_or(f64::INFINITY, |s| s.loss)
    }

    /// Grid argmin (lowest `p` on ties) refined by golden-section search
    /// over the neighbouring grid cells.
    pub fn global_min(&self) -> f64 {
        let best = self
            .samples
            .iter()
            .enumerate()
            .fold(0, |b, (i, s)| if s.loss < self.samples[b].loss { i } else { b });
        let mut lo = self.samples[best.saturating_sub(1)].p;
        let mut hi = self.samples[(best + 1).min(self.samples.len() - 1)].p;
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = hi - inv_phi * (hi - lo);
        let mut d = lo + inv_phi * (hi - lo);
        let (mut fc, mut fd) = (self.loss_at(c), self.loss_at(d));
        while hi - lo > GOLDEN_TOL {
            if fc <= fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - inv_phi * (hi - lo);
                fc = self.loss_at(c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + inv_phi * (hi - lo);
                fd = self.loss_at(d);
            }
        }
        let mid = 0.5 * (lo + hi);
        // Keep the grid point if refinement did not improve on it.
        if self.loss_at(mid) <= self.samples[best].loss {
            mid
        } else {
            self.samples[best].p
        }
    }

    /// Sample whose `p` is closest to `p`.
    pub fn nearest(&self, p: f64) -> CurveSample {
        *self
            .samples
            .iter()
            .min_by(|a, b| (a.p - p).abs().total_cmp(&(b.p - p).abs()))
            .expect("curves are nonempty")
    }
}

/// One row per sample, kinds in the given order, 17 significant digits.
pub fn write_csv(curves: &[Curve], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for c in curves {
        for s in &c.samples {
            writeln!(out, "{},{:.16e},{:.16e},{:.16e}", c.kind.name(), s.p, s.loss, s.dloss_dp)?;
        }
    }
    Ok(())
}

pub fn emit_csv(curves: &[Curve], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(curves, &mut out)?;
    out.flush()?;
    Ok(())
}
