//! Procedural two-domain segmentation scenes.
//!
//! A scene is a grid of square cells over a background. Each cell hosts at
//! most one object whose class is drawn i.i.d. from the long-tail frequency
//! vector (class 0 means "leave the background"). Every class has a fixed
//! shape, a base colour and a texture level. Both domains share geometry
//! statistics; the target domain rotates hues, scales brightness and adds
//! sensor noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    /// Fills its whole cell.
    Block,
    /// Radius-3 disk.
    Disk,
    /// Full-width bar three pixels tall.
    Bar,
    /// Radius-3 diamond (L1 ball).
    Diamond,
}

impl Shape {
    /// Bounding box `(rows, cols)` for a cell of side `cell`.
    fn extent(self, cell: usize) -> (usize, usize) {
        match self {
            Shape::Block => (cell, cell),
            Shape::Disk | Shape::Diamond => (7, 7),
            Shape::Bar => (3, cell),
        }
    }

    fn covers(self, dr: usize, dc: usize) -> bool {
        let (r, c) = (dr as i64 - 3, dc as i64 - 3);
        match self {
            Shape::Block | Shape::Bar => true,
            Shape::Disk => r * r + c * c <= 9,
            Shape::Diamond => r.abs() + c.abs() <= 3,
        }
    }

    /// Pixels covered inside one cell.
    pub fn area(self, cell: usize) -> usize {
        let (h, w) = self.extent(cell);
        (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| self.covers(r, c)).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub cell: usize,
    /// Shape of every object class; entry 0 (background) is unused.
    pub shapes: Vec<Shape>,
    /// Source-domain base colour per class. The defaults put the background
    /// on the grey axis and the four object classes 90° apart in hue at
    /// equal saturation, so a hue rotation moves every object class by the
    /// same amount toward its neighbour.
    pub colors: Vec<[f64; 3]>,
    /// Per-pixel colour noise inside each class region.
    pub texture: Vec<f64>,
    /// Probability that a cell hosts each class; entry 0 keeps the background.
    pub frequency: Vec<f64>,
    pub rare_class: usize,
    /// Sensor noise shared by both domains.
    pub base_noise: f64,
    /// Target hue rotation, degrees.
    pub hue_shift: f64,
    /// Target brightness multiplier.
    pub brightness: f64,
    /// Extra target sensor noise.
    pub target_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            height: 64,
            width: 64,
            cell: 8,
            shapes: vec![Shape::Block, Shape::Block, Shape::Disk, Shape::Bar, Shape::Diamond],
            colors: vec![
                [0.5, 0.5, 0.5],
                [0.745, 0.378, 0.378],
                [0.5, 0.712, 0.288],
                [0.255, 0.622, 0.622],
                [0.5, 0.288, 0.712],
            ],
            texture: vec![0.02, 0.03, 0.02, 0.04, 0.02],
            frequency: vec![0.30, 0.30, 0.22, 0.13, 0.05],
            rare_class: 4,
            base_noise: 0.02,
            hue_shift: 38.0,
            brightness: 1.0,
            target_noise: 0.01,
        }
    }
}

/// Hue rotation about the grey axis.
pub fn rotate_hue(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3.0;
    let r3 = (1.0f64 / 3.0).sqrt();
    let a = c + (1.0 - c) * k;
    let b = k * (1.0 - c) - r3 * s;
    let d = k * (1.0 - c) + r3 * s;
    [
        a * rgb[0] + b * rgb[1] + d * rgb[2],
        d * rgb[0] + a * rgb[1] + b * rgb[2],
        b * rgb[0] + d * rgb[1] + a * rgb[2],
    ]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidArgument { name: "scene", reason });
        if self.classes < 2 || self.classes > 254 {
            return bad(format!("class count {} outside 2..=254", self.classes));
        }
        for (what, len) in [
            ("shapes", self.shapes.len()),
            ("colors", self.colors.len()),
            ("texture", self.texture.len()),
            ("frequency", self.frequency.len()),
        ] {
            if len != self.classes {
                return bad(format!("{what} has {len} entries for {} classes", self.classes));
            }
        }
        if self.cell < 8 || !self.height.is_multiple_of(self.cell) || !self.width.is_multiple_of(self.cell) {
            return bad(format!("cell {} must be >= 8 and tile {}x{}", self.cell, self.height, self.width));
        }
        if self.frequency.iter().any(|&f| f < 0.0) || self.frequency.iter().sum::<f64>() <= 0.0 {
            return bad("frequency must be non-negative with positive mass".into());
        }
        if self.rare_class >= self.classes {
            return bad(format!("rare class {} out of range", self.rare_class));
        }
        Ok(())
    }

    /// Base colour of `class` as seen in `domain`.
    pub fn class_color(&self, class: usize, domain: Domain) -> [f64; 3] {
        let base = self.colors[class];
        match domain {
            Domain::Source => base,
            Domain::Target => rotate_hue(base, self.hue_shift).map(|v| v * self.brightness),
        }
    }

    /// Expected fraction of pixels labelled `class` (object classes only).
    pub fn expected_pixel_fraction(&self, class: usize) -> f64 {
        let total: f64 = self.frequency.iter().sum();
        let cell_area = (self.cell * self.cell) as f64;
        self.frequency[class] / total * self.shapes[class].area(self.cell) as f64 / cell_area
    }

    fn layout(&self, rng: &mut ChaCha8Rng) -> LabelMap {
        let mut labels = LabelMap::filled(self.height, self.width, 0);
        let total: f64 = self.frequency.iter().sum();
        for cr in 0..self.height / self.cell {
            for cc in 0..self.width / self.cell {
                let mut u = rng.random::<f64>() * total;
                let mut class = self.classes - 1;
                for (c, &f) in self.frequency.iter().enumerate() {
                    if u < f {
                        class = c;
                        break;
                    }
                    u -= f;
                }
                let shape = self.shapes[class];
                let (sh, sw) = shape.extent(self.cell);
                let off_r = rng.random_range(0..=self.cell - sh);
                let off_c = rng.random_range(0..=self.cell - sw);
                if class == 0 {
                    continue;
                }
                for dr in 0..sh {
                    for dc in 0..sw {
                        if shape.covers(dr, dc) {
                            let r = cr * self.cell + off_r + dr;
                            let c = cc * self.cell + off_c + dc;
                            labels.data[r * self.width + c] = class as u8;
                        }
                    }
                }
            }
        }
        labels
    }

    fn render(&self, labels: &LabelMap, domain: Domain, rng: &mut ChaCha8Rng) -> Image {
        let n = labels.pixels();
        let mut data = vec![0.0; 3 * n];
        let noise = match domain {
            Domain::Source => self.base_noise,
            Domain::Target => (self.base_noise.powi(2) + self.target_noise.powi(2)).sqrt(),
        };
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let colors: Vec<[f64; 3]> = (0..self.classes).map(|c| self.class_color(c, domain)).collect();
        for p in 0..n {
            let class = labels.data[p] as usize;
            let sigma = (self.texture[class].powi(2) + noise * noise).sqrt();
            for ch in 0..3 {
                let v = colors[class][ch] + sigma * unit.sample(rng);
                data[ch * n + p] = v.clamp(0.0, 1.0);
            }
        }
        Image {
            height: labels.height,
            width: labels.width,
            data,
        }
    }

    /// `n` scenes of `domain`. The same seed always yields the same scenes,
    /// and geometry depends on the seed only, not on the domain.
    pub fn generate_domain(&self, domain: Domain, n: usize, seed: u64) -> Result<Vec<(Image, LabelMap)>> {
        self.validate()?;
        let mut geometry = ChaCha8Rng::seed_from_u64(seed);
        let mut appearance = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0105);
        Ok((0..n)
            .map(|_| {
                let labels = self.layout(&mut geometry);
                let image = self.render(&labels, domain, &mut appearance);
                (image, labels)
            })
            .collect())
    }
}
