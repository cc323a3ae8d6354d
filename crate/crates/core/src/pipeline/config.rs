//! Experiment configuration and its `key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Every field of [`TrainConfig`]
//! (including the scene parameters) has a key; see [`TrainConfig::keys`].
//! List-valued keys take comma-separated values.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::pipeline::perturb::Perturbation;
use crate::pipeline::scene::{SceneSpec, Shape};
use crate::threshold::ThresholdParams;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    /// SGD steps of source-only pretraining.
    pub source_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Images per domain per step; every pixel of each image enters the batch.
    pub batch_images: usize,
    pub hidden: usize,
    pub loss: LossConfig,
    pub threshold: ThresholdParams,
    pub perturb: Perturbation,
    /// Long-tail classes pasted per source image in stage two.
    pub paste_classes: usize,
    /// Start stage two from the stage-one thresholds instead of `t0`.
    pub reuse_thresholds: bool,
    pub n_source: usize,
    pub n_target: usize,
    /// Held-out target scenes used for evaluation.
    pub n_eval: usize,
    /// Steps between target-IoU log rows; 0 disables intermediate rows.
    pub eval_every: usize,
    pub scene: SceneSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            lr: 0.5,
            source_steps: 1500,
            stage1_steps: 600,
            stage2_steps: 600,
            batch_images: 2,
            hidden: 16,
            loss: LossConfig::default(),
            threshold: ThresholdParams::default(),
            perturb: Perturbation::default(),
            paste_classes: 1,
            reuse_thresholds: false,
            n_source: 100,
            n_target: 100,
            n_eval: 40,
            eval_every: 0,
            scene: SceneSpec::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.trim().parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String> {
    value.split(',').map(|v| parse_num(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid boolean {value:?} for {key}")),
    }
}

fn parse_shape(s: &str) -> std::result::Result<Shape, String> {
    match s.trim() {
        "block" => Ok(Shape::Block),
        "disk" => Ok(Shape::Disk),
        "bar" => Ok(Shape::Bar),
        "diamond" => Ok(Shape::Diamond),
        other => Err(format!("unknown shape {other:?}")),
    }
}

fn shape_name(s: Shape) -> &'static str {
    match s {
        Shape::Block => "block",
        Shape::Disk => "disk",
        Shape::Bar => "bar",
        Shape::Diamond => "diamond",
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Every recognised key, in the order [`Self::to_text`] writes them.
    pub fn keys() -> Vec<String> {
        Self::default()
            .to_text()
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, _)| k.trim().to_string()))
            .collect()
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_inner(key, value).map_err(|reason| Error::Config { line: 0, reason })
    }

    fn set_inner(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let s = &mut self.scene;
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "source_steps" => self.source_steps = parse_num(key, value)?,
            "stage1_steps" => self.stage1_steps = parse_num(key, value)?,
            "stage2_steps" => self.stage2_steps = parse_num(key, value)?,
            "batch_images" => self.batch_images = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "gamma" => self.loss.gamma = parse_num(key, value)?,
            "lambda_u" => self.loss.lambda_u = parse_num(key, value)?,
            "lambda_m" => self.loss.lambda_m = parse_num(key, value)?,
            "threshold_a" => self.threshold.a = parse_num(key, value)?,
            "threshold_b" => self.threshold.b = parse_num(key, value)?,
            "threshold_d" => self.threshold.d = parse_num(key, value)?,
            "threshold_t0" => self.threshold.t0 = parse_num(key, value)?,
            "perturb_noise" => self.perturb.noise = parse_num(key, value)?,
            "perturb_brightness" => self.perturb.brightness = parse_num(key, value)?,
            "perturb_contrast" => self.perturb.contrast = parse_num(key, value)?,
            "perturb_flip_prob" => self.perturb.flip_prob = parse_num(key, value)?,
            "paste_classes" => self.paste_classes = parse_num(key, value)?,
            "reuse_thresholds" => self.reuse_thresholds = parse_bool(key, value)?,
            "n_source" => self.n_source = parse_num(key, value)?,
            "n_target" => self.n_target = parse_num(key, value)?,
            "n_eval" => self.n_eval = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "scene_classes" => s.classes = parse_num(key, value)?,
            "scene_height" => s.height = parse_num(key, value)?,
            "scene_width" => s.width = parse_num(key, value)?,
            "scene_cell" => s.cell = parse_num(key, value)?,
            "scene_shapes" => s.shapes = value.split(',').map(parse_shape).collect::<std::result::Result<_, _>>()?,
            "scene_colors" => {
                let flat: Vec<f64> = parse_list(key, value)?;
                if !flat.len().is_multiple_of(3) {
                    return Err(format!("{key} needs a multiple of 3 values"));
                }
                s.colors = flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            }
            "scene_texture" => s.texture = parse_list(key, value)?,
            "scene_frequency" => s.frequency = parse_list(key, value)?,
            "scene_rare_class" => s.rare_class = parse_num(key, value)?,
            "scene_base_noise" => s.base_noise = parse_num(key, value)?,
            "scene_hue_shift" => s.hue_shift = parse_num(key, value)?,
            "scene_brightness" => s.brightness = parse_num(key, value)?,
            "scene_target_noise" => s.target_noise = parse_num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Config { line: i + 1, reason };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            self.set_inner(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            reason: format!("override {assignment:?} is not key=value"),
        })?;
        self.set(key.trim(), value.trim())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("lr", self.lr.to_string());
        kv("source_steps", self.source_steps.to_string());
        kv("stage1_steps", self.stage1_steps.to_string());
        kv("stage2_steps", self.stage2_steps.to_string());
        kv("batch_images", self.batch_images.to_string());
        kv("hidden", self.hidden.to_string());
        kv("gamma", self.loss.gamma.to_string());
        kv("lambda_u", self.loss.lambda_u.to_string());
        kv("lambda_m", self.loss.lambda_m.to_string());
        kv("threshold_a", self.threshold.a.to_string());
        kv("threshold_b", self.threshold.b.to_string());
        kv("threshold_d", self.threshold.d.to_string());
        kv("threshold_t0", self.threshold.t0.to_string());
        kv("perturb_noise", self.perturb.noise.to_string());
        kv("perturb_brightness", self.perturb.brightness.to_string());
        kv("perturb_contrast", self.perturb.contrast.to_string());
        kv("perturb_flip_prob", self.perturb.flip_prob.to_string());
        kv("paste_classes", self.paste_classes.to_string());
        kv("reuse_thresholds", self.reuse_thresholds.to_string());
        kv("n_source", self.n_source.to_string());
        kv("n_target", self.n_target.to_string());
        kv("n_eval", self.n_eval.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("scene_classes", s.classes.to_string());
        kv("scene_height", s.height.to_string());
        kv("scene_width", s.width.to_string());
        kv("scene_cell", s.cell.to_string());
        kv("scene_shapes", s.shapes.iter().map(|&x| shape_name(x)).collect::<Vec<_>>().join(","));
        kv("scene_colors", join(&s.colors.iter().flatten().copied().collect::<Vec<_>>()));
        kv("scene_texture", join(&s.texture));
        kv("scene_frequency", join(&s.frequency));
        kv("scene_rare_class", s.rare_class.to_string());
        kv("scene_base_noise", s.base_noise.to_string());
        kv("scene_hue_shift", s.hue_shift.to_string());
        kv("scene_brightness", s.brightness.to_string());
        kv("scene_target_noise", s.target_noise.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::Config {
                line: 0,
                reason: reason.to_string(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_images == 0 || self.hidden == 0 {
            return bad("batch_images and hidden must be positive");
        }
        if self.n_source == 0 || self.n_target == 0 || self.n_eval == 0 {
            return bad("dataset sizes must be positive");
        }
        if self.loss.gamma < 0.0 || self.loss.lambda_u < 0.0 || self.loss.lambda_m < 0.0 {
            return bad("gamma, lambda_u and lambda_m must be non-negative");
        }
        let t = &self.threshold;
        if !(0.0..1.0).contains(&t.a) || !(t.b > 0.0 && t.b <= 1.0) || t.d < 0.0 || !(0.0..=1.0).contains(&t.t0) {
            return bad("threshold parameters need 0<=a<1, 0<b<=1, d>=0, 0<=t0<=1");
        }
        let p = &self.perturb;
        if p.noise < 0.0 || p.brightness < 0.0 || !(0.0..1.0).contains(&p.contrast) || !(0.0..=1.0).contains(&p.flip_prob) {
            return bad("perturbation magnitudes out of range");
        }
        self.scene.validate()
    }
}
