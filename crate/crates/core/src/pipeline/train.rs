//! Source-only pretraining and the two adaptation stages.
//!
//! Every stage draws from its own seeded stream, so a run is a pure
//! function of its [`TrainConfig`].

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::cim::{self, CategoryDatabase};
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::losses::{self, LossConfig, LossMask, MixedInputs, StepInputs};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::metrics::{evaluate_miou, Evaluation};
use crate::pipeline::model::{Features, PixelModel};
use crate::pipeline::perturb::{align_probs, perturb, Alignment};
use crate::pipeline::scene::Domain;
use crate::threshold::{self, ThresholdState, ALPHA_CSV_HEADER};

pub const METRICS_CSV_HEADER: &str = "step,L_s,L_u,L_m,total";

/// Independent stream for one part of a run.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

const TAG_SOURCE_DATA: u64 = 1;
const TAG_TARGET_DATA: u64 = 2;
const TAG_EVAL_DATA: u64 = 3;
const TAG_SOURCE_EVAL_DATA: u64 = 4;
const TAG_INIT: u64 = 10;
const TAG_SOURCE_ONLY: u64 = 11;
const TAG_BASELINE: u64 = 12;
const TAG_STAGE1: u64 = 13;
const TAG_STAGE2: u64 = 14;

/// Generated scenes plus cached features of the fixed images.
pub struct Datasets {
    pub source: Vec<(Image, LabelMap)>,
    /// Target scenes used for training; their labels are never read by the
    /// training loops.
    pub target: Vec<(Image, LabelMap)>,
    /// Held-out labelled target scenes.
    pub eval: Vec<(Image, LabelMap)>,
    /// Held-out labelled source scenes.
    pub source_eval: Vec<(Image, LabelMap)>,
    source_features: Vec<Features>,
    target_features: Vec<Features>,
}

impl Datasets {
    pub fn generate(cfg: &TrainConfig) -> Result<Self> {
        let draw = |domain, n, tag| {
            let seed = stream(cfg.seed, tag).random::<u64>();
            cfg.scene.generate_domain(domain, n, seed)
        };
        Self::from_parts(
            draw(Domain::Source, cfg.n_source, TAG_SOURCE_DATA)?,
            draw(Domain::Target, cfg.n_target, TAG_TARGET_DATA)?,
            draw(Domain::Target, cfg.n_eval, TAG_EVAL_DATA)?,
            draw(Domain::Source, cfg.n_eval, TAG_SOURCE_EVAL_DATA)?,
        )
    }

    pub fn from_parts(
        source: Vec<(Image, LabelMap)>,
        target: Vec<(Image, LabelMap)>,
        eval: Vec<(Image, LabelMap)>,
        source_eval: Vec<(Image, LabelMap)>,
    ) -> Result<Self> {
        let first = source.first().ok_or(Error::InvalidArgument {
            name: "source",
            reason: "no source scenes".into(),
        })?;
        let (h, w) = (first.0.height, first.0.width);
        for (x, y) in source.iter().chain(&target).chain(&eval).chain(&source_eval) {
            if !x.same_extent(h, w) || y.height != h || y.width != w {
                return Err(Error::ShapeMismatch {
                    op: "datasets",
                    left: vec![h, w],
                    right: vec![x.height, x.width],
                });
            }
        }
        if target.is_empty() {
            return Err(Error::InvalidArgument {
                name: "target",
                reason: "no target scenes".into(),
            });
        }
        let source_features = source.iter().map(|(x, _)| Features::of(x)).collect();
        let target_features = target.iter().map(|(x, _)| Features::of(x)).collect();
        Ok(Self {
            source,
            target,
            eval,
            source_eval,
            source_features,
            target_features,
        })
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.source[0].0.height, self.source[0].0.width)
    }
}

/// Per-step loss components as logged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub supervised: f64,
    pub unsupervised: f64,
    pub mixed: f64,
    pub total: f64,
    /// Fraction of target pixels admitted by the loss mask.
    pub mask_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    /// Thresholds after each step's update.
    pub alpha: Vec<(usize, Vec<f64>)>,
    /// Held-out target evaluations every `eval_every` steps.
    pub evaluations: Vec<(usize, Evaluation)>,
}

impl TrainLog {
    pub fn write_metrics_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{METRICS_CSV_HEADER}")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{},{}", r.step, r.supervised, r.unsupervised, r.mixed, r.total)?;
        }
        Ok(())
    }

    pub fn write_threshold_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{ALPHA_CSV_HEADER}")?;
        for (step, alpha) in &self.alpha {
            threshold::write_alpha_rows(out, *step, alpha)?;
        }
        Ok(())
    }

    pub fn write_iou_trajectory_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "step,class_id,iou")?;
        for (step, e) in &self.evaluations {
            for (c, iou) in e.iou.iter().enumerate() {
                match iou {
                    Some(v) => writeln!(out, "{step},{c},{v}")?,
                    None => writeln!(out, "{step},{c},")?,
                }
            }
        }
        Ok(())
    }

    /// Lowest threshold reached by `class` over the run.
    pub fn min_alpha(&self, class: usize) -> Option<f64> {
        self.alpha.iter().map(|(_, a)| a[class]).reduce(f64::min)
    }
}

/// Cross-domain mixed pairs of one step.
pub struct MixedBatch {
    pub features: Features,
    pub labels: Vec<u8>,
    pub weights: Vec<f64>,
}

/// Everything a step consumes besides the parameters and thresholds.
pub struct StepBatch {
    pub source: Features,
    pub source_labels: Vec<u8>,
    /// Unperturbed target images (weak branch).
    pub weak: Option<Features>,
    /// Perturbed target images (strong branch).
    pub strong: Option<Features>,
    pub alignments: Vec<Alignment>,
    pub mixed: Option<MixedBatch>,
    pub height: usize,
    pub width: usize,
}

pub struct StepOutcome {
    pub values: [f64; 4],
    pub mask: LossMask,
    /// Flattened gradient of the optimized scalar.
    pub gradient: Vec<f64>,
}

/// Forward, threshold update, mask, loss and backward for one batch.
/// `state` is refreshed from the aligned weak-branch prediction before the
/// mask is drawn.
pub fn run_step(model: &PixelModel, batch: &StepBatch, loss: &LossConfig, state: &mut ThresholdState) -> Result<StepOutcome> {
    let g = Graph::new();
    let bound = model.bind(&g)?;
    let source = bound.probs(&batch.source)?;
    let (values, mask, total) = match (&batch.weak, &batch.strong) {
        (Some(weak), Some(strong)) => {
            let weak = align_probs(&bound.probs(weak)?, &batch.alignments, batch.height, batch.width)?;
            let strong = bound.probs(strong)?;
            let (confidence, labels) = threshold::confidence_and_argmax(&weak);
            state.update(&confidence, &labels)?;
            let mask = threshold::adaptive_mask(&confidence, &labels, &state.alpha)?;
            let inputs = StepInputs {
                source,
                source_labels: &batch.source_labels,
                weak,
                strong,
                mask: &mask,
            };
            let terms = match &batch.mixed {
                Some(m) => {
                    let mixed = MixedInputs {
                        probs: bound.probs(&m.features)?,
                        labels: &m.labels,
                        weights: &m.weights,
                    };
                    losses::stage2_loss(&inputs, &mixed, loss)?
                }
                None => losses::stage1_loss(&inputs, loss)?,
            };
            (terms.values(), mask, terms.total)
        }
        _ => {
            let ls = losses::supervised_ce_loss(&source, &batch.source_labels)?;
            ([ls.item(), 0.0, 0.0, ls.item()], LossMask::empty(0), ls)
        }
    };
    if values.iter().all(|v| v.is_finite()) {
        g.backward(total)?;
    }
    Ok(StepOutcome {
        values,
        mask,
        gradient: bound.gradient(),
    })
}

fn label_bytes(labels: &[&LabelMap]) -> Vec<u8> {
    labels.iter().flat_map(|y| y.data.iter().copied()).collect()
}

/// Which parts of the objective a stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    SourceOnly,
    One,
    Two,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::SourceOnly => "source-only",
            Stage::One => "stage1",
            Stage::Two => "stage2",
        }
    }
}

/// Resources for stage two that stay fixed over the run.
pub struct MixingContext {
    pub db: CategoryDatabase,
    /// Pseudo labels of every training target scene from the frozen model.
    pub pseudo: Vec<LabelMap>,
}

impl MixingContext {
    pub fn new(data: &Datasets, frozen: &PixelModel) -> Result<Self> {
        let labels: Vec<LabelMap> = data.source.iter().map(|(_, y)| y.clone()).collect();
        let db = cim::build_category_db(&labels, frozen.classes)?;
        let pseudo = data
            .target
            .iter()
            .map(|(x, _)| cim::pseudo_labels(frozen, x))
            .collect::<Result<_>>()?;
        Ok(Self { db, pseudo })
    }
}

/// Draws the batch of one step.
pub fn sample_batch<R: Rng + ?Sized>(
    stage: Stage,
    cfg: &TrainConfig,
    data: &Datasets,
    mixing: Option<&MixingContext>,
    alpha: &[f64],
    rng: &mut R,
) -> Result<StepBatch> {
    let (height, width) = data.extent();
    let k = cfg.batch_images;
    let src: Vec<usize> = (0..k).map(|_| rng.random_range(0..data.source.len())).collect();
    let source = Features::concat(&src.iter().map(|&i| data.source_features[i].clone()).collect::<Vec<_>>());
    let source_labels = label_bytes(&src.iter().map(|&i| &data.source[i].1).collect::<Vec<_>>());
    let mut batch = StepBatch {
        source,
        source_labels,
        weak: None,
        strong: None,
        alignments: Vec::new(),
        mixed: None,
        height,
        width,
    };
    if stage == Stage::SourceOnly {
        return Ok(batch);
    }
    let tgt: Vec<usize> = (0..k).map(|_| rng.random_range(0..data.target.len())).collect();
    let mut strong = Vec::with_capacity(k);
    for &i in &tgt {
        let (x_star, a) = perturb(&data.target[i].0, &cfg.perturb, rng);
        strong.push(Features::of(&x_star));
        batch.alignments.push(a);
    }
    batch.weak = Some(Features::concat(&tgt.iter().map(|&i| data.target_features[i].clone()).collect::<Vec<_>>()));
    batch.strong = Some(Features::concat(&strong));
    if stage == Stage::Two {
        let ctx = mixing.ok_or(Error::InvalidArgument {
            name: "mixing",
            reason: "stage two needs a mixing context".into(),
        })?;
        let mut feats = Vec::with_capacity(k);
        let mut labels = Vec::with_capacity(k * height * width);
        let mut weights = Vec::with_capacity(k * height * width);
        for (&s, &t) in src.iter().zip(&tgt) {
            let (xs, ys) = &data.source[s];
            let (xs2, ys2) = cim::long_tail_paste(xs, ys, &data.source, &ctx.db, alpha, cfg.paste_classes, rng)?;
            let mask = cim::make_mix_mask(&ys2, rng)?;
            let m = cim::mix(&xs2, &ys2, &data.target[t].0, &ctx.pseudo[t], &mask)?;
            feats.push(Features::of(&m.image));
            labels.extend_from_slice(&m.labels.data);
            weights.extend_from_slice(&m.weights);
        }
        batch.mixed = Some(MixedBatch {
            features: Features::concat(&feats),
            labels,
            weights,
        });
    }
    Ok(batch)
}

/// Generic SGD loop shared by all stages.
#[allow(clippy::too_many_arguments)]
pub fn train(
    stage: Stage,
    cfg: &TrainConfig,
    data: &Datasets,
    init: &PixelModel,
    steps: usize,
    mut state: ThresholdState,
    mixing: Option<&MixingContext>,
    rng: &mut ChaCha8Rng,
) -> Result<(PixelModel, TrainLog, ThresholdState)> {
    let mut model = init.clone();
    let mut log = TrainLog::default();
    for step in 0..steps {
        let batch = sample_batch(stage, cfg, data, mixing, &state.alpha, rng)?;
        let out = run_step(&model, &batch, &cfg.loss, &mut state)?;
        let [supervised, unsupervised, mixed, total] = out.values;
        if !out.values.iter().all(|v| v.is_finite()) || !out.gradient.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                stage: stage.name(),
                step,
                supervised,
                unsupervised,
                mixed,
            });
        }
        let theta: Vec<f64> = model
            .flatten()
            .iter()
            .zip(&out.gradient)
            .map(|(p, g)| p - cfg.lr * g)
            .collect();
        model = model.with_flat(&theta);
        log.records.push(StepRecord {
            step,
            supervised,
            unsupervised,
            mixed,
            total,
            mask_fraction: if out.mask.is_empty() {
                0.0
            } else {
                out.mask.count() as f64 / out.mask.len() as f64
            },
        });
        if stage != Stage::SourceOnly {
            log.alpha.push((step, state.alpha.clone()));
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            log.evaluations.push((step + 1, evaluate_miou(&model, &data.eval)?));
        }
    }
    Ok((model, log, state))
}

fn fresh_state(cfg: &TrainConfig) -> ThresholdState {
    ThresholdState::new(cfg.scene.classes, cfg.threshold)
}

/// Randomly initialized model trained on source labels only.
pub fn train_source_only(cfg: &TrainConfig, data: &Datasets) -> Result<(PixelModel, TrainLog)> {
    let init = PixelModel::init(cfg.scene.classes, cfg.hidden, &mut stream(cfg.seed, TAG_INIT));
    let (model, log, _) = train(
        Stage::SourceOnly,
        cfg,
        data,
        &init,
        cfg.source_steps,
        fresh_state(cfg),
        None,
        &mut stream(cfg.seed, TAG_SOURCE_ONLY),
    )?;
    Ok((model, log))
}

/// Stage one from source-pretrained weights.
pub fn train_stage1(cfg: &TrainConfig, data: &Datasets, pretrained: &PixelModel) -> Result<(PixelModel, TrainLog, ThresholdState)> {
    train(
        Stage::One,
        cfg,
        data,
        pretrained,
        cfg.stage1_steps,
        fresh_state(cfg),
        None,
        &mut stream(cfg.seed, TAG_STAGE1),
    )
}

/// Stage two: optimizes from the source-pretrained weights while the frozen
/// stage-one model supplies target pseudo labels. Thresholds restart at
/// `t0` unless `reuse_thresholds` is set and `stage1_state` is given.
pub fn train_stage2(
    cfg: &TrainConfig,
    data: &Datasets,
    pretrained: &PixelModel,
    frozen: &PixelModel,
    stage1_state: Option<&ThresholdState>,
) -> Result<(PixelModel, TrainLog, ThresholdState)> {
    let mixing = MixingContext::new(data, frozen)?;
    let state = match (cfg.reuse_thresholds, stage1_state) {
        (true, Some(s)) => s.clone(),
        _ => fresh_state(cfg),
    };
    train(
        Stage::Two,
        cfg,
        data,
        pretrained,
        cfg.stage2_steps,
        state,
        Some(&mixing),
        &mut stream(cfg.seed, TAG_STAGE2),
    )
}

/// Source-only training continued for as many steps as stage one runs,
/// giving a baseline with the same supervised budget.
pub fn train_baseline(cfg: &TrainConfig, data: &Datasets, pretrained: &PixelModel) -> Result<(PixelModel, TrainLog)> {
    let (model, log, _) = train(
        Stage::SourceOnly,
        cfg,
        data,
        pretrained,
        cfg.stage1_steps,
        fresh_state(cfg),
        None,
        &mut stream(cfg.seed, TAG_BASELINE),
    )?;
    Ok((model, log))
}

pub struct StageResult {
    pub model: PixelModel,
    pub log: TrainLog,
    /// Held-out target evaluation.
    pub target: Evaluation,
    /// Held-out source evaluation.
    pub source: Evaluation,
}

impl StageResult {
    /// Evaluates `model` on the held-out target and source scenes.
    pub fn evaluate(model: PixelModel, log: TrainLog, data: &Datasets) -> Result<Self> {
        Ok(Self {
            target: evaluate_miou(&model, &data.eval)?,
            source: evaluate_miou(&model, &data.source_eval)?,
            model,
            log,
        })
    }
}

pub struct ExperimentReport {
    pub pretrained: StageResult,
    pub baseline: StageResult,
    pub stage1: StageResult,
    pub stage2: StageResult,
    pub rare_class: usize,
}

/// The full desk-scale run: pretraining, baseline, stage one, stage two.
pub fn run_experiment(cfg: &TrainConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = Datasets::generate(cfg)?;
    let (pretrained, pre_log) = train_source_only(cfg, &data)?;
    let (baseline, base_log) = train_baseline(cfg, &data, &pretrained)?;
    let (theta1, log1, state1) = train_stage1(cfg, &data, &pretrained)?;
    let (theta2, log2, _) = train_stage2(cfg, &data, &pretrained, &theta1, Some(&state1))?;
    Ok(ExperimentReport {
        pretrained: StageResult::evaluate(pretrained, pre_log, &data)?,
        baseline: StageResult::evaluate(baseline, base_log, &data)?,
        stage1: StageResult::evaluate(theta1, log1, &data)?,
        stage2: StageResult::evaluate(theta2, log2, &data)?,
        rare_class: cfg.scene.rare_class,
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    f(&mut out)?;
    out.flush()?;
    Ok(())
}

/// Writes the logs and evaluations of one stage as `<name>_*.csv`.
pub fn write_stage_outputs(dir: &Path, name: &str, result: &StageResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_file(&dir.join(format!("{name}_metrics.csv")), |o| result.log.write_metrics_csv(o))?;
    if !result.log.alpha.is_empty() {
        write_file(&dir.join(format!("{name}_thresholds.csv")), |o| result.log.write_threshold_csv(o))?;
    }
    if !result.log.evaluations.is_empty() {
        write_file(&dir.join(format!("{name}_iou_trajectory.csv")), |o| result.log.write_iou_trajectory_csv(o))?;
    }
    write_file(&dir.join(format!("{name}_iou.csv")), |o| result.target.write_csv(o))?;
    write_file(&dir.join(format!("{name}_source_iou.csv")), |o| result.source.write_csv(o))?;
    result.model.save(dir.join(format!("{name}_model.json")))
}

impl ExperimentReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, r) in self.stages() {
            write_stage_outputs(dir, name, r)?;
        }
        write_file(&dir.join("summary.csv"), |o| self.write_summary(o))
    }

    pub fn stages(&self) -> [(&'static str, &StageResult); 4] {
        [
            ("pretrained", &self.pretrained),
            ("baseline", &self.baseline),
            ("stage1", &self.stage1),
            ("stage2", &self.stage2),
        ]
    }

    /// `model,target_miou,rare_iou,source_miou` in percentage points.
    pub fn write_summary(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "model,target_miou,rare_iou,source_miou")?;
        for (name, r) in self.stages() {
            writeln!(
                out,
                "{name},{:.4},{:.4},{:.4}",
                r.target.miou_points(),
                r.target.class_points(self.rare_class),
                r.source.miou_points()
            )?;
        }
        Ok(())
    }
}
