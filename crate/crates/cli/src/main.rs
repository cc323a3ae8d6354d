//! `uda`: data generation, the two adaptation stages, evaluation and
//! mixing previews for the synthetic two-domain task.
//!
//! Every command rebuilds its datasets from the configuration, so the same
//! config always sees the same scenes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uda_core::cim;
use uda_core::image::{write_pgm, LabelMap};
use uda_core::pipeline::config::TrainConfig;
use uda_core::pipeline::metrics::evaluate_miou;
use uda_core::pipeline::model::PixelModel;
use uda_core::pipeline::train::{self, Datasets, StageResult};
use uda_core::threshold::ThresholdState;
use uda_core::{Error, Result};

#[derive(Parser)]
#[command(name = "uda", version, about = "Two-stage entropy-based domain adaptation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lambda_u=0.1`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_text(&std::fs::read_to_string(path)?)?;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Source,
    Target,
    Eval,
    SourceEval,
}

#[derive(Subcommand)]
enum Command {
    /// Write the generated scenes as PPM images and PGM label maps.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Source pretraining followed by stage one.
    TrainStage1 {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage two from a pretrained model and a frozen stage-one model.
    TrainStage2 {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Source-pretrained weights (`pretrained_model.json`).
        #[arg(long)]
        pretrained: PathBuf,
        /// Stage-one weights used as the frozen pseudo-labeller.
        #[arg(long)]
        stage1: PathBuf,
        /// Stage-one threshold CSV; its last step seeds the thresholds when
        /// `reuse_thresholds = true`.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU of a saved model on a held-out split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One cross-domain mixed sample as `x_m.ppm`, `y_m.pgm` and `w_m.pgm`.
    MixPreview {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Frozen model for target pseudo labels; ground truth is used when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        source_index: usize,
        #[arg(long, default_value_t = 0)]
        target_index: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretraining, baseline, stage one and stage two in one go.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_split(dir: &Path, scenes: &[(uda_core::image::Image, LabelMap)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, (x, y)) in scenes.iter().enumerate() {
        x.save_ppm(dir.join(format!("{i:04}.ppm")))?;
        y.save_pgm(dir.join(format!("{i:04}.pgm")))?;
    }
    Ok(())
}

/// Alpha vector of the last step in a threshold CSV.
fn last_alpha(path: &Path, classes: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Config {
            line: i + 1,
            reason: format!("malformed threshold row {line:?}"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        rows.push((
            f[0].parse().map_err(|_| bad())?,
            f[1].parse().map_err(|_| bad())?,
            f[2].parse().map_err(|_| bad())?,
        ));
    }
    let last = rows.iter().map(|r| r.0).max().ok_or(Error::Config {
        line: 0,
        reason: "threshold CSV has no rows".into(),
    })?;
    let mut alpha = vec![f64::NAN; classes];
    for &(step, class, a) in &rows {
        if step == last && class < classes {
            alpha[class] = a;
        }
    }
    if alpha.iter().any(|a| a.is_nan()) {
        return Err(Error::Config {
            line: 0,
            reason: format!("step {last} does not cover all {classes} classes"),
        });
    }
    Ok(alpha)
}

fn report(name: &str, r: &StageResult, rare: usize) {
    println!(
        "{name}: target mIoU {:.2}, rare-class IoU {:.2}, source mIoU {:.2}",
        r.target.miou_points(),
        r.target.class_points(rare),
        r.source.miou_points()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let data = Datasets::generate(&cfg)?;
            write_split(&out.join("source"), &data.source)?;
            write_split(&out.join("target"), &data.target)?;
            write_split(&out.join("eval"), &data.eval)?;
            write_split(&out.join("source_eval"), &data.source_eval)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            println!(
                "wrote {} source, {} target, {} eval scenes to {}",
                data.source.len(),
                data.target.len(),
                data.eval.len(),
                out.display()
            );
        }
        Command::TrainStage1 { cfg, out } => {
            let cfg = cfg.load()?;
            let data = Datasets::generate(&cfg)?;
            let (pretrained, pre_log) = train::train_source_only(&cfg, &data)?;
            let (theta, log, _) = train::train_stage1(&cfg, &data, &pretrained)?;
            let pre = StageResult::evaluate(pretrained, pre_log, &data)?;
            let s1 = StageResult::evaluate(theta, log, &data)?;
            train::write_stage_outputs(&out, "pretrained", &pre)?;
            train::write_stage_outputs(&out, "stage1", &s1)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            report("pretrained", &pre, cfg.scene.rare_class);
            report("stage1", &s1, cfg.scene.rare_class);
        }
        Command::TrainStage2 {
            cfg,
            pretrained,
            stage1,
            thresholds,
            out,
        } => {
            let cfg = cfg.load()?;
            let data = Datasets::generate(&cfg)?;
            let pretrained = PixelModel::load(pretrained)?;
            let frozen = PixelModel::load(stage1)?;
            let state = match &thresholds {
                Some(path) => {
                    let mut s = ThresholdState::new(cfg.scene.classes, cfg.threshold);
                    s.alpha = last_alpha(path, cfg.scene.classes)?;
                    Some(s)
                }
                None => None,
            };
            let (theta, log, _) = train::train_stage2(&cfg, &data, &pretrained, &frozen, state.as_ref())?;
            let s2 = StageResult::evaluate(theta, log, &data)?;
            train::write_stage_outputs(&out, "stage2", &s2)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            report("stage2", &s2, cfg.scene.rare_class);
        }
        Command::Eval { cfg, model, split, out } => {
            let cfg = cfg.load()?;
            let data = Datasets::generate(&cfg)?;
            let model = PixelModel::load(model)?;
            let scenes = match split {
                Split::Source => &data.source,
                Split::Target => &data.target,
                Split::Eval => &data.eval,
                Split::SourceEval => &data.source_eval,
            };
            let e = evaluate_miou(&model, scenes)?;
            match out {
                Some(path) => {
                    let mut f = std::fs::File::create(path)?;
                    e.write_csv(&mut f)?;
                }
                None => e.write_csv(&mut std::io::stdout().lock())?,
            }
        }
        Command::MixPreview {
            cfg,
            model,
            source_index,
            target_index,
            seed,
            out,
        } => {
            let cfg = cfg.load()?;
            let data = Datasets::generate(&cfg)?;
            let (xs, ys) = data.source.get(source_index).ok_or(Error::InvalidArgument {
                name: "source_index",
                reason: format!("only {} source scenes", data.source.len()),
            })?;
            let (xt, yt) = data.target.get(target_index).ok_or(Error::InvalidArgument {
                name: "target_index",
                reason: format!("only {} target scenes", data.target.len()),
            })?;
            let pseudo = match &model {
                Some(path) => cim::pseudo_labels(&PixelModel::load(path)?, xt)?,
                None => yt.clone(),
            };
            let labels: Vec<LabelMap> = data.source.iter().map(|(_, y)| y.clone()).collect();
            let db = cim::build_category_db(&labels, cfg.scene.classes)?;
            let mut rng = train::stream(seed, 0);
            let alpha = vec![cfg.threshold.t0; cfg.scene.classes];
            let (xs2, ys2) = cim::long_tail_paste(xs, ys, &data.source, &db, &alpha, cfg.paste_classes, &mut rng)?;
            let mask = cim::make_mix_mask(&ys2, &mut rng)?;
            let m = cim::mix(&xs2, &ys2, xt, &pseudo, &mask)?;
            std::fs::create_dir_all(&out)?;
            m.image.save_ppm(out.join("x_m.ppm"))?;
            m.labels.save_pgm(out.join("y_m.pgm"))?;
            let weights: Vec<u8> = m.weights.iter().map(|&w| w as u8).collect();
            let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("w_m.pgm"))?);
            write_pgm(&mut f, m.labels.width, m.labels.height, &weights)?;
            println!("wrote mixed sample to {}", out.display());
        }
        Command::Run { cfg, out } => {
            let cfg = cfg.load()?;
            let r = train::run_experiment(&cfg)?;
            r.write(&out)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            for (name, s) in r.stages() {
                report(name, s, r.rare_class);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
