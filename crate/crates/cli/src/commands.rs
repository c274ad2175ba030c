use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use sca_core::config::{RunConfig, SEED_ENV};
use sca_core::model::Model;
use sca_core::numerics::Tensor;
use sca_core::pipeline::{build_model, Datasets, SPLITS};
use sca_core::prompt::{Prompt, PromptKind};
use sca_core::scenegen::grammar::lexicon;
use sca_core::scenegen::{PixelBox, TargetKind};
use sca_core::trainer::{load_checkpoint, save_checkpoint, Checkpoint, Phase, RunLog, Trainer};
use sca_core::Error;

use crate::manifest::RunManifest;
use crate::{frozen, imageio, CliError, CliResult, Ctx};

pub const CONFIG_FILE: &str = "config.txt";
pub const MODEL_FILE: &str = "model.ckpt";
const PREVIEWS: usize = 4;

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Parses a config file, or takes the defaults, then applies `SCA_SEED`.
pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let mut run = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    run.apply_env()?;
    if std::env::var_os(SEED_ENV).is_some() {
        log::info!("seed {} from {SEED_ENV}", run.train.seed);
    }
    Ok(run)
}

/// The data directory must have been generated with this run's scene and
/// data settings.
pub fn check_data(run: &RunConfig, data_dir: &Path, force: bool) -> CliResult<()> {
    let p = data_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&p)
        .map_err(|e| CliError::Usage(format!("{} is not a generated data directory ({e})", data_dir.display())))?;
    let made = RunConfig::from_text(&text)?;
    if made.scene == run.scene && made.data == run.data {
        return Ok(());
    }
    let msg = format!("{} was generated with different [scene] or [data] settings", data_dir.display());
    if force {
        log::warn!("{msg}; continuing because of --force");
        Ok(())
    } else {
        Err(Error::Config(format!("{msg} (pass --force to use it anyway)")).into())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the training and data seeds.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn gen_data(ctx: &Ctx, a: GenDataArgs) -> CliResult<()> {
    let mut run = load_config(a.config.map(|p| ctx.path(&p)).as_deref())?;
    if let Some(s) = a.seed {
        run.set_seed(s);
    }
    let out = ctx.path(&a.out);
    fs::create_dir_all(&out).map_err(|e| CliError::Input(format!("cannot create {}: {e}", out.display())))?;
    let text = run.to_text();
    let mut m = RunManifest::start("gen-data", &text, &run.hash(), run.data.seed);
    let data = Datasets::generate(&run)?;
    data.export(&out)?;
    write_text(&out.join(CONFIG_FILE), &text)?;

    let preview = out.join("preview");
    fs::create_dir_all(&preview)?;
    let mut seen = BTreeSet::new();
    for s in data.val.iter().filter(|s| seen.insert(s.scene_seed)).take(PREVIEWS) {
        imageio::write_png(&s.image, &preview.join(format!("val-{}.png", s.scene_seed)))?;
    }

    let d = &run.data;
    let images = [
        ("detection", d.detection_images),
        ("caption", d.caption_images),
        ("val", d.val_images),
        ("lm_train", d.lm_images),
        ("lm_heldout", data.lm_heldout.iter().map(|s| s.scene_seed).collect::<BTreeSet<_>>().len()),
    ];
    for (name, n) in images {
        m.field(&format!("images.{name}"), n);
        m.field(&format!("regions.{name}"), data.split(name).unwrap().len());
    }
    let g = gcd(d.detection_images, d.caption_images).max(1);
    m.field("image_ratio", format!("{}:{}", d.detection_images / g, d.caption_images / g));
    m.finish(&out)?;
    println!(
        "wrote {} detection and {} caption images ({} regions) to {}",
        d.detection_images,
        d.caption_images,
        data.detection.len() + data.caption.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Defaults to the config the data directory was generated with.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Checkpoint to start from. The same phase resumes it; the other phase
    /// starts fresh from its weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Accept config-hash and data-directory mismatches with a warning.
    #[arg(long)]
    pub force: bool,
}

fn summary(log: &RunLog) -> Option<f64> {
    let tail = &log.losses[log.losses.len().saturating_sub(10)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

pub fn target_of(phase: Phase) -> TargetKind {
    match phase {
        Phase::Pretrain => TargetKind::Label,
        Phase::Finetune => TargetKind::Caption,
    }
}

fn phase_of(ckpt: &Checkpoint) -> CliResult<Phase> {
    Phase::from_tag(&ckpt.tag).ok_or_else(|| CliError::Usage(format!("checkpoint tag `{}` is not a trained model", ckpt.tag)))
}

pub fn train(ctx: &Ctx, a: TrainArgs, phase: Phase) -> CliResult<()> {
    let command = match phase {
        Phase::Pretrain => "pretrain",
        Phase::Finetune => "finetune",
    };
    let data_dir = ctx.path(&a.data_dir);
    let config = a.config.map(|p| ctx.path(&p)).unwrap_or_else(|| data_dir.join(CONFIG_FILE));
    let run = load_config(Some(&config))?;
    check_data(&run, &data_dir, a.force)?;
    let init = match &a.init {
        Some(p) => {
            let p = ctx.path(p);
            let c = load_checkpoint(&p)?;
            c.check_hash(&run.hash(), a.force)?;
            Some((p, c))
        }
        None => None,
    };
    let out = ctx.path(&a.out);
    let text = run.to_text();
    let mut m = RunManifest::start(command, &text, &run.hash(), run.train.seed);
    let data = Datasets::import(&data_dir)?;

    let mut trainer = match &init {
        Some((p, c)) => {
            let from = phase_of(c)?;
            let model = Model::from_params(run.model, c.vocab.clone(), c.params.clone())?;
            m.field("lineage.parent", p.display());
            m.field("lineage.parent_tag", &c.tag);
            m.field("lineage.parent_step", c.step);
            m.field("lineage.parent_config_hash", &c.config_hash);
            if from == phase {
                m.field("lineage.mode", "resume");
                Trainer::resume(model, run.train, c)?
            } else {
                m.field("lineage.mode", "new_phase");
                Trainer::new(model, run.train, phase)?
            }
        }
        None => {
            let frozen = frozen::frozen(&run, &data, &data_dir.join("cache"))?;
            Trainer::new(build_model(&run, &frozen, run.train.seed)?, run.train, phase)?
        }
    };
    let start = trainer.step;
    let log = match phase {
        Phase::Pretrain => trainer.run_pretrain(&data.detection, &data.caption, &data.val)?,
        Phase::Finetune => trainer.run_finetune(&data.caption, &data.val)?,
    };
    let mut metrics = BTreeMap::new();
    if let Some(l) = summary(&log) {
        metrics.insert("train_loss".to_string(), l);
    }
    let val = match log.val_curve.last() {
        Some(&(_, v)) => v,
        None => trainer.val_loss(&data.val, target_of(phase))?,
    };
    metrics.insert("val_loss".to_string(), val);
    metrics.insert("lsj_dropped".to_string(), log.lsj_dropped as f64);

    let ckpt_path = out.join(MODEL_FILE);
    save_checkpoint(&trainer.checkpoint(&run.hash(), &text, metrics.clone()), &ckpt_path)?;
    let mut curve = String::from("step\tloss\n");
    for (i, l) in log.losses.iter().enumerate() {
        let _ = writeln!(curve, "{}\t{l}", start + i + 1);
    }
    write_text(&out.join("losses.tsv"), &curve)?;
    let mut vc = String::from("step\tval_loss\n");
    for (s, l) in &log.val_curve {
        let _ = writeln!(vc, "{s}\t{l}");
    }
    write_text(&out.join("val_curve.tsv"), &vc)?;

    m.checkpoints.push(("model".to_string(), ckpt_path.clone()));
    m.metrics = metrics;
    m.field("steps", trainer.step);
    m.finish(&out)?;
    println!("{command}: {} steps, val loss {val:.4}, checkpoint {}", trainer.step, ckpt_path.display());
    Ok(())
}

pub fn parse_box(s: &str) -> Result<PixelBox, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected x0,y0,x1,y1, got `{s}`"));
    }
    let mut v = [0.0; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| format!("`{p}` is not a finite number"))?;
    }
    Ok(PixelBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] })
}

fn check_box(b: &PixelBox, canvas: usize) -> CliResult<()> {
    let n = canvas as f64;
    for (name, v) in [("x0", b.x0), ("y0", b.y0), ("x1", b.x1), ("y1", b.y1)] {
        if v < 0.0 {
            return Err(CliError::Usage(format!("box {name} = {v} is below 0")));
        }
        if v > n {
            return Err(CliError::Usage(format!("box {name} = {v} exceeds the canvas size {canvas}")));
        }
    }
    if b.x0 >= b.x1 {
        return Err(CliError::Usage(format!("box x0 = {} must be less than x1 = {}", b.x0, b.x1)));
    }
    if b.y0 >= b.y1 {
        return Err(CliError::Usage(format!("box y0 = {} must be less than y1 = {}", b.y0, b.y1)));
    }
    Ok(())
}

/// The box as the prompt kind the model was trained with.
fn prompt_from_box(b: PixelBox, kind: PromptKind, canvas: usize) -> Prompt {
    match kind {
        PromptKind::Box => Prompt::Box(b),
        PromptKind::Point => Prompt::Point((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0),
        PromptKind::Mask => {
            let mut m = Tensor::zeros(&[canvas, canvas]);
            for y in 0..canvas {
                for x in 0..canvas {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if b.x0 <= px && px < b.x1 && b.y0 <= py && py < b.y1 {
                        m.data_mut()[y * canvas + x] = 1.0;
                    }
                }
            }
            Prompt::Mask(m)
        }
    }
}

pub fn load_model(path: &Path) -> CliResult<(Checkpoint, RunConfig, Model)> {
    let c = load_checkpoint(path)?;
    let run = RunConfig::from_text(&c.config_text)?;
    let model = Model::from_params(run.model, c.vocab.clone(), c.params.clone())?;
    Ok((c, run, model))
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// RGB PNG of canvas size.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long = "box", value_parser = parse_box, allow_hyphen_values = true)]
    pub region: PixelBox,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u16).range(1..))]
    pub beam: u16,
    #[arg(long, default_value = "mask_logits.txt")]
    pub mask_out: PathBuf,
}

pub fn infer(ctx: &Ctx, a: InferArgs) -> CliResult<()> {
    let (_, run, model) = load_model(&ctx.path(&a.checkpoint))?;
    let canvas = run.scene.canvas;
    let image = imageio::read_png(&ctx.path(&a.image))?;
    if image.shape() != [canvas, canvas, 3] {
        return Err(CliError::Usage(format!("image is {}x{}, the model expects {canvas}x{canvas}", image.shape()[1], image.shape()[0])));
    }
    check_box(&a.region, canvas)?;
    let prompt = prompt_from_box(a.region, run.model.prompt_kind, canvas);
    let (ids, mask) = model.infer(&image, &prompt, a.beam as usize)?;
    let g = mask.shape()[0];
    let mut text = String::new();
    for row in mask.data().chunks(g) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(text, "{}", line.join(" "));
    }
    write_text(&ctx.path(&a.mask_out), &text)?;
    println!("{}", model.vocab.detokenize(&ids));
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub report_out: PathBuf,
    /// Defaults to the checkpoint's `train.beam`.
    #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
    pub beam: Option<u16>,
    #[arg(long)]
    pub force: bool,
}

pub fn eval(ctx: &Ctx, a: EvalArgs) -> CliResult<()> {
    let ckpt_path = ctx.path(&a.checkpoint);
    let (c, run, model) = load_model(&ckpt_path)?;
    let phase = phase_of(&c)?;
    let data_dir = ctx.path(&a.data_dir);
    check_data(&run, &data_dir, a.force)?;
    if !SPLITS.contains(&a.split.as_str()) {
        return Err(CliError::Usage(format!("unknown split `{}` (expected one of {})", a.split, SPLITS.join(", "))));
    }
    let data = Datasets::import(&data_dir)?;
    let samples = data.split(&a.split).unwrap();
    let beam = a.beam.map_or(run.train.beam, |b| b as usize);
    let kind = target_of(phase);
    let mut m = RunManifest::start("eval", &c.config_text, &c.config_hash, run.train.seed);
    let mut trainer = Trainer::new(model, run.train, phase)?;
    let (report, cands) = trainer.evaluate(samples, kind, beam, &lexicon(&run.scene.color_names()))?;

    let out = ctx.path(&a.report_out);
    let table = format!("checkpoint {}\nsplit {} ({:?} targets), beam {beam}\n{}", ckpt_path.display(), a.split, kind, report.table());
    write_text(&out.join("report.txt"), &table)?;
    write_text(&out.join("report.kv"), &report.key_values())?;
    imageio::write_histogram(&report.cider_distribution, &out.join("cider_hist.png"))?;
    let mut rows = String::from("scene_seed\tobject\tcandidate\treference\tcider_d\n");
    let cider = &report.per_sample["CIDEr-D"];
    for ((s, cand), score) in samples.iter().zip(&cands).zip(cider) {
        let reference = trainer.model.vocab.detokenize(&s.target(kind));
        let _ = writeln!(rows, "{}\t{}\t{cand}\t{reference}\t{score}", s.scene_seed, s.object_index);
    }
    write_text(&out.join("captions.tsv"), &rows)?;

    m.checkpoints.push(("evaluated".to_string(), ckpt_path));
    m.metrics = report.means.clone();
    m.field("split", &a.split);
    m.field("beam", beam);
    m.finish(&out)?;
    print!("{table}");
    Ok(())
}
