use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, ValueEnum};
use sca_core::config::RunConfig;
use sca_core::mixer::{count_params, MixerConfig, Variant};
use sca_core::params::ParamStore;
use sca_core::pipeline::{build_model, Datasets};
use sca_core::scenegen::grammar::lexicon;
use sca_core::scenegen::TargetKind;
use sca_core::trainer::{FeatureCache, Phase, Trainer};

use crate::commands::{check_data, load_config, write_text, CONFIG_FILE};
use crate::manifest::RunManifest;
use crate::{frozen, CliError, CliResult, Ctx};

/// Text-decoder width used for the paper-scale counts.
pub const PAPER_D_LM: usize = 1280;
/// Reported parameter counts, in millions, for 2/4/8/12/24 layers.
pub const PAPER_COUNTS_M: [(usize, f64); 5] = [(2, 3.3), (4, 6.5), (8, 12.8), (12, 19.1), (24, 38.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    MixerSize,
    MixerArch,
    LrGrid,
    Lsj,
    Pretrain,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::MixerSize => "mixer-size",
            Suite::MixerArch => "mixer-arch",
            Suite::LrGrid => "lr-grid",
            Suite::Lsj => "lsj",
            Suite::Pretrain => "pretrain",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Base config; defaults to the data directory's.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Configurations trained at once.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub parallel: u16,
    #[arg(long)]
    pub steps_pretrain: Option<usize>,
    #[arg(long)]
    pub steps_finetune: Option<usize>,
    /// List the grid without training.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub run: RunConfig,
    pub pretrain: bool,
    /// Paper-scale parameter count, for the mixer-size suite.
    pub paper_params: Option<usize>,
}

fn lr_label(v: f64) -> String {
    if v == 0.0 { "0".to_string() } else { format!("{v:e}") }
}

/// The grid of a suite around `base`.
pub fn grid(suite: Suite, base: &RunConfig) -> CliResult<Vec<Entry>> {
    let mut out = Vec::new();
    let mut push = |name: String, f: &dyn Fn(&mut RunConfig), pretrain: bool, paper_params: Option<usize>| -> CliResult<()> {
        let mut run = base.clone();
        f(&mut run);
        let run = RunConfig::from_text(&run.to_text())?;
        out.push(Entry { name, run, pretrain, paper_params });
        Ok(())
    };
    match suite {
        Suite::MixerSize => {
            for (layers, _) in PAPER_COUNTS_M {
                let paper = count_params(&MixerConfig::paper_scale(layers), PAPER_D_LM);
                push(format!("layers-{layers}"), &|r| r.model.mixer.n_text_layers = layers, false, Some(paper))?;
            }
        }
        Suite::MixerArch => {
            for v in [Variant::TextQueryWithSam, Variant::TextQueryWithoutSam, Variant::RoiAlignMlp, Variant::RoiAlign] {
                push(v.name().to_string(), &|r| r.model.mixer.variant = v, false, None)?;
            }
        }
        Suite::LrGrid => {
            for mixer in [1e-4, 5e-5] {
                for lm in [5e-6, 1e-6, 5e-7, 1e-7, 0.0] {
                    let name = format!("mixer-{}_lm-{}", lr_label(mixer), lr_label(lm));
                    push(
                        name,
                        &|r| {
                            r.train.mixer_lr = mixer;
                            r.train.lm_lr = lm;
                        },
                        false,
                        None,
                    )?;
                }
            }
        }
        Suite::Lsj => {
            for lsj in [None, Some((1.0, 2.0)), Some((0.1, 2.0))] {
                let name = lsj.map_or("lsj-off".to_string(), |(a, b)| format!("lsj-{a:.1}-{b:.1}"));
                push(name, &|r| r.train.lsj = lsj, false, None)?;
            }
        }
        Suite::Pretrain => {
            let (p, f) = (base.train.steps_pretrain, base.train.steps_finetune);
            push(format!("finetune-only-{}", p + f), &|r| r.train.steps_finetune = p + f, false, None)?;
            push(format!("pretrain-{p}+finetune-{f}"), &|_| {}, true, None)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Row {
    pub name: String,
    pub trainable: usize,
    pub paper_params: Option<usize>,
    pub val_loss: f64,
    pub means: BTreeMap<String, f64>,
    pub seconds: f64,
}

const SHOWN: [&str; 5] = ["CIDEr-D", "BLEU@4", "METEOR-exact", "ROUGE-L", "ExactMatch"];

fn run_entry(e: &Entry, frozen: &ParamStore, data: &Datasets, cache: &mut FeatureCache) -> CliResult<Row> {
    let t0 = Instant::now();
    let run = &e.run;
    let model = build_model(run, frozen, run.train.seed)?;
    let first = if e.pretrain { Phase::Pretrain } else { Phase::Finetune };
    let mut t = Trainer::new(model, run.train, first)?;
    t.adopt_cache(std::mem::take(cache));
    if e.pretrain {
        t.run_pretrain(&data.detection, &data.caption, &[])?;
    }
    t.run_finetune(&data.caption, &[])?;
    let val_loss = t.val_loss(&data.val, TargetKind::Caption)?;
    let (report, _) = t.evaluate(&data.val, TargetKind::Caption, run.train.beam, &lexicon(&run.scene.color_names()))?;
    *cache = t.take_cache();
    let row = Row {
        name: e.name.clone(),
        trainable: t.partition.trainable.iter().map(|n| t.model.store.get(n).map_or(0, |p| p.len())).sum(),
        paper_params: e.paper_params,
        val_loss,
        means: report.means,
        seconds: t0.elapsed().as_secs_f64(),
    };
    log::info!("{}: CIDEr-D {:.2}, val loss {:.4} in {:.0}s", row.name, row.means["CIDEr-D"], val_loss, row.seconds);
    Ok(row)
}

fn table(suite: Suite, rows: &[Row]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<28}{:>12}", "config", "params");
    if suite == Suite::MixerSize {
        let _ = write!(s, "{:>14}{:>10}", "paper-scale", "table");
    }
    let _ = write!(s, "{:>10}", "val_loss");
    for c in SHOWN {
        let _ = write!(s, "{c:>14}");
    }
    let _ = writeln!(s);
    for r in rows {
        let _ = write!(s, "{:<28}{:>12}", r.name, r.trainable);
        if let Some(p) = r.paper_params {
            let table = PAPER_COUNTS_M.iter().find(|(l, _)| r.name == format!("layers-{l}")).map_or(f64::NAN, |x| x.1);
            let _ = write!(s, "{:>13.2}M{:>9.1}M", p as f64 / 1e6, table);
        }
        let _ = write!(s, "{:>10.4}", r.val_loss);
        for c in SHOWN {
            let _ = write!(s, "{:>14.2}", r.means.get(c).copied().unwrap_or(f64::NAN));
        }
        let _ = writeln!(s);
    }
    s
}

fn key_values(rows: &[Row]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(s, "{}.trainable_params={}", r.name, r.trainable);
        if let Some(p) = r.paper_params {
            let _ = writeln!(s, "{}.paper_scale_params={p}", r.name);
        }
        let _ = writeln!(s, "{}.val_loss={}", r.name, r.val_loss);
        for (k, v) in &r.means {
            let _ = writeln!(s, "{}.{k}={v}", r.name);
        }
        let _ = writeln!(s, "{}.seconds={}", r.name, r.seconds);
    }
    s
}

pub fn ablate(ctx: &Ctx, a: AblateArgs) -> CliResult<()> {
    let data_dir = ctx.path(&a.data_dir);
    let config = a.config.map(|p| ctx.path(&p)).unwrap_or_else(|| data_dir.join(CONFIG_FILE));
    let mut base = load_config(Some(&config))?;
    if let Some(s) = a.steps_pretrain {
        base.train.steps_pretrain = s;
    }
    if let Some(s) = a.steps_finetune {
        base.train.steps_finetune = s;
    }
    let entries = grid(a.suite, &base)?;
    if a.dry_run {
        for e in &entries {
            let phases = if e.pretrain {
                format!("pretrain {} + finetune {}", e.run.train.steps_pretrain, e.run.train.steps_finetune)
            } else {
                format!("finetune {}", e.run.train.steps_finetune)
            };
            match e.paper_params {
                Some(p) => println!("{}\t{phases}\tpaper-scale params {p}", e.name),
                None => println!("{}\t{phases}", e.name),
            }
        }
        return Ok(());
    }
    check_data(&base, &data_dir, a.force)?;
    let data = Datasets::import(&data_dir)?;
    let out = ctx.path(&a.out);
    let mut m = RunManifest::start(&format!("ablate {}", a.suite.name()), &base.to_text(), &base.hash(), base.train.seed);

    // Frozen weights are prepared once per distinct key before any training.
    let cache_dir = data_dir.join("cache");
    let mut stores: BTreeMap<(String, Option<String>), ParamStore> = BTreeMap::new();
    let mut keys = Vec::with_capacity(entries.len());
    for e in &entries {
        let key = (frozen::lm_key_text(&e.run), frozen::world_key_text(&e.run));
        if !stores.contains_key(&key) {
            stores.insert(key.clone(), frozen::frozen(&e.run, &data, &cache_dir)?);
        }
        keys.push(key);
    }

    let workers = (a.parallel as usize).min(entries.len()).max(1);
    let slots: Vec<Mutex<Option<CliResult<Row>>>> = entries.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| {
                let mut cache = FeatureCache::default();
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= entries.len() {
                        break;
                    }
                    let r = run_entry(&entries[i], &stores[&keys[i]], &data, &mut cache);
                    *slots[i].lock().unwrap() = Some(r);
                }
            });
        }
    });
    let mut rows = Vec::with_capacity(entries.len());
    for (e, slot) in entries.iter().zip(slots) {
        let r = slot.into_inner().unwrap().ok_or_else(|| CliError::Input(format!("{} did not run", e.name)))?;
        rows.push(r?);
    }

    let text = table(a.suite, &rows);
    let stem = format!("ablation-{}", a.suite.name());
    write_text(&out.join(format!("{stem}.txt")), &text)?;
    write_text(&out.join(format!("{stem}.kv")), &key_values(&rows))?;
    for r in &rows {
        for (k, v) in &r.means {
            m.metrics.insert(format!("{}.{k}", r.name), *v);
        }
        m.field(&format!("entry.{}", r.name), r.seconds);
    }
    m.field("parallel", workers);
    m.finish(&out)?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_expected_members() {
        let base = RunConfig::default();
        let lsj: Vec<_> = grid(Suite::Lsj, &base).unwrap().into_iter().map(|e| e.run.train.lsj).collect();
        assert_eq!(lsj, vec![None, Some((1.0, 2.0)), Some((0.1, 2.0))]);
        let lr = grid(Suite::LrGrid, &base).unwrap();
        assert_eq!(lr.len(), 10);
        assert!(lr.iter().all(|e| e.run.train.lm_lr <= e.run.train.mixer_lr));
        let sizes = grid(Suite::MixerSize, &base).unwrap();
        for (e, (layers, m)) in sizes.iter().zip(PAPER_COUNTS_M) {
            assert_eq!(e.run.model.mixer.n_text_layers, layers);
            let got = e.paper_params.unwrap() as f64 / 1e6;
            assert!(got > 0.0 && (got - m).abs() / m < 0.05, "{layers}: {got} vs {m}");
        }
        let p = grid(Suite::Pretrain, &base).unwrap();
        let t = &base.train;
        assert_eq!(p[0].run.train.steps_finetune, t.steps_pretrain + t.steps_finetune);
        assert!(!p[0].pretrain && p[1].pretrain);
    }
}
