//! Corpus generation, language-model preparation and model assembly from a
//! [`RunConfig`].

use std::collections::BTreeSet;
use std::path::Path;

use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};
use crate::lm::{pretrain_lm, LmExample, LmReport};
use crate::model::{is_frozen_component, Model};
use crate::params::ParamStore;
use crate::prefit::prefit_sam_side;
use crate::scenegen::grammar::STOPWORDS;
use crate::scenegen::{build_corpus, export_dataset, import_dataset, CorpusKind, RegionSample, TargetKind};

/// Every split of the synthetic benchmark.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub detection: Vec<RegionSample>,
    pub caption: Vec<RegionSample>,
    pub val: Vec<RegionSample>,
    pub lm_train: Vec<RegionSample>,
    pub lm_heldout: Vec<RegionSample>,
}

pub const SPLITS: [&str; 5] = ["detection", "caption", "val", "lm_train", "lm_heldout"];

impl Datasets {
    pub fn generate(run: &RunConfig) -> Result<Datasets> {
        let d = &run.data;
        let vocab = run.scene.vocabulary();
        let corpus = |kind, base, n| build_corpus(kind, d.first_seed(base), n, &run.scene, &vocab).map(|c| c.samples);
        Ok(Datasets {
            detection: corpus(CorpusKind::Detection, DataConfig::DETECTION_SEED, d.detection_images)?,
            caption: corpus(CorpusKind::Caption, DataConfig::CAPTION_SEED, d.caption_images)?,
            val: corpus(CorpusKind::Caption, DataConfig::VAL_SEED, d.val_images)?,
            lm_train: corpus(CorpusKind::Caption, DataConfig::LM_SEED, d.lm_images)?,
            lm_heldout: corpus(CorpusKind::Caption, DataConfig::LM_HELDOUT_SEED, (d.lm_images / 10).max(1))?,
        })
    }

    pub fn export(&self, dir: &Path) -> Result<()> {
        for name in SPLITS {
            export_dataset(self.split(name).unwrap(), dir, name)?;
        }
        Ok(())
    }

    pub fn import(dir: &Path) -> Result<Datasets> {
        let load = |name| {
            import_dataset(dir, name).map_err(|e| match e {
                Error::Io(io) => Error::config(format!("cannot read split `{name}` in {}: {io}", dir.display())),
                other => other,
            })
        };
        Ok(Datasets {
            detection: load("detection")?,
            caption: load("caption")?,
            val: load("val")?,
            lm_train: load("lm_train")?,
            lm_heldout: load("lm_heldout")?,
        })
    }

    pub fn split(&self, name: &str) -> Option<&[RegionSample]> {
        Some(match name {
            "detection" => &self.detection,
            "caption" => &self.caption,
            "val" => &self.val,
            "lm_train" => &self.lm_train,
            "lm_heldout" => &self.lm_heldout,
            _ => return None,
        })
    }
}

/// Caption and label sentences of each region.
pub fn lm_examples(samples: &[RegionSample]) -> Vec<LmExample> {
    samples
        .iter()
        .flat_map(|s| {
            [
                LmExample { words: s.caption.clone(), task: TargetKind::Caption },
                LmExample { words: s.label.clone(), task: TargetKind::Label },
            ]
        })
        .collect()
}

pub fn prepare_lm(run: &RunConfig, lm_train: &[RegionSample], lm_heldout: &[RegionSample]) -> Result<(ParamStore, LmReport)> {
    let vocab = run.scene.vocabulary();
    let stop: BTreeSet<u32> = STOPWORDS.iter().filter_map(|w| vocab.id(w)).collect();
    let pc = crate::lm::LmPretrainConfig {
        task_len: run.model.mixer.n_task_tokens,
        content_len: run.model.mixer.n_query_tokens,
        ..run.lm_pretrain
    };
    pretrain_lm(&run.model.lm, &pc, &lm_examples(lm_train), &lm_examples(lm_heldout), &stop)
}

/// Frozen parameters shared by every model of a run: the world-seed draw of
/// the SAM-side modules, pre-fitted on `regions` when `run.prefit` asks for
/// it, plus the language model.
pub fn prepare_world(run: &RunConfig, lm: &ParamStore, regions: &[RegionSample]) -> Result<ParamStore> {
    let mut m = build_model(run, lm, 0)?;
    if run.prefit.steps > 0 {
        let losses = prefit_sam_side(&mut m, regions, &run.prefit)?;
        log::info!(
            "prefit: mask loss {:.4} -> {:.4} over {} steps",
            losses[0],
            losses[losses.len() - 1],
            losses.len()
        );
    }
    let mut world = ParamStore::new();
    for (n, t) in m.store.iter().filter(|(n, _)| is_frozen_component(n)) {
        world.insert(n.clone(), t.clone());
    }
    Ok(world)
}

/// Frozen parts from the world seed and `frozen` (the LM, optionally a
/// prepared world); trainable parts from `init_seed`.
pub fn build_model(run: &RunConfig, frozen: &ParamStore, init_seed: u64) -> Result<Model> {
    Model::build(run.model, run.scene.vocabulary(), frozen, run.world_seed, init_seed)
}
