//! On-disk cache of the frozen weights a run depends on: the pretrained
//! language model and, when the SAM side is pre-fitted, the fitted world.
//! Entries are keyed by a hash of exactly the config keys that shape them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use sca_core::config::{hash_text, parse_sections, RunConfig};
use sca_core::lm::LM_PREFIX;
use sca_core::optim::AdamState;
use sca_core::params::ParamStore;
use sca_core::pipeline::{prepare_lm, prepare_world, Datasets};
use sca_core::trainer::{load_checkpoint, save_checkpoint, Checkpoint};
use sca_core::Result;

const LM_EXACT: [&str; 4] = ["mixer.n_task_tokens", "mixer.n_query_tokens", "data.lm_images", "data.seed"];
const WORLD_EXACT: [&str; 8] = [
    "mixer.d",
    "mixer.mlp_dim",
    "mixer.heads",
    "mixer.downsample_rate",
    "mixer.n_sam_layers",
    "mixer.n_mask_tokens",
    "model.world_seed",
    "model.mask_prompt_tokens",
];

fn subset(run: &RunConfig, keep: impl Fn(&str) -> bool) -> String {
    let all = parse_sections(&run.to_text()).expect("canonical config text parses");
    all.iter().filter(|(k, _)| keep(k)).map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn lm_key_text(run: &RunConfig) -> String {
    subset(run, |k| k.starts_with("scene.") || k.starts_with("lm.") || k.starts_with("lm_pretrain.") || LM_EXACT.contains(&k))
}

/// `None` when the world is a plain seeded draw that costs nothing to rebuild.
pub fn world_key_text(run: &RunConfig) -> Option<String> {
    (run.prefit.steps > 0).then(|| {
        subset(run, |k| {
            k.starts_with("scene.")
                || k.starts_with("encoder.")
                || k.starts_with("prefit.")
                || k.starts_with("data.")
                || WORLD_EXACT.contains(&k)
        })
    })
}

fn entry_path(cache: &Path, kind: &str, key_text: &str) -> PathBuf {
    cache.join(format!("{kind}-{}.ckpt", &hash_text(key_text)[..16]))
}

fn load_entry(path: &Path, kind: &str, key_text: &str) -> Option<ParamStore> {
    if !path.exists() {
        return None;
    }
    match load_checkpoint(path) {
        Ok(c) if c.tag == kind && c.config_text == key_text => Some(c.params),
        Ok(_) => {
            log::warn!("{} does not match its key; rebuilding", path.display());
            None
        }
        Err(e) => {
            log::warn!("cannot read {}: {e}; rebuilding", path.display());
            None
        }
    }
}

fn save_entry(path: &Path, kind: &str, key_text: &str, params: ParamStore, metrics: BTreeMap<String, f64>, run: &RunConfig) -> Result<()> {
    let c = Checkpoint {
        tag: kind.to_string(),
        step: 0,
        config_hash: hash_text(key_text),
        config_text: key_text.to_string(),
        params,
        frozen: BTreeSet::new(),
        adam: AdamState::default(),
        metrics,
        vocab: run.scene.vocabulary(),
    };
    save_checkpoint(&c, path)
}

pub fn lm(run: &RunConfig, data: &Datasets, cache: &Path) -> Result<ParamStore> {
    let key = lm_key_text(run);
    let path = entry_path(cache, "lm", &key);
    if let Some(p) = load_entry(&path, "lm", &key) {
        log::info!("language model from cache {}", path.display());
        return Ok(p);
    }
    log::info!("pretraining the language model");
    let (store, report) = prepare_lm(run, &data.lm_train, &data.lm_heldout)?;
    log::info!(
        "language model: {} steps, conditional ppl {:.3}, unconditional ppl {:.3}",
        report.steps_run,
        report.conditional_ppl,
        report.unconditional_ppl
    );
    let metrics = BTreeMap::from([
        ("conditional_ppl".to_string(), report.conditional_ppl),
        ("unconditional_ppl".to_string(), report.unconditional_ppl),
    ]);
    save_entry(&path, "lm", &key, store.clone(), metrics, run)?;
    Ok(store)
}

/// Language model plus, when pre-fitted, the SAM-side weights.
pub fn frozen(run: &RunConfig, data: &Datasets, cache: &Path) -> Result<ParamStore> {
    let mut store = lm(run, data, cache)?;
    let Some(key) = world_key_text(run) else {
        return Ok(store);
    };
    let path = entry_path(cache, "world", &key);
    let world = match load_entry(&path, "world", &key) {
        Some(w) => {
            log::info!("pre-fitted world from cache {}", path.display());
            w
        }
        None => {
            let full = prepare_world(run, &store, &data.detection)?;
            let mut w = ParamStore::new();
            for (n, t) in full.iter().filter(|(n, _)| !n.starts_with(LM_PREFIX)) {
                w.insert(n.clone(), t.clone());
            }
            save_entry(&path, "world", &key, w.clone(), BTreeMap::new(), run)?;
            w
        }
    };
    for (n, t) in world.iter() {
        store.insert(n.clone(), t.clone());
    }
    Ok(store)
}
