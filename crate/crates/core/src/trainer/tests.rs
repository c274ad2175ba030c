use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{decode, encode};
use super::*;
use crate::lm::init_lm;
use crate::mixer::count_params;
use crate::config::RunConfig;
use crate::model::ModelConfig;
use crate::pipeline::{build_model, prepare_lm, Datasets};
use crate::scenegen::{build_corpus, CorpusKind, SceneConfig};

fn tiny_model(init_seed: u64) -> Model {
    let scene = SceneConfig::default();
    let vocab = scene.vocabulary();
    let mut mc = ModelConfig::desk(vocab.len());
    mc.mixer.n_text_layers = 1;
    let mut lm = ParamStore::new();
    init_lm(&mut lm, &mc.lm, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    Model::build(mc, vocab, &lm, 3, init_seed).unwrap()
}

/// A converged frozen LM; prefix tuning cannot steer a random one.
fn pretrained_lm() -> &'static ParamStore {
    static LM: OnceLock<ParamStore> = OnceLock::new();
    LM.get_or_init(|| {
        let mut run = RunConfig::default();
        run.data.lm_images = 100;
        let d = Datasets::generate(&run).unwrap();
        prepare_lm(&run, &d.lm_train, &d.lm_heldout).unwrap().0
    })
}

fn samples(n: usize) -> Vec<RegionSample> {
    let scene = SceneConfig::default();
    build_corpus(CorpusKind::Caption, 40, n, &scene, &scene.vocabulary()).unwrap().samples
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig { batch: 2, steps_pretrain: steps, steps_finetune: steps, eval_every: 0, mixer_lr: 4e-4, ..TrainConfig::default() }
}

fn frozen_of(m: &Model) -> BTreeMap<String, Tensor> {
    m.store.iter().filter(|(n, _)| is_frozen_component(n)).map(|(n, t)| (n.clone(), t.clone())).collect()
}

#[test]
fn lr_guard() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { mixer_lr: 5e-4, ..TrainConfig::default() },
        TrainConfig { lr_ceiling: 1e-3, mixer_lr: 1e-3, ..TrainConfig::default() },
        TrainConfig { lm_lr: 2e-4, mixer_lr: 1e-4, ..TrainConfig::default() },
        TrainConfig { lm_lr: -1e-5, ..TrainConfig::default() },
        TrainConfig { mixer_lr: f64::NAN, ..TrainConfig::default() },
        TrainConfig { lsj: Some((2.0, 1.0)), ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    assert!(TrainConfig { mixer_lr: 0.0, ..TrainConfig::default() }.validate().is_ok());
}

#[test]
fn partition_counts() {
    let m = tiny_model(0);
    let p = freeze_policy(&m, &TrainConfig::default());
    assert!(p.trainable.is_disjoint(&p.frozen));
    assert_eq!(p.trainable.len() + p.frozen.len(), m.store.len());
    let scalars: usize = p.trainable.iter().map(|n| m.store.get(n).unwrap().len()).sum();
    let (mc, d_lm) = (m.config.mixer, m.config.lm.d_lm);
    assert_eq!(scalars, count_params(&mc, d_lm) + mc.d * d_lm + d_lm);
    assert!(p.frozen.iter().any(|n| n.starts_with(LM_PREFIX)));
    let with_lm = freeze_policy(&m, &TrainConfig { lm_lr: 1e-5, ..TrainConfig::default() });
    assert!(with_lm.trainable.iter().any(|n| n.starts_with(LM_PREFIX)));
    assert!(with_lm.frozen.iter().all(|n| !n.starts_with(LM_PREFIX)));
    let lsj = freeze_policy(&m, &TrainConfig { lsj: Some((0.1, 2.0)), ..TrainConfig::default() });
    assert_eq!(lsj, p);
}

#[test]
fn mixture_ratio_audit() {
    let s = MixtureSampler::new(&[10, 1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let det = (0..11_000).filter(|_| s.draw(&mut rng) == 0).count();
    let f = det as f64 / 11_000.0;
    assert!((f - 10.0 / 11.0).abs() < 0.01, "{f}");
    assert!(MixtureSampler::new(&[0, 0]).is_err());
}

#[test]
fn zero_lr_leaves_params_unchanged() {
    let data = samples(4);
    let mut t = Trainer::new(tiny_model(1), TrainConfig { mixer_lr: 0.0, ..quick(2) }, Phase::Finetune).unwrap();
    let before = t.model.store.clone();
    t.run_finetune(&data, &[]).unwrap();
    assert_eq!(t.model.store, before);
    assert_eq!(t.adam.step, 2);
}

#[test]
fn frozen_stay_bit_identical_and_trainables_move() {
    let data = samples(4);
    let mut t = Trainer::new(tiny_model(2), quick(20), Phase::Finetune).unwrap();
    let frozen = frozen_of(&t.model);
    let init = t.model.store.clone();
    for _ in 0..20 {
        let (b, _) = t.draw_batch(&[Source { samples: &data, kind: TargetKind::Caption, weight: 1 }]).unwrap();
        let st = t.train_step(&b, 1.0).unwrap();
        assert_eq!(st.frozen_grad_abs, 0.0);
        t.step += 1;
    }
    assert_eq!(frozen_of(&t.model), frozen);
    for n in &t.partition.trainable {
        assert_ne!(t.model.store.get(n).unwrap(), init.get(n).unwrap(), "{n} never moved");
        assert!(t.adam.m.contains_key(n));
    }
    assert!(t.partition.frozen.iter().all(|n| !t.adam.m.contains_key(n)));
}

#[test]
fn repeated_batch_is_memorized() {
    let mut run = RunConfig::default();
    run.model.mixer.n_text_layers = 1;
    run.model.label_smoothing = 0.0;
    let data = samples(2);
    let m = build_model(&run, pretrained_lm(), 3).unwrap();
    let mut t = Trainer::new(m, quick(500), Phase::Finetune).unwrap();
    let batch: Vec<_> = data.iter().take(2).map(|s| (s.clone(), TargetKind::Caption, false)).collect();
    let first = t.train_step(&batch, 1.0).unwrap().loss;
    let mut last = first;
    for _ in 1..500 {
        t.step += 1;
        last = t.train_step(&batch, 1.0).unwrap().loss;
    }
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_aborts() {
    let data = samples(2);
    let mut t = Trainer::new(tiny_model(4), quick(1), Phase::Finetune).unwrap();
    t.model.store.get_mut("prefix_proj.bias").unwrap().data_mut()[0] = f64::NAN;
    let err = t.run_finetune(&data, &[]).unwrap_err();
    assert!(matches!(err, Error::Training { step: 0, .. }), "{err}");
}

#[test]
fn same_seed_same_run() {
    let data = samples(4);
    let run = |seed| {
        let mut t = Trainer::new(tiny_model(5), TrainConfig { seed, ..quick(3) }, Phase::Finetune).unwrap();
        let log = t.run_finetune(&data, &[]).unwrap();
        (t.model.store, log.losses)
    };
    let (a, la) = run(9);
    let (b, lb) = run(9);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_ne!(run(10).1, la);
}

#[test]
fn pretrain_needs_detection_corpus() {
    let mut t = Trainer::new(tiny_model(6), quick(1), Phase::Pretrain).unwrap();
    assert!(matches!(t.run_pretrain(&[], &samples(1), &[]), Err(Error::Config(_))));
    let mut t = Trainer::new(tiny_model(6), quick(1), Phase::Finetune).unwrap();
    assert!(matches!(t.run_finetune(&[], &[]), Err(Error::Config(_))));
}

#[test]
fn lsj_batches_are_fresh_and_valid() {
    let data = samples(6);
    let t = Trainer::new(tiny_model(7), TrainConfig { lsj: Some((0.1, 2.0)), batch: 6, ..quick(1) }, Phase::Finetune).unwrap();
    let (b, _) = t.draw_batch(&[Source { samples: &data, kind: TargetKind::Caption, weight: 1 }]).unwrap();
    assert_eq!(b.len(), 6);
    for (s, _, fresh) in &b {
        assert!(*fresh);
        assert!(s.mask_area() >= crate::scenegen::MIN_REGION_AREA);
    }
}

fn trained_checkpoint(steps: usize) -> (Trainer, Checkpoint, Vec<RegionSample>) {
    let data = samples(4);
    let mut t = Trainer::new(tiny_model(8), quick(10), Phase::Finetune).unwrap();
    t.run(&[Source { samples: &data, kind: TargetKind::Caption, weight: 1 }], steps, None).unwrap();
    let c = t.checkpoint("abc", "[train]\nseed = 0\n", BTreeMap::from([("val_loss".to_string(), 1.25)]));
    (t, c, data)
}

#[test]
fn checkpoint_round_trip() {
    let (_, c, _) = trained_checkpoint(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run/model.ckpt");
    save_checkpoint(&c, &path).unwrap();
    assert!(!dir.path().join("run/model.ckpt.partial").exists());
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.tag, "caption");
    assert!(back.check_hash("abc", false).is_ok());
    assert!(matches!(back.check_hash("other", false), Err(Error::Config(_))));
    assert!(back.check_hash("other", true).is_ok());
}

#[test]
fn corrupt_containers_name_the_entry() {
    let (_, c, _) = trained_checkpoint(1);
    let bytes = encode(&c).unwrap();
    let first = c.params.names().next().unwrap().clone();
    let cut = decode(&bytes[..40]).unwrap_err().to_string();
    assert!(cut.contains("entry"), "{cut}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(Error::Parse { .. })));
    // drop the first parameter entry while keeping it listed in the manifest
    let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let mut partial = bytes[..8].to_vec();
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) - 1;
    partial.extend_from_slice(&count.to_le_bytes());
    partial.extend_from_slice(&bytes[24 + len..]);
    let err = decode(&partial).unwrap_err().to_string();
    assert!(err.contains(&first), "{err}");
}

#[test]
fn resume_reproduces_next_step() {
    let (mut t, c, data) = trained_checkpoint(3);
    let src = [Source { samples: &data, kind: TargetKind::Caption, weight: 1 }];
    let back = decode(&encode(&c).unwrap()).unwrap();
    let model = Model::from_params(t.model.config, back.vocab.clone(), back.params.clone()).unwrap();
    let mut r = Trainer::resume(model, t.config, &back).unwrap();
    assert_eq!(r.step, 3);
    t.run(&src, 4, None).unwrap();
    r.run(&src, 4, None).unwrap();
    assert_eq!(t.model.store, r.model.store);
    assert_eq!(t.adam, r.adam);
}

#[test]
fn switching_is_an_involution() {
    let (t, _, _) = trained_checkpoint(2);
    let base = t.model.clone();
    let donor = tiny_model(99);
    let switched = switch_mixer(&base, &donor.store).unwrap();
    assert_eq!(frozen_of(&switched), frozen_of(&base));
    assert_eq!(switched.store.get(TASK_TOKENS_NAME).unwrap(), donor.store.get(TASK_TOKENS_NAME).unwrap());
    let back = switch_mixer(&switched, &base.store).unwrap();
    assert_eq!(back.store, base.store);
    let mut wrong = donor.store.clone();
    wrong.insert("prefix_proj.bias", Tensor::zeros(&[3]));
    assert!(matches!(switch_mixer(&base, &wrong), Err(Error::Config(_))));
}

const TASK_TOKENS_NAME: &str = crate::model::TASK_TOKENS;
