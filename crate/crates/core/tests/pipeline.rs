//! End-to-end checks on a tiny world: determinism, resumption, frozen
//! probes and read-only evaluation.

use std::path::Path;

use cpm::evaluator::{evaluate_system, test_utterances};
use cpm::io::{self, checkpoint_hash, generate_dataset, sha256_file, Dataset, GenerateOptions};
use cpm::model::ModelConfig;
use cpm::probes::{train_probes, FitConfig, ProbeConfig, ProbeWeights};
use cpm::scm::{ScmConfig, ScmParams};
use cpm::trainer::{
    load_model, read_log, run_finetune, run_pretrain, RunOptions, Snapshot, TrainConfig, TRAIN_LOG_FILE,
};

fn world() -> ScmParams {
    ScmParams::generate(&ScmConfig {
        vocab_size: 6,
        n_speakers: 2,
        mel_channels: 6,
        content_dim: 4,
        min_len: 3,
        max_len: 6,
        master_seed: 11,
        ..ScmConfig::default()
    })
    .unwrap()
}

fn data() -> Dataset {
    Dataset::in_memory(&world(), 5, 60, [0.8, 0.1, 0.1]).unwrap()
}

fn model_config() -> ModelConfig {
    ModelConfig {
        mel_channels: 6,
        ..ModelConfig::tiny()
    }
}

fn probes(d: &Dataset) -> ProbeWeights<f64> {
    let fit = |epochs| FitConfig {
        hidden: 16,
        epochs,
        batch_size: 32,
        lr: 3e-3,
        weight_decay: 1e-4,
    };
    let cfg = ProbeConfig {
        content: fit(2),
        emotion: fit(4),
        speaker: fit(4),
        counterfactual_augment: false,
    };
    train_probes(d, &cfg, 3).unwrap()
}

fn pretrain_config() -> TrainConfig {
    TrainConfig {
        steps: 6,
        batch_size: 4,
        eval_every: 3,
        eval_utterances: 4,
        seed: 9,
        ..TrainConfig::pretrain_desk()
    }
}

fn finetune_config() -> TrainConfig {
    TrainConfig {
        steps: 6,
        batch_size: 3,
        eval_every: 2,
        eval_utterances: 4,
        seed: 9,
        ..TrainConfig::finetune_desk()
    }
    .with_ramp_fraction(0.25)
}

fn quiet() -> RunOptions {
    RunOptions::default()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn dataset_generation_is_deterministic() {
    let w = world();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&w, 5, 30, [0.8, 0.1, 0.1], a.path(), &GenerateOptions::default()).unwrap();
    generate_dataset(&w, 5, 30, [0.8, 0.1, 0.1], b.path(), &GenerateOptions::default()).unwrap();
    let ha = sha256_file(&a.path().join(io::MANIFEST_FILE)).unwrap();
    let hb = sha256_file(&b.path().join(io::MANIFEST_FILE)).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(dir_bytes(&a.path().join("mels")), dir_bytes(&b.path().join("mels")));

    // What is read back equals what the sampler produces in memory.
    let loaded = Dataset::load(a.path()).unwrap();
    let mem = Dataset::in_memory(&w, 5, 30, [0.8, 0.1, 0.1]).unwrap();
    assert_eq!(loaded.train, mem.train);
    assert_eq!(loaded.test, mem.test);
}

#[test]
fn neutral_only_and_kappa_are_recorded() {
    let w = world().with_kappa(0.5);
    let dir = tempfile::tempdir().unwrap();
    let opts = GenerateOptions {
        neutral_only: true,
        ..Default::default()
    };
    let m = generate_dataset(&w, 1, 20, [0.8, 0.1, 0.1], dir.path(), &opts).unwrap();
    assert!(m.records.iter().all(|r| r.emotion == cpm::scm::NEUTRAL));
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.params().kappa, 0.5);
    assert!(back.manifest.header.neutral_only);
}

#[test]
fn training_checkpoints_are_deterministic_and_resumable() {
    let d = data();
    let p = probes(&d).cast::<f32>();
    let root = tempfile::tempdir().unwrap();
    let r = root.path();

    let a = run_pretrain(&d, &model_config(), &pretrain_config(), &r.join("pa"), &quiet()).unwrap();
    let b = run_pretrain(&d, &model_config(), &pretrain_config(), &r.join("pb"), &quiet()).unwrap();
    assert_eq!(checkpoint_hash(&a.checkpoint).unwrap(), checkpoint_hash(&b.checkpoint).unwrap());

    let ft = finetune_config();
    let straight = run_finetune(&d, &a.checkpoint, &p, &ft, &r.join("fa"), &quiet()).unwrap();
    let stop = RunOptions {
        stop_at: Some(3),
        ..quiet()
    };
    let half = run_finetune(&d, &a.checkpoint, &p, &ft, &r.join("fb"), &stop).unwrap();
    assert_eq!(half.steps, 3);
    let resume = RunOptions {
        resume: true,
        ..quiet()
    };
    let rest = run_finetune(&d, &a.checkpoint, &p, &ft, &r.join("fb"), &resume).unwrap();
    assert_eq!(rest.steps, 6);
    assert_eq!(
        checkpoint_hash(&straight.checkpoint).unwrap(),
        checkpoint_hash(&rest.checkpoint).unwrap()
    );

    // Every logged step keeps the composition identity; clipping holds.
    for line in read_log(&r.join("fa").join(TRAIN_LOG_FILE)).unwrap() {
        assert!(line.train.composition_error() < 1e-9);
        assert!(line.last.composition_error() < 1e-9);
        assert!(line.dev.losses.composition_error() < 1e-9);
    }
    assert!(!straight.step_outcomes.is_empty());
    for s in &straight.step_outcomes {
        assert!(s.clipped_norm <= ft.grad_clip_norm + 1e-6);
    }
}

#[test]
fn probes_stay_frozen_and_evaluation_is_read_only() {
    let d = data();
    let p64 = probes(&d);
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    p64.save(&r.join("probes")).unwrap();
    let probe_files = dir_bytes(&r.join("probes"));
    let p = ProbeWeights::<f64>::load(&r.join("probes")).unwrap().cast::<f32>();
    let before = p.checksums();

    let pre = run_pretrain(&d, &model_config(), &pretrain_config(), &r.join("pre"), &quiet()).unwrap();
    let ft = run_finetune(&d, &pre.checkpoint, &p, &finetune_config(), &r.join("ft"), &quiet()).unwrap();
    assert_eq!(p.checksums(), before);
    assert_eq!(dir_bytes(&r.join("probes")), probe_files);

    let ckpt_hash = checkpoint_hash(&ft.checkpoint).unwrap();
    let (model, meta) = load_model(&ft.checkpoint, Snapshot::Best).unwrap();
    assert_eq!(meta.probe_checksums.as_ref(), Some(&before));
    let model_sum = model.params().checksum();
    let utts = test_utterances(&d, Some(3)).unwrap();
    let row = evaluate_system(&model, &meta.tag, &ckpt_hash, &p, &utts).unwrap();
    assert_eq!(row.ccs.utterances, 3);
    assert_eq!(model.params().checksum(), model_sum);
    assert_eq!(p.checksums(), before);
    assert_eq!(checkpoint_hash(&ft.checkpoint).unwrap(), ckpt_hash);
}

#[test]
fn finetune_refuses_unfrozen_probes() {
    let d = data();
    let mut p = probes(&d).cast::<f32>();
    p.content.unfreeze();
    let root = tempfile::tempdir().unwrap();
    let pre = run_pretrain(&d, &model_config(), &pretrain_config(), &root.path().join("pre"), &quiet()).unwrap();
    assert!(run_finetune(&d, &pre.checkpoint, &p, &finetune_config(), &root.path().join("ft"), &quiet()).is_err());
}
