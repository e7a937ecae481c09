//! Acceptance run on the reference synthetic world. Everything shares one
//! pre-trained checkpoint, so the criteria are checked by a single
//! sequential test that prints one line per criterion and fails at the end
//! if any of them did.

use std::path::Path;
use std::time::Instant;

use cpm::evaluator::{ablation_assertions, evaluate_system, test_utterances, SystemRow, ABLATION_VARIANTS};
use cpm::gradcheck::{gradient_check, GradCheckConfig};
use cpm::io::{checkpoint_hash, generate_dataset, sha256_file, Dataset, GenerateOptions, Split};
use cpm::model::{length_regulate_indices, ModelConfig};
use cpm::probes::{train_probes, ProbeConfig};
use cpm::scm::{counterfactual_utterance, oracle_effects, sample_utterance, ScmConfig, ScmParams, NEUTRAL};
use cpm::trainer::{
    load_model, run_finetune, run_pretrain, sample_other_emotion, train_step, RunOptions, Snapshot, TrainConfig,
    TrainOutcome, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N_UTTERANCES: usize = 2000;
const SPLITS: [f64; 3] = [0.8, 0.1, 0.1];
const DATA_SEED: u64 = 7;
const PROBE_SEED: u64 = 1;

struct Verdicts(Vec<(usize, &'static str, bool, String)>);

impl Verdicts {
    fn record(&mut self, id: usize, name: &'static str, pass: bool, detail: String) {
        println!("criterion {id:>2} {name:<24} {} {detail}", if pass { "PASS" } else { "FAIL" });
        self.0.push((id, name, pass, detail));
    }
}

fn model_config(p: &ScmParams) -> ModelConfig {
    ModelConfig {
        vocab_size: p.vocab_size,
        n_speakers: p.n_speakers,
        n_emotions: p.n_emotions(),
        mel_channels: p.mel_channels,
        ..ModelConfig::desk()
    }
}

fn finetune_config(no_ipc: bool, no_cpc: bool) -> TrainConfig {
    let mut c = TrainConfig::finetune_desk().with_ramp_fraction(0.25);
    c.ablation.disable_ipc = no_ipc;
    c.ablation.disable_cpc = no_cpc;
    c
}

fn oracle_soundness(v: &mut Verdicts) {
    let t = Instant::now();
    let w = ScmParams::generate(&ScmConfig::default()).unwrap().with_kappa(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut nde_zero, mut identity, mut worst) = (true, true, 0.0f64);
    for _ in 0..1000 {
        let u = sample_utterance(&w, rng.random()).unwrap();
        let e = rng.random_range(0..w.n_emotions());
        let r = oracle_effects(&w, &u, e).unwrap();
        nde_zero &= r.nde == 0.0;
        worst = worst.max(r.decomposition_residual.abs());
        identity &= counterfactual_utterance(&w, &u, u.emotion).unwrap() == u;
    }
    let secs = t.elapsed().as_secs_f64();
    v.record(
        1,
        "oracle soundness",
        nde_zero && identity && worst < 1e-9 && secs < 60.0,
        format!("nde all zero {nde_zero}, identity {identity}, max residual {worst:.2e}, {secs:.1}s"),
    );
}

fn gradient_correctness(v: &mut Verdicts) {
    let t = Instant::now();
    let r = gradient_check(&GradCheckConfig::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = r.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let all_checked = r.components.iter().all(|c| c.groups.iter().any(|g| g.checked > 0));
    v.record(
        2,
        "gradient correctness",
        r.passed && worst < 1e-3 && all_checked && r.components.len() == 7 && secs < 120.0,
        format!("{} components, max rel error {worst:.2e}, {secs:.1}s", r.components.len()),
    );
}

fn length_regulator_suite() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    for _ in 0..500 {
        let n = rng.random_range(1..40);
        let d: Vec<usize> = (0..n).map(|_| rng.random_range(0..8)).collect();
        if d.iter().all(|&k| k == 0) {
            continue;
        }
        let idx = length_regulate_indices(&d).unwrap();
        let expected: Vec<usize> = d.iter().enumerate().flat_map(|(i, &k)| std::iter::repeat_n(i, k)).collect();
        ok &= idx.len() == d.iter().sum::<usize>() && idx == expected;
        ok &= length_regulate_indices(&vec![1; n]).unwrap() == (0..n).collect::<Vec<_>>();
    }
    ok
}

fn tree_checksums(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, sha256_file(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn mechanics(v: &mut Verdicts, w: &ScmParams, data: &Dataset, runs: &[&TrainOutcome], root: &Path) {
    let regulator = length_regulator_suite();

    let composition = runs.iter().all(|r| {
        r.log.iter().all(|l| {
            l.train.composition_error() < 1e-9
                && l.last.composition_error() < 1e-9
                && l.dev.losses.composition_error() < 1e-9
        }) && r.step_outcomes.iter().all(|s| s.breakdown.composition_error() < 1e-9)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n_e = w.n_emotions();
    let differs = (0..10_000).all(|_| {
        let e = rng.random_range(0..n_e);
        let x = sample_other_emotion(&mut rng, e, n_e);
        x != e && x < n_e
    });

    let (a, b) = (root.join("data_a"), root.join("data_b"));
    for d in [&a, &b] {
        generate_dataset(w, DATA_SEED, N_UTTERANCES, SPLITS, d, &GenerateOptions::default()).unwrap();
    }
    let dataset_same = tree_checksums(&a) == tree_checksums(&b);

    let short = TrainConfig {
        steps: 20,
        eval_every: 10,
        ..TrainConfig::pretrain_desk()
    };
    let quiet = RunOptions::default();
    let model = model_config(w);
    let h = |dir: &str| {
        let o = run_pretrain(data, &model, &short, &root.join(dir), &quiet).unwrap();
        checkpoint_hash(&o.checkpoint).unwrap()
    };
    let checkpoint_same = h("det_a") == h("det_b");

    let max_clipped = runs
        .iter()
        .flat_map(|r| r.step_outcomes.iter().map(|s| s.clipped_norm))
        .fold(0.0, f64::max);
    let clip_ok = max_clipped <= 1.0 + 1e-6;

    v.record(
        9,
        "mechanics",
        regulator && composition && differs && dataset_same && checkpoint_same && clip_ok,
        format!(
            "regulator {regulator}, composition {composition}, E' != E {differs}, dataset {dataset_same}, \
             checkpoint {checkpoint_same}, max clipped norm {max_clipped:.6}"
        ),
    );
}

fn overhead(v: &mut Verdicts, data: &Dataset, pretrain: &Path, probes: &cpm::probes::ProbeWeights<f32>) {
    let (model, _) = load_model(pretrain, Snapshot::Last).unwrap();
    let train = data.examples(Split::Train);
    let full = finetune_config(false, false);
    let base = finetune_config(true, true);
    let steps = 15;
    let mut best = [f64::INFINITY; 2];
    for _ in 0..3 {
        for (slot, cfg) in [&base, &full].into_iter().enumerate() {
            let mut state = TrainState::new(model.clone(), cfg);
            let t = Instant::now();
            for s in 0..steps {
                let batch: Vec<_> = (0..cfg.batch_size)
                    .map(|i| &train[(s * cfg.batch_size + i) % train.len()])
                    .collect();
                train_step(&mut state, &batch, cfg, Some(probes)).unwrap();
            }
            best[slot] = best[slot].min(t.elapsed().as_secs_f64() / steps as f64);
        }
    }
    let ratio = best[1] / best[0];
    v.record(
        10,
        "causal pass overhead",
        (1.3..=2.5).contains(&ratio),
        format!(
            "full {:.1} ms/step, base-only {:.1} ms/step, ratio {ratio:.2} (want 1.3 to 2.5)",
            best[1] * 1e3,
            best[0] * 1e3
        ),
    );
}

fn table_criteria(v: &mut Verdicts, rows: &[SystemRow], emotions: &[String]) {
    let get = |tag: &str| rows.iter().find(|r| r.tag == tag).unwrap();
    let (full, no_ipc, no_cpc, base) = (get("CPM"), get("w/o IPC"), get("w/o CPC"), get("Baseline B"));

    let ratio = full.mediation.mean.nde / no_ipc.mediation.mean.nde;
    v.record(
        4,
        "mediation",
        ratio < 0.5,
        format!(
            "nde {:.4} vs w/o IPC {:.4}, ratio {ratio:.3} (hard limit 0.5, target 0.2 {})",
            full.mediation.mean.nde,
            no_ipc.mediation.mean.nde,
            if ratio < 0.2 { "met" } else { "missed" }
        ),
    );

    let (a, b, c) = (
        full.emotion_accuracy.counterfactual,
        no_cpc.emotion_accuracy.counterfactual,
        base.emotion_accuracy.counterfactual,
    );
    v.record(
        5,
        "expressiveness",
        a >= 0.85 && a >= b + 0.10 && a > c,
        format!("CPM {a:.3}, w/o CPC {b:.3}, Baseline B {c:.3}"),
    );

    let per: Vec<f64> = full
        .ccs
        .per_emotion
        .iter()
        .enumerate()
        .filter(|(e, _)| *e != NEUTRAL)
        .map(|(_, x)| *x)
        .collect();
    let min = per.iter().copied().fold(f64::INFINITY, f64::min);
    v.record(
        6,
        "content preservation",
        full.ccs.overall >= 0.95 && min >= 0.94,
        format!("overall {:.4}, per-emotion min {min:.4}", full.ccs.overall),
    );

    let idx = |name: &str| emotions.iter().position(|e| e == name).unwrap();
    let (amused, sleepy) = (full.pitch_shift_hz[idx("amused")], full.pitch_shift_hz[idx("sleepy")]);
    v.record(
        7,
        "prosody recovery",
        (amused - 30.0).abs() <= 10.0 && (sleepy + 30.0).abs() <= 10.0,
        format!("amused {amused:+.1} Hz, sleepy {sleepy:+.1} Hz"),
    );

    let gap = (full.speaker.mean_cosine - base.speaker.mean_cosine).abs();
    v.record(
        8,
        "speaker preservation",
        gap <= 0.02 && full.speaker.swap_change_rate < 0.05,
        format!(
            "cosine CPM {:.4} vs Baseline B {:.4} (gap {gap:.4}), swap change {:.3}",
            full.speaker.mean_cosine, base.speaker.mean_cosine, full.speaker.swap_change_rate
        ),
    );

    for a in ablation_assertions(rows) {
        println!("  table: {} {} {}", if a.pass { "ok  " } else { "miss" }, a.name, a.detail);
    }
}

#[test]
fn reference_world_meets_acceptance_criteria() {
    let mut v = Verdicts(Vec::new());
    oracle_soundness(&mut v);
    gradient_correctness(&mut v);

    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let w = ScmParams::generate(&ScmConfig::default()).unwrap();
    let data = Dataset::in_memory(&w, DATA_SEED, N_UTTERANCES, SPLITS).unwrap();
    let probes = train_probes(&data, &ProbeConfig::default(), PROBE_SEED).unwrap().cast::<f32>();
    let quiet = RunOptions::default();

    let t = Instant::now();
    let pre = run_pretrain(&data, &model_config(&w), &TrainConfig::pretrain_desk(), &root.join("pre"), &quiet).unwrap();
    let mut outcomes = Vec::new();
    for (tag, no_ipc, no_cpc) in ABLATION_VARIANTS {
        let o = run_finetune(&data, &pre.checkpoint, &probes, &finetune_config(no_ipc, no_cpc), &root.join(tag.replace([' ', '/'], "_")), &quiet)
            .unwrap();
        if tag == "CPM" {
            let secs = t.elapsed().as_secs_f64();
            let ratio = o.final_dev.losses.l_mel / pre.initial_dev_l_mel;
            v.record(
                3,
                "training efficacy",
                secs < 1800.0 && ratio <= 0.2,
                format!(
                    "dev l_mel {:.4} -> {:.4} (ratio {ratio:.3}), pretrain + finetune {:.1} min",
                    pre.initial_dev_l_mel,
                    o.final_dev.losses.l_mel,
                    secs / 60.0
                ),
            );
        }
        outcomes.push((tag, o));
    }

    let utterances = test_utterances(&data, None).unwrap();
    let rows: Vec<SystemRow> = outcomes
        .iter()
        .map(|(tag, o)| {
            let (model, _) = load_model(&o.checkpoint, Snapshot::Best).unwrap();
            let hash = checkpoint_hash(&o.checkpoint).unwrap();
            evaluate_system(&model, tag, &hash, &probes, &utterances).unwrap()
        })
        .collect();
    table_criteria(&mut v, &rows, &w.emotions);

    let runs: Vec<&TrainOutcome> = std::iter::once(&pre).chain(outcomes.iter().map(|(_, o)| o)).collect();
    mechanics(&mut v, &w, &data, &runs, root);
    overhead(&mut v, &data, &pre.checkpoint, &probes);

    v.0.sort_by_key(|c| c.0);
    println!("summary");
    for (id, name, pass, detail) in &v.0 {
        println!("criterion {id:>2} {name:<24} {} {detail}", if *pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> = v.0.iter().filter(|c| !c.2).map(|c| c.0).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
