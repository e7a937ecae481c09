use std::path::Path;
use std::process::{Command, Output};

fn cpm(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpm"))
        .args(args)
        .arg("--quiet")
        .env("CPM_RUNS_DIR", runs)
        .current_dir(runs)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small world so every stage finishes in seconds.
const SMALL: &[&str] = &[
    "--set",
    "scm.vocab_size=6",
    "--set",
    "scm.n_speakers=2",
    "--set",
    "scm.mel_channels=6",
    "--set",
    "scm.content_dim=4",
    "--set",
    "scm.min_len=3",
    "--set",
    "scm.max_len=6",
];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(runs: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    cpm(runs, &refs)
}

#[test]
fn usage_errors_exit_with_one() {
    let runs = tempfile::tempdir().unwrap();
    assert_eq!(cpm(runs.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(cpm(runs.path(), &["train"]).status.code(), Some(1));
    assert_eq!(
        cpm(runs.path(), &["--set", "model.no_such_key=1", "gradcheck"]).status.code(),
        Some(1)
    );
    assert_eq!(cpm(runs.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path();

    let gen = |out: &str| run(runs, &with(SMALL, &["generate", "--n", "40", "--seed", "7", "--out", out]));
    let a = gen("a");
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let b = gen("b");
    let sha = |o: &Output| {
        stdout(o)
            .lines()
            .find_map(|l| l.strip_prefix("sha256 ").map(str::to_string))
            .unwrap()
    };
    assert_eq!(sha(&a), sha(&b));
    // A populated output directory is a runtime failure, not a usage one.
    assert_eq!(gen("a").status.code(), Some(2));

    let data = runs.join("a");
    let data = data.to_str().unwrap();
    let kappa = run(runs, &with(SMALL, &["generate", "--n", "10", "--kappa", "0.5", "--neutral-only", "--out", "k"]));
    assert_eq!(kappa.status.code(), Some(0));
    let header = std::fs::read_to_string(runs.join("k/manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&header).unwrap();
    assert_eq!(manifest["header"]["params"]["kappa"], 0.5);
    assert_eq!(manifest["header"]["neutral_only"], true);
    assert!(runs.join("k").join("config.json").exists());

    let probes = run(
        runs,
        &with(
            SMALL,
            &[
                "train-probes",
                "--data",
                data,
                "--set",
                "probes.content.epochs=1",
                "--set",
                "probes.emotion.epochs=2",
                "--set",
                "probes.speaker.epochs=2",
            ],
        ),
    );
    assert_eq!(probes.status.code(), Some(0), "{}", String::from_utf8_lossy(&probes.stderr));

    let tiny = [
        "--set",
        "model.n_enc_blocks=1",
        "--set",
        "model.n_dec_blocks=1",
        "--set",
        "model.hidden_dim=8",
        "--set",
        "model.ffn_dim=12",
        "--set",
        "model.predictor_hidden=6",
    ];
    let pre = run(
        runs,
        &with(
            &tiny,
            &[
                "train",
                "--stage",
                "pretrain",
                "--data",
                data,
                "--steps",
                "4",
                "--set",
                "pretrain.eval_every=2",
                "--set",
                "pretrain.batch_size=2",
                "--set",
                "pretrain.eval_utterances=2",
            ],
        ),
    );
    assert_eq!(pre.status.code(), Some(0), "{}", String::from_utf8_lossy(&pre.stderr));
    assert!(runs.join("pretrain/config.json").exists());

    let pretrain = runs.join("pretrain");
    let probes_dir = runs.join("probes");
    let ft_base = [
        "train",
        "--stage",
        "finetune",
        "--data",
        data,
        "--steps",
        "2",
        "--set",
        "finetune.eval_every=1",
        "--set",
        "finetune.batch_size=2",
        "--set",
        "finetune.eval_utterances=2",
    ];
    let missing = run(
        runs,
        &with(&ft_base, &["--init-from", pretrain.to_str().unwrap()]),
    );
    assert_eq!(missing.status.code(), Some(1));

    let ft = run(
        runs,
        &with(
            &ft_base,
            &[
                "--init-from",
                pretrain.to_str().unwrap(),
                "--probes",
                probes_dir.to_str().unwrap(),
                "--ablate",
                "no-cpc",
                "--json",
            ],
        ),
    );
    assert_eq!(ft.status.code(), Some(0), "{}", String::from_utf8_lossy(&ft.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&ft)).unwrap();
    assert_eq!(summary["tag"], "w/o CPC");
    assert!(runs.join("w_o_cpc/checkpoint/metadata.json").exists());

    let med = run(runs, &["mediate", "--kappa-oracle", "0", "--data", data, "--json"].map(String::from));
    assert_eq!(med.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout(&med)).unwrap();
    assert_eq!(report["summary"]["mean"]["nde"], 0.0);

    let ckpt = runs.join("w_o_cpc");
    let eval = run(
        runs,
        &[
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--probes",
            probes_dir.to_str().unwrap(),
            "--data",
            data,
            "--limit",
            "2",
            "--json",
        ]
        .map(String::from),
    );
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&eval)).unwrap();
    assert_eq!(report["utterances"], 2);
    assert_eq!(report["rows"][0]["ccs"]["utterances"], 2);

    let bad = run(
        runs,
        &["counterfact", "--checkpoint", ckpt.to_str().unwrap(), "--data", data, "--id", "nope", "--emotion", "amused"]
            .map(String::from),
    );
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("available"));

    let ds: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(runs.join("a/manifest.json")).unwrap()).unwrap();
    let test_rec = ds["records"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["split"] == "test")
        .unwrap();
    let id = test_rec["id"].as_str().unwrap();
    let own = ds["header"]["params"]["emotions"][test_rec["emotion"].as_u64().unwrap() as usize]
        .as_str()
        .unwrap();
    let same = run(
        runs,
        &[
            "counterfact",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data,
            "--id",
            id,
            "--emotion",
            own,
            "--json",
        ]
        .map(String::from),
    );
    assert_eq!(same.status.code(), Some(0), "{}", String::from_utf8_lossy(&same.stderr));
    let cf: serde_json::Value = serde_json::from_str(&stdout(&same)).unwrap();
    for k in ["total_effect", "nde", "nie"] {
        assert_eq!(cf["effects"][k], 0.0, "{k}");
    }

    let plot = run(runs, &["plot-pitch", "--data", data, "--id", id].map(String::from));
    assert_eq!(plot.status.code(), Some(0));
    assert!(runs.join("pitch/oracle").join(id).join("pitch_contour.svg").exists());
}
