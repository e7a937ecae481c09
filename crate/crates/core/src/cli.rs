//! The `cpm` command line: one binary, one subcommand per pipeline stage.
//!
//! Every run directory receives the fully materialised [`RunConfig`] as
//! `config.json` and the invocation as `command.json`; the two together
//! reproduce the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::evaluator::{
    self, eval_mediation, evaluate_system, pitch_contour, run_ablation_suite, test_utterances, CounterfactualSystem,
    EvalReport, MediationSummary, ModelSystem, Oracle,
};
use crate::gradcheck::{gradient_check, GradCheckConfig};
use crate::io::{self, Dataset, GenerateOptions, Split};
use crate::model::{FastSpeech2, ModelConfig};
use crate::probes::{train_probes, ProbeConfig, ProbeWeights};
use crate::scm::{self, named_seed, MediationReport, ScmConfig, ScmParams, Utterance, NEUTRAL};
use crate::trainer::{
    self, load_model, run_finetune, run_pretrain, RunOptions, Snapshot, Stage, TrainConfig, TrainError,
};

pub const RUNS_DIR_ENV: &str = "CPM_RUNS_DIR";
pub const CONFIG_FILE: &str = "config.json";
pub const COMMAND_FILE: &str = "command.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub split_ratios: [f64; 3],
    pub neutral_only: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            split_ratios: [0.8, 0.1, 0.1],
            neutral_only: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Cap on test utterances; `null` means the whole split.
    pub limit: Option<usize>,
}

/// Everything a run can be configured with. Component seeds are derived
/// from `seed` when the config is materialised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scm: ScmConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub probes: ProbeConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Fraction of fine-tuning over which both causal weights ramp up; 0
    /// keeps them constant from the first step.
    pub beta_ramp_fraction: f64,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scm: ScmConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::desk(),
            probes: ProbeConfig::default(),
            pretrain: TrainConfig::pretrain_desk(),
            finetune: TrainConfig::finetune_desk(),
            beta_ramp_fraction: 0.25,
            eval: EvalConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the JSON file, then each `key=value` override in order.
    /// Keys absent from the defaults are rejected.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut value = serde_json::to_value(Self::default()).expect("config serialises");
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let patch: Value =
                serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            merge(&mut value, patch, "")?;
        }
        for o in overrides {
            set_path(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Failure::Usage(format!("config: {e}")))?;
        Ok(cfg.materialize())
    }

    /// Fills every derived field: component seeds and the β ramp.
    pub fn materialize(mut self) -> Self {
        self.scm.master_seed = named_seed(self.seed, "scm.world");
        self.pretrain.seed = named_seed(self.seed, "train.pretrain");
        self.finetune.seed = named_seed(self.seed, "train.finetune");
        self.gradcheck.seed = named_seed(self.seed, "gradcheck");
        self.pretrain.stage = Stage::Pretrain;
        self.finetune.stage = Stage::Finetune;
        self.finetune = self.finetune.clone().with_ramp_fraction(self.beta_ramp_fraction);
        self
    }

    pub fn dataset_seed(&self) -> u64 {
        named_seed(self.seed, "dataset")
    }

    pub fn probe_seed(&self) -> u64 {
        named_seed(self.seed, "probes")
    }

    /// Model architecture with the data-dependent sizes taken from `params`.
    pub fn model_for(&self, params: &ScmParams) -> ModelConfig {
        ModelConfig {
            vocab_size: params.vocab_size,
            n_speakers: params.n_speakers,
            n_emotions: params.n_emotions(),
            mel_channels: params.mel_channels,
            ..self.model.clone()
        }
    }
}

fn merge(dst: &mut Value, src: Value, path: &str) -> Result<(), Failure> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = d
                    .get_mut(&k)
                    .ok_or_else(|| Failure::Usage(format!("unknown config key `{here}`")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

/// Applies one `a.b.c=value` override; the value is parsed as JSON and
/// falls back to a plain string.
fn set_path(root: &mut Value, assignment: &str) -> Result<(), Failure> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("override `{assignment}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Failure::Usage(format!("unknown config key `{key}`")))?;
    }
    *slot = value;
    Ok(())
}

/// Why a command failed, mapped onto the exit-code contract.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Self::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    io::IoError,
    scm::ScmError,
    TrainError,
    evaluator::EvalError,
    crate::probes::ProbeError,
    crate::model::ModelError,
    std::io::Error
);

type CliResult<T> = Result<T, Failure>;

#[derive(Debug, Parser)]
#[command(
    name = "cpm",
    version,
    about = "Counterfactual prosody modelling on a synthetic causal world",
    long_about = "Pipeline: generate -> train-probes -> train --stage pretrain -> train --stage finetune -> evaluate.\n\
                  All randomness derives from --seed. Run outputs go under $CPM_RUNS_DIR (default ./runs)."
)]
pub struct Cli {
    /// JSON run configuration; unspecified keys keep their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted-path override such as `finetune.lr=1e-4`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed from which every component seed is derived.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the machine-readable report.
    #[arg(long, global = true, conflicts_with = "text")]
    pub json: bool,
    /// Print the aligned-column report (default).
    #[arg(long, global = true)]
    pub text: bool,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablate {
    NoIpc,
    NoCpc,
    NoEmotion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SnapshotArg {
    Best,
    Last,
}

impl From<SnapshotArg> for Snapshot {
    fn from(s: SnapshotArg) -> Self {
        match s {
            SnapshotArg::Best => Snapshot::Best,
            SnapshotArg::Last => Snapshot::Last,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a dataset from the synthetic world.
    Generate {
        #[arg(long)]
        n: Option<usize>,
        /// Strength of the direct emotion path.
        #[arg(long)]
        kappa: Option<f64>,
        /// Label every utterance neutral.
        #[arg(long)]
        neutral_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Fit the content, emotion and speaker probes on a dataset.
    TrainProbes {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pre-trained checkpoint directory (fine-tuning only).
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Probe directory (fine-tuning only).
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablate: Vec<Ablate>,
        #[arg(long)]
        steps: Option<u64>,
        /// Stop and checkpoint at this step.
        #[arg(long)]
        stop_at: Option<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-synthesise one test utterance under another emotion.
    Counterfact {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        id: String,
        /// Target emotion, by name or index.
        #[arg(long)]
        emotion: String,
        #[arg(long, value_enum, default_value = "best")]
        snapshot: SnapshotArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Objective metrics for one or more checkpoints.
    Evaluate {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "best")]
        snapshot: SnapshotArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Direct and indirect effects of emotion swaps, for a model or the
    /// world itself.
    Mediate {
        #[arg(long, conflicts_with = "kappa_oracle")]
        checkpoint: Option<PathBuf>,
        /// Run the estimator on the world with this direct-path strength.
        #[arg(long)]
        kappa_oracle: Option<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "best")]
        snapshot: SnapshotArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune and compare the four loss variants.
    Ablation {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        init_from: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss gradient on a tiny model.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pitch contour of one utterance under several emotions.
    PlotPitch {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        id: String,
        /// Model checkpoint; the world's own prosody when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Emotions to plot (names or indices); all when omitted.
        #[arg(long, value_delimiter = ',')]
        emotions: Vec<String>,
        #[arg(long, value_enum, default_value = "best")]
        snapshot: SnapshotArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Generate { .. } => "generate",
            Self::TrainProbes { .. } => "train-probes",
            Self::Train { .. } => "train",
            Self::Counterfact { .. } => "counterfact",
            Self::Evaluate { .. } => "evaluate",
            Self::Mediate { .. } => "mediate",
            Self::Ablation { .. } => "ablation",
            Self::Gradcheck { .. } => "gradcheck",
            Self::PlotPitch { .. } => "plot-pitch",
        }
    }
}

/// Root under which default output directories are created.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn data_dir(arg: &Option<PathBuf>) -> PathBuf {
    arg.clone().unwrap_or_else(|| runs_root().join("data"))
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(16)]
}

/// Parses the process arguments, runs the command and maps the outcome to
/// the exit-code contract.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let argv: Vec<String> = std::env::args().collect();
    match run(&cli, &argv) {
        Ok(out) => {
            print!("{out}");
            ExitCode::from(EXIT_OK)
        }
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    config: RunConfig,
    argv: &'a [String],
}

impl Ctx<'_> {
    /// Creates `dir` and echoes the configuration and command into it.
    fn prepare(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        io::write_json(&dir.join(CONFIG_FILE), &self.config)?;
        io::write_json(&dir.join(COMMAND_FILE), &self.argv)?;
        Ok(())
    }

    /// Writes both report forms into `dir` and returns the selected one.
    fn report<T: Serialize>(&self, dir: &Path, value: &T, text: String) -> CliResult<String> {
        io::write_json(&dir.join(REPORT_JSON), value)?;
        fs::write(dir.join(REPORT_TEXT), &text)?;
        if self.cli.json {
            Ok(serde_json::to_string_pretty(value).expect("reports serialise") + "\n")
        } else {
            Ok(text)
        }
    }

    fn run_options(&self) -> RunOptions {
        RunOptions {
            verbose: !self.cli.quiet,
            ..RunOptions::default()
        }
    }
}

/// Runs a parsed command; returns what should be printed on success.
pub fn run(cli: &Cli, argv: &[String]) -> CliResult<String> {
    let mut overrides = cli.set.clone();
    // Command flags are config overrides, so the echoed config records them.
    match &cli.command {
        Command::Generate {
            n,
            kappa,
            neutral_only,
            ..
        } => {
            if let Some(n) = n {
                overrides.push(format!("data.n={n}"));
            }
            if let Some(k) = kappa {
                overrides.push(format!("scm.kappa={k}"));
            }
            if *neutral_only {
                overrides.push("data.neutral_only=true".into());
            }
        }
        Command::Train { stage, steps, .. } => {
            if let Some(s) = steps {
                let key = match stage {
                    StageArg::Pretrain => "pretrain",
                    StageArg::Finetune => "finetune",
                };
                overrides.push(format!("{key}.steps={s}"));
            }
        }
        Command::Ablation { steps: Some(s), .. } => overrides.push(format!("finetune.steps={s}")),
        Command::Evaluate { limit: Some(l), .. }
        | Command::Mediate { limit: Some(l), .. }
        | Command::Ablation { limit: Some(l), .. } => overrides.push(format!("eval.limit={l}")),
        _ => {}
    }
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let ctx = Ctx { cli, config, argv };
    log::debug!("running {}", cli.command.name());
    match &cli.command {
        Command::Generate { out, force, .. } => cmd_generate(&ctx, out, *force),
        Command::TrainProbes { data, out } => cmd_train_probes(&ctx, data, out),
        Command::Train {
            stage,
            data,
            init_from,
            probes,
            ablate,
            stop_at,
            resume,
            out,
            ..
        } => cmd_train(&ctx, *stage, data, init_from, probes, ablate, *stop_at, *resume, out),
        Command::Counterfact {
            checkpoint,
            data,
            id,
            emotion,
            snapshot,
            out,
        } => cmd_counterfact(&ctx, checkpoint, data, id, emotion, *snapshot, out),
        Command::Evaluate {
            checkpoint,
            data,
            probes,
            snapshot,
            out,
            ..
        } => cmd_evaluate(&ctx, checkpoint, data, probes, *snapshot, out),
        Command::Mediate {
            checkpoint,
            kappa_oracle,
            data,
            snapshot,
            out,
            ..
        } => cmd_mediate(&ctx, checkpoint, *kappa_oracle, data, *snapshot, out),
        Command::Ablation {
            data,
            probes,
            init_from,
            out,
            ..
        } => cmd_ablation(&ctx, data, probes, init_from, out),
        Command::Gradcheck { out } => cmd_gradcheck(&ctx, out),
        Command::PlotPitch {
            data,
            id,
            checkpoint,
            emotions,
            snapshot,
            out,
        } => cmd_plot_pitch(&ctx, data, id, checkpoint, emotions, *snapshot, out),
    }
}

#[derive(Serialize)]
struct GenerateSummary {
    manifest: PathBuf,
    manifest_sha256: String,
    utterances: usize,
    train: usize,
    dev: usize,
    test: usize,
    kappa: f64,
    neutral_only: bool,
}

fn cmd_generate(ctx: &Ctx, out: &Option<PathBuf>, force: bool) -> CliResult<String> {
    let cfg = &ctx.config;
    let dir = data_dir(out);
    let params = ScmParams::generate(&cfg.scm)?;
    let opts = GenerateOptions {
        force,
        neutral_only: cfg.data.neutral_only,
    };
    let manifest = io::generate_dataset(&params, cfg.dataset_seed(), cfg.data.n, cfg.data.split_ratios, &dir, &opts)?;
    ctx.prepare(&dir)?;
    let path = dir.join(io::MANIFEST_FILE);
    let s = GenerateSummary {
        manifest_sha256: io::sha256_file(&path)?,
        manifest: path,
        utterances: manifest.records.len(),
        train: manifest.split(Split::Train).count(),
        dev: manifest.split(Split::Dev).count(),
        test: manifest.split(Split::Test).count(),
        kappa: manifest.header.params.kappa,
        neutral_only: manifest.header.neutral_only,
    };
    let text = format!(
        "manifest {}\nsha256 {}\nutterances {} (train {}, dev {}, test {}), kappa {}, neutral only {}\n",
        s.manifest.display(),
        s.manifest_sha256,
        s.utterances,
        s.train,
        s.dev,
        s.test,
        s.kappa,
        s.neutral_only
    );
    ctx.report(&dir, &s, text)
}

#[derive(Serialize)]
struct ProbeSummary {
    dir: PathBuf,
    checksums: [String; 4],
    metrics: crate::probes::ProbeMetrics,
}

fn cmd_train_probes(ctx: &Ctx, data: &Option<PathBuf>, out: &Option<PathBuf>) -> CliResult<String> {
    let data = Dataset::load(&data_dir(data))?;
    let dir = out.clone().unwrap_or_else(|| runs_root().join("probes"));
    let probes = train_probes(&data, &ctx.config.probes, ctx.config.probe_seed())?;
    probes.save(&dir)?;
    ctx.prepare(&dir)?;
    let m = &probes.metrics;
    let s = ProbeSummary {
        dir: dir.clone(),
        checksums: probes.checksums(),
        metrics: m.clone(),
    };
    let text = format!(
        "probes {}\ncontent frame accuracy {:.4} ({} dev frames)\nemotion accuracy train-probe {:.4}, eval-probe {:.4} ({} dev utterances)\nspeaker accuracy {:.4}\n",
        dir.display(),
        m.content_dev_accuracy,
        m.dev_frames,
        m.emotion_train_probe_dev_accuracy,
        m.emotion_eval_probe_dev_accuracy,
        m.dev_utterances,
        m.speaker_dev_accuracy
    );
    ctx.report(&dir, &s, text)
}

fn load_probes(dir: &Path) -> CliResult<ProbeWeights<f32>> {
    Ok(ProbeWeights::<f64>::load(dir)?.cast())
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    checkpoint_sha256: String,
    tag: String,
    steps: u64,
    initial_dev_l_mel: f64,
    final_dev_l_mel: f64,
    best_step: Option<u64>,
    elapsed_s: f64,
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    ctx: &Ctx,
    stage: StageArg,
    data: &Option<PathBuf>,
    init_from: &Option<PathBuf>,
    probes: &Option<PathBuf>,
    ablate: &[Ablate],
    stop_at: Option<u64>,
    resume: bool,
    out: &Option<PathBuf>,
) -> CliResult<String> {
    let mut config = ctx.config.clone();
    let opts = RunOptions {
        stop_at,
        resume,
        ..ctx.run_options()
    };
    let outcome = match stage {
        StageArg::Pretrain => {
            if init_from.is_some() || !ablate.is_empty() {
                return Err(Failure::Usage(
                    "--init-from and --ablate apply to --stage finetune only".into(),
                ));
            }
            let data = Dataset::load(&data_dir(data))?;
            config.model = config.model_for(data.params());
            let dir = out.clone().unwrap_or_else(|| runs_root().join("pretrain"));
            let ctx = Ctx { config, ..*ctx };
            ctx.prepare(&dir)?;
            run_pretrain(&data, &ctx.config.model, &ctx.config.pretrain, &dir, &opts)?
        }
        StageArg::Finetune => {
            let init = init_from
                .as_ref()
                .ok_or_else(|| Failure::Usage("--stage finetune requires --init-from <pretrain checkpoint>".into()))?;
            let probe_dir = probes
                .as_ref()
                .ok_or_else(|| Failure::Usage("--stage finetune requires --probes <probe dir>".into()))?;
            for a in ablate {
                match a {
                    Ablate::NoIpc => config.finetune.ablation.disable_ipc = true,
                    Ablate::NoCpc => config.finetune.ablation.disable_cpc = true,
                    Ablate::NoEmotion => config.finetune.ablation.disable_emotion_conditioning = true,
                }
            }
            let data = Dataset::load(&data_dir(data))?;
            let probes = load_probes(probe_dir)?;
            let dir = out
                .clone()
                .unwrap_or_else(|| runs_root().join(evaluator::variant_dir(config.finetune.tag())));
            let ctx = Ctx { config, ..*ctx };
            ctx.prepare(&dir)?;
            run_finetune(&data, &checkpoint_dir(init), &probes, &ctx.config.finetune, &dir, &opts)?
        }
    };
    let s = TrainSummary {
        checkpoint_sha256: io::checkpoint_hash(&outcome.checkpoint)?,
        checkpoint: outcome.checkpoint.clone(),
        tag: outcome.tag.clone(),
        steps: outcome.steps,
        initial_dev_l_mel: outcome.initial_dev_l_mel,
        final_dev_l_mel: outcome.final_dev.losses.l_mel,
        best_step: outcome.best.as_ref().map(|b| b.step),
        elapsed_s: outcome.elapsed_s,
    };
    let text = format!(
        "{} checkpoint {}\nsha256 {}\nsteps {}, dev l_mel {:.4} -> {:.4}, best step {}, {:.1}s\n",
        s.tag,
        s.checkpoint.display(),
        s.checkpoint_sha256,
        s.steps,
        s.initial_dev_l_mel,
        s.final_dev_l_mel,
        s.best_step.map_or("-".into(), |b| b.to_string()),
        s.elapsed_s
    );
    let run_dir = outcome.checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    ctx.report(&run_dir, &s, text)
}

/// Accepts either a run directory or the checkpoint inside it.
fn checkpoint_dir(p: &Path) -> PathBuf {
    let inner = p.join("checkpoint");
    if inner.join(io::METADATA_FILE).exists() {
        inner
    } else {
        p.to_path_buf()
    }
}

fn load_checkpoint(p: &Path, snapshot: SnapshotArg) -> CliResult<(FastSpeech2<f32>, trainer::CheckpointMeta, String)> {
    let dir = checkpoint_dir(p);
    let (model, meta) = load_model(&dir, snapshot.into())?;
    let hash = io::checkpoint_hash(&dir)?;
    Ok((model, meta, hash))
}

fn parse_emotion(params: &ScmParams, s: &str) -> CliResult<usize> {
    if let Some(e) = params.emotion_id(s) {
        return Ok(e);
    }
    match s.parse::<usize>() {
        Ok(i) if i < params.n_emotions() => Ok(i),
        _ => Err(Failure::Usage(format!(
            "unknown emotion `{s}`; expected one of {}",
            params.emotions.join(", ")
        ))),
    }
}

/// A test-split utterance, or an error listing the available ids.
fn test_utterance(data: &Dataset, id: &str) -> CliResult<Utterance> {
    let ids = data.ids(Split::Test);
    if !ids.iter().any(|i| i == id) {
        return Err(Failure::Runtime(format!(
            "utterance `{id}` is not in the test split; available: {}",
            ids.join(", ")
        )));
    }
    Ok(data.utterance(id)?)
}

fn mel_csv(m: &ndarray::Array2<f64>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct CounterfactSummary {
    utterance: String,
    checkpoint_sha256: String,
    manifest_sha256: String,
    emotion: String,
    e_prime: String,
    effects: MediationReport,
    /// Mean per-phoneme pitch shift of the counterfactual against the
    /// base synthesis, Hz.
    pitch_shift_hz: f64,
    /// Shifts of both syntheses against neutral, Hz.
    shifts_vs_neutral_hz: Vec<(String, f64)>,
    dir: PathBuf,
}

fn cmd_counterfact(
    ctx: &Ctx,
    checkpoint: &Path,
    data: &Option<PathBuf>,
    id: &str,
    emotion: &str,
    snapshot: SnapshotArg,
    out: &Option<PathBuf>,
) -> CliResult<String> {
    let data = Dataset::load(&data_dir(data))?;
    let params = data.params();
    let e_prime = parse_emotion(params, emotion)?;
    let u = test_utterance(&data, id)?;
    let (model, _, hash) = load_checkpoint(checkpoint, snapshot)?;
    let dir = out.clone().unwrap_or_else(|| {
        runs_root()
            .join("counterfact")
            .join(short(&hash))
            .join(format!("{id}-{}", params.emotions[e_prime]))
    });
    ctx.prepare(&dir)?;
    let sys = ModelSystem(&model);
    let base_p = sys.prosody(&u, u.emotion)?;
    let cf_p = sys.prosody(&u, e_prime)?;
    let base = sys.render(&u, u.emotion, u.emotion)?;
    let cf = sys.render(&u, e_prime, e_prime)?;
    fs::write(dir.join("base_mel.csv"), mel_csv(&base))?;
    fs::write(dir.join("counterfactual_mel.csv"), mel_csv(&cf))?;
    let mut table = String::from("index,phoneme,base_duration,base_pitch_hz,base_energy,cf_duration,cf_pitch_hz,cf_energy\n");
    for i in 0..u.phonemes.len() {
        let _ = writeln!(
            table,
            "{i},{},{},{:.3},{:.5},{},{:.3},{:.5}",
            u.phonemes[i],
            base_p.durations[i],
            base_p.pitch_hz[i],
            base_p.energy[i],
            cf_p.durations[i],
            cf_p.pitch_hz[i],
            cf_p.energy[i]
        );
    }
    fs::write(dir.join("prosody.csv"), table)?;
    let effects = evaluator::mediation_effects(&sys, &u, e_prime)?;
    let mut emotions = vec![NEUTRAL];
    for e in [u.emotion, e_prime] {
        if !emotions.contains(&e) {
            emotions.push(e);
        }
    }
    let contour = pitch_contour(&sys, &u, &emotions, &params.emotions)?;
    contour.write(&dir, "pitch_contour")?;
    let shift = base_p
        .pitch_hz
        .iter()
        .zip(&cf_p.pitch_hz)
        .map(|(a, b)| b - a)
        .sum::<f64>()
        / u.phonemes.len().max(1) as f64;
    let s = CounterfactSummary {
        utterance: u.id.clone(),
        checkpoint_sha256: hash,
        manifest_sha256: data.manifest_hash.clone(),
        emotion: params.emotions[u.emotion].clone(),
        e_prime: params.emotions[e_prime].clone(),
        effects,
        pitch_shift_hz: shift,
        shifts_vs_neutral_hz: contour.labels.iter().cloned().zip(contour.mean_shift_hz.iter().copied()).collect(),
        dir: dir.clone(),
    };
    let text = format!(
        "{} {} -> {}\ntotal {:.5}  nde {:.5}  nie {:.5}\nmean pitch shift {:+.2} Hz\nartifacts in {}\n",
        s.utterance,
        s.emotion,
        s.e_prime,
        effects.total_effect,
        effects.nde,
        effects.nie,
        s.pitch_shift_hz,
        dir.display()
    );
    ctx.report(&dir, &s, text)
}

fn cmd_evaluate(
    ctx: &Ctx,
    checkpoints: &[PathBuf],
    data: &Option<PathBuf>,
    probes: &Path,
    snapshot: SnapshotArg,
    out: &Option<PathBuf>,
) -> CliResult<String> {
    let data = Dataset::load(&data_dir(data))?;
    let probes = load_probes(probes)?;
    let utterances = test_utterances(&data, ctx.config.eval.limit)?;
    let mut rows = Vec::new();
    for c in checkpoints {
        let (model, meta, hash) = load_checkpoint(c, snapshot)?;
        rows.push(evaluate_system(&model, &meta.tag, &hash, &probes, &utterances)?);
    }
    let report = EvalReport {
        manifest_hash: data.manifest_hash.clone(),
        probe_checksums: probes.checksums(),
        emotions: data.params().emotions.clone(),
        utterances: utterances.len(),
        rows,
    };
    let dir = out.clone().unwrap_or_else(|| {
        let key: Vec<&str> = report.rows.iter().map(|r| short(&r.checkpoint_hash)).collect();
        runs_root().join("eval").join(key.join("+"))
    });
    ctx.prepare(&dir)?;
    let text = report.to_text();
    ctx.report(&dir, &report, text)
}

#[derive(Serialize)]
struct MediateReport {
    manifest_hash: String,
    system: String,
    checkpoint_hash: Option<String>,
    kappa: Option<f64>,
    utterances: usize,
    emotions: Vec<String>,
    summary: MediationSummary,
}

fn cmd_mediate(
    ctx: &Ctx,
    checkpoint: &Option<PathBuf>,
    kappa_oracle: Option<f64>,
    data: &Option<PathBuf>,
    snapshot: SnapshotArg,
    out: &Option<PathBuf>,
) -> CliResult<String> {
    let data = Dataset::load(&data_dir(data))?;
    let utterances = test_utterances(&data, ctx.config.eval.limit)?;
    let n_e = data.params().n_emotions();
    let (report, key) = match (checkpoint, kappa_oracle) {
        (Some(c), None) => {
            let (model, meta, hash) = load_checkpoint(c, snapshot)?;
            let summary = eval_mediation(&ModelSystem(&model), &utterances, n_e, &[])?;
            let key = short(&hash).to_string();
            (
                MediateReport {
                    manifest_hash: data.manifest_hash.clone(),
                    system: meta.tag,
                    checkpoint_hash: Some(hash),
                    kappa: None,
                    utterances: utterances.len(),
                    emotions: data.params().emotions.clone(),
                    summary,
                },
                key,
            )
        }
        (None, Some(k)) => {
            let params = data.params().with_kappa(k);
            let summary = eval_mediation(&Oracle(&params), &utterances, n_e, &[])?;
            (
                MediateReport {
                    manifest_hash: data.manifest_hash.clone(),
                    system: "oracle".into(),
                    checkpoint_hash: None,
                    kappa: Some(k),
                    utterances: utterances.len(),
                    emotions: data.params().emotions.clone(),
                    summary,
                },
                format!("oracle-kappa-{k}"),
            )
        }
        _ => return Err(Failure::Usage("mediate needs exactly one of --checkpoint or --kappa-oracle".into())),
    };
    let dir = out.clone().unwrap_or_else(|| runs_root().join("mediate").join(key));
    ctx.prepare(&dir)?;
    let m = &report.summary.mean;
    let mut text = format!(
        "system {}{}\nmanifest {}\npairs {} over {} utterances\nmean  total {:.6}  nde {:.6}  nie {:.6}  residual {:.3e}\n",
        report.system,
        report.kappa.map_or(String::new(), |k| format!(" (kappa {k})")),
        report.manifest_hash,
        report.summary.count,
        report.utterances,
        m.total_effect,
        m.nde,
        m.nie,
        m.decomposition_residual
    );
    for p in &report.summary.per_pair {
        let _ = writeln!(
            text,
            "  {:>8} -> {:<8} n {:>4}  total {:.6}  nde {:.6}  nie {:.6}",
            report.emotions[p.from], report.emotions[p.to], p.count, p.effects.total_effect, p.effects.nde, p.effects.nie
        );
    }
    ctx.report(&dir, &report, text)
}

fn cmd_ablation(
    ctx: &Ctx,
    data: &Option<PathBuf>,
    probes: &Path,
    init_from: &Path,
    out: &Option<PathBuf>,
) -> CliResult<String> {
    let data = Dataset::load(&data_dir(data))?;
    let probes = load_probes(probes)?;
    let dir = out.clone().unwrap_or_else(|| runs_root().join("ablation"));
    ctx.prepare(&dir)?;
    let report = run_ablation_suite(
        &data,
        &probes,
        &checkpoint_dir(init_from),
        &ctx.config.finetune,
        &dir,
        ctx.config.eval.limit,
        &ctx.run_options(),
    )?;
    let text = report.to_text();
    ctx.report(&dir, &report, text)
}

fn cmd_gradcheck(ctx: &Ctx, out: &Option<PathBuf>) -> CliResult<String> {
    let dir = out.clone().unwrap_or_else(|| runs_root().join("gradcheck"));
    ctx.prepare(&dir)?;
    let report = gradient_check(&ctx.config.gradcheck)?;
    let text = report.to_text();
    let printed = ctx.report(&dir, &report, text)?;
    if report.passed {
        Ok(printed)
    } else {
        print!("{printed}");
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn cmd_plot_pitch(
    ctx: &Ctx,
    data: &Option<PathBuf>,
    id: &str,
    checkpoint: &Option<PathBuf>,
    emotions: &[String],
    snapshot: SnapshotArg,
    out: &Option<PathBuf>,
) -> CliResult<String> {
    let data = Dataset::load(&data_dir(data))?;
    let params = data.params();
    let u = test_utterance(&data, id)?;
    let list: Vec<usize> = if emotions.is_empty() {
        (0..params.n_emotions()).collect()
    } else {
        emotions.iter().map(|e| parse_emotion(params, e)).collect::<CliResult<_>>()?
    };
    let (contour, key) = match checkpoint {
        Some(c) => {
            let (model, _, hash) = load_checkpoint(c, snapshot)?;
            (pitch_contour(&ModelSystem(&model), &u, &list, &params.emotions)?, short(&hash).to_string())
        }
        None => (pitch_contour(&Oracle(params), &u, &list, &params.emotions)?, "oracle".to_string()),
    };
    let dir = out.clone().unwrap_or_else(|| runs_root().join("pitch").join(key).join(id));
    ctx.prepare(&dir)?;
    let files = contour.write(&dir, "pitch_contour")?;
    let mut text = format!("utterance {id}\n");
    for (i, l) in contour.labels.iter().enumerate() {
        let _ = writeln!(
            text,
            "  {:<10} mean shift {:+7.2} Hz  range {:6.2} Hz",
            l, contour.mean_shift_hz[i], contour.range_hz[i]
        );
    }
    for f in &files {
        let _ = writeln!(text, "wrote {}", f.display());
    }
    ctx.report(&dir, &contour, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        let v = serde_json::to_value(&cfg).unwrap();
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back.materialize(), cfg);
    }

    #[test]
    fn dotted_overrides_apply_and_unknown_keys_fail() {
        let cfg = RunConfig::load(None, &["finetune.lr=0.001".into(), "scm.kappa=0.5".into()]).unwrap();
        assert_eq!(cfg.finetune.lr, 1e-3);
        assert_eq!(cfg.scm.kappa, 0.5);
        assert!(matches!(
            RunConfig::load(None, &["finetune.learning_rate=1".into()]),
            Err(Failure::Usage(_))
        ));
        assert!(matches!(RunConfig::load(None, &["nokey".into()]), Err(Failure::Usage(_))));
    }

    #[test]
    fn ramp_follows_step_override() {
        let cfg = RunConfig::load(None, &["finetune.steps=400".into()]).unwrap();
        assert_eq!(cfg.finetune.beta_ipc.ramp_steps, 100);
        let flat = RunConfig::load(None, &["beta_ramp_fraction=0".into()]).unwrap();
        assert_eq!(flat.finetune.beta_cpc.ramp_steps, 0);
    }

    #[test]
    fn seeds_derive_from_master() {
        let a = RunConfig::load(None, &["seed=3".into()]).unwrap();
        let b = RunConfig::load(None, &["seed=4".into()]).unwrap();
        assert_ne!(a.scm.master_seed, b.scm.master_seed);
        assert_ne!(a.pretrain.seed, a.finetune.seed);
        assert_eq!(a, RunConfig::load(None, &["seed=3".into()]).unwrap());
    }
}
