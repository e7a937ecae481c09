//! Two-stage training: neutral pre-training on the base objective, then
//! emotional fine-tuning with the indirect-path and counterfactual passes.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{accumulate, global_norm, Gradients, Graph, ParamStore, Var};
use crate::evaluator::{edit_distance, transcribe};
use crate::io::{self, Dataset, Example, Split};
use crate::model::{DropoutRng, FastSpeech2, ModelConfig, ModelError, TeacherProsody};
use crate::objectives::{
    base_loss, content_loss, cpc_loss_var, emo_clf_loss, ipc_loss, BaseLoss, LossBreakdown, LossError, LossWeights,
    Targets,
};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::probes::{ProbeError, ProbeWeights};
use crate::scm::{derive_seed, named_seed, NEUTRAL};
use crate::Real;

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const DUMP_FILE: &str = "nonfinite_dump.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset split '{0}' is empty")]
    EmptyDataset(&'static str),
    #[error("probes expect {probes} mel channels but the model produces {model}")]
    ProbeMismatch { probes: usize, model: usize },
    #[error("fine-tuning needs frozen probes")]
    MissingProbes,
    #[error("non-finite loss at step {step} (examples {ids:?}); diagnostics in {dump}")]
    NonFinite { step: u64, ids: Vec<String>, dump: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Io(#[from] io::IoError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Linear ramp from `start` to `end` over `ramp_steps`, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub start: f64,
    pub end: f64,
    pub ramp_steps: u64,
}

impl Schedule {
    pub fn constant(v: f64) -> Self {
        Self {
            start: v,
            end: v,
            ramp_steps: 0,
        }
    }

    pub fn value(&self, step: u64) -> f64 {
        if self.ramp_steps == 0 || step >= self.ramp_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * step as f64 / self.ramp_steps as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub disable_ipc: bool,
    pub disable_cpc: bool,
    /// Fine-tunes a model with no emotion inputs at all.
    pub disable_emotion_conditioning: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip_norm: f64,
    pub beta_ipc: Schedule,
    pub beta_cpc: Schedule,
    pub lambda_d: f64,
    pub lambda_p: f64,
    pub lambda_u: f64,
    pub lambda_emo: f64,
    pub seed: u64,
    pub eval_every: u64,
    /// Dev utterances scored at each evaluation.
    pub eval_utterances: usize,
    pub ablation: AblationFlags,
    pub optimizer: AdamWConfig,
}

impl TrainConfig {
    pub fn pretrain_desk() -> Self {
        Self {
            stage: Stage::Pretrain,
            steps: 3000,
            batch_size: 16,
            lr: 1e-4,
            grad_clip_norm: 1.0,
            beta_ipc: Schedule::constant(0.0),
            beta_cpc: Schedule::constant(0.0),
            lambda_d: 1.0,
            lambda_p: 1.0,
            lambda_u: 1.0,
            lambda_emo: 1.0,
            seed: 0,
            eval_every: 500,
            eval_utterances: 64,
            ablation: AblationFlags::default(),
            optimizer: AdamWConfig::default(),
        }
    }

    /// Fine-tuning with both causal weights ramped over the first quarter.
    pub fn finetune_desk() -> Self {
        Self {
            stage: Stage::Finetune,
            steps: 2000,
            lr: 5e-5,
            ..Self::pretrain_desk()
        }
        .with_ramp_fraction(0.25)
    }

    /// Sets both β schedules to ramp from 0 to 1.0 / 0.5 over `fraction`
    /// of the run.
    pub fn with_ramp_fraction(mut self, fraction: f64) -> Self {
        let ramp = (self.steps as f64 * fraction).round() as u64;
        self.beta_ipc = Schedule {
            start: 0.0,
            end: 1.0,
            ramp_steps: ramp,
        };
        self.beta_cpc = Schedule {
            start: 0.0,
            end: 0.5,
            ramp_steps: ramp,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        for (name, s) in [("beta_ipc", self.beta_ipc), ("beta_cpc", self.beta_cpc)] {
            if s.start < 0.0 || s.end < 0.0 || !s.start.is_finite() || !s.end.is_finite() {
                return Err(TrainError::Config(format!("{name} values must be finite and >= 0")));
            }
            if s.end < s.start {
                return Err(TrainError::Config(format!("{name} schedule must not decrease")));
            }
        }
        if [self.lambda_d, self.lambda_p, self.lambda_u, self.lambda_emo]
            .iter()
            .any(|&l| !(l >= 0.0))
        {
            return bad("lambda weights must be >= 0");
        }
        if self.eval_utterances == 0 {
            return bad("eval_utterances must be >= 1");
        }
        Ok(())
    }

    pub fn ipc_active(&self) -> bool {
        self.stage == Stage::Finetune && !self.ablation.disable_ipc && !self.ablation.disable_emotion_conditioning
    }

    pub fn cpc_active(&self) -> bool {
        self.stage == Stage::Finetune && !self.ablation.disable_cpc && !self.ablation.disable_emotion_conditioning
    }

    /// Effective loss weights at `step`; inactive terms get weight 0.
    pub fn weights_at(&self, step: u64) -> LossWeights {
        LossWeights {
            lambda_d: self.lambda_d,
            lambda_p: self.lambda_p,
            lambda_u: self.lambda_u,
            lambda_emo: self.lambda_emo,
            beta_ipc: if self.ipc_active() { self.beta_ipc.value(step) } else { 0.0 },
            beta_cpc: if self.cpc_active() { self.beta_cpc.value(step) } else { 0.0 },
        }
    }

    /// Weights at the end of every ramp; used for dev model selection.
    pub fn final_weights(&self) -> LossWeights {
        self.weights_at(u64::MAX)
    }

    /// Row label in ablation tables.
    pub fn tag(&self) -> &'static str {
        match self.stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => {
                let a = self.ablation;
                if a.disable_emotion_conditioning {
                    "w/o emotion conditioning"
                } else {
                    match (a.disable_ipc, a.disable_cpc) {
                        (false, false) => "CPM",
                        (true, false) => "w/o IPC",
                        (false, true) => "w/o CPC",
                        (true, true) => "Baseline B",
                    }
                }
            }
        }
    }
}

/// Uniform draw from every emotion except `e`.
pub fn sample_other_emotion(rng: &mut impl Rng, e: usize, n_emotions: usize) -> usize {
    assert!(n_emotions >= 2, "need at least two emotions");
    let r = rng.random_range(0..n_emotions - 1);
    if r >= e {
        r + 1
    } else {
        r
    }
}

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| TrainError::Checkpoint(format!("rng state: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("bad word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Dev-split measurements taken at an evaluation step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub utterances: usize,
    /// Teacher-forced base components and the objective at final weights.
    pub losses: LossBreakdown,
    /// Neutral-vs-counterfactual transcript consistency from the content probe.
    pub ccs: f64,
    /// Counterfactual syntheses classified as their target emotion by the
    /// training emotion probe.
    pub emotion_accuracy: f64,
    /// Mean L1 of the decoder-emotion swap with prosody held fixed.
    pub ipc_magnitude: f64,
}

/// Best dev objective seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestDev {
    pub step: u64,
    pub objective: f64,
    pub metrics: DevMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub tag: String,
    pub lr: f64,
    /// Exponential moving average of training breakdowns.
    pub train: LossBreakdown,
    /// Breakdown of the most recent batch.
    pub last: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub dev: DevMetrics,
    pub elapsed_s: f64,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: FastSpeech2<f32>,
    pub optimizer: AdamW<f32>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub running: Option<LossBreakdown>,
    pub best: Option<(BestDev, ParamStore<f32>)>,
    pub initial_dev_l_mel: Option<f64>,
}

impl TrainState {
    pub fn new(model: FastSpeech2<f32>, config: &TrainConfig) -> Self {
        let optimizer = AdamW::new(model.params(), config.optimizer);
        Self {
            model,
            optimizer,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(named_seed(config.seed, "trainer.batches")),
            running: None,
            best: None,
            initial_dev_l_mel: None,
        }
    }
}

/// Result of one optimiser step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

fn teacher(ex: &Example) -> TeacherProsody {
    TeacherProsody {
        durations: ex.durations.clone(),
        pitch_hz: ex.pitch.clone(),
        energy: ex.energy.clone(),
    }
}

/// Emotion id the model sees for an example in this stage.
fn input_emotion(config: &TrainConfig, ex: &Example) -> usize {
    match config.stage {
        Stage::Pretrain => NEUTRAL,
        Stage::Finetune => ex.emotion,
    }
}

/// Which counterfactual passes run for an example, and under which `E'`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counterfactual {
    pub e_prime: usize,
    pub ipc: bool,
    pub cpc: bool,
}

/// Graph handles of every loss term of one example.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub base: BaseLoss,
    pub ipc: Option<Var>,
    pub content: Option<Var>,
    pub emo: Option<Var>,
    /// Rounded durations of the counterfactual pass.
    pub cf_durations: Vec<usize>,
}

impl LossVars {
    /// Weighted total; absent terms contribute nothing.
    pub fn total<F: Real>(&self, g: &mut Graph<'_, F>, w: &LossWeights) -> Var {
        let mut total = self.base.weighted(g, w);
        if let Some(ipc) = self.ipc {
            let t = g.scale(ipc, w.beta_ipc);
            total = g.add(total, t);
        }
        if let (Some(c), Some(e)) = (self.content, self.emo) {
            let cpc = cpc_loss_var(g, c, e, w.lambda_emo);
            let t = g.scale(cpc, w.beta_cpc);
            total = g.add(total, t);
        }
        total
    }

    pub fn breakdown<F: Real>(&self, g: &Graph<'_, F>, w: LossWeights) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x).f64());
        LossBreakdown::compose(
            [
                g.scalar(self.base.mel).f64(),
                g.scalar(self.base.dur).f64(),
                g.scalar(self.base.pitch).f64(),
                g.scalar(self.base.energy).f64(),
                v(self.ipc),
                v(self.content),
                v(self.emo),
            ],
            w,
        )
    }
}

/// Records the three passes for one example: teacher-forced base pass,
/// decoder-emotion swap on the cached prosody, and a free-running pass
/// under `E'` scored by the frozen probes.
#[allow(clippy::too_many_arguments)]
pub fn build_losses<'p, F: Real>(
    g: &mut Graph<'p, F>,
    model: &'p FastSpeech2<F>,
    probes: Option<&'p ProbeWeights<F>>,
    ex: &Example,
    targets: &'p Targets<F>,
    emotion: usize,
    cf: Option<Counterfactual>,
    rng: &mut DropoutRng<'_>,
) -> Result<LossVars> {
    let t = teacher(ex);
    let pass = model.forward(g, &ex.phonemes, ex.speaker, emotion, Some(&t), rng)?;
    let gt = [
        g.constant_ref(&targets.mel),
        g.constant_ref(&targets.log_durations),
        g.constant_ref(&targets.pitch),
        g.constant_ref(&targets.energy),
    ];
    let base = base_loss(
        g,
        pass.mel,
        gt[0],
        [pass.log_durations, pass.pitch, pass.energy],
        [gt[1], gt[2], gt[3]],
    )?;
    let mut vars = LossVars {
        base,
        ipc: None,
        content: None,
        emo: None,
        cf_durations: Vec::new(),
    };
    let Some(cf) = cf else { return Ok(vars) };
    if cf.ipc {
        let direct = model.forward_ipc(g, &pass, cf.e_prime, rng)?;
        vars.ipc = Some(ipc_loss(g, direct, pass.mel));
    }
    if cf.cpc {
        let probes = probes.ok_or(TrainError::MissingProbes)?;
        let out = model.forward_cpc(g, &ex.phonemes, ex.speaker, cf.e_prime, rng)?;
        vars.content = Some(content_loss(g, out.mel, &ex.phonemes, &out.durations, &probes.content)?);
        vars.emo = Some(emo_clf_loss(g, out.mel, cf.e_prime, &probes.emotion_train)?);
        vars.cf_durations = out.durations;
    }
    Ok(vars)
}

/// Gradients of the weighted total for one example; `None` when the loss
/// is not finite.
pub fn example_gradients<F: Real>(
    model: &FastSpeech2<F>,
    probes: Option<&ProbeWeights<F>>,
    ex: &Example,
    emotion: usize,
    cf: Option<Counterfactual>,
    w: &LossWeights,
    dropout_seed: Option<u64>,
) -> Result<(Option<Gradients<F>>, LossBreakdown)> {
    let mut drop_rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut rng = drop_rng.as_mut();
    let targets = Targets::<F>::from_example(ex);
    let mut g = Graph::new(Some(model.params()));
    let vars = build_losses(&mut g, model, probes, ex, &targets, emotion, cf, &mut rng)?;
    let total = vars.total(&mut g, w);
    let breakdown = vars.breakdown(&g, *w);
    if !breakdown.is_finite() || !g.scalar(total).f64().is_finite() {
        return Ok((None, breakdown));
    }
    Ok((Some(g.backward(total)), breakdown))
}

/// One step of the algorithm: for each example a base pass, an
/// indirect-path pass and a counterfactual pass under a freshly drawn
/// `E' != E`, then clipping and one AdamW update.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&Example],
    config: &TrainConfig,
    probes: Option<&ProbeWeights<f32>>,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset("batch"));
    }
    let n_emotions = state.model.config().n_emotions;
    let w = config.weights_at(state.step);
    let needs_cf = config.ipc_active() || config.cpc_active();
    if config.cpc_active() && probes.is_none() {
        return Err(TrainError::MissingProbes);
    }
    let mut grads: Gradients<f32> = vec![None; state.model.params().len()];
    let mut parts = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len() as f32;
    for (i, ex) in batch.iter().enumerate() {
        let emotion = input_emotion(config, ex);
        let cf = needs_cf.then(|| Counterfactual {
            e_prime: sample_other_emotion(&mut state.rng, emotion, n_emotions),
            ipc: config.ipc_active(),
            cpc: config.cpc_active(),
        });
        let dropout_seed =
            (state.model.config().dropout > 0.0).then(|| derive_seed(config.seed, &[state.step, i as u64]));
        let (g, b) = example_gradients(&state.model, probes, ex, emotion, cf, &w, dropout_seed)?;
        let Some(g) = g else {
            return Err(TrainError::NonFinite {
                step: state.step,
                ids: vec![ex.id.clone()],
                dump: String::new(),
            });
        };
        accumulate(&mut grads, g, scale);
        parts.push(b);
    }
    let breakdown = LossBreakdown::mean(&parts);
    let grad_norm = clip_grad_norm(&mut grads, config.grad_clip_norm);
    let clipped_norm = global_norm(&grads);
    if !grad_norm.is_finite() {
        return Err(TrainError::NonFinite {
            step: state.step,
            ids: batch.iter().map(|e| e.id.clone()).collect(),
            dump: String::new(),
        });
    }
    state.optimizer.update(state.model.params_mut(), &grads, config.lr);
    state.step += 1;
    state.running = Some(match state.running {
        None => breakdown,
        Some(r) => ema(&r, &breakdown, 0.98),
    });
    Ok(StepOutcome {
        breakdown,
        grad_norm,
        clipped_norm,
    })
}

fn ema(old: &LossBreakdown, new: &LossBreakdown, decay: f64) -> LossBreakdown {
    let mix = |a: f64, b: f64| decay * a + (1.0 - decay) * b;
    LossBreakdown::compose(
        [
            mix(old.l_mel, new.l_mel),
            mix(old.l_dur, new.l_dur),
            mix(old.l_pitch, new.l_pitch),
            mix(old.l_energy, new.l_energy),
            mix(old.l_ipc, new.l_ipc),
            mix(old.l_content, new.l_content),
            mix(old.l_emo_clf, new.l_emo_clf),
        ],
        new.weights(),
    )
}

/// Deterministic counterfactual target for the `i`-th dev utterance.
pub fn dev_target_emotion(e: usize, i: usize, n_emotions: usize) -> usize {
    (e + 1 + i % (n_emotions - 1)) % n_emotions
}

/// Scores a model on dev examples in evaluation mode.
pub fn dev_metrics(
    model: &FastSpeech2<f32>,
    probes: Option<&ProbeWeights<f32>>,
    examples: &[Example],
    config: &TrainConfig,
) -> Result<DevMetrics> {
    let n_emotions = model.config().n_emotions;
    let w = config.final_weights();
    let mut parts = Vec::with_capacity(examples.len());
    let (mut ccs, mut hits, mut ipc_total) = (0.0, 0usize, 0.0);
    for (i, ex) in examples.iter().enumerate() {
        let emotion = input_emotion(config, ex);
        let e_prime = dev_target_emotion(emotion, i, n_emotions);
        let targets = Targets::<f32>::from_example(ex);
        let t = teacher(ex);
        let mut g = Graph::new(None);
        let pass = model.forward(&mut g, &ex.phonemes, ex.speaker, emotion, Some(&t), &mut None)?;
        let gt = [
            g.constant_ref(&targets.mel),
            g.constant_ref(&targets.log_durations),
            g.constant_ref(&targets.pitch),
            g.constant_ref(&targets.energy),
        ];
        let base = base_loss(
            &mut g,
            pass.mel,
            gt[0],
            [pass.log_durations, pass.pitch, pass.energy],
            [gt[1], gt[2], gt[3]],
        )?;
        let mut p = [
            g.scalar(base.mel).f64(),
            g.scalar(base.dur).f64(),
            g.scalar(base.pitch).f64(),
            g.scalar(base.energy).f64(),
            0.0,
            0.0,
            0.0,
        ];
        if config.stage == Stage::Finetune {
            let (syn, direct) = model.synthesize_direct(&ex.phonemes, ex.speaker, emotion, e_prime)?;
            let diff = (&direct - &syn.mel).mapv(|x| f64::from(x).abs());
            let ipc = diff.mean().unwrap_or(0.0);
            ipc_total += ipc;
            p[4] = ipc;
            if let Some(pr) = probes {
                let cf = model.synthesize(&ex.phonemes, ex.speaker, e_prime)?;
                let neutral = model.synthesize(&ex.phonemes, ex.speaker, NEUTRAL)?;
                let mut g = Graph::new(None);
                let m = g.constant_ref(&cf.mel);
                let c = content_loss(&mut g, m, &ex.phonemes, &cf.durations, &pr.content)?;
                let e = emo_clf_loss(&mut g, m, e_prime, &pr.emotion_train)?;
                p[5] = g.scalar(c).f64();
                p[6] = g.scalar(e).f64();
                let reference = transcribe(&pr.content, &neutral.mel)?;
                let hyp = transcribe(&pr.content, &cf.mel)?;
                let d = edit_distance(&reference, &hyp) as f64 / reference.len().max(1) as f64;
                ccs += (1.0 - d).clamp(0.0, 1.0);
                if pr.emotion_train.predict(&cf.mel)?[0] == e_prime {
                    hits += 1;
                }
            }
        }
        parts.push(LossBreakdown::compose(p, w));
    }
    let n = examples.len().max(1) as f64;
    let mean = LossBreakdown::mean(&parts);
    Ok(DevMetrics {
        utterances: examples.len(),
        losses: mean,
        ccs: ccs / n,
        emotion_accuracy: hits as f64 / n,
        ipc_magnitude: ipc_total / n,
    })
}

/// Metadata stored next to the tensors of a training checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub tag: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: u64,
    pub optimizer_step: u64,
    pub rng: RngState,
    pub running: Option<LossBreakdown>,
    pub best: Option<BestDev>,
    pub initial_dev_l_mel: Option<f64>,
    pub manifest_hash: String,
    pub probe_checksums: Option<[String; 4]>,
    pub init_from: Option<String>,
    pub model_checksum: String,
}

pub const CHECKPOINT_FORMAT: &str = "cpm-checkpoint-v1";

pub fn save_state(
    dir: &Path,
    state: &TrainState,
    config: &TrainConfig,
    manifest_hash: &str,
    probe_checksums: Option<[String; 4]>,
    init_from: Option<String>,
) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        tag: config.tag().into(),
        model_config: state.model.config().clone(),
        train_config: config.clone(),
        step: state.step,
        optimizer_step: state.optimizer.step,
        rng: RngState::capture(&state.rng),
        running: state.running,
        best: state.best.as_ref().map(|b| b.0.clone()),
        initial_dev_l_mel: state.initial_dev_l_mel,
        manifest_hash: manifest_hash.into(),
        probe_checksums,
        init_from,
        model_checksum: state.model.params().checksum(),
    };
    let mut stores: Vec<(&str, &ParamStore<f32>)> = vec![
        ("model", state.model.params()),
        ("adam_m", &state.optimizer.m),
        ("adam_v", &state.optimizer.v),
    ];
    if let Some((_, best)) = &state.best {
        stores.push(("best", best));
    }
    io::write_checkpoint(dir, &meta, &stores)?;
    Ok(())
}

pub fn load_state(dir: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let meta: CheckpointMeta = io::read_metadata(dir)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(TrainError::Checkpoint(format!("unknown format '{}'", meta.format)));
    }
    let template = FastSpeech2::<f32>::new(meta.model_config.clone())?;
    let params = io::read_store(dir, "model", template.params())?;
    let model = FastSpeech2::from_params(meta.model_config.clone(), params)?;
    let m = io::read_store(dir, "adam_m", template.params())?;
    let v = io::read_store(dir, "adam_v", template.params())?;
    let optimizer = AdamW {
        config: meta.train_config.optimizer,
        step: meta.optimizer_step,
        m,
        v,
    };
    let best = match &meta.best {
        Some(b) => Some((b.clone(), io::read_store(dir, "best", template.params())?)),
        None => None,
    };
    let state = TrainState {
        model,
        optimizer,
        step: meta.step,
        rng: meta.rng.restore()?,
        running: meta.running,
        best,
        initial_dev_l_mel: meta.initial_dev_l_mel,
    };
    Ok((state, meta))
}

/// Which weights of a checkpoint to load for synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Snapshot {
    Last,
    /// Best dev objective, falling back to the last weights.
    Best,
}

pub fn load_model(dir: &Path, which: Snapshot) -> Result<(FastSpeech2<f32>, CheckpointMeta)> {
    let meta: CheckpointMeta = io::read_metadata(dir)?;
    let template = FastSpeech2::<f32>::new(meta.model_config.clone())?;
    let prefix = match (which, &meta.best) {
        (Snapshot::Best, Some(_)) => "best",
        _ => "model",
    };
    let params = io::read_store(dir, prefix, template.params())?;
    Ok((FastSpeech2::from_params(meta.model_config.clone(), params)?, meta))
}

/// Knobs that do not change the trajectory.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop (and checkpoint) once this step is reached.
    pub stop_at: Option<u64>,
    /// Continue from the checkpoint already in the output directory.
    pub resume: bool,
    /// Print progress through `log`.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub tag: String,
    pub steps: u64,
    pub initial_dev_l_mel: f64,
    pub final_dev: DevMetrics,
    pub best: Option<BestDev>,
    pub log: Vec<LogLine>,
    pub elapsed_s: f64,
    pub step_outcomes: Vec<StepOutcome>,
}

fn dev_subset(data: &Dataset, n: usize) -> Result<&[Example]> {
    let dev = data.examples(Split::Dev);
    if dev.is_empty() {
        return Err(TrainError::EmptyDataset("dev"));
    }
    Ok(&dev[..n.min(dev.len())])
}

fn write_dump(out_dir: &Path, step: u64, batch: &[&Example], err: &TrainError, state: &TrainState) -> PathBuf {
    #[derive(Serialize)]
    struct Dump<'a> {
        step: u64,
        error: String,
        examples: Vec<DumpExample<'a>>,
        running: Option<LossBreakdown>,
        model_checksum: String,
    }
    #[derive(Serialize)]
    struct DumpExample<'a> {
        id: &'a str,
        phonemes: &'a [usize],
        speaker: usize,
        emotion: usize,
        durations: &'a [usize],
        pitch: &'a [f64],
        energy: &'a [f64],
    }
    let dump = Dump {
        step,
        error: err.to_string(),
        examples: batch
            .iter()
            .map(|e| DumpExample {
                id: &e.id,
                phonemes: &e.phonemes,
                speaker: e.speaker,
                emotion: e.emotion,
                durations: &e.durations,
                pitch: &e.pitch,
                energy: &e.energy,
            })
            .collect(),
        running: state.running,
        model_checksum: state.model.params().checksum(),
    };
    let path = out_dir.join(DUMP_FILE);
    let _ = io::write_json(&path, &dump);
    path
}

fn append_log(path: &Path, line: &LogLine) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| io::IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let text = serde_json::to_string(line).expect("log lines serialise");
    writeln!(f, "{text}").map_err(|source| io::IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = fs::read_to_string(path).map_err(|source| io::IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| {
                io::IoError::Json {
                    path: path.to_path_buf(),
                    source,
                }
                .into()
            })
        })
        .collect()
}

/// Shared loop behind both stages. The checkpoint lives in
/// `out_dir/checkpoint`, the log in `out_dir/train_log.jsonl`.
fn run_loop(
    data: &Dataset,
    mut state: TrainState,
    probes: Option<&ProbeWeights<f32>>,
    config: &TrainConfig,
    out_dir: &Path,
    init_from: Option<String>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train = data.examples(Split::Train);
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    let dev = dev_subset(data, config.eval_utterances)?;
    if let Some(p) = probes {
        if p.mel_channels() != state.model.config().mel_channels {
            return Err(TrainError::ProbeMismatch {
                probes: p.mel_channels(),
                model: state.model.config().mel_channels,
            });
        }
    }
    fs::create_dir_all(out_dir).map_err(|source| io::IoError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let ckpt = out_dir.join("checkpoint");
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let probe_sums = probes.map(|p| p.checksums());
    let start = Instant::now();
    let mut log = Vec::new();
    let mut step_outcomes = Vec::new();

    if state.step == 0 && !opts.resume {
        let _ = fs::remove_file(&log_path);
        let m = dev_metrics(&state.model, probes, dev, config)?;
        state.initial_dev_l_mel.get_or_insert(m.losses.l_mel);
        let line = LogLine {
            step: 0,
            tag: config.tag().into(),
            lr: config.lr,
            train: LossBreakdown::default(),
            last: LossBreakdown::default(),
            grad_norm: 0.0,
            clipped_norm: 0.0,
            dev: m,
            elapsed_s: 0.0,
        };
        append_log(&log_path, &line)?;
        log.push(line);
    }
    let end = opts.stop_at.map_or(config.steps, |s| s.min(config.steps));
    let mut last = None;
    while state.step < end {
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|_| state.rng.random_range(0..train.len()))
            .collect();
        let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
        let step_before = state.step;
        let out = match train_step(&mut state, &batch, config, probes) {
            Ok(o) if o.breakdown.is_finite() => o,
            Ok(o) => {
                let err = TrainError::NonFinite {
                    step: step_before,
                    ids: batch.iter().map(|e| e.id.clone()).collect(),
                    dump: String::new(),
                };
                let _ = o;
                return Err(with_dump(out_dir, step_before, &batch, err, &state));
            }
            Err(e @ TrainError::NonFinite { .. }) => {
                return Err(with_dump(out_dir, step_before, &batch, e, &state));
            }
            Err(e) => return Err(e),
        };
        step_outcomes.push(out);
        last = Some(out);
        let at_eval = state.step.is_multiple_of(config.eval_every.max(1)) || state.step == config.steps;
        if at_eval {
            let m = dev_metrics(&state.model, probes, dev, config)?;
            let objective = m.losses.l_total;
            let improved = state.best.as_ref().is_none_or(|(b, _)| objective < b.objective);
            if improved {
                state.best = Some((
                    BestDev {
                        step: state.step,
                        objective,
                        metrics: m.clone(),
                    },
                    state.model.params().clone(),
                ));
            }
            let line = LogLine {
                step: state.step,
                tag: config.tag().into(),
                lr: config.lr,
                train: state.running.unwrap_or_default(),
                last: out.breakdown,
                grad_norm: out.grad_norm,
                clipped_norm: out.clipped_norm,
                dev: m,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            if opts.verbose {
                log::info!(
                    "[{}] step {} train l_total {:.4} dev l_mel {:.4} ccs {:.3} emo {:.3} ipc {:.4}",
                    line.tag,
                    line.step,
                    line.train.l_total,
                    line.dev.losses.l_mel,
                    line.dev.ccs,
                    line.dev.emotion_accuracy,
                    line.dev.ipc_magnitude
                );
            }
            append_log(&log_path, &line)?;
            log.push(line);
            save_state(&ckpt, &state, config, &data.manifest_hash, probe_sums.clone(), init_from.clone())?;
        }
    }
    if last.is_some() && !log.last().is_some_and(|l| l.step == state.step) {
        save_state(&ckpt, &state, config, &data.manifest_hash, probe_sums.clone(), init_from.clone())?;
    }
    if !ckpt.exists() {
        save_state(&ckpt, &state, config, &data.manifest_hash, probe_sums, init_from)?;
    }
    let final_dev = match log.last() {
        Some(l) if l.step == state.step => l.dev.clone(),
        _ => dev_metrics(&state.model, probes, dev, config)?,
    };
    Ok(TrainOutcome {
        checkpoint: ckpt,
        tag: config.tag().into(),
        steps: state.step,
        initial_dev_l_mel: state.initial_dev_l_mel.unwrap_or(f64::NAN),
        final_dev,
        best: state.best.map(|b| b.0),
        log,
        elapsed_s: start.elapsed().as_secs_f64(),
        step_outcomes,
    })
}

fn with_dump(out_dir: &Path, step: u64, batch: &[&Example], err: TrainError, state: &TrainState) -> TrainError {
    let path = write_dump(out_dir, step, batch, &err, state);
    TrainError::NonFinite {
        step,
        ids: batch.iter().map(|e| e.id.clone()).collect(),
        dump: path.display().to_string(),
    }
}

/// Base objective with every example presented as neutral.
pub fn run_pretrain(
    data: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    if config.stage != Stage::Pretrain {
        return Err(TrainError::Config("run_pretrain needs stage = pretrain".into()));
    }
    let state = if opts.resume {
        load_state(&out_dir.join("checkpoint"))?.0
    } else {
        let model = FastSpeech2::new(ModelConfig {
            init_seed: named_seed(config.seed, "model.init"),
            ..model_config.clone()
        })?;
        TrainState::new(model, config)
    };
    let outcome = run_loop(data, state, None, config, out_dir, None, opts)?;
    if outcome.final_dev.losses.l_mel > 0.2 * outcome.initial_dev_l_mel {
        log::warn!(
            "pre-training ended with dev l_mel {:.4}, above 0.2 x initial {:.4}",
            outcome.final_dev.losses.l_mel,
            outcome.initial_dev_l_mel
        );
    }
    Ok(outcome)
}

/// Fine-tunes from a pre-trained checkpoint with the causal terms on.
pub fn run_finetune(
    data: &Dataset,
    pretrain_ckpt: &Path,
    probes: &ProbeWeights<f32>,
    config: &TrainConfig,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    if config.stage != Stage::Finetune {
        return Err(TrainError::Config("run_finetune needs stage = finetune".into()));
    }
    for p in [&probes.content, &probes.emotion_train] {
        p.require_frozen()?;
    }
    let init_hash = io::checkpoint_hash(pretrain_ckpt)?;
    let state = if opts.resume {
        load_state(&out_dir.join("checkpoint"))?.0
    } else {
        let (pre, meta) = load_model(pretrain_ckpt, Snapshot::Last)?;
        let mut mc = meta.model_config.clone();
        if config.ablation.disable_emotion_conditioning {
            mc.emotion_conditioning = false;
        }
        let model = FastSpeech2::from_params(mc, pre.params().clone())?;
        let mut s = TrainState::new(model, config);
        s.rng = ChaCha8Rng::seed_from_u64(named_seed(config.seed, "trainer.finetune.batches"));
        // Report progress against the untrained model, not the pre-trained one.
        s.initial_dev_l_mel = meta.initial_dev_l_mel;
        s
    };
    run_loop(data, state, Some(probes), config, out_dir, Some(init_hash), opts)
}

/// Convenience for tests and the CLI: a dev breakdown of plain arrays.
pub fn teacher_forced_mel(model: &FastSpeech2<f32>, ex: &Example) -> Result<Array2<f32>> {
    let mut g = Graph::new(None);
    let pass = model.forward(&mut g, &ex.phonemes, ex.speaker, ex.emotion, Some(&teacher(ex)), &mut None)?;
    Ok(g.value(pass.mel).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_ramps_linearly() {
        let s = Schedule {
            start: 0.0,
            end: 1.0,
            ramp_steps: 500,
        };
        assert_eq!(s.value(0), 0.0);
        assert_eq!(s.value(250), 0.5);
        assert_eq!(s.value(500), 1.0);
        assert_eq!(s.value(10_000), 1.0);
        assert_eq!(Schedule::constant(0.5).value(0), 0.5);
    }

    #[test]
    fn finetune_defaults_reach_end_values() {
        let c = TrainConfig::finetune_desk();
        assert_eq!(c.beta_ipc.ramp_steps, 500);
        let w = c.weights_at(c.steps);
        assert_eq!((w.beta_ipc, w.beta_cpc), (1.0, 0.5));
        assert_eq!(c.lr, 5e-5);
        assert_eq!(TrainConfig::pretrain_desk().weights_at(0).beta_ipc, 0.0);
    }

    #[test]
    fn tags_follow_flags() {
        let mut c = TrainConfig::finetune_desk();
        assert_eq!(c.tag(), "CPM");
        c.ablation.disable_cpc = true;
        assert_eq!(c.tag(), "w/o CPC");
        c.ablation.disable_ipc = true;
        assert_eq!(c.tag(), "Baseline B");
        c.ablation.disable_cpc = false;
        assert_eq!(c.tag(), "w/o IPC");
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = TrainConfig::finetune_desk();
        c.grad_clip_norm = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::finetune_desk();
        c.beta_cpc = Schedule {
            start: 1.0,
            end: 0.5,
            ramp_steps: 10,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn other_emotion_is_never_the_same() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 5];
        for i in 0..10_000 {
            let e = i % 5;
            let d = sample_other_emotion(&mut rng, e, 5);
            assert_ne!(d, e);
            counts[d] += 1;
        }
        assert!(counts.iter().all(|&c| c > 1800), "{counts:?}");
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..7 {
            rng.random::<u32>();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        for _ in 0..20 {
            assert_eq!(rng.random::<u64>(), back.random::<u64>());
        }
    }
}
