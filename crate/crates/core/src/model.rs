//! Emotion-augmented FastSpeech2 backbone.
//!
//! Encoder and decoder are stacks of feed-forward transformer blocks
//! (multi-head self-attention followed by a convolutional feed-forward
//! sublayer, post-norm residuals). Speaker and emotion identities enter as
//! additive conditioning: one shared emotion table is read through a separate
//! linear projection at every site (encoder input, each variance predictor,
//! decoder input), so a single site can be switched off without touching the
//! others.
//!
//! Pitch and energy are per-phoneme quantities. Pitch is modelled internally
//! on the normalised scale `(hz - 120) / 130` used by the synthetic world;
//! [`VarianceOutputs`] reports it in Hz.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::Real;

pub const PITCH_FLOOR_HZ: f64 = 120.0;
pub const PITCH_SPAN_HZ: f64 = 130.0;

pub fn pitch_to_norm(hz: f64) -> f64 {
    (hz - PITCH_FLOOR_HZ) / PITCH_SPAN_HZ
}

pub fn norm_to_pitch(norm: f64) -> f64 {
    norm * PITCH_SPAN_HZ + PITCH_FLOOR_HZ
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("phoneme id {id} out of range (vocab {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("speaker id {id} out of range ({n} speakers)")]
    SpeakerOutOfRange { id: usize, n: usize },
    #[error("emotion id {id} out of range ({n} emotions)")]
    EmotionOutOfRange { id: usize, n: usize },
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("length regulation produced no frames (all durations zero)")]
    EmptyExpansion,
    #[error("cached base pass does not belong to this graph")]
    MissingCache,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter {0} missing from weights")]
    MissingParameter(String),
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub n_emotions: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub speaker_emb_dim: usize,
    pub emotion_emb_dim: usize,
    pub predictor_layers: usize,
    pub predictor_hidden: usize,
    pub mel_channels: usize,
    pub dropout: f64,
    pub max_duration_cap: usize,
    /// Decoder-input emotion site. Off reproduces the "no emotion in the
    /// decoder" architecture; the indirect-path loss is then identically zero.
    pub decoder_emotion: bool,
    /// Master switch for every emotion site.
    pub emotion_conditioning: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale configuration used for the reference experiments.
    pub fn desk() -> Self {
        Self {
            vocab_size: 32,
            n_speakers: 4,
            n_emotions: 5,
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            hidden_dim: 64,
            n_heads: 2,
            ffn_dim: 256,
            conv_kernel: 3,
            speaker_emb_dim: 16,
            emotion_emb_dim: 16,
            predictor_layers: 2,
            predictor_hidden: 64,
            mel_channels: 20,
            dropout: 0.0,
            max_duration_cap: 50,
            decoder_emotion: true,
            emotion_conditioning: true,
            init_seed: 0,
        }
    }

    /// The published full-size architecture.
    pub fn full_scale() -> Self {
        Self {
            n_enc_blocks: 4,
            n_dec_blocks: 4,
            hidden_dim: 256,
            ffn_dim: 1024,
            speaker_emb_dim: 128,
            emotion_emb_dim: 64,
            predictor_hidden: 256,
            ..Self::desk()
        }
    }

    /// Smallest configuration exercising every parameter group.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 6,
            n_speakers: 2,
            n_emotions: 5,
            n_enc_blocks: 1,
            n_dec_blocks: 1,
            hidden_dim: 8,
            n_heads: 1,
            ffn_dim: 12,
            conv_kernel: 3,
            speaker_emb_dim: 3,
            emotion_emb_dim: 3,
            predictor_layers: 2,
            predictor_hidden: 6,
            mel_channels: 4,
            dropout: 0.0,
            max_duration_cap: 50,
            decoder_emotion: true,
            emotion_conditioning: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("n_speakers", self.n_speakers),
            ("n_emotions", self.n_emotions),
            ("n_enc_blocks", self.n_enc_blocks),
            ("n_dec_blocks", self.n_dec_blocks),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("conv_kernel", self.conv_kernel),
            ("speaker_emb_dim", self.speaker_emb_dim),
            ("emotion_emb_dim", self.emotion_emb_dim),
            ("predictor_layers", self.predictor_layers),
            ("predictor_hidden", self.predictor_hidden),
            ("mel_channels", self.mel_channels),
            ("max_duration_cap", self.max_duration_cap),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(ModelError::InvalidConfig("conv_kernel must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct FftBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    attn_norm: Norm,
    conv1: Linear,
    conv2: Linear,
    ffn_norm: Norm,
}

#[derive(Clone, Debug)]
struct Predictor {
    emotion_proj: Option<ParamId>,
    convs: Vec<(Linear, Norm)>,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    phoneme_emb: ParamId,
    speaker_emb: ParamId,
    emotion_emb: Option<ParamId>,
    enc_speaker_proj: ParamId,
    enc_emotion_proj: Option<ParamId>,
    encoder: Vec<FftBlock>,
    duration: Predictor,
    pitch: Predictor,
    energy: Predictor,
    pitch_proj: Linear,
    energy_proj: Linear,
    dec_speaker_proj: ParamId,
    dec_emotion_proj: Option<ParamId>,
    decoder: Vec<FftBlock>,
    mel_out: Linear,
}

struct Init<'a> {
    store: &'a mut ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let v = Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut self.rng));
        self.store.add(name, v)
    }

    fn filled(&mut self, name: String, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Array2::from_elem((rows, cols), value))
    }

    /// Glorot-style weight with zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: self.normal(format!("{name}.w"), fan_in, fan_out, std),
            b: self.filled(format!("{name}.b"), 1, fan_out, 0.0),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.filled(format!("{name}.gain"), 1, dim, 1.0),
            bias: self.filled(format!("{name}.bias"), 1, dim, 0.0),
        }
    }

    fn fft(&mut self, name: &str, cfg: &ModelConfig) -> FftBlock {
        let h = cfg.hidden_dim;
        FftBlock {
            q: self.linear(&format!("{name}.attn.q"), h, h),
            k: self.linear(&format!("{name}.attn.k"), h, h),
            v: self.linear(&format!("{name}.attn.v"), h, h),
            o: self.linear(&format!("{name}.attn.o"), h, h),
            attn_norm: self.norm(&format!("{name}.attn_norm"), h),
            conv1: self.linear(&format!("{name}.ffn.conv1"), cfg.conv_kernel * h, cfg.ffn_dim),
            conv2: self.linear(&format!("{name}.ffn.conv2"), cfg.ffn_dim, h),
            ffn_norm: self.norm(&format!("{name}.ffn_norm"), h),
        }
    }

    fn predictor(&mut self, name: &str, cfg: &ModelConfig, out_bias: f64) -> Predictor {
        let emotion_proj = cfg.emotion_conditioning.then(|| {
            self.normal(
                format!("{name}.emotion_proj"),
                cfg.emotion_emb_dim,
                cfg.hidden_dim,
                (1.0 / cfg.emotion_emb_dim as f64).sqrt(),
            )
        });
        let mut convs = Vec::with_capacity(cfg.predictor_layers);
        let mut fan_in = cfg.hidden_dim;
        for l in 0..cfg.predictor_layers {
            let conv = self.linear(
                &format!("{name}.conv{l}"),
                cfg.conv_kernel * fan_in,
                cfg.predictor_hidden,
            );
            let norm = self.norm(&format!("{name}.norm{l}"), cfg.predictor_hidden);
            convs.push((conv, norm));
            fan_in = cfg.predictor_hidden;
        }
        let out = self.linear(&format!("{name}.out"), cfg.predictor_hidden, 1);
        self.store.get_mut(out.b).fill(out_bias);
        Predictor {
            emotion_proj,
            convs,
            out,
        }
    }
}

impl Layout {
    fn build(cfg: &ModelConfig, store: &mut ParamStore<f64>, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut init = Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let h = cfg.hidden_dim;
        let cond = cfg.emotion_conditioning;
        let phoneme_emb = init.normal("phoneme_emb".into(), cfg.vocab_size, h, 1.0);
        let speaker_emb = init.normal("speaker_emb".into(), cfg.n_speakers, cfg.speaker_emb_dim, 1.0);
        let emotion_emb =
            cond.then(|| init.normal("emotion_emb".into(), cfg.n_emotions, cfg.emotion_emb_dim, 1.0));
        let spk_std = (1.0 / cfg.speaker_emb_dim as f64).sqrt();
        let emo_std = (1.0 / cfg.emotion_emb_dim as f64).sqrt();
        let enc_speaker_proj = init.normal("encoder.speaker_proj".into(), cfg.speaker_emb_dim, h, spk_std);
        let enc_emotion_proj =
            cond.then(|| init.normal("encoder.emotion_proj".into(), cfg.emotion_emb_dim, h, emo_std));
        let encoder = (0..cfg.n_enc_blocks)
            .map(|i| init.fft(&format!("encoder.block{i}"), cfg))
            .collect();
        // Output biases start near typical targets: log(4 frames), mid-range
        // normalised pitch, mid-range energy.
        let duration = init.predictor("duration", cfg, 4f64.ln());
        let pitch = init.predictor("pitch", cfg, 0.5);
        let energy = init.predictor("energy", cfg, 0.6);
        let pitch_proj = init.linear("pitch_proj", 1, h);
        let energy_proj = init.linear("energy_proj", 1, h);
        let dec_speaker_proj = init.normal("decoder.speaker_proj".into(), cfg.speaker_emb_dim, h, spk_std);
        let dec_emotion_proj = (cond && cfg.decoder_emotion)
            .then(|| init.normal("decoder.emotion_proj".into(), cfg.emotion_emb_dim, h, emo_std));
        let decoder = (0..cfg.n_dec_blocks)
            .map(|i| init.fft(&format!("decoder.block{i}"), cfg))
            .collect();
        let mel_out = init.linear("mel_out", h, cfg.mel_channels);
        Self {
            phoneme_emb,
            speaker_emb,
            emotion_emb,
            enc_speaker_proj,
            enc_emotion_proj,
            encoder,
            duration,
            pitch,
            energy,
            pitch_proj,
            energy_proj,
            dec_speaker_proj,
            dec_emotion_proj,
            decoder,
            mel_out,
        }
    }
}

/// Per-phoneme outputs of the variance adaptor.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceOutputs {
    pub log_durations: Vec<f64>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl VarianceOutputs {
    /// `max(1, round(exp(log_d)))`, capped.
    pub fn rounded_durations(&self, cap: usize) -> Vec<usize> {
        self.log_durations
            .iter()
            .map(|&l| inference_duration(l, cap))
            .collect()
    }
}

pub fn inference_duration(log_d: f64, cap: usize) -> usize {
    let d = log_d.exp().round();
    if d.is_nan() {
        return 1;
    }
    (d.max(1.0) as usize).min(cap.max(1))
}

/// Ground-truth prosody used for teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherProsody {
    pub durations: Vec<usize>,
    pub pitch_hz: Vec<f64>,
    pub energy: Vec<f64>,
}

/// Tape handles for one full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub mel: Var,
    pub log_durations: Var,
    /// Normalised pitch, `[n_phonemes, 1]`.
    pub pitch: Var,
    pub energy: Var,
    pub durations: Vec<usize>,
    pub speaker: usize,
    pub emotion: usize,
    pub cache: DecoderCache,
}

/// Decoder inputs of a base pass, reused by the indirect-path pass.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    pub expanded: Var,
    pub pitch_frames: Var,
    pub energy_frames: Var,
    graph_len: usize,
}

/// How the emotion row enters the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DecoderEmotion {
    Tracked(usize),
    /// Embedding row detached from the shared table.
    Detached(usize),
}

impl DecoderEmotion {
    fn id(self) -> usize {
        match self {
            Self::Tracked(e) | Self::Detached(e) => e,
        }
    }
}

/// Dropout source; `None` means evaluation mode.
pub type DropoutRng<'r> = Option<&'r mut ChaCha8Rng>;

/// Trainable weights plus the architecture they were built for.
#[derive(Clone, Debug)]
pub struct FastSpeech2<F: Real> {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore<F>,
}

/// Indices `i` repeated `durations[i]` times, in order.
pub fn length_regulate_indices(durations: &[usize]) -> Result<Vec<usize>> {
    let total: usize = durations.iter().sum();
    if total == 0 {
        return Err(ModelError::EmptyExpansion);
    }
    let mut idx = Vec::with_capacity(total);
    for (i, &d) in durations.iter().enumerate() {
        idx.extend(std::iter::repeat_n(i, d));
    }
    Ok(idx)
}

/// Sinusoidal position signal, `[len, dim]`.
pub fn positional_encoding<F: Real>(len: usize, dim: usize) -> Array2<F> {
    let denom: Vec<f64> = (0..dim)
        .map(|j| 10000f64.powf(2.0 * (j / 2) as f64 / dim as f64))
        .collect();
    Array2::from_shape_fn((len, dim), |(t, j)| {
        let angle = t as f64 / denom[j];
        F::c(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<F: Real> FastSpeech2<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::<f64>::new();
        let layout = Layout::build(&config, &mut store, config.init_seed);
        Ok(Self {
            config,
            layout,
            params: store.cast(),
        })
    }

    /// Rebuilds the layout for `config` and takes values by name from `params`.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(config)?;
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let src = params
                .id(&name)
                .ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            let value = params.get(src);
            let expected = model.params.get(id).dim();
            if value.dim() != expected {
                return Err(ModelError::ShapeMismatch {
                    name,
                    got: value.dim(),
                    expected,
                });
            }
            model.params.get_mut(id).assign(value);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn cast<G: Real>(&self) -> FastSpeech2<G> {
        FastSpeech2 {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Parameter ids of the shared emotion table and every emotion projection.
    pub fn emotion_table(&self) -> Option<ParamId> {
        self.layout.emotion_emb
    }

    pub fn decoder_emotion_proj(&self) -> Option<ParamId> {
        self.layout.dec_emotion_proj
    }

    /// Zeroes one row of the shared emotion table (conditioning ablation).
    pub fn zero_emotion_row(&mut self, emotion: usize) {
        if let Some(id) = self.layout.emotion_emb {
            self.params.get_mut(id).row_mut(emotion).fill(F::zero());
        }
    }

    /// Zeroes the decoder-site emotion projection.
    pub fn zero_decoder_emotion(&mut self) {
        if let Some(id) = self.layout.dec_emotion_proj {
            self.params.get_mut(id).fill(F::zero());
        }
    }

    /// Coarse grouping of a parameter name: embeddings, encoder, each
    /// predictor, prosody projections, decoder, output.
    pub fn group_of(name: &str) -> &'static str {
        let head = name.split('.').next().unwrap_or(name);
        match head {
            "phoneme_emb" | "speaker_emb" | "emotion_emb" => "embeddings",
            "encoder" => "encoder",
            "duration" => "duration_predictor",
            "pitch" => "pitch_predictor",
            "energy" => "energy_predictor",
            "pitch_proj" | "energy_proj" => "prosody_projection",
            "decoder" => "decoder",
            "mel_out" => "mel_output",
            _ => "other",
        }
    }

    fn check_speaker(&self, s: usize) -> Result<()> {
        if s >= self.config.n_speakers {
            return Err(ModelError::SpeakerOutOfRange {
                id: s,
                n: self.config.n_speakers,
            });
        }
        Ok(())
    }

    fn check_emotion(&self, e: usize) -> Result<()> {
        if e >= self.config.n_emotions {
            return Err(ModelError::EmotionOutOfRange {
                id: e,
                n: self.config.n_emotions,
            });
        }
        Ok(())
    }

    fn w<'p>(&'p self, g: &mut Graph<'p, F>, id: ParamId) -> Var {
        g.weight(&self.params, id)
    }

    fn lin<'p>(&'p self, g: &mut Graph<'p, F>, x: Var, l: Linear) -> Var {
        let w = self.w(g, l.w);
        let b = self.w(g, l.b);
        g.linear(x, w, b)
    }

    fn norm<'p>(&'p self, g: &mut Graph<'p, F>, x: Var, n: Norm) -> Var {
        let gain = self.w(g, n.gain);
        let bias = self.w(g, n.bias);
        g.layer_norm(x, gain, bias)
    }

    fn conv<'p>(&'p self, g: &mut Graph<'p, F>, x: Var, l: Linear) -> Var {
        let u = g.unfold(x, self.config.conv_kernel);
        self.lin(g, u, l)
    }

    fn dropout<'p>(&'p self, g: &mut Graph<'p, F>, x: Var, rng: &mut DropoutRng<'_>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let (r, c) = g.shape(x);
                let keep = F::c(1.0 / (1.0 - p));
                let mask = Array2::from_shape_simple_fn((r, c), || {
                    if rng.random::<f64>() < p {
                        F::zero()
                    } else {
                        keep
                    }
                });
                let m = g.constant(mask);
                g.mul(x, m)
            }
            _ => x,
        }
    }

    /// Projected embedding row as a `[1, hidden]` node.
    fn conditioning<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        table: ParamId,
        row: usize,
        proj: ParamId,
        detach_row: bool,
    ) -> Var {
        let t = self.w(g, table);
        let mut r = g.gather_rows(t, vec![row]);
        if detach_row {
            r = g.detach(r);
        }
        let p = self.w(g, proj);
        g.matmul(r, p)
    }

    fn emotion_site<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        x: Var,
        proj: Option<ParamId>,
        emotion: usize,
        detach_row: bool,
    ) -> Var {
        match (self.layout.emotion_emb, proj) {
            (Some(table), Some(proj)) => {
                let c = self.conditioning(g, table, emotion, proj, detach_row);
                g.add_row(x, c)
            }
            _ => x,
        }
    }

    fn fft_block<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        x: Var,
        b: &FftBlock,
        rng: &mut DropoutRng<'_>,
    ) -> Var {
        let heads = self.config.n_heads;
        let dh = self.config.hidden_dim / heads;
        let q = self.lin(g, x, b.q);
        let k = self.lin(g, x, b.k);
        let v = self.lin(g, x, b.v);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let att = g.softmax_rows(scores);
            outs.push(g.matmul(att, vh));
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        let a = self.lin(g, cat, b.o);
        let a = self.dropout(g, a, rng);
        let x = g.add(x, a);
        let x = self.norm(g, x, b.attn_norm);

        let f = self.conv(g, x, b.conv1);
        let f = g.relu(f);
        let f = self.lin(g, f, b.conv2);
        let f = self.dropout(g, f, rng);
        let x = g.add(x, f);
        self.norm(g, x, b.ffn_norm)
    }

    fn add_positions<'p>(&'p self, g: &mut Graph<'p, F>, x: Var) -> Var {
        let (t, h) = g.shape(x);
        let pe = g.constant(positional_encoding(t, h));
        g.add(x, pe)
    }

    /// Phoneme encoder: token embedding plus speaker and emotion conditioning,
    /// then the FFT stack. One `hidden_dim` row per phoneme.
    pub fn encode<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        phonemes: &[usize],
        speaker: usize,
        emotion: usize,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        if phonemes.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if let Some(&id) = phonemes.iter().find(|&&p| p >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        self.check_speaker(speaker)?;
        self.check_emotion(emotion)?;
        let l = &self.layout;
        let table = self.w(g, l.phoneme_emb);
        let mut x = g.gather_rows(table, phonemes.to_vec());
        let spk = self.conditioning(g, l.speaker_emb, speaker, l.enc_speaker_proj, false);
        x = g.add_row(x, spk);
        x = self.emotion_site(g, x, l.enc_emotion_proj, emotion, false);
        x = self.add_positions(g, x);
        for block in &l.encoder {
            x = self.fft_block(g, x, block, rng);
        }
        Ok(x)
    }

    fn predictor<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        h: Var,
        p: &Predictor,
        emotion: usize,
        rng: &mut DropoutRng<'_>,
    ) -> Var {
        let mut x = self.emotion_site(g, h, p.emotion_proj, emotion, false);
        for &(conv, norm) in &p.convs {
            x = self.conv(g, x, conv);
            x = g.relu(x);
            x = self.norm(g, x, norm);
            x = self.dropout(g, x, rng);
        }
        self.lin(g, x, p.out)
    }

    /// Duration (log domain), normalised pitch and energy, each `[n, 1]`.
    pub fn predict_variances<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        h: Var,
        emotion: usize,
        rng: &mut DropoutRng<'_>,
    ) -> Result<(Var, Var, Var)> {
        if g.shape(h).0 == 0 {
            return Err(ModelError::EmptyInput);
        }
        self.check_emotion(emotion)?;
        let l = &self.layout;
        let d = self.predictor(g, h, &l.duration, emotion, rng);
        let p = self.predictor(g, h, &l.pitch, emotion, rng);
        let e = self.predictor(g, h, &l.energy, emotion, rng);
        Ok((d, p, e))
    }

    /// Repeats row `i` of `h` `durations[i]` times.
    pub fn length_regulate<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        h: Var,
        durations: &[usize],
    ) -> Result<Var> {
        let n = g.shape(h).0;
        if durations.len() != n {
            return Err(ModelError::LengthMismatch {
                what: "durations",
                got: durations.len(),
                expected: n,
            });
        }
        let idx = length_regulate_indices(durations)?;
        Ok(g.gather_rows(h, idx))
    }

    fn decode_inner<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        expanded: Var,
        pitch_frames: Var,
        energy_frames: Var,
        speaker: usize,
        emotion: DecoderEmotion,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let t = g.shape(expanded).0;
        for (what, v) in [("pitch_frames", pitch_frames), ("energy_frames", energy_frames)] {
            if g.shape(v) != (t, 1) {
                return Err(ModelError::LengthMismatch {
                    what,
                    got: g.shape(v).0,
                    expected: t,
                });
            }
        }
        self.check_speaker(speaker)?;
        self.check_emotion(emotion.id())?;
        let l = &self.layout;
        let pp = self.lin(g, pitch_frames, l.pitch_proj);
        let ep = self.lin(g, energy_frames, l.energy_proj);
        let mut x = g.add(expanded, pp);
        x = g.add(x, ep);
        let spk = self.conditioning(g, l.speaker_emb, speaker, l.dec_speaker_proj, false);
        x = g.add_row(x, spk);
        if self.config.decoder_emotion {
            let detach = matches!(emotion, DecoderEmotion::Detached(_));
            x = self.emotion_site(g, x, l.dec_emotion_proj, emotion.id(), detach);
        }
        x = self.add_positions(g, x);
        for block in &l.decoder {
            x = self.fft_block(g, x, block, rng);
        }
        Ok(self.lin(g, x, l.mel_out))
    }

    /// Mel decoder over frame-level inputs. `pitch_frames` is normalised pitch.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        expanded: Var,
        pitch_frames: Var,
        energy_frames: Var,
        speaker: usize,
        decoder_emotion: usize,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        self.decode_inner(
            g,
            expanded,
            pitch_frames,
            energy_frames,
            speaker,
            DecoderEmotion::Tracked(decoder_emotion),
            rng,
        )
    }

    /// Full pass. With `teacher` the length regulator and decoder consume the
    /// ground-truth prosody; without it they consume the predictions.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        phonemes: &[usize],
        speaker: usize,
        emotion: usize,
        teacher: Option<&TeacherProsody>,
        rng: &mut DropoutRng<'_>,
    ) -> Result<ForwardPass> {
        let h = self.encode(g, phonemes, speaker, emotion, rng)?;
        let (log_d, pitch, energy) = self.predict_variances(g, h, emotion, rng)?;
        let n = phonemes.len();
        let (durations, pitch_src, energy_src) = match teacher {
            Some(t) => {
                for (what, len) in [
                    ("teacher durations", t.durations.len()),
                    ("teacher pitch", t.pitch_hz.len()),
                    ("teacher energy", t.energy.len()),
                ] {
                    if len != n {
                        return Err(ModelError::LengthMismatch {
                            what,
                            got: len,
                            expected: n,
                        });
                    }
                }
                let p = Array2::from_shape_fn((n, 1), |(i, _)| F::c(pitch_to_norm(t.pitch_hz[i])));
                let e = Array2::from_shape_fn((n, 1), |(i, _)| F::c(t.energy[i]));
                (t.durations.clone(), g.constant(p), g.constant(e))
            }
            None => {
                let durations = g
                    .value(log_d)
                    .iter()
                    .map(|&l| inference_duration(l.f64(), self.config.max_duration_cap))
                    .collect();
                (durations, pitch, energy)
            }
        };
        let idx = length_regulate_indices(&durations)?;
        let expanded = g.gather_rows(h, idx.clone());
        let pitch_frames = g.gather_rows(pitch_src, idx.clone());
        let energy_frames = g.gather_rows(energy_src, idx);
        let mel = self.decode(g, expanded, pitch_frames, energy_frames, speaker, emotion, rng)?;
        Ok(ForwardPass {
            mel,
            log_durations: log_d,
            pitch,
            energy,
            durations,
            speaker,
            emotion,
            cache: DecoderCache {
                expanded,
                pitch_frames,
                energy_frames,
                graph_len: g.len(),
            },
        })
    }

    /// Re-runs only the decoder on the cached base-pass inputs with the
    /// decoder emotion set to `e_prime`. Cached inputs and the emotion row are
    /// detached, so gradients reach decoder-side parameters only.
    pub fn forward_ipc<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        base: &ForwardPass,
        e_prime: usize,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let c = &base.cache;
        if c.graph_len > g.len() {
            return Err(ModelError::MissingCache);
        }
        let expanded = g.detach(c.expanded);
        let pitch = g.detach(c.pitch_frames);
        let energy = g.detach(c.energy_frames);
        self.decode_inner(
            g,
            expanded,
            pitch,
            energy,
            base.speaker,
            DecoderEmotion::Detached(e_prime),
            rng,
        )
    }

    /// Fresh inference-mode pass under `e_prime`, driven entirely by the
    /// model's own prosody predictions.
    pub fn forward_cpc<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        phonemes: &[usize],
        speaker: usize,
        e_prime: usize,
        rng: &mut DropoutRng<'_>,
    ) -> Result<ForwardPass> {
        self.forward(g, phonemes, speaker, e_prime, None, rng)
    }

    /// Evaluation-mode synthesis returning plain arrays.
    pub fn synthesize(&self, phonemes: &[usize], speaker: usize, emotion: usize) -> Result<Synthesis<F>> {
        let mut g = Graph::new(None);
        let pass = self.forward(&mut g, phonemes, speaker, emotion, None, &mut None)?;
        Ok(Synthesis::from_pass(&g, &pass))
    }

    /// Decodes explicit per-phoneme prosody (durations, Hz, energy) with
    /// an arbitrary encoder emotion and decoder emotion.
    pub fn render_with_prosody(
        &self,
        phonemes: &[usize],
        speaker: usize,
        encoder_emotion: usize,
        decoder_emotion: usize,
        prosody: &TeacherProsody,
    ) -> Result<Array2<F>> {
        let mut g = Graph::new(None);
        let h = self.encode(&mut g, phonemes, speaker, encoder_emotion, &mut None)?;
        let n = phonemes.len();
        if prosody.durations.len() != n || prosody.pitch_hz.len() != n || prosody.energy.len() != n {
            return Err(ModelError::LengthMismatch {
                what: "prosody",
                got: prosody.durations.len(),
                expected: n,
            });
        }
        let idx = length_regulate_indices(&prosody.durations)?;
        let expanded = g.gather_rows(h, idx.clone());
        let p = g.constant(Array2::from_shape_fn((n, 1), |(i, _)| {
            F::c(pitch_to_norm(prosody.pitch_hz[i]))
        }));
        let e = g.constant(Array2::from_shape_fn((n, 1), |(i, _)| F::c(prosody.energy[i])));
        let pf = g.gather_rows(p, idx.clone());
        let ef = g.gather_rows(e, idx);
        let mel = self.decode(&mut g, expanded, pf, ef, speaker, decoder_emotion, &mut None)?;
        Ok(g.value(mel).to_owned())
    }

    /// Decoder-emotion swap with the base prosody held fixed (evaluation mode).
    pub fn synthesize_direct(
        &self,
        phonemes: &[usize],
        speaker: usize,
        emotion: usize,
        e_prime: usize,
    ) -> Result<(Synthesis<F>, Array2<F>)> {
        self.check_emotion(e_prime)?;
        let mut g = Graph::new(None);
        let pass = self.forward(&mut g, phonemes, speaker, emotion, None, &mut None)?;
        let direct = self.forward_ipc(&mut g, &pass, e_prime, &mut None)?;
        Ok((Synthesis::from_pass(&g, &pass), g.value(direct).to_owned()))
    }
}

/// Plain-array result of an evaluation-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis<F: Real = f32> {
    pub mel: Array2<F>,
    pub variances: VarianceOutputs,
    pub durations: Vec<usize>,
}

impl<F: Real> Synthesis<F> {
    fn from_pass(g: &Graph<'_, F>, pass: &ForwardPass) -> Self {
        let col = |v: Var| -> Array1<f64> { g.value(v).column(0).mapv(|x| x.f64()) };
        Self {
            mel: g.value(pass.mel).to_owned(),
            variances: VarianceOutputs {
                log_durations: col(pass.log_durations).to_vec(),
                pitch: col(pass.pitch).iter().map(|&p| norm_to_pitch(p)).collect(),
                energy: col(pass.energy).to_vec(),
            },
            durations: pass.durations.clone(),
        }
    }

    /// Per-phoneme predicted pitch repeated over frames.
    pub fn pitch_frames(&self) -> Vec<f64> {
        self.durations
            .iter()
            .zip(&self.variances.pitch)
            .flat_map(|(&d, &p)| std::iter::repeat_n(p, d))
            .collect()
    }

    pub fn teacher(&self) -> TeacherProsody {
        TeacherProsody {
            durations: self.durations.clone(),
            pitch_hz: self.variances.pitch.clone(),
            energy: self.variances.energy.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> FastSpeech2<f64> {
        FastSpeech2::new(ModelConfig {
            init_seed: 3,
            ..ModelConfig::tiny()
        })
        .unwrap()
    }

    #[test]
    fn length_regulation_patterns() {
        assert_eq!(length_regulate_indices(&[2, 1, 3]).unwrap(), vec![0, 0, 1, 2, 2, 2]);
        assert_eq!(length_regulate_indices(&[1, 1, 1]).unwrap(), vec![0, 1, 2]);
        assert_eq!(length_regulate_indices(&[0, 4]).unwrap(), vec![1, 1, 1, 1]);
        assert_eq!(length_regulate_indices(&[0, 0]), Err(ModelError::EmptyExpansion));
    }

    #[test]
    fn length_regulate_rejects_mismatched_durations() {
        let m = model();
        let mut g = Graph::new(None);
        let h = m.encode(&mut g, &[1, 2, 3], 0, 0, &mut None).unwrap();
        let err = m.length_regulate(&mut g, h, &[1, 2]).unwrap_err();
        assert!(matches!(err, ModelError::LengthMismatch { .. }));
        let out = m.length_regulate(&mut g, h, &[2, 1, 3]).unwrap();
        assert_eq!(g.shape(out).0, 6);
        assert_eq!(g.value(out).row(1), g.value(h).row(0));
        assert_eq!(g.value(out).row(5), g.value(h).row(2));
    }

    #[test]
    fn encoder_length_and_id_checks() {
        let m = model();
        let mut g = Graph::new(None);
        let h = m.encode(&mut g, &[0, 1, 2, 5], 1, 4, &mut None).unwrap();
        assert_eq!(g.shape(h), (4, 8));
        assert!(matches!(
            m.encode(&mut g, &[6], 0, 0, &mut None),
            Err(ModelError::TokenOutOfRange { id: 6, .. })
        ));
        assert!(matches!(
            m.encode(&mut g, &[0], 2, 0, &mut None),
            Err(ModelError::SpeakerOutOfRange { .. })
        ));
        assert!(matches!(
            m.encode(&mut g, &[0], 0, 5, &mut None),
            Err(ModelError::EmotionOutOfRange { .. })
        ));
    }

    #[test]
    fn emotion_changes_encoding_unless_row_zeroed() {
        let mut m = model();
        let enc = |m: &FastSpeech2<f64>, e| {
            let mut g = Graph::new(None);
            let h = m.encode(&mut g, &[1, 3, 2], 0, e, &mut None).unwrap();
            g.value(h).to_owned()
        };
        assert_ne!(enc(&m, 0), enc(&m, 2));
        m.zero_emotion_row(0);
        m.zero_emotion_row(2);
        assert_eq!(enc(&m, 0), enc(&m, 2));
    }

    #[test]
    fn zero_predictors_output_their_biases() {
        let mut m = model();
        let ids: Vec<_> = m.params().ids().collect();
        for id in ids {
            let name = m.params().name(id).to_string();
            let head = name.split('.').next().unwrap();
            if ["duration", "pitch", "energy"].contains(&head) && !name.ends_with("out.b") {
                m.params_mut().get_mut(id).fill(0.0);
            }
        }
        let mut g = Graph::new(None);
        let h = m.encode(&mut g, &[1, 2, 3, 4], 0, 1, &mut None).unwrap();
        let (d, p, e) = m.predict_variances(&mut g, h, 1, &mut None).unwrap();
        for v in g.value(d).iter() {
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }
        assert!(g.value(p).iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(g.value(e).iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn decoder_emotion_site_is_live_until_zeroed() {
        let mut m = model();
        let t = TeacherProsody {
            durations: vec![2, 1, 3],
            pitch_hz: vec![150.0, 180.0, 200.0],
            energy: vec![0.4, 0.5, 0.6],
        };
        let a = m.render_with_prosody(&[1, 2, 3], 0, 0, 0, &t).unwrap();
        let b = m.render_with_prosody(&[1, 2, 3], 0, 0, 3, &t).unwrap();
        assert_eq!(a.nrows(), 6);
        assert!((&a - &b).iter().map(|x| x.abs()).sum::<f64>() > 0.0);
        m.zero_decoder_emotion();
        let a = m.render_with_prosody(&[1, 2, 3], 0, 0, 0, &t).unwrap();
        let b = m.render_with_prosody(&[1, 2, 3], 0, 0, 3, &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_rejects_length_mismatch() {
        let m = model();
        let mut g = Graph::new(None);
        let h = m.encode(&mut g, &[1, 2], 0, 0, &mut None).unwrap();
        let x = m.length_regulate(&mut g, h, &[2, 2]).unwrap();
        let p = g.constant(Array2::zeros((3, 1)));
        let e = g.constant(Array2::zeros((4, 1)));
        assert!(matches!(
            m.decode(&mut g, x, p, e, 0, 0, &mut None),
            Err(ModelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn teacher_forcing_with_predictions_matches_inference() {
        let m = model();
        let syn = m.synthesize(&[0, 4, 2, 2, 5], 1, 3).unwrap();
        assert_eq!(syn.mel.nrows(), syn.durations.iter().sum::<usize>());
        let mut g = Graph::new(None);
        let teacher = syn.teacher();
        let pass = m.forward(&mut g, &[0, 4, 2, 2, 5], 1, 3, Some(&teacher), &mut None).unwrap();
        // Hz round trip through the normalised scale is exact to rounding.
        let diff = (&g.value(pass.mel) - &syn.mel).iter().fold(0f64, |a, b| a.max(b.abs()));
        assert!(diff < 1e-12, "max diff {diff}");
        assert_eq!(m.synthesize(&[0, 4, 2, 2, 5], 1, 3).unwrap(), syn);
    }

    #[test]
    fn ipc_pass_identity_and_swap() {
        let m = model();
        let (base, same) = m.synthesize_direct(&[1, 2, 3], 0, 2, 2).unwrap();
        assert_eq!(base.mel, same);
        let (base, other) = m.synthesize_direct(&[1, 2, 3], 0, 2, 4).unwrap();
        assert!((&base.mel - &other).iter().map(|x| x.abs()).sum::<f64>() > 0.0);
        let mut z = m.clone();
        z.zero_decoder_emotion();
        let (base, other) = z.synthesize_direct(&[1, 2, 3], 0, 2, 4).unwrap();
        assert_eq!(base.mel, other);
    }

    #[test]
    fn ipc_gradient_reaches_decoder_only() {
        let m = model();
        let mut g = Graph::new(Some(m.params()));
        let pass = m.forward(&mut g, &[1, 2, 3], 0, 1, None, &mut None).unwrap();
        let direct = m.forward_ipc(&mut g, &pass, 3, &mut None).unwrap();
        let base = g.detach(pass.mel);
        let loss = g.l1(direct, base);
        let grads = g.backward(loss);
        for id in m.params().ids() {
            let name = m.params().name(id);
            let group = FastSpeech2::<f64>::group_of(name);
            let touched = grads[id.0].as_ref().is_some_and(|g| g.iter().any(|&x| x != 0.0));
            if ["encoder", "duration_predictor", "pitch_predictor", "energy_predictor"].contains(&group)
                || name == "emotion_emb"
                || name == "phoneme_emb"
            {
                assert!(!touched, "{name} received IPC gradient");
            }
        }
        let dec = m.decoder_emotion_proj().unwrap();
        assert!(grads[dec.0].is_some());
    }

    #[test]
    fn cpc_with_original_emotion_matches_inference() {
        let m = model();
        let syn = m.synthesize(&[3, 1, 0], 1, 2).unwrap();
        let mut g = Graph::new(None);
        let pass = m.forward_cpc(&mut g, &[3, 1, 0], 1, 2, &mut None).unwrap();
        assert_eq!(g.value(pass.mel), syn.mel);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.ffn_dim = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::full_scale().validate().is_ok());
    }
}
