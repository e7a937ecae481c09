//! Ground-truth structural causal world.
//!
//! Text `X`, speaker `S` and emotion `E` cause prosody `M = (d, p, u)`;
//! prosody and text cause the mel frames `Y`. An optional direct edge
//! `E -> Y` of strength `kappa` exists only to validate mediation
//! estimators against a known direct effect. Rendering is linear in the
//! per-frame feature vector, so natural direct and indirect effects
//! decompose exactly.

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::pitch_to_norm;

pub const EMOTION_NAMES: [&str; 5] = ["neutral", "amused", "angry", "disgusted", "sleepy"];
pub const NEUTRAL: usize = 0;
pub const AMUSED: usize = 1;
pub const ANGRY: usize = 2;
pub const DISGUSTED: usize = 3;
pub const SLEEPY: usize = 4;

pub const ENERGY_MIN: f64 = 0.05;
pub const ENERGY_MAX: f64 = 1.5;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("unknown emotion id {0}")]
    UnknownEmotion(usize),
    #[error("unknown speaker id {0}")]
    UnknownSpeaker(usize),
    #[error("unknown phoneme id {0}")]
    UnknownPhoneme(usize),
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid parameters: {0}")]
    Invalid(String),
}

pub type Result<T, E = ScmError> = std::result::Result<T, E>;

/// Per-emotion prosody modifiers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmotionModifier {
    pub duration_scale: f64,
    pub pitch_offset_hz: f64,
    pub pitch_range_scale: f64,
    pub energy_offset: f64,
}

impl EmotionModifier {
    pub const IDENTITY: Self = Self {
        duration_scale: 1.0,
        pitch_offset_hz: 0.0,
        pitch_range_scale: 1.0,
        energy_offset: 0.0,
    };

    /// Default table, indexed like [`EMOTION_NAMES`].
    pub fn defaults() -> Vec<Self> {
        let m = |d, p, r, u| Self {
            duration_scale: d,
            pitch_offset_hz: p,
            pitch_range_scale: r,
            energy_offset: u,
        };
        vec![
            Self::IDENTITY,
            m(1.0, 30.0, 1.4, 0.0),
            m(0.8, 20.0, 1.0, 0.2),
            m(1.1, -10.0, 0.9, 0.1),
            m(1.3, -30.0, 0.6, -0.15),
        ]
    }
}

/// Knobs from which a full [`ScmParams`] table set is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScmConfig {
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub mel_channels: usize,
    pub content_dim: usize,
    pub noise_std: f64,
    pub kappa: f64,
    pub master_seed: u64,
    pub emotion_probs: Vec<f64>,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            n_speakers: 4,
            mel_channels: 20,
            content_dim: 16,
            noise_std: 0.05,
            kappa: 0.0,
            master_seed: 0,
            emotion_probs: vec![0.2; 5],
            min_len: 5,
            max_len: 25,
        }
    }
}

/// Standard deviations of the exogenous prosody jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    /// Std of the log of the multiplicative duration factor.
    pub duration_log_std: f64,
    pub pitch_std_hz: f64,
    pub energy_std: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            duration_log_std: 0.05,
            pitch_std_hz: 3.0,
            energy_std: 0.02,
        }
    }
}

/// Every parameter of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmParams {
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub emotions: Vec<String>,
    pub emotion_probs: Vec<f64>,
    pub base_duration: Vec<u32>,
    pub base_pitch: Vec<f64>,
    pub base_energy: Vec<f64>,
    pub emo_mod: Vec<EmotionModifier>,
    pub speaker_rate: Vec<f64>,
    /// Token content codes, `vocab_size x content_dim`.
    pub content_codes: Vec<Vec<f64>>,
    /// Per-speaker `mel_channels x feature_dim` mixing matrices; the feature
    /// vector is `[content code, normalised pitch, energy, 1]`.
    pub speaker_timbre: Vec<Vec<Vec<f64>>>,
    /// Direct-path offsets `psi(e)`, `n_emotions x mel_channels`.
    pub emotion_offsets: Vec<Vec<f64>>,
    pub mel_channels: usize,
    pub noise_std: f64,
    pub kappa: f64,
    pub jitter: JitterConfig,
    pub min_len: usize,
    pub max_len: usize,
    pub master_seed: u64,
}

/// Stable 64-bit mix of a seed with a sequence of words.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    x
}

/// Seed derived from a component name.
pub fn named_seed(seed: u64, name: &str) -> u64 {
    let words: Vec<u64> = name.bytes().map(u64::from).collect();
    derive_seed(seed, &words)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gram-Schmidt orthonormal basis of `R^n` from Gaussian draws.
fn random_orthonormal(n: usize, rng: &mut ChaCha8Rng) -> Vec<Array1<f64>> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal));
        for b in &basis {
            let d = v.dot(b);
            v.scaled_add(-d, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.push(v / norm);
        }
    }
    basis
}

impl ScmParams {
    /// Draws every table from `config.master_seed`.
    pub fn generate(config: &ScmConfig) -> Result<Self> {
        let n_emotions = EMOTION_NAMES.len();
        if config.emotion_probs.len() != n_emotions {
            return Err(ScmError::Invalid(format!(
                "emotion_probs needs {n_emotions} entries"
            )));
        }
        if config.emotion_probs.iter().any(|&p| p < 0.0) || config.emotion_probs.iter().sum::<f64>() <= 0.0 {
            return Err(ScmError::Invalid("emotion_probs must be nonnegative with positive sum".into()));
        }
        if config.content_dim + 2 > config.mel_channels {
            return Err(ScmError::Invalid(format!(
                "content_dim {} + 2 prosody channels exceed mel_channels {}",
                config.content_dim, config.mel_channels
            )));
        }
        if config.min_len == 0 || config.min_len > config.max_len {
            return Err(ScmError::Invalid("need 1 <= min_len <= max_len".into()));
        }
        if config.vocab_size == 0 || config.n_speakers == 0 {
            return Err(ScmError::Invalid("vocab_size and n_speakers must be >= 1".into()));
        }
        let seed = config.master_seed;
        let mut rng = ChaCha8Rng::seed_from_u64(named_seed(seed, "scm.tables"));
        let v = config.vocab_size;
        let base_duration = (0..v).map(|_| rng.random_range(2..=6)).collect();
        let base_pitch = (0..v).map(|_| rng.random_range(120.0..=250.0)).collect();
        let base_energy = (0..v).map(|_| rng.random_range(0.3..=0.9)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(named_seed(seed, "scm.speakers"));
        let speaker_rate = (0..config.n_speakers)
            .map(|_| rng.random_range(0.95..=1.05))
            .collect();

        // Content lives in a `content_dim` subspace of mel space; pitch and
        // energy each own one further orthogonal direction shared by all
        // speakers. Speakers differ by a mixing of the content subspace and a
        // constant offset.
        let mut rng = ChaCha8Rng::seed_from_u64(named_seed(seed, "scm.timbre"));
        let c = config.content_dim;
        let basis = random_orthonormal(config.mel_channels, &mut rng);
        let code_std = 1.0 / (c as f64).sqrt();
        let content_codes: Vec<Vec<f64>> = (0..v)
            .map(|_| (0..c).map(|_| rng.sample::<f64, _>(StandardNormal) * code_std).collect())
            .collect();
        let speaker_timbre = (0..config.n_speakers)
            .map(|_| {
                let mix = Array2::from_shape_fn((c, c), |(i, j)| {
                    let noise: f64 = rng.sample(StandardNormal);
                    f64::from(u8::from(i == j)) + 0.3 * noise * code_std
                });
                let offset: Vec<f64> = (0..config.mel_channels)
                    .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut rows = vec![vec![0.0; c + 3]; config.mel_channels];
                for (ch, row) in rows.iter_mut().enumerate() {
                    for j in 0..c {
                        row[j] = (0..c).map(|k| basis[k][ch] * mix[[k, j]]).sum();
                    }
                    row[c] = basis[c][ch];
                    row[c + 1] = basis[c + 1][ch];
                    row[c + 2] = offset[ch];
                }
                rows
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(named_seed(seed, "scm.direct"));
        let emotion_offsets = (0..n_emotions)
            .map(|_| {
                (0..config.mel_channels)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();

        Ok(Self {
            vocab_size: v,
            n_speakers: config.n_speakers,
            emotions: EMOTION_NAMES.iter().map(|s| s.to_string()).collect(),
            emotion_probs: config.emotion_probs.clone(),
            base_duration,
            base_pitch,
            base_energy,
            emo_mod: EmotionModifier::defaults(),
            speaker_rate,
            content_codes,
            speaker_timbre,
            emotion_offsets,
            mel_channels: config.mel_channels,
            noise_std: config.noise_std,
            kappa: config.kappa,
            jitter: JitterConfig::default(),
            min_len: config.min_len,
            max_len: config.max_len,
            master_seed: seed,
        })
    }

    pub fn n_emotions(&self) -> usize {
        self.emotions.len()
    }

    pub fn content_dim(&self) -> usize {
        self.content_codes.first().map_or(0, Vec::len)
    }

    pub fn feature_dim(&self) -> usize {
        self.content_dim() + 3
    }

    pub fn emotion_id(&self, name: &str) -> Option<usize> {
        self.emotions.iter().position(|e| e == name)
    }

    pub fn mean_base_pitch(&self) -> f64 {
        self.base_pitch.iter().sum::<f64>() / self.base_pitch.len() as f64
    }

    pub fn with_kappa(&self, kappa: f64) -> Self {
        Self {
            kappa,
            ..self.clone()
        }
    }

    fn check_ids(&self, phonemes: &[usize], speaker: usize, emotion: usize) -> Result<()> {
        if emotion >= self.n_emotions() {
            return Err(ScmError::UnknownEmotion(emotion));
        }
        if speaker >= self.n_speakers {
            return Err(ScmError::UnknownSpeaker(speaker));
        }
        if let Some(&p) = phonemes.iter().find(|&&p| p >= self.vocab_size) {
            return Err(ScmError::UnknownPhoneme(p));
        }
        Ok(())
    }
}

/// Per-phoneme mediator `M = (d, p, u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyTriple {
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl ProsodyTriple {
    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

/// Exogenous noise of one utterance. Per-frame mel noise is generated from
/// `frame_seed` keyed by (phoneme index, frame within phoneme), so it is
/// defined for any duration a counterfactual may assign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExoNoise {
    pub duration_factor: Vec<f64>,
    pub pitch_hz: Vec<f64>,
    pub energy: Vec<f64>,
    pub frame_seed: u64,
}

impl ExoNoise {
    pub fn zero(n: usize) -> Self {
        Self {
            duration_factor: vec![1.0; n],
            pitch_hz: vec![0.0; n],
            energy: vec![0.0; n],
            frame_seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.duration_factor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.duration_factor.is_empty()
    }

    /// Mel noise for frame `slot` of phoneme `phoneme`.
    pub fn frame_noise(&self, phoneme: usize, slot: usize, channels: usize, std: f64) -> Vec<f64> {
        if std == 0.0 {
            return vec![0.0; channels];
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.frame_seed, &[phoneme as u64, slot as u64]));
        (0..channels)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phonemes: Vec<usize>,
    pub speaker: usize,
    pub emotion: usize,
    pub prosody: ProsodyTriple,
    pub mel: Array2<f64>,
    pub noise: ExoNoise,
}

/// Structural equation for the mediator.
pub fn true_prosody(
    params: &ScmParams,
    phonemes: &[usize],
    speaker: usize,
    emotion: usize,
    noise: &ExoNoise,
) -> Result<ProsodyTriple> {
    params.check_ids(phonemes, speaker, emotion)?;
    if noise.len() != phonemes.len() || noise.pitch_hz.len() != phonemes.len() || noise.energy.len() != phonemes.len() {
        return Err(ScmError::LengthMismatch {
            what: "noise jitter",
            got: noise.len(),
            expected: phonemes.len(),
        });
    }
    let m = params.emo_mod[emotion];
    let rate = params.speaker_rate[speaker];
    let mean = params.mean_base_pitch();
    let mut out = ProsodyTriple {
        durations: Vec::with_capacity(phonemes.len()),
        pitch: Vec::with_capacity(phonemes.len()),
        energy: Vec::with_capacity(phonemes.len()),
    };
    for (i, &v) in phonemes.iter().enumerate() {
        let d = f64::from(params.base_duration[v]) * m.duration_scale * rate * noise.duration_factor[i];
        out.durations.push(d.round().max(1.0) as usize);
        out.pitch.push(
            (params.base_pitch[v] - mean) * m.pitch_range_scale + mean + m.pitch_offset_hz + noise.pitch_hz[i],
        );
        out.energy.push(
            (params.base_energy[v] + m.energy_offset + noise.energy[i]).clamp(ENERGY_MIN, ENERGY_MAX),
        );
    }
    Ok(out)
}

/// Feature vector `[content code, normalised pitch, energy, 1]`.
fn features(params: &ScmParams, token: usize, pitch: f64, energy: f64) -> Vec<f64> {
    let mut f = params.content_codes[token].clone();
    f.push(pitch_to_norm(pitch));
    f.push(energy);
    f.push(1.0);
    f
}

/// Structural equation for the mel frames.
pub fn render_mel(
    params: &ScmParams,
    phonemes: &[usize],
    speaker: usize,
    prosody: &ProsodyTriple,
    emotion: usize,
    noise: &ExoNoise,
) -> Result<Array2<f64>> {
    params.check_ids(phonemes, speaker, emotion)?;
    for (what, len) in [
        ("durations", prosody.durations.len()),
        ("pitch", prosody.pitch.len()),
        ("energy", prosody.energy.len()),
    ] {
        if len != phonemes.len() {
            return Err(ScmError::LengthMismatch {
                what,
                got: len,
                expected: phonemes.len(),
            });
        }
    }
    let ch = params.mel_channels;
    let timbre = &params.speaker_timbre[speaker];
    let psi = &params.emotion_offsets[emotion];
    let mut mel = Array2::<f64>::zeros((prosody.total_frames(), ch));
    let mut t = 0;
    for (i, &v) in phonemes.iter().enumerate() {
        let phi = features(params, v, prosody.pitch[i], prosody.energy[i]);
        let clean: Vec<f64> = (0..ch)
            .map(|c| {
                let mixed: f64 = timbre[c].iter().zip(&phi).map(|(a, b)| a * b).sum();
                mixed + params.kappa * psi[c]
            })
            .collect();
        for slot in 0..prosody.durations[i] {
            let n = noise.frame_noise(i, slot, ch, params.noise_std);
            for c in 0..ch {
                mel[[t, c]] = clean[c] + n[c];
            }
            t += 1;
        }
    }
    Ok(mel)
}

/// Draws one utterance; `emotion_override` pins the emotion.
pub fn sample_utterance_with(
    params: &ScmParams,
    seed: u64,
    id: impl Into<String>,
    emotion_override: Option<usize>,
) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(params.min_len..=params.max_len);
    let phonemes: Vec<usize> = (0..len).map(|_| rng.random_range(0..params.vocab_size)).collect();
    let speaker = rng.random_range(0..params.n_speakers);
    let dist = WeightedIndex::new(&params.emotion_probs)
        .map_err(|e| ScmError::Invalid(format!("emotion_probs: {e}")))?;
    let drawn = dist.sample(&mut rng);
    let emotion = emotion_override.unwrap_or(drawn);
    let j = params.jitter;
    let dur = LogNormal::new(0.0, j.duration_log_std).map_err(|e| ScmError::Invalid(e.to_string()))?;
    let pitch = Normal::new(0.0, j.pitch_std_hz).map_err(|e| ScmError::Invalid(e.to_string()))?;
    let energy = Normal::new(0.0, j.energy_std).map_err(|e| ScmError::Invalid(e.to_string()))?;
    let noise = ExoNoise {
        duration_factor: (0..len).map(|_| dur.sample(&mut rng)).collect(),
        pitch_hz: (0..len).map(|_| pitch.sample(&mut rng)).collect(),
        energy: (0..len).map(|_| energy.sample(&mut rng)).collect(),
        frame_seed: rng.next_u64(),
    };
    let prosody = true_prosody(params, &phonemes, speaker, emotion, &noise)?;
    let mel = render_mel(params, &phonemes, speaker, &prosody, emotion, &noise)?;
    Ok(Utterance {
        id: id.into(),
        phonemes,
        speaker,
        emotion,
        prosody,
        mel,
        noise,
    })
}

pub fn sample_utterance(params: &ScmParams, seed: u64) -> Result<Utterance> {
    sample_utterance_with(params, seed, format!("seed{seed}"), None)
}

/// Abduction (reuse the recorded noise), action (set `E = e_prime`),
/// prediction (recompute prosody and mel).
pub fn counterfactual_utterance(params: &ScmParams, u: &Utterance, e_prime: usize) -> Result<Utterance> {
    let prosody = true_prosody(params, &u.phonemes, u.speaker, e_prime, &u.noise)?;
    let mel = render_mel(params, &u.phonemes, u.speaker, &prosody, e_prime, &u.noise)?;
    Ok(Utterance {
        id: u.id.clone(),
        phonemes: u.phonemes.clone(),
        speaker: u.speaker,
        emotion: e_prime,
        prosody,
        mel,
        noise: u.noise.clone(),
    })
}

/// Effect sizes for an emotion swap `E -> E'`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MediationReport {
    /// Mean absolute mel difference under the full swap.
    pub total_effect: f64,
    /// Prosody held at `E`, direct path at `E'`.
    pub nde: f64,
    /// Prosody at `E'`, direct path held at `E`.
    pub nie: f64,
    pub signed_total: f64,
    pub signed_nde: f64,
    pub signed_nie: f64,
    /// `|signed_total - (signed_nde + signed_nie)|`.
    pub decomposition_residual: f64,
}

impl MediationReport {
    pub fn from_effects(abs: [f64; 3], signed: [f64; 3]) -> Self {
        Self {
            total_effect: abs[0],
            nde: abs[1],
            nie: abs[2],
            signed_total: signed[0],
            signed_nde: signed[1],
            signed_nie: signed[2],
            decomposition_residual: (signed[0] - (signed[1] + signed[2])).abs(),
        }
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[Self]) -> Self {
        if reports.is_empty() {
            return Self::default();
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&Self) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            total_effect: avg(|r| r.total_effect),
            nde: avg(|r| r.nde),
            nie: avg(|r| r.nie),
            signed_total: avg(|r| r.signed_total),
            signed_nde: avg(|r| r.signed_nde),
            signed_nie: avg(|r| r.signed_nie),
            decomposition_residual: avg(|r| r.decomposition_residual),
        }
    }
}

/// Frame pairs aligning two renders of the same phonemes phoneme by
/// phoneme; within a phoneme the shorter run is stretched by nearest frame.
pub fn phoneme_aligned_pairs(a: &[usize], b: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let (mut sa, mut sb) = (0, 0);
    for (&da, &db) in a.iter().zip(b) {
        let len = da.max(db);
        for j in 0..len {
            if da > 0 && db > 0 {
                pairs.push((sa + j * da / len, sb + j * db / len));
            }
        }
        sa += da;
        sb += db;
    }
    pairs
}

/// Mean absolute and signed differences `b - a` over aligned frame pairs.
pub fn aligned_differences(a: &Array2<f64>, b: &Array2<f64>, pairs: &[(usize, usize)]) -> (f64, f64) {
    if pairs.is_empty() {
        return (0.0, 0.0);
    }
    let ch = a.ncols();
    let (mut abs, mut signed) = (0.0, 0.0);
    for &(i, j) in pairs {
        for c in 0..ch {
            let d = b[[j, c]] - a[[i, c]];
            abs += d.abs();
            signed += d;
        }
    }
    let n = (pairs.len() * ch) as f64;
    (abs / n, signed / n)
}

/// Exact oracle effects from the four intervention renders.
pub fn oracle_effects(params: &ScmParams, u: &Utterance, e_prime: usize) -> Result<MediationReport> {
    if e_prime >= params.n_emotions() {
        return Err(ScmError::UnknownEmotion(e_prime));
    }
    let m = true_prosody(params, &u.phonemes, u.speaker, u.emotion, &u.noise)?;
    let m_cf = true_prosody(params, &u.phonemes, u.speaker, e_prime, &u.noise)?;
    let base = render_mel(params, &u.phonemes, u.speaker, &m, u.emotion, &u.noise)?;
    let full = render_mel(params, &u.phonemes, u.speaker, &m_cf, e_prime, &u.noise)?;
    let direct = render_mel(params, &u.phonemes, u.speaker, &m, e_prime, &u.noise)?;
    let indirect = render_mel(params, &u.phonemes, u.speaker, &m_cf, u.emotion, &u.noise)?;
    let same = phoneme_aligned_pairs(&m.durations, &m.durations);
    let warped = phoneme_aligned_pairs(&m.durations, &m_cf.durations);
    let (t_abs, t_sig) = aligned_differences(&base, &full, &warped);
    let (d_abs, d_sig) = aligned_differences(&base, &direct, &same);
    let (i_abs, i_sig) = aligned_differences(&base, &indirect, &warped);
    Ok(MediationReport::from_effects([t_abs, d_abs, i_abs], [t_sig, d_sig, i_sig]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ScmParams {
        ScmParams::generate(&ScmConfig::default()).unwrap()
    }

    #[test]
    fn tables_within_ranges_and_deterministic() {
        let p = params();
        assert!(p.base_duration.iter().all(|&d| (2..=6).contains(&d)));
        assert!(p.base_pitch.iter().all(|&x| (120.0..=250.0).contains(&x)));
        assert!(p.base_energy.iter().all(|&x| (0.3..=0.9).contains(&x)));
        assert_eq!(p.emo_mod[NEUTRAL], EmotionModifier::IDENTITY);
        let again = params();
        assert_eq!(serde_json::to_vec(&p).unwrap(), serde_json::to_vec(&again).unwrap());
        let other = ScmParams::generate(&ScmConfig {
            master_seed: 1,
            ..ScmConfig::default()
        })
        .unwrap();
        assert_ne!(p.base_pitch, other.base_pitch);
    }

    #[test]
    fn neutral_zero_jitter_reproduces_base_tables() {
        let p = params();
        let ph: Vec<usize> = (0..10).collect();
        let noise = ExoNoise::zero(10);
        // Speaker rates are not exactly 1, so build a unit-rate world.
        let mut unit = p.clone();
        unit.speaker_rate = vec![1.0; p.n_speakers];
        let m = true_prosody(&unit, &ph, 0, NEUTRAL, &noise).unwrap();
        for (i, &v) in ph.iter().enumerate() {
            assert_eq!(m.durations[i], p.base_duration[v] as usize);
            assert!((m.pitch[i] - p.base_pitch[v]).abs() < 1e-9);
            assert_eq!(m.energy[i], p.base_energy[v]);
        }
    }

    #[test]
    fn amused_shifts_pitch_by_offset_plus_range() {
        let p = params();
        let ph = [0usize, 1, 2];
        let noise = ExoNoise::zero(3);
        let n = true_prosody(&p, &ph, 0, NEUTRAL, &noise).unwrap();
        let a = true_prosody(&p, &ph, 0, AMUSED, &noise).unwrap();
        let m = p.emo_mod[AMUSED];
        let mean = p.mean_base_pitch();
        for i in 0..3 {
            let expected = (n.pitch[i] - mean) * m.pitch_range_scale + mean + m.pitch_offset_hz;
            assert!((a.pitch[i] - expected).abs() < 1e-9);
        }
        // A token sitting at the table mean moves by exactly the offset.
        let mut flat = p.clone();
        flat.base_pitch = vec![150.0; p.vocab_size];
        let n = true_prosody(&flat, &ph, 0, NEUTRAL, &noise).unwrap();
        let a = true_prosody(&flat, &ph, 0, AMUSED, &noise).unwrap();
        assert!((n.pitch[0] - 150.0).abs() < 1e-9);
        assert!((a.pitch[0] - 180.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_ids_rejected() {
        let p = params();
        let noise = ExoNoise::zero(2);
        assert!(matches!(
            true_prosody(&p, &[0, 1], 0, 9, &noise),
            Err(ScmError::UnknownEmotion(9))
        ));
        assert!(matches!(
            true_prosody(&p, &[0, 1], 7, 0, &noise),
            Err(ScmError::UnknownSpeaker(7))
        ));
        assert!(matches!(
            true_prosody(&p, &[0, 99], 0, 0, &noise),
            Err(ScmError::UnknownPhoneme(99))
        ));
    }

    #[test]
    fn render_frames_follow_durations() {
        let mut p = params();
        p.noise_std = 0.0;
        let pr = ProsodyTriple {
            durations: vec![2, 1],
            pitch: vec![150.0, 160.0],
            energy: vec![0.5, 0.6],
        };
        let mel = render_mel(&p, &[3, 4], 1, &pr, 0, &ExoNoise::zero(2)).unwrap();
        assert_eq!(mel.dim(), (3, p.mel_channels));
        assert_eq!(mel.row(0), mel.row(1));
        assert_ne!(mel.row(1), mel.row(2));
        let bad = ProsodyTriple {
            durations: vec![2],
            ..pr
        };
        assert!(render_mel(&p, &[3, 4], 1, &bad, 0, &ExoNoise::zero(2)).is_err());
    }

    #[test]
    fn aligned_pairs_cover_longer_run() {
        assert_eq!(
            phoneme_aligned_pairs(&[2, 1], &[2, 3]),
            vec![(0, 0), (1, 1), (2, 2), (2, 3), (2, 4)]
        );
        assert_eq!(phoneme_aligned_pairs(&[1, 1], &[1, 1]), vec![(0, 0), (1, 1)]);
    }
}
