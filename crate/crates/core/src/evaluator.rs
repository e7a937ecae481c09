//! Objective metrics on model outputs, mediation analysis shared by the
//! oracle and the model, pitch-contour artifacts and the ablation suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, Dataset, Split};
use crate::model::{FastSpeech2, ModelError, TeacherProsody};
use crate::probes::{Probe, ProbeError, ProbeWeights};
use crate::scm::{self, MediationReport, ScmParams, Utterance, NEUTRAL};
use crate::trainer::{self, load_model, run_finetune, RunOptions, Snapshot, TrainConfig};
use crate::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    Empty,
    #[error("the evaluation emotion probe has the same checksum as the training probe")]
    ProbeNotIndependent,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Scm(#[from] scm::ScmError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Train(#[from] Box<trainer::TrainError>),
}

impl From<trainer::TrainError> for EvalError {
    fn from(e: trainer::TrainError) -> Self {
        Self::Train(Box::new(e))
    }
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - edit_distance / len(reference)`, clipped to `[0, 1]`.
pub fn consistency(reference: &[usize], hypothesis: &[usize]) -> f64 {
    if reference.is_empty() {
        return if hypothesis.is_empty() { 1.0 } else { 0.0 };
    }
    (1.0 - edit_distance(reference, hypothesis) as f64 / reference.len() as f64).clamp(0.0, 1.0)
}

/// Drops consecutive repeats.
pub fn collapse(seq: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(seq.len());
    for &x in seq {
        if out.last() != Some(&x) {
            out.push(x);
        }
    }
    out
}

/// Greedy per-frame decoding by the content probe, repeats collapsed.
pub fn transcribe<F: Real>(probe: &Probe<F>, mel: &Array2<F>) -> Result<Vec<usize>, ProbeError> {
    Ok(collapse(&probe.predict(mel)?))
}

fn cosine(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    a.dot(b) / (na * nb)
}

/// Anything that can re-render an utterance with the mediator taken from
/// one emotion and the direct pathway from another.
pub trait CounterfactualSystem {
    /// Per-phoneme prosody (durations, Hz, energy) under `emotion`.
    fn prosody(&self, u: &Utterance, emotion: usize) -> Result<TeacherProsody>;

    /// Mel with prosody from `prosody_emotion` and the direct pathway set
    /// to `direct_emotion`.
    fn render(&self, u: &Utterance, prosody_emotion: usize, direct_emotion: usize) -> Result<Array2<f64>>;
}

/// The synthetic world itself.
pub struct Oracle<'a>(pub &'a ScmParams);

impl CounterfactualSystem for Oracle<'_> {
    fn prosody(&self, u: &Utterance, emotion: usize) -> Result<TeacherProsody> {
        let m = scm::true_prosody(self.0, &u.phonemes, u.speaker, emotion, &u.noise)?;
        Ok(TeacherProsody {
            durations: m.durations,
            pitch_hz: m.pitch,
            energy: m.energy,
        })
    }

    fn render(&self, u: &Utterance, prosody_emotion: usize, direct_emotion: usize) -> Result<Array2<f64>> {
        let m = scm::true_prosody(self.0, &u.phonemes, u.speaker, prosody_emotion, &u.noise)?;
        Ok(scm::render_mel(self.0, &u.phonemes, u.speaker, &m, direct_emotion, &u.noise)?)
    }
}

/// A trained model: prosody comes from its predictors, the direct pathway
/// is the decoder emotion input.
pub struct ModelSystem<'a, F: Real>(pub &'a FastSpeech2<F>);

impl<F: Real> CounterfactualSystem for ModelSystem<'_, F> {
    fn prosody(&self, u: &Utterance, emotion: usize) -> Result<TeacherProsody> {
        Ok(self.0.synthesize(&u.phonemes, u.speaker, emotion)?.teacher())
    }

    fn render(&self, u: &Utterance, prosody_emotion: usize, direct_emotion: usize) -> Result<Array2<f64>> {
        let p = self.prosody(u, prosody_emotion)?;
        let mel = self
            .0
            .render_with_prosody(&u.phonemes, u.speaker, prosody_emotion, direct_emotion, &p)?;
        Ok(mel.mapv(|x| x.f64()))
    }
}

/// Effects of `E -> e_prime` for one utterance from the four renders.
pub fn mediation_effects(sys: &dyn CounterfactualSystem, u: &Utterance, e_prime: usize) -> Result<MediationReport> {
    let e = u.emotion;
    let base = sys.render(u, e, e)?;
    let full = sys.render(u, e_prime, e_prime)?;
    let direct = sys.render(u, e, e_prime)?;
    let indirect = sys.render(u, e_prime, e)?;
    // Renders are compared phoneme by phoneme using the system's own
    // durations.
    let (d, d_cf) = (sys.prosody(u, e)?.durations, sys.prosody(u, e_prime)?.durations);
    let same = scm::phoneme_aligned_pairs(&d, &d);
    let pairs = scm::phoneme_aligned_pairs(&d, &d_cf);
    let (t_abs, t_sig) = scm::aligned_differences(&base, &full, &pairs);
    let (d_abs, d_sig) = scm::aligned_differences(&base, &direct, &same);
    let (i_abs, i_sig) = scm::aligned_differences(&base, &indirect, &pairs);
    Ok(MediationReport::from_effects([t_abs, d_abs, i_abs], [t_sig, d_sig, i_sig]))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairEffect {
    pub from: usize,
    pub to: usize,
    pub count: usize,
    pub effects: MediationReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MediationSummary {
    pub count: usize,
    pub mean: MediationReport,
    pub per_pair: Vec<PairEffect>,
}

/// Every `(u, e')` with `e'` drawn from `targets` (all other emotions when
/// empty); pairs with `e' = E` are skipped unless listed explicitly.
pub fn eval_mediation(
    sys: &dyn CounterfactualSystem,
    utterances: &[Utterance],
    n_emotions: usize,
    targets: &[usize],
) -> Result<MediationSummary> {
    if utterances.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut all = Vec::new();
    let mut grid: Vec<Vec<Vec<MediationReport>>> = vec![vec![Vec::new(); n_emotions]; n_emotions];
    for u in utterances {
        let list: Vec<usize> = if targets.is_empty() {
            (0..n_emotions).filter(|&e| e != u.emotion).collect()
        } else {
            targets.to_vec()
        };
        for e in list {
            let r = mediation_effects(sys, u, e)?;
            grid[u.emotion][e].push(r);
            all.push(r);
        }
    }
    let mut per_pair = Vec::new();
    for (from, row) in grid.iter().enumerate() {
        for (to, cell) in row.iter().enumerate() {
            if !cell.is_empty() {
                per_pair.push(PairEffect {
                    from,
                    to,
                    count: cell.len(),
                    effects: MediationReport::mean(cell),
                });
            }
        }
    }
    Ok(MediationSummary {
        count: all.len(),
        mean: MediationReport::mean(&all),
        per_pair,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CcsReport {
    pub overall: f64,
    /// Neutral-vs-emotion consistency, indexed by emotion (neutral entry 1).
    pub per_emotion: Vec<f64>,
    /// Mean normalised edit distance of transcripts against the collapsed
    /// input phoneme sequence.
    pub phoneme_error_rate: f64,
    pub utterances: usize,
    pub pairs: usize,
}

/// Synthesises every test utterance under neutral and every other emotion
/// and compares probe transcripts.
pub fn eval_ccs<F: Real>(model: &FastSpeech2<F>, utterances: &[Utterance], probe: &Probe<F>) -> Result<CcsReport> {
    if utterances.is_empty() {
        return Err(EvalError::Empty);
    }
    probe.require_frozen()?;
    let n_e = model.config().n_emotions;
    let mut sums = vec![0.0; n_e];
    let (mut per_sum, mut per_n) = (0.0, 0usize);
    for u in utterances {
        let truth = collapse(&u.phonemes);
        let reference = transcribe(probe, &model.synthesize(&u.phonemes, u.speaker, NEUTRAL)?.mel)?;
        per_sum += 1.0 - consistency(&truth, &reference);
        per_n += 1;
        for (e, sum) in sums.iter_mut().enumerate().filter(|(e, _)| *e != NEUTRAL) {
            let hyp = transcribe(probe, &model.synthesize(&u.phonemes, u.speaker, e)?.mel)?;
            *sum += consistency(&reference, &hyp);
            per_sum += 1.0 - consistency(&truth, &hyp);
            per_n += 1;
        }
    }
    let n = utterances.len() as f64;
    let mut per_emotion: Vec<f64> = sums.iter().map(|s| s / n).collect();
    per_emotion[NEUTRAL] = 1.0;
    let pairs = utterances.len() * (n_e - 1);
    let overall = sums.iter().sum::<f64>() / pairs as f64;
    Ok(CcsReport {
        overall,
        per_emotion,
        phoneme_error_rate: per_sum / per_n as f64,
        utterances: utterances.len(),
        pairs,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmotionAccuracy {
    /// Syntheses under every emotion other than the recorded one.
    pub counterfactual: f64,
    /// Syntheses under every emotion, the recorded one included.
    pub all: f64,
    pub per_emotion: Vec<f64>,
    pub counterfactual_count: usize,
    pub all_count: usize,
}

/// Accuracy of the reserved probe on syntheses under each target emotion.
pub fn eval_emotion_accuracy<F: Real>(
    model: &FastSpeech2<F>,
    utterances: &[Utterance],
    eval_probe: &Probe<F>,
    training_probe_checksum: &str,
) -> Result<EmotionAccuracy> {
    if utterances.is_empty() {
        return Err(EvalError::Empty);
    }
    if eval_probe.checksum() == training_probe_checksum {
        return Err(EvalError::ProbeNotIndependent);
    }
    let n_e = model.config().n_emotions;
    let mut hits = vec![0usize; n_e];
    let (mut cf_hits, mut cf_n) = (0usize, 0usize);
    for u in utterances {
        for (e, hit) in hits.iter_mut().enumerate() {
            let mel = model.synthesize(&u.phonemes, u.speaker, e)?.mel;
            let ok = eval_probe.predict(&mel)?[0] == e;
            *hit += usize::from(ok);
            if e != u.emotion {
                cf_hits += usize::from(ok);
                cf_n += 1;
            }
        }
    }
    let n = utterances.len();
    Ok(EmotionAccuracy {
        counterfactual: cf_hits as f64 / cf_n.max(1) as f64,
        all: hits.iter().sum::<usize>() as f64 / (n * n_e) as f64,
        per_emotion: hits.iter().map(|&h| h as f64 / n as f64).collect(),
        counterfactual_count: cf_n,
        all_count: n * n_e,
    })
}

/// Emotion accuracy of a probe on oracle mels (its ceiling).
pub fn oracle_emotion_accuracy<F: Real>(utterances: &[Utterance], probe: &Probe<F>) -> Result<f64> {
    if utterances.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut hits = 0;
    for u in utterances {
        let mel = u.mel.mapv(F::c);
        hits += usize::from(probe.predict(&mel)?[0] == u.emotion);
    }
    Ok(hits as f64 / utterances.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSimilarity {
    /// Mean cosine between probe embeddings of the synthesis and the oracle
    /// recording of the same utterance.
    pub mean_cosine: f64,
    /// Share of emotion swaps that change the probe's speaker decision.
    pub swap_change_rate: f64,
    pub utterances: usize,
    pub swaps: usize,
}

pub fn eval_speaker_similarity<F: Real>(
    model: &FastSpeech2<F>,
    utterances: &[Utterance],
    probe: &Probe<F>,
) -> Result<SpeakerSimilarity> {
    if utterances.is_empty() {
        return Err(EvalError::Empty);
    }
    let n_e = model.config().n_emotions;
    let (mut cos, mut changed, mut swaps) = (0.0, 0usize, 0usize);
    for u in utterances {
        let own = model.synthesize(&u.phonemes, u.speaker, u.emotion)?.mel;
        let reference = probe.embedding(&u.mel.mapv(F::c))?;
        cos += cosine(&probe.embedding(&own)?, &reference);
        let decision = probe.predict(&own)?[0];
        for e in (0..n_e).filter(|&e| e != u.emotion) {
            let mel = model.synthesize(&u.phonemes, u.speaker, e)?.mel;
            changed += usize::from(probe.predict(&mel)?[0] != decision);
            swaps += 1;
        }
    }
    Ok(SpeakerSimilarity {
        mean_cosine: cos / utterances.len() as f64,
        swap_change_rate: changed as f64 / swaps.max(1) as f64,
        utterances: utterances.len(),
        swaps,
    })
}

/// Per-frame pitch of each emotion plus summary shifts against neutral.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchContour {
    pub utterance: String,
    pub emotions: Vec<usize>,
    pub labels: Vec<String>,
    /// Per-emotion frame contour in Hz.
    pub frames: Vec<Vec<f64>>,
    /// Per-emotion per-phoneme pitch in Hz.
    pub phonemes: Vec<Vec<f64>>,
    /// Mean per-phoneme shift against neutral, Hz.
    pub mean_shift_hz: Vec<f64>,
    /// Mean frame pitch difference against neutral, Hz.
    pub frame_mean_shift_hz: Vec<f64>,
    /// `max - min` of the phoneme pitch, Hz.
    pub range_hz: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn pitch_contour(
    sys: &dyn CounterfactualSystem,
    u: &Utterance,
    emotions: &[usize],
    labels: &[String],
) -> Result<PitchContour> {
    let neutral = sys.prosody(u, NEUTRAL)?;
    let neutral_frames = expand(&neutral);
    let mut out = PitchContour {
        utterance: u.id.clone(),
        emotions: emotions.to_vec(),
        labels: emotions
            .iter()
            .map(|&e| labels.get(e).cloned().unwrap_or_else(|| format!("e{e}")))
            .collect(),
        frames: Vec::new(),
        phonemes: Vec::new(),
        mean_shift_hz: Vec::new(),
        frame_mean_shift_hz: Vec::new(),
        range_hz: Vec::new(),
    };
    for &e in emotions {
        let p = sys.prosody(u, e)?;
        let frames = expand(&p);
        let shift = mean(&p.pitch_hz.iter().zip(&neutral.pitch_hz).map(|(a, b)| a - b).collect::<Vec<_>>());
        out.mean_shift_hz.push(shift);
        out.frame_mean_shift_hz.push(mean(&frames) - mean(&neutral_frames));
        let max = p.pitch_hz.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = p.pitch_hz.iter().copied().fold(f64::INFINITY, f64::min);
        out.range_hz.push(max - min);
        out.frames.push(frames);
        out.phonemes.push(p.pitch_hz);
    }
    Ok(out)
}

fn expand(p: &TeacherProsody) -> Vec<f64> {
    p.durations
        .iter()
        .zip(&p.pitch_hz)
        .flat_map(|(&d, &hz)| std::iter::repeat_n(hz, d))
        .collect()
}

impl PitchContour {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame");
        for l in &self.labels {
            let _ = write!(s, ",{l}_hz");
        }
        s.push('\n');
        let len = self.frames.iter().map(Vec::len).max().unwrap_or(0);
        for t in 0..len {
            let _ = write!(s, "{t}");
            for f in &self.frames {
                match f.get(t) {
                    Some(v) => {
                        let _ = write!(s, ",{v:.3}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_svg(&self) -> String {
        const COLORS: [&str; 8] = [
            "#1f77b4", "#ff7f0e", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
        ];
        let (w, h, pad) = (720.0, 360.0, 48.0);
        let len = self.frames.iter().map(Vec::len).max().unwrap_or(1).max(2);
        let all = self.frames.iter().flatten();
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min).min(100.0);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1.0);
        let x = |t: usize| pad + (w - 2.0 * pad) * t as f64 / (len - 1) as f64;
        let y = |hz: f64| h - pad - (h - 2.0 * pad) * (hz - lo) / (hi - lo);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{pad}" y="20">pitch contour, utterance {}</text>"#,
            self.utterance
        );
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
            b = h - pad,
            r = w - pad
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">frame</text>"#, w / 2.0, h - 12.0);
        for k in 0..=4 {
            let hz = lo + (hi - lo) * k as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="4" y="{:.1}">{hz:.0} Hz</text>"#,
                y(hz) + 4.0
            );
        }
        for (i, f) in self.frames.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = f.iter().enumerate().map(|(t, &v)| format!("{:.1},{:.1}", x(t), y(v))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}">{} ({:+.1} Hz)</text>"#,
                w - pad - 150.0,
                pad + 16.0 * i as f64,
                self.labels[i],
                self.mean_shift_hz[i]
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `<stem>.csv`, `<stem>.svg` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<[PathBuf; 3]> {
        fs::create_dir_all(dir).map_err(|source| io::IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let csv = dir.join(format!("{stem}.csv"));
        let svg = dir.join(format!("{stem}.svg"));
        let json = dir.join(format!("{stem}.json"));
        for (p, text) in [(&csv, self.to_csv()), (&svg, self.to_svg())] {
            fs::write(p, text).map_err(|source| io::IoError::Io {
                path: p.clone(),
                source,
            })?;
        }
        io::write_json(&json, self)?;
        Ok([csv, svg, json])
    }
}

/// Mean per-phoneme pitch shift against neutral, per emotion, over many
/// utterances.
pub fn mean_pitch_shifts(sys: &dyn CounterfactualSystem, utterances: &[Utterance], n_emotions: usize) -> Result<Vec<f64>> {
    if utterances.is_empty() {
        return Err(EvalError::Empty);
    }
    let emotions: Vec<usize> = (0..n_emotions).collect();
    let mut sums = vec![0.0; n_emotions];
    for u in utterances {
        let c = pitch_contour(sys, u, &emotions, &[])?;
        for (s, v) in sums.iter_mut().zip(&c.mean_shift_hz) {
            *s += v;
        }
    }
    Ok(sums.iter().map(|s| s / utterances.len() as f64).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub tag: String,
    pub checkpoint_hash: String,
    pub ccs: CcsReport,
    pub emotion_accuracy: EmotionAccuracy,
    pub speaker: SpeakerSimilarity,
    /// Mean L1 of the decoder-emotion swap (equals the nde estimate).
    pub ipc_direct_magnitude: f64,
    pub mediation: MediationSummary,
    pub pitch_shift_hz: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub manifest_hash: String,
    pub probe_checksums: [String; 4],
    pub emotions: Vec<String>,
    pub utterances: usize,
    pub rows: Vec<SystemRow>,
}

/// Test-split utterances with their exogenous noise, optionally capped.
pub fn test_utterances(data: &Dataset, limit: Option<usize>) -> Result<Vec<Utterance>> {
    let ids = data.ids(Split::Test);
    let n = limit.map_or(ids.len(), |l| l.min(ids.len()));
    ids[..n].iter().map(|id| Ok(data.utterance(id)?)).collect()
}

/// Every metric for one model.
pub fn evaluate_system(
    model: &FastSpeech2<f32>,
    tag: &str,
    checkpoint_hash: &str,
    probes: &ProbeWeights<f32>,
    utterances: &[Utterance],
) -> Result<SystemRow> {
    let n_e = model.config().n_emotions;
    let sys = ModelSystem(model);
    let mediation = eval_mediation(&sys, utterances, n_e, &[])?;
    Ok(SystemRow {
        tag: tag.into(),
        checkpoint_hash: checkpoint_hash.into(),
        ccs: eval_ccs(model, utterances, &probes.content)?,
        emotion_accuracy: eval_emotion_accuracy(
            model,
            utterances,
            &probes.emotion_eval,
            &probes.emotion_train.checksum(),
        )?,
        speaker: eval_speaker_similarity(model, utterances, &probes.speaker)?,
        ipc_direct_magnitude: mediation.mean.nde,
        pitch_shift_hz: mean_pitch_shifts(&sys, utterances, n_e)?,
        mediation,
    })
}

/// One ordering or threshold check of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub report: EvalReport,
    pub assertions: Vec<Assertion>,
}

/// Variant order of the ablation table.
pub const ABLATION_VARIANTS: [(&str, bool, bool); 4] = [
    ("CPM", false, false),
    ("w/o IPC", true, false),
    ("w/o CPC", false, true),
    ("Baseline B", true, true),
];

fn row<'a>(rows: &'a [SystemRow], tag: &str) -> Option<&'a SystemRow> {
    rows.iter().find(|r| r.tag == tag)
}

/// Ordering and threshold checks over a four-row table.
pub fn ablation_assertions(rows: &[SystemRow]) -> Vec<Assertion> {
    let mut out = Vec::new();
    let (Some(full), Some(no_ipc), Some(no_cpc), Some(base)) = (
        row(rows, "CPM"),
        row(rows, "w/o IPC"),
        row(rows, "w/o CPC"),
        row(rows, "Baseline B"),
    ) else {
        out.push(Assertion {
            name: "table has all four variants".into(),
            pass: false,
            detail: format!("{} rows", rows.len()),
        });
        return out;
    };
    let mut add = |name: &str, pass: bool, detail: String| {
        out.push(Assertion {
            name: name.into(),
            pass,
            detail,
        })
    };
    let ratio = full.mediation.mean.nde / no_ipc.mediation.mean.nde.max(1e-12);
    add(
        "direct effect: CPM nde < 0.5 x w/o IPC",
        ratio < 0.5,
        format!("ratio {ratio:.3} (target < 0.2)"),
    );
    add(
        "direct effect: w/o IPC nde > CPM nde",
        no_ipc.mediation.mean.nde > full.mediation.mean.nde,
        format!("{:.4} vs {:.4}", no_ipc.mediation.mean.nde, full.mediation.mean.nde),
    );
    let (a, b, c) = (
        full.emotion_accuracy.counterfactual,
        no_cpc.emotion_accuracy.counterfactual,
        base.emotion_accuracy.counterfactual,
    );
    add("emotion accuracy: CPM >= 0.85", a >= 0.85, format!("{a:.3}"));
    add(
        "emotion accuracy: CPM >= w/o CPC + 0.10",
        a >= b + 0.10,
        format!("{a:.3} vs {b:.3}"),
    );
    add("emotion accuracy: CPM > Baseline B", a > c, format!("{a:.3} vs {c:.3}"));
    let min_ccs = full
        .ccs
        .per_emotion
        .iter()
        .enumerate()
        .filter(|(e, _)| *e != NEUTRAL)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    add(
        "content: CPM CCS >= 0.95 overall and >= 0.94 per emotion",
        full.ccs.overall >= 0.95 && min_ccs >= 0.94,
        format!("overall {:.3}, min {:.3}", full.ccs.overall, min_ccs),
    );
    let gap = (full.speaker.mean_cosine - base.speaker.mean_cosine).abs();
    add(
        "speaker: |CPM - Baseline B| cosine <= 0.02 and swap changes < 5%",
        gap <= 0.02 && full.speaker.swap_change_rate < 0.05,
        format!("gap {gap:.4}, swap change {:.3}", full.speaker.swap_change_rate),
    );
    out
}

/// Fine-tunes the four variants from one pre-trained checkpoint with the
/// same seed and budget, then evaluates each on the test split.
pub fn run_ablation_suite(
    data: &Dataset,
    probes: &ProbeWeights<f32>,
    pretrain_ckpt: &Path,
    base_config: &TrainConfig,
    out_dir: &Path,
    eval_limit: Option<usize>,
    opts: &RunOptions,
) -> Result<AblationReport> {
    let utterances = test_utterances(data, eval_limit)?;
    let mut rows = Vec::new();
    for (tag, no_ipc, no_cpc) in ABLATION_VARIANTS {
        let mut cfg = base_config.clone();
        cfg.ablation.disable_ipc = no_ipc;
        cfg.ablation.disable_cpc = no_cpc;
        let dir = out_dir.join(variant_dir(tag));
        let outcome = run_finetune(data, pretrain_ckpt, probes, &cfg, &dir, opts)?;
        let (model, _) = load_model(&outcome.checkpoint, Snapshot::Best)?;
        let hash = io::checkpoint_hash(&outcome.checkpoint)?;
        rows.push(evaluate_system(&model, tag, &hash, probes, &utterances)?);
    }
    let assertions = ablation_assertions(&rows);
    Ok(AblationReport {
        report: EvalReport {
            manifest_hash: data.manifest_hash.clone(),
            probe_checksums: probes.checksums(),
            emotions: data.params().emotions.clone(),
            utterances: utterances.len(),
            rows,
        },
        assertions,
    })
}

/// Directory-safe name of a variant tag.
pub fn variant_dir(tag: &str) -> String {
    tag.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

impl EvalReport {
    /// Aligned-column text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "manifest {}", self.manifest_hash);
        let _ = writeln!(s, "test utterances {}", self.utterances);
        let _ = writeln!(
            s,
            "{:<12} {:>7} {:>7} {:>9} {:>9} {:>8} {:>8} {:>9} {:>9} {:>9}  checkpoint",
            "system", "CCS", "PER", "emo_acc", "emo_all", "spk_cos", "spk_chg", "nde", "nie", "total"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>7.4} {:>7.4} {:>9.4} {:>9.4} {:>8.4} {:>8.4} {:>9.5} {:>9.5} {:>9.5}  {}",
                r.tag,
                r.ccs.overall,
                r.ccs.phoneme_error_rate,
                r.emotion_accuracy.counterfactual,
                r.emotion_accuracy.all,
                r.speaker.mean_cosine,
                r.speaker.swap_change_rate,
                r.mediation.mean.nde,
                r.mediation.mean.nie,
                r.mediation.mean.total_effect,
                &r.checkpoint_hash[..r.checkpoint_hash.len().min(16)]
            );
        }
        let _ = writeln!(s, "pitch shift vs neutral (Hz):");
        for r in &self.rows {
            let shifts: Vec<String> = self
                .emotions
                .iter()
                .zip(&r.pitch_shift_hz)
                .map(|(e, v)| format!("{e} {v:+.1}"))
                .collect();
            let _ = writeln!(s, "  {:<12} {}", r.tag, shifts.join(", "));
        }
        let _ = writeln!(
            s,
            "counts: ccs pairs {}, emotion syntheses {}, speaker swaps {}, mediation pairs {}",
            self.rows.first().map_or(0, |r| r.ccs.pairs),
            self.rows.first().map_or(0, |r| r.emotion_accuracy.all_count),
            self.rows.first().map_or(0, |r| r.speaker.swaps),
            self.rows.first().map_or(0, |r| r.mediation.count),
        );
        s
    }
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut s = self.report.to_text();
        for a in &self.assertions {
            let _ = writeln!(s, "[{}] {} ({})", if a.pass { "PASS" } else { "FAIL" }, a.name, a.detail);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{ScmConfig, AMUSED, SLEEPY};

    #[test]
    fn edit_distance_cases() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[], &[4, 5]), 2);
        assert_eq!(edit_distance(&[1, 2, 3, 4], &[2, 1, 3, 5]), 3);
        let r: Vec<usize> = (0..10).collect();
        let mut h = r.clone();
        h[4] = 99;
        assert!((consistency(&r, &h) - 0.9).abs() < 1e-12);
        assert_eq!(consistency(&r, &r), 1.0);
        assert_eq!(consistency(&[1], &[2, 3, 4, 5]), 0.0);
    }

    #[test]
    fn collapse_drops_repeats() {
        assert_eq!(collapse(&[3, 3, 1, 1, 1, 3]), vec![3, 1, 3]);
        assert!(collapse(&[]).is_empty());
    }

    fn world(kappa: f64) -> (ScmParams, Vec<Utterance>) {
        let p = ScmParams::generate(&ScmConfig {
            kappa,
            ..ScmConfig::default()
        })
        .unwrap();
        let us = (0..12).map(|i| scm::sample_utterance(&p, 100 + i).unwrap()).collect();
        (p, us)
    }

    #[test]
    fn oracle_through_estimator_matches_oracle_effects() {
        for kappa in [0.0, 0.5] {
            let (p, us) = world(kappa);
            let sys = Oracle(&p);
            for u in &us {
                for e in 0..p.n_emotions() {
                    let est = mediation_effects(&sys, u, e).unwrap();
                    let exact = scm::oracle_effects(&p, u, e).unwrap();
                    assert_eq!(est.nde, exact.nde);
                    if kappa == 0.0 {
                        assert_eq!(est.nde, 0.0);
                    }
                    if e == u.emotion {
                        assert_eq!(est.total_effect, 0.0);
                        assert_eq!(est.nie, 0.0);
                    }
                    assert!((est.total_effect - exact.total_effect).abs() < 1e-12);
                    assert!((est.nie - exact.nie).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn oracle_pitch_shifts_follow_modifiers() {
        let (p, us) = world(0.0);
        let shifts = mean_pitch_shifts(&Oracle(&p), &us, p.n_emotions()).unwrap();
        assert_eq!(shifts[NEUTRAL], 0.0);
        assert!((shifts[AMUSED] - 30.0).abs() < 10.0, "{shifts:?}");
        assert!((shifts[SLEEPY] + 30.0).abs() < 10.0, "{shifts:?}");
    }

    #[test]
    fn contour_artifacts_are_well_formed() {
        let (p, us) = world(0.0);
        let c = pitch_contour(&Oracle(&p), &us[0], &[0, 1, 4], &p.emotions).unwrap();
        let csv = c.to_csv();
        assert!(csv.starts_with("frame,neutral_hz,amused_hz,sleepy_hz\n"));
        let rows = csv.lines().count() - 1;
        assert_eq!(rows, c.frames.iter().map(Vec::len).max().unwrap());
        let svg = c.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3);
    }

    #[test]
    fn variant_dirs() {
        assert_eq!(variant_dir("w/o IPC"), "w_o_ipc");
        assert_eq!(variant_dir("Baseline B"), "baseline_b");
        assert_eq!(variant_dir("CPM"), "cpm");
    }
}
