//! Small frozen classifiers that score generated mels.
//!
//! The content probe labels single frames with phoneme ids. The emotion and
//! speaker probes see only pooled statistics of a whole utterance (per-channel
//! mean, standard deviation and mean absolute frame difference), so they
//! cannot key on phoneme identity directly.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{softmax_rows, Graph, ParamId, ParamStore, Var};
use crate::io::{self, Dataset, Example, Split};
use crate::optim::{AdamW, AdamWConfig};
use crate::scm::{self, derive_seed, named_seed};
use crate::Real;

pub const PROBE_HIDDEN: usize = 64;
const STD_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probe is not frozen; refusing to use it inside a training loss")]
    NotFrozen,
    #[error("dataset has {0} distinct emotion(s) in its train split; probes need every emotion")]
    MissingEmotions(usize),
    #[error("probe expects {expected} mel channels, got {got}")]
    Channels { expected: usize, got: usize },
    #[error("durations cover {got} frames but the mel has {expected}")]
    Alignment { got: usize, expected: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Scm(#[from] scm::ScmError),
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Per-frame phoneme classifier.
    Content,
    /// Utterance-level classifier over pooled statistics.
    Pooled,
}

/// A two-layer perceptron whose input normalisation is folded into the
/// first layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe<F: Real> {
    kind: ProbeKind,
    mel_channels: usize,
    store: ParamStore<F>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    frozen: bool,
}

impl<F: Real> Probe<F> {
    fn from_store(kind: ProbeKind, mel_channels: usize, store: ParamStore<F>, frozen: bool) -> Self {
        let id = |n: &str| store.id(n).expect("probe layout");
        Self {
            kind,
            mel_channels,
            w1: id("w1"),
            b1: id("b1"),
            w2: id("w2"),
            b2: id("b2"),
            store,
            frozen,
        }
    }

    fn template(kind: ProbeKind, mel_channels: usize, hidden: usize, classes: usize) -> ParamStore<F> {
        let input = match kind {
            ProbeKind::Content => mel_channels,
            ProbeKind::Pooled => 3 * mel_channels,
        };
        let mut s = ParamStore::new();
        s.add("w1", Array2::zeros((input, hidden)));
        s.add("b1", Array2::zeros((1, hidden)));
        s.add("w2", Array2::zeros((hidden, classes)));
        s.add("b2", Array2::zeros((1, classes)));
        s
    }

    /// Glorot-initialised frozen probe; stands in for a trained one where
    /// only shapes matter.
    pub fn random(kind: ProbeKind, mel_channels: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::template(kind, mel_channels, hidden, classes);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let w = store.get_mut(id);
            let (r, c) = w.dim();
            let std = if r == 1 { 0.1 } else { (2.0 / (r + c) as f64).sqrt() };
            w.mapv_inplace(|_| F::c(rng.sample::<f64, _>(StandardNormal) * std));
        }
        Self::from_store(kind, mel_channels, store, true)
    }

    pub fn kind(&self) -> ProbeKind {
        self.kind
    }

    pub fn mel_channels(&self) -> usize {
        self.mel_channels
    }

    pub fn n_classes(&self) -> usize {
        self.store.get(self.w2).ncols()
    }

    pub fn hidden(&self) -> usize {
        self.store.get(self.w1).ncols()
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn require_frozen(&self) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(ProbeError::NotFrozen)
        }
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn cast<G: Real>(&self) -> Probe<G> {
        Probe::from_store(self.kind, self.mel_channels, self.store.cast(), self.frozen)
    }

    fn check_channels(&self, cols: usize) -> Result<()> {
        if cols != self.mel_channels {
            return Err(ProbeError::Channels {
                expected: self.mel_channels,
                got: cols,
            });
        }
        Ok(())
    }

    /// Hidden activations; `[frames, hidden]` for content, `[1, hidden]`
    /// for pooled probes.
    pub fn embed<'p>(&'p self, g: &mut Graph<'p, F>, mel: Var) -> Result<Var> {
        let (rows, cols) = g.shape(mel);
        self.check_channels(cols)?;
        if rows == 0 {
            return Err(ProbeError::Empty("mel has no frames"));
        }
        let x = match self.kind {
            ProbeKind::Content => mel,
            ProbeKind::Pooled => pooled_stats(g, mel),
        };
        let w1 = g.weight(&self.store, self.w1);
        let b1 = g.weight(&self.store, self.b1);
        let h = g.linear(x, w1, b1);
        Ok(g.relu(h))
    }

    pub fn logits<'p>(&'p self, g: &mut Graph<'p, F>, mel: Var) -> Result<Var> {
        let h = self.embed(g, mel)?;
        let w2 = g.weight(&self.store, self.w2);
        let b2 = g.weight(&self.store, self.b2);
        Ok(g.linear(h, w2, b2))
    }

    fn eval_logits(&self, mel: &Array2<F>) -> Result<Array2<F>> {
        let mut g = Graph::new(None);
        let x = g.constant_ref(mel);
        let l = self.logits(&mut g, x)?;
        Ok(g.value(l).to_owned())
    }

    /// Class probabilities per row of the logits.
    pub fn probabilities(&self, mel: &Array2<F>) -> Result<Array2<f64>> {
        let l = self.eval_logits(mel)?;
        Ok(softmax_rows(l.view()).mapv(|x| x.f64()))
    }

    /// Arg-max class per frame (content) or for the utterance (pooled).
    pub fn predict(&self, mel: &Array2<F>) -> Result<Vec<usize>> {
        let l = self.eval_logits(mel)?;
        Ok(l.rows().into_iter().map(|r| argmax(r.iter().map(|x| x.f64()))).collect())
    }

    /// Penultimate-layer embedding of an utterance.
    pub fn embedding(&self, mel: &Array2<F>) -> Result<Array1<f64>> {
        let mut g = Graph::new(None);
        let x = g.constant_ref(mel);
        let h = self.embed(&mut g, x)?;
        let v = g.value(h).mapv(|x| x.f64());
        Ok(v.mean_axis(Axis(0)).expect("non-empty"))
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in it.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// `[mean | std | mean |frame delta|]` over frames, as a `[1, 3C]` node.
pub fn pooled_stats<'p, F: Real>(g: &mut Graph<'p, F>, mel: Var) -> Var {
    let (t, c) = g.shape(mel);
    let mean = g.mean_rows(mel);
    let centred = g.sub_row(mel, mean);
    let sq = g.mul(centred, centred);
    let var = g.mean_rows(sq);
    let var = g.add_scalar(var, STD_EPS);
    let std = g.sqrt(var);
    let delta = if t >= 2 {
        let a = g.slice_rows(mel, 1, t - 1);
        let b = g.slice_rows(mel, 0, t - 1);
        let d = g.sub(a, b);
        let d = g.abs(d);
        g.mean_rows(d)
    } else {
        g.constant(Array2::zeros((1, c)))
    };
    g.concat_cols(&[mean, std, delta])
}

/// Plain-array twin of [`pooled_stats`].
pub fn pooled_stats_array<F: Real>(mel: &Array2<F>) -> Array1<f64> {
    let m = mel.mapv(|x| x.f64());
    let (t, c) = m.dim();
    let mean = m.mean_axis(Axis(0)).expect("non-empty");
    let var = (&m - &mean).mapv(|x| x * x).mean_axis(Axis(0)).expect("non-empty");
    let std = var.mapv(|v| (v + STD_EPS).sqrt());
    let delta = if t >= 2 {
        (&m.slice(s![1.., ..]) - &m.slice(s![..t - 1, ..]))
            .mapv(f64::abs)
            .mean_axis(Axis(0))
            .expect("non-empty")
    } else {
        Array1::zeros(c)
    };
    ndarray::concatenate(Axis(0), &[mean.view(), std.view(), delta.view()]).expect("same rank")
}

/// Phoneme label of every frame.
pub fn frame_labels(phonemes: &[usize], durations: &[usize]) -> Vec<usize> {
    phonemes
        .iter()
        .zip(durations)
        .flat_map(|(&p, &d)| std::iter::repeat_n(p, d))
        .collect()
}

/// Optimisation settings for a single probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

/// Fits a two-layer perceptron on standardised inputs and returns weights
/// that act on the raw inputs.
fn fit_mlp(
    x: &Array2<f64>,
    labels: &[usize],
    classes: usize,
    cfg: FitConfig,
    seed: u64,
) -> ParamStore<f64> {
    let (n, d) = x.dim();
    assert_eq!(n, labels.len());
    let mu = x.mean_axis(Axis(0)).expect("non-empty");
    let sd = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-8));
    let xn = (x - &mu) / &sd;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut glorot = |r: usize, c: usize| {
        let std = (2.0 / (r + c) as f64).sqrt();
        Array2::from_shape_simple_fn((r, c), || rng.sample::<f64, _>(StandardNormal) * std)
    };
    let mut store = ParamStore::new();
    let w1 = store.add("w1", glorot(d, cfg.hidden));
    let b1 = store.add("b1", Array2::zeros((1, cfg.hidden)));
    let w2 = store.add("w2", glorot(cfg.hidden, classes));
    let b2 = store.add("b2", Array2::zeros((1, classes)));
    let mut opt = AdamW::new(
        &store,
        AdamWConfig {
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch_size);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = xn.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut g = Graph::new(Some(&store));
                let xv = g.constant(xb);
                let (w1v, b1v) = (g.weight(&store, w1), g.weight(&store, b1));
                let (w2v, b2v) = (g.weight(&store, w2), g.weight(&store, b2));
                let h = g.linear(xv, w1v, b1v);
                let h = g.relu(h);
                let l = g.linear(h, w2v, b2v);
                let loss = g.cross_entropy(l, yb);
                g.backward(loss)
            };
            // Cosine decay keeps the final weights stable.
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            opt.update(&mut store, &grads, lr);
            step += 1;
        }
    }
    // Fold the standardisation into the first layer.
    let inv = sd.mapv(|s| 1.0 / s);
    let w1_raw = store.get(w1) * &inv.clone().insert_axis(Axis(1));
    let shift = (&mu * &inv).insert_axis(Axis(0)).dot(store.get(w1));
    let b1_raw = store.get(b1) - &shift;
    *store.get_mut(w1) = w1_raw;
    *store.get_mut(b1) = b1_raw;
    store
}

/// Oracle dev accuracies measured before freezing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeMetrics {
    pub content_dev_accuracy: f64,
    pub content_dev_loss: f64,
    pub emotion_train_probe_dev_accuracy: f64,
    pub emotion_eval_probe_dev_accuracy: f64,
    pub emotion_dev_loss: f64,
    pub speaker_dev_accuracy: f64,
    pub dev_frames: usize,
    pub dev_utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub content: FitConfig,
    pub emotion: FitConfig,
    pub speaker: FitConfig,
    /// Counterfactual oracle renders of each train utterance per emotion,
    /// added to the pooled-probe training data.
    pub counterfactual_augment: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            content: FitConfig {
                hidden: PROBE_HIDDEN,
                epochs: 6,
                batch_size: 256,
                lr: 3e-3,
                weight_decay: 1e-4,
            },
            emotion: FitConfig {
                hidden: PROBE_HIDDEN,
                epochs: 60,
                batch_size: 64,
                lr: 3e-3,
                weight_decay: 1e-3,
            },
            speaker: FitConfig {
                hidden: PROBE_HIDDEN,
                epochs: 40,
                batch_size: 64,
                lr: 3e-3,
                weight_decay: 1e-3,
            },
            counterfactual_augment: true,
        }
    }
}

/// The frozen probe set: content, two independent emotion probes (one for
/// the loss, one reserved for evaluation) and a speaker probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeWeights<F: Real = f64> {
    pub content: Probe<F>,
    pub emotion_train: Probe<F>,
    pub emotion_eval: Probe<F>,
    pub speaker: Probe<F>,
    pub metrics: ProbeMetrics,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeFileMeta {
    mel_channels: usize,
    vocab_size: usize,
    n_emotions: usize,
    n_speakers: usize,
    hidden: [usize; 4],
    seed: u64,
    metrics: ProbeMetrics,
    checksums: [String; 4],
}

const PROBE_PREFIXES: [&str; 4] = ["content", "emotion_train", "emotion_eval", "speaker"];

impl<F: Real> ProbeWeights<F> {
    pub fn cast<G: Real>(&self) -> ProbeWeights<G> {
        ProbeWeights {
            content: self.content.cast(),
            emotion_train: self.emotion_train.cast(),
            emotion_eval: self.emotion_eval.cast(),
            speaker: self.speaker.cast(),
            metrics: self.metrics.clone(),
            seed: self.seed,
        }
    }

    /// Random frozen probes with the given class counts.
    pub fn random(
        mel_channels: usize,
        vocab_size: usize,
        n_emotions: usize,
        n_speakers: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let s = |i: u64| derive_seed(seed, &[i]);
        Self {
            content: Probe::random(ProbeKind::Content, mel_channels, hidden, vocab_size, s(0)),
            emotion_train: Probe::random(ProbeKind::Pooled, mel_channels, hidden, n_emotions, s(1)),
            emotion_eval: Probe::random(ProbeKind::Pooled, mel_channels, hidden, n_emotions, s(2)),
            speaker: Probe::random(ProbeKind::Pooled, mel_channels, hidden, n_speakers, s(3)),
            metrics: ProbeMetrics::default(),
            seed,
        }
    }

    fn all(&self) -> [&Probe<F>; 4] {
        [&self.content, &self.emotion_train, &self.emotion_eval, &self.speaker]
    }

    pub fn checksums(&self) -> [String; 4] {
        self.all().map(Probe::checksum)
    }

    pub fn mel_channels(&self) -> usize {
        self.content.mel_channels
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let p = self.all();
        let meta = ProbeFileMeta {
            mel_channels: self.mel_channels(),
            vocab_size: self.content.n_classes(),
            n_emotions: self.emotion_train.n_classes(),
            n_speakers: self.speaker.n_classes(),
            hidden: p.map(Probe::hidden),
            seed: self.seed,
            metrics: self.metrics.clone(),
            checksums: self.checksums(),
        };
        let stores: Vec<(&str, &ParamStore<F>)> = PROBE_PREFIXES.iter().copied().zip(p.map(|x| &x.store)).collect();
        io::write_checkpoint(dir, &meta, &stores)?;
        Ok(())
    }

    /// Loads a saved set; loaded probes are always frozen.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ProbeFileMeta = io::read_metadata(dir)?;
        let c = meta.mel_channels;
        let specs = [
            (ProbeKind::Content, meta.vocab_size),
            (ProbeKind::Pooled, meta.n_emotions),
            (ProbeKind::Pooled, meta.n_emotions),
            (ProbeKind::Pooled, meta.n_speakers),
        ];
        let mut probes = Vec::with_capacity(4);
        for (i, (kind, classes)) in specs.into_iter().enumerate() {
            let template = Probe::<F>::template(kind, c, meta.hidden[i], classes);
            let store = io::read_store(dir, PROBE_PREFIXES[i], &template)?;
            probes.push(Probe::from_store(kind, c, store, true));
        }
        let mut it = probes.into_iter();
        let mut next = || it.next().expect("four probes");
        Ok(Self {
            content: next(),
            emotion_train: next(),
            emotion_eval: next(),
            speaker: next(),
            metrics: meta.metrics,
            seed: meta.seed,
        })
    }
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

fn pooled_matrix(mels: &[&Array2<f64>]) -> Array2<f64> {
    let rows: Vec<Array1<f64>> = mels.iter().map(|m| pooled_stats_array(*m)).collect();
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("same width")
}

fn mean_ce(probs: &[Array2<f64>], labels: &[usize]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[[0, y]].max(1e-300).ln())
        .sum();
    total / labels.len().max(1) as f64
}

/// Trains every probe on oracle mels from the dataset's train split,
/// measures them on its dev split, and freezes them.
pub fn train_probes(data: &Dataset, cfg: &ProbeConfig, seed: u64) -> Result<ProbeWeights<f64>> {
    let params = data.params();
    let train = data.examples(Split::Train);
    let dev = data.examples(Split::Dev);
    if train.is_empty() {
        return Err(ProbeError::Empty("train split"));
    }
    if dev.is_empty() {
        return Err(ProbeError::Empty("dev split"));
    }
    let n_emotions = params.n_emotions();
    let mut seen = vec![false; n_emotions];
    for ex in train {
        seen[ex.emotion] = true;
    }
    let distinct = seen.iter().filter(|&&s| s).count();
    if distinct < n_emotions {
        return Err(ProbeError::MissingEmotions(distinct));
    }
    let channels = params.mel_channels;
    let to64 = |ex: &Example| ex.mel.mapv(f64::from);

    // Content: every train frame.
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for ex in train {
        frames.push(to64(ex));
        labels.extend(frame_labels(&ex.phonemes, &ex.durations));
    }
    let views: Vec<_> = frames.iter().map(|m| m.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).expect("same width");
    let content_store = fit_mlp(&x, &labels, params.vocab_size, cfg.content, named_seed(seed, "probe.content"));
    let content = Probe::from_store(ProbeKind::Content, channels, content_store, true);

    // Pooled probes: observed utterances, optionally with counterfactual
    // renders of the same utterances under every other emotion.
    let mut pooled_mels: Vec<(Array2<f64>, usize, usize, usize)> = Vec::new();
    for (i, ex) in train.iter().enumerate() {
        pooled_mels.push((to64(ex), ex.emotion, ex.speaker, i));
        if cfg.counterfactual_augment {
            let u = data.utterance(&ex.id)?;
            for e in (0..n_emotions).filter(|&e| e != u.emotion) {
                let cf = scm::counterfactual_utterance(params, &u, e)?;
                pooled_mels.push((cf.mel, e, u.speaker, i));
            }
        }
    }
    let fit_pooled = |filter: &dyn Fn(usize) -> bool, by_speaker: bool, fit: FitConfig, s: u64| {
        let rows: Vec<_> = pooled_mels.iter().filter(|r| filter(r.3)).collect();
        let mels: Vec<&Array2<f64>> = rows.iter().map(|r| &r.0).collect();
        let y: Vec<usize> = rows.iter().map(|r| if by_speaker { r.2 } else { r.1 }).collect();
        let classes = if by_speaker { params.n_speakers } else { n_emotions };
        fit_mlp(&pooled_matrix(&mels), &y, classes, fit, s)
    };
    let emotion_train = Probe::from_store(
        ProbeKind::Pooled,
        channels,
        fit_pooled(&|i| i % 2 == 0, false, cfg.emotion, named_seed(seed, "probe.emotion.train")),
        true,
    );
    let emotion_eval = Probe::from_store(
        ProbeKind::Pooled,
        channels,
        fit_pooled(&|i| i % 2 == 1, false, cfg.emotion, named_seed(seed, "probe.emotion.eval")),
        true,
    );
    let speaker = Probe::from_store(
        ProbeKind::Pooled,
        channels,
        fit_pooled(&|_| true, true, cfg.speaker, named_seed(seed, "probe.speaker")),
        true,
    );

    // Oracle dev measurements.
    let mut frame_hits = 0usize;
    let mut frame_total = 0usize;
    let mut content_ce = 0.0;
    let mut e_pred = [Vec::new(), Vec::new()];
    let mut e_probs = Vec::new();
    let mut s_pred = Vec::new();
    for ex in dev {
        let labels = frame_labels(&ex.phonemes, &ex.durations);
        let m = to64(ex);
        let probs = content.probabilities(&m)?;
        for (r, &y) in probs.rows().into_iter().zip(&labels) {
            content_ce -= r[y].max(1e-300).ln();
            if argmax(r.iter().copied()) == y {
                frame_hits += 1;
            }
        }
        frame_total += labels.len();
        e_pred[0].push(emotion_train.predict(&m)?[0]);
        e_pred[1].push(emotion_eval.predict(&m)?[0]);
        e_probs.push(emotion_train.probabilities(&m)?);
        s_pred.push(speaker.predict(&m)?[0]);
    }
    let e_truth: Vec<usize> = dev.iter().map(|e| e.emotion).collect();
    let s_truth: Vec<usize> = dev.iter().map(|e| e.speaker).collect();
    let metrics = ProbeMetrics {
        content_dev_accuracy: frame_hits as f64 / frame_total as f64,
        content_dev_loss: content_ce / frame_total as f64,
        emotion_train_probe_dev_accuracy: accuracy(&e_pred[0], &e_truth),
        emotion_eval_probe_dev_accuracy: accuracy(&e_pred[1], &e_truth),
        emotion_dev_loss: mean_ce(&e_probs, &e_truth),
        speaker_dev_accuracy: accuracy(&s_pred, &s_truth),
        dev_frames: frame_total,
        dev_utterances: dev.len(),
    };
    Ok(ProbeWeights {
        content,
        emotion_train,
        emotion_eval,
        speaker,
        metrics,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pooled_stats_graph_matches_array() {
        let m = array![[0.1, -0.4], [0.5, 0.2], [-0.3, 0.9]];
        let mut g = Graph::<f64>::new(None);
        let x = g.constant(m.clone());
        let p = pooled_stats(&mut g, x);
        let got = g.value(p).row(0).to_owned();
        let want = pooled_stats_array(&m);
        assert_eq!(got.len(), 6);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((want[0] - 0.1).abs() < 1e-12);
        assert!((want[4] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn single_frame_has_zero_delta() {
        let p = pooled_stats_array(&array![[1.0, 2.0]]);
        assert_eq!(p[4], 0.0);
        assert_eq!(p[5], 0.0);
    }

    #[test]
    fn folded_normalisation_matches_standardised_inputs() {
        let x = array![[1.0, 10.0], [2.0, 30.0], [3.0, 20.0], [4.0, 40.0]];
        let y = vec![0, 0, 1, 1];
        let cfg = FitConfig {
            hidden: 4,
            epochs: 200,
            batch_size: 4,
            lr: 1e-2,
            weight_decay: 0.0,
        };
        let store = fit_mlp(&x, &y, 2, cfg, 5);
        let p = Probe::from_store(ProbeKind::Content, 2, store, true);
        assert_eq!(p.predict(&x).unwrap(), y);
    }

    #[test]
    fn frame_labels_follow_durations() {
        assert_eq!(frame_labels(&[4, 7], &[2, 1]), vec![4, 4, 7]);
    }
}
