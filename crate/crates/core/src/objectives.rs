//! Loss terms: the base synthesis losses, the indirect-path constraint and
//! the counterfactual prosody constraint, plus their weighted composition.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::io::Example;
use crate::model::pitch_to_norm;
use crate::probes::{frame_labels, Probe, ProbeError, ProbeKind};
use crate::Real;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch for {what}: {got:?} vs {expected:?}")]
    Shape {
        what: &'static str,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("expected a {expected:?} probe")]
    WrongProbe { expected: ProbeKind },
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_p: f64,
    pub lambda_u: f64,
    pub lambda_emo: f64,
    pub beta_ipc: f64,
    pub beta_cpc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_p: 1.0,
            lambda_u: 1.0,
            lambda_emo: 1.0,
            beta_ipc: 1.0,
            beta_cpc: 0.5,
        }
    }
}

/// Scalar loss values for one example or a batch mean, with the weights
/// that combined them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBreakdown {
    pub l_mel: f64,
    pub l_dur: f64,
    pub l_pitch: f64,
    pub l_energy: f64,
    pub l_ipc: f64,
    pub l_content: f64,
    pub l_emo_clf: f64,
    pub l_cpc: f64,
    pub l_total: f64,
    pub lambda_d: f64,
    pub lambda_p: f64,
    pub lambda_u: f64,
    pub lambda_emo: f64,
    pub beta_ipc: f64,
    pub beta_cpc: f64,
}

impl LossBreakdown {
    /// Builds a breakdown from raw components, deriving `l_cpc` and `l_total`.
    pub fn compose(components: [f64; 7], w: LossWeights) -> Self {
        let [l_mel, l_dur, l_pitch, l_energy, l_ipc, l_content, l_emo_clf] = components;
        let mut b = Self {
            l_mel,
            l_dur,
            l_pitch,
            l_energy,
            l_ipc,
            l_content,
            l_emo_clf,
            l_cpc: cpc_loss(l_content, l_emo_clf, w.lambda_emo),
            l_total: 0.0,
            lambda_d: w.lambda_d,
            lambda_p: w.lambda_p,
            lambda_u: w.lambda_u,
            lambda_emo: w.lambda_emo,
            beta_ipc: w.beta_ipc,
            beta_cpc: w.beta_cpc,
        };
        b.l_total = total_loss(&b, w.beta_ipc, w.beta_cpc);
        b
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_d: self.lambda_d,
            lambda_p: self.lambda_p,
            lambda_u: self.lambda_u,
            lambda_emo: self.lambda_emo,
            beta_ipc: self.beta_ipc,
            beta_cpc: self.beta_cpc,
        }
    }

    pub fn l_base(&self) -> f64 {
        self.l_mel + self.lambda_d * self.l_dur + self.lambda_p * self.l_pitch + self.lambda_u * self.l_energy
    }

    /// `|l_total - recomputed|` plus `|l_cpc - recomputed|`.
    pub fn composition_error(&self) -> f64 {
        let cpc = cpc_loss(self.l_content, self.l_emo_clf, self.lambda_emo);
        let total = self.l_base() + self.beta_ipc * self.l_ipc + self.beta_cpc * self.l_cpc;
        (self.l_cpc - cpc).abs() + (self.l_total - total).abs()
    }

    pub fn components(&self) -> [f64; 9] {
        [
            self.l_mel,
            self.l_dur,
            self.l_pitch,
            self.l_energy,
            self.l_ipc,
            self.l_content,
            self.l_emo_clf,
            self.l_cpc,
            self.l_total,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|x| x.is_finite())
    }

    /// Component-wise mean of several breakdowns that share weights.
    pub fn mean(items: &[Self]) -> Self {
        let Some(first) = items.first() else {
            return Self::default();
        };
        let n = items.len() as f64;
        let avg = |f: fn(&Self) -> f64| items.iter().map(f).sum::<f64>() / n;
        let mut b = Self::compose(
            [
                avg(|b| b.l_mel),
                avg(|b| b.l_dur),
                avg(|b| b.l_pitch),
                avg(|b| b.l_energy),
                avg(|b| b.l_ipc),
                avg(|b| b.l_content),
                avg(|b| b.l_emo_clf),
            ],
            first.weights(),
        );
        b.l_total = total_loss(&b, b.beta_ipc, b.beta_cpc);
        b
    }
}

/// `content + lambda_emo * emo`.
pub fn cpc_loss(content: f64, emo: f64, lambda_emo: f64) -> f64 {
    content + lambda_emo * emo
}

/// Weighted total from a breakdown's components.
pub fn total_loss(b: &LossBreakdown, beta_ipc: f64, beta_cpc: f64) -> f64 {
    b.l_base() + beta_ipc * b.l_ipc + beta_cpc * b.l_cpc
}

/// Graph handles of the four base components.
#[derive(Clone, Copy, Debug)]
pub struct BaseLoss {
    pub mel: Var,
    pub dur: Var,
    pub pitch: Var,
    pub energy: Var,
}

impl BaseLoss {
    pub fn weighted<F: Real>(&self, g: &mut Graph<'_, F>, w: &LossWeights) -> Var {
        let d = g.scale(self.dur, w.lambda_d);
        let p = g.scale(self.pitch, w.lambda_p);
        let u = g.scale(self.energy, w.lambda_u);
        let a = g.add(self.mel, d);
        let b = g.add(p, u);
        g.add(a, b)
    }
}

/// Ground truth in the model's target domains.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets<F: Real> {
    pub mel: Array2<F>,
    /// `ln(duration)`, `[n, 1]`.
    pub log_durations: Array2<F>,
    /// Normalised pitch, `[n, 1]`.
    pub pitch: Array2<F>,
    pub energy: Array2<F>,
}

impl<F: Real> Targets<F> {
    pub fn from_example(ex: &Example) -> Self {
        let n = ex.phonemes.len();
        let col = |f: &dyn Fn(usize) -> f64| Array2::from_shape_fn((n, 1), |(i, _)| F::c(f(i)));
        Self {
            mel: ex.mel.mapv(|x| F::c(f64::from(x))),
            log_durations: col(&|i| (ex.durations[i] as f64).ln()),
            pitch: col(&|i| pitch_to_norm(ex.pitch[i])),
            energy: col(&|i| ex.energy[i]),
        }
    }
}

fn same_shape<F: Real>(g: &Graph<'_, F>, what: &'static str, a: Var, b: Var) -> Result<()> {
    let (ga, gb) = (g.shape(a), g.shape(b));
    if ga != gb {
        return Err(LossError::Shape {
            what,
            got: ga,
            expected: gb,
        });
    }
    Ok(())
}

/// Mel L1 plus log-duration, pitch and energy MSE. `var_*` order is
/// `[log duration, pitch, energy]`.
pub fn base_loss<F: Real>(
    g: &mut Graph<'_, F>,
    mel_hat: Var,
    mel_gt: Var,
    var_hat: [Var; 3],
    var_gt: [Var; 3],
) -> Result<BaseLoss> {
    same_shape(g, "mel", mel_hat, mel_gt)?;
    for (what, (&a, &b)) in ["log duration", "pitch", "energy"].into_iter().zip(var_hat.iter().zip(&var_gt)) {
        same_shape(g, what, a, b)?;
    }
    Ok(BaseLoss {
        mel: g.l1(mel_hat, mel_gt),
        dur: g.mse(var_hat[0], var_gt[0]),
        pitch: g.mse(var_hat[1], var_gt[1]),
        energy: g.mse(var_hat[2], var_gt[2]),
    })
}

/// Mean absolute difference; `mel_base` is a constant.
pub fn ipc_loss<F: Real>(g: &mut Graph<'_, F>, mel_direct: Var, mel_base: Var) -> Var {
    let base = g.detach(mel_base);
    g.l1(mel_direct, base)
}

/// Frame-aligned phoneme cross-entropy of a frozen content probe.
pub fn content_loss<'p, F: Real>(
    g: &mut Graph<'p, F>,
    mel_cf: Var,
    phonemes: &[usize],
    cf_durations: &[usize],
    probe: &'p Probe<F>,
) -> Result<Var> {
    probe.require_frozen()?;
    if probe.kind() != ProbeKind::Content {
        return Err(LossError::WrongProbe {
            expected: ProbeKind::Content,
        });
    }
    let labels = frame_labels(phonemes, cf_durations);
    let frames = g.shape(mel_cf).0;
    if labels.len() != frames {
        return Err(ProbeError::Alignment {
            got: labels.len(),
            expected: frames,
        }
        .into());
    }
    let logits = probe.logits(g, mel_cf)?;
    Ok(g.cross_entropy(logits, labels))
}

/// `-log P(e_prime | mel_cf)` under a frozen pooled emotion probe.
pub fn emo_clf_loss<'p, F: Real>(g: &mut Graph<'p, F>, mel_cf: Var, e_prime: usize, probe: &'p Probe<F>) -> Result<Var> {
    probe.require_frozen()?;
    if probe.kind() != ProbeKind::Pooled {
        return Err(LossError::WrongProbe {
            expected: ProbeKind::Pooled,
        });
    }
    let logits = probe.logits(g, mel_cf)?;
    Ok(g.cross_entropy(logits, vec![e_prime]))
}

/// Graph form of [`cpc_loss`].
pub fn cpc_loss_var<F: Real>(g: &mut Graph<'_, F>, content: Var, emo: Var, lambda_emo: f64) -> Var {
    let e = g.scale(emo, lambda_emo);
    g.add(content, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn base_loss_hand_computed() {
        let mut g = Graph::<f64>::new(None);
        let a = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.constant(array![[0.0, 1.0], [3.0, 2.0]]);
        let v = g.constant(array![[0.5], [1.0]]);
        let w = g.constant(array![[0.5], [2.0]]);
        let l = base_loss(&mut g, a, b, [v, v, v], [w, v, v]).unwrap();
        assert!(close(g.scalar(l.mel), 1.0));
        assert!(close(g.scalar(l.dur), 0.5));
        assert_eq!(g.scalar(l.pitch), 0.0);
        let same = base_loss(&mut g, a, a, [v, v, v], [v, v, v]).unwrap();
        let total = same.weighted(&mut g, &LossWeights::default());
        assert_eq!(g.scalar(total), 0.0);
    }

    #[test]
    fn base_loss_rejects_shape_mismatch() {
        let mut g = Graph::<f64>::new(None);
        let a = g.constant(Array2::zeros((3, 2)));
        let b = g.constant(Array2::zeros((2, 2)));
        let v = g.constant(Array2::zeros((2, 1)));
        assert!(base_loss(&mut g, a, b, [v, v, v], [v, v, v]).is_err());
        assert!(base_loss(&mut g, b, b, [a, v, v], [v, v, v]).is_err());
    }

    #[test]
    fn ipc_constant_shift() {
        let mut g = Graph::<f64>::new(None);
        let a = g.constant(array![[1.0, 2.0], [0.0, -1.0]]);
        let b = g.constant(array![[1.5, 2.5], [0.5, -0.5]]);
        let l = ipc_loss(&mut g, b, a);
        assert!(close(g.scalar(l), 0.5));
        let z = ipc_loss(&mut g, a, a);
        assert_eq!(g.scalar(z), 0.0);
    }

    #[test]
    fn cpc_and_total_arithmetic() {
        assert!(close(cpc_loss(0.2, 0.4, 1.0), 0.6));
        assert!(close(cpc_loss(0.2, 0.4, 0.0), 0.2));
        assert!(close(cpc_loss(0.1, 0.3, 0.5), 0.25));
        let w = LossWeights {
            lambda_emo: 1.0,
            ..LossWeights::default()
        };
        // base 1.0 in l_mel; ipc 0.2; cpc 0.4 split into content 0.4 and emo 0.
        let b = LossBreakdown::compose([1.0, 0.0, 0.0, 0.0, 0.2, 0.4, 0.0], w);
        assert!(close(b.l_total, 1.4));
        assert!(close(total_loss(&b, 0.0, 0.0), 1.0));
        assert!(b.composition_error() < 1e-15);
        let zero = LossBreakdown::compose([0.0; 7], w);
        assert_eq!(zero.l_total, 0.0);
    }

    #[test]
    fn mean_keeps_composition() {
        let w = LossWeights::default();
        let a = LossBreakdown::compose([1.0, 0.3, 0.2, 0.1, 0.05, 0.7, 1.2], w);
        let b = LossBreakdown::compose([0.5, 0.1, 0.4, 0.3, 0.15, 0.2, 0.6], w);
        let m = LossBreakdown::mean(&[a, b]);
        assert!(m.composition_error() < 1e-12);
        assert!(close(m.l_total, (a.l_total + b.l_total) / 2.0));
    }
}
