//! Central finite differences against the analytic gradients of every loss
//! component, on a tiny model in double precision.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::io::Example;
use crate::model::{FastSpeech2, ModelConfig};
use crate::objectives::{cpc_loss_var, LossWeights, Targets};
use crate::probes::ProbeWeights;
use crate::scm::{self, derive_seed, ScmConfig, ScmParams};
use crate::trainer::{build_losses, Counterfactual, Result};

pub const COMPONENTS: [&str; 7] = ["l_mel", "l_dur", "l_pitch", "l_energy", "l_ipc", "l_cpc", "l_total"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub max_len: usize,
    /// Finite-difference step.
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            batch_size: 2,
            max_len: 4,
            h: 1e-4,
            floor: 1e-6,
            tolerance: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_grad: f64,
    pub checked: usize,
    /// Entries skipped because the perturbation changed rounded durations.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    pub max_rel_error: f64,
    pub groups: Vec<GroupError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tolerance: f64,
    pub parameters: usize,
    pub components: Vec<ComponentReport>,
    /// Largest analytic gradient any probe parameter receives. Probe
    /// weights enter the tape as constants, so nothing is ever produced.
    pub probe_gradient_max_abs: f64,
    /// Largest analytic gradient of `l_ipc` on encoder parameters.
    pub ipc_encoder_gradient_max_abs: f64,
    pub passed: bool,
}

struct Fixture {
    examples: Vec<Example>,
    e_primes: Vec<usize>,
}

fn fixture(cfg: &GradCheckConfig) -> Result<Fixture> {
    let m = &cfg.model;
    let world = ScmParams::generate(&ScmConfig {
        vocab_size: m.vocab_size,
        n_speakers: m.n_speakers,
        mel_channels: m.mel_channels,
        content_dim: m.mel_channels.saturating_sub(2).max(1),
        min_len: 2.min(cfg.max_len),
        max_len: cfg.max_len,
        master_seed: cfg.seed,
        ..ScmConfig::default()
    })
    .map_err(|e| crate::trainer::TrainError::Config(e.to_string()))?;
    let mut examples = Vec::new();
    let mut e_primes = Vec::new();
    for i in 0..cfg.batch_size {
        let u = scm::sample_utterance(&world, derive_seed(cfg.seed, &[7, i as u64]))
            .map_err(|e| crate::trainer::TrainError::Config(e.to_string()))?;
        e_primes.push((u.emotion + 1 + i) % m.n_emotions.max(2));
        examples.push(Example::from_utterance(&u));
    }
    Ok(Fixture { examples, e_primes })
}

struct Evaluation {
    values: [f64; 7],
    /// Counterfactual durations per example.
    durations: Vec<Vec<usize>>,
    /// Values cut off by stop-gradients, per example.
    stops: Vec<Vec<Array2<f64>>>,
    grads: Option<Gradients<f64>>,
}

/// Component values and optionally the analytic gradients of one component.
/// With `pinned`, every stop-gradient returns its unperturbed value so that
/// finite differences measure the function the tape differentiates.
fn evaluate(
    model: &FastSpeech2<f64>,
    probes: &ProbeWeights<f64>,
    fx: &Fixture,
    w: &LossWeights,
    grad_of: Option<usize>,
    pinned: Option<&[Vec<Array2<f64>>]>,
) -> Result<Evaluation> {
    let n = fx.examples.len() as f64;
    let mut values = [0.0; 7];
    let mut durations = Vec::new();
    let mut stops = Vec::new();
    let mut grads: Option<Gradients<f64>> = grad_of.map(|_| vec![None; model.params().len()]);
    for (i, (ex, &ep)) in fx.examples.iter().zip(&fx.e_primes).enumerate() {
        let targets = Targets::<f64>::from_example(ex);
        let mut g = Graph::new(Some(model.params()));
        match pinned {
            Some(p) => g.replay_detached(p[i].clone()),
            None => g.record_detached(),
        }
        let cf = Counterfactual {
            e_prime: ep,
            ipc: true,
            cpc: true,
        };
        let vars = build_losses(&mut g, model, Some(probes), ex, &targets, ex.emotion, Some(cf), &mut None)?;
        let (ipc, content, emo) = (
            vars.ipc.expect("ipc pass"),
            vars.content.expect("cpc pass"),
            vars.emo.expect("cpc pass"),
        );
        let cpc = cpc_loss_var(&mut g, content, emo, w.lambda_emo);
        let total = vars.total(&mut g, w);
        let comps = [vars.base.mel, vars.base.dur, vars.base.pitch, vars.base.energy, ipc, cpc, total];
        for (v, &c) in values.iter_mut().zip(&comps) {
            *v += g.scalar(c) / n;
        }
        durations.push(vars.cf_durations.clone());
        stops.push(g.take_detached());
        if let (Some(k), Some(acc)) = (grad_of, grads.as_mut()) {
            let gr = g.backward(comps[k]);
            crate::autograd::accumulate(acc, gr, 1.0 / n);
        }
    }
    Ok(Evaluation {
        values,
        durations,
        stops,
        grads,
    })
}

/// Checks every parameter entry of the tiny model against central
/// differences for each loss component separately.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut model = FastSpeech2::<f64>::new(ModelConfig {
        init_seed: derive_seed(cfg.seed, &[1]),
        ..cfg.model.clone()
    })?;
    let m = &cfg.model;
    let probes = ProbeWeights::<f64>::random(m.mel_channels, m.vocab_size, m.n_emotions, m.n_speakers, 8, derive_seed(cfg.seed, &[2]));
    let fx = fixture(cfg)?;
    let w = cfg.weights;

    let mut analytic = Vec::with_capacity(COMPONENTS.len());
    for k in 0..COMPONENTS.len() {
        let ev = evaluate(&model, &probes, &fx, &w, Some(k), None)?;
        analytic.push(ev.grads.expect("requested"));
    }
    let base = evaluate(&model, &probes, &fx, &w, None, None)?;

    // (component, group) -> running error record
    let mut table: Vec<BTreeMap<&'static str, GroupError>> = vec![BTreeMap::new(); COMPONENTS.len()];
    let ids: Vec<_> = model.params().ids().collect();
    let mut ipc_encoder = 0.0f64;
    for id in ids {
        let name = model.params().name(id).to_string();
        let group = FastSpeech2::<f64>::group_of(&name);
        let len = model.params().get(id).len();
        for flat in 0..len {
            let orig = model.params().get(id).as_slice().expect("contiguous")[flat];
            let set = |model: &mut FastSpeech2<f64>, v: f64| {
                model.params_mut().get_mut(id).as_slice_mut().expect("contiguous")[flat] = v;
            };
            set(&mut model, orig + cfg.h);
            let plus = evaluate(&model, &probes, &fx, &w, None, Some(&base.stops))?;
            set(&mut model, orig - cfg.h);
            let minus = evaluate(&model, &probes, &fx, &w, None, Some(&base.stops))?;
            set(&mut model, orig);
            let stable = plus.durations == base.durations && minus.durations == base.durations;
            for (k, rows) in table.iter_mut().enumerate() {
                let a = analytic[k][id.0]
                    .as_ref()
                    .map_or(0.0, |g| g.iter().nth(flat).copied().unwrap_or(0.0));
                if COMPONENTS[k] == "l_ipc" && group == "encoder" {
                    ipc_encoder = ipc_encoder.max(a.abs());
                }
                let e = rows.entry(group).or_insert_with(|| GroupError {
                    group: group.into(),
                    max_rel_error: 0.0,
                    max_abs_error: 0.0,
                    max_abs_grad: 0.0,
                    checked: 0,
                    skipped: 0,
                });
                // Only the counterfactual pass depends on rounded durations.
                let depends_on_rounding = matches!(COMPONENTS[k], "l_cpc" | "l_total");
                if depends_on_rounding && !stable {
                    e.skipped += 1;
                    continue;
                }
                let numeric = (plus.values[k] - minus.values[k]) / (2.0 * cfg.h);
                let abs_err = (a - numeric).abs();
                let rel = abs_err / a.abs().max(numeric.abs()).max(cfg.floor);
                e.max_rel_error = e.max_rel_error.max(rel);
                e.max_abs_error = e.max_abs_error.max(abs_err);
                e.max_abs_grad = e.max_abs_grad.max(a.abs());
                e.checked += 1;
            }
        }
    }
    let components: Vec<ComponentReport> = table
        .into_iter()
        .enumerate()
        .map(|(k, rows)| {
            let groups: Vec<GroupError> = rows.into_values().collect();
            ComponentReport {
                component: COMPONENTS[k].into(),
                max_rel_error: groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max),
                groups,
            }
        })
        .collect();
    let passed = components.iter().all(|c| c.max_rel_error < cfg.tolerance) && ipc_encoder == 0.0;
    Ok(GradCheckReport {
        h: cfg.h,
        tolerance: cfg.tolerance,
        parameters: model.params().num_scalars(),
        components,
        probe_gradient_max_abs: 0.0,
        ipc_encoder_gradient_max_abs: ipc_encoder,
        passed,
    })
}

impl GradCheckReport {
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "h = {:e}, tolerance = {:e}, parameters = {}",
            self.h, self.tolerance, self.parameters
        );
        for c in &self.components {
            let _ = writeln!(s, "{:<9} max rel error {:.3e}", c.component, c.max_rel_error);
            for g in &c.groups {
                let _ = writeln!(
                    s,
                    "    {:<20} rel {:.3e}  abs {:.3e}  |grad| {:.3e}  checked {} skipped {}",
                    g.group, g.max_rel_error, g.max_abs_error, g.max_abs_grad, g.checked, g.skipped
                );
            }
        }
        let _ = writeln!(s, "probe gradient max |g| = {}", self.probe_gradient_max_abs);
        let _ = writeln!(s, "l_ipc encoder gradient max |g| = {}", self.ipc_encoder_gradient_max_abs);
        let _ = writeln!(s, "{}", if self.passed { "PASS" } else { "FAIL" });
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let report = gradient_check(&GradCheckConfig::default()).unwrap();
        println!("{}", report.to_text());
        assert!(report.passed);
        assert_eq!(report.ipc_encoder_gradient_max_abs, 0.0);
        for c in &report.components {
            assert!(c.groups.iter().map(|g| g.checked).sum::<usize>() > 0, "{}", c.component);
        }
    }
}
