use cpm::autograd::global_norm;
use cpm::model::length_regulate_indices;
use cpm::objectives::LossBreakdown;
use cpm::optim::clip_grad_norm;
use cpm::scm::{self, counterfactual_utterance, sample_utterance, ScmConfig, ScmParams};
use cpm::trainer::sample_other_emotion;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn world() -> &'static ScmParams {
    static W: OnceLock<ScmParams> = OnceLock::new();
    W.get_or_init(|| ScmParams::generate(&ScmConfig::default()).unwrap())
}

fn world_kappa(k: f64) -> ScmParams {
    world().with_kappa(k)
}

proptest! {
    #[test]
    fn regulated_length_is_duration_sum(d in prop::collection::vec(0usize..12, 1..40)) {
        prop_assume!(d.iter().any(|&k| k > 0));
        let idx = length_regulate_indices(&d).unwrap();
        prop_assert_eq!(idx.len(), d.iter().sum::<usize>());
    }

    #[test]
    fn unit_durations_are_identity(n in 1usize..60) {
        let idx = length_regulate_indices(&vec![1; n]).unwrap();
        prop_assert_eq!(idx, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn regulated_pattern_repeats_in_order(d in prop::collection::vec(0usize..8, 1..30)) {
        prop_assume!(d.iter().any(|&k| k > 0));
        let idx = length_regulate_indices(&d).unwrap();
        let expected: Vec<usize> = d.iter().enumerate().flat_map(|(i, &k)| std::iter::repeat_n(i, k)).collect();
        prop_assert_eq!(idx, expected);
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>()) {
        let a = sample_utterance(world(), seed).unwrap();
        let b = sample_utterance(world(), seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn counterfactual_under_own_emotion_is_identity(seed in any::<u64>(), kappa in prop_oneof![Just(0.0), 0.0f64..1.0]) {
        let w = world_kappa(kappa);
        let u = sample_utterance(&w, seed).unwrap();
        let cf = counterfactual_utterance(&w, &u, u.emotion).unwrap();
        prop_assert_eq!(cf, u);
    }

    #[test]
    fn oracle_direct_effect_vanishes_without_direct_edge(seed in any::<u64>(), e in 0usize..5) {
        let w = world_kappa(0.0);
        let u = sample_utterance(&w, seed).unwrap();
        let r = scm::oracle_effects(&w, &u, e).unwrap();
        prop_assert_eq!(r.nde, 0.0);
        prop_assert!(r.decomposition_residual.abs() < 1e-9);
    }

    #[test]
    fn composition_identity_holds(
        c in prop::array::uniform7(0.0f64..10.0),
        beta_ipc in 0.0f64..2.0,
        beta_cpc in 0.0f64..2.0,
        lambda_emo in 0.0f64..2.0,
    ) {
        let w = cpm::objectives::LossWeights { beta_ipc, beta_cpc, lambda_emo, ..Default::default() };
        let b = LossBreakdown::compose(c, w);
        prop_assert!(b.composition_error() < 1e-9);
        let expect_cpc = c[5] + lambda_emo * c[6];
        prop_assert!((b.l_cpc - expect_cpc).abs() < 1e-9);
    }

    #[test]
    fn other_emotion_differs(seed in any::<u64>(), e in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let x = sample_other_emotion(&mut rng, e, 5);
            prop_assert!(x != e && x < 5);
        }
    }

    #[test]
    fn clipped_norm_is_bounded(
        vals in prop::collection::vec(-1e3f64..1e3, 1..64),
        max in 0.01f64..5.0,
    ) {
        let n = vals.len();
        let mut grads = vec![Some(Array2::from_shape_vec((1, n), vals).unwrap()), None];
        clip_grad_norm(&mut grads, max);
        prop_assert!(global_norm(&grads) <= max + 1e-6);
    }
}
