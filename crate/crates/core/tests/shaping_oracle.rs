use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stepreward::shaping::{
    shape_clip, shape_clip_delta, shape_delta, shape_pr_normed, step_return, trajectory_return, RewardCoefficients,
    SchemeKind, ShapingScheme,
};
use stepreward::trajectory::StepRewardSeq;
use stepreward_oracle::{oracle_shape, oracle_suffix_return, OracleBudget, OracleScheme};

fn seq(v: &[f64]) -> StepRewardSeq {
    StepRewardSeq::new(v.to_vec()).unwrap()
}

fn oracle_scheme(kind: SchemeKind, eta: f64, c: f64, outcome: f64) -> OracleScheme<'static> {
    OracleScheme {
        name: kind.name(),
        eta,
        c_penalty: c,
        outcome,
    }
}

fn shaped(kind: SchemeKind, raw: &[f64], eta: f64, c: f64, outcome: f64) -> StepRewardSeq {
    let s = ShapingScheme::new(kind, eta, c).unwrap();
    s.shape_batch(&[seq(raw)], Some(&[outcome])).unwrap().remove(0)
}

#[test]
fn delta_return_is_one_step_of_raw_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let coeffs = RewardCoefficients::default();
    for _ in 0..1000 {
        let k_len = rng.random_range(1..=50);
        let raw: Vec<f64> = (0..k_len).map(|_| rng.random::<f64>()).collect();
        let correct = rng.random_bool(0.5);
        let success = if correct { coeffs.success_coef } else { 0.0 };
        let d = shape_delta(&seq(&raw)).unwrap();
        for k in 1..=k_len {
            let want = if k < k_len { coeffs.alpha * raw[k - 1] + success } else { success };
            let got = step_return(&d, correct, k, &coeffs).unwrap();
            assert!((got - want).abs() < 1e-9, "K={k_len} k={k}: {got} vs {want}");
        }
    }
}

#[test]
fn clip_delta_return_is_bounded_by_success() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let coeffs = RewardCoefficients::default();
    for _ in 0..1000 {
        let k_len = rng.random_range(1..=40);
        let raw: Vec<f64> = (0..k_len).map(|_| rng.random::<f64>()).collect();
        let eta = rng.random_range(-0.5..1.5);
        let s = shape_clip_delta(&seq(&raw), eta).unwrap();
        // telescoping leaves the first clipped value, which is <= 0
        let r = trajectory_return(&s, true, &coeffs).unwrap();
        assert!(r <= coeffs.success_coef + 1e-12);
        assert!((r - coeffs.success_coef - (raw[0] - eta).min(0.0) * f64::from(k_len > 1)).abs() < 1e-12);
        for x in shape_clip(&seq(&raw), eta).unwrap().values() {
            assert!(*x <= 0.0);
        }
    }
}

#[test]
fn every_scheme_matches_the_oracle_on_fixed_cases() {
    let b = OracleBudget::default();
    let raw = [0.2, 0.9, 0.4, 0.7, 0.1];
    for kind in SchemeKind::ALL {
        let s = shaped(kind, &raw, 0.5, 0.1, 0.8);
        let o = oracle_shape(&raw, &oracle_scheme(kind, 0.5, 0.1, 0.8)).unwrap();
        for (a, e) in s.values().iter().zip(&o) {
            assert!((a - e).abs() < 1e-12, "{kind}");
        }
        for k in 1..=raw.len() {
            let got = step_return(&s, true, k, &RewardCoefficients::default()).unwrap();
            let want = oracle_suffix_return(&raw, &oracle_scheme(kind, 0.5, 0.1, 0.8), true, 1.0, 5.0, k, &b).unwrap();
            assert!((got - want).abs() < 1e-12, "{kind} k={k}");
        }
    }
}

#[test]
fn normed_batches_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let batch: Vec<StepRewardSeq> = (0..n)
            .map(|_| {
                let k = rng.random_range(1..30);
                seq(&(0..k).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>())
            })
            .collect();
        let total: usize = batch.iter().map(StepRewardSeq::len).sum();
        if total < 2 {
            assert!(shape_pr_normed(&batch).is_err());
            continue;
        }
        let out = shape_pr_normed(&batch).unwrap();
        let all: Vec<f64> = out.iter().flat_map(|s| s.values().to_vec()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let sd = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (all.len() - 1) as f64).sqrt();
        assert!(mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
    }
}

#[test]
fn constant_batch_cannot_be_normed() {
    assert!(shape_pr_normed(&[seq(&[0.3, 0.3]), seq(&[0.3])]).is_err());
}

fn arb_case() -> impl Strategy<Value = (usize, Vec<f64>, f64, f64, f64, bool, f64, f64)> {
    (
        0..SchemeKind::ALL.len(),
        prop::collection::vec(-2.0f64..2.0, 2..30),
        -1.0f64..2.0,
        0.0f64..0.5,
        0.0f64..1.0,
        any::<bool>(),
        0.0f64..3.0,
        0.1f64..10.0,
    )
}

proptest! {
    #[test]
    fn suffix_returns_match_the_oracle((ki, raw, eta, c, outcome, correct, alpha, success) in arb_case()) {
        let kind = SchemeKind::ALL[ki];
        let coeffs = RewardCoefficients { alpha, success_coef: success, beta: 0.0 };
        let s = shaped(kind, &raw, eta, c, outcome);
        let os = oracle_scheme(kind, eta, c, outcome);
        let b = OracleBudget::default();
        for k in 1..=raw.len() {
            let got = step_return(&s, correct, k, &coeffs).unwrap();
            let want = oracle_suffix_return(&raw, &os, correct, alpha, success, k, &b).unwrap();
            prop_assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{} k={}: {} vs {}", kind, k, got, want);
        }
    }

    #[test]
    fn clip_then_delta_composes(raw in prop::collection::vec(0.0f64..1.0, 1..40), eta in 0.0f64..1.0) {
        let a = shape_clip_delta(&seq(&raw), eta).unwrap();
        let b = shape_delta(&shape_clip(&seq(&raw), eta).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}
