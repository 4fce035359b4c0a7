//! Dense reward shaping over per-step process rewards.
//!
//! Every transform maps the raw per-step reward-model scores of one solution
//! (or of a whole batch, for standardization) to the dense rewards used in
//! training. The return of a trajectory is `alpha * sum(shaped) +
//! success_coef * correct`; the KL penalty is applied separately by the
//! trainer.
//!
//! * Clip: `min(r_k - eta, 0)`, so no step can earn a positive reward.
//! * Delta: `r_k - r_{k+1}` for `k < K-1`, `r_{K-1}` at `K-1` and `0` at `K`.
//!   The suffix return from any step `k < K` telescopes to `alpha * r_k +
//!   success`, independent of later scores.
//! * Clip-Delta applies Clip and then Delta.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::StepRewardSeq;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapingError {
    #[error("reward sequence is empty")]
    Empty,
    #[error("clip threshold must be finite, got {0}")]
    NonFiniteEta(f64),
    #[error("length penalty must be finite and non-negative, got {0}")]
    InvalidPenalty(f64),
    #[error("batch has zero reward variance")]
    DegenerateBatch,
    #[error("step index {k} out of range for {len} steps")]
    StepOutOfRange { k: usize, len: usize },
    #[error("invalid reward coefficients: {0}")]
    InvalidCoefficients(String),
    #[error("unknown reward scheme {0:?}")]
    UnknownScheme(String),
    #[error("scheme {0} needs {1}")]
    MissingInput(SchemeKind, &'static str),
}

/// Reward scheme, named as in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SchemeKind {
    SuccessOnly,
    Outcome,
    Process,
    ProcessClip,
    ProcessDelta,
    ProcessClipDelta,
    ProcessNormed,
    LengthNorm,
    LengthPenalty,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 9] = [
        SchemeKind::SuccessOnly,
        SchemeKind::Outcome,
        SchemeKind::Process,
        SchemeKind::ProcessClip,
        SchemeKind::ProcessDelta,
        SchemeKind::ProcessClipDelta,
        SchemeKind::ProcessNormed,
        SchemeKind::LengthNorm,
        SchemeKind::LengthPenalty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::SuccessOnly => "SR",
            SchemeKind::Outcome => "SR+OR",
            SchemeKind::Process => "SR+PR",
            SchemeKind::ProcessClip => "SR+PR-Clip",
            SchemeKind::ProcessDelta => "SR+PR-Delta",
            SchemeKind::ProcessClipDelta => "SR+PR-Clip-Delta",
            SchemeKind::ProcessNormed => "SR+PR-Normed",
            SchemeKind::LengthNorm => "SR+PR-LengthNorm",
            SchemeKind::LengthPenalty => "SR+PR-LengthPenalty",
        }
    }

    /// Whether per-step process reward scores are consumed.
    pub fn uses_process_rewards(self) -> bool {
        !matches!(self, SchemeKind::SuccessOnly | SchemeKind::Outcome)
    }

    pub fn uses_clip(self) -> bool {
        matches!(self, SchemeKind::ProcessClip | SchemeKind::ProcessClipDelta)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = ShapingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ShapingError::UnknownScheme(s.to_string()))
    }
}

impl TryFrom<String> for SchemeKind {
    type Error = ShapingError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SchemeKind> for String {
    fn from(k: SchemeKind) -> Self {
        k.name().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingScheme {
    pub kind: SchemeKind,
    /// Clip threshold, in reward units.
    pub eta: f64,
    /// Per-step length penalty, in reward units.
    pub c_penalty: f64,
}

pub const DEFAULT_C_PENALTY: f64 = 0.1;

impl ShapingScheme {
    pub fn new(kind: SchemeKind, eta: f64, c_penalty: f64) -> Result<Self, ShapingError> {
        if !eta.is_finite() {
            return Err(ShapingError::NonFiniteEta(eta));
        }
        if !(c_penalty.is_finite() && c_penalty >= 0.0) {
            return Err(ShapingError::InvalidPenalty(c_penalty));
        }
        Ok(ShapingScheme { kind, eta, c_penalty })
    }

    /// Shapes one sequence. Outcome schemes need the outcome score, and the
    /// batch-standardized scheme must go through [`ShapingScheme::shape_batch`].
    pub fn shape(&self, raw: &StepRewardSeq, outcome: Option<f64>) -> Result<StepRewardSeq, ShapingError> {
        match self.kind {
            SchemeKind::SuccessOnly => {
                non_empty(raw)?;
                Ok(StepRewardSeq::zeros(raw.len()))
            }
            SchemeKind::Outcome => {
                let score = outcome.ok_or(ShapingError::MissingInput(self.kind, "an outcome score"))?;
                shape_outcome(raw.len(), score)
            }
            SchemeKind::Process => shape_pr(raw),
            SchemeKind::ProcessClip => shape_clip(raw, self.eta),
            SchemeKind::ProcessDelta => shape_delta(raw),
            SchemeKind::ProcessClipDelta => shape_clip_delta(raw, self.eta),
            SchemeKind::LengthNorm => shape_length_norm(raw),
            SchemeKind::LengthPenalty => shape_length_penalty(raw, self.c_penalty),
            SchemeKind::ProcessNormed => Err(ShapingError::MissingInput(self.kind, "the whole batch")),
        }
    }

    pub fn shape_batch(
        &self,
        raws: &[StepRewardSeq],
        outcomes: Option<&[f64]>,
    ) -> Result<Vec<StepRewardSeq>, ShapingError> {
        match self.kind {
            SchemeKind::ProcessNormed => shape_pr_normed(raws),
            SchemeKind::Outcome => {
                let outcomes = outcomes.ok_or(ShapingError::MissingInput(self.kind, "outcome scores"))?;
                raws.iter()
                    .zip(outcomes)
                    .map(|(r, &o)| self.shape(r, Some(o)))
                    .collect()
            }
            _ => raws.iter().map(|r| self.shape(r, None)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardCoefficients {
    /// Weight of the dense reward.
    pub alpha: f64,
    /// Reward for a correct solution.
    pub success_coef: f64,
    /// KL penalty weight, consumed by the trainer.
    pub beta: f64,
}

impl Default for RewardCoefficients {
    fn default() -> Self {
        RewardCoefficients {
            alpha: 1.0,
            success_coef: 5.0,
            beta: 0.1,
        }
    }
}

impl RewardCoefficients {
    pub fn validate(&self) -> Result<(), ShapingError> {
        let ok = self.alpha.is_finite()
            && self.alpha >= 0.0
            && self.success_coef.is_finite()
            && self.success_coef > 0.0
            && self.beta.is_finite()
            && self.beta >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(ShapingError::InvalidCoefficients(format!("{self:?}")))
        }
    }
}

fn non_empty(raw: &StepRewardSeq) -> Result<&[f64], ShapingError> {
    if raw.is_empty() {
        Err(ShapingError::Empty)
    } else {
        Ok(raw.values())
    }
}

fn seq(values: Vec<f64>) -> StepRewardSeq {
    StepRewardSeq::new(values).expect("shaping of finite rewards stays finite")
}

pub fn shape_pr(raw: &StepRewardSeq) -> Result<StepRewardSeq, ShapingError> {
    non_empty(raw)?;
    Ok(raw.clone())
}

pub fn shape_clip(raw: &StepRewardSeq, eta: f64) -> Result<StepRewardSeq, ShapingError> {
    if !eta.is_finite() {
        return Err(ShapingError::NonFiniteEta(eta));
    }
    let r = non_empty(raw)?;
    Ok(seq(r.iter().map(|&x| (x - eta).min(0.0)).collect()))
}

pub fn shape_delta(raw: &StepRewardSeq) -> Result<StepRewardSeq, ShapingError> {
    let r = non_empty(raw)?;
    let k = r.len();
    let mut out = vec![0.0; k];
    if k >= 2 {
        for i in 0..k - 2 {
            out[i] = r[i] - r[i + 1];
        }
        out[k - 2] = r[k - 2];
    }
    Ok(seq(out))
}

pub fn shape_clip_delta(raw: &StepRewardSeq, eta: f64) -> Result<StepRewardSeq, ShapingError> {
    shape_delta(&shape_clip(raw, eta)?)
}

pub fn shape_length_norm(raw: &StepRewardSeq) -> Result<StepRewardSeq, ShapingError> {
    let r = non_empty(raw)?;
    let k = r.len() as f64;
    Ok(seq(r.iter().map(|&x| x / k).collect()))
}

pub fn shape_length_penalty(raw: &StepRewardSeq, c_penalty: f64) -> Result<StepRewardSeq, ShapingError> {
    if !(c_penalty.is_finite() && c_penalty >= 0.0) {
        return Err(ShapingError::InvalidPenalty(c_penalty));
    }
    let r = non_empty(raw)?;
    Ok(seq(r
        .iter()
        .enumerate()
        .map(|(i, &x)| x - (i + 1) as f64 * c_penalty)
        .collect()))
}

/// Outcome reward: the whole-solution score placed on the final step.
pub fn shape_outcome(len: usize, score: f64) -> Result<StepRewardSeq, ShapingError> {
    if len == 0 {
        return Err(ShapingError::Empty);
    }
    let mut out = vec![0.0; len];
    out[len - 1] = score;
    StepRewardSeq::new(out).map_err(|_| ShapingError::InvalidCoefficients("non-finite outcome score".into()))
}

/// Standardizes all step rewards of a batch with the pooled mean and sample
/// standard deviation.
pub fn shape_pr_normed(batch: &[StepRewardSeq]) -> Result<Vec<StepRewardSeq>, ShapingError> {
    let n: usize = batch.iter().map(StepRewardSeq::len).sum();
    if n < 2 {
        return Err(ShapingError::DegenerateBatch);
    }
    let mean = batch.iter().flat_map(|s| s.values()).sum::<f64>() / n as f64;
    let var = batch
        .iter()
        .flat_map(|s| s.values())
        .map(|x| (x - mean).powi(2))
        .sum::<f64>()
        / (n - 1) as f64;
    let std = var.sqrt();
    if !(std > 0.0) || std < 1e-12 * mean.abs().max(1.0) {
        return Err(ShapingError::DegenerateBatch);
    }
    Ok(batch
        .iter()
        .map(|s| seq(s.values().iter().map(|x| (x - mean) / std).collect()))
        .collect())
}

/// `alpha * sum(shaped) + success_coef * correct`, without the KL term.
pub fn trajectory_return(
    shaped: &StepRewardSeq,
    correct: bool,
    coeffs: &RewardCoefficients,
) -> Result<f64, ShapingError> {
    step_return(shaped, correct, 1, coeffs)
}

/// Suffix return from step `k` (1-based): `alpha * sum_{i >= k} shaped_i +
/// success_coef * correct`.
pub fn step_return(
    shaped: &StepRewardSeq,
    correct: bool,
    k: usize,
    coeffs: &RewardCoefficients,
) -> Result<f64, ShapingError> {
    let r = non_empty(shaped)?;
    if k == 0 || k > r.len() {
        return Err(ShapingError::StepOutOfRange { k, len: r.len() });
    }
    let dense: f64 = r[k - 1..].iter().sum();
    Ok(coeffs.alpha * dense + if correct { coeffs.success_coef } else { 0.0 })
}

/// Linearly interpolated empirical quantile, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[f64]) -> StepRewardSeq {
        StepRewardSeq::new(v.to_vec()).unwrap()
    }

    fn assert_close(a: &StepRewardSeq, b: &[f64]) {
        assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
        for (x, y) in a.values().iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    const C: RewardCoefficients = RewardCoefficients {
        alpha: 1.0,
        success_coef: 5.0,
        beta: 0.1,
    };

    #[test]
    fn pr_is_identity() {
        assert_close(&shape_pr(&s(&[0.6, 0.7, 0.9])).unwrap(), &[0.6, 0.7, 0.9]);
        assert_close(&shape_pr(&s(&[1.0])).unwrap(), &[1.0]);
        assert_eq!(shape_pr(&s(&[])), Err(ShapingError::Empty));
    }

    #[test]
    fn clip_examples() {
        assert_close(&shape_clip(&s(&[0.9, 0.3, 0.8]), 0.5).unwrap(), &[0.0, -0.2, 0.0]);
        assert_close(&shape_clip(&s(&[0.5, 0.5]), 0.5).unwrap(), &[0.0, 0.0]);
        assert_close(&shape_clip(&s(&[-0.1]), 0.0).unwrap(), &[-0.1]);
        assert!(matches!(shape_clip(&s(&[0.1]), f64::NAN), Err(ShapingError::NonFiniteEta(_))));
        assert!(ShapingScheme::new(SchemeKind::ProcessClip, f64::INFINITY, 0.1).is_err());
    }

    #[test]
    fn delta_examples() {
        assert_close(&shape_delta(&s(&[0.6, 0.7, 0.9])).unwrap(), &[-0.1, 0.7, 0.0]);
        assert_close(&shape_delta(&s(&[0.4])).unwrap(), &[0.0]);
        assert_close(&shape_delta(&s(&[0.4, 0.8])).unwrap(), &[0.4, 0.0]);
    }

    #[test]
    fn clip_delta_examples() {
        assert_close(&shape_clip_delta(&s(&[0.9, 0.3, 0.8]), 0.5).unwrap(), &[0.2, -0.2, 0.0]);
        assert_close(&shape_clip_delta(&s(&[0.9]), 0.5).unwrap(), &[0.0]);
        assert_close(
            &shape_clip_delta(&s(&[0.2, 0.2, 0.2, 0.2]), 0.5).unwrap(),
            &[0.0, 0.0, -0.3, 0.0],
        );
    }

    #[test]
    fn length_norm_examples() {
        assert_close(&shape_length_norm(&s(&[0.6, 0.6, 0.6])).unwrap(), &[0.2, 0.2, 0.2]);
        assert_close(&shape_length_norm(&s(&[0.9])).unwrap(), &[0.9]);
        assert_close(&shape_length_norm(&s(&[1.0, 0.0])).unwrap(), &[0.5, 0.0]);
    }

    #[test]
    fn length_penalty_examples() {
        assert_close(&shape_length_penalty(&s(&[0.5, 0.5]), 0.1).unwrap(), &[0.4, 0.3]);
        assert_close(&shape_length_penalty(&s(&[0.5]), 0.0).unwrap(), &[0.5]);
        assert_close(&shape_length_penalty(&s(&[0.0, 0.0, 0.0]), 1.0).unwrap(), &[-1.0, -2.0, -3.0]);
        assert!(shape_length_penalty(&s(&[0.5]), -0.1).is_err());
    }

    #[test]
    fn normed_examples() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let out = shape_pr_normed(&[s(&[1.0, 3.0])]).unwrap();
        assert_close(&out[0], &[-h, h]);
        assert_eq!(shape_pr_normed(&[s(&[5.0, 5.0, 5.0])]), Err(ShapingError::DegenerateBatch));
        let out = shape_pr_normed(&[s(&[0.0]), s(&[2.0])]).unwrap();
        assert_close(&out[0], &[-h]);
        assert_close(&out[1], &[h]);
        assert_eq!(shape_pr_normed(&[s(&[1.0])]), Err(ShapingError::DegenerateBatch));
    }

    #[test]
    fn return_examples() {
        assert!((trajectory_return(&s(&[-0.1, 0.7, 0.0]), true, &C).unwrap() - 5.6).abs() < 1e-12);
        assert_eq!(trajectory_return(&s(&[]), false, &C), Err(ShapingError::Empty));
        assert_eq!(trajectory_return(&s(&[0.0, 0.0, 0.0]), true, &C).unwrap(), 5.0);
    }

    #[test]
    fn step_return_examples() {
        let d = shape_delta(&s(&[0.6, 0.7, 0.9])).unwrap();
        assert!((step_return(&d, false, 1, &C).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(step_return(&d, false, 3, &C).unwrap(), 0.0);
        assert_eq!(
            step_return(&d, false, 4, &C),
            Err(ShapingError::StepOutOfRange { k: 4, len: 3 })
        );
    }

    #[test]
    fn scheme_names_round_trip() {
        for k in SchemeKind::ALL {
            assert_eq!(k.name().parse::<SchemeKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(serde_json::from_str::<SchemeKind>(&json).unwrap(), k);
        }
        assert!("SR+PRM".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn scheme_dispatch() {
        let raw = s(&[0.9, 0.3, 0.8]);
        let clip_delta = ShapingScheme::new(SchemeKind::ProcessClipDelta, 0.5, 0.1).unwrap();
        assert_close(&clip_delta.shape(&raw, None).unwrap(), &[0.2, -0.2, 0.0]);
        let outcome = ShapingScheme::new(SchemeKind::Outcome, 0.5, 0.1).unwrap();
        assert_close(&outcome.shape(&raw, Some(0.7)).unwrap(), &[0.0, 0.0, 0.7]);
        assert!(outcome.shape(&raw, None).is_err());
        let sr = ShapingScheme::new(SchemeKind::SuccessOnly, 0.5, 0.1).unwrap();
        assert_close(&sr.shape(&raw, None).unwrap(), &[0.0, 0.0, 0.0]);
        let normed = ShapingScheme::new(SchemeKind::ProcessNormed, 0.5, 0.1).unwrap();
        assert!(normed.shape(&raw, None).is_err());
        assert_eq!(normed.shape_batch(&[raw.clone()], None).unwrap().len(), 1);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), Some(2.0));
        assert_eq!(quantile(&[0.0, 1.0], 0.25), Some(0.25));
        assert_eq!(quantile(&[], 0.5), None);
    }

    fn arb_raw(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 1..=max_len)
    }

    proptest! {
        #[test]
        fn clip_never_positive(raw in arb_raw(50), eta in -1.0f64..2.0) {
            let out = shape_clip(&s(&raw), eta).unwrap();
            prop_assert!(out.values().iter().all(|&x| x <= 0.0));
            prop_assert!(trajectory_return(&out, true, &C).unwrap() <= C.success_coef);
        }

        #[test]
        fn delta_telescopes(raw in arb_raw(50)) {
            let out = shape_delta(&s(&raw)).unwrap();
            let expected = if raw.len() >= 2 { raw[0] } else { 0.0 };
            prop_assert!((out.sum() - expected).abs() < 1e-9);
        }

        #[test]
        fn delta_is_prefix_stable(raw in arb_raw(30), extra in arb_raw(10)) {
            let short = shape_delta(&s(&raw)).unwrap();
            let mut longer_raw = raw.clone();
            longer_raw.extend(&extra);
            let long = shape_delta(&s(&longer_raw)).unwrap();
            // 1-based indices k < K_old - 1
            for i in 0..raw.len().saturating_sub(2) {
                prop_assert_eq!(short.values()[i], long.values()[i]);
            }
        }

        #[test]
        fn length_norm_sum(raw in arb_raw(50)) {
            let out = shape_length_norm(&s(&raw)).unwrap();
            let expected = raw.iter().sum::<f64>() / raw.len() as f64;
            prop_assert!((out.sum() - expected).abs() < 1e-9);
        }

        #[test]
        fn normed_has_unit_pooled_moments(batch in prop::collection::vec(arb_raw(20), 1..8)) {
            let seqs: Vec<_> = batch.iter().map(|b| s(b)).collect();
            if let Ok(out) = shape_pr_normed(&seqs) {
                let all: Vec<f64> = out.iter().flat_map(|s| s.values().to_vec()).collect();
                let n = all.len() as f64;
                let mean = all.iter().sum::<f64>() / n;
                let std = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((std - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn transforms_are_deterministic(raw in arb_raw(40), eta in 0.0f64..1.0) {
            for kind in SchemeKind::ALL {
                if kind == SchemeKind::ProcessNormed { continue; }
                let scheme = ShapingScheme::new(kind, eta, 0.1).unwrap();
                let a = scheme.shape(&s(&raw), Some(0.5)).unwrap();
                let b = scheme.shape(&s(&raw), Some(0.5)).unwrap();
                prop_assert_eq!(
                    a.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    b.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }
}
