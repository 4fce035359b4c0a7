//! Step-structured solutions: questions, steps, prefixes and per-step rewards.
//!
//! Steps use a line protocol. Every reasoning step is one line starting with
//! `Step:` and the final answer is one line starting with `Answer:`. Step
//! indices are 1-based throughout, so `prefix_of(s, k)` holds the first `k`
//! steps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("step index {k} out of range for a solution with {len} steps")]
    PrefixOutOfRange { k: usize, len: usize },
    #[error("empty solution text")]
    EmptySolution,
    #[error("line {line}: unrecognized step {text:?}")]
    UnrecognizedStep { line: usize, text: String },
    #[error("reward at step {index} is not finite")]
    NonFinite { index: usize },
    #[error("invalid solution: {0}")]
    Invalid(String),
}

/// A synthetic problem instance: reach `target` from `start` modulo `modulus`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub start: u32,
    pub target: u32,
    pub modulus: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Compute,
    Filler,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub template_id: String,
    pub rendered: String,
    pub kind: StepKind,
}

pub const STEP_PREFIX: &str = "Step: ";
pub const ANSWER_PREFIX: &str = "Answer: ";
pub const RESTATE_PREFIX: &str = "restating ";
pub const ANSWER_TEMPLATE: &str = "answer";

impl Step {
    pub fn compute(op_text: &str) -> Self {
        Step {
            template_id: format!("op:{op_text}"),
            rendered: format!("{STEP_PREFIX}{op_text}"),
            kind: StepKind::Compute,
        }
    }

    pub fn filler(index: usize, text: &str) -> Self {
        Step {
            template_id: format!("filler:{index}"),
            rendered: format!("{STEP_PREFIX}{text}"),
            kind: StepKind::Filler,
        }
    }

    /// A line that repeats an earlier compute step without performing it again.
    pub fn restatement(op_text: &str) -> Self {
        Step {
            template_id: format!("restate:{op_text}"),
            rendered: format!("{STEP_PREFIX}{RESTATE_PREFIX}{op_text}"),
            kind: StepKind::Filler,
        }
    }

    pub fn answer(value: i64) -> Self {
        Step {
            template_id: ANSWER_TEMPLATE.to_string(),
            rendered: format!("{ANSWER_PREFIX}{value}"),
            kind: StepKind::Answer,
        }
    }

    /// The value claimed by an answer step.
    pub fn answer_value(&self) -> Option<i64> {
        if self.kind != StepKind::Answer {
            return None;
        }
        self.rendered
            .strip_prefix(ANSWER_PREFIX)
            .and_then(|v| v.trim().parse().ok())
    }

    /// The operation text of a compute step.
    pub fn op_text(&self) -> Option<&str> {
        match self.kind {
            StepKind::Compute => self.template_id.strip_prefix("op:"),
            _ => None,
        }
    }
}

/// Whitespace-delimited token count of a rendering.
pub fn count_tokens(steps: &[Step]) -> usize {
    steps.iter().map(|s| s.rendered.split_whitespace().count()).sum()
}

pub fn render(steps: &[Step]) -> String {
    steps
        .iter()
        .map(|s| s.rendered.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub question_id: String,
    pub steps: Vec<Step>,
    pub token_count: usize,
    pub correct: bool,
}

impl Solution {
    pub fn new(question_id: impl Into<String>, steps: Vec<Step>, correct: bool) -> Self {
        let token_count = count_tokens(&steps);
        Solution {
            question_id: question_id.into(),
            steps,
            token_count,
            correct,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn has_answer(&self) -> bool {
        self.steps.iter().any(|s| s.kind == StepKind::Answer)
    }

    /// Checks the invariants of environment-generated solutions: at least one
    /// step, at most one answer step and only in final position, a token count
    /// no smaller than the step count, and `correct` only with an answer.
    ///
    /// Repetition probes that append copies of the answer line deliberately
    /// break the single-answer rule and are not validated with this.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let k = self.steps.len();
        if k == 0 {
            return Err(TrajectoryError::EmptySolution);
        }
        if self.token_count < k {
            return Err(TrajectoryError::Invalid(format!(
                "token_count {} smaller than step count {k}",
                self.token_count
            )));
        }
        if let Some(pos) = self.steps.iter().position(|s| s.kind == StepKind::Answer) {
            if pos != k - 1 {
                return Err(TrajectoryError::Invalid(format!(
                    "answer step at position {} of {k}",
                    pos + 1
                )));
            }
        } else if self.correct {
            return Err(TrajectoryError::Invalid(
                "correct solution without an answer step".into(),
            ));
        }
        Ok(())
    }
}

/// The first `k` steps of a solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prefix<'a> {
    pub question_id: &'a str,
    pub steps: &'a [Step],
}

impl Prefix<'_> {
    pub fn k(&self) -> usize {
        self.steps.len()
    }
}

pub fn prefix_of(solution: &Solution, k: usize) -> Result<Prefix<'_>, TrajectoryError> {
    if k == 0 || k > solution.steps.len() {
        return Err(TrajectoryError::PrefixOutOfRange {
            k,
            len: solution.steps.len(),
        });
    }
    Ok(Prefix {
        question_id: &solution.question_id,
        steps: &solution.steps[..k],
    })
}

/// Per-step scalar rewards aligned with the steps of a solution.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StepRewardSeq(Vec<f64>);

impl StepRewardSeq {
    pub fn new(values: Vec<f64>) -> Result<Self, TrajectoryError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(TrajectoryError::NonFinite { index });
        }
        Ok(StepRewardSeq(values))
    }

    pub fn zeros(len: usize) -> Self {
        StepRewardSeq(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<StepRewardSeq> for Vec<f64> {
    fn from(seq: StepRewardSeq) -> Self {
        seq.0
    }
}

/// Maps rendered step lines back to steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDetector {
    ops: Vec<String>,
    fillers: Vec<String>,
}

impl StepDetector {
    pub fn new(ops: Vec<String>, fillers: Vec<String>) -> Self {
        StepDetector { ops, fillers }
    }

    fn detect_line(&self, line_no: usize, line: &str) -> Result<Step, TrajectoryError> {
        let unrecognized = || TrajectoryError::UnrecognizedStep {
            line: line_no,
            text: line.to_string(),
        };
        if let Some(rest) = line.strip_prefix(ANSWER_PREFIX) {
            let value: i64 = rest.trim().parse().map_err(|_| unrecognized())?;
            return Ok(Step::answer(value));
        }
        let body = line.strip_prefix(STEP_PREFIX).ok_or_else(unrecognized)?;
        if let Some(op) = self.ops.iter().find(|op| op.as_str() == body) {
            return Ok(Step::compute(op));
        }
        if let Some(i) = self.fillers.iter().position(|f| f.as_str() == body) {
            return Ok(Step::filler(i, &self.fillers[i]));
        }
        if let Some(op) = body
            .strip_prefix(RESTATE_PREFIX)
            .and_then(|rest| self.ops.iter().find(|op| op.as_str() == rest))
        {
            return Ok(Step::restatement(op));
        }
        Err(unrecognized())
    }
}

/// Splits newline-delimited step text into steps. Blank lines are skipped.
pub fn segment_steps(text: &str, detector: &StepDetector) -> Result<Vec<Step>, TrajectoryError> {
    let steps = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| detector.detect_line(i + 1, l.trim_end()))
        .collect::<Result<Vec<_>, _>>()?;
    if steps.is_empty() {
        return Err(TrajectoryError::EmptySolution);
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn detector() -> StepDetector {
        StepDetector::new(
            vec!["+1".into(), "+5".into(), "double".into(), "square".into()],
            vec!["Let me think.".into(), "Continuing.".into()],
        )
    }

    fn three_step() -> Solution {
        Solution::new(
            "q0",
            vec![Step::compute("+1"), Step::compute("double"), Step::answer(8)],
            true,
        )
    }

    #[test]
    fn prefix_bounds() {
        let s = three_step();
        assert_eq!(prefix_of(&s, 1).unwrap().steps.len(), 1);
        assert_eq!(prefix_of(&s, 3).unwrap().steps, &s.steps[..]);
        assert_eq!(
            prefix_of(&s, 4),
            Err(TrajectoryError::PrefixOutOfRange { k: 4, len: 3 })
        );
        assert!(prefix_of(&s, 0).is_err());
    }

    #[test]
    fn segments_two_lines() {
        let steps = segment_steps("Step: +1\nAnswer: 4", &detector()).unwrap();
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0].kind, StepKind::Compute);
        assert_eq!(steps[1].kind, StepKind::Answer);
        assert_eq!(steps[1].answer_value(), Some(4));
    }

    #[test]
    fn segments_single_answer() {
        let steps = segment_steps("Answer: 4", &detector()).unwrap();
        assert_eq!(steps, vec![Step::answer(4)]);
    }

    #[test]
    fn empty_text_is_an_error() {
        assert_eq!(segment_steps("", &detector()), Err(TrajectoryError::EmptySolution));
        assert_eq!(segment_steps("\n  \n", &detector()), Err(TrajectoryError::EmptySolution));
    }

    #[test]
    fn unknown_line_is_rejected() {
        let err = segment_steps("Step: +1\nStep: +7", &detector()).unwrap_err();
        assert!(matches!(err, TrajectoryError::UnrecognizedStep { line: 2, .. }));
    }

    #[test]
    fn restatements_and_fillers_round_trip() {
        let steps = vec![
            Step::compute("+5"),
            Step::restatement("+5"),
            Step::filler(1, "Continuing."),
            Step::answer(9),
        ];
        assert_eq!(segment_steps(&render(&steps), &detector()).unwrap(), steps);
    }

    #[test]
    fn token_count_counts_whitespace_tokens() {
        let s = three_step();
        assert_eq!(s.token_count, 6);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn validation_rules() {
        let mut s = three_step();
        s.steps.swap(1, 2);
        assert!(s.validate().is_err());
        let s = Solution::new("q", vec![Step::compute("+1")], true);
        assert!(s.validate().is_err());
        let s = Solution::new("q", vec![Step::compute("+1")], false);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn non_finite_rewards_rejected() {
        assert_eq!(
            StepRewardSeq::new(vec![0.1, f64::NAN]),
            Err(TrajectoryError::NonFinite { index: 1 })
        );
    }

    #[test]
    fn jsonl_shape() {
        let line = serde_json::to_string(&three_step()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["question_id"], "q0");
        assert_eq!(v["steps"][2]["kind"], "answer");
        assert_eq!(v["steps"][0]["template_id"], "op:+1");
        assert_eq!(v["token_count"], 6);
        assert_eq!(v["correct"], true);
    }

    fn arb_step() -> impl Strategy<Value = Step> {
        prop_oneof![
            prop::sample::select(vec!["+1", "+5", "double", "square"]).prop_map(Step::compute),
            prop::sample::select(vec!["+1", "+5"]).prop_map(Step::restatement),
            (0usize..2).prop_map(|i| Step::filler(i, ["Let me think.", "Continuing."][i])),
            (0i64..100).prop_map(Step::answer),
        ]
    }

    proptest! {
        #[test]
        fn segmentation_is_idempotent(steps in prop::collection::vec(arb_step(), 1..30)) {
            let d = detector();
            let once = segment_steps(&render(&steps), &d).unwrap();
            let twice = segment_steps(&render(&once), &d).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(once, steps);
        }

        #[test]
        fn every_prefix_has_k_steps(steps in prop::collection::vec(arb_step(), 1..30)) {
            let s = Solution::new("q", steps, false);
            for k in 1..=s.num_steps() {
                prop_assert_eq!(prefix_of(&s, k).unwrap().k(), k);
            }
        }
    }
}
