//! Reward-hacking probes: corrupt a correct solution with repetitions and
//! compare its shaped return against the original.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Env;
use crate::reward_models::{score_steps, SurrogatePrm};
use crate::shaping::{trajectory_return, RewardCoefficients, ShapingError, ShapingScheme};
use crate::trajectory::{Question, Solution, Step, StepKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuditError {
    #[error("step index {index} cannot be repeated in a solution of {len} steps")]
    InvalidIndex { index: usize, len: usize },
    #[error("probes need a solution that ends with an answer step")]
    NoAnswer,
    #[error("unknown probe {0:?}")]
    UnknownProbe(String),
    #[error("question {0:?} has no solution within the step budget")]
    Unsolvable(String),
    #[error("nothing to sweep")]
    Empty,
    #[error(transparent)]
    Shaping(#[from] ShapingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProbeVariant {
    /// Filler steps inserted before the answer step.
    RepeatNonsense,
    /// Restatements of one step inserted right after it.
    RepeatMidStep,
    /// Copies of the answer sentence appended after the answer.
    RepeatLastSentence,
}

impl ProbeVariant {
    pub const ALL: [ProbeVariant; 3] = [
        ProbeVariant::RepeatNonsense,
        ProbeVariant::RepeatMidStep,
        ProbeVariant::RepeatLastSentence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeVariant::RepeatNonsense => "repeat_nonsense",
            ProbeVariant::RepeatMidStep => "repeat_mid_step",
            ProbeVariant::RepeatLastSentence => "repeat_last_sentence",
        }
    }
}

impl fmt::Display for ProbeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeVariant {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProbeVariant::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| AuditError::UnknownProbe(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeKind {
    pub variant: ProbeVariant,
    pub n: usize,
    /// 1-based step to repeat; used by `RepeatMidStep` only.
    pub mid_step_index: usize,
}

/// Builds the corrupted solution. Its correctness is the checker's verdict on
/// the new steps; step validity is not enforced since appended answer copies
/// are the point of one probe.
pub fn make_probe(env: &Env, question: &Question, ground_truth: &Solution, probe: &ProbeKind) -> Result<Solution, AuditError> {
    let steps = &ground_truth.steps;
    let answer_at = steps
        .iter()
        .rposition(|s| s.kind == StepKind::Answer)
        .filter(|&i| i + 1 == steps.len())
        .ok_or(AuditError::NoAnswer)?;
    let mut out = steps.clone();
    match probe.variant {
        ProbeVariant::RepeatNonsense => {
            let text = env.config().filler_templates.first().map_or("Step done.", String::as_str);
            let fillers = (0..probe.n).map(|_| Step::filler(0, text));
            out.splice(answer_at..answer_at, fillers);
        }
        ProbeVariant::RepeatMidStep => {
            let i = probe.mid_step_index;
            if i == 0 || i > answer_at {
                return Err(AuditError::InvalidIndex { index: i, len: steps.len() });
            }
            let src = &steps[i - 1];
            let copy = match src.op_text() {
                Some(op) => Step::restatement(op),
                None => src.clone(),
            };
            out.splice(i..i, std::iter::repeat_n(copy, probe.n));
        }
        ProbeVariant::RepeatLastSentence => {
            let last = steps[answer_at].clone();
            out.extend(std::iter::repeat_n(last, probe.n));
        }
    }
    let mut sol = Solution::new(ground_truth.question_id.clone(), out, false);
    sol.correct = env.check_correct(question, &sol);
    Ok(sol)
}

fn shaped_return(
    scheme: &ShapingScheme,
    coeffs: &RewardCoefficients,
    prm: &SurrogatePrm,
    question: &Question,
    solution: &Solution,
) -> Result<f64, AuditError> {
    let raw = score_steps(prm, question, &solution.steps);
    let shaped = scheme.shape_batch(std::slice::from_ref(&raw), None)?.remove(0);
    Ok(trajectory_return(&shaped, solution.correct, coeffs)?)
}

/// `return(probe) - return(ground truth)`, without KL.
pub fn return_difference(
    scheme: &ShapingScheme,
    coeffs: &RewardCoefficients,
    prm: &SurrogatePrm,
    question: &Question,
    ground_truth: &Solution,
    probe: &Solution,
) -> Result<f64, AuditError> {
    if probe == ground_truth {
        return Ok(0.0);
    }
    Ok(shaped_return(scheme, coeffs, prm, question, probe)? - shaped_return(scheme, coeffs, prm, question, ground_truth)?)
}

/// A shortest correct solution: BFS over values using op steps, then the
/// answer.
pub fn shortest_solution(env: &Env, question: &Question) -> Result<Solution, AuditError> {
    let m = env.modulus() as usize;
    let start = env.initial_state(question).value as usize;
    let target = question.target as usize % m;
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; m];
    let mut seen = vec![false; m];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        if v == target {
            break;
        }
        for (i, op) in env.ops().iter().enumerate() {
            let w = op.apply(v as u32, m as u32) as usize;
            if !seen[w] {
                seen[w] = true;
                prev[w] = Some((v, i));
                queue.push_back(w);
            }
        }
    }
    if !seen[target] {
        return Err(AuditError::Unsolvable(question.id.clone()));
    }
    let mut ops = Vec::new();
    let mut v = target;
    while let Some((p, i)) = prev[v] {
        ops.push(i);
        v = p;
    }
    ops.reverse();
    if ops.len() > env.max_steps() as usize {
        return Err(AuditError::Unsolvable(question.id.clone()));
    }
    let mut steps: Vec<Step> = ops.iter().map(|&i| Step::compute(&env.config().op_templates[i])).collect();
    steps.push(Step::answer(target as i64));
    let mut sol = Solution::new(question.id.clone(), steps, false);
    sol.correct = env.check_correct(question, &sol);
    Ok(sol)
}

/// Middle reasoning step of a solution, 1-based.
pub fn middle_step(solution: &Solution) -> usize {
    let reasoning = solution.steps.iter().filter(|s| s.kind != StepKind::Answer).count();
    reasoning.div_ceil(2).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub scheme: String,
    pub probe: String,
    pub n: usize,
    pub mean_diff: f64,
    pub std_diff: f64,
}

/// Mean and sample standard deviation of the return difference over the
/// ground-truth set for every (scheme, probe, n).
pub fn sweep_probe(
    schemes: &[ShapingScheme],
    probes: &[ProbeVariant],
    n_values: &[usize],
    prm: &SurrogatePrm,
    coeffs: &RewardCoefficients,
    env: &Env,
    ground_truths: &[(Question, Solution)],
) -> Result<Vec<AuditRow>, AuditError> {
    if schemes.is_empty() || probes.is_empty() || n_values.is_empty() || ground_truths.is_empty() {
        return Err(AuditError::Empty);
    }
    let mut rows = Vec::new();
    for scheme in schemes {
        for &variant in probes {
            for &n in n_values {
                let diffs = ground_truths
                    .par_iter()
                    .map(|(q, gt)| {
                        let probe = ProbeKind {
                            variant,
                            n,
                            mid_step_index: middle_step(gt),
                        };
                        let p = make_probe(env, q, gt, &probe)?;
                        return_difference(scheme, coeffs, prm, q, gt, &p)
                    })
                    .collect::<Result<Vec<f64>, AuditError>>()?;
                let k = diffs.len() as f64;
                let mean = diffs.iter().sum::<f64>() / k;
                let std_diff = if diffs.len() > 1 {
                    (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
                } else {
                    0.0
                };
                rows.push(AuditRow {
                    scheme: scheme.kind.name().to_string(),
                    probe: variant.name().to_string(),
                    n,
                    mean_diff: mean,
                    std_diff,
                });
            }
        }
    }
    Ok(rows)
}
