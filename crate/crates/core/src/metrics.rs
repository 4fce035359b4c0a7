//! Evaluation: greedy accuracy, sampling accuracy and pass@k.
//!
//! Trial `j` on question `i` always draws from stream `(seed, i, j)`, and the
//! sampling accuracy is trial 0. So pass@k contains the sampling rollout and
//! is non-decreasing in `k`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Env;
use crate::reward_models::sample_solution;
use crate::rng::stream;
use crate::trainer::policy::{Decode, PolicyParams};
use crate::trajectory::{Question, Solution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("question set is empty")]
    NoQuestions,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub greedy_acc: f64,
    pub sampling_acc: f64,
    pub pass_at_k: f64,
    pub k: usize,
    /// Mean step count of the sampling rollouts.
    pub mean_steps: f64,
    /// Mean token count of the sampling rollouts.
    pub mean_tokens: f64,
}

fn check(questions: &[Question]) -> Result<(), MetricsError> {
    if questions.is_empty() {
        Err(MetricsError::NoQuestions)
    } else {
        Ok(())
    }
}

fn fraction(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

pub fn greedy_rollouts(policy: &PolicyParams, questions: &[Question], env: &Env) -> Vec<Solution> {
    questions
        .par_iter()
        .map(|q| sample_solution(policy, env, q, Decode::Greedy, &mut stream(0, &[])))
        .collect()
}

/// Trial `trial` of every question.
pub fn sampled_rollouts(
    policy: &PolicyParams,
    questions: &[Question],
    env: &Env,
    temperature: f64,
    seed: u64,
    trial: u64,
) -> Vec<Solution> {
    questions
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut rng = stream(seed, &[i as u64, trial]);
            sample_solution(policy, env, q, Decode::Sample { temperature }, &mut rng)
        })
        .collect()
}

pub fn eval_greedy(policy: &PolicyParams, questions: &[Question], env: &Env) -> Result<f64, MetricsError> {
    check(questions)?;
    let sols = greedy_rollouts(policy, questions, env);
    Ok(fraction(sols.iter().filter(|s| s.correct).count(), sols.len()))
}

pub fn eval_sampling(
    policy: &PolicyParams,
    questions: &[Question],
    env: &Env,
    temperature: f64,
    seed: u64,
) -> Result<f64, MetricsError> {
    check(questions)?;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(MetricsError::BadTemperature(temperature));
    }
    let sols = sampled_rollouts(policy, questions, env, temperature, seed, 0);
    Ok(fraction(sols.iter().filter(|s| s.correct).count(), sols.len()))
}

/// Per-question success flags for trials `0..k` at temperature 1.
fn trial_hits(policy: &PolicyParams, questions: &[Question], env: &Env, k: usize, seed: u64) -> Vec<bool> {
    questions
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            (0..k as u64).any(|j| {
                let mut rng = stream(seed, &[i as u64, j]);
                sample_solution(policy, env, q, Decode::Sample { temperature: 1.0 }, &mut rng).correct
            })
        })
        .collect()
}

pub fn eval_pass_at_k(
    policy: &PolicyParams,
    questions: &[Question],
    env: &Env,
    k: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    check(questions)?;
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    let hits = trial_hits(policy, questions, env, k, seed);
    Ok(fraction(hits.iter().filter(|&&h| h).count(), hits.len()))
}

/// All metrics at once. Length statistics come from the same rollouts as the
/// sampling accuracy.
pub fn evaluate(
    policy: &PolicyParams,
    questions: &[Question],
    env: &Env,
    k: usize,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    check(questions)?;
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    let greedy_acc = eval_greedy(policy, questions, env)?;
    let sampled = sampled_rollouts(policy, questions, env, 1.0, seed, 0);
    let n = sampled.len() as f64;
    let sampling_acc = sampled.iter().filter(|s| s.correct).count() as f64 / n;
    let mean_steps = sampled.iter().map(|s| s.num_steps() as f64).sum::<f64>() / n;
    let mean_tokens = sampled.iter().map(|s| s.token_count as f64).sum::<f64>() / n;
    let pass_at_k = eval_pass_at_k(policy, questions, env, k, seed)?;
    Ok(EvalReport {
        greedy_acc,
        sampling_acc,
        pass_at_k,
        k,
        mean_steps,
        mean_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::trainer::policy::PriorConfig;

    fn env() -> Env {
        Env::new(EnvConfig::default()).unwrap()
    }

    fn perfect(e: &Env) -> PolicyParams {
        let prior = PriorConfig {
            skill: 40.0,
            answer_at_target: 80.0,
            noise: 0.0,
            ..Default::default()
        };
        PolicyParams::base(e, &prior, &mut stream(0, &[]))
    }

    #[test]
    fn perfect_policy_scores_one_everywhere() {
        let e = env();
        let p = perfect(&e);
        let qs = e.sample_questions(5, 40);
        let r = evaluate(&p, &qs, &e, 4, 9).unwrap();
        assert_eq!(r.greedy_acc, 1.0);
        assert_eq!(r.sampling_acc, 1.0);
        assert_eq!(r.pass_at_k, 1.0);
    }

    #[test]
    fn empty_question_set_is_an_error() {
        let e = env();
        let p = PolicyParams::uniform(&e);
        assert_eq!(eval_greedy(&p, &[], &e), Err(MetricsError::NoQuestions));
    }

    #[test]
    fn never_answering_scores_zero() {
        let e = env();
        let mut p = PolicyParams::uniform(&e);
        let answer = e.answer_action();
        for row in &mut p.logits {
            row[answer] = -1e3;
        }
        let qs = e.sample_questions(5, 10);
        assert_eq!(eval_pass_at_k(&p, &qs, &e, 16, 1).unwrap(), 0.0);
    }

    #[test]
    fn pass_at_k_is_monotone_and_covers_sampling() {
        let e = env();
        let p = PolicyParams::uniform(&e);
        let qs = e.sample_questions(2, 60);
        let s = eval_sampling(&p, &qs, &e, 1.0, 3).unwrap();
        let mut prev = 0.0;
        for k in [1, 2, 4, 8, 16] {
            let v = eval_pass_at_k(&p, &qs, &e, k, 3).unwrap();
            assert!(v >= prev && v >= s);
            prev = v;
        }
        assert_eq!(eval_pass_at_k(&p, &qs, &e, 1, 3).unwrap(), s);
    }

    #[test]
    fn greedy_ignores_per_row_shifts() {
        let e = env();
        let mut p = PolicyParams::base(&e, &PriorConfig::default(), &mut stream(4, &[]));
        let qs = e.sample_questions(8, 64);
        let before = eval_greedy(&p, &qs, &e).unwrap();
        for (i, row) in p.logits.iter_mut().enumerate() {
            for z in row.iter_mut() {
                *z += i as f64 * 0.75 - 3.0;
            }
        }
        assert_eq!(eval_greedy(&p, &qs, &e).unwrap(), before);
    }
}
