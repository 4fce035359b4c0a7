//! Tabular softmax policy over step templates.
//!
//! The policy sees one state feature, the residual `(target - value) mod m`,
//! and keeps one row of action logits per residual. Actions follow the
//! environment order: op templates, filler templates, answer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvState, Op};
use crate::trajectory::{Question, Step, StepKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("policy has {rows} rows of {cols} logits, environment needs {want_rows} x {want_cols}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("non-finite logit in row {row}")]
    NonFinite { row: usize },
}

/// How the base policy is initialized. The base policy stands in for a
/// pretrained model that already knows the task shape: it tends to take the
/// op that shortens the residual, answers when the residual is zero, and
/// pads with filler steps now and then. Gaussian noise on every logit gives
/// it state-specific mistakes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Logit bonus of the op on a shortest translation path to the target.
    pub skill: f64,
    /// Logit of every other op.
    pub other_op: f64,
    /// Answer logit when the residual is zero.
    pub answer_at_target: f64,
    /// Answer logit elsewhere.
    pub answer_elsewhere: f64,
    /// Logit of each filler template.
    pub filler: f64,
    /// Standard deviation of the logit noise.
    pub noise: f64,
    pub temperature: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            skill: 3.0,
            other_op: -1.0,
            answer_at_target: 4.0,
            answer_elsewhere: 0.0,
            filler: -1.0,
            noise: 1.3,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub temperature: f64,
    /// One row of action logits per residual bucket.
    pub logits: Vec<Vec<f64>>,
}

/// Decoding rule for generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    Greedy,
    /// Sampling; the temperature scales the policy's own temperature.
    Sample { temperature: f64 },
}

/// A generated continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub steps: Vec<Step>,
    pub actions: Vec<usize>,
    pub buckets: Vec<usize>,
    pub final_state: EnvState,
}

impl Episode {
    pub fn answered(&self) -> bool {
        self.steps.last().is_some_and(|s| s.kind == StepKind::Answer)
    }
}

pub fn bucket(state: EnvState, target: u32, modulus: u32) -> usize {
    ((target % modulus + modulus - state.value % modulus) % modulus) as usize
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|z| (z - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

/// For each residual, the translation op starting a shortest path to zero
/// residual, if any translation ops exist.
fn shortest_translation_moves(env: &Env) -> Vec<Option<usize>> {
    let m = env.modulus() as usize;
    let adds: Vec<(usize, usize)> = env
        .ops()
        .iter()
        .enumerate()
        .filter_map(|(i, op)| match op {
            Op::Add(k) => Some((i, *k as usize % m)),
            _ => None,
        })
        .collect();
    // residual d moves to d - k under +k
    let mut dist = vec![usize::MAX; m];
    dist[0] = 0;
    let mut frontier = vec![0usize];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &r in &frontier {
            for &(_, k) in &adds {
                let prev = (r + k) % m;
                if dist[prev] == usize::MAX {
                    dist[prev] = dist[r] + 1;
                    next.push(prev);
                }
            }
        }
        frontier = next;
    }
    (0..m)
        .map(|d| {
            if d == 0 {
                return None;
            }
            adds.iter()
                .filter(|&&(_, k)| {
                    let to = (d + m - k) % m;
                    dist[to] != usize::MAX && dist[to] + 1 == dist[d]
                })
                .map(|&(i, _)| i)
                .next()
        })
        .collect()
}

impl PolicyParams {
    pub fn uniform(env: &Env) -> Self {
        PolicyParams {
            temperature: 1.0,
            logits: vec![vec![0.0; env.num_actions()]; env.modulus() as usize],
        }
    }

    pub fn base<R: Rng + ?Sized>(env: &Env, prior: &PriorConfig, rng: &mut R) -> Self {
        let moves = shortest_translation_moves(env);
        let answer = env.answer_action();
        let n_ops = env.ops().len();
        let noise = Normal::new(0.0, prior.noise.max(0.0)).expect("finite noise");
        let logits = (0..env.modulus() as usize)
            .map(|d| {
                (0..env.num_actions())
                    .map(|a| {
                        let mut z = if a == answer {
                            if d == 0 {
                                prior.answer_at_target
                            } else {
                                prior.answer_elsewhere
                            }
                        } else if a >= n_ops {
                            prior.filler
                        } else if moves[d] == Some(a) {
                            prior.skill
                        } else {
                            prior.other_op
                        };
                        if prior.noise > 0.0 {
                            z += noise.sample(rng);
                        }
                        z
                    })
                    .collect()
            })
            .collect();
        PolicyParams {
            temperature: prior.temperature,
            logits,
        }
    }

    pub fn check(&self, env: &Env) -> Result<(), PolicyError> {
        let want_rows = env.modulus() as usize;
        let want_cols = env.num_actions();
        let cols = self.logits.first().map_or(0, Vec::len);
        if self.logits.len() != want_rows || self.logits.iter().any(|r| r.len() != want_cols) {
            return Err(PolicyError::ShapeMismatch {
                rows: self.logits.len(),
                cols,
                want_rows,
                want_cols,
            });
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(PolicyError::BadTemperature(self.temperature));
        }
        if let Some(row) = self.logits.iter().position(|r| r.iter().any(|z| !z.is_finite())) {
            return Err(PolicyError::NonFinite { row });
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    pub fn probs(&self, bucket: usize) -> Vec<f64> {
        softmax(&self.logits[bucket], self.temperature)
    }

    pub fn log_probs(&self, bucket: usize) -> Vec<f64> {
        log_softmax(&self.logits[bucket], self.temperature)
    }

    pub fn log_prob(&self, bucket: usize, action: usize) -> f64 {
        self.log_probs(bucket)[action]
    }

    /// Highest-logit action; ties go to the lowest index.
    pub fn greedy_action(&self, bucket: usize) -> usize {
        let row = &self.logits[bucket];
        let mut best = 0;
        for (i, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = i;
            }
        }
        best
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, bucket: usize, temperature: f64, rng: &mut R) -> usize {
        let probs = softmax(&self.logits[bucket], self.temperature * temperature);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// Continues a solution from `state` until the policy answers or the step
    /// budget runs out.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        env: &Env,
        question: &Question,
        mut state: EnvState,
        decode: Decode,
        rng: &mut R,
    ) -> Episode {
        let mut ep = Episode {
            steps: Vec::new(),
            actions: Vec::new(),
            buckets: Vec::new(),
            final_state: state,
        };
        let answer = env.answer_action();
        loop {
            let b = bucket(state, question.target, env.modulus());
            let a = match decode {
                Decode::Greedy => self.greedy_action(b),
                Decode::Sample { temperature } => self.sample_action(b, temperature, rng),
            };
            if a != answer && state.steps_taken >= env.max_steps() {
                break;
            }
            let step = env.step_for(a, state);
            state = env
                .apply_step(state, &step)
                .expect("generated steps belong to the environment and respect the budget");
            ep.steps.push(step);
            ep.actions.push(a);
            ep.buckets.push(b);
            if a == answer {
                break;
            }
        }
        ep.final_state = state;
        ep
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::rng::stream;

    fn env() -> Env {
        Env::new(EnvConfig::default()).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, -1000.0], 0.7);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&[1.0, 2.0, 3.0], 0.7);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_buckets() {
        let s = EnvState { value: 50, steps_taken: 0 };
        assert_eq!(bucket(s, 2, 53), 5);
        assert_eq!(bucket(s, 50, 53), 0);
    }

    #[test]
    fn shortest_moves_prefer_big_translation() {
        let moves = shortest_translation_moves(&env());
        assert_eq!(moves[0], None);
        assert_eq!(moves[1], Some(0));
        assert_eq!(moves[5], Some(1));
        assert_eq!(moves[10], Some(1));
    }

    #[test]
    fn noiseless_base_policy_solves_everything_greedily() {
        let e = env();
        let prior = PriorConfig { noise: 0.0, ..Default::default() };
        let p = PolicyParams::base(&e, &prior, &mut stream(0, &[]));
        p.check(&e).unwrap();
        for q in e.sample_questions(3, 50) {
            let ep = p.generate(&e, &q, e.initial_state(&q), Decode::Greedy, &mut stream(0, &[]));
            assert!(ep.answered());
            assert_eq!(ep.final_state.value, q.target);
        }
    }

    #[test]
    fn generation_respects_budget() {
        let e = env();
        let mut p = PolicyParams::uniform(&e);
        let filler = e.ops().len();
        for row in &mut p.logits {
            row[filler] = 50.0;
        }
        let q = &e.sample_questions(1, 1)[0];
        let ep = p.generate(&e, q, e.initial_state(q), Decode::Greedy, &mut stream(0, &[]));
        assert_eq!(ep.steps.len(), e.max_steps() as usize);
        assert!(!ep.answered());
    }

    #[test]
    fn shape_checks() {
        let e = env();
        let mut p = PolicyParams::uniform(&e);
        assert!(p.check(&e).is_ok());
        p.logits[3][1] = f64::NAN;
        assert_eq!(p.check(&e), Err(PolicyError::NonFinite { row: 3 }));
        p.logits.pop();
        assert!(matches!(p.check(&e), Err(PolicyError::ShapeMismatch { .. })));
    }
}
