//! Modular chain arithmetic: a small step-based reasoning task with exact
//! ground truth.
//!
//! A question asks to transform `start` into `target` modulo `m` using a fixed
//! set of arithmetic step templates. Filler templates are no-ops. The answer
//! step claims a value and ends the solution; it does not consume the step
//! budget, which bounds reasoning steps only.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{Question, Solution, Step, StepDetector, StepKind};

/// Largest modulus accepted by the reachability oracle.
pub const ORACLE_MAX_MODULUS: u32 = 1000;
/// Largest depth accepted by the reachability oracle.
pub const ORACLE_MAX_DEPTH: u32 = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("step budget of {max_steps} exhausted")]
    BudgetExceeded { max_steps: u32 },
    #[error("step {0:?} is not part of this environment")]
    UnknownStep(String),
    #[error("reachability query too large (modulus {modulus}, depth {depth})")]
    OracleTooLarge { modulus: u32, depth: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Add(u32),
    Mul(u32),
    Square,
}

impl Op {
    pub fn apply(self, value: u32, modulus: u32) -> u32 {
        let (v, m) = (value as u64, modulus as u64);
        let out = match self {
            Op::Add(k) => v + k as u64,
            Op::Mul(k) => v * k as u64,
            Op::Square => v * v,
        };
        (out % m) as u32
    }
}

impl FromStr for Op {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EnvError::InvalidConfig(format!("unknown op template {s:?}"));
        match s {
            "double" => Ok(Op::Mul(2)),
            "square" => Ok(Op::Square),
            _ => {
                if let Some(k) = s.strip_prefix('+') {
                    k.parse().map(Op::Add).map_err(|_| bad())
                } else if let Some(k) = s.strip_prefix('*') {
                    k.parse().map(Op::Mul).map_err(|_| bad())
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Add(k) => write!(f, "+{k}"),
            Op::Mul(2) => write!(f, "double"),
            Op::Mul(k) => write!(f, "*{k}"),
            Op::Square => write!(f, "square"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub modulus: u32,
    pub op_templates: Vec<String>,
    pub filler_templates: Vec<String>,
    pub max_steps: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            modulus: 53,
            op_templates: vec!["+1".into(), "+5".into(), "double".into(), "square".into()],
            filler_templates: vec![
                "Let me restate the problem.".into(),
                "Let me double-check this.".into(),
                "Continuing carefully.".into(),
            ],
            max_steps: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnvState {
    pub value: u32,
    pub steps_taken: u32,
}

/// One policy action: an op template, a filler template, or answering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Op(usize),
    Filler(usize),
    Answer,
}

/// A validated environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    config: EnvConfig,
    ops: Vec<Op>,
    detector: StepDetector,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        if config.modulus < 2 {
            return Err(EnvError::InvalidConfig("modulus must be at least 2".into()));
        }
        if config.op_templates.is_empty() {
            return Err(EnvError::InvalidConfig("at least one op template is required".into()));
        }
        if config.max_steps < 2 {
            return Err(EnvError::InvalidConfig("max_steps must be at least 2".into()));
        }
        let ops = config
            .op_templates
            .iter()
            .map(|t| t.parse())
            .collect::<Result<Vec<Op>, _>>()?;
        let texts: BTreeSet<&str> = config
            .op_templates
            .iter()
            .chain(&config.filler_templates)
            .map(String::as_str)
            .collect();
        if texts.len() != config.op_templates.len() + config.filler_templates.len() {
            return Err(EnvError::InvalidConfig("step templates must be distinct".into()));
        }
        let detector = StepDetector::new(config.op_templates.clone(), config.filler_templates.clone());
        Ok(Env { config, ops, detector })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn modulus(&self) -> u32 {
        self.config.modulus
    }

    pub fn max_steps(&self) -> u32 {
        self.config.max_steps
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn detector(&self) -> &StepDetector {
        &self.detector
    }

    /// Ops first, then fillers, then the answer action.
    pub fn num_actions(&self) -> usize {
        self.ops.len() + self.config.filler_templates.len() + 1
    }

    pub fn action(&self, index: usize) -> Action {
        let n_ops = self.ops.len();
        let n_fill = self.config.filler_templates.len();
        if index < n_ops {
            Action::Op(index)
        } else if index < n_ops + n_fill {
            Action::Filler(index - n_ops)
        } else {
            Action::Answer
        }
    }

    pub fn answer_action(&self) -> usize {
        self.num_actions() - 1
    }

    /// Renders an action taken in `state` as a step.
    pub fn step_for(&self, action: usize, state: EnvState) -> Step {
        match self.action(action) {
            Action::Op(i) => Step::compute(&self.config.op_templates[i]),
            Action::Filler(i) => Step::filler(i, &self.config.filler_templates[i]),
            Action::Answer => Step::answer(state.value as i64),
        }
    }

    /// The op behind a compute step, if the step belongs to this environment.
    pub fn op_of(&self, step: &Step) -> Option<Op> {
        let text = step.op_text()?;
        self.config
            .op_templates
            .iter()
            .position(|t| t == text)
            .map(|i| self.ops[i])
    }

    pub fn initial_state(&self, question: &Question) -> EnvState {
        EnvState {
            value: question.start % self.config.modulus,
            steps_taken: 0,
        }
    }

    /// Applies one step. Compute steps update the value, fillers leave it
    /// unchanged, and both consume budget. Answer steps are terminal and free.
    pub fn apply_step(&self, state: EnvState, step: &Step) -> Result<EnvState, EnvError> {
        if step.kind == StepKind::Answer {
            return Ok(state);
        }
        if state.steps_taken >= self.config.max_steps {
            return Err(EnvError::BudgetExceeded {
                max_steps: self.config.max_steps,
            });
        }
        let value = match step.kind {
            StepKind::Compute => self
                .op_of(step)
                .ok_or_else(|| EnvError::UnknownStep(step.rendered.clone()))?
                .apply(state.value, self.config.modulus),
            _ => state.value,
        };
        Ok(EnvState {
            value,
            steps_taken: state.steps_taken + 1,
        })
    }

    /// Value obtained by replaying every compute step of `steps` from `start`,
    /// ignoring the budget. `None` if a compute step is unknown.
    pub fn replay(&self, start: u32, steps: &[Step]) -> Option<u32> {
        steps.iter().try_fold(start % self.config.modulus, |v, s| match s.kind {
            StepKind::Compute => self.op_of(s).map(|op| op.apply(v, self.config.modulus)),
            _ => Some(v),
        })
    }

    /// Ground-truth verdict. The first answer step is read; the compute steps
    /// before it are replayed from the start value, and the solution is correct
    /// iff the claimed value equals both the replayed value and the target.
    /// Anything malformed is incorrect.
    pub fn check_correct(&self, question: &Question, solution: &Solution) -> bool {
        let Some(pos) = solution.steps.iter().position(|s| s.kind == StepKind::Answer) else {
            return false;
        };
        let Some(claim) = solution.steps[pos].answer_value() else {
            return false;
        };
        match self.replay(question.start, &solution.steps[..pos]) {
            Some(v) => claim == v as i64 && claim == question.target as i64,
            None => false,
        }
    }

    /// Exact breadth-first enumeration of the values reachable from `start`
    /// using op steps only: entry `d` holds the values reachable in exactly `d`
    /// steps, for `d` in `0..=budget`.
    pub fn reachable_set(&self, start: u32, budget: u32) -> Result<Vec<BTreeSet<u32>>, EnvError> {
        let m = self.config.modulus;
        if m > ORACLE_MAX_MODULUS || budget > ORACLE_MAX_DEPTH {
            return Err(EnvError::OracleTooLarge {
                modulus: m,
                depth: budget,
            });
        }
        let mut levels = Vec::with_capacity(budget as usize + 1);
        levels.push(BTreeSet::from([start % m]));
        for d in 0..budget as usize {
            let next: BTreeSet<u32> = levels[d]
                .iter()
                .flat_map(|&v| self.ops.iter().map(move |op| op.apply(v, m)))
                .collect();
            levels.push(next);
        }
        Ok(levels)
    }

    /// Whether `target` can be reached from `value` in at most `budget`
    /// reasoning steps (fillers pad shorter paths).
    pub fn can_reach(&self, value: u32, target: u32, budget: u32) -> Result<bool, EnvError> {
        Ok(self
            .reachable_set(value, budget)?
            .iter()
            .any(|level| level.contains(&target)))
    }

    /// Samples a question whose target differs from the start and is reachable
    /// within the step budget.
    pub fn sample_question<R: Rng + ?Sized>(&self, id: impl Into<String>, rng: &mut R) -> Question {
        let m = self.config.modulus;
        let depth = self.config.max_steps.min(ORACLE_MAX_DEPTH);
        loop {
            let start = rng.random_range(0..m);
            let targets: Vec<u32> = match self.reachable_set(start, depth) {
                Ok(levels) => levels[1..]
                    .iter()
                    .flatten()
                    .copied()
                    .filter(|&t| t != start)
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect(),
                Err(_) => (0..m).filter(|&t| t != start).collect(),
            };
            if targets.is_empty() {
                continue;
            }
            let target = targets[rng.random_range(0..targets.len())];
            return Question {
                id: id.into(),
                start,
                target,
                modulus: m,
            };
        }
    }

    /// `count` questions with ids `q{index}`, each drawn from its own stream.
    pub fn sample_questions(&self, seed: u64, count: usize) -> Vec<Question> {
        (0..count)
            .map(|i| {
                let mut rng = crate::rng::stream(seed, &[i as u64]);
                self.sample_question(format!("q{i}"), &mut rng)
            })
            .collect()
    }
}
