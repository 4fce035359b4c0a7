//! Surrogate outcome and process reward models.
//!
//! Both scorers are logistic regressions over hand-built features of the
//! environment state a prefix (or whole solution) reaches. Process labels
//! come from Monte-Carlo completion: a prefix is positive if any of several
//! completions from its state ends correct.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Env, EnvError, EnvState, Op};
use crate::rng::stream;
use crate::trainer::policy::{Decode, PolicyParams};
use crate::trajectory::{Question, Solution, Step, StepKind, StepRewardSeq};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardModelError {
    #[error("no question has both correct and incorrect samples")]
    DatasetEmpty,
    #[error("dataset is degenerate: {0}")]
    DegenerateDataset(String),
    #[error("unknown question id {0:?}")]
    UnknownQuestion(String),
    #[error("annotation failed at prefix {index}: {source}")]
    Annotation { index: usize, source: EnvError },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model has {got} weights, feature spec needs {want}")]
    WeightMismatch { got: usize, want: usize },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

/// A labeled prefix; the prefix is the first `steps.len()` steps of some
/// solution to the referenced question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrefix {
    pub question_id: String,
    pub steps: Vec<Step>,
    pub label: u8,
}

impl LabeledPrefix {
    pub fn k(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSolution {
    pub solution: Solution,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Process,
    Outcome,
}

/// Everything needed to featurize a prefix without the environment object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: ScorerKind,
    pub modulus: u32,
    pub op_templates: Vec<String>,
    /// Width of step-index buckets for process features; 0 disables them.
    #[serde(default)]
    pub step_bucket_width: usize,
    #[serde(default)]
    pub step_buckets: usize,
}

impl FeatureSpec {
    pub fn process(env: &Env) -> Self {
        FeatureSpec {
            kind: ScorerKind::Process,
            modulus: env.modulus(),
            op_templates: env.config().op_templates.clone(),
            step_bucket_width: 0,
            step_buckets: 0,
        }
    }

    pub fn outcome(env: &Env) -> Self {
        FeatureSpec {
            kind: ScorerKind::Outcome,
            ..FeatureSpec::process(env)
        }
    }

    pub fn dim(&self) -> usize {
        let m = self.modulus as usize;
        match self.kind {
            // residual, last kind, answered, answer correct, repetition, bias
            ScorerKind::Process => m + 3 + 2 + 1 + self.step_buckets_used() + 1,
            // residual, answered, answer correct, log length, filler share, bias
            ScorerKind::Outcome => m + 2 + 1 + 1 + 1,
        }
    }

    fn step_buckets_used(&self) -> usize {
        if self.step_bucket_width > 0 {
            self.step_buckets
        } else {
            0
        }
    }

    fn ops(&self) -> Result<Vec<Op>, EnvError> {
        self.op_templates.iter().map(|t| t.parse()).collect()
    }
}

/// Featurizes prefixes for one feature spec.
#[derive(Debug, Clone)]
pub struct Featurizer {
    spec: FeatureSpec,
    ops: HashMap<String, Op>,
}

/// Replay summary of a step sequence.
struct Replayed {
    value: u32,
    answered: bool,
    answer_correct: bool,
}

impl Featurizer {
    pub fn new(spec: FeatureSpec) -> Result<Self, RewardModelError> {
        if spec.modulus < 2 {
            return Err(RewardModelError::InvalidConfig("modulus must be at least 2".into()));
        }
        if spec.step_bucket_width > 0 && spec.step_buckets == 0 {
            return Err(RewardModelError::InvalidConfig("step buckets enabled with zero buckets".into()));
        }
        let ops = spec.ops().map_err(|e| RewardModelError::InvalidConfig(e.to_string()))?;
        let ops = spec.op_templates.iter().cloned().zip(ops).collect();
        Ok(Featurizer { spec, ops })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    fn replay(&self, question: &Question, steps: &[Step]) -> Replayed {
        let m = self.spec.modulus;
        let mut value = question.start % m;
        for s in steps {
            match s.kind {
                StepKind::Compute => {
                    if let Some(op) = s.op_text().and_then(|t| self.ops.get(t)) {
                        value = op.apply(value, m);
                    }
                }
                StepKind::Filler => {}
                StepKind::Answer => {
                    let claim = s.answer_value();
                    let ok = claim == Some(value as i64) && claim == Some(question.target as i64);
                    return Replayed {
                        value,
                        answered: true,
                        answer_correct: ok,
                    };
                }
            }
        }
        Replayed {
            value,
            answered: false,
            answer_correct: false,
        }
    }

    fn residual(&self, question: &Question, value: u32) -> usize {
        let m = self.spec.modulus;
        ((question.target % m + m - value) % m) as usize
    }

    /// Features of the prefix made of all of `steps`.
    pub fn features(&self, question: &Question, steps: &[Step]) -> Vec<f64> {
        let m = self.spec.modulus as usize;
        let mut x = vec![0.0; self.spec.dim()];
        let r = self.replay(question, steps);
        x[self.residual(question, r.value)] = 1.0;
        let mut at = m;
        match self.spec.kind {
            ScorerKind::Process => {
                if let Some(last) = steps.last() {
                    let kind = match last.kind {
                        StepKind::Compute => 0,
                        StepKind::Filler => 1,
                        StepKind::Answer => 2,
                    };
                    x[at + kind] = 1.0;
                }
                at += 3;
                x[at] = f64::from(u8::from(r.answered));
                x[at + 1] = f64::from(u8::from(r.answer_correct));
                at += 2;
                let reps = steps.last().map_or(0, |last| {
                    steps.iter().filter(|s| s.template_id == last.template_id).count() - 1
                });
                x[at] = (1.0 + reps as f64).ln();
                at += 1;
                let nb = self.spec.step_buckets_used();
                if nb > 0 {
                    let b = (steps.len().saturating_sub(1) / self.spec.step_bucket_width).min(nb - 1);
                    x[at + b] = 1.0;
                }
                at += nb;
            }
            ScorerKind::Outcome => {
                x[at] = f64::from(u8::from(r.answered));
                x[at + 1] = f64::from(u8::from(r.answer_correct));
                at += 2;
                x[at] = (1.0 + steps.len() as f64).ln();
                at += 1;
                let fillers = steps.iter().filter(|s| s.kind == StepKind::Filler).count();
                x[at] = if steps.is_empty() {
                    0.0
                } else {
                    fillers as f64 / steps.len() as f64
                };
                at += 1;
            }
        }
        x[at] = 1.0;
        x
    }
}

fn sigmoid(z: f64) -> f64 {
    // keep scores strictly inside (0, 1) in floating point
    let z = z.clamp(-30.0, 30.0);
    1.0 / (1.0 + (-z).exp())
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// A logistic scorer with its feature spec; serialized as a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticScorer {
    pub version: u32,
    pub feature_spec: FeatureSpec,
    pub weights: Vec<f64>,
}

/// Process reward model: scores each prefix.
#[derive(Debug, Clone)]
pub struct SurrogatePrm {
    model: LogisticScorer,
    featurizer: Featurizer,
}

/// Outcome reward model: scores whole solutions.
#[derive(Debug, Clone)]
pub struct SurrogateOrm {
    model: LogisticScorer,
    featurizer: Featurizer,
}

fn checked(model: LogisticScorer, kind: ScorerKind) -> Result<(LogisticScorer, Featurizer), RewardModelError> {
    if model.version != CHECKPOINT_VERSION {
        return Err(RewardModelError::Version(model.version));
    }
    if model.feature_spec.kind != kind {
        return Err(RewardModelError::InvalidConfig(format!(
            "expected a {kind:?} checkpoint, got {:?}",
            model.feature_spec.kind
        )));
    }
    let featurizer = Featurizer::new(model.feature_spec.clone())?;
    let want = model.feature_spec.dim();
    if model.weights.len() != want || model.weights.iter().any(|w| !w.is_finite()) {
        return Err(RewardModelError::WeightMismatch {
            got: model.weights.len(),
            want,
        });
    }
    Ok((model, featurizer))
}

impl SurrogatePrm {
    pub fn from_checkpoint(model: LogisticScorer) -> Result<Self, RewardModelError> {
        let (model, featurizer) = checked(model, ScorerKind::Process)?;
        Ok(SurrogatePrm { model, featurizer })
    }

    pub fn zero(spec: FeatureSpec) -> Result<Self, RewardModelError> {
        let weights = vec![0.0; spec.dim()];
        Self::from_checkpoint(LogisticScorer {
            version: CHECKPOINT_VERSION,
            feature_spec: spec,
            weights,
        })
    }

    pub fn checkpoint(&self) -> &LogisticScorer {
        &self.model
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }
}

impl SurrogateOrm {
    pub fn from_checkpoint(model: LogisticScorer) -> Result<Self, RewardModelError> {
        let (model, featurizer) = checked(model, ScorerKind::Outcome)?;
        Ok(SurrogateOrm { model, featurizer })
    }

    pub fn zero(spec: FeatureSpec) -> Result<Self, RewardModelError> {
        let weights = vec![0.0; spec.dim()];
        Self::from_checkpoint(LogisticScorer {
            version: CHECKPOINT_VERSION,
            feature_spec: spec,
            weights,
        })
    }

    pub fn checkpoint(&self) -> &LogisticScorer {
        &self.model
    }
}

/// Process score of the prefix made of all of `prefix`.
pub fn prm_score(prm: &SurrogatePrm, question: &Question, prefix: &[Step]) -> f64 {
    sigmoid(dot(&prm.model.weights, &prm.featurizer.features(question, prefix)))
}

pub fn orm_score(orm: &SurrogateOrm, question: &Question, solution: &Solution) -> f64 {
    sigmoid(dot(&orm.model.weights, &orm.featurizer.features(question, &solution.steps)))
}

/// Raw per-step process rewards of a whole step sequence.
pub fn score_steps(prm: &SurrogatePrm, question: &Question, steps: &[Step]) -> StepRewardSeq {
    let values = (1..=steps.len())
        .map(|k| prm_score(prm, question, &steps[..k]))
        .collect();
    StepRewardSeq::new(values).expect("logistic scores are finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Weight each class by the inverse of its frequency.
    pub balance_classes: bool,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig {
            epochs: 200,
            learning_rate: 4.0,
            l2: 1e-4,
            balance_classes: true,
        }
    }
}

/// Result of fitting a logistic scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub weights: Vec<f64>,
    /// Training objective before the first epoch and after each epoch.
    pub losses: Vec<f64>,
}

fn objective(w: &[f64], xs: &[Vec<f64>], ys: &[f64], cw: &[f64], l2: f64) -> (f64, Vec<f64>) {
    let total: f64 = cw.iter().sum();
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for ((x, &y), &c) in xs.iter().zip(ys).zip(cw) {
        let z = dot(w, x);
        // numerically stable log(1 + e^z) - y z
        let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        loss += c * (softplus - y * z);
        let p = 1.0 / (1.0 + (-z).exp());
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += c * (p - y) * xi;
        }
    }
    loss /= total;
    for g in &mut grad {
        *g /= total;
    }
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    for (g, v) in grad.iter_mut().zip(w) {
        *g += l2 * v;
    }
    (loss, grad)
}

/// Full-batch gradient descent on weighted binary cross-entropy with a
/// backtracking step, so the objective never increases between epochs.
pub fn fit_logistic(xs: &[Vec<f64>], labels: &[u8], cfg: &RmTrainConfig) -> Result<FitReport, RewardModelError> {
    if xs.is_empty() {
        return Err(RewardModelError::DegenerateDataset("no examples".into()));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0 && cfg.l2.is_finite() && cfg.l2 >= 0.0) {
        return Err(RewardModelError::InvalidConfig(format!("{cfg:?}")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(RewardModelError::DegenerateDataset("only one label class present".into()));
    }
    let ys: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    let cw: Vec<f64> = labels
        .iter()
        .map(|&y| match (cfg.balance_classes, y) {
            (false, _) => 1.0,
            (true, 1) => 0.5 / pos as f64,
            (true, _) => 0.5 / neg as f64,
        })
        .collect();
    let dim = xs[0].len();
    let mut w = vec![0.0; dim];
    let (mut loss, mut grad) = objective(&w, xs, &ys, &cw, cfg.l2);
    let mut losses = vec![loss];
    let mut step = cfg.learning_rate;
    for _ in 0..cfg.epochs {
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = w.iter().zip(&grad).map(|(v, g)| v - step * g).collect();
            let (tl, tg) = objective(&trial, xs, &ys, &cw, cfg.l2);
            if tl <= loss - 0.5 * step * gnorm2 {
                w = trial;
                loss = tl;
                grad = tg;
                accepted = true;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        losses.push(loss);
        if !accepted {
            break;
        }
    }
    Ok(FitReport { weights: w, losses })
}

fn question_index(questions: &[Question]) -> HashMap<&str, &Question> {
    questions.iter().map(|q| (q.id.as_str(), q)).collect()
}

fn lookup<'a>(index: &HashMap<&str, &'a Question>, id: &str) -> Result<&'a Question, RewardModelError> {
    index
        .get(id)
        .copied()
        .ok_or_else(|| RewardModelError::UnknownQuestion(id.to_string()))
}

pub fn train_prm(
    dataset: &[LabeledPrefix],
    questions: &[Question],
    spec: FeatureSpec,
    cfg: &RmTrainConfig,
) -> Result<(SurrogatePrm, FitReport), RewardModelError> {
    if spec.kind != ScorerKind::Process {
        return Err(RewardModelError::InvalidConfig("process model needs a process feature spec".into()));
    }
    let featurizer = Featurizer::new(spec.clone())?;
    let index = question_index(questions);
    let xs = dataset
        .iter()
        .map(|p| Ok(featurizer.features(lookup(&index, &p.question_id)?, &p.steps)))
        .collect::<Result<Vec<_>, RewardModelError>>()?;
    let labels: Vec<u8> = dataset.iter().map(|p| p.label).collect();
    let report = fit_logistic(&xs, &labels, cfg)?;
    let prm = SurrogatePrm::from_checkpoint(LogisticScorer {
        version: CHECKPOINT_VERSION,
        feature_spec: spec,
        weights: report.weights.clone(),
    })?;
    Ok((prm, report))
}

pub fn train_orm(
    dataset: &[LabeledSolution],
    questions: &[Question],
    spec: FeatureSpec,
    cfg: &RmTrainConfig,
) -> Result<(SurrogateOrm, FitReport), RewardModelError> {
    if spec.kind != ScorerKind::Outcome {
        return Err(RewardModelError::InvalidConfig("outcome model needs an outcome feature spec".into()));
    }
    let featurizer = Featurizer::new(spec.clone())?;
    let index = question_index(questions);
    let xs = dataset
        .iter()
        .map(|s| Ok(featurizer.features(lookup(&index, &s.solution.question_id)?, &s.solution.steps)))
        .collect::<Result<Vec<_>, RewardModelError>>()?;
    let labels: Vec<u8> = dataset.iter().map(|s| s.label).collect();
    let report = fit_logistic(&xs, &labels, cfg)?;
    let orm = SurrogateOrm::from_checkpoint(LogisticScorer {
        version: CHECKPOINT_VERSION,
        feature_spec: spec,
        weights: report.weights.clone(),
    })?;
    Ok((orm, report))
}

/// Samples a full solution from the policy for `question`.
pub fn sample_solution<R: Rng + ?Sized>(
    policy: &PolicyParams,
    env: &Env,
    question: &Question,
    decode: Decode,
    rng: &mut R,
) -> Solution {
    let ep = policy.generate(env, question, env.initial_state(question), decode, rng);
    let mut solution = Solution::new(question.id.clone(), ep.steps, false);
    solution.correct = env.check_correct(question, &solution);
    solution
}

/// Samples `samples_per_question` solutions per question and keeps the
/// questions that got both correct and incorrect samples. Sample `j` of
/// question `i` uses stream `(seed, i, j)`.
pub fn collect_rm_dataset(
    policy: &PolicyParams,
    questions: &[Question],
    samples_per_question: usize,
    env: &Env,
    seed: u64,
) -> Result<Vec<LabeledSolution>, RewardModelError> {
    if samples_per_question < 2 {
        return Err(RewardModelError::InvalidConfig("need at least 2 samples per question".into()));
    }
    let groups: Vec<Vec<LabeledSolution>> = questions
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            (0..samples_per_question)
                .map(|j| {
                    let mut rng = stream(seed, &[i as u64, j as u64]);
                    let solution = sample_solution(policy, env, q, Decode::Sample { temperature: 1.0 }, &mut rng);
                    let label = u8::from(solution.correct);
                    LabeledSolution { solution, label }
                })
                .collect()
        })
        .collect();
    let kept: Vec<LabeledSolution> = groups
        .into_iter()
        .filter(|g| g.iter().any(|s| s.label == 1) && g.iter().any(|s| s.label == 0))
        .flatten()
        .collect();
    if kept.is_empty() {
        return Err(RewardModelError::DatasetEmpty);
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub completions_per_prefix: usize,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        AnnotationConfig {
            completions_per_prefix: 8,
        }
    }
}

/// Anything that can finish a partial solution from an environment state.
pub trait Completer: Sync {
    fn complete(&self, env: &Env, question: &Question, state: EnvState, rng: &mut dyn rand::RngCore) -> Vec<Step>;
}

impl Completer for PolicyParams {
    fn complete(&self, env: &Env, question: &Question, state: EnvState, rng: &mut dyn rand::RngCore) -> Vec<Step> {
        self.generate(env, question, state, Decode::Sample { temperature: 1.0 }, rng)
            .steps
    }
}

/// Labels every prefix of `solution`. Prefix `k` is positive iff at least one
/// of the completions started from its state ends correct; a prefix that
/// already contains the answer step is labeled by its own correctness.
/// Completion `c` of prefix `k` uses stream `(seed, k, c)`.
pub fn annotate_process<C: Completer + ?Sized>(
    question: &Question,
    solution: &Solution,
    config: &AnnotationConfig,
    env: &Env,
    completer: &C,
    seed: u64,
) -> Result<Vec<LabeledPrefix>, RewardModelError> {
    if solution.steps.is_empty() {
        return Err(RewardModelError::DegenerateDataset("solution has no steps".into()));
    }
    if config.completions_per_prefix == 0 {
        return Err(RewardModelError::InvalidConfig("completions_per_prefix must be positive".into()));
    }
    let mut state = env.initial_state(question);
    let mut out = Vec::with_capacity(solution.steps.len());
    for k in 1..=solution.steps.len() {
        let step = &solution.steps[k - 1];
        state = env
            .apply_step(state, step)
            .map_err(|source| RewardModelError::Annotation { index: k, source })?;
        let prefix = &solution.steps[..k];
        let label = if prefix.iter().any(|s| s.kind == StepKind::Answer) {
            let done = Solution::new(question.id.clone(), prefix.to_vec(), false);
            env.check_correct(question, &done)
        } else {
            (0..config.completions_per_prefix).any(|c| {
                let mut rng = stream(seed, &[k as u64, c as u64]);
                let mut steps = prefix.to_vec();
                steps.extend(completer.complete(env, question, state, &mut rng));
                env.check_correct(question, &Solution::new(question.id.clone(), steps, false))
            })
        };
        out.push(LabeledPrefix {
            question_id: question.id.clone(),
            steps: prefix.to_vec(),
            label: u8::from(label),
        });
    }
    Ok(out)
}

/// Annotates a whole solution set in parallel; solution `i` uses seed
/// `(seed, i)`.
pub fn annotate_dataset<C: Completer + ?Sized>(
    solutions: &[LabeledSolution],
    questions: &[Question],
    config: &AnnotationConfig,
    env: &Env,
    completer: &C,
    seed: u64,
) -> Result<Vec<LabeledPrefix>, RewardModelError> {
    let index = question_index(questions);
    let parts = solutions
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let q = lookup(&index, &s.solution.question_id)?;
            annotate_process(
                q,
                &s.solution,
                config,
                env,
                completer,
                crate::rng::derive_seed(seed, &[i as u64]),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Area under the ROC curve, with ties counted as half. `None` if a class is
/// missing.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // midranks over tied groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            if labels[t] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}
