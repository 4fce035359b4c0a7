//! PPO on the step-level decision process.
//!
//! One action is one step. Each step earns `alpha * shaped_k` minus the KL
//! penalty `beta * (log pi - log pi_ref)`, and the last step also earns the
//! success reward. Advantages use GAE over a per-residual empirical value
//! baseline and are whitened per minibatch.

pub mod policy;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Env;
use crate::metrics::{evaluate, EvalReport, MetricsError};
use crate::reward_models::{orm_score, score_steps, SurrogateOrm, SurrogatePrm};
use crate::rng::stream;
use crate::shaping::{quantile, trajectory_return, RewardCoefficients, SchemeKind, ShapingError, ShapingScheme};
use crate::trajectory::{Question, Solution, StepRewardSeq};
use policy::{log_softmax, softmax, Decode, PolicyParams, PriorConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Shaping(#[from] ShapingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Policy(#[from] policy::PolicyError),
    #[error("scheme {0} needs a {1} reward model")]
    MissingModel(SchemeKind, &'static str),
    #[error("non-finite gradient in minibatch {minibatch} (row {row}, loss {loss})")]
    NonFiniteGradient { minibatch: usize, row: usize, loss: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Zero,
    /// Mean suffix return of the batch steps taken from the same residual.
    BucketMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub questions_per_batch: usize,
    pub solutions_per_question: usize,
    pub minibatches: usize,
    pub learning_rate: f64,
    pub coeffs: RewardCoefficients,
    pub ppo_clip_epsilon: f64,
    pub gae_gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub whiten: bool,
    pub baseline: Baseline,
    pub iterations: usize,
    /// Anneal the learning rate linearly to zero over the run.
    pub anneal: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            questions_per_batch: 128,
            solutions_per_question: 8,
            minibatches: 4,
            learning_rate: 20.0,
            coeffs: RewardCoefficients::default(),
            ppo_clip_epsilon: 0.2,
            gae_gamma: 0.95,
            gae_lambda: 0.95,
            epochs: 1,
            whiten: true,
            baseline: Baseline::BucketMean,
            iterations: 100,
            anneal: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.questions_per_batch == 0 || self.solutions_per_question == 0 {
            return bad("batch must be non-empty");
        }
        if self.minibatches == 0 || !(self.questions_per_batch * self.solutions_per_question).is_multiple_of(self.minibatches) {
            return bad("minibatches must divide the batch");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.ppo_clip_epsilon.is_finite() && self.ppo_clip_epsilon >= 0.0) {
            return bad("ppo_clip_epsilon must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.gae_gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_gamma and gae_lambda must lie in [0, 1]");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        self.coeffs.validate()?;
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.questions_per_batch * self.solutions_per_question
    }
}

/// Reward models a scheme may need.
#[derive(Debug, Clone, Default)]
pub struct RewardSource {
    pub prm: Option<SurrogatePrm>,
    pub orm: Option<SurrogateOrm>,
}

/// One sampled solution with everything the update needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutItem {
    pub question_index: usize,
    pub solution: Solution,
    pub buckets: Vec<usize>,
    pub actions: Vec<usize>,
    pub raw: StepRewardSeq,
    pub shaped: StepRewardSeq,
    pub logp_theta: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub items: Vec<RolloutItem>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn mean_kl(&self) -> f64 {
        let (sum, n) = self.items.iter().fold((0.0, 0usize), |(s, n), it| {
            let d: f64 = it.logp_theta.iter().zip(&it.logp_ref).map(|(a, b)| a - b).sum();
            (s + d, n + it.logp_theta.len())
        });
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn mean_return(&self, coeffs: &RewardCoefficients) -> f64 {
        let total: f64 = self
            .items
            .iter()
            .map(|it| trajectory_return(&it.shaped, it.correct, coeffs).expect("rollouts have steps"))
            .sum();
        total / self.items.len().max(1) as f64
    }
}

/// Samples `solutions_per_question` solutions per question and shapes their
/// rewards. Solution `j` of question `i` uses stream `(seed, i, j)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    policy: &PolicyParams,
    reference: &PolicyParams,
    questions: &[Question],
    cfg: &OptimConfig,
    env: &Env,
    scheme: &ShapingScheme,
    rewards: &RewardSource,
    seed: u64,
) -> Result<RolloutBatch, TrainError> {
    if scheme.kind.uses_process_rewards() && rewards.prm.is_none() {
        return Err(TrainError::MissingModel(scheme.kind, "process"));
    }
    if scheme.kind == SchemeKind::Outcome && rewards.orm.is_none() {
        return Err(TrainError::MissingModel(scheme.kind, "outcome"));
    }
    let per_question: Vec<Vec<(RolloutItem, f64)>> = questions
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            (0..cfg.solutions_per_question)
                .map(|j| {
                    let mut rng = stream(seed, &[i as u64, j as u64]);
                    let ep = policy.generate(env, q, env.initial_state(q), Decode::Sample { temperature: 1.0 }, &mut rng);
                    let mut solution = Solution::new(q.id.clone(), ep.steps, false);
                    solution.correct = env.check_correct(q, &solution);
                    let raw = match &rewards.prm {
                        Some(prm) if scheme.kind.uses_process_rewards() => score_steps(prm, q, &solution.steps),
                        _ => StepRewardSeq::zeros(solution.steps.len()),
                    };
                    let outcome = match &rewards.orm {
                        Some(orm) if scheme.kind == SchemeKind::Outcome => orm_score(orm, q, &solution),
                        _ => 0.0,
                    };
                    let logp_theta = ep.buckets.iter().zip(&ep.actions).map(|(&b, &a)| policy.log_prob(b, a)).collect();
                    let logp_ref = ep.buckets.iter().zip(&ep.actions).map(|(&b, &a)| reference.log_prob(b, a)).collect();
                    let item = RolloutItem {
                        question_index: i,
                        correct: solution.correct,
                        solution,
                        buckets: ep.buckets,
                        actions: ep.actions,
                        shaped: StepRewardSeq::zeros(0),
                        raw,
                        logp_theta,
                        logp_ref,
                    };
                    (item, outcome)
                })
                .collect()
        })
        .collect();
    let (mut items, outcomes): (Vec<RolloutItem>, Vec<f64>) = per_question.into_iter().flatten().unzip();
    let raws: Vec<StepRewardSeq> = items.iter().map(|it| it.raw.clone()).collect();
    let shaped = scheme.shape_batch(&raws, Some(&outcomes))?;
    for (it, s) in items.iter_mut().zip(shaped) {
        it.shaped = s;
    }
    Ok(RolloutBatch { items })
}

/// Per-step KL penalty `beta * (logp_theta - logp_ref)`, subtracted from the
/// step reward.
pub fn kl_term(logp_theta: f64, logp_ref: f64, beta: f64) -> f64 {
    beta * (logp_theta - logp_ref)
}

/// Per-step rewards of one rollout: dense reward minus KL penalty, with the
/// success reward on the last step.
pub fn step_rewards(item: &RolloutItem, coeffs: &RewardCoefficients) -> Vec<f64> {
    let mut r: Vec<f64> = item
        .shaped
        .values()
        .iter()
        .zip(item.logp_theta.iter().zip(&item.logp_ref))
        .map(|(&s, (&lt, &lr))| coeffs.alpha * s - kl_term(lt, lr, coeffs.beta))
        .collect();
    if item.correct {
        if let Some(last) = r.last_mut() {
            *last += coeffs.success_coef;
        }
    }
    r
}

/// Minibatch of trajectory `i`.
pub fn minibatch_of(i: usize, minibatches: usize) -> usize {
    i % minibatches
}

fn suffix_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Per-step advantages for every trajectory of the batch.
pub fn compute_advantages(batch: &RolloutBatch, cfg: &OptimConfig, num_buckets: usize) -> Vec<Vec<f64>> {
    let rewards: Vec<Vec<f64>> = batch.items.iter().map(|it| step_rewards(it, &cfg.coeffs)).collect();
    let value = match cfg.baseline {
        Baseline::Zero => vec![0.0; num_buckets],
        Baseline::BucketMean => {
            let mut sum = vec![0.0; num_buckets];
            let mut count = vec![0usize; num_buckets];
            for (it, r) in batch.items.iter().zip(&rewards) {
                for (&b, g) in it.buckets.iter().zip(suffix_returns(r, cfg.gae_gamma)) {
                    sum[b] += g;
                    count[b] += 1;
                }
            }
            sum.iter()
                .zip(&count)
                .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                .collect()
        }
    };
    let mut adv: Vec<Vec<f64>> = batch
        .items
        .iter()
        .zip(&rewards)
        .map(|(it, r)| {
            let n = r.len();
            let mut a = vec![0.0; n];
            let mut acc = 0.0;
            for t in (0..n).rev() {
                // trajectories end after their last step, answered or truncated
                let next = if t + 1 < n { value[it.buckets[t + 1]] } else { 0.0 };
                let delta = r[t] + cfg.gae_gamma * next - value[it.buckets[t]];
                acc = delta + cfg.gae_gamma * cfg.gae_lambda * acc;
                a[t] = acc;
            }
            a
        })
        .collect();
    if cfg.whiten {
        for m in 0..cfg.minibatches {
            let members: Vec<usize> = (0..adv.len()).filter(|&i| minibatch_of(i, cfg.minibatches) == m).collect();
            let n: usize = members.iter().map(|&i| adv[i].len()).sum();
            if n < 2 {
                continue;
            }
            let mean = members.iter().flat_map(|&i| adv[i].iter()).sum::<f64>() / n as f64;
            let var = members
                .iter()
                .flat_map(|&i| adv[i].iter())
                .map(|a| (a - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let std = var.sqrt().max(1e-8);
            for &i in &members {
                for a in &mut adv[i] {
                    *a = (*a - mean) / std;
                }
            }
        }
    }
    adv
}

/// One term of the clipped surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateTerm {
    pub bucket: usize,
    pub action: usize,
    pub logp_old: f64,
    pub advantage: f64,
}

fn ratio(policy: &PolicyParams, t: &SurrogateTerm) -> f64 {
    (policy.log_prob(t.bucket, t.action) - t.logp_old).exp()
}

/// Mean clipped surrogate `min(rho A, clip(rho, 1-eps, 1+eps) A)`; `None`
/// disables clipping.
pub fn surrogate_objective(policy: &PolicyParams, terms: &[SurrogateTerm], epsilon: Option<f64>) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    let total: f64 = terms
        .iter()
        .map(|t| {
            let rho = ratio(policy, t);
            match epsilon {
                None => rho * t.advantage,
                Some(eps) => (rho * t.advantage).min(rho.clamp(1.0 - eps, 1.0 + eps) * t.advantage),
            }
        })
        .sum();
    total / terms.len() as f64
}

/// Gradient of [`surrogate_objective`] with respect to the logits. A clipped
/// term passes gradient only while the ratio is strictly inside the clip
/// range or the unclipped term is strictly the smaller one.
pub fn surrogate_gradient(policy: &PolicyParams, terms: &[SurrogateTerm], epsilon: Option<f64>) -> Vec<Vec<f64>> {
    let cols = policy.num_actions();
    let mut grad = vec![vec![0.0; cols]; policy.logits.len()];
    if terms.is_empty() {
        return grad;
    }
    let n = terms.len() as f64;
    for t in terms {
        let rho = ratio(policy, t);
        let active = match epsilon {
            None => true,
            Some(eps) => {
                let inside = rho > 1.0 - eps && rho < 1.0 + eps;
                let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * t.advantage;
                inside || rho * t.advantage < clipped
            }
        };
        if !active {
            continue;
        }
        let probs = softmax(&policy.logits[t.bucket], policy.temperature);
        let scale = rho * t.advantage / (n * policy.temperature);
        for (j, p) in probs.iter().enumerate() {
            let ind = if j == t.action { 1.0 } else { 0.0 };
            grad[t.bucket][j] += scale * (ind - p);
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean clipped surrogate before each minibatch step, averaged.
    pub loss: f64,
    pub mean_ratio: f64,
    /// Sample estimate of KL(pi || pi_ref) on the batch steps.
    pub kl_to_ref: f64,
}

/// Clipped-surrogate ascent, one step per minibatch per epoch.
pub fn ppo_update(
    policy: &PolicyParams,
    batch: &RolloutBatch,
    advantages: &[Vec<f64>],
    cfg: &OptimConfig,
) -> Result<(PolicyParams, UpdateStats), TrainError> {
    let mut theta = policy.clone();
    let groups: Vec<Vec<SurrogateTerm>> = (0..cfg.minibatches)
        .map(|m| {
            batch
                .items
                .iter()
                .zip(advantages)
                .enumerate()
                .filter(|(i, _)| minibatch_of(*i, cfg.minibatches) == m)
                .flat_map(|(_, (it, adv))| {
                    it.buckets
                        .iter()
                        .zip(&it.actions)
                        .zip(&it.logp_theta)
                        .zip(adv)
                        .map(|(((&bucket, &action), &logp_old), &advantage)| SurrogateTerm {
                            bucket,
                            action,
                            logp_old,
                            advantage,
                        })
                })
                .collect()
        })
        .collect();
    let mut loss_sum = 0.0;
    let mut ratio_sum = 0.0;
    let mut ratio_n = 0usize;
    let mut steps = 0usize;
    for _ in 0..cfg.epochs {
        for (m, terms) in groups.iter().enumerate() {
            let loss = surrogate_objective(&theta, terms, Some(cfg.ppo_clip_epsilon));
            for t in terms {
                ratio_sum += ratio(&theta, t);
                ratio_n += 1;
            }
            let grad = surrogate_gradient(&theta, terms, Some(cfg.ppo_clip_epsilon));
            if let Some(row) = grad.iter().position(|r| r.iter().any(|g| !g.is_finite())) {
                return Err(TrainError::NonFiniteGradient { minibatch: m, row, loss });
            }
            for (row, g) in theta.logits.iter_mut().zip(&grad) {
                for (z, d) in row.iter_mut().zip(g) {
                    *z += cfg.learning_rate * d;
                }
            }
            loss_sum += loss;
            steps += 1;
        }
    }
    let stats = UpdateStats {
        loss: loss_sum / steps.max(1) as f64,
        mean_ratio: if ratio_n == 0 { 1.0 } else { ratio_sum / ratio_n as f64 },
        kl_to_ref: batch.mean_kl(),
    };
    Ok((theta, stats))
}

/// Exact KL(pi || pi_ref) of one residual row.
pub fn row_kl(policy: &PolicyParams, reference: &PolicyParams, bucket: usize) -> f64 {
    let lp = log_softmax(&policy.logits[bucket], policy.temperature);
    let lr = log_softmax(&reference.logits[bucket], reference.temperature);
    lp.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Named seeds; every random stream of a run derives from one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Base-policy noise and training rollouts.
    pub policy: u64,
    /// Training and calibration questions.
    pub env: u64,
    /// Annotation completions.
    pub annotation: u64,
    /// Evaluation questions and sampling.
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            policy: 1,
            env: 2,
            annotation: 3,
            eval: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub questions: usize,
    pub pass_k: usize,
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            questions: 256,
            pass_k: 16,
            every: 10,
        }
    }
}

/// How the clip threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtaConfig {
    /// Fixed threshold; when absent it is calibrated before training.
    pub value: Option<f64>,
    /// Quantile of process scores on a held-out rollout batch.
    pub quantile: f64,
    /// Questions in the held-out batch.
    pub questions: usize,
}

impl Default for EtaConfig {
    fn default() -> Self {
        EtaConfig {
            value: None,
            quantile: 0.2,
            questions: 128,
        }
    }
}

/// Stream label for calibration draws, kept apart from training iterations.
const CALIBRATION: u64 = u64::MAX;

/// Training questions of iteration `iter`.
pub fn batch_questions(env: &Env, seeds: &Seeds, iter: usize, count: usize) -> Vec<Question> {
    (0..count)
        .map(|i| {
            let mut rng = stream(seeds.env, &[iter as u64, i as u64]);
            env.sample_question(format!("t{iter}-{i}"), &mut rng)
        })
        .collect()
}

pub fn eval_questions(env: &Env, seeds: &Seeds, count: usize) -> Vec<Question> {
    env.sample_questions(crate::rng::derive_seed(seeds.eval, &[0]), count)
}

/// The reference policy of a run.
pub fn reference_policy(env: &Env, prior: &PriorConfig, seeds: &Seeds) -> PolicyParams {
    PolicyParams::base(env, prior, &mut stream(seeds.policy, &[CALIBRATION, 0]))
}

/// Clip threshold from process scores of reference-policy rollouts on
/// held-out questions.
pub fn calibrate_eta(
    env: &Env,
    reference: &PolicyParams,
    prm: &SurrogatePrm,
    eta: &EtaConfig,
    seeds: &Seeds,
    samples_per_question: usize,
) -> Result<f64, TrainError> {
    if let Some(v) = eta.value {
        return Ok(v);
    }
    let questions: Vec<Question> = (0..eta.questions)
        .map(|i| {
            let mut rng = stream(seeds.env, &[CALIBRATION, i as u64]);
            env.sample_question(format!("c{i}"), &mut rng)
        })
        .collect();
    let scores: Vec<f64> = questions
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, q)| {
            (0..samples_per_question).flat_map(move |j| {
                let mut rng = stream(seeds.policy, &[CALIBRATION, 1, i as u64, j as u64]);
                let ep = reference.generate(env, q, env.initial_state(q), Decode::Sample { temperature: 1.0 }, &mut rng);
                score_steps(prm, q, &ep.steps).into_inner()
            })
        })
        .collect();
    quantile(&scores, eta.quantile).ok_or_else(|| TrainError::InvalidConfig("no calibration scores".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub greedy_acc: f64,
    pub sample_acc: f64,
    pub pass16: f64,
    pub mean_steps: f64,
    pub mean_tokens: f64,
    pub mean_return: f64,
    pub mean_kl: f64,
}

impl LogRow {
    pub fn new(iter: usize, eval: &EvalReport, batch: &RolloutBatch, coeffs: &RewardCoefficients) -> Self {
        LogRow {
            iter,
            greedy_acc: eval.greedy_acc,
            sample_acc: eval.sampling_acc,
            pass16: eval.pass_at_k,
            mean_steps: eval.mean_steps,
            mean_tokens: eval.mean_tokens,
            mean_return: batch.mean_return(coeffs),
            mean_kl: batch.mean_kl(),
        }
    }
}

/// Everything that defines a training run besides the environment and
/// reward models.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub scheme: SchemeKind,
    pub c_penalty: f64,
    pub eta: EtaConfig,
    pub optim: OptimConfig,
    pub prior: PriorConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub log: Vec<LogRow>,
    pub policy: PolicyParams,
    pub eta: f64,
    /// Iteration the returned policy belongs to.
    pub iterations: usize,
}

/// Where a run starts and stops. The schedule always spans
/// `optim.iterations`; stopping early and resuming from the saved policy
/// reproduces the uninterrupted run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Window {
    /// Policy and iteration to resume from; the reference policy at 0 if absent.
    pub init: Option<(PolicyParams, usize)>,
    /// Last iteration to run; `optim.iterations` if absent.
    pub stop: Option<usize>,
}

/// Runs training. Row `i` reports the policy before update `i` and the batch
/// sampled from it; rows are written every `eval.every` iterations and at the
/// last one.
pub fn train(env: &Env, spec: &RunSpec, rewards: &RewardSource, window: Window) -> Result<TrainOutput, TrainError> {
    spec.optim.validate()?;
    let reference = reference_policy(env, &spec.prior, &spec.seeds);
    reference.check(env)?;
    let eta = match (&rewards.prm, spec.scheme.uses_clip()) {
        (Some(prm), true) => calibrate_eta(
            env,
            &reference,
            prm,
            &spec.eta,
            &spec.seeds,
            spec.optim.solutions_per_question,
        )?,
        (None, true) => return Err(TrainError::MissingModel(spec.scheme, "process")),
        _ => spec.eta.value.unwrap_or(0.0),
    };
    let scheme = ShapingScheme::new(spec.scheme, eta, spec.c_penalty)?;
    let (mut policy, start) = window.init.unwrap_or_else(|| (reference.clone(), 0));
    policy.check(env)?;
    let eval_set = eval_questions(env, &spec.seeds, spec.eval.questions);
    let every = spec.eval.every.max(1);
    let n = spec.optim.iterations;
    let stop = window.stop.unwrap_or(n).min(n);
    if start > stop {
        return Err(TrainError::InvalidConfig(format!("cannot resume at iteration {start} past {stop}")));
    }
    let mut log = Vec::new();
    for iter in start..=stop {
        let questions = batch_questions(env, &spec.seeds, iter, spec.optim.questions_per_batch);
        let seed = crate::rng::derive_seed(spec.seeds.policy, &[iter as u64]);
        let batch = rollout(&policy, &reference, &questions, &spec.optim, env, &scheme, rewards, seed)?;
        if iter % every == 0 || iter == stop {
            let report = evaluate(&policy, &eval_set, env, spec.eval.pass_k, spec.seeds.eval)?;
            log.push(LogRow::new(iter, &report, &batch, &spec.optim.coeffs));
        }
        if iter < stop {
            let adv = compute_advantages(&batch, &spec.optim, env.modulus() as usize);
            let mut optim = spec.optim;
            if optim.anneal {
                optim.learning_rate *= 1.0 - iter as f64 / n as f64;
            }
            policy = ppo_update(&policy, &batch, &adv, &optim)?.0;
        }
    }
    Ok(TrainOutput {
        log,
        policy,
        eta,
        iterations: stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;

    fn env() -> Env {
        Env::new(EnvConfig::default()).unwrap()
    }

    fn small_cfg() -> OptimConfig {
        OptimConfig {
            questions_per_batch: 4,
            solutions_per_question: 4,
            minibatches: 2,
            ..Default::default()
        }
    }

    fn batch(e: &Env, cfg: &OptimConfig) -> (PolicyParams, RolloutBatch) {
        let p = PolicyParams::base(e, &PriorConfig::default(), &mut stream(1, &[]));
        let qs = e.sample_questions(3, cfg.questions_per_batch);
        let scheme = ShapingScheme::new(SchemeKind::SuccessOnly, 0.0, 0.0).unwrap();
        let b = rollout(&p, &p, &qs, cfg, e, &scheme, &RewardSource::default(), 5).unwrap();
        (p, b)
    }

    #[test]
    fn rollout_counts_and_truncation() {
        let e = env();
        let cfg = OptimConfig {
            questions_per_batch: 2,
            solutions_per_question: 8,
            ..small_cfg()
        };
        let (_, b) = batch(&e, &cfg);
        assert_eq!(b.len(), 16);
        for it in &b.items {
            assert_eq!(it.raw.len(), it.solution.steps.len());
            if !it.solution.has_answer() {
                assert!(!it.correct);
            }
        }
    }

    #[test]
    fn kl_term_signs() {
        assert_eq!(kl_term(-1.0, -1.0, 0.1), 0.0);
        assert_eq!(kl_term(-1.0, -2.0, 0.0), 0.0);
        assert!(kl_term(-1.0, -2.0, 0.1) > 0.0);
    }

    #[test]
    fn zero_baseline_full_lambda_gives_suffix_returns() {
        let e = env();
        let cfg = OptimConfig {
            baseline: Baseline::Zero,
            gae_lambda: 1.0,
            whiten: false,
            ..small_cfg()
        };
        let (_, b) = batch(&e, &cfg);
        let adv = compute_advantages(&b, &cfg, 53);
        for (it, a) in b.items.iter().zip(&adv) {
            let r = step_rewards(it, &cfg.coeffs);
            for k in 0..r.len() {
                let want: f64 = r[k..].iter().sum();
                assert!((a[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn whitened_minibatches_have_zero_mean() {
        let e = env();
        let cfg = small_cfg();
        let (_, b) = batch(&e, &cfg);
        let adv = compute_advantages(&b, &cfg, 53);
        for m in 0..cfg.minibatches {
            let v: Vec<f64> = adv
                .iter()
                .enumerate()
                .filter(|(i, _)| minibatch_of(*i, cfg.minibatches) == m)
                .flat_map(|(_, a)| a.iter().copied())
                .collect();
            assert!((v.iter().sum::<f64>() / v.len() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_advantages_and_zero_epsilon_leave_policy_unchanged() {
        let e = env();
        let cfg = small_cfg();
        let (p, b) = batch(&e, &cfg);
        let zeros: Vec<Vec<f64>> = b.items.iter().map(|it| vec![0.0; it.actions.len()]).collect();
        assert_eq!(ppo_update(&p, &b, &zeros, &cfg).unwrap().0, p);
        let adv = compute_advantages(&b, &cfg, 53);
        let tight = OptimConfig {
            ppo_clip_epsilon: 0.0,
            ..cfg
        };
        assert_eq!(ppo_update(&p, &b, &adv, &tight).unwrap().0, p);
    }

    #[test]
    fn positive_advantage_raises_its_logit() {
        let e = env();
        let p = PolicyParams::uniform(&e);
        let term = SurrogateTerm {
            bucket: 3,
            action: 2,
            logp_old: p.log_prob(3, 2),
            advantage: 1.0,
        };
        let g = surrogate_gradient(&p, &[term], Some(0.2));
        assert!(g[3][2] > 0.0);
        assert!(g[3].iter().enumerate().all(|(j, &v)| j == 2 || v < 0.0));
    }

    #[test]
    fn training_is_reproducible() {
        let e = env();
        let spec = RunSpec {
            scheme: SchemeKind::SuccessOnly,
            c_penalty: 0.1,
            eta: EtaConfig::default(),
            optim: OptimConfig {
                iterations: 2,
                ..small_cfg()
            },
            prior: PriorConfig::default(),
            eval: EvalConfig {
                questions: 16,
                pass_k: 4,
                every: 1,
            },
            seeds: Seeds::default(),
        };
        let a = train(&e, &spec, &RewardSource::default(), Window::default()).unwrap();
        let b = train(&e, &spec, &RewardSource::default(), Window::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 3);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn resuming_reproduces_the_full_run() {
        let e = env();
        let spec = RunSpec {
            scheme: SchemeKind::SuccessOnly,
            c_penalty: 0.1,
            eta: EtaConfig::default(),
            optim: OptimConfig {
                iterations: 4,
                ..small_cfg()
            },
            prior: PriorConfig::default(),
            eval: EvalConfig {
                questions: 16,
                pass_k: 2,
                every: 1,
            },
            seeds: Seeds::default(),
        };
        let rewards = RewardSource::default();
        let full = train(&e, &spec, &rewards, Window::default()).unwrap();
        let head = train(&e, &spec, &rewards, Window { init: None, stop: Some(2) }).unwrap();
        assert_eq!(head.iterations, 2);
        let tail = train(&e, &spec, &rewards, Window { init: Some((head.policy, 2)), stop: None }).unwrap();
        assert_eq!(&full.log[2..], &tail.log[..]);
        assert_eq!(full.policy, tail.policy);
    }
}
