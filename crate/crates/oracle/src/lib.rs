//! Slow, literal reference computations.
//!
//! Nothing here shares code with the main library. Shaping is re-derived
//! index by index, returns are summed term by term, reachability is found by
//! exhaustive search, and policy success is computed exactly by dynamic
//! programming over (value, steps taken).

use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    BudgetExceeded(&'static str),
    BadInput(&'static str),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::BudgetExceeded(what) => write!(f, "oracle budget exceeded: {what}"),
            OracleError::BadInput(what) => write!(f, "bad oracle input: {what}"),
        }
    }
}

impl std::error::Error for OracleError {}

/// Guards the exhaustive loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleBudget {
    pub max_states: usize,
    pub max_sequences: usize,
}

impl Default for OracleBudget {
    fn default() -> Self {
        OracleBudget {
            max_states: 1_000_000,
            max_sequences: 10_000,
        }
    }
}

/// Reward scheme, by its config name plus parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleScheme<'a> {
    pub name: &'a str,
    pub eta: f64,
    pub c_penalty: f64,
    /// Outcome score, for "SR+OR".
    pub outcome: f64,
}

fn clipped(raw: &[f64], eta: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for &r in raw {
        let v = r - eta;
        out.push(if v < 0.0 { v } else { 0.0 });
    }
    out
}

fn delta(r: &[f64]) -> Vec<f64> {
    let big_k = r.len();
    let mut out = Vec::new();
    // 1-based k as written: k < K-1, k = K-1, k = K
    for k in 1..=big_k {
        let v = if k + 1 < big_k {
            r[k - 1] - r[k]
        } else if k + 1 == big_k {
            r[k - 1]
        } else {
            0.0
        };
        out.push(v);
    }
    out
}

/// Shaped rewards of one sequence. "SR+PR-Normed" standardizes the sequence
/// on its own, as a batch of one.
pub fn oracle_shape(raw: &[f64], scheme: &OracleScheme) -> Result<Vec<f64>, OracleError> {
    if raw.is_empty() {
        return Err(OracleError::BadInput("empty reward sequence"));
    }
    let big_k = raw.len();
    Ok(match scheme.name {
        "SR" => vec![0.0; big_k],
        "SR+OR" => {
            let mut v = vec![0.0; big_k];
            v[big_k - 1] = scheme.outcome;
            v
        }
        "SR+PR" => raw.to_vec(),
        "SR+PR-Clip" => clipped(raw, scheme.eta),
        "SR+PR-Delta" => delta(raw),
        "SR+PR-Clip-Delta" => delta(&clipped(raw, scheme.eta)),
        "SR+PR-LengthNorm" => raw.iter().map(|r| r / big_k as f64).collect(),
        "SR+PR-LengthPenalty" => {
            let mut v = Vec::new();
            for k in 1..=big_k {
                v.push(raw[k - 1] - k as f64 * scheme.c_penalty);
            }
            v
        }
        "SR+PR-Normed" => {
            if big_k < 2 {
                return Err(OracleError::BadInput("need two values to standardize"));
            }
            let mut mean = 0.0;
            for r in raw {
                mean += r;
            }
            mean /= big_k as f64;
            let mut ss = 0.0;
            for r in raw {
                ss += (r - mean) * (r - mean);
            }
            let sd = (ss / (big_k - 1) as f64).sqrt();
            if sd == 0.0 {
                return Err(OracleError::BadInput("zero variance"));
            }
            raw.iter().map(|r| (r - mean) / sd).collect()
        }
        _ => return Err(OracleError::BadInput("unknown scheme")),
    })
}

/// Return from step `k` (1-based): shaped rewards from `k` to `K`, summed
/// one at a time, times `alpha`, plus the success reward.
pub fn oracle_suffix_return(
    raw: &[f64],
    scheme: &OracleScheme,
    correct: bool,
    alpha: f64,
    success_coef: f64,
    k: usize,
    budget: &OracleBudget,
) -> Result<f64, OracleError> {
    if raw.len() > budget.max_sequences {
        return Err(OracleError::BudgetExceeded("sequence too long"));
    }
    if k < 1 || k > raw.len() {
        return Err(OracleError::BadInput("step index out of range"));
    }
    let shaped = oracle_shape(raw, scheme)?;
    let mut total = 0.0;
    let mut i = k;
    while i <= shaped.len() {
        total += shaped[i - 1];
        i += 1;
    }
    Ok(alpha * total + if correct { success_coef } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TinyOp {
    Add(u64),
    Mul(u64),
    Square,
}

impl TinyOp {
    fn run(self, v: u64, m: u64) -> u64 {
        match self {
            TinyOp::Add(k) => (v + k) % m,
            TinyOp::Mul(k) => (v * k) % m,
            TinyOp::Square => (v * v) % m,
        }
    }
}

/// A small arithmetic environment. Actions are the ops, then `fillers`
/// no-op actions, then answering with the current value. Non-answer actions
/// cost one step each; answering is free.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyEnv {
    pub modulus: u64,
    pub ops: Vec<TinyOp>,
    pub fillers: usize,
    pub max_steps: usize,
}

impl TinyEnv {
    pub fn num_actions(&self) -> usize {
        self.ops.len() + self.fillers + 1
    }
}

/// Whether `target` can be reached from `value` using at most `steps` ops,
/// by exhaustive depth-first search over op sequences.
pub fn oracle_reachable(
    env: &TinyEnv,
    value: u64,
    target: u64,
    steps: usize,
    budget: &OracleBudget,
) -> Result<bool, OracleError> {
    let mut memo: HashMap<(u64, usize), bool> = HashMap::new();
    search(env, value % env.modulus, target % env.modulus, steps, budget, &mut memo)
}

fn search(
    env: &TinyEnv,
    value: u64,
    target: u64,
    left: usize,
    budget: &OracleBudget,
    memo: &mut HashMap<(u64, usize), bool>,
) -> Result<bool, OracleError> {
    if value == target {
        return Ok(true);
    }
    if left == 0 {
        return Ok(false);
    }
    if let Some(&hit) = memo.get(&(value, left)) {
        return Ok(hit);
    }
    if memo.len() >= budget.max_states {
        return Err(OracleError::BudgetExceeded("reachability states"));
    }
    let mut hit = false;
    for op in &env.ops {
        if search(env, op.run(value, env.modulus), target, left - 1, budget, memo)? {
            hit = true;
            break;
        }
    }
    memo.insert((value, left), hit);
    Ok(hit)
}

/// Exact probability that a residual-indexed softmax policy solves the
/// question when sampling at temperature `temperature`. Row `d` of `logits`
/// is used when `(target - value) mod m == d`. Answering ends the episode
/// and succeeds iff the value equals the target; any other action taken
/// with the budget spent ends it in failure.
pub fn oracle_exact_policy_eval(
    logits: &[Vec<f64>],
    temperature: f64,
    env: &TinyEnv,
    start: u64,
    target: u64,
    budget: &OracleBudget,
) -> Result<f64, OracleError> {
    let m = env.modulus;
    if logits.len() != m as usize || logits.iter().any(|r| r.len() != env.num_actions()) {
        return Err(OracleError::BadInput("logit table shape"));
    }
    if (m as usize) * (env.max_steps + 1) > budget.max_states {
        return Err(OracleError::BudgetExceeded("policy evaluation states"));
    }
    let probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|row| {
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|z| ((z - top) / temperature).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect();
    let target = target % m;
    let n_ops = env.ops.len();
    // win[t][v]: success probability at value v with t steps taken
    let mut win = vec![vec![0.0; m as usize]; env.max_steps + 1];
    for t in (0..=env.max_steps).rev() {
        for v in 0..m {
            let d = ((target + m - v) % m) as usize;
            let p = &probs[d];
            let mut total = if v == target { p[env.num_actions() - 1] } else { 0.0 };
            if t < env.max_steps {
                for (a, op) in env.ops.iter().enumerate() {
                    total += p[a] * win[t + 1][op.run(v, m) as usize];
                }
                for f in 0..env.fillers {
                    total += p[n_ops + f] * win[t + 1][v as usize];
                }
            }
            win[t][v as usize] = total;
        }
    }
    Ok(win[0][(start % m) as usize])
}
