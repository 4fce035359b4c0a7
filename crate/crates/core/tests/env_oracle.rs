use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stepreward::env::{Env, EnvConfig, EnvState};
use stepreward::reward_models::{annotate_process, AnnotationConfig};
use stepreward::rng::stream;
use stepreward::trainer::policy::{Decode, PolicyParams};
use stepreward::trajectory::{Question, Solution, StepKind};
use stepreward_oracle::{oracle_exact_policy_eval, oracle_reachable, OracleBudget, TinyEnv, TinyOp};

fn pair(modulus: u32, ops: &[&str], fillers: usize, max_steps: u32) -> (Env, TinyEnv) {
    let env = Env::new(EnvConfig {
        modulus,
        op_templates: ops.iter().map(|s| s.to_string()).collect(),
        filler_templates: (0..fillers).map(|i| format!("Filler {i}.")).collect(),
        max_steps,
    })
    .unwrap();
    let tiny = TinyEnv {
        modulus: modulus as u64,
        ops: ops
            .iter()
            .map(|s| match *s {
                "double" => TinyOp::Mul(2),
                "square" => TinyOp::Square,
                s => TinyOp::Add(s.trim_start_matches('+').parse().unwrap()),
            })
            .collect(),
        fillers,
        max_steps: max_steps as usize,
    };
    (env, tiny)
}

#[test]
fn reachability_matches_exhaustive_search() {
    let b = OracleBudget::default();
    let cases: [(u32, &[&str]); 4] = [
        (5, &["+1"]),
        (7, &["+1", "double"]),
        (10, &["double", "square"]),
        (13, &["+5", "square"]),
    ];
    for (m, ops) in cases {
        let (env, tiny) = pair(m, ops, 1, 6);
        for v in 0..m {
            let layers = env.reachable_set(v, 6).unwrap();
            for t in 0..m {
                for budget in 0..=6u32 {
                    let want = oracle_reachable(&tiny, v as u64, t as u64, budget as usize, &b).unwrap();
                    assert_eq!(env.can_reach(v, t, budget).unwrap(), want, "m={m} {v}->{t} in {budget}");
                    let seen = layers[..=budget as usize].iter().any(|l| l.contains(&t));
                    assert_eq!(seen, want);
                }
            }
        }
    }
}

#[test]
fn targets_from_three_cover_four_to_eight() {
    let (env, _) = pair(10, &["+1"], 0, 5);
    let targets: BTreeSet<u32> = (0..500)
        .map(|i| env.sample_question("q", &mut stream(21, &[i])))
        .filter(|q| q.start == 3)
        .map(|q| q.target)
        .collect();
    assert_eq!(targets, (4..=8).collect());
}

fn random_logits(m: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn sampled_success_rate_matches_exact_evaluation() {
    let b = OracleBudget::default();
    let (env, tiny) = pair(7, &["+1", "double"], 1, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..4u64 {
        let policy = PolicyParams {
            temperature: 1.0,
            logits: random_logits(7, env.num_actions(), &mut rng),
        };
        let q = Question {
            id: format!("e{case}"),
            start: rng.random_range(0..7),
            target: rng.random_range(0..7),
            modulus: 7,
        };
        let exact = oracle_exact_policy_eval(&policy.logits, 1.0, &tiny, q.start as u64, q.target as u64, &b).unwrap();
        let n = 40_000;
        let hits = (0..n)
            .filter(|&i| {
                let ep = policy.generate(&env, &q, env.initial_state(&q), Decode::Sample { temperature: 1.0 }, &mut stream(case, &[i]));
                env.check_correct(&q, &Solution::new(q.id.clone(), ep.steps, false))
            })
            .count();
        let p = hits as f64 / n as f64;
        let sd = (exact * (1.0 - exact) / n as f64).sqrt().max(1e-4);
        assert!((p - exact).abs() < 5.0 * sd, "case {case}: sampled {p}, exact {exact}");
    }
}

/// Label implied by exhaustive search: an answered prefix is judged as is,
/// any other prefix is positive iff the target is reachable in the budget
/// left.
fn oracle_label(env: &Env, tiny: &TinyEnv, q: &Question, steps: &[stepreward::trajectory::Step]) -> bool {
    if steps.iter().any(|s| s.kind == StepKind::Answer) {
        return env.check_correct(q, &Solution::new(q.id.clone(), steps.to_vec(), false));
    }
    let mut state = env.initial_state(q);
    for s in steps {
        state = env.apply_step(state, s).unwrap();
    }
    let EnvState { value, steps_taken } = state;
    let left = env.max_steps() - steps_taken;
    oracle_reachable(tiny, value as u64, q.target as u64, left as usize, &OracleBudget::default()).unwrap()
}

fn corpus(env: &Env) -> Vec<(Question, Solution)> {
    // solutions of a uniform policy wander, so many prefixes lose reachability
    let uniform = PolicyParams::uniform(env);
    let mut out = Vec::new();
    for (i, q) in env.sample_questions(8, 30).into_iter().enumerate() {
        for j in 0..3u64 {
            let ep = uniform.generate(env, &q, env.initial_state(&q), Decode::Sample { temperature: 1.0 }, &mut stream(i as u64, &[j]));
            let mut s = Solution::new(q.id.clone(), ep.steps, false);
            s.correct = env.check_correct(&q, &s);
            out.push((q.clone(), s));
        }
    }
    out
}

#[test]
fn annotation_converges_to_reachability() {
    let (env, tiny) = pair(7, &["+1", "double"], 1, 4);
    let uniform = PolicyParams::uniform(&env);
    let many = AnnotationConfig {
        completions_per_prefix: 20_000,
    };
    let few = AnnotationConfig::default();
    let (mut pos, mut neg) = (0, 0);
    for (i, (q, s)) in corpus(&env).iter().enumerate() {
        let exhaustive = annotate_process(q, s, &many, &env, &uniform, i as u64).unwrap();
        let sparse = annotate_process(q, s, &few, &env, &uniform, i as u64).unwrap();
        for (a, b) in exhaustive.iter().zip(&sparse) {
            let want = oracle_label(&env, &tiny, q, &a.steps);
            assert_eq!(a.label == 1, want, "{:?}", a.steps);
            assert!(b.label == 0 || want, "false positive at {:?}", b.steps);
            if want {
                pos += 1;
            } else {
                neg += 1;
            }
        }
    }
    assert!(pos > 20 && neg > 20, "corpus too one-sided: {pos} / {neg}");
}
