//! Experiment driver: collect reward-model data, fit the reward models, train
//! policies, audit shaping schemes and evaluate checkpoints. Every command
//! writes into one output directory and finishes with `manifest.json`.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use stepreward::audit::{shortest_solution, sweep_probe, AuditRow};
use stepreward::env::Env;
use stepreward::metrics::{evaluate, EvalReport};
use stepreward::reward_models::{
    annotate_dataset, collect_rm_dataset, train_orm, train_prm, FeatureSpec, LabeledPrefix, LabeledSolution,
    LogisticScorer, SurrogateOrm, SurrogatePrm,
};
use stepreward::rng::derive_seed;
use stepreward::shaping::ShapingScheme;
use stepreward::trainer::policy::PolicyParams;
use stepreward::trainer::{
    calibrate_eta, eval_questions, reference_policy, train, RewardSource, RunSpec, Seeds, TrainOutput, Window,
};
use stepreward::trajectory::Question;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Run(#[from] stepreward::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}

fn run_err(e: impl Into<stepreward::Error>) -> CliError {
    CliError::Run(e.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl ToString) -> CliError {
    CliError::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub sha256: String,
    /// Lines of JSONL or data rows of CSV.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seeds: Seeds,
    /// Checksums of files read from other output directories.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, Artifact>,
}

/// Collects artifacts for one output directory.
struct OutDir {
    dir: PathBuf,
    manifest: Manifest,
}

impl OutDir {
    fn create(cfg: &ExperimentConfig, command: &str) -> Result<Self, CliError> {
        let dir = cfg.output.dir.clone();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut out = OutDir {
            dir,
            manifest: Manifest {
                command: command.to_string(),
                config_sha256: cfg.hash(),
                seeds: cfg.seeds,
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
            },
        };
        out.write("config.toml", cfg.canonical().into_bytes(), None)?;
        Ok(out)
    }

    fn write(&mut self, name: &str, bytes: Vec<u8>, records: Option<usize>) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        self.manifest.artifacts.insert(
            name.to_string(),
            Artifact {
                sha256: sha256_hex(&bytes),
                records,
            },
        );
        Ok(path)
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<PathBuf, CliError> {
        let mut buf = Vec::new();
        for it in items {
            serde_json::to_writer(&mut buf, it).expect("records serialize");
            buf.push(b'\n');
        }
        self.write(name, buf, Some(items.len()))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut buf = serde_json::to_vec_pretty(value).expect("values serialize");
        buf.push(b'\n');
        self.write(name, buf, None)
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| format_err(&self.dir.join(name), e))?;
        }
        let bytes = w.into_inner().map_err(|e| format_err(&self.dir.join(name), e))?;
        self.write(name, bytes, Some(rows.len()))
    }

    fn input(&mut self, label: String, bytes: &[u8]) {
        self.manifest.inputs.insert(label, sha256_hex(bytes));
    }

    fn finish(self) -> Result<Manifest, CliError> {
        let path = self.dir.join("manifest.json");
        let mut buf = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        buf.push(b'\n');
        fs::write(&path, &buf).map_err(io_err(&path))?;
        Ok(self.manifest)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(io_err(path))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<Vec<T>, CliError> {
    let text = std::str::from_utf8(bytes).map_err(|e| format_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn read_json<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T, CliError> {
    serde_json::from_slice(bytes).map_err(|e| format_err(path, e))
}

/// Runs `f` on a pool sized by `output.workers`. Results never depend on the
/// pool size: every random draw comes from a counter-derived stream.
pub fn with_workers<T: Send>(cfg: &ExperimentConfig, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.output.workers)
        .build()
        .map_err(|e| CliError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Questions used for reward-model data.
pub fn rm_questions(env: &Env, cfg: &ExperimentConfig) -> Vec<Question> {
    env.sample_questions(derive_seed(cfg.seeds.env, &[7]), cfg.rm.questions)
}

pub struct CollectOutput {
    pub questions: Vec<Question>,
    pub solutions: Vec<LabeledSolution>,
    pub prefixes: Vec<LabeledPrefix>,
    pub manifest: Manifest,
}

/// Samples solutions from the reference policy, labels them by correctness
/// and labels every prefix by rollout completion.
pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<CollectOutput, CliError> {
    with_workers(cfg, || {
        let env = cfg.env();
        let mut out = OutDir::create(cfg, "collect")?;
        let base = reference_policy(&env, &cfg.prior, &cfg.seeds);
        let questions = rm_questions(&env, cfg);
        let solutions =
            collect_rm_dataset(&base, &questions, cfg.rm.samples_per_question, &env, cfg.seeds.policy).map_err(run_err)?;
        let prefixes = annotate_dataset(&solutions, &questions, &cfg.annotation, &env, &base, cfg.seeds.annotation)
            .map_err(run_err)?;
        out.jsonl("questions.jsonl", &questions)?;
        out.jsonl("solutions.jsonl", &solutions)?;
        out.jsonl("prefixes.jsonl", &prefixes)?;
        Ok(CollectOutput {
            questions,
            solutions,
            prefixes,
            manifest: out.finish()?,
        })
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub model: String,
    pub epoch: usize,
    pub loss: f64,
}

pub struct RmOutput {
    pub prm: SurrogatePrm,
    pub orm: SurrogateOrm,
    pub losses: Vec<LossRow>,
    pub manifest: Manifest,
}

/// Fits both reward models on a `collect` directory.
pub fn cmd_train_rm(cfg: &ExperimentConfig, data: &Path) -> Result<RmOutput, CliError> {
    with_workers(cfg, || {
        let env = cfg.env();
        let mut out = OutDir::create(cfg, "train-rm")?;
        let mut load = |name: &str| -> Result<(PathBuf, Vec<u8>), CliError> {
            let path = data.join(name);
            let bytes = read_bytes(&path)?;
            out.input(format!("data/{name}"), &bytes);
            Ok((path, bytes))
        };
        let (qp, qb) = load("questions.jsonl")?;
        let (sp, sb) = load("solutions.jsonl")?;
        let (pp, pb) = load("prefixes.jsonl")?;
        let questions: Vec<Question> = read_jsonl(&qp, &qb)?;
        let solutions: Vec<LabeledSolution> = read_jsonl(&sp, &sb)?;
        let prefixes: Vec<LabeledPrefix> = read_jsonl(&pp, &pb)?;
        let (prm, pfit) = train_prm(&prefixes, &questions, FeatureSpec::process(&env), &cfg.rm.train).map_err(run_err)?;
        let (orm, ofit) = train_orm(&solutions, &questions, FeatureSpec::outcome(&env), &cfg.rm.train).map_err(run_err)?;
        let losses: Vec<LossRow> = [("prm", &pfit.losses), ("orm", &ofit.losses)]
            .into_iter()
            .flat_map(|(m, ls)| {
                ls.iter().enumerate().map(move |(epoch, &loss)| LossRow {
                    model: m.to_string(),
                    epoch,
                    loss,
                })
            })
            .collect();
        out.json("prm.json", prm.checkpoint())?;
        out.json("orm.json", orm.checkpoint())?;
        out.csv("rm_loss.csv", &losses)?;
        Ok(RmOutput {
            prm,
            orm,
            losses,
            manifest: out.finish()?,
        })
    })?
}

/// Raw bytes of files read, labeled for the manifest.
pub type InputFiles = Vec<(String, Vec<u8>)>;

/// Loads `prm.json` and `orm.json` from a `train-rm` directory.
pub fn load_reward_models(dir: &Path) -> Result<(SurrogatePrm, SurrogateOrm, InputFiles), CliError> {
    let pp = dir.join("prm.json");
    let op = dir.join("orm.json");
    let pb = read_bytes(&pp)?;
    let ob = read_bytes(&op)?;
    let prm = SurrogatePrm::from_checkpoint(read_json::<LogisticScorer>(&pp, &pb)?).map_err(run_err)?;
    let orm = SurrogateOrm::from_checkpoint(read_json::<LogisticScorer>(&op, &ob)?).map_err(run_err)?;
    Ok((prm, orm, vec![("rm/prm.json".into(), pb), ("rm/orm.json".into(), ob)]))
}

/// A saved policy and the iteration it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub iteration: usize,
    pub scheme: String,
    pub eta: f64,
    pub params: PolicyParams,
}

pub fn load_policy(path: &Path) -> Result<PolicyFile, CliError> {
    let bytes = read_bytes(path)?;
    read_json(path, &bytes)
}

#[derive(Debug, Clone, Default)]
pub struct RlOptions {
    /// `train-rm` output; required by schemes that score with a reward model.
    pub rm: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop after this iteration instead of the end of the schedule.
    pub stop: Option<usize>,
}

pub struct RlOutput {
    pub train: TrainOutput,
    pub manifest: Manifest,
}

pub fn run_spec(cfg: &ExperimentConfig) -> RunSpec {
    RunSpec {
        scheme: cfg.scheme.name,
        c_penalty: cfg.scheme.c_penalty,
        eta: cfg.scheme.eta,
        optim: cfg.optim,
        prior: cfg.prior,
        eval: cfg.eval,
        seeds: cfg.seeds,
    }
}

/// Trains a policy and writes `train_log.csv` and `policy.json`.
pub fn cmd_train_rl(cfg: &ExperimentConfig, opts: &RlOptions) -> Result<RlOutput, CliError> {
    with_workers(cfg, || {
        let env = cfg.env();
        let mut out = OutDir::create(cfg, "train-rl")?;
        let mut rewards = RewardSource::default();
        if let Some(dir) = &opts.rm {
            let (prm, orm, inputs) = load_reward_models(dir)?;
            for (label, bytes) in inputs {
                out.input(label, &bytes);
            }
            rewards = RewardSource {
                prm: Some(prm),
                orm: Some(orm),
            };
        }
        let mut window = Window {
            init: None,
            stop: opts.stop,
        };
        if let Some(path) = &opts.resume {
            let bytes = read_bytes(path)?;
            out.input("resume/policy.json".into(), &bytes);
            let file: PolicyFile = read_json(path, &bytes)?;
            if file.scheme != cfg.scheme.name.name() {
                return Err(CliError::Config(format!(
                    "resume policy was trained with {}, config says {}",
                    file.scheme, cfg.scheme.name
                )));
            }
            window.init = Some((file.params, file.iteration));
        }
        let train = train(&env, &run_spec(cfg), &rewards, window).map_err(run_err)?;
        out.csv("train_log.csv", &train.log)?;
        out.json(
            "policy.json",
            &PolicyFile {
                iteration: train.iterations,
                scheme: cfg.scheme.name.name().to_string(),
                eta: train.eta,
                params: train.policy.clone(),
            },
        )?;
        Ok(RlOutput {
            train,
            manifest: out.finish()?,
        })
    })?
}

/// Shortest correct solutions on fresh questions.
pub fn audit_ground_truths(env: &Env, cfg: &ExperimentConfig) -> Result<Vec<(Question, stepreward::trajectory::Solution)>, CliError> {
    env.sample_questions(derive_seed(cfg.seeds.eval, &[9]), cfg.audit.ground_truths)
        .into_iter()
        .map(|q| {
            let s = shortest_solution(env, &q).map_err(run_err)?;
            Ok((q, s))
        })
        .collect()
}

pub struct AuditOutput {
    pub rows: Vec<AuditRow>,
    pub eta: f64,
    pub manifest: Manifest,
}

/// Sweeps every configured scheme and probe over `0..=n_max` repetitions.
/// The clip threshold is the one training would use.
pub fn cmd_audit(cfg: &ExperimentConfig, rm: &Path) -> Result<AuditOutput, CliError> {
    with_workers(cfg, || {
        let env = cfg.env();
        let mut out = OutDir::create(cfg, "audit")?;
        let (prm, _, inputs) = load_reward_models(rm)?;
        for (label, bytes) in inputs {
            out.input(label, &bytes);
        }
        let reference = reference_policy(&env, &cfg.prior, &cfg.seeds);
        let eta = calibrate_eta(
            &env,
            &reference,
            &prm,
            &cfg.scheme.eta,
            &cfg.seeds,
            cfg.optim.solutions_per_question,
        )
        .map_err(run_err)?;
        let schemes = cfg
            .audit
            .schemes
            .iter()
            .map(|&k| ShapingScheme::new(k, eta, cfg.scheme.c_penalty))
            .collect::<Result<Vec<_>, _>>()
            .map_err(run_err)?;
        let gts = audit_ground_truths(&env, cfg)?;
        let ns: Vec<usize> = (0..=cfg.audit.n_max).collect();
        let rows = sweep_probe(&schemes, &cfg.probes(), &ns, &prm, &cfg.optim.coeffs, &env, &gts).map_err(run_err)?;
        out.csv("audit.csv", &rows)?;
        Ok(AuditOutput {
            rows,
            eta,
            manifest: out.finish()?,
        })
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    /// Iteration of the evaluated policy; absent for the reference policy.
    pub iteration: Option<usize>,
    pub questions: usize,
    pub report: EvalReport,
}

pub struct EvalOutput {
    pub eval: EvalFile,
    pub manifest: Manifest,
}

/// Evaluates a saved policy, or the reference policy when none is given.
pub fn cmd_eval(cfg: &ExperimentConfig, policy: Option<&Path>) -> Result<EvalOutput, CliError> {
    with_workers(cfg, || {
        let env = cfg.env();
        let mut out = OutDir::create(cfg, "eval")?;
        let (params, iteration) = match policy {
            Some(path) => {
                let bytes = read_bytes(path)?;
                out.input("policy.json".into(), &bytes);
                let file: PolicyFile = read_json(path, &bytes)?;
                (file.params, Some(file.iteration))
            }
            None => (reference_policy(&env, &cfg.prior, &cfg.seeds), None),
        };
        params.check(&env).map_err(|e| run_err(stepreward::trainer::TrainError::from(e)))?;
        let qs = eval_questions(&env, &cfg.seeds, cfg.eval.questions);
        let report = evaluate(&params, &qs, &env, cfg.eval.pass_k, cfg.seeds.eval).map_err(run_err)?;
        let eval = EvalFile {
            iteration,
            questions: qs.len(),
            report,
        };
        out.json("eval.json", &eval)?;
        Ok(EvalOutput {
            eval,
            manifest: out.finish()?,
        })
    })?
}
