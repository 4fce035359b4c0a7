//! Experiment configuration: one TOML file with a section per module, plus
//! command-line overrides applied to the parsed table before it is typed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use stepreward::audit::ProbeVariant;
use stepreward::env::{Env, EnvConfig};
use stepreward::reward_models::{AnnotationConfig, RmTrainConfig};
use stepreward::shaping::{SchemeKind, ShapingScheme};
use stepreward::trainer::policy::PriorConfig;
use stepreward::trainer::{EtaConfig, EvalConfig, OptimConfig, Seeds};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub name: SchemeKind,
    pub c_penalty: f64,
    pub eta: EtaConfig,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            name: SchemeKind::SuccessOnly,
            c_penalty: 0.1,
            eta: EtaConfig::default(),
        }
    }
}

/// Reward-model data collection and fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmConfig {
    pub questions: usize,
    pub samples_per_question: usize,
    pub train: RmTrainConfig,
}

impl Default for RmConfig {
    fn default() -> Self {
        RmConfig {
            questions: 256,
            samples_per_question: 16,
            train: RmTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Sweep covers `0..=n_max` repetitions.
    pub n_max: usize,
    pub ground_truths: usize,
    pub schemes: Vec<SchemeKind>,
    pub probes: Vec<String>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            n_max: 50,
            ground_truths: 64,
            schemes: vec![
                SchemeKind::Process,
                SchemeKind::ProcessClip,
                SchemeKind::ProcessDelta,
                SchemeKind::ProcessClipDelta,
                SchemeKind::LengthNorm,
                SchemeKind::LengthPenalty,
            ],
            probes: ProbeVariant::ALL.iter().map(|p| p.name().to_string()).collect(),
        }
    }
}

/// Where results go and how many threads compute them. Neither affects any
/// result, so this section is left out of the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub prior: PriorConfig,
    pub scheme: SchemeConfig,
    pub annotation: AnnotationConfig,
    pub rm: RmConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
    pub audit: AuditConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses a config file, then applies `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        Env::new(self.env.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        self.optim.validate().map_err(|e| CliError::Config(e.to_string()))?;
        ShapingScheme::new(self.scheme.name, self.scheme.eta.value.unwrap_or(0.0), self.scheme.c_penalty)
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.scheme.eta.quantile) || self.scheme.eta.questions == 0 {
            return bad("scheme.eta needs a quantile in [0, 1] and at least one question".into());
        }
        if !(self.prior.temperature.is_finite() && self.prior.temperature > 0.0) {
            return bad(format!("prior.temperature must be positive, got {}", self.prior.temperature));
        }
        if self.eval.questions == 0 || self.eval.pass_k == 0 {
            return bad("eval.questions and eval.pass_k must be positive".into());
        }
        if self.rm.questions == 0 || self.rm.samples_per_question == 0 || self.annotation.completions_per_prefix == 0 {
            return bad("rm and annotation sizes must be positive".into());
        }
        if self.audit.ground_truths == 0 || self.audit.schemes.is_empty() {
            return bad("audit needs ground truths and schemes".into());
        }
        for p in &self.audit.probes {
            p.parse::<ProbeVariant>().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn env(&self) -> Env {
        Env::new(self.env.clone()).expect("validated")
    }

    pub fn probes(&self) -> Vec<ProbeVariant> {
        self.audit.probes.iter().map(|p| p.parse().expect("validated")).collect()
    }

    /// Canonical TOML of everything that influences results.
    pub fn canonical(&self) -> String {
        let mut table = Table::try_from(self).expect("config serializes");
        table.remove("output");
        toml::to_string(&table).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

/// Sets `a.b.c=value`, creating tables on the way. The value is read as a TOML
/// value and falls back to a bare string, so `scheme.name=SR+PR` works
/// unquoted.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?} descends into a non-table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
