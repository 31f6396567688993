//! Experiment configuration: a TOML file fully determining an ensemble run.
//! Validation errors name the offending field; (config, master_seed) pins
//! every output byte.

use crate::memory::{MemoryLaw, Tolerances};
use crate::rng::replica_seed;
use crate::walk::{EngineKind, WalkConfig};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

/// Which derived analyses the run performs and persists.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisToggles {
    /// Detect regenerations per replica and persist increments.
    pub regen: bool,
    /// CLT test battery at the last checkpoint (needs >= 500 replicas).
    pub clt: bool,
    /// Pooled origin-return statistics.
    pub returns: bool,
    /// Hill tail estimate over pooled regeneration time increments.
    pub tail: bool,
}

impl Default for AnalysisToggles {
    fn default() -> Self {
        Self { regen: false, clt: false, returns: true, tail: false }
    }
}

fn default_engine() -> EngineKind {
    EngineKind::MemoryWalk
}

fn default_format() -> OutputFormat {
    OutputFormat::Jsonl
}

/// Everything a run needs: the walk parameters plus ensemble size, seeding,
/// output location, and analysis toggles.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dimension: usize,
    pub delta: f64,
    pub memory: MemoryLaw,
    #[serde(default = "default_engine")]
    pub engine: EngineKind,
    pub horizon: u64,
    pub replicas: u64,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: OutputFormat,
    #[serde(default)]
    pub checkpoints: Vec<u64>,
    #[serde(default)]
    pub record_stride: u64,
    #[serde(default)]
    pub analysis: AnalysisToggles,
    /// Returns after this step count "late"; default horizon / 10.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub late_cutoff: Option<u64>,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Worker threads; CLI --workers overrides. Default: all cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // The tagged [memory] table cannot deny unknown keys itself; diff the
        // raw table against the canonical serialization of the parsed law.
        let raw: toml::Value = toml::from_str(text).expect("parsed once already");
        if let Some(mem) = raw.get("memory").and_then(|v| v.as_table()) {
            let canon = toml::Value::try_from(cfg.memory)
                .map_err(|e| Error::Config(format!("memory: {e}")))?;
            let canon = canon.as_table().expect("laws serialize as tables");
            if let Some(stray) = mem.keys().find(|k| !canon.contains_key(*k)) {
                return Err(Error::Config(format!(
                    "memory: unknown key `{stray}` for this family"
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.dimension < 1 || self.dimension > 16 {
            return fail(format!("dimension: must be in [1, 16] (got {})", self.dimension));
        }
        if !self.delta.is_finite() || self.delta <= 0.0 {
            return fail(format!("delta: must be a positive real (got {})", self.delta));
        }
        if self.horizon < 1 {
            return fail(format!("horizon: must be >= 1 (got {})", self.horizon));
        }
        if self.replicas < 1 {
            return fail(format!("replicas: must be >= 1 (got {})", self.replicas));
        }
        if self.master_seed > i64::MAX as u64 {
            return fail(format!(
                "master_seed: must fit a TOML integer, <= {} (got {})",
                i64::MAX,
                self.master_seed
            ));
        }
        if !self.checkpoints.windows(2).all(|w| w[0] < w[1]) {
            return fail(format!(
                "checkpoints: must be strictly increasing (got {:?})",
                self.checkpoints
            ));
        }
        if let Some(&cp) = self.checkpoints.iter().find(|&&c| c < 1 || c > self.horizon) {
            return fail(format!(
                "checkpoints: {cp} outside [1, horizon = {}]",
                self.horizon
            ));
        }
        if let Some(cut) = self.late_cutoff {
            if cut >= self.horizon {
                return fail(format!(
                    "late_cutoff: must be below horizon = {} (got {cut})",
                    self.horizon
                ));
            }
        }
        if let Some(w) = self.workers {
            if w < 1 {
                return fail("workers: must be >= 1".into());
            }
        }
        if !(self.tolerances.mass_epsilon > 0.0 && self.tolerances.mass_epsilon <= 1e-6) {
            return fail(format!(
                "tolerances.mass_epsilon: must be in (0, 1e-6] (got {})",
                self.tolerances.mass_epsilon
            ));
        }
        if !(self.tolerances.confirmation_tolerance > 0.0
            && self.tolerances.confirmation_tolerance <= 0.1)
        {
            return fail(format!(
                "tolerances.confirmation_tolerance: must be in (0, 0.1] (got {})",
                self.tolerances.confirmation_tolerance
            ));
        }
        if self.analysis.clt && (self.replicas as usize) < crate::stats::CLT_MIN_REPLICAS {
            return fail(format!(
                "analysis.clt: needs replicas >= {} (got {})",
                crate::stats::CLT_MIN_REPLICAS,
                self.replicas
            ));
        }
        if self.analysis.clt && self.checkpoints.is_empty() {
            return fail("analysis.clt: needs a nonempty checkpoints list".into());
        }
        if self.analysis.tail && !self.analysis.regen {
            return fail("analysis.tail: requires analysis.regen = true".into());
        }
        Ok(())
    }

    pub fn late_cutoff_value(&self) -> u64 {
        self.late_cutoff.unwrap_or(self.horizon / 10)
    }

    /// Per-replica engine config. Regeneration analysis forces stride-1
    /// position recording and K retention inside the worker; neither is
    /// persisted beyond the extracted increments.
    pub fn walk_config(&self, replica: u64) -> WalkConfig {
        WalkConfig {
            dimension: self.dimension,
            delta: self.delta,
            memory: self.memory.clone(),
            engine: self.engine,
            horizon: self.horizon,
            seed: replica_seed(self.master_seed, replica),
            record_stride: if self.analysis.regen { 1 } else { self.record_stride },
            checkpoints: self.checkpoints.clone(),
            record_k: self.analysis.regen,
            record_log: false,
            record_digest: true,
        }
    }
}

/// Build a law from CLI-style (family, params) pieces.
pub fn law_from_parts(family: &str, params: &BTreeMap<String, f64>) -> Result<MemoryLaw> {
    let get = |key: &str| -> Result<f64> {
        params
            .get(key)
            .copied()
            .ok_or_else(|| Error::Config(format!("family {family} needs parameter {key}")))
    };
    let int = |key: &str| -> Result<u64> {
        let v = get(key)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Config(format!(
                "parameter {key} must be a nonnegative integer (got {v})"
            )));
        }
        Ok(v as u64)
    };
    let known: &[&str] = match family {
        "degenerate" => &["k"],
        "bernoulli" => &["p1"],
        "geometric" => &["p"],
        "uniform" => &["m"],
        "pareto" => &["alpha"],
        other => {
            return Err(Error::Config(format!(
                "unknown family {other}; expected degenerate|bernoulli|geometric|uniform|pareto"
            )))
        }
    };
    if let Some(stray) = params.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::Config(format!("family {family} does not take parameter {stray}")));
    }
    match family {
        "degenerate" => Ok(MemoryLaw::degenerate(int("k")?)),
        "bernoulli" => MemoryLaw::bernoulli(get("p1")?),
        "geometric" => MemoryLaw::geometric(get("p")?),
        "uniform" => MemoryLaw::uniform(int("m")?),
        "pareto" => MemoryLaw::pareto(get("alpha")?),
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
dimension = 3
delta = 1.0
horizon = 10000
replicas = 10
master_seed = 1000

[memory]
family = "geometric"
p = 0.5
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.engine, EngineKind::MemoryWalk);
        assert!(matches!(cfg.format, OutputFormat::Jsonl));
        assert!(cfg.analysis.returns);
        assert!(!cfg.analysis.regen);
        assert_eq!(cfg.late_cutoff_value(), 1000);
        assert_eq!(cfg.tolerances.confirmation_tolerance, 1e-6);
    }

    #[test]
    fn replica_seeds_follow_the_derivation_rule() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let w0 = cfg.walk_config(0);
        let w1 = cfg.walk_config(1);
        assert_eq!(w0.seed, replica_seed(1000, 0));
        assert_eq!(w1.seed, replica_seed(1000, 1));
        assert_ne!(w0.seed, w1.seed);
    }

    #[test]
    fn validation_names_the_field() {
        let mut bad: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        bad.replicas = 0;
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("replicas"), "{msg}");

        let mut bad: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        bad.delta = 0.0;
        assert!(bad.validate().unwrap_err().to_string().contains("delta"));

        let mut bad: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        bad.checkpoints = vec![5, 5];
        assert!(bad.validate().unwrap_err().to_string().contains("checkpoints"));

        let mut bad: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        bad.checkpoints = vec![20000];
        assert!(bad.validate().unwrap_err().to_string().contains("horizon"));

        let mut bad: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        bad.analysis.tail = true;
        assert!(bad.validate().unwrap_err().to_string().contains("regen"));
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let text = format!("bogus_field = 3\n{MINIMAL}");
        let err = toml::from_str::<ExperimentConfig>(&text).unwrap_err().to_string();
        assert!(err.contains("bogus_field"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn stray_memory_params_are_rejected() {
        // Appended after [memory], the key lands inside the law table, which
        // the tagged enum would silently ignore without the raw-table diff.
        let text = format!("{MINIMAL}alpha = 2.0\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("alpha"), "{err}");
        assert!(ExperimentConfig::from_toml(MINIMAL).is_ok());
    }

    #[test]
    fn law_params_and_memory_table() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.memory, MemoryLaw::geometric(0.5).unwrap());

        let mut p = BTreeMap::new();
        p.insert("alpha".to_string(), 2.5);
        assert_eq!(law_from_parts("pareto", &p).unwrap(), MemoryLaw::pareto(2.5).unwrap());

        let mut p = BTreeMap::new();
        p.insert("k".to_string(), 3.0);
        assert_eq!(law_from_parts("degenerate", &p).unwrap(), MemoryLaw::degenerate(3));

        let mut p = BTreeMap::new();
        p.insert("p".to_string(), 0.5);
        assert!(law_from_parts("degenerate", &p).is_err()); // stray param
        assert!(law_from_parts("zeta", &p).is_err());
        let empty = BTreeMap::new();
        assert!(law_from_parts("geometric", &empty).is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(toml::to_string(&back).unwrap(), text);
    }
}
