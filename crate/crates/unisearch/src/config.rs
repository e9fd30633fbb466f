//! Run configuration: one JSON file that pins every input path, seed, and
//! hyperparameter, so a run is reproducible from its manifest alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{load_queries, load_roster, AgentDescriptor, AgentError};
use crate::engine::{EngineError, SearchEngine};
use crate::training::{OfflineConfig, OnlineConfig, QuerySets};

pub const DEFAULT_MAX_WORDS: usize = 100;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("config field {field}: file not found: {path}")]
    MissingFile { field: String, path: String },
    #[error("config field {field}: {message}")]
    BadValue { field: String, message: String },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything a run needs. The seed is mandatory and is stamped into the
/// offline and online sections, which may otherwise be omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub roster: PathBuf,
    pub queries_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default = "default_max_words")]
    pub max_words: usize,
    #[serde(default)]
    pub offline: OfflineConfig,
    #[serde(default)]
    pub online: OnlineConfig,
}

fn default_max_words() -> usize {
    DEFAULT_MAX_WORDS
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        config.offline.seed = config.seed;
        config.online.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, path) in [
            ("corpus", &self.corpus),
            ("roster", &self.roster),
            ("queries_dir", &self.queries_dir),
        ] {
            if !path.exists() {
                return Err(ConfigError::MissingFile {
                    field: field.to_string(),
                    path: path.display().to_string(),
                });
            }
        }
        if self.max_words == 0 {
            return Err(ConfigError::BadValue {
                field: "max_words".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.offline.iterations == 0 {
            return Err(ConfigError::BadValue {
                field: "offline.iterations".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.offline.k_train > self.offline.first_stage_n {
            return Err(ConfigError::BadValue {
                field: "offline.k_train".into(),
                message: "must not exceed offline.first_stage_n".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.offline.unk_rate) {
            return Err(ConfigError::BadValue {
                field: "offline.unk_rate".into(),
                message: "must lie in [0, 1]".into(),
            });
        }
        if self.online.batch_queries == 0 {
            return Err(ConfigError::BadValue {
                field: "online.batch_queries".into(),
                message: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    /// A config pointing at a generated benchmark directory, with defaults
    /// everywhere else.
    pub fn for_benchmark_dir(dir: &Path, output_dir: PathBuf, seed: u64) -> RunConfig {
        let mut config = RunConfig {
            corpus: dir.join("corpus.tsv"),
            roster: dir.join("roster.json"),
            queries_dir: dir.join("queries"),
            output_dir,
            seed,
            max_words: DEFAULT_MAX_WORDS,
            offline: OfflineConfig::default(),
            online: OnlineConfig::default(),
        };
        config.offline.seed = seed;
        config.online.seed = seed;
        config
    }

    pub fn load_engine(&self) -> Result<SearchEngine, ConfigError> {
        Ok(SearchEngine::open(&self.corpus, self.max_words)?)
    }

    pub fn load_roster(&self) -> Result<Vec<AgentDescriptor>, ConfigError> {
        Ok(load_roster(&self.roster)?)
    }

    /// Loads `{tid}.{split}.jsonl` for every distinct task in the roster.
    pub fn load_query_sets(
        &self,
        roster: &[AgentDescriptor],
        split: &str,
    ) -> Result<QuerySets, ConfigError> {
        let mut sets = QuerySets::new();
        for agent in roster {
            if sets.contains_key(&agent.tid) {
                continue;
            }
            let path = self
                .queries_dir
                .join(format!("{}.{split}.jsonl", agent.tid));
            if !path.exists() {
                return Err(ConfigError::MissingFile {
                    field: format!("queries_dir ({} {split})", agent.tid),
                    path: path.display().to_string(),
                });
            }
            sets.insert(agent.tid.clone(), load_queries(&path)?);
        }
        Ok(sets)
    }

    /// Writes the manifest that makes the run reproducible: the command
    /// plus the exact config. No wall-clock fields, so reruns are
    /// byte-identical.
    pub fn write_manifest(&self, command: &str) -> Result<(), ConfigError> {
        fs::create_dir_all(&self.output_dir)?;
        let manifest = serde_json::json!({
            "command": command,
            "config": self,
        });
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.output_dir.join("manifest.json"), text)?;
        Ok(())
    }
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        ConfigError::Parse {
            path: "<inline>".into(),
            source: e,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn benchmark_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let bench = crate::benchmark::generate(3);
        crate::benchmark::write_benchmark(&bench, dir.path()).unwrap();
        dir
    }

    #[test]
    fn load_rejects_missing_files_with_the_field_name() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("run.json");
        fs::write(
            &config_path,
            serde_json::json!({
                "corpus": dir.path().join("nope.tsv"),
                "roster": dir.path().join("nope.json"),
                "queries_dir": dir.path().join("queries"),
                "output_dir": dir.path().join("out"),
                "seed": 1,
            })
            .to_string(),
        )
        .unwrap();
        match RunConfig::load(&config_path) {
            Err(ConfigError::MissingFile { field, .. }) => assert_eq!(field, "corpus"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn seed_is_mandatory_and_stamped_into_sections() {
        let dir = benchmark_dir();
        let config_path = dir.path().join("run.json");
        // no seed field -> parse error
        fs::write(
            &config_path,
            serde_json::json!({
                "corpus": dir.path().join("corpus.tsv"),
                "roster": dir.path().join("roster.json"),
                "queries_dir": dir.path().join("queries"),
                "output_dir": dir.path().join("out"),
            })
            .to_string(),
        )
        .unwrap();
        assert!(matches!(
            RunConfig::load(&config_path),
            Err(ConfigError::Parse { .. })
        ));

        fs::write(
            &config_path,
            serde_json::json!({
                "corpus": dir.path().join("corpus.tsv"),
                "roster": dir.path().join("roster.json"),
                "queries_dir": dir.path().join("queries"),
                "output_dir": dir.path().join("out"),
                "seed": 42,
            })
            .to_string(),
        )
        .unwrap();
        let config = RunConfig::load(&config_path).unwrap();
        assert_eq!(config.offline.seed, 42);
        assert_eq!(config.online.seed, 42);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let dir = benchmark_dir();
        let mut config = RunConfig::for_benchmark_dir(dir.path(), dir.path().join("out"), 1);
        config.offline.k_train = 1000;
        match config.validate() {
            Err(ConfigError::BadValue { field, .. }) => assert_eq!(field, "offline.k_train"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn query_sets_load_per_roster_task() {
        let dir = benchmark_dir();
        let config = RunConfig::for_benchmark_dir(dir.path(), dir.path().join("out"), 1);
        let roster = config.load_roster().unwrap();
        let train = config.load_query_sets(&roster, "train").unwrap();
        assert_eq!(train.len(), crate::benchmark::TASK_COUNT);
        assert_eq!(
            train["task1"].len(),
            crate::benchmark::TRAIN_QUERIES_PER_TASK
        );
    }
}
