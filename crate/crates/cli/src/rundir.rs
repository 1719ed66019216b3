//! Layout of a run directory and the checks that guard it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use langmix::config::RunConfig;
use langmix::trainer::FineTuneMethod;

/// A problem with flags, config or missing inputs. Exits with status 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn benchmark(&self) -> PathBuf {
        self.root.join("benchmark")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrained")
    }

    pub fn pretrain_metrics(&self) -> PathBuf {
        self.root.join("pretrain_metrics.jsonl")
    }

    pub fn pretrain_report(&self) -> PathBuf {
        self.root.join("pretrain_report.json")
    }

    pub fn langdist(&self) -> PathBuf {
        self.root.join("langdist.jsonl")
    }

    pub fn embeddings(&self, mode: &str) -> PathBuf {
        self.root.join(format!("embed_{mode}.jsonl"))
    }

    pub fn predictor(&self) -> PathBuf {
        self.root.join("predictor")
    }

    pub fn finetuned(&self, method: FineTuneMethod) -> PathBuf {
        self.root.join("finetune").join(method.name())
    }

    pub fn evaluation(&self, setting: &str, method: FineTuneMethod) -> PathBuf {
        self.root.join("eval").join(format!("{setting}-{}.json", method.name()))
    }

    pub fn report(&self, ext: &str) -> PathBuf {
        self.root.join(format!("report.{ext}"))
    }

    /// Fails with a message naming the subcommand that writes `path`.
    pub fn require(&self, path: &Path, producer: &str) -> anyhow::Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(invalid(format!(
                "missing {}: run `langmix {producer}` with --out {} first",
                path.display(),
                self.root.display()
            )))
        }
    }

    /// Reads `--config` (or the recorded config), applies overrides, and records the
    /// result. A run directory holds one configuration; a different one is refused.
    pub fn resolve_config(&self, config: Option<&Path>, overrides: &[String]) -> anyhow::Result<RunConfig> {
        let recorded = self.config();
        let source = match config {
            Some(p) => p.to_path_buf(),
            None if recorded.exists() => recorded.clone(),
            None => {
                return Err(invalid(format!(
                    "no --config given and {} does not exist",
                    recorded.display()
                )))
            }
        };
        let text = fs::read_to_string(&source).map_err(|e| invalid(format!("{}: {e}", source.display())))?;
        let cfg = RunConfig::from_json(&text, overrides).map_err(|e| invalid(format!("{}: {e}", source.display())))?;
        if recorded.exists() {
            let previous = RunConfig::load(&recorded, &[]).map_err(|e| invalid(format!("{}: {e}", recorded.display())))?;
            if previous != cfg {
                return Err(invalid(format!(
                    "resolved config differs from {}; use a fresh --out directory",
                    recorded.display()
                )));
            }
        } else {
            cfg.write_resolved(&self.root)?;
        }
        Ok(cfg)
    }
}
