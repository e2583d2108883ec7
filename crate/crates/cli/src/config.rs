//! Run configuration: TOML file + environment-variable overrides for paths.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use credit_core::corpus::toy::ToyGrammarSpec;
use credit_core::model::ModelMeta;
use credit_core::train::{RlConfig, SlConfig};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub max_vocab: usize,
    pub paths: Paths,
    pub model: ModelMeta,
    pub toy: ToyGrammarSpec,
    pub sl: SlConfig,
    pub rl: RlConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            max_vocab: 15_000,
            paths: Paths::default(),
            model: ModelMeta::default(),
            toy: ToyGrammarSpec::default(),
            sl: SlConfig::default(),
            rl: RlConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Environment-variable overrides, paths only.
    fn apply_env(&mut self) {
        let over = |var: &str, slot: &mut Option<PathBuf>| {
            if let Ok(v) = std::env::var(var) {
                if !v.is_empty() {
                    *slot = Some(PathBuf::from(v));
                }
            }
        };
        over("CREDIT_CORPUS_DIR", &mut self.paths.corpus_dir);
        over("CREDIT_CHECKPOINT", &mut self.paths.checkpoint);
        over("CREDIT_REPORT", &mut self.paths.report);
        over("CREDIT_LOG", &mut self.paths.log);
        over("CREDIT_OUT_DIR", &mut self.paths.out_dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.rl.loss.validate()?;
        self.toy.validate()?;
        if self.max_vocab < 16 {
            bail!("max_vocab is too small to hold the specials and markers");
        }
        if !(0.0..1.0).contains(&self.sl.dropout) || !(0.0..1.0).contains(&self.rl.dropout) {
            bail!("dropout must be in [0, 1)");
        }
        Ok(())
    }

    /// Config snapshot embedded into checkpoints.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_env_overrides_paths() {
        let cfg = RunConfig::load(None).unwrap();
        assert_eq!(cfg.sl.lr, 1e-4);
        assert_eq!(cfg.rl.lr, 1e-5);
        assert_eq!(cfg.sl.batch_size, 16);
        assert_eq!(cfg.sl.dropout, 0.2);
        assert_eq!(cfg.rl.dropout, 0.0);
        assert_eq!(cfg.rl.loss.beta1, 0.25);
        assert_eq!(cfg.rl.loss.lambda, 1.0);

        std::env::set_var("CREDIT_REPORT", "/tmp/xyz-report.json");
        let cfg = RunConfig::load(None).unwrap();
        assert_eq!(cfg.paths.report.as_deref(), Some(Path::new("/tmp/xyz-report.json")));
        std::env::remove_var("CREDIT_REPORT");
    }

    #[test]
    fn bad_weights_rejected() {
        let text = "[rl.loss]\nbeta1 = 0.9\nbeta2 = 0.9\n";
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        assert!(RunConfig::load(Some(&p)).is_err());
    }
}
