//! On-disk run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use advit::attacks::AttackConfig;
use advit::data::{generate_synthetic, load_dataset, Dataset, Split, SyntheticSpec};
use advit::trainer::TrainConfig;
use advit::vit::ViTConfig;
use serde::{Deserialize, Serialize};

use crate::failure::{Failure, Kind};

pub const SEED_ENV: &str = "ADVIT_SEED";

/// A dataset on disk or a synthetic generation spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl DataSource {
    pub fn load(&self, split: Split) -> Result<Dataset, Failure> {
        match self {
            DataSource::Path(p) => {
                if !p.exists() {
                    return Err(Failure::new(Kind::Data, format!("dataset {} does not exist", p.display())));
                }
                let mut ds = load_dataset(p).map_err(|e| Failure::new(Kind::Data, e.to_string()))?;
                ds.split = split;
                Ok(ds)
            }
            DataSource::Synthetic(spec) => {
                generate_synthetic(&SyntheticSpec { split, ..spec.clone() }).map_err(|e| Failure::new(Kind::Data, e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    #[serde(default)]
    pub test: Option<DataSource>,
}

/// An evaluation attack: a preset name (`pgd20`, `cw20`, `none`, ...) or an
/// explicit configuration under any name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub name: String,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
}

impl NamedAttack {
    pub fn resolve(&self) -> Result<(String, AttackConfig), Failure> {
        let cfg = match &self.attack {
            Some(a) => a.clone(),
            None => AttackConfig::preset(&self.name).ok_or_else(|| {
                Failure::new(Kind::Config, format!("unknown attack `{}`; use pgdN, cwN or none", self.name))
            })?,
        };
        cfg.validate().map_err(|e| Failure::new(Kind::Config, format!("attack `{}`: {e}", self.name)))?;
        Ok((self.name.clone(), cfg))
    }
}

fn default_eval_attacks() -> Vec<NamedAttack> {
    ["pgd20", "pgd100", "cw20"].iter().map(|n| NamedAttack { name: n.to_string(), attack: None }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub train: TrainConfig,
    #[serde(default = "default_eval_attacks")]
    pub eval_attacks: Vec<NamedAttack>,
    /// Seed of the evaluation attacks run after training.
    #[serde(default)]
    pub eval_seed: u64,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    /// Warm-start parameters (optimizer state is not restored).
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::new(Kind::Config, format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::new(Kind::Config, format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed_override()? {
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate().map_err(|e| Failure::new(Kind::Config, format!("model: {e}")))?;
        self.train.validate().map_err(|e| Failure::new(Kind::Config, format!("train: {e}")))?;
        for a in &self.eval_attacks {
            a.resolve()?;
        }
        Ok(())
    }

    /// Copy with every default written out and every attack expanded.
    pub fn resolved(&self) -> Result<Self, Failure> {
        let mut out = self.clone();
        out.eval_attacks = self
            .eval_attacks
            .iter()
            .map(|a| a.resolve().map(|(name, cfg)| NamedAttack { name, attack: Some(cfg) }))
            .collect::<Result<_, _>>()?;
        Ok(out)
    }
}

/// `ADVIT_SEED`, when set.
pub fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::new(Kind::Config, format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}
