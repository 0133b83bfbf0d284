use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use rpt::episodes::Setting;
use rpt::eval::EvalConfig;
use rpt::train::TrainConfig;

pub const RUN_CONFIG: &str = "run_config.json";

/// Everything a command needs to be re-run: the training schedule plus data
/// location, fold selection and output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub setting: Setting,
    pub fold: usize,
    /// Held-out classes; empty means every class in the manifest.
    pub test_classes: Vec<i32>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            setting: Setting::One,
            fold: 0,
            test_classes: Vec::new(),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RUN_CONFIG);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// `RPT_SEED` replaces the configured seed.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("RPT_SEED") {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| rpt::Error::Parameter(format!("RPT_SEED is not an integer: `{v}`")))?;
        }
        Ok(())
    }
}
