use std::path::{Path, PathBuf};

use mvpose_core::lifter::{ArchProfile, LifterTrainConfig};
use mvpose_core::matcher::MatcherTrainConfig;
use mvpose_core::metrics::EvalConfig;
use mvpose_core::scene_forge::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, CommonArgs};

/// Everything a run depends on. Relative paths are taken from the working
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub calibration: Option<PathBuf>,
    /// Track files or directories holding them.
    pub tracks: Vec<PathBuf>,
    pub profile: ArchProfile,
    pub synth: SynthConfig,
    pub matcher: MatcherTrainConfig,
    pub lifter: LifterTrainConfig,
    pub eval: EvalConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            calibration: None,
            tracks: Vec::new(),
            profile: ArchProfile::Paper,
            synth: SynthConfig::default(),
            matcher: MatcherTrainConfig::default(),
            lifter: LifterTrainConfig::default(),
            eval: EvalConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Config(format!("config field `{}`: {}", e.path(), e.inner())))
    }

    /// Loads `--config` (or defaults), applies the common flags and checks
    /// that referenced paths exist.
    pub fn resolve(args: &CommonArgs) -> Result<Self, CliError> {
        let mut config = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("config `{}`: {e}", path.display())))?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        if let Some(seed) = args.seed {
            config.synth.seed = seed;
            config.matcher.seed = seed;
            config.lifter.seed = seed;
        }
        if let Some(out) = &args.out {
            config.out = out.clone();
        }
        if let Some(profile) = args.profile {
            config.profile = profile;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(c) = &self.calibration {
            require_path("calibration", c)?;
        }
        for (i, t) in self.tracks.iter().enumerate() {
            require_path(&format!("tracks[{i}]"), t)?;
        }
        self.synth
            .validate()
            .map_err(|e| CliError::Config(format!("synth: {e}")))?;
        self.eval
            .validate()
            .map_err(|e| CliError::Config(format!("eval: {e}")))?;
        Ok(())
    }

    /// Canonical JSON used for hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

pub(crate) fn require_path(field: &str, path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{field}: `{}` does not exist", path.display())))
    }
}
