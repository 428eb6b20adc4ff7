use std::fmt;
use std::str::FromStr;

use nucleidiff_core::ScheduleParams;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;
use crate::unet::DenoiserConfig;

/// Named bundles of model, schedule and training settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 128x128 patches, T = 1000, full-width network.
    Paper,
    /// 32x32 patches, T = 100, small network for CPU runs and tests.
    Tiny,
}

impl Preset {
    pub fn denoiser(self) -> DenoiserConfig {
        match self {
            Preset::Paper => DenoiserConfig::paper(),
            Preset::Tiny => DenoiserConfig::tiny(),
        }
    }

    /// Linear schedule. The short schedule scales both endpoints by
    /// `1000 / T` so the chain still ends near pure noise.
    pub fn schedule(self) -> ScheduleParams {
        match self {
            Preset::Paper => ScheduleParams { steps: 1000, beta_start: 1e-4, beta_end: 0.02 },
            Preset::Tiny => ScheduleParams { steps: 100, beta_start: 1e-3, beta_end: 0.2 },
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Preset::Paper => TrainConfig::paper(),
            Preset::Tiny => TrainConfig::tiny(),
        }
    }

    pub fn patch_size(self) -> usize {
        self.denoiser().image_size
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Tiny => "tiny",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected paper or tiny)"))),
        }
    }
}
