//! Scenario configuration files.
//!
//! A config is a sectioned key/value (TOML) file; every section and key is
//! optional and falls back to the case-study defaults:
//!
//! ```toml
//! seed = 0
//!
//! [grid]
//! rows = 128
//! cols = 128
//! cell_size_m = 4.0
//! origin_m = [0.0, 0.0]
//! sampling_altitude_m = 100.0
//!
//! [tx]                 # omitted: base station below the grid center
//! position_m = [256.0, 256.0, 0.0]
//! power_dbm = 20.0
//! frequency_hz = 1.8e9
//!
//! [channel]
//! a_los = 9.61
//! b_los = 0.16
//! n_los = 2.2
//! n_nlos = 3.8
//! ref_distance_m = 1.0
//! sf_sigma_db = 6.0
//! sf_dcorr_m = 50.0
//!
//! [attack]
//! mode = "ground"      # or "airborne"
//! jammer_power_dbm = 10.0
//! attack_probability = 0.3
//! standoff_m = 50.0
//! jammer_altitude_m = 100.0
//!
//! [normalization]
//! min_dbm = -110.0
//! max_dbm = -40.0
//!
//! [diffusion]
//! t_star = 400
//! rounds = 2
//! lowpass_factor = 4
//! guidance_enabled = true
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackScenario;
use crate::channel::{ChannelParams, GridSpec, Transmitter};
use crate::dataset::NormalizationSpec;
use crate::diffusion::GuidanceConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawConfig")]
pub struct ScenarioConfig {
    pub grid: GridSpec,
    pub tx: Transmitter,
    pub channel: ChannelParams,
    pub attack: AttackScenario,
    pub normalization: NormalizationSpec,
    pub diffusion: GuidanceConfig,
    pub seed: u64,
}

/// On-disk shape: the transmitter defaults relative to the configured grid.
#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
struct RawConfig {
    grid: GridSpec,
    tx: Option<Transmitter>,
    channel: ChannelParams,
    attack: AttackScenario,
    normalization: NormalizationSpec,
    diffusion: GuidanceConfig,
    seed: u64,
}

impl From<RawConfig> for ScenarioConfig {
    fn from(raw: RawConfig) -> Self {
        ScenarioConfig {
            tx: raw.tx.unwrap_or_else(|| Transmitter::below_center(&raw.grid)),
            grid: raw.grid,
            channel: raw.channel,
            attack: raw.attack,
            normalization: raw.normalization,
            diffusion: raw.diffusion,
            seed: raw.seed,
        }
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        RawConfig::default().into()
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.tx.validate()?;
        self.channel.validate()?;
        self.attack.validate()?;
        self.normalization.validate()?;
        let f = self.diffusion.lowpass_factor;
        if f == 0 || !f.is_power_of_two() || !self.grid.rows.is_multiple_of(f) || !self.grid.cols.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "lowpass_factor {f} must be a power of two dividing the {}x{} grid",
                self.grid.rows, self.grid.cols
            )));
        }
        if self.diffusion.rounds == 0 {
            return Err(Error::Config("diffusion.rounds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackMode;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ScenarioConfig::from_toml_str("").unwrap();
        assert_eq!(c, ScenarioConfig::default());
        assert_eq!(c.tx.position_m, [256.0, 256.0, 0.0]);
        assert_eq!(c.grid.rows, 128);
        assert_eq!(c.channel.a_los, 9.61);
    }

    #[test]
    fn overrides_and_grid_relative_transmitter() {
        let c = ScenarioConfig::from_toml_str(
            "seed = 5\n[grid]\nrows = 32\ncols = 64\n[attack]\nmode = \"airborne\"\nattack_probability = 0.6\n",
        )
        .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.attack.mode, AttackMode::Airborne);
        assert_eq!(c.attack.attack_probability, 0.6);
        assert_eq!(c.tx.position_m, [128.0, 64.0, 0.0]);
    }

    #[test]
    fn roundtrips_through_toml() {
        let mut c = ScenarioConfig::default();
        c.attack.ground_position_m = Some([10.0, 20.0, 0.0]);
        c.diffusion.t_star = 77;
        let back = ScenarioConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_inconsistent_values() {
        assert!(ScenarioConfig::from_toml_str("[grid]\nrowz = 3\n").is_err());
        assert!(ScenarioConfig::from_toml_str("colour = 1\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[normalization]\nmin_dbm = -40.0\nmax_dbm = -50.0\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[grid]\nrows = 30\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[attack]\nattack_probability = 1.5\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[grid]\nrows = ").is_err());
    }
}
