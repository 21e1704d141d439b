//! Ground and airborne jammers, per-cell attack masks and power-domain
//! interference injection.

use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelParams, GridSpec, MapKind, RssiMap, Transmitter};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng;
use crate::shadow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Ground,
    Airborne,
}

impl AttackMode {
    pub const ALL: [AttackMode; 2] = [AttackMode::Ground, AttackMode::Airborne];

    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Ground => "ground",
            AttackMode::Airborne => "airborne",
        }
    }
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ground" => Ok(AttackMode::Ground),
            "airborne" | "air" => Ok(AttackMode::Airborne),
            other => Err(Error::Config(format!("unknown attack mode {other:?}"))),
        }
    }
}

/// One jammer and the probability that it corrupts any given cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackScenario {
    pub mode: AttackMode,
    pub jammer_power_dbm: f64,
    pub attack_probability: f64,
    /// Ground mode only. `None` places the jammer below a cell drawn from `seed`.
    pub ground_position_m: Option<[f64; 3]>,
    /// Airborne mode only: 3D distance kept from every sampling point.
    pub standoff_m: f64,
    pub jammer_altitude_m: f64,
    pub seed: u64,
}

impl Default for AttackScenario {
    fn default() -> Self {
        AttackScenario {
            mode: AttackMode::Ground,
            jammer_power_dbm: 10.0,
            attack_probability: 0.3,
            ground_position_m: None,
            standoff_m: 50.0,
            jammer_altitude_m: 100.0,
            seed: 0,
        }
    }
}

impl AttackScenario {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.attack_probability) {
            return Err(Error::Config(format!(
                "attack_probability must lie in [0, 1], got {}",
                self.attack_probability
            )));
        }
        if !(self.standoff_m > 0.0) {
            return Err(Error::Config(format!(
                "standoff_m must be positive, got {}",
                self.standoff_m
            )));
        }
        Ok(())
    }

    /// Ground position of the jammer for this scenario.
    pub fn ground_jammer_position(&self, grid: &GridSpec) -> [f64; 3] {
        self.ground_position_m.unwrap_or_else(|| {
            let cells = (grid.rows * grid.cols) as u64;
            let idx = (rng::derive(self.seed, &[rng::tag::JAMMER_POSITION]) % cells) as usize;
            grid.ground_point(idx / grid.cols, idx % grid.cols)
        })
    }
}

/// Cells whose measurement is corrupted by the jammer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackMask {
    pub attacked: Grid<bool>,
}

impl AttackMask {
    pub fn attacked_count(&self) -> usize {
        self.attacked.iter().filter(|&&a| a).count()
    }
}

/// Independent Bernoulli(`p`) corruption per cell.
///
/// Uses one uniform per cell, so masks drawn with the same seed are nested:
/// every cell attacked at `p` is also attacked at any `p' > p`.
pub fn sample_attack_mask(p: f64, grid: &GridSpec, seed: u64) -> Result<AttackMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("attack probability {p} outside [0, 1]")));
    }
    Ok(AttackMask {
        attacked: Grid::from_fn(grid.rows, grid.cols, |r, c| {
            rng::cell_uniform(seed, rng::tag::ATTACK_MASK, r, c) < p
        }),
    })
}

/// Interference power received at every sampling point, in dBm.
///
/// `tx` only contributes the carrier frequency. A ground jammer propagates
/// through the full channel model with its own LoS draws and shadowing; an
/// airborne jammer is a LoS emitter at a constant standoff distance.
pub fn interference_map(
    scenario: &AttackScenario,
    tx: &Transmitter,
    grid: &GridSpec,
    params: &ChannelParams,
) -> Result<Grid<f32>> {
    scenario.validate()?;
    let jammer = Transmitter {
        position_m: scenario.ground_jammer_position(grid),
        power_dbm: scenario.jammer_power_dbm,
        frequency_hz: tx.frequency_hz,
    };
    match scenario.mode {
        AttackMode::Airborne => {
            let loss = channel::path_loss_db(scenario.standoff_m, params.n_los, &jammer, params)?;
            Ok(Grid::filled(
                grid.rows,
                grid.cols,
                (scenario.jammer_power_dbm - loss) as f32,
            ))
        }
        AttackMode::Ground => {
            let mask = channel::sample_los_mask_tagged(&jammer, grid, params, scenario.seed, rng::tag::JAMMER_LOS)?;
            let shadow = shadow::sample_field(
                grid.rows,
                grid.cols,
                grid.cell_size_m,
                params.sf_sigma_db,
                params.sf_dcorr_m,
                rng::derive(scenario.seed, &[rng::tag::JAMMER_SHADOW]),
            )?;
            channel::received_power_dbm(&jammer, grid, params, &mask, &shadow)
        }
    }
}

/// Power sum of two levels in dBm.
#[inline]
pub fn db_power_sum(a_dbm: f32, b_dbm: f32) -> f32 {
    if b_dbm == f32::NEG_INFINITY {
        return a_dbm;
    }
    let a = a_dbm as f64;
    let b = b_dbm as f64;
    // factor out the larger term for accuracy
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    (hi + 10.0 * (1.0 + 10f64.powf((lo - hi) / 10.0)).log10()) as f32
}

/// Superimposes interference power on the attacked cells of a clean map.
pub fn inject(clean: &RssiMap, mask: &AttackMask, interference: &Grid<f32>) -> Result<RssiMap> {
    let (rows, cols) = clean.values_dbm.dims();
    mask.attacked.ensure_dims(rows, cols)?;
    interference.ensure_dims(rows, cols)?;
    let values = Grid::from_fn(rows, cols, |r, c| {
        let v = *clean.values_dbm.get(r, c);
        if *mask.attacked.get(r, c) {
            db_power_sum(v, *interference.get(r, c))
        } else {
            v
        }
    });
    RssiMap::new(values, clean.grid, MapKind::Attacked)
}
