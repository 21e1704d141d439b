//! Air-to-ground propagation: geometry, LoS probability, log-distance path
//! loss and clean RSSI map synthesis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng;
use crate::shadow::ShadowField;

pub const SPEED_OF_LIGHT_M_S: f64 = 299_792_458.0;

/// Geometry of the measurement plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell_size_m: f64,
    /// Ground coordinate (x, y) of the center of cell (0, 0).
    pub origin_m: [f64; 2],
    pub sampling_altitude_m: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rows: 128,
            cols: 128,
            cell_size_m: 4.0,
            origin_m: [0.0, 0.0],
            sampling_altitude_m: 100.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!(
                "grid must be non-empty, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.cell_size_m > 0.0) {
            return Err(Error::Config(format!(
                "cell_size_m must be positive, got {}",
                self.cell_size_m
            )));
        }
        if !(self.sampling_altitude_m > 0.0) {
            return Err(Error::Config(format!(
                "sampling_altitude_m must be positive, got {}",
                self.sampling_altitude_m
            )));
        }
        Ok(())
    }

    /// 3D coordinate of a cell center on the sampling plane. Columns run
    /// along +x, rows along +y.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 3] {
        [
            self.origin_m[0] + col as f64 * self.cell_size_m,
            self.origin_m[1] + row as f64 * self.cell_size_m,
            self.sampling_altitude_m,
        ]
    }

    /// Ground point directly below the center of cell `(row, col)`.
    pub fn ground_point(&self, row: usize, col: usize) -> [f64; 3] {
        let [x, y, _] = self.cell_center(row, col);
        [x, y, 0.0]
    }

    fn check_cell(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::Domain(format!(
                "cell ({row},{col}) outside {}x{} grid",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// A ground base station (or any emitter) in the scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Transmitter {
    pub position_m: [f64; 3],
    pub power_dbm: f64,
    pub frequency_hz: f64,
}

impl Default for Transmitter {
    /// Base station on the ground below cell (64, 64) of the default grid.
    fn default() -> Self {
        Transmitter::below_center(&GridSpec::default())
    }
}

impl Transmitter {
    pub fn below_center(grid: &GridSpec) -> Self {
        Transmitter {
            position_m: grid.ground_point(grid.rows / 2, grid.cols / 2),
            power_dbm: 20.0,
            frequency_hz: 1.8e9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_hz > 0.0) {
            return Err(Error::Config(format!(
                "frequency_hz must be positive, got {}",
                self.frequency_hz
            )));
        }
        Ok(())
    }
}

/// Constants of the LoS-probability, path-loss and shadowing models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    pub a_los: f64,
    /// Per degree.
    pub b_los: f64,
    pub n_los: f64,
    pub n_nlos: f64,
    pub ref_distance_m: f64,
    pub sf_sigma_db: f64,
    pub sf_dcorr_m: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            a_los: 9.61,
            b_los: 0.16,
            n_los: 2.2,
            n_nlos: 3.8,
            ref_distance_m: 1.0,
            sf_sigma_db: 6.0,
            sf_dcorr_m: 50.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("a_los", self.a_los),
            ("b_los", self.b_los),
            ("n_los", self.n_los),
            ("n_nlos", self.n_nlos),
            ("ref_distance_m", self.ref_distance_m),
            ("sf_sigma_db", self.sf_sigma_db),
            ("sf_dcorr_m", self.sf_dcorr_m),
        ];
        for (name, v) in fields {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_nlos < self.n_los {
            return Err(Error::Config(format!(
                "n_nlos ({}) must not be below n_los ({})",
                self.n_nlos, self.n_los
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Clean,
    Attacked,
    Reconstructed,
}

/// A received-signal-strength map over the measurement grid, in dBm.
#[derive(Debug, Clone, PartialEq)]
pub struct RssiMap {
    pub values_dbm: Grid<f32>,
    pub grid: GridSpec,
    pub kind: MapKind,
}

impl RssiMap {
    pub fn new(values_dbm: Grid<f32>, grid: GridSpec, kind: MapKind) -> Result<Self> {
        values_dbm.ensure_dims(grid.rows, grid.cols)?;
        if let Some(v) = values_dbm.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("RSSI map contains non-finite value {v}")));
        }
        Ok(RssiMap { values_dbm, grid, kind })
    }
}

/// Per-cell propagation state; `true` means line of sight.
#[derive(Debug, Clone, PartialEq)]
pub struct LosMask {
    pub states: Grid<bool>,
}

impl LosMask {
    pub fn all(grid: &GridSpec, los: bool) -> Self {
        LosMask {
            states: Grid::filled(grid.rows, grid.cols, los),
        }
    }

    pub fn los_fraction(&self) -> f64 {
        self.states.iter().filter(|&&s| s).count() as f64 / self.states.len() as f64
    }
}

fn horizontal_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn distance_3d(a: [f64; 3], b: [f64; 3]) -> f64 {
    horizontal_distance(a, b).hypot(a[2] - b[2])
}

/// Elevation of the sampling point in `cell` as seen from `tx`, in degrees.
pub fn elevation_angle_deg(tx: &Transmitter, row: usize, col: usize, grid: &GridSpec) -> Result<f64> {
    grid.check_cell(row, col)?;
    Ok(elevation_between(tx.position_m, grid.cell_center(row, col)))
}

fn elevation_between(from: [f64; 3], to: [f64; 3]) -> f64 {
    let h = horizontal_distance(from, to);
    let dz = to[2] - from[2];
    if h == 0.0 {
        return 90.0;
    }
    dz.atan2(h).to_degrees()
}

/// Air-to-ground LoS probability `1 / (1 + a exp(-b (theta - a)))`.
pub fn los_probability(theta_deg: f64, params: &ChannelParams) -> Result<f64> {
    if !(0.0..=90.0).contains(&theta_deg) {
        return Err(Error::Domain(format!(
            "elevation angle {theta_deg} deg outside [0, 90]"
        )));
    }
    let a = params.a_los;
    let exponent = -params.b_los * (theta_deg - a);
    Ok(1.0 / (1.0 + a * exponent.exp()))
}

/// Free-space loss at the reference distance.
pub fn reference_loss_db(tx: &Transmitter, params: &ChannelParams) -> f64 {
    20.0 * (4.0 * std::f64::consts::PI * params.ref_distance_m * tx.frequency_hz / SPEED_OF_LIGHT_M_S).log10()
}

/// Log-distance path loss `PL0 + 10 n log10(d / d0)` with a free-space intercept.
pub fn path_loss_db(distance_m: f64, exponent: f64, tx: &Transmitter, params: &ChannelParams) -> Result<f64> {
    if !(distance_m >= params.ref_distance_m) {
        return Err(Error::Domain(format!(
            "distance {distance_m} m below reference distance {} m",
            params.ref_distance_m
        )));
    }
    Ok(reference_loss_db(tx, params) + 10.0 * exponent * (distance_m / params.ref_distance_m).log10())
}

/// Draws one independent Bernoulli LoS state per cell.
pub fn sample_los_mask(tx: &Transmitter, grid: &GridSpec, params: &ChannelParams, seed: u64) -> Result<LosMask> {
    sample_los_mask_tagged(tx, grid, params, seed, rng::tag::LOS)
}

pub(crate) fn sample_los_mask_tagged(
    tx: &Transmitter,
    grid: &GridSpec,
    params: &ChannelParams,
    seed: u64,
    tag: u64,
) -> Result<LosMask> {
    let mut states = Grid::filled(grid.rows, grid.cols, false);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let theta = elevation_between(tx.position_m, grid.cell_center(r, c));
            let p = los_probability(theta, params)?;
            *states.get_mut(r, c) = rng::cell_uniform(seed, tag, r, c) < p;
        }
    }
    Ok(LosMask { states })
}

/// Received power per cell in dBm, without the finiteness checks of [`RssiMap`].
pub(crate) fn received_power_dbm(
    tx: &Transmitter,
    grid: &GridSpec,
    params: &ChannelParams,
    mask: &LosMask,
    shadow: &ShadowField,
) -> Result<Grid<f32>> {
    mask.states.ensure_dims(grid.rows, grid.cols)?;
    shadow.values_db.ensure_dims(grid.rows, grid.cols)?;
    let pl0 = reference_loss_db(tx, params);
    let d0 = params.ref_distance_m;
    let mut out = Grid::filled(grid.rows, grid.cols, 0.0f32);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let d = distance_3d(tx.position_m, grid.cell_center(r, c));
            if d < d0 {
                return Err(Error::Domain(format!(
                    "cell ({r},{c}) lies {d} m from the emitter, inside the reference distance"
                )));
            }
            let los = *mask.states.get(r, c);
            let n = if los { params.n_los } else { params.n_nlos };
            let mut rx = tx.power_dbm - (pl0 + 10.0 * n * (d / d0).log10());
            if !los {
                rx -= *shadow.values_db.get(r, c);
            }
            *out.get_mut(r, c) = rx as f32;
        }
    }
    Ok(out)
}

/// Clean RSSI map: path loss by LoS state, shadow fading on NLoS cells only.
pub fn synthesize_rssi_map(
    tx: &Transmitter,
    grid: &GridSpec,
    params: &ChannelParams,
    mask: &LosMask,
    shadow: &ShadowField,
) -> Result<RssiMap> {
    let values = received_power_dbm(tx, grid, params, mask, shadow)?;
    RssiMap::new(values, *grid, MapKind::Clean)
}
