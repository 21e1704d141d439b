//! Spectrum corpora: normalization, the binary grid format, manifests and
//! deterministic generation of (clean, attacked, mask) records.
//!
//! Grid files are little-endian:
//!
//! ```text
//! offset  size  field
//! 0       12    magic  b"SKYSPECGRID\0"
//! 12      4     format version (u32, currently 1)
//! 16      4     rows (u32)
//! 20      4     cols (u32)
//! 24      4*n   row-major f32 values
//! ```
//!
//! Attack masks use the same layout with values 0.0 / 1.0.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackMask, AttackMode, AttackScenario};
use crate::channel::{self, GridSpec, MapKind, RssiMap};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng;
use crate::shadow::CirculantSampler;

pub const GRID_MAGIC: &[u8; 12] = b"SKYSPECGRID\0";
pub const GRID_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
const HEADER_LEN: usize = 24;

/// Linear map from a dBm window onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationSpec {
    pub min_dbm: f64,
    pub max_dbm: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        NormalizationSpec {
            min_dbm: -110.0,
            max_dbm: -40.0,
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_dbm < self.max_dbm) {
            return Err(Error::Config(format!(
                "normalization needs min_dbm < max_dbm, got [{}, {}]",
                self.min_dbm, self.max_dbm
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn to_unit(&self, dbm: f32) -> f32 {
        let u = (dbm as f64 - self.min_dbm) / (self.max_dbm - self.min_dbm);
        u.clamp(0.0, 1.0) as f32
    }

    #[inline]
    pub fn to_dbm(&self, unit: f32) -> f32 {
        (self.min_dbm + unit as f64 * (self.max_dbm - self.min_dbm)) as f32
    }
}

pub fn normalize(map: &RssiMap, spec: &NormalizationSpec) -> Grid<f32> {
    map.values_dbm.map(|&v| spec.to_unit(v))
}

pub fn denormalize(unit: &Grid<f32>, spec: &NormalizationSpec) -> Grid<f32> {
    unit.map(|&u| spec.to_dbm(u))
}

/// Wraps denormalized values as an [`RssiMap`] of the given kind.
pub fn denormalize_map(unit: &Grid<f32>, spec: &NormalizationSpec, grid: &GridSpec, kind: MapKind) -> Result<RssiMap> {
    RssiMap::new(denormalize(unit, spec), *grid, kind)
}

pub fn encode_grid(grid: &Grid<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * grid.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.cols() as u32).to_le_bytes());
    for v in grid.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<Grid<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..12] != GRID_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(12);
    if version != GRID_FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported grid version {version}")));
    }
    let rows = word(16) as usize;
    let cols = word(20) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(path, "grid dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Grid::from_vec(rows, cols, data)
}

pub fn write_grid(path: &Path, grid: &Grid<f32>) -> Result<()> {
    fs::write(path, encode_grid(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Grid<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, path)
}

pub fn mask_to_grid(mask: &AttackMask) -> Grid<f32> {
    mask.attacked.map(|&a| if a { 1.0 } else { 0.0 })
}

pub fn grid_to_mask(grid: &Grid<f32>) -> AttackMask {
    AttackMask {
        attacked: grid.map(|&v| v > 0.5),
    }
}

/// One generated sample together with everything needed to regenerate it.
#[derive(Debug, Clone)]
pub struct SpectrumRecord {
    pub clean: RssiMap,
    pub attacked: Option<RssiMap>,
    pub mask: Option<AttackMask>,
    pub scenario: ScenarioConfig,
    pub seed: u64,
}

/// Deterministic generator of clean and attacked maps for one configuration.
///
/// Holds the shadowing embedding so that generating many records only pays
/// for one FFT per field.
pub struct SpectrumGenerator {
    config: ScenarioConfig,
    shadow: CirculantSampler,
}

impl SpectrumGenerator {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let g = &config.grid;
        Ok(SpectrumGenerator {
            config: config.clone(),
            shadow: CirculantSampler::new(g.rows, g.cols, g.cell_size_m, config.channel.sf_dcorr_m)?,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn clean(&self, seed: u64) -> Result<RssiMap> {
        let c = &self.config;
        let mask = channel::sample_los_mask(&c.tx, &c.grid, &c.channel, seed)?;
        let shadow = self
            .shadow
            .sample(c.channel.sf_sigma_db, rng::derive(seed, &[rng::tag::SHADOW]))?;
        channel::synthesize_rssi_map(&c.tx, &c.grid, &c.channel, &mask, &shadow)
    }

    /// Attacks `clean` under the configured scenario with the given mode and
    /// probability.
    ///
    /// The attack mask and the jammer placement depend only on `seed`, so the
    /// same record attacked at different modes or probabilities shares its
    /// random draws.
    pub fn attack(&self, clean: &RssiMap, mode: AttackMode, p: f64, seed: u64) -> Result<(RssiMap, AttackMask)> {
        let c = &self.config;
        let scenario = AttackScenario {
            mode,
            attack_probability: p,
            seed: rng::derive(seed, &[rng::tag::JAMMER_POSITION]),
            ..c.attack
        };
        let mask = attack::sample_attack_mask(p, &c.grid, rng::derive(seed, &[rng::tag::ATTACK_MASK]))?;
        let interference = attack::interference_map(&scenario, &c.tx, &c.grid, &c.channel)?;
        let attacked = attack::inject(clean, &mask, &interference)?;
        Ok((attacked, mask))
    }

    pub fn record(&self, seed: u64, with_attacks: bool) -> Result<SpectrumRecord> {
        let clean = self.clean(seed)?;
        let (attacked, mask) = if with_attacks {
            let a = &self.config.attack;
            let (m, k) = self.attack(&clean, a.mode, a.attack_probability, seed)?;
            (Some(m), Some(k))
        } else {
            (None, None)
        };
        Ok(SpectrumRecord {
            clean,
            attacked,
            mask,
            scenario: self.config.clone(),
            seed,
        })
    }
}

/// Seed of record `index` in a corpus generated from `base_seed`.
///
/// Kept to 63 bits so that it stores as a TOML integer.
pub fn record_seed(base_seed: u64, index: usize) -> u64 {
    rng::derive(base_seed, &[rng::tag::RECORD, index as u64]) >> 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub clean: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacked: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// Corpus index written next to the grid files as `manifest.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub record_count: usize,
    pub base_seed: u64,
    pub with_attacks: bool,
    pub grid: GridSpec,
    pub normalization: NormalizationSpec,
    pub config: ScenarioConfig,
    pub records: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported manifest version {}", self.format_version),
            ));
        }
        if self.record_count != self.records.len() {
            return Err(Error::format(
                path,
                format!(
                    "record_count {} but {} records listed",
                    self.record_count,
                    self.records.len()
                ),
            ));
        }
        if self.records.windows(2).any(|w| w[0].index >= w[1].index) {
            return Err(Error::format(path, "record indices must be strictly increasing"));
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        manifest.validate(&path)?;
        Ok(manifest)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(self).map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Generates `n` records into `out_dir` and writes the manifest.
pub fn generate_corpus(
    config: &ScenarioConfig,
    n: usize,
    base_seed: u64,
    out_dir: &Path,
    with_attacks: bool,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("corpus needs at least one record".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let generator = SpectrumGenerator::new(config)?;
    let norm = config.normalization;
    let mut records = Vec::with_capacity(n);
    for index in 0..n {
        let seed = record_seed(base_seed, index);
        let rec = generator.record(seed, with_attacks)?;
        let clean = format!("clean_{index:05}.grid");
        write_grid(&out_dir.join(&clean), &normalize(&rec.clean, &norm))?;
        let mut entry = ManifestEntry {
            index,
            seed,
            clean,
            attacked: None,
            mask: None,
        };
        if let (Some(attacked), Some(mask)) = (&rec.attacked, &rec.mask) {
            let a = format!("attacked_{index:05}.grid");
            let m = format!("mask_{index:05}.grid");
            write_grid(&out_dir.join(&a), &normalize(attacked, &norm))?;
            write_grid(&out_dir.join(&m), &mask_to_grid(mask))?;
            entry.attacked = Some(a);
            entry.mask = Some(m);
        }
        records.push(entry);
        if (index + 1) % 256 == 0 {
            log::info!("generated {}/{n} records", index + 1);
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        record_count: n,
        base_seed,
        with_attacks,
        grid: config.grid,
        normalization: norm,
        config: config.clone(),
        records,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Normalized grids of one corpus record as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredRecord {
    pub index: usize,
    pub seed: u64,
    pub clean: Grid<f32>,
    pub attacked: Option<Grid<f32>>,
    pub mask: Option<AttackMask>,
}

pub fn load_record(dir: &Path, manifest: &Manifest, entry: &ManifestEntry) -> Result<StoredRecord> {
    let load = |name: &str| -> Result<Grid<f32>> {
        let path: PathBuf = dir.join(name);
        let g = read_grid(&path)?;
        g.ensure_dims(manifest.grid.rows, manifest.grid.cols)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        Ok(g)
    };
    Ok(StoredRecord {
        index: entry.index,
        seed: entry.seed,
        clean: load(&entry.clean)?,
        attacked: entry.attacked.as_deref().map(load).transpose()?,
        mask: entry.mask.as_deref().map(load).transpose()?.map(|g| grid_to_mask(&g)),
    })
}

/// Loads every clean grid of a corpus.
pub fn load_clean_corpus(dir: &Path) -> Result<(Manifest, Vec<Grid<f32>>)> {
    let manifest = Manifest::read(dir)?;
    let mut grids = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        grids.push(load_record(dir, &manifest, entry)?.clean);
    }
    Ok((manifest, grids))
}
