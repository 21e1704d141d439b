//! Fidelity metrics and scenario-level evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attack::AttackMode;
use crate::dataset::{self, SpectrumGenerator};
use crate::diffusion::{self, GuidanceConfig, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, w) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *w = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// Separable valid-region filtering with the SSIM window.
fn filter_valid(data: &[f64], rows: usize, cols: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (vr, vc) = (rows + 1 - SSIM_WINDOW, cols + 1 - SSIM_WINDOW);
    let mut horiz = vec![0.0; rows * vc];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for c in 0..vc {
            horiz[r * vc + c] = k.iter().zip(&row[c..c + SSIM_WINDOW]).map(|(w, v)| w * v).sum();
        }
    }
    let mut out = vec![0.0; vr * vc];
    for r in 0..vr {
        for c in 0..vc {
            out[r * vc + c] = (0..SSIM_WINDOW).map(|i| k[i] * horiz[(r + i) * vc + c]).sum();
        }
    }
    (out, vr, vc)
}

/// Mean structural similarity of two unit-range grids.
///
/// 11x11 Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03, data range
/// 1.0, averaged over all fully contained window positions.
pub fn ssim(a: &Grid<f32>, b: &Grid<f32>) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (rows, cols) = a.dims();
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} grids, got {rows}x{cols}"
        )));
    }
    let k = gaussian_kernel();
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, vr, vc) = filter_valid(&x, rows, cols, &k);
    let (my, _, _) = filter_valid(&y, rows, cols, &k);
    let (sxx, _, _) = filter_valid(&xx, rows, cols, &k);
    let (syy, _, _) = filter_valid(&yy, rows, cols, &k);
    let (sxy, _, _) = filter_valid(&xy, rows, cols, &k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for i in 0..vr * vc {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / (vr * vc) as f64)
}

pub fn mse(a: &Grid<f32>, b: &Grid<f32>) -> Result<f64> {
    a.ensure_same_dims(b)?;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64)
}

/// Relative SSIM change in percent.
pub fn improvement_pct(ssim_attacked: f64, ssim_reconstructed: f64) -> f64 {
    100.0 * (ssim_reconstructed - ssim_attacked) / ssim_attacked
}

/// One attack mode at one corruption probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub mode: AttackMode,
    pub p: f64,
}

impl Scenario {
    /// Both attack modes at p = 0.3, 0.4, 0.5, 0.6, 0.7.
    pub fn default_grid() -> Vec<Scenario> {
        Self::cross(&AttackMode::ALL, &[0.3, 0.4, 0.5, 0.6, 0.7])
    }

    pub fn cross(modes: &[AttackMode], ps: &[f64]) -> Vec<Scenario> {
        modes
            .iter()
            .flat_map(|&mode| ps.iter().map(move |&p| Scenario { mode, p }))
            .collect()
    }

    /// Parses `mode:p` items separated by commas, e.g. `ground:0.3,airborne:0.5`.
    pub fn parse_list(s: &str) -> Result<Vec<Scenario>> {
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|item| {
                let (mode, p) = item
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("scenario {item:?} is not mode:p")))?;
                let p: f64 = p
                    .parse()
                    .map_err(|_| Error::Config(format!("bad probability in scenario {item:?}")))?;
                Ok(Scenario { mode: mode.parse()?, p })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub mode: AttackMode,
    pub p: f64,
    pub ssim_attacked: f64,
    pub ssim_reconstructed: f64,
    pub improvement_pct: f64,
    pub mse_attacked: f64,
    pub mse_reconstructed: f64,
    pub seed_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ScenarioRow>,
    pub min_improvement_pct: f64,
    pub max_improvement_pct: f64,
    pub mean_improvement_pct: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ScenarioRow>) -> Self {
        let imps: Vec<f64> = rows.iter().map(|r| r.improvement_pct).collect();
        let n = imps.len().max(1) as f64;
        EvalReport {
            min_improvement_pct: imps.iter().copied().fold(f64::INFINITY, f64::min),
            max_improvement_pct: imps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_improvement_pct: imps.iter().sum::<f64>() / n,
            rows,
        }
    }

    pub fn row(&self, mode: AttackMode, p: f64) -> Option<&ScenarioRow> {
        self.rows.iter().find(|r| r.mode == mode && (r.p - p).abs() < 1e-12)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<9} {:>5} {:>12} {:>14} {:>10} {:>12} {:>14} {:>6}",
            "mode", "p", "ssim_attack", "ssim_recon", "impr_%", "mse_attack", "mse_recon", "seeds"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<9} {:>5.2} {:>12.4} {:>14.4} {:>10.2} {:>12.6} {:>14.6} {:>6}",
                r.mode.name(),
                r.p,
                r.ssim_attacked,
                r.ssim_reconstructed,
                r.improvement_pct,
                r.mse_attacked,
                r.mse_reconstructed,
                r.seed_count
            );
        }
        let _ = writeln!(
            out,
            "improvement %: min {:.2}  max {:.2}  mean {:.2}",
            self.min_improvement_pct, self.max_improvement_pct, self.mean_improvement_pct
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "mode,p,ssim_attacked,ssim_reconstructed,improvement_pct,mse_attacked,mse_reconstructed,seed_count\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.mode.name(),
                r.p,
                r.ssim_attacked,
                r.ssim_reconstructed,
                r.improvement_pct,
                r.mse_attacked,
                r.mse_reconstructed,
                r.seed_count
            );
        }
        out
    }
}

/// Per-seed metrics of one scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub ssim_attacked: f64,
    pub ssim_reconstructed: f64,
    pub mse_attacked: f64,
    pub mse_reconstructed: f64,
}

/// Seed of the `i`-th evaluation sample.
pub fn eval_seed(base_seed: u64, i: usize) -> u64 {
    dataset::record_seed(base_seed ^ 0x4556_414c, i)
}

/// Attacked-only SSIM per scenario, averaged over `seeds` clean maps.
///
/// Sample `i` reuses the same clean map and attack draws across scenarios.
pub fn attacked_ssim(
    generator: &SpectrumGenerator,
    scenarios: &[Scenario],
    seeds: usize,
    base_seed: u64,
) -> Result<Vec<f64>> {
    let norm = generator.config().normalization;
    let mut sums = vec![0.0; scenarios.len()];
    for i in 0..seeds {
        let seed = eval_seed(base_seed, i);
        let clean = generator.clean(seed)?;
        let clean_u = dataset::normalize(&clean, &norm);
        for (s, sum) in scenarios.iter().zip(sums.iter_mut()) {
            let (attacked, _) = generator.attack(&clean, s.mode, s.p, seed)?;
            *sum += ssim(&dataset::normalize(&attacked, &norm), &clean_u)?;
        }
    }
    Ok(sums.into_iter().map(|s| s / seeds as f64).collect())
}

/// Full evaluation: attack, reconstruct and score every (scenario, seed) pair.
pub fn evaluate_scenarios<P: NoisePredictor + ?Sized>(
    model: &P,
    generator: &SpectrumGenerator,
    scenarios: &[Scenario],
    seeds: usize,
    base_seed: u64,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
) -> Result<EvalReport> {
    if scenarios.is_empty() {
        return Err(Error::Config("no scenarios to evaluate".into()));
    }
    if seeds == 0 {
        return Err(Error::Config("evaluation needs at least one seed".into()));
    }
    let norm = generator.config().normalization;
    let mut acc = vec![[0.0f64; 4]; scenarios.len()];
    for i in 0..seeds {
        let seed = eval_seed(base_seed, i);
        let clean = generator.clean(seed)?;
        let clean_u = dataset::normalize(&clean, &norm);
        for (k, s) in scenarios.iter().enumerate() {
            let (attacked, _) = generator.attack(&clean, s.mode, s.p, seed)?;
            let y = dataset::normalize(&attacked, &norm);
            let recon_seed = rng::derive(seed, &[k as u64]);
            let recon = diffusion::guided_reconstruct(&y, model, schedule, guidance, recon_seed)?;
            let m = SampleMetrics {
                ssim_attacked: ssim(&y, &clean_u)?,
                ssim_reconstructed: ssim(&recon, &clean_u)?,
                mse_attacked: mse(&y, &clean_u)?,
                mse_reconstructed: mse(&recon, &clean_u)?,
            };
            log::debug!("{} p={} seed#{i}: {:?}", s.mode, s.p, m);
            for (slot, v) in acc[k].iter_mut().zip([
                m.ssim_attacked,
                m.ssim_reconstructed,
                m.mse_attacked,
                m.mse_reconstructed,
            ]) {
                *slot += v;
            }
        }
        log::info!("evaluated seed {}/{seeds}", i + 1);
    }
    let n = seeds as f64;
    let rows = scenarios
        .iter()
        .zip(acc)
        .map(|(s, a)| {
            let (sa, sr) = (a[0] / n, a[1] / n);
            ScenarioRow {
                mode: s.mode,
                p: s.p,
                ssim_attacked: sa,
                ssim_reconstructed: sr,
                improvement_pct: improvement_pct(sa, sr),
                mse_attacked: a[2] / n,
                mse_reconstructed: a[3] / n,
                seed_count: seeds,
            }
        })
        .collect();
    Ok(EvalReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioConfig;
    use crate::diffusion::ZeroPredictor;
    use proptest::prelude::*;

    fn random_unit(rows: usize, cols: usize, seed: u64) -> Grid<f32> {
        rng::normal_grid(rows, cols, seed, &[7]).map(|v| (0.5 + 0.25 * v).clamp(0.0, 1.0))
    }

    /// Direct per-window SSIM with an explicit 2D window, no separability.
    fn ssim_bruteforce(a: &Grid<f32>, b: &Grid<f32>) -> f64 {
        let k = gaussian_kernel();
        let (rows, cols) = a.dims();
        let mut total = 0.0;
        let mut n = 0;
        for r in 0..=rows - 11 {
            for c in 0..=cols - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = k[i] * k[j];
                        let x = *a.get(r + i, c + j) as f64;
                        let y = *b.get(r + i, c + j) as f64;
                        mx += w * x;
                        my += w * y;
                        sxx += w * x * x;
                        syy += w * y * y;
                        sxy += w * x * y;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                let num = (2.0 * mx * my + c1) * (2.0 * (sxy - mx * my) + c2);
                let den = (mx * mx + my * my + c1) * ((sxx - mx * mx) + (syy - my * my) + c2);
                total += num / den;
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn identical_grids_score_one() {
        let a = random_unit(32, 32, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_shift_closed_form() {
        let a = Grid::filled(16, 16, 0.5f32);
        let b = Grid::filled(16, 16, 0.6f32);
        let (ma, mb) = (0.5f32 as f64, 0.6f32 as f64);
        let expected = (2.0 * ma * mb + 1e-4) / (ma * ma + mb * mb + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 0.9836).abs() < 1e-4);
    }

    #[test]
    fn separable_matches_bruteforce() {
        let a = random_unit(20, 24, 2);
        let b = random_unit(20, 24, 3);
        assert!((ssim(&a, &b).unwrap() - ssim_bruteforce(&a, &b)).abs() < 1e-10);
    }

    #[test]
    fn complement_scores_below_one() {
        let a = random_unit(16, 16, 4);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
    }

    #[test]
    fn ssim_rejects_mismatch_and_tiny_grids() {
        assert!(ssim(&Grid::filled(16, 16, 0.0), &Grid::filled(16, 15, 0.0)).is_err());
        assert!(ssim(&Grid::filled(8, 8, 0.0), &Grid::filled(8, 8, 0.0)).is_err());
    }

    #[test]
    fn shared_crop_depends_only_on_window_content() {
        let a = random_unit(40, 40, 5);
        let b = random_unit(40, 40, 6);
        let (ca, cb) = (a.crop(3, 5, 24, 24).unwrap(), b.crop(3, 5, 24, 24).unwrap());
        let (pa, pb) = (
            Grid::from_fn(
                30,
                30,
                |r, c| if r >= 6 && c >= 6 { *ca.get(r - 6, c - 6) } else { 0.0 },
            ),
            Grid::from_fn(
                30,
                30,
                |r, c| if r >= 6 && c >= 6 { *cb.get(r - 6, c - 6) } else { 0.0 },
            ),
        );
        let inner_a = pa.crop(6, 6, 24, 24).unwrap();
        let inner_b = pb.crop(6, 6, 24, 24).unwrap();
        assert_eq!(ssim(&ca, &cb).unwrap(), ssim(&inner_a, &inner_b).unwrap());
    }

    #[test]
    fn report_arithmetic_and_formats() {
        let rows = vec![
            ScenarioRow {
                mode: AttackMode::Ground,
                p: 0.3,
                ssim_attacked: 0.8,
                ssim_reconstructed: 0.88,
                improvement_pct: improvement_pct(0.8, 0.88),
                mse_attacked: 0.01,
                mse_reconstructed: 0.005,
                seed_count: 3,
            },
            ScenarioRow {
                mode: AttackMode::Airborne,
                p: 0.3,
                ssim_attacked: 0.5,
                ssim_reconstructed: 0.45,
                improvement_pct: improvement_pct(0.5, 0.45),
                mse_attacked: 0.02,
                mse_reconstructed: 0.03,
                seed_count: 3,
            },
        ];
        let r = EvalReport::from_rows(rows);
        for row in &r.rows {
            assert_eq!(
                row.improvement_pct,
                100.0 * (row.ssim_reconstructed - row.ssim_attacked) / row.ssim_attacked
            );
        }
        assert!((r.max_improvement_pct - 10.0).abs() < 1e-9);
        assert!((r.min_improvement_pct + 10.0).abs() < 1e-9);
        assert!(r.mean_improvement_pct.abs() < 1e-9);
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(r.to_table().contains("airborne"));
    }

    #[test]
    fn scenario_list_parsing() {
        let s = Scenario::parse_list("ground:0.3, airborne:0.7").unwrap();
        assert_eq!(
            s,
            vec![
                Scenario {
                    mode: AttackMode::Ground,
                    p: 0.3
                },
                Scenario {
                    mode: AttackMode::Airborne,
                    p: 0.7
                }
            ]
        );
        assert!(Scenario::parse_list("ground").is_err());
        assert!(Scenario::parse_list("sea:0.1").is_err());
        assert_eq!(Scenario::default_grid().len(), 10);
    }

    #[test]
    fn no_attack_scenario_reports_perfect_attacked_ssim() {
        let mut cfg = ScenarioConfig::default();
        cfg.grid.rows = 32;
        cfg.grid.cols = 32;
        cfg.tx = crate::channel::Transmitter::below_center(&cfg.grid);
        let gen = SpectrumGenerator::new(&cfg).unwrap();
        let guidance = GuidanceConfig {
            t_star: 5,
            rounds: 1,
            lowpass_factor: 4,
            guidance_enabled: true,
        };
        let scen = [Scenario {
            mode: AttackMode::Ground,
            p: 0.0,
        }];
        let r = evaluate_scenarios(&ZeroPredictor, &gen, &scen, 2, 1, &NoiseSchedule::default(), &guidance).unwrap();
        assert!((r.rows[0].ssim_attacked - 1.0).abs() < 1e-12);
        assert!(r.rows[0].improvement_pct <= 1e-9);
        let again =
            evaluate_scenarios(&ZeroPredictor, &gen, &scen, 2, 1, &NoiseSchedule::default(), &guidance).unwrap();
        assert_eq!(r, again);
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = random_unit(16, 16, s1);
            let b = random_unit(16, 16, s2);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
