//! DDPM machinery: the noise schedule, partial forward corruption, ancestral
//! reverse steps, the low-pass guidance filter and multi-round guided
//! reconstruction of attacked spectra.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng;

/// Linear-beta DDPM schedule. Index `t` runs over `1..=steps`; `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Variance added at step `t` (1-based).
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to and including step `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Variance of the DDPM posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// SHA-256 over the step count and the exact beta bit patterns.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.steps() as u64).to_le_bytes());
        for b in &self.betas {
            h.update(b.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_step(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = if allow_zero { 0 } else { 1 };
        if t < lo || t > self.steps() {
            return Err(Error::Domain(format!("timestep {t} outside [{lo}, {}]", self.steps())));
        }
        Ok(())
    }
}

/// Anything that predicts the noise component of a noisy unit grid.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Grid<f32>, t: usize) -> Result<Grid<f32>>;
}

/// Predicts zero noise everywhere; the reverse chain then only rescales.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict_noise(&self, x_t: &Grid<f32>, _t: usize) -> Result<Grid<f32>> {
        Ok(Grid::filled(x_t.rows(), x_t.cols(), 0.0))
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn forward_sample(x0: &Grid<f32>, t: usize, noise: &Grid<f32>, schedule: &NoiseSchedule) -> Result<Grid<f32>> {
    schedule.check_step(t, true)?;
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(noise, |&x, &e| (s * x as f64 + n * e as f64) as f32)
}

/// One ancestral step from `x_t` to `x_{t-1}`.
///
/// `z` is the fresh standard-normal draw; it is ignored at `t = 1`, where the
/// chain returns the posterior mean.
pub fn reverse_step(
    x_t: &Grid<f32>,
    t: usize,
    eps_hat: &Grid<f32>,
    schedule: &NoiseSchedule,
    z: &Grid<f32>,
) -> Result<Grid<f32>> {
    schedule.check_step(t, false)?;
    x_t.ensure_same_dims(eps_hat)?;
    x_t.ensure_same_dims(z)?;
    let beta = schedule.beta(t);
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let eps_coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let sigma = if t > 1 {
        schedule.posterior_variance(t).sqrt()
    } else {
        0.0
    };
    let data = x_t
        .iter()
        .zip(eps_hat.iter())
        .zip(z.iter())
        .map(|((&x, &e), &zz)| {
            let mean = inv_sqrt_alpha * (x as f64 - eps_coef * e as f64);
            (mean + sigma * zz as f64) as f32
        })
        .collect();
    Grid::from_vec(x_t.rows(), x_t.cols(), data)
}

/// Area-mean downsampling by `factor` followed by nearest upsampling.
pub fn lowpass(grid: &Grid<f32>, factor: usize) -> Result<Grid<f32>> {
    let (rows, cols) = grid.dims();
    if factor == 0 || rows % factor != 0 || cols % factor != 0 {
        return Err(Error::Domain(format!(
            "low-pass factor {factor} does not divide {rows}x{cols}"
        )));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let (br, bc) = (rows / factor, cols / factor);
    let mut blocks = vec![0.0f64; br * bc];
    for r in 0..rows {
        for c in 0..cols {
            blocks[(r / factor) * bc + c / factor] += *grid.get(r, c) as f64;
        }
    }
    let area = (factor * factor) as f64;
    Ok(Grid::from_fn(rows, cols, |r, c| {
        (blocks[(r / factor) * bc + c / factor] / area) as f32
    }))
}

/// Knobs of the multi-round guided reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Depth of the partial forward corruption in each round. Zero disables
    /// the chain entirely.
    pub t_star: usize,
    pub rounds: usize,
    pub lowpass_factor: usize,
    pub guidance_enabled: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            t_star: 400,
            rounds: 2,
            lowpass_factor: 4,
            guidance_enabled: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.t_star > schedule.steps() {
            return Err(Error::Config(format!(
                "t_star {} exceeds schedule length {}",
                self.t_star,
                schedule.steps()
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !self.lowpass_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "lowpass_factor must be a power of two, got {}",
                self.lowpass_factor
            )));
        }
        Ok(())
    }
}

/// Reconstructs an attack-free unit grid from the attacked unit grid `y`.
///
/// Each round noises the current estimate to `t_star` and walks the reverse
/// chain back to zero. With guidance on, the low frequencies of every reverse
/// iterate are replaced by those of `y` noised to the same level. Round `k+1`
/// starts from the output of round `k`. All noise is drawn from sub-streams
/// of `seed` addressed by round and timestep.
pub fn guided_reconstruct<P: NoisePredictor + ?Sized>(
    y: &Grid<f32>,
    model: &P,
    schedule: &NoiseSchedule,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<Grid<f32>> {
    cfg.validate(schedule)?;
    let (rows, cols) = y.dims();
    if cfg.guidance_enabled {
        lowpass(y, cfg.lowpass_factor)?;
    }
    let mut current = y.clone();
    for round in 0..cfg.rounds {
        let k = round as u64;
        let eps = rng::normal_grid(rows, cols, seed, &[rng::tag::FORWARD, k]);
        let mut x = forward_sample(&current, cfg.t_star, &eps, schedule)?;
        for t in (1..=cfg.t_star).rev() {
            let eps_hat = model.predict_noise(&x, t)?;
            x.ensure_same_dims(&eps_hat)?;
            let z = if t > 1 {
                rng::normal_grid(rows, cols, seed, &[rng::tag::REVERSE, k, t as u64])
            } else {
                Grid::filled(rows, cols, 0.0)
            };
            x = reverse_step(&x, t, &eps_hat, schedule, &z)?;
            if cfg.guidance_enabled {
                let noise = rng::normal_grid(rows, cols, seed, &[rng::tag::GUIDANCE, k, t as u64]);
                let y_t = forward_sample(y, t - 1, &noise, schedule)?;
                let low_x = lowpass(&x, cfg.lowpass_factor)?;
                let low_y = lowpass(&y_t, cfg.lowpass_factor)?;
                x = Grid::from_fn(rows, cols, |r, c| x.get(r, c) - low_x.get(r, c) + low_y.get(r, c));
            }
        }
        current = x;
    }
    Ok(current.clamp_unit())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Grid<f32> {
        Grid::from_fn(rows, cols, f)
    }

    #[test]
    fn schedule_recursion_is_exact() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        for t in 1..=1000 {
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
            }
        }
        // independent product
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 5e-5);
    }

    #[test]
    fn schedule_hash_is_stable_and_discriminating() {
        let a = NoiseSchedule::default();
        assert_eq!(a.hash(), NoiseSchedule::default().hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), NoiseSchedule::linear(1000, 1e-4, 0.021).unwrap().hash());
    }

    #[test]
    fn forward_examples() {
        let s = NoiseSchedule::default();
        let x0 = grid(4, 4, |r, c| (r * 4 + c) as f32 / 16.0);
        let e = rng::normal_grid(4, 4, 1, &[0]);
        assert_eq!(forward_sample(&x0, 0, &e, &s).unwrap(), x0);
        let x1 = forward_sample(&x0, 1, &e, &s).unwrap();
        for ((a, x), n) in x1.iter().zip(x0.iter()).zip(e.iter()) {
            let expected = 0.9999f64.sqrt() * *x as f64 + 0.0001f64.sqrt() * *n as f64;
            assert!((*a as f64 - expected).abs() < 1e-6);
        }
        assert!(forward_sample(&x0, 1001, &e, &s).is_err());
    }

    #[test]
    fn reverse_inverts_forward_at_step_one() {
        let s = NoiseSchedule::default();
        let x0 = rng::normal_grid(8, 8, 4, &[0]).map(|v| v.abs().min(1.0));
        let e = rng::normal_grid(8, 8, 5, &[0]);
        let x1 = forward_sample(&x0, 1, &e, &s).unwrap();
        let z = rng::normal_grid(8, 8, 6, &[0]);
        let back = reverse_step(&x1, 1, &e, &s, &z).unwrap();
        for (a, b) in back.iter().zip(x0.iter()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
        assert!(reverse_step(&x1, 0, &e, &s, &z).is_err());
    }

    #[test]
    fn vanishing_beta_step_is_near_identity() {
        let s = NoiseSchedule::linear(10, 1e-9, 1e-9).unwrap();
        let x = rng::normal_grid(4, 4, 2, &[0]);
        let zero = Grid::filled(4, 4, 0.0);
        let next = reverse_step(&x, 5, &zero, &s, &zero).unwrap();
        for (a, b) in next.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    /// Scalar reference written directly from the posterior-mean formula.
    fn scalar_reverse(x: f64, eps: f64, z: f64, t: usize) -> f64 {
        let beta = |i: usize| 1e-4 + (0.02 - 1e-4) * (i - 1) as f64 / 999.0;
        let abar = |i: usize| (1..=i).map(|j| 1.0 - beta(j)).product::<f64>();
        let mean = (x - beta(t) / (1.0 - abar(t)).sqrt() * eps) / (1.0 - beta(t)).sqrt();
        let var = beta(t) * (1.0 - abar(t - 1)) / (1.0 - abar(t));
        mean + var.sqrt() * z
    }

    #[test]
    fn reverse_step_matches_scalar_reference_at_500() {
        let s = NoiseSchedule::default();
        let x = grid(1, 4, |_, c| [0.3, -0.7, 1.2, 0.05][c]);
        let e = grid(1, 4, |_, c| [0.5, 0.1, -1.3, 2.0][c]);
        let z = grid(1, 4, |_, c| [-0.2, 0.9, 0.4, -1.1][c]);
        let out = reverse_step(&x, 500, &e, &s, &z).unwrap();
        for c in 0..4 {
            let expected = scalar_reverse(*x.get(0, c) as f64, *e.get(0, c) as f64, *z.get(0, c) as f64, 500);
            assert!((*out.get(0, c) as f64 - expected).abs() < 1e-5, "col {c}");
        }
    }

    #[test]
    fn forward_variance_law() {
        let s = NoiseSchedule::default();
        let x0 = grid(100, 100, |r, c| ((r + c) % 7) as f32 / 7.0);
        for t in [10usize, 250, 700] {
            let e = rng::normal_grid(100, 100, t as u64, &[1]);
            let xt = forward_sample(&x0, t, &e, &s).unwrap();
            let sab = s.alpha_bar(t).sqrt();
            let resid: Vec<f64> = xt
                .iter()
                .zip(x0.iter())
                .map(|(a, b)| *a as f64 - sab * *b as f64)
                .collect();
            let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
            let expected = 1.0 - s.alpha_bar(t);
            // 10^4 draws: relative std of a variance estimate is sqrt(2/n) ~ 1.4%
            assert!((var / expected - 1.0).abs() < 0.06, "t={t}: {var} vs {expected}");
        }
    }

    #[test]
    fn lowpass_examples() {
        let c = Grid::filled(8, 8, 0.37f32);
        assert_eq!(lowpass(&c, 4).unwrap(), c);
        let x = rng::normal_grid(8, 8, 3, &[0]);
        assert_eq!(lowpass(&x, 1).unwrap(), x);
        let checker = grid(4, 4, |r, c| ((r + c) % 2) as f32);
        assert_eq!(lowpass(&checker, 4).unwrap(), Grid::filled(4, 4, 0.5));
        assert!(lowpass(&x, 3).is_err());
    }

    #[test]
    fn reconstruct_with_zero_depth_is_identity() {
        let s = NoiseSchedule::default();
        let y = grid(8, 8, |r, c| (r * 8 + c) as f32 / 64.0);
        let cfg = GuidanceConfig {
            t_star: 0,
            rounds: 1,
            ..GuidanceConfig::default()
        };
        assert_eq!(guided_reconstruct(&y, &ZeroPredictor, &s, &cfg, 3).unwrap(), y);
    }

    #[test]
    fn reconstruct_is_deterministic_and_seed_sensitive() {
        let s = NoiseSchedule::default();
        let y = grid(8, 8, |r, c| (r * 8 + c) as f32 / 64.0);
        let cfg = GuidanceConfig {
            t_star: 1000,
            rounds: 1,
            lowpass_factor: 4,
            guidance_enabled: false,
        };
        let a = guided_reconstruct(&y, &ZeroPredictor, &s, &cfg, 11).unwrap();
        let b = guided_reconstruct(&y, &ZeroPredictor, &s, &cfg, 11).unwrap();
        let c = guided_reconstruct(&y, &ZeroPredictor, &s, &cfg, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn reconstruct_rejects_bad_config() {
        let s = NoiseSchedule::default();
        let y = Grid::filled(8, 8, 0.5f32);
        let bad = [
            GuidanceConfig {
                t_star: 1001,
                ..GuidanceConfig::default()
            },
            GuidanceConfig {
                rounds: 0,
                ..GuidanceConfig::default()
            },
            GuidanceConfig {
                lowpass_factor: 3,
                ..GuidanceConfig::default()
            },
            GuidanceConfig {
                lowpass_factor: 16,
                ..GuidanceConfig::default()
            },
        ];
        for cfg in bad {
            assert!(guided_reconstruct(&y, &ZeroPredictor, &s, &cfg, 0).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn guidance_pulls_low_frequencies_towards_input() {
        let s = NoiseSchedule::default();
        let mut with = 0.0;
        let mut without = 0.0;
        for seed in 0..20u64 {
            let y = rng::normal_grid(16, 16, seed, &[9]).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
            let low_y = lowpass(&y, 4).unwrap();
            for (enabled, acc) in [(true, &mut with), (false, &mut without)] {
                let cfg = GuidanceConfig {
                    t_star: 200,
                    rounds: 1,
                    lowpass_factor: 4,
                    guidance_enabled: enabled,
                };
                let out = guided_reconstruct(&y, &ZeroPredictor, &s, &cfg, seed).unwrap();
                *acc += correlation(&lowpass(&out, 4).unwrap(), &low_y);
            }
        }
        assert!(with > without, "{with} vs {without}");
    }

    fn correlation(a: &Grid<f32>, b: &Grid<f32>) -> f64 {
        let (ma, mb) = (a.mean(), b.mean());
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            let (dx, dy) = (*x as f64 - ma, *y as f64 - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
        sab / (saa * sbb).sqrt().max(1e-12)
    }

    proptest! {
        #[test]
        fn lowpass_preserves_mean_and_is_idempotent(seed in any::<u64>(), k in 0u32..3) {
            let factor = 1usize << k;
            let x = rng::normal_grid(8, 8, seed, &[2]);
            let once = lowpass(&x, factor).unwrap();
            let twice = lowpass(&once, factor).unwrap();
            prop_assert!((once.mean() - x.mean()).abs() < 1e-5);
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
