//! Spatially correlated log-normal shadowing.
//!
//! Fields are stationary zero-mean Gaussian processes with exponential
//! correlation `exp(-d / dcorr)`, sampled exactly on the grid by circulant
//! embedding on a torus at least twice the grid size in each direction.

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowField {
    pub values_db: Grid<f64>,
    pub sigma_db: f64,
    pub dcorr_m: f64,
    pub seed: u64,
}

impl ShadowField {
    pub fn zeros(grid: &crate::channel::GridSpec) -> Self {
        ShadowField {
            values_db: Grid::filled(grid.rows, grid.cols, 0.0),
            sigma_db: 0.0,
            dcorr_m: 1.0,
            seed: 0,
        }
    }
}

/// Covariance of the shadowing process at lag `d_m`, in dB squared.
pub fn covariance(d_m: f64, sigma_db: f64, dcorr_m: f64) -> f64 {
    sigma_db * sigma_db * (-d_m / dcorr_m).exp()
}

/// Precomputed circulant embedding for one grid shape and correlation distance.
///
/// Holds the square-rooted, normalized eigenvalues of the embedded unit-variance
/// covariance; sampling a field is then one complex FFT.
pub struct CirculantSampler {
    rows: usize,
    cols: usize,
    pad_rows: usize,
    pad_cols: usize,
    sqrt_eigen: Vec<f64>,
    clamped_mass: f64,
    dcorr_m: f64,
}

impl CirculantSampler {
    pub fn new(rows: usize, cols: usize, cell_size_m: f64, dcorr_m: f64) -> Result<Self> {
        if !(dcorr_m > 0.0) {
            return Err(Error::Domain(format!(
                "decorrelation distance must be positive, got {dcorr_m}"
            )));
        }
        if !(cell_size_m > 0.0) || rows == 0 || cols == 0 {
            return Err(Error::Domain("shadow field needs a non-empty grid".into()));
        }
        let pad_rows = (2 * rows).next_power_of_two();
        let pad_cols = (2 * cols).next_power_of_two();
        let mut spectrum: Vec<Complex64> = Vec::with_capacity(pad_rows * pad_cols);
        for i in 0..pad_rows {
            let di = i.min(pad_rows - i) as f64 * cell_size_m;
            for j in 0..pad_cols {
                let dj = j.min(pad_cols - j) as f64 * cell_size_m;
                spectrum.push(Complex64::new(covariance(di.hypot(dj), 1.0, dcorr_m), 0.0));
            }
        }
        fft2(&mut spectrum, pad_rows, pad_cols);

        let total: f64 = pad_rows as f64 * pad_cols as f64;
        let mut negative = 0.0;
        let mut absolute = 0.0;
        let sqrt_eigen = spectrum
            .iter()
            .map(|z| {
                let lambda = z.re;
                absolute += lambda.abs();
                if lambda < 0.0 {
                    negative -= lambda;
                    0.0
                } else {
                    (lambda / total).sqrt()
                }
            })
            .collect();
        Ok(CirculantSampler {
            rows,
            cols,
            pad_rows,
            pad_cols,
            sqrt_eigen,
            clamped_mass: negative / absolute,
            dcorr_m,
        })
    }

    /// Fraction of eigenvalue mass that was negative and clamped to zero.
    pub fn clamped_mass(&self) -> f64 {
        self.clamped_mass
    }

    pub fn sample(&self, sigma_db: f64, seed: u64) -> Result<ShadowField> {
        if !(sigma_db >= 0.0) {
            return Err(Error::Domain(format!(
                "shadowing standard deviation must be non-negative, got {sigma_db}"
            )));
        }
        let mut rng = rng::stream(seed, &[rng::tag::SHADOW]);
        let mut buf: Vec<Complex64> = self
            .sqrt_eigen
            .iter()
            .map(|&s| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex64::new(s * re, s * im)
            })
            .collect();
        fft2(&mut buf, self.pad_rows, self.pad_cols);
        // scale after synthesis so that fields are exactly linear in sigma
        let values = Grid::from_fn(self.rows, self.cols, |r, c| sigma_db * buf[r * self.pad_cols + c].re);
        Ok(ShadowField {
            values_db: values,
            sigma_db,
            dcorr_m: self.dcorr_m,
            seed,
        })
    }
}

/// Samples a `rows x cols` shadowing field with standard deviation `sigma_db`.
pub fn sample_field(
    rows: usize,
    cols: usize,
    cell_size_m: f64,
    sigma_db: f64,
    dcorr_m: f64,
    seed: u64,
) -> Result<ShadowField> {
    CirculantSampler::new(rows, cols, cell_size_m, dcorr_m)?.sample(sigma_db, seed)
}

fn fft2(data: &mut [Complex64], rows: usize, cols: usize) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(cols);
    for row in data.chunks_exact_mut(cols) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(rows);
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
}
