//! C ABI over the skyspectra toolkit.
//!
//! Every function returns a [`SkyStatus`]; on failure the message is
//! available from [`sky_last_error`] on the same thread. Objects are opaque
//! handles released with their `_free` function. Grids hold normalized unit
//! values in row-major order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use skyspectra::attack::AttackMode;
use skyspectra::config::ScenarioConfig;
use skyspectra::dataset::{self, SpectrumGenerator};
use skyspectra::denoiser::DenoiserModel;
use skyspectra::diffusion::{self, GuidanceConfig, NoiseSchedule};
use skyspectra::{metrics, Error, Grid};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkyStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    ModelMismatch = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkyAttackMode {
    Ground = 0,
    Airborne = 1,
}

impl From<SkyAttackMode> for AttackMode {
    fn from(m: SkyAttackMode) -> Self {
        match m {
            SkyAttackMode::Ground => AttackMode::Ground,
            SkyAttackMode::Airborne => AttackMode::Airborne,
        }
    }
}

/// Map generator for one scenario configuration.
pub struct SkyGenerator(SpectrumGenerator);

/// Trained noise predictor.
pub struct SkyModel(DenoiserModel);

/// Row-major grid of `f32`.
pub struct SkyGrid(Grid<f32>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SkyStatus {
    match e {
        Error::Domain(_) | Error::DimensionMismatch { .. } => SkyStatus::InvalidArgument,
        Error::Config(_) | Error::Training(_) => SkyStatus::Config,
        Error::Io { .. } => SkyStatus::Io,
        Error::Format { .. } => SkyStatus::Format,
        Error::ModelMismatch(_) => SkyStatus::ModelMismatch,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SkyStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SkyStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SkyStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            SkyStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SkyStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    let s = as_ref(p, what)?;
    let s = CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sky_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sky_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a generator from a TOML config file, or the defaults when `path`
/// is NULL.
///
/// # Safety
/// `path` must be NULL or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sky_generator_new(path: *const c_char, out: *mut *mut SkyGenerator) -> SkyStatus {
    guard(|| {
        let cfg = if path.is_null() {
            ScenarioConfig::default()
        } else {
            ScenarioConfig::load(&path_arg(path, "path")?)?
        };
        put(out, SkyGenerator(SpectrumGenerator::new(&cfg)?), "out")
    })
}

/// # Safety
/// `g` must be NULL or a handle from [`sky_generator_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn sky_generator_free(g: *mut SkyGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Normalized clean map for `seed`.
///
/// # Safety
/// `g` must be a live generator and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sky_generator_clean(g: *const SkyGenerator, seed: u64, out: *mut *mut SkyGrid) -> SkyStatus {
    guard(|| {
        let g = &as_ref(g, "generator")?.0;
        let clean = g.clean(seed)?;
        put(
            out,
            SkyGrid(dataset::normalize(&clean, &g.config().normalization)),
            "out",
        )
    })
}

/// Normalized attacked map and 0/1 mask for the clean map of `seed`.
/// `out_mask` may be NULL.
///
/// # Safety
/// `g` must be a live generator and `out_attacked` writable.
#[no_mangle]
pub unsafe extern "C" fn sky_generator_attack(
    g: *const SkyGenerator,
    seed: u64,
    mode: SkyAttackMode,
    p: f64,
    out_attacked: *mut *mut SkyGrid,
    out_mask: *mut *mut SkyGrid,
) -> SkyStatus {
    guard(|| {
        let g = &as_ref(g, "generator")?.0;
        let clean = g.clean(seed)?;
        let (attacked, mask) = g.attack(&clean, mode.into(), p, seed)?;
        put(
            out_attacked,
            SkyGrid(dataset::normalize(&attacked, &g.config().normalization)),
            "out_attacked",
        )?;
        if !out_mask.is_null() {
            put(out_mask, SkyGrid(dataset::mask_to_grid(&mask)), "out_mask")?;
        }
        Ok(())
    })
}

/// Copies `rows * cols` values into a new grid.
///
/// # Safety
/// `data` must point to `rows * cols` readable floats.
#[no_mangle]
pub unsafe extern "C" fn sky_grid_new(rows: usize, cols: usize, data: *const f32, out: *mut *mut SkyGrid) -> SkyStatus {
    guard(|| {
        if data.is_null() {
            return Err(Failure::Null("data"));
        }
        let len = rows
            .checked_mul(cols)
            .filter(|&l| l > 0)
            .ok_or_else(|| Failure::Invalid(format!("bad grid size {rows}x{cols}")))?;
        let values = std::slice::from_raw_parts(data, len).to_vec();
        put(out, SkyGrid(Grid::from_vec(rows, cols, values)?), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sky_grid_read(path: *const c_char, out: *mut *mut SkyGrid) -> SkyStatus {
    guard(|| {
        let grid = dataset::read_grid(&path_arg(path, "path")?)?;
        put(out, SkyGrid(grid), "out")
    })
}

/// # Safety
/// `grid` must be live and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sky_grid_write(grid: *const SkyGrid, path: *const c_char) -> SkyStatus {
    guard(|| {
        let g = &as_ref(grid, "grid")?.0;
        dataset::write_grid(&path_arg(path, "path")?, g)?;
        Ok(())
    })
}

/// Rows of `grid`, 0 for NULL.
///
/// # Safety
/// `grid` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn sky_grid_rows(grid: *const SkyGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.rows())
}

/// Columns of `grid`, 0 for NULL.
///
/// # Safety
/// `grid` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn sky_grid_cols(grid: *const SkyGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.cols())
}

/// Borrowed row-major values, valid while the grid lives.
///
/// # Safety
/// `grid` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn sky_grid_data(grid: *const SkyGrid) -> *const f32 {
    grid.as_ref().map_or(ptr::null(), |g| g.0.as_slice().as_ptr())
}

/// # Safety
/// `grid` must be NULL or a grid handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn sky_grid_free(grid: *mut SkyGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Loads a checkpoint and checks it against the default noise schedule.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sky_model_load(path: *const c_char, out: *mut *mut SkyModel) -> SkyStatus {
    guard(|| {
        let model = DenoiserModel::load(&path_arg(path, "path")?)?;
        let norm = model.normalization;
        model.ensure_compatible(&NoiseSchedule::default(), &norm)?;
        put(out, SkyModel(model), "out")
    })
}

/// # Safety
/// `model` must be NULL or a model handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn sky_model_free(model: *mut SkyModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Guided multi-round reconstruction of the attacked unit grid `y`.
///
/// # Safety
/// `model` and `y` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sky_reconstruct(
    model: *const SkyModel,
    y: *const SkyGrid,
    t_star: usize,
    rounds: usize,
    lowpass_factor: usize,
    guidance_enabled: bool,
    seed: u64,
    out: *mut *mut SkyGrid,
) -> SkyStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.0;
        let y = &as_ref(y, "y")?.0;
        let cfg = GuidanceConfig {
            t_star,
            rounds,
            lowpass_factor,
            guidance_enabled,
        };
        let recon = diffusion::guided_reconstruct(y, m, &NoiseSchedule::default(), &cfg, seed)?;
        put(out, SkyGrid(recon), "out")
    })
}

/// SSIM of two equally sized unit grids.
///
/// # Safety
/// `a` and `b` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sky_ssim(a: *const SkyGrid, b: *const SkyGrid, out: *mut f64) -> SkyStatus {
    guard(|| {
        let (a, b) = (&as_ref(a, "a")?.0, &as_ref(b, "b")?.0);
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = metrics::ssim(a, b)?;
        Ok(())
    })
}
