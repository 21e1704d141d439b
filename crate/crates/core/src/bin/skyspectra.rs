use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use skyspectra::attack::AttackMode;
use skyspectra::channel::MapKind;
use skyspectra::config::ScenarioConfig;
use skyspectra::dataset::{self, SpectrumGenerator};
use skyspectra::denoiser::{self, DenoiserModel, TrainConfig, UNetConfig};
use skyspectra::diffusion::{self, GuidanceConfig, NoiseSchedule};
use skyspectra::metrics::{self, Scenario};
use skyspectra::{render, Error};

/// Simulate, attack and reconstruct low-altitude RSSI feature spectra.
#[derive(Parser)]
#[command(name = "skyspectra", version)]
struct Cli {
    /// Resolve relative paths against this directory.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,

    /// Scenario config (TOML). Defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus of normalized maps with a manifest.
    GenDataset {
        #[arg(long, default_value_t = 4096)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also store attacked maps and masks for the configured attack.
        #[arg(long)]
        with_attacks: bool,
    },
    /// Train the noise predictor on a corpus of clean maps.
    Train(TrainArgs),
    /// Attack a stored clean map.
    Attack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "ground")]
        mode: AttackMode,
        /// Per-cell attack probability.
        #[arg(long, default_value_t = 0.3)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Where to store the attack mask.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Reconstruct an attacked map with guided diffusion.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score reconstruction across attack scenarios.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated `mode:p` list; defaults to both modes at p = 0.3..0.7.
        #[arg(long)]
        scenarios: Option<String>,
        /// Evaluation maps per scenario.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[command(flatten)]
        guidance: GuidanceArgs,
        /// Directory receiving report.txt and report.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render maps as PNG heatmaps over the normalization range.
    Render {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Pixels per cell.
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 30_000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Base channel width; the full architecture uses 64.
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    res_blocks: usize,
    #[arg(long, default_value_t = 64)]
    time_embed_dim: usize,
    /// Train on random square crops of this side.
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Checkpoint cadence in steps (0 keeps only the final model).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Per-step loss CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    loss_trace: Option<PathBuf>,
}

#[derive(Args)]
struct GuidanceArgs {
    #[arg(long)]
    t_star: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    lowpass: Option<usize>,
    #[arg(long)]
    no_guidance: bool,
}

impl GuidanceArgs {
    fn resolve(&self, base: &GuidanceConfig) -> GuidanceConfig {
        GuidanceConfig {
            t_star: self.t_star.unwrap_or(base.t_star),
            rounds: self.rounds.unwrap_or(base.rounds),
            lowpass_factor: self.lowpass.unwrap_or(base.lowpass_factor),
            guidance_enabled: base.guidance_enabled && !self.no_guidance,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::DimensionMismatch { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        Error::ModelMismatch(_) => 5,
        Error::Training(_) => 6,
    }
}

fn load_config(path: Option<&Path>) -> skyspectra::Result<ScenarioConfig> {
    let cfg = match path {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    log::info!("resolved config:\n{}", cfg.to_toml_string());
    Ok(cfg)
}

fn load_model(path: &Path, cfg: &ScenarioConfig, schedule: &NoiseSchedule) -> skyspectra::Result<DenoiserModel> {
    let model = DenoiserModel::load(path)?;
    model.ensure_compatible(schedule, &cfg.normalization)?;
    let m = model.config();
    if (m.rows, m.cols) != (cfg.grid.rows, cfg.grid.cols) {
        return Err(Error::ModelMismatch(format!(
            "model expects {}x{} maps, config has {}x{}",
            m.rows, m.cols, cfg.grid.rows, cfg.grid.cols
        )));
    }
    log::info!(
        "loaded model {} ({} parameters, step {})",
        path.display(),
        model.net.params.scalar_count(),
        model.train_step
    );
    Ok(model)
}

fn run(cli: Cli) -> skyspectra::Result<()> {
    if let Some(dir) = &cli.workdir {
        std::env::set_current_dir(dir).map_err(|e| Error::io(dir, e))?;
    }
    let config_path = cli.config.as_deref();
    let schedule = NoiseSchedule::default();
    match cli.command {
        Command::GenDataset {
            count,
            seed,
            out_dir,
            with_attacks,
        } => {
            let cfg = load_config(config_path)?;
            let m = dataset::generate_corpus(&cfg, count, seed, &out_dir, with_attacks)?;
            log::info!("wrote {} records to {}", m.record_count, out_dir.display());
        }
        Command::Train(a) => {
            let (manifest, corpus) = dataset::load_clean_corpus(&a.corpus)?;
            let model_cfg = UNetConfig {
                rows: manifest.grid.rows,
                cols: manifest.grid.cols,
                base_channels: a.width,
                res_blocks: a.res_blocks,
                time_embed_dim: a.time_embed_dim,
                ..UNetConfig::default()
            };
            let train_cfg = TrainConfig {
                steps: a.steps,
                batch: a.batch,
                lr: a.lr,
                ema_decay: a.ema_decay,
                seed: a.seed,
                checkpoint_every: a.checkpoint_every,
                crop: a.crop,
            };
            log::info!("model config: {model_cfg:?}");
            log::info!("train config: {train_cfg:?}");
            let out = a.out.clone();
            let outcome = denoiser::train(
                &corpus,
                &schedule,
                &model_cfg,
                &train_cfg,
                &manifest.normalization,
                |m| {
                    log::info!("checkpoint at step {} -> {}", m.train_step, out.display());
                    m.save(&out)
                },
            )?;
            let trace = a.loss_trace.unwrap_or_else(|| a.out.with_extension("loss.csv"));
            denoiser::write_loss_trace(&trace, &outcome.losses)?;
            log::info!("loss trace -> {}", trace.display());
        }
        Command::Attack {
            input,
            mode,
            p,
            seed,
            out,
            mask_out,
        } => {
            let cfg = load_config(config_path)?;
            let generator = SpectrumGenerator::new(&cfg)?;
            let unit = dataset::read_grid(&input)?;
            unit.ensure_dims(cfg.grid.rows, cfg.grid.cols)?;
            let clean = dataset::denormalize_map(&unit, &cfg.normalization, &cfg.grid, MapKind::Clean)?;
            let (attacked, mask) = generator.attack(&clean, mode, p, seed)?;
            dataset::write_grid(&out, &dataset::normalize(&attacked, &cfg.normalization))?;
            if let Some(m) = mask_out {
                dataset::write_grid(&m, &dataset::mask_to_grid(&mask))?;
            }
            log::info!("{mode} attack p={p}: {} cells attacked", mask.attacked_count());
        }
        Command::Reconstruct {
            model,
            input,
            guidance,
            seed,
            out,
        } => {
            let cfg = load_config(config_path)?;
            let model = load_model(&model, &cfg, &schedule)?;
            let g = guidance.resolve(&cfg.diffusion);
            log::info!("guidance: {g:?}");
            let y = dataset::read_grid(&input)?;
            let recon = diffusion::guided_reconstruct(&y, &model, &schedule, &g, seed)?;
            dataset::write_grid(&out, &recon)?;
        }
        Command::Evaluate {
            model,
            scenarios,
            seeds,
            base_seed,
            guidance,
            out,
        } => {
            let cfg = load_config(config_path)?;
            let model = load_model(&model, &cfg, &schedule)?;
            let g = guidance.resolve(&cfg.diffusion);
            log::info!("guidance: {g:?}");
            let scenarios = match scenarios {
                Some(s) => Scenario::parse_list(&s)?,
                None => Scenario::default_grid(),
            };
            let generator = SpectrumGenerator::new(&cfg)?;
            let report = metrics::evaluate_scenarios(&model, &generator, &scenarios, seeds, base_seed, &schedule, &g)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let table = report.to_table();
            for (name, text) in [("report.txt", &table), ("report.csv", &report.to_csv())] {
                let p = out.join(name);
                fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
            print!("{table}");
        }
        Command::Render { inputs, out_dir, scale } => {
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for input in inputs {
                let grid = dataset::read_grid(&input)?;
                let stem = input.file_stem().unwrap_or(input.as_os_str());
                let out = out_dir.join(stem).with_extension("png");
                render::write_png(&out, &grid, scale)?;
                log::info!("{} -> {}", input.display(), out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SKYSPECTRA_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
