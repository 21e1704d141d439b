//! Time-conditioned U-Net noise predictor, its DDPM training loop and the
//! checkpoint container.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::NormalizationSpec;
use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{Adam, Ema, Float, ParamSet, Tape, Tensor, Var};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 12] = b"SKYSPECCKPT\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Network shape. Every size is configurable; the defaults are the full
/// 128x128 architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub rows: usize,
    pub cols: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Levels (0 = full resolution) that get self-attention after each
    /// residual block. The bottleneck always has one.
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub max_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            rows: 128,
            cols: 128,
            base_channels: 64,
            channel_mults: vec![1, 2, 2, 4],
            res_blocks: 2,
            attention_levels: vec![3],
            time_embed_dim: 256,
            max_groups: 8,
        }
    }
}

impl UNetConfig {
    /// Reduced width and depth for CPU training.
    pub fn desk() -> Self {
        UNetConfig {
            base_channels: 16,
            res_blocks: 1,
            time_embed_dim: 64,
            ..UNetConfig::default()
        }
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel_mults must be non-empty and positive".into());
        }
        if self.base_channels == 0 || self.res_blocks == 0 || self.max_groups == 0 {
            return bad("base_channels, res_blocks and max_groups must be positive".into());
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!(
                "time_embed_dim {} must be even and at least 2",
                self.time_embed_dim
            ));
        }
        let m = self.size_multiple();
        if self.rows == 0 || self.cols == 0 || !self.rows.is_multiple_of(m) || !self.cols.is_multiple_of(m) {
            return bad(format!(
                "model grid {}x{} must be a positive multiple of {m}",
                self.rows, self.cols
            ));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.channel_mults.len()) {
            return bad(format!("attention level {l} out of range"));
        }
        Ok(())
    }
}

fn groups_for(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    n1: Norm,
    c1: Affine,
    temb: Affine,
    n2: Norm,
    c2: Affine,
    skip: Option<Affine>,
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: Norm,
    qkv: Affine,
    proj: Affine,
}

#[derive(Debug, Clone)]
enum Stage {
    Res(ResBlock),
    Attn(AttnBlock),
    Down,
    Up,
}

#[derive(Debug, Clone)]
struct Layout {
    temb1: Affine,
    temb2: Affine,
    conv_in: Affine,
    down: Vec<Stage>,
    mid: (ResBlock, AttnBlock, ResBlock),
    up: Vec<Stage>,
    out_norm: Norm,
    conv_out: Affine,
}

struct Builder<'a, F: Float> {
    params: &'a mut ParamSet<F>,
    rng: ChaCha8Rng,
    max_groups: usize,
}

impl<F: Float> Builder<'_, F> {
    fn uniform(&mut self, shape: [usize; 4], bound: f64) -> Tensor<F> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| F::of(self.rng.random_range(-bound..bound))).collect();
        Tensor::from_vec(shape, data)
    }

    fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, zero: bool) -> Affine {
        let shape = [co, ci, k, k];
        let w = if zero {
            Tensor::zeros(shape)
        } else {
            self.uniform(shape, 1.0 / ((ci * k * k) as f64).sqrt())
        };
        Affine {
            w: self.params.push(format!("{name}.weight"), w),
            b: self.params.push(format!("{name}.bias"), Tensor::zeros([1, co, 1, 1])),
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Affine {
        let w = self.uniform([dout, din, 1, 1], 1.0 / (din as f64).sqrt());
        Affine {
            w: self.params.push(format!("{name}.weight"), w),
            b: self.params.push(format!("{name}.bias"), Tensor::zeros([1, dout, 1, 1])),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.params.push(
                format!("{name}.gamma"),
                Tensor::from_vec([1, c, 1, 1], vec![F::one(); c]),
            ),
            beta: self.params.push(format!("{name}.beta"), Tensor::zeros([1, c, 1, 1])),
            groups: groups_for(c, self.max_groups),
        }
    }

    fn res(&mut self, name: &str, ci: usize, co: usize, td: usize) -> ResBlock {
        ResBlock {
            n1: self.norm(&format!("{name}.norm1"), ci),
            c1: self.conv(&format!("{name}.conv1"), ci, co, 3, false),
            temb: self.linear(&format!("{name}.temb"), td, co),
            n2: self.norm(&format!("{name}.norm2"), co),
            c2: self.conv(&format!("{name}.conv2"), co, co, 3, false),
            skip: (ci != co).then(|| self.conv(&format!("{name}.skip"), ci, co, 1, false)),
        }
    }

    fn attn(&mut self, name: &str, c: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.norm"), c),
            qkv: self.conv(&format!("{name}.qkv"), c, 3 * c, 1, false),
            proj: self.conv(&format!("{name}.proj"), c, c, 1, false),
        }
    }
}

fn build<F: Float>(cfg: &UNetConfig, seed: u64) -> (ParamSet<F>, Layout) {
    let mut params = ParamSet::default();
    let mut b = Builder {
        params: &mut params,
        rng: rng::stream(seed, &[rng::tag::INIT]),
        max_groups: cfg.max_groups,
    };
    let td = cfg.time_embed_dim;
    let c0 = cfg.base_channels;
    let temb1 = b.linear("temb.0", td, td);
    let temb2 = b.linear("temb.1", td, td);
    let conv_in = b.conv("conv_in", 1, c0, 3, false);

    let levels = cfg.channel_mults.len();
    let mut chans = vec![c0];
    let mut ch = c0;
    let mut down = Vec::new();
    for (lvl, &m) in cfg.channel_mults.iter().enumerate() {
        for i in 0..cfg.res_blocks {
            down.push(Stage::Res(b.res(&format!("down.{lvl}.{i}"), ch, c0 * m, td)));
            ch = c0 * m;
            chans.push(ch);
            if cfg.attention_levels.contains(&lvl) {
                down.push(Stage::Attn(b.attn(&format!("down.{lvl}.{i}.attn"), ch)));
            }
        }
        if lvl + 1 < levels {
            down.push(Stage::Down);
            chans.push(ch);
        }
    }
    let mid = (
        b.res("mid.0", ch, ch, td),
        b.attn("mid.attn", ch),
        b.res("mid.1", ch, ch, td),
    );
    let mut up = Vec::new();
    for (lvl, &m) in cfg.channel_mults.iter().enumerate().rev() {
        for i in 0..=cfg.res_blocks {
            let skip = chans.pop().expect("skip stack matches decoder");
            up.push(Stage::Res(b.res(&format!("up.{lvl}.{i}"), ch + skip, c0 * m, td)));
            ch = c0 * m;
            if cfg.attention_levels.contains(&lvl) {
                up.push(Stage::Attn(b.attn(&format!("up.{lvl}.{i}.attn"), ch)));
            }
        }
        if lvl > 0 {
            up.push(Stage::Up);
        }
    }
    debug_assert!(chans.is_empty());
    let out_norm = b.norm("out.norm", ch);
    let conv_out = b.conv("conv_out", ch, 1, 3, true);
    let layout = Layout {
        temb1,
        temb2,
        conv_in,
        down,
        mid,
        up,
        out_norm,
        conv_out,
    };
    (params, layout)
}

/// Sinusoidal embedding of integer timesteps, `[n, dim]`.
pub fn timestep_embedding<F: Float>(ts: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
        let (s, c): (Vec<_>, Vec<_>) = freqs.map(|a| (F::of(a.sin()), F::of(a.cos()))).unzip();
        data.extend(s);
        data.extend(c);
    }
    Tensor::vector(ts.len(), dim, data)
}

/// The U-Net over a generic float type.
#[derive(Debug, Clone)]
pub struct UNet<F: Float> {
    config: UNetConfig,
    layout: Layout,
    pub params: ParamSet<F>,
}

impl<F: Float> UNet<F> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, seed);
        Ok(UNet { config, layout, params })
    }

    /// Adopts externally supplied parameters after checking names and shapes.
    pub fn from_params(config: UNetConfig, params: ParamSet<F>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if params.names != net.params.names {
            return Err(Error::ModelMismatch(
                "parameter names do not match the configured architecture".into(),
            ));
        }
        for ((name, want), got) in net.params.names.iter().zip(&net.params.tensors).zip(&params.tensors) {
            if want.shape != got.shape {
                return Err(Error::ModelMismatch(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    want.shape, got.shape
                )));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn embed(&self, tape: &mut Tape<F>, ts: &[usize]) -> Var {
        let l = &self.layout;
        let e = tape.input(timestep_embedding(ts, self.config.time_embed_dim));
        let e = affine_linear(tape, e, l.temb1);
        let e = tape.silu(e);
        affine_linear(tape, e, l.temb2)
    }

    fn graph(&self, tape: &mut Tape<F>, x: Var, emb: Var) -> Var {
        let l = &self.layout;
        let se = tape.silu(emb);
        let mut h = affine_conv(tape, x, l.conv_in);
        let mut skips = vec![h];
        for stage in &l.down {
            match stage {
                Stage::Res(r) => {
                    h = res_block(tape, h, se, r);
                    skips.push(h);
                }
                Stage::Attn(a) => {
                    h = attn_block(tape, h, a);
                    *skips.last_mut().expect("attention follows a block") = h;
                }
                Stage::Down => {
                    h = tape.avg_pool2(h);
                    skips.push(h);
                }
                Stage::Up => unreachable!(),
            }
        }
        h = res_block(tape, h, se, &l.mid.0);
        h = attn_block(tape, h, &l.mid.1);
        h = res_block(tape, h, se, &l.mid.2);
        for stage in &l.up {
            match stage {
                Stage::Res(r) => {
                    let s = skips.pop().expect("skip stack matches decoder");
                    let cat = tape.concat(h, s);
                    h = res_block(tape, cat, se, r);
                }
                Stage::Attn(a) => h = attn_block(tape, h, a),
                Stage::Up => h = tape.upsample2(h),
                Stage::Down => unreachable!(),
            }
        }
        let n = norm(tape, h, l.out_norm);
        let n = tape.silu(n);
        affine_conv(tape, n, l.conv_out)
    }

    fn check_input(&self, x: &Tensor<F>, ts: &[usize]) -> Result<()> {
        let m = self.config.size_multiple();
        let [n, c, h, w] = x.shape;
        if c != 1 || n != ts.len() || n == 0 || h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Domain(format!(
                "network input {:?} with {} timesteps; need [n,1,h,w] with h,w multiples of {m}",
                x.shape,
                ts.len()
            )));
        }
        Ok(())
    }

    /// Predicted noise for a batch `[n, 1, h, w]`.
    pub fn predict(&self, x: Tensor<F>, ts: &[usize]) -> Result<Tensor<F>> {
        self.check_input(&x, ts)?;
        let mut tape = Tape::new(&self.params);
        let emb = self.embed(&mut tape, ts);
        let xv = tape.input(x);
        let out = self.graph(&mut tape, xv, emb);
        Ok(tape.value(out).clone())
    }

    /// Mean squared noise-prediction error and its parameter gradients.
    pub fn loss_and_grads(&self, x_t: Tensor<F>, ts: &[usize], eps: Tensor<F>) -> Result<(F, Vec<Tensor<F>>)> {
        self.check_input(&x_t, ts)?;
        let mut tape = Tape::new(&self.params);
        let emb = self.embed(&mut tape, ts);
        let xv = tape.input(x_t);
        let out = self.graph(&mut tape, xv, emb);
        let loss = tape.mse(out, eps);
        let value = tape.value(loss).data[0];
        Ok((value, tape.backward(loss)))
    }
}

fn affine_conv<F: Float>(tape: &mut Tape<F>, x: Var, a: Affine) -> Var {
    let (w, b) = (tape.param(a.w), tape.param(a.b));
    tape.conv(x, w, b)
}

fn affine_linear<F: Float>(tape: &mut Tape<F>, x: Var, a: Affine) -> Var {
    let (w, b) = (tape.param(a.w), tape.param(a.b));
    tape.linear(x, w, b)
}

fn norm<F: Float>(tape: &mut Tape<F>, x: Var, n: Norm) -> Var {
    let (g, b) = (tape.param(n.gamma), tape.param(n.beta));
    tape.group_norm(x, g, b, n.groups)
}

fn res_block<F: Float>(tape: &mut Tape<F>, x: Var, se: Var, r: &ResBlock) -> Var {
    let h = norm(tape, x, r.n1);
    let h = tape.silu(h);
    let h = affine_conv(tape, h, r.c1);
    let t = affine_linear(tape, se, r.temb);
    let h = tape.add_channel(h, t);
    let h = norm(tape, h, r.n2);
    let h = tape.silu(h);
    let h = affine_conv(tape, h, r.c2);
    let skip = match r.skip {
        Some(s) => affine_conv(tape, x, s),
        None => x,
    };
    tape.add(h, skip)
}

fn attn_block<F: Float>(tape: &mut Tape<F>, x: Var, a: &AttnBlock) -> Var {
    let h = norm(tape, x, a.norm);
    let qkv = affine_conv(tape, h, a.qkv);
    let o = tape.attention(qkv);
    let o = affine_conv(tape, o, a.proj);
    tape.add(x, o)
}

/// A trained noise predictor together with the schedule and normalization it
/// was trained under.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub net: UNet<f32>,
    pub schedule_hash: String,
    pub schedule_steps: usize,
    pub normalization: NormalizationSpec,
    pub train_step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: UNetConfig,
    schedule_hash: String,
    schedule_steps: usize,
    normalization: NormalizationSpec,
    train_step: u64,
    tensors: Vec<TensorEntry>,
}

impl DenoiserModel {
    pub fn new(
        config: UNetConfig,
        schedule: &NoiseSchedule,
        normalization: NormalizationSpec,
        seed: u64,
    ) -> Result<Self> {
        Ok(DenoiserModel {
            net: UNet::new(config, seed)?,
            schedule_hash: schedule.hash(),
            schedule_steps: schedule.steps(),
            normalization,
            train_step: 0,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        self.net.config()
    }

    /// Refuses a schedule or normalization other than the training one.
    pub fn ensure_compatible(&self, schedule: &NoiseSchedule, normalization: &NormalizationSpec) -> Result<()> {
        if schedule.hash() != self.schedule_hash {
            return Err(Error::ModelMismatch(format!(
                "model was trained with schedule {}, asked to run with {}",
                self.schedule_hash,
                schedule.hash()
            )));
        }
        if *normalization != self.normalization {
            return Err(Error::ModelMismatch(format!(
                "model normalization [{}, {}] dBm differs from [{}, {}] dBm",
                self.normalization.min_dbm, self.normalization.max_dbm, normalization.min_dbm, normalization.max_dbm
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            config: self.config().clone(),
            schedule_hash: self.schedule_hash.clone(),
            schedule_steps: self.schedule_steps,
            normalization: self.normalization,
            train_step: self.train_step,
            tensors: self
                .net
                .params
                .names
                .iter()
                .zip(&self.net.params.tensors)
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(24 + json.len() + 4 * self.net.params.scalar_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.net.params.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::format(path, reason);
        if bytes.len() < 24 || &bytes[..12] != CHECKPOINT_MAGIC {
            return Err(fail("not a model checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let body = &bytes[24..];
        if body.len() < hlen {
            return Err(fail("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| fail(format!("bad header: {e}")))?;
        let mut data = &body[hlen..];
        let mut params = ParamSet::default();
        for entry in header.tensors {
            let len: usize = entry.shape.iter().product();
            if data.len() < 4 * len {
                return Err(fail(format!("truncated tensor {}", entry.name)));
            }
            let (raw, rest) = data.split_at(4 * len);
            data = rest;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(entry.name, Tensor::from_vec(entry.shape, values));
        }
        if !data.is_empty() {
            return Err(fail(format!("{} trailing bytes", data.len())));
        }
        header.normalization.validate()?;
        Ok(DenoiserModel {
            net: UNet::from_params(header.config, params)?,
            schedule_hash: header.schedule_hash,
            schedule_steps: header.schedule_steps,
            normalization: header.normalization,
            train_step: header.train_step,
        })
    }

    /// Writes via a temporary sibling and rename so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, x_t: &Grid<f32>, t: usize) -> Result<Grid<f32>> {
        let cfg = self.config();
        x_t.ensure_dims(cfg.rows, cfg.cols)?;
        if t == 0 || t > self.schedule_steps {
            return Err(Error::Domain(format!(
                "timestep {t} outside 1..={}",
                self.schedule_steps
            )));
        }
        let x = Tensor::from_vec([1, 1, cfg.rows, cfg.cols], x_t.as_slice().to_vec());
        let out = self.net.predict(x, &[t])?;
        Grid::from_vec(cfg.rows, cfg.cols, out.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Parameter EMA; the EMA weights are what gets saved.
    pub ema_decay: Option<f64>,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Train on random square crops of this side instead of full maps.
    pub crop: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 30_000,
            batch: 16,
            lr: 2e-4,
            ema_decay: None,
            seed: 0,
            checkpoint_every: 0,
            crop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &UNetConfig) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("ema_decay {d} must lie in [0, 1)")));
            }
        }
        if let Some(c) = self.crop {
            let m = model.size_multiple();
            if c == 0 || c % m != 0 || c > model.rows || c > model.cols {
                return Err(Error::Config(format!(
                    "crop {c} must be a positive multiple of {m} within {}x{}",
                    model.rows, model.cols
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    /// Per-step training loss.
    pub losses: Vec<f32>,
}

/// Draws the training batch for `step`: crops, timesteps and noise all come
/// from one sub-stream so a run is reproducible from its seed alone.
fn sample_batch(
    corpus: &[Grid<f32>],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rows: usize,
    cols: usize,
    step: usize,
) -> (Tensor<f32>, Vec<usize>, Tensor<f32>) {
    let mut r = rng::stream(cfg.seed, &[rng::tag::BATCH, step as u64]);
    let (h, w) = cfg.crop.map_or((rows, cols), |c| (c, c));
    let mut xt = Vec::with_capacity(cfg.batch * h * w);
    let mut eps = Vec::with_capacity(cfg.batch * h * w);
    let mut ts = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let map = &corpus[r.random_range(0..corpus.len())];
        let r0 = r.random_range(0..=rows - h);
        let c0 = r.random_range(0..=cols - w);
        let t = r.random_range(1..=schedule.steps());
        let ab = schedule.alpha_bar(t);
        let (a, s) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        for i in 0..h {
            for j in 0..w {
                let e: f32 = StandardNormal.sample(&mut r);
                xt.push(a * map.get(r0 + i, c0 + j) + s * e);
                eps.push(e);
            }
        }
        ts.push(t);
    }
    let shape = [cfg.batch, 1, h, w];
    (Tensor::from_vec(shape, xt), ts, Tensor::from_vec(shape, eps))
}

/// DDPM noise-prediction training on clean unit maps.
///
/// `on_checkpoint` receives the model every `checkpoint_every` steps and
/// after the final step.
pub fn train(
    corpus: &[Grid<f32>],
    schedule: &NoiseSchedule,
    model_cfg: &UNetConfig,
    cfg: &TrainConfig,
    normalization: &NormalizationSpec,
    mut on_checkpoint: impl FnMut(&DenoiserModel) -> Result<()>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate(model_cfg)?;
    if corpus.is_empty() {
        return Err(Error::Training("training corpus is empty".into()));
    }
    for g in corpus {
        g.ensure_dims(model_cfg.rows, model_cfg.cols)?;
    }
    let mut model = DenoiserModel::new(model_cfg.clone(), schedule, *normalization, cfg.seed)?;
    let mut opt = Adam::new(&model.net.params, cfg.lr);
    let mut ema = cfg.ema_decay.map(|d| Ema::new(&model.net.params, d));
    let mut losses = Vec::with_capacity(cfg.steps);

    let snapshot = |model: &DenoiserModel, ema: &Option<Ema<f32>>, step: usize| {
        let mut m = model.clone();
        if let Some(e) = ema {
            m.net.params = e.shadow.clone();
        }
        m.train_step = step as u64;
        m
    };

    for step in 0..cfg.steps {
        let (xt, ts, eps) = sample_batch(corpus, schedule, cfg, model_cfg.rows, model_cfg.cols, step);
        let (loss, grads) = model.net.loss_and_grads(xt, &ts, eps)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "loss became {loss} at step {step} (timesteps {ts:?}); lower the learning rate"
            )));
        }
        opt.update(&mut model.net.params, &grads);
        if let Some(e) = ema.as_mut() {
            e.update(&model.net.params);
        }
        losses.push(loss);
        if (step + 1) % 100 == 0 {
            let recent = &losses[losses.len().saturating_sub(100)..];
            log::info!(
                "step {} loss {:.5}",
                step + 1,
                recent.iter().sum::<f32>() / recent.len() as f32
            );
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            on_checkpoint(&snapshot(&model, &ema, step + 1))?;
        }
    }
    let model = snapshot(&model, &ema, cfg.steps);
    on_checkpoint(&model)?;
    Ok(TrainOutcome { model, losses })
}

/// Writes `step,loss` lines.
pub fn write_loss_trace(path: &Path, losses: &[f32]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, l));
    }
    write_atomic(path, text.as_bytes())
}
