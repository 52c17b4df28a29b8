//! Unsupervised training: rollout, residual losses, Adam, truncated BPTT.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{Field, Grid};
use crate::network::{save_checkpoint, ArchOptions, Model};
use crate::pddo::DerivativeFilterSet;
use crate::physics::{graph_residual, GraphStencils, LossWeights, PdeSpec};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn default_lr0() -> f64 {
    1e-3
}
fn default_lr_final() -> f64 {
    1e-4
}
fn default_window() -> usize {
    10
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Rollout length per epoch.
    pub steps: usize,
    pub dt: f64,
    pub epochs: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_lr_final")]
    pub lr_final: f64,
    #[serde(default = "default_window")]
    pub bptt_window: usize,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub arch: ArchOptions,
}

impl TrainConfig {
    pub fn new(steps: usize, dt: f64, epochs: usize) -> Self {
        TrainConfig {
            steps,
            dt,
            epochs,
            lr0: default_lr0(),
            lr_final: default_lr_final(),
            bptt_window: default_window().min(steps),
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            clip_norm: default_clip(),
            arch: ArchOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 3 {
            return Err(Error::config(format!("steps must be at least 3, got {}", self.steps)));
        }
        if self.bptt_window < 3 || self.bptt_window > self.steps {
            return Err(Error::config(format!(
                "bptt_window must lie in [3, {}], got {}",
                self.steps, self.bptt_window
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.lr_final > 0.0 && self.lr0 >= self.lr_final && self.lr0.is_finite()) {
            return Err(Error::config(format!(
                "learning rates need lr0 >= lr_final > 0, got {} and {}",
                self.lr0, self.lr_final
            )));
        }
        let w = self.weights;
        if !(w.w_out >= 0.0 && w.w_lat >= 0.0 && w.w_out.is_finite() && w.w_lat.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("clip_norm must be non-negative"));
        }
        Ok(())
    }
}

/// `lr0 (lr_final / lr0)^(epoch / (epochs - 1))`, constant for one epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr0;
    }
    let frac = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.lr0 * (cfg.lr_final / cfg.lr0).powf(frac)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam step. `names` labels parameters in errors.
pub fn adam_update(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64, names: &[&str]) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).copied().unwrap_or("?");
        if p.len() != g.len() {
            return Err(Error::shape(format!("gradient of {name} has the wrong length")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("gradient of {name} is non-finite")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_output: f64,
    pub loss_latent: f64,
    pub loss_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

pub const LOSS_CSV_HEADER: &str = "epoch,loss_output,loss_latent,loss_total,lr";

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOSS_CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            // `{:e}` of an f64 prints the shortest representation that parses
            // back to the same bits.
            writeln!(
                s,
                "{},{:e},{:e},{:e},{:e}",
                r.epoch, r.loss_output, r.loss_latent, r.loss_total, r.lr
            )
            .unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(LOSS_CSV_HEADER) {
            return Err(Error::Format {
                what: "loss history",
                offset: 0,
                reason: format!("expected header {LOSS_CSV_HEADER}"),
            });
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |reason: String| Error::Format {
                what: "loss history",
                offset: (i + 2) as u64,
                reason,
            };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(bad(format!("expected 5 columns, got {}", cols.len())));
            }
            let num = |c: &str| c.trim().parse::<f64>().map_err(|e| bad(format!("{c:?}: {e}")));
            records.push(EpochRecord {
                epoch: cols[0].trim().parse().map_err(|e| bad(format!("{:?}: {e}", cols[0])))?,
                loss_output: num(cols[1])?,
                loss_latent: num(cols[2])?,
                loss_total: num(cols[3])?,
                lr: num(cols[4])?,
            });
        }
        Ok(LossHistory { records })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        std::fs::write(p, self.to_csv()).map_err(|e| Error::io(p, e))
    }
}

/// Derivative stencils for the physical and latent grids.
#[derive(Debug, Clone)]
pub struct LossStencils {
    pub output: GraphStencils,
    pub latent: GraphStencils,
}

impl LossStencils {
    pub fn new(grid: &Grid, half_width: usize, horizon_factor: f64) -> Result<Self> {
        let lg = Model::latent_grid(grid)?;
        Ok(LossStencils {
            output: GraphStencils::new(&*DerivativeFilterSet::cached(half_width, grid.dx(), horizon_factor)?),
            latent: GraphStencils::new(&*DerivativeFilterSet::cached(half_width, lg.dx(), horizon_factor)?),
        })
    }
}

/// Detached state handed from one BPTT window to the next.
#[derive(Debug, Clone)]
pub struct Carry {
    pub field: Tensor,
    pub prev_field: Option<Tensor>,
    pub h: Option<Tensor>,
    pub c: Option<Tensor>,
    /// Up to two most recent latent pairs, oldest first.
    pub latents: Vec<(Tensor, Tensor)>,
}

impl Carry {
    pub fn start(ic: &Field) -> Result<Self> {
        let n = ic.grid().n();
        Ok(Carry {
            field: Tensor::new(vec![n, n, ic.channels()], ic.data().to_vec())?,
            prev_field: None,
            h: None,
            c: None,
            latents: Vec::new(),
        })
    }
}

/// Losses of one window and, when requested, parameter gradients.
pub struct WindowResult {
    pub loss_output: f64,
    pub loss_latent: f64,
    pub loss_total: f64,
    pub grads: Option<Vec<Vec<f64>>>,
    pub carry: Carry,
}

fn split_uv(g: &mut Graph, field: Var) -> Result<(Var, Var)> {
    Ok((g.slice_channels(field, 0, 1)?, g.slice_channels(field, 1, 2)?))
}

/// Mean of squares over every entry of every residual tensor, as a graph
/// scalar.
fn pooled_mse(g: &mut Graph, res: &[Var]) -> Option<Var> {
    let total: usize = res.iter().map(|r| g.value(*r).len()).sum();
    let mut acc: Option<Var> = None;
    for &r in res {
        let frac = g.value(r).len() as f64 / total as f64;
        let ms = g.mean_square(r);
        let term = g.scale(ms, frac);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term).expect("scalars"),
        });
    }
    acc
}

/// Rolls `len` steps from `carry` on a fresh tape and evaluates the window
/// loss. Residuals are taken at every snapshot that has both neighbours in
/// the window or the carried history.
pub fn run_window(
    model: &Model,
    spec: &PdeSpec,
    weights: LossWeights,
    stencils: &LossStencils,
    carry: &Carry,
    len: usize,
    want_grads: bool,
) -> Result<WindowResult> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, want_grads)?;
    let mut fields = Vec::with_capacity(len + 2);
    if let Some(prev) = &carry.prev_field {
        fields.push(g.constant(prev.clone()));
    }
    let start = g.constant(carry.field.clone());
    fields.push(start);
    let mut latents: Vec<(Var, Var)> = carry
        .latents
        .iter()
        .map(|(u, v)| (g.constant(u.clone()), g.constant(v.clone())))
        .collect();
    let mut h = carry.h.clone().map(|t| g.constant(t));
    let mut c = carry.c.clone().map(|t| g.constant(t));
    let mut u = start;
    for _ in 0..len {
        let out = model.step(&mut g, &p, u, h, c)?;
        u = out.field;
        h = Some(out.h);
        c = Some(out.c);
        fields.push(u);
        latents.push((out.latent_u, out.latent_v));
    }
    let dt = model.dt();

    let mut out_res = Vec::new();
    for k in 1..fields.len() - 1 {
        let prev = split_uv(&mut g, fields[k - 1])?;
        let mid = split_uv(&mut g, fields[k])?;
        let next = split_uv(&mut g, fields[k + 1])?;
        let (ru, rv) = graph_residual(spec, &mut g, &stencils.output, prev, mid, next, dt)?;
        out_res.extend([ru, rv]);
    }
    let mut lat_res = Vec::new();
    for k in 1..latents.len().saturating_sub(1) {
        let (ru, rv) = graph_residual(spec, &mut g, &stencils.latent, latents[k - 1], latents[k], latents[k + 1], dt)?;
        lat_res.extend([ru, rv]);
    }
    let lo = pooled_mse(&mut g, &out_res).ok_or_else(|| Error::shape("window has no output residual"))?;
    let ll = pooled_mse(&mut g, &lat_res);
    let wo = g.scale(lo, weights.w_out);
    let total = match ll {
        Some(ll) if weights.w_lat != 0.0 => {
            let wl = g.scale(ll, weights.w_lat);
            g.add(wo, wl)?
        }
        _ => wo,
    };
    let loss_output = g.value(lo).item();
    let loss_latent = ll.map_or(0.0, |v| g.value(v).item());
    let loss_total = g.value(total).item();
    let grads = if want_grads && loss_total.is_finite() {
        let gr = g.backward(total)?;
        Some(
            p.vars
                .iter()
                .map(|v| {
                    gr.get_slice(*v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; g.value(*v).len()])
                })
                .collect(),
        )
    } else {
        None
    };
    let nf = fields.len();
    let nl = latents.len();
    let carry = Carry {
        field: g.value(fields[nf - 1]).clone(),
        prev_field: Some(g.value(fields[nf - 2]).clone()),
        h: h.map(|v| g.value(v).clone()),
        c: c.map(|v| g.value(v).clone()),
        latents: latents[nl.saturating_sub(2)..]
            .iter()
            .map(|(u, v)| (g.value(*u).clone(), g.value(*v).clone()))
            .collect(),
    };
    Ok(WindowResult {
        loss_output,
        loss_latent,
        loss_total,
        grads,
        carry,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Half width and horizon factor of the derivative filters.
    pub filter_half_width: Option<usize>,
    pub horizon_factor: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: LossHistory,
}

/// Trains a fresh model on one initial condition.
pub fn train(
    spec: &PdeSpec,
    cfg: &TrainConfig,
    ic: &Field,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let model = Model::init(cfg.seed, ic.grid().n(), cfg.dt, cfg.arch)?;
    train_from(model, spec, cfg, ic, opts, &mut on_epoch)
}

/// Continues training an existing model.
pub fn train_from(
    mut model: Model,
    spec: &PdeSpec,
    cfg: &TrainConfig,
    ic: &Field,
    opts: &TrainOptions,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if ic.channels() != 2 || ic.grid().n() != model.n() {
        return Err(Error::shape(format!(
            "initial condition is {0}x{0}x{1}, model expects {2}x{2}x2",
            ic.grid().n(),
            ic.channels(),
            model.n()
        )));
    }
    let stencils = LossStencils::new(
        ic.grid(),
        opts.filter_half_width.unwrap_or(crate::pddo::DEFAULT_HALF_WIDTH),
        opts.horizon_factor.unwrap_or(crate::pddo::DEFAULT_HORIZON_FACTOR),
    )?;
    let names = model.names();
    let mut adam = AdamState::new(model.params());
    let mut history = LossHistory::default();
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut carry = Carry::start(ic)?;
        let (mut so, mut sl, mut st, mut windows) = (0.0, 0.0, 0.0, 0usize);
        let mut s = 0;
        while s < cfg.steps {
            let len = cfg.bptt_window.min(cfg.steps - s);
            let good = model.clone();
            let mut w = run_window(&model, spec, cfg.weights, &stencils, &carry, len, true)?;
            if !w.loss_total.is_finite() {
                if let Some(dir) = &opts.checkpoint_dir {
                    save_checkpoint(&good, dir.join("last_good.ckpt"))?;
                }
                return Err(Error::non_finite(format!(
                    "loss became non-finite in epoch {epoch} at step {s}"
                )));
            }
            let mut grads = w.grads.take().expect("gradients requested");
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam_update(model.params_mut(), &grads, &mut adam, lr, &names)?;
            so += w.loss_output;
            sl += w.loss_latent;
            st += w.loss_total;
            windows += 1;
            carry = w.carry;
            s += len;
        }
        let k = windows as f64;
        let rec = EpochRecord {
            epoch,
            loss_output: so / k,
            loss_latent: sl / k,
            loss_total: st / k,
            lr,
        };
        history.records.push(rec);
        on_epoch(&rec);
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&model, dir.join(format!("epoch_{:05}.ckpt", epoch + 1)))?;
            }
        }
    }
    Ok(TrainOutcome { model, history })
}
