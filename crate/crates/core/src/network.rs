//! Encoder, periodic ConvLSTM and decoder, composed into a forward-Euler
//! integrator `u_next = u_prev + dt * decode(lstm(encode(u_prev)))`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::binio::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::field::{Field, FieldSequence, Grid};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PDCKP1";

/// Channels per encoder stage and per decoder conv.
pub const ENCODER_CHANNELS: [usize; 3] = [8, 32, 64];
pub const DECODER_CHANNELS: [usize; 3] = [64, 32, 8];
pub const LATENT_CHANNELS: usize = 64;
/// Spatial reduction of the encoder.
pub const DOWNSAMPLE: usize = 8;

const ALPHA_MIN_ABS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchOptions {
    /// Adds a bias to the output gate.
    pub output_gate_bias: bool,
    /// Drops the tanh after the last decoder conv so the rate is unbounded.
    pub final_linear: bool,
}

// Parameter slots. The optional output-gate bias, when present, comes last.
const E_W: [usize; 3] = [0, 2, 4];
const E_B: [usize; 3] = [1, 3, 5];
const W_X: [usize; 4] = [6, 8, 10, 12]; // i, f, c, o
const W_H: [usize; 4] = [7, 9, 11, 13];
const W_CI: usize = 14;
const W_CF: usize = 15;
const B_I: usize = 16;
const B_F: usize = 17;
const B_C: usize = 18;
const ALPHA: usize = 19;
const D_W: [usize; 3] = [20, 22, 24];
const D_B: [usize; 3] = [21, 23, 25];
const B_O: usize = 26;

const BASE_NAMES: [&str; 26] = [
    "encoder.conv0.weight",
    "encoder.conv0.bias",
    "encoder.conv1.weight",
    "encoder.conv1.bias",
    "encoder.conv2.weight",
    "encoder.conv2.bias",
    "lstm.w_xi",
    "lstm.w_hi",
    "lstm.w_xf",
    "lstm.w_hf",
    "lstm.w_xc",
    "lstm.w_hc",
    "lstm.w_xo",
    "lstm.w_ho",
    "lstm.w_ci",
    "lstm.w_cf",
    "lstm.b_i",
    "lstm.b_f",
    "lstm.b_c",
    "lstm.alpha",
    "decoder.conv0.weight",
    "decoder.conv0.bias",
    "decoder.conv1.weight",
    "decoder.conv1.bias",
    "decoder.conv2.weight",
    "decoder.conv2.bias",
];

/// Trainable parameters plus the integration step and grid size they were
/// built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    n: usize,
    dt: f64,
    arch: ArchOptions,
    params: Vec<Tensor>,
}

fn param_shapes(n: usize, arch: ArchOptions) -> Vec<Vec<usize>> {
    let s = n / DOWNSAMPLE;
    let l = LATENT_CHANNELS;
    let mut shapes = Vec::new();
    let mut cin = 2;
    for cout in ENCODER_CHANNELS {
        shapes.push(vec![4, 4, cin, cout]);
        shapes.push(vec![cout]);
        cin = cout;
    }
    for _ in 0..8 {
        shapes.push(vec![3, 3, l, l]);
    }
    shapes.push(vec![s, s, l]);
    shapes.push(vec![s, s, l]);
    for _ in 0..3 {
        shapes.push(vec![l]);
    }
    shapes.push(vec![]);
    let mut cin = l;
    for cout in DECODER_CHANNELS {
        shapes.push(vec![3, 3, cin, cout]);
        shapes.push(vec![cout]);
        cin = cout / 4;
    }
    if arch.output_gate_bias {
        shapes.push(vec![l]);
    }
    shapes
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let (k2, cin, cout) = (shape[0] * shape[1], shape[2], shape[3]);
    let bound = (6.0 / (k2 * cin + k2 * cout) as f64).sqrt();
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-bound..=bound)).collect()).unwrap()
}

fn check_grid_side(n: usize) -> Result<()> {
    if n == 0 || n % DOWNSAMPLE != 0 {
        return Err(Error::config(format!("grid side {n} must be a positive multiple of {DOWNSAMPLE}")));
    }
    Ok(())
}

/// Graph handles for one binding of the model parameters, with the LSTM
/// kernels fused per input so each step runs two convolutions.
pub struct Bound {
    pub vars: Vec<Var>,
    fused_x: Var,
    fused_h: Var,
    fused_bias: Var,
}

/// Intermediate encoder activations.
pub struct Encoded {
    pub layers: [Var; 3],
    pub latent: Var,
    pub latent_u: Var,
    pub latent_v: Var,
}

pub struct Decoded {
    pub layers: [Var; 3],
    pub rate: Var,
}

pub struct LstmOut {
    pub h: Var,
    pub c: Var,
    pub gates: [Var; 3],
}

pub struct StepOut {
    pub field: Var,
    pub h: Var,
    pub c: Var,
    pub latent_u: Var,
    pub latent_v: Var,
}

/// Result of an autoregressive rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Initial condition followed by every predicted state.
    pub fields: FieldSequence,
    /// Encoder latents of each step's input.
    pub latent_u: Vec<Tensor>,
    pub latent_v: Vec<Tensor>,
}

impl Model {
    /// Glorot-uniform conv weights, zero biases and peepholes, and
    /// `alpha ~ U(-2pi, 2pi)` with `|alpha| >= 0.1`.
    pub fn init(seed: u64, n: usize, dt: f64, arch: ArchOptions) -> Result<Model> {
        check_grid_side(n)?;
        if !(dt.is_finite() && dt >= 0.0) {
            return Err(Error::config(format!("dt must be finite and non-negative, got {dt}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_shapes(n, arch)
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                if shape.len() == 4 {
                    glorot(&mut rng, shape)
                } else if i == ALPHA {
                    let tau = 2.0 * std::f64::consts::PI;
                    loop {
                        let a: f64 = rng.random_range(-tau..=tau);
                        if a.abs() >= ALPHA_MIN_ABS {
                            break Tensor::scalar(a);
                        }
                    }
                } else {
                    Tensor::zeros(shape)
                }
            })
            .collect();
        Ok(Model { n, dt, arch, params })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn arch(&self) -> ArchOptions {
        self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn alpha(&self) -> f64 {
        self.params[ALPHA].item()
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = BASE_NAMES.to_vec();
        if self.arch.output_gate_bias {
            v.push("lstm.b_o");
        }
        v
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names().iter().position(|n| *n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names().iter().position(|n| *n == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Adds the parameters to `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let l = LATENT_CHANNELS;
        let fuse = |g: &mut Graph, idx: [usize; 4]| -> Result<Var> {
            let parts = idx
                .iter()
                .map(|&i| g.reshape(vars[i], &[9, l, l]))
                .collect::<Result<Vec<_>>>()?;
            let cat = g.concat_channels(&parts)?;
            g.reshape(cat, &[3, 3, l, 4 * l])
        };
        let fused_x = fuse(g, W_X)?;
        let fused_h = fuse(g, W_H)?;
        let bo = if self.arch.output_gate_bias {
            vars[B_O]
        } else {
            g.constant(Tensor::zeros(&[l]))
        };
        let parts = [vars[B_I], vars[B_F], vars[B_C], bo]
            .iter()
            .map(|&b| g.reshape(b, &[1, 1, l]))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_channels(&parts)?;
        let fused_bias = g.reshape(cat, &[4 * l])?;
        Ok(Bound {
            vars,
            fused_x,
            fused_h,
            fused_bias,
        })
    }

    fn expect_shape(g: &Graph, v: Var, want: &[usize], stage: &str) -> Result<()> {
        if g.shape(v) != want {
            return Err(Error::shape(format!("{stage}: expected {want:?}, got {:?}", g.shape(v))));
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, field: Var) -> Result<Encoded> {
        let n = self.n;
        Self::expect_shape(g, field, &[n, n, 2], "encoder input")?;
        let mut x = field;
        let mut layers = [field; 3];
        let mut side = n;
        for (i, cout) in ENCODER_CHANNELS.into_iter().enumerate() {
            let y = g.conv2d(x, p.vars[E_W[i]], Some(p.vars[E_B[i]]), 2, 1)?;
            x = g.tanh(y);
            side /= 2;
            Self::expect_shape(g, x, &[side, side, cout], "encoder")?;
            layers[i] = x;
        }
        let half = LATENT_CHANNELS / 2;
        let latent_u = g.slice_channels(x, 0, half)?;
        let latent_v = g.slice_channels(x, half, LATENT_CHANNELS)?;
        Ok(Encoded {
            layers,
            latent: x,
            latent_u,
            latent_v,
        })
    }

    /// One ConvLSTM update; `None` states stand for zeros.
    pub fn lstm_step(&self, g: &mut Graph, p: &Bound, x: Var, h: Option<Var>, c: Option<Var>) -> Result<LstmOut> {
        let s = self.n / DOWNSAMPLE;
        let l = LATENT_CHANNELS;
        let shape = [s, s, l];
        Self::expect_shape(g, x, &shape, "lstm input")?;
        for v in [h, c].into_iter().flatten() {
            Self::expect_shape(g, v, &shape, "lstm state")?;
        }
        let mut pre = g.conv2d(x, p.fused_x, Some(p.fused_bias), 1, 1)?;
        if let Some(h) = h {
            let ph = g.conv2d(h, p.fused_h, None, 1, 1)?;
            pre = g.add(pre, ph)?;
        }
        let mut zi = g.slice_channels(pre, 0, l)?;
        let mut zf = g.slice_channels(pre, l, 2 * l)?;
        let zc = g.slice_channels(pre, 2 * l, 3 * l)?;
        let zo = g.slice_channels(pre, 3 * l, 4 * l)?;
        if let Some(c) = c {
            let pi = g.mul(p.vars[W_CI], c)?;
            zi = g.add(zi, pi)?;
            let pf = g.mul(p.vars[W_CF], c)?;
            zf = g.add(zf, pf)?;
        }
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let o = g.sigmoid(zo);
        let cand = g.periodic_xi(zc, p.vars[ALPHA])?;
        let mut c_new = g.mul(i, cand)?;
        if let Some(c) = c {
            let fc = g.mul(f, c)?;
            c_new = g.add(fc, c_new)?;
        }
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        Ok(LstmOut {
            h: h_new,
            c: c_new,
            gates: [i, f, o],
        })
    }

    pub fn decode(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Decoded> {
        let mut side = self.n / DOWNSAMPLE;
        Self::expect_shape(g, h, &[side, side, LATENT_CHANNELS], "decoder input")?;
        let mut x = h;
        let mut layers = [h; 3];
        for (i, cout) in DECODER_CHANNELS.into_iter().enumerate() {
            let y = g.conv2d(x, p.vars[D_W[i]], Some(p.vars[D_B[i]]), 1, 1)?;
            let y = if i == 2 && self.arch.final_linear { y } else { g.tanh(y) };
            x = g.pixel_shuffle(y, 2)?;
            side *= 2;
            Self::expect_shape(g, x, &[side, side, cout / 4], "decoder")?;
            layers[i] = x;
        }
        Ok(Decoded { layers, rate: x })
    }

    pub fn step(&self, g: &mut Graph, p: &Bound, u_prev: Var, h: Option<Var>, c: Option<Var>) -> Result<StepOut> {
        let enc = self.encode(g, p, u_prev)?;
        let st = self.lstm_step(g, p, enc.latent, h, c)?;
        let dec = self.decode(g, p, st.h)?;
        let du = g.scale(dec.rate, self.dt);
        let field = g.add(u_prev, du)?;
        Ok(StepOut {
            field,
            h: st.h,
            c: st.c,
            latent_u: enc.latent_u,
            latent_v: enc.latent_v,
        })
    }

    fn check_ic(&self, ic: &Field) -> Result<()> {
        if ic.grid().n() != self.n || ic.channels() != 2 {
            return Err(Error::shape(format!(
                "model expects a {0}x{0}x2 field, got {1}x{1}x{2}",
                self.n,
                ic.grid().n(),
                ic.channels()
            )));
        }
        Ok(())
    }

    /// Autoregressive rollout with frozen parameters from zero LSTM state.
    pub fn rollout(&self, ic: &Field, steps: usize) -> Result<Rollout> {
        self.check_ic(ic)?;
        let grid = *ic.grid();
        let n = self.n;
        let mut fields = vec![ic.clone()];
        let (mut latent_u, mut latent_v) = (Vec::new(), Vec::new());
        let mut u = Tensor::new(vec![n, n, 2], ic.data().to_vec())?;
        let mut state: Option<(Tensor, Tensor)> = None;
        for k in 0..steps {
            let mut g = Graph::new();
            let p = self.bind(&mut g, false)?;
            let uv = g.constant(u);
            let (h, c) = match state.take() {
                Some((h, c)) => (Some(g.constant(h)), Some(g.constant(c))),
                None => (None, None),
            };
            let out = self.step(&mut g, &p, uv, h, c)?;
            let next = g.value(out.field);
            if !next.all_finite() {
                return Err(Error::non_finite(format!("rollout state became non-finite at step {}", k + 1)));
            }
            latent_u.push(g.value(out.latent_u).clone());
            latent_v.push(g.value(out.latent_v).clone());
            u = next.clone();
            fields.push(Field::from_data(grid, 2, u.data().to_vec(), 0.0)?);
            state = Some((g.value(out.h).clone(), g.value(out.c).clone()));
        }
        Ok(Rollout {
            fields: FieldSequence::new(ic.t, self.dt, fields)?,
            latent_u,
            latent_v,
        })
    }

    /// Grid of the latent tensors for a physical grid.
    pub fn latent_grid(grid: &Grid) -> Result<Grid> {
        grid.coarsen(DOWNSAMPLE)
    }
}

const META_DT: &str = "meta.dt";
const META_N: &str = "meta.n";
const META_FINAL_LINEAR: &str = "meta.final_linear";

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let names = model.names();
    let meta = [
        (META_DT, model.dt),
        (META_N, model.n as f64),
        (META_FINAL_LINEAR, if model.arch.final_linear { 1.0 } else { 0.0 }),
    ];
    let mut w = ByteWriter::with_capacity(16 + 8 * model.num_scalars());
    w.bytes(CHECKPOINT_MAGIC);
    w.u32((names.len() + meta.len()) as u32);
    let mut put = |name: &str, t: &Tensor| {
        w.u16(name.len() as u16);
        w.bytes(name.as_bytes());
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.f64s(t.data());
    };
    for (name, t) in names.iter().zip(&model.params) {
        put(name, t);
    }
    for (name, v) in meta {
        put(name, &Tensor::scalar(v));
    }
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new("checkpoint", bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.u32()? as usize;
    let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let at = r.offset();
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format {
            what: "checkpoint",
            offset: at,
            reason: "tensor name is not UTF-8".into(),
        })?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.f64s(len)?;
        entries.push((name, Tensor::new(shape, data)?));
    }
    r.expect_end()?;

    fn take(entries: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
        let i = entries.iter().position(|(n, _)| n == name).ok_or_else(|| Error::Format {
            what: "checkpoint",
            offset: 0,
            reason: format!("missing tensor {name}"),
        })?;
        Ok(entries.remove(i).1)
    }
    let meta_scalar = |t: Tensor, name: &str| -> Result<f64> {
        if t.len() != 1 {
            return Err(Error::Format {
                what: "checkpoint",
                offset: 0,
                reason: format!("{name} must be a scalar"),
            });
        }
        Ok(t.item())
    };
    let dt = meta_scalar(take(&mut entries, META_DT)?, META_DT)?;
    let n_raw = meta_scalar(take(&mut entries, META_N)?, META_N)?;
    let final_linear = meta_scalar(take(&mut entries, META_FINAL_LINEAR)?, META_FINAL_LINEAR)? != 0.0;
    if n_raw.fract() != 0.0 || n_raw < 1.0 {
        return Err(Error::Format {
            what: "checkpoint",
            offset: 0,
            reason: format!("meta.n must be a positive integer, got {n_raw}"),
        });
    }
    let n = n_raw as usize;
    check_grid_side(n)?;
    let has_bo = entries.iter().any(|(name, _)| name == "lstm.b_o");
    let arch = ArchOptions {
        output_gate_bias: has_bo,
        final_linear,
    };
    let shapes = param_shapes(n, arch);
    let mut names = BASE_NAMES.to_vec();
    if has_bo {
        names.push("lstm.b_o");
    }
    let mut params = Vec::with_capacity(names.len());
    for (name, shape) in names.iter().zip(&shapes) {
        let t = take(&mut entries, name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "checkpoint tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::non_finite(format!("checkpoint tensor {name} has non-finite values")));
        }
        params.push(t);
    }
    if let Some((name, _)) = entries.first() {
        return Err(Error::Format {
            what: "checkpoint",
            offset: 0,
            reason: format!("unexpected tensor {name}"),
        });
    }
    Ok(Model { n, dt, arch, params })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    binio::write_file(path.as_ref(), &encode_checkpoint(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&binio::read_file(path.as_ref())?)
}
