//! Governing equations, PDE residuals and initial conditions.
//!
//! The right-hand side of each PDE is written once against [`FieldAlgebra`]
//! and evaluated either eagerly on plain arrays or symbolically on an
//! autodiff [`Graph`], so the reference solver, the output residual and the
//! latent residual all share the same operator.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{Field, FieldSequence, Grid};
use crate::pddo::{check_spacing, correlate_periodic, temporal_derivative, DerivativeFilterSet, Order};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaOmegaForm {
    /// `lambda = 1 - r^2`, `omega = -r^2` with `r = u^2 + v^2`.
    #[default]
    Literal,
    /// `lambda = 1 - A^2`, `omega = -beta A^2` with `A^2 = u^2 + v^2`.
    Literature,
}

fn default_true() -> bool {
    true
}

fn default_lo_diffusion() -> f64 {
    0.1
}

fn default_beta() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PdeSpec {
    Burgers {
        nu: f64,
        /// Switching advection off leaves the heat equation.
        #[serde(default = "default_true")]
        advection: bool,
    },
    LambdaOmega {
        #[serde(default = "default_lo_diffusion")]
        diffusion: f64,
        #[serde(default)]
        form: LambdaOmegaForm,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    GrayScott {
        eps1: f64,
        eps2: f64,
        b: f64,
        d: f64,
    },
}

impl PdeSpec {
    pub fn burgers(nu: f64) -> Self {
        PdeSpec::Burgers { nu, advection: true }
    }

    pub fn heat(nu: f64) -> Self {
        PdeSpec::Burgers { nu, advection: false }
    }

    pub fn lambda_omega() -> Self {
        PdeSpec::LambdaOmega {
            diffusion: default_lo_diffusion(),
            form: LambdaOmegaForm::Literal,
            beta: default_beta(),
        }
    }

    pub fn gray_scott(eps1: f64, eps2: f64, b: f64, d: f64) -> Self {
        PdeSpec::GrayScott { eps1, eps2, b, d }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PdeSpec::Burgers { .. } => "burgers",
            PdeSpec::LambdaOmega { .. } => "lambda_omega",
            PdeSpec::GrayScott { .. } => "gray_scott",
        }
    }

    fn coefficients(&self) -> Vec<(&'static str, f64)> {
        match *self {
            PdeSpec::Burgers { nu, .. } => vec![("nu", nu)],
            PdeSpec::LambdaOmega { diffusion, beta, .. } => vec![("diffusion", diffusion), ("beta", beta)],
            PdeSpec::GrayScott { eps1, eps2, b, d } => vec![("eps1", eps1), ("eps2", eps2), ("b", b), ("d", d)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.coefficients() {
            if !v.is_finite() {
                return Err(Error::config(format!("{} coefficient {name} is not finite", self.name())));
            }
        }
        for (name, v) in self.diffusivities() {
            if v < 0.0 {
                return Err(Error::config(format!("{} diffusivity {name} is negative: {v}", self.name())));
            }
        }
        Ok(())
    }

    fn diffusivities(&self) -> Vec<(&'static str, f64)> {
        match *self {
            PdeSpec::Burgers { nu, .. } => vec![("nu", nu)],
            PdeSpec::LambdaOmega { diffusion, .. } => vec![("diffusion", diffusion)],
            PdeSpec::GrayScott { eps1, eps2, .. } => vec![("eps1", eps1), ("eps2", eps2)],
        }
    }

    pub fn max_diffusivity(&self) -> f64 {
        self.diffusivities().iter().map(|d| d.1).fold(0.0, f64::max)
    }
}

/// Spatial stencils the operators need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    Dx,
    Dy,
    Laplacian,
}

/// Minimal arithmetic over same-shaped fields.
pub trait FieldAlgebra {
    type F: Clone;
    fn add(&mut self, a: &Self::F, b: &Self::F) -> Self::F;
    fn sub(&mut self, a: &Self::F, b: &Self::F) -> Self::F;
    fn mul(&mut self, a: &Self::F, b: &Self::F) -> Self::F;
    fn scale(&mut self, a: &Self::F, s: f64) -> Self::F;
    fn add_const(&mut self, a: &Self::F, c: f64) -> Self::F;
    fn stencil(&mut self, a: &Self::F, s: Stencil) -> Self::F;
}

/// Time derivative `(u_t, v_t)` implied by the PDE.
pub fn rhs<A: FieldAlgebra>(spec: &PdeSpec, alg: &mut A, u: &A::F, v: &A::F) -> (A::F, A::F) {
    match *spec {
        PdeSpec::Burgers { nu, advection } => {
            let lu = alg.stencil(u, Stencil::Laplacian);
            let lv = alg.stencil(v, Stencil::Laplacian);
            let mut fu = alg.scale(&lu, nu);
            let mut fv = alg.scale(&lv, nu);
            if advection {
                let ux = alg.stencil(u, Stencil::Dx);
                let uy = alg.stencil(u, Stencil::Dy);
                let vx = alg.stencil(v, Stencil::Dx);
                let vy = alg.stencil(v, Stencil::Dy);
                let a = alg.mul(u, &ux);
                let b = alg.mul(v, &uy);
                let adv_u = alg.add(&a, &b);
                let a = alg.mul(u, &vx);
                let b = alg.mul(v, &vy);
                let adv_v = alg.add(&a, &b);
                fu = alg.sub(&fu, &adv_u);
                fv = alg.sub(&fv, &adv_v);
            }
            (fu, fv)
        }
        PdeSpec::LambdaOmega { diffusion, form, beta } => {
            let uu = alg.mul(u, u);
            let vv = alg.mul(v, v);
            let r = alg.add(&uu, &vv);
            let (lambda, omega) = match form {
                LambdaOmegaForm::Literal => {
                    let r2 = alg.mul(&r, &r);
                    let neg = alg.scale(&r2, -1.0);
                    (alg.add_const(&neg, 1.0), neg)
                }
                LambdaOmegaForm::Literature => {
                    let neg = alg.scale(&r, -1.0);
                    (alg.add_const(&neg, 1.0), alg.scale(&r, -beta))
                }
            };
            let lu = alg.stencil(u, Stencil::Laplacian);
            let lv = alg.stencil(v, Stencil::Laplacian);
            let du = alg.scale(&lu, diffusion);
            let dv = alg.scale(&lv, diffusion);
            let lam_u = alg.mul(&lambda, u);
            let om_v = alg.mul(&omega, v);
            let om_u = alg.mul(&omega, u);
            let lam_v = alg.mul(&lambda, v);
            let a = alg.add(&du, &lam_u);
            let fu = alg.sub(&a, &om_v);
            let b = alg.add(&dv, &om_u);
            let fv = alg.add(&b, &lam_v);
            (fu, fv)
        }
        PdeSpec::GrayScott { eps1, eps2, b, d } => {
            let vv = alg.mul(v, v);
            let uvv = alg.mul(u, &vv);
            let lu = alg.stencil(u, Stencil::Laplacian);
            let lv = alg.stencil(v, Stencil::Laplacian);
            let du = alg.scale(&lu, eps1);
            let dv = alg.scale(&lv, eps2);
            // b (1 - u) = -b u + b
            let nbu = alg.scale(u, -b);
            let feed = alg.add_const(&nbu, b);
            let a = alg.add(&du, &feed);
            let fu = alg.sub(&a, &uvv);
            let kill = alg.scale(v, -d);
            let c = alg.add(&dv, &kill);
            let fv = alg.add(&c, &uvv);
            (fu, fv)
        }
    }
}

fn laplacian_kernel(f: &DerivativeFilterSet) -> Vec<f64> {
    f.kernel(Order::D20).iter().zip(f.kernel(Order::D02)).map(|(a, b)| a + b).collect()
}

/// Eager evaluation on `n x n x channels` arrays.
pub struct Eager<'a> {
    n: usize,
    channels: usize,
    filters: &'a DerivativeFilterSet,
    laplacian: Vec<f64>,
}

impl<'a> Eager<'a> {
    pub fn new(n: usize, channels: usize, filters: &'a DerivativeFilterSet) -> Self {
        Eager {
            n,
            channels,
            filters,
            laplacian: laplacian_kernel(filters),
        }
    }
}

impl FieldAlgebra for Eager<'_> {
    type F = Vec<f64>;

    fn add(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    fn sub(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    fn mul(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x * y).collect()
    }

    fn scale(&mut self, a: &Vec<f64>, s: f64) -> Vec<f64> {
        a.iter().map(|x| x * s).collect()
    }

    fn add_const(&mut self, a: &Vec<f64>, c: f64) -> Vec<f64> {
        a.iter().map(|x| x + c).collect()
    }

    fn stencil(&mut self, a: &Vec<f64>, s: Stencil) -> Vec<f64> {
        let k = match s {
            Stencil::Dx => self.filters.kernel(Order::D10),
            Stencil::Dy => self.filters.kernel(Order::D01),
            Stencil::Laplacian => &self.laplacian,
        };
        correlate_periodic(a, self.n, self.channels, k, self.filters.half_width())
    }
}

/// Kernels prepared for repeated use inside autodiff graphs.
#[derive(Debug, Clone)]
pub struct GraphStencils {
    dx: Arc<Vec<f64>>,
    dy: Arc<Vec<f64>>,
    laplacian: Arc<Vec<f64>>,
    half_width: usize,
}

impl GraphStencils {
    pub fn new(f: &DerivativeFilterSet) -> Self {
        GraphStencils {
            dx: Arc::new(f.kernel(Order::D10).to_vec()),
            dy: Arc::new(f.kernel(Order::D01).to_vec()),
            laplacian: Arc::new(laplacian_kernel(f)),
            half_width: f.half_width(),
        }
    }
}

/// Symbolic evaluation that records onto a graph. Operands are assumed to
/// share one HWC shape, which callers check up front.
pub struct OnGraph<'a> {
    pub g: &'a mut Graph,
    pub stencils: &'a GraphStencils,
}

impl FieldAlgebra for OnGraph<'_> {
    type F = Var;

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        self.g.add(*a, *b).expect("operands share a shape")
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        self.g.sub(*a, *b).expect("operands share a shape")
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        self.g.mul(*a, *b).expect("operands share a shape")
    }

    fn scale(&mut self, a: &Var, s: f64) -> Var {
        self.g.scale(*a, s)
    }

    fn add_const(&mut self, a: &Var, c: f64) -> Var {
        self.g.add_const(*a, c)
    }

    fn stencil(&mut self, a: &Var, s: Stencil) -> Var {
        let k = match s {
            Stencil::Dx => &self.stencils.dx,
            Stencil::Dy => &self.stencils.dy,
            Stencil::Laplacian => &self.stencils.laplacian,
        };
        self.g.filter(*a, k.clone(), self.stencils.half_width).expect("square HWC operand")
    }
}

/// Graph residual `(next - prev) / (2 dt) - rhs(mid)` for one interior time.
pub fn graph_residual(
    spec: &PdeSpec,
    g: &mut Graph,
    stencils: &GraphStencils,
    prev: (Var, Var),
    mid: (Var, Var),
    next: (Var, Var),
    dt: f64,
) -> Result<(Var, Var)> {
    for v in [prev.0, prev.1, mid.1, next.0, next.1] {
        if g.shape(v) != g.shape(mid.0) {
            return Err(Error::shape(format!(
                "residual operands differ in shape: {:?} vs {:?}",
                g.shape(v),
                g.shape(mid.0)
            )));
        }
    }
    let inv = 1.0 / (2.0 * dt);
    let du = g.sub(next.0, prev.0)?;
    let ut = g.scale(du, inv);
    let dv = g.sub(next.1, prev.1)?;
    let vt = g.scale(dv, inv);
    let (fu, fv) = rhs(spec, &mut OnGraph { g, stencils }, &mid.0, &mid.1);
    Ok((g.sub(ut, fu)?, g.sub(vt, fv)?))
}

fn check_two_channels(field: &Field) -> Result<()> {
    if field.channels() != 2 {
        return Err(Error::shape(format!("PDE fields need 2 channels, got {}", field.channels())));
    }
    Ok(())
}

/// `(u_t, v_t)` as a 2-channel field at the input's time.
pub fn pde_rhs(spec: &PdeSpec, field: &Field, filters: &DerivativeFilterSet) -> Result<Field> {
    check_two_channels(field)?;
    check_spacing(field.grid().dx(), filters)?;
    let n = field.grid().n();
    let (u, v) = (field.channel(0), field.channel(1));
    let (fu, fv) = rhs(spec, &mut Eager::new(n, 1, filters), &u, &v);
    Field::from_channels(*field.grid(), &[&fu, &fv], field.t)
}

/// Residuals at every interior snapshot: `u_t - rhs(u)` with the central
/// time difference. Element `k` belongs to snapshot `k + 1`.
pub fn output_residual(spec: &PdeSpec, seq: &FieldSequence, filters: &DerivativeFilterSet) -> Result<Vec<Field>> {
    let dt = temporal_derivative(seq)?;
    let mut out = Vec::with_capacity(dt.len());
    for (k, ft) in dt.fields().iter().enumerate() {
        let mid = &seq.fields()[k + 1];
        check_two_channels(mid)?;
        let r = pde_rhs(spec, mid, filters)?;
        let data = ft.data().iter().zip(r.data()).map(|(a, b)| a - b).collect();
        out.push(Field::from_data(*mid.grid(), 2, data, mid.t)?);
    }
    Ok(out)
}

/// Residual pair on the latent grid, one `s x s x C` tensor per equation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentResidual {
    pub u: Tensor,
    pub v: Tensor,
}

/// Latent channel `c` of `latent_u` and `latent_v` is treated as one `(u, v)`
/// pair on `latent_grid`.
pub fn latent_residual(
    spec: &PdeSpec,
    latent_u: &[Tensor],
    latent_v: &[Tensor],
    latent_grid: &Grid,
    filters: &DerivativeFilterSet,
    dt: f64,
) -> Result<Vec<LatentResidual>> {
    if latent_u.len() != latent_v.len() {
        return Err(Error::shape(format!(
            "latent sequences differ in length: {} vs {}",
            latent_u.len(),
            latent_v.len()
        )));
    }
    if latent_u.len() < 3 {
        return Err(Error::shape(format!(
            "latent residual needs at least 3 snapshots, got {}",
            latent_u.len()
        )));
    }
    check_spacing(latent_grid.dx(), filters)?;
    let s = latent_grid.n();
    let shape = latent_u[0].shape().to_vec();
    let (h, w, c) = latent_u[0].hwc()?;
    if h != s || w != s {
        return Err(Error::shape(format!("latent tensors are {h}x{w}, latent grid is {s}x{s}")));
    }
    for t in latent_u.iter().chain(latent_v) {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "latent tensors differ in shape: {:?} vs {shape:?}",
                t.shape()
            )));
        }
    }
    let inv = 1.0 / (2.0 * dt);
    let mut alg = Eager::new(s, c, filters);
    let mut out = Vec::with_capacity(latent_u.len() - 2);
    for k in 1..latent_u.len() - 1 {
        let (u, v) = (latent_u[k].data().to_vec(), latent_v[k].data().to_vec());
        let (fu, fv) = rhs(spec, &mut alg, &u, &v);
        let res = |seq: &[Tensor], f: &[f64]| -> Vec<f64> {
            seq[k + 1]
                .data()
                .iter()
                .zip(seq[k - 1].data())
                .zip(f)
                .map(|((a, b), r)| (a - b) * inv - r)
                .collect()
        };
        out.push(LatentResidual {
            u: Tensor::new(shape.clone(), res(latent_u, &fu))?,
            v: Tensor::new(shape.clone(), res(latent_v, &fv))?,
        });
    }
    Ok(out)
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_weight")]
    pub w_out: f64,
    #[serde(default = "default_weight")]
    pub w_lat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_out: 1.0, w_lat: 1.0 }
    }
}

fn mean_square<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v * v;
        n += 1;
    }
    s / n as f64
}

pub fn output_mse(res: &[Field]) -> f64 {
    mean_square(res.iter().flat_map(|f| f.data()))
}

pub fn latent_mse(res: &[LatentResidual]) -> f64 {
    mean_square(res.iter().flat_map(|r| r.u.data().iter().chain(r.v.data())))
}

/// `w_out * MSE(output) + w_lat * MSE(latent)`.
pub fn total_loss(output: &[Field], latent: &[LatentResidual], weights: LossWeights) -> Result<f64> {
    if output.is_empty() || latent.is_empty() {
        return Err(Error::shape("total loss needs nonempty residual lists"));
    }
    Ok(weights.w_out * output_mse(output) + weights.w_lat * latent_mse(latent))
}

/// Initial-condition families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcKind {
    /// Gaussian random field in both channels.
    Grf,
    /// Homogeneous `(1, 0)` state with a perturbed central square.
    GrayScott,
    /// Single-armed spiral.
    Spiral,
}

fn default_amplitude() -> f64 {
    1.0
}

/// Initial-condition recipe: family, seed and a uniform amplitude factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcSpec {
    pub kind: IcKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

impl IcSpec {
    pub fn grf(seed: u64, amplitude: f64) -> Self {
        IcSpec {
            kind: IcKind::Grf,
            seed,
            amplitude,
        }
    }
}

pub fn sample_ic(spec: &IcSpec, grid: &Grid) -> Result<Field> {
    if !spec.amplitude.is_finite() {
        return Err(Error::config("IC amplitude must be finite"));
    }
    let f = match spec.kind {
        IcKind::Grf => sample_burgers_ic(spec.seed, grid)?,
        IcKind::GrayScott => gray_scott_ic(spec.seed, grid)?,
        IcKind::Spiral => spiral_ic(grid)?,
    };
    if spec.amplitude == 1.0 {
        return Ok(f);
    }
    let data = f.data().iter().map(|v| v * spec.amplitude).collect();
    Field::from_data(*grid, 2, data, f.t)
}

/// Spectral amplitude of the Gaussian random field at wavenumber `|k|`
/// (cycles per domain length).
pub fn grf_amplitude(k_norm: f64, length: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * k_norm / length;
    25.0 / (w * w + 25.0)
}

/// Signed integer wavenumber of FFT index `i`.
pub fn wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// One complex GRF channel before discarding the imaginary part.
fn grf_channel(rng: &mut ChaCha8Rng, grid: &Grid, planner: &mut FftPlanner<f64>) -> Vec<Complex<f64>> {
    let n = grid.n();
    let mut spec = vec![Complex::new(0.0, 0.0); n * n];
    for a in 0..n {
        for b in 0..n {
            let idx = a * n + b;
            let mirror = ((n - a) % n) * n + (n - b) % n;
            if mirror < idx || idx == 0 {
                continue;
            }
            let k = wavenumber(a, n).hypot(wavenumber(b, n));
            let amp = grf_amplitude(k, grid.length());
            let re: f64 = StandardNormal.sample(rng);
            if mirror == idx {
                spec[idx] = Complex::new(amp * re, 0.0);
            } else {
                let im: f64 = StandardNormal.sample(rng);
                spec[idx] = Complex::new(amp * re, amp * im);
                spec[mirror] = spec[idx].conj();
            }
        }
    }
    inverse_fft2(&mut spec, n, planner);
    spec
}

/// Unnormalized 2-D inverse FFT in place.
fn inverse_fft2(data: &mut [Complex<f64>], n: usize, planner: &mut FftPlanner<f64>) {
    let fft = planner.plan_fft_inverse(n);
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = data[i * n + j];
        }
        fft.process(&mut col);
        for i in 0..n {
            data[i * n + j] = col[i];
        }
    }
}

/// Largest imaginary part left by the inverse transform, for diagnostics.
pub fn grf_imaginary_residue(seed: u64, grid: &Grid) -> Result<f64> {
    check_power_of_two(grid.n())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planner = FftPlanner::new();
    let c = grf_channel(&mut rng, grid, &mut planner);
    Ok(c.iter().map(|z| z.im.abs()).fold(0.0, f64::max))
}

fn check_power_of_two(n: usize) -> Result<()> {
    if !n.is_power_of_two() {
        return Err(Error::config(format!("spectral sampler needs a power-of-two grid side, got {n}")));
    }
    Ok(())
}

/// Zero-mean Gaussian random field in each channel with spectral amplitude
/// `25 / ((2 pi |k| / L)^2 + 25)` times complex white noise.
pub fn sample_burgers_ic(seed: u64, grid: &Grid) -> Result<Field> {
    check_power_of_two(grid.n())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planner = FftPlanner::new();
    let u: Vec<f64> = grf_channel(&mut rng, grid, &mut planner).iter().map(|z| z.re).collect();
    let v: Vec<f64> = grf_channel(&mut rng, grid, &mut planner).iter().map(|z| z.re).collect();
    Field::from_channels(*grid, &[&u, &v], 0.0)
}

fn gray_scott_ic(seed: u64, grid: &Grid) -> Result<Field> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.n();
    let (lo, hi) = (n * 2 / 5, n * 3 / 5);
    let mut u = vec![1.0; n * n];
    let mut v = vec![0.0; n * n];
    for i in lo..hi {
        for j in lo..hi {
            u[i * n + j] = 0.5 + rng.random_range(-0.01..0.01);
            v[i * n + j] = 0.25 + rng.random_range(-0.01..0.01);
        }
    }
    Field::from_channels(*grid, &[&u, &v], 0.0)
}

fn spiral_ic(grid: &Grid) -> Result<Field> {
    let n = grid.n();
    let c = 0.5 * (grid.x_min() + grid.x_max());
    let (mut u, mut v) = (vec![0.0; n * n], vec![0.0; n * n]);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (grid.coord(j) - c, grid.coord(i) - c);
            let r = x.hypot(y);
            let th = y.atan2(x);
            u[i * n + j] = r.tanh() * (th - r).cos();
            v[i * n + j] = r.tanh() * (th - r).sin();
        }
    }
    Field::from_channels(*grid, &[&u, &v], 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::sample_field;
    use std::f64::consts::PI;

    fn filters(grid: &Grid) -> DerivativeFilterSet {
        DerivativeFilterSet::build(2, grid.dx(), 3.015).unwrap()
    }

    #[test]
    fn gray_scott_homogeneous_state_is_fixed() {
        let grid = Grid::new(16, -0.2, 0.2).unwrap();
        let f = Field::from_channels(grid, &[&[1.0; 256], &[0.0; 256]], 0.0).unwrap();
        let spec = PdeSpec::gray_scott(2e-5, 1e-5, 0.04, 0.1);
        let r = pde_rhs(&spec, &f, &filters(&grid)).unwrap();
        assert!(r.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn burgers_constant_field_has_zero_rhs() {
        let grid = Grid::new(16, 0.0, 1.0).unwrap();
        let f = Field::constant(grid, 2, 0.7);
        let r = pde_rhs(&PdeSpec::burgers(0.005), &f, &filters(&grid)).unwrap();
        assert!(r.max_abs() < 1e-9, "{}", r.max_abs());
    }

    #[test]
    fn burgers_manufactured_solution() {
        let grid = Grid::new(128, 0.0, 1.0).unwrap();
        let nu = 0.005;
        let f = sample_field(&grid, |x, y| [(2.0 * PI * x).sin() * (2.0 * PI * y).sin(), 0.0]).unwrap();
        let r = pde_rhs(&PdeSpec::burgers(nu), &f, &filters(&grid)).unwrap();
        let k = 2.0 * PI;
        // u = sin(kx) sin(ky), v = 0: u_t = -u u_x + nu (u_xx + u_yy).
        let exact = sample_field(&grid, |x, y| {
            let u = (k * x).sin() * (k * y).sin();
            let ux = k * (k * x).cos() * (k * y).sin();
            [-u * ux - 2.0 * nu * k * k * u, 0.0]
        })
        .unwrap();
        let num: f64 = r.data().iter().zip(exact.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = exact.data().iter().map(|b| b * b).sum();
        assert!((num / den).sqrt() < 2e-2);
    }

    #[test]
    fn rhs_is_translation_equivariant() {
        let grid = Grid::new(16, 0.0, 1.0).unwrap();
        let f = sample_burgers_ic(3, &grid).unwrap();
        let fl = filters(&grid);
        for spec in [PdeSpec::burgers(0.01), PdeSpec::lambda_omega(), PdeSpec::gray_scott(1e-3, 5e-4, 0.04, 0.1)] {
            let a = pde_rhs(&spec, &f.shifted(3, -5), &fl).unwrap();
            let b = pde_rhs(&spec, &f, &fl).unwrap().shifted(3, -5);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn steady_sequences_have_zero_output_residual() {
        let grid = Grid::new(16, 0.0, 1.0).unwrap();
        let fl = filters(&grid);
        let c = Field::constant(grid, 2, 0.3);
        let seq = FieldSequence::new(0.0, 0.01, vec![c.clone(), c.clone(), c.clone(), c]).unwrap();
        let r = output_residual(&PdeSpec::burgers(0.005), &seq, &fl).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|f| f.max_abs() < 1e-9));

        let gs = Field::from_channels(grid, &[&[1.0; 256], &[0.0; 256]], 0.0).unwrap();
        let seq = FieldSequence::new(0.0, 0.01, vec![gs.clone(), gs.clone(), gs]).unwrap();
        let r = output_residual(&PdeSpec::gray_scott(2e-5, 1e-5, 0.04, 0.1), &seq, &fl).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].max_abs() < 1e-12);
    }

    fn zero_latents(len: usize, s: usize, c: usize) -> Vec<Tensor> {
        vec![Tensor::zeros(&[s, s, c]); len]
    }

    #[test]
    fn zero_latents_give_literal_residuals() {
        let lg = Grid::new(32, 0.0, 1.0).unwrap().coarsen(8).unwrap();
        let fl = filters(&lg);
        let z = zero_latents(4, 4, 32);
        let r = latent_residual(&PdeSpec::burgers(0.005), &z, &z, &lg, &fl, 0.01).unwrap();
        assert_eq!(r.len(), 2);
        assert!(latent_mse(&r) == 0.0);
        let r = latent_residual(&PdeSpec::gray_scott(2e-5, 1e-5, 0.04, 0.1), &z, &z, &lg, &fl, 0.01).unwrap();
        assert!(r[0].u.data().iter().all(|&v| (v + 0.04).abs() < 1e-15));
        assert!(r[0].v.data().iter().all(|&v| v == 0.0));
        assert!(latent_residual(&PdeSpec::burgers(0.005), &z[..2], &z[..2], &lg, &fl, 0.01).is_err());
    }

    #[test]
    fn latent_and_output_residual_share_the_operator() {
        let grid = Grid::new(16, 0.0, 1.0).unwrap();
        let fl = filters(&grid);
        let spec = PdeSpec::burgers(0.01);
        let fields: Vec<Field> = (0..4).map(|s| sample_burgers_ic(s, &grid).unwrap()).collect();
        let seq = FieldSequence::new(0.0, 0.05, fields.clone()).unwrap();
        let out = output_residual(&spec, &seq, &fl).unwrap();
        let lu: Vec<Tensor> = fields.iter().map(|f| Tensor::new(vec![16, 16, 1], f.channel(0)).unwrap()).collect();
        let lv: Vec<Tensor> = fields.iter().map(|f| Tensor::new(vec![16, 16, 1], f.channel(1)).unwrap()).collect();
        let lat = latent_residual(&spec, &lu, &lv, &grid, &fl, 0.05).unwrap();
        for (o, l) in out.iter().zip(&lat) {
            assert_eq!(o.channel(0), l.u.data());
            assert_eq!(o.channel(1), l.v.data());
        }
    }

    #[test]
    fn latent_loss_is_invariant_to_channel_permutation() {
        let lg = Grid::new(32, 0.0, 1.0).unwrap().coarsen(8).unwrap();
        let fl = filters(&lg);
        let mk = |seed: u64, perm: bool| -> Vec<Tensor> {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..3)
                .map(|_| {
                    let d: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let d = if perm {
                        d.chunks(3).flat_map(|c| [c[2], c[0], c[1]]).collect()
                    } else {
                        d
                    };
                    Tensor::new(vec![4, 4, 3], d).unwrap()
                })
                .collect()
        };
        let spec = PdeSpec::burgers(0.005);
        let a = latent_residual(&spec, &mk(1, false), &mk(2, false), &lg, &fl, 0.01).unwrap();
        let b = latent_residual(&spec, &mk(1, true), &mk(2, true), &lg, &fl, 0.01).unwrap();
        assert!((latent_mse(&a) - latent_mse(&b)).abs() <= 1e-12 * latent_mse(&a));
    }

    #[test]
    fn total_loss_weighting() {
        let grid = Grid::new(4, 0.0, 1.0).unwrap();
        let o = vec![Field::constant(grid, 2, 2.0)];
        let l = vec![LatentResidual {
            u: Tensor::full(&[1, 1, 1], 1.0),
            v: Tensor::full(&[1, 1, 1], 3.0),
        }];
        let w = LossWeights { w_out: 1.0, w_lat: 1.0 };
        assert_eq!(total_loss(&o, &l, w).unwrap(), 4.0 + 5.0);
        let w0 = LossWeights { w_out: 1.0, w_lat: 0.0 };
        assert_eq!(total_loss(&o, &l, w0).unwrap(), 4.0);
        let w2 = LossWeights { w_out: 2.0, w_lat: 2.0 };
        assert_eq!(total_loss(&o, &l, w2).unwrap(), 18.0);
        let z = vec![Field::zeros(grid, 2)];
        let lz = vec![LatentResidual {
            u: Tensor::zeros(&[1, 1, 1]),
            v: Tensor::zeros(&[1, 1, 1]),
        }];
        assert_eq!(total_loss(&z, &lz, w).unwrap(), 0.0);
        assert!(total_loss(&[], &l, w).is_err());
    }

    #[test]
    fn grf_is_real_deterministic_and_zero_mean() {
        let grid = Grid::new(32, 0.0, 1.0).unwrap();
        assert!(grf_imaginary_residue(4, &grid).unwrap() < 1e-12);
        let a = sample_burgers_ic(4, &grid).unwrap();
        let b = sample_burgers_ic(4, &grid).unwrap();
        assert_eq!(a, b);
        for c in 0..2 {
            let m: f64 = a.channel(c).iter().sum::<f64>() / 1024.0;
            assert!(m.abs() < 1e-12);
        }
        assert_ne!(a, sample_burgers_ic(5, &grid).unwrap());
        assert!(sample_burgers_ic(1, &Grid::new(24, 0.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn grf_radial_spectrum_matches_target() {
        // Forward DFT of the sampled field over n^2 recovers the Fourier
        // coefficients: E|c_k|^2 = 2 a(k)^2, or a(k)^2 on self-conjugate modes.
        let n = 64;
        let grid = Grid::new(n, 0.0, 1.0).unwrap();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let shells = n / 2;
        let mut ratio_sum = vec![0.0; shells];
        let mut count = vec![0usize; shells];
        for seed in 0..200 {
            let f = sample_burgers_ic(seed, &grid).unwrap();
            for c in 0..2 {
                let mut d: Vec<Complex<f64>> = f.channel(c).iter().map(|&x| Complex::new(x, 0.0)).collect();
                for row in d.chunks_exact_mut(n) {
                    fft.process(row);
                }
                let mut col = vec![Complex::new(0.0, 0.0); n];
                for j in 0..n {
                    for i in 0..n {
                        col[i] = d[i * n + j];
                    }
                    fft.process(&mut col);
                    for i in 0..n {
                        d[i * n + j] = col[i] / (n * n) as f64;
                    }
                }
                for a in 0..n {
                    for b in 0..n {
                        let k = wavenumber(a, n).hypot(wavenumber(b, n));
                        let shell = k.round() as usize;
                        if shell == 0 || shell >= shells {
                            continue;
                        }
                        let self_conj = (2 * a) % n == 0 && (2 * b) % n == 0;
                        let amp = grf_amplitude(k, 1.0);
                        let expect = if self_conj { amp * amp } else { 2.0 * amp * amp };
                        ratio_sum[shell] += d[a * n + b].norm_sqr() / expect;
                        count[shell] += 1;
                    }
                }
            }
        }
        for s in 1..shells {
            let r = ratio_sum[s] / count[s] as f64;
            assert!((r - 1.0).abs() < 0.2, "shell {s}: power ratio {r}");
        }
    }

    #[test]
    fn ic_amplitude_scales_the_field() {
        let grid = Grid::new(16, 0.0, 1.0).unwrap();
        let a = sample_ic(&IcSpec::grf(3, 1.0), &grid).unwrap();
        let b = sample_ic(&IcSpec::grf(3, 0.25), &grid).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x * 0.25, *y);
        }
        let spec: IcSpec = serde_json::from_str(r#"{"kind":"grf"}"#).unwrap();
        assert_eq!(spec, IcSpec::grf(0, 1.0));
        assert!(serde_json::from_str::<IcSpec>(r#"{"kind":"grf","amp":2}"#).is_err());
    }

    #[test]
    fn graph_rhs_matches_eager_rhs() {
        let grid = Grid::new(16, 0.0, 1.0).unwrap();
        let fl = filters(&grid);
        let st = GraphStencils::new(&fl);
        let f = sample_burgers_ic(9, &grid).unwrap();
        for spec in [PdeSpec::burgers(0.01), PdeSpec::lambda_omega(), PdeSpec::gray_scott(1e-3, 5e-4, 0.04, 0.1)] {
            let mut g = Graph::new();
            let u = g.constant(Tensor::new(vec![16, 16, 1], f.channel(0)).unwrap());
            let v = g.constant(Tensor::new(vec![16, 16, 1], f.channel(1)).unwrap());
            let (fu, fv) = rhs(&spec, &mut OnGraph { g: &mut g, stencils: &st }, &u, &v);
            let e = pde_rhs(&spec, &f, &fl).unwrap();
            assert_eq!(g.value(fu).data(), e.channel(0).as_slice());
            assert_eq!(g.value(fv).data(), e.channel(1).as_slice());
        }
    }
}
