//! Nonlocal peridynamic derivative filters.
//!
//! A derivative at a point is recovered as a weighted sum over its family,
//! the `(2m+1) x (2m+1)` square of neighbours. The weights come from PD
//! functions `g^{p1 p2}(xi) = sum_q a_q^{p} w(|xi|) P_q(xi)` over the quadratic
//! basis `P = (1, xi1, xi2, xi1^2, xi2^2, xi1 xi2)`, with coefficients fixed by
//! requiring discrete orthogonality against every Taylor term:
//!
//! ```text
//! 1/(n1! n2!) * sum_j xi1^n1 xi2^n2 g^{p}(xi_j) A_j = delta_{n p}
//! ```
//!
//! On a uniform grid every point has the same family, so the weighted PD
//! functions are plain convolution kernels. Kernels are applied as periodic
//! cross-correlation (no flip): `out(i, j) = sum_{r,c} K[r][c] in(i+r-m, j+c-m)`
//! where kernel row `r` is the `y` offset `(r - m) dx` and column `c` the `x`
//! offset `(c - m) dx`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::field::{wrap_index, Field, FieldSequence};
use crate::linalg::{identity6, matmul, norm1, Lu6, Mat6};

pub const DEFAULT_HALF_WIDTH: usize = 2;
pub const DEFAULT_HORIZON_FACTOR: f64 = 3.015;

/// Largest accepted condition estimate of the (scaled) moment matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Derivative order `(p1, p2)`: `p1` along `x` (columns), `p2` along `y` (rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Order {
    D00,
    D10,
    D01,
    D20,
    D02,
    D11,
}

impl Order {
    /// Basis order shared by kernels, moment rows and file layout.
    pub const ALL: [Order; 6] = [Order::D00, Order::D10, Order::D01, Order::D20, Order::D02, Order::D11];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn exponents(self) -> (u32, u32) {
        match self {
            Order::D00 => (0, 0),
            Order::D10 => (1, 0),
            Order::D01 => (0, 1),
            Order::D20 => (2, 0),
            Order::D02 => (0, 2),
            Order::D11 => (1, 1),
        }
    }

    /// `n1! n2!`
    pub fn factorial(self) -> f64 {
        let (a, b) = self.exponents();
        let f = |k: u32| if k == 2 { 2.0 } else { 1.0 };
        f(a) * f(b)
    }

    pub fn label(self) -> &'static str {
        match self {
            Order::D00 => "00",
            Order::D10 => "10",
            Order::D01 => "01",
            Order::D20 => "20",
            Order::D02 => "02",
            Order::D11 => "11",
        }
    }

    pub fn parse(s: &str) -> Option<Order> {
        Order::ALL.into_iter().find(|o| o.label() == s)
    }

    /// `xi1^p1 xi2^p2`
    #[inline]
    pub fn monomial(self, xi1: f64, xi2: f64) -> f64 {
        let (a, b) = self.exponents();
        xi1.powi(a as i32) * xi2.powi(b as i32)
    }
}

fn basis(xi1: f64, xi2: f64) -> [f64; 6] {
    [1.0, xi1, xi2, xi1 * xi1, xi2 * xi2, xi1 * xi2]
}

/// Gaussian influence `exp(-4 |xi|^2 / delta^2)`.
pub fn weight(xi_norm: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::config(format!("horizon must be positive, got {delta}")));
    }
    Ok((-4.0 * xi_norm * xi_norm / (delta * delta)).exp())
}

/// Neighbourhood of a point on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Family {
    pub half_width: usize,
    pub dx: f64,
    /// Horizon `delta`.
    pub delta: f64,
    /// `(xi1, xi2)` in row-major kernel order: row = `xi2`, col = `xi1`.
    pub offsets: Vec<(f64, f64)>,
    /// Area associated with each member (`dx^2`).
    pub area: f64,
}

pub fn build_family(half_width: usize, dx: f64, horizon_factor: f64) -> Result<Family> {
    if half_width < 1 {
        return Err(Error::config("family half width must be at least 1"));
    }
    if !(dx > 0.0 && dx.is_finite()) {
        return Err(Error::config(format!("grid spacing must be positive, got {dx}")));
    }
    if !(horizon_factor > half_width as f64) || !horizon_factor.is_finite() {
        return Err(Error::config(format!(
            "horizon factor {horizon_factor} must exceed the half width {half_width}"
        )));
    }
    let m = half_width as isize;
    let offsets = (-m..=m)
        .flat_map(|r| (-m..=m).map(move |c| (c as f64 * dx, r as f64 * dx)))
        .collect();
    Ok(Family {
        half_width,
        dx,
        delta: horizon_factor * dx,
        offsets,
        area: dx * dx,
    })
}

/// Weighted moment system `A a = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix {
    pub a: [[f64; 6]; 6],
    pub b: [[f64; 6]; 6],
    delta: f64,
}

pub fn build_moment_matrix(family: &Family) -> MomentMatrix {
    let term = |(x1, x2): (f64, f64)| -> Mat6 {
        let w = weight((x1 * x1 + x2 * x2).sqrt(), family.delta).unwrap() * family.area;
        let p = basis(x1, x2);
        std::array::from_fn(|r| std::array::from_fn(|c| w * p[r] * p[c]))
    };
    // Members are summed in mirrored pairs (xi, -xi) so odd moments cancel
    // exactly for the origin-symmetric family.
    let len = family.offsets.len();
    let mut a = [[0.0; 6]; 6];
    for k in 0..len.div_ceil(2) {
        let mirror = len - 1 - k;
        let t = term(family.offsets[k]);
        let tm = if mirror != k { term(family.offsets[mirror]) } else { [[0.0; 6]; 6] };
        for r in 0..6 {
            for c in 0..6 {
                a[r][c] += t[r][c] + tm[r][c];
            }
        }
    }
    let mut b = [[0.0; 6]; 6];
    for o in Order::ALL {
        b[o.index()][o.index()] = o.factorial();
    }
    MomentMatrix {
        a,
        b,
        delta: family.delta,
    }
}

/// PD coefficients; column `p` holds `a_q^{p}` for the basis terms `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PdCoefficients {
    pub a: [[f64; 6]; 6],
    /// 1-norm condition estimate of the horizon-scaled moment matrix.
    pub condition: f64,
}

/// Solves the moment system with partial-pivoting LU.
///
/// The system is first rescaled by `delta^{-|q|}` per basis term so that the
/// condition estimate reflects the geometry rather than the unit of length.
pub fn solve_pd_coefficients(m: &MomentMatrix) -> Result<PdCoefficients> {
    let s: [f64; 6] = std::array::from_fn(|q| {
        let (e1, e2) = Order::ALL[q].exponents();
        m.delta.powi(-((e1 + e2) as i32))
    });
    let scaled: Mat6 = std::array::from_fn(|r| std::array::from_fn(|c| s[r] * m.a[r][c] * s[c]));
    let lu = Lu6::factor(&scaled).ok_or(Error::IllConditioned {
        condition: f64::INFINITY,
    })?;
    let inv = lu.solve_mat(&identity6());
    let condition = norm1(&scaled) * norm1(&inv);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    let sb: Mat6 = std::array::from_fn(|r| std::array::from_fn(|c| s[r] * m.b[r][c]));
    let y = lu.solve_mat(&sb);
    let a = std::array::from_fn(|r| std::array::from_fn(|c| s[r] * y[r][c]));
    Ok(PdCoefficients { a, condition })
}

/// `max |A a - b|` over all entries.
pub fn moment_residual(m: &MomentMatrix, coeffs: &PdCoefficients) -> f64 {
    let prod = matmul(&m.a, &coeffs.a);
    let mut worst: f64 = 0.0;
    for r in 0..6 {
        for c in 0..6 {
            worst = worst.max((prod[r][c] - m.b[r][c]).abs());
        }
    }
    worst
}

/// Six derivative kernels, each `(2m+1)^2` long and already multiplied by
/// the member area.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeFilterSet {
    half_width: usize,
    dx: f64,
    horizon_factor: f64,
    kernels: [Vec<f64>; 6],
}

impl DerivativeFilterSet {
    pub fn build(half_width: usize, dx: f64, horizon_factor: f64) -> Result<Self> {
        let family = build_family(half_width, dx, horizon_factor)?;
        let moments = build_moment_matrix(&family);
        let coeffs = solve_pd_coefficients(&moments)?;
        let kernels = std::array::from_fn(|p| {
            family
                .offsets
                .iter()
                .map(|&(x1, x2)| {
                    let w = weight((x1 * x1 + x2 * x2).sqrt(), family.delta).unwrap();
                    let b = basis(x1, x2);
                    let g: f64 = (0..6).map(|q| coeffs.a[q][p] * b[q]).sum::<f64>() * w;
                    g * family.area
                })
                .collect()
        });
        Ok(DerivativeFilterSet {
            half_width,
            dx,
            horizon_factor,
            kernels,
        })
    }

    /// Shared, memoized filter set for `(m, dx, horizon_factor)`.
    pub fn cached(half_width: usize, dx: f64, horizon_factor: f64) -> Result<Arc<Self>> {
        type Key = (usize, u64, u64);
        static CACHE: OnceLock<Mutex<HashMap<Key, Arc<DerivativeFilterSet>>>> = OnceLock::new();
        let key = (half_width, dx.to_bits(), horizon_factor.to_bits());
        let cache = CACHE.get_or_init(Default::default);
        if let Some(f) = cache.lock().unwrap().get(&key) {
            return Ok(Arc::clone(f));
        }
        let built = Arc::new(Self::build(half_width, dx, horizon_factor)?);
        cache.lock().unwrap().insert(key, Arc::clone(&built));
        Ok(built)
    }

    /// Local second-order central differences on a 3x3 stencil, for
    /// cross-checking the nonlocal filters.
    pub fn central_difference(dx: f64) -> Result<Self> {
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(Error::config(format!("grid spacing must be positive, got {dx}")));
        }
        let h = 1.0 / dx;
        let h2 = h * h;
        let k = |vals: [f64; 9], s: f64| vals.iter().map(|v| v * s).collect::<Vec<f64>>();
        let kernels = [
            k([0., 0., 0., 0., 1., 0., 0., 0., 0.], 1.0),
            k([0., 0., 0., -0.5, 0., 0.5, 0., 0., 0.], h),
            k([0., -0.5, 0., 0., 0., 0., 0., 0.5, 0.], h),
            k([0., 0., 0., 1., -2., 1., 0., 0., 0.], h2),
            k([0., 1., 0., 0., -2., 0., 0., 1., 0.], h2),
            k([0.25, 0., -0.25, 0., 0., 0., -0.25, 0., 0.25], h2),
        ];
        Ok(DerivativeFilterSet {
            half_width: 1,
            dx,
            horizon_factor: 0.0,
            kernels,
        })
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn side(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn horizon_factor(&self) -> f64 {
        self.horizon_factor
    }

    pub fn kernel(&self, order: Order) -> &[f64] {
        &self.kernels[order.index()]
    }

    /// Kernel offsets `(xi1, xi2)` in kernel order.
    pub fn offsets(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let m = self.half_width as isize;
        let dx = self.dx;
        (-m..=m).flat_map(move |r| (-m..=m).map(move |c| (c as f64 * dx, r as f64 * dx)))
    }

    /// Evaluates all 36 orthogonality identities; entry `[n][p]` is
    /// `1/(n1! n2!) sum_j xi^n K^p_j`, which should equal `delta_{np}`.
    pub fn orthogonality_table(&self) -> [[f64; 6]; 6] {
        std::array::from_fn(|n| {
            let on = Order::ALL[n];
            std::array::from_fn(|p| {
                let k = &self.kernels[p];
                self.offsets()
                    .zip(k)
                    .map(|((x1, x2), kv)| on.monomial(x1, x2) * kv)
                    .sum::<f64>()
                    / on.factorial()
            })
        })
    }

    /// Largest absolute deviation of the orthogonality table from identity.
    pub fn orthogonality_defect(&self) -> f64 {
        let t = self.orthogonality_table();
        let mut worst: f64 = 0.0;
        for (n, row) in t.iter().enumerate() {
            for (p, v) in row.iter().enumerate() {
                let e = if n == p { 1.0 } else { 0.0 };
                worst = worst.max((v - e).abs());
            }
        }
        worst
    }
}

/// Periodic cross-correlation of an `n x n x channels` array with one
/// `(2m+1)^2` kernel applied to every channel.
pub fn correlate_periodic(data: &[f64], n: usize, channels: usize, kernel: &[f64], half_width: usize) -> Vec<f64> {
    let side = 2 * half_width + 1;
    debug_assert_eq!(kernel.len(), side * side);
    debug_assert_eq!(data.len(), n * n * channels);
    let mut out = vec![0.0; data.len()];
    let m = half_width as isize;
    let wrap: Vec<Vec<usize>> = (0..side)
        .map(|d| (0..n).map(|i| wrap_index(i as isize + d as isize - m, n)).collect())
        .collect();
    for i in 0..n {
        for r in 0..side {
            let si = wrap[r][i];
            for c in 0..side {
                let kv = kernel[r * side + c];
                if kv == 0.0 {
                    continue;
                }
                let wc = &wrap[c];
                for j in 0..n {
                    let src = (si * n + wc[j]) * channels;
                    let dst = (i * n + j) * channels;
                    for ch in 0..channels {
                        out[dst + ch] += kv * data[src + ch];
                    }
                }
            }
        }
    }
    out
}

/// Applies one derivative filter channelwise with periodic wrap.
pub fn apply_derivative(field: &Field, filters: &DerivativeFilterSet, order: Order) -> Result<Field> {
    check_spacing(field.grid().dx(), filters)?;
    let out = correlate_periodic(
        field.data(),
        field.grid().n(),
        field.channels(),
        filters.kernel(order),
        filters.half_width(),
    );
    Field::from_data(*field.grid(), field.channels(), out, field.t)
}

pub(crate) fn check_spacing(dx: f64, filters: &DerivativeFilterSet) -> Result<()> {
    let tol = 1e-12 * dx.abs().max(filters.dx().abs());
    if (dx - filters.dx()).abs() > tol {
        return Err(Error::shape(format!(
            "filter spacing {} does not match grid spacing {dx}",
            filters.dx()
        )));
    }
    Ok(())
}

/// Second-order central difference in time, `[-1, 0, 1] / (2 dt)`.
///
/// Output element `k` is centred on input `k + 1`.
pub fn temporal_derivative(seq: &FieldSequence) -> Result<FieldSequence> {
    if seq.len() < 3 {
        return Err(Error::shape(format!(
            "temporal derivative needs at least 3 snapshots, got {}",
            seq.len()
        )));
    }
    if !(seq.dt() > 0.0) {
        return Err(Error::config("temporal derivative needs a positive time step"));
    }
    let inv = 1.0 / (2.0 * seq.dt());
    let f = seq.fields();
    let out = (0..f.len() - 2)
        .map(|k| {
            let data = f[k + 2]
                .data()
                .iter()
                .zip(f[k].data())
                .map(|(a, b)| (a - b) * inv)
                .collect();
            Field::from_data(*f[k].grid(), f[k].channels(), data, 0.0)
        })
        .collect::<Result<Vec<_>>>()?;
    FieldSequence::new(seq.t0() + seq.dt(), seq.dt(), out)
}

pub const FILTER_MAGIC: &[u8; 6] = b"PDFLT1";

/// `PDFLT1`: magic, `u32 m`, `f64 dx`, `f64 horizon_factor`, then the six
/// kernels in order 00, 10, 01, 20, 02, 11 (little-endian f64).
pub fn encode_filters(f: &DerivativeFilterSet) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(26 + 6 * f.side() * f.side() * 8);
    w.bytes(FILTER_MAGIC);
    w.u32(f.half_width as u32);
    w.f64(f.dx);
    w.f64(f.horizon_factor);
    for k in &f.kernels {
        w.f64s(k);
    }
    w.finish()
}

pub fn decode_filters(bytes: &[u8]) -> Result<DerivativeFilterSet> {
    let mut r = ByteReader::new("PDFLT1", bytes);
    r.magic(FILTER_MAGIC)?;
    let half_width = r.u32()? as usize;
    if half_width == 0 || half_width > 64 {
        return Err(r.fail(format!("implausible half width {half_width}")));
    }
    let dx = r.f64()?;
    let horizon_factor = r.f64()?;
    let side = 2 * half_width + 1;
    let mut kernels: [Vec<f64>; 6] = Default::default();
    for k in kernels.iter_mut() {
        *k = r.f64s(side * side)?;
    }
    r.expect_end()?;
    Ok(DerivativeFilterSet {
        half_width,
        dx,
        horizon_factor,
        kernels,
    })
}

pub fn write_filters(f: &DerivativeFilterSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_filters(f))
}

pub fn read_filters(path: impl AsRef<Path>) -> Result<DerivativeFilterSet> {
    decode_filters(&read_file(path.as_ref())?)
}
