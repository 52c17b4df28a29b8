//! Uniform periodic grids and the field containers that live on them.
//!
//! Layout convention used across the crate: a field is stored row-major as
//! `(row, col, channel)`. Row `i` sits at `y = x_min + i * dx`, column `j` at
//! `x = x_min + j * dx`, so the first spatial coordinate `x` runs along
//! columns. Channel 0 is `u`, channel 1 is `v`.

mod io;

pub use io::{decode_sequence, encode_sequence, read_sequence, write_sequence, SEQ_HEADER_LEN, SEQ_MAGIC};

use crate::error::{Error, Result};

/// Square, uniformly spaced, periodic grid. The `n` points cover
/// `[x_min, x_max)`; the periodic endpoint is not duplicated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    n: usize,
    x_min: f64,
    x_max: f64,
    dx: f64,
}

impl Grid {
    pub fn new(n: usize, x_min: f64, x_max: f64) -> Result<Self> {
        if n < 4 {
            return Err(Error::config(format!("grid needs at least 4 points per side, got {n}")));
        }
        Self::unchecked(n, x_min, x_max)
    }

    fn unchecked(n: usize, x_min: f64, x_max: f64) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(Error::config(format!("degenerate bounds [{x_min}, {x_max}]")));
        }
        Ok(Grid {
            n,
            x_min,
            x_max,
            dx: (x_max - x_min) / n as f64,
        })
    }

    /// Grid covering the same domain with `n / factor` points per side.
    ///
    /// Used for the network's latent space, which may be smaller than the
    /// 4-point minimum of user-facing grids (a 16-point field encodes to 2x2).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n % factor != 0 {
            return Err(Error::shape(format!(
                "grid side {} is not divisible by {factor}",
                self.n
            )));
        }
        Self::unchecked(self.n / factor, self.x_min, self.x_max)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    /// Physical coordinate of index `i` along either axis.
    pub fn coord(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    /// Periodic wrap of a signed index into `0..n`.
    pub fn wrap(&self, i: isize) -> usize {
        wrap_index(i, self.n)
    }
}

#[inline]
pub fn wrap_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    (((i % n) + n) % n) as usize
}

/// One snapshot of the dependent variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid,
    channels: usize,
    data: Vec<f64>,
    /// Timestamp in seconds.
    pub t: f64,
}

impl Field {
    pub fn from_data(grid: Grid, channels: usize, data: Vec<f64>, t: f64) -> Result<Self> {
        let n = grid.n();
        if channels == 0 || data.len() != n * n * channels {
            return Err(Error::shape(format!(
                "field data has {} values, expected {n}x{n}x{channels}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (i, j, c) = (pos / (n * channels), (pos / channels) % n, pos % channels);
            return Err(Error::non_finite(format!(
                "field value at row {i}, col {j}, channel {c} is {}",
                data[pos]
            )));
        }
        Ok(Field {
            grid,
            channels,
            data,
            t,
        })
    }

    pub fn zeros(grid: Grid, channels: usize) -> Self {
        Self::constant(grid, channels, 0.0)
    }

    pub fn constant(grid: Grid, channels: usize, value: f64) -> Self {
        let n = grid.n();
        Field {
            grid,
            channels,
            data: vec![value; n * n * channels],
            t: 0.0,
        }
    }

    /// Builds a field from per-channel planes, each `n * n` long.
    pub fn from_channels(grid: Grid, planes: &[&[f64]], t: f64) -> Result<Self> {
        let cells = grid.n() * grid.n();
        let channels = planes.len();
        if planes.iter().any(|p| p.len() != cells) {
            return Err(Error::shape(format!("channel planes must hold {cells} values")));
        }
        let mut data = vec![0.0; cells * channels];
        for (c, plane) in planes.iter().enumerate() {
            for (k, v) in plane.iter().enumerate() {
                data[k * channels + c] = *v;
            }
        }
        Self::from_data(grid, channels, data, t)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.grid.n() + col) * self.channels + channel]
    }

    /// Copies one channel out as an `n * n` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Cyclic shift: output(i, j) = input(i - rows, j - cols).
    pub fn shifted(&self, rows: isize, cols: isize) -> Field {
        let n = self.grid.n();
        let ch = self.channels;
        let mut data = vec![0.0; self.data.len()];
        for i in 0..n {
            let si = wrap_index(i as isize - rows, n);
            for j in 0..n {
                let sj = wrap_index(j as isize - cols, n);
                let dst = (i * n + j) * ch;
                let src = (si * n + sj) * ch;
                data[dst..dst + ch].copy_from_slice(&self.data[src..src + ch]);
            }
        }
        Field {
            grid: self.grid,
            channels: ch,
            data,
            t: self.t,
        }
    }
}

/// Samples `f(x, y)` at every grid point; the returned array gives the value
/// of each channel.
pub fn sample_field<const C: usize>(grid: &Grid, f: impl Fn(f64, f64) -> [f64; C]) -> Result<Field> {
    let n = grid.n();
    let mut data = Vec::with_capacity(n * n * C);
    for i in 0..n {
        let y = grid.coord(i);
        for j in 0..n {
            let x = grid.coord(j);
            let vals = f(x, y);
            if let Some(c) = vals.iter().position(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!(
                    "sample at (x = {x}, y = {y}), row {i}, col {j}, channel {c} is {}",
                    vals[c]
                )));
            }
            data.extend_from_slice(&vals);
        }
    }
    Field::from_data(*grid, C, data, 0.0)
}

/// Uniformly spaced snapshots sharing one grid and channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSequence {
    fields: Vec<Field>,
    t0: f64,
    dt: f64,
}

impl FieldSequence {
    /// Takes ownership of `fields` and stamps them `t0 + k * dt`.
    pub fn new(t0: f64, dt: f64, mut fields: Vec<Field>) -> Result<Self> {
        if !(dt.is_finite() && dt >= 0.0) {
            return Err(Error::config(format!("sequence step must be finite and >= 0, got {dt}")));
        }
        if let Some(first) = fields.first() {
            let (grid, ch) = (*first.grid(), first.channels());
            if let Some(k) = fields
                .iter()
                .position(|f| *f.grid() != grid || f.channels() != ch)
            {
                return Err(Error::shape(format!(
                    "sequence element {k} does not share the grid/channels of element 0"
                )));
            }
        }
        for (k, f) in fields.iter_mut().enumerate() {
            f.t = t0 + k as f64 * dt;
        }
        Ok(FieldSequence { fields, t0, dt })
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn into_fields(self) -> Vec<Field> {
        self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn last(&self) -> Option<&Field> {
        self.fields.last()
    }
}
