//! Classical RK4 integration of the PDEs over the same derivative filters,
//! used as ground truth for training and evaluation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{Field, FieldSequence, Grid};
use crate::pddo::{check_spacing, DerivativeFilterSet};
use crate::physics::{rhs, Eager, PdeSpec};

/// Fields whose sup-norm exceeds this are treated as a blow-up.
pub const BLOW_UP: f64 = 1e6;
/// Explicit-diffusion safety factor in `dt <= c dx^2 / D`.
pub const DIFFUSION_LIMIT: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct SolveConfig {
    pub spec: PdeSpec,
    pub grid: Grid,
    pub t_end: f64,
    pub dt_ref: f64,
    pub save_every: usize,
    pub filters: Arc<DerivativeFilterSet>,
}

impl SolveConfig {
    /// Config whose snapshots are `dt_save` apart; `dt_save` must be an
    /// integer multiple of `dt_ref`.
    pub fn with_save_interval(
        spec: PdeSpec,
        grid: Grid,
        t_end: f64,
        dt_ref: f64,
        dt_save: f64,
        filters: Arc<DerivativeFilterSet>,
    ) -> Result<Self> {
        if !(dt_ref > 0.0 && dt_ref.is_finite()) {
            return Err(Error::config(format!("dt_ref must be positive, got {dt_ref}")));
        }
        if dt_ref > dt_save * (1.0 + 1e-12) {
            return Err(Error::config(format!(
                "dt_ref {dt_ref} exceeds the save interval {dt_save}"
            )));
        }
        let ratio = dt_save / dt_ref;
        let save_every = ratio.round();
        if (ratio - save_every).abs() > 1e-9 * ratio {
            return Err(Error::config(format!(
                "save interval {dt_save} is not a multiple of dt_ref {dt_ref}"
            )));
        }
        let cfg = SolveConfig {
            spec,
            grid,
            t_end,
            dt_ref,
            save_every: save_every as usize,
            filters,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        check_spacing(self.grid.dx(), &self.filters)?;
        if !(self.dt_ref > 0.0 && self.dt_ref.is_finite()) {
            return Err(Error::config(format!("dt_ref must be positive, got {}", self.dt_ref)));
        }
        if self.save_every == 0 {
            return Err(Error::config("save_every must be at least 1"));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::config(format!("t_end must be non-negative, got {}", self.t_end)));
        }
        check_stability(&self.spec, &self.grid, self.dt_ref)?;
        self.total_steps().map(|_| ())
    }

    fn total_steps(&self) -> Result<usize> {
        let ratio = self.t_end / self.dt_ref;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::config(format!(
                "t_end {} is not a multiple of dt_ref {}",
                self.t_end, self.dt_ref
            )));
        }
        if steps as usize % self.save_every != 0 {
            return Err(Error::config(format!(
                "t_end {} is not a multiple of the save interval",
                self.t_end
            )));
        }
        Ok(steps as usize)
    }

    pub fn save_dt(&self) -> f64 {
        self.dt_ref * self.save_every as f64
    }
}

/// Rejects steps beyond the explicit-diffusion bound.
pub fn check_stability(spec: &PdeSpec, grid: &Grid, dt: f64) -> Result<()> {
    let d = spec.max_diffusivity();
    if d > 0.0 {
        let limit = DIFFUSION_LIMIT * grid.dx() * grid.dx() / d;
        if dt > limit {
            return Err(Error::config(format!(
                "dt_ref {dt} exceeds the diffusion stability limit {limit:.3e}"
            )));
        }
    }
    Ok(())
}

fn eval(spec: &PdeSpec, alg: &mut Eager, u: &[f64], v: &[f64], stage: usize, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (fu, fv) = rhs(spec, alg, &u.to_vec(), &v.to_vec());
    if fu.iter().chain(&fv).any(|x| !x.is_finite()) {
        return Err(Error::non_finite(format!("RK4 stage {stage} produced a non-finite rate at t = {t}")));
    }
    Ok((fu, fv))
}

fn axpy(x: &[f64], a: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(x, y)| x + a * y).collect()
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step(field: &Field, spec: &PdeSpec, filters: &DerivativeFilterSet, dt: f64) -> Result<Field> {
    if field.channels() != 2 {
        return Err(Error::shape(format!("PDE fields need 2 channels, got {}", field.channels())));
    }
    check_spacing(field.grid().dx(), filters)?;
    let mut alg = Eager::new(field.grid().n(), 1, filters);
    let (u, v) = (field.channel(0), field.channel(1));
    let t = field.t;
    let (k1u, k1v) = eval(spec, &mut alg, &u, &v, 1, t)?;
    let (k2u, k2v) = eval(spec, &mut alg, &axpy(&u, dt / 2.0, &k1u), &axpy(&v, dt / 2.0, &k1v), 2, t)?;
    let (k3u, k3v) = eval(spec, &mut alg, &axpy(&u, dt / 2.0, &k2u), &axpy(&v, dt / 2.0, &k2v), 3, t)?;
    let (k4u, k4v) = eval(spec, &mut alg, &axpy(&u, dt, &k3u), &axpy(&v, dt, &k3v), 4, t)?;
    let combine = |x: &[f64], k1: &[f64], k2: &[f64], k3: &[f64], k4: &[f64]| -> Vec<f64> {
        (0..x.len())
            .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    };
    let nu = combine(&u, &k1u, &k2u, &k3u, &k4u);
    let nv = combine(&v, &k1v, &k2v, &k3v, &k4v);
    Field::from_channels(*field.grid(), &[&nu, &nv], t + dt)
        .map_err(|_| Error::non_finite(format!("RK4 update became non-finite at t = {}", t + dt)))
}

/// Integrates from `ic` to `t_end`, keeping every `save_every`-th state.
pub fn solve(cfg: &SolveConfig, ic: &Field) -> Result<FieldSequence> {
    cfg.validate()?;
    if ic.grid() != &cfg.grid {
        return Err(Error::shape("initial condition is not on the solver grid"));
    }
    let steps = cfg.total_steps()?;
    let t0 = ic.t;
    let mut out = vec![ic.clone()];
    let mut cur = ic.clone();
    for k in 1..=steps {
        cur = rk4_step(&cur, &cfg.spec, &cfg.filters, cfg.dt_ref)?;
        // Reset accumulated rounding in the timestamp.
        cur.t = t0 + k as f64 * cfg.dt_ref;
        let m = cur.max_abs();
        if m > BLOW_UP {
            return Err(Error::BlowUp { t: cur.t, max_abs: m });
        }
        if k % cfg.save_every == 0 {
            out.push(cur.clone());
        }
    }
    FieldSequence::new(t0, cfg.save_dt(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::sample_field;
    use crate::physics::sample_burgers_ic;
    use std::f64::consts::PI;

    fn cfg(spec: PdeSpec, grid: Grid, t_end: f64, dt: f64, every: usize) -> SolveConfig {
        SolveConfig {
            spec,
            grid,
            t_end,
            dt_ref: dt,
            save_every: every,
            filters: DerivativeFilterSet::cached(2, grid.dx(), 3.015).unwrap(),
        }
    }

    #[test]
    fn constant_field_is_stationary() {
        let grid = Grid::new(16, 0.0, 1.0).unwrap();
        let f = Field::constant(grid, 2, 0.4);
        let fl = DerivativeFilterSet::build(2, grid.dx(), 3.015).unwrap();
        let g = rk4_step(&f, &PdeSpec::burgers(0.005), &fl, 0.01).unwrap();
        for (a, b) in g.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.t, 0.01);
    }

    #[test]
    fn linear_decay_matches_taylor_polynomial() {
        // A spatially constant Gray-Scott state with b = 0 and v = 0 obeys
        // u_t = 0, v_t = -d v; use u = 0, v = 1 for du/dt = -d u on v.
        let grid = Grid::new(8, 0.0, 1.0).unwrap();
        let fl = DerivativeFilterSet::build(2, grid.dx(), 3.015).unwrap();
        let spec = PdeSpec::gray_scott(0.0, 0.0, 0.0, 1.0);
        let f = Field::from_channels(grid, &[&[0.0; 64], &[1.0; 64]], 0.0).unwrap();
        let h: f64 = 0.1;
        let g = rk4_step(&f, &spec, &fl, h).unwrap();
        let taylor = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!(g.channel(1).iter().all(|v| (v - taylor).abs() < 1e-14));
        assert!((taylor - (-h).exp()).abs() < 2.0 * h.powi(5) / 120.0);
    }

    #[test]
    fn heat_equation_decays_at_analytic_rate() {
        let grid = Grid::new(64, 0.0, 1.0).unwrap();
        let nu = 0.005;
        let ic = sample_field(&grid, |x, _| [(2.0 * PI * x).sin(), 0.0]).unwrap();
        let c = cfg(PdeSpec::heat(nu), grid, 1.0, 0.005, 200);
        let seq = solve(&c, &ic).unwrap();
        let last = seq.last().unwrap();
        let ratio = last.channel(0)[16] / ic.channel(0)[16];
        let want = (-4.0 * PI * PI * nu).exp();
        assert!((ratio / want - 1.0).abs() < 0.01, "{ratio} vs {want}");
    }

    #[test]
    fn zero_horizon_returns_only_the_ic() {
        let grid = Grid::new(16, 0.0, 1.0).unwrap();
        let ic = sample_burgers_ic(0, &grid).unwrap();
        let seq = solve(&cfg(PdeSpec::burgers(0.005), grid, 0.0, 0.001, 1), &ic).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.fields()[0], ic);
    }

    #[test]
    fn saving_cadence_and_times() {
        let grid = Grid::new(16, 0.0, 1.0).unwrap();
        let ic = sample_burgers_ic(0, &grid).unwrap();
        let seq = solve(&cfg(PdeSpec::burgers(0.005), grid, 0.1, 0.005, 4), &ic).unwrap();
        assert_eq!(seq.len(), 6);
        assert!((seq.dt() - 0.02).abs() < 1e-15);
        assert!((seq.fields()[5].t - 0.1).abs() < 1e-12);
    }

    #[test]
    fn unstable_step_is_a_config_error() {
        let grid = Grid::new(32, 0.0, 1.0).unwrap();
        let ic = sample_burgers_ic(0, &grid).unwrap();
        let err = solve(&cfg(PdeSpec::burgers(0.5), grid, 0.1, 0.01, 1), &ic).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let fl = DerivativeFilterSet::cached(2, grid.dx(), 3.015).unwrap();
        assert!(SolveConfig::with_save_interval(PdeSpec::burgers(0.005), grid, 0.1, 0.003, 0.002, fl).is_err());
    }

    #[test]
    fn gray_scott_reference_satisfies_its_pde() {
        use crate::physics::{output_mse, output_residual, sample_ic, IcKind, IcSpec};
        let grid = Grid::new(64, -0.2, 0.2).unwrap();
        let spec = PdeSpec::gray_scott(2e-5, 1e-5, 0.04, 0.1);
        let ic = sample_ic(&IcSpec { kind: IcKind::GrayScott, seed: 1, amplitude: 1.0 }, &grid).unwrap();
        let c = cfg(spec, grid, 2.0, 0.05, 1);
        let seq = solve(&c, &ic).unwrap();
        let res = output_residual(&spec, &seq, &c.filters).unwrap();
        let mse = output_mse(&res);
        assert!(mse < 1e-3, "{mse}");
    }

    #[test]
    fn halving_the_step_barely_changes_burgers() {
        let grid = Grid::new(32, 0.0, 1.0).unwrap();
        let raw = sample_burgers_ic(2, &grid).unwrap();
        let ic = Field::from_data(grid, 2, raw.data().iter().map(|v| 0.1 * v).collect(), 0.0).unwrap();
        let spec = PdeSpec::burgers(0.005);
        let a = solve(&cfg(spec, grid, 0.1, 0.001, 100), &ic).unwrap();
        let b = solve(&cfg(spec, grid, 0.1, 0.0005, 200), &ic).unwrap();
        let (fa, fb) = (a.last().unwrap(), b.last().unwrap());
        let diff = fa.data().iter().zip(fb.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn blow_up_is_reported_with_time() {
        // Pure reaction u_t = -b u + b with b < 0 grows exponentially.
        let grid = Grid::new(8, 0.0, 1.0).unwrap();
        let ic = Field::from_channels(grid, &[&[2.0; 64], &[0.0; 64]], 0.0).unwrap();
        let spec = PdeSpec::gray_scott(0.0, 0.0, -50.0, 0.0);
        let err = solve(&cfg(spec, grid, 1.0, 0.01, 1), &ic).unwrap_err();
        match err {
            Error::BlowUp { t, max_abs } => assert!(t > 0.0 && t <= 1.0 && max_abs > BLOW_UP),
            e => panic!("{e}"),
        }
    }
}
