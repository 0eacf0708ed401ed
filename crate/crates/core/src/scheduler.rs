//! Rectified-flow interpolation and the discrete timestep schedule.
//!
//! Timesteps `tau` in `0..1000` map to noise levels through the shifted
//! schedule `t = s*u / (1 + (s-1)*u)` with `u = 1 - tau/1000`. The shift is
//! recovered by least squares from published `(tau, t)` anchors.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{Real, Tensor};

pub const NUM_TIMESTEPS: usize = 1000;

/// `(timestep, t)` pairs of the base model's scheduler.
pub const ANCHORS: [(usize, f64); 3] = [(250, 0.87), (500, 0.69), (750, 0.43)];

pub const DEFAULT_PRIOR_TIMESTEP: usize = 750;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    shift: f64,
    table: Vec<f64>,
    prior_timestep: usize,
    t_p: f64,
}

/// User-facing fidelity control in `[0, 1]`; 1 keeps the input noise-free.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct FidelityWeight(f64);

impl FidelityWeight {
    pub fn new(f: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&f) {
            contract!("fidelity weight {f} outside [0, 1]");
        }
        Ok(Self(f))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// How the multi-step sampler spaces its grid between `t_s` and 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridSpacing {
    /// Uniform in timestep, mapped through the schedule.
    #[default]
    Timestep,
    /// Uniform in `t`.
    Linear,
}

fn shifted(u: f64, shift: f64) -> f64 {
    shift * u / (1.0 + (shift - 1.0) * u)
}

fn timestep_u(tau: f64) -> f64 {
    1.0 - tau / NUM_TIMESTEPS as f64
}

pub fn timestep_to_t(tau: usize, shift: f64) -> Result<f64> {
    if tau >= NUM_TIMESTEPS {
        contract!("timestep {tau} outside 0..{NUM_TIMESTEPS}");
    }
    if !(shift > 1.0) {
        contract!("shift must exceed 1, got {shift}");
    }
    Ok(shifted(timestep_u(tau as f64), shift))
}

/// Shift that exactly reproduces a single `(tau, t)` pair.
fn invert_point(tau: usize, t: f64) -> f64 {
    let u = timestep_u(tau as f64);
    t * (1.0 - u) / (u * (1.0 - t))
}

/// Least-squares shift for the given anchors (Gauss-Newton on one parameter).
pub fn fit_shift(points: &[(usize, f64)]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Fit("no points to fit".into()));
    }
    for &(tau, t) in points {
        if tau == 0 || tau >= NUM_TIMESTEPS {
            return Err(Error::Fit(format!(
                "timestep {tau} carries no shift information or is out of range"
            )));
        }
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Fit(format!("t = {t} outside (0, 1)")));
        }
    }
    if points.len() == 1 {
        return Ok(invert_point(points[0].0, points[0].1));
    }
    let first_u = timestep_u(points[0].0 as f64);
    if points
        .iter()
        .all(|&(tau, _)| timestep_u(tau as f64) == first_u)
    {
        return Err(Error::Fit("all points share one timestep".into()));
    }

    let mut s = points
        .iter()
        .map(|&(tau, t)| invert_point(tau, t))
        .sum::<f64>()
        / points.len() as f64;
    for _ in 0..100 {
        let (mut jtj, mut jtr) = (0.0, 0.0);
        for &(tau, t) in points {
            let u = timestep_u(tau as f64);
            let denom = 1.0 + (s - 1.0) * u;
            let residual = shifted(u, s) - t;
            let jac = u * (1.0 - u) / (denom * denom);
            jtj += jac * jac;
            jtr += jac * residual;
        }
        let step = jtr / jtj;
        s -= step;
        if step.abs() < 1e-14 * s.abs().max(1.0) {
            break;
        }
    }
    if !s.is_finite() {
        return Err(Error::Fit("shift diverged".into()));
    }
    Ok(s)
}

pub fn sum_squared_error(points: &[(usize, f64)], shift: f64) -> f64 {
    points
        .iter()
        .map(|&(tau, t)| (shifted(timestep_u(tau as f64), shift) - t).powi(2))
        .sum()
}

impl NoiseSchedule {
    pub fn new(shift: f64, prior_timestep: usize) -> Result<Self> {
        let table = (0..NUM_TIMESTEPS)
            .map(|tau| timestep_to_t(tau, shift))
            .collect::<Result<Vec<_>>>()?;
        if prior_timestep >= NUM_TIMESTEPS {
            contract!("prior timestep {prior_timestep} out of range");
        }
        let t_p = table[prior_timestep];
        Ok(Self {
            shift,
            table,
            prior_timestep,
            t_p,
        })
    }

    /// Schedule fitted to [`ANCHORS`] with the given prior timestep.
    pub fn fitted(prior_timestep: usize) -> Result<Self> {
        Self::new(fit_shift(&ANCHORS)?, prior_timestep)
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn t_p(&self) -> f64 {
        self.t_p
    }

    pub fn prior_timestep(&self) -> usize {
        self.prior_timestep
    }

    pub fn t_at(&self, tau: usize) -> f64 {
        self.table[tau]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Continuous inverse of the schedule: the (fractional) timestep of `t`.
    pub fn timestep_of(&self, t: f64) -> f64 {
        let s = self.shift;
        let u = t / (s - (s - 1.0) * t);
        NUM_TIMESTEPS as f64 * (1.0 - u)
    }

    /// Descending grid `t_s = g_0 > ... > g_n = 0`.
    pub fn grid(&self, t_s: f64, n_steps: usize, spacing: GridSpacing) -> Vec<f64> {
        let n = n_steps as f64;
        let mut g: Vec<f64> = match spacing {
            GridSpacing::Linear => (0..=n_steps).map(|i| t_s * (1.0 - i as f64 / n)).collect(),
            GridSpacing::Timestep => {
                let start = self.timestep_of(t_s);
                let end = NUM_TIMESTEPS as f64;
                (0..=n_steps)
                    .map(|i| {
                        let tau = start + (end - start) * i as f64 / n;
                        shifted(timestep_u(tau), self.shift)
                    })
                    .collect()
            }
        };
        g[0] = t_s;
        g[n_steps] = 0.0;
        g
    }
}

/// `(1 - t) x0 + t eps`.
pub fn interpolate<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        contract!("interpolation time {t} outside [0, 1]");
    }
    let a = T::from_f64_lossy(1.0 - t);
    let b = T::from_f64_lossy(t);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Rectified-flow velocity target `eps - x0`.
pub fn velocity_target<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    eps.sub(x0)
}

/// Control-stream noise level `(1 - f) t_p`.
pub fn control_t(f: FidelityWeight, t_p: f64) -> Result<f64> {
    if !(t_p > 0.0 && t_p < 1.0) {
        contract!("prior noise level {t_p} outside (0, 1)");
    }
    Ok((1.0 - f.value()) * t_p)
}

/// Single Euler step from `t_p` to 0: `x + (0 - t_p) v`.
pub fn one_step_update<T: Real>(x_tp: &Tensor<T>, v: &Tensor<T>, t_p: f64) -> Result<Tensor<T>> {
    euler_step(x_tp, v, t_p, 0.0)
}

fn euler_step<T: Real>(x: &Tensor<T>, v: &Tensor<T>, t_from: f64, t_to: f64) -> Result<Tensor<T>> {
    let dt = T::from_f64_lossy(t_to - t_from);
    x.zip_map(v, |xi, vi| xi + dt * vi)
}

/// Integrates `dx/dt = v(x, t)` from `t_s` down to 0 in `n_steps` Euler steps.
pub fn euler_denoise_from<T: Real, F>(
    velocity: F,
    x_ts: &Tensor<T>,
    t_s: f64,
    n_steps: usize,
    schedule: &NoiseSchedule,
    spacing: GridSpacing,
) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    if n_steps == 0 {
        contract!("n_steps must be at least 1");
    }
    if !(0.0..=1.0).contains(&t_s) {
        contract!("start time {t_s} outside [0, 1]");
    }
    euler_integrate(velocity, x_ts, &schedule.grid(t_s, n_steps, spacing))
}

/// Euler integration along an explicit descending grid.
pub fn euler_integrate<T: Real, F>(
    mut velocity: F,
    x_ts: &Tensor<T>,
    grid: &[f64],
) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    if grid.len() < 2 {
        contract!("grid needs at least one step");
    }
    let mut x = x_ts.clone();
    if grid[0] == 0.0 {
        return Ok(x);
    }
    for w in grid.windows(2) {
        let v = velocity(&x, w[0])?;
        x = euler_step(&x, &v, w[0], w[1])?;
    }
    Ok(x)
}
