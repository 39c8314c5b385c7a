//! Mean-reverting diffusion mathematics: coefficient schedules, closed-form
//! marginals, exact forward transitions, score computation, the reverse-time
//! Euler step, and the optimal reverse state.
//!
//! The forward process is the Ornstein-Uhlenbeck family
//! `dx = theta_t (mu - x) dt + sigma_t dw` with the coefficient tie
//! `sigma_t^2 / theta_t = 2 lambda^2`, which gives the Gaussian marginal
//! `N(mu + (x0 - mu) e^{-theta_bar}, lambda^2 (1 - e^{-2 theta_bar}))`.
//! Time is discretized into `T` unit index steps; all coefficients absorb the
//! step through the per-step increments `dtheta[i]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2;

/// Shape of the mean-reversion speed over index time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaProfile {
    /// Equal increments at every step.
    Constant,
    /// Increments proportional to `1 - cos(pi i / T)`: small early steps
    /// preserve signal longer.
    CosineIncreasing,
}

/// Serializable schedule description; `build` expands it to coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub t: usize,
    pub profile: ThetaProfile,
    pub lambda: f64,
    pub terminal_decay: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            t: 50,
            profile: ThetaProfile::CosineIncreasing,
            lambda: 0.2,
            terminal_decay: 0.005,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.t, self.lambda, self.profile, self.terminal_decay)
    }
}

/// Discrete-time realization of the diffusion coefficients.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    t: usize,
    lambda: f64,
    /// `dtheta[i-1]` = increment of the accumulated reversion at step `i`.
    dtheta: Vec<f64>,
    /// `theta_bar[i-1]` = accumulated reversion after step `i`.
    theta_bar: Vec<f64>,
    /// `v[i-1]` = marginal variance after step `i`.
    v: Vec<f64>,
}

impl DiffusionSchedule {
    /// Builds a schedule directly from per-step increments. All increments
    /// must be positive.
    pub fn from_dtheta(dtheta: Vec<f64>, lambda: f64) -> Result<Self> {
        if dtheta.is_empty() {
            return Err(Error::BadParam("schedule needs at least one step".into()));
        }
        if !(lambda > 0.0) {
            return Err(Error::BadParam(format!("lambda {lambda} must be > 0")));
        }
        if dtheta.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::BadParam("all dtheta increments must be positive".into()));
        }
        let mut theta_bar = Vec::with_capacity(dtheta.len());
        let mut acc = 0.0;
        for d in &dtheta {
            acc += d;
            theta_bar.push(acc);
        }
        let v = theta_bar
            .iter()
            .map(|tb| lambda * lambda * (1.0 - (-2.0 * tb).exp()))
            .collect();
        Ok(Self {
            t: dtheta.len(),
            lambda,
            dtheta,
            theta_bar,
            v,
        })
    }

    #[inline]
    pub fn t(&self) -> usize {
        self.t
    }

    #[inline]
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Per-step increment at step `i` (1-based).
    #[inline]
    pub fn dtheta(&self, i: usize) -> f64 {
        self.dtheta[i - 1]
    }

    /// Accumulated reversion after step `i`; `theta_bar(0) = 0`.
    #[inline]
    pub fn theta_bar(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.theta_bar[i - 1]
        }
    }

    /// Marginal variance after step `i`; `var(0) = 0`.
    #[inline]
    pub fn var(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.v[i - 1]
        }
    }

    /// Implied squared volatility of step `i` under the coefficient tie.
    #[inline]
    pub fn sigma_sq(&self, i: usize) -> f64 {
        2.0 * self.lambda * self.lambda * self.dtheta(i)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i < 1 || i > self.t {
            return Err(Error::IndexOutOfRange { i, t: self.t });
        }
        Ok(())
    }
}

/// Discretizes the reversion speed so that `e^{-theta_bar(T)}` equals
/// `terminal_decay` exactly (default 0.005).
pub fn make_schedule(
    t: usize,
    lambda: f64,
    profile: ThetaProfile,
    terminal_decay: f64,
) -> Result<DiffusionSchedule> {
    if t < 1 {
        return Err(Error::BadParam("T must be >= 1".into()));
    }
    if !(terminal_decay > 0.0 && terminal_decay < 1.0) {
        return Err(Error::BadParam(format!(
            "terminal_decay {terminal_decay} outside (0, 1)"
        )));
    }
    let total = -terminal_decay.ln();
    let weights: Vec<f64> = match profile {
        ThetaProfile::Constant => vec![1.0; t],
        ThetaProfile::CosineIncreasing => (1..=t)
            .map(|i| 1.0 - (std::f64::consts::PI * i as f64 / t as f64).cos())
            .collect(),
    };
    let sum: f64 = weights.iter().sum();
    let dtheta = weights.iter().map(|w| total * w / sum).collect();
    DiffusionSchedule::from_dtheta(dtheta, lambda)
}

/// Diffusion state: a value field at a timestep index.
#[derive(Debug, Clone)]
pub struct SdeState {
    pub x: Grid2<f64>,
    pub i: usize,
}

fn check_dims(a: &Grid2<f64>, b: &Grid2<f64>, what: &str) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::DimMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Closed-form marginal at step `i`: mean `mu + (x0 - mu) e^{-theta_bar(i)}`
/// and variance `var(i)`.
pub fn marginal(
    x0: &Grid2<f64>,
    mu: &Grid2<f64>,
    sched: &DiffusionSchedule,
    i: usize,
) -> Result<(Grid2<f64>, f64)> {
    sched.check_index(i)?;
    check_dims(x0, mu, "marginal")?;
    let decay = (-sched.theta_bar(i)).exp();
    let mean = x0.zip_map(mu, |x, m| m + (x - m) * decay);
    Ok((mean, sched.var(i)))
}

/// Draws the marginal state `mean + sqrt(var) * noise`.
pub fn sample_state(
    x0: &Grid2<f64>,
    mu: &Grid2<f64>,
    sched: &DiffusionSchedule,
    i: usize,
    noise: &Grid2<f64>,
) -> Result<SdeState> {
    let (mean, var) = marginal(x0, mu, sched, i)?;
    check_dims(x0, noise, "sample_state noise")?;
    let sd = var.sqrt();
    let x = mean.zip_map(noise, |m, e| m + sd * e);
    Ok(SdeState { x, i })
}

/// Exact one-step transition kernel from step `i - 1` to step `i`:
/// `x_i = mu + (x_{i-1} - mu) e^{-dtheta_i} + sqrt(lambda^2 (1 - e^{-2 dtheta_i})) noise`.
pub fn forward_transition(
    x_prev: &Grid2<f64>,
    mu: &Grid2<f64>,
    sched: &DiffusionSchedule,
    i: usize,
    noise: &Grid2<f64>,
) -> Result<SdeState> {
    sched.check_index(i)?;
    check_dims(x_prev, mu, "forward_transition")?;
    check_dims(x_prev, noise, "forward_transition noise")?;
    let a = (-sched.dtheta(i)).exp();
    let sd = (sched.lambda().powi(2) * (1.0 - a * a)).sqrt();
    let mut x = x_prev.zip_map(mu, |x, m| m + (x - m) * a);
    for (xv, e) in x.as_mut_slice().iter_mut().zip(noise.iter()) {
        *xv += sd * e;
    }
    Ok(SdeState { x, i })
}

/// Score of the Gaussian marginal from predicted noise:
/// `score = -noise_hat / sqrt(var(i))`.
pub fn score_from_noise(
    noise_hat: &Grid2<f64>,
    sched: &DiffusionSchedule,
    i: usize,
) -> Result<Grid2<f64>> {
    sched.check_index(i)?;
    let v = sched.var(i);
    if v <= 0.0 {
        return Err(Error::DegenerateVariance(i));
    }
    let inv = 1.0 / v.sqrt();
    Ok(noise_hat.map(|e| -e * inv))
}

/// Reverse-time Euler-Maruyama update with unit step in index time:
/// `x_{i-1} = x_i - [dtheta_i (mu - x_i) - 2 lambda^2 dtheta_i score] + sqrt(2 lambda^2 dtheta_i) noise`.
pub fn reverse_euler_step(
    x_i: &Grid2<f64>,
    mu: &Grid2<f64>,
    score: &Grid2<f64>,
    sched: &DiffusionSchedule,
    i: usize,
    noise: &Grid2<f64>,
) -> Result<Grid2<f64>> {
    sched.check_index(i)?;
    check_dims(x_i, mu, "reverse_euler_step")?;
    check_dims(x_i, score, "reverse_euler_step score")?;
    check_dims(x_i, noise, "reverse_euler_step noise")?;
    let dth = sched.dtheta(i);
    let g2 = sched.sigma_sq(i);
    let sd = g2.sqrt();
    let mut out = Grid2::filled(x_i.rows(), x_i.cols(), 0.0f64);
    let (xs, ms, ss, ns, os) = (
        x_i.as_slice(),
        mu.as_slice(),
        score.as_slice(),
        noise.as_slice(),
        out.as_mut_slice(),
    );
    for k in 0..xs.len() {
        os[k] = xs[k] - (dth * (ms[k] - xs[k]) - g2 * ss[k]) + sd * ns[k];
    }
    Ok(out)
}

/// Mode (= mean) of the Gaussian posterior `p(x_{i-1} | x_i, x0)`:
///
/// with `a = e^{-dtheta_i}`, `b = e^{-theta_bar(i-1)}`,
/// `s2 = lambda^2 (1 - a^2)`, `q2 = lambda^2 (1 - b^2)`, `v_i = lambda^2 (1 - a^2 b^2)`:
/// `x* = mu + (a q2 / v_i)(x_i - mu) + (b s2 / v_i)(x0_hat - mu)`.
pub fn optimal_reverse_state(
    x_i: &Grid2<f64>,
    x0_hat: &Grid2<f64>,
    mu: &Grid2<f64>,
    sched: &DiffusionSchedule,
    i: usize,
) -> Result<Grid2<f64>> {
    sched.check_index(i)?;
    check_dims(x_i, x0_hat, "optimal_reverse_state x0")?;
    check_dims(x_i, mu, "optimal_reverse_state mu")?;
    let lam2 = sched.lambda().powi(2);
    let a = (-sched.dtheta(i)).exp();
    let b = (-sched.theta_bar(i - 1)).exp();
    let s2 = lam2 * (1.0 - a * a);
    let q2 = lam2 * (1.0 - b * b);
    let v_i = lam2 * (1.0 - (a * b).powi(2));
    let w_xi = a * q2 / v_i;
    let w_x0 = b * s2 / v_i;
    let mut out = Grid2::filled(x_i.rows(), x_i.cols(), 0.0f64);
    let (xs, zs, ms, os) = (
        x_i.as_slice(),
        x0_hat.as_slice(),
        mu.as_slice(),
        out.as_mut_slice(),
    );
    for k in 0..xs.len() {
        os[k] = ms[k] + w_xi * (xs[k] - ms[k]) + w_x0 * (zs[k] - ms[k]);
    }
    Ok(out)
}

/// Inverts the marginal sampling relation for a one-step clean estimate:
/// `x0_hat = mu + (x_i - sqrt(var(i)) noise_hat - mu) e^{+theta_bar(i)}`.
pub fn x0_from_noise(
    x_i: &Grid2<f64>,
    noise_hat: &Grid2<f64>,
    mu: &Grid2<f64>,
    sched: &DiffusionSchedule,
    i: usize,
) -> Result<Grid2<f64>> {
    sched.check_index(i)?;
    check_dims(x_i, noise_hat, "x0_from_noise noise")?;
    check_dims(x_i, mu, "x0_from_noise mu")?;
    let sd = sched.var(i).sqrt();
    let grow = sched.theta_bar(i).exp();
    let mut out = Grid2::filled(x_i.rows(), x_i.cols(), 0.0f64);
    let (xs, es, ms, os) = (
        x_i.as_slice(),
        noise_hat.as_slice(),
        mu.as_slice(),
        out.as_mut_slice(),
    );
    for k in 0..xs.len() {
        os[k] = ms[k] + (xs[k] - sd * es[k] - ms[k]) * grow;
    }
    Ok(out)
}
