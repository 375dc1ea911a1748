//! Discretized forward/reverse flow integration.
//!
//! Explicit Euler throughout: the training loop is defined in terms of these
//! exact update rules, so a higher-order integrator would change the trained
//! object. Time runs from data (t=0) toward noise (t=1); the dual flows act
//! on [0, tau].

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// (tau, N, delta = tau/N) discretization shared by both flows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSchedule {
    tau: f32,
    n: usize,
}

impl FlowSchedule {
    /// tau in (0, 1], N >= 1. (tau = 1 supports full-range generation from
    /// noise; attack configs constrain tau < 1 separately.)
    pub fn new(tau: f32, n: usize) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(CoreError::InvalidArgument(format!("tau {tau} outside (0, 1]")));
        }
        if n == 0 {
            return Err(CoreError::InvalidArgument("step count must be positive".into()));
        }
        Ok(FlowSchedule { tau, n })
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn steps(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f32 {
        self.tau / self.n as f32
    }

    /// i-th grid time, clamped so rounding never pushes past tau.
    pub fn time(&self, i: usize) -> f32 {
        (i as f32 * self.delta()).min(self.tau)
    }
}

/// Ordered (time, state) pairs along one integration.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f32>,
    pub states: Vec<Tensor>,
}

impl Trajectory {
    fn push(&mut self, t: f32, x: Tensor) {
        self.times.push(t);
        self.states.push(x);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State recorded at grid time `t` (exact f32 match against stored times).
    pub fn state_at(&self, t: f32) -> Option<&Tensor> {
        self.times.iter().position(|&s| s == t).map(|i| &self.states[i])
    }
}

/// Reverse-step noise: gamma = 0 is the deterministic sampler, gamma > 0 adds
/// gamma * t * sqrt(delta) * xi per step with xi ~ N(0, I) from `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub gamma: f32,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn deterministic() -> Self {
        NoiseSpec { gamma: 0.0, seed: 0 }
    }

    pub fn stochastic(gamma: f32, seed: u64) -> Result<Self> {
        if gamma <= 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "stochastic noise needs gamma > 0, got {gamma}"
            )));
        }
        Ok(NoiseSpec { gamma, seed })
    }

    pub fn is_deterministic(&self) -> bool {
        self.gamma == 0.0
    }
}

fn lincomb(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(CoreError::Shape(format!(
            "lincomb shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// N explicit-Euler steps of the unconditional field from t=0 to t=tau:
/// x_t = x_{t-1} + v(x_{t-1}, (t-1) delta) * delta.
pub fn forward_integrate<V>(
    mut velocity: V,
    x0: &Tensor,
    sched: &FlowSchedule,
) -> Result<(Tensor, Trajectory)>
where
    V: FnMut(&Tensor, f32) -> Result<Tensor>,
{
    let delta = sched.delta() as f64;
    let mut traj = Trajectory { times: Vec::new(), states: Vec::new() };
    let mut x = x0.clone();
    traj.push(0.0, x.clone());
    for i in 1..=sched.steps() {
        let t_prev = sched.time(i - 1);
        let v = velocity(&x, t_prev)?;
        x = lincomb(&x, 1.0, &v, delta)?;
        traj.push(sched.time(i), x.clone());
    }
    Ok((x, traj))
}

/// N Euler steps back from t=tau to t=0: x_{t-1} = x_t - v(x_t, t delta) delta,
/// plus the stochastic term when `noise.gamma > 0`. The condition (class or
/// null) is baked into the velocity closure by the caller.
pub fn reverse_integrate<V>(
    mut velocity: V,
    x_tau: &Tensor,
    sched: &FlowSchedule,
    noise: &NoiseSpec,
) -> Result<(Tensor, Trajectory)>
where
    V: FnMut(&Tensor, f32) -> Result<Tensor>,
{
    let delta = sched.delta() as f64;
    let mut rng = Rng::seed_from(noise.seed);
    let mut traj = Trajectory { times: Vec::new(), states: Vec::new() };
    let mut x = x_tau.clone();
    traj.push(sched.tau(), x.clone());
    for i in (1..=sched.steps()).rev() {
        let t = sched.time(i);
        let v = velocity(&x, t)?;
        x = lincomb(&x, 1.0, &v, -delta)?;
        if noise.gamma > 0.0 {
            let scale = noise.gamma as f64 * t as f64 * delta.sqrt();
            let data: Vec<f32> = x
                .data()
                .iter()
                .map(|&xi| (xi as f64 + scale * rng.normal_f64()) as f32)
                .collect();
            x = Tensor::new(x.shape().to_vec(), data)?;
        }
        traj.push(sched.time(i - 1), x.clone());
    }
    Ok((x, traj))
}

/// One-shot prediction of the t=0 state under a straight-line path:
/// x_t - t * v. Valid for t in (0, 1].
pub fn extrapolate_x0(x_t: &Tensor, v: &Tensor, t: f32) -> Result<Tensor> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(CoreError::InvalidArgument(format!("extrapolation time {t} outside (0, 1]")));
    }
    lincomb(x_t, 1.0, v, -(t as f64))
}

/// Linear flow-matching marginal (1-t) x0 + t z.
pub fn marginal_sample(x0: &Tensor, t: f32, z: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::InvalidArgument(format!("marginal time {t} outside [0, 1]")));
    }
    lincomb(x0, 1.0 - t as f64, z, t as f64)
}

/// l-infinity gap of reverse(forward(x0)) against x0 with one shared field:
/// a first-order Euler reversibility diagnostic.
pub fn roundtrip_error<V>(mut velocity: V, x0: &Tensor, sched: &FlowSchedule) -> Result<f32>
where
    V: FnMut(&Tensor, f32) -> Result<Tensor>,
{
    let (x_tau, _) = forward_integrate(&mut velocity, x0, sched)?;
    let (x_back, _) =
        reverse_integrate(&mut velocity, &x_tau, sched, &NoiseSpec::deterministic())?;
    x_back.linf_dist(x0)
}
