//! Numerical verification of the boundary-damped ascending-flow construction.
//!
//! From a smooth test function j on a box, build X = eta * mu^m * grad j where
//! mu vanishes on the boundary and eta vanishes on a plateau around each
//! critical point. Integrating X must (a) never decrease j, (b) keep
//! trajectories away from the boundary, and (c) act as a diffeomorphism
//! (injective endpoints, nonvanishing flow-map Jacobian).

use crate::error::{CoreError, Result};

/// Built-in smooth test functions with analytic gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestFunction {
    /// j = -||x||^2, single maximum at the origin
    Bowl,
    /// j = -(x - p)^T D (x - p), anisotropic, maximum off-center
    TiltedQuadratic,
    /// symmetric pair of gaussian bumps: two maxima plus a saddle at 0 (2-D)
    TwoBumps,
}

const TILT_P: [f64; 2] = [0.3, -0.2];
const TILT_D: [f64; 2] = [1.0, 2.5];
const BUMP_P: f64 = 0.5;
const BUMP_SIGMA: f64 = 0.22;

#[derive(Debug, Clone)]
pub struct CriticalPoint {
    pub location: Vec<f64>,
    /// eta plateau: rho = 1 inside this radius
    pub r_inner: f64,
    /// rho support: 0 outside this radius
    pub r_outer: f64,
}

#[derive(Debug, Clone)]
pub struct MorseProblem {
    pub dim: usize,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub function: TestFunction,
    pub criticals: Vec<CriticalPoint>,
    /// boundary decay exponent, at least dim + 1
    pub decay_m: u32,
}

impl MorseProblem {
    /// -||x||^2 on [-1, 1]^dim; dim 1 or 2.
    pub fn bowl(dim: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(CoreError::InvalidArgument("dimension must be 1 or 2".into()));
        }
        MorseProblem {
            dim,
            box_lo: vec![-1.0; dim],
            box_hi: vec![1.0; dim],
            function: TestFunction::Bowl,
            criticals: vec![CriticalPoint {
                location: vec![0.0; dim],
                r_inner: 0.06,
                r_outer: 0.16,
            }],
            decay_m: dim as u32 + 1,
        }
        .validated()
    }

    /// Anisotropic shifted bowl on [-1, 1]^dim.
    pub fn tilted_quadratic(dim: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(CoreError::InvalidArgument("dimension must be 1 or 2".into()));
        }
        MorseProblem {
            dim,
            box_lo: vec![-1.0; dim],
            box_hi: vec![1.0; dim],
            function: TestFunction::TiltedQuadratic,
            criticals: vec![CriticalPoint {
                location: TILT_P[..dim].to_vec(),
                r_inner: 0.06,
                r_outer: 0.16,
            }],
            decay_m: dim as u32 + 1,
        }
        .validated()
    }

    /// Two gaussian bumps at (+-BUMP_P, 0) on [-1, 1]^2: maxima at the bump
    /// centers (to within ~1e-4, inside the eta plateau) and an exact saddle
    /// at the origin by symmetry.
    pub fn two_bumps() -> Result<Self> {
        let cp = |x: f64| CriticalPoint { location: vec![x, 0.0], r_inner: 0.06, r_outer: 0.16 };
        MorseProblem {
            dim: 2,
            box_lo: vec![-1.0; 2],
            box_hi: vec![1.0; 2],
            function: TestFunction::TwoBumps,
            criticals: vec![cp(-BUMP_P), cp(0.0), cp(BUMP_P)],
            decay_m: 3,
        }
        .validated()
    }

    fn validated(self) -> Result<Self> {
        if self.decay_m < self.dim as u32 + 1 {
            return Err(CoreError::InvalidArgument(format!(
                "decay exponent {} below dim + 1",
                self.decay_m
            )));
        }
        for cp in &self.criticals {
            if cp.location.len() != self.dim {
                return Err(CoreError::Shape("critical point dimension mismatch".into()));
            }
            if !(cp.r_inner > 0.0 && cp.r_inner < cp.r_outer) {
                return Err(CoreError::InvalidArgument("bad isolation radii".into()));
            }
            for (k, &c) in cp.location.iter().enumerate() {
                if c - cp.r_outer <= self.box_lo[k] || c + cp.r_outer >= self.box_hi[k] {
                    return Err(CoreError::InvalidArgument(
                        "critical-point neighborhood touches the boundary".into(),
                    ));
                }
            }
        }
        // rho supports must be pairwise disjoint
        for i in 0..self.criticals.len() {
            for jdx in i + 1..self.criticals.len() {
                let a = &self.criticals[i];
                let b = &self.criticals[jdx];
                let d2: f64 = a
                    .location
                    .iter()
                    .zip(&b.location)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                if d2.sqrt() <= a.r_outer + b.r_outer {
                    return Err(CoreError::InvalidArgument("overlapping bump supports".into()));
                }
            }
        }
        Ok(self)
    }

    pub fn j(&self, x: &[f64]) -> f64 {
        match self.function {
            TestFunction::Bowl => -x.iter().map(|v| v * v).sum::<f64>(),
            TestFunction::TiltedQuadratic => -x
                .iter()
                .enumerate()
                .map(|(k, v)| TILT_D[k] * (v - TILT_P[k]) * (v - TILT_P[k]))
                .sum::<f64>(),
            TestFunction::TwoBumps => {
                let g = |cx: f64| {
                    let d2 = (x[0] - cx) * (x[0] - cx) + x[1] * x[1];
                    (-d2 / (2.0 * BUMP_SIGMA * BUMP_SIGMA)).exp()
                };
                g(BUMP_P) + g(-BUMP_P)
            }
        }
    }

    pub fn grad_j(&self, x: &[f64]) -> Vec<f64> {
        match self.function {
            TestFunction::Bowl => x.iter().map(|v| -2.0 * v).collect(),
            TestFunction::TiltedQuadratic => x
                .iter()
                .enumerate()
                .map(|(k, v)| -2.0 * TILT_D[k] * (v - TILT_P[k]))
                .collect(),
            TestFunction::TwoBumps => {
                let s2 = BUMP_SIGMA * BUMP_SIGMA;
                let g = |cx: f64| {
                    let d2 = (x[0] - cx) * (x[0] - cx) + x[1] * x[1];
                    (-d2 / (2.0 * s2)).exp()
                };
                let (ga, gb) = (g(BUMP_P), g(-BUMP_P));
                vec![
                    -(x[0] - BUMP_P) / s2 * ga - (x[0] + BUMP_P) / s2 * gb,
                    -x[1] / s2 * ga - x[1] / s2 * gb,
                ]
            }
        }
    }

    fn inside_closed(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(k, &v)| v >= self.box_lo[k] && v <= self.box_hi[k])
    }

    fn inside_open(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(k, &v)| v > self.box_lo[k] && v < self.box_hi[k])
    }
}

/// Boundary distance of a box point.
fn box_boundary_dist(x: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .enumerate()
        .map(|(k, &v)| (v - lo[k]).min(hi[k] - v))
        .fold(f64::INFINITY, f64::min)
}

/// Smooth defining function: equals the boundary distance within
/// 0.1 * (min half-width) of the boundary, then eases into a constant
/// plateau (C^1, derivative reaches 0 at the plateau).
pub fn mu_defining(x: &[f64], box_lo: &[f64], box_hi: &[f64]) -> Result<f64> {
    if x.len() != box_lo.len() || x.len() != box_hi.len() {
        return Err(CoreError::Shape("mu: dimension mismatch".into()));
    }
    let dist = box_boundary_dist(x, box_lo, box_hi);
    if dist < 0.0 {
        return Err(CoreError::InvalidArgument(format!("point outside box (dist {dist})")));
    }
    let half_min = box_lo
        .iter()
        .zip(box_hi)
        .map(|(l, h)| (h - l) / 2.0)
        .fold(f64::INFINITY, f64::min);
    let r0 = 0.1 * half_min;
    let r1 = 5.0 * r0;
    Ok(if dist <= r0 {
        dist
    } else if dist < r1 {
        let s = dist - r0;
        let w = r1 - r0;
        r0 + s - s * s / (2.0 * w)
    } else {
        r0 + (r1 - r0) / 2.0
    })
}

/// C-infinity step built from exp(-1/u): 0 for u <= 0, 1 for u >= 1.
fn smoothstep(u: f64) -> f64 {
    let g = |v: f64| if v > 0.0 { (-1.0 / v).exp() } else { 0.0 };
    let a = g(u);
    let b = g(1.0 - u);
    if a + b == 0.0 {
        return if u > 0.0 { 1.0 } else { 0.0 };
    }
    a / (a + b)
}

/// Plateau bump for one critical point: exactly 1 inside r_inner, exactly 0
/// outside r_outer.
fn bump(dist: f64, r_inner: f64, r_outer: f64) -> f64 {
    smoothstep((r_outer - dist) / (r_outer - r_inner))
}

/// eta(x) = 1 - sum_i rho_i(x): zero on a ball around each critical point,
/// one away from all of them.
pub fn cutoff_eta(x: &[f64], problem: &MorseProblem) -> Result<f64> {
    if x.len() != problem.dim {
        return Err(CoreError::Shape("eta: dimension mismatch".into()));
    }
    let mut total = 0.0;
    for cp in &problem.criticals {
        let d2: f64 = x.iter().zip(&cp.location).map(|(a, b)| (a - b) * (a - b)).sum();
        total += bump(d2.sqrt(), cp.r_inner, cp.r_outer);
    }
    Ok(1.0 - total)
}

/// The synthesized velocity field X = eta * mu^m * grad j.
pub struct MorseField<'a> {
    problem: &'a MorseProblem,
}

impl MorseField<'_> {
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.problem;
        if !p.inside_closed(x) {
            return Err(CoreError::InvalidArgument("field evaluated outside the box".into()));
        }
        let eta = cutoff_eta(x, p)?;
        let mu = mu_defining(x, &p.box_lo, &p.box_hi)?;
        let damp = eta * mu.powi(p.decay_m as i32);
        Ok(p.grad_j(x).into_iter().map(|g| damp * g).collect())
    }
}

pub fn build_morse_field(problem: &MorseProblem) -> MorseField<'_> {
    MorseField { problem }
}

/// What one verification run measured.
#[derive(Debug, Clone)]
pub struct MorseReport {
    /// fraction of integration steps with j(next) >= j(prev) - tol
    pub monotone_fraction: f64,
    /// fraction of steps with a strictly positive j increase (reported only)
    pub strict_increase_fraction: f64,
    /// smallest mu seen along any trajectory
    pub min_mu: f64,
    /// smallest pairwise distance between distinct trajectory endpoints
    pub min_endpoint_separation: f64,
    /// smallest |det| of the finite-difference flow-map Jacobian
    pub min_abs_det_jacobian: f64,
    pub trajectories: usize,
}

fn rk4_flow(field: &MorseField<'_>, start: &[f64], eps_t: f64, h: f64) -> Result<Vec<Vec<f64>>> {
    let steps = if eps_t == 0.0 { 0 } else { (eps_t / h).ceil() as usize };
    let h = if steps == 0 { 0.0 } else { eps_t / steps as f64 };
    let mut x = start.to_vec();
    let mut path = Vec::with_capacity(steps + 1);
    path.push(x.clone());
    let axpy = |x: &[f64], k: &[f64], c: f64| -> Vec<f64> {
        x.iter().zip(k).map(|(a, b)| a + c * b).collect()
    };
    for _ in 0..steps {
        let k1 = field.eval(&x)?;
        let k2 = field.eval(&axpy(&x, &k1, h / 2.0))?;
        let k3 = field.eval(&axpy(&x, &k2, h / 2.0))?;
        let k4 = field.eval(&axpy(&x, &k3, h))?;
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        path.push(x.clone());
    }
    Ok(path)
}

/// Integrate the field from an interior grid for `eps_t` and measure the
/// three claimed properties. A trajectory leaving the box is a hard failure.
pub fn verify_morse_flow(
    problem: &MorseProblem,
    grid_res: usize,
    eps_t: f64,
    h: f64,
    tol: f64,
) -> Result<MorseReport> {
    if grid_res < 2 {
        return Err(CoreError::InvalidArgument("grid resolution must be >= 2".into()));
    }
    if eps_t < 0.0 || h <= 0.0 {
        return Err(CoreError::InvalidArgument("bad flow time or step".into()));
    }
    let field = build_morse_field(problem);

    // interior grid, inset 5% of the width from each face
    let mut axes = Vec::new();
    for k in 0..problem.dim {
        let w = problem.box_hi[k] - problem.box_lo[k];
        let a = problem.box_lo[k] + 0.05 * w;
        let b = problem.box_hi[k] - 0.05 * w;
        let pts: Vec<f64> = (0..grid_res)
            .map(|i| a + (b - a) * i as f64 / (grid_res - 1) as f64)
            .collect();
        axes.push(pts);
    }
    let mut starts = Vec::new();
    match problem.dim {
        1 => {
            for &x in &axes[0] {
                starts.push(vec![x]);
            }
        }
        2 => {
            for &y in &axes[1] {
                for &x in &axes[0] {
                    starts.push(vec![x, y]);
                }
            }
        }
        _ => unreachable!("dim validated to 1 or 2"),
    }

    let mut monotone_hits = 0usize;
    let mut strict_hits = 0usize;
    let mut step_count = 0usize;
    let mut min_mu = f64::INFINITY;
    let mut endpoints = Vec::with_capacity(starts.len());

    for s in &starts {
        let path = rk4_flow(&field, s, eps_t, h)?;
        for state in &path {
            if !problem.inside_open(state) {
                return Err(CoreError::InvalidArgument(format!(
                    "trajectory from {s:?} left the open box at {state:?}"
                )));
            }
            min_mu = min_mu.min(mu_defining(state, &problem.box_lo, &problem.box_hi)?);
        }
        for w in path.windows(2) {
            let dj = problem.j(&w[1]) - problem.j(&w[0]);
            if dj >= -tol {
                monotone_hits += 1;
            }
            if dj > 0.0 {
                strict_hits += 1;
            }
            step_count += 1;
        }
        endpoints.push(path.last().expect("nonempty path").clone());
    }

    let mut min_sep = f64::INFINITY;
    for i in 0..endpoints.len() {
        for j in i + 1..endpoints.len() {
            let d2: f64 = endpoints[i]
                .iter()
                .zip(&endpoints[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            min_sep = min_sep.min(d2.sqrt());
        }
    }

    // flow-map Jacobian by central differences around every grid start
    let h_fd = 1e-4;
    let mut min_det = f64::INFINITY;
    for s in &starts {
        let mut cols = Vec::with_capacity(problem.dim);
        for k in 0..problem.dim {
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[k] += h_fd;
            sm[k] -= h_fd;
            let fp = rk4_flow(&field, &sp, eps_t, h)?.pop().expect("nonempty");
            let fm = rk4_flow(&field, &sm, eps_t, h)?.pop().expect("nonempty");
            cols.push(
                fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h_fd)).collect::<Vec<f64>>(),
            );
        }
        let det = match problem.dim {
            1 => cols[0][0],
            2 => cols[0][0] * cols[1][1] - cols[0][1] * cols[1][0],
            _ => unreachable!(),
        };
        min_det = min_det.min(det.abs());
    }

    Ok(MorseReport {
        monotone_fraction: if step_count == 0 { 1.0 } else { monotone_hits as f64 / step_count as f64 },
        strict_increase_fraction: if step_count == 0 {
            0.0
        } else {
            strict_hits as f64 / step_count as f64
        },
        min_mu,
        min_endpoint_separation: min_sep,
        min_abs_det_jacobian: min_det,
        trajectories: starts.len(),
    })
}
