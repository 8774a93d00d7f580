//! Per-patch shape proposals.
//!
//! For a patch with known light, candidate shapes are indexed by the
//! azimuth θ of their centre normal. At each θ on a grid the remaining four
//! degrees of freedom (`a1..a3` and the distance `r` of the centre normal from
//! the light point along the θ ray) are fitted to the intensities by damped
//! Gauss-Newton, and every fit is scored by the negative log-likelihood of the
//! intensities under additive noise plus a shape-deviation term.

use crate::exec::Exec;
use crate::grid::Grid2;
use crate::patch_model::{
    theta_of_shape, wrap_angle, IntensityPatch, LightVector, ModelError, PatchGrid, QuadShape,
};
use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProposalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no feasible θ: centre intensity {intensity} exceeds ‖l‖ = {light_norm}")]
    NoFeasibleTheta { intensity: f64, light_norm: f64 },
    #[error("θ = {0} is infeasible for the centre intensity")]
    InfeasibleTheta(f64),
    #[error("patch has {0} usable pixels; at least 5 are needed")]
    TooFewPixels(usize),
    #[error("centre pixel is masked out")]
    MaskedCenter,
    #[error("light is aligned with the view; the shape-noise approximation is undefined")]
    ViewAlignedLight,
    #[error("total intensity variance is zero at a usable pixel")]
    ZeroVariance,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = ProposalError> = std::result::Result<T, E>;

/// Intensity noise (`σ_i`) and per-pixel normal deviation variance (`σ_n0²`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    pub sigma_i: f64,
    pub sigma_n0_sq: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_i: 0.01,
            sigma_n0_sq: 1e-6,
        }
    }
}

impl NoiseModel {
    pub fn new(sigma_i: f64, sigma_n0_sq: f64) -> Result<Self> {
        if !(sigma_i.is_finite() && sigma_i >= 0.0) {
            return Err(ProposalError::InvalidArgument(format!(
                "sigma_i must be finite and non-negative, got {sigma_i}"
            )));
        }
        if !(sigma_n0_sq.is_finite() && sigma_n0_sq >= 0.0) {
            return Err(ProposalError::InvalidArgument(format!(
                "sigma_n0_sq must be finite and non-negative, got {sigma_n0_sq}"
            )));
        }
        Ok(Self {
            sigma_i,
            sigma_n0_sq,
        })
    }
}

/// Damped least-squares settings. Damping is multiplicative on the diagonal
/// of `JᵀJ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub max_iters: usize,
    pub step_tol: f64,
    pub rel_decrease_tol: f64,
    pub damping_init: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub damping_min: f64,
    pub damping_max: f64,
    /// Smallest admissible `r`; keeps θ of the fitted shape well defined.
    pub r_min: f64,
    /// Restart from every centre root and from six curvature seeds besides
    /// the flat one. Off: a single flat start at the smallest root.
    pub multi_start: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iters: 200,
            step_tol: 1e-10,
            rel_decrease_tol: 1e-12,
            damping_init: 1e-3,
            damping_up: 10.0,
            damping_down: 0.1,
            damping_min: 1e-12,
            damping_max: 1e12,
            r_min: 1e-8,
            multi_start: true,
        }
    }
}

/// Uniformly spaced θ samples, strictly increasing, in `(-π, π]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaGrid {
    values: Vec<f64>,
    full_circle: bool,
}

impl ThetaGrid {
    /// `θ_j = −π + 2πj/J`, `j = 1..=J`.
    pub fn full(j: usize) -> Self {
        let values = (1..=j)
            .map(|k| -PI + 2.0 * PI * k as f64 / j as f64)
            .collect();
        Self {
            values,
            full_circle: true,
        }
    }

    /// `J` samples spanning `[lo, hi]` inclusive (wrapped into `(-π, π]`).
    pub fn interval(lo: f64, hi: f64, j: usize) -> Self {
        let mut values: Vec<f64> = (0..j)
            .map(|k| wrap_angle(lo + (hi - lo) * k as f64 / (j - 1) as f64))
            .collect();
        values.sort_by(f64::total_cmp);
        Self {
            values,
            full_circle: false,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_full_circle(&self) -> bool {
        self.full_circle
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub theta: f64,
    pub shape: QuadShape,
    pub residual_sse: f64,
    /// Negative log-likelihood of the patch intensities.
    pub cost: f64,
}

/// Least-squares fit at a fixed θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fit {
    pub theta: f64,
    pub shape: QuadShape,
    /// `(a1, a2, a3, r)`.
    pub params: [f64; 4],
    pub residual_sse: f64,
    pub iterations: usize,
    /// False when the iteration cap stopped the solver.
    pub converged: bool,
}

/// Proposals of one patch, sorted by θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
    /// Cost of the outlier label, when assigned.
    pub dummy_cost: Option<f64>,
    /// `(row, col)` of the patch centre in the image.
    pub origin: (usize, usize),
    pub size: usize,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn min_cost(&self) -> f64 {
        self.proposals.iter().map(|p| p.cost).fold(f64::INFINITY, f64::min)
    }

    /// Median of the proposal costs (mean of the middle pair for even counts).
    pub fn median_cost(&self) -> f64 {
        let mut c: Vec<f64> = self.proposals.iter().map(|p| p.cost).collect();
        c.sort_by(f64::total_cmp);
        let n = c.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            c[n / 2]
        } else {
            0.5 * (c[n / 2 - 1] + c[n / 2])
        }
    }

    /// Index of the lowest-cost proposal (first on ties).
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.proposals.iter().enumerate() {
            if best.is_none_or(|(_, c)| p.cost < c) {
                best = Some((i, p.cost));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Unit directions of the constant-θ ray on the `n_z = 1` plane, before
/// normalisation: `d(θ) = (−(lx/lz)cos θ + ly sin θ, −(ly/lz)cos θ − lx sin θ)`.
#[inline]
fn ray_direction(theta: f64, l: &LightVector) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    let (px, py) = (l.x() / l.z(), l.y() / l.z());
    (-px * c + l.y() * s, -py * c - l.x() * s)
}

/// `(a4, a5)` whose centre normal lies at distance parameter `r` along the
/// θ ray from the light point.
pub fn reparam_a45(theta: f64, r: f64, l: &LightVector) -> (f64, f64) {
    let (dx, dy) = ray_direction(theta, l);
    (-l.x() / l.z() - r * dx, -l.y() / l.z() - r * dy)
}

/// Non-negative `r` values at which the centre normal of the θ ray has
/// intensity `i_center`, ascending. Empty when θ is infeasible.
pub fn solve_center_r(theta: f64, i_center: f64, l: &LightVector) -> Result<Vec<f64>> {
    let k = l.planar_norm_sq();
    if k.sqrt() < 1e-14 {
        return Err(ModelError::DegenerateLight.into());
    }
    if !(i_center > 0.0) {
        return Ok(Vec::new());
    }
    let l2 = k + l.z() * l.z();
    let i2 = i_center * i_center;
    let (s, c) = theta.sin_cos();
    // (‖l‖² − rKc)² = I²(‖l‖² − 2rKc + r²K(c² + lz²s²)), divided through by K.
    let qa = k * c * c - i2 * (c * c + l.z() * l.z() * s * s);
    let qb = -2.0 * c * (l2 - i2);
    let qc = l2 * (l2 - i2) / k;

    let mut roots = Vec::with_capacity(2);
    let scale = qa.abs().max(qb.abs()).max(qc.abs());
    if qa.abs() <= 1e-14 * scale {
        if qb.abs() > 1e-300 {
            roots.push(-qc / qb);
        }
    } else {
        let mut disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            if disc < -1e-12 * (qb * qb).max((4.0 * qa * qc).abs()) {
                return Ok(Vec::new());
            }
            disc = 0.0;
        }
        let sq = disc.sqrt();
        let sign = if qb >= 0.0 { 1.0 } else { -1.0 };
        let q = -0.5 * (qb + sign * sq);
        if q == 0.0 {
            roots.push(0.0);
        } else {
            roots.push(q / qa);
            roots.push(qc / q);
        }
    }
    let mut out: Vec<f64> = roots
        .into_iter()
        .filter(|r| r.is_finite())
        .map(|r| if r < 0.0 && r > -1e-12 { 0.0 } else { r })
        .filter(|&r| r >= 0.0 && l2 - r * k * c > 0.0)
        .collect();
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * (1.0 + a.abs()));
    Ok(out)
}

/// Centre intensity usable for anchoring the θ rays. Values above `‖l‖` by
/// at most `1e-6` are clamped to `‖l‖`.
fn anchor_intensity(patch: &IntensityPatch, l: &LightVector) -> Result<f64> {
    let i = patch.center_intensity().ok_or(ProposalError::MaskedCenter)?;
    let norm = l.norm();
    if i > norm + 1e-6 {
        return Err(ProposalError::NoFeasibleTheta {
            intensity: i,
            light_norm: norm,
        });
    }
    Ok(i.min(norm))
}

const FEASIBILITY_PROBES: usize = 720;

/// θ samples for a patch: the full circle when every probed θ admits a
/// centre root, otherwise `J` samples across the largest contiguous feasible
/// interval (ends located by bisection).
pub fn theta_grid_for_patch(patch: &IntensityPatch, l: &LightVector, j: usize) -> Result<ThetaGrid> {
    if j < 3 {
        return Err(ProposalError::InvalidArgument(format!("J must be at least 3, got {j}")));
    }
    let i_c = anchor_intensity(patch, l)?;
    theta_grid_for_intensity(i_c, l, j)
}

const EDGE_MARGIN: f64 = 1e-9;

pub(crate) fn theta_grid_for_intensity(i_c: f64, l: &LightVector, j: usize) -> Result<ThetaGrid> {
    let feasible = |t: f64| -> Result<bool> { Ok(!solve_center_r(t, i_c, l)?.is_empty()) };
    let n = FEASIBILITY_PROBES;
    let probe = |k: usize| -PI + 2.0 * PI * (k + 1) as f64 / n as f64;
    let flags = (0..n).map(|k| feasible(probe(k))).collect::<Result<Vec<bool>>>()?;
    if flags.iter().all(|&f| f) {
        return Ok(ThetaGrid::full(j));
    }
    if !flags.iter().any(|&f| f) {
        return Err(ProposalError::NoFeasibleTheta {
            intensity: i_c,
            light_norm: l.norm(),
        });
    }
    // Longest circular run of feasible probes.
    let start = flags.iter().position(|&f| !f).expect("some infeasible probe");
    let (mut best_start, mut best_len) = (0usize, 0usize);
    let mut run_start = None;
    for step in 1..=n {
        let k = (start + step) % n;
        match (flags[k], run_start) {
            (true, None) => run_start = Some(step),
            (false, Some(s)) => {
                if step - s > best_len {
                    best_len = step - s;
                    best_start = s;
                }
                run_start = None;
            }
            _ => {}
        }
    }
    let step = 2.0 * PI / n as f64;
    let first = probe((start + best_start) % n);
    // unwrapped: lo ≤ hi, hi − lo < 2π
    let lo_in = first;
    let hi_in = first + (best_len - 1) as f64 * step;
    let bisect = |mut good: f64, mut bad: f64| -> Result<f64> {
        for _ in 0..60 {
            let mid = 0.5 * (good + bad);
            if feasible(mid)? {
                good = mid;
            } else {
                bad = mid;
            }
        }
        Ok(good)
    };
    // The bracket ends sit on a tangency (double root); step just inside so
    // that rounding in the wrapped samples cannot push them out.
    let lo = bisect(lo_in, lo_in - step)? + EDGE_MARGIN;
    let hi = bisect(hi_in, hi_in + step)? - EDGE_MARGIN;
    Ok(ThetaGrid::interval(lo, hi.max(lo), j))
}

/// Centre-normal parameters at `(θ, r)` plus the shape they complete.
#[inline]
fn shape_from_params(p: &[f64; 4], theta: f64, l: &LightVector) -> QuadShape {
    let (a4, a5) = reparam_a45(theta, p[3], l);
    QuadShape::new(p[0], p[1], p[2], a4, a5)
}

/// Model intensity; shadowed points render as 0.
#[inline]
fn model_intensity(a: &QuadShape, l: &LightVector, x: f64, y: f64) -> f64 {
    let (nx, ny) = a.normal_at(x, y);
    let dot = l.dot_normal(nx, ny);
    if dot <= 0.0 {
        0.0
    } else {
        dot / (nx * nx + ny * ny + 1.0).sqrt()
    }
}

/// Model intensity and its gradient with respect to `(a1, a2, a3, r)`.
#[inline]
fn intensity_and_gradient(
    a: &QuadShape,
    l: &LightVector,
    ray: (f64, f64),
    x: f64,
    y: f64,
) -> (f64, [f64; 4]) {
    let (nx, ny) = a.normal_at(x, y);
    let dot = l.dot_normal(nx, ny);
    if dot <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let nn = nx * nx + ny * ny + 1.0;
    let inv = 1.0 / nn.sqrt();
    let i = dot * inv;
    // ∂I/∂n_x, ∂I/∂n_y
    let gx = (l.x() - i * nx * inv) * inv;
    let gy = (l.y() - i * ny * inv) * inv;
    (
        i,
        [
            -2.0 * x * gx,
            -2.0 * y * gy,
            -y * gx - x * gy,
            ray.0 * gx + ray.1 * gy,
        ],
    )
}

/// Jacobian of the model intensities at every grid point (masked or not)
/// with respect to `(a1, a2, a3, r)` at fixed θ.
pub fn lm_jacobian(params: &[f64; 4], patch: &IntensityPatch, l: &LightVector, theta: f64) -> Vec<[f64; 4]> {
    let a = shape_from_params(params, theta, l);
    let ray = ray_direction(theta, l);
    patch
        .grid()
        .points()
        .iter()
        .map(|&(x, y)| intensity_and_gradient(&a, l, ray, x, y).1)
        .collect()
}

#[cfg(test)]
fn sse(samples: &[(f64, f64, f64)], a: &QuadShape, l: &LightVector) -> f64 {
    samples
        .iter()
        .map(|&(x, y, i)| {
            let d = i - model_intensity(a, l, x, y);
            d * d
        })
        .sum()
}

/// Residual sum of squares with `JᵀJ` and `Jᵀr` at `a`.
fn normal_equations(
    samples: &[(f64, f64, f64)],
    a: &QuadShape,
    l: &LightVector,
    ray: (f64, f64),
) -> (f64, Matrix4<f64>, Vector4<f64>) {
    let mut cost = 0.0;
    let mut jtj = Matrix4::<f64>::zeros();
    let mut jtr = Vector4::<f64>::zeros();
    for &(x, y, i_obs) in samples {
        let (i, g) = intensity_and_gradient(a, l, ray, x, y);
        let res = i_obs - i;
        cost += res * res;
        for r in 0..4 {
            jtr[r] += g[r] * res;
            for c in r..4 {
                jtj[(r, c)] += g[r] * g[c];
            }
        }
    }
    for r in 0..4 {
        for c in 0..r {
            jtj[(r, c)] = jtj[(c, r)];
        }
    }
    (cost, jtj, jtr)
}

/// Best quadratic shape with centre azimuth `theta`.
///
/// Without `init` the fit starts from `(0, 0, 0, r0)` at the smallest centre
/// root `r0` of [`solve_center_r`]. With `settings.multi_start` it also
/// starts from the other roots and from curvature seeds of magnitude
/// `κ = 1/(4h)` (`h` = patch half-width), keeping the lowest residual.
pub fn fit_proposal(
    patch: &IntensityPatch,
    l: &LightVector,
    theta: f64,
    init: Option<[f64; 4]>,
    settings: &SolverSettings,
) -> Result<Fit> {
    let samples: Vec<(f64, f64, f64)> = patch.samples().collect();
    if samples.len() < 5 {
        return Err(ProposalError::TooFewPixels(samples.len()));
    }
    let starts: Vec<[f64; 4]> = match init {
        Some(p) => vec![p],
        None => {
            let i_c = anchor_intensity(patch, l)?;
            let mut roots = solve_center_r(theta, i_c, l)?;
            if roots.is_empty() {
                return Err(ProposalError::InfeasibleTheta(theta));
            }
            if !settings.multi_start {
                roots.truncate(1);
                vec![[0.0, 0.0, 0.0, roots[0]]]
            } else {
                let h = patch
                    .grid()
                    .points()
                    .iter()
                    .map(|&(x, y)| x.abs().max(y.abs()))
                    .fold(0.0, f64::max)
                    .max(1.0);
                let k = 0.25 / h;
                let seeds = [
                    [0.0, 0.0, 0.0],
                    [k, k, 0.0],
                    [k, -k, 0.0],
                    [-k, k, 0.0],
                    [-k, -k, 0.0],
                    [0.0, 0.0, 2.0 * k],
                    [0.0, 0.0, -2.0 * k],
                ];
                roots
                    .iter()
                    .flat_map(|&r| seeds.iter().map(move |c| [c[0], c[1], c[2], r]))
                    .collect()
            }
        }
    };
    let mut best: Option<Fit> = None;
    for s in starts {
        let fit = levenberg_marquardt(&samples, l, theta, s, settings);
        if best.as_ref().is_none_or(|b| fit.residual_sse < b.residual_sse) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

fn levenberg_marquardt(
    samples: &[(f64, f64, f64)],
    l: &LightVector,
    theta: f64,
    start: [f64; 4],
    st: &SolverSettings,
) -> Fit {
    let ray = ray_direction(theta, l);
    let mut p = start;
    p[3] = p[3].max(st.r_min);
    let mut shape = shape_from_params(&p, theta, l);
    let (mut cost, mut jtj, mut jtr) = normal_equations(samples, &shape, l, ray);
    let mut damping = st.damping_init;
    let mut iterations = 0;
    let mut converged = cost == 0.0;

    while !converged && iterations < st.max_iters {
        iterations += 1;
        let diag_floor = 1e-12 * (0..4).map(|k| jtj[(k, k)]).fold(1e-300, f64::max);
        let mut damped = jtj;
        for k in 0..4 {
            damped[(k, k)] += damping * jtj[(k, k)].max(diag_floor);
        }
        let mut rhs = jtr;
        // r sits on its lower bound and descent would push it further down:
        // hold it fixed for this step.
        if p[3] <= st.r_min && rhs[3] <= 0.0 {
            for k in 0..4 {
                damped[(3, k)] = 0.0;
                damped[(k, 3)] = 0.0;
            }
            damped[(3, 3)] = 1.0;
            rhs[3] = 0.0;
        }
        let step = match damped.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => match damped.lu().solve(&rhs) {
                Some(s) => s,
                None => {
                    damping *= st.damping_up;
                    converged = damping > st.damping_max;
                    continue;
                }
            },
        };
        let mut cand = [p[0] + step[0], p[1] + step[1], p[2] + step[2], p[3] + step[3]];
        cand[3] = cand[3].max(st.r_min);
        let actual_step = (0..4).map(|k| (cand[k] - p[k]).powi(2)).sum::<f64>().sqrt();
        let cand_shape = shape_from_params(&cand, theta, l);
        // Normal equations come with the cost in one pass; on rejection
        // they are discarded.
        let (cand_cost, cand_jtj, cand_jtr) = normal_equations(samples, &cand_shape, l, ray);
        if cand_cost.is_finite() && cand_cost < cost {
            let decrease = cost - cand_cost;
            p = cand;
            shape = cand_shape;
            let prev = cost;
            cost = cand_cost;
            jtj = cand_jtj;
            jtr = cand_jtr;
            damping = (damping * st.damping_down).max(st.damping_min);
            converged = cost == 0.0 || actual_step < st.step_tol || decrease <= st.rel_decrease_tol * prev;
        } else {
            damping *= st.damping_up;
            converged = actual_step < st.step_tol || damping > st.damping_max;
        }
    }
    Fit {
        theta,
        shape,
        params: p,
        residual_sse: cost,
        iterations,
        converged,
    }
}

/// Approximate intensity variance caused by normal deviations of variance
/// `σ_n0²`: `(lx² + ly²)·σ_n0² / (n_x² + n_y² + 1)`.
pub fn sigma_z_sq(a: &QuadShape, x: f64, y: f64, l: &LightVector, nm: &NoiseModel) -> Result<f64> {
    let k = l.planar_norm_sq();
    if k.sqrt() < 1e-14 * l.norm() {
        return Err(ProposalError::ViewAlignedLight);
    }
    let (nx, ny) = a.normal_at(x, y);
    Ok(k * nm.sigma_n0_sq / (nx * nx + ny * ny + 1.0))
}

/// Negative log-likelihood (natural log) of the usable intensities.
pub fn likelihood_cost(patch: &IntensityPatch, a: &QuadShape, l: &LightVector, nm: &NoiseModel) -> Result<f64> {
    let si2 = nm.sigma_i * nm.sigma_i;
    let mut total = 0.0;
    for (x, y, i_obs) in patch.samples() {
        let v = si2 + sigma_z_sq(a, x, y, l, nm)?;
        if !(v > 0.0) {
            return Err(ProposalError::ZeroVariance);
        }
        let d = i_obs - model_intensity(a, l, x, y);
        total += 0.5 * (v.ln() + d * d / v);
    }
    Ok(total)
}

/// Proposals for every θ of the patch's θ grid.
pub fn infer_patch(
    patch: &IntensityPatch,
    l: &LightVector,
    nm: &NoiseModel,
    j: usize,
    settings: &SolverSettings,
) -> Result<ProposalSet> {
    let thetas = theta_grid_for_patch(patch, l, j)?;
    let n = patch.grid().len();
    let size = (n as f64).sqrt().round() as usize;
    let mut proposals = Vec::with_capacity(thetas.len());
    for &theta in thetas.values() {
        let fit = fit_proposal(patch, l, theta, None, settings)?;
        let cost = likelihood_cost(patch, &fit.shape, l, nm)?;
        proposals.push(Proposal {
            theta,
            shape: fit.shape,
            residual_sse: fit.residual_sse,
            cost,
        });
    }
    Ok(ProposalSet {
        proposals,
        dummy_cost: None,
        origin: (0, 0),
        size: if size * size == n { size } else { 0 },
    })
}

/// Why a patch produced no proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    LowCoverage,
    MaskedCenter,
    NoFeasibleTheta,
    FitFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPatch {
    pub origin: (usize, usize),
    pub reason: SkipReason,
}

/// All patches of one size, in raster order of their centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleProposals {
    pub size: usize,
    pub sets: Vec<ProposalSet>,
    pub skipped: Vec<SkippedPatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiScaleProposals {
    pub image_rows: usize,
    pub image_cols: usize,
    pub scales: Vec<ScaleProposals>,
}

impl MultiScaleProposals {
    pub fn patch_count(&self) -> usize {
        self.scales.iter().map(|s| s.sets.len()).sum()
    }

    /// All proposal sets across scales, in scale then raster order.
    pub fn iter_sets(&self) -> impl Iterator<Item = &ProposalSet> {
        self.scales.iter().flat_map(|s| s.sets.iter())
    }
}

/// Minimum fraction of usable pixels for a patch to be inferred.
pub const MIN_COVERAGE: f64 = 0.6;

/// Extracts the `size × size` patch centred at `(row, col)`.
pub fn extract_patch(
    image: &Grid2<f64>,
    mask: &Grid2<bool>,
    row: usize,
    col: usize,
    size: usize,
) -> IntensityPatch {
    let h = (size / 2) as isize;
    let grid = PatchGrid::square(size);
    let mut vals = Vec::with_capacity(size * size);
    let mut m = Vec::with_capacity(size * size);
    for dy in -h..=h {
        for dx in -h..=h {
            let (r, c) = ((row as isize + dy) as usize, (col as isize + dx) as usize);
            let v = image.at(r, c);
            vals.push(v);
            m.push(mask.at(r, c) && v.is_finite());
        }
    }
    IntensityPatch::new(grid, vals, m).expect("patch dimensions agree")
}

/// Proposals for every fully interior patch at every size (stride 1).
pub fn infer_image(
    image: &Grid2<f64>,
    mask: &Grid2<bool>,
    l: &LightVector,
    sizes: &[usize],
    nm: &NoiseModel,
    j: usize,
    settings: &SolverSettings,
    exec: &Exec,
) -> Result<MultiScaleProposals> {
    let (rows, cols) = image.shape();
    if mask.shape() != image.shape() {
        return Err(ProposalError::InvalidArgument("mask and image shapes differ".into()));
    }
    if l.planar_norm_sq().sqrt() < 1e-14 * l.norm() {
        return Err(ProposalError::ViewAlignedLight);
    }
    if j < 3 {
        return Err(ProposalError::InvalidArgument(format!("J must be at least 3, got {j}")));
    }
    for &k in sizes {
        if k < 3 || k % 2 == 0 || k > rows.min(cols) {
            return Err(ProposalError::InvalidArgument(format!(
                "patch size {k} must be odd, at least 3 and at most {}",
                rows.min(cols)
            )));
        }
    }
    let mut tasks = Vec::new();
    for (si, &k) in sizes.iter().enumerate() {
        let h = k / 2;
        for r in h..rows - h {
            for c in h..cols - h {
                tasks.push((si, r, c));
            }
        }
    }
    let results = exec.map(tasks.len(), |t| {
        let (si, r, c) = tasks[t];
        let k = sizes[si];
        let patch = extract_patch(image, mask, r, c, k);
        if (patch.masked_in_count() as f64) < MIN_COVERAGE * (k * k) as f64 {
            return Err(SkipReason::LowCoverage);
        }
        match infer_patch(&patch, l, nm, j, settings) {
            Ok(mut set) => {
                set.origin = (r, c);
                set.size = k;
                Ok(set)
            }
            Err(ProposalError::MaskedCenter) => Err(SkipReason::MaskedCenter),
            Err(ProposalError::NoFeasibleTheta { .. }) => Err(SkipReason::NoFeasibleTheta),
            Err(_) => Err(SkipReason::FitFailed),
        }
    });
    let mut scales: Vec<ScaleProposals> = sizes
        .iter()
        .map(|&size| ScaleProposals {
            size,
            sets: Vec::new(),
            skipped: Vec::new(),
        })
        .collect();
    for ((si, r, c), res) in tasks.into_iter().zip(results) {
        match res {
            Ok(set) => scales[si].sets.push(set),
            Err(reason) => scales[si].skipped.push(SkippedPatch {
                origin: (r, c),
                reason,
            }),
        }
    }
    Ok(MultiScaleProposals {
        image_rows: rows,
        image_cols: cols,
        scales,
    })
}

/// θ of a fitted proposal's shape; equals the fit's θ up to round-off.
pub fn proposal_theta(p: &Proposal, l: &LightVector) -> Result<f64> {
    Ok(theta_of_shape(&p.shape, l)?)
}
