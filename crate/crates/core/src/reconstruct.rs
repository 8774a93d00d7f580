//! Global depth recovery from per-patch proposal distributions.
//!
//! Every patch `p` picks one label `L_p`: one of its proposals or a dummy
//! outlier label. The global cost is
//!
//! ```text
//! C(Z, {L_p}, λ) = Σ_p [ λ·D_p(L_p) + Σ_{(x,y)∈Ω_p} δ(Z, a_p(L_p), x, y) ]
//! δ = ‖(−∂Z/∂x − n_x, −∂Z/∂y − n_y)‖²      (0 for the dummy)
//! ```
//!
//! and is minimised by alternating exact per-patch label updates with depth
//! updates. Early rounds use a smoothed depth and an inflated `λ' = σ²λ`;
//! the dummy label is only offered once the plain alternation has settled.

use std::f64::consts::PI;
use std::fmt;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::grid::{diff_stencil, gradient, Grid2};
use crate::patch_model::QuadShape;
use crate::proposals::{MultiScaleProposals, ProposalSet};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReconError {
    #[error("pixel ({row}, {col}) lies outside the {rows}×{cols} depth map")]
    PixelOutsideImage {
        row: isize,
        col: isize,
        rows: usize,
        cols: usize,
    },
    #[error("no proposal sets to reconstruct from")]
    NoDistributions,
    #[error("array shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("label {label} out of range for a set with {count} proposals")]
    InvalidLabel { label: usize, count: usize },
    #[error("cannot choose λ automatically: every patch has a flat cost distribution")]
    FlatCosts,
    #[error("invalid reconstruction setting: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = ReconError> = std::result::Result<T, E>;

/// Depth estimate with the pixels that at least one patch covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub z: Grid2<f64>,
    pub valid: Grid2<bool>,
}

/// Distributions flattened across scales (scale order, then raster order).
#[derive(Debug, Clone)]
pub struct PatchSets<'a> {
    pub sets: Vec<&'a ProposalSet>,
    pub rows: usize,
    pub cols: usize,
}

impl<'a> PatchSets<'a> {
    pub fn all(d: &'a MultiScaleProposals) -> Self {
        Self {
            sets: d.iter_sets().collect(),
            rows: d.image_rows,
            cols: d.image_cols,
        }
    }

    /// Only the scales whose patch size is listed.
    pub fn with_sizes(d: &'a MultiScaleProposals, sizes: &[usize]) -> Self {
        Self {
            sets: d
                .scales
                .iter()
                .filter(|s| sizes.contains(&s.size))
                .flat_map(|s| s.sets.iter())
                .collect(),
            rows: d.image_rows,
            cols: d.image_cols,
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// One label per patch. A label equal to the set's proposal count is the
/// dummy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub labels: Vec<usize>,
}

impl Labeling {
    pub fn is_dummy(&self, p: usize, set: &ProposalSet) -> bool {
        self.labels[p] == set.len()
    }

    /// Fraction of patches whose labels agree with `other`.
    pub fn agreement(&self, other: &Labeling) -> f64 {
        if self.labels.is_empty() {
            return 1.0;
        }
        let same = self.labels.iter().zip(&other.labels).filter(|(a, b)| a == b).count();
        same as f64 / self.labels.len() as f64
    }
}

/// Per-pixel count of covering non-dummy patches and their mean normal.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateNormals {
    pub weight: Grid2<f64>,
    pub nx: Grid2<f64>,
    pub ny: Grid2<f64>,
}

/// Offsets of a square patch of odd `size`, row-major: `(dy, dx)`.
fn patch_offsets(size: usize) -> impl Iterator<Item = (isize, isize)> {
    let h = (size / 2) as isize;
    (-h..=h).flat_map(move |dy| (-h..=h).map(move |dx| (dy, dx)))
}

#[inline]
fn pixel_of(origin: (usize, usize), dy: isize, dx: isize) -> (isize, isize) {
    (origin.0 as isize + dy, origin.1 as isize + dx)
}

/// Agreement between the depth map and one proposal at image pixel
/// `(row, col)`, for a patch centred at `origin = (row, col)`.
///
/// Border pixels use one-sided differences, like [`gradient`].
pub fn delta(z: &Grid2<f64>, a: Option<&QuadShape>, row: isize, col: isize, origin: (usize, usize)) -> Result<f64> {
    let (rows, cols) = z.shape();
    if row < 0 || col < 0 || row as usize >= rows || col as usize >= cols {
        return Err(ReconError::PixelOutsideImage { row, col, rows, cols });
    }
    let Some(a) = a else { return Ok(0.0) };
    let (r, c) = (row as usize, col as usize);
    let gx: f64 = diff_stencil(cols, c).iter().map(|&(k, w)| w * z.at(r, k)).sum();
    let gy: f64 = diff_stencil(rows, r).iter().map(|&(k, w)| w * z.at(k, c)).sum();
    let (nx, ny) = a.normal_at(col as f64 - origin.1 as f64, row as f64 - origin.0 as f64);
    Ok((-gx - nx).powi(2) + (-gy - ny).powi(2))
}

/// `Σ_Ω δ` for proposal `a` over a patch, given precomputed gradients.
/// Footprint pixels outside the image are ignored.
fn delta_sum(gx: &Grid2<f64>, gy: &Grid2<f64>, a: &QuadShape, origin: (usize, usize), size: usize) -> f64 {
    let (rows, cols) = gx.shape();
    let mut s = 0.0;
    for (dy, dx) in patch_offsets(size) {
        let (r, c) = pixel_of(origin, dy, dx);
        if r < 0 || c < 0 || r as usize >= rows || c as usize >= cols {
            continue;
        }
        let (r, c) = (r as usize, c as usize);
        let (nx, ny) = a.normal_at(dx as f64, dy as f64);
        s += (-gx.at(r, c) - nx).powi(2) + (-gy.at(r, c) - ny).powi(2);
    }
    s
}

fn check_shape(z: &Grid2<f64>, d: &PatchSets) -> Result<()> {
    if z.shape() != (d.rows, d.cols) {
        return Err(ReconError::ShapeMismatch(z.shape(), (d.rows, d.cols)));
    }
    Ok(())
}

/// Best label of every patch for fixed `Z`. Ties go to the lowest label.
/// The dummy is offered only when `allow_dummy` and the set has a dummy cost.
pub fn update_labels(z: &Grid2<f64>, d: &PatchSets, lambda: f64, allow_dummy: bool, exec: &Exec) -> Result<Labeling> {
    check_shape(z, d)?;
    let (gx, gy) = gradient(z);
    let labels = exec.map(d.len(), |p| {
        let set = d.sets[p];
        let mut best = (usize::MAX, f64::INFINITY);
        for (j, prop) in set.proposals.iter().enumerate() {
            let c = lambda * prop.cost + delta_sum(&gx, &gy, &prop.shape, set.origin, set.size);
            if c < best.1 {
                best = (j, c);
            }
        }
        if allow_dummy {
            if let Some(dc) = set.dummy_cost {
                if lambda * dc < best.1 {
                    best = (set.len(), lambda * dc);
                }
            }
        }
        best.0
    });
    Ok(Labeling { labels })
}

fn check_labels(l: &Labeling, d: &PatchSets) -> Result<()> {
    if l.labels.len() != d.len() {
        return Err(ReconError::InvalidConfig(format!(
            "{} labels for {} patches",
            l.labels.len(),
            d.len()
        )));
    }
    for (&label, set) in l.labels.iter().zip(&d.sets) {
        let dummy_ok = label == set.len() && set.dummy_cost.is_some();
        if label > set.len() || (label == set.len() && !dummy_ok) {
            return Err(ReconError::InvalidLabel {
                label,
                count: set.len(),
            });
        }
    }
    Ok(())
}

/// Per-pixel coverage and mean target normal of the non-dummy labels.
/// Sums run in patch order, so the result does not depend on threading.
pub fn aggregate_normals(l: &Labeling, d: &PatchSets) -> Result<AggregateNormals> {
    check_labels(l, d)?;
    let mut w = Grid2::zeros(d.rows, d.cols);
    let mut sx = Grid2::zeros(d.rows, d.cols);
    let mut sy = Grid2::zeros(d.rows, d.cols);
    for (&label, set) in l.labels.iter().zip(&d.sets) {
        if label == set.len() {
            continue;
        }
        let a = &set.proposals[label].shape;
        for (dy, dx) in patch_offsets(set.size) {
            let (r, c) = pixel_of(set.origin, dy, dx);
            if r < 0 || c < 0 || r as usize >= d.rows || c as usize >= d.cols {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            let (nx, ny) = a.normal_at(dx as f64, dy as f64);
            *w.get_mut(r, c) += 1.0;
            *sx.get_mut(r, c) += nx;
            *sy.get_mut(r, c) += ny;
        }
    }
    for k in 0..w.len() {
        let n = w.as_slice()[k];
        if n > 0.0 {
            sx.as_mut_slice()[k] /= n;
            sy.as_mut_slice()[k] /= n;
        }
    }
    Ok(AggregateNormals {
        weight: w,
        nx: sx,
        ny: sy,
    })
}

/// `C(Z, {L_p}, λ)`.
pub fn global_cost(z: &Grid2<f64>, l: &Labeling, d: &PatchSets, lambda: f64) -> Result<f64> {
    check_shape(z, d)?;
    check_labels(l, d)?;
    let (gx, gy) = gradient(z);
    let mut total = 0.0;
    for (&label, set) in l.labels.iter().zip(&d.sets) {
        if label == set.len() {
            total += lambda * set.dummy_cost.expect("checked");
        } else {
            let prop = &set.proposals[label];
            total += lambda * prop.cost + delta_sum(&gx, &gy, &prop.shape, set.origin, set.size);
        }
    }
    Ok(total)
}

/// Signed angular frequency of DFT bin `k` of `n`; the Nyquist bin maps to 0.
fn omega(k: usize, n: usize) -> f64 {
    if 2 * k == n {
        0.0
    } else if 2 * k < n {
        2.0 * PI * k as f64 / n as f64
    } else {
        2.0 * PI * (k as f64 - n as f64) / n as f64
    }
}

fn fft2(data: &mut [Complex<f64>], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    for row in data.chunks_exact_mut(cols) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
}

/// Periodic least-squares surface whose negated gradient best matches
/// `(nx, ny)`, with zero mean.
pub fn frankot_chellappa(nx: &Grid2<f64>, ny: &Grid2<f64>) -> Result<Grid2<f64>> {
    if nx.shape() != ny.shape() {
        return Err(ReconError::ShapeMismatch(nx.shape(), ny.shape()));
    }
    let (rows, cols) = nx.shape();
    if rows == 0 || cols == 0 {
        return Ok(Grid2::zeros(rows, cols));
    }
    // targets for ∂Z/∂x and ∂Z/∂y
    let mut p: Vec<Complex<f64>> = nx.as_slice().iter().map(|&v| Complex::new(-v, 0.0)).collect();
    let mut q: Vec<Complex<f64>> = ny.as_slice().iter().map(|&v| Complex::new(-v, 0.0)).collect();
    fft2(&mut p, rows, cols, false);
    fft2(&mut q, rows, cols, false);
    let mut zh = vec![Complex::new(0.0, 0.0); rows * cols];
    for r in 0..rows {
        let wy = omega(r, rows);
        for c in 0..cols {
            let wx = omega(c, cols);
            let den = wx * wx + wy * wy;
            if den > 0.0 {
                let k = r * cols + c;
                // (conj(i·wx)·P + conj(i·wy)·Q) / (wx² + wy²)
                zh[k] = Complex::new(0.0, -1.0) * (p[k] * wx + q[k] * wy) / den;
            }
        }
    }
    fft2(&mut zh, rows, cols, true);
    let scale = 1.0 / (rows * cols) as f64;
    let mut z = Grid2::from_vec(rows, cols, zh.iter().map(|v| v.re * scale).collect());
    z.remove_mean();
    Ok(z)
}

/// `Σ w·‖(−∇Z − n*)‖²` with the finite differences of [`gradient`].
pub fn weighted_energy(agg: &AggregateNormals, z: &Grid2<f64>) -> f64 {
    let (gx, gy) = gradient(z);
    let mut e = 0.0;
    for k in 0..z.len() {
        let w = agg.weight.as_slice()[k];
        if w > 0.0 {
            let ex = gx.as_slice()[k] + agg.nx.as_slice()[k];
            let ey = gy.as_slice()[k] + agg.ny.as_slice()[k];
            e += w * (ex * ex + ey * ey);
        }
    }
    e
}

/// `Dxᵀ u` and `Dyᵀ v` accumulated into `out`.
fn apply_gradient_transpose(u: &Grid2<f64>, v: &Grid2<f64>, out: &mut Grid2<f64>) {
    let (rows, cols) = u.shape();
    out.as_mut_slice().fill(0.0);
    for r in 0..rows {
        for c in 0..cols {
            let (a, b) = (u.at(r, c), v.at(r, c));
            for (k, w) in diff_stencil(cols, c) {
                *out.get_mut(r, k) += w * a;
            }
            for (k, w) in diff_stencil(rows, r) {
                *out.get_mut(k, c) += w * b;
            }
        }
    }
}

/// `(DxᵀWDx + DyᵀWDy) z`.
fn apply_normal_operator(w: &Grid2<f64>, z: &Grid2<f64>, out: &mut Grid2<f64>) {
    let (mut gx, mut gy) = gradient(z);
    for k in 0..z.len() {
        gx.as_mut_slice()[k] *= w.as_slice()[k];
        gy.as_mut_slice()[k] *= w.as_slice()[k];
    }
    apply_gradient_transpose(&gx, &gy, out);
}

fn dot(a: &Grid2<f64>, b: &Grid2<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgOutcome {
    pub z: Grid2<f64>,
    /// Weighted energy at the start and after every iteration.
    pub energy: Vec<f64>,
    pub iterations: usize,
    /// Residual fell below `1e-12` of its initial norm.
    pub converged: bool,
    /// Neither converged nor reduced the residual at all.
    pub non_convergence: bool,
}

/// Conjugate gradients on the normal equations of the weighted objective,
/// warm-started at `z_init`. The result has zero mean.
pub fn weighted_integrate_cg(agg: &AggregateNormals, z_init: &Grid2<f64>, iters: usize) -> Result<CgOutcome> {
    if iters == 0 {
        return Err(ReconError::InvalidConfig("CG needs at least one iteration".into()));
    }
    let shape = z_init.shape();
    for g in [&agg.weight, &agg.nx, &agg.ny] {
        if g.shape() != shape {
            return Err(ReconError::ShapeMismatch(g.shape(), shape));
        }
    }
    let (rows, cols) = shape;
    // b = −(DxᵀW n_x + DyᵀW n_y)
    let wnx = Grid2::from_fn(rows, cols, |r, c| -agg.weight.at(r, c) * agg.nx.at(r, c));
    let wny = Grid2::from_fn(rows, cols, |r, c| -agg.weight.at(r, c) * agg.ny.at(r, c));
    let mut b = Grid2::zeros(rows, cols);
    apply_gradient_transpose(&wnx, &wny, &mut b);

    let mut z = z_init.clone();
    let mut az = Grid2::zeros(rows, cols);
    apply_normal_operator(&agg.weight, &z, &mut az);
    let mut res = Grid2::from_fn(rows, cols, |r, c| b.at(r, c) - az.at(r, c));
    let mut dir = res.clone();
    let mut rr = dot(&res, &res);
    let rr0 = rr;
    let mut energy = vec![weighted_energy(agg, &z)];
    let mut ad = Grid2::zeros(rows, cols);
    let mut iterations = 0;
    let mut converged = rr0 == 0.0;
    while !converged && iterations < iters {
        iterations += 1;
        apply_normal_operator(&agg.weight, &dir, &mut ad);
        let dad = dot(&dir, &ad);
        if !(dad > 0.0) {
            break;
        }
        let alpha = rr / dad;
        for k in 0..z.len() {
            z.as_mut_slice()[k] += alpha * dir.as_slice()[k];
            res.as_mut_slice()[k] -= alpha * ad.as_slice()[k];
        }
        let rr_new = dot(&res, &res);
        energy.push(weighted_energy(agg, &z));
        if rr_new <= 1e-24 * rr0 {
            converged = true;
        }
        let beta = rr_new / rr;
        for k in 0..z.len() {
            dir.as_mut_slice()[k] = res.as_slice()[k] + beta * dir.as_slice()[k];
        }
        rr = rr_new;
    }
    z.remove_mean();
    Ok(CgOutcome {
        z,
        energy,
        iterations,
        converged,
        non_convergence: !converged && rr >= rr0,
    })
}

/// Separable Gaussian blur, kernel radius `⌈3σ⌉`, replicated borders.
pub fn gaussian_smooth(z: &Grid2<f64>, sigma: f64) -> Grid2<f64> {
    if !(sigma > 0.0) {
        return z.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= norm);
    let (rows, cols) = z.shape();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let h = Grid2::from_fn(rows, cols, |r, c| {
        (-radius..=radius)
            .zip(&kernel)
            .map(|(k, w)| w * z.at(r, clamp(c as isize + k, cols)))
            .sum::<f64>()
    });
    Grid2::from_fn(rows, cols, |r, c| {
        (-radius..=radius)
            .zip(&kernel)
            .map(|(k, w)| w * h.at(clamp(r as isize + k, rows), c))
            .sum()
    })
}

/// `λ = 1 / (4·mean(median − min))` over the patches of the smallest scale.
pub fn auto_lambda(d: &MultiScaleProposals, sizes: Option<&[usize]>) -> Result<f64> {
    let scale = d
        .scales
        .iter()
        .filter(|s| !s.sets.is_empty() && sizes.is_none_or(|z| z.contains(&s.size)))
        .min_by_key(|s| s.size)
        .ok_or(ReconError::NoDistributions)?;
    let gaps: Vec<f64> = scale
        .sets
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.median_cost() - s.min_cost())
        .collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len().max(1) as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(ReconError::FlatCosts);
    }
    Ok(1.0 / (4.0 * mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    /// `None`: chosen by [`auto_lambda`].
    pub lambda: Option<f64>,
    /// `None`: `10/λ`.
    pub d_phi: Option<f64>,
    pub sigma0: f64,
    pub sigma_factor: f64,
    pub cg_iters: usize,
    pub convergence_tol: f64,
    pub max_rounds: usize,
    /// Scales to use; `None` uses every scale present.
    pub patch_sizes: Option<Vec<usize>>,
    /// Offer the dummy label after the plain alternation converges.
    pub use_dummy: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            d_phi: None,
            sigma0: 8.0,
            sigma_factor: 0.5,
            cg_iters: 100,
            convergence_tol: 1e-6,
            max_rounds: 100,
            patch_sizes: None,
            use_dummy: true,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ReconError::InvalidConfig(m.into()));
        if self.lambda.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
            return bad("lambda must be positive");
        }
        if self.d_phi.is_some_and(|v| !v.is_finite()) {
            return bad("d_phi must be finite");
        }
        if !(self.sigma0 > 1.0 && self.sigma0.is_finite()) {
            return bad("sigma0 must exceed 1");
        }
        if !(self.sigma_factor > 0.0 && self.sigma_factor < 1.0) {
            return bad("sigma_factor must lie in (0, 1)");
        }
        if self.cg_iters == 0 || self.max_rounds == 0 {
            return bad("cg_iters and max_rounds must be positive");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Smoothed depth, inflated λ, no dummy.
    Annealing,
    /// Plain alternation without the dummy.
    Plain,
    /// Plain alternation with the dummy label available.
    Dummy,
    /// Exact weighted depth solves with the final label set.
    Refine,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Annealing => "annealing",
            Stage::Plain => "plain",
            Stage::Dummy => "dummy",
            Stage::Refine => "refine",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthStep {
    Fft,
    Cg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    pub stage: Stage,
    pub sigma: f64,
    pub lambda: f64,
    /// `C` after the round's label and depth updates.
    pub cost: f64,
    pub depth_step: DepthStep,
    pub labels_changed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleHistogram {
    pub size: usize,
    /// Index `j` counts patches labelled `j`; the last bin is the dummy.
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub lambda: f64,
    pub d_phi: f64,
    pub config: ReconConfig,
    pub trace: Vec<TraceEntry>,
    pub label_histograms: Vec<ScaleHistogram>,
    pub cg_non_convergence: usize,
    /// Stages that stopped on `max_rounds` rather than converging.
    pub unconverged_stages: Vec<Stage>,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub depth: DepthMap,
    pub labeling: Labeling,
    pub report: ReconReport,
}

fn count_changes(a: &Labeling, b: &Labeling) -> usize {
    a.labels.iter().zip(&b.labels).filter(|(x, y)| x != y).count()
}

fn coverage(d: &PatchSets) -> Grid2<bool> {
    let mut v = Grid2::filled(d.rows, d.cols, false);
    for set in &d.sets {
        for (dy, dx) in patch_offsets(set.size) {
            let (r, c) = pixel_of(set.origin, dy, dx);
            if r >= 0 && c >= 0 && (r as usize) < d.rows && (c as usize) < d.cols {
                v.set(r as usize, c as usize, true);
            }
        }
    }
    v
}

struct Run<'a> {
    d: PatchSets<'a>,
    exec: &'a Exec,
    cfg: &'a ReconConfig,
    lambda: f64,
    z: Grid2<f64>,
    labels: Labeling,
    trace: Vec<TraceEntry>,
    cg_non_convergence: usize,
    unconverged: Vec<Stage>,
}

impl Run<'_> {
    fn record(&mut self, stage: Stage, sigma: f64, lambda: f64, step: DepthStep, changed: usize) -> Result<f64> {
        let cost = global_cost(&self.z, &self.labels, &self.d, lambda)?;
        self.trace.push(TraceEntry {
            round: self.trace.len(),
            stage,
            sigma,
            lambda,
            cost,
            depth_step: step,
            labels_changed: changed,
        });
        Ok(cost)
    }

    fn cg(&mut self, agg: &AggregateNormals) -> Result<Grid2<f64>> {
        let out = weighted_integrate_cg(agg, &self.z, self.cfg.cg_iters)?;
        if out.non_convergence {
            self.cg_non_convergence += 1;
        }
        Ok(out.z)
    }

    /// Label update, then an FFT depth step; falls back to CG from the
    /// current depth when the FFT surface would raise `C`.
    fn round(&mut self, stage: Stage, sigma: f64, allow_dummy: bool, smooth: bool) -> Result<(f64, usize)> {
        let lambda = sigma * sigma * self.lambda;
        let new = update_labels(&self.z, &self.d, lambda, allow_dummy, self.exec)?;
        let changed = count_changes(&new, &self.labels);
        self.labels = new;
        let agg = aggregate_normals(&self.labels, &self.d)?;
        let mut cand = frankot_chellappa(&agg.nx, &agg.ny)?;
        if smooth {
            cand = gaussian_smooth(&cand, sigma);
        }
        let mut step = DepthStep::Fft;
        if !smooth {
            let before = global_cost(&self.z, &self.labels, &self.d, lambda)?;
            let after = global_cost(&cand, &self.labels, &self.d, lambda)?;
            if after > before {
                cand = self.cg(&agg)?;
                step = DepthStep::Cg;
            }
        }
        self.z = cand;
        Ok((self.record(stage, sigma, lambda, step, changed)?, changed))
    }

    fn converge(&mut self, stage: Stage, allow_dummy: bool) -> Result<()> {
        let mut prev = f64::INFINITY;
        for _ in 0..self.cfg.max_rounds {
            let (cost, changed) = if stage == Stage::Refine {
                let new = update_labels(&self.z, &self.d, self.lambda, allow_dummy, self.exec)?;
                let changed = count_changes(&new, &self.labels);
                self.labels = new;
                let agg = aggregate_normals(&self.labels, &self.d)?;
                self.z = self.cg(&agg)?;
                (self.record(stage, 1.0, self.lambda, DepthStep::Cg, changed)?, changed)
            } else {
                self.round(stage, 1.0, allow_dummy, false)?
            };
            let settled = (prev - cost).abs() <= self.cfg.convergence_tol * cost.abs().max(1e-300);
            if changed == 0 && settled {
                return Ok(());
            }
            prev = cost;
        }
        self.unconverged.push(stage);
        Ok(())
    }
}

/// Alternating minimisation of `C` over depth and labels.
///
/// Schedule: annealing rounds with `σ = σ₀, σ₀σ_f, …` while `σ > 1`
/// (depth smoothed by `σ`, cost weight `σ²λ`), then plain rounds to
/// convergence, then (if enabled) rounds with the dummy label, then rounds
/// of exact CG depth solves.
pub fn reconstruct(dist: &MultiScaleProposals, cfg: &ReconConfig, exec: &Exec) -> Result<Reconstruction> {
    cfg.validate()?;
    let sizes = cfg.patch_sizes.as_deref();
    let lambda = match cfg.lambda {
        Some(v) => v,
        None => auto_lambda(dist, sizes)?,
    };
    let d_phi = cfg.d_phi.unwrap_or(10.0 / lambda);
    let mut owned = dist.clone();
    for s in &mut owned.scales {
        for set in &mut s.sets {
            set.dummy_cost = Some(d_phi);
        }
    }
    let d = match sizes {
        Some(z) => PatchSets::with_sizes(&owned, z),
        None => PatchSets::all(&owned),
    };
    if d.is_empty() {
        return Err(ReconError::NoDistributions);
    }
    if d.sets.iter().any(|s| s.is_empty()) {
        return Err(ReconError::InvalidConfig("a proposal set is empty".into()));
    }
    let valid = coverage(&d);
    // start from the most likely proposal everywhere
    let labels = Labeling {
        labels: d.sets.iter().map(|s| s.best_index().expect("nonempty")).collect(),
    };
    let mut run = Run {
        z: Grid2::zeros(d.rows, d.cols),
        d,
        exec,
        cfg,
        lambda,
        labels,
        trace: Vec::new(),
        cg_non_convergence: 0,
        unconverged: Vec::new(),
    };

    let agg = aggregate_normals(&run.labels, &run.d)?;
    let mut sigma = cfg.sigma0;
    run.z = gaussian_smooth(&frankot_chellappa(&agg.nx, &agg.ny)?, sigma);
    run.record(Stage::Annealing, sigma, sigma * sigma * lambda, DepthStep::Fft, 0)?;
    sigma *= cfg.sigma_factor;
    while sigma > 1.0 {
        run.round(Stage::Annealing, sigma, false, true)?;
        sigma *= cfg.sigma_factor;
    }
    run.converge(Stage::Plain, false)?;
    if cfg.use_dummy {
        run.converge(Stage::Dummy, true)?;
    }
    run.converge(Stage::Refine, cfg.use_dummy)?;

    let mut histograms: Vec<ScaleHistogram> = Vec::new();
    let mut p = 0;
    for s in &owned.scales {
        if sizes.is_some_and(|z| !z.contains(&s.size)) {
            continue;
        }
        let bins = s.sets.iter().map(|x| x.len() + 1).max().unwrap_or(1);
        let mut counts = vec![0; bins];
        for set in &s.sets {
            let label = run.labels.labels[p];
            let bin = if label == set.len() { bins - 1 } else { label };
            counts[bin] += 1;
            p += 1;
        }
        histograms.push(ScaleHistogram { size: s.size, counts });
    }

    Ok(Reconstruction {
        depth: DepthMap { z: run.z, valid },
        labeling: run.labels,
        report: ReconReport {
            lambda,
            d_phi,
            config: cfg.clone(),
            trace: run.trace,
            label_histograms: histograms,
            cg_non_convergence: run.cg_non_convergence,
            unconverged_stages: run.unconverged,
        },
    })
}
