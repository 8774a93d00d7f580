//! Angular-error metrics and the evaluation protocols built on them.

use serde::{Deserialize, Serialize};

use crate::grid::Grid2;
use crate::proposals::ProposalSet;
use crate::synth::{normals_from_depth, NormalField};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("zero-length normal")]
    ZeroVector,
    #[error("array shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("patch at {0:?} reaches outside the ground truth")]
    PatchOutsideTruth((usize, usize)),
    #[error("nothing to evaluate")]
    Empty,
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Angle between two 3-vectors, in degrees.
pub fn angular_error(a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(EvalError::ZeroVector);
    }
    // atan2 of |a×b| and a·b stays accurate near 0° and 180°
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let s = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let c = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    Ok(s.atan2(c).to_degrees())
}

/// Quantile `q ∈ [0, 1]` with linear interpolation between order
/// statistics of the sorted sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            q25: quantile_sorted(&v, 0.25),
            q50: quantile_sorted(&v, 0.5),
            q75: quantile_sorted(&v, 0.75),
        })
    }
}

/// Mean angular error of a proposal over its patch, against ground truth,
/// using only pixels where `mask` is true (all pixels when absent).
pub fn patch_mean_error(set: &ProposalSet, j: usize, truth: &NormalField, mask: Option<&Grid2<bool>>) -> Result<f64> {
    let (rows, cols) = truth.shape();
    let h = (set.size / 2) as isize;
    let a = &set.proposals[j].shape;
    let (mut sum, mut n) = (0.0, 0usize);
    for dy in -h..=h {
        for dx in -h..=h {
            let (r, c) = (set.origin.0 as isize + dy, set.origin.1 as isize + dx);
            if r < 0 || c < 0 || r as usize >= rows || c as usize >= cols {
                return Err(EvalError::PatchOutsideTruth(set.origin));
            }
            let (r, c) = (r as usize, c as usize);
            if mask.is_some_and(|m| !m.at(r, c)) {
                continue;
            }
            let (nx, ny) = a.normal_at(dx as f64, dy as f64);
            sum += angular_error([nx, ny, 1.0], truth.at(r, c))?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok(sum / n as f64)
}

/// Best-of-N statistics for one collection of patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestCurve {
    /// `per_n[k]` summarises N = k + 1.
    pub per_n: Vec<Quantiles>,
    /// Per patch, the best-of-N mean angular error for N = 1..=N_max.
    pub per_patch: Vec<Vec<f64>>,
}

/// For each patch, rank proposals by cost (stable, ascending) and record
/// the lowest mean angular error among the N most likely, N = 1..=n_max.
pub fn n_best_curve<'a>(
    sets: impl IntoIterator<Item = &'a ProposalSet>,
    truth: &NormalField,
    mask: Option<&Grid2<bool>>,
    n_max: usize,
) -> Result<NBestCurve> {
    let mut per_patch = Vec::new();
    for set in sets {
        if set.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.sort_by(|&a, &b| set.proposals[a].cost.total_cmp(&set.proposals[b].cost));
        let mut best = f64::INFINITY;
        let mut curve = Vec::with_capacity(n_max);
        for k in 0..n_max {
            if let Some(&j) = order.get(k) {
                best = best.min(patch_mean_error(set, j, truth, mask)?);
            }
            curve.push(best);
        }
        per_patch.push(curve);
    }
    if per_patch.is_empty() {
        return Err(EvalError::Empty);
    }
    let per_n = (0..n_max)
        .map(|k| Quantiles::of(&per_patch.iter().map(|c| c[k]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(NBestCurve { per_n, per_patch })
}

/// CSV with one row per N: `n,q25,q50,q75`.
pub fn n_best_csv(curve: &NBestCurve) -> String {
    let mut s = String::from("n,q25,q50,q75\n");
    for (k, q) in curve.per_n.iter().enumerate() {
        s.push_str(&format!("{},{},{},{}\n", k + 1, q.q25, q.q50, q.q75));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rows: usize,
    pub cols: usize,
    /// Row-major per-pixel errors in degrees; `None` where not evaluated.
    pub errors: Vec<Option<f64>>,
    pub count: usize,
    pub mean: f64,
    pub quantiles: Quantiles,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

/// Per-pixel angular errors between the normals of two depth maps.
/// Constant depth offsets do not matter.
pub fn surface_report(est: &Grid2<f64>, truth: &Grid2<f64>, mask: Option<&Grid2<bool>>) -> Result<ErrorReport> {
    if est.shape() != truth.shape() {
        return Err(EvalError::ShapeMismatch(est.shape(), truth.shape()));
    }
    if let Some(m) = mask {
        if m.shape() != truth.shape() {
            return Err(EvalError::ShapeMismatch(m.shape(), truth.shape()));
        }
    }
    let (ne, nt) = (normals_from_depth(est), normals_from_depth(truth));
    let (rows, cols) = truth.shape();
    let mut errors = Vec::with_capacity(rows * cols);
    let mut used = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if mask.is_some_and(|m| !m.at(r, c)) {
                errors.push(None);
                continue;
            }
            let e = angular_error(ne.at(r, c), nt.at(r, c))?;
            errors.push(Some(e));
            used.push(e);
        }
    }
    let quantiles = Quantiles::of(&used)?;
    let mean = used.iter().sum::<f64>() / used.len() as f64;
    Ok(ErrorReport {
        rows,
        cols,
        errors,
        count: used.len(),
        mean,
        quantiles,
        metadata: serde_json::Map::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch_model::QuadShape;
    use crate::proposals::Proposal;

    #[test]
    fn angular_error_examples() {
        assert_eq!(angular_error([0.3, -0.2, 1.0], [0.3, -0.2, 1.0]).unwrap(), 0.0);
        assert!((angular_error([0.0, 0.0, 1.0], [1.0, 0.0, 1.0]).unwrap() - 45.0).abs() < 1e-12);
        assert!((angular_error([0.0, 0.0, 1.0], [0.0, 0.0, -1.0]).unwrap() - 180.0).abs() < 1e-12);
        assert_eq!(angular_error([0.0; 3], [0.0, 0.0, 1.0]), Err(EvalError::ZeroVector));
    }

    #[test]
    fn quantiles_interpolate_between_order_statistics() {
        let q = Quantiles::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((q.q25, q.q50, q.q75), (2.0, 3.0, 4.0));
        let q = Quantiles::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((q.q25, q.q50, q.q75), (1.75, 2.5, 3.25));
        assert_eq!(Quantiles::of(&[]), Err(EvalError::Empty));
    }

    #[test]
    fn shifted_depth_has_no_error() {
        let z = Grid2::from_fn(12, 10, |r, c| ((r * c) as f64 * 0.13).sin());
        let rep = surface_report(&z.map(|v| v + 5.0), &z, None).unwrap();
        assert!(rep.errors.iter().all(|e| e.unwrap() < 1e-9));
        assert_eq!(rep.count, 120);
    }

    #[test]
    fn mirrored_depth_has_error() {
        let z = Grid2::from_fn(12, 10, |r, c| 0.1 * c as f64 + 0.02 * (r * r) as f64);
        let mirrored = Grid2::from_fn(12, 10, |r, c| z.at(r, 9 - c));
        assert!(surface_report(&mirrored, &z, None).unwrap().quantiles.q50 > 1.0);
    }

    #[test]
    fn extra_slope_gives_its_angle() {
        let truth = Grid2::zeros(8, 8);
        let est = Grid2::from_fn(8, 8, |_, c| 0.2 * c as f64);
        let rep = surface_report(&est, &truth, None).unwrap();
        let want = 0.2f64.atan().to_degrees();
        assert!((want - 11.3099).abs() < 1e-4);
        assert!(rep.errors.iter().all(|e| (e.unwrap() - want).abs() < 1e-9));
        assert!(surface_report(&est, &Grid2::zeros(8, 7), None).is_err());
    }

    #[test]
    fn masked_pixels_are_skipped() {
        let truth = Grid2::zeros(6, 6);
        let est = Grid2::from_fn(6, 6, |r, _| if r < 3 { 0.0 } else { r as f64 });
        let mask = Grid2::from_fn(6, 6, |r, _| r < 2);
        let rep = surface_report(&est, &truth, Some(&mask)).unwrap();
        assert_eq!(rep.count, 12);
        assert!(rep.errors[30].is_none());
    }

    fn flat_truth(n: usize) -> NormalField {
        NormalField {
            nx: Grid2::zeros(n, n),
            ny: Grid2::zeros(n, n),
        }
    }

    fn set_with(slopes_costs: &[(f64, f64)]) -> ProposalSet {
        ProposalSet {
            proposals: slopes_costs
                .iter()
                .map(|&(s, c)| Proposal {
                    theta: 0.0,
                    shape: QuadShape::planar(s, 0.0),
                    residual_sse: 0.0,
                    cost: c,
                })
                .collect(),
            dummy_cost: None,
            origin: (2, 2),
            size: 3,
        }
    }

    #[test]
    fn single_proposal_curve_is_flat() {
        let s = set_with(&[(0.5, 0.0)]);
        let c = n_best_curve([&s], &flat_truth(5), None, 5).unwrap();
        assert!(c.per_n.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn best_of_n_follows_cost_order() {
        // costs rank 1.0-slope first, then 0.5, then the exact 0.0
        let s = set_with(&[(0.0, 3.0), (1.0, 1.0), (0.5, 2.0)]);
        let c = n_best_curve([&s], &flat_truth(5), None, 4).unwrap();
        let p = &c.per_patch[0];
        assert!((p[0] - 45.0).abs() < 1e-9);
        assert!((p[1] - 0.5f64.atan().to_degrees()).abs() < 1e-9);
        assert_eq!(p[2], 0.0);
        assert_eq!(p[3], 0.0);
        assert!(n_best_csv(&c).starts_with("n,q25,q50,q75\n1,45,45,45\n"));
    }
}
