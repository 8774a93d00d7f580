//! Quadratic surface patches under Lambertian shading.
//!
//! A patch has depth `z(x, y) = a1·x² + a2·y² + a3·xy + a4·x + a5·y` (up to a
//! constant) in coordinates centred on the patch. Its un-normalised normal is
//! `n = (-∂z/∂x, -∂z/∂y, 1)` and a directional light `l` (whose magnitude is
//! albedo × strength) produces the intensity `I = lᵀn / ‖n‖`.
//!
//! Besides forward rendering this module provides the azimuthal angle θ that
//! indexes normals on an intensity cone, and generators for every family of
//! shape/light pairs that produce identical images.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("quadratic shape has non-finite coefficients")]
    NonFiniteShape,
    #[error("invalid light: {0}")]
    InvalidLight(String),
    #[error("invalid patch grid: {0}")]
    InvalidGrid(String),
    #[error("invalid intensity patch: {0}")]
    InvalidPatch(String),
    #[error("point {index} is in shadow (lᵀn = {dot})")]
    ShadowedPoint { index: usize, dot: f64 },
    #[error("light has no planar component; azimuth is undefined")]
    DegenerateLight,
    #[error("normal coincides with the light point; azimuth is undefined")]
    DegenerateNormal,
    #[error("Hessian eigenvalues are equal in magnitude; use the equal-magnitude family")]
    EqualMagnitudeHessian,
    #[error("shape is planar (zero Hessian)")]
    PlanarShape,
    #[error("shape is not planar")]
    NotPlanar,
    #[error("shape is not an axis-aligned cylinder (need a2 = a3 = 0, a1 ≠ 0)")]
    NotCylinder,
    #[error("family member leaves part of the patch in shadow")]
    ShadowViolation,
    #[error("shape matrix is not symmetric in its upper-left block")]
    AsymmetricShapeMatrix,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Coefficients `[a1, a2, a3, a4, a5]` of a quadratic depth patch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuadShape(pub [f64; 5]);

impl QuadShape {
    pub const ZERO: QuadShape = QuadShape([0.0; 5]);

    pub const fn new(a1: f64, a2: f64, a3: f64, a4: f64, a5: f64) -> Self {
        Self([a1, a2, a3, a4, a5])
    }

    /// Plane with the given slopes `∂z/∂x = a4`, `∂z/∂y = a5`.
    pub const fn planar(a4: f64, a5: f64) -> Self {
        Self([0.0, 0.0, 0.0, a4, a5])
    }

    pub fn coeffs(&self) -> [f64; 5] {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn hessian(&self) -> [[f64; 2]; 2] {
        let [a1, a2, a3, ..] = self.0;
        [[a1, 0.5 * a3], [0.5 * a3, a2]]
    }

    pub fn jacobian(&self) -> [f64; 2] {
        [self.0[3], self.0[4]]
    }

    /// Eigenvalues of the Hessian, smallest first.
    pub fn hessian_eigenvalues(&self) -> (f64, f64) {
        let [a1, a2, a3, ..] = self.0;
        let mean = 0.5 * (a1 + a2);
        let rad = (0.5 * (a1 - a2)).hypot(0.5 * a3);
        (mean - rad, mean + rad)
    }

    pub fn depth_at(&self, x: f64, y: f64) -> f64 {
        let [a1, a2, a3, a4, a5] = self.0;
        a1 * x * x + a2 * y * y + a3 * x * y + a4 * x + a5 * y
    }

    /// `(n_x, n_y)` of the un-normalised normal `(n_x, n_y, 1)`.
    #[inline]
    pub fn normal_at(&self, x: f64, y: f64) -> (f64, f64) {
        let [a1, a2, a3, a4, a5] = self.0;
        (-2.0 * a1 * x - a3 * y - a4, -a3 * x - 2.0 * a2 * y - a5)
    }

    pub fn shape_matrix(&self) -> ShapeMatrix {
        ShapeMatrix::from_shape(self)
    }

    fn scale(&self) -> f64 {
        self.0[..3].iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn is_planar(&self) -> bool {
        self.0[..3].iter().all(|&v| v == 0.0)
    }

    fn has_equal_magnitude_hessian(&self) -> bool {
        let [a1, a2, a3, ..] = self.0;
        let tol = 1e-12 * self.scale();
        (a1 + a2).abs() <= tol || ((a1 - a2).abs() <= tol && a3.abs() <= tol)
    }

    fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.0.iter().zip(other.0.iter()).all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Directional light scaled by albedo × light strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct LightVector {
    x: f64,
    y: f64,
    z: f64,
}

impl LightVector {
    /// Fails unless all components are finite and `lz > 0`.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(ModelError::InvalidLight("non-finite component".into()));
        }
        if z <= 0.0 {
            return Err(ModelError::InvalidLight(format!(
                "lz must be positive, got {z}"
            )));
        }
        Ok(Self { x, y, z })
    }

    /// Light from elevation above the image plane and azimuth from the +x axis.
    pub fn from_angles(elevation_deg: f64, azimuth_deg: f64, strength: f64) -> Result<Self> {
        if !(strength > 0.0) {
            return Err(ModelError::InvalidLight(format!(
                "strength must be positive, got {strength}"
            )));
        }
        let (el, az) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
        Self::new(
            strength * el.cos() * az.cos(),
            strength * el.cos() * az.sin(),
            strength * el.sin(),
        )
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.x
    }
    #[inline]
    pub fn y(&self) -> f64 {
        self.y
    }
    #[inline]
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// `lx² + ly²`.
    pub fn planar_norm_sq(&self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    /// `lᵀ(n_x, n_y, 1)`.
    #[inline]
    pub fn dot_normal(&self, nx: f64, ny: f64) -> f64 {
        self.x * nx + self.y * ny + self.z
    }

    /// Lambertian intensity of the un-normalised normal `(n_x, n_y, 1)`.
    #[inline]
    pub fn shade(&self, nx: f64, ny: f64) -> f64 {
        self.dot_normal(nx, ny) / (nx * nx + ny * ny + 1.0).sqrt()
    }
}

impl TryFrom<[f64; 3]> for LightVector {
    type Error = ModelError;
    fn try_from(v: [f64; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<LightVector> for [f64; 3] {
    fn from(l: LightVector) -> Self {
        l.to_array()
    }
}

/// Pixel coordinates of a patch relative to its centre.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    points: Vec<(f64, f64)>,
}

impl PatchGrid {
    /// Requires finite, distinct points including the centre `(0, 0)`.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(ModelError::InvalidGrid("non-finite coordinate".into()));
        }
        if !points.contains(&(0.0, 0.0)) {
            return Err(ModelError::InvalidGrid("centre (0, 0) missing".into()));
        }
        let mut sorted = points.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(ModelError::InvalidGrid("duplicate coordinate".into()));
        }
        Ok(Self { points })
    }

    /// Grid without the centre-membership check; used for rank analysis of
    /// arbitrary point sets.
    pub fn from_points_unchecked(points: Vec<(f64, f64)>) -> Self {
        Self { points }
    }

    /// `k × k` integer grid centred on the origin, row-major (`y` outer).
    /// `k` must be odd.
    pub fn square(k: usize) -> Self {
        assert!(k % 2 == 1, "square patch size must be odd");
        let h = (k / 2) as i64;
        let points = (-h..=h)
            .flat_map(|y| (-h..=h).map(move |x| (x as f64, y as f64)))
            .collect();
        Self { points }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn center_index(&self) -> Option<usize> {
        self.points.iter().position(|&p| p == (0.0, 0.0))
    }

    pub fn with_point(&self, p: (f64, f64)) -> Self {
        let mut points = self.points.clone();
        points.push(p);
        Self { points }
    }
}

/// Observed intensities on a patch grid with a per-point usability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityPatch {
    grid: PatchGrid,
    intensities: Vec<f64>,
    mask: Vec<bool>,
}

impl IntensityPatch {
    pub fn new(grid: PatchGrid, intensities: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if intensities.len() != grid.len() || mask.len() != grid.len() {
            return Err(ModelError::InvalidPatch(format!(
                "grid has {} points but {} intensities and {} mask entries",
                grid.len(),
                intensities.len(),
                mask.len()
            )));
        }
        if let Some(i) = intensities
            .iter()
            .zip(&mask)
            .position(|(v, &m)| m && !v.is_finite())
        {
            return Err(ModelError::InvalidPatch(format!(
                "masked-in intensity {i} is not finite"
            )));
        }
        Ok(Self {
            grid,
            intensities,
            mask,
        })
    }

    /// Every point usable.
    pub fn unmasked(grid: PatchGrid, intensities: Vec<f64>) -> Result<Self> {
        let mask = vec![true; intensities.len()];
        Self::new(grid, intensities, mask)
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn masked_in_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `(x, y, I)` for every usable point.
    pub fn samples(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.grid
            .points
            .iter()
            .zip(&self.intensities)
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|((&(x, y), &i), _)| (x, y, i))
    }

    /// Intensity at `(0, 0)` if that point is usable.
    pub fn center_intensity(&self) -> Option<f64> {
        let c = self.grid.center_index()?;
        self.mask[c].then(|| self.intensities[c])
    }

    /// Same patch with point `index` masked out.
    pub fn with_masked(&self, index: usize) -> Self {
        let mut p = self.clone();
        p.mask[index] = false;
        p
    }
}

/// Affine 3×3 map from homogeneous pixel coordinates to the normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeMatrix(pub [[f64; 3]; 3]);

impl ShapeMatrix {
    pub fn from_shape(a: &QuadShape) -> Self {
        let [a1, a2, a3, a4, a5] = a.0;
        Self([
            [-2.0 * a1, -a3, -a4],
            [-a3, -2.0 * a2, -a5],
            [0.0, 0.0, 1.0],
        ])
    }

    /// Reads the shape back; the off-diagonal entries must agree.
    pub fn to_shape(&self) -> Result<QuadShape> {
        let m = &self.0;
        let scale = m[0][0].abs().max(m[1][1].abs()).max(1.0);
        if (m[0][1] - m[1][0]).abs() > 1e-9 * scale {
            return Err(ModelError::AsymmetricShapeMatrix);
        }
        Ok(QuadShape([
            -0.5 * m[0][0],
            -0.5 * m[1][1],
            -0.5 * (m[0][1] + m[1][0]),
            -m[0][2],
            -m[1][2],
        ]))
    }

    pub fn apply(&self, x: f64, y: f64) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
            m[2][0] * x + m[2][1] * y + m[2][2],
        ]
    }

    /// `B · A` for an orthogonal planar block `B`.
    pub fn left_mul(b: &Planar2, a: &ShapeMatrix) -> ShapeMatrix {
        let mut out = a.0;
        for c in 0..3 {
            out[0][c] = b.0[0][0] * a.0[0][c] + b.0[0][1] * a.0[1][c];
            out[1][c] = b.0[1][0] * a.0[0][c] + b.0[1][1] * a.0[1][c];
        }
        ShapeMatrix(out)
    }
}

/// Orthogonal 2×2 block of an affine transform acting on `(n_x, n_y)` and
/// `(l_x, l_y)`, leaving the third component alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Planar2(pub [[f64; 2]; 2]);

impl Planar2 {
    pub const IDENTITY: Planar2 = Planar2([[1.0, 0.0], [0.0, 1.0]]);

    pub fn rotation(phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Self([[c, -s], [s, c]])
    }

    /// Reflection `[[cos φ, sin φ], [sin φ, -cos φ]]`.
    pub fn anti_rotation(phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Self([[c, s], [s, -c]])
    }

    pub fn neg(self) -> Self {
        let m = self.0;
        Self([[-m[0][0], -m[0][1]], [-m[1][0], -m[1][1]]])
    }

    pub fn apply_light(&self, l: &LightVector) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * l.x + m[0][1] * l.y,
            m[1][0] * l.x + m[1][1] * l.y,
            l.z,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShadowPolicy {
    /// Any point with `lᵀn ≤ 0` is an error.
    Error,
    /// Shadowed points get intensity 0 and are masked out.
    ClampZero,
}

/// Un-normalised normals `(n_x, n_y, 1)` at every grid point.
pub fn normals(a: &QuadShape, grid: &PatchGrid) -> Vec<[f64; 3]> {
    grid.points
        .iter()
        .map(|&(x, y)| {
            let (nx, ny) = a.normal_at(x, y);
            [nx, ny, 1.0]
        })
        .collect()
}

/// Lambertian image of the patch.
pub fn render(
    a: &QuadShape,
    l: &LightVector,
    grid: &PatchGrid,
    policy: ShadowPolicy,
) -> Result<IntensityPatch> {
    if grid.is_empty() {
        return Err(ModelError::InvalidGrid("empty grid".into()));
    }
    if !a.is_finite() {
        return Err(ModelError::NonFiniteShape);
    }
    let mut intensities = Vec::with_capacity(grid.len());
    let mut mask = Vec::with_capacity(grid.len());
    for (index, &(x, y)) in grid.points.iter().enumerate() {
        let (nx, ny) = a.normal_at(x, y);
        let dot = l.dot_normal(nx, ny);
        if dot <= 0.0 {
            match policy {
                ShadowPolicy::Error => return Err(ModelError::ShadowedPoint { index, dot }),
                ShadowPolicy::ClampZero => {
                    intensities.push(0.0);
                    mask.push(false);
                }
            }
        } else {
            intensities.push(dot / (nx * nx + ny * ny + 1.0).sqrt());
            mask.push(true);
        }
    }
    Ok(IntensityPatch {
        grid: grid.clone(),
        intensities,
        mask,
    })
}

/// True when every grid point is lit (`lᵀn > 0`).
pub fn is_shadow_free(a: &QuadShape, l: &LightVector, grid: &PatchGrid) -> bool {
    grid.points.iter().all(|&(x, y)| {
        let (nx, ny) = a.normal_at(x, y);
        l.dot_normal(nx, ny) > 0.0
    })
}

/// `nᵀ(llᵀ − I²·Id)n` at `(x, y)`; zero iff `I` is consistent with `(a, l)`
/// up to the sign of `I`.
pub fn quad_constraint_residual(a: &QuadShape, l: &LightVector, intensity: f64, x: f64, y: f64) -> f64 {
    let (nx, ny) = a.normal_at(x, y);
    let ln = l.dot_normal(nx, ny);
    ln * ln - intensity * intensity * (nx * nx + ny * ny + 1.0)
}

/// Azimuth of the normal `(n_x, n_y, 1)` on its light-centred cone, in
/// `(-π, π]`.
pub fn theta_of_normal(n: (f64, f64), l: &LightVector) -> Result<f64> {
    let (lx, ly, lz) = (l.x, l.y, l.z);
    if lx.hypot(ly) < 1e-14 {
        return Err(ModelError::DegenerateLight);
    }
    let (nx, ny) = n;
    let num = nx * ly - ny * lx;
    let den = lx * lx + ly * ly - lz * (nx * lx + ny * ly);
    if num.abs() < 1e-14 && den.abs() < 1e-14 {
        return Err(ModelError::DegenerateNormal);
    }
    Ok(wrap_angle(num.atan2(den)))
}

/// θ of the centre normal `(-a4, -a5)`.
pub fn theta_of_shape(a: &QuadShape, l: &LightVector) -> Result<f64> {
    theta_of_normal((-a.0[3], -a.0[4]), l)
}

/// Maps any angle into `(-π, π]`.
pub fn wrap_angle(t: f64) -> f64 {
    let mut w = t.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// The four orthogonal transforms relating shapes that share an image, in
/// the order identity, convex/concave flip, reflection, flipped reflection.
pub fn four_way_transforms(a: &QuadShape) -> Result<[Planar2; 4]> {
    if !a.is_finite() {
        return Err(ModelError::NonFiniteShape);
    }
    if a.is_planar() {
        return Err(ModelError::PlanarShape);
    }
    if a.has_equal_magnitude_hessian() {
        return Err(ModelError::EqualMagnitudeHessian);
    }
    let [a1, a2, a3, ..] = a.0;
    let phi0 = a3.atan2(a1 - a2);
    let refl = Planar2::anti_rotation(phi0);
    Ok([
        Planar2::IDENTITY,
        Planar2::IDENTITY.neg(),
        refl,
        refl.neg(),
    ])
}

fn transform_pair(a: &QuadShape, l: &LightVector, b: &Planar2) -> Result<(QuadShape, LightVector)> {
    let shape = ShapeMatrix::left_mul(b, &a.shape_matrix()).to_shape()?;
    let [x, y, z] = b.apply_light(l);
    Ok((shape, LightVector::new(x, y, z)?))
}

/// All shape/light pairs (at most four) that render the same image as
/// `(a, l)` on any non-degenerate shadow-free patch. The input pair is first.
pub fn four_solutions(a: &QuadShape, l: &LightVector) -> Result<Vec<(QuadShape, LightVector)>> {
    let transforms = four_way_transforms(a)?;
    let mut out: Vec<(QuadShape, LightVector)> = Vec::with_capacity(4);
    let tol = 1e-12 * (1.0 + a.0.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    for b in &transforms {
        let (s, lt) = transform_pair(a, l, b)?;
        let lscale = tol * l.norm().max(1.0);
        let dup = out.iter().any(|(s2, l2)| {
            s.approx_eq(s2, tol)
                && lt
                    .to_array()
                    .iter()
                    .zip(l2.to_array())
                    .all(|(p, q)| (p - q).abs() <= lscale)
        });
        if !dup {
            out.push((s, lt));
        }
    }
    Ok(out)
}

/// Member of the one-parameter light family available for a cylinder
/// (`a2 = a3 = 0`). `member` selects one of the four shapes of
/// [`four_solutions`]; `c` moves the light along the null direction
/// `[0, 1, a5]` of the shape matrix. Returns the member's light after checking
/// that the member shape is lit everywhere on `grid`.
pub fn cylinder_light_family(
    a: &QuadShape,
    l: &LightVector,
    member: usize,
    c: f64,
    grid: &PatchGrid,
) -> Result<LightVector> {
    let [a1, a2, a3, _, a5] = a.0;
    if a1 == 0.0 || a2.abs() > 1e-12 * a1.abs() || a3.abs() > 1e-12 * a1.abs() {
        return Err(ModelError::NotCylinder);
    }
    if member >= 4 {
        return Err(ModelError::InvalidParameter(format!(
            "cylinder member index {member} out of range"
        )));
    }
    let b = four_way_transforms(a)?[member];
    let shifted = [l.x, l.y + c, l.z + c * a5];
    let m = &b.0;
    let lt = [
        m[0][0] * shifted[0] + m[0][1] * shifted[1],
        m[1][0] * shifted[0] + m[1][1] * shifted[1],
        shifted[2],
    ];
    let lt = LightVector::new(lt[0], lt[1], lt[2]).map_err(|_| ModelError::ShadowViolation)?;
    let shape = ShapeMatrix::left_mul(&b, &a.shape_matrix()).to_shape()?;
    if !is_shadow_free(&shape, &lt, grid) {
        return Err(ModelError::ShadowViolation);
    }
    Ok(lt)
}

/// Selects a member of the equal-eigenvalue-magnitude families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EqualMagnitudeMember {
    /// Saddle branch `[r cos θ, −r cos θ, 2r sin θ, …]`; the light rotates by θ.
    Rotation(f64),
    /// Umbilic branch `[λr, λr, 0, λp, −λq]` with `λ = ±1`.
    Umbilic(f64),
}

/// Shape and light of one member of the continuous family of pairs that
/// share an image when the Hessian eigenvalues have equal magnitude `r`.
pub fn equal_magnitude_family(
    r: f64,
    p: f64,
    q: f64,
    base: &LightVector,
    member: EqualMagnitudeMember,
) -> Result<(QuadShape, LightVector)> {
    if !(r > 0.0) {
        return Err(ModelError::InvalidParameter(format!("r must be positive, got {r}")));
    }
    let (lx, ly, lz) = (base.x, base.y, base.z);
    match member {
        EqualMagnitudeMember::Rotation(theta) => {
            let (s, c) = theta.sin_cos();
            let shape = QuadShape::new(r * c, -r * c, 2.0 * r * s, p * c - q * s, p * s + q * c);
            let light = LightVector::new(lx * c - ly * s, lx * s + ly * c, lz)?;
            Ok((shape, light))
        }
        EqualMagnitudeMember::Umbilic(lambda) => {
            if lambda != 1.0 && lambda != -1.0 {
                return Err(ModelError::InvalidParameter(format!(
                    "λ must be ±1, got {lambda}"
                )));
            }
            let shape = QuadShape::new(lambda * r, lambda * r, 0.0, lambda * p, -lambda * q);
            let light = LightVector::new(lambda * lx, -lambda * ly, lz)?;
            Ok((shape, light))
        }
    }
}

/// Plane whose normal is the normal of planar `a` rotated by `angle` about
/// the light direction. Every such plane has the same (constant) intensity.
pub fn planar_cone_member(a: &QuadShape, l: &LightVector, angle: f64) -> Result<QuadShape> {
    if !a.is_planar() {
        return Err(ModelError::NotPlanar);
    }
    let n = [-a.0[3], -a.0[4], 1.0];
    let norm = l.norm();
    let k = [l.x / norm, l.y / norm, l.z / norm];
    let (s, c) = angle.sin_cos();
    let kxn = [
        k[1] * n[2] - k[2] * n[1],
        k[2] * n[0] - k[0] * n[2],
        k[0] * n[1] - k[1] * n[0],
    ];
    let kdn = k[0] * n[0] + k[1] * n[1] + k[2] * n[2];
    let rot: Vec<f64> = (0..3)
        .map(|i| n[i] * c + kxn[i] * s + k[i] * kdn * (1.0 - c))
        .collect();
    if rot[2] <= 1e-9 {
        return Err(ModelError::ShadowViolation);
    }
    Ok(QuadShape::planar(-rot[0] / rot[2], -rot[1] / rot[2]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyKind {
    FourWay,
    CylinderLightLine,
    EqualMagnitudeContinuum,
    PlanarCone,
}

/// A sampled set of shape/light pairs that are expected to render the same
/// image.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityFamily {
    pub kind: FamilyKind,
    pub members: Vec<(QuadShape, LightVector)>,
}

impl AmbiguityFamily {
    pub fn four_way(a: &QuadShape, l: &LightVector) -> Result<Self> {
        Ok(Self {
            kind: FamilyKind::FourWay,
            members: four_solutions(a, l)?,
        })
    }

    /// Members for every shape of the four-way set and every shift in `cs`
    /// that keeps `grid` lit. Shifts that would shadow the patch are skipped.
    pub fn cylinder_line(a: &QuadShape, l: &LightVector, cs: &[f64], grid: &PatchGrid) -> Result<Self> {
        let transforms = four_way_transforms(a)?;
        let mut members = Vec::new();
        for (m, b) in transforms.iter().enumerate() {
            let shape = ShapeMatrix::left_mul(b, &a.shape_matrix()).to_shape()?;
            for &c in cs {
                match cylinder_light_family(a, l, m, c, grid) {
                    Ok(lt) => members.push((shape, lt)),
                    Err(ModelError::ShadowViolation) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(Self {
            kind: FamilyKind::CylinderLightLine,
            members,
        })
    }

    pub fn equal_magnitude(
        r: f64,
        p: f64,
        q: f64,
        base: &LightVector,
        params: &[EqualMagnitudeMember],
    ) -> Result<Self> {
        let members = params
            .iter()
            .map(|&m| equal_magnitude_family(r, p, q, base, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: FamilyKind::EqualMagnitudeContinuum,
            members,
        })
    }

    /// Planes on the light cone of planar `a`; angles that tip the plane past
    /// vertical are skipped.
    pub fn planar_cone(a: &QuadShape, l: &LightVector, angles: &[f64]) -> Result<Self> {
        let mut members = Vec::new();
        for &t in angles {
            match planar_cone_member(a, l, t) {
                Ok(s) => members.push((s, *l)),
                Err(ModelError::ShadowViolation) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            kind: FamilyKind::PlanarCone,
            members,
        })
    }

    /// Largest RMS difference between the first member's image and any
    /// other member's image on `grid`. Fails if any member shadows the grid.
    pub fn max_render_rms(&self, grid: &PatchGrid) -> Result<f64> {
        let Some((a0, l0)) = self.members.first() else {
            return Ok(0.0);
        };
        let base = render(a0, l0, grid, ShadowPolicy::Error)?;
        let mut worst = 0.0_f64;
        for (a, l) in &self.members[1..] {
            let img = render(a, l, grid, ShadowPolicy::Error)?;
            worst = worst.max(rms_diff(base.intensities(), img.intensities()));
        }
        Ok(worst)
    }
}

pub fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    (a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Numerical rank of the `N × 15` matrix of monomials `x^p y^q`,
/// `p + q ≤ 4`, over the grid points (singular values above `1e-10` of the
/// largest).
pub fn vandermonde_rank(grid: &PatchGrid) -> usize {
    if grid.is_empty() {
        return 0;
    }
    let v = vandermonde_matrix(grid);
    let sv = v.singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-10 * max).count()
}

pub(crate) fn vandermonde_matrix(grid: &PatchGrid) -> DMatrix<f64> {
    let mut exps = Vec::with_capacity(15);
    for total in (0..=4).rev() {
        for q in 0..=total {
            exps.push((total - q, q));
        }
    }
    DMatrix::from_fn(grid.len(), 15, |i, j| {
        let (x, y) = grid.points[i];
        let (p, q) = exps[j];
        x.powi(p as i32) * y.powi(q as i32)
    })
}
