//! Synthetic scenes: random smooth surfaces and their renderings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grid::{gradient, Grid2};
use crate::patch_model::LightVector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("surface must be at least 16×16, got {0}×{1}")]
    TooSmall(usize, usize),
    #[error("invalid scene setting: {0}")]
    Invalid(String),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// Natural cubic spline through `values` at `knots` (strictly increasing).
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// Second derivatives at the knots; zero at both ends.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn natural(knots: Vec<f64>, values: Vec<f64>) -> Self {
        let n = knots.len();
        assert!(n >= 2 && values.len() == n, "spline needs matching knots and values");
        let mut m = vec![0.0; n];
        if n > 2 {
            // tridiagonal system for the interior second derivatives (Thomas)
            let k = n - 2;
            let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                rhs[i] = 6.0 * ((values[i + 2] - values[i + 1]) / h[i + 1] - (values[i + 1] - values[i]) / h[i]);
            }
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * h[i];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
            }
        }
        Self { knots, values, m }
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.knots.len();
        match self.knots[1..n - 1].iter().position(|&k| x < k) {
            Some(i) => i,
            None => n - 2,
        }
    }

    /// Value and first derivative at `x` (cubic extrapolation outside).
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let i = self.segment(x);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let (a, b) = ((x1 - x) / h, (x - x0) / h);
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let v = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let d = (y1 - y0) / h + (-(3.0 * a * a - 1.0) * m0 + (3.0 * b * b - 1.0) * m1) * h / 6.0;
        (v, d)
    }
}

/// Tensor-product natural bicubic spline over a regular control grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BicubicSpline {
    knots_x: Vec<f64>,
    knots_y: Vec<f64>,
    /// `control[row][col]`.
    control: Vec<Vec<f64>>,
}

impl BicubicSpline {
    pub fn new(knots_x: Vec<f64>, knots_y: Vec<f64>, control: Vec<Vec<f64>>) -> Self {
        assert_eq!(control.len(), knots_y.len());
        assert!(control.iter().all(|r| r.len() == knots_x.len()));
        Self {
            knots_x,
            knots_y,
            control,
        }
    }

    /// `(z, ∂z/∂x, ∂z/∂y)` at `(x, y)`.
    pub fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (mut v, mut dv) = (Vec::new(), Vec::new());
        for row in &self.control {
            let (a, b) = CubicSpline::natural(self.knots_x.clone(), row.clone()).eval(x);
            v.push(a);
            dv.push(b);
        }
        let (z, zy) = CubicSpline::natural(self.knots_y.clone(), v).eval(y);
        let (zx, _) = CubicSpline::natural(self.knots_y.clone(), dv).eval(y);
        (z, zx, zy)
    }

    /// Samples at every pixel of a `rows × cols` grid (x = column, y = row).
    pub fn sample(&self, rows: usize, cols: usize) -> Grid2<f64> {
        // interpolate along x once per control row, then along y per column
        let along_x: Vec<Vec<f64>> = self
            .control
            .iter()
            .map(|row| {
                let s = CubicSpline::natural(self.knots_x.clone(), row.clone());
                (0..cols).map(|c| s.eval(c as f64).0).collect()
            })
            .collect();
        let mut z = Grid2::zeros(rows, cols);
        for c in 0..cols {
            let s = CubicSpline::natural(self.knots_y.clone(), along_x.iter().map(|r| r[c]).collect());
            for r in 0..rows {
                z.set(r, c, s.eval(r as f64).0);
            }
        }
        z
    }
}

pub const CONTROL_POINTS: usize = 5;

/// Evenly spaced knots `k·(n−1)/4` spanning a length-`n` axis.
pub fn control_knots(n: usize) -> Vec<f64> {
    (0..CONTROL_POINTS)
        .map(|k| k as f64 * (n - 1) as f64 / (CONTROL_POINTS - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    pub seed: u64,
    /// Explicit control depths `[row][col]`; drawn from the seed when absent.
    #[serde(default)]
    pub control_grid: Option<[[f64; 5]; 5]>,
    pub rows: usize,
    pub cols: usize,
    /// Control depths are uniform in `[−amplitude, amplitude]`. Absent:
    /// `8·min(rows, cols)/128`, which keeps typical slopes within ±1.
    #[serde(default)]
    pub amplitude: Option<f64>,
}

impl SurfaceSpec {
    pub fn new(seed: u64, rows: usize, cols: usize) -> Self {
        Self {
            seed,
            control_grid: None,
            rows,
            cols,
            amplitude: None,
        }
    }

    pub fn resolved_amplitude(&self) -> f64 {
        self.amplitude
            .unwrap_or(8.0 * self.rows.min(self.cols) as f64 / 128.0)
    }

    /// The control grid actually used.
    pub fn resolved_control(&self) -> [[f64; 5]; 5] {
        if let Some(g) = self.control_grid {
            return g;
        }
        let amp = self.resolved_amplitude();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut g = [[0.0; 5]; 5];
        for row in &mut g {
            for v in row.iter_mut() {
                *v = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
            }
        }
        g
    }

    pub fn spline(&self) -> BicubicSpline {
        BicubicSpline::new(
            control_knots(self.cols),
            control_knots(self.rows),
            self.resolved_control().iter().map(|r| r.to_vec()).collect(),
        )
    }
}

pub fn random_surface(spec: &SurfaceSpec) -> Result<Grid2<f64>> {
    if spec.rows < 16 || spec.cols < 16 {
        return Err(SynthError::TooSmall(spec.rows, spec.cols));
    }
    if spec.amplitude.is_some_and(|a| !(a >= 0.0 && a.is_finite())) {
        return Err(SynthError::Invalid("amplitude must be finite and non-negative".into()));
    }
    Ok(spec.spline().sample(spec.rows, spec.cols))
}

/// Per-pixel `(n_x, n_y)` of the unnormalised normal `(n_x, n_y, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalField {
    pub nx: Grid2<f64>,
    pub ny: Grid2<f64>,
}

impl NormalField {
    pub fn shape(&self) -> (usize, usize) {
        self.nx.shape()
    }

    pub fn at(&self, row: usize, col: usize) -> [f64; 3] {
        [self.nx.at(row, col), self.ny.at(row, col), 1.0]
    }
}

/// `n = (−∂z/∂x, −∂z/∂y, 1)` with the differences of [`gradient`].
pub fn normals_from_depth(z: &Grid2<f64>) -> NormalField {
    let (gx, gy) = gradient(z);
    NormalField {
        nx: gx.map(|v| -v),
        ny: gy.map(|v| -v),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSpec {
    pub light: LightVector,
    pub noise_sigma: f64,
    /// Beckmann RMS slope `m`; no highlight when absent.
    #[serde(default)]
    pub beckmann_roughness: Option<f64>,
    pub specular_strength: f64,
    pub saturation_level: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            light: LightVector::from_angles(60.0, 0.0, 1.0).expect("valid default light"),
            noise_sigma: 0.0,
            beckmann_roughness: None,
            specular_strength: 0.0,
            saturation_level: 1.0,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Invalid(m.into()));
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if self.beckmann_roughness.is_some_and(|m| !(m > 0.0 && m.is_finite())) {
            return bad("beckmann_roughness must be positive");
        }
        if !(self.specular_strength >= 0.0 && self.specular_strength.is_finite()) {
            return bad("specular_strength must be finite and non-negative");
        }
        if self.saturation_level.is_nan() {
            return bad("saturation_level must be a number");
        }
        Ok(())
    }
}

/// Beckmann distribution `exp(−tan²α/m²) / (π m² cos⁴α)` at `cos α`.
pub fn beckmann(cos_alpha: f64, m: f64) -> f64 {
    if cos_alpha <= 0.0 {
        return 0.0;
    }
    let c2 = cos_alpha * cos_alpha;
    let tan2 = (1.0 - c2) / c2;
    (-tan2 / (m * m)).exp() / (std::f64::consts::PI * m * m * c2 * c2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub image: Grid2<f64>,
    /// False where the pre-clamp value exceeded the saturation level.
    pub mask: Grid2<bool>,
    /// Diffuse plus specular, before noise and clamping.
    pub clean: Grid2<f64>,
}

impl RenderedScene {
    pub fn saturated_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&m| !m).count()
    }
}

/// Lambertian shading of `z` (clamped at 0), an optional Beckmann highlight,
/// additive Gaussian noise, then saturation.
pub fn render_scene(z: &Grid2<f64>, rs: &RenderSpec, seed: u64) -> Result<RenderedScene> {
    rs.validate()?;
    let normals = normals_from_depth(z);
    let l = &rs.light;
    let ln = l.norm();
    let lhat = [l.x() / ln, l.y() / ln, l.z() / ln];
    let half = {
        let h = [lhat[0], lhat[1], lhat[2] + 1.0];
        let n = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
        [h[0] / n, h[1] / n, h[2] / n]
    };
    let (rows, cols) = z.shape();
    let clean = Grid2::from_fn(rows, cols, |r, c| {
        let (nx, ny) = (normals.nx.at(r, c), normals.ny.at(r, c));
        let diffuse = l.shade(nx, ny).max(0.0);
        let spec = match rs.beckmann_roughness {
            Some(m) if rs.specular_strength > 0.0 && diffuse > 0.0 => {
                let nn = (nx * nx + ny * ny + 1.0).sqrt();
                let cos_a = (nx * half[0] + ny * half[1] + half[2]) / nn;
                rs.specular_strength * beckmann(cos_a, m)
            }
            _ => 0.0,
        };
        diffuse + spec
    });
    let mut image = clean.clone();
    if rs.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, rs.noise_sigma).expect("validated sigma");
        for v in image.as_mut_slice() {
            *v += normal.sample(&mut rng);
        }
    }
    let mut mask = Grid2::filled(rows, cols, true);
    for (v, m) in image.as_mut_slice().iter_mut().zip(mask.as_mut_slice()) {
        if *v > rs.saturation_level {
            *v = rs.saturation_level;
            *m = false;
        }
    }
    Ok(RenderedScene { image, mask, clean })
}
