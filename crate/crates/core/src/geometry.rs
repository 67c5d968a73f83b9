//! Pinhole plane geometry in inverse-depth space.
//!
//! A scene plane `(P₀, n₀)` seen by a pinhole camera has an inverse depth
//! `d = 1/Z` that is itself planar in pixel coordinates:
//!
//! ```text
//! d(x, y) = d(x₀, y₀) + uˣ (x − x₀) + uʸ (y − y₀),   uˣ = a₀ / (ρ₀ fˣ),  uʸ = b₀ / (ρ₀ fʸ)
//! ```
//!
//! with `ρ₀ = ⟨n₀, P₀⟩ < 0` for the camera-facing side. This module converts
//! between the scene parameterization and the image-space slope `u`, recovers
//! unit normals from slopes in closed form, and approximates normals of a
//! whole inverse-depth map from its smoothed gradient.

use crate::grid::Grid;
use rayon::prelude::*;
use thiserror::Error;

/// Magnitudes below this are treated as exactly degenerate.
const DEGENERACY_EPS: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("focal lengths must be positive and all intrinsics finite (fx={fx}, fy={fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("plane normal must be finite and non-zero")]
    InvalidNormal,
    #[error("plane point must lie in front of the camera (Z0={0})")]
    NotVisible(f64),
    #[error("plane normal points away from the camera (rho={0})")]
    BackFacing(f64),
    #[error("viewing ray is parallel to the plane")]
    DegeneratePlaneRay,
    #[error("plane passes through the camera center")]
    ZeroRho,
    #[error("focal length and baseline must be positive (focal={focal}, baseline={baseline})")]
    NonPositiveCalibration { focal: f64, baseline: f64 },
    #[error("inverse depth at ({x}, {y}) is {value}; valid entries must be finite and positive")]
    InvalidInverseDepth { x: usize, y: usize, value: f64 },
    #[error("grid dimensions do not match")]
    DimensionMismatch,
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let finite = fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite();
        if !finite || fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// A centered camera with `fx = fy = width` (about 53° horizontal field of view).
    pub fn default_for(width: usize, height: usize) -> Self {
        let f = width.max(1) as f64;
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }

    pub fn fy(&self) -> f64 {
        self.fy
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    /// Projects a camera-frame point with `Z > 0` to pixel coordinates.
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [
            p[0] / p[2] * self.fx + self.cx,
            p[1] / p[2] * self.fy + self.cy,
        ]
    }

    /// Back-projects a pixel at depth `z`.
    pub fn unproject(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        [(x - self.cx) / self.fx * z, (y - self.cy) / self.fy * z, z]
    }
}

/// A plane in camera coordinates, oriented toward the camera (`ρ₀ < 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePlane {
    point: [f64; 3],
    normal: [f64; 3],
    rho: f64,
}

impl ScenePlane {
    /// Builds a plane from a point and a (not necessarily unit) normal. The
    /// normal is normalized; the point must have `Z₀ > 0` and the normal must
    /// face the camera.
    pub fn new(point: [f64; 3], normal: [f64; 3]) -> Result<Self, GeometryError> {
        let norm = dot(normal, normal).sqrt();
        if !norm.is_finite() || norm == 0.0 || point.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidNormal);
        }
        if point[2] <= 0.0 {
            return Err(GeometryError::NotVisible(point[2]));
        }
        let normal = [normal[0] / norm, normal[1] / norm, normal[2] / norm];
        let rho = dot(normal, point);
        if rho >= 0.0 {
            return Err(GeometryError::BackFacing(rho));
        }
        Ok(Self { point, normal, rho })
    }

    /// Like [`ScenePlane::new`] but flips the normal when it faces away.
    pub fn facing_camera(point: [f64; 3], normal: [f64; 3]) -> Result<Self, GeometryError> {
        if dot(normal, point) > 0.0 {
            Self::new(point, [-normal[0], -normal[1], -normal[2]])
        } else {
            Self::new(point, normal)
        }
    }

    pub fn point(&self) -> [f64; 3] {
        self.point
    }

    pub fn normal(&self) -> [f64; 3] {
        self.normal
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// The equivalent image-space parameterization anchored at the projection of `P₀`.
    pub fn image_param(&self, cam: &CameraIntrinsics) -> Result<ImagePlaneParam, GeometryError> {
        let u = u_from_normal(self, cam)?;
        let anchor = cam.project(self.point);
        ImagePlaneParam::new(anchor, 1.0 / self.point[2], u)
    }
}

/// Image-space plane: inverse depth `d0` at `anchor` plus slope `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePlaneParam {
    pub anchor: [f64; 2],
    d0: f64,
    pub u: [f64; 2],
}

impl ImagePlaneParam {
    pub fn new(anchor: [f64; 2], d0: f64, u: [f64; 2]) -> Result<Self, GeometryError> {
        if !(d0.is_finite() && d0 > 0.0) {
            return Err(GeometryError::InvalidInverseDepth {
                x: anchor[0].max(0.0) as usize,
                y: anchor[1].max(0.0) as usize,
                value: d0,
            });
        }
        Ok(Self { anchor, d0, u })
    }

    pub fn d0(&self) -> f64 {
        self.d0
    }

    /// Unit scene normal of this plane.
    pub fn normal(&self, cam: &CameraIntrinsics) -> [f64; 3] {
        normal_from_u(self.u, self.d0, self.anchor, cam)
    }
}

/// Inverse depth of an image-space plane at `(x, y)`. May be non-positive
/// beyond the plane's horizon.
pub fn plane_inverse_depth(param: &ImagePlaneParam, x: f64, y: f64) -> f64 {
    param.d0 + param.u[0] * (x - param.anchor[0]) + param.u[1] * (y - param.anchor[1])
}

/// Inverse depth `1/Z` of a scene plane along the ray through pixel `(x, y)`.
pub fn scene_plane_inverse_depth(
    plane: &ScenePlane,
    cam: &CameraIntrinsics,
    x: f64,
    y: f64,
) -> Result<f64, GeometryError> {
    let [a, b, c] = plane.normal;
    let bracket = a * (x - cam.cx) / cam.fx + b * (y - cam.cy) / cam.fy + c;
    if bracket.abs() < DEGENERACY_EPS {
        return Err(GeometryError::DegeneratePlaneRay);
    }
    Ok(bracket / plane.rho)
}

/// Image-space slope of a scene plane.
pub fn u_from_normal(
    plane: &ScenePlane,
    cam: &CameraIntrinsics,
) -> Result<[f64; 2], GeometryError> {
    if plane.rho.abs() < DEGENERACY_EPS {
        return Err(GeometryError::ZeroRho);
    }
    Ok([
        plane.normal[0] / (plane.rho * cam.fx),
        plane.normal[1] / (plane.rho * cam.fy),
    ])
}

/// Closed-form camera-facing unit normal of the plane with slope `u` passing
/// through `(anchor, d0)`.
///
/// Solves `uˣ = a₀/(ρ₀fˣ)`, `uʸ = b₀/(ρ₀fʸ)`, `‖n₀‖ = 1` with `ρ₀` written in
/// image coordinates and `ρ₀ < 0`. The four cases dispatch on exact zeros of
/// the slope components. Products such as `βκ` and `γκ` are expanded so that
/// `κ` is never formed explicitly, which keeps tiny non-zero slopes finite.
///
/// `d0` must be positive.
pub fn normal_from_u(u: [f64; 2], d0: f64, anchor: [f64; 2], cam: &CameraIntrinsics) -> [f64; 3] {
    debug_assert!(d0 > 0.0, "normal_from_u requires positive inverse depth");
    let [ux, uy] = u;
    let (fx, fy) = (cam.fx, cam.fy);
    let z0 = 1.0 / d0;
    let dx = anchor[0] - cam.cx;
    let dy = anchor[1] - cam.cy;

    match (ux != 0.0, uy != 0.0) {
        (true, true) => {
            let gamma = ux * fx * fy * z0;
            // α + βκ
            let alpha_beta_kappa = fy * ((ux * dx + uy * dy) * z0 - 1.0);
            // γκ
            let gamma_kappa = uy * fy * fy * z0;
            let norm = gamma.hypot(gamma_kappa).hypot(alpha_beta_kappa);
            // a₀ = −sign(uˣ)|γ|/N = −γ/N, b₀ = κa₀, c₀ = −(αa₀ + βb₀)/γ
            [-gamma / norm, -gamma_kappa / norm, alpha_beta_kappa / norm]
        }
        (true, false) => {
            let alpha = ux * fy * dx * z0 - fy;
            let gamma = ux * fx * fy * z0;
            let norm = alpha.hypot(gamma);
            [-gamma / norm, 0.0, alpha / norm]
        }
        (false, true) => {
            let epsilon = uy * fx * dy * z0 - fx;
            let phi = uy * fx * fy * z0;
            let norm = epsilon.hypot(phi);
            [0.0, -phi / norm, epsilon / norm]
        }
        (false, false) => [0.0, 0.0, -1.0],
    }
}

/// `ρ₀` written in image coordinates for the plane through `(anchor, 1/d0)`.
pub fn rho_in_image(normal: [f64; 3], d0: f64, anchor: [f64; 2], cam: &CameraIntrinsics) -> f64 {
    let [a, b, c] = normal;
    (a * (anchor[0] - cam.cx) / cam.fx + b * (anchor[1] - cam.cy) / cam.fy + c) / d0
}

/// Angle in radians between two unit vectors.
pub fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    // atan2 of |a×b| and a·b stays accurate near 0 and π.
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    dot(cross, cross).sqrt().atan2(dot(a, b))
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Inverse depth grid with per-pixel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDepthMap {
    values: Grid<f64>,
    valid: Grid<bool>,
}

impl InverseDepthMap {
    /// Strict constructor: every valid entry must be finite and positive.
    pub fn new(values: Grid<f64>, valid: Grid<bool>) -> Result<Self, GeometryError> {
        if !values.same_dims(&valid) {
            return Err(GeometryError::DimensionMismatch);
        }
        for (i, (&v, &ok)) in values.iter().zip(valid.iter()).enumerate() {
            if ok && !(v.is_finite() && v > 0.0) {
                let (x, y) = values.coords(i);
                return Err(GeometryError::InvalidInverseDepth { x, y, value: v });
            }
        }
        Ok(Self { values, valid })
    }

    /// Marks every non-finite or non-positive entry invalid.
    pub fn from_raw(values: Grid<f64>) -> Self {
        let valid = values.map(|&v| v.is_finite() && v > 0.0);
        Self { values, valid }
    }

    pub fn fully_valid(values: Grid<f64>) -> Result<Self, GeometryError> {
        let valid = Grid::filled(values.width(), values.height(), true);
        Self::new(values, valid)
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Grid<bool> {
        &self.valid
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        if *self.valid.get(x, y) {
            Some(*self.values.get(x, y))
        } else {
            None
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Values with invalid pixels replaced by `+∞` (the on-disk convention).
    pub fn to_raw(&self) -> Grid<f64> {
        Grid::from_fn(self.width(), self.height(), |x, y| {
            self.get(x, y).unwrap_or(f64::INFINITY)
        })
    }

    /// Depth `Z = 1/d` with invalid pixels as `+∞`.
    pub fn to_depth(&self) -> Grid<f64> {
        Grid::from_fn(self.width(), self.height(), |x, y| {
            self.get(x, y).map_or(f64::INFINITY, |d| 1.0 / d)
        })
    }
}

/// Converts disparity to inverse depth, `d = disp / (focal · baseline)`.
/// Non-positive or non-finite disparities become invalid.
pub fn disparity_to_inverse_depth(
    disp: &Grid<f64>,
    focal: f64,
    baseline: f64,
) -> Result<InverseDepthMap, GeometryError> {
    let scale = calibration_scale(focal, baseline)?;
    let values = disp.map(|&v| v / scale);
    let valid = disp.map(|&v| v.is_finite() && v > 0.0);
    Ok(InverseDepthMap { values, valid })
}

/// Exact inverse of [`disparity_to_inverse_depth`] on valid pixels; invalid
/// pixels become `+∞`.
pub fn inverse_depth_to_disparity(
    d: &InverseDepthMap,
    focal: f64,
    baseline: f64,
) -> Result<Grid<f64>, GeometryError> {
    let scale = calibration_scale(focal, baseline)?;
    Ok(Grid::from_fn(d.width(), d.height(), |x, y| {
        d.get(x, y).map_or(f64::INFINITY, |v| v * scale)
    }))
}

fn calibration_scale(focal: f64, baseline: f64) -> Result<f64, GeometryError> {
    if !(focal > 0.0 && baseline > 0.0 && focal.is_finite() && baseline.is_finite()) {
        return Err(GeometryError::NonPositiveCalibration { focal, baseline });
    }
    Ok(focal * baseline)
}

/// Per-pixel unit normals with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub normals: Grid<[f64; 3]>,
    pub valid: Grid<bool>,
}

impl NormalMap {
    pub fn width(&self) -> usize {
        self.normals.width()
    }

    pub fn height(&self) -> usize {
        self.normals.height()
    }

    pub fn get(&self, x: usize, y: usize) -> Option<[f64; 3]> {
        if *self.valid.get(x, y) {
            Some(*self.normals.get(x, y))
        } else {
            None
        }
    }
}

/// Applies [`normal_from_u`] at every valid pixel, anchoring each plane at the
/// pixel itself.
pub fn normals_from_slopes(
    d: &InverseDepthMap,
    u: &Grid<[f64; 2]>,
    cam: &CameraIntrinsics,
) -> Result<NormalMap, GeometryError> {
    if !d.values().same_dims(u) {
        return Err(GeometryError::DimensionMismatch);
    }
    let width = d.width();
    let normals: Vec<[f64; 3]> = (0..width * d.height())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % width, i / width);
            match d.get(x, y) {
                Some(d0) => normal_from_u(u[i], d0, [x as f64, y as f64], cam),
                None => [0.0, 0.0, 0.0],
            }
        })
        .collect();
    Ok(NormalMap {
        normals: Grid::from_vec(width, d.height(), normals),
        valid: d.valid().clone(),
    })
}

const KERNEL_RADIUS: isize = 2;
const KERNEL_SIDE: usize = 5;

/// 5×5 sampled Gaussian-derivative kernel for `∂/∂x`, stored row-major with
/// offsets `−2..=2`. Taps are `ox·G(ox)·G(oy)` scaled so that a unit ramp in
/// `x` yields exactly 1. The `∂/∂y` kernel is its transpose.
pub fn gaussian_derivative_kernel(sigma: f64) -> [f64; KERNEL_SIDE * KERNEL_SIDE] {
    assert!(sigma > 0.0, "kernel sigma must be positive");
    let g = |t: f64| (-t * t / (2.0 * sigma * sigma)).exp();
    let mut k = [0.0; KERNEL_SIDE * KERNEL_SIDE];
    let mut ramp_response = 0.0;
    for oy in -KERNEL_RADIUS..=KERNEL_RADIUS {
        for ox in -KERNEL_RADIUS..=KERNEL_RADIUS {
            let tap = ox as f64 * g(ox as f64) * g(oy as f64);
            k[((oy + KERNEL_RADIUS) as usize) * KERNEL_SIDE + (ox + KERNEL_RADIUS) as usize] = tap;
            ramp_response += tap * ox as f64;
        }
    }
    for tap in &mut k {
        *tap /= ramp_response;
    }
    k
}

/// Smoothed gradient of `d` at every pixel, with replicate padding. A pixel's
/// gradient is invalid when any sample in its 5×5 support is invalid.
pub fn depth_gradient(d: &InverseDepthMap, sigma: f64) -> (Grid<[f64; 2]>, Grid<bool>) {
    let kernel = gaussian_derivative_kernel(sigma);
    let (w, h) = (d.width(), d.height());
    let values = d.values();
    let valid = d.valid();
    let out: Vec<([f64; 2], bool)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for oy in -KERNEL_RADIUS..=KERNEL_RADIUS {
                for ox in -KERNEL_RADIUS..=KERNEL_RADIUS {
                    if !*valid.get_clamped(x + ox, y + oy) {
                        return ([0.0, 0.0], false);
                    }
                }
            }
            // Antisymmetric taps are applied to differences of mirrored
            // samples so that a constant map gives an exactly zero gradient.
            let mut gx = 0.0;
            let mut gy = 0.0;
            for a in -KERNEL_RADIUS..=KERNEL_RADIUS {
                for b in 1..=KERNEL_RADIUS {
                    let tap = kernel[((a + KERNEL_RADIUS) as usize) * KERNEL_SIDE
                        + (b + KERNEL_RADIUS) as usize];
                    gx +=
                        tap * (values.get_clamped(x + b, y + a) - values.get_clamped(x - b, y + a));
                    gy +=
                        tap * (values.get_clamped(x + a, y + b) - values.get_clamped(x + a, y - b));
                }
            }
            ([gx, gy], true)
        })
        .collect();
    let (grad, ok): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    (Grid::from_vec(w, h, grad), Grid::from_vec(w, h, ok))
}

/// Approximate normals of an inverse-depth map: `u = ∇d` via the 5×5
/// Gaussian-derivative kernel, then the closed-form normal per pixel.
/// Use a small `sigma` (0.2) on clean maps and a large one (5) on noisy maps.
pub fn normals_from_depth_gradient(
    d: &InverseDepthMap,
    cam: &CameraIntrinsics,
    sigma: f64,
) -> NormalMap {
    let (grad, ok) = depth_gradient(d, sigma);
    let w = d.width();
    let normals: Vec<[f64; 3]> = (0..grad.len())
        .into_par_iter()
        .map(|i| {
            if ok[i] {
                let (x, y) = (i % w, i / w);
                normal_from_u(grad[i], d.values()[i], [x as f64, y as f64], cam)
            } else {
                [0.0, 0.0, 0.0]
            }
        })
        .collect();
    NormalMap {
        normals: Grid::from_vec(w, d.height(), normals),
        valid: ok,
    }
}
