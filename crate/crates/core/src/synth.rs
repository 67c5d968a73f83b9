//! Synthetic piecewise-planar scenes with known inverse depth and normals.
//!
//! A scene is a stack of axis-aligned rectangles, each carrying a
//! camera-facing plane and a flat guide color; later rectangles cover earlier
//! ones. The corrupted input adds Gaussian noise (relative to the ground-truth
//! inverse-depth range), removes a fixed fraction of pixels (confidence 0)
//! and optionally plants confidently wrong outliers (confidence 1). All
//! randomness comes from a seeded ChaCha generator.

use crate::geometry::{
    scene_plane_inverse_depth, CameraIntrinsics, InverseDepthMap, NormalMap, ScenePlane,
};
use crate::graph::GuideImage;
use crate::grid::Grid;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRegion {
    /// Inclusive lower corner.
    pub x0: usize,
    pub y0: usize,
    /// Exclusive upper corner.
    pub x1: usize,
    pub y1: usize,
    pub plane: ScenePlane,
    pub color: [f64; 3],
}

impl SceneRegion {
    fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub regions: Vec<SceneRegion>,
    /// Noise standard deviation as a fraction of the ground-truth range.
    pub noise: f64,
    /// Fraction of pixels removed from the input.
    pub holes: f64,
    /// Fraction of pixels replaced by confident outliers.
    pub outliers: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Plane,
    TwoPlanes,
    ThreePlanes,
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneKind::Plane => "plane",
            SceneKind::TwoPlanes => "two-planes",
            SceneKind::ThreePlanes => "three-planes",
        })
    }
}

impl FromStr for SceneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plane" => Ok(SceneKind::Plane),
            "two-planes" => Ok(SceneKind::TwoPlanes),
            "three-planes" => Ok(SceneKind::ThreePlanes),
            other => Err(format!(
                "unknown scene `{other}` (expected plane, two-planes or three-planes)"
            )),
        }
    }
}

impl SceneSpec {
    /// A built-in layout with a centered camera (`f = width`) and no corruption.
    pub fn builtin(kind: SceneKind, width: usize, height: usize) -> Result<Self, SynthError> {
        if width < 2 || height < 2 {
            return Err(SynthError::InvalidScene(
                "scene must be at least 2x2".into(),
            ));
        }
        let cam = CameraIntrinsics::default_for(width, height);
        let plane_at = |cx: f64, cy: f64, z: f64, normal: [f64; 3]| {
            ScenePlane::new(cam.unproject(cx, cy, z), normal)
                .map_err(|e| SynthError::InvalidScene(e.to_string()))
        };
        let (w, h) = (width, height);
        let (wf, hf) = (w as f64, h as f64);
        let regions = match kind {
            SceneKind::Plane => vec![SceneRegion {
                x0: 0,
                y0: 0,
                x1: w,
                y1: h,
                plane: plane_at(wf / 2.0, hf / 2.0, 2.5, [0.35, -0.2, -1.0])?,
                color: [0.6, 0.6, 0.6],
            }],
            SceneKind::TwoPlanes => vec![
                SceneRegion {
                    x0: 0,
                    y0: 0,
                    x1: w / 2,
                    y1: h,
                    plane: plane_at(wf / 4.0, hf / 2.0, 3.0, [0.45, 0.15, -1.0])?,
                    color: [0.85, 0.35, 0.25],
                },
                SceneRegion {
                    x0: w / 2,
                    y0: 0,
                    x1: w,
                    y1: h,
                    plane: plane_at(3.0 * wf / 4.0, hf / 2.0, 2.0, [-0.35, 0.4, -1.0])?,
                    color: [0.2, 0.45, 0.9],
                },
            ],
            SceneKind::ThreePlanes => vec![
                SceneRegion {
                    x0: 0,
                    y0: 0,
                    x1: w,
                    y1: h,
                    plane: plane_at(wf / 2.0, hf / 4.0, 4.0, [0.0, 0.0, -1.0])?,
                    color: [0.8, 0.8, 0.75],
                },
                SceneRegion {
                    x0: 0,
                    y0: 2 * h / 3,
                    x1: w,
                    y1: h,
                    plane: plane_at(wf / 2.0, 5.0 * hf / 6.0, 3.0, [0.0, -0.8, -0.6])?,
                    color: [0.35, 0.55, 0.3],
                },
                SceneRegion {
                    x0: w / 5,
                    y0: h / 5,
                    x1: w / 2,
                    y1: 2 * h / 3,
                    plane: plane_at(0.35 * wf, 0.43 * hf, 2.2, [0.5, 0.0, -1.0])?,
                    color: [0.9, 0.25, 0.2],
                },
            ],
        };
        Ok(Self {
            width,
            height,
            intrinsics: cam,
            regions,
            noise: 0.0,
            holes: 0.0,
            outliers: 0.0,
            seed: 0,
        })
    }

    pub fn with_corruption(mut self, noise: f64, holes: f64, outliers: f64, seed: u64) -> Self {
        self.noise = noise;
        self.holes = holes;
        self.outliers = outliers;
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub intrinsics: CameraIntrinsics,
    pub gt: InverseDepthMap,
    pub gt_normals: NormalMap,
    /// Ground-truth slope per pixel (constant within each region).
    pub gt_u: Grid<[f64; 2]>,
    pub guide: GuideImage,
    /// Corrupted input; holes are invalid.
    pub input: InverseDepthMap,
    pub confidence: Grid<f64>,
    pub outlier_mask: Grid<bool>,
}

pub fn generate_synthetic(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let invalid = |msg: String| Err(SynthError::InvalidScene(msg));
    if n == 0 {
        return invalid("empty scene".into());
    }
    for (name, v) in [
        ("noise", spec.noise),
        ("holes", spec.holes),
        ("outliers", spec.outliers),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return invalid(format!("{name} must be a non-negative fraction, got {v}"));
        }
    }
    if spec.holes + spec.outliers > 1.0 {
        return invalid("holes and outliers exceed the pixel count".into());
    }

    let cam = &spec.intrinsics;
    let mut region_of = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let Some(r) = spec.regions.iter().rposition(|r| r.contains(x, y)) else {
                return invalid(format!("pixel ({x}, {y}) is not covered by any region"));
            };
            let d = scene_plane_inverse_depth(&spec.regions[r].plane, cam, x as f64, y as f64)
                .map_err(|e| SynthError::InvalidScene(e.to_string()))?;
            if !(d > 0.0 && d.is_finite()) {
                return invalid(format!("region {r} has non-positive depth at ({x}, {y})"));
            }
            region_of.push(r);
            gt.push(d);
        }
    }
    let gt = Grid::from_vec(w, h, gt);
    let (lo, hi) = gt
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let range = hi - lo;

    let normals = Grid::from_vec(
        w,
        h,
        region_of
            .iter()
            .map(|&r| spec.regions[r].plane.normal())
            .collect(),
    );
    let mut gt_u = Vec::with_capacity(n);
    for &r in &region_of {
        let u = crate::geometry::u_from_normal(&spec.regions[r].plane, cam)
            .map_err(|e| SynthError::InvalidScene(e.to_string()))?;
        gt_u.push(u);
    }
    let guide_data: Vec<f64> = region_of
        .iter()
        .flat_map(|&r| spec.regions[r].color)
        .collect();
    let guide = GuideImage::new(w, h, 3, guide_data)
        .map_err(|e| SynthError::InvalidScene(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let hole_count = (spec.holes * n as f64).floor() as usize;
    let outlier_count = ((spec.outliers * n as f64).floor() as usize).min(n - hole_count);

    let mut values = gt.clone().into_vec();
    if spec.noise > 0.0 && range > 0.0 {
        let normal = Normal::new(0.0, spec.noise * range).expect("finite sigma");
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let mut outlier_mask = vec![false; n];
    for &i in &order[hole_count..hole_count + outlier_count] {
        let jump = rng.random_range(0.2..0.5) * range.max(lo * 0.1);
        let up = rng.random_bool(0.5);
        values[i] = if up || gt[i] - jump <= 0.0 {
            gt[i] + jump
        } else {
            gt[i] - jump
        };
        outlier_mask[i] = true;
    }
    // Noise must not push a kept sample through zero.
    let floor = 0.5 * lo;
    for v in values.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    let mut valid = vec![true; n];
    let mut confidence = vec![1.0; n];
    for &i in &order[..hole_count] {
        valid[i] = false;
        confidence[i] = 0.0;
        values[i] = f64::INFINITY;
    }

    let input = InverseDepthMap::new(Grid::from_vec(w, h, values), Grid::from_vec(w, h, valid))
        .map_err(|e| SynthError::InvalidScene(e.to_string()))?;
    Ok(SyntheticScene {
        intrinsics: *cam,
        gt: InverseDepthMap::fully_valid(gt)
            .map_err(|e| SynthError::InvalidScene(e.to_string()))?,
        gt_normals: NormalMap {
            normals,
            valid: Grid::filled(w, h, true),
        },
        gt_u: Grid::from_vec(w, h, gt_u),
        guide,
        input,
        confidence: Grid::from_vec(w, h, confidence),
        outlier_mask: Grid::from_vec(w, h, outlier_mask),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_fronto_parallel_scene_is_exact() {
        let cam = CameraIntrinsics::default_for(8, 6);
        let spec = SceneSpec {
            width: 8,
            height: 6,
            intrinsics: cam,
            regions: vec![SceneRegion {
                x0: 0,
                y0: 0,
                x1: 8,
                y1: 6,
                plane: ScenePlane::new([0.0, 0.0, 2.0], [0.0, 0.0, -1.0]).unwrap(),
                color: [0.5; 3],
            }],
            noise: 0.0,
            holes: 0.0,
            outliers: 0.0,
            seed: 1,
        };
        let s = generate_synthetic(&spec).unwrap();
        assert_eq!(s.input, s.gt);
        assert!(s.confidence.iter().all(|&m| m == 1.0));
        assert!(s.gt.values().iter().all(|&d| d == 0.5));
    }

    #[test]
    fn hole_count_and_determinism() {
        let spec = SceneSpec::builtin(SceneKind::TwoPlanes, 64, 64)
            .unwrap()
            .with_corruption(0.05, 0.3, 0.05, 7);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        let holes = a.input.valid().iter().filter(|&&v| !v).count();
        assert_eq!(holes, (0.3f64 * 4096.0).floor() as usize);
        assert_eq!(a.outlier_mask.iter().filter(|&&v| v).count(), 204);
        assert_eq!(a.input, b.input);
        assert_eq!(a.confidence, b.confidence);
        let other = generate_synthetic(&SceneSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.input, other.input);
    }

    #[test]
    fn uncovered_or_invisible_scene_is_rejected() {
        let mut spec = SceneSpec::builtin(SceneKind::TwoPlanes, 16, 16).unwrap();
        spec.regions.pop();
        assert!(matches!(
            generate_synthetic(&spec),
            Err(SynthError::InvalidScene(_))
        ));

        // A plane seen edge-on crosses infinity inside the image.
        let mut spec = SceneSpec::builtin(SceneKind::Plane, 16, 16).unwrap();
        spec.regions[0].plane = ScenePlane::new([0.0, 0.0, 1.0], [1.0, 0.0, -0.01]).unwrap();
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn builtin_scenes_generate() {
        for kind in [
            SceneKind::Plane,
            SceneKind::TwoPlanes,
            SceneKind::ThreePlanes,
        ] {
            let s = generate_synthetic(&SceneSpec::builtin(kind, 40, 30).unwrap()).unwrap();
            assert_eq!(s.gt.valid_count(), 1200);
            assert_eq!(kind.to_string().parse::<SceneKind>().unwrap(), kind);
        }
    }
}
