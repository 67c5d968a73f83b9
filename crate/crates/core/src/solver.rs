//! ADAM minimization of the refinement energy over a coarse-to-fine pyramid.

use crate::energy::{
    energy_and_gradient, EnergyError, EnergyParams, ProblemInstance, Regularizer, State,
};
use crate::geometry::InverseDepthMap;
use crate::graph::{build_graph, GraphError, GraphParams, GuideImage};
use crate::grid::Grid;
use log::debug;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(
        "energy became non-finite at scale {scale}, iteration {iteration}; try a smaller step"
    )]
    NonFiniteEnergy { scale: usize, iteration: usize },
    #[error("no usable input: every pixel is invalid or unconfident and the regularizer is off")]
    EmptyConfidence,
    #[error("input, confidence and guide dimensions differ")]
    DimensionMismatch,
    #[error("image too small for {scales} scales with factor {factor}")]
    ImageTooSmall { scales: usize, factor: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    /// Initial step.
    pub step: f64,
    /// The step decays geometrically from `step` to `step · final_step_ratio`
    /// over `iters_per_scale` iterations. 1 keeps it constant.
    pub final_step_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iters_per_scale: usize,
    /// In the second half of the schedule, stop once the best energy improved
    /// by at most `tol` (relative) over the last `stall_window` iterations.
    /// A window of 0 disables early stopping.
    pub tol: f64,
    pub stall_window: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            final_step_ratio: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iters_per_scale: 800,
            tol: 1e-7,
            stall_window: 50,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        let ok = self.step > 0.0
            && self.step.is_finite()
            && self.final_step_ratio > 0.0
            && self.final_step_ratio <= 1.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SolveError::InvalidConfig(format!(
                "invalid ADAM settings {self:?}"
            )))
        }
    }
}

/// Scale schedule. `lambda` and `alpha` are listed coarsest scale first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    pub scales: usize,
    pub factor: usize,
    pub lambda: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Preset::default().pyramid(Regularizer::MixedL12)
    }
}

impl PyramidConfig {
    /// Same `λ`, `α` at every scale.
    pub fn constant(scales: usize, factor: usize, lambda: f64, alpha: f64) -> Self {
        Self {
            scales,
            factor,
            lambda: vec![lambda; scales],
            alpha: vec![alpha; scales],
        }
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        if self.scales == 0 {
            return Err(SolveError::InvalidConfig(
                "at least one scale is required".into(),
            ));
        }
        if self.scales > 1 && self.factor < 2 {
            return Err(SolveError::InvalidConfig(format!(
                "scale factor must be >= 2, got {}",
                self.factor
            )));
        }
        if self.lambda.len() != self.scales || self.alpha.len() != self.scales {
            return Err(SolveError::InvalidConfig(format!(
                "expected {} lambda and alpha values, got {} and {}",
                self.scales,
                self.lambda.len(),
                self.alpha.len()
            )));
        }
        Ok(())
    }
}

/// Named parameter sets from published grid searches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    MiddleburySgm,
    MiddleburyBm,
    Kitti,
    #[default]
    Eth3d,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::MiddleburySgm,
        Preset::MiddleburyBm,
        Preset::Kitti,
        Preset::Eth3d,
    ];

    /// The energy is positively 1-homogeneous in `(d, u)`, so these weights
    /// carry over unchanged to the internally normalized inverse depth.
    pub fn pyramid(self, regularizer: Regularizer) -> PyramidConfig {
        use Regularizer::*;
        let two = |coarse: f64, fine: f64, alpha: f64| PyramidConfig {
            scales: 2,
            factor: 2,
            lambda: vec![coarse, fine],
            alpha: vec![alpha, alpha],
        };
        match (self, regularizer) {
            (Preset::MiddleburySgm, MixedL12) => two(15.0, 25.0, 3.5),
            (Preset::MiddleburyBm, MixedL12) => two(10.0, 20.0, 3.5),
            (Preset::MiddleburySgm | Preset::MiddleburyBm, Nltgv) => {
                PyramidConfig::constant(2, 2, 7.5, 50.0)
            }
            (Preset::Kitti, MixedL12) => two(10.0, 20.0, 15.0),
            (Preset::Kitti, Nltgv) => PyramidConfig::constant(2, 2, 7.5, 15.0),
            (Preset::Eth3d, _) => PyramidConfig::constant(4, 2, 7.5, 7.5),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::MiddleburySgm => "middlebury-sgm",
            Preset::MiddleburyBm => "middlebury-bm",
            Preset::Kitti => "kitti",
            Preset::Eth3d => "eth3d",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                format!(
                    "unknown preset `{s}` (expected middlebury-sgm, middlebury-bm, kitti or eth3d)"
                )
            })
    }
}

/// Nearest-neighbor subsampling: output `(x, y)` is input `(r·x, r·y)`.
pub fn downsample<T: Clone>(map: &Grid<T>, factor: usize) -> Grid<T> {
    assert!(factor >= 1, "downsampling factor must be >= 1");
    Grid::from_fn(map.width() / factor, map.height() / factor, |x, y| {
        map.get(x * factor, y * factor).clone()
    })
}

/// Nearest-neighbor upsampling by `r` with the slope rescaled by `1/r`;
/// inverse depth values are copied unscaled.
pub fn upsample_and_scale(
    d: &Grid<f64>,
    u: &Grid<[f64; 2]>,
    factor: usize,
) -> (Grid<f64>, Grid<[f64; 2]>) {
    upsample_and_scale_to(d, u, factor, d.width() * factor, d.height() * factor)
}

/// [`upsample_and_scale`] onto an explicit target size. Fine pixels beyond
/// `r·width` (or `r·height`) replicate the last coarse column (row).
pub fn upsample_and_scale_to(
    d: &Grid<f64>,
    u: &Grid<[f64; 2]>,
    factor: usize,
    width: usize,
    height: usize,
) -> (Grid<f64>, Grid<[f64; 2]>) {
    assert!(factor >= 1, "upsampling factor must be >= 1");
    assert!(d.same_dims(u));
    let src = |x: usize, y: usize| {
        (
            (x / factor).min(d.width() - 1),
            (y / factor).min(d.height() - 1),
        )
    };
    let r = factor as f64;
    let fine_d = Grid::from_fn(width, height, |x, y| {
        let (sx, sy) = src(x, y);
        *d.get(sx, sy)
    });
    let fine_u = Grid::from_fn(width, height, |x, y| {
        let (sx, sy) = src(x, y);
        let v = u.get(sx, sy);
        if factor == 1 {
            *v
        } else {
            [v[0] / r, v[1] / r]
        }
    });
    (fine_d, fine_u)
}

/// Result of one ADAM run.
#[derive(Debug, Clone)]
pub struct AdamOutcome {
    /// Iterate with the lowest recorded energy.
    pub state: State,
    pub best_energy: f64,
    /// Energy of the initial state followed by the energy after each update.
    pub trace: Vec<f64>,
}

/// Runs ADAM from `init` and returns the best iterate seen.
pub fn adam_minimize(
    prob: &ProblemInstance,
    init: State,
    cfg: &AdamConfig,
) -> Result<AdamOutcome, SolveError> {
    adam_minimize_at_scale(prob, init, cfg, 0)
}

fn adam_minimize_at_scale(
    prob: &ProblemInstance,
    init: State,
    cfg: &AdamConfig,
    scale: usize,
) -> Result<AdamOutcome, SolveError> {
    cfg.validate()?;
    let n = init.d.len();
    let mut state = init;
    let (mut energy, mut grad) = energy_and_gradient(&state, prob);
    if !energy.is_finite() {
        return Err(SolveError::NonFiniteEnergy {
            scale,
            iteration: 0,
        });
    }
    let mut trace = Vec::with_capacity(cfg.iters_per_scale + 1);
    let mut best_history = Vec::with_capacity(cfg.iters_per_scale + 1);
    trace.push(energy);
    best_history.push(energy);
    let mut best = energy;
    let mut best_state = state.clone();

    // Moments for d (n entries) followed by u (2n entries).
    let mut m = vec![0.0; 3 * n];
    let mut v = vec![0.0; 3 * n];
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let mut b1_pow = 1.0;
    let mut b2_pow = 1.0;
    let span = cfg.iters_per_scale.saturating_sub(1).max(1) as f64;
    let check_from = (cfg.iters_per_scale / 2).max(cfg.stall_window);

    for t in 1..=cfg.iters_per_scale {
        b1_pow *= b1;
        b2_pow *= b2;
        let step = cfg.step * cfg.final_step_ratio.powf((t - 1) as f64 / span);
        let c1 = 1.0 - b1_pow;
        let c2 = 1.0 - b2_pow;
        let mut update = |slot: usize, g: f64| -> f64 {
            m[slot] = b1 * m[slot] + (1.0 - b1) * g;
            v[slot] = b2 * v[slot] + (1.0 - b2) * g * g;
            step * (m[slot] / c1) / ((v[slot] / c2).sqrt() + cfg.adam_eps)
        };
        for i in 0..n {
            state.d[i] -= update(i, grad.d[i]);
        }
        for i in 0..n {
            let g = grad.u[i];
            state.u[i][0] -= update(n + 2 * i, g[0]);
            state.u[i][1] -= update(n + 2 * i + 1, g[1]);
        }

        (energy, grad) = energy_and_gradient(&state, prob);
        if !energy.is_finite() {
            return Err(SolveError::NonFiniteEnergy {
                scale,
                iteration: t,
            });
        }
        trace.push(energy);
        if energy < best {
            best = energy;
            best_state.clone_from(&state);
        }
        best_history.push(best);

        if cfg.stall_window > 0 && t >= check_from {
            let earlier = best_history[t - cfg.stall_window];
            if earlier - best <= cfg.tol * earlier.abs() {
                debug!("scale {scale}: stalled after {t} iterations at energy {best:.6e}");
                break;
            }
        }
    }

    Ok(AdamOutcome {
        state: best_state,
        best_energy: best,
        trace,
    })
}

/// Full configuration of a refinement run.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub graph: GraphParams,
    pub pyramid: PyramidConfig,
    pub adam: AdamConfig,
    pub eps: f64,
    pub regularizer: Regularizer,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            graph: GraphParams::default(),
            pyramid: PyramidConfig::default(),
            adam: AdamConfig::default(),
            eps: 1e-6,
            regularizer: Regularizer::MixedL12,
        }
    }
}

impl RefineConfig {
    pub fn from_preset(preset: Preset, regularizer: Regularizer) -> Self {
        Self {
            pyramid: preset.pyramid(regularizer),
            regularizer,
            ..Self::default()
        }
    }
}

/// Energy trace of one pyramid level (`scale` 0 is full resolution).
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTrace {
    pub scale: usize,
    pub width: usize,
    pub height: usize,
    pub energies: Vec<f64>,
}

/// Affine map taking valid input values onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    pub fn fit(d: &InverseDepthMap) -> Option<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (&v, &ok) in d.values().iter().zip(d.valid().iter()) {
            if ok {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            return None;
        }
        let range = hi - lo;
        let scale = if range > f64::EPSILON * hi.abs().max(1.0) {
            range
        } else {
            1.0
        };
        Some(Self { offset: lo, scale })
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    /// Refined inverse depth at full resolution.
    pub depth: InverseDepthMap,
    /// Slopes in inverse-depth units per pixel.
    pub u: Grid<[f64; 2]>,
    /// Coarsest scale first.
    pub traces: Vec<ScaleTrace>,
    pub normalization: Normalization,
    /// Full-resolution energy of the returned state (normalized units).
    pub final_energy: f64,
    /// Full-resolution energy of the median-filled, fronto-parallel start.
    pub naive_energy: f64,
}

/// Refines `d_bar` coarse to fine.
///
/// At each level the input, confidence and guide are subsampled, a graph is
/// built on the subsampled guide and ADAM is started from the better (lower
/// energy) of the upsampled coarser solution and the naive initialization:
/// input values with holes filled by the median of valid values and `u = 0`.
pub fn refine(
    d_bar: &InverseDepthMap,
    mask: &Grid<f64>,
    guide: &GuideImage,
    cfg: &RefineConfig,
) -> Result<RefineOutput, SolveError> {
    cfg.pyramid.validate()?;
    cfg.adam.validate()?;
    cfg.graph.validate()?;
    let (w, h) = (d_bar.width(), d_bar.height());
    if mask.dims() != (w, h) || (guide.width(), guide.height()) != (w, h) {
        return Err(SolveError::DimensionMismatch);
    }
    let levels = cfg.pyramid.scales;
    let factor = cfg.pyramid.factor.max(1);
    let coarsest = factor.pow(levels as u32 - 1);
    if w / coarsest == 0 || h / coarsest == 0 {
        return Err(SolveError::ImageTooSmall {
            scales: levels,
            factor,
        });
    }

    let norm = Normalization::fit(d_bar).ok_or(SolveError::EmptyConfidence)?;
    let valid = d_bar.valid().clone();
    let confidence = Grid::from_fn(w, h, |x, y| {
        if *valid.get(x, y) {
            *mask.get(x, y)
        } else {
            0.0
        }
    });
    if confidence.iter().all(|&m| m == 0.0) && cfg.pyramid.lambda.iter().all(|&l| l == 0.0) {
        return Err(SolveError::EmptyConfidence);
    }
    let target = Grid::from_fn(w, h, |x, y| match d_bar.get(x, y) {
        Some(v) => norm.forward(v),
        None => 0.0,
    });
    let fill = median(
        target
            .iter()
            .zip(valid.iter())
            .filter(|(_, &ok)| ok)
            .map(|(&v, _)| v),
    );

    let mut traces = Vec::with_capacity(levels);
    let mut current: Option<State> = None;
    let mut final_energy = f64::NAN;
    let mut naive_energy = f64::NAN;

    for level in (0..levels).rev() {
        let step = factor.pow(level as u32);
        let idx = levels - 1 - level;
        let (t, ok, m) = (
            downsample(&target, step),
            downsample(&valid, step),
            downsample(&confidence, step),
        );
        let g = if step == 1 {
            guide.clone()
        } else {
            guide.downsample(step)
        };
        let graph = build_graph(&g, &cfg.graph)?;
        let params = EnergyParams {
            lambda: cfg.pyramid.lambda[idx],
            alpha: cfg.pyramid.alpha[idx],
            eps: cfg.eps,
            regularizer: cfg.regularizer,
        };
        let prob = ProblemInstance::new(&t, &ok, m, graph, params)?;

        let naive = State::new(
            Grid::from_fn(t.width(), t.height(), |x, y| {
                if *ok.get(x, y) {
                    *t.get(x, y)
                } else {
                    fill
                }
            }),
            Grid::filled(t.width(), t.height(), [0.0, 0.0]),
        );
        let naive_e = energy_and_gradient(&naive, &prob).0;
        let init = match current.take() {
            None => naive,
            Some(coarse) => {
                let (d, u) =
                    upsample_and_scale_to(&coarse.d, &coarse.u, factor, t.width(), t.height());
                let upsampled = State::new(d, u);
                if energy_and_gradient(&upsampled, &prob).0 <= naive_e {
                    upsampled
                } else {
                    naive
                }
            }
        };

        let outcome = adam_minimize_at_scale(&prob, init, &cfg.adam, level)?;
        debug!(
            "scale {level} ({}x{}): {} evaluations, energy {:.6e} -> {:.6e}",
            t.width(),
            t.height(),
            outcome.trace.len(),
            outcome.trace[0],
            outcome.best_energy
        );
        traces.push(ScaleTrace {
            scale: level,
            width: t.width(),
            height: t.height(),
            energies: outcome.trace,
        });
        final_energy = outcome.best_energy;
        naive_energy = naive_e;
        current = Some(outcome.state);
    }

    let state = current.expect("at least one scale");
    let values = state.d.map(|&v| norm.inverse(v));
    let depth = InverseDepthMap::from_raw(values);
    let u = state.u.map(|v| [v[0] * norm.scale, v[1] * norm.scale]);
    Ok(RefineOutput {
        depth,
        u,
        traces,
        normalization: norm,
        final_energy,
        naive_energy,
    })
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::PixelGraph;

    #[test]
    fn downsample_identity_and_even_samples() {
        let g = Grid::from_fn(4, 4, |x, y| (x + 4 * y) as f64);
        assert_eq!(downsample(&g, 1), g);
        let half = downsample(&g, 2);
        assert_eq!(half.as_slice(), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(downsample(&Grid::filled(5, 3, 0u8), 2).dims(), (2, 1));
    }

    #[test]
    fn upsample_scales_slopes_only() {
        let d = Grid::filled(1, 1, 0.7);
        let u = Grid::filled(1, 1, [0.2, -0.4]);
        let (fd, fu) = upsample_and_scale(&d, &u, 2);
        assert_eq!(fd.dims(), (2, 2));
        assert!(fd.iter().all(|&v| v == 0.7));
        assert!(fu.iter().all(|&v| v == [0.1, -0.2]));
        let (id, iu) = upsample_and_scale(&d, &u, 1);
        assert_eq!((id, iu), (d, u));
    }

    #[test]
    fn upsample_to_larger_target_replicates_border() {
        let d = Grid::from_fn(2, 1, |x, _| x as f64);
        let u = Grid::filled(2, 1, [0.0, 0.0]);
        let (fd, _) = upsample_and_scale_to(&d, &u, 2, 5, 3);
        assert_eq!(fd.dims(), (5, 3));
        assert_eq!(*fd.get(4, 2), 1.0);
        assert_eq!(*fd.get(1, 0), 0.0);
    }

    #[test]
    fn preset_schedules() {
        let p = Preset::MiddleburySgm.pyramid(Regularizer::MixedL12);
        assert_eq!(p.lambda, vec![15.0, 25.0]);
        assert_eq!(p.alpha, vec![3.5, 3.5]);
        let k = Preset::Kitti.pyramid(Regularizer::MixedL12);
        assert_eq!((k.lambda.clone(), k.alpha[0]), (vec![10.0, 20.0], 15.0));
        let e = Preset::Eth3d.pyramid(Regularizer::Nltgv);
        assert_eq!((e.scales, e.lambda[3], e.alpha[0]), (4, 7.5, 7.5));
        for p in Preset::ALL {
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
            p.pyramid(Regularizer::Nltgv).validate().unwrap();
        }
    }

    #[test]
    fn data_only_problem_converges_to_input() {
        let (w, h) = (6, 5);
        let target = Grid::from_fn(w, h, |x, y| 0.1 * x as f64 - 0.05 * y as f64);
        let graph = PixelGraph::from_edge_lists(w, h, vec![Vec::new(); w * h]).unwrap();
        let params = EnergyParams {
            lambda: 0.0,
            alpha: 1.0,
            eps: 1e-6,
            regularizer: Regularizer::MixedL12,
        };
        let prob = ProblemInstance::new(
            &target,
            &Grid::filled(w, h, true),
            Grid::filled(w, h, 1.0),
            graph,
            params,
        )
        .unwrap();
        let init = State::new(Grid::filled(w, h, 0.0), Grid::filled(w, h, [0.0; 2]));
        let out = adam_minimize(&prob, init, &AdamConfig::default()).unwrap();
        for (a, b) in out.state.d.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        assert!(out.best_energy <= out.trace[0]);
    }

    #[test]
    fn huge_step_reports_non_finite_energy() {
        let target = Grid::filled(2, 1, 0.0);
        let graph = PixelGraph::from_edge_lists(2, 1, vec![vec![], vec![]]).unwrap();
        let params = EnergyParams {
            lambda: 0.0,
            alpha: 1.0,
            eps: 1e-6,
            regularizer: Regularizer::MixedL12,
        };
        let prob = ProblemInstance::new(
            &target,
            &Grid::filled(2, 1, true),
            Grid::filled(2, 1, 1.0),
            graph,
            params,
        )
        .unwrap();
        let init = State::new(Grid::filled(2, 1, 1.0), Grid::filled(2, 1, [0.0; 2]));
        let cfg = AdamConfig {
            step: 1e308,
            ..AdamConfig::default()
        };
        assert!(matches!(
            adam_minimize(&prob, init, &cfg),
            Err(SolveError::NonFiniteEnergy { iteration: 1, .. })
        ));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median([3.0, 1.0, 2.0].into_iter()), 2.0);
        assert_eq!(median([4.0, 1.0, 2.0, 3.0].into_iter()), 2.5);
    }

    #[test]
    fn pyramid_validation() {
        assert!(PyramidConfig::constant(0, 2, 1.0, 1.0).validate().is_err());
        assert!(PyramidConfig::constant(2, 1, 1.0, 1.0).validate().is_err());
        let mut p = PyramidConfig::constant(2, 2, 1.0, 1.0);
        p.alpha.pop();
        assert!(p.validate().is_err());
    }
}
