//! Smoothed refinement energy and its analytic gradient.
//!
//! ```text
//! E(d, u) = Σ_i m_i |d_i − d̄_i| + λ g(d, u)
//! ```
//!
//! with one of two graph regularizers over the residuals
//! `r_ij = d_j − d_i − ⟨u_i, j − i⟩`:
//!
//! * [`Regularizer::MixedL12`]: `Σ_i ‖(w_ij r_ij)_j‖₂ + α Σ_i Σ_j w_ij ‖u_j − u_i‖₂`
//! * [`Regularizer::Nltgv`]: `Σ_i Σ_j |w_ij r_ij| + α Σ_i Σ_j w_ij (|Δuˣ| + |Δuʸ|)`
//!
//! Every norm `‖v‖` is replaced by `√(‖v‖² + ε²) − ε`, which is smooth,
//! convex and still zero at zero.
//!
//! Evaluation fans out over nodes and edges with rayon and then reduces in a
//! fixed order, so results are bit-identical for any thread count.

use crate::graph::PixelGraph;
use crate::grid::Grid;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("grid dimensions do not match the graph")]
    DimensionMismatch,
    #[error("confidence at pixel {0} is {1}; it must lie in [0, 1]")]
    MaskOutOfRange(usize, f64),
    #[error("pixel {0} has non-zero confidence but no valid input value")]
    ConfidenceOnInvalid(usize),
    #[error("invalid energy parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    /// Mixed ℓ1,2 plane-fit term plus isotropic normal smoothness.
    #[default]
    MixedL12,
    /// Nonlocal total generalized variation (ℓ1 aggregation everywhere).
    Nltgv,
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regularizer::MixedL12 => "mixed-l12",
            Regularizer::Nltgv => "nltgv",
        })
    }
}

impl FromStr for Regularizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mixed-l12" | "mixed_l12" | "mixed" | "l12" => Ok(Regularizer::MixedL12),
            "nltgv" => Ok(Regularizer::Nltgv),
            other => Err(format!(
                "unknown regularizer `{other}` (expected mixed-l12 or nltgv)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    pub lambda: f64,
    pub alpha: f64,
    pub eps: f64,
    pub regularizer: Regularizer,
}

impl EnergyParams {
    pub fn validate(&self) -> Result<(), EnergyError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(EnergyError::InvalidParams(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(EnergyError::InvalidParams(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(EnergyError::InvalidParams(format!(
                "eps must be > 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Everything that stays fixed while the state is optimized.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    target: Grid<f64>,
    mask: Grid<f64>,
    graph: PixelGraph,
    params: EnergyParams,
}

impl ProblemInstance {
    /// `target` holds the input inverse depth; entries where `valid` is false
    /// are ignored and stored as 0. The mask must be 0 on those entries.
    pub fn new(
        target: &Grid<f64>,
        valid: &Grid<bool>,
        mask: Grid<f64>,
        graph: PixelGraph,
        params: EnergyParams,
    ) -> Result<Self, EnergyError> {
        params.validate()?;
        let dims = (graph.width(), graph.height());
        if target.dims() != dims || valid.dims() != dims || mask.dims() != dims {
            return Err(EnergyError::DimensionMismatch);
        }
        for (i, &m) in mask.iter().enumerate() {
            if !(0.0..=1.0).contains(&m) {
                return Err(EnergyError::MaskOutOfRange(i, m));
            }
            if m > 0.0 && !valid[i] {
                return Err(EnergyError::ConfidenceOnInvalid(i));
            }
        }
        let target = Grid::from_fn(dims.0, dims.1, |x, y| {
            let v = *target.get(x, y);
            if *valid.get(x, y) && v.is_finite() {
                v
            } else {
                0.0
            }
        });
        Ok(Self {
            target,
            mask,
            graph,
            params,
        })
    }

    pub fn target(&self) -> &Grid<f64> {
        &self.target
    }

    pub fn mask(&self) -> &Grid<f64> {
        &self.mask
    }

    pub fn graph(&self) -> &PixelGraph {
        &self.graph
    }

    pub fn params(&self) -> &EnergyParams {
        &self.params
    }

    pub fn width(&self) -> usize {
        self.graph.width()
    }

    pub fn height(&self) -> usize {
        self.graph.height()
    }
}

/// Optimization variables: inverse depth `d` and slope `u` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub d: Grid<f64>,
    pub u: Grid<[f64; 2]>,
}

impl State {
    pub fn new(d: Grid<f64>, u: Grid<[f64; 2]>) -> Self {
        assert!(d.same_dims(&u), "state grids must share dimensions");
        Self { d, u }
    }

    pub fn is_finite(&self) -> bool {
        self.d.iter().all(|v| v.is_finite())
            && self.u.iter().all(|v| v[0].is_finite() && v[1].is_finite())
    }

    /// Convex combination `θ·self + (1 − θ)·other`.
    pub fn lerp(&self, other: &State, theta: f64) -> State {
        let d = Grid::from_vec(
            self.d.width(),
            self.d.height(),
            self.d
                .iter()
                .zip(other.d.iter())
                .map(|(a, b)| theta * a + (1.0 - theta) * b)
                .collect(),
        );
        let u = Grid::from_vec(
            self.u.width(),
            self.u.height(),
            self.u
                .iter()
                .zip(other.u.iter())
                .map(|(a, b)| {
                    [
                        theta * a[0] + (1.0 - theta) * b[0],
                        theta * a[1] + (1.0 - theta) * b[1],
                    ]
                })
                .collect(),
        );
        State { d, u }
    }
}

/// `√(x² + ε²) − ε`
#[inline]
pub fn smooth_abs(x: f64, eps: f64) -> f64 {
    (x * x + eps * eps).sqrt() - eps
}

#[inline]
fn smooth_abs_derivative(x: f64, eps: f64) -> f64 {
    x / (x * x + eps * eps).sqrt()
}

#[inline]
fn plane_residual(state: &State, i: usize, target: usize, dx: i32, dy: i32) -> f64 {
    let u = state.u[i];
    state.d[target] - state.d[i] - (u[0] * dx as f64 + u[1] * dy as f64)
}

fn check_dims(state: &State, prob: &ProblemInstance) {
    assert_eq!(
        state.d.dims(),
        (prob.width(), prob.height()),
        "state does not match problem dimensions"
    );
}

/// Sums per-node values in index order.
fn ordered_sum(values: Vec<f64>) -> f64 {
    values.into_iter().sum()
}

/// `Σ_i m_i |d_i − d̄_i|`, smoothed.
pub fn data_term(state: &State, prob: &ProblemInstance) -> f64 {
    check_dims(state, prob);
    let eps = prob.params.eps;
    let parts: Vec<f64> = (0..state.d.len())
        .into_par_iter()
        .map(|i| prob.mask[i] * smooth_abs(state.d[i] - prob.target[i], eps))
        .collect();
    ordered_sum(parts)
}

/// `Σ_i √(Σ_{j∼i} w²_ij r²_ij)`, smoothed (without λ).
pub fn planar_term(state: &State, prob: &ProblemInstance) -> f64 {
    check_dims(state, prob);
    let eps = prob.params.eps;
    let graph = &prob.graph;
    let parts: Vec<f64> = (0..graph.node_count())
        .into_par_iter()
        .map(|i| {
            let sq: f64 = graph
                .edges(i)
                .iter()
                .map(|e| {
                    let v = e.weight * plane_residual(state, i, e.target, e.dx, e.dy);
                    v * v
                })
                .sum();
            (sq + eps * eps).sqrt() - eps
        })
        .collect();
    ordered_sum(parts)
}

/// `α Σ_i Σ_{j∼i} w_ij ‖u_j − u_i‖₂`, smoothed (without λ).
pub fn normal_smoothness_term(state: &State, prob: &ProblemInstance) -> f64 {
    check_dims(state, prob);
    let eps = prob.params.eps;
    let graph = &prob.graph;
    let parts: Vec<f64> = (0..graph.node_count())
        .into_par_iter()
        .map(|i| {
            let ui = state.u[i];
            graph
                .edges(i)
                .iter()
                .map(|e| {
                    let uj = state.u[e.target];
                    let (ax, ay) = (uj[0] - ui[0], uj[1] - ui[1]);
                    e.weight * ((ax * ax + ay * ay + eps * eps).sqrt() - eps)
                })
                .sum::<f64>()
        })
        .collect();
    prob.params.alpha * ordered_sum(parts)
}

/// NLTGV regularizer value (without λ): ℓ1 over weighted plane residuals plus
/// `α Σ w_ij (|Δuˣ| + |Δuʸ|)`, all smoothed.
pub fn nltgv_energy(state: &State, prob: &ProblemInstance) -> f64 {
    check_dims(state, prob);
    let EnergyParams { eps, alpha, .. } = prob.params;
    let graph = &prob.graph;
    let parts: Vec<(f64, f64)> = (0..graph.node_count())
        .into_par_iter()
        .map(|i| {
            let ui = state.u[i];
            let mut fit = 0.0;
            let mut smooth = 0.0;
            for e in graph.edges(i) {
                fit += smooth_abs(
                    e.weight * plane_residual(state, i, e.target, e.dx, e.dy),
                    eps,
                );
                let uj = state.u[e.target];
                smooth +=
                    e.weight * (smooth_abs(uj[0] - ui[0], eps) + smooth_abs(uj[1] - ui[1], eps));
            }
            (fit, smooth)
        })
        .collect();
    let (fit, smooth) = parts
        .into_iter()
        .fold((0.0, 0.0), |acc, (a, b)| (acc.0 + a, acc.1 + b));
    fit + alpha * smooth
}

/// Regularizer value `g(d, u)` for the instance's variant.
pub fn regularizer_energy(state: &State, prob: &ProblemInstance) -> f64 {
    match prob.params.regularizer {
        Regularizer::MixedL12 => planar_term(state, prob) + normal_smoothness_term(state, prob),
        Regularizer::Nltgv => nltgv_energy(state, prob),
    }
}

/// `f(d) + λ g(d, u)`.
pub fn total_energy(state: &State, prob: &ProblemInstance) -> f64 {
    let data = data_term(state, prob);
    if prob.params.lambda == 0.0 {
        return data;
    }
    data + prob.params.lambda * regularizer_energy(state, prob)
}

/// Gradient of [`total_energy`] with respect to `d` and `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub d: Grid<f64>,
    pub u: Grid<[f64; 2]>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        let sq: f64 = self.d.iter().map(|v| v * v).sum::<f64>()
            + self
                .u
                .iter()
                .map(|v| v[0] * v[0] + v[1] * v[1])
                .sum::<f64>();
        sq.sqrt()
    }
}

pub fn gradient(state: &State, prob: &ProblemInstance) -> Gradient {
    energy_and_gradient(state, prob).1
}

/// Energy and gradient in one pass over the graph.
///
/// Per edge `e = (i → j)` the regularizer contributes a scalar coefficient
/// `c_e = λ ∂g/∂r_ij` and a vector `g_e = λ ∂g/∂(u_j − u_i)`; node `i`
/// collects `−c_e`, `−c_e·(Δx, Δy)` and `−g_e` from its outgoing edges and
/// node `j` collects `c_e` and `g_e` from its incoming ones.
pub fn energy_and_gradient(state: &State, prob: &ProblemInstance) -> (f64, Gradient) {
    check_dims(state, prob);
    let EnergyParams {
        lambda,
        alpha,
        eps,
        regularizer,
    } = prob.params;
    let graph = &prob.graph;
    let n = graph.node_count();
    let edges = graph.all_edges();

    // Per node: plane-fit energy and the normalizer of its residual vector.
    let node_fit: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| match regularizer {
            Regularizer::MixedL12 => {
                let sq: f64 = graph
                    .edges(i)
                    .iter()
                    .map(|e| {
                        let v = e.weight * plane_residual(state, i, e.target, e.dx, e.dy);
                        v * v
                    })
                    .sum();
                let norm = (sq + eps * eps).sqrt();
                (norm - eps, norm)
            }
            Regularizer::Nltgv => {
                let fit: f64 = graph
                    .edges(i)
                    .iter()
                    .map(|e| {
                        smooth_abs(
                            e.weight * plane_residual(state, i, e.target, e.dx, e.dy),
                            eps,
                        )
                    })
                    .sum();
                (fit, 1.0)
            }
        })
        .collect();

    // Per edge: coefficients and smoothness energy.
    let per_edge: Vec<(f64, [f64; 2], f64)> = (0..edges.len())
        .into_par_iter()
        .map(|k| {
            let e = &edges[k];
            let i = graph.source_of(k);
            let v = e.weight * plane_residual(state, i, e.target, e.dx, e.dy);
            let c = match regularizer {
                Regularizer::MixedL12 => lambda * e.weight * v / node_fit[i].1,
                Regularizer::Nltgv => lambda * e.weight * smooth_abs_derivative(v, eps),
            };
            let (ui, uj) = (state.u[i], state.u[e.target]);
            let (ax, ay) = (uj[0] - ui[0], uj[1] - ui[1]);
            let scale = lambda * alpha * e.weight;
            let (g, smooth) = match regularizer {
                Regularizer::MixedL12 => {
                    let norm = (ax * ax + ay * ay + eps * eps).sqrt();
                    (
                        [scale * ax / norm, scale * ay / norm],
                        e.weight * (norm - eps),
                    )
                }
                Regularizer::Nltgv => (
                    [
                        scale * smooth_abs_derivative(ax, eps),
                        scale * smooth_abs_derivative(ay, eps),
                    ],
                    e.weight * (smooth_abs(ax, eps) + smooth_abs(ay, eps)),
                ),
            };
            (c, g, smooth)
        })
        .collect();

    let per_node: Vec<(f64, f64, [f64; 2])> = (0..n)
        .into_par_iter()
        .map(|i| {
            let residual = state.d[i] - prob.target[i];
            let m = prob.mask[i];
            let data = m * smooth_abs(residual, eps);
            let mut gd = m * smooth_abs_derivative(residual, eps);
            let mut gu = [0.0, 0.0];
            let mut smooth = 0.0;
            for k in graph.edge_range(i) {
                let (c, g, s) = per_edge[k];
                let e = &edges[k];
                gd -= c;
                gu[0] -= c * e.dx as f64 + g[0];
                gu[1] -= c * e.dy as f64 + g[1];
                smooth += s;
            }
            for &k in graph.incoming(i) {
                let (c, g, _) = per_edge[k];
                gd += c;
                gu[0] += g[0];
                gu[1] += g[1];
            }
            let energy = data + lambda * (node_fit[i].0 + alpha * smooth);
            (energy, gd, gu)
        })
        .collect();

    let (w, h) = (graph.width(), graph.height());
    let mut energy = 0.0;
    let mut gd = Vec::with_capacity(n);
    let mut gu = Vec::with_capacity(n);
    for (e, d, u) in per_node {
        energy += e;
        gd.push(d);
        gu.push(u);
    }
    (
        energy,
        Gradient {
            d: Grid::from_vec(w, h, gd),
            u: Grid::from_vec(w, h, gu),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;

    fn params(lambda: f64, alpha: f64, eps: f64, regularizer: Regularizer) -> EnergyParams {
        EnergyParams {
            lambda,
            alpha,
            eps,
            regularizer,
        }
    }

    /// Two-pixel row with a single edge 0 → 1.
    fn pair_problem(weight: f64, p: EnergyParams) -> ProblemInstance {
        let graph = PixelGraph::from_edge_lists(
            2,
            1,
            vec![
                vec![Edge {
                    target: 1,
                    dx: 1,
                    dy: 0,
                    weight,
                }],
                vec![],
            ],
        )
        .unwrap();
        let target = Grid::filled(2, 1, 0.0);
        let valid = Grid::filled(2, 1, true);
        ProblemInstance::new(&target, &valid, Grid::filled(2, 1, 1.0), graph, p).unwrap()
    }

    #[test]
    fn data_term_values() {
        let p = pair_problem(1.0, params(0.0, 1.0, 1e-12, Regularizer::MixedL12));
        let zero = State::new(Grid::filled(2, 1, 0.0), Grid::filled(2, 1, [0.0; 2]));
        assert_eq!(data_term(&zero, &p), 0.0);
        let s = State::new(
            Grid::from_vec(2, 1, vec![3.0, 0.0]),
            Grid::filled(2, 1, [0.0; 2]),
        );
        assert!((data_term(&s, &p) - 3.0).abs() < 1e-9);
        assert_eq!(total_energy(&s, &p), data_term(&s, &p));

        let graph = p.graph().clone();
        let unreliable = ProblemInstance::new(
            p.target(),
            &Grid::filled(2, 1, true),
            Grid::filled(2, 1, 0.0),
            graph,
            *p.params(),
        )
        .unwrap();
        assert_eq!(data_term(&s, &unreliable), 0.0);
    }

    #[test]
    fn planar_term_single_edge() {
        let p = pair_problem(1.0, params(1.0, 1.0, 1e-12, Regularizer::MixedL12));
        let s = State::new(
            Grid::from_vec(2, 1, vec![0.0, 0.5]),
            Grid::from_vec(2, 1, vec![[0.2, 0.0], [0.2, 0.0]]),
        );
        assert!((planar_term(&s, &p) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn smoothness_single_edge() {
        let p = pair_problem(0.5, params(1.0, 2.0, 1e-12, Regularizer::MixedL12));
        let s = State::new(
            Grid::filled(2, 1, 0.0),
            Grid::from_vec(2, 1, vec![[0.0, 0.0], [3.0, 4.0]]),
        );
        assert!((normal_smoothness_term(&s, &p) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn nltgv_versus_mixed_aggregation() {
        // Node 0 has two unit-weight edges with residuals 0.3 and −0.4.
        let graph = PixelGraph::from_edge_lists(
            3,
            1,
            vec![
                vec![
                    Edge {
                        target: 1,
                        dx: 1,
                        dy: 0,
                        weight: 1.0,
                    },
                    Edge {
                        target: 2,
                        dx: 2,
                        dy: 0,
                        weight: 1.0,
                    },
                ],
                vec![],
                vec![],
            ],
        )
        .unwrap();
        let s = State::new(
            Grid::from_vec(3, 1, vec![0.0, 0.3, -0.4]),
            Grid::filled(3, 1, [0.0; 2]),
        );
        let make = |reg| {
            ProblemInstance::new(
                &Grid::filled(3, 1, 0.0),
                &Grid::filled(3, 1, true),
                Grid::filled(3, 1, 0.0),
                graph.clone(),
                params(1.0, 1.0, 1e-12, reg),
            )
            .unwrap()
        };
        assert!((nltgv_energy(&s, &make(Regularizer::Nltgv)) - 0.7).abs() < 1e-9);
        assert!((planar_term(&s, &make(Regularizer::MixedL12)) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn data_gradient_is_smoothed_sign() {
        let eps = 0.1;
        let p = pair_problem(1.0, params(0.0, 1.0, eps, Regularizer::MixedL12));
        let t = 0.25;
        let s = State::new(
            Grid::from_vec(2, 1, vec![t, 0.0]),
            Grid::filled(2, 1, [0.0; 2]),
        );
        let g = gradient(&s, &p);
        assert!((g.d[0] - t / (t * t + eps * eps).sqrt()).abs() < 1e-15);
        assert_eq!(g.d[1], 0.0);
    }

    #[test]
    fn problem_validation() {
        let graph = PixelGraph::from_edge_lists(2, 1, vec![vec![], vec![]]).unwrap();
        let target = Grid::filled(2, 1, 0.5);
        let p = params(1.0, 1.0, 1e-6, Regularizer::MixedL12);
        let valid = Grid::from_vec(2, 1, vec![true, false]);
        assert!(matches!(
            ProblemInstance::new(&target, &valid, Grid::filled(2, 1, 1.0), graph.clone(), p),
            Err(EnergyError::ConfidenceOnInvalid(1))
        ));
        assert!(matches!(
            ProblemInstance::new(
                &target,
                &valid,
                Grid::from_vec(2, 1, vec![1.5, 0.0]),
                graph.clone(),
                p
            ),
            Err(EnergyError::MaskOutOfRange(0, _))
        ));
        let bad = params(1.0, 0.0, 1e-6, Regularizer::MixedL12);
        assert!(
            ProblemInstance::new(&target, &valid, Grid::filled(2, 1, 0.0), graph, bad).is_err()
        );
    }

    #[test]
    fn regularizer_parsing() {
        assert_eq!("nltgv".parse::<Regularizer>().unwrap(), Regularizer::Nltgv);
        assert_eq!(
            "mixed-l12".parse::<Regularizer>().unwrap(),
            Regularizer::MixedL12
        );
        assert!("tv".parse::<Regularizer>().is_err());
        assert_eq!(Regularizer::MixedL12.to_string(), "mixed-l12");
    }
}
