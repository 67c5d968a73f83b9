//! Piecewise-planar refinement of inverse-depth maps with joint normal
//! estimation.
//!
//! The input inverse depth is modeled per pixel as a local plane `(d, u)`,
//! where `u` is the image-space slope. A nonlocal pixel graph built from a
//! guide image couples neighboring plane fits; the resulting nonsmooth energy
//! is minimized coarse to fine with ADAM. Slopes convert to unit scene
//! normals in closed form.
//!
//! ```no_run
//! use planar_refine::{refine, GuideImage, InverseDepthMap, RefineConfig, Grid};
//! # fn load() -> (InverseDepthMap, Grid<f64>, GuideImage) { unimplemented!() }
//! let (d, confidence, guide) = load();
//! let out = refine(&d, &confidence, &guide, &RefineConfig::default()).unwrap();
//! println!("final energy {}", out.final_energy);
//! ```

pub mod config;
pub mod energy;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod grid;
pub mod image_io;
pub mod pfm;
pub mod solver;
pub mod synth;

pub use energy::{EnergyParams, ProblemInstance, Regularizer, State};
pub use geometry::{CameraIntrinsics, InverseDepthMap, NormalMap, ScenePlane};
pub use graph::{build_graph, GraphParams, GuideImage, PixelGraph};
pub use grid::Grid;
pub use solver::{
    refine, AdamConfig, Preset, PyramidConfig, RefineConfig, RefineOutput, SolveError,
};
