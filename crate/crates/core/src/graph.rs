//! Per-pixel K-nearest-neighbor graph over a guide image.
//!
//! Each pixel is connected to the `k` pixels of its `window × window`
//! neighborhood with the largest weights
//!
//! ```text
//! w_ij = exp(−‖Q_i − Q_j‖²_F / (2σ_int²)) · exp(−‖i − j‖² / (2σ_spa²))
//! ```
//!
//! where `Q_i` is the `patch × patch × C` block of the guide centered at `i`.
//! The graph is directed: selection is per source pixel.

use crate::grid::Grid;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("guide image must have 1 or 3 channels, got {0}")]
    UnsupportedChannels(usize),
    #[error("guide buffer has {got} values, expected {expected}")]
    BufferLength { got: usize, expected: usize },
    #[error("guide value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid graph parameters: {0}")]
    InvalidParams(String),
    #[error("invalid edge from node {node}: {reason}")]
    InvalidEdge { node: usize, reason: &'static str },
}

/// Guide image with values in `[0, 1]`, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl GuideImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, GraphError> {
        if channels != 1 && channels != 3 {
            return Err(GraphError::UnsupportedChannels(channels));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(GraphError::BufferLength {
                got: data.len(),
                expected,
            });
        }
        if let Some(&bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GraphError::OutOfRange(bad));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_gray(gray: &Grid<f64>) -> Result<Self, GraphError> {
        Self::new(gray.width(), gray.height(), 1, gray.as_slice().to_vec())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channel values at a pixel with replicate padding.
    #[inline]
    pub fn pixel_clamped(&self, x: isize, y: isize) -> &[f64] {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        let start = (cy * self.width + cx) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Nearest-neighbor subsampling: output `(x, y)` takes input `(r·x, r·y)`.
    pub fn downsample(&self, factor: usize) -> Self {
        assert!(factor >= 1);
        let (w, h) = (self.width / factor, self.height / factor);
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in 0..h {
            for x in 0..w {
                let start = ((y * factor) * self.width + x * factor) * self.channels;
                data.extend_from_slice(&self.data[start..start + self.channels]);
            }
        }
        Self {
            width: w,
            height: h,
            channels: self.channels,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphParams {
    pub sigma_int: f64,
    pub sigma_spa: f64,
    /// Side `B` of the search window (odd).
    pub window: usize,
    /// Side of the comparison patch (odd).
    pub patch: usize,
    /// Maximum out-degree.
    pub k: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            sigma_int: 0.07,
            sigma_spa: 3.0,
            window: 9,
            patch: 3,
            k: 20,
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<(), GraphError> {
        let fail = |msg: String| Err(GraphError::InvalidParams(msg));
        if !(self.sigma_int > 0.0 && self.sigma_int.is_finite()) {
            return fail(format!(
                "sigma_int must be positive, got {}",
                self.sigma_int
            ));
        }
        if !(self.sigma_spa > 0.0 && self.sigma_spa.is_finite()) {
            return fail(format!(
                "sigma_spa must be positive, got {}",
                self.sigma_spa
            ));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return fail(format!("window must be odd and >= 3, got {}", self.window));
        }
        if self.patch.is_multiple_of(2) {
            return fail(format!("patch must be odd, got {}", self.patch));
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        Ok(())
    }
}

/// Directed edge `i → target` with its pixel offset `target − i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub target: usize,
    pub dx: i32,
    pub dy: i32,
    pub weight: f64,
}

/// Directed weighted graph on the pixels of a `width × height` grid, stored
/// in compressed rows, with a reverse index of incoming edges.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGraph {
    width: usize,
    height: usize,
    offsets: Vec<usize>,
    edges: Vec<Edge>,
    sources: Vec<usize>,
    incoming_offsets: Vec<usize>,
    incoming: Vec<usize>,
}

impl PixelGraph {
    /// Assembles a graph from per-node edge lists, checking that targets are
    /// in bounds, consistent with the stored offsets and never the source.
    pub fn from_edge_lists(
        width: usize,
        height: usize,
        lists: Vec<Vec<Edge>>,
    ) -> Result<Self, GraphError> {
        let n = width * height;
        if lists.len() != n {
            return Err(GraphError::InvalidParams(format!(
                "expected {n} edge lists, got {}",
                lists.len()
            )));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut edges = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        let mut sources = Vec::with_capacity(edges.capacity());
        for (node, list) in lists.into_iter().enumerate() {
            let (x, y) = ((node % width) as i64, (node / width) as i64);
            for e in list {
                let (tx, ty) = (x + e.dx as i64, y + e.dy as i64);
                if tx < 0 || ty < 0 || tx >= width as i64 || ty >= height as i64 {
                    return Err(GraphError::InvalidEdge {
                        node,
                        reason: "target out of bounds",
                    });
                }
                if (ty * width as i64 + tx) as usize != e.target {
                    return Err(GraphError::InvalidEdge {
                        node,
                        reason: "offset disagrees with target",
                    });
                }
                if e.target == node {
                    return Err(GraphError::InvalidEdge {
                        node,
                        reason: "self edge",
                    });
                }
                if !(e.weight.is_finite() && e.weight >= 0.0) {
                    return Err(GraphError::InvalidEdge {
                        node,
                        reason: "weight must be finite and non-negative",
                    });
                }
                edges.push(e);
                sources.push(node);
            }
            offsets.push(edges.len());
        }

        let mut counts = vec![0usize; n + 1];
        for e in &edges {
            counts[e.target + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let incoming_offsets = counts.clone();
        let mut cursor = counts;
        let mut incoming = vec![0usize; edges.len()];
        for (idx, e) in edges.iter().enumerate() {
            incoming[cursor[e.target]] = idx;
            cursor[e.target] += 1;
        }

        Ok(Self {
            width,
            height,
            offsets,
            edges,
            sources,
            incoming_offsets,
            incoming,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn node_count(&self) -> usize {
        self.width * self.height
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Outgoing edges of node `i`, sorted by descending weight for built graphs.
    #[inline]
    pub fn edges(&self, i: usize) -> &[Edge] {
        &self.edges[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Range of node `i`'s outgoing edges in [`PixelGraph::all_edges`].
    #[inline]
    pub fn edge_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn all_edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Indices (into [`PixelGraph::all_edges`]) of edges pointing at node `j`,
    /// in ascending order.
    #[inline]
    pub fn incoming(&self, j: usize) -> &[usize] {
        &self.incoming[self.incoming_offsets[j]..self.incoming_offsets[j + 1]]
    }

    /// Source node of the edge at `edge_index`.
    #[inline]
    pub fn source_of(&self, edge_index: usize) -> usize {
        self.sources[edge_index]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Plain-text dump, one `i_x i_y j_x j_y weight` line per edge.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> io::Result<()> {
        for i in 0..self.node_count() {
            let (ix, iy) = (i % self.width, i / self.width);
            for e in self.edges(i) {
                let (jx, jy) = (e.target % self.width, e.target / self.width);
                writeln!(out, "{ix} {iy} {jx} {jy} {:e}", e.weight)?;
            }
        }
        Ok(())
    }
}

/// Squared Frobenius distance between the `patch × patch` blocks (all
/// channels) centered at `i` and `j`, with replicate padding.
pub fn patch_distance(img: &GuideImage, i: (usize, usize), j: (usize, usize), patch: usize) -> f64 {
    let r = (patch / 2) as isize;
    let (ix, iy) = (i.0 as isize, i.1 as isize);
    let (jx, jy) = (j.0 as isize, j.1 as isize);
    let mut sum = 0.0;
    for oy in -r..=r {
        for ox in -r..=r {
            let a = img.pixel_clamped(ix + ox, iy + oy);
            let b = img.pixel_clamped(jx + ox, jy + oy);
            for (p, q) in a.iter().zip(b) {
                let diff = p - q;
                sum += diff * diff;
            }
        }
    }
    sum
}

/// Edge weight between pixels `i ≠ j`.
pub fn edge_weight(
    img: &GuideImage,
    i: (usize, usize),
    j: (usize, usize),
    params: &GraphParams,
) -> f64 {
    let pd = patch_distance(img, i, j, params.patch);
    let dx = i.0 as f64 - j.0 as f64;
    let dy = i.1 as f64 - j.1 as f64;
    weight_from_distances(pd, dx * dx + dy * dy, params)
}

#[inline]
fn weight_from_distances(patch_dist: f64, spatial_dist: f64, params: &GraphParams) -> f64 {
    (-patch_dist / (2.0 * params.sigma_int * params.sigma_int)).exp()
        * (-spatial_dist / (2.0 * params.sigma_spa * params.sigma_spa)).exp()
}

/// Builds the K-NN graph. Windows are clipped at the image border, so border
/// pixels may have fewer than `k` edges. Ties in weight are broken by
/// ascending target index.
pub fn build_graph(img: &GuideImage, params: &GraphParams) -> Result<PixelGraph, GraphError> {
    params.validate()?;
    let (w, h) = (img.width(), img.height());
    let half = (params.window / 2) as isize;
    let lists: Vec<Vec<Edge>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let mut candidates = Vec::with_capacity(params.window * params.window - 1);
            for dy in -half..=half {
                for dx in -half..=half {
                    let (tx, ty) = (x + dx, y + dy);
                    if (dx == 0 && dy == 0)
                        || tx < 0
                        || ty < 0
                        || tx >= w as isize
                        || ty >= h as isize
                    {
                        continue;
                    }
                    let target = ty as usize * w + tx as usize;
                    let weight = edge_weight(
                        img,
                        (x as usize, y as usize),
                        (tx as usize, ty as usize),
                        params,
                    );
                    candidates.push(Edge {
                        target,
                        dx: dx as i32,
                        dy: dy as i32,
                        weight,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.weight
                    .total_cmp(&a.weight)
                    .then_with(|| a.target.cmp(&b.target))
            });
            candidates.truncate(params.k);
            candidates
        })
        .collect();
    PixelGraph::from_edge_lists(w, h, lists)
}
