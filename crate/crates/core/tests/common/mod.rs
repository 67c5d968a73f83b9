//! Naive reference loops and random instance builders shared by the
//! integration tests.
#![allow(dead_code)]

use planar_refine::energy::{EnergyParams, ProblemInstance, Regularizer, State};
use planar_refine::graph::{build_graph, GraphParams, GuideImage};
use planar_refine::Grid;
use rand::Rng;

pub fn smooth(x: f64, eps: f64) -> f64 {
    (x * x + eps * eps).sqrt() - eps
}

/// Edge weight by direct substitution into the weight formula.
pub fn naive_weight(
    img: &GuideImage,
    i: (usize, usize),
    j: (usize, usize),
    p: &GraphParams,
) -> f64 {
    let (w, h, c) = (img.width() as isize, img.height() as isize, img.channels());
    let r = (p.patch / 2) as isize;
    let at = |x: isize, y: isize, k: usize| {
        let cx = x.max(0).min(w - 1) as usize;
        let cy = y.max(0).min(h - 1) as usize;
        img.data()[(cy * w as usize + cx) * c + k]
    };
    let mut pd = 0.0;
    for oy in -r..=r {
        for ox in -r..=r {
            for k in 0..c {
                let a = at(i.0 as isize + ox, i.1 as isize + oy, k);
                let b = at(j.0 as isize + ox, j.1 as isize + oy, k);
                pd += (a - b) * (a - b);
            }
        }
    }
    let dx = i.0 as f64 - j.0 as f64;
    let dy = i.1 as f64 - j.1 as f64;
    (-pd / (2.0 * p.sigma_int * p.sigma_int)).exp()
        * (-(dx * dx + dy * dy) / (2.0 * p.sigma_spa * p.sigma_spa)).exp()
}

/// Every in-window candidate `(target, weight)` of pixel `i`, unsorted.
pub fn naive_candidates(img: &GuideImage, i: usize, p: &GraphParams) -> Vec<(usize, f64)> {
    let (w, h) = (img.width(), img.height());
    let (x, y) = (i % w, i / w);
    let half = p.window / 2;
    let mut out = Vec::new();
    for ty in y.saturating_sub(half)..=(y + half).min(h - 1) {
        for tx in x.saturating_sub(half)..=(x + half).min(w - 1) {
            if (tx, ty) != (x, y) {
                out.push((ty * w + tx, naive_weight(img, (x, y), (tx, ty), p)));
            }
        }
    }
    out
}

pub fn naive_data(state: &State, prob: &ProblemInstance) -> f64 {
    let eps = prob.params().eps;
    let mut sum = 0.0;
    for i in 0..state.d.len() {
        sum += prob.mask()[i] * smooth(state.d[i] - prob.target()[i], eps);
    }
    sum
}

fn residual(state: &State, i: usize, j: usize, dx: f64, dy: f64) -> f64 {
    state.d[j] - state.d[i] - state.u[i][0] * dx - state.u[i][1] * dy
}

pub fn naive_planar(state: &State, prob: &ProblemInstance) -> f64 {
    let eps = prob.params().eps;
    let g = prob.graph();
    let mut sum = 0.0;
    for i in 0..g.node_count() {
        let mut sq = 0.0;
        for e in g.edges(i) {
            let r = e.weight * residual(state, i, e.target, e.dx as f64, e.dy as f64);
            sq += r * r;
        }
        sum += (sq + eps * eps).sqrt() - eps;
    }
    sum
}

pub fn naive_normal_smoothness(state: &State, prob: &ProblemInstance) -> f64 {
    let EnergyParams { eps, alpha, .. } = *prob.params();
    let g = prob.graph();
    let mut sum = 0.0;
    for i in 0..g.node_count() {
        for e in g.edges(i) {
            let ax = state.u[e.target][0] - state.u[i][0];
            let ay = state.u[e.target][1] - state.u[i][1];
            sum += e.weight * smooth((ax * ax + ay * ay).sqrt(), eps);
        }
    }
    alpha * sum
}

pub fn naive_nltgv(state: &State, prob: &ProblemInstance) -> f64 {
    let EnergyParams { eps, alpha, .. } = *prob.params();
    let g = prob.graph();
    let mut fit = 0.0;
    let mut reg = 0.0;
    for i in 0..g.node_count() {
        for e in g.edges(i) {
            fit += smooth(
                e.weight * residual(state, i, e.target, e.dx as f64, e.dy as f64),
                eps,
            );
            let ax = state.u[e.target][0] - state.u[i][0];
            let ay = state.u[e.target][1] - state.u[i][1];
            reg += e.weight * (smooth(ax, eps) + smooth(ay, eps));
        }
    }
    fit + alpha * reg
}

pub fn naive_total(state: &State, prob: &ProblemInstance) -> f64 {
    let p = prob.params();
    let reg = match p.regularizer {
        Regularizer::MixedL12 => naive_planar(state, prob) + naive_normal_smoothness(state, prob),
        Regularizer::Nltgv => naive_nltgv(state, prob),
    };
    naive_data(state, prob) + p.lambda * reg
}

/// `(bad %, avgerr, rms, count)` by a plain loop.
pub fn naive_metrics(pred: &[f64], gt: &[f64], valid: &[bool], t: f64) -> (f64, f64, f64, usize) {
    let mut bad = 0usize;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for k in 0..gt.len() {
        if !valid[k] || !pred[k].is_finite() {
            continue;
        }
        let e = (pred[k] - gt[k]).abs();
        if e > t {
            bad += 1;
        }
        abs += e;
        sq += e * e;
        n += 1;
    }
    (
        100.0 * bad as f64 / n as f64,
        abs / n as f64,
        (sq / n as f64).sqrt(),
        n,
    )
}

pub fn random_guide<R: Rng>(rng: &mut R, w: usize, h: usize, channels: usize) -> GuideImage {
    let data = (0..w * h * channels).map(|_| rng.random::<f64>()).collect();
    GuideImage::new(w, h, channels, data).unwrap()
}

/// A random problem on a random guide, with a random state to evaluate at.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    w: usize,
    h: usize,
    regularizer: Regularizer,
    eps: f64,
) -> (ProblemInstance, State) {
    let channels = if rng.random_bool(0.5) { 3 } else { 1 };
    let guide = random_guide(rng, w, h, channels);
    let graph_params = GraphParams {
        sigma_int: 0.5,
        window: 5,
        k: 8,
        ..GraphParams::default()
    };
    let graph = build_graph(&guide, &graph_params).unwrap();
    let target = Grid::from_fn(w, h, |_, _| rng.random::<f64>());
    let valid = Grid::from_fn(w, h, |_, _| rng.random_bool(0.8));
    let mask = Grid::from_fn(w, h, |x, y| {
        if *valid.get(x, y) {
            rng.random::<f64>()
        } else {
            0.0
        }
    });
    let params = EnergyParams {
        lambda: rng.random_range(0.5..3.0),
        alpha: rng.random_range(0.5..3.0),
        eps,
        regularizer,
    };
    let prob = ProblemInstance::new(&target, &valid, mask, graph, params).unwrap();
    let state = State::new(
        Grid::from_fn(w, h, |_, _| rng.random::<f64>()),
        Grid::from_fn(w, h, |_, _| {
            [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]
        }),
    );
    (prob, state)
}
