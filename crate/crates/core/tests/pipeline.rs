mod common;

use common::*;
use planar_refine::energy::{gradient, total_energy, EnergyParams, Regularizer};
use planar_refine::graph::{build_graph, GraphParams, GuideImage};
use planar_refine::solver::{adam_minimize, upsample_and_scale_to, AdamConfig, PyramidConfig};
use planar_refine::synth::{generate_synthetic, SceneKind, SceneSpec};
use planar_refine::{refine, Grid, InverseDepthMap, ProblemInstance, RefineConfig, State};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clean_scene(kind: SceneKind, w: usize, h: usize) -> planar_refine::synth::SyntheticScene {
    generate_synthetic(&SceneSpec::builtin(kind, w, h).unwrap()).unwrap()
}

fn max_abs_diff(a: &Grid<f64>, b: &Grid<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn pool(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .unwrap()
}

#[test]
fn refine_is_bit_identical_across_thread_counts() {
    let scene = generate_synthetic(
        &SceneSpec::builtin(SceneKind::ThreePlanes, 48, 40)
            .unwrap()
            .with_corruption(0.02, 0.1, 0.05, 3),
    )
    .unwrap();
    let cfg = RefineConfig {
        pyramid: PyramidConfig::constant(2, 2, 7.5, 7.5),
        adam: AdamConfig {
            iters_per_scale: 150,
            ..AdamConfig::default()
        },
        ..RefineConfig::default()
    };
    let run = |n| {
        pool(n).install(|| refine(&scene.input, &scene.confidence, &scene.guide, &cfg).unwrap())
    };
    let (one, four) = (run(1), run(4));
    let bits = |g: &Grid<f64>| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(one.depth.values()), bits(four.depth.values()));
    assert_eq!(one.u, four.u);
    assert_eq!(one.traces, four.traces);
    assert_eq!(one.final_energy.to_bits(), four.final_energy.to_bits());
}

#[test]
fn noiseless_plane_is_reproduced() {
    let scene = clean_scene(SceneKind::Plane, 64, 48);
    let out = refine(
        &scene.input,
        &scene.confidence,
        &scene.guide,
        &RefineConfig::default(),
    )
    .unwrap();
    let err = max_abs_diff(out.depth.values(), scene.gt.values());
    assert!(err <= 1e-4, "max error {err}");
}

#[test]
fn state_at_ground_truth_is_not_moved() {
    let scene = clean_scene(SceneKind::Plane, 24, 20);
    let graph = build_graph(&scene.guide, &GraphParams::default()).unwrap();
    let params = EnergyParams {
        lambda: 7.5,
        alpha: 7.5,
        eps: 1e-6,
        regularizer: Regularizer::MixedL12,
    };
    let prob = ProblemInstance::new(
        scene.gt.values(),
        scene.gt.valid(),
        scene.confidence.clone(),
        graph,
        params,
    )
    .unwrap();
    let init = State::new(scene.gt.values().clone(), scene.gt_u.clone());
    let out = adam_minimize(&prob, init.clone(), &AdamConfig::default()).unwrap();
    assert!(max_abs_diff(&out.state.d, &init.d) <= 1e-6);
    for (a, b) in out.state.u.iter().zip(init.u.iter()) {
        assert!((a[0] - b[0]).abs() <= 1e-6 && (a[1] - b[1]).abs() <= 1e-6);
    }
}

#[test]
fn ground_truth_energy_is_at_the_smoothing_floor() {
    for kind in [
        SceneKind::Plane,
        SceneKind::TwoPlanes,
        SceneKind::ThreePlanes,
    ] {
        let scene = clean_scene(kind, 40, 32);
        let graph = build_graph(&scene.guide, &GraphParams::default()).unwrap();
        for regularizer in [Regularizer::MixedL12, Regularizer::Nltgv] {
            let params = EnergyParams {
                lambda: 7.5,
                alpha: 7.5,
                eps: 1e-6,
                regularizer,
            };
            let prob = ProblemInstance::new(
                scene.gt.values(),
                scene.gt.valid(),
                scene.confidence.clone(),
                graph.clone(),
                params,
            )
            .unwrap();
            let e = total_energy(
                &State::new(scene.gt.values().clone(), scene.gt_u.clone()),
                &prob,
            );
            // Each smoothed term of a residual r ≪ ε contributes about r²/2ε.
            assert!(
                e <= 1e-6 * graph.edge_count() as f64 * params.eps,
                "{kind} {regularizer}: {e}"
            );
        }
    }
}

#[test]
fn upsampled_coarse_solution_is_stationary_on_a_flat_scene() {
    // Only fronto-parallel planes survive nearest-neighbor upsampling of d exactly.
    let (w, h) = (32, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let guide = random_guide(&mut rng, w, h, 3);
    let input = InverseDepthMap::fully_valid(Grid::filled(w, h, 0.4)).unwrap();
    let mask = Grid::filled(w, h, 1.0);
    let cfg = RefineConfig {
        pyramid: PyramidConfig::constant(2, 2, 7.5, 7.5),
        ..RefineConfig::default()
    };
    let coarse_cfg = RefineConfig {
        pyramid: PyramidConfig::constant(1, 2, 7.5, 7.5),
        ..cfg.clone()
    };
    let cg = guide.downsample(2);
    let cd = InverseDepthMap::fully_valid(Grid::filled(w / 2, h / 2, 0.4)).unwrap();
    let coarse = refine(&cd, &Grid::filled(w / 2, h / 2, 1.0), &cg, &coarse_cfg).unwrap();
    let norm = coarse.normalization;
    let cd_n = coarse.depth.values().map(|&v| norm.forward(v));
    let cu_n = coarse.u.map(|v| [v[0] / norm.scale, v[1] / norm.scale]);
    let (d, u) = upsample_and_scale_to(&cd_n, &cu_n, 2, w, h);

    let graph = build_graph(&guide, &cfg.graph).unwrap();
    let params = EnergyParams {
        lambda: 7.5,
        alpha: 7.5,
        eps: cfg.eps,
        regularizer: cfg.regularizer,
    };
    let target = input.values().map(|&v| norm.forward(v));
    let prob = ProblemInstance::new(&target, input.valid(), mask, graph, params).unwrap();
    let g = gradient(&State::new(d, u), &prob);
    assert!(g.norm() <= 1e-6, "gradient norm {}", g.norm());
}

#[test]
fn refinement_never_ends_above_the_naive_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..12 {
        let (w, h) = (rng.random_range(8..=20), rng.random_range(8..=20));
        let guide = random_guide(&mut rng, w, h, 3);
        let values = Grid::from_fn(w, h, |_, _| rng.random_range(0.1..2.0));
        let valid = Grid::from_fn(w, h, |_, _| rng.random_bool(0.85));
        let input = InverseDepthMap::new(values, valid).unwrap();
        let mask = Grid::from_fn(w, h, |_, _| rng.random::<f64>());
        let regularizer = if case % 2 == 0 {
            Regularizer::MixedL12
        } else {
            Regularizer::Nltgv
        };
        let cfg = RefineConfig {
            pyramid: PyramidConfig::constant(
                2,
                2,
                rng.random_range(0.5..10.0),
                rng.random_range(0.5..10.0),
            ),
            adam: AdamConfig {
                iters_per_scale: 100,
                ..AdamConfig::default()
            },
            regularizer,
            ..RefineConfig::default()
        };
        let out = refine(&input, &mask, &guide, &cfg).unwrap();
        assert!(
            out.final_energy <= out.naive_energy,
            "case {case}: {} > {}",
            out.final_energy,
            out.naive_energy
        );
    }
}

#[test]
fn single_scale_refine_equals_one_adam_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (w, h) = (16, 12);
    let guide: GuideImage = random_guide(&mut rng, w, h, 1);
    let values = Grid::from_fn(w, h, |_, _| rng.random_range(1.0..3.0));
    let input = InverseDepthMap::fully_valid(values).unwrap();
    let mask = Grid::filled(w, h, 1.0);
    let cfg = RefineConfig {
        pyramid: PyramidConfig::constant(1, 2, 2.0, 3.0),
        ..RefineConfig::default()
    };
    let out = refine(&input, &mask, &guide, &cfg).unwrap();

    let norm = out.normalization;
    let target = input.values().map(|&v| norm.forward(v));
    let graph = build_graph(&guide, &cfg.graph).unwrap();
    let params = EnergyParams {
        lambda: 2.0,
        alpha: 3.0,
        eps: cfg.eps,
        regularizer: cfg.regularizer,
    };
    let prob = ProblemInstance::new(&target, input.valid(), mask, graph, params).unwrap();
    let init = State::new(target.clone(), Grid::filled(w, h, [0.0; 2]));
    let direct = adam_minimize(&prob, init, &cfg.adam).unwrap();
    assert_eq!(direct.best_energy.to_bits(), out.final_energy.to_bits());
    assert_eq!(direct.trace, out.traces[0].energies);
}
