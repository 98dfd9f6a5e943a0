//! End-to-end forward construction: the whole loss graph builds, renders are
//! physically sane, and components add up.

use ckm_autodiff::Tape;
use ckm_core::attention::NodeTable;
use ckm_core::config::RunConfig;
use ckm_core::forward::{build_loss, prepare_sample, render_channel_values};
use ckm_core::oracle::generate_dataset;
use ckm_core::renderer::{gain_db_plain, wavelength};
use ckm_core::ssim::SsimKernel;
use ckm_core::state::TrainState;
use num_complex::Complex64;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.train_samples = 3;
    cfg.dataset.test_samples = 1;
    cfg.grid.elevation_bins = 9;
    cfg.grid.azimuth_bins = 12;
    cfg.model.directions = 8;
    cfg.seed = 7;
    cfg
}

/// Open the zero-initialized signal outputs so gradients reach everything
/// upstream, as they do after the first optimizer step.
fn unzero_signal_outputs(state: &mut TrainState) {
    let mut x: f64 = 0.01;
    for e in state.globals.iter_mut() {
        if e.name.contains(".out_") {
            for v in e.data.iter_mut() {
                x = (x * 1.7).rem_euclid(0.1) + 0.01;
                *v = x - 0.05;
            }
        }
    }
}

#[test]
fn loss_graph_builds_and_is_finite() {
    let cfg = small_config();
    let data = generate_dataset(&cfg).unwrap();
    let mut state = TrainState::init(cfg.clone()).unwrap();
    state.active_order = cfg.model.max_order; // exercise every order
    unzero_signal_outputs(&mut state);
    let table = NodeTable::build(&state.tree, state.active_depth);
    let kernel = SsimKernel::new(cfg.grid.elevation_bins, cfg.grid.azimuth_bins);
    let preps: Vec<_> = data.train_samples().map(|s| prepare_sample(s, &cfg)).collect();
    let prep_refs: Vec<_> = preps.iter().collect();

    let tape = Tape::new();
    let art = build_loss(&tape, &state, &table, &prep_refs, &kernel).unwrap();
    let loss = art.loss.scalar();
    assert!(loss.is_finite(), "loss {loss}");
    assert!(loss > 0.0);
    assert!(art.huber >= 0.0 && art.mae >= 0.0);
    assert!((-1.0..=1.0).contains(&art.ssim));
    assert_eq!(art.energies.len(), cfg.model.max_order);

    // gradients flow
    art.loss.backward().unwrap();
    let ggrads = art.leaves.collect_grads(state.gaussians.len());
    assert!(ggrads.iter().any(|row| row.iter().any(|&g| g != 0.0)));
    let globals = art.bound.collect_grads(&state.globals);
    let attn_grad: f64 = globals
        .iter()
        .filter(|(k, _)| k.starts_with("attn."))
        .flat_map(|(_, v)| v.iter())
        .map(|g| g.abs())
        .sum();
    assert!(attn_grad > 0.0, "attention parameters receive gradient");
}

#[test]
fn rendered_components_sum_to_total() {
    let cfg = small_config();
    let mut state = TrainState::init(cfg.clone()).unwrap();
    state.active_order = 2;
    let table = NodeTable::build(&state.tree, state.active_depth);
    let r = render_channel_values(&state, &table, [1.0, 1.0, 1.0], [3.0, 2.0, 1.5], 6e9).unwrap();
    assert_eq!(r.orders.len(), 2);
    for k in 0..r.total.len() {
        let mut sum = r.los[k];
        for o in &r.orders {
            sum += o[k];
        }
        assert!((sum - r.total[k]).norm() < 1e-12);
    }
}

#[test]
fn untrained_orders_are_silent_and_los_matches_free_space_when_clear() {
    // zero-initialized signal heads emit nothing: total == LoS exactly
    let cfg = small_config();
    let state = TrainState::init(cfg.clone()).unwrap();
    let table = NodeTable::build(&state.tree, state.active_depth);
    let r = render_channel_values(&state, &table, [1.0, 1.5, 1.2], [3.0, 2.0, 1.4], 6e9).unwrap();
    for o in &r.orders {
        assert!(o.iter().all(|v| v.norm() == 0.0));
    }
    for (t, l) in r.total.iter().zip(&r.los) {
        assert!((t - l).norm() < 1e-15);
    }
}

#[test]
fn empty_scene_los_is_exact_free_space() {
    let mut cfg = small_config();
    cfg.room.extents = [4.0, 4.0, 4.0];
    let mut state = TrainState::init(cfg.clone()).unwrap();
    state.gaussians.clear();
    state.tree =
        ckm_core::octree::OctreeIndex::build(state.bounds, cfg.model.max_depth, &[]).unwrap();
    let table = NodeTable::build(&state.tree, state.active_depth);
    let f = 6e9;
    let lambda = wavelength(f);
    let p_tx = [1.0, 2.0, 2.0];
    let p_rx = [2.0, 2.0, 2.0]; // d = 1 m
    let r = render_channel_values(&state, &table, p_tx, p_rx, f).unwrap();
    let expected_gain = 10.0 * (16.0 * (lambda / (4.0 * std::f64::consts::PI)).powi(2)).log10();
    let g = gain_db_plain(&r.total);
    assert!((g - expected_gain).abs() < 1e-9, "gain {g} vs {expected_gain}");
    assert!((expected_gain - (-35.96)).abs() < 0.01, "sanity: about -35.96 dB");

    // doubling the distance halves the amplitude and advances the phase by
    // 2 pi d / lambda
    let r2 =
        render_channel_values(&state, &table, p_tx, [3.0, 2.0, 2.0], f).unwrap();
    let a1: f64 = r.total[0].norm();
    let a2: f64 = r2.total[0].norm();
    assert!((a2 / a1 - 0.5).abs() < 1e-12);
    let expected_shift = 2.0 * std::f64::consts::PI * 1.0 / lambda;
    let actual = (r.total[0] / r2.total[0]).arg();
    let diff = (actual - expected_shift).rem_euclid(2.0 * std::f64::consts::PI);
    let wrapped = diff.min(2.0 * std::f64::consts::PI - diff);
    assert!(wrapped < 1e-9, "phase shift off by {wrapped}");
}

#[test]
fn renderer_los_matches_oracle_direct_path() {
    // same formulas, independent code paths: tape renderer vs plain tracer
    let mut cfg = small_config();
    cfg.room.max_bounce = 0;
    let data = generate_dataset(&cfg).unwrap();
    let mut state = TrainState::init(cfg.clone()).unwrap();
    state.gaussians.clear();
    state.tree =
        ckm_core::octree::OctreeIndex::build(state.bounds, cfg.model.max_depth, &[]).unwrap();
    let table = NodeTable::build(&state.tree, state.active_depth);
    for s in data.samples.iter().take(3) {
        let r = render_channel_values(&state, &table, s.p_tx, s.p_rx, s.freq_hz).unwrap();
        let geom = ckm_core::renderer::ArrayGeometry::planar(4, 4, wavelength(s.freq_hz));
        let (h_rt, _) =
            ckm_core::oracle::trace_channel(s.p_tx, s.p_rx, s.freq_hz, &data.room, &geom).unwrap();
        for (a, b) in r.total.iter().zip(&h_rt) {
            assert!((a - b).norm() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_config();
    let data = generate_dataset(&cfg).unwrap();
    let mut state = TrainState::init(cfg.clone()).unwrap();
    state.active_order = cfg.model.max_order;
    let table = NodeTable::build(&state.tree, state.active_depth);
    let kernel = SsimKernel::new(cfg.grid.elevation_bins, cfg.grid.azimuth_bins);
    let preps: Vec<_> = data.train_samples().map(|s| prepare_sample(s, &cfg)).collect();
    let prep_refs: Vec<_> = preps.iter().collect();
    let run = || {
        let tape = Tape::new();
        build_loss(&tape, &state, &table, &prep_refs, &kernel).unwrap().loss.scalar()
    };
    let a = run();
    let b = run();
    assert_eq!(a.to_bits(), b.to_bits(), "bitwise identical forward");
}

#[test]
fn fully_opaque_blocker_kills_the_los_component() {
    let mut cfg = small_config();
    cfg.room.extents = [4.0, 4.0, 4.0];
    let mut state = TrainState::init(cfg.clone()).unwrap();
    // one huge opaque primitive in the middle of the segment
    state.gaussians.truncate(1);
    let g = &mut state.gaussians[0];
    g.opacity_raw = 60.0; // alpha ~ 1
    g.log_scale = [0.8f64.ln(); 3];
    g.offset = [0.0; 3];
    let key = g.anchor;
    state.tree =
        ckm_core::octree::OctreeIndex::build(state.bounds, cfg.model.max_depth, &state.gaussians)
            .unwrap();
    let table = NodeTable::build(&state.tree, state.active_depth);
    let (center, _) = ckm_core::octree::cell_geometry(key, &state.bounds);
    let p_tx = [center[0] - 1.2, center[1], center[2]];
    let p_rx = [center[0] + 1.2, center[1], center[2]];
    let r = render_channel_values(&state, &table, p_tx, p_rx, 6e9).unwrap();
    let blocked: f64 = r.los.iter().map(|v| v.norm()).sum();
    assert!(blocked < 1e-9, "LoS leaked through an opaque blocker: {blocked}");
    let _ = Complex64::new(0.0, 0.0);
}
