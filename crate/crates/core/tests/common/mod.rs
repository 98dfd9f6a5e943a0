//! Shared scene builders for the gradient-integrity and acceptance suites.

use ckm_core::attention::NodeTable;
use ckm_core::config::RunConfig;
use ckm_core::forward::{prepare_query, render_channel_values, SamplePrep};
use ckm_core::octree::OctreeIndex;
use ckm_core::renderer::spectrum_plain;
use ckm_core::ssim::db_to_unit_plain;
use ckm_core::state::TrainState;
use ckm_core::vec3::Vec3;
use ckm_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random-but-deterministic scene: every head open, a few primitives pushed
/// one level deeper, generous scales so every shape parameter couples to the
/// loss at finite-difference precision.
pub fn randomized_state(cfg: &RunConfig) -> TrainState {
    let mut state = TrainState::init(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xabcdef);
    for e in state.globals.iter_mut() {
        if e.name.contains(".out_") {
            for v in e.data.iter_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    state.energy_ema =
        (0..state.config.model.max_order).map(|n| 1e-9 * (n as f64 + 1.0)).collect();
    for g in state.gaussians.iter_mut() {
        for o in g.offset.iter_mut() {
            *o = rng.gen_range(-0.2..0.2);
        }
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        g.rotation = q;
        g.renormalize_rotation();
        g.opacity_raw = rng.gen_range(-0.8..0.8);
        g.gamma_raw = rng.gen_range(-1.0..1.0);
        for (i, ls) in g.log_scale.iter_mut().enumerate() {
            *ls = (0.35 + 0.08 * i as f64).ln() + rng.gen_range(-0.2..0.2);
        }
    }
    for gid in [0usize, 5, 11, 17] {
        if gid >= state.gaussians.len() {
            continue;
        }
        let g = &mut state.gaussians[gid];
        let child = g.anchor.child((gid % 8) as u8);
        g.anchor = child;
        g.offset = [0.0; 3];
        for ls in g.log_scale.iter_mut() {
            *ls -= std::f64::consts::LN_2;
        }
    }
    state.active_depth = 3;
    state.active_order = state.config.model.max_order;
    state.tree =
        OctreeIndex::build(state.bounds, state.config.model.max_depth, &state.gaussians).unwrap();
    state
}

/// A lightly perturbed copy whose renders serve as near-miss supervision:
/// residuals stay O(1), keeping finite differences of the loss well
/// conditioned without touching tolerances.
pub fn perturbed_copy(state: &TrainState, jitter: f64, seed: u64) -> TrainState {
    let mut other = clone_state(state);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in other.globals.iter_mut() {
        if e.trainable {
            for v in e.data.iter_mut() {
                *v += jitter * rng.gen_range(-1.0..1.0);
            }
        }
    }
    for g in other.gaussians.iter_mut() {
        for o in g.offset.iter_mut() {
            *o += jitter * rng.gen_range(-1.0..1.0);
        }
        g.opacity_raw += jitter * rng.gen_range(-1.0..1.0);
        g.gamma_raw += jitter * rng.gen_range(-1.0..1.0);
    }
    other
}

/// States carry an RNG and cannot derive Clone; rebuild the cheap way.
pub fn clone_state(state: &TrainState) -> TrainState {
    let mut out = TrainState::init(state.config.clone()).unwrap();
    out.gaussians = state.gaussians.clone();
    out.globals = state.globals.clone();
    out.active_depth = state.active_depth;
    out.active_order = state.active_order;
    out.energy_ema = state.energy_ema.clone();
    out.tree = state.tree.clone();
    out
}

/// Supervision produced by rendering `teacher` at the query.
pub fn self_target(
    teacher: &TrainState,
    table: &NodeTable,
    p_tx: Vec3,
    p_rx: Vec3,
    freq_hz: f64,
) -> SamplePrep {
    let cfg = &teacher.config;
    let mut prep = prepare_query(p_tx, p_rx, freq_hz, cfg);
    let rendered = render_channel_values(teacher, table, p_tx, p_rx, freq_hz).unwrap();
    let geom = &prep.geom;
    let spec = spectrum_plain(
        &rendered.total,
        geom,
        prep.lambda,
        cfg.grid.elevation_bins,
        cfg.grid.azimuth_bins,
    );
    let spec_db: Vec<f64> =
        spec.iter().map(|&s| 10.0 * (s + ckm_core::loss::EPS_DB).log10()).collect();
    let img: Vec<f64> = spec_db.iter().map(|&d| db_to_unit_plain(d)).collect();
    prep.target_gain_db = ckm_core::renderer::gain_db_plain(&rendered.total);
    prep.target_spec_db = Tensor::new(cfg.grid.elevation_bins * cfg.grid.azimuth_bins, 1, spec_db);
    prep.target_img = Tensor::new(cfg.grid.elevation_bins, cfg.grid.azimuth_bins, img);
    prep
}
