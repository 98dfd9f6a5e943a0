//! Mutable training state: topology, primitives, global parameters,
//! schedule counters and the RNG stream.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::model::init_global_params;
use crate::octree::{cell_geometry, CubeBounds, GaussianPrimitive, NodeKey, OctreeIndex};
use crate::params::ParamStore;

pub struct TrainState {
    pub config: RunConfig,
    pub bounds: CubeBounds,
    pub tree: OctreeIndex,
    pub gaussians: Vec<GaussianPrimitive>,
    pub globals: ParamStore,
    pub step: u64,
    pub adam_t: u64,
    pub active_order: usize,
    pub active_depth: u8,
    /// Running mean energy per order (index n-1 for order n).
    pub energy_ema: Vec<f64>,
    pub loss_ema: Option<f64>,
    /// Recent EMA values, newest last, bounded by the plateau window.
    pub ema_history: VecDeque<f64>,
    pub last_unlock_step: u64,
    pub next_unlock_is_order: bool,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state: one Gaussian per start-depth cell whose center lies
    /// strictly inside the room.
    pub fn init(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let bounds = CubeBounds::enclosing_box(config.room.extents);
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        let globals = init_global_params(&config, &mut init_rng);

        let d_f = config.model.feature_dim;
        let depth = config.model.start_depth;
        let ext = config.room.extents;
        let mut gaussians = Vec::new();
        for code in 0..(1u64 << (3 * depth)) {
            let key = NodeKey { depth, code };
            let (center, edge) = cell_geometry(key, &bounds);
            let inside = (0..3).all(|i| center[i] > 0.0 && center[i] < ext[i]);
            if !inside {
                continue;
            }
            let mut g = GaussianPrimitive::new(key, d_f);
            g.log_scale = [(edge / 4.0).ln(); 3];
            g.opacity_raw = (0.1f64 / 0.9).ln(); // alpha starts at 0.1
            for f in g.feature.iter_mut() {
                *f = init_rng.gen_range(-0.1..0.1);
            }
            gaussians.push(g);
        }
        let tree = OctreeIndex::build(bounds, config.model.max_depth, &gaussians)?;

        let n_max = config.model.max_order;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            bounds,
            tree,
            gaussians,
            globals,
            step: 0,
            adam_t: 0,
            active_order: 1,
            active_depth: depth,
            energy_ema: vec![0.0; n_max],
            loss_ema: None,
            ema_history: VecDeque::new(),
            last_unlock_step: 0,
            next_unlock_is_order: true,
            rng,
        })
    }

    pub fn gaussian_count(&self) -> usize {
        self.gaussians.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_places_primitives_inside_the_room() {
        let state = TrainState::init(RunConfig::default()).unwrap();
        // 4x3x2.5 room inside a 4 m cube at depth 2: 4 x 3 x 2 cell centers
        assert_eq!(state.gaussian_count(), 24);
        assert_eq!(state.tree.gaussian_count(), 24);
        assert_eq!(state.active_order, 1);
        assert_eq!(state.active_depth, 2);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = TrainState::init(RunConfig::default()).unwrap();
        let b = TrainState::init(RunConfig::default()).unwrap();
        assert_eq!(a.gaussians.len(), b.gaussians.len());
        for (x, y) in a.gaussians.iter().zip(&b.gaussians) {
            assert_eq!(x.feature, y.feature);
        }
    }
}
