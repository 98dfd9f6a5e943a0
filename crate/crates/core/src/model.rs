//! Global parameter initialization and the dimension bookkeeping shared by
//! the attention stages and the prediction heads.

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::octree::raw_descriptor_dim;
use crate::params::{init_matrix, xavier_scale, ParamStore};

/// Inputs to the GRU beyond the order leaf feature: direction (3), scaled
/// path length (1), attenuation (1).
pub const GEO_EXTRA_INPUTS: usize = 5;

/// Signal-head conditioning beyond the order leaf feature: frequency
/// embedding (9), position (3), incident direction (3), scaled length (1),
/// primitive-to-receiver direction (3).
pub const SIG_EXTRA_INPUTS: usize = 19;

pub fn geo_input_dim(feature_dim: usize) -> usize {
    feature_dim + GEO_EXTRA_INPUTS
}

pub fn sig_input_dim(feature_dim: usize) -> usize {
    feature_dim + SIG_EXTRA_INPUTS
}

/// softplus^-1(y): the raw value whose softplus equals `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Build every global parameter block. Gaussian-side parameters live on the
/// primitives themselves.
pub fn init_global_params(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let d = cfg.model.feature_dim;
    let dh = cfg.model.hidden_dim;
    let raw_dim = raw_descriptor_dim(cfg.model.max_depth);
    let mut store = ParamStore::new();

    let mat = |r: usize, c: usize, rng: &mut ChaCha8Rng| init_matrix(r, c, xavier_scale(r, c), rng);

    store.insert("struct.proj", raw_dim, d, mat(raw_dim, d, rng), true);
    store.insert("frozen.empty", 1, d, init_matrix(1, d, 0.1, rng), false);

    for stage in ["local", "exp"] {
        for proj in ["wq", "wk", "wv", "wo"] {
            let name = format!("attn.{stage}.{proj}");
            store.insert(&name, d, d, mat(d, d, rng), true);
        }
    }
    // depth decay beta = softplus(raw) starts at 0.5; gates start at 0.5
    store.insert("attn.beta_raw", 1, 1, vec![softplus_inverse(0.5)], true);
    store.insert("attn.gates_raw", 3, 1, vec![0.0; 3], true);

    let gin = geo_input_dim(d);
    for gate in ["z", "r", "c"] {
        store.insert(&format!("geo.w{gate}"), gin, dh, mat(gin, dh, rng), true);
        store.insert(&format!("geo.u{gate}"), dh, dh, mat(dh, dh, rng), true);
        store.insert(&format!("geo.b{gate}"), 1, dh, vec![0.0; dh], true);
    }
    store.insert("geo.w_dir", dh, 3, mat(dh, 3, rng), true);
    store.insert("geo.b_dir", 1, 3, vec![0.0; 3], true);
    store.insert("geo.w_len", dh, 1, mat(dh, 1, rng), true);
    // first learned increment ~ 0.1 * scene diagonal
    store.insert("geo.b_len", 1, 1, vec![softplus_inverse(0.1)], true);
    store.insert("geo.w_att", dh, 1, mat(dh, 1, rng), true);
    store.insert("geo.b_att", 1, 1, vec![2.0], true);

    let sin = sig_input_dim(d);
    let w = cfg.model.signal_width;
    for n in 1..=cfg.model.max_order {
        store.insert(&format!("sig{n}.in_w"), sin, w, mat(sin, w, rng), true);
        store.insert(&format!("sig{n}.in_b"), 1, w, vec![0.0; w], true);
        for k in 0..cfg.model.signal_blocks {
            store.insert(&format!("sig{n}.blk{k}.w1"), w, w, mat(w, w, rng), true);
            store.insert(&format!("sig{n}.blk{k}.b1"), 1, w, vec![0.0; w], true);
            store.insert(&format!("sig{n}.blk{k}.w2"), w, w, mat(w, w, rng), true);
            store.insert(&format!("sig{n}.blk{k}.b2"), 1, w, vec![0.0; w], true);
        }
        // zero-initialized output: untrained heads emit exactly 0 + 0j
        store.insert(&format!("sig{n}.out_w"), w, 2, vec![0.0; w * 2], true);
        store.insert(&format!("sig{n}.out_b"), 1, 2, vec![0.0; 2], true);
    }

    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn attention_parameter_count_is_order_independent() {
        let mut small = RunConfig::default();
        small.model.max_order = 2;
        let mut large = RunConfig::default();
        large.model.max_order = 5;
        let mut rng1 = ChaCha8Rng::seed_from_u64(1);
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let a = init_global_params(&small, &mut rng1);
        let b = init_global_params(&large, &mut rng2);
        let attn_count = |s: &ParamStore| {
            s.iter().filter(|e| e.name.starts_with("attn.")).map(|e| e.data.len()).sum::<usize>()
        };
        assert_eq!(attn_count(&a), attn_count(&b));
        // signal heads are order-specific and do grow
        let sig_count = |s: &ParamStore| {
            s.iter().filter(|e| e.name.starts_with("sig")).map(|e| e.data.len()).sum::<usize>()
        };
        assert!(sig_count(&b) > sig_count(&a));
    }

    #[test]
    fn softplus_inverse_roundtrips() {
        for y in [0.05, 0.1, 0.5, 1.0, 3.0] {
            let raw = softplus_inverse(y);
            let sp = (1.0 + raw.exp()).ln();
            assert!((sp - y).abs() < 1e-12);
        }
    }
}
