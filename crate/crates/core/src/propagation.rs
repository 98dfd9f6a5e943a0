//! Order-feature recurrence plus the two prediction heads: a GRU that walks
//! the bounce orders emitting per-Gaussian geometry, and order-specific
//! residual MLPs emitting the complex frequency response.

use ckm_autodiff::{concat_cols, CVar, Tape, Tensor, Var};

use crate::attention::{tree_attention, AttentionVars, NodeTable};
use crate::error::{CkmError, Result};
use crate::params::BoundParams;
use crate::vec3::Vec3;

/// Frequency-embedding band scales in GHz.
pub const FREQ_BANDS_GHZ: [f64; 4] = [1.0, 4.0, 16.0, 64.0];

/// `[f_GHz, sin(pi f/s_k), cos(pi f/s_k) for k = 1..4]`.
pub fn frequency_embedding(f_hz: f64) -> Result<[f64; 9]> {
    if f_hz <= 0.0 {
        return Err(CkmError::Domain(format!("carrier frequency must be positive, got {f_hz}")));
    }
    let f_ghz = f_hz / 1e9;
    let mut e = [0.0; 9];
    e[0] = f_ghz;
    for (k, s) in FREQ_BANDS_GHZ.iter().enumerate() {
        let arg = std::f64::consts::PI * f_ghz / s;
        e[1 + 2 * k] = arg.sin();
        e[2 + 2 * k] = arg.cos();
    }
    Ok(e)
}

/// Per-order leaf features. Order 1 is the base feature; order 2 applies the
/// shared tree attention to it; higher orders apply it to the previous
/// feature increment.
pub fn order_features(
    table: &NodeTable,
    base_leaf: &Var,
    all_feats: &Var,
    attn: &AttentionVars,
    n_active: usize,
) -> Vec<Var> {
    assert!(n_active >= 1);
    let mut orders = Vec::with_capacity(n_active);
    orders.push(base_leaf.clone());
    if n_active >= 2 {
        orders.push(tree_attention(table, base_leaf, all_feats, attn));
    }
    for n in 3..=n_active {
        let increment = orders[n - 2].sub(&orders[n - 3]);
        orders.push(tree_attention(table, &increment, all_feats, attn));
    }
    orders
}

/// Effective incident direction, path length and attenuation for one order.
pub struct OrderGeometry {
    /// Unit rows, M x 3.
    pub omega: Var,
    /// Meters, M x 1.
    pub dist: Var,
    /// (0, 1], M x 1.
    pub atten: Var,
}

pub struct GeometryVars<'a> {
    pub wz: &'a Var,
    pub uz: &'a Var,
    pub bz: &'a Var,
    pub wr: &'a Var,
    pub ur: &'a Var,
    pub br: &'a Var,
    pub wc: &'a Var,
    pub uc: &'a Var,
    pub bc: &'a Var,
    pub w_dir: &'a Var,
    pub b_dir: &'a Var,
    pub w_len: &'a Var,
    pub b_len: &'a Var,
    pub w_att: &'a Var,
    pub b_att: &'a Var,
}

impl<'a> GeometryVars<'a> {
    pub fn from_bound(bound: &'a BoundParams) -> Self {
        Self {
            wz: bound.get("geo.wz"),
            uz: bound.get("geo.uz"),
            bz: bound.get("geo.bz"),
            wr: bound.get("geo.wr"),
            ur: bound.get("geo.ur"),
            br: bound.get("geo.br"),
            wc: bound.get("geo.wc"),
            uc: bound.get("geo.uc"),
            bc: bound.get("geo.bc"),
            w_dir: bound.get("geo.w_dir"),
            b_dir: bound.get("geo.b_dir"),
            w_len: bound.get("geo.w_len"),
            b_len: bound.get("geo.b_len"),
            w_att: bound.get("geo.w_att"),
            b_att: bound.get("geo.b_att"),
        }
    }
}

/// Order-1 bypass: direct transmitter-to-primitive geometry with unit
/// attenuation. Errors when a primitive coincides with the transmitter.
pub fn geometry_order1(tape: &Tape, mu: &Var, p_tx: Vec3) -> Result<OrderGeometry> {
    let m = mu.shape().0;
    let neg_tx = tape.constant(Tensor::row(&[-p_tx[0], -p_tx[1], -p_tx[2]]));
    let diff = mu.add_row(&neg_tx);
    let dist = diff.mul(&diff).sum_axis1().sqrt();
    if dist.value().data.iter().any(|&d| d < 1e-9) {
        return Err(CkmError::Domain(
            "primitive coincides with the transmitter (degenerate direction)".into(),
        ));
    }
    let omega = diff.div_col(&dist);
    let atten = tape.constant(Tensor::full(m, 1, 1.0));
    Ok(OrderGeometry { omega, dist, atten })
}

/// One GRU step for order n >= 2. The input concatenates the order leaf
/// feature with the previous geometry `(omega, d / d_scale, eta)`; the path
/// length grows by a positive softplus increment so consecutive orders are
/// monotone by construction.
pub fn geometry_step(
    x_n: &Var,
    prev: &OrderGeometry,
    hidden: &Var,
    vars: &GeometryVars,
    d_scale: f64,
) -> (OrderGeometry, Var) {
    let prev_dist_scaled = prev.dist.scale(1.0 / d_scale);
    let input = concat_cols(&[x_n, &prev.omega, &prev_dist_scaled, &prev.atten]);
    let z = input.matmul(vars.wz).add(&hidden.matmul(vars.uz)).add_row(vars.bz).sigmoid();
    let r = input.matmul(vars.wr).add(&hidden.matmul(vars.ur)).add_row(vars.br).sigmoid();
    let gated = r.mul(hidden);
    let cand = input.matmul(vars.wc).add(&gated.matmul(vars.uc)).add_row(vars.bc).tanh();
    let next_hidden = hidden.add(&z.mul(&cand.sub(hidden)));

    let dir_lin = next_hidden.matmul(vars.w_dir).add_row(vars.b_dir);
    let dir_norm = dir_lin.mul(&dir_lin).sum_axis1().add_scalar(1e-24).sqrt();
    let omega = dir_lin.div_col(&dir_norm);
    let increment = next_hidden.matmul(vars.w_len).add_row(vars.b_len).softplus().scale(d_scale);
    let dist = prev.dist.add(&increment);
    let atten = next_hidden.matmul(vars.w_att).add_row(vars.b_att).sigmoid();
    (OrderGeometry { omega, dist, atten }, next_hidden)
}

pub struct SignalVars<'a> {
    pub in_w: &'a Var,
    pub in_b: &'a Var,
    pub blocks: Vec<(&'a Var, &'a Var, &'a Var, &'a Var)>,
    pub out_w: &'a Var,
    pub out_b: &'a Var,
}

impl<'a> SignalVars<'a> {
    pub fn from_bound(bound: &'a BoundParams, order: usize, block_count: usize) -> Self {
        Self {
            in_w: bound.get(&format!("sig{order}.in_w")),
            in_b: bound.get(&format!("sig{order}.in_b")),
            blocks: (0..block_count)
                .map(|k| {
                    (
                        bound.get(&format!("sig{order}.blk{k}.w1")),
                        bound.get(&format!("sig{order}.blk{k}.b1")),
                        bound.get(&format!("sig{order}.blk{k}.w2")),
                        bound.get(&format!("sig{order}.blk{k}.b2")),
                    )
                })
                .collect(),
            out_w: bound.get(&format!("sig{order}.out_w")),
            out_b: bound.get(&format!("sig{order}.out_b")),
        }
    }
}

/// Order-specific residual MLP producing the per-Gaussian complex response.
/// Conditioning: order leaf feature, frequency embedding, scaled position,
/// incident direction, scaled path length, primitive-to-receiver direction.
#[allow(clippy::too_many_arguments)]
pub fn signal_head(
    tape: &Tape,
    x_n: &Var,
    e_f: &[f64; 9],
    mu: &Var,
    omega: &Var,
    dist: &Var,
    dir_rx: &Var,
    vars: &SignalVars,
    d_scale: f64,
) -> CVar {
    let m = x_n.shape().0;
    let mut ef_rows = Vec::with_capacity(m * 9);
    for _ in 0..m {
        ef_rows.extend_from_slice(e_f);
    }
    let ef = tape.constant(Tensor::new(m, 9, ef_rows));
    let mu_scaled = mu.scale(1.0 / d_scale);
    let dist_scaled = dist.scale(1.0 / d_scale);
    let input = concat_cols(&[x_n, &ef, &mu_scaled, omega, &dist_scaled, dir_rx]);

    let mut h = input.matmul(vars.in_w).add_row(vars.in_b).tanh();
    for (w1, b1, w2, b2) in &vars.blocks {
        let update = h.matmul(w1).add_row(b1).tanh().matmul(w2).add_row(b2);
        h = h.add(&update);
    }
    let out = h.matmul(vars.out_w).add_row(vars.out_b);
    CVar::new(out.slice_cols(0, 1), out.slice_cols(1, 1))
}
