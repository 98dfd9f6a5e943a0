//! The full differentiable forward pass for a batch of queries: Gaussian
//! packing, structural encodings, order features, prediction heads, the
//! complex renderer and the loss stack, all on one tape.

use ckm_autodiff::{concat_rows, CVar, Tape, Tensor, Var};
use num_complex::Complex64;

use crate::attention::{AttentionVars, NodeTable};
use crate::config::RunConfig;
use crate::dataset::QuerySample;
use crate::error::{CkmError, Result};
use crate::loss::{
    causal_loss, decay_loss, gain_mae, spectrum_huber, to_db, total_loss, LossTerms,
};
use crate::octree::cell_geometry;
use crate::params::BoundParams;
use crate::propagation::{
    frequency_embedding, geometry_order1, geometry_step, order_features, signal_head,
    GeometryVars, OrderGeometry, SignalVars,
};
use crate::renderer::{
    assign_direction_bins, complex_constant, gain_db_on_tape, render_los, render_order,
    sfg_directions, spectrum_grid_directions, spectrum_on_tape, steering_vector,
    transmittance_batch, wavelength, ArrayGeometry, OrderRenderInputs, SceneVars,
};
use crate::ssim::{db_to_unit, ssim_on_tape, SsimKernel};
use crate::state::TrainState;
use crate::vec3::Vec3;

/// Per-sample constants: targets and steering matrices that depend only on
/// the query, not on model parameters. Cached across steps.
pub struct SamplePrep {
    pub p_tx: Vec3,
    pub p_rx: Vec3,
    pub freq_hz: f64,
    pub lambda: f64,
    pub e_f: [f64; 9],
    pub geom: ArrayGeometry,
    pub target_gain_db: f64,
    /// dB-converted target spectrum, (V*Z) x 1.
    pub target_spec_db: Tensor,
    /// Target spectrum mapped to [0,1], V x Z.
    pub target_img: Tensor,
    /// Grid steering rows, (V*Z) x N_a, split re/im.
    pub b_grid_re: Tensor,
    pub b_grid_im: Tensor,
    /// Steering vectors of the P receive directions.
    pub sfg_steering: Vec<Vec<Complex64>>,
}

/// Query-only preparation (no targets), for rendering at arbitrary points.
pub fn prepare_query(p_tx: Vec3, p_rx: Vec3, freq_hz: f64, cfg: &RunConfig) -> SamplePrep {
    let lambda = wavelength(freq_hz);
    let geom = ArrayGeometry::planar(cfg.array.rows, cfg.array.cols, lambda);
    let n_a = geom.len();
    let (v, z) = (cfg.grid.elevation_bins, cfg.grid.azimuth_bins);
    let grid_dirs = spectrum_grid_directions(v, z);
    let mut re = Vec::with_capacity(v * z * n_a);
    let mut im = Vec::with_capacity(v * z * n_a);
    for dir in &grid_dirs {
        for b in steering_vector(*dir, &geom, lambda) {
            re.push(b.re);
            im.push(b.im);
        }
    }
    let sfg_steering = sfg_directions(cfg.model.directions)
        .iter()
        .map(|&d| steering_vector(d, &geom, lambda))
        .collect();
    SamplePrep {
        p_tx,
        p_rx,
        freq_hz,
        lambda,
        e_f: frequency_embedding(freq_hz).expect("validated positive frequency"),
        geom,
        target_gain_db: 0.0,
        target_spec_db: Tensor::zeros(v * z, 1),
        target_img: Tensor::zeros(v, z),
        b_grid_re: Tensor::new(v * z, n_a, re),
        b_grid_im: Tensor::new(v * z, n_a, im),
        sfg_steering,
    }
}

/// Attach supervision targets from a dataset record.
pub fn prepare_sample(qs: &QuerySample, cfg: &RunConfig) -> SamplePrep {
    let mut prep = prepare_query(qs.p_tx, qs.p_rx, qs.freq_hz, cfg);
    let (v, z) = (cfg.grid.elevation_bins, cfg.grid.azimuth_bins);
    assert_eq!(qs.spectrum.len(), v * z, "sample grid must match the configuration");
    let spec_db: Vec<f64> = qs
        .spectrum
        .iter()
        .map(|&s| 10.0 * ((s as f64) + crate::loss::EPS_DB).log10())
        .collect();
    let img: Vec<f64> = spec_db.iter().map(|&d| crate::ssim::db_to_unit_plain(d)).collect();
    prep.target_gain_db = qs.gain_db;
    prep.target_spec_db = Tensor::new(v * z, 1, spec_db);
    prep.target_img = Tensor::new(v, z, img);
    prep
}

/// Tape handles for the packed per-Gaussian parameter leaves.
pub struct GaussianLeaves {
    pub offsets: Var,
    pub quats: Var,
    pub log_scales: Var,
    pub opacity_raw: Var,
    pub gamma_raw: Var,
    pub features: Var,
}

impl GaussianLeaves {
    /// Per-Gaussian gradient rows in the `GaussianPrimitive::flatten` layout.
    pub fn collect_grads(&self, m_count: usize) -> Vec<Vec<f64>> {
        let go = self.offsets.grad();
        let gq = self.quats.grad();
        let gs = self.log_scales.grad();
        let ga = self.opacity_raw.grad();
        let gg = self.gamma_raw.grad();
        let gf = self.features.grad();
        (0..m_count)
            .map(|m| {
                let mut row = Vec::with_capacity(12 + gf.cols);
                row.extend_from_slice(go.row_slice(m));
                row.extend_from_slice(gq.row_slice(m));
                row.extend_from_slice(gs.row_slice(m));
                row.push(ga.get(m, 0));
                row.push(gg.get(m, 0));
                row.extend_from_slice(gf.row_slice(m));
                row
            })
            .collect()
    }
}

/// Bind the per-Gaussian parameters and derive the renderer-facing scene.
pub fn bind_scene(tape: &Tape, state: &TrainState) -> (GaussianLeaves, SceneVars) {
    let m = state.gaussians.len();
    let d_f = state.config.model.feature_dim;
    let mut offsets = Vec::with_capacity(m * 3);
    let mut quats = Vec::with_capacity(m * 4);
    let mut log_scales = Vec::with_capacity(m * 3);
    let mut opacity = Vec::with_capacity(m);
    let mut gamma = Vec::with_capacity(m);
    let mut features = Vec::with_capacity(m * d_f);
    let mut centers = Vec::with_capacity(m * 3);
    let mut halves = Vec::with_capacity(m);
    for g in &state.gaussians {
        offsets.extend_from_slice(&g.offset);
        quats.extend_from_slice(&g.rotation);
        log_scales.extend_from_slice(&g.log_scale);
        opacity.push(g.opacity_raw);
        gamma.push(g.gamma_raw);
        features.extend_from_slice(&g.feature);
        let (c, e) = cell_geometry(g.anchor, &state.bounds);
        centers.extend_from_slice(&c);
        halves.push(e / 2.0);
    }
    let leaves = GaussianLeaves {
        offsets: tape.leaf(Tensor::new(m, 3, offsets)),
        quats: tape.leaf(Tensor::new(m, 4, quats)),
        log_scales: tape.leaf(Tensor::new(m, 3, log_scales)),
        opacity_raw: tape.leaf(Tensor::new(m, 1, opacity)),
        gamma_raw: tape.leaf(Tensor::new(m, 1, gamma)),
        features: tape.leaf(Tensor::new(m, d_f, features)),
    };

    let lo: Vec<f64> = halves.iter().map(|h| -h).collect();
    let clamped = leaves.offsets.clamp(&lo, &halves);
    let mu = clamped.add(&tape.constant(Tensor::new(m, 3, centers)));
    let scene = SceneVars {
        mu,
        alpha: leaves.opacity_raw.sigmoid(),
        gamma_frac: leaves.gamma_raw.sigmoid(),
        w_sym: crate::renderer::precision_vars(&leaves.quats, &leaves.log_scales),
    };
    (leaves, scene)
}

/// Rendered components of one query, on tape.
pub struct SampleRender {
    pub los: CVar,
    pub orders: Vec<CVar>,
    pub total: CVar,
    /// Per-order effective path lengths (M x 1 each).
    pub order_dists: Vec<Var>,
    /// Per-order energies `|h^n|^2` (scalars).
    pub order_energies: Vec<Var>,
    pub gain_db: Var,
    /// Linear spectrum, (V*Z) x 1.
    pub spectrum: Var,
}

/// Render one query against the current scene. `order_feats` are the shared
/// per-order leaf features (empty when no primitives exist).
#[allow(clippy::too_many_arguments)]
pub fn render_sample(
    tape: &Tape,
    state: &TrainState,
    scene: &SceneVars,
    order_feats: &[Var],
    geo: &GeometryVars,
    bound: &BoundParams,
    prep: &SamplePrep,
) -> Result<SampleRender> {
    let m = scene.gaussian_count();
    let cfg = &state.config;
    let lambda = prep.lambda;
    let n_a = prep.geom.len();
    let d_scale = cfg.distance_scale();

    let los = render_los(tape, prep.p_tx, prep.p_rx, lambda, scene, &prep.geom)?;

    let mut orders = Vec::new();
    let mut order_dists = Vec::new();
    let mut order_energies = Vec::new();
    if m > 0 {
        let neg_rx =
            tape.constant(Tensor::row(&[-prep.p_rx[0], -prep.p_rx[1], -prep.p_rx[2]]));
        let to_rx = scene.mu.add_row(&neg_rx);
        let d_rx = to_rx.mul(&to_rx).sum_axis1().sqrt();
        if d_rx.value().data.iter().any(|&d| d < 1e-9) {
            return Err(CkmError::Domain("primitive coincides with the receiver".into()));
        }
        let dir_rx = to_rx.div_col(&d_rx).negate();

        let plain = scene.plain();
        let mus: Vec<Vec3> = plain.iter().map(|g| g.mu).collect();
        let sfg_dirs = sfg_directions(cfg.model.directions);
        let bins = assign_direction_bins(&mus, prep.p_rx, &sfg_dirs);

        let theta_tx = transmittance_batch(tape, prep.p_tx, &scene.mu, scene, lambda, true);
        let theta_rx = transmittance_batch(tape, prep.p_rx, &scene.mu, scene, lambda, true);

        let mut geometry: Option<OrderGeometry> = None;
        let mut hidden = tape.constant(Tensor::zeros(m, cfg.model.hidden_dim));
        for n in 1..=state.active_order {
            let g_n = if n == 1 {
                geometry_order1(tape, &scene.mu, prep.p_tx)?
            } else {
                let prev = geometry.as_ref().expect("previous order exists");
                let (g, h) = geometry_step(&order_feats[n - 1], prev, &hidden, geo, d_scale);
                hidden = h;
                g
            };
            let sig_vars = SignalVars::from_bound(bound, n, cfg.model.signal_blocks);
            let signal = signal_head(
                tape,
                &order_feats[n - 1],
                &prep.e_f,
                &scene.mu,
                &g_n.omega,
                &g_n.dist,
                &dir_rx,
                &sig_vars,
                d_scale,
            );
            let inputs = OrderRenderInputs {
                dist: &g_n.dist,
                atten: &g_n.atten,
                signal: &signal,
                theta_tx: if n == 1 { Some(&theta_tx) } else { None },
                theta_rx: &theta_rx,
                d_rx: &d_rx,
                bins: &bins,
                bin_steering: &prep.sfg_steering,
            };
            let h_n = render_order(tape, &inputs, lambda, n_a)?;
            order_energies.push(h_n.abs2().sum());
            orders.push(h_n);
            order_dists.push(g_n.dist.clone());
            geometry = Some(g_n);
        }
    }

    let mut total = los.clone();
    for h_n in &orders {
        total = total.add(h_n);
    }

    let b_grid = CVar::new(
        tape.constant(prep.b_grid_re.clone()),
        tape.constant(prep.b_grid_im.clone()),
    );
    let spectrum = spectrum_on_tape(&total, &b_grid);
    let gain_db = gain_db_on_tape(&total);

    Ok(SampleRender { los, orders, total, order_dists, order_energies, gain_db, spectrum })
}

pub struct ForwardArtifacts {
    pub loss: Var,
    pub huber: f64,
    pub mae: f64,
    pub ssim: f64,
    pub causal: f64,
    pub decay: f64,
    /// Batch-mean per-order energies (values).
    pub energies: Vec<f64>,
    pub leaves: GaussianLeaves,
    pub bound: BoundParams,
    pub renders: Vec<SampleRender>,
}

/// Build the complete batch loss graph. Returns handles for backward and the
/// per-term values for logging.
pub fn build_loss(
    tape: &Tape,
    state: &TrainState,
    table: &NodeTable,
    preps: &[&SamplePrep],
    kernel: &SsimKernel,
) -> Result<ForwardArtifacts> {
    assert!(!preps.is_empty(), "empty batch");
    let cfg = &state.config;
    let m = state.gaussians.len();
    let bound = state.globals.bind_all(tape);
    let (leaves, scene) = bind_scene(tape, state);

    // structural encodings for every active node
    let order_feats: Vec<Var> = if m > 0 {
        let raw = tape.constant(table.raw_descriptors.clone());
        let e_all = raw.matmul(bound.get("struct.proj"));
        let leaf_rows: Vec<usize> = (0..m).collect();
        let e_leaf = e_all.select_rows(&leaf_rows);
        let base = leaves.features.add(&e_leaf);
        let empty_rows: Vec<usize> = table.empty_rows().collect();
        let empty = if empty_rows.is_empty() {
            tape.constant(Tensor::zeros(0, cfg.model.feature_dim))
        } else {
            e_all.select_rows(&empty_rows).add_row(bound.get("frozen.empty"))
        };
        let all_feats = table.aggregate(tape, &base, &empty);
        let attn = AttentionVars::from_bound(&bound, cfg.model.heads);
        order_features(table, &base, &all_feats, &attn, state.active_order)
    } else {
        Vec::new()
    };

    let geo = GeometryVars::from_bound(&bound);
    let mut renders = Vec::with_capacity(preps.len());
    for prep in preps {
        renders.push(render_sample(tape, state, &scene, &order_feats, &geo, &bound, prep)?);
    }

    // batch terms
    let huber_cols: Vec<Var> = renders
        .iter()
        .zip(preps)
        .map(|(r, p)| {
            spectrum_huber(&r.spectrum, &tape.constant(p.target_spec_db.clone()), cfg.loss.huber_delta)
        })
        .collect::<Result<_>>()?;
    let huber = mean_of_scalars(&huber_cols);

    let gains: Vec<Var> = renders.iter().map(|r| r.gain_db.clone()).collect();
    let pred_gain = stack_scalars(&gains);
    let target_gain = tape.constant(Tensor::col(
        &preps.iter().map(|p| p.target_gain_db).collect::<Vec<_>>(),
    ));
    let mae = gain_mae(&pred_gain, &target_gain);

    let ssim_vals: Vec<Var> = renders
        .iter()
        .zip(preps)
        .map(|(r, p)| {
            let img = db_to_unit(&to_db(&r.spectrum))
                .reshape(cfg.grid.elevation_bins, cfg.grid.azimuth_bins);
            ssim_on_tape(tape, &img, &tape.constant(p.target_img.clone()), kernel)
        })
        .collect();
    let ssim = mean_of_scalars(&ssim_vals);

    // causality over orders: concatenate the per-sample distance columns
    let causal = if state.active_order >= 2 && m > 0 {
        let per_order: Vec<Var> = (0..state.active_order)
            .map(|n| {
                let cols: Vec<&Var> = renders.iter().map(|r| &r.order_dists[n]).collect();
                concat_rows(&cols)
            })
            .collect();
        causal_loss(tape, &per_order, cfg.loss.delta_d)
    } else {
        tape.constant_scalar(0.0)
    };

    // order energies averaged over the batch
    let (decay, energies) = if state.active_order >= 1 && m > 0 {
        let per_order: Vec<Var> = (0..state.active_order)
            .map(|n| {
                let es: Vec<Var> = renders.iter().map(|r| r.order_energies[n].clone()).collect();
                mean_of_scalars(&es)
            })
            .collect();
        let vals: Vec<f64> = per_order.iter().map(|e| e.scalar()).collect();
        let d = if state.active_order >= 2 {
            decay_loss(tape, &per_order, &state.energy_ema, &cfg.loss)
        } else {
            tape.constant_scalar(0.0)
        };
        (d, vals)
    } else {
        (tape.constant_scalar(0.0), Vec::new())
    };

    let breakdown = total_loss(
        &LossTerms { huber: &huber, mae: &mae, ssim: &ssim, causal: &causal, decay: &decay },
        &cfg.loss,
    );

    Ok(ForwardArtifacts {
        loss: breakdown.total,
        huber: breakdown.huber,
        mae: breakdown.mae,
        ssim: breakdown.ssim,
        causal: breakdown.causal,
        decay: breakdown.decay,
        energies,
        leaves,
        bound,
        renders,
    })
}

fn stack_scalars(vars: &[Var]) -> Var {
    let refs: Vec<&Var> = vars.iter().collect();
    concat_rows(&refs)
}

fn mean_of_scalars(vars: &[Var]) -> Var {
    stack_scalars(vars).mean()
}

/// Value-level rendered components for evaluation and the CLI.
pub struct RenderedChannel {
    pub los: Vec<Complex64>,
    pub orders: Vec<Vec<Complex64>>,
    pub total: Vec<Complex64>,
}

fn cvar_row_to_complex(v: &CVar) -> Vec<Complex64> {
    let (re, im) = v.values();
    re.data.iter().zip(&im.data).map(|(&r, &i)| Complex64::new(r, i)).collect()
}

/// Render a single query and extract plain complex vectors.
pub fn render_channel_values(
    state: &TrainState,
    table: &NodeTable,
    p_tx: Vec3,
    p_rx: Vec3,
    freq_hz: f64,
) -> Result<RenderedChannel> {
    let tape = Tape::new();
    let prep = prepare_query(p_tx, p_rx, freq_hz, &state.config);
    let bound = state.globals.bind_all(&tape);
    let (leaves, scene) = bind_scene(&tape, state);
    let m = state.gaussians.len();
    let cfg = &state.config;
    let order_feats: Vec<Var> = if m > 0 {
        let raw = tape.constant(table.raw_descriptors.clone());
        let e_all = raw.matmul(bound.get("struct.proj"));
        let leaf_rows: Vec<usize> = (0..m).collect();
        let base = leaves.features.add(&e_all.select_rows(&leaf_rows));
        let empty_rows: Vec<usize> = table.empty_rows().collect();
        let empty = if empty_rows.is_empty() {
            tape.constant(Tensor::zeros(0, cfg.model.feature_dim))
        } else {
            e_all.select_rows(&empty_rows).add_row(bound.get("frozen.empty"))
        };
        let all_feats = table.aggregate(&tape, &base, &empty);
        let attn = AttentionVars::from_bound(&bound, cfg.model.heads);
        order_features(table, &base, &all_feats, &attn, state.active_order)
    } else {
        Vec::new()
    };
    let geo = GeometryVars::from_bound(&bound);
    let render = render_sample(&tape, state, &scene, &order_feats, &geo, &bound, &prep)?;
    Ok(RenderedChannel {
        los: cvar_row_to_complex(&render.los),
        orders: render.orders.iter().map(cvar_row_to_complex).collect(),
        total: cvar_row_to_complex(&render.total),
    })
}
