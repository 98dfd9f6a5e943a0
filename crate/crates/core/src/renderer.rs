//! Complex-valued channel renderer: spherical Fibonacci receive directions,
//! steering vectors, projected-Gaussian transmittance with phase, the LoS
//! branch and per-order directional contributions.
//!
//! Plain (value-only) primitives live alongside the tape path; the oracle and
//! the brute-force test reference reuse the plain ones.

use ckm_autodiff::{concat_cols, CVar, Tape, Tensor, Var};
use num_complex::Complex64;

use crate::config::C_LIGHT;
use crate::error::{CkmError, Result};
use crate::vec3::{self, Vec3};

/// Diagonal regularizer applied to the covariance before inversion.
pub const EPS_SIGMA: f64 = 1e-9;

/// Floor for the dB gain of a zero channel vector.
pub const GAIN_FLOOR_DB: f64 = -300.0;

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

pub fn wavelength(f_hz: f64) -> f64 {
    C_LIGHT / f_hz
}

// ---------------------------------------------------------------------------
// directions and steering
// ---------------------------------------------------------------------------

/// Upper-hemisphere spherical Fibonacci grid of `p` unit directions:
/// `z_i = 1 - (i + 0.5) / P`, golden-ratio azimuth steps.
pub fn sfg_directions(p: usize) -> Vec<Vec3> {
    assert!(p >= 1, "need at least one direction");
    let golden = 0.5 * (1.0 + 5f64.sqrt());
    (0..p)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / p as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = (2.0 * std::f64::consts::PI * i as f64 / golden)
                .rem_euclid(2.0 * std::f64::consts::PI);
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Rx array element displacements: a rows x cols planar grid in the local
/// x-y plane, half-wavelength spacing, centered on the receiver.
#[derive(Debug, Clone)]
pub struct ArrayGeometry {
    pub displacements: Vec<Vec3>,
}

impl ArrayGeometry {
    pub fn planar(rows: usize, cols: usize, lambda: f64) -> Self {
        let s = lambda / 2.0;
        let mut displacements = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                displacements.push([
                    (c as f64 - (cols as f64 - 1.0) / 2.0) * s,
                    (r as f64 - (rows as f64 - 1.0) / 2.0) * s,
                    0.0,
                ]);
            }
        }
        Self { displacements }
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }
}

/// Array response for an arrival direction: `b_k = exp(+j 2pi/lambda p_k . w)`.
pub fn steering_vector(dir: Vec3, geom: &ArrayGeometry, lambda: f64) -> Vec<Complex64> {
    let k = 2.0 * std::f64::consts::PI / lambda;
    geom.displacements
        .iter()
        .map(|p| Complex64::from_polar(1.0, k * vec3::dot(*p, dir)))
        .collect()
}

/// Uniform upper-hemisphere bin centers: elevation in (0, 90) deg, azimuth in
/// [0, 360) deg. Row-major elevation x azimuth.
pub fn spectrum_grid_directions(v_bins: usize, z_bins: usize) -> Vec<Vec3> {
    let mut dirs = Vec::with_capacity(v_bins * z_bins);
    for v in 0..v_bins {
        let theta = (v as f64 + 0.5) * 90.0 / v_bins as f64;
        let (st, ct) = theta.to_radians().sin_cos();
        for z in 0..z_bins {
            let phi = (z as f64 + 0.5) * 360.0 / z_bins as f64;
            let (sp, cp) = phi.to_radians().sin_cos();
            dirs.push([ct * cp, ct * sp, st]);
        }
    }
    dirs
}

/// `|b^H h|^2` over the spectrum grid (plain path).
pub fn spectrum_plain(
    h: &[Complex64],
    geom: &ArrayGeometry,
    lambda: f64,
    v_bins: usize,
    z_bins: usize,
) -> Vec<f64> {
    spectrum_grid_directions(v_bins, z_bins)
        .iter()
        .map(|&dir| {
            let b = steering_vector(dir, geom, lambda);
            let dot: Complex64 = b.iter().zip(h).map(|(bk, hk)| bk.conj() * hk).sum();
            dot.norm_sqr()
        })
        .collect()
}

/// `10 log10(|h|^2)` floored at -300 dB.
pub fn gain_db_plain(h: &[Complex64]) -> f64 {
    let power: f64 = h.iter().map(|v| v.norm_sqr()).sum();
    if power <= 0.0 {
        GAIN_FLOOR_DB
    } else {
        (10.0 * power.log10()).max(GAIN_FLOOR_DB)
    }
}

// ---------------------------------------------------------------------------
// plain projected-Gaussian evaluation
// ---------------------------------------------------------------------------

/// Value-side snapshot of one primitive as the renderer sees it.
#[derive(Debug, Clone)]
pub struct PlainGaussian {
    pub mu: Vec3,
    /// Regularized precision (inverse covariance), symmetric entries
    /// [xx, yy, zz, xy, xz, yz].
    pub w_sym: [f64; 6],
    pub alpha: f64,
    /// sigmoid(gamma_raw); the equivalent length is this times lambda.
    pub gamma_frac: f64,
}

/// Rotation matrix of a (normalized) quaternion (w, x, y, z).
pub fn rotation_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Regularized precision `R (S^2 + eps I)^-1 R^T` as symmetric entries.
/// Adding eps to the 3-D covariance diagonal matches adding it to every
/// projected 2-D covariance, because R is orthogonal.
pub fn precision_sym(q: [f64; 4], log_scale: Vec3) -> [f64; 6] {
    let r = rotation_matrix(q);
    let inv: Vec3 = [
        1.0 / ((2.0 * log_scale[0]).exp() + EPS_SIGMA),
        1.0 / ((2.0 * log_scale[1]).exp() + EPS_SIGMA),
        1.0 / ((2.0 * log_scale[2]).exp() + EPS_SIGMA),
    ];
    let w = |a: usize, b: usize| -> f64 {
        (0..3).map(|i| r[a][i] * r[b][i] * inv[i]).sum()
    };
    [w(0, 0), w(1, 1), w(2, 2), w(0, 1), w(0, 2), w(1, 2)]
}

fn quad_form(w: &[f64; 6], a: Vec3, b: Vec3) -> f64 {
    w[0] * a[0] * b[0]
        + w[1] * a[1] * b[1]
        + w[2] * a[2] * b[2]
        + w[3] * (a[0] * b[1] + a[1] * b[0])
        + w[4] * (a[0] * b[2] + a[2] * b[0])
        + w[5] * (a[1] * b[2] + a[2] * b[1])
}

/// Projected 2-D Gaussian along a ray, evaluated at the closest approach of
/// the ray to the center; zero when the closest-approach parameter falls
/// outside `(0, seg_len)`.
pub fn project_gaussian(origin: Vec3, dir: Vec3, seg_len: f64, g: &PlainGaussian) -> f64 {
    let v = vec3::sub(g.mu, origin);
    let t = vec3::dot(v, dir);
    if t <= 0.0 || t >= seg_len {
        return 0.0;
    }
    // minimum of the full quadratic along the line equals the projected
    // 2-D form evaluated at the perpendicular offset
    let a = quad_form(&g.w_sym, v, v);
    let c = quad_form(&g.w_sym, dir, v);
    let e = quad_form(&g.w_sym, dir, dir);
    let q = a - c * c / e;
    (-0.5 * q.max(0.0)).exp()
}

/// Complex transmittance along a segment: amplitude product of
/// `(1 - alpha G)` and accumulated equivalent-length phase.
pub fn transmittance_plain(
    a: Vec3,
    b: Vec3,
    gaussians: &[PlainGaussian],
    lambda: f64,
    exclude: Option<usize>,
) -> Complex64 {
    let seg = vec3::sub(b, a);
    let seg_len = vec3::norm(seg);
    assert!(seg_len > 0.0, "transmittance segment must have positive length");
    let dir = vec3::scale(seg, 1.0 / seg_len);
    let mut amp = 1.0;
    let mut phase_len = 0.0;
    for (k, g) in gaussians.iter().enumerate() {
        if Some(k) == exclude {
            continue;
        }
        let gk = project_gaussian(a, dir, seg_len, g);
        amp *= 1.0 - g.alpha * gk;
        phase_len += g.gamma_frac * lambda * gk;
    }
    Complex64::from_polar(amp, -2.0 * std::f64::consts::PI / lambda * phase_len)
}

/// Nearest-direction bin for each primitive as seen from the receiver; `None`
/// (with a warning) for a primitive sitting on the receiver.
pub fn assign_direction_bins(
    mus: &[Vec3],
    p_rx: Vec3,
    directions: &[Vec3],
) -> Vec<Option<usize>> {
    assert!(!directions.is_empty(), "need at least one direction");
    mus.iter()
        .map(|&mu| {
            let v = vec3::sub(mu, p_rx);
            let n = vec3::norm(v);
            if n < 1e-12 {
                log::warn!("primitive coincides with the receiver; skipped this sample");
                return None;
            }
            let u = vec3::scale(v, 1.0 / n);
            let mut best = 0;
            let mut best_dot = f64::NEG_INFINITY;
            for (p, &w) in directions.iter().enumerate() {
                let d = vec3::dot(u, w);
                if d > best_dot {
                    best_dot = d;
                    best = p;
                }
            }
            Some(best)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// tape path
// ---------------------------------------------------------------------------

/// Differentiable per-scene quantities shared by every segment of a sample.
pub struct SceneVars {
    /// Positions, M x 3.
    pub mu: Var,
    /// Opacities, M x 1.
    pub alpha: Var,
    /// sigmoid(gamma_raw), M x 1.
    pub gamma_frac: Var,
    /// Precision entries [xx, yy, zz, xy, xz, yz], M x 6.
    pub w_sym: Var,
}

impl SceneVars {
    pub fn gaussian_count(&self) -> usize {
        self.mu.shape().0
    }

    /// Value-side snapshot for binning, masks and the test reference.
    pub fn plain(&self) -> Vec<PlainGaussian> {
        let mu = self.mu.value();
        let alpha = self.alpha.value();
        let gamma = self.gamma_frac.value();
        let wsym = self.w_sym.value();
        (0..mu.rows)
            .map(|m| PlainGaussian {
                mu: [mu.get(m, 0), mu.get(m, 1), mu.get(m, 2)],
                w_sym: [
                    wsym.get(m, 0),
                    wsym.get(m, 1),
                    wsym.get(m, 2),
                    wsym.get(m, 3),
                    wsym.get(m, 4),
                    wsym.get(m, 5),
                ],
                alpha: alpha.get(m, 0),
                gamma_frac: gamma.get(m, 0),
            })
            .collect()
    }
}

/// Precision entries on tape from quaternions (M x 4) and log scales (M x 3).
pub fn precision_vars(quat: &Var, log_scale: &Var) -> Var {
    let qn = {
        let sq = quat.mul(quat).sum_axis1().sqrt();
        quat.div_col(&sq)
    };
    let w = qn.slice_cols(0, 1);
    let x = qn.slice_cols(1, 1);
    let y = qn.slice_cols(2, 1);
    let z = qn.slice_cols(3, 1);
    let two = 2.0;
    // rotation entries, each M x 1
    let yy = y.mul(&y);
    let zz = z.mul(&z);
    let xx = x.mul(&x);
    let xy = x.mul(&y);
    let xz = x.mul(&z);
    let yz = y.mul(&z);
    let wx = w.mul(&x);
    let wy = w.mul(&y);
    let wz = w.mul(&z);
    let r00 = yy.add(&zz).scale(-two).add_scalar(1.0);
    let r01 = xy.sub(&wz).scale(two);
    let r02 = xz.add(&wy).scale(two);
    let r10 = xy.add(&wz).scale(two);
    let r11 = xx.add(&zz).scale(-two).add_scalar(1.0);
    let r12 = yz.sub(&wx).scale(two);
    let r20 = xz.sub(&wy).scale(two);
    let r21 = yz.add(&wx).scale(two);
    let r22 = xx.add(&yy).scale(-two).add_scalar(1.0);

    let tape = quat.tape().clone();
    let ones = tape.constant(Tensor::full(quat.shape().0, 1, 1.0));
    let inv = |i: usize| -> Var {
        let ls = log_scale.slice_cols(i, 1);
        ones.div(&ls.scale(2.0).exp().add_scalar(EPS_SIGMA))
    };
    let (i0, i1, i2) = (inv(0), inv(1), inv(2));

    let rows: [[&Var; 3]; 3] = [[&r00, &r01, &r02], [&r10, &r11, &r12], [&r20, &r21, &r22]];
    let entry = |a: usize, b: usize| -> Var {
        let t0 = rows[a][0].mul(rows[b][0]).mul(&i0);
        let t1 = rows[a][1].mul(rows[b][1]).mul(&i1);
        let t2 = rows[a][2].mul(rows[b][2]).mul(&i2);
        t0.add(&t1).add(&t2)
    };
    let wxx = entry(0, 0);
    let wyy = entry(1, 1);
    let wzz = entry(2, 2);
    let wxy = entry(0, 1);
    let wxz = entry(0, 2);
    let wyz = entry(1, 2);
    concat_cols(&[&wxx, &wyy, &wzz, &wxy, &wxz, &wyz])
}

/// `W v` rows for every primitive: (M x 3).
fn precision_times(scene_w: &Var, v: &Var) -> Var {
    let wxx = scene_w.slice_cols(0, 1);
    let wyy = scene_w.slice_cols(1, 1);
    let wzz = scene_w.slice_cols(2, 1);
    let wxy = scene_w.slice_cols(3, 1);
    let wxz = scene_w.slice_cols(4, 1);
    let wyz = scene_w.slice_cols(5, 1);
    let vx = v.slice_cols(0, 1);
    let vy = v.slice_cols(1, 1);
    let vz = v.slice_cols(2, 1);
    let ox = wxx.mul(&vx).add(&wxy.mul(&vy)).add(&wxz.mul(&vz));
    let oy = wxy.mul(&vx).add(&wyy.mul(&vy)).add(&wyz.mul(&vz));
    let oz = wxz.mul(&vx).add(&wyz.mul(&vy)).add(&wzz.mul(&vz));
    concat_cols(&[&ox, &oy, &oz])
}

/// Symmetric outer-product features of unit rows `d`: [dx^2, dy^2, dz^2,
/// 2 dx dy, 2 dx dz, 2 dy dz] matching the precision layout.
fn direction_outer(d: &Var) -> Var {
    let dx = d.slice_cols(0, 1);
    let dy = d.slice_cols(1, 1);
    let dz = d.slice_cols(2, 1);
    let xx = dx.mul(&dx);
    let yy = dy.mul(&dy);
    let zz = dz.mul(&dz);
    let xy = dx.mul(&dy).scale(2.0);
    let xz = dx.mul(&dz).scale(2.0);
    let yz = dy.mul(&dz).scale(2.0);
    concat_cols(&[&xx, &yy, &zz, &xy, &xz, &yz])
}

/// Batched complex transmittance along segments from one shared endpoint to
/// per-row targets. The projected-Gaussian evaluation is symmetric in the
/// segment direction, so receiver-side segments reuse this with the receiver
/// as the shared endpoint. `exclude_diag` drops primitive `s` from segment
/// `s` (a primitive never occludes its own emission).
pub fn transmittance_batch(
    tape: &Tape,
    origin: Vec3,
    targets: &Var,
    scene: &SceneVars,
    lambda: f64,
    exclude_diag: bool,
) -> CVar {
    let s_count = targets.shape().0;
    let m_count = scene.gaussian_count();
    let neg_origin = tape.constant(Tensor::row(&[-origin[0], -origin[1], -origin[2]]));
    let td = targets.add_row(&neg_origin);
    let seg_len = td.mul(&td).sum_axis1().sqrt();
    let dirs = td.div_col(&seg_len);

    if m_count == 0 {
        let one = tape.constant(Tensor::full(s_count, 1, 1.0));
        let zero = tape.constant(Tensor::zeros(s_count, 1));
        return CVar::new(one, zero);
    }

    let v = scene.mu.add_row(&neg_origin);
    let wv = precision_times(&scene.w_sym, &v);
    let a = v.mul(&wv).sum_axis1(); // M x 1
    let c = dirs.matmul(&wv.transpose()); // S x M
    let e = direction_outer(&dirs).matmul(&scene.w_sym.transpose()); // S x M
    let q = c.mul(&c).div(&e).negate().add_row(&a.transpose());
    let g_raw = q.scale(-0.5).exp();

    // segment-interior mask from current values; locally constant so it
    // carries no gradient
    let t_vals = dirs.value().matmul(&v.value().transpose());
    let len_vals = seg_len.value();
    let mut mask = Tensor::zeros(s_count, m_count);
    for s in 0..s_count {
        for k in 0..m_count {
            if exclude_diag && s == k {
                continue;
            }
            let t = t_vals.get(s, k);
            if t > 0.0 && t < len_vals.get(s, 0) {
                mask.set(s, k, 1.0);
            }
        }
    }
    let g = g_raw.mul(&tape.constant(mask));

    let alpha_row = scene.alpha.transpose();
    let one_minus = g.mul_row(&alpha_row).negate().add_scalar(1.0);
    let amp = one_minus.prod_axis1();
    let gamma_row = scene.gamma_frac.transpose().scale(lambda);
    let phase_len = g.mul_row(&gamma_row).sum_axis1();
    let phase = phase_len.scale(2.0 * std::f64::consts::PI / lambda);
    let e_phase = CVar::from_neg_phase(&phase);
    e_phase.mul_real(&amp)
}

/// Constant complex matrix as a CVar pair.
pub fn complex_constant(tape: &Tape, rows: usize, cols: usize, values: &[Complex64]) -> CVar {
    assert_eq!(values.len(), rows * cols);
    let re: Vec<f64> = values.iter().map(|z| z.re).collect();
    let im: Vec<f64> = values.iter().map(|z| z.im).collect();
    CVar::new(
        tape.constant(Tensor::new(rows, cols, re)),
        tape.constant(Tensor::new(rows, cols, im)),
    )
}

/// LoS component: free-space amplitude and phase at the Tx-Rx distance,
/// steering toward the transmitter, scaled by the learned occlusion factor.
pub fn render_los(
    tape: &Tape,
    p_tx: Vec3,
    p_rx: Vec3,
    lambda: f64,
    scene: &SceneVars,
    geom: &ArrayGeometry,
) -> Result<CVar> {
    let d = vec3::dist(p_tx, p_rx);
    if d < 1e-12 {
        return Err(CkmError::Domain("coincident transmitter and receiver".into()));
    }
    let rx_target = tape.constant(Tensor::row(&p_rx));
    let theta_l = transmittance_batch(tape, p_tx, &rx_target, scene, lambda, false);
    let b_los = steering_vector(vec3::normalize(vec3::sub(p_tx, p_rx)), geom, lambda);
    let coef =
        Complex64::from_polar(lambda / (FOUR_PI * d), -2.0 * std::f64::consts::PI / lambda * d);
    let scaled: Vec<Complex64> = b_los.iter().map(|b| coef * b).collect();
    let b_const = complex_constant(tape, 1, geom.len(), &scaled);
    Ok(theta_l.matmul(&b_const))
}

/// Inputs consumed by [`render_order`] for one order of one sample.
pub struct OrderRenderInputs<'a> {
    /// Effective path length, M x 1.
    pub dist: &'a Var,
    /// Attenuation, M x 1.
    pub atten: &'a Var,
    /// Complex response, M x 1.
    pub signal: &'a CVar,
    /// Tx-side transmittance (order 1) or None for unity (order >= 2).
    pub theta_tx: Option<&'a CVar>,
    /// Rx-side transmittance, M x 1, excluding each primitive itself.
    pub theta_rx: &'a CVar,
    /// Distance primitive -> receiver, M x 1.
    pub d_rx: &'a Var,
    /// Direction bin per primitive (None = skipped).
    pub bins: &'a [Option<usize>],
    /// Steering vectors of the P sampled directions.
    pub bin_steering: &'a [Vec<Complex64>],
}

/// Per-order channel component: per-Gaussian directional contributions
/// accumulated into their direction bins and projected on the steering
/// vectors. Returns a 1 x N_a complex row.
pub fn render_order(
    tape: &Tape,
    inputs: &OrderRenderInputs,
    lambda: f64,
    n_antennas: usize,
) -> Result<CVar> {
    let m_count = inputs.dist.shape().0;
    if m_count == 0 {
        let zero = tape.constant(Tensor::zeros(1, n_antennas));
        return Ok(CVar::new(zero.clone(), zero));
    }
    {
        let d_hat = inputs.dist.value();
        let d_rx = inputs.d_rx.value();
        for m in 0..m_count {
            if d_hat.get(m, 0) <= 1e-12 || d_rx.get(m, 0) <= 1e-12 {
                return Err(CkmError::Domain(format!(
                    "degenerate path length for primitive {m}"
                )));
            }
        }
    }

    let amp_num = lambda / FOUR_PI.powf(1.5);
    let denom = inputs.dist.mul(inputs.d_rx);
    let amp = tape.constant(Tensor::full(m_count, 1, amp_num)).div(&denom);
    let phase = inputs.dist.add(inputs.d_rx).scale(2.0 * std::f64::consts::PI / lambda);
    let mut contrib = CVar::from_neg_phase(&phase).mul_real(&amp).mul_real(inputs.atten);
    contrib = contrib.mul(inputs.theta_rx).mul(inputs.signal);
    if let Some(tx) = inputs.theta_tx {
        contrib = contrib.mul(tx);
    }

    // per-bin accumulation via a constant assignment matrix of steering rows
    let mut assign = vec![Complex64::new(0.0, 0.0); m_count * n_antennas];
    for (m, bin) in inputs.bins.iter().enumerate() {
        if let Some(p) = bin {
            let b = &inputs.bin_steering[*p];
            for k in 0..n_antennas {
                assign[m * n_antennas + k] = b[k];
            }
        }
    }
    let b_assign = complex_constant(tape, m_count, n_antennas, &assign);
    Ok(contrib.transpose().matmul(&b_assign))
}

/// `|b^H h|^2` on the supervision grid; `b_grid` rows are grid steering
/// vectors. Returns a (V*Z) x 1 column of linear powers.
pub fn spectrum_on_tape(h: &CVar, b_grid: &CVar) -> Var {
    // b^H h = conj(B) h^T entry sums
    let ht = h.transpose();
    let re = &b_grid.re.matmul(&ht.re) + &b_grid.im.matmul(&ht.im);
    let im = &b_grid.re.matmul(&ht.im) - &b_grid.im.matmul(&ht.re);
    CVar::new(re, im).abs2()
}

/// Differentiable gain in dB with a tiny floor inside the log.
pub fn gain_db_on_tape(h: &CVar) -> Var {
    let power = h.abs2().sum();
    power.add_scalar(1e-30).ln().scale(10.0 / std::f64::consts::LN_10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sfg_matches_hand_values() {
        let d1 = sfg_directions(1);
        assert_eq!(d1.len(), 1);
        assert!((d1[0][0] - 0.75f64.sqrt()).abs() < 1e-12);
        assert!(d1[0][1].abs() < 1e-12);
        assert!((d1[0][2] - 0.5).abs() < 1e-15);

        let d8 = sfg_directions(8);
        assert!((d8[0][2] - 0.9375).abs() < 1e-15);
        let r = (1.0 - 0.9375f64 * 0.9375).sqrt();
        assert!((r - 0.34799).abs() < 1e-5);
        assert!((d8[0][0] - r).abs() < 1e-12, "phi_0 = 0 puts the direction on +x");
    }

    #[test]
    fn sfg_unit_norm_and_z_spacing() {
        for p in [1usize, 5, 16, 64] {
            let dirs = sfg_directions(p);
            for d in &dirs {
                assert!((vec3::norm(*d) - 1.0).abs() < 1e-12);
                assert!(d[2] > 0.0);
            }
            for w in dirs.windows(2) {
                assert!(((w[0][2] - w[1][2]) - 1.0 / p as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn steering_broadside_is_all_ones() {
        let lambda = wavelength(6e9);
        let geom = ArrayGeometry::planar(4, 4, lambda);
        let b = steering_vector([0.0, 0.0, 1.0], &geom, lambda);
        for v in &b {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        let norm2: f64 = b.iter().map(|v| v.norm_sqr()).sum();
        assert!((norm2 - 16.0).abs() < 1e-12);
    }

    #[test]
    fn steering_antipodal_in_plane_conjugates() {
        let lambda = wavelength(6e9);
        let geom = ArrayGeometry::planar(4, 4, lambda);
        let dir = vec3::normalize([0.3, -0.8, 0.0]);
        let b1 = steering_vector(dir, &geom, lambda);
        let b2 = steering_vector(vec3::scale(dir, -1.0), &geom, lambda);
        for (x, y) in b1.iter().zip(&b2) {
            assert!((x - y.conj()).norm() < 1e-12);
        }
    }

    fn iso_gaussian(mu: Vec3, sigma: f64) -> PlainGaussian {
        PlainGaussian {
            mu,
            w_sym: precision_sym([1.0, 0.0, 0.0, 0.0], [sigma.ln(); 3]),
            alpha: 0.5,
            gamma_frac: 0.5,
        }
    }

    #[test]
    fn projection_peaks_on_axis() {
        let g = iso_gaussian([0.0, 0.0, 1.0], 0.1);
        let v = project_gaussian([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 2.0, &g);
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn projection_zero_behind_origin_or_past_end() {
        let g = iso_gaussian([0.0, 0.0, -1.0], 0.1);
        assert_eq!(project_gaussian([0.0; 3], [0.0, 0.0, 1.0], 2.0, &g), 0.0);
        let g = iso_gaussian([0.0, 0.0, 3.0], 0.1);
        assert_eq!(project_gaussian([0.0; 3], [0.0, 0.0, 1.0], 2.0, &g), 0.0);
    }

    #[test]
    fn projection_at_one_sigma_miss() {
        let sigma = 0.1;
        let g = iso_gaussian([sigma, 0.0, 1.0], sigma);
        let v = project_gaussian([0.0; 3], [0.0, 0.0, 1.0], 2.0, &g);
        assert!((v - (-0.5f64).exp()).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn transmittance_empty_scene_is_unity() {
        let t = transmittance_plain([0.0; 3], [1.0, 0.0, 0.0], &[], 0.05, None);
        assert_eq!(t, Complex64::new(1.0, 0.0));
    }

    #[test]
    fn transmittance_full_blockage() {
        let mut g = iso_gaussian([0.5, 0.0, 0.0], 0.05);
        g.alpha = 1.0;
        g.gamma_frac = 0.0;
        let t = transmittance_plain([0.0; 3], [1.0, 0.0, 0.0], &[g], 0.05, None);
        assert!(t.norm() < 1e-9);
    }

    #[test]
    fn transmittance_half_opacity_half_gamma() {
        // alpha = 0.5, G = 1, sigmoid(gamma) = 0.5: amplitude 0.5, phase
        // -2pi/lambda * 0.5 lambda = -pi
        let mut g = iso_gaussian([0.5, 0.0, 0.0], 0.05);
        g.alpha = 0.5;
        g.gamma_frac = 0.5;
        let t = transmittance_plain([0.0; 3], [1.0, 0.0, 0.0], &[g], 0.05, None);
        let expect = 0.5 * Complex64::from_polar(1.0, -std::f64::consts::PI);
        assert!((t - expect).norm() < 1e-9, "got {t}");
    }

    #[test]
    fn bin_assignment_rules() {
        let dirs = sfg_directions(8);
        // directly along a grid direction
        let mu = [vec3::scale(dirs[3], 2.0)];
        let bins = assign_direction_bins(&mu, [0.0; 3], &dirs);
        assert_eq!(bins, vec![Some(3)]);
        // single direction: everything maps to bin 0
        let one = sfg_directions(1);
        let mus = [[1.0, 2.0, -0.5], [0.0, 0.1, 5.0]];
        let bins = assign_direction_bins(&mus, [0.0; 3], &one);
        assert_eq!(bins, vec![Some(0), Some(0)]);
        // coincident with Rx: skipped
        let bins = assign_direction_bins(&[[1.0, 1.0, 1.0]], [1.0, 1.0, 1.0], &dirs);
        assert_eq!(bins, vec![None]);
    }

    #[test]
    fn gain_examples() {
        let h = vec![Complex64::new(1.0, 0.0)];
        assert!((gain_db_plain(&h) - 0.0).abs() < 1e-12);
        let h = vec![Complex64::new(10.0, 0.0)];
        assert!((gain_db_plain(&h) - 20.0).abs() < 1e-12);
        assert_eq!(gain_db_plain(&[Complex64::new(0.0, 0.0)]), GAIN_FLOOR_DB);
    }

    #[test]
    fn spectrum_grid_covers_upper_hemisphere() {
        let dirs = spectrum_grid_directions(18, 36);
        assert_eq!(dirs.len(), 18 * 36);
        for d in dirs {
            assert!(d[2] > 0.0);
            assert!((vec3::norm(d) - 1.0).abs() < 1e-12);
        }
    }
}

#[cfg(test)]
mod precision_tests {
    use super::*;
    use ckm_autodiff::{grad_check, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn precision_vars_match_plain_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = 5;
        let quat: Vec<f64> = (0..m * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ls: Vec<f64> = (0..m * 3).map(|_| rng.gen_range(-1.5..0.5)).collect();
        let probe: Vec<f64> = (0..m * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // values agree with the plain construction
        {
            let tape = Tape::new();
            let q = tape.leaf(Tensor::new(m, 4, quat.clone()));
            let l = tape.leaf(Tensor::new(m, 3, ls.clone()));
            let w = precision_vars(&q, &l).value();
            for i in 0..m {
                let plain = precision_sym(
                    [quat[4 * i], quat[4 * i + 1], quat[4 * i + 2], quat[4 * i + 3]],
                    [ls[3 * i], ls[3 * i + 1], ls[3 * i + 2]],
                );
                for k in 0..6 {
                    assert!((w.get(i, k) - plain[k]).abs() < 1e-12);
                }
            }
        }

        // adjoints through both inputs
        let eval = |qv: &[f64], lv: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let tape = Tape::new();
            let q = tape.leaf(Tensor::new(m, 4, qv.to_vec()));
            let l = tape.leaf(Tensor::new(m, 3, lv.to_vec()));
            let w = precision_vars(&q, &l);
            let loss = w.mul(&tape.constant(Tensor::new(m, 6, probe.clone()))).sum();
            let v = loss.scalar();
            loss.backward().unwrap();
            (v, q.grad().data, l.grad().data)
        };
        let (_, gq, gl) = eval(&quat, &ls);
        let mut fq = |qv: &[f64]| eval(qv, &ls).0;
        let rq = grad_check(&mut fq, &quat, &gq, 1e-6, 200, 3);
        assert!(rq.passes(1e-7), "quat adjoint: {:.3e}", rq.max_rel_error);
        let mut fl = |lv: &[f64]| eval(&quat, lv).0;
        let rl = grad_check(&mut fl, &ls, &gl, 1e-6, 200, 4);
        assert!(rl.passes(1e-7), "log-scale adjoint: {:.3e}", rl.max_rel_error);
    }
}
