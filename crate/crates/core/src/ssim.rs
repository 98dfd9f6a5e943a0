//! Structural similarity on spectrum images. Local statistics come from a
//! separable 11x11 Gaussian window (sigma 1.5), truncated and renormalized
//! per axis at the borders; images smaller than the window fall back to a
//! uniform window of size `min(dim, 11)`. Inputs are expected in [0, 1]
//! (dynamic range 1).

use ckm_autodiff::{Tape, Tensor, Var};

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// dB clip range mapped onto [0, 1] for SSIM and its loss term.
pub const DB_CLIP_MIN: f64 = -150.0;
pub const DB_CLIP_MAX: f64 = 0.0;

/// Separable blur operators: `blur(X) = rows * X * cols^T`.
#[derive(Debug, Clone)]
pub struct SsimKernel {
    pub rows: Tensor,
    pub cols: Tensor,
}

fn axis_kernel(dim: usize, uniform: bool) -> Tensor {
    let taps = SSIM_WINDOW.min(dim);
    let radius = (taps - 1) / 2;
    let weights: Vec<f64> = if uniform {
        vec![1.0; taps]
    } else {
        (0..taps)
            .map(|k| {
                let d = k as f64 - radius as f64;
                (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
            })
            .collect()
    };
    let mut m = Tensor::zeros(dim, dim);
    for i in 0..dim {
        let mut row_sum = 0.0;
        for (k, &w) in weights.iter().enumerate() {
            let j = i as isize + k as isize - radius as isize;
            if j >= 0 && (j as usize) < dim {
                row_sum += w;
            }
        }
        for (k, &w) in weights.iter().enumerate() {
            let j = i as isize + k as isize - radius as isize;
            if j >= 0 && (j as usize) < dim {
                m.set(i, j as usize, w / row_sum);
            }
        }
    }
    m
}

impl SsimKernel {
    pub fn new(v: usize, z: usize) -> Self {
        let uniform = v < SSIM_WINDOW || z < SSIM_WINDOW;
        Self { rows: axis_kernel(v, uniform), cols: axis_kernel(z, uniform) }
    }
}

fn blur(tape: &Tape, x: &Var, kernel: &SsimKernel) -> Var {
    let r = tape.constant(kernel.rows.clone());
    let c_t = tape.constant(kernel.cols.transpose());
    r.matmul(x).matmul(&c_t)
}

/// Mean local SSIM between two images in [0, 1]; -1 <= result <= 1.
pub fn ssim_on_tape(tape: &Tape, x: &Var, y: &Var, kernel: &SsimKernel) -> Var {
    assert_eq!(x.shape(), y.shape(), "SSIM inputs must share dimensions");
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let mu_x = blur(tape, x, kernel);
    let mu_y = blur(tape, y, kernel);
    let mu_xx = mu_x.mul(&mu_x);
    let mu_yy = mu_y.mul(&mu_y);
    let mu_xy = mu_x.mul(&mu_y);
    let sigma_xx = blur(tape, &x.mul(x), kernel).sub(&mu_xx);
    let sigma_yy = blur(tape, &y.mul(y), kernel).sub(&mu_yy);
    let sigma_xy = blur(tape, &x.mul(y), kernel).sub(&mu_xy);
    let num = mu_xy.scale(2.0).add_scalar(c1).mul(&sigma_xy.scale(2.0).add_scalar(c2));
    let den = mu_xx.add(&mu_yy).add_scalar(c1).mul(&sigma_xx.add(&sigma_yy).add_scalar(c2));
    num.div(&den).mean()
}

/// Convenience over plain buffers; runs the tape path on constants.
pub fn ssim_plain(x: &[f64], y: &[f64], v: usize, z: usize) -> f64 {
    let tape = Tape::new();
    let xv = tape.constant(Tensor::new(v, z, x.to_vec()));
    let yv = tape.constant(Tensor::new(v, z, y.to_vec()));
    let kernel = SsimKernel::new(v, z);
    ssim_on_tape(&tape, &xv, &yv, &kernel).scalar()
}

/// Clip a dB image into [0, 1] over the fixed [-150, 0] range.
pub fn db_to_unit(db: &Var) -> Var {
    db.add_scalar(-DB_CLIP_MIN).scale(1.0 / (DB_CLIP_MAX - DB_CLIP_MIN)).clamp(&[0.0], &[1.0])
}

/// Plain-value version of [`db_to_unit`].
pub fn db_to_unit_plain(db: f64) -> f64 {
    ((db - DB_CLIP_MIN) / (DB_CLIP_MAX - DB_CLIP_MIN)).clamp(0.0, 1.0)
}
