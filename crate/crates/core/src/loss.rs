//! Loss stack: dB-scale spectrum Huber, gain MAE, SSIM term and the two
//! physical regularizers (path-length causality, order-energy decay).

use ckm_autodiff::{concat_rows, Tape, Tensor, Var};

use crate::config::LossConfig;
use crate::error::{CkmError, Result};

/// Guard inside the dB conversion of linear spectra.
pub const EPS_DB: f64 = 1e-12;

/// `10 log10(x + eps)` elementwise.
pub fn to_db(linear: &Var) -> Var {
    linear.add_scalar(EPS_DB).ln().scale(10.0 / std::f64::consts::LN_10)
}

/// Mean Huber penalty between dB-converted spectra. `target_db` is a
/// constant of the same shape.
pub fn spectrum_huber(pred_linear: &Var, target_db: &Var, delta: f64) -> Result<Var> {
    if pred_linear.shape() != target_db.shape() {
        return Err(CkmError::Dimension(format!(
            "spectrum grids differ: {:?} vs {:?}",
            pred_linear.shape(),
            target_db.shape()
        )));
    }
    Ok(to_db(pred_linear).sub(target_db).huber(delta).mean())
}

/// Mean absolute gain error in dB over a batch (both sides N x 1).
pub fn gain_mae(pred_db: &Var, target_db: &Var) -> Var {
    pred_db.sub(target_db).abs().mean()
}

/// Plain-value MAE and NMAE (MAE divided by the mean absolute target gain).
pub fn mae_nmae(pred_db: &[f64], target_db: &[f64]) -> (f64, f64) {
    assert!(!pred_db.is_empty(), "metrics need at least one sample");
    assert_eq!(pred_db.len(), target_db.len());
    let mae = pred_db
        .iter()
        .zip(target_db)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred_db.len() as f64;
    let mean_abs = target_db.iter().map(|t| t.abs()).sum::<f64>() / target_db.len() as f64;
    (mae, mae / mean_abs)
}

/// Path-length causality: for each order n >= 2, penalize increments smaller
/// than the margin. `dists[n]` holds the order-(n+1) path lengths of every
/// (sample, Gaussian) pair stacked as a column.
pub fn causal_loss(tape: &Tape, dists: &[Var], delta_d: f64) -> Var {
    if dists.len() < 2 {
        return tape.constant_scalar(0.0);
    }
    let mut total = tape.constant_scalar(0.0);
    for pair in dists.windows(2) {
        let shortfall = pair[1].sub(&pair[0]).negate().add_scalar(delta_d).relu();
        total = total.add(&shortfall.mean());
    }
    total
}

/// Order-energy decay: penalize `e_n / (max(e_{n-1}, xi * ema_{n-1}) + eps)`
/// exceeding the allowed ratio. `energies[n]` is the scalar batch-mean
/// energy of order n+1; `ema` are running averages (values, not
/// differentiated).
pub fn decay_loss(
    tape: &Tape,
    energies: &[Var],
    ema: &[f64],
    cfg: &LossConfig,
) -> Var {
    let mut total = tape.constant_scalar(0.0);
    for n in 1..energies.len() {
        let floor = tape.constant_scalar(cfg.xi * ema[n - 1]);
        let denom = energies[n - 1].maximum(&floor).add_scalar(cfg.epsilon);
        let ratio = energies[n].div(&denom);
        total = total.add(&ratio.add_scalar(-cfg.rho_decay).relu());
    }
    total
}

/// Weighted total with a per-term value breakdown.
pub struct LossBreakdown {
    pub total: Var,
    pub huber: f64,
    pub mae: f64,
    pub ssim: f64,
    pub causal: f64,
    pub decay: f64,
}

pub struct LossTerms<'a> {
    pub huber: &'a Var,
    pub mae: &'a Var,
    pub ssim: &'a Var,
    pub causal: &'a Var,
    pub decay: &'a Var,
}

pub fn total_loss(terms: &LossTerms, cfg: &LossConfig) -> LossBreakdown {
    let ssim_loss = terms.ssim.negate().add_scalar(1.0);
    let total = terms
        .huber
        .scale(cfg.eta_spec)
        .add(&terms.mae.scale(cfg.eta_mae))
        .add(&ssim_loss.scale(cfg.eta_ssim))
        .add(&terms.causal.scale(cfg.lambda_causal))
        .add(&terms.decay.scale(cfg.lambda_decay));
    LossBreakdown {
        total,
        huber: terms.huber.scalar(),
        mae: terms.mae.scalar(),
        ssim: terms.ssim.scalar(),
        causal: terms.causal.scalar(),
        decay: terms.decay.scalar(),
    }
}

/// Stack per-sample columns into one long column.
pub fn stack_columns(vars: &[Var]) -> Var {
    let refs: Vec<&Var> = vars.iter().collect();
    concat_rows(&refs)
}

/// Column constant helper.
pub fn column(tape: &Tape, values: &[f64]) -> Var {
    tape.constant(Tensor::col(values))
}
