//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of one gradient check sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error < tol
    }
}

/// Compare `analytic` against central differences of `f` at `theta`.
///
/// Checks at most `max_coords` coordinates (deterministically subsampled with
/// `seed`); relative error uses `max(|analytic|, |numeric|, 1e-8)` as the
/// denominator.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    step: f64,
    max_coords: usize,
    seed: u64,
) -> GradCheckReport {
    assert_eq!(theta.len(), analytic.len(), "parameter/gradient length mismatch");
    let n = theta.len();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, n, max_coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut work = theta.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut worst_coord = 0;
    let mut worst_analytic = 0.0;
    let mut worst_numeric = 0.0;
    let mut non_finite = false;
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + step;
        let fp = f(&work);
        work[i] = orig - step;
        let fm = f(&work);
        work[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            non_finite = true;
            worst_coord = i;
            break;
        }
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_coord = i;
            worst_analytic = analytic[i];
            worst_numeric = numeric;
        }
    }

    GradCheckReport {
        max_rel_error,
        worst_coord,
        worst_analytic,
        worst_numeric,
        checked: coords.len(),
        non_finite,
    }
}
