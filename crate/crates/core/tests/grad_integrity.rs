//! Full-loss analytic gradients against central finite differences for every
//! parameter class on a small mixed-depth scene.

mod common;

use ckm_autodiff::{grad_check, Tape};
use ckm_core::attention::NodeTable;
use ckm_core::config::RunConfig;
use ckm_core::forward::{build_loss, SamplePrep};
use ckm_core::gradtools::{all_classes, class_gradient, get_class, set_class};
use ckm_core::oracle::generate_dataset;
use ckm_core::ssim::SsimKernel;
use ckm_core::state::TrainState;
use common::{perturbed_copy, randomized_state, self_target};

fn gradcheck_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 1234;
    cfg.dataset.train_samples = 2;
    cfg.dataset.test_samples = 1;
    cfg.model.directions = 16;
    cfg.model.max_depth = 3;
    // make the regularizers active on a random scene
    cfg.loss.delta_d = 1.5;
    cfg.loss.rho_decay = 0.01;
    cfg
}

fn loss_value(
    state: &TrainState,
    table: &NodeTable,
    preps: &[&SamplePrep],
    kernel: &SsimKernel,
) -> f64 {
    let tape = Tape::new();
    build_loss(&tape, state, table, preps, kernel).unwrap().loss.scalar()
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let cfg = gradcheck_config();
    let data = generate_dataset(&cfg).unwrap();
    let state = randomized_state(&cfg);
    assert!(state.gaussians.len() <= 32);
    let table = NodeTable::build(&state.tree, state.active_depth);
    let kernel = SsimKernel::new(cfg.grid.elevation_bins, cfg.grid.azimuth_bins);

    // near-miss supervision from a perturbed teacher keeps the loss O(1)
    let teacher = perturbed_copy(&state, 0.02, 555);
    let preps: Vec<SamplePrep> = data
        .train_samples()
        .map(|s| self_target(&teacher, &table, s.p_tx, s.p_rx, s.freq_hz))
        .collect();
    let prep_refs: Vec<_> = preps.iter().collect();

    // all five terms active on this scene
    let tape = Tape::new();
    let art = build_loss(&tape, &state, &table, &prep_refs, &kernel).unwrap();
    assert!(art.huber > 0.0 && art.mae > 0.0 && art.ssim < 1.0);
    assert!(art.causal > 0.0, "causal term inactive: {}", art.causal);
    assert!(art.decay > 0.0, "decay term inactive: {}", art.decay);
    art.loss.backward().unwrap();
    let ggrads = art.leaves.collect_grads(state.gaussians.len());
    let globals = art.bound.collect_grads(&state.globals);

    for (name, class) in all_classes() {
        let theta = get_class(&state, &class);
        let analytic = class_gradient(&state, &class, &ggrads, &globals);
        assert_eq!(theta.len(), analytic.len(), "{name} layout");
        let mut f = |vals: &[f64]| {
            let mut s = randomized_state(&cfg);
            set_class(&mut s, &class, vals);
            loss_value(&s, &table, &prep_refs, &kernel)
        };
        let report = grad_check(&mut f, &theta, &analytic, 1e-5, 24, 99);
        assert!(
            report.passes(1e-4),
            "{name}: max rel err {:.3e} at {} (analytic {:.6e} vs numeric {:.6e})",
            report.max_rel_error,
            report.worst_coord,
            report.worst_analytic,
            report.worst_numeric
        );
        println!("gradcheck {name}: {:.3e} over {} coords", report.max_rel_error, report.checked);
    }
}
