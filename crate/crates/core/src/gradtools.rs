//! Flatten/restore named parameter classes of a [`TrainState`] so the
//! finite-difference harness can sweep them one class at a time.

use std::collections::BTreeMap;

use crate::state::TrainState;

/// A checkable parameter class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamClass {
    Offsets,
    Quats,
    LogScales,
    Opacity,
    Gamma,
    Features,
    /// Every trainable global block whose name starts with the prefix.
    Global(String),
}

/// The classes covered by a full-gradient sweep.
pub fn all_classes() -> Vec<(&'static str, ParamClass)> {
    vec![
        ("offsets", ParamClass::Offsets),
        ("quaternions", ParamClass::Quats),
        ("log_scales", ParamClass::LogScales),
        ("opacity", ParamClass::Opacity),
        ("gamma", ParamClass::Gamma),
        ("features", ParamClass::Features),
        ("struct_proj", ParamClass::Global("struct.".into())),
        ("attention", ParamClass::Global("attn.".into())),
        ("geometry_head", ParamClass::Global("geo.".into())),
        ("signal_heads", ParamClass::Global("sig".into())),
    ]
}

pub fn get_class(state: &TrainState, class: &ParamClass) -> Vec<f64> {
    match class {
        ParamClass::Offsets => state.gaussians.iter().flat_map(|g| g.offset).collect(),
        ParamClass::Quats => state.gaussians.iter().flat_map(|g| g.rotation).collect(),
        ParamClass::LogScales => state.gaussians.iter().flat_map(|g| g.log_scale).collect(),
        ParamClass::Opacity => state.gaussians.iter().map(|g| g.opacity_raw).collect(),
        ParamClass::Gamma => state.gaussians.iter().map(|g| g.gamma_raw).collect(),
        ParamClass::Features => {
            state.gaussians.iter().flat_map(|g| g.feature.iter().copied()).collect()
        }
        ParamClass::Global(prefix) => state
            .globals
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix.as_str()))
            .flat_map(|e| e.data.iter().copied())
            .collect(),
    }
}

pub fn set_class(state: &mut TrainState, class: &ParamClass, values: &[f64]) {
    match class {
        ParamClass::Offsets => {
            for (g, chunk) in state.gaussians.iter_mut().zip(values.chunks(3)) {
                g.offset.copy_from_slice(chunk);
            }
        }
        ParamClass::Quats => {
            for (g, chunk) in state.gaussians.iter_mut().zip(values.chunks(4)) {
                g.rotation.copy_from_slice(chunk);
            }
        }
        ParamClass::LogScales => {
            for (g, chunk) in state.gaussians.iter_mut().zip(values.chunks(3)) {
                g.log_scale.copy_from_slice(chunk);
            }
        }
        ParamClass::Opacity => {
            for (g, &v) in state.gaussians.iter_mut().zip(values) {
                g.opacity_raw = v;
            }
        }
        ParamClass::Gamma => {
            for (g, &v) in state.gaussians.iter_mut().zip(values) {
                g.gamma_raw = v;
            }
        }
        ParamClass::Features => {
            let d = state.config.model.feature_dim;
            for (g, chunk) in state.gaussians.iter_mut().zip(values.chunks(d)) {
                g.feature.copy_from_slice(chunk);
            }
        }
        ParamClass::Global(prefix) => {
            let mut offset = 0;
            for e in state.globals.iter_mut() {
                if e.trainable && e.name.starts_with(prefix.as_str()) {
                    let n = e.data.len();
                    e.data.copy_from_slice(&values[offset..offset + n]);
                    offset += n;
                }
            }
            assert_eq!(offset, values.len(), "class size changed between get and set");
        }
    }
}

/// Analytic gradients for a class, matching the layout of [`get_class`].
/// `gaussian_grads` rows follow `GaussianPrimitive::flatten`; `global_grads`
/// is keyed by block name.
pub fn class_gradient(
    state: &TrainState,
    class: &ParamClass,
    gaussian_grads: &[Vec<f64>],
    global_grads: &BTreeMap<String, Vec<f64>>,
) -> Vec<f64> {
    let d = state.config.model.feature_dim;
    let slice_per_gaussian = |lo: usize, hi: usize| -> Vec<f64> {
        gaussian_grads.iter().flat_map(|row| row[lo..hi].to_vec()).collect()
    };
    match class {
        ParamClass::Offsets => slice_per_gaussian(0, 3),
        ParamClass::Quats => slice_per_gaussian(3, 7),
        ParamClass::LogScales => slice_per_gaussian(7, 10),
        ParamClass::Opacity => slice_per_gaussian(10, 11),
        ParamClass::Gamma => slice_per_gaussian(11, 12),
        ParamClass::Features => slice_per_gaussian(12, 12 + d),
        ParamClass::Global(prefix) => state
            .globals
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix.as_str()))
            .flat_map(|e| global_grads[&e.name].iter().copied())
            .collect(),
    }
}
