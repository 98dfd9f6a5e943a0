//! Named global parameter blocks with Adam moments, and their binding onto a
//! tape at the start of each forward pass.

use std::collections::BTreeMap;

use ckm_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub trainable: bool,
}

/// Ordered collection of named parameter blocks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>, trainable: bool) {
        assert_eq!(data.len(), rows * cols, "param {name} shape mismatch");
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        let n = data.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            data,
            m: vec![0.0; n],
            v: vec![0.0; n],
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> &ParamEntry {
        let idx = *self.index.get(name).unwrap_or_else(|| panic!("unknown param {name}"));
        &self.entries[idx]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamEntry {
        let idx = *self.index.get(name).unwrap_or_else(|| panic!("unknown param {name}"));
        &mut self.entries[idx]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }

    /// Bind every block as a tape node; trainable blocks become leaves.
    pub fn bind_all(&self, tape: &Tape) -> BoundParams {
        let mut vars = BTreeMap::new();
        for e in &self.entries {
            let t = Tensor::new(e.rows, e.cols, e.data.clone());
            let var = if e.trainable { tape.leaf(t) } else { tape.constant(t) };
            vars.insert(e.name.clone(), var);
        }
        BoundParams { vars }
    }
}

/// Tape handles for every bound block of one forward pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> &Var {
        self.vars.get(name).unwrap_or_else(|| panic!("unbound param {name}"))
    }

    /// Gradients for trainable blocks after `backward`, keyed by name.
    pub fn collect_grads(&self, store: &ParamStore) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for e in store.iter() {
            if e.trainable {
                out.insert(e.name.clone(), self.vars[&e.name].grad().data);
            }
        }
        out
    }
}

/// Uniform init in [-scale, scale].
pub fn init_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Xavier-style scale for a rows x cols projection.
pub fn xavier_scale(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bind_and_grad_roundtrip() {
        let mut store = ParamStore::new();
        store.insert("w", 1, 3, vec![1.0, 2.0, 3.0], true);
        store.insert("frozen", 1, 3, vec![5.0, 5.0, 5.0], false);
        let tape = Tape::new();
        let bound = store.bind_all(&tape);
        let loss = bound.get("w").mul(bound.get("frozen")).sum();
        loss.backward().unwrap();
        let grads = bound.collect_grads(&store);
        assert_eq!(grads["w"], vec![5.0, 5.0, 5.0]);
        assert!(!grads.contains_key("frozen"));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(init_matrix(4, 4, 0.1, &mut a), init_matrix(4, 4, 0.1, &mut b));
    }
}
