//! Bottom-up node feature aggregation and the shared two-stage tree
//! attention: local sibling attention inside each query block, then
//! ancestor-aware attention with depth-decayed logits and source-type gating.
//!
//! Context features for both stages come from the standing bottom-up
//! aggregation of the base features; the per-order recurrence only swaps the
//! query-side leaf features. Empty sibling leaves serve as keys/values but
//! never as queries.

use ckm_autodiff::{concat_cols, concat_rows, Tape, Tensor, Var};

use crate::octree::{ancestors, structural_descriptor, NodeKey, OctreeIndex};
use crate::params::BoundParams;

/// Relation of an expanded-context token to the query block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceType {
    Sibling = 0,
    Ancestor = 1,
    AncestorSibling = 2,
}

/// What a node-table row stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Occupied leaf hosting the Gaussian with this index.
    GaussLeaf(usize),
    /// Virtual empty leaf under an occupied parent.
    EmptyLeaf,
    /// Occupied internal node.
    Internal,
}

#[derive(Debug, Clone)]
pub struct ContextToken {
    pub row: usize,
    pub source: SourceType,
    pub depth_distance: f64,
}

/// One query block: the occupied leaves sharing a parent.
#[derive(Debug, Clone)]
pub struct QueryBlock {
    pub parent: NodeKey,
    /// Rows (= Gaussian indices) of the occupied leaf queries, octant order.
    pub leaf_rows: Vec<usize>,
    /// Rows of C(o) ∪ {o}: all 8 children plus the parent.
    pub local_ctx_rows: Vec<usize>,
    /// Expanded hierarchical context, depth-descending then Morton order.
    pub expanded: Vec<ContextToken>,
}

/// Topology-derived structure shared by every forward pass until the next
/// maintenance or unlock event.
pub struct NodeTable {
    /// Row order: Gaussian leaves (by index), then empty leaves, then
    /// internal nodes.
    pub keys: Vec<NodeKey>,
    pub kinds: Vec<NodeKind>,
    pub gauss_count: usize,
    pub empty_count: usize,
    pub internal_count: usize,
    pub blocks: Vec<QueryBlock>,
    /// Raw structural descriptors, one row per table row.
    pub raw_descriptors: Tensor,
    /// Internal features = agg_leaf * leaf_feats + agg_empty * empty_feats.
    agg_leaf: Tensor,
    agg_empty: Tensor,
    /// Maps leaf row order as emitted by the blocks back to Gaussian order.
    block_row_of_gaussian: Vec<usize>,
}

impl NodeTable {
    pub fn build(tree: &OctreeIndex, active_depth: u8) -> NodeTable {
        let gauss_count = tree.gaussian_count();
        let mut keys: Vec<NodeKey> = vec![NodeKey::ROOT; gauss_count];
        let mut kinds: Vec<NodeKind> = vec![NodeKind::Internal; gauss_count];
        for (key, gid) in tree.hosting_leaves() {
            keys[gid] = key;
            kinds[gid] = NodeKind::GaussLeaf(gid);
        }

        let internal_keys: Vec<NodeKey> =
            tree.occupied_nodes().filter(|&k| !tree.is_hosting_leaf(k)).collect();

        // virtual empty leaves: non-occupied children of occupied internals
        let mut empty_keys: Vec<NodeKey> = Vec::new();
        for &ik in &internal_keys {
            for oct in 0..8 {
                let child = ik.child(oct);
                if !tree.is_occupied(child) {
                    empty_keys.push(child);
                }
            }
        }
        empty_keys.sort();

        for &k in &empty_keys {
            keys.push(k);
            kinds.push(NodeKind::EmptyLeaf);
        }
        // internal nodes sorted deepest-first so child rows exist before parents
        let mut internal_sorted = internal_keys.clone();
        internal_sorted.sort_by(|a, b| b.depth.cmp(&a.depth).then(a.code.cmp(&b.code)));
        for &k in &internal_sorted {
            keys.push(k);
            kinds.push(NodeKind::Internal);
        }

        let mut row_index = std::collections::BTreeMap::new();
        for (row, &k) in keys.iter().enumerate() {
            // Gaussian rows win for hosting leaves; later duplicates impossible
            row_index.entry(k).or_insert(row);
        }
        let row_lookup = |key: NodeKey| -> usize { row_index[&key] };

        let empty_count = empty_keys.len();
        let internal_count = internal_sorted.len();
        let internal_offset = gauss_count + empty_count;

        // mean over occupied children; empty siblings do not enter the mean
        let mut agg_leaf = Tensor::zeros(internal_count, gauss_count);
        let mut agg_empty = Tensor::zeros(internal_count, empty_count);
        // rows of agg_* follow internal_sorted order (deepest first)
        for (irow, &ik) in internal_sorted.iter().enumerate() {
            let occupied_children: Vec<NodeKey> =
                (0..8).map(|o| ik.child(o)).filter(|&c| tree.is_occupied(c)).collect();
            let w = 1.0 / occupied_children.len() as f64;
            for child in occupied_children {
                let crow = row_lookup(child);
                if crow < gauss_count {
                    agg_leaf.data[irow * gauss_count + crow] += w;
                } else if crow < internal_offset {
                    unreachable!("occupied child indexed as empty leaf");
                } else {
                    // child is internal: fold its (already final) weights in
                    let csub = crow - internal_offset;
                    debug_assert!(csub < irow || internal_sorted[csub].depth > ik.depth);
                    for c in 0..gauss_count {
                        agg_leaf.data[irow * gauss_count + c] +=
                            w * agg_leaf.data[csub * gauss_count + c];
                    }
                    for c in 0..empty_count {
                        agg_empty.data[irow * empty_count + c] +=
                            w * agg_empty.data[csub * empty_count + c];
                    }
                }
            }
        }

        // query blocks: occupied leaves grouped by parent, octant order
        let mut by_parent: std::collections::BTreeMap<NodeKey, Vec<NodeKey>> =
            std::collections::BTreeMap::new();
        for (leaf, _) in tree.hosting_leaves() {
            if let Some(parent) = leaf.parent() {
                by_parent.entry(parent).or_default().push(leaf);
            }
        }
        let mut blocks = Vec::new();
        for (parent, mut leaves) in by_parent {
            leaves.sort_by_key(|k| k.code);
            let leaf_rows: Vec<usize> = leaves.iter().map(|&k| row_lookup(k)).collect();
            let mut local_ctx_rows: Vec<usize> =
                (0..8).map(|o| row_lookup(parent.child(o))).collect();
            local_ctx_rows.push(row_lookup(parent));
            let expanded = expanded_context(parent, tree, &row_lookup);
            blocks.push(QueryBlock { parent, leaf_rows, local_ctx_rows, expanded });
        }

        // permutation taking block-concatenated rows back to Gaussian order
        let mut block_row_of_gaussian = vec![0usize; gauss_count];
        let mut pos = 0usize;
        for b in &blocks {
            for &r in &b.leaf_rows {
                block_row_of_gaussian[r] = pos;
                pos += 1;
            }
        }
        debug_assert_eq!(pos, gauss_count, "every occupied leaf sits in exactly one block");

        // raw structural descriptors for every row
        let raw: Vec<Vec<f64>> =
            keys.iter().map(|&k| structural_descriptor(k, tree, active_depth)).collect();
        let raw_descriptors = Tensor::from_rows(&raw);

        NodeTable {
            keys,
            kinds,
            gauss_count,
            empty_count,
            internal_count,
            blocks,
            raw_descriptors,
            agg_leaf,
            agg_empty,
            block_row_of_gaussian,
        }
    }

    pub fn total_rows(&self) -> usize {
        self.gauss_count + self.empty_count + self.internal_count
    }

    /// Rows `[gauss_count, gauss_count + empty_count)` of the table.
    pub fn empty_rows(&self) -> std::ops::Range<usize> {
        self.gauss_count..self.gauss_count + self.empty_count
    }

    /// Bottom-up aggregation: stacks `[leaf_feats; empty_feats; internal]`
    /// where internal features are means over occupied children.
    pub fn aggregate(&self, tape: &Tape, leaf_feats: &Var, empty_feats: &Var) -> Var {
        assert_eq!(leaf_feats.shape().0, self.gauss_count, "leaf feature rows");
        assert_eq!(empty_feats.shape().0, self.empty_count, "empty feature rows");
        let agg_l = tape.constant(self.agg_leaf.clone());
        let internal = if self.empty_count > 0 {
            let agg_e = tape.constant(self.agg_empty.clone());
            &agg_l.matmul(leaf_feats) + &agg_e.matmul(empty_feats)
        } else {
            agg_l.matmul(leaf_feats)
        };
        concat_rows(&[leaf_feats, empty_feats, &internal])
    }
}

/// Expanded hierarchical context of a block parent `o`: siblings of `o`,
/// ancestors, and ancestor siblings, all with depth distance measured from
/// the query leaves. Empty for a root-parent block.
fn expanded_context(
    o: NodeKey,
    _tree: &OctreeIndex,
    row_lookup: &dyn Fn(NodeKey) -> usize,
) -> Vec<ContextToken> {
    let leaf_depth = o.depth as f64 + 1.0;
    let mut tokens: Vec<(NodeKey, SourceType)> = Vec::new();
    if let Some(parent) = o.parent() {
        for oct in 0..8 {
            let sib = parent.child(oct);
            if sib != o {
                tokens.push((sib, SourceType::Sibling));
            }
        }
    }
    for anc in ancestors(o) {
        tokens.push((anc, SourceType::Ancestor));
        if let Some(ap) = anc.parent() {
            for oct in 0..8 {
                let asib = ap.child(oct);
                if asib != anc {
                    tokens.push((asib, SourceType::AncestorSibling));
                }
            }
        }
    }
    tokens.sort_by(|a, b| b.0.depth.cmp(&a.0.depth).then(a.0.code.cmp(&b.0.code)));
    tokens
        .into_iter()
        .map(|(key, source)| ContextToken {
            row: row_lookup(key),
            source,
            depth_distance: leaf_depth - key.depth as f64,
        })
        .collect()
}

/// Handles to the shared attention parameters bound on the current tape.
pub struct AttentionVars<'a> {
    pub local: StageVars<'a>,
    pub expanded: StageVars<'a>,
    pub beta_raw: &'a Var,
    pub gates_raw: &'a Var,
    pub heads: usize,
}

pub struct StageVars<'a> {
    pub wq: &'a Var,
    pub wk: &'a Var,
    pub wv: &'a Var,
    pub wo: &'a Var,
}

impl<'a> AttentionVars<'a> {
    pub fn from_bound(bound: &'a BoundParams, heads: usize) -> Self {
        Self {
            local: StageVars {
                wq: bound.get("attn.local.wq"),
                wk: bound.get("attn.local.wk"),
                wv: bound.get("attn.local.wv"),
                wo: bound.get("attn.local.wo"),
            },
            expanded: StageVars {
                wq: bound.get("attn.exp.wq"),
                wk: bound.get("attn.exp.wk"),
                wv: bound.get("attn.exp.wv"),
                wo: bound.get("attn.exp.wo"),
            },
            beta_raw: bound.get("attn.beta_raw"),
            gates_raw: bound.get("attn.gates_raw"),
            heads,
        }
    }
}

/// Multi-head scaled dot-product attention. `logit_bias` (1 x T) is added to
/// every query's scores; `value_gate` (T x 1) pre-scales values per token.
/// Returns the raw attention output (before the output projection).
fn multi_head(
    queries: &Var,
    context: &Var,
    stage: &StageVars,
    heads: usize,
    logit_bias: Option<&Var>,
    value_gate: Option<&Var>,
) -> Var {
    let (_, d) = queries.shape();
    assert_eq!(stage.wq.shape(), (d, d), "projection dimensions must match features");
    assert_eq!(d % heads, 0, "feature dim must split across heads");
    let dh = d / heads;
    let q = queries.matmul(stage.wq);
    let k = context.matmul(stage.wk);
    let mut v = context.matmul(stage.wv);
    if let Some(gate) = value_gate {
        v = v.mul_col(gate);
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let mut scores = qh.matmul(&kh.transpose()).scale(scale);
        if let Some(bias) = logit_bias {
            scores = scores.add_row(bias);
        }
        let weights = scores.softmax_rows();
        head_outs.push(weights.matmul(&vh));
    }
    let refs: Vec<&Var> = head_outs.iter().collect();
    concat_cols(&refs)
}

/// Row-wise layer normalization (no affine part).
pub fn layer_norm_rows(x: &Var) -> Var {
    let (_, d) = x.shape();
    let inv_d = 1.0 / d as f64;
    let mu = x.sum_axis1().scale(inv_d);
    let centered = x.sub_col(&mu);
    let var = centered.mul(&centered).sum_axis1().scale(inv_d);
    centered.div_col(&var.add_scalar(1e-8).sqrt())
}

/// Local sibling attention: queries are the block's occupied leaves,
/// keys/values are the eight siblings plus the parent. Residual with a
/// normalized update.
pub fn local_attention(queries: &Var, context: &Var, attn: &AttentionVars) -> Var {
    let raw = multi_head(queries, context, &attn.local, attn.heads, None, None);
    let update = layer_norm_rows(&raw.matmul(attn.local.wo));
    queries.add(&update)
}

/// Ancestor-aware attention over the expanded context: logits carry the
/// additive depth-decay bias `-beta * d`, values are pre-scaled by the
/// source-type gates. Empty context is an identity update.
pub fn ancestor_attention(
    queries: &Var,
    context: &Var,
    tokens: &[ContextToken],
    attn: &AttentionVars,
) -> Var {
    if tokens.is_empty() {
        return queries.clone();
    }
    let tape = queries.tape().clone();
    let beta = attn.beta_raw.softplus();
    let d_row = tape.constant(Tensor::row(
        &tokens.iter().map(|t| t.depth_distance).collect::<Vec<_>>(),
    ));
    let bias = beta.matmul(&d_row).negate();
    let gates = attn.gates_raw.sigmoid();
    let gate_idx: Vec<usize> = tokens.iter().map(|t| t.source as usize).collect();
    let gate_col = gates.select_rows(&gate_idx);
    let raw = multi_head(queries, context, &attn.expanded, attn.heads, Some(&bias), Some(&gate_col));
    let update = layer_norm_rows(&raw.matmul(attn.expanded.wo));
    queries.add(&update)
}

/// Two-stage shared tree attention over every query block. `leaf_input`
/// (M x D_f, Gaussian order) provides the queries; `all_feats` holds the
/// standing aggregated context features for every table row.
pub fn tree_attention(
    table: &NodeTable,
    leaf_input: &Var,
    all_feats: &Var,
    attn: &AttentionVars,
) -> Var {
    assert_eq!(leaf_input.shape().0, table.gauss_count);
    if table.gauss_count == 0 {
        return leaf_input.clone();
    }
    let mut block_outputs = Vec::with_capacity(table.blocks.len());
    for block in &table.blocks {
        let q_in = leaf_input.select_rows(&block.leaf_rows);
        let local_ctx = all_feats.select_rows(&block.local_ctx_rows);
        let x_loc = local_attention(&q_in, &local_ctx, attn);
        let out = if block.expanded.is_empty() {
            x_loc
        } else {
            let rows: Vec<usize> = block.expanded.iter().map(|t| t.row).collect();
            let exp_ctx = all_feats.select_rows(&rows);
            ancestor_attention(&x_loc, &exp_ctx, &block.expanded, attn)
        };
        block_outputs.push(out);
    }
    let refs: Vec<&Var> = block_outputs.iter().collect();
    let stacked = concat_rows(&refs);
    stacked.select_rows(&table.block_row_of_gaussian)
}
