//! Sparse full octree over the scene cube: Morton keys, cell geometry,
//! anchor-offset Gaussian placement, structural descriptors and the
//! maintenance edits applied between optimizer steps.
//!
//! Morton convention: within an octant the x bit is least significant, then
//! y, then z; the most significant 3-bit group of a code is the level-0
//! octant. Only occupied keys are materialized; empty leaves are virtual.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ScheduleConfig;
use crate::error::{CkmError, Result};
use crate::vec3::{self, Vec3};

/// Octree node address: depth plus Morton code below `8^depth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeKey {
    pub depth: u8,
    pub code: u64,
}

impl NodeKey {
    pub const ROOT: NodeKey = NodeKey { depth: 0, code: 0 };

    pub fn parent(&self) -> Option<NodeKey> {
        if self.depth == 0 {
            None
        } else {
            Some(NodeKey { depth: self.depth - 1, code: self.code >> 3 })
        }
    }

    pub fn child(&self, octant: u8) -> NodeKey {
        debug_assert!(octant < 8);
        NodeKey { depth: self.depth + 1, code: (self.code << 3) | octant as u64 }
    }

    /// Octant index under the parent (0 for the root).
    pub fn last_octant(&self) -> u8 {
        if self.depth == 0 {
            0
        } else {
            (self.code & 7) as u8
        }
    }
}

/// Interleave cell integers into a Morton code, most significant level first.
pub fn morton_encode(ix: u64, iy: u64, iz: u64, depth: u8) -> Result<u64> {
    let limit = 1u64 << depth;
    if ix >= limit || iy >= limit || iz >= limit {
        return Err(CkmError::Range(format!(
            "cell ({ix},{iy},{iz}) out of range for depth {depth}"
        )));
    }
    let mut code = 0u64;
    for level in 0..depth {
        let shift = depth - 1 - level;
        let octant =
            ((ix >> shift) & 1) | (((iy >> shift) & 1) << 1) | (((iz >> shift) & 1) << 2);
        code = (code << 3) | octant;
    }
    Ok(code)
}

/// Inverse of [`morton_encode`].
pub fn morton_decode(code: u64, depth: u8) -> Result<(u64, u64, u64)> {
    if depth < 21 && code >= 1u64 << (3 * depth) {
        return Err(CkmError::Range(format!("code {code} out of range for depth {depth}")));
    }
    let (mut ix, mut iy, mut iz) = (0u64, 0u64, 0u64);
    for level in 0..depth {
        let shift = 3 * (depth - 1 - level);
        let octant = (code >> shift) & 7;
        ix = (ix << 1) | (octant & 1);
        iy = (iy << 1) | ((octant >> 1) & 1);
        iz = (iz << 1) | ((octant >> 2) & 1);
    }
    Ok((ix, iy, iz))
}

/// Axis-aligned scene cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubeBounds {
    pub min: Vec3,
    pub edge: f64,
}

impl CubeBounds {
    /// Smallest cube anchored at the origin-corner of a box.
    pub fn enclosing_box(extents: Vec3) -> Self {
        let edge = extents[0].max(extents[1]).max(extents[2]);
        Self { min: [0.0, 0.0, 0.0], edge }
    }
}

/// Cell center and edge length for a node.
pub fn cell_geometry(key: NodeKey, bounds: &CubeBounds) -> (Vec3, f64) {
    let (ix, iy, iz) = morton_decode(key.code, key.depth).expect("valid key");
    let edge = bounds.edge / (1u64 << key.depth) as f64;
    let center = [
        bounds.min[0] + (ix as f64 + 0.5) * edge,
        bounds.min[1] + (iy as f64 + 0.5) * edge,
        bounds.min[2] + (iz as f64 + 0.5) * edge,
    ];
    (center, edge)
}

/// Root-ward prefix keys; element 0 is the parent, the last is the root.
pub fn ancestors(key: NodeKey) -> Vec<NodeKey> {
    let mut out = Vec::with_capacity(key.depth as usize);
    let mut k = key;
    while let Some(p) = k.parent() {
        out.push(p);
        k = p;
    }
    out
}

/// One anisotropic scatterer anchored to an octree leaf.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub anchor: NodeKey,
    /// In-cell offset in meters; clamped to the cell in the forward pass.
    pub offset: Vec3,
    /// Quaternion (w, x, y, z); renormalized after every optimizer step.
    pub rotation: [f64; 4],
    pub log_scale: Vec3,
    pub opacity_raw: f64,
    pub gamma_raw: f64,
    pub feature: Vec<f64>,
    /// Adam first/second moments over the flattened parameter block.
    pub moment_m: Vec<f64>,
    pub moment_v: Vec<f64>,
    /// Positional-gradient norm accumulated since the last maintenance pass.
    pub grad_accum: f64,
}

/// Fixed parameters before the feature block: offset(3) quat(4) log_scale(3)
/// opacity(1) gamma(1).
pub const GAUSSIAN_FIXED_PARAMS: usize = 12;

impl GaussianPrimitive {
    pub fn new(anchor: NodeKey, feature_dim: usize) -> Self {
        let n = GAUSSIAN_FIXED_PARAMS + feature_dim;
        Self {
            anchor,
            offset: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [0.0; 3],
            opacity_raw: 0.0,
            gamma_raw: 0.0,
            feature: vec![0.0; feature_dim],
            moment_m: vec![0.0; n],
            moment_v: vec![0.0; n],
            grad_accum: 0.0,
        }
    }

    pub fn param_count(&self) -> usize {
        GAUSSIAN_FIXED_PARAMS + self.feature.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.offset);
        out.extend_from_slice(&self.rotation);
        out.extend_from_slice(&self.log_scale);
        out.push(self.opacity_raw);
        out.push(self.gamma_raw);
        out.extend_from_slice(&self.feature);
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        self.offset.copy_from_slice(&flat[0..3]);
        self.rotation.copy_from_slice(&flat[3..7]);
        self.log_scale.copy_from_slice(&flat[7..10]);
        self.opacity_raw = flat[10];
        self.gamma_raw = flat[11];
        self.feature.copy_from_slice(&flat[12..]);
    }

    pub fn opacity(&self) -> f64 {
        1.0 / (1.0 + (-self.opacity_raw).exp())
    }

    pub fn renormalize_rotation(&mut self) {
        let q = &mut self.rotation;
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n > 0.0 {
            for v in q.iter_mut() {
                *v /= n;
            }
        } else {
            *q = [1.0, 0.0, 0.0, 0.0];
        }
    }
}

/// Anchor-offset position with the offset clamped to the closed cell cube.
pub fn gaussian_position(g: &GaussianPrimitive, bounds: &CubeBounds) -> Vec3 {
    let (center, edge) = cell_geometry(g.anchor, bounds);
    let half = edge / 2.0;
    [
        center[0] + g.offset[0].clamp(-half, half),
        center[1] + g.offset[1].clamp(-half, half),
        center[2] + g.offset[2].clamp(-half, half),
    ]
}

/// Occupancy index over the scene cube. Occupied = hosts a Gaussian or is an
/// ancestor of a hosting leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct OctreeIndex {
    pub bounds: CubeBounds,
    pub max_depth: u8,
    occupied: BTreeSet<NodeKey>,
    gaussian_at: BTreeMap<NodeKey, usize>,
}

impl OctreeIndex {
    pub fn build(bounds: CubeBounds, max_depth: u8, gaussians: &[GaussianPrimitive]) -> Result<Self> {
        let mut occupied = BTreeSet::new();
        let mut gaussian_at = BTreeMap::new();
        for (gid, g) in gaussians.iter().enumerate() {
            if g.anchor.depth > max_depth {
                return Err(CkmError::Topology(format!(
                    "anchor depth {} exceeds max depth {max_depth}",
                    g.anchor.depth
                )));
            }
            if gaussian_at.insert(g.anchor, gid).is_some() {
                return Err(CkmError::Topology(format!(
                    "two primitives share leaf ({}, {})",
                    g.anchor.depth, g.anchor.code
                )));
            }
            occupied.insert(g.anchor);
            for a in ancestors(g.anchor) {
                occupied.insert(a);
            }
        }
        let tree = Self { bounds, max_depth, occupied, gaussian_at };
        for (&key, _) in &tree.gaussian_at {
            if tree.occupied.range(child_range(key)).next().is_some() {
                return Err(CkmError::Topology(format!(
                    "hosting leaf ({}, {}) has occupied descendants",
                    key.depth, key.code
                )));
            }
        }
        Ok(tree)
    }

    pub fn is_occupied(&self, key: NodeKey) -> bool {
        self.occupied.contains(&key)
    }

    pub fn gaussian_at(&self, key: NodeKey) -> Option<usize> {
        self.gaussian_at.get(&key).copied()
    }

    pub fn leaf_of(&self, gid: usize) -> Option<NodeKey> {
        self.gaussian_at.iter().find(|(_, &g)| g == gid).map(|(&k, _)| k)
    }

    /// All occupied keys in (depth, code) order.
    pub fn occupied_nodes(&self) -> impl Iterator<Item = NodeKey> + '_ {
        self.occupied.iter().copied()
    }

    pub fn hosting_leaves(&self) -> impl Iterator<Item = (NodeKey, usize)> + '_ {
        self.gaussian_at.iter().map(|(&k, &g)| (k, g))
    }

    pub fn gaussian_count(&self) -> usize {
        self.gaussian_at.len()
    }

    /// An occupied node with no occupied children (always hosts a Gaussian).
    pub fn is_hosting_leaf(&self, key: NodeKey) -> bool {
        self.gaussian_at.contains_key(&key)
    }

    /// Gaussians anchored inside the subtree rooted at `key`.
    pub fn subtree_gaussians(&self, key: NodeKey) -> usize {
        self.gaussian_at
            .keys()
            .filter(|leaf| {
                leaf.depth >= key.depth
                    && (leaf.code >> (3 * (leaf.depth - key.depth))) == key.code
            })
            .count()
    }
}

fn child_range(key: NodeKey) -> std::ops::Range<NodeKey> {
    NodeKey { depth: key.depth + 1, code: key.code << 3 }
        ..NodeKey { depth: key.depth + 1, code: (key.code << 3) + 8 }
}

/// Deterministic raw structural descriptor for a node:
/// `[depth one-hot | last-octant one-hot (zero for the root) | Morton digits
/// / 7 padded to max_depth | subtree occupancy fraction | normalized center]`.
pub fn structural_descriptor(
    key: NodeKey,
    tree: &OctreeIndex,
    active_depth: u8,
) -> Vec<f64> {
    let max_depth = tree.max_depth as usize;
    let mut out = Vec::with_capacity(raw_descriptor_dim(tree.max_depth));
    // depth one-hot
    for d in 0..=max_depth {
        out.push(if d == key.depth as usize { 1.0 } else { 0.0 });
    }
    // last octant one-hot; the root has no parent and stays all-zero
    let oct = key.last_octant();
    for o in 0..8 {
        out.push(if key.depth > 0 && o == oct { 1.0 } else { 0.0 });
    }
    // Morton path digits, most significant first, normalized to [0,1]
    for level in 0..max_depth {
        if level < key.depth as usize {
            let shift = 3 * (key.depth as usize - 1 - level);
            let digit = (key.code >> shift) & 7;
            out.push(digit as f64 / 7.0);
        } else {
            out.push(0.0);
        }
    }
    // occupancy fraction relative to leaf capacity at the active depth
    let cap_pow = active_depth.saturating_sub(key.depth) as u32;
    let capacity = 8f64.powi(cap_pow as i32);
    let count = tree.subtree_gaussians(key) as f64;
    out.push(count / capacity);
    // normalized cell center within the root cube
    let (center, _) = cell_geometry(key, &tree.bounds);
    for i in 0..3 {
        out.push((center[i] - tree.bounds.min[i]) / tree.bounds.edge);
    }
    out
}

pub fn raw_descriptor_dim(max_depth: u8) -> usize {
    (max_depth as usize + 1) + 8 + max_depth as usize + 1 + 3
}

/// One maintenance edit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyEdit {
    Prune { gid: usize },
    Migrate { gid: usize, from: NodeKey, to: NodeKey },
    Split { gid: usize, from: NodeKey, to: NodeKey },
    Clone { src_gid: usize, new_key: NodeKey },
}

#[derive(Debug, Default)]
pub struct MaintenanceOutcome {
    pub edits: Vec<TopologyEdit>,
    pub rejected: Vec<String>,
}

/// Applies prune / migrate / split / clone edits between optimizer steps and
/// returns the rebuilt index. Stored offsets and scales are clamped to their
/// (possibly new) cells afterwards so every invariant holds on exit.
pub fn maintain_topology(
    gaussians: &mut Vec<GaussianPrimitive>,
    bounds: CubeBounds,
    max_depth: u8,
    active_depth: u8,
    sched: &ScheduleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(OctreeIndex, MaintenanceOutcome)> {
    let mut outcome = MaintenanceOutcome::default();
    let mut occupancy: BTreeMap<NodeKey, usize> =
        gaussians.iter().enumerate().map(|(gid, g)| (g.anchor, gid)).collect();

    // prune low-opacity primitives
    let prune: Vec<usize> = gaussians
        .iter()
        .enumerate()
        .filter(|(_, g)| g.opacity() < sched.prune_opacity)
        .map(|(gid, _)| gid)
        .collect();
    for &gid in prune.iter().rev() {
        outcome.edits.push(TopologyEdit::Prune { gid });
        occupancy.remove(&gaussians[gid].anchor);
        gaussians.remove(gid);
    }
    // indices shifted; rebuild the occupancy map
    occupancy = gaussians.iter().enumerate().map(|(gid, g)| (g.anchor, gid)).collect();

    // migrate primitives whose raw offset has left the anchor cell
    for gid in 0..gaussians.len() {
        let g = &gaussians[gid];
        let (center, edge) = cell_geometry(g.anchor, &bounds);
        let half = edge / 2.0;
        let raw = vec3::add(center, g.offset);
        let outside = (0..3).any(|i| (raw[i] - center[i]).abs() > half);
        if !outside {
            continue;
        }
        let target = match cell_containing(raw, g.anchor.depth, &bounds) {
            Some(k) => k,
            None => {
                outcome.rejected.push(format!("migrate g{gid}: position left the scene cube"));
                continue;
            }
        };
        if target == g.anchor {
            continue;
        }
        if occupancy.contains_key(&target) || has_hosting_descendant(&occupancy, target) {
            outcome.rejected.push(format!(
                "migrate g{gid}: target ({}, {}) already hosts a primitive",
                target.depth, target.code
            ));
            continue;
        }
        let from = g.anchor;
        occupancy.remove(&from);
        let (tcenter, _) = cell_geometry(target, &bounds);
        let g = &mut gaussians[gid];
        g.offset = vec3::sub(raw, tcenter);
        g.anchor = target;
        occupancy.insert(target, gid);
        outcome.edits.push(TopologyEdit::Migrate { gid, from, to: target });
    }

    // split oversized primitives into a child cell
    for gid in 0..gaussians.len() {
        let g = &gaussians[gid];
        let (_, edge) = cell_geometry(g.anchor, &bounds);
        let max_scale = g.log_scale.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
        if max_scale <= edge || g.anchor.depth >= active_depth {
            continue;
        }
        match split_into_child(gid, gaussians, &mut occupancy, &bounds) {
            Ok(edit) => outcome.edits.push(edit),
            Err(msg) => outcome.rejected.push(msg),
        }
    }

    // clone high-gradient primitives: split, then duplicate into a free sibling child
    let threshold = percentile(
        gaussians.iter().map(|g| g.grad_accum).collect(),
        sched.clone_grad_percentile,
    );
    let candidates: Vec<usize> = gaussians
        .iter()
        .enumerate()
        .filter(|(_, g)| threshold > 0.0 && g.grad_accum > threshold)
        .map(|(gid, _)| gid)
        .collect();
    for gid in candidates {
        if gaussians[gid].anchor.depth >= active_depth {
            outcome.rejected.push(format!("clone g{gid}: already at the active depth cap"));
            continue;
        }
        let parent = gaussians[gid].anchor;
        let edit = match split_into_child(gid, gaussians, &mut occupancy, &bounds) {
            Ok(edit) => edit,
            Err(msg) => {
                outcome.rejected.push(msg);
                continue;
            }
        };
        outcome.edits.push(edit);
        // duplicate into the nearest unoccupied sibling child
        let mu = gaussian_position(&gaussians[gid], &bounds);
        let mut best: Option<(f64, NodeKey)> = None;
        for oct in 0..8 {
            let child = parent.child(oct);
            if occupancy.contains_key(&child) {
                continue;
            }
            let (ccenter, _) = cell_geometry(child, &bounds);
            let d = vec3::dist(mu, ccenter);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, child));
            }
        }
        let Some((_, new_key)) = best else {
            outcome.rejected.push(format!("clone g{gid}: no free sibling cell"));
            continue;
        };
        let mut dup = gaussians[gid].clone();
        let (ncenter, nedge) = cell_geometry(new_key, &bounds);
        dup.anchor = new_key;
        let jitter = nedge * 0.1;
        dup.offset = [
            rng.gen_range(-jitter..jitter),
            rng.gen_range(-jitter..jitter),
            rng.gen_range(-jitter..jitter),
        ];
        let _ = ncenter;
        dup.moment_m.iter_mut().for_each(|v| *v = 0.0);
        dup.moment_v.iter_mut().for_each(|v| *v = 0.0);
        dup.grad_accum = 0.0;
        gaussians.push(dup);
        occupancy.insert(new_key, gaussians.len() - 1);
        outcome.edits.push(TopologyEdit::Clone { src_gid: gid, new_key });
    }

    // clamp stored offsets and scales to the (possibly new) cells
    for g in gaussians.iter_mut() {
        let (_, edge) = cell_geometry(g.anchor, &bounds);
        let half = edge / 2.0;
        for i in 0..3 {
            g.offset[i] = g.offset[i].clamp(-half, half);
            g.log_scale[i] = g.log_scale[i].min(edge.ln());
        }
        g.grad_accum = 0.0;
    }

    let tree = OctreeIndex::build(bounds, max_depth, gaussians)?;
    Ok((tree, outcome))
}

fn split_into_child(
    gid: usize,
    gaussians: &mut [GaussianPrimitive],
    occupancy: &mut BTreeMap<NodeKey, usize>,
    bounds: &CubeBounds,
) -> std::result::Result<TopologyEdit, String> {
    let g = &gaussians[gid];
    let from = g.anchor;
    let mu = gaussian_position(g, bounds);
    let child = cell_containing(mu, from.depth + 1, bounds)
        .ok_or_else(|| format!("split g{gid}: position left the scene cube"))?;
    if child.parent() != Some(from) {
        return Err(format!("split g{gid}: clamped position escaped the cell"));
    }
    if occupancy.contains_key(&child) {
        return Err(format!(
            "split g{gid}: child ({}, {}) already hosts a primitive",
            child.depth, child.code
        ));
    }
    occupancy.remove(&from);
    let (ccenter, _) = cell_geometry(child, bounds);
    let g = &mut gaussians[gid];
    g.offset = vec3::sub(mu, ccenter);
    g.anchor = child;
    for ls in g.log_scale.iter_mut() {
        *ls -= std::f64::consts::LN_2;
    }
    occupancy.insert(child, gid);
    Ok(TopologyEdit::Split { gid, from, to: child })
}

fn has_hosting_descendant(occupancy: &BTreeMap<NodeKey, usize>, key: NodeKey) -> bool {
    occupancy.keys().any(|leaf| {
        leaf.depth > key.depth && (leaf.code >> (3 * (leaf.depth - key.depth))) == key.code
    })
}

/// Key of the cell at `depth` containing `p`, or None outside the cube.
pub fn cell_containing(p: Vec3, depth: u8, bounds: &CubeBounds) -> Option<NodeKey> {
    let cells = (1u64 << depth) as f64;
    let mut ints = [0u64; 3];
    for i in 0..3 {
        let t = (p[i] - bounds.min[i]) / bounds.edge;
        if !(0.0..=1.0).contains(&t) {
            return None;
        }
        ints[i] = ((t * cells) as u64).min((1u64 << depth) - 1);
    }
    let code = morton_encode(ints[0], ints[1], ints[2], depth).ok()?;
    Some(NodeKey { depth, code })
}

fn percentile(mut values: Vec<f64>, q: f64) -> f64 {
    if values.is_empty() {
        return f64::INFINITY;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((values.len() as f64 - 1.0) * q).round() as usize;
    values[rank.min(values.len() - 1)]
}
