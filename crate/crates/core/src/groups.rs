//! Group structures over variable indices.
//!
//! A [`GroupStructure`] is a family of (possibly overlapping) index sets with
//! positive weights and a norm choice; it defines the penalty
//! `Ω(α) = Σ_g η_g ‖α_g‖_q` with `q ∈ {2, ∞}`.
//!
//! Indices are 0-based in memory and 1-based in the JSON representation.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The norm applied inside each group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "linf")]
    Linf,
}

impl Norm {
    pub fn eval(self, v: &[f64]) -> f64 {
        match self {
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Norm::L2 => f.write_str("l2"),
            Norm::Linf => f.write_str("linf"),
        }
    }
}

/// Most specific shape of a group family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StructureClass {
    /// Every variable is its own group.
    Singletons,
    /// Pairwise disjoint groups covering every variable.
    Partition,
    /// Any two groups are nested or disjoint.
    TreeStructured,
    GeneralOverlap,
}

impl StructureClass {
    /// True when the proximal operator has a closed form (composition in tree order).
    pub fn is_tree_like(self) -> bool {
        !matches!(self, StructureClass::GeneralOverlap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStructure {
    p: usize,
    groups: Vec<Vec<usize>>,
    weights: Vec<f64>,
    norm: Norm,
}

impl GroupStructure {
    /// Builds a validated structure. Each group is sorted; duplicate indices
    /// within a group, out-of-range indices, empty groups and non-positive
    /// weights are rejected.
    pub fn new(p: usize, groups: Vec<Vec<usize>>, weights: Vec<f64>, norm: Norm) -> Result<Self> {
        if p == 0 {
            return Err(Error::Domain("group structure needs p >= 1".into()));
        }
        if groups.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} groups but {} weights",
                groups.len(),
                weights.len()
            )));
        }
        let mut sorted = Vec::with_capacity(groups.len());
        for (k, mut g) in groups.into_iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Domain(format!("group {} is empty", k + 1)));
            }
            g.sort_unstable();
            if let Some(&bad) = g.iter().find(|&&j| j >= p) {
                return Err(Error::Domain(format!(
                    "group {} contains index {} outside 1..={}",
                    k + 1,
                    bad + 1,
                    p
                )));
            }
            if g.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Domain(format!("group {} repeats an index", k + 1)));
            }
            sorted.push(g);
        }
        if let Some((k, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w > 0.0))
        {
            return Err(Error::Domain(format!("weight {} of group {} is not positive", w, k + 1)));
        }
        Ok(GroupStructure {
            p,
            groups: sorted,
            weights,
            norm,
        })
    }

    /// Unit-weight structure.
    pub fn unweighted(p: usize, groups: Vec<Vec<usize>>, norm: Norm) -> Result<Self> {
        let weights = vec![1.0; groups.len()];
        Self::new(p, groups, weights, norm)
    }

    /// The ℓ1 penalty written as singleton groups.
    pub fn singletons(p: usize) -> Result<Self> {
        Self::unweighted(p, (0..p).map(|j| vec![j]).collect(), Norm::L2)
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_weights(self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.p, self.groups, weights, self.norm)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn norm(&self) -> Norm {
        self.norm
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Number of groups containing each variable.
    pub fn coverage(&self) -> Vec<usize> {
        let mut c = vec![0; self.p];
        for g in &self.groups {
            for &j in g {
                c[j] += 1;
            }
        }
        c
    }

    /// `Σ_g η_g ‖α_g‖_q`.
    pub fn penalty_value(&self, alpha: &[f64]) -> Result<f64> {
        if alpha.len() != self.p {
            return Err(Error::Dimension(format!(
                "vector has length {}, structure has p = {}",
                alpha.len(),
                self.p
            )));
        }
        Ok(self.penalty_unchecked(alpha))
    }

    pub(crate) fn penalty_unchecked(&self, alpha: &[f64]) -> f64 {
        let mut total = 0.0;
        for (g, &eta) in self.groups.iter().zip(&self.weights) {
            let v = match self.norm {
                Norm::L2 => g.iter().map(|&j| alpha[j] * alpha[j]).sum::<f64>().sqrt(),
                Norm::Linf => g.iter().fold(0.0_f64, |m, &j| m.max(alpha[j].abs())),
            };
            total += eta * v;
        }
        total
    }

    pub fn classify(&self) -> StructureClass {
        let cover = self.coverage();
        let disjoint = cover.iter().all(|&c| c <= 1);
        let covers = cover.iter().all(|&c| c >= 1);
        if disjoint && covers {
            if self.groups.iter().all(|g| g.len() == 1) {
                return StructureClass::Singletons;
            }
            return StructureClass::Partition;
        }
        if disjoint {
            return StructureClass::TreeStructured;
        }
        for (a, ga) in self.groups.iter().enumerate() {
            for gb in &self.groups[a + 1..] {
                if relation(ga, gb) == Relation::Overlap {
                    return StructureClass::GeneralOverlap;
                }
            }
        }
        StructureClass::TreeStructured
    }

    /// True when no index belongs to two groups.
    pub fn is_disjoint(&self) -> bool {
        self.coverage().iter().all(|&c| c <= 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Relation {
    Disjoint,
    Equal,
    /// First is a proper subset of the second.
    Subset,
    Superset,
    Overlap,
}

/// Set relation between two sorted index lists.
pub(crate) fn relation(a: &[usize], b: &[usize]) -> Relation {
    let (mut i, mut j, mut common) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    match (common, common == a.len(), common == b.len()) {
        (0, _, _) => Relation::Disjoint,
        (_, true, true) => Relation::Equal,
        (_, true, false) => Relation::Subset,
        (_, false, true) => Relation::Superset,
        _ => Relation::Overlap,
    }
}

/// Orders group indices so that whenever `i < j`, group `i` is contained in
/// group `j` or the two are disjoint. Among groups whose subsets are all
/// placed, the one with the smallest first element (then smallest size,
/// then original position) goes first.
pub fn tree_order(structure: &GroupStructure) -> Result<Vec<usize>> {
    let groups = structure.groups();
    let n = groups.len();
    // pending[k]: number of proper subsets of k not yet emitted
    let mut pending = vec![0usize; n];
    let mut supersets: Vec<Vec<usize>> = vec![Vec::new(); n];
    for a in 0..n {
        for b in a + 1..n {
            match relation(&groups[a], &groups[b]) {
                Relation::Overlap => {
                    return Err(Error::Structure(format!(
                        "groups {} and {} overlap without nesting",
                        a + 1,
                        b + 1
                    )))
                }
                Relation::Subset => {
                    supersets[a].push(b);
                    pending[b] += 1;
                }
                Relation::Superset => {
                    supersets[b].push(a);
                    pending[a] += 1;
                }
                Relation::Equal | Relation::Disjoint => {}
            }
        }
    }
    let key = |k: usize| Reverse((groups[k][0], groups[k].len(), k));
    let mut ready: BinaryHeap<_> = (0..n).filter(|&k| pending[k] == 0).map(key).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, _, k))) = ready.pop() {
        order.push(k);
        for &s in &supersets[k] {
            pending[s] -= 1;
            if pending[s] == 0 {
                ready.push(key(s));
            }
        }
    }
    debug_assert_eq!(order.len(), n);
    Ok(order)
}

/// Groups whose zero patterns are exactly the complements of contiguous
/// intervals: all prefixes `{1..k}` for `k < p` followed by all suffixes
/// `{k..p}` for `k > 1` (suffixes listed from shortest to longest).
pub fn build_sequence_groups(p: usize) -> Result<GroupStructure> {
    if p == 0 {
        return Err(Error::Domain("sequence length must be >= 1".into()));
    }
    let mut groups = Vec::with_capacity(2 * (p - 1));
    for k in 1..p {
        groups.push((0..k).collect());
    }
    for k in (1..p).rev() {
        groups.push((k..p).collect());
    }
    GroupStructure::unweighted(p, groups, Norm::L2)
}

/// A forest over `p` nodes and its assignment of nodes to variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeSpec {
    parent: Vec<Option<usize>>,
    node_to_var: Vec<usize>,
}

impl TreeSpec {
    /// Forest with node `v` mapped to variable `v`.
    pub fn new(parent: Vec<Option<usize>>) -> Result<Self> {
        let n = parent.len();
        Self::with_mapping(parent, (0..n).collect())
    }

    pub fn with_mapping(parent: Vec<Option<usize>>, node_to_var: Vec<usize>) -> Result<Self> {
        let n = parent.len();
        if n == 0 {
            return Err(Error::Domain("tree needs at least one node".into()));
        }
        if node_to_var.len() != n {
            return Err(Error::Dimension(format!(
                "{} nodes but {} variable assignments",
                n,
                node_to_var.len()
            )));
        }
        let mut seen = vec![false; n];
        for &v in &node_to_var {
            if v >= n || std::mem::replace(&mut seen[v], true) {
                return Err(Error::Domain("node-to-variable map is not a bijection".into()));
            }
        }
        if let Some(bad) = parent.iter().flatten().find(|&&q| q >= n) {
            return Err(Error::Domain(format!("parent index {} out of range", bad + 1)));
        }
        if parent.iter().all(Option::is_some) {
            return Err(Error::Structure("parent links have no root".into()));
        }
        // 0 = unvisited, 1 = on current path, 2 = known to reach a root
        let mut state = vec![0u8; n];
        for start in 0..n {
            let mut path = Vec::new();
            let mut v = start;
            loop {
                match state[v] {
                    2 => break,
                    1 => return Err(Error::Structure(format!("cycle through node {}", v + 1))),
                    _ => {}
                }
                state[v] = 1;
                path.push(v);
                match parent[v] {
                    Some(q) => v = q,
                    None => break,
                }
            }
            for u in path {
                state[u] = 2;
            }
        }
        Ok(TreeSpec {
            parent,
            node_to_var,
        })
    }

    /// Complete tree with the given branching factor at each depth, numbered
    /// breadth-first from the root.
    pub fn complete(branching: &[usize]) -> Result<Self> {
        if branching.contains(&0) {
            return Err(Error::Domain("branching factors must be >= 1".into()));
        }
        let mut parent = vec![None];
        let mut level = vec![0usize];
        for &b in branching {
            let mut next = Vec::with_capacity(level.len() * b);
            for &u in &level {
                for _ in 0..b {
                    next.push(parent.len());
                    parent.push(Some(u));
                }
            }
            level = next;
        }
        Self::new(parent)
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn parent(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn node_to_var(&self) -> &[usize] {
        &self.node_to_var
    }

    /// Variable index of each node's parent, indexed by variable.
    pub fn parent_var(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len()];
        for (node, par) in self.parent.iter().enumerate() {
            out[self.node_to_var[node]] = par.map(|q| self.node_to_var[q]);
        }
        out
    }
}

/// One group per node: the node's variable together with those of all its
/// descendants. Groups follow node order.
pub fn build_tree_groups(tree: &TreeSpec) -> Result<GroupStructure> {
    let n = tree.len();
    let mut groups: Vec<Vec<usize>> = (0..n).map(|v| vec![tree.node_to_var[v]]).collect();
    for v in 0..n {
        let mut a = tree.parent[v];
        while let Some(u) = a {
            groups[u].push(tree.node_to_var[v]);
            a = tree.parent[u];
        }
    }
    GroupStructure::unweighted(n, groups, Norm::L2)
}

/// All `e × e` neighborhoods of an `h × w` grid (variable `r * w + c` sits at
/// row `r`, column `c`). With `cyclic`, one group is anchored at every cell and
/// wraps around the borders; identical index sets from small grids are kept.
pub fn build_grid_groups(h: usize, w: usize, e: usize, cyclic: bool) -> Result<GroupStructure> {
    if h == 0 || w == 0 {
        return Err(Error::Domain("grid dimensions must be >= 1".into()));
    }
    if e == 0 || e > h.min(w) {
        return Err(Error::Domain(format!(
            "neighborhood size {} must lie in 1..={}",
            e,
            h.min(w)
        )));
    }
    let (rows, cols) = if cyclic {
        (h, w)
    } else {
        (h - e + 1, w - e + 1)
    };
    let mut groups = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut g = Vec::with_capacity(e * e);
            for dr in 0..e {
                for dc in 0..e {
                    g.push(((r + dr) % h) * w + (c + dc) % w);
                }
            }
            groups.push(g);
        }
    }
    GroupStructure::unweighted(h * w, groups, Norm::L2)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupStructureJson {
    p: usize,
    q: Norm,
    groups: Vec<Vec<usize>>,
    #[serde(default)]
    weights: Option<Vec<f64>>,
}

impl Serialize for GroupStructure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GroupStructureJson {
            p: self.p,
            q: self.norm,
            groups: self
                .groups
                .iter()
                .map(|g| g.iter().map(|j| j + 1).collect())
                .collect(),
            weights: Some(self.weights.clone()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GroupStructure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = GroupStructureJson::deserialize(d)?;
        let mut groups = Vec::with_capacity(raw.groups.len());
        for g in raw.groups {
            if g.contains(&0) {
                return Err(serde::de::Error::custom("group indices are 1-based"));
            }
            groups.push(g.into_iter().map(|j| j - 1).collect());
        }
        let weights = raw.weights.unwrap_or_else(|| vec![1.0; groups.len()]);
        GroupStructure::new(raw.p, groups, weights, raw.q).map_err(serde::de::Error::custom)
    }
}
