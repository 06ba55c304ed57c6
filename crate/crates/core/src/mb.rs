//! Generic multi-type Markov-branching trees: kernels, recursive sampling, the
//! leaf mass measure, the size-one death and padding couplings, the tagged
//! block chain, reduced marginals and splitting-law functionals.

use crate::frag::MarginalTree;
use crate::metrics::{mean_stderr, LabeledTree};
use crate::partitions::{DiscreteTypedPartition, MassPartition, Part, PartitionError};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_NODE_CAP: usize = 100_000_000;
pub const DEFAULT_STEP_CAP: usize = 100_000_000;
const NONE: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("size {n} is beyond the kernel's range (max {max})")]
    SizeOutOfRange { n: usize, max: usize },
    #[error("conditioning on a null event at size {n}, type {ty}")]
    ZeroProbability { n: usize, ty: usize },
    #[error("type {0} is not a valid type")]
    InvalidType(usize),
    #[error("kernel support is not enumerable at ({n}, {ty})")]
    NotEnumerable { n: usize, ty: usize },
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MbError {
    #[error("tree exceeded the node cap of {0}")]
    NodeCapExceeded(usize),
    #[error("chain exceeded the step cap of {0}")]
    StepCapExceeded(usize),
    #[error("leaf labels {0:?} are not all present in the tree")]
    BadLabelSet(Vec<usize>),
    #[error("root size must be at least 1")]
    EmptyRoot,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// A family of splitting laws q_n^(i) indexed by size and type (types 1-based).
pub trait SplittingKernel: Send + Sync {
    fn kappa(&self) -> usize;

    fn sample(&self, n: usize, i: usize, rng: &mut dyn RngCore) -> Result<DiscreteTypedPartition, KernelError>;

    /// Full law at (n, i) when it is finite and cheap to list.
    fn support(&self, _n: usize, _i: usize) -> Option<Vec<(DiscreteTypedPartition, f64)>> {
        None
    }

    /// Smallest n from which every draw is conservative, if any.
    fn conservative_from(&self) -> Option<usize> {
        None
    }
}

impl<K: SplittingKernel + ?Sized> SplittingKernel for &K {
    fn kappa(&self) -> usize {
        (**self).kappa()
    }
    fn sample(&self, n: usize, i: usize, rng: &mut dyn RngCore) -> Result<DiscreteTypedPartition, KernelError> {
        (**self).sample(n, i, rng)
    }
    fn support(&self, n: usize, i: usize) -> Option<Vec<(DiscreteTypedPartition, f64)>> {
        (**self).support(n, i)
    }
    fn conservative_from(&self) -> Option<usize> {
        (**self).conservative_from()
    }
}

impl<K: SplittingKernel + ?Sized> SplittingKernel for Box<K> {
    fn kappa(&self) -> usize {
        (**self).kappa()
    }
    fn sample(&self, n: usize, i: usize, rng: &mut dyn RngCore) -> Result<DiscreteTypedPartition, KernelError> {
        (**self).sample(n, i, rng)
    }
    fn support(&self, n: usize, i: usize) -> Option<Vec<(DiscreteTypedPartition, f64)>> {
        (**self).support(n, i)
    }
    fn conservative_from(&self) -> Option<usize> {
        (**self).conservative_from()
    }
}

impl<K: SplittingKernel + ?Sized> SplittingKernel for Arc<K> {
    fn kappa(&self) -> usize {
        (**self).kappa()
    }
    fn sample(&self, n: usize, i: usize, rng: &mut dyn RngCore) -> Result<DiscreteTypedPartition, KernelError> {
        (**self).sample(n, i, rng)
    }
    fn support(&self, n: usize, i: usize) -> Option<Vec<(DiscreteTypedPartition, f64)>> {
        (**self).support(n, i)
    }
    fn conservative_from(&self) -> Option<usize> {
        (**self).conservative_from()
    }
}

/// Draws from a finite law by inversion.
pub fn sample_from_support(law: &[(DiscreteTypedPartition, f64)], rng: &mut dyn RngCore) -> DiscreteTypedPartition {
    let total: f64 = law.iter().map(|x| x.1).sum();
    let mut u = rng.random::<f64>() * total;
    for (p, w) in law {
        if u < *w {
            return p.clone();
        }
        u -= w;
    }
    law.iter().rev().find(|x| x.1 > 0.0).map(|x| x.0.clone()).unwrap_or_else(|| law[law.len() - 1].0.clone())
}

type SupportFn = dyn Fn(usize, usize) -> Vec<(DiscreteTypedPartition, f64)> + Send + Sync;

/// Kernel given by an explicit finite law at every (n, i).
pub struct EnumeratedKernel {
    kappa: usize,
    law: Box<SupportFn>,
    conservative_from: Option<usize>,
}

impl EnumeratedKernel {
    pub fn new<F>(kappa: usize, conservative_from: Option<usize>, law: F) -> Self
    where
        F: Fn(usize, usize) -> Vec<(DiscreteTypedPartition, f64)> + Send + Sync + 'static,
    {
        EnumeratedKernel { kappa, law: Box::new(law), conservative_from }
    }
}

impl SplittingKernel for EnumeratedKernel {
    fn kappa(&self) -> usize {
        self.kappa
    }
    fn sample(&self, n: usize, i: usize, rng: &mut dyn RngCore) -> Result<DiscreteTypedPartition, KernelError> {
        if i == 0 || i > self.kappa {
            return Err(KernelError::InvalidType(i));
        }
        let law = (self.law)(n, i);
        if law.is_empty() {
            return Ok(DiscreteTypedPartition::empty(n));
        }
        Ok(sample_from_support(&law, rng))
    }
    fn support(&self, n: usize, i: usize) -> Option<Vec<(DiscreteTypedPartition, f64)>> {
        Some((self.law)(n, i))
    }
    fn conservative_from(&self) -> Option<usize> {
        self.conservative_from
    }
}

/// Same kernel, except that particles of size one die: q_1^(i) = δ_∅.
pub struct DeathCoupled<K>(pub K);

/// Wraps `k` so that size-one particles have no offspring.
pub fn death_coupling_kernel<K: SplittingKernel>(k: K) -> DeathCoupled<K> {
    DeathCoupled(k)
}

impl<K: SplittingKernel> SplittingKernel for DeathCoupled<K> {
    fn kappa(&self) -> usize {
        self.0.kappa()
    }
    fn sample(&self, n: usize, i: usize, rng: &mut dyn RngCore) -> Result<DiscreteTypedPartition, KernelError> {
        if n == 1 {
            return Ok(DiscreteTypedPartition::empty(1));
        }
        self.0.sample(n, i, rng)
    }
    fn support(&self, n: usize, i: usize) -> Option<Vec<(DiscreteTypedPartition, f64)>> {
        if n == 1 {
            return Some(vec![(DiscreteTypedPartition::empty(1), 1.0)]);
        }
        self.0.support(n, i)
    }
    fn conservative_from(&self) -> Option<usize> {
        self.0.conservative_from()
    }
}

/// Same kernel with lost mass returned as (1,1) parts.
pub struct Conserved<K>(pub K);

/// Wraps `k` so that draws at n ≥ 2 are padded to exact sum n with (1,1) parts.
pub fn conservation_kernel<K: SplittingKernel>(k: K) -> Conserved<K> {
    Conserved(k)
}

/// Pads `p` with (1,1) parts up to its total and re-ranks.
pub fn pad_partition(p: &DiscreteTypedPartition) -> DiscreteTypedPartition {
    let missing = p.total().saturating_sub(p.size_sum());
    if missing == 0 {
        return p.clone();
    }
    let mut parts = p.parts().to_vec();
    parts.extend(std::iter::repeat_n(Part::new(1, 1), missing));
    DiscreteTypedPartition::ranked(parts, p.total(), p.allow_zero()).expect("padding keeps a valid partition")
}

impl<K: SplittingKernel> SplittingKernel for Conserved<K> {
    fn kappa(&self) -> usize {
        self.0.kappa()
    }
    fn sample(&self, n: usize, i: usize, rng: &mut dyn RngCore) -> Result<DiscreteTypedPartition, KernelError> {
        let p = self.0.sample(n, i, rng)?;
        Ok(if n >= 2 { pad_partition(&p) } else { p })
    }
    fn support(&self, n: usize, i: usize) -> Option<Vec<(DiscreteTypedPartition, f64)>> {
        let law = self.0.support(n, i)?;
        if n < 2 {
            return Some(law);
        }
        let mut merged: BTreeMap<DiscreteTypedPartition, f64> = BTreeMap::new();
        for (p, w) in law {
            *merged.entry(pad_partition(&p)).or_insert(0.0) += w;
        }
        Some(merged.into_iter().collect())
    }
    fn conservative_from(&self) -> Option<usize> {
        Some(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node {
    pub size: usize,
    pub ty: usize,
    parent: u32,
    first_child: u32,
    n_children: u32,
    pub depth: u32,
}

/// Rooted tree with (size, type) nodes, stored in breadth-first order so that
/// every node's children occupy a contiguous index range in partition order.
#[derive(Clone, Debug, PartialEq)]
pub struct MBTree {
    nodes: Vec<Node>,
    /// (label, node) for labeled leaves, sorted by label.
    labels: Vec<(usize, u32)>,
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub node_cap: usize,
    /// Expand size-0 nodes through the kernel; otherwise they stay childless.
    pub expand_zero: bool,
    /// Draw a uniform labeling of the leaves of positive size.
    pub label_leaves: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { node_cap: DEFAULT_NODE_CAP, expand_zero: true, label_leaves: true }
    }
}

impl MBTree {
    pub fn single(size: usize, ty: usize) -> Self {
        MBTree {
            nodes: vec![Node { size, ty, parent: NONE, first_child: 0, n_children: 0, depth: 0 }],
            labels: Vec::new(),
        }
    }

    /// Builds a tree from a parent array (root first, parent before child is
    /// not required). Children are put in partition order.
    pub fn from_parents(parent: &[Option<usize>], size: &[usize], ty: &[usize]) -> Self {
        let n = parent.len();
        let mut kids: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut root = 0;
        for (v, p) in parent.iter().enumerate() {
            match p {
                Some(p) => kids[*p].push(v),
                None => root = v,
            }
        }
        for k in kids.iter_mut() {
            k.sort_by(|&a, &b| size[b].cmp(&size[a]).then(ty[b].cmp(&ty[a])));
        }
        let mut nodes = Vec::with_capacity(n);
        let mut order = vec![root];
        nodes.push(Node { size: size[root], ty: ty[root], parent: NONE, first_child: 0, n_children: 0, depth: 0 });
        let mut idx = 0;
        while idx < order.len() {
            let v = order[idx];
            let first = nodes.len() as u32;
            for &c in &kids[v] {
                order.push(c);
                nodes.push(Node {
                    size: size[c],
                    ty: ty[c],
                    parent: idx as u32,
                    first_child: 0,
                    n_children: 0,
                    depth: nodes[idx].depth + 1,
                });
            }
            nodes[idx].first_child = first;
            nodes[idx].n_children = kids[v].len() as u32;
            idx += 1;
        }
        MBTree { nodes, labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: usize) -> &Node {
        &self.nodes[v]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root_size(&self) -> usize {
        self.nodes[0].size
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        let p = self.nodes[v].parent;
        (p != NONE).then_some(p as usize)
    }

    pub fn children(&self, v: usize) -> std::ops::Range<usize> {
        let n = &self.nodes[v];
        n.first_child as usize..(n.first_child + n.n_children) as usize
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        self.nodes[v].n_children == 0
    }

    pub fn height(&self) -> usize {
        self.nodes.iter().map(|n| n.depth as usize).max().unwrap_or(0)
    }

    /// Children of `v` as a typed partition of its size.
    pub fn split_at(&self, v: usize) -> DiscreteTypedPartition {
        let parts = self.children(v).map(|c| Part::new(self.nodes[c].size, self.nodes[c].ty)).collect();
        DiscreteTypedPartition::new(parts, self.nodes[v].size, true).expect("children stored in partition order")
    }

    pub fn labels(&self) -> &[(usize, u32)] {
        &self.labels
    }

    /// Node carrying label `b`.
    pub fn labeled_node(&self, b: usize) -> Option<usize> {
        self.labels.binary_search_by_key(&b, |x| x.0).ok().map(|k| self.labels[k].1 as usize)
    }

    /// Labels the leaves of positive size 1..L in uniformly random order.
    pub fn label_leaves(&mut self, rng: &mut dyn RngCore) {
        let mut leaves: Vec<u32> = (0..self.nodes.len() as u32)
            .filter(|&v| self.nodes[v as usize].n_children == 0 && self.nodes[v as usize].size > 0)
            .collect();
        leaves.shuffle(rng);
        self.labels = leaves.into_iter().enumerate().map(|(k, v)| (k + 1, v)).collect();
    }

    /// Copy without the size-0 nodes and everything below them.
    pub fn prune_zero(&self) -> MBTree {
        let keep: Vec<bool> = self.nodes.iter().map(|n| n.size > 0).collect();
        self.restrict(&keep)
    }

    /// Subtree induced by a root-closed set of kept nodes, labels carried over.
    fn restrict(&self, keep: &[bool]) -> MBTree {
        let mut new_id = vec![NONE; self.nodes.len()];
        let mut nodes = Vec::new();
        let mut order = vec![0usize];
        new_id[0] = 0;
        nodes.push(Node { parent: NONE, first_child: 0, n_children: 0, depth: 0, ..self.nodes[0] });
        let mut idx = 0;
        while idx < order.len() {
            let v = order[idx];
            let first = nodes.len() as u32;
            let mut count = 0;
            for c in self.children(v) {
                if keep[c] {
                    new_id[c] = nodes.len() as u32;
                    order.push(c);
                    nodes.push(Node {
                        parent: idx as u32,
                        first_child: 0,
                        n_children: 0,
                        depth: nodes[idx].depth + 1,
                        ..self.nodes[c]
                    });
                    count += 1;
                }
            }
            nodes[idx].first_child = first;
            nodes[idx].n_children = count;
            idx += 1;
        }
        let labels = self
            .labels
            .iter()
            .filter(|(_, v)| keep[*v as usize])
            .map(|&(b, v)| (b, new_id[v as usize]))
            .collect();
        MBTree { nodes, labels }
    }

    /// One line per node in index order: `parent size type`, root parent -1.
    pub fn to_dump(&self) -> String {
        let mut s = String::with_capacity(self.nodes.len() * 12);
        for n in &self.nodes {
            let p = if n.parent == NONE { -1 } else { n.parent as i64 };
            s.push_str(&format!("{p} {} {}\n", n.size, n.ty));
        }
        s
    }

    /// Parses the `parent size type` dump format.
    pub fn from_dump(s: &str) -> Result<MBTree, String> {
        let mut parent = Vec::new();
        let mut size = Vec::new();
        let mut ty = Vec::new();
        for (ln, line) in s.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(format!("line {}: expected `parent size type`", ln + 1));
            }
            let p: i64 = f[0].parse().map_err(|e| format!("line {}: {e}", ln + 1))?;
            parent.push(if p < 0 { None } else { Some(p as usize) });
            size.push(f[1].parse().map_err(|e| format!("line {}: {e}", ln + 1))?);
            ty.push(f[2].parse().map_err(|e| format!("line {}: {e}", ln + 1))?);
        }
        if parent.iter().filter(|p| p.is_none()).count() != 1 {
            return Err("dump must contain exactly one root".into());
        }
        if parent.iter().flatten().any(|&p| p >= parent.len()) {
            return Err("parent index out of range".into());
        }
        Ok(MBTree::from_parents(&parent, &size, &ty))
    }
}

impl LabeledTree for MBTree {
    fn labeled_nodes(&self) -> Vec<(usize, usize)> {
        self.labels.iter().map(|&(b, v)| (b, v as usize)).collect()
    }
    fn parent_of(&self, node: usize) -> Option<usize> {
        self.parent(node)
    }
    fn height_of(&self, node: usize) -> f64 {
        self.nodes[node].depth as f64
    }
}

/// Samples T_n^(i) generation by generation.
pub fn sample_mb_tree<K: SplittingKernel + ?Sized>(
    kernel: &K,
    n: usize,
    i: usize,
    rng: &mut dyn RngCore,
    opts: &SampleOptions,
) -> Result<MBTree, MbError> {
    if n == 0 {
        return Err(MbError::EmptyRoot);
    }
    let mut tree = MBTree::single(n, i);
    let mut idx = 0;
    while idx < tree.nodes.len() {
        let Node { size, ty, depth, .. } = tree.nodes[idx];
        if size == 0 && !opts.expand_zero {
            idx += 1;
            continue;
        }
        let split = kernel.sample(size, ty, rng)?;
        if tree.nodes.len() + split.len() > opts.node_cap {
            return Err(MbError::NodeCapExceeded(opts.node_cap));
        }
        tree.nodes[idx].first_child = tree.nodes.len() as u32;
        tree.nodes[idx].n_children = split.len() as u32;
        for p in split.parts() {
            tree.nodes.push(Node {
                size: p.size,
                ty: p.ty,
                parent: idx as u32,
                first_child: 0,
                n_children: 0,
                depth: depth + 1,
            });
        }
        idx += 1;
    }
    if opts.label_leaves {
        tree.label_leaves(rng);
    }
    Ok(tree)
}

/// Height of T_n^(i), sampled depth-first without storing the tree.
pub fn sample_height<K: SplittingKernel + ?Sized>(
    kernel: &K,
    n: usize,
    i: usize,
    rng: &mut dyn RngCore,
    expand_zero: bool,
    node_cap: usize,
) -> Result<usize, MbError> {
    if n == 0 {
        return Err(MbError::EmptyRoot);
    }
    let mut stack = vec![(n, i, 0usize)];
    let (mut height, mut nodes) = (0, 1usize);
    while let Some((size, ty, depth)) = stack.pop() {
        height = height.max(depth);
        if size == 0 && !expand_zero {
            continue;
        }
        let split = kernel.sample(size, ty, rng)?;
        nodes += split.len();
        if nodes > node_cap {
            return Err(MbError::NodeCapExceeded(node_cap));
        }
        stack.extend(split.parts().iter().map(|p| (p.size, p.ty, depth + 1)));
    }
    Ok(height)
}

/// Atoms (node, mass) of the natural measure: (size − Σ child sizes)/n at each node.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedNodeMeasure {
    pub atoms: Vec<(usize, f64)>,
}

impl WeightedNodeMeasure {
    pub fn total(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }
}

pub fn leaf_mass_measure(t: &MBTree) -> WeightedNodeMeasure {
    let n = t.root_size() as f64;
    let atoms = (0..t.len())
        .filter_map(|v| {
            let inner: usize = t.children(v).map(|c| t.nodes[c].size).sum();
            let own = t.nodes[v].size.saturating_sub(inner);
            (own > 0).then(|| (v, own as f64 / n))
        })
        .collect();
    WeightedNodeMeasure { atoms }
}

/// One-step law of the tagged block: Σ_λ q_m^(j)(λ)·(l/m)·mult_(l,k)(λ).
pub fn tagged_transition_row<K: SplittingKernel + ?Sized>(
    kernel: &K,
    m: usize,
    j: usize,
) -> Result<BTreeMap<(usize, usize), f64>, KernelError> {
    let mut row = BTreeMap::new();
    if m <= 1 {
        row.insert((m, j), 1.0);
        return Ok(row);
    }
    let law = kernel.support(m, j).ok_or(KernelError::NotEnumerable { n: m, ty: j })?;
    for (lambda, q) in law {
        for p in lambda.parts() {
            if p.size > 0 {
                *row.entry((p.size, p.ty)).or_insert(0.0) += q * p.size as f64 / m as f64;
            }
        }
    }
    Ok(row)
}

pub fn tagged_transition_prob<K: SplittingKernel + ?Sized>(
    kernel: &K,
    m: usize,
    j: usize,
    l: usize,
    k: usize,
) -> Result<f64, KernelError> {
    Ok(tagged_transition_row(kernel, m, j)?.get(&(l, k)).copied().unwrap_or(0.0))
}

/// Path of the block containing a tagged leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedPath {
    pub states: Vec<(usize, usize)>,
    /// Number of steps before absorption (the tagged leaf's height).
    pub absorption: usize,
}

/// Index of the part receiving a uniform unit among `m`, or None for mass kept
/// by the node itself.
fn size_biased_part(p: &DiscreteTypedPartition, m: usize, rng: &mut dyn RngCore) -> Option<usize> {
    let mut u = rng.random_range(0..m);
    for (k, part) in p.parts().iter().enumerate() {
        if u < part.size {
            return Some(k);
        }
        u -= part.size;
    }
    None
}

/// Runs the tagged chain from (n, i) until the block has size one (or the
/// tagged unit stays at a node).
pub fn sample_tagged_chain<K: SplittingKernel + ?Sized>(
    kernel: &K,
    n: usize,
    i: usize,
    rng: &mut dyn RngCore,
    step_cap: usize,
) -> Result<TaggedPath, MbError> {
    let mut states = vec![(n, i)];
    let (mut m, mut j) = (n, i);
    while m > 1 {
        if states.len() > step_cap {
            return Err(MbError::StepCapExceeded(step_cap));
        }
        let split = kernel.sample(m, j, rng)?;
        match size_biased_part(&split, m, rng) {
            Some(k) => {
                let p = split.parts()[k];
                m = p.size;
                j = p.ty;
                states.push((m, j));
            }
            None => break,
        }
    }
    let absorption = states.len() - 1;
    Ok(TaggedPath { states, absorption })
}

/// Absorption time only, without storing the path.
pub fn tagged_absorption_time<K: SplittingKernel + ?Sized>(
    kernel: &K,
    n: usize,
    i: usize,
    rng: &mut dyn RngCore,
    step_cap: usize,
) -> Result<usize, MbError> {
    let (mut m, mut j, mut steps) = (n, i, 0usize);
    while m > 1 {
        if steps >= step_cap {
            return Err(MbError::StepCapExceeded(step_cap));
        }
        let split = kernel.sample(m, j, rng)?;
        match size_biased_part(&split, m, rng) {
            Some(k) => {
                let p = split.parts()[k];
                m = p.size;
                j = p.ty;
                steps += 1;
            }
            None => break,
        }
    }
    Ok(steps)
}

/// Subtree spanned by the root and the leaves labeled by `b`, with graph distances kept.
pub fn reduced_marginal(t: &MBTree, b: &[usize]) -> Result<MBTree, MbError> {
    let mut keep = vec![false; t.len()];
    keep[0] = true;
    let mut targets = Vec::with_capacity(b.len());
    for &lbl in b {
        let v = t.labeled_node(lbl).ok_or_else(|| MbError::BadLabelSet(b.to_vec()))?;
        targets.push(v);
        let mut u = Some(v);
        while let Some(x) = u {
            if keep[x] && x != v {
                break;
            }
            keep[x] = true;
            u = t.parent(x);
        }
    }
    let mut out = t.restrict(&keep);
    out.labels.retain(|(l, _)| b.contains(l));
    Ok(out)
}

/// Directly samples the k-leaf marginal of T_n^(i) for a conservative
/// death-coupled kernel: k distinct uniform leaves are followed down the
/// recursion and only their blocks are ever split.
pub fn sample_discrete_marginal<K: SplittingKernel + ?Sized>(
    kernel: &K,
    n: usize,
    i: usize,
    k: usize,
    rng: &mut dyn RngCore,
    step_cap: usize,
) -> Result<MarginalTree, MbError> {
    if k == 0 || k > n {
        return Err(MbError::BadLabelSet((1..=k).collect()));
    }
    let mut tree = MarginalTree::with_root(i);
    // (size, type, labels, parent node, height)
    let mut stack = vec![(n, i, (1..=k).collect::<Vec<usize>>(), 0usize, 0usize)];
    let mut steps = 0usize;
    while let Some((mut m, mut j, labels, parent, mut h)) = stack.pop() {
        if labels.len() == 1 {
            let d = tagged_absorption_time(kernel, m, j, rng, step_cap)?;
            tree.add_leaf(parent, (h + d) as f64, j, labels[0]);
            continue;
        }
        loop {
            steps += 1;
            if steps > step_cap {
                return Err(MbError::StepCapExceeded(step_cap));
            }
            let split = kernel.sample(m, j, rng)?;
            let parts = split.parts();
            // labels are distinct units; assign without replacement
            let mut free: Vec<usize> = parts.iter().map(|p| p.size).collect();
            free.push(m - split.size_sum());
            let mut left = m;
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &lbl in &labels {
                let mut u = rng.random_range(0..left);
                let mut slot = free.len() - 1;
                for (s, &c) in free.iter().enumerate() {
                    if u < c {
                        slot = s;
                        break;
                    }
                    u -= c;
                }
                free[slot] -= 1;
                left -= 1;
                groups.entry(slot).or_default().push(lbl);
            }
            if groups.len() == 1 {
                let (&slot, _) = groups.iter().next().unwrap();
                if slot < parts.len() {
                    m = parts[slot].size;
                    j = parts[slot].ty;
                    h += 1;
                    continue;
                }
            }
            let node = tree.add_internal(parent, h as f64, j);
            for (slot, group) in groups {
                if slot == parts.len() {
                    for lbl in group {
                        tree.add_leaf(node, h as f64, j, lbl);
                    }
                } else {
                    stack.push((parts[slot].size, parts[slot].ty, group, node, h + 1));
                }
            }
            break;
        }
    }
    Ok(tree)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    Critical,
    Mixing,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Monte Carlo estimate of n^γ·E[(1 − s₁·1{i₁=i})·f(λ/n)] (critical) or
/// n^γ·E[(1 − s₁)·f(λ/n)] (mixing) under λ ~ q_n^(i).
#[allow(clippy::too_many_arguments)]
pub fn split_functional_estimate<K: SplittingKernel + ?Sized>(
    kernel: &K,
    n: usize,
    i: usize,
    f: &dyn Fn(&MassPartition) -> f64,
    mode: SplitMode,
    gamma: f64,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<Estimate, MbError> {
    let scale = (n as f64).powf(gamma);
    let mut xs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let lambda = kernel.sample(n, i, rng)?;
        let s = lambda.to_mass();
        let (s1, i1) = s.first();
        let weight = match mode {
            SplitMode::Critical => 1.0 - if i1 == i { s1 } else { 0.0 },
            SplitMode::Mixing => 1.0 - s1,
        };
        xs.push(scale * weight * f(&s));
    }
    let (mean, stderr) = mean_stderr(&xs);
    Ok(Estimate { mean, stderr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::chi_square_test;
    use crate::rng::stream;

    fn dp(v: &[(usize, usize)], n: usize) -> DiscreteTypedPartition {
        DiscreteTypedPartition::ranked(v.iter().map(|&(s, t)| Part::new(s, t)).collect(), n, false).unwrap()
    }

    fn halving() -> EnumeratedKernel {
        EnumeratedKernel::new(1, Some(2), |n, _| {
            if n <= 1 {
                vec![(DiscreteTypedPartition::empty(n), 1.0)]
            } else {
                vec![(dp(&[(n.div_ceil(2), 1), (n / 2, 1)], n), 1.0)]
            }
        })
    }

    /// Uniform binary split into (k, n−k), two types assigned by parity.
    fn random_binary() -> DeathCoupled<EnumeratedKernel> {
        death_coupling_kernel(EnumeratedKernel::new(2, Some(2), |n, i| {
            let mut law = Vec::new();
            for k in 1..n {
                let t = if (k + i) % 2 == 0 { 1 } else { 2 };
                law.push((dp(&[(k, t), (n - k, 3 - t)], n), 1.0 / (n - 1) as f64));
            }
            law
        }))
    }

    #[test]
    fn height_without_tree() {
        let k = halving();
        let mut rng = stream(0, 0);
        assert_eq!(sample_height(&k, 16, 1, &mut rng, true, 100).unwrap(), 4);
        assert_eq!(sample_height(&k, 5, 1, &mut rng, true, 100).unwrap(), 3);
        assert_eq!(sample_height(&k, 1, 1, &mut rng, true, 100).unwrap(), 0);
        assert!(matches!(sample_height(&k, 64, 1, &mut rng, true, 10), Err(MbError::NodeCapExceeded(10))));
    }

    #[test]
    fn single_node_and_binary() {
        let k = halving();
        let t = sample_mb_tree(&k, 1, 1, &mut stream(0, 0), &SampleOptions::default()).unwrap();
        assert_eq!((t.len(), t.height()), (1, 0));
        let t = sample_mb_tree(&k, 4, 1, &mut stream(0, 0), &SampleOptions::default()).unwrap();
        assert_eq!(t.len(), 7);
        assert_eq!(t.height(), 2);
        assert_eq!(t.labels().len(), 4);
    }

    #[test]
    fn node_cap_enforced() {
        let stay = EnumeratedKernel::new(1, None, |n, i| vec![(dp(&[(n, i)], n), 1.0)]);
        let opts = SampleOptions { node_cap: 100, ..Default::default() };
        assert_eq!(sample_mb_tree(&stay, 3, 1, &mut stream(0, 0), &opts), Err(MbError::NodeCapExceeded(100)));
    }

    #[test]
    fn mass_measure() {
        let t = sample_mb_tree(&halving(), 4, 1, &mut stream(0, 0), &SampleOptions::default()).unwrap();
        let mu = leaf_mass_measure(&t);
        assert_eq!(mu.atoms.len(), 4);
        assert!(mu.atoms.iter().all(|&(v, m)| m == 0.25 && t.node(v).size == 1 && t.is_leaf(v)));
        let one = MBTree::single(1, 1);
        assert_eq!(leaf_mass_measure(&one).atoms, vec![(0, 1.0)]);
        // size 5 with children summing to 3 keeps 2/n
        let t = MBTree::from_parents(&[None, Some(0), Some(0)], &[5, 2, 1], &[1, 1, 2]);
        let mu = leaf_mass_measure(&t);
        assert_eq!(mu.atoms[0], (0, 0.4));
        assert!((mu.total() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn death_coupling() {
        let k = EnumeratedKernel::new(2, None, |n, i| {
            if n == 1 {
                vec![(dp(&[(1, 2)], 1), 1.0)]
            } else {
                vec![(dp(&[(n - 1, i), (1, 1)], n), 1.0)]
            }
        });
        let d = death_coupling_kernel(k);
        assert_eq!(d.support(1, 1).unwrap(), vec![(DiscreteTypedPartition::empty(1), 1.0)]);
        let mut rng = stream(4, 0);
        for _ in 0..10_000 {
            let t = sample_mb_tree(&d, 6, 1, &mut rng, &SampleOptions::default()).unwrap();
            assert!((0..t.len()).all(|v| t.node(v).size != 1 || t.is_leaf(v)));
        }
    }

    #[test]
    fn conservation_padding() {
        let lossy = EnumeratedKernel::new(1, None, |n, _| vec![(dp(&[(n - 1, 1)], n), 1.0)]);
        let c = conservation_kernel(lossy);
        assert_eq!(c.support(3, 1).unwrap(), vec![(dp(&[(2, 1), (1, 1)], 3), 1.0)]);
        let already = dp(&[(2, 1), (1, 2)], 3);
        assert_eq!(pad_partition(&already), already);
        let before = dp(&[(5, 1)], 7).to_mass();
        let after = pad_partition(&dp(&[(5, 1)], 7)).to_mass();
        assert!(crate::partitions::partition_distance(&before, &after) <= 1.0 / 7.0 + 1e-12);
    }

    #[test]
    fn transition_rows() {
        let single = EnumeratedKernel::new(1, Some(2), |n, _| vec![(dp(&[(n / 2, 1), (n / 2, 1)], n), 1.0)]);
        assert_eq!(tagged_transition_prob(&single, 4, 1, 2, 1).unwrap(), 1.0);
        assert_eq!(tagged_transition_prob(&single, 1, 1, 1, 1).unwrap(), 1.0);
        let k = random_binary();
        for m in 1..40 {
            for j in 1..=2 {
                let row = tagged_transition_row(&k, m, j).unwrap();
                assert!((row.values().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tagged_chain_examples() {
        let k = halving();
        let p = sample_tagged_chain(&k, 1, 1, &mut stream(0, 0), 100).unwrap();
        assert_eq!(p.absorption, 0);
        for r in 0..20 {
            let p = sample_tagged_chain(&k, 8, 1, &mut stream(0, r), 100).unwrap();
            assert_eq!(p.absorption, 3);
        }
    }

    #[test]
    fn tagged_chain_matches_transition_law() {
        let k = random_binary();
        let row = tagged_transition_row(&k, 12, 1).unwrap();
        let keys: Vec<_> = row.keys().copied().collect();
        let mut counts = vec![0u64; keys.len()];
        let mut rng = stream(5, 0);
        for _ in 0..100_000 {
            let p = sample_tagged_chain(&k, 12, 1, &mut rng, 100).unwrap();
            counts[keys.iter().position(|x| *x == p.states[1]).unwrap()] += 1;
        }
        let probs: Vec<f64> = keys.iter().map(|x| row[x]).collect();
        assert!(chi_square_test(&counts, &probs, 5.0).unwrap().p_value > 1e-3);
    }

    #[test]
    fn reduced_marginals() {
        let k = random_binary();
        let mut rng = stream(6, 0);
        let t = sample_mb_tree(&k, 20, 1, &mut rng, &SampleOptions::default()).unwrap();
        let all: Vec<usize> = (1..=20).collect();
        let full = reduced_marginal(&t, &all).unwrap();
        assert_eq!(full.len(), t.len());
        let one = reduced_marginal(&t, &[1]).unwrap();
        let leaf = t.labeled_node(1).unwrap();
        assert_eq!(one.height(), t.node(leaf).depth as usize);
        assert_eq!(one.len(), t.node(leaf).depth as usize + 1);
        let two = reduced_marginal(&t, &[1, 2]).unwrap();
        let m = crate::metrics::distance_matrix(&two, None).unwrap();
        let split = (m.depth[0] + m.depth[1] - m.dist[0][1]) / 2.0;
        assert!(split <= m.depth[0].min(m.depth[1]));
        assert!(reduced_marginal(&t, &[21]).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let t = sample_mb_tree(&halving(), 5, 1, &mut stream(0, 0), &SampleOptions::default()).unwrap();
        let s = t.to_dump();
        assert!(s.starts_with("-1 5 1\n0 3 1\n0 2 1\n"));
        let back = MBTree::from_dump(&s).unwrap();
        assert_eq!(back.to_dump(), s);
        assert!(MBTree::from_dump("0 1 1\n").is_err());
    }

    #[test]
    fn functional_on_one_atom_law() {
        let k = halving();
        let e = split_functional_estimate(&k, 8, 1, &|_| 1.0, SplitMode::Critical, 0.5, 10, &mut stream(0, 0)).unwrap();
        assert!((e.mean - 8f64.sqrt() * 0.5).abs() < 1e-12);
        assert!(e.stderr < 1e-12);
    }
}
