//! Generalized Rémy growth: trees grown by gluing random bricks on uniform
//! edges, their reduced MB trees, the root-edge index J_n, Pólya urns with
//! random increments, the ℓ_k weights and the limiting dislocation mixture.

use crate::mb::{Estimate, KernelError, MBTree, SplittingKernel};
use crate::metrics::mean_stderr;
use crate::partitions::{rank_mass_partition, DiscreteTypedPartition, MassPartition, Part};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma};
use serde::Deserialize;
use statrs::function::gamma::ln_gamma;
use std::collections::HashMap;
use thiserror::Error;

/// Default number of draws when approximating an urn limit.
pub const DEFAULT_URN_STEPS: usize = 10_000;
const NO_PARENT: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrowthError {
    #[error("invalid tree {name}: {reason}")]
    InvalidTree { name: String, reason: String },
    #[error("invalid alphabet: {0}")]
    InvalidAlphabet(String),
    #[error("the initial tree's root must have degree 1")]
    RootDegree,
    #[error("mean brick edge count must be positive")]
    ZeroMeanEdges,
    #[error("closed form needs all alphabet trees to have the same edge count")]
    ClosedFormUnavailable,
    #[error("component {k} is not defined for type {ty}")]
    InvalidComponent { k: usize, ty: usize },
    #[error("type {0} is not a valid type")]
    InvalidType(usize),
}

/// A rooted tree as a parent array: exactly one entry is None (the root).
pub type ParentArray = Vec<Option<usize>>;

/// Initial planted tree and a finite alphabet of (tree, probability).
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthSpec {
    pub t0: ParentArray,
    pub alphabet: Vec<(ParentArray, f64)>,
}

#[derive(Deserialize)]
struct AlphabetEntryFile {
    tree: Vec<i64>,
    q: f64,
}

#[derive(Deserialize)]
struct GrowthSpecFile {
    t0: Vec<i64>,
    alphabet: Vec<AlphabetEntryFile>,
}

fn parse_parents(v: &[i64]) -> ParentArray {
    v.iter().map(|&p| if p < 0 { None } else { Some(p as usize) }).collect()
}

impl GrowthSpec {
    /// `{"t0": [-1, 0, 1], "alphabet": [{"tree": [-1, 0], "q": 1.0}]}`; −1 marks the root.
    pub fn from_json(text: &str) -> Result<Self, GrowthError> {
        let f: GrowthSpecFile = serde_json::from_str(text).map_err(|e| GrowthError::InvalidAlphabet(e.to_string()))?;
        Ok(GrowthSpec {
            t0: parse_parents(&f.t0),
            alphabet: f.alphabet.iter().map(|a| (parse_parents(&a.tree), a.q)).collect(),
        })
    }

    /// T0 = single edge, alphabet = {single edge}.
    pub fn remy() -> Self {
        GrowthSpec { t0: vec![None, Some(0)], alphabet: vec![(vec![None, Some(0)], 1.0)] }
    }

    /// A path of `edges` edges hanging from its root.
    pub fn path(edges: usize) -> ParentArray {
        (0..=edges).map(|v| v.checked_sub(1)).collect()
    }

    /// A root with `k` leaf children.
    pub fn star(k: usize) -> ParentArray {
        (0..=k).map(|v| (v > 0).then_some(0)).collect()
    }
}

/// Tree re-indexed in BFS order from the root (index 0).
#[derive(Clone, Debug)]
struct Shape {
    parent: Vec<usize>,
    children: Vec<Vec<usize>>,
}

impl Shape {
    fn new(name: &str, parents: &[Option<usize>]) -> Result<Shape, GrowthError> {
        let bad = |reason: String| GrowthError::InvalidTree { name: name.to_string(), reason };
        let n = parents.len();
        let roots: Vec<usize> = (0..n).filter(|&v| parents[v].is_none()).collect();
        if roots.len() != 1 {
            return Err(bad(format!("{} roots", roots.len())));
        }
        let mut kids = vec![Vec::new(); n];
        for (v, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n || p == v {
                    return Err(bad(format!("vertex {v} has parent {p}")));
                }
                kids[p].push(v);
            }
        }
        let mut order = vec![roots[0]];
        let mut idx = 0;
        while idx < order.len() {
            let v = order[idx];
            order.extend(kids[v].iter().copied());
            idx += 1;
        }
        if order.len() != n {
            return Err(bad("not connected to the root".into()));
        }
        let mut pos = vec![0; n];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k;
        }
        let parent = order.iter().map(|&v| parents[v].map_or(usize::MAX, |p| pos[p])).collect();
        let children = order.iter().map(|&v| kids[v].iter().map(|&c| pos[c]).collect()).collect();
        Ok(Shape { parent, children })
    }

    fn len(&self) -> usize {
        self.parent.len()
    }

    /// AHU canonical words of every rooted subtree, children sorted.
    fn canon(&self) -> Vec<String> {
        let mut c = vec![String::new(); self.len()];
        for v in (0..self.len()).rev() {
            let mut words: Vec<&str> = self.children[v].iter().map(|&k| c[k].as_str()).collect();
            words.sort_unstable();
            c[v] = format!("({})", words.concat());
        }
        c
    }

    fn subtree_sizes(&self) -> Vec<usize> {
        let mut s = vec![1; self.len()];
        for v in (1..self.len()).rev() {
            s[self.parent[v]] += s[v];
        }
        s
    }
}

/// One element of the brick set: a planted subtree type.
#[derive(Clone, Debug, PartialEq)]
pub struct Brick {
    /// Edges of the planted tree, counting the planting edge.
    pub edges: usize,
    /// Out-degree of the ancestor.
    pub out_degree: usize,
    /// (edges, type) of the planted subtrees above the ancestor, ranked.
    pub children: Vec<(usize, usize)>,
    /// Non-root vertices of the planted tree in BFS order as (parent, type);
    /// parent 0 is the planting root, vertex 1 is the ancestor.
    template: Vec<(usize, usize)>,
}

/// An alphabet tree ready to be glued.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphabetBrick {
    pub edges: usize,
    pub q: f64,
    /// (edges, type) of the planted subtrees at the root, ranked.
    pub children: Vec<(usize, usize)>,
    /// Non-root vertices as (parent, type); parent 0 is the glued root.
    template: Vec<(usize, usize)>,
}

/// Planted subtree types closed under descent, with type 1 the initial tree.
#[derive(Clone, Debug, PartialEq)]
pub struct BrickSet {
    pub bricks: Vec<Brick>,
    pub alphabet: Vec<AlphabetBrick>,
    /// E[N], mean edge count of a drawn alphabet tree.
    pub mean_edges: f64,
}

fn ranked_pairs(mut v: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    v.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)));
    v
}

pub fn build_brick_set(spec: &GrowthSpec) -> Result<BrickSet, GrowthError> {
    if spec.alphabet.is_empty() {
        return Err(GrowthError::InvalidAlphabet("empty alphabet".into()));
    }
    let qsum: f64 = spec.alphabet.iter().map(|a| a.1).sum();
    if spec.alphabet.iter().any(|a| !(a.1 >= 0.0)) || (qsum - 1.0).abs() > 1e-9 {
        return Err(GrowthError::InvalidAlphabet(format!("probabilities sum to {qsum}")));
    }
    let t0 = Shape::new("t0", &spec.t0)?;
    if t0.children[0].len() != 1 {
        return Err(GrowthError::RootDegree);
    }
    let mut shapes = vec![t0];
    for (k, (tree, _)) in spec.alphabet.iter().enumerate() {
        shapes.push(Shape::new(&format!("alphabet[{k}]"), tree)?);
    }
    let mean_edges: f64 = spec.alphabet.iter().zip(&shapes[1..]).map(|((_, q), s)| q * (s.len() - 1) as f64).sum();
    if mean_edges <= 0.0 {
        return Err(GrowthError::ZeroMeanEdges);
    }
    let canons: Vec<Vec<String>> = shapes.iter().map(Shape::canon).collect();
    // type 1 is the initial tree, whose ancestor is T0 vertex 1
    let mut types: HashMap<String, usize> = HashMap::new();
    let mut first: Vec<(usize, usize)> = Vec::new();
    let mut visit = |t: usize, v: usize, types: &mut HashMap<String, usize>| {
        if !types.contains_key(&canons[t][v]) {
            types.insert(canons[t][v].clone(), first.len() + 1);
            first.push((t, v));
        }
    };
    for v in 1..shapes[0].len() {
        visit(0, v, &mut types);
    }
    for t in 1..shapes.len() {
        for v in 1..shapes[t].len() {
            visit(t, v, &mut types);
        }
    }
    let ty = |t: usize, v: usize| types[&canons[t][v]];
    // template of the tree hanging at vertex v of shape t, root mapped to index 0
    let template = |t: usize, v: usize, planted: bool| -> Vec<(usize, usize)> {
        let s = &shapes[t];
        let mut out = Vec::new();
        let mut queue = vec![(v, 0usize)];
        if planted {
            out.push((0, ty(t, v)));
            queue = vec![(v, 1)];
        }
        let mut idx = 0;
        while idx < queue.len() {
            let (u, at) = queue[idx];
            for &c in &s.children[u] {
                out.push((at, ty(t, c)));
                queue.push((c, out.len()));
            }
            idx += 1;
        }
        out
    };
    let sizes: Vec<Vec<usize>> = shapes.iter().map(Shape::subtree_sizes).collect();
    let bricks = first
        .iter()
        .map(|&(t, v)| Brick {
            edges: sizes[t][v],
            out_degree: shapes[t].children[v].len(),
            children: ranked_pairs(shapes[t].children[v].iter().map(|&c| (sizes[t][c], ty(t, c))).collect()),
            template: template(t, v, true),
        })
        .collect();
    let alphabet = spec
        .alphabet
        .iter()
        .enumerate()
        .map(|(k, (_, q))| {
            let t = k + 1;
            AlphabetBrick {
                edges: shapes[t].len() - 1,
                q: *q,
                children: ranked_pairs(shapes[t].children[0].iter().map(|&c| (sizes[t][c], ty(t, c))).collect()),
                template: template(t, 0, false),
            }
        })
        .collect();
    Ok(BrickSet { bricks, alphabet, mean_edges })
}

impl BrickSet {
    pub fn kappa(&self) -> usize {
        self.bricks.len()
    }

    /// Self-similarity index 1/(E[N] + 1).
    pub fn gamma(&self) -> f64 {
        1.0 / (self.mean_edges + 1.0)
    }

    pub fn brick(&self, i: usize) -> &Brick {
        &self.bricks[i - 1]
    }

    fn draw(&self, rng: &mut dyn RngCore) -> usize {
        if self.alphabet.len() == 1 {
            return 0;
        }
        let mut u = rng.random::<f64>();
        for (k, a) in self.alphabet.iter().enumerate() {
            if u < a.q {
                return k;
            }
            u -= a.q;
        }
        self.alphabet.iter().rposition(|a| a.q > 0.0).unwrap()
    }

    /// Law of N + 1 as (value, probability).
    pub fn increment_law(&self) -> Vec<(f64, f64)> {
        self.alphabet.iter().map(|a| ((a.edges + 1) as f64, a.q)).collect()
    }

    /// Common edge count of the alphabet trees, if they all agree.
    pub fn common_edges(&self) -> Option<usize> {
        let e = self.alphabet[0].edges;
        self.alphabet.iter().all(|a| a.edges == e || a.q == 0.0).then_some(e)
    }

    /// Largest edge count among alphabet trees and bricks.
    pub fn max_edges(&self) -> usize {
        self.alphabet.iter().map(|a| a.edges).chain(self.bricks.iter().map(|b| b.edges)).max().unwrap()
    }

    fn check_type(&self, i: usize) -> Result<(), GrowthError> {
        if i == 0 || i > self.kappa() {
            return Err(GrowthError::InvalidType(i));
        }
        Ok(())
    }
}

/// A grown tree: vertex 0 is the untyped root; every other vertex v owns
/// the edge to its parent, so edges are indexed by 1..len.
#[derive(Clone, Debug)]
pub struct GrowthState {
    pub parent: Vec<u32>,
    pub ty: Vec<u32>,
    pub red: Vec<bool>,
    /// Current child of the root.
    pub ancestor: u32,
    pub steps: usize,
    /// Last step that glued on the root edge (0 if none).
    pub root_index: usize,
    /// Alphabet index of each glued brick.
    pub drawn: Vec<u32>,
}

impl GrowthState {
    pub fn edges(&self) -> usize {
        self.parent.len() - 1
    }

    pub fn red_count(&self) -> usize {
        self.red.iter().filter(|&&r| r).count()
    }

    pub fn leaf_count(&self) -> usize {
        let mut has_child = vec![false; self.parent.len()];
        for &p in &self.parent[1..] {
            has_child[p as usize] = true;
        }
        (1..self.parent.len()).filter(|&v| !has_child[v]).count()
    }

    fn children(&self) -> Vec<Vec<u32>> {
        let mut kids = vec![Vec::new(); self.parent.len()];
        for v in 1..self.parent.len() {
            kids[self.parent[v] as usize].push(v as u32);
        }
        kids
    }

    /// Vertices from the root down, parents first.
    fn top_down(&self, kids: &[Vec<u32>]) -> Vec<u32> {
        let mut order = vec![0u32];
        let mut idx = 0;
        while idx < order.len() {
            order.extend_from_slice(&kids[order[idx] as usize]);
            idx += 1;
        }
        order
    }

    /// Graph distance from the root of every vertex.
    pub fn depths(&self) -> Vec<u32> {
        let kids = self.children();
        let mut d = vec![0u32; self.parent.len()];
        for &v in &self.top_down(&kids)[1..] {
            d[v as usize] = d[self.parent[v as usize] as usize] + 1;
        }
        d
    }

    /// Number of red vertices in each subtree.
    pub fn red_sizes(&self) -> Vec<usize> {
        let kids = self.children();
        let order = self.top_down(&kids);
        let mut s: Vec<usize> = self.red.iter().map(|&r| usize::from(r)).collect();
        for &v in order.iter().rev() {
            if v != 0 {
                s[self.parent[v as usize] as usize] += s[v as usize];
            }
        }
        s
    }

    /// Unordered shape as a canonical word.
    pub fn canonical_shape(&self) -> String {
        let kids = self.children();
        let order = self.top_down(&kids);
        let mut c = vec![String::new(); self.parent.len()];
        for &v in order.iter().rev() {
            let mut words: Vec<String> = kids[v as usize].iter().map(|&k| std::mem::take(&mut c[k as usize])).collect();
            words.sort_unstable();
            c[v as usize] = format!("({})", words.concat());
        }
        std::mem::take(&mut c[0])
    }

    /// Largest distance from a vertex removed by the reduction to its
    /// nearest kept ancestor.
    pub fn pruned_gap(&self) -> usize {
        let size = self.red_sizes();
        let kids = self.children();
        let mut gap = vec![0usize; self.parent.len()];
        let mut worst = 0;
        for &v in &self.top_down(&kids)[1..] {
            let v = v as usize;
            if size[v] == 0 {
                gap[v] = gap[self.parent[v] as usize] + 1;
                worst = worst.max(gap[v]);
            }
        }
        worst
    }
}

/// Starts from the planted brick of type i.
pub fn initial_state(bricks: &BrickSet, i: usize) -> Result<GrowthState, GrowthError> {
    bricks.check_type(i)?;
    let t = &bricks.brick(i).template;
    let mut parent = vec![NO_PARENT];
    let mut ty = vec![0u32];
    for &(p, k) in t {
        parent.push(p as u32);
        ty.push(k as u32);
    }
    let red = vec![false; parent.len()];
    Ok(GrowthState { parent, ty, red, ancestor: 1, steps: 0, root_index: 0, drawn: Vec::new() })
}

/// One gluing step on a uniform edge.
pub fn grow_step(state: &mut GrowthState, bricks: &BrickSet, rng: &mut dyn RngCore) {
    let e = rng.random_range(1..state.parent.len());
    let r = state.parent.len() as u32;
    state.parent.push(state.parent[e]);
    state.ty.push(state.ty[e]);
    state.red.push(true);
    state.parent[e] = r;
    state.steps += 1;
    if e as u32 == state.ancestor {
        state.ancestor = r;
        state.root_index = state.steps;
    }
    let b = bricks.draw(rng);
    state.drawn.push(b as u32);
    let base = state.parent.len() as u32;
    for &(p, k) in &bricks.alphabet[b].template {
        state.parent.push(if p == 0 { r } else { base + p as u32 - 1 });
        state.ty.push(k as u32);
        state.red.push(false);
    }
}

/// T_n^(i) after `steps` gluings.
pub fn grow(bricks: &BrickSet, i: usize, steps: usize, rng: &mut dyn RngCore) -> Result<GrowthState, GrowthError> {
    let mut s = initial_state(bricks, i)?;
    for _ in 0..steps {
        grow_step(&mut s, bricks, rng);
    }
    Ok(s)
}

/// Drops the root, its edge and every vertex without red descendants; sizes
/// count red descendants including the vertex itself.
pub fn reduce_growth_tree(state: &GrowthState) -> MBTree {
    let size = state.red_sizes();
    let keep: Vec<usize> = (1..state.parent.len()).filter(|&v| size[v] > 0).collect();
    if keep.is_empty() {
        return MBTree::single(0, state.ty[state.ancestor as usize] as usize);
    }
    let mut pos = vec![usize::MAX; state.parent.len()];
    for (k, &v) in keep.iter().enumerate() {
        pos[v] = k;
    }
    let parent: Vec<Option<usize>> = keep
        .iter()
        .map(|&v| if v as u32 == state.ancestor { None } else { Some(pos[state.parent[v] as usize]) })
        .collect();
    let sizes: Vec<usize> = keep.iter().map(|&v| size[v]).collect();
    let types: Vec<usize> = keep.iter().map(|&v| state.ty[v] as usize).collect();
    MBTree::from_parents(&parent, &sizes, &types)
}

/// The split at the ancestor after n steps from type i, with J_n, tracking
/// only the edge and red counts of the subtrees above the ancestor.
pub fn sample_root_split(bricks: &BrickSet, i: usize, n: usize, rng: &mut dyn RngCore) -> Result<(DiscreteTypedPartition, usize), GrowthError> {
    bricks.check_type(i)?;
    // (edges, red, type); the root edge is the remaining one edge
    let mut subtrees: Vec<(u64, u64, usize)> = bricks.brick(i).children.iter().map(|&(e, t)| (e as u64, 0, t)).collect();
    let mut total: u64 = bricks.brick(i).edges as u64;
    let mut j = 0;
    for step in 1..=n {
        let b = &bricks.alphabet[bricks.draw(rng)];
        let add = b.edges as u64 + 1;
        let mut u = rng.random_range(0..total);
        if u == 0 {
            subtrees.clear();
            subtrees.push((total, step as u64 - 1, i));
            subtrees.extend(b.children.iter().map(|&(e, t)| (e as u64, 0, t)));
            j = step;
        } else {
            u -= 1;
            for s in subtrees.iter_mut() {
                if u < s.0 {
                    s.0 += add;
                    s.1 += 1;
                    break;
                }
                u -= s.0;
            }
        }
        total += add;
    }
    let parts = subtrees.iter().filter(|s| s.1 > 0).map(|s| Part::new(s.1 as usize, s.2)).collect();
    let p = DiscreteTypedPartition::ranked(parts, n, false).expect("red counts never exceed n");
    Ok((p, j))
}

/// J_n from the edge-count walk alone.
pub fn root_brick_index(bricks: &BrickSet, i: usize, n: usize, rng: &mut dyn RngCore) -> Result<usize, GrowthError> {
    bricks.check_type(i)?;
    let mut edges = bricks.brick(i).edges as u64;
    let mut j = 0;
    for step in 1..=n {
        if rng.random_range(0..edges) == 0 {
            j = step;
        }
        edges += bricks.alphabet[bricks.draw(rng)].edges as u64 + 1;
    }
    Ok(j)
}

/// The MB kernel q_n^(i) of the reduced growth trees.
#[derive(Clone, Debug)]
pub struct GrowthKernel {
    pub bricks: BrickSet,
}

impl SplittingKernel for GrowthKernel {
    fn kappa(&self) -> usize {
        self.bricks.kappa()
    }

    fn sample(&self, n: usize, i: usize, rng: &mut dyn RngCore) -> Result<DiscreteTypedPartition, KernelError> {
        if n == 0 {
            return Ok(DiscreteTypedPartition::empty(0));
        }
        sample_root_split(&self.bricks, i, n, rng).map(|x| x.0).map_err(|_| KernelError::InvalidType(i))
    }
}

/// Runs a Pólya urn with i.i.d. increments for `steps` draws and returns the
/// normalized weights.
pub fn urn_limit_sample(weights: &[f64], increments: &[(f64, f64)], steps: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    let mut w = weights.to_vec();
    let mut total: f64 = w.iter().sum();
    let constant = (increments.len() == 1).then(|| increments[0].0);
    for _ in 0..steps {
        let mut u = rng.random::<f64>() * total;
        let mut c = w.len() - 1;
        for (k, x) in w.iter().enumerate() {
            if u < *x {
                c = k;
                break;
            }
            u -= x;
        }
        let add = constant.unwrap_or_else(|| {
            let mut v = rng.random::<f64>();
            for &(x, p) in increments {
                if v < p {
                    return x;
                }
                v -= p;
            }
            increments[increments.len() - 1].0
        });
        w[c] += add;
        total += add;
    }
    w.iter().map(|x| x / total).collect()
}

/// Dirichlet(alpha) via normalized Gamma draws.
pub fn dirichlet_sample(alpha: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
    let g: Vec<f64> = alpha.iter().map(|&a| Gamma::new(a, 1.0).unwrap().sample(rng)).collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|x| x / s).collect()
}

/// How to realize an urn limit law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UrnMode {
    /// Finite-horizon urn run.
    Simulate(usize),
    /// Exact Dirichlet law; needs a constant increment.
    Dirichlet,
}

fn urn_draw(bricks: &BrickSet, weights: &[f64], mode: UrnMode, rng: &mut dyn RngCore) -> Result<Vec<f64>, GrowthError> {
    if weights.len() == 1 {
        return Ok(vec![1.0]);
    }
    match mode {
        UrnMode::Simulate(steps) => Ok(urn_limit_sample(weights, &bricks.increment_law(), steps, rng)),
        UrnMode::Dirichlet => {
            let beta = (bricks.common_edges().ok_or(GrowthError::ClosedFormUnavailable)? + 1) as f64;
            Ok(dirichlet_sample(&weights.iter().map(|w| w / beta).collect::<Vec<_>>(), rng))
        }
    }
}

/// S_k, the sum of k draws of N + 1.
fn walk_value(bricks: &BrickSet, k: usize, rng: &mut dyn RngCore) -> f64 {
    if bricks.alphabet.len() == 1 {
        return (k * (bricks.alphabet[0].edges + 1)) as f64;
    }
    (0..k).map(|_| (bricks.alphabet[bricks.draw(rng)].edges + 1) as f64).sum()
}

/// The k-th component of the limiting mixture, before ranking.
pub fn growth_component_sample(bricks: &BrickSet, i: usize, k: usize, mode: UrnMode, rng: &mut dyn RngCore) -> Result<Vec<(f64, usize)>, GrowthError> {
    bricks.check_type(i)?;
    let brick = bricks.brick(i);
    let (weights, types): (Vec<f64>, Vec<usize>) = if k == 0 {
        if brick.out_degree == 0 {
            return Err(GrowthError::InvalidComponent { k, ty: i });
        }
        brick.children.iter().map(|&(e, t)| (e as f64, t)).unzip()
    } else {
        let s = walk_value(bricks, k - 1, rng);
        let a = &bricks.alphabet[bricks.draw(rng)];
        std::iter::once((s + brick.edges as f64, i)).chain(a.children.iter().map(|&(e, t)| (e as f64, t))).unzip()
    };
    let w = urn_draw(bricks, &weights, mode, rng)?;
    Ok(w.into_iter().zip(types).collect())
}

/// Ranked draw from the k-th mixture component.
pub fn growth_dislocation_sample(bricks: &BrickSet, i: usize, k: usize, mode: UrnMode, rng: &mut dyn RngCore) -> Result<MassPartition, GrowthError> {
    let atoms = growth_component_sample(bricks, i, k, mode, rng)?;
    Ok(rank_mass_partition(atoms.into_iter().filter(|a| a.0 > 0.0).collect()).expect("urn weights are positive"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EllMode {
    ClosedForm,
    /// n^γ·P(J_n = k) averaged over `paths` walk paths of length n.
    MonteCarlo { n: usize, paths: usize },
}

/// ℓ_0, …, ℓ_{k_max} for type i.
pub fn ell_weights(bricks: &BrickSet, i: usize, k_max: usize, mode: EllMode, rng: &mut dyn RngCore) -> Result<Vec<f64>, GrowthError> {
    bricks.check_type(i)?;
    let brick = bricks.brick(i);
    let ni = brick.edges as f64;
    match mode {
        EllMode::ClosedForm => {
            let beta = (bricks.common_edges().ok_or(GrowthError::ClosedFormUnavailable)? + 1) as f64;
            let a = ni / beta;
            let b = (ni - 1.0) / beta;
            Ok((0..=k_max)
                .map(|k| {
                    if k == 0 {
                        if brick.out_degree == 0 {
                            0.0
                        } else {
                            (ln_gamma(a) - ln_gamma(b)).exp()
                        }
                    } else {
                        let k = k as f64;
                        (ln_gamma(a + k - 1.0) - ln_gamma(b + k)).exp() / beta
                    }
                })
                .collect())
        }
        EllMode::MonteCarlo { n, paths } => {
            let scale = (n as f64).powf(bricks.gamma());
            let k_top = k_max.min(n);
            let mut acc = vec![0.0; k_max + 1];
            let mut prefix = vec![0.0; k_top + 1];
            let mut level = vec![0.0; k_top + 1];
            for _ in 0..paths {
                // log Π_{1≤j<m}(1 − 1/(n_i + S_j)) for m ≤ k_top and m = n; the
                // j = 0 factor vanishes when n_i = 1 and only enters ℓ_0
                let first = (-1.0 / ni).ln_1p();
                let mut s = 0.0;
                let mut log_sum = 0.0;
                for j in 0..n {
                    if j <= k_top {
                        prefix[j] = log_sum;
                        level[j] = ni + s;
                    }
                    if j > 0 {
                        log_sum += (-1.0 / (ni + s)).ln_1p();
                    }
                    s += walk_value(bricks, 1, rng);
                }
                if brick.out_degree > 0 {
                    acc[0] += (first + log_sum).exp();
                }
                for k in 1..=k_top {
                    acc[k] += (log_sum - prefix[k]).exp() / level[k - 1];
                }
            }
            Ok(acc.iter().map(|a| a * scale / paths as f64).collect())
        }
    }
}

/// E[(1 − s₁·1{i₁=i})·f(s)] under the k-th component, ranked.
pub fn component_integral(
    bricks: &BrickSet,
    i: usize,
    k: usize,
    f: &dyn Fn(&MassPartition) -> f64,
    mode: UrnMode,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<Estimate, GrowthError> {
    let mut xs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let s = growth_dislocation_sample(bricks, i, k, mode, rng)?;
        let (s1, i1) = s.first();
        xs.push((1.0 - if i1 == i { s1 } else { 0.0 }) * f(&s));
    }
    let (mean, stderr) = mean_stderr(&xs);
    Ok(Estimate { mean, stderr })
}

/// Σ_{k ≤ k_max} ℓ_k·(component integral k), with ℓ_0 dropped when p_i = 0.
pub fn truncated_growth_integral(
    bricks: &BrickSet,
    i: usize,
    ells: &[f64],
    f: &dyn Fn(&MassPartition) -> f64,
    mode: UrnMode,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<Estimate, GrowthError> {
    let mut mean = 0.0;
    let mut var = 0.0;
    for (k, &l) in ells.iter().enumerate() {
        if l == 0.0 || (k == 0 && bricks.brick(i).out_degree == 0) {
            continue;
        }
        let e = component_integral(bricks, i, k, f, mode, samples, rng)?;
        mean += l * e.mean;
        var += (l * e.stderr).powi(2);
    }
    Ok(Estimate { mean, stderr: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn two_path() -> GrowthSpec {
        GrowthSpec { t0: GrowthSpec::path(2), alphabet: vec![(GrowthSpec::path(1), 1.0)] }
    }

    #[test]
    fn remy_brick_set() {
        let b = build_brick_set(&GrowthSpec::remy()).unwrap();
        assert_eq!(b.kappa(), 1);
        assert_eq!(b.brick(1).out_degree, 0);
        assert_eq!(b.mean_edges, 1.0);
        assert_eq!(b.alphabet[0].children, vec![(1, 1)]);
    }

    #[test]
    fn star_alphabet_is_monotype() {
        let s = GrowthSpec { t0: GrowthSpec::path(1), alphabet: vec![(GrowthSpec::star(3), 1.0)] };
        let b = build_brick_set(&s).unwrap();
        assert_eq!(b.kappa(), 1);
        assert_eq!(b.alphabet[0].children, vec![(1, 1); 3]);
    }

    #[test]
    fn two_path_has_two_types() {
        let b = build_brick_set(&two_path()).unwrap();
        assert_eq!(b.kappa(), 2);
        assert_eq!(b.brick(1).edges, 2);
        assert_eq!(b.brick(1).children, vec![(1, 2)]);
        assert_eq!(b.brick(2).edges, 1);
    }

    #[test]
    fn rejects_bad_input() {
        let s = GrowthSpec { t0: GrowthSpec::star(2), alphabet: vec![(GrowthSpec::path(1), 1.0)] };
        assert_eq!(build_brick_set(&s), Err(GrowthError::RootDegree));
        let s = GrowthSpec { t0: GrowthSpec::path(1), alphabet: vec![(vec![None], 1.0)] };
        assert_eq!(build_brick_set(&s), Err(GrowthError::ZeroMeanEdges));
        let s = GrowthSpec { t0: vec![None, Some(2), Some(1)], alphabet: vec![(GrowthSpec::path(1), 1.0)] };
        assert!(matches!(build_brick_set(&s), Err(GrowthError::InvalidTree { .. })));
        let j = r#"{"t0": [-1, 0], "alphabet": [{"tree": [-1, 0], "q": 1.0}]}"#;
        assert_eq!(GrowthSpec::from_json(j).unwrap(), GrowthSpec::remy());
    }

    #[test]
    fn bookkeeping() {
        let spec = GrowthSpec {
            t0: GrowthSpec::path(2),
            alphabet: vec![(GrowthSpec::star(2), 0.5), (vec![None], 0.25), (GrowthSpec::path(3), 0.25)],
        };
        let b = build_brick_set(&spec).unwrap();
        let mut rng = stream(1, 0);
        for i in 1..=b.kappa() {
            let s = grow(&b, i, 300, &mut rng).unwrap();
            let glued: usize = s.drawn.iter().map(|&k| b.alphabet[k as usize].edges + 1).sum();
            assert_eq!(s.edges(), b.brick(i).edges + glued);
            assert_eq!(s.red_count(), 300);
            assert_eq!(s.ty[s.ancestor as usize] as usize, i);
            let t = reduce_growth_tree(&s);
            assert_eq!(t.root_size(), 300);
            assert_eq!(t.node(0).ty, i);
            assert!(s.pruned_gap() <= b.max_edges());
            for v in 1..t.len() {
                assert!(t.node(v).size <= t.node(t.parent(v).unwrap()).size);
            }
        }
    }

    #[test]
    fn remy_leaves_and_one_step() {
        let b = build_brick_set(&GrowthSpec::remy()).unwrap();
        let mut rng = stream(2, 0);
        let s = grow(&b, 1, 57, &mut rng).unwrap();
        assert_eq!(s.leaf_count(), 58);
        let one = reduce_growth_tree(&grow(&b, 1, 1, &mut rng).unwrap());
        assert_eq!(one.len(), 1);
        assert_eq!(one.root_size(), 1);
    }

    #[test]
    fn ell_closed_form_remy() {
        let b = build_brick_set(&GrowthSpec::remy()).unwrap();
        let l = ell_weights(&b, 1, 2, EllMode::ClosedForm, &mut stream(0, 0)).unwrap();
        let rp = std::f64::consts::PI.sqrt();
        assert_eq!(l[0], 0.0);
        assert!((l[1] - rp / 2.0).abs() < 1e-12);
        assert!((l[2] - rp / 4.0).abs() < 1e-12);
    }

    #[test]
    fn ell_monte_carlo_remy() {
        let b = build_brick_set(&GrowthSpec::remy()).unwrap();
        let cf = ell_weights(&b, 1, 5, EllMode::ClosedForm, &mut stream(0, 0)).unwrap();
        let mc = ell_weights(&b, 1, 5, EllMode::MonteCarlo { n: 20_000, paths: 1 }, &mut stream(0, 0)).unwrap();
        for k in 1..=5 {
            assert!((mc[k] / cf[k] - 1.0).abs() < 0.01, "k={k}: {} vs {}", mc[k], cf[k]);
        }
        let s = GrowthSpec { t0: GrowthSpec::path(1), alphabet: vec![(GrowthSpec::path(1), 0.5), (GrowthSpec::path(2), 0.5)] };
        let b = build_brick_set(&s).unwrap();
        assert_eq!(ell_weights(&b, 1, 3, EllMode::ClosedForm, &mut stream(0, 0)), Err(GrowthError::ClosedFormUnavailable));
    }

    #[test]
    fn root_index_zero_only_with_children() {
        let b = build_brick_set(&GrowthSpec::remy()).unwrap();
        let mut rng = stream(3, 0);
        for _ in 0..200 {
            assert!(root_brick_index(&b, 1, 50, &mut rng).unwrap() >= 1);
        }
    }

    #[test]
    fn urn_uniform_limit() {
        let mut rng = stream(4, 0);
        let xs: Vec<f64> = (0..4000).map(|_| urn_limit_sample(&[1.0, 1.0], &[(1.0, 1.0)], 2000, &mut rng)[0]).collect();
        let d = crate::metrics::ks_one_sample(&xs, |x| x.clamp(0.0, 1.0)).unwrap();
        assert!(d < 0.03, "KS {d}");
    }

    #[test]
    fn remy_components_are_binary() {
        let b = build_brick_set(&GrowthSpec::remy()).unwrap();
        let mut rng = stream(5, 0);
        for k in 1..20 {
            let s = growth_dislocation_sample(&b, 1, k, UrnMode::Simulate(500), &mut rng).unwrap();
            assert_eq!(s.atoms().len(), 2);
            assert!(s.atoms().iter().all(|a| a.1 == 1));
            assert!((s.mass_sum() - 1.0).abs() < 1e-12);
        }
        assert!(growth_dislocation_sample(&b, 1, 0, UrnMode::Dirichlet, &mut rng).is_err());
    }
}
