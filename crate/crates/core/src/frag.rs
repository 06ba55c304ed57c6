//! Continuum side: finite dislocation measures, the Markov additive process of
//! the tagged fragment and its Lamperti transform, the Brownian dislocation
//! sampler, k-leaf marginals of fragmentation trees, and MB kernels obtained by
//! discretizing a dislocation measure.

use crate::mb::{KernelError, SplittingKernel};
use crate::metrics::LabeledTree;
use crate::partitions::{interval_of, rank_mass_partition, DiscreteTypedPartition, MassPartition, Part, MASS_TOL};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1};
use serde::Deserialize;
use std::collections::BTreeMap;
use thiserror::Error;

pub const DEFAULT_EVENT_CAP: usize = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FragError {
    #[error("invalid dislocation spec: {0}")]
    InvalidSpec(String),
    #[error("simulation exceeded the event cap of {0}")]
    EventCapExceeded(usize),
    #[error("horizon too short: expected remaining integral {tail} exceeds {tol}")]
    HorizonTooShort { tail: f64, tol: f64 },
    #[error("absorption time has infinite mean (pure type-change cycle)")]
    InfiniteAbsorption,
    #[error("k must be at least 1")]
    NoLeaves,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DislocationAtom {
    pub w: f64,
    pub s: MassPartition,
}

/// Per-type finite atomic dislocation measures with a self-similarity index.
#[derive(Clone, Debug, PartialEq)]
pub struct DislocationSpec {
    gamma: f64,
    measures: Vec<Vec<DislocationAtom>>,
}

#[derive(Deserialize)]
struct AtomFile {
    w: f64,
    s: Vec<(f64, usize)>,
}

#[derive(Deserialize)]
struct SpecFile {
    gamma: f64,
    types: Vec<Vec<AtomFile>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelFile {
    gamma: f64,
    #[serde(default)]
    beta: f64,
    types: Vec<Vec<AtomFile>>,
    #[serde(default)]
    rename: Option<Vec<Vec<f64>>>,
}

fn parse_atoms(types: Vec<Vec<AtomFile>>) -> Result<Vec<Vec<DislocationAtom>>, FragError> {
    let mut measures = Vec::new();
    for (t, atoms) in types.into_iter().enumerate() {
        let mut v = Vec::new();
        for (a, atom) in atoms.into_iter().enumerate() {
            let s = rank_mass_partition(atom.s).map_err(|e| FragError::InvalidSpec(format!("type {}, atom {a}: {e}", t + 1)))?;
            v.push(DislocationAtom { w: atom.w, s });
        }
        measures.push(v);
    }
    Ok(measures)
}

impl DislocationSpec {
    pub fn new(gamma: f64, measures: Vec<Vec<DislocationAtom>>) -> Result<Self, FragError> {
        let kappa = measures.len();
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(FragError::InvalidSpec(format!("gamma must be positive, got {gamma}")));
        }
        for (t, atoms) in measures.iter().enumerate() {
            let i = t + 1;
            for (a, atom) in atoms.iter().enumerate() {
                let at = || format!("type {i}, atom {a}");
                if !(atom.w > 0.0 && atom.w.is_finite()) {
                    return Err(FragError::InvalidSpec(format!("{}: weight must be positive", at())));
                }
                if !atom.s.is_conservative() {
                    return Err(FragError::InvalidSpec(format!("{}: masses sum to {}", at(), atom.s.mass_sum())));
                }
                if atom.s.max_type() > kappa {
                    return Err(FragError::InvalidSpec(format!("{}: type beyond {kappa}", at())));
                }
                if atom.s.atoms().len() == 1 && atom.s.first().1 == i {
                    return Err(FragError::InvalidSpec(format!("{}: atom ((1,{i})) is not allowed", at())));
                }
            }
            if !atoms.iter().any(|a| a.s.first().0 < 1.0 - MASS_TOL) {
                return Err(FragError::InvalidSpec(format!("type {i}: no atom with s1 < 1")));
            }
        }
        Ok(DislocationSpec { gamma, measures })
    }

    /// Parses `{"gamma": g, "types": [[{"w": rate, "s": [[mass, type], ...]}, ...], ...]}`.
    pub fn from_json(text: &str) -> Result<Self, FragError> {
        let f: SpecFile = serde_json::from_str(text).map_err(|e| FragError::InvalidSpec(e.to_string()))?;
        Self::new(f.gamma, parse_atoms(f.types)?)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn kappa(&self) -> usize {
        self.measures.len()
    }

    pub fn atoms(&self, i: usize) -> &[DislocationAtom] {
        &self.measures[i - 1]
    }

    pub fn total_rate(&self, i: usize) -> f64 {
        self.atoms(i).iter().map(|a| a.w).sum()
    }

    /// ψ_i(q) = Σ w·Σ_n (s_n − s_n^{1+q})·1{i_n = i}, summed over the atoms.
    pub fn psi_direct(&self, i: usize, q: f64) -> f64 {
        self.atoms(i)
            .iter()
            .map(|a| a.w * a.s.atoms().iter().filter(|x| x.1 == i).map(|x| x.0 - x.0.powf(1.0 + q)).sum::<f64>())
            .sum()
    }

    /// Σ w·Σ_n s_n^{1+q}·1{i_n = j}, summed over the atoms of type i.
    pub fn switch_laplace_direct(&self, i: usize, j: usize, q: f64) -> f64 {
        self.atoms(i)
            .iter()
            .map(|a| a.w * a.s.atoms().iter().filter(|x| x.1 == j).map(|x| x.0.powf(1.0 + q)).sum::<f64>())
            .sum()
    }

    fn pick_atom(&self, i: usize, rng: &mut dyn RngCore) -> &DislocationAtom {
        let atoms = self.atoms(i);
        let mut u = rng.random::<f64>() * self.total_rate(i);
        for a in atoms {
            if u < a.w {
                return a;
            }
            u -= a.w;
        }
        &atoms[atoms.len() - 1]
    }
}

/// One jump of the tagged fragment: rate, increment of ξ, new type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapEvent {
    pub rate: f64,
    pub jump: f64,
    pub to: usize,
}

/// Characteristics of the Markov additive process (ξ, K) of the tagged fragment.
#[derive(Clone, Debug, PartialEq)]
pub struct MAPParams {
    events: Vec<Vec<MapEvent>>,
}

/// Size-biased part selection turns atom (w, s) into events of rate w·s_n.
pub fn map_params(d: &DislocationSpec) -> MAPParams {
    let events = (1..=d.kappa())
        .map(|i| {
            d.atoms(i)
                .iter()
                .flat_map(|a| a.s.atoms().iter().map(move |&(s, t)| MapEvent { rate: a.w * s, jump: -s.ln(), to: t }))
                .collect()
        })
        .collect();
    MAPParams { events }
}

impl MAPParams {
    pub fn kappa(&self) -> usize {
        self.events.len()
    }

    pub fn events(&self, i: usize) -> &[MapEvent] {
        &self.events[i - 1]
    }

    pub fn total_rate(&self, i: usize) -> f64 {
        self.events(i).iter().map(|e| e.rate).sum()
    }

    /// Laplace exponent of the subordinator running while the type is i.
    pub fn psi(&self, i: usize, q: f64) -> f64 {
        self.events(i).iter().filter(|e| e.to == i).map(|e| e.rate * (1.0 - (-q * e.jump).exp())).sum()
    }

    /// Rate of switching from type i to type j ≠ i.
    pub fn lambda(&self, i: usize, j: usize) -> f64 {
        self.events(i).iter().filter(|e| e.to == j).map(|e| e.rate).sum()
    }

    /// Law of the jump of ξ at an i→j switch, as (value, probability) atoms.
    pub fn switch_jump_law(&self, i: usize, j: usize) -> Vec<(f64, f64)> {
        let l = self.lambda(i, j);
        self.events(i).iter().filter(|e| e.to == j).map(|e| (e.jump, e.rate / l)).collect()
    }

    /// λ_ij·∫e^{−qx}B_ij(dx).
    pub fn switch_laplace(&self, i: usize, j: usize, q: f64) -> f64 {
        let l = self.lambda(i, j);
        if l == 0.0 {
            return 0.0;
        }
        l * self.switch_jump_law(i, j).iter().map(|(x, p)| p * (-q * x).exp()).sum::<f64>()
    }

    /// E_i[∫_0^∞ e^{−γξ_t} dt] for every starting type, by a linear solve.
    pub fn expected_absorption(&self, gamma: f64) -> Result<Vec<f64>, FragError> {
        let k = self.kappa();
        let mut a = vec![vec![0.0; k]; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            let r = self.total_rate(i + 1);
            a[i][i] = 1.0;
            rhs[i] = 1.0 / r;
            for e in self.events(i + 1) {
                a[i][e.to - 1] -= e.rate / r * (-gamma * e.jump).exp();
            }
        }
        solve_linear(a, rhs).ok_or(FragError::InfiniteAbsorption)
    }

    fn pick_event(&self, i: usize, rng: &mut dyn RngCore) -> MapEvent {
        let ev = self.events(i);
        let mut u = rng.random::<f64>() * self.total_rate(i);
        for e in ev {
            if u < e.rate {
                return *e;
            }
            u -= e.rate;
        }
        ev[ev.len() - 1]
    }
}

/// Gaussian elimination with partial pivoting; None when singular or when the
/// solution is not positive.
pub(crate) fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x][c].abs().partial_cmp(&a[y][c].abs()).unwrap())?;
        if a[p][c].abs() < 1e-14 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite() && *v > 0.0).then_some(x)
}

/// Piecewise-constant path of (ξ, K): segment k is [times[k], times[k+1]) with
/// values xi[k], types[k]; the last segment ends at `horizon`.
#[derive(Clone, Debug, PartialEq)]
pub struct MapPath {
    pub times: Vec<f64>,
    pub xi: Vec<f64>,
    pub types: Vec<usize>,
    pub horizon: f64,
}

pub fn simulate_map_path(p: &MAPParams, i: usize, horizon: f64, rng: &mut dyn RngCore) -> MapPath {
    let mut path = MapPath { times: vec![0.0], xi: vec![0.0], types: vec![i], horizon };
    let (mut t, mut xi, mut k) = (0.0, 0.0, i);
    loop {
        let wait: f64 = Exp1.sample(rng);
        t += wait / p.total_rate(k);
        if t >= horizon {
            return path;
        }
        let e = p.pick_event(k, rng);
        xi += e.jump;
        k = e.to;
        path.times.push(t);
        path.xi.push(xi);
        path.types.push(k);
    }
}

/// Runs the MAP until e^{−γξ} drops below `eps`.
pub fn simulate_map_until(p: &MAPParams, i: usize, gamma: f64, eps: f64, rng: &mut dyn RngCore, cap: usize) -> Result<MapPath, FragError> {
    let mut path = MapPath { times: vec![0.0], xi: vec![0.0], types: vec![i], horizon: 0.0 };
    let (mut t, mut xi, mut k) = (0.0, 0.0, i);
    while (-gamma * xi).exp() >= eps {
        if path.times.len() > cap {
            return Err(FragError::EventCapExceeded(cap));
        }
        let wait: f64 = Exp1.sample(rng);
        t += wait / p.total_rate(k);
        let e = p.pick_event(k, rng);
        xi += e.jump;
        k = e.to;
        path.times.push(t);
        path.xi.push(xi);
        path.types.push(k);
    }
    path.horizon = t;
    Ok(path)
}

/// Lamperti-transformed path X = exp(−ξ∘ρ) with its (truncated) absorption time.
#[derive(Clone, Debug, PartialEq)]
pub struct LampertiPath {
    /// Lamperti times of the segment starts.
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub types: Vec<usize>,
    /// ∫_0^horizon e^{−γξ_t} dt.
    pub d1_truncated: f64,
    /// Expected value of the remaining integral past the horizon.
    pub tail_mean: f64,
}

impl LampertiPath {
    pub fn d1(&self) -> f64 {
        self.d1_truncated + self.tail_mean
    }
}

/// Exact piecewise time change: each constancy interval of ξ contributes
/// length·e^{−γξ}. The tail past the horizon is reported as its conditional
/// mean given the final type; `tail_tol` turns an oversized tail into an error.
pub fn lamperti_transform(path: &MapPath, p: &MAPParams, gamma: f64, tail_tol: Option<f64>) -> Result<LampertiPath, FragError> {
    let n = path.times.len();
    let mut times = Vec::with_capacity(n);
    let mut acc = 0.0;
    for k in 0..n {
        times.push(acc);
        let end = if k + 1 < n { path.times[k + 1] } else { path.horizon };
        acc += (end - path.times[k]) * (-gamma * path.xi[k]).exp();
    }
    let m = p.expected_absorption(gamma)?;
    let tail_mean = (-gamma * path.xi[n - 1]).exp() * m[path.types[n - 1] - 1];
    if let Some(tol) = tail_tol {
        if tail_mean > tol {
            return Err(FragError::HorizonTooShort { tail: tail_mean, tol });
        }
    }
    Ok(LampertiPath {
        times,
        x: path.xi.iter().map(|v| (-v).exp()).collect(),
        types: path.types.clone(),
        d1_truncated: acc,
        tail_mean,
    })
}

/// Absorption time of the tagged fragment started from type i, with the
/// horizon extended until e^{−γξ} < eps.
pub fn absorption_time(p: &MAPParams, i: usize, gamma: f64, eps: f64, rng: &mut dyn RngCore) -> Result<LampertiPath, FragError> {
    let path = simulate_map_until(p, i, gamma, eps, rng, DEFAULT_EVENT_CAP)?;
    lamperti_transform(&path, p, gamma, None)
}

/// Density of the first mass under the Brownian dislocation measure, x ∈ [1/2, 1).
pub fn brownian_density(x: f64) -> f64 {
    if !(0.5..1.0).contains(&x) {
        return 0.0;
    }
    (2.0 / (std::f64::consts::PI * x.powi(3) * (1.0 - x).powi(3))).sqrt()
}

/// Total mass of the (1 − s₁)-weighted Brownian measure, 2√(2/π).
pub fn brownian_biased_mass() -> f64 {
    2.0 * (2.0 / std::f64::consts::PI).sqrt()
}

/// s₁ drawn from the normalized (1 − s₁)-weighted Brownian measure by inversion:
/// its CDF on [1/2, 1) is 1 − √((1−x)/x).
pub fn brownian_biased_s1(rng: &mut dyn RngCore) -> f64 {
    let v = 1.0 - rng.random::<f64>();
    1.0 / (1.0 + v * v)
}

/// Binary conservative split ((s₁,1),(1−s₁,1)) with s₁ from the biased sampler.
pub fn brownian_split_sample(rng: &mut dyn RngCore) -> MassPartition {
    let s1 = brownian_biased_s1(rng);
    rank_mass_partition(vec![(s1, 1), (1.0 - s1, 1)]).expect("binary split is a mass partition")
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginalNode {
    pub parent: Option<usize>,
    pub height: f64,
    pub ty: usize,
    pub label: Option<usize>,
}

/// Rooted tree with real heights whose labeled leaves are the sampled points.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalTree {
    pub nodes: Vec<MarginalNode>,
}

impl MarginalTree {
    pub fn with_root(ty: usize) -> Self {
        MarginalTree { nodes: vec![MarginalNode { parent: None, height: 0.0, ty, label: None }] }
    }

    pub fn add_internal(&mut self, parent: usize, height: f64, ty: usize) -> usize {
        self.nodes.push(MarginalNode { parent: Some(parent), height, ty, label: None });
        self.nodes.len() - 1
    }

    pub fn add_leaf(&mut self, parent: usize, height: f64, ty: usize, label: usize) -> usize {
        self.nodes.push(MarginalNode { parent: Some(parent), height, ty, label: Some(label) });
        self.nodes.len() - 1
    }

    pub fn leaf(&self, label: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.label == Some(label))
    }

    pub fn leaf_depth(&self, label: usize) -> Option<f64> {
        self.leaf(label).map(|v| self.nodes[v].height)
    }

    /// Height at which the lineages of two labels separate.
    pub fn split_height(&self, a: usize, b: usize) -> Option<f64> {
        let (x, y) = (self.leaf(a)?, self.leaf(b)?);
        let mut anc = Vec::new();
        let mut u = Some(x);
        while let Some(v) = u {
            anc.push(v);
            u = self.nodes[v].parent;
        }
        let mut u = Some(y);
        while let Some(v) = u {
            if anc.contains(&v) {
                return Some(self.nodes[v].height);
            }
            u = self.nodes[v].parent;
        }
        None
    }
}

impl LabeledTree for MarginalTree {
    fn labeled_nodes(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = self.nodes.iter().enumerate().filter_map(|(k, n)| n.label.map(|l| (l, k))).collect();
        v.sort();
        v
    }
    fn parent_of(&self, node: usize) -> Option<usize> {
        self.nodes[node].parent
    }
    fn height_of(&self, node: usize) -> f64 {
        self.nodes[node].height
    }
}

/// Residual lifetime of a single tagged leaf holding mass x of type j:
/// event by event until x^γ < eps.
fn one_leaf_lifetime(d: &DislocationSpec, mut x: f64, mut j: usize, eps: f64, rng: &mut dyn RngCore, cap: usize) -> Result<f64, FragError> {
    let g = d.gamma();
    let mut t = 0.0;
    let mut events = 0;
    while x.powf(g) >= eps {
        events += 1;
        if events > cap {
            return Err(FragError::EventCapExceeded(cap));
        }
        let wait: f64 = Exp1.sample(rng);
        t += wait * x.powf(g) / d.total_rate(j);
        let a = d.pick_atom(j, rng);
        let m = interval_of(a.s.atoms(), rng.random::<f64>());
        let (s, ty) = a.s.atoms()[m];
        x *= s;
        j = ty;
    }
    Ok(t)
}

/// Marginal of the fragmentation tree spanned by k tagged leaves.
pub fn simulate_marginal_tree(d: &DislocationSpec, i: usize, k: usize, rng: &mut dyn RngCore) -> Result<MarginalTree, FragError> {
    simulate_marginal_tree_capped(d, i, k, rng, DEFAULT_EVENT_CAP)
}

pub fn simulate_marginal_tree_capped(d: &DislocationSpec, i: usize, k: usize, rng: &mut dyn RngCore, cap: usize) -> Result<MarginalTree, FragError> {
    if k == 0 {
        return Err(FragError::NoLeaves);
    }
    const LEAF_EPS: f64 = 1e-10;
    let g = d.gamma();
    let mut tree = MarginalTree::with_root(i);
    let mut stack = vec![(1.0f64, i, (1..=k).collect::<Vec<usize>>(), 0usize, 0.0f64)];
    let mut events = 0usize;
    while let Some((mut x, mut j, labels, parent, mut h)) = stack.pop() {
        if labels.len() == 1 {
            let life = one_leaf_lifetime(d, x, j, LEAF_EPS, rng, cap)?;
            tree.add_leaf(parent, h + life, j, labels[0]);
            continue;
        }
        loop {
            events += 1;
            if events > cap {
                return Err(FragError::EventCapExceeded(cap));
            }
            let wait: f64 = Exp1.sample(rng);
            h += wait * x.powf(g) / d.total_rate(j);
            let a = d.pick_atom(j, rng);
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &l in &labels {
                groups.entry(interval_of(a.s.atoms(), rng.random::<f64>())).or_default().push(l);
            }
            if groups.len() == 1 {
                let m = *groups.keys().next().unwrap();
                let (s, ty) = a.s.atoms()[m];
                x *= s;
                j = ty;
                continue;
            }
            let node = tree.add_internal(parent, h, j);
            for (m, group) in groups {
                let (s, ty) = a.s.atoms()[m];
                stack.push((x * s, ty, group, node, h));
            }
            break;
        }
    }
    Ok(tree)
}

/// MB kernel built from finite dislocation measures: at size m ≥ 2 and type i
/// a particle splits with probability min(1, R_i·m^{−γ}) along an atom chosen
/// by weight (masses rounded to integers by largest remainder), renames to
/// type j with probability r_ij·m^{−β} (capped by what is left), and otherwise
/// stays as ((m, i)). Size-one particles die.
#[derive(Clone, Debug)]
pub struct DiscretizedKernel {
    gamma: f64,
    beta: f64,
    measures: Vec<Vec<DislocationAtom>>,
    rename: Vec<Vec<f64>>,
}

impl DiscretizedKernel {
    /// `measures[i]` may be empty (null measure) provided type i can rename.
    pub fn new(gamma: f64, beta: f64, measures: Vec<Vec<DislocationAtom>>, rename: Vec<Vec<f64>>) -> Result<Self, FragError> {
        let k = measures.len();
        if rename.len() != k || rename.iter().any(|r| r.len() != k || r.iter().any(|v| *v < 0.0)) {
            return Err(FragError::InvalidSpec("rename matrix must be κ×κ and nonnegative".into()));
        }
        // every type must reach a type that can split
        let splits: Vec<bool> = measures.iter().map(|m| !m.is_empty()).collect();
        for i in 0..k {
            let mut seen = vec![false; k];
            let mut stack = vec![i];
            let mut ok = false;
            while let Some(u) = stack.pop() {
                if seen[u] {
                    continue;
                }
                seen[u] = true;
                ok |= splits[u];
                for v in 0..k {
                    if v != u && rename[u][v] > 0.0 {
                        stack.push(v);
                    }
                }
            }
            if !ok {
                return Err(FragError::InvalidSpec(format!("type {} never reaches a splitting type", i + 1)));
            }
        }
        Ok(DiscretizedKernel { gamma, beta, measures, rename })
    }

    /// Same atom format as [`DislocationSpec::from_json`] plus optional
    /// `"beta"` (default 0) and a κ×κ `"rename"` matrix (default zero).
    /// Atom types may be empty here.
    pub fn from_json(text: &str) -> Result<Self, FragError> {
        let f: KernelFile = serde_json::from_str(text).map_err(|e| FragError::InvalidSpec(e.to_string()))?;
        if !(f.gamma > 0.0 && f.gamma.is_finite()) {
            return Err(FragError::InvalidSpec(format!("gamma must be positive, got {}", f.gamma)));
        }
        let measures = parse_atoms(f.types)?;
        let k = measures.len();
        for (t, atoms) in measures.iter().enumerate() {
            for (a, atom) in atoms.iter().enumerate() {
                if !(atom.w > 0.0 && atom.w.is_finite()) || !atom.s.is_conservative() || atom.s.max_type() > k {
                    return Err(FragError::InvalidSpec(format!("type {}, atom {a}: bad weight, masses or type", t + 1)));
                }
            }
        }
        let rename = f.rename.unwrap_or_else(|| vec![vec![0.0; k]; k]);
        Self::new(f.gamma, f.beta, measures, rename)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn from_spec(d: &DislocationSpec) -> Self {
        let k = d.kappa();
        DiscretizedKernel { gamma: d.gamma, beta: 0.0, measures: d.measures.clone(), rename: vec![vec![0.0; k]; k] }
    }

    fn rates(&self, m: usize, i: usize) -> (f64, f64) {
        let r: f64 = self.measures[i - 1].iter().map(|a| a.w).sum();
        let split = (r * (m as f64).powf(-self.gamma)).min(1.0);
        let ren: f64 = self.rename[i - 1].iter().enumerate().filter(|(j, _)| *j != i - 1).map(|(_, v)| v).sum();
        let ren = (ren * (m as f64).powf(-self.beta)).min(1.0 - split);
        (split, ren)
    }

    fn law(&self, m: usize, i: usize) -> Vec<(DiscreteTypedPartition, f64)> {
        if m <= 1 {
            return vec![(DiscreteTypedPartition::empty(m), 1.0)];
        }
        let (split, ren) = self.rates(m, i);
        let mut law: BTreeMap<DiscreteTypedPartition, f64> = BTreeMap::new();
        let r: f64 = self.measures[i - 1].iter().map(|a| a.w).sum();
        for a in &self.measures[i - 1] {
            *law.entry(discretize(&a.s, m)).or_insert(0.0) += split * a.w / r;
        }
        let rsum: f64 = self.rename[i - 1].iter().enumerate().filter(|(j, _)| *j != i - 1).map(|(_, v)| v).sum();
        for (j, &v) in self.rename[i - 1].iter().enumerate() {
            if j != i - 1 && v > 0.0 {
                *law.entry(single(m, j + 1)).or_insert(0.0) += ren * v / rsum;
            }
        }
        let stay = 1.0 - split - ren;
        if stay > 0.0 {
            *law.entry(single(m, i)).or_insert(0.0) += stay;
        }
        law.into_iter().collect()
    }
}

fn single(m: usize, ty: usize) -> DiscreteTypedPartition {
    DiscreteTypedPartition::new(vec![Part::new(m, ty)], m, false).expect("single part")
}

/// Integer parts of m·s summing to m: floors, then the remainder goes to the
/// largest fractional parts (earlier atoms first on ties). Empty parts vanish.
pub fn discretize(s: &MassPartition, m: usize) -> DiscreteTypedPartition {
    let raw: Vec<f64> = s.atoms().iter().map(|a| a.0 * m as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut rest = m.saturating_sub(sizes.iter().sum());
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).partial_cmp(&(raw[a] - raw[a].floor())).unwrap().then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[k] += 1;
        rest -= 1;
    }
    let parts = sizes
        .iter()
        .zip(s.atoms())
        .filter(|(n, _)| **n > 0)
        .map(|(&n, a)| Part::new(n, a.1))
        .collect();
    DiscreteTypedPartition::ranked(parts, m, false).expect("rounded parts form a partition")
}

impl SplittingKernel for DiscretizedKernel {
    fn kappa(&self) -> usize {
        self.measures.len()
    }

    fn sample(&self, m: usize, i: usize, rng: &mut dyn RngCore) -> Result<DiscreteTypedPartition, KernelError> {
        if i == 0 || i > self.kappa() {
            return Err(KernelError::InvalidType(i));
        }
        if m <= 1 {
            return Ok(DiscreteTypedPartition::empty(m));
        }
        let (split, ren) = self.rates(m, i);
        let u = rng.random::<f64>();
        if u < split {
            let atoms = &self.measures[i - 1];
            let r: f64 = atoms.iter().map(|a| a.w).sum();
            let mut v = rng.random::<f64>() * r;
            for a in atoms {
                if v < a.w {
                    return Ok(discretize(&a.s, m));
                }
                v -= a.w;
            }
            return Ok(discretize(&atoms[atoms.len() - 1].s, m));
        }
        if u < split + ren {
            let row = &self.rename[i - 1];
            let total: f64 = row.iter().enumerate().filter(|(j, _)| *j != i - 1).map(|(_, v)| v).sum();
            let mut v = rng.random::<f64>() * total;
            let mut last = i;
            for (j, &w) in row.iter().enumerate() {
                if j == i - 1 || w == 0.0 {
                    continue;
                }
                last = j + 1;
                if v < w {
                    return Ok(single(m, j + 1));
                }
                v -= w;
            }
            return Ok(single(m, last));
        }
        Ok(single(m, i))
    }

    fn support(&self, n: usize, i: usize) -> Option<Vec<(DiscreteTypedPartition, f64)>> {
        Some(self.law(n, i))
    }

    fn conservative_from(&self) -> Option<usize> {
        Some(2)
    }
}
