//! Typed partitions (discrete and mass), the rank map, paintbox sampling and
//! the Prokhorov metric between mass partitions.
//!
//! Types are 1-based everywhere in this module; type 0 only marks empty mass.

use rand::{Rng, RngCore};
use std::cmp::Ordering;
use thiserror::Error;

/// Tolerance for "masses sum to one".
pub const MASS_TOL: f64 = 1e-12;
/// Tolerance for comparing total masses of two measures.
pub const MEASURE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("invalid typed partition of {total}: {reason}")]
    InvalidDiscrete { total: usize, reason: String },
    #[error("masses sum to {0}, exceeding 1")]
    MassOverflow(f64),
    #[error("invalid atom ({mass}, {ty}): {reason}")]
    InvalidAtom { mass: f64, ty: usize, reason: String },
    #[error("partition is not conservative (sum of masses {0})")]
    NotConservative(f64),
    #[error("paintbox needs k >= 1")]
    EmptyGroundSet,
    #[error("measures have different total mass ({0} vs {1})")]
    MassMismatch(f64, f64),
    #[error("malformed mass partition JSON: {0}")]
    Json(String),
}

/// A part of a discrete typed partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Part {
    pub size: usize,
    pub ty: usize,
}

impl Part {
    pub fn new(size: usize, ty: usize) -> Self {
        Part { size, ty }
    }
}

fn rank_order(a: &Part, b: &Part) -> Ordering {
    b.size.cmp(&a.size).then(b.ty.cmp(&a.ty))
}

/// Checks the typed-partition invariants for `parts` as a partition of `total`.
pub fn validate_partition(parts: &[Part], total: usize, allow_zero: bool) -> bool {
    let mut sum = 0usize;
    for (k, p) in parts.iter().enumerate() {
        if p.ty == 0 || (!allow_zero && p.size == 0) {
            return false;
        }
        sum += p.size;
        if k > 0 && rank_order(&parts[k - 1], p) == Ordering::Greater {
            return false;
        }
    }
    sum <= total
}

/// Lexicographically nonincreasing list of (size, type) parts of an integer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiscreteTypedPartition {
    parts: Vec<Part>,
    total: usize,
    allow_zero: bool,
}

impl DiscreteTypedPartition {
    /// Builds a partition from parts already in canonical order.
    pub fn new(parts: Vec<Part>, total: usize, allow_zero: bool) -> Result<Self, PartitionError> {
        if !validate_partition(&parts, total, allow_zero) {
            return Err(PartitionError::InvalidDiscrete {
                total,
                reason: format!("{parts:?}"),
            });
        }
        Ok(DiscreteTypedPartition { parts, total, allow_zero })
    }

    /// Sorts the parts into canonical order first.
    pub fn ranked(mut parts: Vec<Part>, total: usize, allow_zero: bool) -> Result<Self, PartitionError> {
        parts.sort_by(rank_order);
        Self::new(parts, total, allow_zero)
    }

    pub fn empty(total: usize) -> Self {
        DiscreteTypedPartition { parts: Vec::new(), total, allow_zero: false }
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn allow_zero(&self) -> bool {
        self.allow_zero
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn size_sum(&self) -> usize {
        self.parts.iter().map(|p| p.size).sum()
    }

    pub fn is_valid(&self) -> bool {
        validate_partition(&self.parts, self.total, self.allow_zero)
    }

    pub fn is_valid_for(&self, kappa: usize) -> bool {
        self.is_valid() && self.parts.iter().all(|p| p.ty <= kappa)
    }

    pub fn is_conservative(&self) -> bool {
        self.size_sum() == self.total
    }

    /// Number of parts equal to (size, ty).
    pub fn multiplicity(&self, size: usize, ty: usize) -> usize {
        self.parts.iter().filter(|p| p.size == size && p.ty == ty).count()
    }

    /// The rescaled mass partition λ/n; zero-size parts are dropped.
    pub fn to_mass(&self) -> MassPartition {
        let n = self.total as f64;
        let atoms = self
            .parts
            .iter()
            .filter(|p| p.size > 0)
            .map(|p| (p.size as f64 / n, p.ty))
            .collect();
        MassPartition { atoms }
    }
}

/// Ranked list of (mass, type) atoms with total mass at most one.
#[derive(Clone, Debug, PartialEq)]
pub struct MassPartition {
    atoms: Vec<(f64, usize)>,
}

/// Sorts atoms by decreasing mass, ties by decreasing type, after validation.
pub fn rank_mass_partition(mut atoms: Vec<(f64, usize)>) -> Result<MassPartition, PartitionError> {
    let mut sum = 0.0;
    for &(mass, ty) in &atoms {
        if !mass.is_finite() || !(0.0..=1.0).contains(&mass) {
            return Err(PartitionError::InvalidAtom { mass, ty, reason: "mass outside [0,1]".into() });
        }
        if (mass == 0.0) != (ty == 0) {
            return Err(PartitionError::InvalidAtom { mass, ty, reason: "type 0 iff mass 0".into() });
        }
        sum += mass;
    }
    if sum > 1.0 + MASS_TOL {
        return Err(PartitionError::MassOverflow(sum));
    }
    atoms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(b.1.cmp(&a.1)));
    Ok(MassPartition { atoms })
}

impl MassPartition {
    pub fn empty() -> Self {
        MassPartition { atoms: Vec::new() }
    }

    pub fn atoms(&self) -> &[(f64, usize)] {
        &self.atoms
    }

    pub fn mass_sum(&self) -> f64 {
        self.atoms.iter().map(|a| a.0).sum()
    }

    /// Dust: one minus the total mass of the atoms.
    pub fn s0(&self) -> f64 {
        (1.0 - self.mass_sum()).max(0.0)
    }

    /// Largest mass and its type, or (0, 0) when empty.
    pub fn first(&self) -> (f64, usize) {
        self.atoms.first().copied().unwrap_or((0.0, 0))
    }

    pub fn is_conservative(&self) -> bool {
        (self.mass_sum() - 1.0).abs() <= MASS_TOL
    }

    pub fn max_type(&self) -> usize {
        self.atoms.iter().map(|a| a.1).max().unwrap_or(0)
    }

    /// JSON array of `[mass, type]`, masses printed with 16 significant digits.
    pub fn to_json(&self) -> String {
        let body: Vec<String> = self.atoms.iter().map(|(m, t)| format!("[{m:.15e},{t}]")).collect();
        format!("[{}]", body.join(","))
    }

    pub fn from_json(s: &str) -> Result<Self, PartitionError> {
        let raw: Vec<(f64, usize)> = serde_json::from_str(s).map_err(|e| PartitionError::Json(e.to_string()))?;
        rank_mass_partition(raw)
    }
}

/// Partition of {1..k} into typed blocks ordered by least element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypedSetPartition {
    pub blocks: Vec<(Vec<usize>, usize)>,
}

impl TypedSetPartition {
    /// Block index containing element `x`.
    pub fn block_of(&self, x: usize) -> Option<usize> {
        self.blocks.iter().position(|(b, _)| b.contains(&x))
    }
}

/// Index of the interval of a conservative partition hit by `u` in [0,1).
pub(crate) fn interval_of(atoms: &[(f64, usize)], u: f64) -> usize {
    let mut acc = 0.0;
    for (m, a) in atoms.iter().enumerate() {
        acc += a.0;
        if u < acc {
            return m;
        }
    }
    atoms.len() - 1
}

/// Paintbox partition of {1..k} driven by a conservative mass partition.
pub fn paintbox_sample(s: &MassPartition, k: usize, rng: &mut dyn RngCore) -> Result<TypedSetPartition, PartitionError> {
    if !s.is_conservative() {
        return Err(PartitionError::NotConservative(s.mass_sum()));
    }
    if k == 0 {
        return Err(PartitionError::EmptyGroundSet);
    }
    let mut slot: Vec<Option<usize>> = vec![None; s.atoms.len()];
    let mut blocks: Vec<(Vec<usize>, usize)> = Vec::new();
    for j in 1..=k {
        let m = interval_of(&s.atoms, rng.random::<f64>());
        match slot[m] {
            Some(b) => blocks[b].0.push(j),
            None => {
                slot[m] = Some(blocks.len());
                blocks.push((vec![j], s.atoms[m].1));
            }
        }
    }
    Ok(TypedSetPartition { blocks })
}

/// Finite atomic measure on Euclidean space.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomicMeasure {
    pub atoms: Vec<(Vec<f64>, f64)>,
}

impl AtomicMeasure {
    pub fn new(atoms: Vec<(Vec<f64>, f64)>) -> Self {
        AtomicMeasure { atoms }
    }

    pub fn total(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    /// s₀δ₀ + Σ sₙ δ_{sₙ e_{iₙ}} in dimension `dim`.
    pub fn from_partition(s: &MassPartition, dim: usize) -> Self {
        let mut atoms = Vec::with_capacity(s.atoms.len() + 1);
        atoms.push((vec![0.0; dim], s.s0()));
        for &(m, t) in &s.atoms {
            let mut x = vec![0.0; dim];
            x[t - 1] = m;
            atoms.push((x, m));
        }
        AtomicMeasure { atoms }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    let mut s = 0.0;
    for k in 0..n {
        let d = a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0);
        s += d * d;
    }
    s.sqrt()
}

/// Dinic max-flow on a small dense bipartite graph.
struct FlowNet {
    cap: Vec<Vec<f64>>,
}

const FLOW_EPS: f64 = 1e-15;

impl FlowNet {
    fn max_flow(mut self, s: usize, t: usize) -> f64 {
        let n = self.cap.len();
        let mut total = 0.0;
        loop {
            let mut level = vec![usize::MAX; n];
            level[s] = 0;
            let mut queue = std::collections::VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for v in 0..n {
                    if level[v] == usize::MAX && self.cap[u][v] > FLOW_EPS {
                        level[v] = level[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            if level[t] == usize::MAX {
                return total;
            }
            let mut next = vec![0usize; n];
            loop {
                let f = self.push(s, t, f64::INFINITY, &level, &mut next);
                if f <= FLOW_EPS {
                    break;
                }
                total += f;
            }
        }
    }

    fn push(&mut self, u: usize, t: usize, limit: f64, level: &[usize], next: &mut [usize]) -> f64 {
        if u == t {
            return limit;
        }
        let n = self.cap.len();
        while next[u] < n {
            let v = next[u];
            if level[v] == level[u] + 1 && self.cap[u][v] > FLOW_EPS {
                let f = self.push(v, t, limit.min(self.cap[u][v]), level, next);
                if f > FLOW_EPS {
                    self.cap[u][v] -= f;
                    self.cap[v][u] += f;
                    return f;
                }
            }
            next[u] += 1;
        }
        0.0
    }
}

/// Mass that can be matched within distance `eps`.
fn matched_mass(mu: &AtomicMeasure, nu: &AtomicMeasure, dist: &[Vec<f64>], eps: f64) -> f64 {
    let (a, b) = (mu.atoms.len(), nu.atoms.len());
    let n = a + b + 2;
    let (s, t) = (a + b, a + b + 1);
    let mut cap = vec![vec![0.0; n]; n];
    for i in 0..a {
        cap[s][i] = mu.atoms[i].1;
        for j in 0..b {
            if dist[i][j] <= eps {
                cap[i][a + j] = f64::INFINITY;
            }
        }
    }
    for j in 0..b {
        cap[a + j][t] = nu.atoms[j].1;
    }
    FlowNet { cap }.max_flow(s, t)
}

/// Prokhorov distance between two finite atomic measures of equal mass.
///
/// The unmatched mass g(ε) is a step function of ε that only moves at pairwise
/// atom distances, so the infimum of {ε : g(ε) ≤ ε} is found exactly by a binary
/// search over those breakpoints followed by one comparison inside the winning
/// interval.
pub fn prokhorov_distance(mu: &AtomicMeasure, nu: &AtomicMeasure) -> Result<f64, PartitionError> {
    let (tm, tn) = (mu.total(), nu.total());
    if (tm - tn).abs() > MEASURE_TOL {
        return Err(PartitionError::MassMismatch(tm, tn));
    }
    let dist: Vec<Vec<f64>> = mu
        .atoms
        .iter()
        .map(|(x, _)| nu.atoms.iter().map(|(y, _)| euclid(x, y)).collect())
        .collect();
    let mut breaks: Vec<f64> = dist.iter().flatten().copied().collect();
    breaks.push(0.0);
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup();
    let unmatched = |k: usize| (tm - matched_mass(mu, nu, &dist, breaks[k])).max(0.0);
    let upper = |k: usize| breaks.get(k + 1).copied().unwrap_or(f64::INFINITY);
    // first k with g(breaks[k]) < breaks[k+1]; the predicate is monotone in k
    let (mut lo, mut hi) = (0usize, breaks.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if unmatched(mid) < upper(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(breaks[lo].max(unmatched(lo)).min(tm.max(tn)))
}

/// Prokhorov distance between the measures attached to two mass partitions.
pub fn partition_distance(a: &MassPartition, b: &MassPartition) -> f64 {
    let dim = a.max_type().max(b.max_type()).max(1);
    let mu = AtomicMeasure::from_partition(a, dim);
    let nu = AtomicMeasure::from_partition(b, dim);
    prokhorov_distance(&mu, &nu).expect("partition measures both have mass one")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn parts(v: &[(usize, usize)]) -> Vec<Part> {
        v.iter().map(|&(s, t)| Part::new(s, t)).collect()
    }

    #[test]
    fn validate_examples() {
        assert!(validate_partition(&parts(&[(3, 1), (2, 2)]), 5, false));
        assert!(!validate_partition(&parts(&[(2, 2), (3, 1)]), 5, false));
        assert!(!validate_partition(&parts(&[(2, 1), (2, 2)]), 4, false));
        assert!(validate_partition(&[], 0, false));
        assert!(!validate_partition(&parts(&[(3, 1), (0, 2)]), 3, false));
        assert!(validate_partition(&parts(&[(3, 1), (0, 2)]), 3, true));
        assert!(!validate_partition(&parts(&[(3, 1), (2, 1)]), 4, false));
    }

    #[test]
    fn rank_examples() {
        let r = rank_mass_partition(vec![(0.2, 2), (0.5, 1)]).unwrap();
        assert_eq!(r.atoms(), &[(0.5, 1), (0.2, 2)]);
        let r = rank_mass_partition(vec![(0.3, 1), (0.3, 2)]).unwrap();
        assert_eq!(r.atoms(), &[(0.3, 2), (0.3, 1)]);
        let r = rank_mass_partition(vec![]).unwrap();
        assert_eq!(r.s0(), 1.0);
        assert!(rank_mass_partition(vec![(0.7, 1), (0.7, 1)]).is_err());
        assert!(rank_mass_partition(vec![(0.0, 1)]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let r = rank_mass_partition(vec![(1.0 / 3.0, 1), (0.25, 2)]).unwrap();
        let s = r.to_json();
        assert!(s.contains("3.333333333333333e-1"));
        assert_eq!(MassPartition::from_json(&s).unwrap().atoms()[1], (0.25, 2));
    }

    #[test]
    fn paintbox_single_block() {
        let s = rank_mass_partition(vec![(1.0, 3)]).unwrap();
        let p = paintbox_sample(&s, 5, &mut stream(1, 0)).unwrap();
        assert_eq!(p.blocks, vec![(vec![1, 2, 3, 4, 5], 3)]);
        let bad = rank_mass_partition(vec![(0.5, 1)]).unwrap();
        assert!(paintbox_sample(&bad, 2, &mut stream(1, 0)).is_err());
    }

    #[test]
    fn paintbox_pair_frequencies() {
        let s = rank_mass_partition(vec![(0.5, 1), (0.5, 2)]).unwrap();
        let mut rng = stream(2, 0);
        let n = 100_000;
        let (mut same, mut first_type1) = (0usize, 0usize);
        for _ in 0..n {
            let p = paintbox_sample(&s, 2, &mut rng).unwrap();
            if p.blocks.len() == 1 {
                same += 1;
            }
            if p.blocks[0].1 == 1 {
                first_type1 += 1;
            }
        }
        // exact value 1/2 each; sd of the frequency is 0.5/sqrt(n)
        let sd = 0.5 / (n as f64).sqrt();
        assert!((same as f64 / n as f64 - 0.5).abs() < 4.0 * sd);
        assert!((first_type1 as f64 / n as f64 - 0.5).abs() < 4.0 * sd);
    }

    #[test]
    fn prokhorov_point_masses() {
        let o = AtomicMeasure::new(vec![(vec![0.0, 0.0], 1.0)]);
        let x = AtomicMeasure::new(vec![(vec![0.3, 0.0], 1.0)]);
        assert!((prokhorov_distance(&o, &x).unwrap() - 0.3).abs() < 1e-12);
        let far = AtomicMeasure::new(vec![(vec![2.0, 0.0], 1.0)]);
        assert!((prokhorov_distance(&o, &far).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(prokhorov_distance(&x, &x).unwrap(), 0.0);
        let half = AtomicMeasure::new(vec![(vec![0.0], 0.5)]);
        assert!(prokhorov_distance(&o, &half).is_err());
    }

    #[test]
    fn partition_distance_examples() {
        let a = rank_mass_partition(vec![(1.0, 1)]).unwrap();
        let b = rank_mass_partition(vec![(1.0, 2)]).unwrap();
        // δ_{e1} vs δ_{e2}: distance √2 exceeds the unit mass budget
        assert!((partition_distance(&a, &b) - 1.0).abs() < 1e-12);
        assert_eq!(partition_distance(&a, &a), 0.0);
        let c = rank_mass_partition(vec![(0.5, 1), (0.5, 1)]).unwrap();
        // all mass moves from e1 to e1/2 at distance 1/2
        assert!((partition_distance(&a, &c) - 0.5).abs() < 1e-12);
    }
}
