//! Multi-type Galton-Watson trees conditioned on their number of type-1
//! vertices: Perron data, exact counting tables, the induced MB splitting
//! kernel, Kesten biasing, extinct-conditioned offspring and related checks.
//!
//! Public functions take 1-based types; vectors indexed by type are 0-based
//! (entry 0 is type 1).

use crate::mb::{sample_mb_tree, KernelError, MBTree, MbError, SampleOptions, SplittingKernel};
use crate::partitions::{DiscreteTypedPartition, Part};
use rand::{Rng, RngCore};
use serde::Deserialize;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_N_MAX_CEILING: usize = 5000;
/// Largest n for which the kernel lists its support.
pub const SUPPORT_LIMIT: usize = 24;
const CRITICAL_TOL: f64 = 1e-8;
const POWER_TOL: f64 = 1e-13;
const POWER_MAX_ITER: usize = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GwError {
    #[error("invalid offspring law: {0}")]
    InvalidSpec(String),
    #[error("mean matrix is not irreducible")]
    NotIrreducible,
    #[error("spectral radius {0} differs from 1")]
    NotCritical(f64),
    #[error("no type can have two or more children")]
    Singular,
    #[error("power iteration did not converge")]
    NoConvergence,
    #[error("fixed-point iteration for extinction masses did not converge")]
    Divergent,
    #[error("N_max {n} exceeds the ceiling {ceiling}")]
    CeilingExceeded { n: usize, ceiling: usize },
    #[error("census oracle needs types other than 1 to bear only type-1 children")]
    CensusUnsupported,
}

/// Finite-support offspring laws of a κ-type Galton-Watson tree.
#[derive(Clone, Debug)]
pub struct GWSpec {
    kappa: usize,
    offspring: Vec<Vec<(Vec<u32>, f64)>>,
    perron: PerronData,
}

#[derive(Deserialize)]
struct EntryFile {
    z: Vec<u32>,
    p: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecFile {
    Wrapped { offspring: Vec<Vec<EntryFile>> },
    Bare(Vec<Vec<EntryFile>>),
}

/// Mean matrix, normalized Perron vectors and second-moment constants.
#[derive(Clone, Debug, PartialEq)]
pub struct PerronData {
    pub m: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// q[i][j][k] = Σ_z ζ^i(z)·z_j·(z_k − 1{j=k}).
    pub q: Vec<Vec<Vec<f64>>>,
    pub sigma2: f64,
    pub sigma1_2: f64,
    pub qmat: Vec<Vec<f64>>,
    pub chi: Vec<f64>,
    pub spectral_radius: f64,
}

impl GWSpec {
    /// Validates and derives Perron data. `offspring[i]` lists (z, probability)
    /// for type i+1; duplicate z are merged.
    pub fn new(offspring: Vec<Vec<(Vec<u32>, f64)>>) -> Result<Self, GwError> {
        let kappa = offspring.len();
        if kappa == 0 {
            return Err(GwError::InvalidSpec("no types".into()));
        }
        let mut merged = Vec::with_capacity(kappa);
        for (i, law) in offspring.into_iter().enumerate() {
            if law.is_empty() {
                return Err(GwError::InvalidSpec(format!("type {}: empty law", i + 1)));
            }
            let mut m: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
            let mut total = 0.0;
            for (k, (z, p)) in law.into_iter().enumerate() {
                if z.len() != kappa {
                    return Err(GwError::InvalidSpec(format!("type {}, entry {k}: z has length {}, expected {kappa}", i + 1, z.len())));
                }
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(GwError::InvalidSpec(format!("type {}, entry {k}: probability {p}", i + 1)));
                }
                total += p;
                if p > 0.0 {
                    *m.entry(z).or_insert(0.0) += p;
                }
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(GwError::InvalidSpec(format!("type {}: probabilities sum to {total}", i + 1)));
            }
            merged.push(m.into_iter().collect::<Vec<_>>());
        }
        if !merged.iter().flatten().any(|(z, _)| z.iter().sum::<u32>() >= 2) {
            return Err(GwError::Singular);
        }
        let perron = perron_from_laws(&merged)?;
        Ok(GWSpec { kappa, offspring: merged, perron })
    }

    /// Parses `{"offspring": [[{"z": [...], "p": ...}, ...], ...]}` or the bare array.
    pub fn from_json(text: &str) -> Result<Self, GwError> {
        let f: SpecFile = serde_json::from_str(text).map_err(|e| GwError::InvalidSpec(e.to_string()))?;
        let laws = match f {
            SpecFile::Wrapped { offspring } => offspring,
            SpecFile::Bare(v) => v,
        };
        Self::new(laws.into_iter().map(|l| l.into_iter().map(|e| (e.z, e.p)).collect()).collect())
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    /// Offspring law of type i (1-based).
    pub fn law(&self, i: usize) -> &[(Vec<u32>, f64)] {
        &self.offspring[i - 1]
    }

    pub fn perron(&self) -> &PerronData {
        &self.perron
    }
}

/// Perron data of a validated spec.
pub fn perron_data(spec: &GWSpec) -> PerronData {
    spec.perron.clone()
}

fn mean_matrix(laws: &[Vec<(Vec<u32>, f64)>]) -> Vec<Vec<f64>> {
    let k = laws.len();
    let mut m = vec![vec![0.0; k]; k];
    for (i, law) in laws.iter().enumerate() {
        for (z, p) in law {
            for j in 0..k {
                m[i][j] += p * z[j] as f64;
            }
        }
    }
    m
}

fn reachability(m: &[Vec<f64>]) -> Vec<Vec<bool>> {
    let k = m.len();
    let mut r: Vec<Vec<bool>> = (0..k).map(|i| (0..k).map(|j| m[i][j] > 0.0).collect()).collect();
    for w in 0..k {
        for i in 0..k {
            for j in 0..k {
                if r[i][w] && r[w][j] {
                    r[i][j] = true;
                }
            }
        }
    }
    r
}

/// Perron root and vector of a nonnegative irreducible matrix, by power
/// iteration on (A + I)/2, which is primitive and has the same eigenvectors.
fn perron_vector(m: &[Vec<f64>], transpose: bool) -> Result<(f64, Vec<f64>), GwError> {
    let k = m.len();
    let at = |i: usize, j: usize| if transpose { m[j][i] } else { m[i][j] };
    let mut x = vec![1.0 / k as f64; k];
    for _ in 0..POWER_MAX_ITER {
        let mut y: Vec<f64> = (0..k).map(|i| 0.5 * (x[i] + (0..k).map(|j| at(i, j) * x[j]).sum::<f64>())).collect();
        let s: f64 = y.iter().sum();
        y.iter_mut().for_each(|v| *v /= s);
        let diff = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = y;
        if diff < POWER_TOL {
            let ax: Vec<f64> = (0..k).map(|i| (0..k).map(|j| at(i, j) * x[j]).sum()).collect();
            let rho = ax.iter().sum::<f64>() / x.iter().sum::<f64>();
            return Ok((rho, x));
        }
    }
    Err(GwError::NoConvergence)
}

fn perron_from_laws(laws: &[Vec<(Vec<u32>, f64)>]) -> Result<PerronData, GwError> {
    let k = laws.len();
    let m = mean_matrix(laws);
    if reachability(&m).iter().flatten().any(|r| !r) {
        return Err(GwError::NotIrreducible);
    }
    let (rho, mut b) = perron_vector(&m, false)?;
    if (rho - 1.0).abs() > CRITICAL_TOL {
        return Err(GwError::NotCritical(rho));
    }
    let (_, mut a) = perron_vector(&m, true)?;
    let sa: f64 = a.iter().sum();
    a.iter_mut().for_each(|v| *v /= sa);
    let ab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    b.iter_mut().for_each(|v| *v /= ab);
    let mut q = vec![vec![vec![0.0; k]; k]; k];
    for (i, law) in laws.iter().enumerate() {
        for (z, p) in law {
            for j in 0..k {
                for l in 0..k {
                    let zl = z[l] as f64 - if j == l { 1.0 } else { 0.0 };
                    q[i][j][l] += p * z[j] as f64 * zl;
                }
            }
        }
    }
    let mut sigma2 = 0.0;
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                sigma2 += a[i] * b[j] * b[l] * q[i][j][l];
            }
        }
    }
    let sigma1_2 = sigma2 / (a[0] * b[0] * b[0]);
    let mut qmat = vec![vec![0.0; k]; k];
    for i in 0..k {
        let mut off = 0.0;
        for j in 0..k {
            if j != i {
                qmat[i][j] = b[j] * m[i][j] / b[i];
                off += qmat[i][j];
            }
        }
        qmat[i][i] = -off;
    }
    let chi = (0..k).map(|i| a[i] * b[i]).collect();
    Ok(PerronData { m, a, b, q, sigma2, sigma1_2, qmat, chi, spectral_radius: rho })
}

impl PerronData {
    /// b_z = Σ z_j b_j.
    pub fn b_of(&self, z: &[u32]) -> f64 {
        z.iter().zip(&self.b).map(|(&c, b)| c as f64 * b).sum()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Left side of the Brownian mixing identity, equal to σ√a₁/2.
    pub fn mixing_constant(&self) -> f64 {
        let k = self.a.len();
        let sigma1 = self.sigma1_2.sqrt();
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                for l in 0..k {
                    s += self.chi[i] * self.b[j] * self.b[l] * self.q[i][j][l] / self.b[i];
                }
            }
        }
        s / (2.0 * self.b[0] * sigma1)
    }
}

/// Neumaier-compensated accumulator.
#[derive(Default, Clone, Copy)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }
    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

/// Extinction masses p_i = P(#₁T^(i) = 0) by monotone iteration from 0.
fn extinction_masses(laws: &[Vec<(Vec<u32>, f64)>]) -> Result<Vec<f64>, GwError> {
    let k = laws.len();
    let mut p = vec![0.0; k];
    for _ in 0..POWER_MAX_ITER {
        let mut next = vec![0.0; k];
        for i in 1..k {
            next[i] = laws[i]
                .iter()
                .filter(|(z, _)| z[0] == 0)
                .map(|(z, w)| w * z.iter().zip(&p).map(|(&c, q): (&u32, &f64)| q.powi(c as i32)).product::<f64>())
                .sum();
        }
        let diff = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        p = next;
        if diff < 1e-15 {
            return Ok(p);
        }
    }
    Err(GwError::Divergent)
}

/// Exact laws of #₁ for trees and for the forests that the kernel needs.
#[derive(Clone, Debug)]
pub struct CountTable {
    n_max: usize,
    kappa: usize,
    tree: Vec<Vec<f64>>,
    /// Root multisets: every support vector and every suffix obtained by
    /// removing roots lowest type first. Index 0 is the empty forest.
    multisets: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
    /// (lowest root type, index of the multiset with that root removed)
    chain: Vec<(usize, usize)>,
    forest: Vec<Vec<f64>>,
}

/// Builds the counting tables up to `n_max` (ceiling 5000).
pub fn count_tables(spec: &GWSpec, n_max: usize) -> Result<CountTable, GwError> {
    count_tables_with_ceiling(spec, n_max, DEFAULT_N_MAX_CEILING)
}

pub fn count_tables_with_ceiling(spec: &GWSpec, n_max: usize, ceiling: usize) -> Result<CountTable, GwError> {
    if n_max > ceiling {
        return Err(GwError::CeilingExceeded { n: n_max, ceiling });
    }
    CountTable::build(&spec.offspring, n_max, false)
}

fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut x = b.to_vec();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().partial_cmp(&m[j][c].abs()).unwrap()).unwrap();
        m.swap(c, p);
        x.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
            x[r] -= f * x[c];
        }
    }
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (x[r] - s) / m[r][r];
    }
    x
}

impl CountTable {
    /// With `type1_childless` the type-1 vertices are made leaves, which yields
    /// the law of the first type-1 generation.
    fn build(laws: &[Vec<(Vec<u32>, f64)>], n_max: usize, type1_childless: bool) -> Result<Self, GwError> {
        let kappa = laws.len();
        let mut multisets = vec![vec![0u32; kappa]];
        let mut index: HashMap<Vec<u32>, usize> = HashMap::from([(vec![0u32; kappa], 0)]);
        let mut pending: Vec<Vec<u32>> = laws.iter().flatten().map(|(z, _)| z.clone()).collect();
        while let Some(z) = pending.pop() {
            if index.contains_key(&z) {
                continue;
            }
            index.insert(z.clone(), multisets.len());
            multisets.push(z.clone());
            let j = z.iter().position(|&c| c > 0).unwrap();
            let mut rest = z;
            rest[j] -= 1;
            pending.push(rest);
        }
        // order by number of roots so that every suffix precedes its parent
        let mut order: Vec<usize> = (0..multisets.len()).collect();
        order.sort_by_key(|&k| (multisets[k].iter().sum::<u32>(), multisets[k].clone()));
        let multisets: Vec<Vec<u32>> = order.iter().map(|&k| multisets[k].clone()).collect();
        let index: HashMap<Vec<u32>, usize> = multisets.iter().enumerate().map(|(k, z)| (z.clone(), k)).collect();
        let chain: Vec<(usize, usize)> = multisets
            .iter()
            .map(|z| match z.iter().position(|&c| c > 0) {
                None => (usize::MAX, 0),
                Some(j) => {
                    let mut rest = z.clone();
                    rest[j] -= 1;
                    (j, index[&rest])
                }
            })
            .collect();
        let c = multisets.len();
        let lawidx: Vec<Vec<(usize, f64)>> = laws.iter().map(|l| l.iter().map(|(z, p)| (index[z], *p)).collect()).collect();

        let p = if type1_childless {
            // type 1 contributes exactly one; other types die out without one
            let mut stripped = laws.to_vec();
            stripped[0] = vec![(vec![0; kappa], 1.0)];
            extinction_masses(&stripped)?
        } else {
            extinction_masses(laws)?
        };
        let mut tree = vec![vec![0.0; n_max + 1]; kappa];
        let mut forest = vec![vec![0.0; n_max + 1]; c];
        for j in 0..kappa {
            tree[j][0] = p[j];
        }
        // linear coefficient of t_k(m) in F_z(m): ∂/∂x_k x^z at x = p
        let mut lin = vec![vec![0.0; kappa]; c];
        forest[0][0] = 1.0;
        for z in 1..c {
            let (j, rest) = chain[z];
            forest[z][0] = p[j] * forest[rest][0];
            for k in 0..kappa {
                lin[z][k] = p[j] * lin[rest][k] + if k == j { forest[rest][0] } else { 0.0 };
            }
        }
        let others: Vec<usize> = (1..kappa).collect();
        let d = others.len();
        let mut sys = vec![vec![0.0; d]; d];
        for (r, &i) in others.iter().enumerate() {
            sys[r][r] = 1.0;
            for (s, &k) in others.iter().enumerate() {
                for &(z, w) in &lawidx[i] {
                    sys[r][s] -= w * lin[z][k];
                }
            }
        }
        let mut known = vec![0.0; c];
        for m in 1..=n_max {
            tree[0][m] = if type1_childless {
                if m == 1 { 1.0 } else { 0.0 }
            } else {
                lawidx[0].iter().map(|&(z, w)| w * forest[z][m - 1]).sum()
            };
            known[0] = 0.0;
            for z in 1..c {
                let (j, rest) = chain[z];
                let tj = &tree[j];
                let fr = &forest[rest];
                let mut acc = Kahan::default();
                for a in 1..m {
                    acc.add(tj[a] * fr[m - a]);
                }
                acc.add(tj[0] * known[rest]);
                if j == 0 {
                    acc.add(tj[m] * fr[0]);
                }
                known[z] = acc.value();
            }
            if d > 0 {
                let rhs: Vec<f64> = others
                    .iter()
                    .map(|&i| {
                        let mut acc = Kahan::default();
                        for &(z, w) in &lawidx[i] {
                            acc.add(w * known[z]);
                        }
                        acc.value()
                    })
                    .collect();
                let t = solve_dense(&sys, &rhs);
                for (r, &i) in others.iter().enumerate() {
                    tree[i][m] = t[r].max(0.0);
                }
            }
            for z in 1..c {
                let mut v = known[z];
                for &k in &others {
                    v += lin[z][k] * tree[k][m];
                }
                forest[z][m] = v;
            }
        }
        Ok(CountTable { n_max, kappa, tree, multisets, index, chain, forest })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// P(#₁T^(i) = m).
    pub fn tree_prob(&self, i: usize, m: usize) -> f64 {
        self.tree[i - 1].get(m).copied().unwrap_or(0.0)
    }

    pub fn tree_law(&self, i: usize) -> &[f64] {
        &self.tree[i - 1]
    }

    /// P(#₁T^(i) = 0).
    pub fn extinction(&self, i: usize) -> f64 {
        self.tree[i - 1][0]
    }

    /// Law of #₁ for a forest with root multiset z (convolution of tree laws).
    pub fn forest_law(&self, z: &[u32]) -> Vec<f64> {
        if let Some(&k) = self.index.get(z) {
            return self.forest[k].clone();
        }
        let mut law = vec![0.0; self.n_max + 1];
        law[0] = 1.0;
        for (j, &c) in z.iter().enumerate() {
            for _ in 0..c {
                law = convolve(&law, &self.tree[j], self.n_max);
            }
        }
        law
    }

    pub fn forest_prob(&self, z: &[u32], m: usize) -> f64 {
        if m > self.n_max {
            return 0.0;
        }
        match self.index.get(z) {
            Some(&k) => self.forest[k][m],
            None => self.forest_law(z)[m],
        }
    }

    /// (offset, span) of the lattice carrying P(#₁T^(i) = m) for m ≥ 1.
    pub fn lattice(&self, i: usize) -> Option<(usize, usize)> {
        let pos: Vec<usize> = (1..=self.n_max).filter(|&m| self.tree[i - 1][m] > 0.0).collect();
        let first = *pos.first()?;
        let span = pos.iter().fold(0usize, |g, &m| gcd(g, m - first));
        Some((first, span.max(1)))
    }

    fn kappa(&self) -> usize {
        self.kappa
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn convolve(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    (0..=n)
        .map(|m| {
            let mut acc = Kahan::default();
            for x in 0..=m.min(a.len() - 1) {
                if m - x < b.len() {
                    acc.add(a[x] * b[m - x]);
                }
            }
            acc.value()
        })
        .collect()
}

/// Law of the size of the first type-1 generation below a type-1 root
/// (the offspring law of the reduced monotype forest), up to `n_max`.
pub fn reduced_type1_law(spec: &GWSpec, n_max: usize) -> Result<Vec<f64>, GwError> {
    let t = CountTable::build(&spec.offspring, n_max, true)?;
    Ok((0..=n_max)
        .map(|m| spec.offspring[0].iter().map(|(z, w)| w * t.forest_prob(z, m)).sum())
        .collect())
}

/// Forest probability from the DP next to (p/n)·P(S_n = −p) for the reduced
/// random walk, for every p ≤ p_max and 1 ≤ n ≤ n_max.
pub fn otter_dwass_table(spec: &GWSpec, table: &CountTable, p_max: usize, n_max: usize) -> Result<Vec<(usize, usize, f64, f64)>, GwError> {
    let step = reduced_type1_law(spec, n_max)?;
    let forests: Vec<Vec<f64>> = (1..=p_max)
        .map(|p| {
            let mut z = vec![0u32; spec.kappa];
            z[0] = p as u32;
            table.forest_law(&z)
        })
        .collect();
    let mut out = Vec::new();
    let mut power = vec![0.0; n_max + 1];
    power[0] = 1.0;
    for n in 1..=n_max {
        power = convolve(&power, &step, n_max);
        for p in 1..=p_max {
            let dp = forests[p - 1].get(n).copied().unwrap_or(0.0);
            let walk = if p <= n { p as f64 / n as f64 * power[n - p] } else { 0.0 };
            out.push((p, n, dp, walk));
        }
    }
    Ok(out)
}

/// Single-point version of [`otter_dwass_table`].
pub fn otter_dwass_check(spec: &GWSpec, table: &CountTable, p: usize, n: usize) -> Result<(f64, f64), GwError> {
    let row = otter_dwass_table(spec, table, p, n)?;
    let r = row.iter().find(|r| r.0 == p && r.1 == n).expect("row present");
    Ok((r.2, r.3))
}

/// Leading term (b_z/b₁)·(2πσ₁²n³)^{−1/2} of P(#₁F^(z) = n).
pub fn asymptotic_count_estimate(perron: &PerronData, z: &[u32], n: usize) -> f64 {
    let n = n as f64;
    perron.b_of(z) / perron.b[0] / (2.0 * std::f64::consts::PI * perron.sigma1_2 * n * n * n).sqrt()
}

/// Limit of q_n^(i)(i₁ = j): (1/b_i)·Σ_z ζ^(i)(z)·z_j·b_j.
pub fn first_child_type_limit(spec: &GWSpec, i: usize) -> Vec<f64> {
    let pd = spec.perron();
    (0..spec.kappa)
        .map(|j| spec.law(i).iter().map(|(z, w)| w * z[j] as f64 * pd.b[j]).sum::<f64>() / pd.b[i - 1])
        .collect()
}

/// Size-biased offspring laws ζ̂^(j)(z) = (b_z/b_j)·ζ^(j)(z).
pub fn kesten_bias(spec: &GWSpec) -> Vec<Vec<(Vec<u32>, f64)>> {
    let pd = spec.perron();
    (1..=spec.kappa)
        .map(|j| spec.law(j).iter().map(|(z, w)| (z.clone(), pd.b_of(z) / pd.b[j - 1] * w)).collect())
        .collect()
}

/// Type law of the spine successor among the children z: ∝ z_j·b_j.
pub fn spine_successor_law(perron: &PerronData, z: &[u32]) -> Vec<f64> {
    let bz = perron.b_of(z);
    z.iter().zip(&perron.b).map(|(&c, b)| c as f64 * b / bz).collect()
}

/// Offspring multisets with their probabilities.
pub type OffspringLaw = Vec<(Vec<u32>, f64)>;

/// Extinction masses and offspring laws conditioned on no type-1 descendant.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtinctConditioned {
    pub p: Vec<f64>,
    /// None for types with p_i = 0.
    pub laws: Vec<Option<OffspringLaw>>,
}

pub fn extinct_conditioned_offspring(spec: &GWSpec) -> Result<ExtinctConditioned, GwError> {
    let p = extinction_masses(&spec.offspring)?;
    let laws = (0..spec.kappa)
        .map(|i| {
            (p[i] > 0.0).then(|| {
                spec.offspring[i]
                    .iter()
                    .filter(|(z, _)| z[0] == 0)
                    .map(|(z, w)| (z.clone(), w * z.iter().zip(&p).map(|(&c, q)| q.powi(c as i32)).product::<f64>() / p[i]))
                    .filter(|(_, w)| *w > 0.0)
                    .collect()
            })
        })
        .collect();
    Ok(ExtinctConditioned { p, laws })
}

/// Spectral radius of the mean matrix of the conditioned laws, block by
/// block over mutually reachable types; passes iff every block is subcritical.
pub fn subcriticality_check(x: &ExtinctConditioned) -> (f64, bool) {
    let k = x.p.len();
    let mut m = vec![vec![0.0; k]; k];
    for (i, law) in x.laws.iter().enumerate() {
        if let Some(law) = law {
            for (z, w) in law {
                for j in 0..k {
                    m[i][j] += w * z[j] as f64;
                }
            }
        }
    }
    let reach = reachability(&m);
    let mut done = vec![false; k];
    let mut radius: f64 = 0.0;
    for i in 0..k {
        if done[i] {
            continue;
        }
        let block: Vec<usize> = (0..k).filter(|&j| j == i || (reach[i][j] && reach[j][i])).collect();
        block.iter().for_each(|&j| done[j] = true);
        let sub: Vec<Vec<f64>> = block.iter().map(|&r| block.iter().map(|&c| m[r][c]).collect()).collect();
        let r = if block.len() == 1 {
            sub[0][0]
        } else {
            // (B + I)/2 iteration returns the Perron root of B
            perron_vector(&sub, false).map(|x| x.0).unwrap_or(f64::INFINITY)
        };
        radius = radius.max(r);
    }
    (radius, radius < 1.0 - CRITICAL_TOL)
}

/// The exact MB splitting kernel of #₁-conditioned GW trees (parts may be empty).
#[derive(Clone, Debug)]
pub struct GwKernel {
    spec: Arc<GWSpec>,
    table: Arc<CountTable>,
    cross: ExtinctConditioned,
}

pub fn gw_splitting_kernel(spec: Arc<GWSpec>, table: Arc<CountTable>) -> Result<GwKernel, GwError> {
    let cross = extinct_conditioned_offspring(&spec)?;
    Ok(GwKernel { spec, table, cross })
}

fn pick<'a, T>(items: &'a [(T, f64)], rng: &mut dyn RngCore) -> &'a T {
    let total: f64 = items.iter().map(|x| x.1).sum();
    let mut u = rng.random::<f64>() * total;
    for (x, w) in items {
        if u < *w {
            return x;
        }
        u -= w;
    }
    &items.iter().rev().find(|x| x.1 > 0.0).unwrap_or(&items[items.len() - 1]).0
}

impl GwKernel {
    pub fn spec(&self) -> &GWSpec {
        &self.spec
    }

    pub fn table(&self) -> &CountTable {
        &self.table
    }

    fn zero_law(&self, i: usize) -> Result<&[(Vec<u32>, f64)], KernelError> {
        self.cross.laws[i - 1].as_deref().ok_or(KernelError::ZeroProbability { n: 0, ty: i })
    }

    fn parts_of_zero(z: &[u32]) -> Vec<Part> {
        let mut parts = Vec::new();
        for (j, &c) in z.iter().enumerate().rev() {
            parts.extend(std::iter::repeat_n(Part::new(0, j + 1), c as usize));
        }
        parts
    }

    fn check(&self, n: usize, i: usize) -> Result<f64, KernelError> {
        if i == 0 || i > self.spec.kappa {
            return Err(KernelError::InvalidType(i));
        }
        if n > self.table.n_max {
            return Err(KernelError::SizeOutOfRange { n, max: self.table.n_max });
        }
        let denom = self.table.tree_prob(i, n);
        if denom <= 0.0 {
            return Err(KernelError::ZeroProbability { n, ty: i });
        }
        Ok(denom)
    }

    /// Every way of giving sizes to the roots of z summing to r, one
    /// nonincreasing list per type, with its probability weight.
    fn allocations(&self, z: &[u32], r: usize) -> Vec<(Vec<Part>, f64)> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        self.alloc_rec(z, 0, r, usize::MAX, 0, &mut current, 1.0, &mut out);
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn alloc_rec(&self, z: &[u32], j: usize, r: usize, cap: usize, placed: u32, cur: &mut Vec<Part>, w: f64, out: &mut Vec<(Vec<Part>, f64)>) {
        if j == z.len() {
            if r == 0 {
                out.push((cur.clone(), w));
            }
            return;
        }
        if placed == z[j] {
            // multinomial z_j!/Π m! for the sizes just placed of type j+1
            let sizes: Vec<usize> = cur.iter().filter(|p| p.ty == j + 1).map(|p| p.size).collect();
            let mut coef = factorial(z[j] as usize);
            let mut k = 0;
            while k < sizes.len() {
                let run = sizes[k..].iter().take_while(|&&s| s == sizes[k]).count();
                coef /= factorial(run);
                k += run;
            }
            self.alloc_rec(z, j + 1, r, usize::MAX, 0, cur, w * coef, out);
            return;
        }
        for s in (0..=r.min(cap)).rev() {
            let t = self.table.tree_prob(j + 1, s);
            if t == 0.0 {
                continue;
            }
            cur.push(Part::new(s, j + 1));
            self.alloc_rec(z, j, r - s, s, placed + 1, cur, w * t, out);
            cur.pop();
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

impl SplittingKernel for GwKernel {
    fn kappa(&self) -> usize {
        self.spec.kappa
    }

    fn sample(&self, n: usize, i: usize, rng: &mut dyn RngCore) -> Result<DiscreteTypedPartition, KernelError> {
        if n == 0 {
            if i == 0 || i > self.spec.kappa {
                return Err(KernelError::InvalidType(i));
            }
            let z = pick(self.zero_law(i)?, rng);
            return Ok(DiscreteTypedPartition::ranked(Self::parts_of_zero(z), 0, true)?);
        }
        self.check(n, i)?;
        let target = n - usize::from(i == 1);
        let t = &self.table;
        let weights: Vec<(usize, f64)> = self
            .spec
            .law(i)
            .iter()
            .map(|(z, w)| (t.index[z], w * t.forest[t.index[z]][target]))
            .collect();
        let mut cur = *pick(&weights, rng);
        let mut r = target;
        let mut parts = Vec::new();
        while cur != 0 {
            let (j, rest) = t.chain[cur];
            let total = t.forest[cur][r];
            let mut u = rng.random::<f64>() * total;
            let mut chosen = None;
            let mut last_ok = None;
            for s in 0..=r {
                let w = t.tree[j][s] * t.forest[rest][r - s];
                if w > 0.0 {
                    last_ok = Some(s);
                }
                if u < w {
                    chosen = Some(s);
                    break;
                }
                u -= w;
            }
            let s = chosen.or(last_ok).expect("positive forest probability has a positive term");
            parts.push(Part::new(s, j + 1));
            r -= s;
            cur = rest;
        }
        Ok(DiscreteTypedPartition::ranked(parts, n, true)?)
    }

    fn support(&self, n: usize, i: usize) -> Option<Vec<(DiscreteTypedPartition, f64)>> {
        if n == 0 {
            let law = self.zero_law(i).ok()?;
            return Some(
                law.iter()
                    .map(|(z, w)| (DiscreteTypedPartition::ranked(Self::parts_of_zero(z), 0, true).unwrap(), *w))
                    .collect(),
            );
        }
        if n > SUPPORT_LIMIT {
            return None;
        }
        let denom = self.check(n, i).ok()?;
        let target = n - usize::from(i == 1);
        let mut law: BTreeMap<DiscreteTypedPartition, f64> = BTreeMap::new();
        for (z, w) in self.spec.law(i) {
            for (parts, weight) in self.allocations(z, target) {
                let p = DiscreteTypedPartition::ranked(parts, n, true).ok()?;
                *law.entry(p).or_insert(0.0) += w * weight / denom;
            }
        }
        Some(law.into_iter().collect())
    }
}

/// Conditioned GW tree with n type-1 vertices. Without zero subtrees the
/// size-0 parts stay as childless markers.
pub fn sample_conditioned_gw(kernel: &GwKernel, n: usize, i: usize, rng: &mut dyn RngCore, with_zero_subtrees: bool) -> Result<MBTree, MbError> {
    let opts = SampleOptions { expand_zero: with_zero_subtrees, label_leaves: false, ..Default::default() };
    sample_mb_tree(kernel, n, i, rng, &opts)
}

/// Nodes of type 1.
pub fn type_one_vertices(t: &MBTree) -> Vec<usize> {
    (0..t.len()).filter(|&v| t.node(v).ty == 1).collect()
}

/// Unconditioned GW tree from a single root of type i, returned with node
/// sizes #₁(subtree); None if it grows past `cap` vertices.
pub fn simulate_unconditioned(spec: &GWSpec, i: usize, rng: &mut dyn RngCore, cap: usize) -> Option<MBTree> {
    let mut parent: Vec<Option<usize>> = vec![None];
    let mut ty = vec![i];
    let mut idx = 0;
    while idx < ty.len() {
        let z = pick(spec.law(ty[idx]), rng);
        for (j, &c) in z.iter().enumerate() {
            for _ in 0..c {
                parent.push(Some(idx));
                ty.push(j + 1);
            }
        }
        if ty.len() > cap {
            return None;
        }
        idx += 1;
    }
    let mut size: Vec<usize> = ty.iter().map(|&t| usize::from(t == 1)).collect();
    for v in (1..ty.len()).rev() {
        let p = parent[v].unwrap();
        size[p] += size[v];
    }
    Some(MBTree::from_parents(&parent, &size, &ty))
}

/// Size of the first type-1 generation below a forest with root multiset z.
pub fn first_type1_generation(spec: &GWSpec, z: &[u32], rng: &mut dyn RngCore, cap: usize) -> Option<u64> {
    let mut stack: Vec<usize> = Vec::new();
    let mut count = 0u64;
    for (j, &c) in z.iter().enumerate() {
        for _ in 0..c {
            stack.push(j + 1);
        }
    }
    let mut visited = 0usize;
    while let Some(t) = stack.pop() {
        if t == 1 {
            count += 1;
            continue;
        }
        visited += 1;
        if visited > cap {
            return None;
        }
        let kids = pick(spec.law(t), rng);
        for (j, &c) in kids.iter().enumerate() {
            for _ in 0..c {
                stack.push(j + 1);
            }
        }
    }
    Some(count)
}

impl CountTable {
    /// Number of root multisets cached for the kernel.
    pub fn cached_multisets(&self) -> usize {
        self.multisets.len()
    }

    pub fn types(&self) -> usize {
        self.kappa()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    pub(crate) fn binary() -> GWSpec {
        GWSpec::new(vec![vec![(vec![0], 0.5), (vec![2], 0.5)]]).unwrap()
    }

    /// Type 1: ∅, two type-1 children, or three type-2 children, each 1/3.
    /// Type 2: ∅ 1/2, one type-1 child 1/4, one type-2 child 1/4.
    pub(crate) fn worked() -> GWSpec {
        GWSpec::new(vec![
            vec![(vec![0, 0], 1.0 / 3.0), (vec![2, 0], 1.0 / 3.0), (vec![0, 3], 1.0 / 3.0)],
            vec![(vec![0, 0], 0.5), (vec![1, 0], 0.25), (vec![0, 1], 0.25)],
        ])
        .unwrap()
    }

    #[test]
    fn binary_perron() {
        let pd = perron_data(&binary());
        assert!((pd.a[0] - 1.0).abs() < 1e-12 && (pd.b[0] - 1.0).abs() < 1e-12);
        assert!((pd.q[0][0][0] - 1.0).abs() < 1e-12);
        assert!((pd.sigma2 - 1.0).abs() < 1e-12);
        assert!((pd.sigma1_2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alternating_perron() {
        // type 1 -> one type 2 (1/2) or two type 2 ... must be critical with M antidiagonal(1,1)
        let s = GWSpec::new(vec![vec![(vec![0, 0], 0.5), (vec![0, 2], 0.5)], vec![(vec![1, 0], 1.0)]]).unwrap();
        let pd = s.perron();
        assert!((pd.a[0] - 0.5).abs() < 1e-12 && (pd.a[1] - 0.5).abs() < 1e-12);
        assert!((pd.b[0] - 1.0).abs() < 1e-12 && (pd.b[1] - 1.0).abs() < 1e-12);
        assert!((pd.chi[0] - 0.5).abs() < 1e-12);
        // the spine alternates: a type-2 vertex has a single type-1 child
        assert_eq!(spine_successor_law(pd, &[1, 0]), vec![1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(matches!(GWSpec::new(vec![vec![(vec![0], 0.25), (vec![2], 0.75)]]), Err(GwError::NotCritical(_))));
        assert!(matches!(GWSpec::new(vec![vec![(vec![1], 1.0)]]), Err(GwError::Singular)));
        assert!(matches!(
            GWSpec::new(vec![vec![(vec![0, 0], 0.5), (vec![2, 0], 0.5)], vec![(vec![0, 0], 0.5), (vec![0, 2], 0.5)]]),
            Err(GwError::NotIrreducible)
        ));
        let e = GWSpec::new(vec![vec![(vec![0], 0.5), (vec![2, 0], 0.5)]]).unwrap_err();
        assert!(e.to_string().contains("type 1, entry 1"));
        let j = r#"{"offspring": [[{"z": [0], "p": 0.5}, {"z": [2], "p": 0.5}]]}"#;
        assert_eq!(GWSpec::from_json(j).unwrap().law(1), binary().law(1));
    }

    #[test]
    fn binary_counts() {
        let t = count_tables(&binary(), 50).unwrap();
        assert!((t.tree_prob(1, 1) - 0.5).abs() < 1e-15);
        assert_eq!(t.tree_prob(1, 2), 0.0);
        assert!((t.tree_prob(1, 3) - 0.125).abs() < 1e-15);
        assert_eq!(t.lattice(1), Some((1, 2)));
        assert!((t.forest_prob(&[2], 2) - 0.25).abs() < 1e-15);
        assert!(matches!(count_tables(&binary(), 6000), Err(GwError::CeilingExceeded { .. })));
    }

    #[test]
    fn worked_example_extinction() {
        let s = worked();
        let t = count_tables(&s, 10).unwrap();
        assert!((t.extinction(2) - 2.0 / 3.0).abs() < 1e-12);
        let x = extinct_conditioned_offspring(&s).unwrap();
        assert!(x.laws[0].is_none());
        let law = x.laws[1].as_ref().unwrap();
        let get = |z: &[u32]| law.iter().find(|e| e.0 == z).unwrap().1;
        assert!((get(&[0, 0]) - 0.75).abs() < 1e-12);
        assert!((get(&[0, 1]) - 0.25).abs() < 1e-12);
        let (r, pass) = subcriticality_check(&x);
        assert!((r - 0.25).abs() < 1e-12 && pass);
        let critical = ExtinctConditioned { p: vec![0.0, 1.0], laws: vec![None, Some(vec![(vec![0, 0], 0.5), (vec![0, 2], 0.5)])] };
        assert!(!subcriticality_check(&critical).1);
    }

    #[test]
    fn otter_dwass_small() {
        let s = binary();
        let t = count_tables(&s, 20).unwrap();
        let (dp, walk) = otter_dwass_check(&s, &t, 1, 3).unwrap();
        assert!((dp - 0.125).abs() < 1e-15 && (walk - 0.125).abs() < 1e-15);
        let (dp, walk) = otter_dwass_check(&s, &t, 2, 2).unwrap();
        assert!((dp - 0.25).abs() < 1e-15 && (walk - 0.25).abs() < 1e-15);
    }

    #[test]
    fn kesten_binary() {
        let k = kesten_bias(&binary());
        assert_eq!(k[0], vec![(vec![0], 0.0), (vec![2], 1.0)]);
        for law in kesten_bias(&worked()) {
            assert!((law.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixing_identity() {
        for s in [binary(), worked()] {
            let pd = s.perron();
            assert!((pd.mixing_constant() - pd.sigma() * pd.a[0].sqrt() / 2.0).abs() < 1e-8);
            for j in 0..s.kappa() {
                let col: f64 = (0..s.kappa()).map(|i| pd.chi[i] * pd.qmat[i][j]).sum();
                assert!(col.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn kernel_support_matches_sampling_and_sums() {
        let s = Arc::new(worked());
        let t = Arc::new(count_tables(&s, 30).unwrap());
        let k = gw_splitting_kernel(s, t).unwrap();
        for n in 1..=10 {
            for i in 1..=2 {
                let law = k.support(n, i).unwrap();
                assert!((law.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12, "n={n} i={i}");
                let target = n - usize::from(i == 1);
                assert!(law.iter().all(|(p, _)| p.size_sum() == target));
            }
        }
        let law = k.support(6, 1).unwrap();
        let mut counts = vec![0u64; law.len()];
        let mut rng = stream(9, 0);
        for _ in 0..50_000 {
            let p = k.sample(6, 1, &mut rng).unwrap();
            counts[law.iter().position(|x| x.0 == p).unwrap()] += 1;
        }
        let probs: Vec<f64> = law.iter().map(|x| x.1).collect();
        assert!(crate::metrics::chi_square_test(&counts, &probs, 5.0).unwrap().p_value > 1e-3);
    }

    #[test]
    fn binary_kernel_at_three() {
        let s = Arc::new(binary());
        let t = Arc::new(count_tables(&s, 10).unwrap());
        let k = gw_splitting_kernel(s, t).unwrap();
        let law = k.support(3, 1).unwrap();
        assert_eq!(law.len(), 1);
        assert_eq!(law[0].0.parts(), &[Part::new(1, 1), Part::new(1, 1)]);
        assert!(matches!(k.sample(2, 1, &mut stream(0, 0)), Err(KernelError::ZeroProbability { .. })));
        let tree = sample_conditioned_gw(&k, 3, 1, &mut stream(0, 0), true).unwrap();
        assert_eq!(tree.height(), 1);
    }

    #[test]
    fn conditioned_tree_counts_type_one() {
        let s = Arc::new(worked());
        let t = Arc::new(count_tables(&s, 200).unwrap());
        let k = gw_splitting_kernel(s, t).unwrap();
        let mut rng = stream(10, 0);
        for _ in 0..200 {
            let tree = sample_conditioned_gw(&k, 150, 1, &mut rng, true).unwrap();
            assert_eq!(type_one_vertices(&tree).len(), 150);
            let pruned = sample_conditioned_gw(&k, 150, 2, &mut rng, false).unwrap().prune_zero();
            assert_eq!(type_one_vertices(&pruned).len(), 150);
            assert!(pruned.nodes().iter().all(|n| n.size > 0));
        }
    }
}
