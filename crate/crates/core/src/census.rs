//! Exact census of Galton-Watson trees by number of type-1 vertices, in
//! rational arithmetic. Used as an independent oracle for the counting DP
//! and the GW splitting kernel on small sizes.

use crate::gw::{GWSpec, GwError};
use crate::partitions::{DiscreteTypedPartition, Part};
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use std::collections::BTreeMap;

/// P(#₁T^(j) = m) for every type and m ≤ n_max, by summing over every
/// ordered way of distributing m among the children of the root.
///
/// Types other than 1 may only bear type-1 children, so each size is
/// determined by strictly smaller ones.
#[derive(Clone, Debug)]
pub struct Census {
    laws: Vec<Vec<(Vec<u32>, BigRational)>>,
    tree: Vec<Vec<BigRational>>,
}

fn exact(p: f64) -> BigRational {
    BigRational::from_float(p).expect("finite probability")
}

impl Census {
    pub fn new(spec: &GWSpec, n_max: usize) -> Result<Self, GwError> {
        let kappa = spec.kappa();
        for i in 2..=kappa {
            if spec.law(i).iter().any(|(z, _)| z[1..].iter().any(|&c| c > 0)) {
                return Err(GwError::CensusUnsupported);
            }
        }
        let laws: Vec<Vec<(Vec<u32>, BigRational)>> =
            (1..=kappa).map(|i| spec.law(i).iter().map(|(z, p)| (z.clone(), exact(*p))).collect()).collect();
        let mut c = Census { laws, tree: vec![Vec::new(); kappa] };
        for m in 0..=n_max {
            // type 1 first: its children see only sizes < m
            for j in 0..kappa {
                let v = c.tree_weight(j, m);
                c.tree[j].push(v);
            }
        }
        Ok(c)
    }

    fn tree_weight(&self, j: usize, m: usize) -> BigRational {
        let target = if j == 0 {
            match m.checked_sub(1) {
                Some(t) => t,
                None => return BigRational::zero(),
            }
        } else {
            m
        };
        let mut total = BigRational::zero();
        for (z, p) in &self.laws[j] {
            let roots = expand(z);
            let mut acc = BigRational::zero();
            self.compositions(&roots, target, &mut Vec::new(), &mut |_, w| acc += w);
            total += p * acc;
        }
        total
    }

    /// Calls `f(sizes, weight)` for every ordered composition of `target`
    /// among `roots` with nonzero weight Π P(#₁T^(type) = size).
    fn compositions(&self, roots: &[usize], target: usize, sizes: &mut Vec<usize>, f: &mut dyn FnMut(&[usize], BigRational)) {
        let k = sizes.len();
        if k == roots.len() {
            if target == 0 {
                let mut w = BigRational::from_integer(1.into());
                for (r, &s) in roots.iter().zip(sizes.iter()) {
                    w *= &self.tree[*r][s];
                }
                f(sizes, w);
            }
            return;
        }
        for s in 0..=target {
            if s >= self.tree[roots[k]].len() || self.tree[roots[k]][s].is_zero() {
                continue;
            }
            sizes.push(s);
            self.compositions(roots, target - s, sizes, f);
            sizes.pop();
        }
    }

    pub fn n_max(&self) -> usize {
        self.tree[0].len() - 1
    }

    /// P(#₁T^(i) = m), type 1-based.
    pub fn tree_prob(&self, i: usize, m: usize) -> &BigRational {
        &self.tree[i - 1][m]
    }

    /// The splitting law at (n, i): children (size, type) of the root given
    /// #₁T^(i) = n, with size-0 children kept. Empty when n is impossible.
    pub fn kernel_law(&self, n: usize, i: usize) -> BTreeMap<DiscreteTypedPartition, BigRational> {
        let mut law: BTreeMap<DiscreteTypedPartition, BigRational> = BTreeMap::new();
        let Some(target) = n.checked_sub(usize::from(i == 1)) else {
            return law;
        };
        for (z, p) in &self.laws[i - 1] {
            let roots = expand(z);
            self.compositions(&roots, target, &mut Vec::new(), &mut |sizes, w| {
                let parts = sizes.iter().zip(&roots).map(|(&s, &t)| Part::new(s, t + 1)).collect();
                let key = DiscreteTypedPartition::ranked(parts, n, true).expect("sizes sum to the target");
                *law.entry(key).or_insert_with(BigRational::zero) += p * w;
            });
        }
        let total: BigRational = law.values().fold(BigRational::zero(), |a, b| a + b);
        if !total.is_zero() {
            for v in law.values_mut() {
                *v = &*v / &total;
            }
        }
        law
    }
}

fn expand(z: &[u32]) -> Vec<usize> {
    z.iter().enumerate().flat_map(|(j, &c)| std::iter::repeat_n(j, c as usize)).collect()
}

pub fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
