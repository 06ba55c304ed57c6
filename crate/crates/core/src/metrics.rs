//! Leaf-labeled tree metrics, Kolmogorov-Smirnov and chi-square statistics,
//! and small summation helpers shared by the Monte Carlo code.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty sample")]
    EmptySample,
    #[error("unknown leaf label {0}")]
    UnknownLabel(usize),
    #[error("label sets differ")]
    LabelMismatch,
    #[error("chi-square test has no degrees of freedom")]
    NoDegreesOfFreedom,
}

/// Pairwise (cascade) summation; the result does not depend on thread layout.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 16 {
        return x.iter().sum();
    }
    let mid = x.len() / 2;
    pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(x) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = x.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// One-sample KS statistic sup |F_n − F|.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64, MetricsError> {
    if sample.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let v = sorted(sample);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (k, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((k as f64 + 1.0) / n - f).max(f - k as f64 / n);
    }
    Ok(d)
}

/// Two-sample KS statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Asymptotic Kolmogorov tail P(K > √n_eff·d).
pub fn ks_pvalue(d: f64, n_eff: f64) -> f64 {
    let t = (n_eff.sqrt() + 0.12 + 0.11 / n_eff.sqrt()) * d;
    if t < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * t * t).exp();
        p += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// Result of a chi-square goodness-of-fit test.
#[derive(Clone, Debug, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness of fit of `observed` counts against probabilities
/// `expected`. Cells with expected count below `min_expected` are pooled
/// (smallest first) until every cell clears it.
pub fn chi_square_test(observed: &[u64], expected: &[f64], min_expected: f64) -> Result<ChiSquare, MetricsError> {
    let n: u64 = observed.iter().sum();
    let nf = n as f64;
    let mut cells: Vec<(f64, f64)> = observed
        .iter()
        .zip(expected)
        .map(|(&o, &p)| (o as f64, p * nf))
        .collect();
    cells.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for c in cells {
        acc.0 += c.0;
        acc.1 += c.1;
        if acc.1 >= min_expected {
            pooled.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.1 > 0.0 || acc.0 > 0.0 {
        match pooled.last_mut() {
            Some(last) => {
                last.0 += acc.0;
                last.1 += acc.1;
            }
            None => pooled.push(acc),
        }
    }
    if pooled.len() < 2 {
        return Err(MetricsError::NoDegreesOfFreedom);
    }
    let statistic: f64 = pooled.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = pooled.len() - 1;
    let p_value = ChiSquared::new(dof as f64).map(|c| c.sf(statistic)).unwrap_or(f64::NAN);
    Ok(ChiSquare { statistic, dof, p_value })
}

/// Rooted tree with labeled leaves and node heights, as seen by the metric code.
pub trait LabeledTree {
    /// (label, node) pairs for every labeled leaf.
    fn labeled_nodes(&self) -> Vec<(usize, usize)>;
    fn parent_of(&self, node: usize) -> Option<usize>;
    /// Distance from the root.
    fn height_of(&self, node: usize) -> f64;
}

/// Root depths and pairwise distances among labeled leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafLabeledMetricTree {
    pub labels: Vec<usize>,
    pub depth: Vec<f64>,
    pub dist: Vec<Vec<f64>>,
}

fn lca_height<T: LabeledTree + ?Sized>(t: &T, a: usize, b: usize) -> f64 {
    let mut seen = HashSet::new();
    let mut u = Some(a);
    while let Some(x) = u {
        seen.insert(x);
        u = t.parent_of(x);
    }
    let mut v = Some(b);
    while let Some(x) = v {
        if seen.contains(&x) {
            return t.height_of(x);
        }
        v = t.parent_of(x);
    }
    0.0
}

/// Distance data restricted to `labels` (all labeled leaves when `None`).
pub fn distance_matrix<T: LabeledTree + ?Sized>(t: &T, labels: Option<&[usize]>) -> Result<LeafLabeledMetricTree, MetricsError> {
    let all = t.labeled_nodes();
    let chosen: Vec<(usize, usize)> = match labels {
        None => all,
        Some(ls) => ls
            .iter()
            .map(|&l| all.iter().find(|p| p.0 == l).copied().ok_or(MetricsError::UnknownLabel(l)))
            .collect::<Result<_, _>>()?,
    };
    let k = chosen.len();
    let depth: Vec<f64> = chosen.iter().map(|&(_, v)| t.height_of(v)).collect();
    let mut dist = vec![vec![0.0; k]; k];
    for x in 0..k {
        for y in x + 1..k {
            let h = lca_height(t, chosen[x].1, chosen[y].1);
            let d = depth[x] + depth[y] - 2.0 * h;
            dist[x][y] = d;
            dist[y][x] = d;
        }
    }
    Ok(LeafLabeledMetricTree { labels: chosen.iter().map(|p| p.0).collect(), depth, dist })
}

impl LeafLabeledMetricTree {
    /// Distance matrix with the root prepended as point 0.
    pub fn root_augmented(&self) -> Vec<Vec<f64>> {
        let k = self.labels.len();
        let mut m = vec![vec![0.0; k + 1]; k + 1];
        for x in 0..k {
            m[0][x + 1] = self.depth[x];
            m[x + 1][0] = self.depth[x];
            for y in 0..k {
                m[x + 1][y + 1] = self.dist[x][y];
            }
        }
        m
    }

    /// Four-point condition on the root-augmented matrix.
    pub fn four_point_holds(&self, tol: f64) -> bool {
        let m = self.root_augmented();
        let n = m.len();
        for a in 0..n {
            for b in a..n {
                for c in b..n {
                    for d in c..n {
                        let mut s = [m[a][b] + m[c][d], m[a][c] + m[b][d], m[a][d] + m[b][c]];
                        s.sort_by(|x, y| x.partial_cmp(y).unwrap());
                        if (s[2] - s[1]).abs() > tol {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    /// CSV with a header row of labels; point `root` comes first.
    pub fn to_csv(&self) -> String {
        let m = self.root_augmented();
        let names: Vec<String> = std::iter::once("root".to_string())
            .chain(self.labels.iter().map(|l| l.to_string()))
            .collect();
        let mut out = format!("point,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&m) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

/// Half the sup-norm gap between root-augmented matrices with matched labels.
pub fn labeled_tree_distance(a: &LeafLabeledMetricTree, b: &LeafLabeledMetricTree) -> Result<f64, MetricsError> {
    if a.labels != b.labels {
        return Err(MetricsError::LabelMismatch);
    }
    let (ma, mb) = (a.root_augmented(), b.root_augmented());
    let mut sup: f64 = 0.0;
    for (ra, rb) in ma.iter().zip(&mb) {
        for (x, y) in ra.iter().zip(rb) {
            sup = sup.max((x - y).abs());
        }
    }
    Ok(sup / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    /// Parent array plus heights.
    struct Toy {
        parent: Vec<Option<usize>>,
        height: Vec<f64>,
        leaves: Vec<(usize, usize)>,
    }

    impl LabeledTree for Toy {
        fn labeled_nodes(&self) -> Vec<(usize, usize)> {
            self.leaves.clone()
        }
        fn parent_of(&self, node: usize) -> Option<usize> {
            self.parent[node]
        }
        fn height_of(&self, node: usize) -> f64 {
            self.height[node]
        }
    }

    #[test]
    fn two_leaves() {
        // root 0 -> branch 1 at h; leaves 2, 3 at h+x and h+y
        let t = Toy {
            parent: vec![None, Some(0), Some(1), Some(1)],
            height: vec![0.0, 1.5, 2.0, 4.0],
            leaves: vec![(1, 2), (2, 3)],
        };
        let m = distance_matrix(&t, None).unwrap();
        assert_eq!(m.dist[0][1], 0.5 + 2.5);
        let single = distance_matrix(&t, Some(&[2])).unwrap();
        assert_eq!(single.depth, vec![4.0]);
        assert!(distance_matrix(&t, Some(&[9])).is_err());
        assert!(m.four_point_holds(0.0));
        let csv = m.to_csv();
        assert!(csv.starts_with("point,root,1,2\n"));
    }

    #[test]
    fn scaled_distance() {
        let a = LeafLabeledMetricTree { labels: vec![1, 2], depth: vec![1.0, 2.0], dist: vec![vec![0.0, 3.0], vec![3.0, 0.0]] };
        let mut b = a.clone();
        b.depth.iter_mut().for_each(|v| *v *= 2.0);
        b.dist.iter_mut().flatten().for_each(|v| *v *= 2.0);
        assert_eq!(labeled_tree_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(labeled_tree_distance(&a, &b).unwrap(), 0.5 * 3.0);
    }

    #[test]
    fn ks_examples() {
        let x: Vec<f64> = (0..100).map(|k| k as f64).collect();
        assert_eq!(ks_two_sample(&x, &x).unwrap(), 0.0);
        let y: Vec<f64> = x.iter().map(|v| v + 1000.0).collect();
        assert_eq!(ks_two_sample(&x, &y).unwrap(), 1.0);
        assert!(ks_two_sample(&[], &x).is_err());
        let mut rng = stream(3, 0);
        let u: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        assert!(ks_one_sample(&u, |t| t.clamp(0.0, 1.0)).unwrap() < 0.02);
        assert!(ks_pvalue(0.001, 1e4) > 0.99);
        assert!(ks_pvalue(0.05, 1e4) < 1e-10);
    }

    #[test]
    fn chi_square_pools_cells() {
        let r = chi_square_test(&[50, 50], &[0.5, 0.5], 5.0).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.dof, 1);
        let r = chi_square_test(&[90, 10, 0], &[0.5, 0.49, 0.01], 5.0).unwrap();
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn pairwise_matches_naive() {
        let x: Vec<f64> = (1..=1000).map(|k| 1.0 / k as f64).collect();
        assert!((pairwise_sum(&x) - x.iter().sum::<f64>()).abs() < 1e-12);
        let (m, se) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(se, 1.0);
    }
}
