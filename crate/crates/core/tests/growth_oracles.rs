//! Exact identities and small-n oracles for the growth module.

use mbtrees::growth::*;
use mbtrees::partitions::DiscreteTypedPartition;
use mbtrees::rng::stream;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeMap;

fn two_path() -> BrickSet {
    build_brick_set(&GrowthSpec { t0: GrowthSpec::path(2), alphabet: vec![(GrowthSpec::path(1), 1.0)] }).unwrap()
}

#[test]
fn remy_tree_shapes_are_uniform() {
    // four-leaf planted binary trees: 3 of the 15 leaf-labeled trees are balanced
    let b = build_brick_set(&GrowthSpec::remy()).unwrap();
    let mut rng = stream(5, 0);
    let reps = 200_000;
    let mut balanced = 0;
    for _ in 0..reps {
        let s = grow(&b, 1, 3, &mut rng).unwrap();
        assert_eq!(s.leaf_count(), 4);
        balanced += usize::from(*s.depths().iter().max().unwrap() == 3);
    }
    let p = balanced as f64 / reps as f64;
    let sd = (0.2f64 * 0.8 / reps as f64).sqrt();
    assert!((p - 0.2).abs() < 5.0 * sd, "{p}");
}

#[test]
fn remy_limit_mass_identity() {
    // Σ_k ℓ_k·E[1 − W₁] = Γ(1/2)/2 with E[1 − W₁] = 1/(2k) in the k-th component
    let b = build_brick_set(&GrowthSpec::remy()).unwrap();
    let k_max = 1_000_000;
    let ells = ell_weights(&b, 1, k_max, EllMode::ClosedForm, &mut stream(0, 0)).unwrap();
    assert_eq!(ells[0], 0.0);
    let partial: f64 = (1..=k_max).rev().map(|k| ells[k] / (2.0 * k as f64)).sum();
    let tail = 0.5 / (k_max as f64).sqrt();
    let want = std::f64::consts::PI.sqrt() / 2.0;
    assert!((partial + tail - want).abs() < 1e-6, "{}", partial + tail);
}

#[test]
fn remy_component_means() {
    // the k-th component puts Beta(k − 1/2, 1/2) on the root block: E[1 − W₁] = 1/(2k)
    let b = build_brick_set(&GrowthSpec::remy()).unwrap();
    let mut rng = stream(6, 0);
    for k in 1..=3 {
        for (mode, reps) in [(UrnMode::Dirichlet, 50_000), (UrnMode::Simulate(2_000), 10_000)] {
            let xs: Vec<f64> = (0..reps).map(|_| 1.0 - growth_component_sample(&b, 1, k, mode, &mut rng).unwrap()[0].0).collect();
            let (m, se) = mbtrees::metrics::mean_stderr(&xs);
            assert!((m - 0.5 / k as f64).abs() < 5.0 * se + 1e-3, "k={k} {mode:?}: {m} ± {se}");
        }
    }
    // ranked first block of the arcsine split: E[1 − max(W, 1 − W)] = 1/2 − 1/π
    let e = component_integral(&b, 1, 1, &|_| 1.0, UrnMode::Dirichlet, 50_000, &mut rng).unwrap();
    assert!((e.mean - (0.5 - std::f64::consts::FRAC_1_PI)).abs() < 5.0 * e.stderr, "{e:?}");
}

#[test]
fn ell_monte_carlo_tracks_closed_form() {
    let b = two_path();
    let exact = ell_weights(&b, 1, 4, EllMode::ClosedForm, &mut stream(0, 0)).unwrap();
    let mc = ell_weights(&b, 1, 4, EllMode::MonteCarlo { n: 4000, paths: 4000 }, &mut stream(7, 0)).unwrap();
    for k in 0..=4 {
        assert!((mc[k] / exact[k] - 1.0).abs() < 0.05, "k={k}: {} vs {}", mc[k], exact[k]);
    }
}

type Parts = Vec<(usize, usize)>;

fn key(p: &DiscreteTypedPartition) -> Parts {
    p.parts().iter().map(|x| (x.size, x.ty)).collect()
}

fn homogeneity_p(a: &BTreeMap<Parts, u64>, b: &BTreeMap<Parts, u64>) -> f64 {
    let (na, nb) = (a.values().sum::<u64>() as f64, b.values().sum::<u64>() as f64);
    let mut keys: Vec<&Parts> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut stat = 0.0;
    let mut cells = 0;
    for k in keys {
        let (x, y) = (*a.get(k).unwrap_or(&0) as f64, *b.get(k).unwrap_or(&0) as f64);
        let p = (x + y) / (na + nb);
        if p * na.min(nb) < 5.0 {
            continue;
        }
        stat += (x - p * na).powi(2) / (p * na) + (y - p * nb).powi(2) / (p * nb);
        cells += 1;
    }
    ChiSquared::new((cells - 1) as f64).unwrap().sf(stat)
}

#[test]
fn root_split_simulator_matches_full_growth() {
    let b = two_path();
    for (n, i) in [(4, 1), (5, 2)] {
        let mut rng = stream(8, n as u64);
        let mut fast = BTreeMap::new();
        let mut full = BTreeMap::new();
        for _ in 0..30_000 {
            *fast.entry(key(&sample_root_split(&b, i, n, &mut rng).unwrap().0)).or_insert(0u64) += 1;
            let t = reduce_growth_tree(&grow(&b, i, n, &mut rng).unwrap());
            *full.entry(key(&t.split_at(0))).or_insert(0u64) += 1;
        }
        let p = homogeneity_p(&fast, &full);
        assert!(p > 1e-4, "n={n} i={i}: p={p}");
    }
}

#[test]
fn root_index_law_matches_root_split() {
    let b = two_path();
    let n = 50;
    let (mut a, mut c) = (vec![0u64; n + 1], vec![0u64; n + 1]);
    let mut rng = stream(9, 0);
    for _ in 0..50_000 {
        a[root_brick_index(&b, 1, n, &mut rng).unwrap()] += 1;
        c[sample_root_split(&b, 1, n, &mut rng).unwrap().1] += 1;
    }
    for k in 0..4 {
        let (x, y) = (a[k] as f64 / 5e4, c[k] as f64 / 5e4);
        assert!((x - y).abs() < 5.0 * (x.max(1e-3) / 5e4 * 2.0).sqrt(), "k={k}: {x} vs {y}");
    }
}

fn split_functional(b: &BrickSet, n: usize, reps: usize, seed: u64, f: &dyn Fn(f64) -> f64) -> (f64, f64) {
    let mut rng = stream(seed, 0);
    let xs: Vec<f64> = (0..reps)
        .map(|_| {
            let p = sample_root_split(b, 1, n, &mut rng).unwrap().0;
            let first = p.parts()[0];
            let s1 = first.size as f64 / n as f64;
            (1.0 - if first.ty == 1 { s1 } else { 0.0 }) * f(s1)
        })
        .collect();
    let (m, se) = mbtrees::metrics::mean_stderr(&xs);
    let scale = (n as f64).sqrt();
    (m * scale, se * scale)
}

#[test]
fn empirical_kernel_tracks_truncated_limit() {
    // Rémy's ℓ_k·E[1 − s₁] terms decay like k^{-3/2}, so K = 50 leaves a tail of
    // about 0.07; a long truncation is used there
    let n = 10_000;
    let cases: [(BrickSet, &str, fn(f64) -> f64, usize, usize); 2] = [
        (build_brick_set(&GrowthSpec::remy()).unwrap(), "remy f=1", |_| 1.0, 10_000, 500),
        (two_path(), "two-path f=s1", |s| s, 50, 20_000),
    ];
    for (k, (b, name, f, k_max, samples)) in cases.iter().enumerate() {
        let (emp, se) = split_functional(b, n, 30_000, 40 + k as u64, f);
        let ells = ell_weights(b, 1, *k_max, EllMode::ClosedForm, &mut stream(0, 0)).unwrap();
        let g = |s: &mbtrees::partitions::MassPartition| f(s.first().0);
        let lim = truncated_growth_integral(b, 1, &ells, &g, UrnMode::Dirichlet, *samples, &mut stream(50 + k as u64, 0)).unwrap();
        let rel = emp / lim.mean - 1.0;
        assert!(rel.abs() < 0.1, "{name}: empirical {emp} ± {se}, truncated limit {} ± {}", lim.mean, lim.stderr);
    }
}
