//! Exact and statistical oracles for the multi-type GW module.

use mbtrees::census::{to_f64, Census};
use mbtrees::gw::*;
use mbtrees::mb::SplittingKernel;
use mbtrees::metrics::chi_square_test;
use mbtrees::partitions::DiscreteTypedPartition;
use mbtrees::rng::stream;
use std::collections::BTreeMap;
use std::sync::Arc;

fn worked() -> GWSpec {
    let t = 1.0 / 3.0;
    GWSpec::new(vec![
        vec![(vec![0, 0], t), (vec![2, 0], t), (vec![0, 3], t)],
        vec![(vec![0, 0], 0.5), (vec![1, 0], 0.25), (vec![0, 1], 0.25)],
    ])
    .unwrap()
}

fn census_spec() -> GWSpec {
    let t = 1.0 / 3.0;
    GWSpec::new(vec![
        vec![(vec![0, 0], t), (vec![2, 0], t), (vec![0, 3], t)],
        vec![(vec![0, 0], 0.75), (vec![1, 0], 1.0 / 6.0), (vec![2, 0], 1.0 / 12.0)],
    ])
    .unwrap()
}

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b}");
}

#[test]
fn perron_data_of_worked_spec() {
    // mean matrix ((2/3, 1), (1/4, 1/4)); left eigenvector a, right b with a·1 = 1, a·b = 1
    let pd = worked().perron().clone();
    close(pd.spectral_radius, 1.0, 1e-12);
    close(pd.a[0], 3.0 / 7.0, 1e-12);
    close(pd.a[1], 4.0 / 7.0, 1e-12);
    close(pd.b[0], 21.0 / 13.0, 1e-12);
    close(pd.b[1], 7.0 / 13.0, 1e-12);
    close(pd.chi[0], 9.0 / 13.0, 1e-12);
    close(pd.chi[1], 4.0 / 13.0, 1e-12);
}

#[test]
fn census_matches_dp_and_kernel() {
    let spec = Arc::new(census_spec());
    let census = Census::new(&spec, 9).unwrap();
    let table = Arc::new(count_tables(&spec, 9).unwrap());
    let kernel = gw_splitting_kernel(spec.clone(), table.clone()).unwrap();
    for n in 1..=9 {
        for i in 1..=2 {
            close(to_f64(census.tree_prob(i, n)), table.tree_prob(i, n), 1e-13);
            if table.tree_prob(i, n) == 0.0 {
                continue;
            }
            let exact = census.kernel_law(n, i);
            let numeric: BTreeMap<DiscreteTypedPartition, f64> = kernel.support(n, i).unwrap().into_iter().collect();
            assert_eq!(exact.len(), numeric.len());
            for (p, q) in exact {
                close(to_f64(&q), numeric[&p], 1e-13);
            }
        }
    }
}

#[test]
fn census_rejects_cyclic_specs() {
    assert!(Census::new(&worked(), 5).is_err());
}

#[test]
fn otter_dwass_on_both_models() {
    let binary = GWSpec::new(vec![vec![(vec![0], 0.25), (vec![1], 0.5), (vec![2], 0.25)]]).unwrap();
    for spec in [worked(), binary] {
        let table = count_tables(&spec, 60).unwrap();
        for (_, _, dp, walk) in otter_dwass_table(&spec, &table, 4, 60).unwrap() {
            close(dp, walk, 1e-13);
        }
    }
}

#[test]
fn sampler_matches_enumerated_law() {
    let spec = Arc::new(worked());
    let table = Arc::new(count_tables(&spec, 12).unwrap());
    let kernel = gw_splitting_kernel(spec, table).unwrap();
    for (n, i) in [(7, 1), (6, 2)] {
        let law = kernel.support(n, i).unwrap();
        let index: BTreeMap<&DiscreteTypedPartition, usize> = law.iter().enumerate().map(|(k, (p, _))| (p, k)).collect();
        let mut counts = vec![0u64; law.len()];
        let mut rng = stream(91, n as u64);
        for _ in 0..40_000 {
            counts[index[&kernel.sample(n, i, &mut rng).unwrap()]] += 1;
        }
        let expected: Vec<f64> = law.iter().map(|x| x.1).collect();
        let chi = chi_square_test(&counts, &expected, 5.0).unwrap();
        assert!(chi.p_value > 1e-4, "n={n} i={i}: {chi:?}");
    }
}

#[test]
fn size_biasing_and_extinction_conditioning() {
    let spec = worked();
    for law in kesten_bias(&spec) {
        close(law.iter().map(|x| x.1).sum(), 1.0, 1e-12);
    }
    let x = extinct_conditioned_offspring(&spec).unwrap();
    for law in x.laws.iter().flatten() {
        close(law.iter().map(|x| x.1).sum(), 1.0, 1e-12);
    }
    let (r, ok) = subcriticality_check(&x);
    assert!(ok);
    close(r, 0.25, 1e-12);
}

#[test]
fn first_child_limit_is_a_law() {
    let spec = worked();
    for i in 1..=2 {
        close(first_child_type_limit(&spec, i).iter().sum(), 1.0, 1e-12);
    }
}
