//! Property-based invariants across modules.

use mbtrees::frag::{discretize, DiscretizedKernel, DislocationAtom};
use mbtrees::growth::urn_limit_sample;
use mbtrees::mb::{sample_mb_tree, MBTree, SampleOptions};
use mbtrees::metrics::distance_matrix;
use mbtrees::partitions::{prokhorov_distance, rank_mass_partition, AtomicMeasure, DiscreteTypedPartition, Part};
use mbtrees::rng::{replicates, stream};
use proptest::prelude::*;

fn measure(points: Vec<((f64, f64), f64)>) -> AtomicMeasure {
    let total: f64 = points.iter().map(|p| p.1).sum();
    AtomicMeasure::new(points.into_iter().map(|((x, y), w)| (vec![x, y], w / total)).collect())
}

fn atoms() -> impl Strategy<Value = Vec<((f64, f64), f64)>> {
    prop::collection::vec(((0.0..1.0f64, 0.0..1.0f64), 0.05..1.0f64), 1..=8)
}

fn mass_atoms() -> impl Strategy<Value = Vec<(f64, usize)>> {
    prop::collection::vec((0.01..1.0f64, 1usize..=3), 1..=8).prop_map(|v| {
        let s: f64 = v.iter().map(|a| a.0).sum();
        v.into_iter().map(|(m, t)| (m / s, t)).collect()
    })
}

fn halves_kernel() -> DiscretizedKernel {
    let s = rank_mass_partition(vec![(0.5, 1), (0.3, 2), (0.2, 1)]).unwrap();
    let t = rank_mass_partition(vec![(0.6, 2), (0.4, 1)]).unwrap();
    DiscretizedKernel::new(0.6, 0.0, vec![vec![DislocationAtom { w: 1.0, s }], vec![DislocationAtom { w: 0.8, s: t }]], vec![vec![0.0; 2]; 2])
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prokhorov_is_a_metric(a in atoms(), b in atoms(), c in atoms()) {
        let (a, b, c) = (measure(a), measure(b), measure(c));
        let ab = prokhorov_distance(&a, &b).unwrap();
        prop_assert!(prokhorov_distance(&a, &a).unwrap().abs() < 1e-9);
        prop_assert!((ab - prokhorov_distance(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!(prokhorov_distance(&a, &c).unwrap() <= ab + prokhorov_distance(&b, &c).unwrap() + 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn ranking_is_idempotent(v in mass_atoms()) {
        let once = rank_mass_partition(v).unwrap();
        let twice = rank_mass_partition(once.atoms().to_vec()).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.atoms().windows(2).all(|w| w[0].0 >= w[1].0));
    }

    #[test]
    fn discretization_conserves_size(v in mass_atoms(), m in 1usize..500) {
        let s = rank_mass_partition(v).unwrap();
        let p = discretize(&s, m);
        prop_assert_eq!(p.size_sum(), m);
        prop_assert!(p.is_valid());
    }

    #[test]
    fn discrete_ranking_is_idempotent(sizes in prop::collection::vec((1usize..20, 1usize..=3), 1..8)) {
        let total: usize = sizes.iter().map(|s| s.0).sum::<usize>() + 3;
        let parts: Vec<Part> = sizes.iter().map(|&(s, t)| Part::new(s, t)).collect();
        let p = DiscreteTypedPartition::ranked(parts, total, false).unwrap();
        let q = DiscreteTypedPartition::ranked(p.parts().to_vec(), total, false).unwrap();
        prop_assert_eq!(p, q);
    }

    #[test]
    fn sampled_trees_are_tree_metrics(seed in any::<u64>(), n in 2usize..40) {
        let k = halves_kernel();
        let t = sample_mb_tree(&k, n, 1, &mut stream(seed, 0), &SampleOptions::default()).unwrap();
        prop_assert_eq!(t.root_size(), n);
        prop_assert!(distance_matrix(&t, None).unwrap().four_point_holds(1e-9));
        let back = MBTree::from_dump(&t.to_dump()).unwrap();
        prop_assert_eq!(back.to_dump(), t.to_dump());
    }

    #[test]
    fn urn_limits_are_probability_vectors(seed in any::<u64>(), w in prop::collection::vec(0.1..5.0f64, 2..5)) {
        let x = urn_limit_sample(&w, &[(1.0, 0.5), (2.0, 0.5)], 500, &mut stream(seed, 0));
        prop_assert!(x.iter().all(|v| *v > 0.0));
        prop_assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn replicates_ignore_thread_count() {
    let k = halves_kernel();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            replicates(77, 64, |_, rng| sample_mb_tree(&k, 50, 1, rng, &SampleOptions::default()).unwrap().to_dump())
        })
    };
    assert_eq!(run(1), run(3));
}
