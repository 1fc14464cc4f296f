//! Randomized invariants over kernels, routing, divergence and sampling.

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rtformer::analysis::jsd;
use rtformer::kernels::{sparse_attention, SparsitySet};
use rtformer::model::nucleus_filter;
use rtformer::routing::{init_centroids, routing_attention, RoutingOptions};
use rtformer::Tensor;

fn matrix(rows: usize, cols: usize, vals: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], vals.iter().cycle().take(rows * cols).copied().collect()).unwrap()
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.set(i, i, 1.0);
    }
    t
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_filter_map("all zero", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // With V = I the output rows are the attention weights themselves.
    #[test]
    fn sparse_rows_are_distributions_on_their_support(
        n in 1usize..40,
        window in 1usize..12,
        vals in prop::collection::vec(-2.0f64..2.0, 8..64),
    ) {
        let q = matrix(n, 4, &vals);
        let k = matrix(n, 4, &vals[3..]);
        let set = SparsitySet::local(n, window).unwrap();
        let a = sparse_attention(&q, &k, &identity(n), &set).unwrap();
        for i in 0..n {
            let row = a.row(i);
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            for (j, &p) in row.iter().enumerate() {
                prop_assert!(p >= 0.0);
                if !set.row(i).contains(&j) {
                    prop_assert_eq!(p, 0.0);
                }
            }
        }
    }

    #[test]
    fn routing_is_balanced_causal_and_cluster_local(
        n in 4usize..64,
        k in 1usize..6,
        seed in any::<u64>(),
        vals in prop::collection::vec(-2.0f64..2.0, 17..80),
    ) {
        let w = n.div_ceil(k);
        let x = matrix(n, 6, &vals);
        let c = init_centroids::<f64>(k, 6, seed).unwrap();
        let opts = RoutingOptions { causal: true, window: w, train: false };
        let out = routing_attention(&x, None, &identity(n), &c, opts).unwrap();
        out.plan.validate(n).unwrap();
        for members in &out.plan.q_idx {
            prop_assert_eq!(members.len(), w);
            prop_assert!(members.windows(2).all(|p| p[0] < p[1]));
        }
        for i in 0..n {
            let row = out.output.row(i);
            let home: Vec<&Vec<usize>> = out.plan.q_idx.iter().filter(|m| m.contains(&i)).collect();
            if home.is_empty() {
                prop_assert!(row.iter().all(|&p| p == 0.0));
                continue;
            }
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            for (j, &p) in row.iter().enumerate() {
                prop_assert!(p >= 0.0);
                let shares = home.iter().any(|m| m.contains(&j));
                if j > i || !shares {
                    prop_assert_eq!(p, 0.0, "row {} leaks to {}", i, j);
                }
            }
        }
    }

    #[test]
    fn jsd_is_symmetric_and_bounded(
        (p, q) in (1usize..20).prop_flat_map(|len| (distribution(len), distribution(len))),
    ) {
        let (a, b) = (jsd(&p, &q).unwrap(), jsd(&q, &p).unwrap());
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
        assert_abs_diff_eq!(jsd(&p, &p).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nucleus_keeps_the_smallest_sufficient_prefix(probs in distribution(12), p in 0.01f64..=1.0) {
        let kept = nucleus_filter(&probs, p);
        prop_assert!(!kept.is_empty());
        assert_abs_diff_eq!(kept.iter().map(|(_, q)| q).sum::<f64>(), 1.0, epsilon = 1e-12);
        let mass: f64 = kept.iter().map(|(i, _)| probs[*i]).sum();
        prop_assert!(mass >= p - 1e-12);
        // Dropping the least likely kept symbol falls short of p.
        let smallest = kept.iter().map(|(i, _)| probs[*i]).fold(f64::INFINITY, f64::min);
        prop_assert!(kept.len() == 1 || mass - smallest < p + 1e-12);
    }
}
