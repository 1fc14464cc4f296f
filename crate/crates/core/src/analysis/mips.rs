use std::cmp::Ordering;
use std::collections::HashSet;

use crate::error::{ensure, Result};
use crate::kernels::layer_normalize;
use crate::routing::{
    cluster_products, topk_assign, update_centroids, Assignment, CentroidSet, RoutingPlan,
};
use crate::tensor::{dot, Tensor};

/// For each query, the `w` keys with the largest dot product, by exhaustive
/// search. Ties go to the lower key index.
pub fn exact_top_w(q: &Tensor, k: &Tensor, w: usize) -> Result<Vec<Vec<usize>>> {
    ensure!(q.cols() == k.cols(), "query and key dimensions differ");
    ensure!(w >= 1 && w <= k.rows(), "budget {w} outside 1..={}", k.rows());
    let mut out = Vec::with_capacity(q.rows());
    for i in 0..q.rows() {
        let scores: Vec<f64> = (0..k.rows()).map(|j| dot(q.row(i), k.row(j))).collect();
        let mut idx: Vec<usize> = (0..k.rows()).collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(w);
        out.push(idx);
    }
    Ok(out)
}

/// Mean over queries of the share of a query's exact top-`w` keys that the
/// plan lets it see. A query sees the keys of every cluster it belongs to; a
/// query in no cluster scores zero.
pub fn mips_recall(q: &Tensor, k: &Tensor, plan: &RoutingPlan, w: usize) -> Result<f64> {
    let n = q.rows();
    ensure!(n > 0, "no queries");
    ensure!(plan.q_idx.len() == plan.k_idx.len(), "plan sides disagree");
    let exact = exact_top_w(q, k, w)?;
    let mut visible: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    for (qs, ks) in plan.q_idx.iter().zip(&plan.k_idx) {
        for &i in qs {
            ensure!(i < n, "plan query index {i} out of range");
            visible[i].extend(ks.iter().copied());
        }
    }
    let total: f64 = exact
        .iter()
        .zip(&visible)
        .map(|(top, seen)| top.iter().filter(|j| seen.contains(j)).count() as f64 / w as f64)
        .sum();
    Ok(total / n as f64)
}

/// Spherical k-means: centroids start at distinct data rows and are then
/// replaced by the normalized mean direction of their members `iters` times.
pub fn fit_centroids(x: &Tensor, k: usize, iters: usize, seed: u64) -> Result<CentroidSet> {
    let xn = layer_normalize(x)?;
    ensure!(k >= 1 && k <= xn.rows(), "cannot fit {k} centroids to {} rows", xn.rows());
    let mut r = crate::rng::stream(seed, &[0xf17]);
    let rows = rand::seq::index::sample(&mut r, xn.rows(), k).into_vec();
    let start = CentroidSet::new(xn.gather_rows(&rows), 0.0)?;
    let mut c = start;
    for _ in 0..iters {
        let a = Assignment::from_products(&cluster_products(&c, &xn)?, None)?;
        c = update_centroids(&c, &xn, &xn, &a, &a)?;
    }
    Ok(c)
}

/// A non-causal routing plan: each centroid takes its `w` nearest
/// layer-normalized queries and, separately, its `w` nearest keys.
pub fn routing_plan(q: &Tensor, k: &Tensor, centroids: &CentroidSet, w: usize) -> Result<RoutingPlan> {
    let (qn, kn) = (layer_normalize(q)?, layer_normalize(k)?);
    Ok(RoutingPlan {
        q_idx: topk_assign(&cluster_products(centroids, &qn)?, w)?,
        k_idx: topk_assign(&cluster_products(centroids, &kn)?, w)?,
        window: w,
    })
}
