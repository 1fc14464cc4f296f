//! Content-based routing attention.
//!
//! Queries and keys are layer-normalized, scored against a shared set of
//! centroids, and every centroid takes its `w` highest-scoring tokens. Each
//! cluster then runs ordinary (causal) attention among its members, and the
//! per-cluster outputs are scattered back to sequence positions. Centroids are
//! non-gradient state, advanced by an exponential moving average of the
//! vectors assigned to them.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};
use crate::kernels::{layer_normalize, softmax_in_place, OpCounter};
use crate::tensor::{axpy, dot, Scalar, Tensor};

/// Default centroid decay.
pub const DEFAULT_DECAY: f64 = 0.999;

/// The `k x d` centroid matrix plus its EMA decay. Every row has norm
/// `sqrt(d)`, matching the norm of layer-normalized queries and keys.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet<T: Scalar = f64> {
    mu: Tensor<T>,
    decay: T,
}

impl<T: Scalar> CentroidSet<T> {
    /// Wraps an explicit centroid matrix. Rows are rescaled to norm `sqrt(d)`.
    pub fn new(mu: Tensor<T>, decay: T) -> Result<Self> {
        ensure!(mu.rank() == 2, "centroids must be a matrix");
        ensure!(mu.rows() >= 1, "need at least one centroid");
        ensure!(
            decay >= T::zero() && decay <= T::one(),
            "decay must lie in [0, 1]"
        );
        let mut mu = mu;
        let target = T::from_f64((mu.cols() as f64).sqrt());
        for c in 0..mu.rows() {
            let row = mu.row_mut(c);
            let norm = dot(row, row).sqrt();
            ensure!(norm > T::zero(), "centroid {c} is the zero vector");
            let s = target / norm;
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(Self { mu, decay })
    }

    /// Builds a set from stored rows without renormalizing, for checkpoint
    /// restores that must be bit-exact.
    pub fn from_raw(mu: Tensor<T>, decay: T) -> Result<Self> {
        ensure!(mu.rank() == 2 && mu.rows() >= 1, "centroids must be a non-empty matrix");
        ensure!(decay >= T::zero() && decay <= T::one(), "decay must lie in [0, 1]");
        Ok(Self { mu, decay })
    }

    pub fn with_decay(mut self, decay: T) -> Result<Self> {
        ensure!(decay >= T::zero() && decay <= T::one(), "decay must lie in [0, 1]");
        self.decay = decay;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn mu(&self) -> &Tensor<T> {
        &self.mu
    }

    pub fn decay(&self) -> T {
        self.decay
    }
}

/// Draws `k` isotropic Gaussian directions and scales them to norm `sqrt(d)`.
/// Deterministic in `seed`.
pub fn init_centroids<T: Scalar>(k: usize, d: usize, seed: u64) -> Result<CentroidSet<T>> {
    ensure!(k >= 1, "init_centroids needs k >= 1");
    ensure!(d >= 2, "init_centroids needs d >= 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..k * d)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    CentroidSet::new(Tensor::new(vec![k, d], data)?, T::from_f64(DEFAULT_DECAY))
}

/// `mu · xᵀ`: entry `(c, t)` is the dot product of centroid `c` with row `t`.
pub fn cluster_products<T: Scalar>(centroids: &CentroidSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    cluster_products_counted(centroids, x, &mut OpCounter::default())
}

pub fn cluster_products_counted<T: Scalar>(
    centroids: &CentroidSet<T>,
    x: &Tensor<T>,
    ops: &mut OpCounter,
) -> Result<Tensor<T>> {
    ensure!(x.rank() == 2, "routing input must be a matrix");
    ensure!(
        x.cols() == centroids.dim(),
        "centroid dim {} does not match input dim {}",
        centroids.dim(),
        x.cols()
    );
    let (k, n) = (centroids.k(), x.rows());
    let mut out = Tensor::zeros(vec![k, n]);
    for c in 0..k {
        let mu = centroids.mu.row(c);
        for t in 0..n {
            out.set(c, t, dot(mu, x.row(t)));
        }
    }
    ops.add(k * n * x.cols());
    Ok(out)
}

/// For each cluster (row of `prod`), the `w` tokens with the largest product,
/// ties going to the lower token index, returned in ascending index order.
pub fn topk_assign<T: Scalar>(prod: &Tensor<T>, w: usize) -> Result<Vec<Vec<usize>>> {
    ensure!(prod.rank() == 2, "products must be a [k, n] matrix");
    let n = prod.cols();
    ensure!(w >= 1 && w <= n, "top-k window {w} outside 1..={n}");
    ensure!(prod.is_finite(), "non-finite cluster products");
    let mut clusters = Vec::with_capacity(prod.rows());
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for c in 0..prod.rows() {
        let row = prod.row(c);
        let by_score = |a: &usize, b: &usize| -> Ordering {
            row[*b]
                .partial_cmp(&row[*a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(b))
        };
        order.clear();
        order.extend(0..n);
        if w < n {
            order.select_nth_unstable_by(w - 1, by_score);
        }
        let mut top = order[..w].to_vec();
        top.sort_unstable();
        clusters.push(top);
    }
    Ok(clusters)
}

/// Sorted member lists per cluster for the query side and the key side.
/// In causal (shared query/key) mode both sides are identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingPlan {
    pub q_idx: Vec<Vec<usize>>,
    pub k_idx: Vec<Vec<usize>>,
    pub window: usize,
}

impl RoutingPlan {
    pub fn shared(idx: Vec<Vec<usize>>, window: usize) -> Self {
        Self {
            k_idx: idx.clone(),
            q_idx: idx,
            window,
        }
    }

    pub fn clusters(&self) -> usize {
        self.q_idx.len()
    }

    /// Checks the balance and ordering invariants against sequence length `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        for rows in [&self.q_idx, &self.k_idx] {
            for (c, r) in rows.iter().enumerate() {
                ensure!(
                    r.len() == self.window,
                    "cluster {c} has {} members, expected {}",
                    r.len(),
                    self.window
                );
                ensure!(r.iter().all(|&t| t < n), "cluster {c} index out of range");
                ensure!(
                    r.windows(2).all(|p| p[0] < p[1]),
                    "cluster {c} is not strictly ascending"
                );
            }
        }
        Ok(())
    }

    /// Number of clusters each query position belongs to.
    pub fn query_counts(&self, n: usize) -> Vec<usize> {
        let mut counts = vec![0; n];
        for r in &self.q_idx {
            for &t in r {
                counts[t] += 1;
            }
        }
        counts
    }
}

/// A uniformly random plan with the same budget as a routing plan: every
/// cluster receives `w` distinct positions drawn without replacement.
pub fn random_plan<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    w: usize,
    causal: bool,
    rng: &mut R,
) -> Result<RoutingPlan> {
    ensure!(w >= 1 && w <= n, "random plan window {w} outside 1..={n}");
    let draw = |rng: &mut R| -> Vec<Vec<usize>> {
        (0..k)
            .map(|_| {
                let mut v = sample(rng, n, w).into_vec();
                v.sort_unstable();
                v
            })
            .collect()
    };
    let q_idx = draw(rng);
    let k_idx = if causal { q_idx.clone() } else { draw(rng) };
    Ok(RoutingPlan {
        q_idx,
        k_idx,
        window: w,
    })
}

/// Nearest centroid (largest product) per token, plus padding flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub ids: Vec<usize>,
    pub padding: Vec<bool>,
}

impl Assignment {
    /// Argmax over each column of a `[k, n]` product matrix; ties go to the
    /// lower centroid index.
    pub fn from_products<T: Scalar>(prod: &Tensor<T>, padding: Option<&[bool]>) -> Result<Self> {
        let (k, n) = (prod.rows(), prod.cols());
        if let Some(p) = padding {
            ensure!(p.len() == n, "padding flags length {} != {n}", p.len());
        }
        let ids = (0..n)
            .map(|t| {
                let mut best = 0;
                for c in 1..k {
                    if *prod.get(c, t) > *prod.get(best, t) {
                        best = c;
                    }
                }
                best
            })
            .collect();
        Ok(Self {
            ids,
            padding: padding.map_or_else(|| vec![false; n], <[bool]>::to_vec),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Scatters `values[c, s, :]` to row `idx[c][s]` and averages rows that
/// receive more than one contribution. Rows that receive nothing stay zero.
pub fn scatter_mean<T: Scalar>(idx: &[Vec<usize>], values: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    ensure!(values.rank() == 3, "scatter values must be [k, w, d]");
    let (k, w, d) = (values.shape()[0], values.shape()[1], values.shape()[2]);
    ensure!(idx.len() == k, "index has {} clusters, values have {k}", idx.len());
    let mut out = Tensor::zeros(vec![n, d]);
    let mut counts = vec![0usize; n];
    for (c, members) in idx.iter().enumerate() {
        ensure!(members.len() == w, "cluster {c} has {} indices, expected {w}", members.len());
        for (s, &t) in members.iter().enumerate() {
            ensure!(t < n, "scatter index {t} out of range for n = {n}");
            let src = &values.data()[(c * w + s) * d..(c * w + s + 1) * d];
            axpy(T::one(), src, out.row_mut(t));
            counts[t] += 1;
        }
    }
    for (t, &cnt) in counts.iter().enumerate() {
        if cnt > 1 {
            let inv = T::from_f64(1.0 / cnt as f64);
            out.row_mut(t).iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(out)
}

/// One EMA step: `mu_c <- decay * mu_c + (1 - decay)/2 * (sum of queries
/// assigned to c) + (1 - decay)/2 * (sum of keys assigned to c)`, then each
/// row is rescaled to norm `sqrt(d)`. Padding tokens are skipped; a centroid
/// whose update vanishes keeps its previous direction.
pub fn update_centroids<T: Scalar>(
    centroids: &CentroidSet<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    q_assign: &Assignment,
    k_assign: &Assignment,
) -> Result<CentroidSet<T>> {
    let d = centroids.dim();
    ensure!(q.cols() == d && k.cols() == d, "centroid update dimension mismatch");
    ensure!(
        q_assign.len() == q.rows() && k_assign.len() == k.rows(),
        "assignment lengths do not match inputs"
    );
    let lambda = centroids.decay;
    if lambda == T::one() {
        return Ok(centroids.clone());
    }
    let mut sums = Tensor::zeros(vec![centroids.k(), d]);
    for (x, assign) in [(q, q_assign), (k, k_assign)] {
        for t in 0..x.rows() {
            if assign.padding[t] {
                continue;
            }
            let c = assign.ids[t];
            ensure!(c < centroids.k(), "assignment {c} out of range");
            axpy(T::one(), x.row(t), sums.row_mut(c));
        }
    }
    let half = (T::one() - lambda) * T::from_f64(0.5);
    let target = T::from_f64((d as f64).sqrt());
    let mut mu = centroids.mu.clone();
    for c in 0..centroids.k() {
        let mut next: Vec<T> = centroids.mu.row(c).iter().map(|v| *v * lambda).collect();
        axpy(half, sums.row(c), &mut next);
        let norm = dot(&next, &next).sqrt();
        if norm > T::zero() && norm.is_finite() {
            let s = target / norm;
            for (dst, v) in mu.row_mut(c).iter_mut().zip(&next) {
                *dst = *v * s;
            }
        }
    }
    Ok(CentroidSet { mu, decay: lambda })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingOptions {
    /// Shared query/key routing with a left-to-right mask inside clusters.
    pub causal: bool,
    /// Members per cluster.
    pub window: usize,
    /// Advance the centroids by one EMA step.
    pub train: bool,
}

#[derive(Debug, Clone)]
pub struct RoutingOutput<T: Scalar> {
    pub output: Tensor<T>,
    pub centroids: CentroidSet<T>,
    pub plan: RoutingPlan,
    pub q_assign: Assignment,
    pub k_assign: Assignment,
}

/// Routing attention over raw (not yet normalized) routing vectors `x`.
///
/// In causal mode `keys` must be `None`: keys are the normalized queries. In
/// non-causal mode `keys` is required and outputs are scattered to the query
/// positions of each cluster.
pub fn routing_attention<T: Scalar>(
    x: &Tensor<T>,
    keys: Option<&Tensor<T>>,
    v: &Tensor<T>,
    centroids: &CentroidSet<T>,
    opts: RoutingOptions,
) -> Result<RoutingOutput<T>> {
    routing_attention_counted(x, keys, v, centroids, opts, &mut OpCounter::default())
}

pub fn routing_attention_counted<T: Scalar>(
    x: &Tensor<T>,
    keys: Option<&Tensor<T>>,
    v: &Tensor<T>,
    centroids: &CentroidSet<T>,
    opts: RoutingOptions,
    ops: &mut OpCounter,
) -> Result<RoutingOutput<T>> {
    ensure!(x.rank() == 2 && v.rank() == 2, "routing inputs must be matrices");
    let n = x.rows();
    ensure!(v.rows() == n, "values have {} rows, queries {n}", v.rows());
    ensure!(opts.window >= 1 && opts.window <= n, "window {} outside 1..={n}", opts.window);
    let q = layer_normalize(x)?;
    let (k, q_prod, k_prod) = if opts.causal {
        ensure!(keys.is_none(), "causal routing shares queries and keys; pass no key tensor");
        let prod = cluster_products_counted(centroids, &q, ops)?;
        (q.clone(), prod.clone(), prod)
    } else {
        let keys = keys.ok_or_else(|| {
            crate::Error::Contract("non-causal routing needs a separate key tensor".into())
        })?;
        ensure!(keys.shape() == x.shape(), "keys must match queries in shape");
        let k = layer_normalize(keys)?;
        let qp = cluster_products_counted(centroids, &q, ops)?;
        let kp = cluster_products_counted(centroids, &k, ops)?;
        (k, qp, kp)
    };

    let q_idx = topk_assign(&q_prod, opts.window)?;
    let k_idx = if opts.causal {
        q_idx.clone()
    } else {
        topk_assign(&k_prod, opts.window)?
    };
    let plan = RoutingPlan {
        q_idx,
        k_idx,
        window: opts.window,
    };
    let output = attend_plan(&q, &k, v, &plan, opts.causal, ops)?;

    let q_assign = Assignment::from_products(&q_prod, None)?;
    let k_assign = Assignment::from_products(&k_prod, None)?;
    let centroids = if opts.train {
        update_centroids(centroids, &q, &k, &q_assign, &k_assign)?
    } else {
        centroids.clone()
    };
    Ok(RoutingOutput {
        output,
        centroids,
        plan,
        q_assign,
        k_assign,
    })
}

/// Gather / attend / scatter for an explicit plan over already-normalized
/// queries and keys.
pub fn attend_plan<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    plan: &RoutingPlan,
    causal: bool,
    ops: &mut OpCounter,
) -> Result<Tensor<T>> {
    let (n, d, dv) = (q.rows(), q.cols(), v.cols());
    plan.validate(n)?;
    let w = plan.window;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut mixed = Tensor::zeros(vec![plan.clusters(), w, dv]);
    let mut logits = vec![T::zero(); w];
    for (c, (qi, ki)) in plan.q_idx.iter().zip(&plan.k_idx).enumerate() {
        let qg = q.gather_rows(qi);
        let kg = k.gather_rows(ki);
        let vg = v.gather_rows(ki);
        for a in 0..w {
            // Members are sorted, so the left-to-right mask keeps slots 0..=a.
            let support = if causal { a + 1 } else { w };
            let row = &mut logits[..support];
            for (b, l) in row.iter_mut().enumerate() {
                *l = dot(qg.row(a), kg.row(b)) * scale;
            }
            softmax_in_place(row);
            let dst = &mut mixed.data_mut()[(c * w + a) * dv..(c * w + a + 1) * dv];
            for (b, &p) in row.iter().enumerate() {
                axpy(p, vg.row(b), dst);
            }
            ops.add(support * (d + dv));
        }
    }
    scatter_mean(&plan.q_idx, &mixed, n)
}
