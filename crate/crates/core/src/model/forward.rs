//! Forward pass with a full activation trace, and the matching backward pass.

use super::config::{HeadKind, ModelConfig};
use super::params::{Centroids, LayerParams, Params};
use crate::error::{ensure, Result};
use crate::kernels::{layer_normalize_eps, softmax_in_place, SparsitySet};
use crate::rng;
use crate::routing::{cluster_products, random_plan, topk_assign, Assignment, CentroidSet, RoutingPlan};
use crate::tensor::{axpy, dot, matmul, matmul_nt, matmul_tn_acc, Tensor};

/// Variance floor of the block layer norms.
pub const LN_EPS: f64 = 1e-5;
/// Variance floor used when normalizing routing vectors inside the model.
pub const ROUTE_EPS: f64 = 1e-9;

/// Routing plans per `(layer, head)`; `None` for unclustered heads.
pub type PlanSet = Vec<Vec<Option<RoutingPlan>>>;

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Record centroid assignments so the caller can apply an EMA step.
    pub train: bool,
    /// Seed for the member draw of random heads.
    pub plan_seed: u64,
    /// Reuse these plans instead of routing afresh (gradient checks).
    pub frozen: Option<&'a PlanSet>,
}

/// One softmax row of a head: query position, attended key positions,
/// their weights, and the row's share of the query's output. Routing heads
/// produce one row per (cluster, member) and average a position's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub query: usize,
    pub keys: Vec<usize>,
    pub probs: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct RoutedTrace {
    /// Layer-normalized shared query/key vectors.
    pub normed: Tensor,
    inv_std: Vec<f64>,
    pub plan: RoutingPlan,
    /// Nearest-centroid assignment, routing heads only.
    pub assignment: Option<Assignment>,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub kind: HeadKind,
    pub rows: Vec<AttentionRow>,
    pub routed: Option<RoutedTrace>,
}

#[derive(Debug, Clone)]
struct LnTrace {
    normed: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    x_in: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    pub heads: Vec<HeadTrace>,
    concat: Tensor,
    ln1: LnTrace,
    x1: Tensor,
    pre: Tensor,
    hidden: Tensor,
    ln2: LnTrace,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTrace>,
    pub logits: Tensor,
    /// Multiply-accumulates spent in attention (routing products included).
    pub attn_macs: u64,
}

impl Trace {
    pub fn plans(&self) -> PlanSet {
        self.layers
            .iter()
            .map(|l| {
                l.heads
                    .iter()
                    .map(|h| h.routed.as_ref().map(|r| r.plan.clone()))
                    .collect()
            })
            .collect()
    }

    fn final_hidden(&self) -> &Tensor {
        &self.layers.last().expect("at least one layer").output
    }
}

pub(crate) fn embed(cfg: &ModelConfig, params: &Params, tokens: &[u32]) -> Result<Tensor> {
    let n = tokens.len();
    ensure!(n >= 1, "empty token sequence");
    ensure!(n <= cfg.max_seq, "sequence of {n} exceeds max_seq {}", cfg.max_seq);
    let d = cfg.d_model;
    let mut x = Tensor::zeros(vec![n, d]);
    for (i, &t) in tokens.iter().enumerate() {
        ensure!((t as usize) < cfg.vocab, "token id {t} outside vocabulary of {}", cfg.vocab);
        let row = x.row_mut(i);
        row.copy_from_slice(params.tok_emb.row(t as usize));
        axpy(1.0, params.pos_emb.row(i), row);
    }
    Ok(x)
}

fn add_bias(x: &mut Tensor, b: &Tensor) {
    for i in 0..x.rows() {
        axpy(1.0, b.data(), x.row_mut(i));
    }
}

fn ln_affine(h: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, LnTrace) {
    let (normed, inv_std) = layer_normalize_eps(h, LN_EPS);
    let mut out = normed.clone();
    for i in 0..out.rows() {
        for ((o, g), b) in out.row_mut(i).iter_mut().zip(gain.data()).zip(bias.data()) {
            *o = *o * g + b;
        }
    }
    (out, LnTrace { normed, inv_std })
}

/// Backprop through a row-wise normalization `y = (x - mean) * inv_std`.
fn ln_backward(dy: &Tensor, normed: &Tensor, inv_std: &[f64]) -> Tensor {
    let mut dx = Tensor::zeros(dy.shape().to_vec());
    let d = dy.cols() as f64;
    for i in 0..dy.rows() {
        let g = dy.row(i);
        let y = normed.row(i);
        let mean_g = g.iter().sum::<f64>() / d;
        let mean_gy = dot(g, y) / d;
        for ((o, gj), yj) in dx.row_mut(i).iter_mut().zip(g).zip(y) {
            *o = inv_std[i] * (gj - mean_g - yj * mean_gy);
        }
    }
    dx
}

fn ln_affine_backward(
    dy: &Tensor,
    tr: &LnTrace,
    gain: &Tensor,
    dgain: &mut Tensor,
    dbias: &mut Tensor,
) -> Tensor {
    let mut dnormed = dy.clone();
    for i in 0..dy.rows() {
        let (g, y) = (dy.row(i), tr.normed.row(i));
        for j in 0..dy.cols() {
            dgain.data_mut()[j] += g[j] * y[j];
            dbias.data_mut()[j] += g[j];
        }
        for (v, gj) in dnormed.row_mut(i).iter_mut().zip(gain.data()) {
            *v *= gj;
        }
    }
    ln_backward(&dnormed, &tr.normed, &tr.inv_std)
}

fn softmax_rows(
    q: &Tensor,
    k: &Tensor,
    groups: impl Iterator<Item = (usize, Vec<usize>, f64)>,
) -> Vec<AttentionRow> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    groups
        .map(|(query, keys, weight)| {
            let mut probs: Vec<f64> = keys.iter().map(|&j| dot(q.row(query), k.row(j)) * scale).collect();
            softmax_in_place(&mut probs);
            AttentionRow {
                query,
                keys,
                probs,
                weight,
            }
        })
        .collect()
}

fn mix_values(rows: &[AttentionRow], v: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(vec![v.rows(), v.cols()]);
    for r in rows {
        let dst = out.row_mut(r.query);
        for (&j, &p) in r.keys.iter().zip(&r.probs) {
            axpy(r.weight * p, v.row(j), dst);
        }
    }
    out
}

/// Rows of a clustered head: within each cluster, member `a` attends to the
/// members up to and including itself; a position's rows are averaged.
pub(crate) fn cluster_rows(u: &Tensor, plan: &RoutingPlan) -> Vec<AttentionRow> {
    let counts = plan.query_counts(u.rows());
    let groups = plan.q_idx.iter().flat_map(|members| {
        let counts = &counts;
        members
            .iter()
            .enumerate()
            .map(move |(a, &i)| (i, members[..=a].to_vec(), 1.0 / counts[i] as f64))
    });
    softmax_rows(u, u, groups)
}

fn support_rows(q: &Tensor, k: &Tensor, support: &SparsitySet) -> Vec<AttentionRow> {
    softmax_rows(
        q,
        k,
        support.rows().iter().enumerate().map(|(i, r)| (i, r.clone(), 1.0)),
    )
}

fn head_forward(
    kind: HeadKind,
    qh: &Tensor,
    kh: &Tensor,
    centroids: Option<&CentroidSet<f64>>,
    frozen: Option<&RoutingPlan>,
    plan_seed: u64,
    tag: (usize, usize),
    macs: &mut u64,
) -> Result<HeadTrace> {
    let n = qh.rows();
    let dh = qh.cols();
    let support = match kind {
        HeadKind::Dense => Some(SparsitySet::causal(n)),
        HeadKind::Local { window } => Some(SparsitySet::local(n, window)?),
        HeadKind::Strided { stride } => Some(SparsitySet::strided(n, stride)?),
        HeadKind::Routing { .. } | HeadKind::Random { .. } => None,
    };
    if let Some(support) = support {
        let rows = support_rows(qh, kh, &support);
        *macs += rows.iter().map(|r| 2 * r.keys.len() * dh).sum::<usize>() as u64;
        return Ok(HeadTrace {
            kind,
            rows,
            routed: None,
        });
    }

    let k = kind.clusters().expect("clustered head");
    let w = kind.cluster_window(n).expect("clustered head");
    let (normed, inv_std) = layer_normalize_eps(qh, ROUTE_EPS);
    let mut assignment = None;
    let mut routed_plan = None;
    if let HeadKind::Routing { .. } = kind {
        let c = centroids.ok_or_else(|| {
            crate::Error::Contract(format!("routing head {tag:?} has no centroid state"))
        })?;
        let prod = cluster_products(c, &normed)?;
        *macs += (k * n * dh) as u64;
        if frozen.is_none() {
            routed_plan = Some(RoutingPlan::shared(topk_assign(&prod, w)?, w));
        }
        assignment = Some(Assignment::from_products(&prod, None)?);
    }
    let plan = match (frozen, routed_plan) {
        (Some(p), _) => {
            p.validate(n)?;
            ensure!(p.clusters() == k, "frozen plan for head {tag:?} has wrong cluster count");
            p.clone()
        }
        (None, Some(p)) => p,
        (None, None) => {
            let mut r = rng::stream(plan_seed, &[0x7a9d, tag.0 as u64, tag.1 as u64]);
            random_plan(n, k, w, true, &mut r)?
        }
    };
    let rows = cluster_rows(&normed, &plan);
    *macs += rows.iter().map(|r| 2 * r.keys.len() * dh).sum::<usize>() as u64;
    Ok(HeadTrace {
        kind,
        rows,
        routed: Some(RoutedTrace {
            normed,
            inv_std,
            plan,
            assignment,
        }),
    })
}

pub(crate) struct BlockContext<'a> {
    pub layer: usize,
    pub kinds: &'a [HeadKind],
    pub centroids: &'a [Option<&'a CentroidSet<f64>>],
    pub frozen: Option<&'a [Option<RoutingPlan>]>,
    pub plan_seed: u64,
}

pub(crate) fn block_forward(
    x: &Tensor,
    p: &LayerParams,
    ctx: &BlockContext<'_>,
    macs: &mut u64,
) -> Result<LayerTrace> {
    let heads = ctx.kinds.len();
    let d = x.cols();
    ensure!(d % heads == 0, "width {d} not divisible by {heads} heads");
    ensure!(ctx.centroids.len() == heads, "centroid slots do not match head count");
    ensure!(p.wq.shape() == [d, d], "layer {} weights do not match width {d}", ctx.layer);
    let dh = d / heads;
    let q = matmul(x, &p.wq);
    let k = matmul(x, &p.wk);
    let v = matmul(x, &p.wv);
    let mut concat = Tensor::zeros(vec![x.rows(), d]);
    let mut head_traces = Vec::with_capacity(heads);
    for (h, &kind) in ctx.kinds.iter().enumerate() {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.column_block(lo, hi);
        let kh = k.column_block(lo, hi);
        let frozen = ctx.frozen.and_then(|f| f.get(h)).and_then(Option::as_ref);
        let trace = head_forward(
            kind,
            &qh,
            &kh,
            ctx.centroids[h],
            frozen,
            ctx.plan_seed,
            (ctx.layer, h),
            macs,
        )?;
        let vh = v.column_block(lo, hi);
        concat.set_column_block(lo, &mix_values(&trace.rows, &vh));
        head_traces.push(trace);
    }
    let mut h1 = matmul(&concat, &p.wo);
    h1.add_assign(x);
    let (x1, ln1) = ln_affine(&h1, &p.ln1_gain, &p.ln1_bias);
    let mut pre = matmul(&x1, &p.w1);
    add_bias(&mut pre, &p.b1);
    let mut hidden = pre.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let mut h2 = matmul(&hidden, &p.w2);
    add_bias(&mut h2, &p.b2);
    h2.add_assign(&x1);
    let (output, ln2) = ln_affine(&h2, &p.ln2_gain, &p.ln2_bias);
    Ok(LayerTrace {
        x_in: x.clone(),
        q,
        k,
        v,
        heads: head_traces,
        concat,
        ln1,
        x1,
        pre,
        hidden,
        ln2,
        output,
    })
}

/// Gradients of one head's rows with respect to its query, key and value
/// matrices, accumulated into `dq`, `dk`, `dv`.
fn rows_backward(
    rows: &[AttentionRow],
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dout: &Tensor,
    dq: &mut Tensor,
    dk: &mut Tensor,
    dv: &mut Tensor,
) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut dp = Vec::new();
    for r in rows {
        let g = dout.row(r.query);
        dp.clear();
        dp.extend(r.keys.iter().map(|&j| r.weight * dot(g, v.row(j))));
        let s: f64 = r.probs.iter().zip(&dp).map(|(p, d)| p * d).sum();
        for ((&j, &p), &dpj) in r.keys.iter().zip(&r.probs).zip(&dp) {
            axpy(r.weight * p, g, dv.row_mut(j));
            let ds = p * (dpj - s) * scale;
            axpy(ds, k.row(j), dq.row_mut(r.query));
            axpy(ds, q.row(r.query), dk.row_mut(j));
        }
    }
}

/// Backprop through one block. Returns the gradient with respect to the
/// block input; weight gradients are accumulated into `g`.
pub(crate) fn block_backward(p: &LayerParams, tr: &LayerTrace, dout: &Tensor, g: &mut LayerParams) -> Tensor {
    let n = dout.rows();
    let d = dout.cols();
    let heads = tr.heads.len();
    let dh = d / heads;

    let dh2 = ln_affine_backward(dout, &tr.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    // h2 = x1 + hidden W2 + b2
    let mut dx1 = dh2.clone();
    matmul_tn_acc(&tr.hidden, &dh2, &mut g.w2);
    for i in 0..n {
        axpy(1.0, dh2.row(i), g.b2.data_mut());
    }
    let mut dpre = matmul_nt(&dh2, &p.w2);
    for (dv, pre) in dpre.data_mut().iter_mut().zip(tr.pre.data()) {
        if *pre <= 0.0 {
            *dv = 0.0;
        }
    }
    matmul_tn_acc(&tr.x1, &dpre, &mut g.w1);
    for i in 0..n {
        axpy(1.0, dpre.row(i), g.b1.data_mut());
    }
    dx1.add_assign(&matmul_nt(&dpre, &p.w1));

    let dh1 = ln_affine_backward(&dx1, &tr.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    // h1 = x + concat Wo
    let mut dx = dh1.clone();
    matmul_tn_acc(&tr.concat, &dh1, &mut g.wo);
    let dconcat = matmul_nt(&dh1, &p.wo);

    let mut dq = Tensor::zeros(vec![n, d]);
    let mut dk = Tensor::zeros(vec![n, d]);
    let mut dv = Tensor::zeros(vec![n, d]);
    for (h, head) in tr.heads.iter().enumerate() {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let dout_h = dconcat.column_block(lo, hi);
        let vh = tr.v.column_block(lo, hi);
        let mut dvh = Tensor::zeros(vec![n, dh]);
        let mut dqh = Tensor::zeros(vec![n, dh]);
        let mut dkh = Tensor::zeros(vec![n, dh]);
        match &head.routed {
            None => {
                let qh = tr.q.column_block(lo, hi);
                let kh = tr.k.column_block(lo, hi);
                rows_backward(&head.rows, &qh, &kh, &vh, &dout_h, &mut dqh, &mut dkh, &mut dvh);
                dk.add_column_block(lo, &dkh);
            }
            Some(routed) => {
                let u = &routed.normed;
                rows_backward(&head.rows, u, u, &vh, &dout_h, &mut dqh, &mut dkh, &mut dvh);
                // Shared query/key: both roles flow into the same normalized vectors.
                dqh.add_assign(&dkh);
                dqh = ln_backward(&dqh, u, &routed.inv_std);
            }
        }
        dq.add_column_block(lo, &dqh);
        dv.add_column_block(lo, &dvh);
    }
    matmul_tn_acc(&tr.x_in, &dq, &mut g.wq);
    matmul_tn_acc(&tr.x_in, &dk, &mut g.wk);
    matmul_tn_acc(&tr.x_in, &dv, &mut g.wv);
    dx.add_assign(&matmul_nt(&dq, &p.wq));
    dx.add_assign(&matmul_nt(&dk, &p.wk));
    dx.add_assign(&matmul_nt(&dv, &p.wv));
    dx
}

pub(crate) fn trace(
    cfg: &ModelConfig,
    params: &Params,
    centroids: &Centroids,
    tokens: &[u32],
    opts: &ForwardOptions<'_>,
) -> Result<Trace> {
    let mut x = embed(cfg, params, tokens)?;
    let mut macs = 0;
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, p) in params.layers.iter().enumerate() {
        let kinds = cfg.plan.layer(l);
        let cents: Vec<Option<&CentroidSet<f64>>> =
            (0..kinds.len()).map(|h| centroids.get(&(l, h))).collect();
        let ctx = BlockContext {
            layer: l,
            kinds,
            centroids: &cents,
            frozen: opts.frozen.map(|f| f[l].as_slice()),
            plan_seed: opts.plan_seed,
        };
        let tr = block_forward(&x, p, &ctx, &mut macs)?;
        x = tr.output.clone();
        layers.push(tr);
    }
    let mut logits = matmul(&x, &params.w_out);
    add_bias(&mut logits, &params.b_out);
    Ok(Trace {
        tokens: tokens.to_vec(),
        layers,
        logits,
        attn_macs: macs,
    })
}

pub(crate) fn backward(params: &Params, tr: &Trace, dlogits: &Tensor) -> Params {
    let mut g = params.zeros_like();
    let xf = tr.final_hidden();
    matmul_tn_acc(xf, dlogits, &mut g.w_out);
    for i in 0..dlogits.rows() {
        axpy(1.0, dlogits.row(i), g.b_out.data_mut());
    }
    let mut dx = matmul_nt(dlogits, &params.w_out);
    for l in (0..params.layers.len()).rev() {
        dx = block_backward(&params.layers[l], &tr.layers[l], &dx, &mut g.layers[l]);
    }
    for (i, &t) in tr.tokens.iter().enumerate() {
        axpy(1.0, dx.row(i), g.tok_emb.row_mut(t as usize));
        axpy(1.0, dx.row(i), g.pos_emb.row_mut(i));
    }
    g
}
