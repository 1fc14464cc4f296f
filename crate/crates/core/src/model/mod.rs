//! The autoregressive byte-level transformer.
//!
//! Post-norm blocks: `x1 = LN(attn(x) + x)`, `x2 = LN(mlp(x1) + x1)` with a
//! two-layer ReLU MLP. Token and learned absolute position embeddings feed the
//! first block; a linear layer maps the last block to vocabulary logits. Each
//! head has its own sparsity kind (see [`HeadKind`]); routing heads keep
//! independent centroid state that only changes through
//! [`LanguageModel::apply_centroid_updates`].

mod config;
mod forward;
mod params;
mod sample;

pub use config::{HeadKind, HeadPlan, ModelConfig};
pub use forward::{
    AttentionRow, ForwardOptions, HeadTrace, LayerTrace, PlanSet, RoutedTrace, Trace, LN_EPS, ROUTE_EPS,
};
pub use params::{init_head_centroids, Centroids, LayerParams, Params};
pub use sample::{nucleus_filter, SampleOptions};

use crate::error::{ensure, Result};
use crate::routing::{update_centroids, Assignment, CentroidSet};
use crate::tensor::Tensor;

/// Mean negative log-likelihood in three units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllMetrics {
    pub nats: f64,
    pub bits_per_dim: f64,
    pub perplexity: f64,
}

impl NllMetrics {
    pub fn from_nats(nats: f64) -> Self {
        Self {
            nats,
            bits_per_dim: nats / std::f64::consts::LN_2,
            perplexity: nats.exp(),
        }
    }
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}

/// Mean next-symbol negative log-likelihood of `targets` under `logits`.
pub fn nll_metrics(logits: &Tensor, targets: &[u32]) -> Result<NllMetrics> {
    ensure!(!targets.is_empty(), "nll of an empty sequence");
    ensure!(
        logits.rank() == 2 && logits.rows() == targets.len(),
        "logits rows {:?} do not align with {} targets",
        logits.shape(),
        targets.len()
    );
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        ensure!((t as usize) < logits.cols(), "target {t} outside vocabulary");
        total -= log_softmax_at(logits.row(i), t as usize);
    }
    Ok(NllMetrics::from_nats(total / targets.len() as f64))
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<(f64, Tensor)> {
    let nats = nll_metrics(logits, targets)?.nats;
    let n = targets.len() as f64;
    let mut grad = logits.clone();
    for (i, &t) in targets.iter().enumerate() {
        let row = grad.row_mut(i);
        crate::kernels::softmax_in_place(row);
        row[t as usize] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok((nats, grad))
}

/// One attention block applied to `x`, returning the block output and, when
/// `train` is set, the advanced centroids of each routing head.
pub fn attention_block(
    x: &Tensor,
    layer: &LayerParams,
    kinds: &[HeadKind],
    centroids: &[Option<&CentroidSet<f64>>],
    train: bool,
) -> Result<(Tensor, Vec<Option<CentroidSet<f64>>>)> {
    let ctx = forward::BlockContext {
        layer: 0,
        kinds,
        centroids,
        frozen: None,
        plan_seed: 0,
    };
    let tr = forward::block_forward(x, layer, &ctx, &mut 0)?;
    let mut updated = vec![None; kinds.len()];
    if train {
        for (h, head) in tr.heads.iter().enumerate() {
            if let (Some(c), Some(routed)) = (centroids[h], &head.routed) {
                if let Some(a) = &routed.assignment {
                    updated[h] = Some(update_centroids(c, &routed.normed, &routed.normed, a, a)?);
                }
            }
        }
    }
    Ok((tr.output, updated))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub params: Params,
    pub centroids: Centroids,
}

impl LanguageModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        let centroids = init_head_centroids(&config, seed)?;
        Ok(Self {
            config,
            params,
            centroids,
        })
    }

    /// Token plus position embedding of `tokens`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        forward::embed(&self.config, &self.params, tokens)
    }

    pub fn trace(&self, tokens: &[u32], opts: &ForwardOptions<'_>) -> Result<Trace> {
        forward::trace(&self.config, &self.params, &self.centroids, tokens, opts)
    }

    /// Next-symbol logits, `[n, vocab]`.
    pub fn forward(&self, tokens: &[u32], opts: &ForwardOptions<'_>) -> Result<Tensor> {
        Ok(self.trace(tokens, opts)?.logits)
    }

    pub fn backward(&self, trace: &Trace, dlogits: &Tensor) -> Params {
        forward::backward(&self.params, trace, dlogits)
    }

    /// Loss and parameter gradients on a window of `n + 1` tokens: the first
    /// `n` are inputs and the last `n` are targets.
    pub fn loss_and_grad(&self, window: &[u32], opts: &ForwardOptions<'_>) -> Result<(f64, Params, Trace)> {
        ensure!(window.len() >= 2, "a training window needs at least two tokens");
        let (inputs, targets) = (&window[..window.len() - 1], &window[1..]);
        let tr = self.trace(inputs, opts)?;
        let (loss, dlogits) = cross_entropy(&tr.logits, targets)?;
        let grads = self.backward(&tr, &dlogits);
        Ok((loss, grads, tr))
    }

    /// Evaluation metrics on a window of `n + 1` tokens.
    pub fn evaluate_window(&self, window: &[u32], plan_seed: u64) -> Result<NllMetrics> {
        ensure!(window.len() >= 2, "an evaluation window needs at least two tokens");
        let opts = ForwardOptions {
            plan_seed,
            ..Default::default()
        };
        let logits = self.forward(&window[..window.len() - 1], &opts)?;
        nll_metrics(&logits, &window[1..])
    }

    /// Applies exactly one EMA step to every routing head, pooling the
    /// assigned vectors of all `traces`. Returns the number of heads updated.
    pub fn apply_centroid_updates(&mut self, traces: &[&Trace]) -> Result<usize> {
        let mut updated = 0;
        for (&(l, h), c) in self.centroids.iter_mut() {
            let mut rows = Vec::new();
            let mut ids = Vec::new();
            let mut dim = c.dim();
            for tr in traces {
                let Some(routed) = tr.layers[l].heads[h].routed.as_ref() else {
                    continue;
                };
                let Some(a) = routed.assignment.as_ref() else {
                    continue;
                };
                dim = routed.normed.cols();
                rows.extend_from_slice(routed.normed.data());
                ids.extend_from_slice(&a.ids);
            }
            if ids.is_empty() {
                continue;
            }
            let x = Tensor::new(vec![ids.len(), dim], rows)?;
            let a = Assignment {
                padding: vec![false; ids.len()],
                ids,
            };
            *c = update_centroids(c, &x, &x, &a, &a)?;
            updated += 1;
        }
        Ok(updated)
    }
}

#[cfg(test)]
mod tests;
