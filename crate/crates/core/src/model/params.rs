use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use crate::error::Result;
use crate::rng;
use crate::routing::{init_centroids, CentroidSet};
use crate::tensor::Tensor;

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// All trainable weights. Gradients and optimizer moments use the same
/// layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

fn gaussian<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl Params {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0x9a7a]);
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let lin = |r: &mut rand_chacha::ChaCha8Rng, fan_in: usize, fan_out: usize| {
            gaussian(r, vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
        };
        let tok_emb = gaussian(&mut r, vec![cfg.vocab, d], 1.0);
        let pos_emb = gaussian(&mut r, vec![cfg.max_seq, d], 0.5);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                wq: lin(&mut r, d, d),
                wk: lin(&mut r, d, d),
                wv: lin(&mut r, d, d),
                wo: lin(&mut r, d, d),
                ln1_gain: Tensor::filled(vec![d], 1.0),
                ln1_bias: Tensor::zeros(vec![d]),
                w1: lin(&mut r, d, f),
                b1: Tensor::zeros(vec![f]),
                w2: lin(&mut r, f, d),
                b2: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::filled(vec![d], 1.0),
                ln2_bias: Tensor::zeros(vec![d]),
            })
            .collect();
        let w_out = lin(&mut r, d, cfg.vocab);
        let b_out = Tensor::zeros(vec![cfg.vocab]);
        Self {
            tok_emb,
            pos_emb,
            layers,
            w_out,
            b_out,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, p) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", &p.wq),
                ("wk", &p.wk),
                ("wv", &p.wv),
                ("wo", &p.wo),
                ("ln1_gain", &p.ln1_gain),
                ("ln1_bias", &p.ln1_bias),
                ("w1", &p.w1),
                ("b1", &p.b1),
                ("w2", &p.w2),
                ("b2", &p.b2),
                ("ln2_gain", &p.ln2_gain),
                ("ln2_bias", &p.ln2_bias),
            ] {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("w_out".to_string(), &self.w_out));
        out.push(("b_out".to_string(), &self.b_out));
        out
    }

    /// Mutable tensors in the same order as [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for p in &mut self.layers {
            out.extend([
                &mut p.wq,
                &mut p.wk,
                &mut p.wv,
                &mut p.wo,
                &mut p.ln1_gain,
                &mut p.ln1_bias,
                &mut p.w1,
                &mut p.b1,
                &mut p.w2,
                &mut p.b2,
                &mut p.ln2_gain,
                &mut p.ln2_bias,
            ]);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_sq()).sum::<f64>().sqrt()
    }
}

/// Centroid state of every routing head, keyed by `(layer, head)`.
pub type Centroids = BTreeMap<(usize, usize), CentroidSet<f64>>;

pub fn init_head_centroids(cfg: &ModelConfig, seed: u64) -> Result<Centroids> {
    let mut out = Centroids::new();
    for (l, h, kind) in cfg.plan.iter() {
        if let super::HeadKind::Routing { clusters } = kind {
            let s = rng::derive(seed, &[0xce47, l as u64, h as u64]);
            let c = init_centroids::<f64>(clusters, cfg.head_dim(), s)?.with_decay(cfg.decay)?;
            out.insert((l, h), c);
        }
    }
    Ok(out)
}
