use super::optim::AdamMoments;
use crate::error::Result;
use crate::model::{ForwardOptions, LanguageModel, ModelConfig};
use crate::tensor::Tensor;

/// Everything a run needs to resume: model weights and centroids, Adam
/// moments, the step counter and the run seed. Per-step randomness is derived
/// from `(seed, step)`, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: LanguageModel,
    pub moments: AdamMoments,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let model = LanguageModel::new(config, seed)?;
        let moments = AdamMoments::zeros_like(&model.params);
        Ok(Self {
            model,
            moments,
            step: 0,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Logits for `tokens`. Random heads draw their members from the run seed.
    /// `train` only records centroid assignments; nothing is mutated here.
    pub fn forward(&self, tokens: &[u32], train: bool) -> Result<Tensor> {
        self.model.forward(
            tokens,
            &ForwardOptions {
                train,
                plan_seed: self.seed,
                frozen: None,
            },
        )
    }
}
