use rand::Rng;
use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::model::{nll_metrics, ForwardOptions, LanguageModel, ModelConfig, PlanSet};
use crate::rng;

/// Denominator floor for relative errors, so entries whose true gradient is
/// zero are judged on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between `grad` and central differences of `f`
/// around `theta`.
pub fn check_gradient<F>(f: F, grad: &[f64], theta: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    ensure!(grad.len() == theta.len(), "gradient has {} entries, theta {}", grad.len(), theta.len());
    ensure!(eps > 0.0, "finite-difference step must be positive");
    let worst = (0..theta.len())
        .into_par_iter()
        .map(|i| {
            let mut p = theta.to_vec();
            p[i] = theta[i] + eps;
            let up = f(&p);
            p[i] = theta[i] - eps;
            let down = f(&p);
            relative_error(grad[i], (up - down) / (2.0 * eps))
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

fn frozen_loss(m: &LanguageModel, window: &[u32], plans: &PlanSet) -> f64 {
    let opts = ForwardOptions {
        frozen: Some(plans),
        ..Default::default()
    };
    let n = window.len() - 1;
    match m.forward(&window[..n], &opts) {
        Ok(logits) => nll_metrics(&logits, &window[1..]).map_or(f64::NAN, |x| x.nats),
        Err(_) => f64::NAN,
    }
}

/// Checks the model's analytic gradient against central differences on every
/// parameter entry, for a random window of `max_seq + 1` tokens. Routing plans
/// are taken from the unperturbed forward pass and held fixed.
pub fn grad_check(cfg: &ModelConfig, seed: u64, eps: f64) -> Result<f64> {
    let model = LanguageModel::new(cfg.clone(), seed)?;
    let mut r = rng::stream(seed, &[0x67c4]);
    let window: Vec<u32> = (0..=cfg.max_seq).map(|_| r.random_range(0..cfg.vocab as u32)).collect();
    let (_, grads, trace) = model.loss_and_grad(&window, &ForwardOptions::default())?;
    let plans = trace.plans();

    let mut worst: f64 = 0.0;
    let count = model.params.tensors().len();
    for ti in 0..count {
        let theta = model.params.tensors()[ti].data().to_vec();
        let g = grads.tensors()[ti].data();
        let err = check_gradient(
            |p| {
                let mut m = model.clone();
                m.params.tensors_mut()[ti].data_mut().copy_from_slice(p);
                frozen_loss(&m, &window, &plans)
            },
            g,
            &theta,
            eps,
        )?;
        if err.is_nan() {
            return Err(crate::Error::Numeric("gradient check produced NaN".into()));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
