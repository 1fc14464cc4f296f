use crate::error::{ensure, Error, Result};
use crate::model::Params;

/// Adam with bias correction and a warmup / inverse square root schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup: 1000,
            clip: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive");
        ensure!((0.0..1.0).contains(&self.beta1), "beta1 must lie in [0, 1)");
        ensure!((0.0..1.0).contains(&self.beta2), "beta2 must lie in [0, 1)");
        ensure!(self.eps > 0.0, "eps must be positive");
        ensure!(self.warmup >= 1, "warmup must be >= 1");
        if let Some(c) = self.clip {
            ensure!(c > 0.0, "clip norm must be positive");
        }
        Ok(())
    }
}

/// `peak * min(step / warmup, sqrt(warmup / step))`.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> Result<f64> {
    ensure!(step >= 1, "learning rate schedule starts at step 1");
    ensure!(warmup >= 1, "warmup must be >= 1");
    let (s, w) = (step as f64, warmup as f64);
    Ok(peak * (s / w).min((w / s).sqrt()))
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Optimizer moments, same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Params,
    pub v: Params,
}

impl AdamMoments {
    pub fn zeros_like(p: &Params) -> Self {
        Self {
            m: p.zeros_like(),
            v: p.zeros_like(),
        }
    }
}

/// One Adam step at 1-based step `t` with learning rate `lr`.
pub fn adam_step(
    params: &mut Params,
    moments: &mut AdamMoments,
    grads: &Params,
    t: u64,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    for (name, g) in grads.named() {
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {name}[{pos}] at step {t}"
            )));
        }
    }
    let ps = params.tensors_mut();
    let ms = moments.m.tensors_mut();
    let vs = moments.v.tensors_mut();
    for (((p, m), v), g) in ps.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
        adam_update_values(p.data_mut(), m.data_mut(), v.data_mut(), g.data(), t, lr, cfg);
    }
    Ok(())
}

/// The Adam rule on flat slices.
pub fn adam_update_values(
    params: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    grads: &[f64],
    t: u64,
    lr: f64,
    cfg: &OptimConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, m), v), g) in params.iter_mut().zip(m).zip(v).zip(grads) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_junctions() {
        assert!((lr_at(1000, 2e-4, 1000).unwrap() - 2e-4).abs() < 1e-18);
        assert!((lr_at(500, 2e-4, 1000).unwrap() - 1e-4).abs() < 1e-18);
        assert!((lr_at(4000, 2e-4, 1000).unwrap() - 1e-4).abs() < 1e-18);
        assert!(lr_at(0, 2e-4, 1000).is_err());
        assert!(lr_at(1, 2e-4, 0).is_err());
    }

    #[test]
    fn schedule_rises_then_decays() {
        let lrs: Vec<f64> = (1..=3000).map(|s| lr_at(s, 1.0, 1000).unwrap()).collect();
        assert!(lrs[..1000].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[999..].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn single_scalar_step_by_hand() {
        let cfg = OptimConfig::default();
        let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adam_update_values(&mut p, &mut m, &mut v, &[0.5], 1, 0.1, &cfg);
        // m = 0.05, v = 0.005, m_hat = 0.5, v_hat = 0.25
        assert!((m[0] - 0.05).abs() < 1e-15);
        assert!((v[0] - 0.005).abs() < 1e-15);
        let want = 1.0 - 0.1 * 0.5 / (0.5 + 1e-9);
        assert!((p[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_moments_only() {
        let cfg = OptimConfig::default();
        let (mut p, mut m, mut v) = ([2.0, -1.0], [0.4, -0.2], [0.1, 0.3]);
        adam_update_values(&mut p, &mut m, &mut v, &[0.0, 0.0], 5, 0.1, &cfg);
        assert!((m[0] - 0.36).abs() < 1e-15 && (v[1] - 0.294).abs() < 1e-15);
        // parameters still move by the decayed momentum; with zero moments they stay put
        let (mut p2, mut m2, mut v2) = ([2.0], [0.0], [0.0]);
        adam_update_values(&mut p2, &mut m2, &mut v2, &[0.0], 1, 0.1, &cfg);
        assert_eq!(p2, [2.0]);
        assert_ne!(p, [2.0, -1.0]);
    }

    #[test]
    fn constant_gradient_steps_approach_sign_times_lr() {
        let cfg = OptimConfig::default();
        let (mut p, mut m, mut v) = ([0.0, 0.0], [0.0, 0.0], [0.0, 0.0]);
        let mut last = [0.0, 0.0];
        for t in 1..=2000 {
            let before = p;
            adam_update_values(&mut p, &mut m, &mut v, &[3.0, -0.02], t, 0.01, &cfg);
            last = [p[0] - before[0], p[1] - before[1]];
        }
        assert!((last[0] + 0.01).abs() < 1e-9, "{last:?}");
        assert!((last[1] - 0.01).abs() < 1e-9, "{last:?}");
    }

    #[test]
    fn default_hyperparameters() {
        let c = OptimConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2, c.eps), (2e-4, 0.9, 0.98, 1e-9));
        assert_eq!(c.clip, Some(1.0));
        c.validate().unwrap();
    }
}
