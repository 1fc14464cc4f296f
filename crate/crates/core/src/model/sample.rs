use rand::Rng;

use super::{ForwardOptions, LanguageModel};
use crate::error::{ensure, Result};
use crate::kernels::softmax_in_place;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    /// Nucleus mass in `(0, 1]`.
    pub p: f64,
    /// `0` means greedy decoding.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            p: 0.8,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Smallest set of most probable symbols whose mass reaches `p`,
/// renormalized. Ties in probability keep the lower symbol first.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push((i, probs[i]));
        mass += probs[i];
        if p < 1.0 && mass >= p - 1e-12 {
            break;
        }
    }
    kept.iter_mut().for_each(|(_, q)| *q /= mass);
    kept
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl LanguageModel {
    /// Extends `prefix` by `steps` symbols with nucleus sampling and returns
    /// only the new symbols. The context is the trailing `max_seq` tokens.
    pub fn sample(&self, prefix: &[u32], steps: usize, opts: &SampleOptions) -> Result<Vec<u32>> {
        ensure!(!prefix.is_empty(), "sampling needs a non-empty prefix");
        ensure!(opts.p > 0.0 && opts.p <= 1.0, "nucleus mass must lie in (0, 1]");
        ensure!(opts.temperature >= 0.0, "temperature must be >= 0");
        let mut r = rng::stream(opts.seed, &[0x5a3e]);
        let mut seq = prefix.to_vec();
        let mut out = Vec::with_capacity(steps);
        for step in 0..steps {
            let start = seq.len().saturating_sub(self.config.max_seq);
            let fwd = ForwardOptions {
                plan_seed: rng::derive(opts.seed, &[step as u64]),
                ..Default::default()
            };
            let logits = self.forward(&seq[start..], &fwd)?;
            let last = logits.row(logits.rows() - 1);
            let next = if opts.temperature == 0.0 {
                argmax(last)
            } else {
                let mut probs: Vec<f64> = last.iter().map(|v| v / opts.temperature).collect();
                softmax_in_place(&mut probs);
                let nucleus = nucleus_filter(&probs, opts.p);
                let u: f64 = r.random();
                let mut acc = 0.0;
                let mut pick = nucleus.last().expect("nucleus is non-empty").0;
                for (i, q) in &nucleus {
                    acc += q;
                    if u < acc {
                        pick = *i;
                        break;
                    }
                }
                pick
            };
            seq.push(next as u32);
            out.push(next as u32);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nucleus_truncates_and_renormalizes() {
        let kept = nucleus_filter(&[0.5, 0.3, 0.2], 0.8);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].0, 0);
        assert_eq!(kept[1].0, 1);
        assert!((kept[0].1 - 0.625).abs() < 1e-12);
        assert!((kept[1].1 - 0.375).abs() < 1e-12);
    }

    #[test]
    fn full_mass_keeps_everything() {
        let probs = [0.1, 0.0, 0.6, 0.3];
        let kept = nucleus_filter(&probs, 1.0);
        assert_eq!(kept.len(), 4);
        let total: f64 = kept.iter().map(|(_, q)| q).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_mass_keeps_the_mode() {
        let kept = nucleus_filter(&[0.2, 0.5, 0.3], 1e-6);
        assert_eq!(kept, vec![(1, 1.0)]);
    }
}
