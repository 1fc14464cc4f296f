use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{ensure, Result};
use crate::model::{ForwardOptions, HeadKind, HeadTrace, LanguageModel};
use crate::rng;

/// Largest sequence length for which head distributions are densified.
pub const MAX_DENSE_N: usize = 4096;

const SUM_TOL: f64 = 1e-6;

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    ensure!(
        p.iter().all(|v| v.is_finite() && *v >= 0.0),
        "{name} has a negative or non-finite entry"
    );
    let s: f64 = p.iter().sum();
    ensure!((s - 1.0).abs() <= SUM_TOL, "{name} sums to {s}, not 1");
    Ok(())
}

fn kl_term(p: f64, m: f64) -> f64 {
    if p > 0.0 {
        p * (p / m).ln()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence in nats, so the result lies in `[0, ln 2]`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure!(p.len() == q.len(), "distributions have lengths {} and {}", p.len(), q.len());
    check_distribution(p, "P")?;
    check_distribution(q, "Q")?;
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        total += 0.5 * (kl_term(a, m) + kl_term(b, m));
    }
    Ok(total.clamp(0.0, std::f64::consts::LN_2))
}

/// The weights one head puts on every position when processing `position`,
/// as a length-`n` vector. Rows of tokens that no cluster selected are all zero.
pub fn attention_distribution(head: &HeadTrace, n: usize, position: usize) -> Result<Vec<f64>> {
    ensure!(n <= MAX_DENSE_N, "n = {n} is too large to densify");
    ensure!(position < n, "position {position} is outside a sequence of {n}");
    let mut out = vec![0.0; n];
    for row in head.rows.iter().filter(|r| r.query == position) {
        for (&j, &p) in row.keys.iter().zip(&row.probs) {
            ensure!(j < n, "head attends to {j}, beyond n = {n}");
            out[j] += row.weight * p;
        }
    }
    Ok(out)
}

/// All rows of [`attention_distribution`] at once.
pub fn head_distributions(head: &HeadTrace, n: usize) -> Result<Vec<Vec<f64>>> {
    ensure!(n <= MAX_DENSE_N, "n = {n} is too large to densify");
    let mut out = vec![vec![0.0; n]; n];
    for row in &head.rows {
        ensure!(row.query < n, "row for position {} beyond n = {n}", row.query);
        for (&j, &p) in row.keys.iter().zip(&row.probs) {
            ensure!(j < n, "head attends to {j}, beyond n = {n}");
            out[row.query][j] += row.weight * p;
        }
    }
    Ok(out)
}

/// Mean JSD between two heads over positions where both have a distribution.
/// `None` if no position qualifies.
pub fn mean_head_jsd(a: &HeadTrace, b: &HeadTrace, n: usize) -> Result<Option<f64>> {
    let (da, db) = (head_distributions(a, n)?, head_distributions(b, n)?);
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, q) in da.iter().zip(&db) {
        let live = |v: &[f64]| v.iter().any(|x| *x != 0.0);
        if live(p) && live(q) {
            sum += jsd(p, q)?;
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
    pub runs: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            runs: xs.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JsdRow {
    pub layer: usize,
    pub local_local: Option<MeanStd>,
    pub local_routing: Option<MeanStd>,
    pub routing_routing: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JsdReport {
    pub rows: Vec<JsdRow>,
    pub runs: usize,
    pub n: usize,
}

fn cells(s: Option<MeanStd>) -> String {
    match s {
        Some(s) => format!("{:.6}\t{:.6}", s.mean, s.std),
        None => "absent\tabsent".into(),
    }
}

impl JsdReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "layer\tlocal_local_mean\tlocal_local_std\tlocal_routing_mean\tlocal_routing_std\trouting_routing_mean\trouting_routing_std\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.layer,
                cells(r.local_local),
                cells(r.local_routing),
                cells(r.routing_routing)
            );
        }
        out
    }
}

fn two_distinct<R: Rng>(pool: &[usize], rng: &mut R) -> Option<(usize, usize)> {
    if pool.len() < 2 {
        return None;
    }
    let picked: Vec<usize> = pool.choose_multiple(rng, 2).copied().collect();
    Some((picked[0], picked[1]))
}

/// Per-layer JSD between head categories, over `runs` seeded runs. Each run
/// takes a random window of `tokens` of length up to the model's context,
/// draws one head pair per category and averages JSD over positions.
pub fn jsd_report(model: &LanguageModel, tokens: &[u32], runs: usize, seed: u64) -> Result<JsdReport> {
    ensure!(runs >= 1, "need at least one run");
    ensure!(!tokens.is_empty(), "no tokens to analyze");
    let n = model.config.max_seq.min(tokens.len()).min(MAX_DENSE_N);
    let layers = model.config.layers;
    let mut samples = vec![[Vec::new(), Vec::new(), Vec::new()]; layers];
    for run in 0..runs {
        let mut r = rng::stream(seed, &[0x15d0, run as u64]);
        let start = r.random_range(0..=tokens.len() - n);
        let window = &tokens[start..start + n];
        let tr = model.trace(
            window,
            &ForwardOptions {
                plan_seed: rng::derive(seed, &[0x15d1, run as u64]),
                ..Default::default()
            },
        )?;
        for (l, layer) in tr.layers.iter().enumerate() {
            let local: Vec<usize> = (0..layer.heads.len())
                .filter(|&h| matches!(layer.heads[h].kind, HeadKind::Local { .. }))
                .collect();
            let routing: Vec<usize> = (0..layer.heads.len())
                .filter(|&h| matches!(layer.heads[h].kind, HeadKind::Routing { .. }))
                .collect();
            let pairs = [
                two_distinct(&local, &mut r),
                match (local.choose(&mut r), routing.choose(&mut r)) {
                    (Some(&a), Some(&b)) => Some((a, b)),
                    _ => None,
                },
                two_distinct(&routing, &mut r),
            ];
            for (cat, pair) in pairs.into_iter().enumerate() {
                if let Some((a, b)) = pair {
                    if let Some(v) = mean_head_jsd(&layer.heads[a], &layer.heads[b], n)? {
                        samples[l][cat].push(v);
                    }
                }
            }
        }
    }
    let rows = samples
        .iter()
        .enumerate()
        .map(|(layer, s)| JsdRow {
            layer,
            local_local: MeanStd::of(&s[0]),
            local_routing: MeanStd::of(&s[1]),
            routing_routing: MeanStd::of(&s[2]),
        })
        .collect();
    Ok(JsdReport { rows, runs, n })
}
