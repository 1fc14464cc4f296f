//! Routing heads against random heads on the synthetic retrieval language.
//!
//! `cargo run --release -p rtformer-core --example retrieval -- key=value...`
//! with keys seed, steps, n, keys, values, per, d, heads, clusters, window,
//! lr, warmup, batch and plan. `only=routing` or `only=random` trains one
//! side; `diag=1` prints per-head routing diagnostics.

use std::collections::HashMap;
use std::time::Instant;

use rtformer::data::RetrievalTask;
use rtformer::model::{ForwardOptions, LanguageModel, ModelConfig};
use rtformer::training::{evaluate, OptimConfig, TrainConfig, TrainState, Trainer};

fn main() -> rtformer::Result<()> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).and_then(|v| v.parse().ok()).unwrap_or(d);
    let seed = get("seed", 0.0) as u64;
    let steps = get("steps", 2000.0) as u64;
    let n = get("n", 512.0) as usize;
    let task = RetrievalTask::new(get("keys", 100.0) as usize, get("values", 16.0) as usize, get("per", 6.0) as usize)?;
    let valid = task.validation_set(1234, n, 8);
    let mut base = ModelConfig::new(
        2,
        get("d", 64.0) as usize,
        get("heads", 4.0) as usize,
        n,
        get("window", 32.0) as usize,
        get("clusters", 16.0) as usize,
    )?;
    base.vocab = task.vocab();
    let plan = match args.get("plan") {
        Some(p) => p.parse()?,
        None => base.plan.clone(),
    };
    let only = args.get("only").cloned().unwrap_or_default();
    for (name, p) in [("routing", plan.clone()), ("random", plan.with_random_heads())] {
        if !only.is_empty() && only != name {
            continue;
        }
        let cfg = base.clone().with_plan(p)?;
        let tc = TrainConfig {
            optim: OptimConfig { lr: get("lr", 3e-3), warmup: get("warmup", 100.0) as u64, ..Default::default() },
            batch: get("batch", 1.0) as usize,
            ..Default::default()
        };
        let mut t = Trainer::new(TrainState::new(cfg, seed)?, tc)?;
        let clock = Instant::now();
        for s in 1..=steps {
            let st = t.step(&task)?;
            if s % 250 == 0 || s == steps {
                let e = evaluate(&t.state.model, &valid, 0)?;
                let ans = answer_loss(&t.state.model, &task, &valid)?;
                if args.contains_key("diag") { diagnose(&t.state.model, &task, &valid[0])?; }
                println!("{name} step {s} train {:.4} valid {:.4} roles {} ({:.1}s)", st.loss, e.nats, ans, clock.elapsed().as_secs_f64());
            }
        }
    }
    Ok(())
}

/// Mean loss by role of the predicted token: dictionary value, dictionary key,
/// query marker, query key, answer.
fn answer_loss(m: &LanguageModel, task: &RetrievalTask, valid: &[Vec<u32>]) -> rtformer::Result<String> {
    let mut sum = [0.0; 5];
    let mut count = [0usize; 5];
    for w in valid {
        let n = w.len() - 1;
        let logits = m.forward(&w[..n], &ForwardOptions::default())?;
        for i in 0..n {
            let t = i + 1;
            let role = if t < task.dictionary_len() {
                t % 2
            } else {
                2 + (t - task.dictionary_len()) % 3
            };
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            sum[role] += lse - row[w[i + 1] as usize];
            count[role] += 1;
        }
    }
    Ok((0..5).map(|r| format!("{:.3}", sum[r] / count[r].max(1) as f64)).collect::<Vec<_>>().join(" "))
}

/// For each head: how often an answer query's rows include the dictionary
/// occurrence of its key, and the mean probability put on it.
fn diagnose(m: &LanguageModel, task: &RetrievalTask, w: &[u32]) -> rtformer::Result<()> {
    let n = w.len() - 1;
    let tr = m.trace(&w[..n], &ForwardOptions::default())?;
    let answers = task.answer_positions(&w[..n]);
    for (l, layer) in tr.layers.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            let (mut hits, mut mass, mut selfp) = (0, 0.0, 0.0);
            for &i in &answers {
                let dict = (0..i).find(|&j| w[j] == w[i]).expect("key in dictionary");
                for r in head.rows.iter().filter(|r| r.query == i) {
                    if let Some(p) = r.keys.iter().position(|&k| k == dict) {
                        hits += 1;
                        mass += r.probs[p] * r.weight;
                    }
                    if let Some(p) = r.keys.iter().position(|&k| k == i) {
                        selfp += r.probs[p] * r.weight;
                    }
                }
            }
            let a = answers.len() as f64;
            println!("  l{l}h{h} {:?}: hit {:.2} mass {:.3} self {:.3}", head.kind, hits as f64 / a, mass / a, selfp / a);
        }
    }
    Ok(())
}
