use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::kernels::{dense_causal_attention_counted, sparse_attention_counted, OpCounter, SparsitySet};
use crate::routing::{attend_plan, init_centroids, random_plan, routing_attention_counted, RoutingOptions};
use crate::rng;
use crate::tensor::Tensor;

/// Default local window for the benchmark when none is given.
pub const DEFAULT_BENCH_WINDOW: usize = 64;

/// An attention variant to benchmark. Parameters left out scale with `n`:
/// strided uses stride `ceil(sqrt(n))`; routing and random use
/// `k = ceil(sqrt(n))` clusters of `w = ceil(n / k)` members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchKind {
    Dense,
    Local(usize),
    Strided(Option<usize>),
    Routing(Option<usize>),
    Random(Option<usize>),
}

pub fn ceil_sqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r < n {
        r += 1;
    }
    while r > 0 && (r - 1) * (r - 1) >= n {
        r -= 1;
    }
    r
}

impl fmt::Display for BenchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |name: &str, v: &Option<usize>, f: &mut fmt::Formatter<'_>| match v {
            Some(v) => write!(f, "{name}({v})"),
            None => write!(f, "{name}"),
        };
        match self {
            BenchKind::Dense => write!(f, "dense"),
            BenchKind::Local(w) => write!(f, "local({w})"),
            BenchKind::Strided(s) => opt("strided", s, f),
            BenchKind::Routing(k) => opt("routing", k, f),
            BenchKind::Random(k) => opt("random", k, f),
        }
    }
}

impl FromStr for BenchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once('(') {
            Some((name, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::Config(format!("unbalanced parenthesis in {s:?}")))?;
                let v: usize = inner
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad parameter in {s:?}")))?;
                if v == 0 {
                    return Err(Error::Config(format!("parameter must be positive in {s:?}")));
                }
                (name.trim(), Some(v))
            }
            None => (s, None),
        };
        Ok(match (name, arg) {
            ("dense", None) => BenchKind::Dense,
            ("local", w) => BenchKind::Local(w.unwrap_or(DEFAULT_BENCH_WINDOW)),
            ("strided", s) => BenchKind::Strided(s),
            ("routing", k) => BenchKind::Routing(k),
            ("random", k) => BenchKind::Random(k),
            _ => return Err(Error::Config(format!("unknown attention kind {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub n: usize,
    pub kind: BenchKind,
    pub macs: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub d: usize,
    pub rows: Vec<ScalingRow>,
}

impl ScalingReport {
    pub fn macs(&self, n: usize, kind: BenchKind) -> Option<u64> {
        self.rows.iter().find(|r| r.n == n && r.kind == kind).map(|r| r.macs)
    }

    /// Columns: n, kind, macs, seconds.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("n\tkind\tmacs\tseconds\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{:.6}", r.n, r.kind, r.macs, r.seconds);
        }
        s
    }
}

fn random_matrix(n: usize, d: usize, seed: u64, tag: u64) -> Tensor<f32> {
    let mut r = rng::stream(seed, &[0xbe, n as u64, tag]);
    let data = (0..n * d).map(|_| r.random_range(-1.0f32..1.0)).collect();
    Tensor::new(vec![n, d], data).expect("shape")
}

/// Multiply-accumulate count and wall time of one causal attention call.
pub fn measure(kind: BenchKind, n: usize, d: usize, seed: u64) -> Result<(u64, f64)> {
    ensure!(n >= 1, "n must be positive");
    let (q, k, v) = (random_matrix(n, d, seed, 0), random_matrix(n, d, seed, 1), random_matrix(n, d, seed, 2));
    let mut ops = OpCounter::default();
    let clock = Instant::now();
    match kind {
        BenchKind::Dense => {
            dense_causal_attention_counted(&q, &k, &v, &mut ops)?;
        }
        BenchKind::Local(w) => {
            sparse_attention_counted(&q, &k, &v, &SparsitySet::local(n, w)?, &mut ops)?;
        }
        BenchKind::Strided(s) => {
            let s = s.unwrap_or_else(|| ceil_sqrt(n));
            sparse_attention_counted(&q, &k, &v, &SparsitySet::strided(n, s)?, &mut ops)?;
        }
        BenchKind::Routing(c) | BenchKind::Random(c) => {
            let c = c.unwrap_or_else(|| ceil_sqrt(n));
            let w = n.div_ceil(c);
            if let BenchKind::Routing(_) = kind {
                let centroids = init_centroids::<f32>(c, d, seed)?;
                let opts = RoutingOptions {
                    causal: true,
                    window: w,
                    train: false,
                };
                routing_attention_counted(&q, None, &v, &centroids, opts, &mut ops)?;
            } else {
                let plan = random_plan(n, c, w, true, &mut rng::stream(seed, &[0xbf, n as u64]))?;
                attend_plan(&q, &q, &v, &plan, true, &mut ops)?;
            }
        }
    }
    Ok((ops.macs, clock.elapsed().as_secs_f64()))
}

/// Counts multiply-accumulates of every kind at every length in `ns`, with
/// head dimension `d`.
pub fn scaling_benchmark(ns: &[usize], kinds: &[BenchKind], d: usize, seed: u64) -> Result<ScalingReport> {
    ensure!(!ns.is_empty() && !kinds.is_empty(), "need at least one length and one kind");
    ensure!(ns.windows(2).all(|p| p[0] < p[1]), "lengths must be strictly ascending");
    ensure!(d >= 2, "head dimension must be >= 2");
    let mut rows = Vec::new();
    for &kind in kinds {
        for &n in ns {
            let (macs, seconds) = measure(kind, n, d, seed)?;
            rows.push(ScalingRow { n, kind, macs, seconds });
        }
    }
    Ok(ScalingReport { d, rows })
}
