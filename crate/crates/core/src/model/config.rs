use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::routing::DEFAULT_DECAY;

/// Attention pattern of a single head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Dense,
    Local { window: usize },
    Strided { stride: usize },
    /// Content-based routing over `clusters` learned centroids.
    Routing { clusters: usize },
    /// Same budget as routing, but cluster members are drawn uniformly at
    /// random instead of by centroid similarity.
    Random { clusters: usize },
}

impl HeadKind {
    /// Routing and random heads share queries and keys and attend within
    /// clusters.
    pub fn is_clustered(&self) -> bool {
        matches!(self, HeadKind::Routing { .. } | HeadKind::Random { .. })
    }

    pub fn clusters(&self) -> Option<usize> {
        match *self {
            HeadKind::Routing { clusters } | HeadKind::Random { clusters } => Some(clusters),
            _ => None,
        }
    }

    /// Members per cluster for a sequence of length `n`: `ceil(n / k)`.
    pub fn cluster_window(&self, n: usize) -> Option<usize> {
        self.clusters().map(|k| n.div_ceil(k).clamp(1, n.max(1)))
    }

    fn validate(&self) -> Result<()> {
        match *self {
            HeadKind::Local { window } => ensure!(window >= 1, "local window must be >= 1"),
            HeadKind::Strided { stride } => ensure!(stride >= 1, "stride must be >= 1"),
            HeadKind::Routing { clusters } | HeadKind::Random { clusters } => {
                ensure!(clusters >= 1, "cluster count must be >= 1")
            }
            HeadKind::Dense => {}
        }
        Ok(())
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadKind::Dense => write!(f, "dense"),
            HeadKind::Local { window } => write!(f, "local({window})"),
            HeadKind::Strided { stride } => write!(f, "strided({stride})"),
            HeadKind::Routing { clusters } => write!(f, "routing({clusters})"),
            HeadKind::Random { clusters } => write!(f, "random({clusters})"),
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "dense" {
            return Ok(HeadKind::Dense);
        }
        let bad = || Error::Config(format!("cannot parse head kind `{s}`"));
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let arg: usize = rest
            .strip_suffix(')')
            .ok_or_else(bad)?
            .trim()
            .parse()
            .map_err(|_| bad())?;
        let kind = match name.trim() {
            "local" => HeadKind::Local { window: arg },
            "strided" => HeadKind::Strided { stride: arg },
            "routing" => HeadKind::Routing { clusters: arg },
            "random" => HeadKind::Random { clusters: arg },
            _ => return Err(bad()),
        };
        kind.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(kind)
    }
}

/// Per-layer, per-head attention kinds. Text form: heads separated by `,`,
/// layers by `;`, e.g. `local(32),routing(8);local(32),local(32)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadPlan {
    layers: Vec<Vec<HeadKind>>,
}

impl HeadPlan {
    pub fn new(layers: Vec<Vec<HeadKind>>) -> Result<Self> {
        ensure!(!layers.is_empty(), "head plan has no layers");
        let heads = layers[0].len();
        ensure!(heads >= 1, "head plan has no heads");
        ensure!(
            layers.iter().all(|l| l.len() == heads),
            "every layer must have the same number of heads"
        );
        for kind in layers.iter().flatten() {
            kind.validate()?;
        }
        Ok(Self { layers })
    }

    /// The same head list in every layer.
    pub fn uniform(layers: usize, heads: Vec<HeadKind>) -> Result<Self> {
        Self::new(vec![heads; layers])
    }

    /// Half local heads (rounded up), half routing heads, in every layer.
    pub fn half_local_half_routing(
        layers: usize,
        heads: usize,
        window: usize,
        clusters: usize,
    ) -> Result<Self> {
        let local = heads.div_ceil(2);
        let row = (0..heads)
            .map(|h| {
                if h < local {
                    HeadKind::Local { window }
                } else {
                    HeadKind::Routing { clusters }
                }
            })
            .collect();
        Self::uniform(layers, row)
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.layers[0].len()
    }

    pub fn layer(&self, l: usize) -> &[HeadKind] {
        &self.layers[l]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, HeadKind)> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, row)| row.iter().enumerate().map(move |(h, k)| (l, h, *k)))
    }

    /// Replaces every routing head by a random head with the same cluster count.
    pub fn with_random_heads(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|row| {
                row.iter()
                    .map(|k| match *k {
                        HeadKind::Routing { clusters } => HeadKind::Random { clusters },
                        other => other,
                    })
                    .collect()
            })
            .collect();
        Self { layers }
    }
}

impl fmt::Display for HeadPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (l, row) in self.layers.iter().enumerate() {
            if l > 0 {
                f.write_str(";")?;
            }
            for (h, kind) in row.iter().enumerate() {
                if h > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{kind}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for HeadPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let layers = s
            .split(';')
            .map(|layer| layer.split(',').map(str::parse).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        HeadPlan::new(layers).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Architecture of the language model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward block as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub vocab: usize,
    /// Longest sequence the position table covers.
    pub max_seq: usize,
    pub plan: HeadPlan,
    /// Centroid EMA decay for routing heads.
    pub decay: f64,
}

impl ModelConfig {
    /// A model with the default head allocation: half local, half routing.
    pub fn new(
        layers: usize,
        d_model: usize,
        heads: usize,
        max_seq: usize,
        window: usize,
        clusters: usize,
    ) -> Result<Self> {
        let cfg = Self {
            layers,
            d_model,
            heads,
            ffn_mult: 4,
            vocab: 256,
            max_seq,
            plan: HeadPlan::half_local_half_routing(layers.max(1), heads.max(1), window, clusters)?,
            decay: DEFAULT_DECAY,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_plan(mut self, plan: HeadPlan) -> Result<Self> {
        self.plan = plan;
        self.validate()?;
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.layers >= 1 && self.d_model >= 1 && self.heads >= 1 && self.ffn_mult >= 1,
            "layer, width, head and ffn counts must all be >= 1"
        );
        ensure!(self.vocab >= 2, "vocabulary must have at least two symbols");
        ensure!(self.max_seq >= 2, "max sequence length must be >= 2");
        ensure!(
            self.d_model.is_multiple_of(self.heads),
            "d_model {} is not divisible by {} heads",
            self.d_model,
            self.heads
        );
        ensure!(
            self.plan.layers() == self.layers && self.plan.heads() == self.heads,
            "head plan is {}x{}, model is {}x{}",
            self.plan.layers(),
            self.plan.heads(),
            self.layers,
            self.heads
        );
        if self.plan.iter().any(|(_, _, k)| k.is_clustered()) {
            ensure!(self.head_dim() >= 2, "routing heads need head_dim >= 2");
        }
        ensure!((0.0..=1.0).contains(&self.decay), "decay must lie in [0, 1]");
        Ok(())
    }
}
