//! Run configuration in a flat `key = value` text format.
//!
//! Keys are sectioned with dots (`model.layers`, `heads.plan`, `opt.lr`).
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{HeadPlan, ModelConfig};
use crate::routing::DEFAULT_DECAY;
use crate::tensor::Precision;
use crate::training::{OptimConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub steps: u64,
    pub batch: usize,
    pub eval_every: u64,
    pub eval_windows: usize,
    pub checkpoint_every: u64,
    pub data_path: Option<PathBuf>,
    pub split: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(2, 64, 4, 128, 32, 4).expect("default model config is valid"),
            optim: OptimConfig::default(),
            steps: 1000,
            batch: 4,
            eval_every: 100,
            eval_windows: 8,
            checkpoint_every: 100,
            data_path: None,
            split: 0.9,
            seed: 0,
            precision: Precision::Double,
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::Single => "single",
        Precision::Double => "double",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if entries.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", lineno + 1)));
            }
        }

        let mut c = RunConfig::default();
        let m = &mut c.model;
        let (mut plan, mut window, mut clusters) = (None, 32usize, 4usize);
        let mut vocab = m.vocab;
        let mut ffn = m.ffn_mult;
        let mut decay = DEFAULT_DECAY;
        let (mut layers, mut d_model, mut heads, mut max_seq) = (m.layers, m.d_model, m.heads, m.max_seq);
        for (k, v) in &entries {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "model.layers" => layers = num(k, v)?,
                "model.d_model" => d_model = num(k, v)?,
                "model.heads" => heads = num(k, v)?,
                "model.ffn_mult" => ffn = num(k, v)?,
                "model.vocab" => vocab = num(k, v)?,
                "model.max_seq" => max_seq = num(k, v)?,
                "model.decay" => decay = num(k, v)?,
                "heads.plan" => plan = Some(v.parse::<HeadPlan>().map_err(|e| bad(k, v, e))?),
                "heads.window" => window = num(k, v)?,
                "heads.clusters" => clusters = num(k, v)?,
                "opt.lr" => c.optim.lr = num(k, v)?,
                "opt.beta1" => c.optim.beta1 = num(k, v)?,
                "opt.beta2" => c.optim.beta2 = num(k, v)?,
                "opt.eps" => c.optim.eps = num(k, v)?,
                "opt.warmup" => c.optim.warmup = num(k, v)?,
                "opt.clip" => {
                    c.optim.clip = if v == "none" { None } else { Some(num(k, v)?) };
                }
                "train.steps" => c.steps = num(k, v)?,
                "train.batch" => c.batch = num(k, v)?,
                "train.eval_every" => c.eval_every = num(k, v)?,
                "train.eval_windows" => c.eval_windows = num(k, v)?,
                "train.checkpoint_every" => c.checkpoint_every = num(k, v)?,
                "data.path" => c.data_path = (!v.is_empty()).then(|| PathBuf::from(v)),
                "data.split" => c.split = num(k, v)?,
                "run.seed" => c.seed = num(k, v)?,
                "run.precision" => {
                    c.precision = match v {
                        "single" => Precision::Single,
                        "double" => Precision::Double,
                        _ => return Err(bad(k, v, "expected single or double")),
                    }
                }
                _ => return Err(Error::Config(format!("unknown key {k}"))),
            }
        }
        let plan = match plan {
            // A single-layer plan applies to every layer.
            Some(p) if p.layers() == 1 && layers > 1 => {
                HeadPlan::uniform(layers, p.layer(0).to_vec()).map_err(|e| Error::Config(e.to_string()))?
            }
            Some(p) => p,
            None => HeadPlan::half_local_half_routing(layers.max(1), heads.max(1), window, clusters)
                .map_err(|e| Error::Config(e.to_string()))?,
        };
        c.model = ModelConfig {
            layers,
            d_model,
            heads,
            ffn_mult: ffn,
            vocab,
            max_seq,
            plan,
            decay,
        };
        c.validate()?;
        Ok(c)
    }

    /// Canonical text; `parse` of the result gives back an equal config.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let o = &self.optim;
        let clip = o.clip.map_or("none".to_string(), |c| format!("{c:?}"));
        let path = self
            .data_path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let lines: [(&str, String); 23] = [
            ("model.layers", m.layers.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.ffn_mult", m.ffn_mult.to_string()),
            ("model.vocab", m.vocab.to_string()),
            ("model.max_seq", m.max_seq.to_string()),
            ("model.decay", format!("{:?}", m.decay)),
            ("heads.plan", m.plan.to_string()),
            ("opt.lr", format!("{:?}", o.lr)),
            ("opt.beta1", format!("{:?}", o.beta1)),
            ("opt.beta2", format!("{:?}", o.beta2)),
            ("opt.eps", format!("{:?}", o.eps)),
            ("opt.warmup", o.warmup.to_string()),
            ("opt.clip", clip),
            ("train.steps", self.steps.to_string()),
            ("train.batch", self.batch.to_string()),
            ("train.eval_every", self.eval_every.to_string()),
            ("train.eval_windows", self.eval_windows.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("data.path", path),
            ("data.split", format!("{:?}", self.split)),
            ("run.seed", self.seed.to_string()),
            ("run.precision", precision_name(self.precision).to_string()),
        ];
        for (k, v) in &lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.model.validate().map_err(cfg)?;
        self.optim.validate().map_err(cfg)?;
        if self.precision != Precision::Double {
            return Err(Error::Config(
                "run.precision = single is not supported for training; the model runs in double precision".into(),
            ));
        }
        if !(self.split > 0.0 && self.split <= 1.0) {
            return Err(Error::Config(format!("data.split = {} must lie in (0, 1]", self.split)));
        }
        if self.batch == 0 || self.eval_windows == 0 {
            return Err(Error::Config("train.batch and train.eval_windows must be >= 1".into()));
        }
        if self.model.vocab < 256 && self.data_path.is_some() {
            return Err(Error::Config(format!(
                "model.vocab = {} cannot cover byte corpora (need 256)",
                self.model.vocab
            )));
        }
        Ok(())
    }

    /// SHA-256 over everything that defines the run except the seed and the
    /// step budget, so extending a run keeps its directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.steps = 0;
        Sha256::digest(c.serialize().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Directory name for this run's artifacts.
    pub fn run_name(&self) -> String {
        format!("{}-s{}", &self.digest()[..12], self.seed)
    }

    pub fn train_config(&self, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            optim: self.optim,
            batch: self.batch,
            eval_every: self.eval_every,
            eval_windows: self.eval_windows,
            checkpoint_every: if checkpoint_dir.is_some() { self.checkpoint_every } else { 0 },
            checkpoint_dir,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.serialize()).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn edited_config_round_trips() {
        let text = "# tiny\nmodel.layers = 1\nmodel.d_model = 16\nmodel.heads = 2\n\
                    heads.plan = local(8),routing(3)\nopt.lr = 0.003\nopt.clip = none\n\
                    data.path = /tmp/x.txt\nrun.seed = 42\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.model.layers, 1);
        assert_eq!(c.optim.clip, None);
        assert_eq!(c.seed, 42);
        assert_eq!(c.model.plan.to_string(), "local(8),routing(3)");
        assert_eq!(RunConfig::parse(&c.serialize()).unwrap(), c);
    }

    #[test]
    fn single_layer_plan_repeats() {
        let c = RunConfig::parse("model.layers = 3\nmodel.heads = 2\nheads.plan = local(4),routing(2)\n").unwrap();
        assert_eq!(c.model.plan.to_string(), "local(4),routing(2);local(4),routing(2);local(4),routing(2)");
        assert!(RunConfig::parse("model.layers = 3\nmodel.heads = 2\nheads.plan = dense,dense;dense,dense\n").is_err());
    }

    #[test]
    fn window_and_clusters_build_the_default_plan() {
        let c = RunConfig::parse("model.layers = 1\nmodel.heads = 2\nheads.window = 5\nheads.clusters = 3").unwrap();
        assert_eq!(c.model.plan.to_string(), "local(5),routing(3)");
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "model.layers 2",
            "model.wat = 1",
            "model.layers = two",
            "model.layers = 1\nmodel.layers = 2",
            "model.d_model = 30\nmodel.heads = 4",
            "opt.lr = -1",
            "run.precision = single",
            "run.precision = half",
            "data.split = 0",
            "heads.plan = dense",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn digest_ignores_seed_and_steps() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 9;
        b.steps = 5;
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.run_name(), b.run_name());
        b.optim.lr = 1e-3;
        assert_ne!(a.digest(), b.digest());
        assert!(b.run_name().ends_with("-s9"));
    }
}
