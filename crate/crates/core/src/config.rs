//! INI-style experiment configuration with dotted overrides.
//!
//! ```text
//! seed = 0
//! [model]
//! name = toy_mlp
//! [train]
//! method = slat
//! epsilon = 0.1
//! ```
//!
//! Overrides such as `train.epsilon=0.2` or `seed=7` are applied after the
//! file. Unknown keys are validation errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Result, SlatError};
use crate::models::Activation;
use crate::training::{Method, TrainSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    ToyMlp,
    Mlp,
    SmallCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// `None` keeps the model's default sites.
    pub sites: Option<Vec<usize>>,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum DataConfig {
    Toy {
        mu: [f64; 2],
        sigma: [f64; 2],
        n_per_class: usize,
        test_per_class: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_size: usize,
        train_size: Option<usize>,
        augment_pad: usize,
    },
}

impl DataConfig {
    pub fn is_toy(&self) -> bool {
        matches!(self, DataConfig::Toy { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    pub epsilon: f64,
    pub size: usize,
    pub probe_size: usize,
    pub pgd_steps: usize,
    pub pgd_restarts: usize,
    pub final_pgd_steps: usize,
    pub final_pgd_restarts: usize,
    pub landscape_n: usize,
    pub landscape_samples: usize,
    pub overfit_window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainSpec,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

/// Flat `section.key -> value` view of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split(['#', ';']).next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| SlatError::Parse { line, message: format!("unterminated section header `{s}`") })?
                    .trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(SlatError::Parse { line, message: format!("bad section name `{name}`") });
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| SlatError::Parse { line, message: format!("expected `key = value`, got `{s}`") })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(SlatError::Parse { line, message: "empty key".into() });
            }
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            if entries.insert(key.clone(), Entry { value: v.trim().to_string(), line }).is_some() {
                return Err(SlatError::Parse { line, message: format!("duplicate key `{key}`") });
            }
        }
        Ok(RawConfig { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` (or `--key=value`) overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref().trim_start_matches("--");
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| SlatError::InvalidArgument(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), Entry { value: value.to_string(), line: 0 });
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Pulls typed values out of a [`RawConfig`], collecting every problem.
struct Reader {
    entries: BTreeMap<String, Entry>,
    errors: Vec<String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<Entry> {
        self.entries.remove(key)
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        let e = self.take(key)?;
        match e.value.parse() {
            Ok(v) => Some(v),
            Err(err) => {
                self.errors.push(format!("{key} (line {}): cannot parse `{}`: {err}", e.line, e.value));
                None
            }
        }
    }

    fn or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T
    where
        T::Err: std::fmt::Display,
    {
        self.parsed(key).unwrap_or(default)
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Option<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let e = self.take(key)?;
        let mut out = Vec::new();
        for part in e.value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.parse() {
                Ok(v) => out.push(v),
                Err(err) => {
                    self.errors.push(format!("{key} (line {}): cannot parse `{part}`: {err}", e.line));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn pair(&mut self, key: &str, default: [f64; 2]) -> [f64; 2] {
        match self.list::<f64>(key) {
            Some(v) if v.len() == 2 => [v[0], v[1]],
            Some(v) => {
                self.errors.push(format!("{key}: expected 2 values, got {}", v.len()));
                default
            }
            None => default,
        }
    }
}

/// Accepts `a/b` fractions such as `8/255` as well as plain numbers.
#[derive(Clone, Copy, Debug)]
struct Num(f64);

impl std::str::FromStr for Num {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |t: &str| t.trim().parse::<f64>().map_err(|e| e.to_string());
        match s.split_once('/') {
            Some((a, b)) => Ok(Num(parse(a)? / parse(b)?)),
            None => parse(s).map(Num),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "toy_mlp" => Ok(ModelKind::ToyMlp),
            "mlp" => Ok(ModelKind::Mlp),
            "small_cnn" => Ok(ModelKind::SmallCnn),
            other => Err(format!("unknown model `{other}`")),
        }
    }
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut r = Reader { entries: raw.entries.clone(), errors: Vec::new() };
        let seed: u64 = r.or("seed", 0);

        let source: String = r.or("data.source", "toy".to_string());
        let data = match source.as_str() {
            "toy" => DataConfig::Toy {
                mu: r.pair("data.mu", [1.0, 0.05]),
                sigma: r.pair("data.sigma", [0.5, 0.02]),
                n_per_class: r.or("data.n_per_class", 500),
                test_per_class: r.or("data.test_per_class", 500),
            },
            "idx" => {
                let images: Option<PathBuf> = r.parsed("data.images");
                let labels: Option<PathBuf> = r.parsed("data.labels");
                if images.is_none() || labels.is_none() {
                    r.errors.push("data.images and data.labels are required for idx data".into());
                }
                DataConfig::Idx {
                    images: images.unwrap_or_default(),
                    labels: labels.unwrap_or_default(),
                    test_size: r.or("data.test_size", 1000),
                    train_size: r.parsed("data.train_size"),
                    augment_pad: r.or("data.augment_pad", 0),
                }
            }
            other => {
                r.errors.push(format!("data.source: unknown source `{other}` (toy | idx)"));
                DataConfig::Toy { mu: [1.0, 0.05], sigma: [0.5, 0.02], n_per_class: 500, test_per_class: 500 }
            }
        };

        let default_model = if data.is_toy() { ModelKind::ToyMlp } else { ModelKind::SmallCnn };
        let kind = r.or("model.name", default_model);
        let default_eta = if data.is_toy() { 0.1 } else { 8.0 / 255.0 };
        let model = ModelConfig {
            kind,
            hidden: r.list("model.hidden").unwrap_or_else(|| vec![16]),
            activation: r.or("model.activation", Activation::Relu),
            sites: r.list("model.sites"),
            eta: r.parsed::<Num>("model.eta").map_or(default_eta, |n| n.0),
        };

        let d = TrainSpec::default();
        let epsilon = r.parsed::<Num>("train.epsilon").map_or(default_eta, |n| n.0);
        let train = TrainSpec {
            method: r.or("train.method", Method::Slat),
            epochs: r.or("train.epochs", d.epochs),
            batch: r.or("train.batch", d.batch),
            lr_max: r.or("train.lr_max", d.lr_max),
            momentum: r.or("train.momentum", d.momentum),
            weight_decay: r.or("train.weight_decay", d.weight_decay),
            peak_fraction: r.parsed::<Num>("train.peak_fraction").map_or(d.peak_fraction, |n| n.0),
            epsilon,
            fgsm_alpha: r.parsed::<Num>("train.fgsm_alpha").map(|n| n.0),
            rs_alpha: r.parsed::<Num>("train.rs_alpha").map(|n| n.0),
            pgd_steps: r.or("train.pgd_steps", d.pgd_steps),
            pgd_alpha: r.parsed::<Num>("train.pgd_alpha").map(|n| n.0),
            eta: BTreeMap::new(),
            lambda_ga: r.or("train.lambda_ga", 0.0),
            seed,
            checkpoint_every: r.or("train.checkpoint_every", 0),
            clamp: if data.is_toy() { None } else { Some((0.0, 1.0)) },
            augment_pad: match &data {
                DataConfig::Idx { augment_pad, .. } => *augment_pad,
                DataConfig::Toy { .. } => 0,
            },
        };

        let eval = EvalConfig {
            epsilon: r.parsed::<Num>("eval.epsilon").map_or(train.epsilon, |n| n.0),
            size: r.or("eval.size", 1000),
            probe_size: r.or("eval.probe_size", 128),
            pgd_steps: r.or("eval.pgd_steps", 20),
            pgd_restarts: r.or("eval.pgd_restarts", 1),
            final_pgd_steps: r.or("eval.final_pgd_steps", 50),
            final_pgd_restarts: r.or("eval.final_pgd_restarts", 10),
            landscape_n: r.or("eval.landscape_n", 21),
            landscape_samples: r.or("eval.landscape_samples", 64),
            overfit_window: r.or("eval.overfit_window", usize::MAX),
        };
        let out_dir: PathBuf = r.or("output.dir", PathBuf::from("runs/default"));

        let unknown: Vec<String> = r.entries.keys().map(|k| format!("unknown key `{k}`")).collect();
        r.errors.extend(unknown);
        let cfg = ExperimentConfig { seed, model, data, train, eval, out_dir };
        r.errors.extend(cfg.problems());
        if r.errors.is_empty() {
            Ok(cfg)
        } else {
            Err(SlatError::Validation(r.errors))
        }
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::read(path)?;
        raw.apply_overrides(overrides)?;
        Self::from_raw(&raw)
    }

    /// Semantic checks beyond parsing.
    fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(SlatError::Validation(v)) = self.train.validate() {
            errs.extend(v);
        }
        if !(self.model.eta >= 0.0) {
            errs.push(format!("model.eta must be >= 0, got {}", self.model.eta));
        }
        let depth = match self.model.kind {
            ModelKind::Linear => 1,
            ModelKind::ToyMlp => 2,
            ModelKind::Mlp => self.model.hidden.len() + 1,
            ModelKind::SmallCnn => 3,
        };
        if let Some(sites) = &self.model.sites {
            for &k in sites.iter().filter(|&&k| k >= depth) {
                errs.push(format!("model.sites: site {k} does not exist (model has sites 0..{})", depth - 1));
            }
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            errs.push("model.hidden widths must be >= 1".into());
        }
        match &self.data {
            DataConfig::Toy { sigma, n_per_class, test_per_class, .. } => {
                if sigma.iter().any(|s| !(*s > 0.0)) {
                    errs.push("data.sigma entries must be > 0".into());
                }
                if *n_per_class == 0 || *test_per_class == 0 {
                    errs.push("data.n_per_class and data.test_per_class must be >= 1".into());
                }
                if self.model.kind == ModelKind::SmallCnn {
                    errs.push("model.name: small_cnn needs image data".into());
                }
            }
            DataConfig::Idx { images, labels, test_size, .. } => {
                for p in [images, labels] {
                    if !p.as_os_str().is_empty() && !p.exists() {
                        errs.push(format!("data file {} does not exist", p.display()));
                    }
                }
                if *test_size == 0 {
                    errs.push("data.test_size must be >= 1".into());
                }
            }
        }
        let e = &self.eval;
        if !(e.epsilon >= 0.0) {
            errs.push(format!("eval.epsilon must be >= 0, got {}", e.epsilon));
        }
        if e.size == 0 || e.probe_size == 0 || e.landscape_samples == 0 {
            errs.push("eval sizes must be >= 1".into());
        }
        if e.pgd_steps == 0 || e.pgd_restarts == 0 || e.final_pgd_steps == 0 || e.final_pgd_restarts == 0 {
            errs.push("eval attack steps and restarts must be >= 1".into());
        }
        if e.landscape_n < 2 {
            errs.push("eval.landscape_n must be >= 2".into());
        }
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toy_config_fills_defaults() {
        let cfg = ExperimentConfig::from_raw(&RawConfig::parse("[model]\nname = toy_mlp\n").unwrap()).unwrap();
        assert_eq!(cfg.model.eta, 0.1);
        assert_eq!(cfg.train.epsilon, 0.1);
        assert!(cfg.train.clamp.is_none());
    }

    #[test]
    fn image_default_eta() {
        let raw = RawConfig::parse("[data]\nsource = idx\nimages = /nonexistent/a\nlabels = /nonexistent/b\n").unwrap();
        match ExperimentConfig::from_raw(&raw) {
            Err(SlatError::Validation(v)) => assert_eq!(v.len(), 2, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let raw = RawConfig::parse("[train]\nepsilonn = 0.1\n").unwrap();
        match ExperimentConfig::from_raw(&raw) {
            Err(SlatError::Validation(v)) => assert!(v.iter().any(|e| e.contains("train.epsilonn"))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_win() {
        let mut raw = RawConfig::parse("seed = 3\n[train]\nepsilon = 8/255\n").unwrap();
        raw.apply_overrides(&["--seed=7", "train.epsilon=0.2"]).unwrap();
        let cfg = ExperimentConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.epsilon, 0.2);
    }

    #[test]
    fn parse_errors_carry_lines() {
        assert!(matches!(RawConfig::parse("a = 1\n[x\n"), Err(SlatError::Parse { line: 2, .. })));
        assert!(matches!(RawConfig::parse("a = 1\nnovalue\n"), Err(SlatError::Parse { line: 2, .. })));
        assert!(matches!(RawConfig::parse("a = 1\na = 2\n"), Err(SlatError::Parse { line: 2, .. })));
    }

    #[test]
    fn fractions_and_lists() {
        let raw = RawConfig::parse("[model]\nsites = 0, 1\neta = 8/255\n[train]\nepochs = 0\n").unwrap();
        match ExperimentConfig::from_raw(&raw) {
            Err(SlatError::Validation(v)) => assert_eq!(v, vec!["train.epochs must be >= 1".to_string()]),
            other => panic!("{other:?}"),
        }
        let raw = RawConfig::parse("[model]\nsites = 0, 1\neta = 8/255\n").unwrap();
        let cfg = ExperimentConfig::from_raw(&raw).unwrap();
        assert_eq!(cfg.model.sites, Some(vec![0, 1]));
        assert_eq!(cfg.model.eta, 8.0 / 255.0);
    }
}
