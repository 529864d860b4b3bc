//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional and falls back to the desk-scale default; unknown keys and
//! duplicate keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::HarnessError;
use crate::accountant::DEFAULT_DELTA;
use crate::data::{AugmentSpec, SyntheticTaskConfig};
use crate::finetune::{FineTuneStrategy, HeadInit};
use crate::nn::arch::CnnSpec;
use crate::optim::DEFAULT_EMA_DECAY;

/// Documented keys with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "base seed for every random stream"),
    ("data", "synthetic | idx | csv"),
    ("n_public", "synthetic: public examples"),
    ("n_private", "synthetic: private training examples"),
    ("n_test", "synthetic: private test examples"),
    ("classes", "number of classes"),
    ("image_size", "synthetic: image side length"),
    ("public_images", "idx: public image file (csv: public_csv)"),
    ("public_labels", "idx: public label file"),
    ("private_images", "idx: private image file"),
    ("private_labels", "idx: private label file"),
    ("test_images", "idx: test image file"),
    ("test_labels", "idx: test label file"),
    ("public_csv", "csv: public split"),
    ("private_csv", "csv: private split"),
    ("test_csv", "csv: test split"),
    ("image_shape", "idx/csv: CxHxW, e.g. 1x28x28 (csv only; idx reads it from the file)"),
    ("stem_channels", "model: convolution channels"),
    ("kernel", "model: convolution kernel size"),
    ("groups", "model: group-norm groups"),
    ("pool", "model: mean-pool window"),
    ("hidden", "model: hidden dense width"),
    ("weight_standardization", "model: true | false"),
    ("pretrain_epochs", "public pretraining epochs (0 keeps the initialization)"),
    ("pretrain_lr", "public pretraining learning rate"),
    ("pretrain_batch", "public pretraining minibatch size"),
    ("pretrain_holdout", "fraction of the public split held out for evaluation"),
    ("checkpoint", "checkpoint path written by pretrain and read by finetune"),
    ("strategies", "comma list of whole | last | first-last | custom:<layers>"),
    ("epsilons", "comma list of target epsilons"),
    ("delta", "target delta"),
    ("batch_size", "expected private batch size B; sampling rate q = B / N"),
    ("epochs", "private epochs E; steps T = round(E / q)"),
    ("steps", "private steps T (instead of epochs)"),
    ("clip_norm", "per-example clipping norm C"),
    ("learning_rate", "private learning rate"),
    ("augment_multiplicity", "augmented views K per example"),
    ("augment_flip", "random horizontal flips: true | false"),
    ("augment_pad", "pad-and-crop shift in pixels (0 disables)"),
    ("ema_decay", "EMA decay of the evaluated weights"),
    ("head_init", "keep | zeros | normal | normal:<std>"),
    ("non_private", "debug: sigma = 0, accountant bypassed, report marked NON-PRIVATE"),
    ("output", "output directory"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticTaskConfig),
    Idx {
        public: (PathBuf, PathBuf),
        private: (PathBuf, PathBuf),
        test: (PathBuf, PathBuf),
        classes: usize,
    },
    Csv {
        public: PathBuf,
        private: PathBuf,
        test: PathBuf,
        shape: [usize; 3],
        classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub holdout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepBudget {
    Epochs(f64),
    Steps(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    /// Architecture; `input` and `classes` are overwritten from the data.
    pub model: CnnSpec,
    pub pretrain: PretrainConfig,
    pub checkpoint: Option<PathBuf>,
    pub strategies: Vec<FineTuneStrategy>,
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub batch_size: f64,
    pub budget: StepBudget,
    pub clip_norm: f64,
    pub learning_rate: f64,
    pub augment: AugmentSpec,
    pub ema_decay: f64,
    /// `None` keeps the pretrained head.
    pub head_init: Option<HeadInit>,
    pub non_private: bool,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::Synthetic(SyntheticTaskConfig::default()),
            model: CnnSpec::default(),
            pretrain: PretrainConfig {
                epochs: 5,
                learning_rate: 0.05,
                batch_size: 32,
                holdout: 0.1,
            },
            checkpoint: None,
            strategies: FineTuneStrategy::STANDARD.to_vec(),
            epsilons: vec![1.0, 2.0, 4.0, 8.0],
            delta: DEFAULT_DELTA,
            batch_size: 128.0,
            budget: StepBudget::Steps(150),
            clip_norm: 1.0,
            learning_rate: 1.0,
            augment: AugmentSpec {
                multiplicity: 2,
                horizontal_flip: false,
                pad: 1,
            },
            ema_decay: DEFAULT_EMA_DECAY,
            head_init: None,
            non_private: false,
            output: PathBuf::from("dp-output"),
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse::<T>()
        .map_err(|_| config_err(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(config_err(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_shape(key: &str, value: &str) -> Result<[usize; 3], HarnessError> {
    let dims: Vec<usize> = value
        .split('x')
        .map(|d| parse_value(key, d.trim()))
        .collect::<Result<_, _>>()?;
    match dims.as_slice() {
        [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok([*c, *h, *w]),
        _ => Err(config_err(format!("`{key}`: expected CxHxW, got `{value}`"))),
    }
}

fn split_pairs(text: &str) -> Result<BTreeMap<String, String>, HarnessError> {
    let known: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected `key = value`", i + 1)))?;
        let key = key.trim();
        if !known.contains(&key) {
            return Err(config_err(format!("line {}: unknown key `{key}`", i + 1)));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(config_err(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_relative(&text, base)
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        Self::parse_relative(text, Path::new("."))
    }

    /// Parse, resolving relative file paths against `base`.
    pub fn parse_relative(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut kv = split_pairs(text)?;
        let mut cfg = Self::default();
        let mut take = |key: &str| kv.remove(key);
        let path = |v: String| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        if let Some(v) = take("seed") {
            cfg.seed = parse_value("seed", &v)?;
        }
        let classes = take("classes").map(|v| parse_value::<usize>("classes", &v)).transpose()?;
        let kind = take("data").unwrap_or_else(|| "synthetic".into());
        let synthetic_keys = ["n_public", "n_private", "n_test", "image_size"];
        let idx_keys = [
            "public_images",
            "public_labels",
            "private_images",
            "private_labels",
            "test_images",
            "test_labels",
        ];
        let csv_keys = ["public_csv", "private_csv", "test_csv", "image_shape"];
        let mut grab = |keys: &[&str], allowed: bool| -> Result<Vec<Option<String>>, HarnessError> {
            let vals: Vec<Option<String>> = keys.iter().map(|k| take(k)).collect();
            if !allowed {
                if let Some((k, _)) = keys.iter().zip(&vals).find(|(_, v)| v.is_some()) {
                    return Err(config_err(format!("`{k}` does not apply to data = {kind}")));
                }
            }
            Ok(vals)
        };
        let syn = grab(&synthetic_keys, kind == "synthetic")?;
        let idx = grab(&idx_keys, kind == "idx")?;
        let csv = grab(&csv_keys, kind == "csv")?;
        cfg.data = match kind.as_str() {
            "synthetic" => {
                let mut s = SyntheticTaskConfig {
                    seed: cfg.seed,
                    ..SyntheticTaskConfig::default()
                };
                let fields = [&mut s.n_public, &mut s.n_private, &mut s.n_test, &mut s.dim];
                for ((key, val), field) in synthetic_keys.iter().zip(syn).zip(fields) {
                    if let Some(v) = val {
                        *field = parse_value(key, &v)?;
                    }
                }
                if let Some(c) = classes {
                    s.classes = c;
                }
                DataSource::Synthetic(s)
            }
            "idx" => {
                let mut files = Vec::new();
                for (key, val) in idx_keys.iter().zip(idx) {
                    files.push(path(val.ok_or_else(|| config_err(format!("data = idx needs `{key}`")))?));
                }
                let mut f = files.into_iter();
                let mut pair = || (f.next().unwrap(), f.next().unwrap());
                DataSource::Idx {
                    public: pair(),
                    private: pair(),
                    test: pair(),
                    classes: classes.ok_or_else(|| config_err("data = idx needs `classes`"))?,
                }
            }
            "csv" => {
                let mut it = csv_keys.iter().zip(csv);
                let mut next = || {
                    let (key, val) = it.next().unwrap();
                    val.ok_or_else(|| config_err(format!("data = csv needs `{key}`")))
                };
                let public = path(next()?);
                let private = path(next()?);
                let test = path(next()?);
                let shape = parse_shape("image_shape", &next()?)?;
                DataSource::Csv {
                    public,
                    private,
                    test,
                    shape,
                    classes: classes.ok_or_else(|| config_err("data = csv needs `classes`"))?,
                }
            }
            other => return Err(config_err(format!("unknown data source `{other}`"))),
        };

        let m = &mut cfg.model;
        for (key, field) in [
            ("stem_channels", &mut m.stem_channels),
            ("kernel", &mut m.kernel),
            ("groups", &mut m.groups),
            ("pool", &mut m.pool),
            ("hidden", &mut m.hidden),
        ] {
            if let Some(v) = take(key) {
                *field = parse_value(key, &v)?;
            }
        }
        if let Some(v) = take("weight_standardization") {
            m.weight_standardization = parse_bool("weight_standardization", &v)?;
        }

        let p = &mut cfg.pretrain;
        if let Some(v) = take("pretrain_epochs") {
            p.epochs = parse_value("pretrain_epochs", &v)?;
        }
        if let Some(v) = take("pretrain_lr") {
            p.learning_rate = parse_value("pretrain_lr", &v)?;
        }
        if let Some(v) = take("pretrain_batch") {
            p.batch_size = parse_value("pretrain_batch", &v)?;
        }
        if let Some(v) = take("pretrain_holdout") {
            p.holdout = parse_value("pretrain_holdout", &v)?;
        }
        cfg.checkpoint = take("checkpoint").map(path);

        if let Some(v) = take("strategies") {
            cfg.strategies = parse_strategies(&v)?;
        }
        if let Some(v) = take("epsilons") {
            cfg.epsilons = v
                .split(',')
                .map(|e| parse_value("epsilons", e.trim()))
                .collect::<Result<_, _>>()?;
        }
        for (key, field) in [
            ("delta", &mut cfg.delta),
            ("batch_size", &mut cfg.batch_size),
            ("clip_norm", &mut cfg.clip_norm),
            ("learning_rate", &mut cfg.learning_rate),
            ("ema_decay", &mut cfg.ema_decay),
        ] {
            if let Some(v) = take(key) {
                *field = parse_value(key, &v)?;
            }
        }
        match (take("epochs"), take("steps")) {
            (Some(_), Some(_)) => return Err(config_err("set either `epochs` or `steps`, not both")),
            (Some(e), None) => cfg.budget = StepBudget::Epochs(parse_value("epochs", &e)?),
            (None, Some(s)) => cfg.budget = StepBudget::Steps(parse_value("steps", &s)?),
            (None, None) => {}
        }
        if let Some(v) = take("augment_multiplicity") {
            cfg.augment.multiplicity = parse_value("augment_multiplicity", &v)?;
        }
        if let Some(v) = take("augment_flip") {
            cfg.augment.horizontal_flip = parse_bool("augment_flip", &v)?;
        }
        if let Some(v) = take("augment_pad") {
            cfg.augment.pad = parse_value("augment_pad", &v)?;
        }
        if let Some(v) = take("head_init") {
            cfg.head_init = match v.as_str() {
                "keep" => None,
                other => Some(other.parse().map_err(|e| config_err(format!("`head_init`: {e}")))?),
            };
        }
        if let Some(v) = take("non_private") {
            cfg.non_private = parse_bool("non_private", &v)?;
        }
        if let Some(v) = take("output") {
            cfg.output = path(v);
        }
        debug_assert!(kv.is_empty(), "unhandled keys {kv:?}");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config_err(format!("`{name}` must be positive and finite, got {v}")))
            }
        };
        positive("delta", self.delta)?;
        if self.delta >= 1.0 {
            return Err(config_err(format!("`delta` must be < 1, got {}", self.delta)));
        }
        positive("batch_size", self.batch_size)?;
        positive("clip_norm", self.clip_norm)?;
        positive("learning_rate", self.learning_rate)?;
        positive("pretrain_lr", self.pretrain.learning_rate)?;
        if self.epsilons.is_empty() {
            return Err(config_err("`epsilons` must not be empty"));
        }
        for &e in &self.epsilons {
            positive("epsilons", e)?;
        }
        if self.strategies.is_empty() {
            return Err(config_err("`strategies` must not be empty"));
        }
        match self.budget {
            StepBudget::Epochs(e) => positive("epochs", e)?,
            StepBudget::Steps(0) => return Err(config_err("`steps` must be positive")),
            StepBudget::Steps(_) => {}
        }
        if self.augment.multiplicity == 0 {
            return Err(config_err("`augment_multiplicity` must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err(format!("`ema_decay` must lie in [0, 1), got {}", self.ema_decay)));
        }
        if self.pretrain.batch_size == 0 {
            return Err(config_err("`pretrain_batch` must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.pretrain.holdout) {
            return Err(config_err("`pretrain_holdout` must lie in [0, 1)"));
        }
        for (key, v) in [
            ("stem_channels", self.model.stem_channels),
            ("kernel", self.model.kernel),
            ("groups", self.model.groups),
            ("pool", self.model.pool),
            ("hidden", self.model.hidden),
        ] {
            if v == 0 {
                return Err(config_err(format!("`{key}` must be >= 1")));
            }
        }
        if self.model.stem_channels % self.model.groups != 0 {
            return Err(config_err("`groups` must divide `stem_channels`"));
        }
        Ok(())
    }

    /// Poisson sampling rate for a private split of `n` examples.
    pub fn sampling_rate(&self, n: usize) -> Result<f64, HarnessError> {
        if n == 0 {
            return Err(config_err("private split is empty"));
        }
        let q = self.batch_size / n as f64;
        if q > 1.0 {
            return Err(config_err(format!(
                "`batch_size` {} exceeds the {n} private examples",
                self.batch_size
            )));
        }
        Ok(q)
    }

    /// Number of private steps: `T = round(E / q)` or the explicit count.
    pub fn steps(&self, q: f64) -> u64 {
        match self.budget {
            StepBudget::Steps(t) => t,
            StepBudget::Epochs(e) => ((e / q).round() as u64).max(1),
        }
    }
}

pub fn parse_strategies(v: &str) -> Result<Vec<FineTuneStrategy>, HarnessError> {
    // `custom:` lists use commas too, so a custom entry swallows the rest.
    let mut out = Vec::new();
    let mut rest = v.trim();
    while !rest.is_empty() {
        if rest.starts_with("custom:") {
            out.push(rest.parse().map_err(|e| config_err(format!("`strategies`: {e}")))?);
            break;
        }
        let (head, tail) = rest.split_once(',').unwrap_or((rest, ""));
        out.push(head.parse().map_err(|e| config_err(format!("`strategies`: {e}")))?);
        rest = tail.trim();
    }
    Ok(out)
}
