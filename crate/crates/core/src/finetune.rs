//! Choosing which layers of a pretrained model are trained privately.
//!
//! Only layers that own parameters take part. The "first" layer is the first
//! parameterized layer in forward order (the stem convolution, bias
//! included); a normalization layer right after it is not part of it. The
//! "last" layer is the final parameterized layer, the classification head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{LayerKind, Model};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FinetuneError {
    #[error("unknown layer `{name}`; parameterized layers are: {}", valid.join(", "))]
    UnknownLayer { name: String, valid: Vec<String> },
    #[error("layer `{0}` has no parameters")]
    ParameterFree(String),
    #[error("custom strategy needs at least one layer name")]
    EmptyCustom,
    #[error("model has no parameterized layers")]
    NoParameters,
    #[error("classification head `{0}` is not a dense layer")]
    HeadNotDense(String),
    #[error("unrecognized fine-tuning strategy `{0}` (expected whole|last|first-last|custom:<names>)")]
    Parse(String),
    #[error("invalid head initialization: {0}")]
    HeadInit(String),
}

pub type Result<T, E = FinetuneError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FineTuneStrategy {
    WholeModel,
    LastLayer,
    FirstLastLayers,
    Custom(Vec<String>),
}

impl FineTuneStrategy {
    /// The three strategies compared in a sweep.
    pub const STANDARD: [FineTuneStrategy; 3] = [
        FineTuneStrategy::WholeModel,
        FineTuneStrategy::LastLayer,
        FineTuneStrategy::FirstLastLayers,
    ];

    /// Human-readable row label.
    pub fn label(&self) -> String {
        match self {
            Self::WholeModel => "Whole-Model".into(),
            Self::LastLayer => "Last-Layer".into(),
            Self::FirstLastLayers => "First-Last-Layers".into(),
            Self::Custom(names) => format!("Custom({})", names.join(",")),
        }
    }
}

impl fmt::Display for FineTuneStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::WholeModel => f.write_str("whole"),
            Self::LastLayer => f.write_str("last"),
            Self::FirstLastLayers => f.write_str("first-last"),
            Self::Custom(names) => write!(f, "custom:{}", names.join(",")),
        }
    }
}

impl FromStr for FineTuneStrategy {
    type Err = FinetuneError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "whole" => Ok(Self::WholeModel),
            "last" => Ok(Self::LastLayer),
            "first-last" => Ok(Self::FirstLastLayers),
            other => {
                let Some(list) = other.strip_prefix("custom:") else {
                    return Err(FinetuneError::Parse(other.to_string()));
                };
                let names: Vec<String> = list
                    .split(',')
                    .map(str::trim)
                    .filter(|n| !n.is_empty())
                    .map(String::from)
                    .collect();
                if names.is_empty() {
                    return Err(FinetuneError::EmptyCustom);
                }
                Ok(Self::Custom(names))
            }
        }
    }
}

/// Per-coordinate trainable flags plus a per-layer summary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableMask {
    coords: Vec<bool>,
    layers: Vec<(String, bool)>,
}

impl TrainableMask {
    pub fn coords(&self) -> &[bool] {
        &self.coords
    }

    /// `(layer name, trainable)` for every parameterized layer.
    pub fn layers(&self) -> &[(String, bool)] {
        &self.layers
    }

    pub fn trainable_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|(_, on)| *on)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Whether every trainable coordinate here is also trainable in `other`.
    pub fn is_subset_of(&self, other: &TrainableMask) -> bool {
        self.coords.len() == other.coords.len()
            && self.coords.iter().zip(&other.coords).all(|(&a, &b)| !a || b)
    }
}

pub fn select_trainable(model: &Model, strategy: &FineTuneStrategy) -> Result<TrainableMask> {
    let param_layers = model.parameterized_layers();
    let (&first, &last) = match (param_layers.first(), param_layers.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(FinetuneError::NoParameters),
    };
    let chosen: Vec<usize> = match strategy {
        FineTuneStrategy::WholeModel => param_layers.clone(),
        FineTuneStrategy::LastLayer => vec![last],
        FineTuneStrategy::FirstLastLayers => {
            if first == last {
                vec![first]
            } else {
                vec![first, last]
            }
        }
        FineTuneStrategy::Custom(names) => {
            if names.is_empty() {
                return Err(FinetuneError::EmptyCustom);
            }
            let valid = || {
                param_layers
                    .iter()
                    .map(|&i| model.layers()[i].name.clone())
                    .collect::<Vec<_>>()
            };
            names
                .iter()
                .map(|n| match model.layer_index(n) {
                    Some(i) if model.layers()[i].has_params() => Ok(i),
                    Some(_) => Err(FinetuneError::ParameterFree(n.clone())),
                    None => Err(FinetuneError::UnknownLayer {
                        name: n.clone(),
                        valid: valid(),
                    }),
                })
                .collect::<Result<_>>()?
        }
    };
    let mut coords = vec![false; model.num_params()];
    for &i in &chosen {
        coords[model.param_range(i)].fill(true);
    }
    let layers = param_layers
        .iter()
        .map(|&i| (model.layers()[i].name.clone(), chosen.contains(&i)))
        .collect();
    Ok(TrainableMask { coords, layers })
}

/// Number of trainable scalar parameters.
pub fn effective_dimension(mask: &TrainableMask) -> usize {
    mask.coords.iter().filter(|&&m| m).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeadInit {
    Zeros,
    Normal { std: f64 },
}

impl FromStr for HeadInit {
    type Err = FinetuneError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "zeros" => Ok(Self::Zeros),
            "normal" => Ok(Self::Normal { std: 0.01 }),
            other => {
                let std = other
                    .strip_prefix("normal:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| *v > 0.0 && v.is_finite())
                    .ok_or_else(|| FinetuneError::HeadInit(other.to_string()))?;
                Ok(Self::Normal { std })
            }
        }
    }
}

/// Replace the classification head's weight and bias. Every other layer is
/// left bitwise unchanged.
pub fn reinit_head<R: Rng + ?Sized>(model: &Model, rng: &mut R, scheme: HeadInit) -> Result<Model> {
    let &head = model
        .parameterized_layers()
        .last()
        .ok_or(FinetuneError::NoParameters)?;
    let layer = &model.layers()[head];
    if !matches!(layer.kind, LayerKind::Dense { .. }) {
        return Err(FinetuneError::HeadNotDense(layer.name.clone()));
    }
    let n = layer.num_params();
    let values: Vec<f64> = match scheme {
        HeadInit::Zeros => vec![0.0; n],
        HeadInit::Normal { std } => {
            let dist = Normal::new(0.0, std).map_err(|e| FinetuneError::HeadInit(e.to_string()))?;
            (0..n).map(|_| dist.sample(rng)).collect()
        }
    };
    let mut out = model.clone();
    out.set_layer_params(head, &values)
        .expect("head parameter count matches");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::{mlp, reference_cnn, CnnSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn five_layer() -> Model {
        mlp(6, &[5, 5, 5, 5], 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn first_last_picks_outer_layers() {
        let m = five_layer();
        let mask = select_trainable(&m, &FineTuneStrategy::FirstLastLayers).unwrap();
        assert_eq!(mask.trainable_layers(), vec!["fc0", "head"]);
        assert_eq!(mask.layers().len(), 5);
        let whole = select_trainable(&m, &FineTuneStrategy::WholeModel).unwrap();
        assert_eq!(whole.trainable_layers().len(), 5);
        assert_eq!(effective_dimension(&whole), m.num_params());
    }

    #[test]
    fn single_layer_model_first_last() {
        let m = mlp(4, &[], 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mask = select_trainable(&m, &FineTuneStrategy::FirstLastLayers).unwrap();
        assert_eq!(mask.trainable_layers(), vec!["head"]);
        assert_eq!(effective_dimension(&mask), m.num_params());
    }

    #[test]
    fn reference_cnn_first_last_dimension() {
        let spec = CnnSpec::default();
        let m = reference_cnn(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mask = select_trainable(&m, &FineTuneStrategy::FirstLastLayers).unwrap();
        // stem: 8 filters of 1x3x3 plus 8 biases; head: 10x32 plus 10 biases.
        assert_eq!(effective_dimension(&mask), (8 * 9 + 8) + (10 * 32 + 10));
        assert_eq!(mask.trainable_layers(), vec!["stem", "head"]);
    }

    #[test]
    fn masks_nest() {
        let m = five_layer();
        let last = select_trainable(&m, &FineTuneStrategy::LastLayer).unwrap();
        let fl = select_trainable(&m, &FineTuneStrategy::FirstLastLayers).unwrap();
        let whole = select_trainable(&m, &FineTuneStrategy::WholeModel).unwrap();
        assert!(last.is_subset_of(&fl) && fl.is_subset_of(&whole));
        assert!(effective_dimension(&fl) < effective_dimension(&whole));
    }

    #[test]
    fn custom_names_resolve_or_fail() {
        let m = five_layer();
        let s: FineTuneStrategy = "custom:fc1,head".parse().unwrap();
        let mask = select_trainable(&m, &s).unwrap();
        assert_eq!(mask.trainable_layers(), vec!["fc1", "head"]);

        let err = select_trainable(&m, &"custom:nope".parse().unwrap()).unwrap_err();
        match err {
            FinetuneError::UnknownLayer { valid, .. } => assert_eq!(valid.len(), 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            select_trainable(&m, &FineTuneStrategy::Custom(vec!["act0".into()])),
            Err(FinetuneError::ParameterFree(_))
        ));
        assert!(matches!("custom:".parse::<FineTuneStrategy>(), Err(FinetuneError::EmptyCustom)));
    }

    #[test]
    fn strategy_strings_round_trip() {
        for s in ["whole", "last", "first-last", "custom:a,b"] {
            assert_eq!(s.parse::<FineTuneStrategy>().unwrap().to_string(), s);
        }
        assert!("all".parse::<FineTuneStrategy>().is_err());
    }

    #[test]
    fn empty_mask_has_zero_dimension() {
        let m = five_layer();
        let mut mask = select_trainable(&m, &FineTuneStrategy::LastLayer).unwrap();
        mask.coords.fill(false);
        assert_eq!(effective_dimension(&mask), 0);
    }

    #[test]
    fn head_reinit() {
        let m = five_layer();
        let zeroed = reinit_head(&m, &mut ChaCha8Rng::seed_from_u64(0), HeadInit::Zeros).unwrap();
        let head = m.layer_index("head").unwrap();
        assert!(zeroed.params_flat()[m.param_range(head)].iter().all(|&v| v == 0.0));
        for (i, l) in m.layers().iter().enumerate().filter(|(i, _)| *i != head) {
            assert_eq!(&zeroed.layers()[i], l);
        }

        let scheme = HeadInit::Normal { std: 0.01 };
        let a = reinit_head(&m, &mut ChaCha8Rng::seed_from_u64(4), scheme).unwrap();
        let b = reinit_head(&m, &mut ChaCha8Rng::seed_from_u64(4), scheme).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, m);
    }

    #[test]
    fn head_must_be_dense() {
        use crate::nn::{Layer, Model};
        use crate::tensor::Tensor;
        let conv = Layer::conv2d("c", Tensor::filled(vec![2, 1, 1, 1], 0.5), Tensor::zeros(vec![2]), 1, 0).unwrap();
        let m = Model::new(
            vec![1, 1, 1],
            vec![conv, Layer::flatten("f")],
        )
        .unwrap();
        assert!(matches!(
            reinit_head(&m, &mut ChaCha8Rng::seed_from_u64(0), HeadInit::Zeros),
            Err(FinetuneError::HeadNotDense(_))
        ));
    }
}
