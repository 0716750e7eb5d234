//! The JSON experiment configuration: one document with sections for the
//! group, the architecture space, the network, training, the ensemble,
//! data, and output. Support masks may be written inline as ASCII grids.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::FiniteGroup;
use crate::network::NetworkSpec;
use crate::paramspace::{FilterSupport, Padding};
use crate::training::{DType, InitKind, TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub group: GroupConfig,
    #[serde(default)]
    pub space: SpaceConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupConfig {
    pub kind: String,
    pub order: usize,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig {
            kind: "cyclic".into(),
            order: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SupportSpec {
    /// One of: sym3x3, asym3x3, sym5x5, asym5x5, full3x3, full5x5.
    Builtin(String),
    /// Inline ASCII grid, `#` supported and `.` unsupported.
    Ascii { ascii: String },
}

impl SupportSpec {
    pub fn build(&self) -> Result<FilterSupport> {
        match self {
            SupportSpec::Builtin(name) => match name.as_str() {
                "sym3x3" => Ok(FilterSupport::sym_3x3()),
                "asym3x3" => Ok(FilterSupport::asym_3x3()),
                "sym5x5" => Ok(FilterSupport::sym_5x5()),
                "asym5x5" => Ok(FilterSupport::asym_5x5()),
                "full3x3" => FilterSupport::full(3),
                "full5x5" => FilterSupport::full(5),
                other => Err(Error::Config(format!("unknown support {other:?}"))),
            },
            SupportSpec::Ascii { ascii } => FilterSupport::from_ascii(ascii),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    /// 3 or 5; selects the built-in symmetric/asymmetric mask pair.
    pub filter_size: usize,
    pub channels: usize,
    pub padding: String,
    /// Optional explicit mask override for single-model runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<SupportSpec>,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            filter_size: 3,
            channels: 16,
            padding: "zero".into(),
            support: None,
        }
    }
}

impl SpaceConfig {
    pub fn padding(&self) -> Result<Padding> {
        match self.padding.as_str() {
            "zero" => Ok(Padding::Zero),
            "circular" => Ok(Padding::Circular),
            other => Err(Error::Config(format!("unknown padding {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// `mnist_c4` (the experiment stack) or `toy_c2` (2-parameter linear).
    pub arch: String,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            arch: "mnist_c4".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dtype: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: "random_augment_sgd".into(),
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 3,
            seed: 7,
            dtype: "f32".into(),
        }
    }
}

impl TrainSection {
    pub fn build(&self) -> Result<TrainConfig> {
        let mode = match self.mode.as_str() {
            "full_augment_gd" => TrainMode::FullAugmentGd,
            "random_augment_sgd" => TrainMode::RandomAugmentSgd,
            "no_augment_sgd" => TrainMode::NoAugmentSgd,
            other => return Err(Error::Config(format!("unknown mode {other:?}"))),
        };
        let dtype = match self.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::Config(format!("unknown dtype {other:?}"))),
        };
        let cfg = TrainConfig {
            mode,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            dtype,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The three experiment models: symmetric support, asymmetric support
/// invariantly initialized, asymmetric support naively initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Sym,
    AsymInvariant,
    AsymNaive,
}

impl Model {
    pub fn parse(s: &str) -> Result<Model> {
        match s {
            "sym" => Ok(Model::Sym),
            "asym_invariant" => Ok(Model::AsymInvariant),
            "asym_naive" => Ok(Model::AsymNaive),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Model::Sym => "sym",
            Model::AsymInvariant => "asym_invariant",
            Model::AsymNaive => "asym_naive",
        }
    }

    pub fn support(self, filter_size: usize) -> Result<FilterSupport> {
        match (self, filter_size) {
            (Model::Sym, 3) => Ok(FilterSupport::sym_3x3()),
            (Model::Sym, 5) => Ok(FilterSupport::sym_5x5()),
            (Model::AsymInvariant | Model::AsymNaive, 3) => Ok(FilterSupport::asym_3x3()),
            (Model::AsymInvariant | Model::AsymNaive, 5) => Ok(FilterSupport::asym_5x5()),
            (_, other) => Err(Error::Config(format!(
                "no built-in mask pair for filter size {other}"
            ))),
        }
    }

    pub fn init(self) -> InitKind {
        match self {
            Model::Sym => InitKind::Invariant,
            Model::AsymInvariant => InitKind::InvariantAsym,
            Model::AsymNaive => InitKind::NaiveAsym,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub symmetrize: bool,
    pub models: Vec<String>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: 10,
            symmetrize: false,
            models: vec!["sym".into(), "asym_invariant".into(), "asym_naive".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: String,
    /// Dataset root; `EQUIFLOW_DATA_DIR` is the fallback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    pub train_subset: usize,
    pub test_subset: usize,
    pub subset_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: "mnist".into(),
            dir: None,
            train_subset: 2000,
            test_subset: 2000,
            subset_seed: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            group: GroupConfig::default(),
            space: SpaceConfig::default(),
            network: NetworkConfig::default(),
            train: TrainSection::default(),
            ensemble: EnsembleConfig::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.group()?;
        self.space.padding()?;
        self.train.build()?;
        self.models()?;
        if let Some(s) = &self.space.support {
            s.build()?;
        }
        match self.network.arch.as_str() {
            "mnist_c4" | "toy_c2" => {}
            other => return Err(Error::Config(format!("unknown arch {other:?}"))),
        }
        match self.data.dataset.as_str() {
            "mnist" | "cifar_gray" | "toy" => {}
            other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn group(&self) -> Result<Arc<FiniteGroup>> {
        match self.group.kind.as_str() {
            "cyclic" => FiniteGroup::cyclic(self.group.order),
            other => Err(Error::Config(format!("unknown group kind {other:?}"))),
        }
    }

    /// The canonical hash of the network-defining sections; checkpoints
    /// carry it to detect spec mismatches.
    pub fn spec_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let doc = serde_json::json!({
            "group": self.group,
            "space": self.space,
            "network": self.network,
        });
        let mut h = Sha256::new();
        h.update(doc.to_string().as_bytes());
        h.finalize().into()
    }

    /// Builds the network for a named model of this config.
    pub fn build_network(&self, model: Model) -> Result<NetworkSpec> {
        match self.network.arch.as_str() {
            "mnist_c4" => {
                let support = match &self.space.support {
                    Some(s) => s.build()?,
                    None => model.support(self.space.filter_size)?,
                };
                NetworkSpec::mnist_c4(support, self.space.channels)
            }
            "toy_c2" => toy_c2_network(),
            other => Err(Error::Config(format!("unknown arch {other:?}"))),
        }
    }

    pub fn models(&self) -> Result<Vec<Model>> {
        self.ensemble.models.iter().map(|m| Model::parse(m)).collect()
    }
}

/// The two-parameter linear model with the reflection group acting by
/// negating the second input coordinate.
pub fn toy_c2_network() -> Result<NetworkSpec> {
    use crate::group::UnitaryRep;
    use crate::network::Nonlinearity;
    use crate::paramspace::{AffineSpace, LayerSpec};
    use crate::tensor::Shape;

    let group = FiniteGroup::cyclic(2)?;
    let layers = vec![LayerSpec::dense(Shape::new(2, 1, 1), 1)];
    let space = AffineSpace::new(layers)?;
    let input_rep = UnitaryRep::from_matrices(
        group.clone(),
        2,
        vec![vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, -1.0]],
    )?;
    let output_rep = UnitaryRep::trivial(group, 1);
    NetworkSpec::new(space, vec![Nonlinearity::Identity], input_rep, output_rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_identity() {
        let cfg = Config::default();
        let json = cfg.to_json();
        let back = Config::from_json(&json).unwrap();
        assert_eq!(cfg, back);
        // and once more through the serializer
        assert_eq!(json, back.to_json());
    }

    #[test]
    fn ascii_support_roundtrip() {
        let mut cfg = Config::default();
        cfg.space.support = Some(SupportSpec::Ascii {
            ascii: "##.\n#.#\n.#.".into(),
        });
        let back = Config::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        let sup = back.space.support.unwrap().build().unwrap();
        assert_eq!(sup, FilterSupport::asym_3x3());
    }

    #[test]
    fn malformed_config_rejected() {
        assert!(Config::from_json("{ not json").is_err());
        assert!(Config::from_json(r#"{"unknown_section": 1}"#).is_err());
        assert!(Config::from_json(r#"{"train": {"mode": "warp_drive"}}"#).is_err());
    }

    #[test]
    fn spec_hash_tracks_architecture_only() {
        let a = Config::default();
        let mut b = Config::default();
        b.train.epochs = 99;
        assert_eq!(a.spec_hash(), b.spec_hash());
        b.space.channels = 8;
        assert_ne!(a.spec_hash(), b.spec_hash());
    }

    #[test]
    fn builtin_supports_build() {
        for name in ["sym3x3", "asym3x3", "sym5x5", "asym5x5", "full3x3", "full5x5"] {
            SupportSpec::Builtin(name.into()).build().unwrap();
        }
        assert!(SupportSpec::Builtin("bogus".into()).build().is_err());
    }
}
