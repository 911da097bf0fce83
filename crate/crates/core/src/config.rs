//! Run configuration files (TOML).
//!
//! ```toml
//! [model]
//! height = 8
//! width = 8
//! channels = 3
//! bits = 8
//! levels = 2
//! flows_per_level = 2
//! squeeze = 2
//! split = [3, 4]
//! backbone = "densenet"
//! depth = 2
//! hidden_channels = 24
//! prior_depth = 2
//! prior_channels = 24
//! mixture_components = 5
//! permutation = "random"
//! mode = "discrete"
//! rounding = { forward = { kind = "hard_round" }, backward = { kind = "identity" } }
//! invert_perms = true
//! rezero = true
//! groupnorm = true
//! ema = true
//!
//! [optimizer]
//! base_lr = 1e-3
//! decay = 0.999
//! warmup_epochs = 1
//! batch_size = 32
//! epochs = 10
//! ema_decay = 0.999
//! seeds = [0]
//!
//! [data]
//! dataset = "synth8x8"
//! train_images = 2000
//! validation_fraction = 0.1
//! seed = 0
//!
//! [output]
//! dir = "runs/tiny"
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::toy_pmf;
use crate::autodiff::rounding::RoundingConfig;
use crate::data::{read_raw_dir, synth8x8, SYNTH8X8};
use crate::error::{Error, Result};
use crate::flows::{Mode, ModelConfig, PermutationKind};
use crate::grid::{Fraction, GridTensor};
use crate::nn::{BackboneSpec, BlockVariant};
use crate::train::{split_validation, LrSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Dense blocks; `groupnorm` selects GroupNorm + Swish over plain ReLU.
    Densenet,
    /// Dense blocks of 1x1 convolutions with LayerNorm, for 1x1 images.
    ToyDensenet,
    Convnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bits: u32,
    pub levels: usize,
    pub flows_per_level: usize,
    pub squeeze: usize,
    /// Fraction of channels that condition each coupling, as `[num, den]`.
    pub split: [usize; 2],
    pub backbone: BackboneKind,
    pub depth: usize,
    pub hidden_channels: usize,
    pub prior_depth: usize,
    pub prior_channels: usize,
    pub mixture_components: usize,
    pub permutation: PermutationKind,
    pub mode: Mode,
    pub rounding: RoundingConfig,
    pub invert_perms: bool,
    pub rezero: bool,
    pub groupnorm: bool,
    pub ema: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub base_lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_lr: Option<f64>,
    pub decay: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub ema_decay: f64,
    #[serde(default = "default_true")]
    pub ema_warmup: bool,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Built-in dataset: `synth8x8` or `toy:<bits>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    /// Directory of `.idfr` raw image files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    /// Images generated for built-in datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<usize>,
    pub validation_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub data: DataSection,
    pub output: OutputSection,
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth8x8,
    Toy { bits: u32 },
    Directory(PathBuf),
}

fn parse_dataset(id: &str) -> Result<DataSource> {
    if id == SYNTH8X8 {
        return Ok(DataSource::Synth8x8);
    }
    if let Some(b) = id.strip_prefix("toy:") {
        let bits = b
            .parse()
            .map_err(|_| Error::Config(format!("data.dataset: bad toy bit depth in `{id}`")))?;
        return Ok(DataSource::Toy { bits });
    }
    Err(Error::Config(format!(
        "data.dataset: unknown dataset `{id}` (expected `{SYNTH8X8}` or `toy:<bits>`)"
    )))
}

impl RunConfig {
    /// Parses and validates; unknown keys and missing fields are errors
    /// naming the key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(e.message().to_string() + &span_note(text, e.span())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn source(&self) -> Result<DataSource> {
        match (&self.data.dataset, &self.data.directory) {
            (Some(id), None) => parse_dataset(id),
            (None, Some(dir)) => Ok(DataSource::Directory(dir.clone())),
            _ => Err(Error::Config(
                "data: set exactly one of `dataset` or `directory`".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        self.model_config(0)?
            .validate()
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        self.train_config(0)
            .validate()
            .map_err(|e| Error::Config(format!("optimizer: {e}")))?;
        if self.optimizer.seeds.is_empty() {
            return Err(Error::Config(
                "optimizer.seeds: at least one seed is required".into(),
            ));
        }
        let f = self.data.validation_fraction;
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!(
                "data.validation_fraction: {f} outside [0, 1)"
            )));
        }
        match self.source()? {
            DataSource::Directory(_) => {
                if self.data.train_images.is_some() {
                    return Err(Error::Config(
                        "data.train_images: only valid with a built-in dataset".into(),
                    ));
                }
            }
            src => {
                match self.data.train_images {
                    Some(n) if n > 0 => {}
                    _ => {
                        return Err(Error::Config(
                            "data.train_images: required and positive for built-in datasets".into(),
                        ))
                    }
                }
                let shape = match src {
                    DataSource::Toy { bits } => {
                        toy_pmf(bits).map_err(|e| Error::Config(format!("data.dataset: {e}")))?;
                        (1, 1, 2, bits)
                    }
                    _ => (8, 8, 3, 8),
                };
                if (m.height, m.width, m.channels, m.bits) != shape {
                    return Err(Error::Config(format!(
                        "model: shape {}x{}x{} at {} bits does not match the dataset's {}x{}x{} at {} bits",
                        m.height, m.width, m.channels, m.bits, shape.0, shape.1, shape.2, shape.3
                    )));
                }
            }
        }
        if self.output.dir.as_os_str().is_empty() {
            return Err(Error::Config("output.dir: must not be empty".into()));
        }
        Ok(())
    }

    fn backbone(&self, depth: usize, channels: usize) -> Result<BackboneSpec> {
        let m = &self.model;
        Ok(match m.backbone {
            BackboneKind::Densenet => {
                let variant = if m.groupnorm {
                    BlockVariant::Idfpp
                } else {
                    BlockVariant::Idf
                };
                BackboneSpec::DenseNet {
                    variant,
                    depth,
                    channels,
                }
            }
            BackboneKind::ToyDensenet | BackboneKind::Convnet if m.groupnorm => {
                return Err(Error::Config(
                    "model.groupnorm: only available with the densenet backbone".into(),
                ))
            }
            BackboneKind::ToyDensenet => BackboneSpec::DenseNet {
                variant: BlockVariant::Toy,
                depth,
                channels,
            },
            BackboneKind::Convnet => BackboneSpec::ConvNet { depth, channels },
        })
    }

    /// Model architecture for one training seed.
    pub fn model_config(&self, seed: u64) -> Result<ModelConfig> {
        let m = &self.model;
        let split = Fraction::new(m.split[0], m.split[1])
            .map_err(|e| Error::Config(format!("model.split: {e}")))?;
        Ok(ModelConfig {
            height: m.height,
            width: m.width,
            channels: m.channels,
            bits: m.bits,
            levels: m.levels,
            steps: m.flows_per_level,
            squeeze: m.squeeze,
            coupling_split: split,
            backbone: self.backbone(m.depth, m.hidden_channels)?,
            prior_backbone: self.backbone(m.prior_depth, m.prior_channels)?,
            permutation: m.permutation,
            invert_perms: m.invert_perms,
            rezero: m.rezero,
            mixture_components: m.mixture_components,
            mode: m.mode,
            rounding: m.rounding,
            seed,
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let o = &self.optimizer;
        TrainConfig {
            schedule: LrSchedule {
                base_lr: o.base_lr,
                decay: o.decay,
                warmup_epochs: o.warmup_epochs,
            },
            prior_lr: o.prior_lr,
            batch_size: o.batch_size,
            epochs: o.epochs,
            max_steps: o.max_steps,
            ema: self.model.ema,
            ema_decay: o.ema_decay,
            ema_warmup: o.ema_warmup,
            seed,
            checkpoint_every: o.checkpoint_every,
            record_wall_time: false,
        }
    }

    /// Training images and, with a nonzero fraction, validation images.
    pub fn load_data(&self) -> Result<(GridTensor, Option<GridTensor>)> {
        let d = &self.data;
        let all = match self.source()? {
            DataSource::Synth8x8 => synth8x8(d.train_images.unwrap_or(0), d.seed)?,
            DataSource::Toy { bits } => {
                let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
                toy_pmf(bits)?.sample(d.train_images.unwrap_or(0), &mut rng)?
            }
            DataSource::Directory(dir) => read_raw_dir(&dir)?,
        };
        let m = &self.model;
        let [_, h, w, c] = all.shape();
        if (h, w, c, all.bits()) != (m.height, m.width, m.channels, m.bits) {
            return Err(Error::Config(format!(
                "data: images are {h}x{w}x{c} at {} bits, model expects {}x{}x{} at {} bits",
                all.bits(),
                m.height,
                m.width,
                m.channels,
                m.bits
            )));
        }
        split_validation(&all, d.validation_fraction)
    }
}

fn span_note(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(s) => {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
