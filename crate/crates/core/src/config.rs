//! Run configuration: flat `key = value` text with a fixed key set.
//!
//! Unknown keys are rejected. `#` starts a comment; blank lines are ignored.
//! [`TrainConfig::to_text`] emits a canonical form (fixed key order), which
//! is what checkpoints embed, so save -> load -> save is byte-stable.

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{DirectionNorm, ModelDims, ModelOptions};
use crate::optim::AdaBeliefConfig;
use crate::world::{LayerWeights, PlantedSparsity, WorldConfig};

/// How per-sample training targets are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Toggle the annotated label of each attribute.
    Toggle,
    /// Uniform random +/-1 per sample and attribute.
    Random,
}

/// Structural ablation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationToggles {
    pub disable_direction_loss: bool,
    pub disable_sparsity_loss: bool,
    pub disable_cfc: bool,
    pub disable_input_pe: bool,
    pub disable_output_embedding: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub attribute_names: Vec<String>,
    pub image_dim: usize,
    pub identity_dim: usize,
    pub planted_sparsity: PlantedSparsity,
    pub layer_weights: LayerWeights,
    pub weights: LossWeights,
    pub optimizer: AdaBeliefConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub ablation: AblationToggles,
    pub direction_norm: DirectionNorm,
    pub target_mode: TargetMode,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: small enough to train in seconds, large enough
    /// to exercise every mechanism.
    fn default() -> Self {
        TrainConfig {
            dims: ModelDims {
                layers: 6,
                dim: 32,
                attrs: 4,
            },
            attribute_names: ["gender", "glasses", "age", "smile"]
                .map(String::from)
                .to_vec(),
            image_dim: 64,
            identity_dim: 16,
            planted_sparsity: PlantedSparsity::Sparse(6),
            layer_weights: LayerWeights::Decay,
            weights: LossWeights::default(),
            optimizer: AdaBeliefConfig::default(),
            batch_size: 8,
            iterations: 5000,
            seed: 7,
            ablation: AblationToggles::default(),
            direction_norm: DirectionNorm::L2,
            target_mode: TargetMode::Toggle,
            grad_clip_norm: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.layers == 0 || d.dim == 0 || d.attrs == 0 {
            return Err(Error::Config("dims must be positive".into()));
        }
        if d.dim % 2 != 0 {
            return Err(Error::Config(format!(
                "dim must be even for the positional encoding, got {}",
                d.dim
            )));
        }
        if self.attribute_names.len() != d.attrs {
            return Err(Error::Config(format!(
                "{} attribute names for {} attributes",
                self.attribute_names.len(),
                d.attrs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !self.grad_clip_norm.is_finite() || self.grad_clip_norm < 0.0 {
            return Err(Error::Config("grad_clip_norm must be >= 0".into()));
        }
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.world_config().validate()?;
        Ok(())
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            layers: self.dims.layers,
            dim: self.dims.dim,
            attrs: self.dims.attrs,
            image_dim: self.image_dim,
            identity_dim: self.identity_dim,
            layer_weights: self.layer_weights.clone(),
            planted_sparsity: self.planted_sparsity,
            seed: self.seed,
        }
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            dims: self.dims,
            direction_norm: self.direction_norm,
            disable_cfc: self.ablation.disable_cfc,
            disable_input_pe: self.ablation.disable_input_pe,
            disable_output_embedding: self.ablation.disable_output_embedding,
        }
    }

    /// Attribute index for a name from the ordered attribute list.
    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attribute_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            config.apply(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!(
                    "invalid boolean '{value}' for {key}"
                ))),
            }
        }

        match key {
            "layers" => self.dims.layers = parse(key, value)?,
            "dim" => self.dims.dim = parse(key, value)?,
            "attributes" => self.dims.attrs = parse(key, value)?,
            "attribute_names" => {
                self.attribute_names = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            "image_dim" => self.image_dim = parse(key, value)?,
            "identity_dim" => self.identity_dim = parse(key, value)?,
            "planted_sparsity" => {
                self.planted_sparsity = if value == "dense" {
                    PlantedSparsity::Dense
                } else {
                    PlantedSparsity::Sparse(parse(key, value)?)
                };
            }
            "layer_weights" => {
                self.layer_weights = match value {
                    "decay" => LayerWeights::Decay,
                    "uniform" => LayerWeights::Uniform,
                    list => {
                        let weights: Result<Vec<f64>> = list
                            .split(',')
                            .map(|s| parse::<f64>(key, s.trim()))
                            .collect();
                        LayerWeights::Custom(weights?)
                    }
                };
            }
            "lambda_class" => self.weights.class = parse(key, value)?,
            "lambda_neighborhood" => self.weights.neighborhood = parse(key, value)?,
            "lambda_sparsity" => self.weights.sparsity = parse(key, value)?,
            "lambda_direction" => self.weights.direction = parse(key, value)?,
            "lambda_identity" => self.weights.identity = parse(key, value)?,
            "learning_rate" => self.optimizer.learning_rate = parse(key, value)?,
            "beta1" => self.optimizer.beta1 = parse(key, value)?,
            "beta2" => self.optimizer.beta2 = parse(key, value)?,
            "epsilon" => self.optimizer.epsilon = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "direction_norm" => {
                self.direction_norm = match value {
                    "l2" => DirectionNorm::L2,
                    "l1" => DirectionNorm::L1,
                    _ => {
                        return Err(Error::Config(format!(
                            "direction_norm must be l2 or l1, got '{value}'"
                        )))
                    }
                };
            }
            "target_mode" => {
                self.target_mode = match value {
                    "toggle" => TargetMode::Toggle,
                    "random" => TargetMode::Random,
                    _ => {
                        return Err(Error::Config(format!(
                            "target_mode must be toggle or random, got '{value}'"
                        )))
                    }
                };
            }
            "grad_clip_norm" => self.grad_clip_norm = parse(key, value)?,
            "disable_direction_loss" => {
                self.ablation.disable_direction_loss = parse_bool(key, value)?
            }
            "disable_sparsity_loss" => {
                self.ablation.disable_sparsity_loss = parse_bool(key, value)?
            }
            "disable_cfc" => self.ablation.disable_cfc = parse_bool(key, value)?,
            "disable_input_pe" => self.ablation.disable_input_pe = parse_bool(key, value)?,
            "disable_output_embedding" => {
                self.ablation.disable_output_embedding = parse_bool(key, value)?
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order, locale-independent
    /// formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        push("layers", self.dims.layers.to_string());
        push("dim", self.dims.dim.to_string());
        push("attributes", self.dims.attrs.to_string());
        push("attribute_names", self.attribute_names.join(","));
        push("image_dim", self.image_dim.to_string());
        push("identity_dim", self.identity_dim.to_string());
        push(
            "planted_sparsity",
            match self.planted_sparsity {
                PlantedSparsity::Dense => "dense".to_string(),
                PlantedSparsity::Sparse(k) => k.to_string(),
            },
        );
        push(
            "layer_weights",
            match &self.layer_weights {
                LayerWeights::Decay => "decay".to_string(),
                LayerWeights::Uniform => "uniform".to_string(),
                LayerWeights::Custom(w) => w
                    .iter()
                    .map(|v| format!("{v:?}"))
                    .collect::<Vec<_>>()
                    .join(","),
            },
        );
        push("lambda_class", format!("{:?}", self.weights.class));
        push(
            "lambda_neighborhood",
            format!("{:?}", self.weights.neighborhood),
        );
        push("lambda_sparsity", format!("{:?}", self.weights.sparsity));
        push("lambda_direction", format!("{:?}", self.weights.direction));
        push("lambda_identity", format!("{:?}", self.weights.identity));
        push(
            "learning_rate",
            format!("{:?}", self.optimizer.learning_rate),
        );
        push("beta1", format!("{:?}", self.optimizer.beta1));
        push("beta2", format!("{:?}", self.optimizer.beta2));
        push("epsilon", format!("{:?}", self.optimizer.epsilon));
        push("batch_size", self.batch_size.to_string());
        push("iterations", self.iterations.to_string());
        push("seed", self.seed.to_string());
        push(
            "direction_norm",
            match self.direction_norm {
                DirectionNorm::L2 => "l2",
                DirectionNorm::L1 => "l1",
            }
            .to_string(),
        );
        push(
            "target_mode",
            match self.target_mode {
                TargetMode::Toggle => "toggle",
                TargetMode::Random => "random",
            }
            .to_string(),
        );
        push("grad_clip_norm", format!("{:?}", self.grad_clip_norm));
        push(
            "disable_direction_loss",
            self.ablation.disable_direction_loss.to_string(),
        );
        push(
            "disable_sparsity_loss",
            self.ablation.disable_sparsity_loss.to_string(),
        );
        push("disable_cfc", self.ablation.disable_cfc.to_string());
        push(
            "disable_input_pe",
            self.ablation.disable_input_pe.to_string(),
        );
        push(
            "disable_output_embedding",
            self.ablation.disable_output_embedding.to_string(),
        );
        out
    }
}
