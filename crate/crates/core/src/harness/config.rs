use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dml::{Bandwidth, DmlConfig, DmlKind};
use crate::nn::{Activation, LayerKind, LayerSpec, ModelSpec, NormMode};
use crate::synth::DatasetConfig;
use crate::triplet::CurriculumSchedule;

use super::dwa::DwaConfig;
use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Ts,
    Image,
    Combined,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Ts => "ts",
            TrainMode::Image => "image",
            TrainMode::Combined => "combined",
        })
    }
}

impl FromStr for TrainMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ts" => Ok(TrainMode::Ts),
            "image" => Ok(TrainMode::Image),
            "combined" => Ok(TrainMode::Combined),
            _ => Err(HarnessError::Config(format!(
                "unknown mode {s:?} (ts|image|combined)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    None,
    Contrastive,
    Triplet,
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pairing::None => "none",
            Pairing::Contrastive => "contrastive",
            Pairing::Triplet => "triplet",
        })
    }
}

impl FromStr for Pairing {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Pairing::None),
            "contrastive" => Ok(Pairing::Contrastive),
            "triplet" => Ok(Pairing::Triplet),
            _ => Err(HarnessError::Config(format!(
                "unknown pairing {s:?} (none|contrastive|triplet)"
            ))),
        }
    }
}

/// Layer sizes of the two encoders and the shared head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Filters of the time-series conv1d and of the image encoder's conv1d;
    /// equal so both feed the shared LSTM.
    pub conv_filters: usize,
    pub ts_kernel: usize,
    pub ts_pool: usize,
    pub image_filters: usize,
    pub image_kernel: usize,
    /// Max pooling of the normalized image before the conv2d (1 disables it).
    pub image_pool2d: usize,
    pub image_seq_kernel: usize,
    pub image_seq_pool: usize,
    pub dropout: f64,
    pub lstm_units: usize,
    pub dense_units: usize,
    /// Time bins of the flattened embedding; the image tap has exactly ten
    /// steps for 100x100 inputs.
    pub embed_bins: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            conv_filters: 50,
            ts_kernel: 4,
            ts_pool: 4,
            image_filters: 4,
            image_kernel: 3,
            image_pool2d: 4,
            image_seq_kernel: 4,
            image_seq_pool: 2,
            dropout: 0.2,
            lstm_units: 10,
            dense_units: 20,
            embed_bins: 10,
        }
    }
}

fn layer(name: &str, kind: LayerKind) -> LayerSpec {
    LayerSpec::new(name, kind)
}

/// Head layers shared by both models. Weights are shared; batch-norm running
/// statistics are kept per model under `stats`.
fn shared_head(arch: &ArchConfig, classes: usize, stats: &str) -> Vec<LayerSpec> {
    vec![
        layer(
            "lstm",
            LayerKind::Lstm {
                units: arch.lstm_units,
            },
        ),
        layer(
            "head_dense",
            LayerKind::Dense {
                units: arch.dense_units,
            },
        ),
        layer("head_bn", LayerKind::Batchnorm).with_stats(format!("{stats}.head_bn")),
        layer("head_out", LayerKind::Dense { units: classes }),
        layer(
            "softmax",
            LayerKind::Activation {
                function: Activation::Softmax,
            },
        ),
    ]
}

impl ArchConfig {
    /// Time-series classifier; the embedding taps the encoder's dropout.
    pub fn ts_model(&self, timesteps: usize, classes: usize, norm: NormMode) -> ModelSpec {
        let mut layers = vec![
            layer(
                "ts_conv",
                LayerKind::Conv1d {
                    filters: self.conv_filters,
                    kernel: self.ts_kernel,
                },
            ),
            layer("ts_pool", LayerKind::Maxpool1d { pool: self.ts_pool }),
            layer("ts_bn", LayerKind::Batchnorm),
            layer("ts_dropout", LayerKind::Dropout { rate: self.dropout }),
        ];
        let tap = layers.len() - 1;
        layers.extend(shared_head(self, classes, "ts"));
        ModelSpec {
            input_shape: vec![timesteps, 1],
            layers,
            tap,
            embed_bins: self.embed_bins,
            flatten_embedding: true,
            norm,
        }
    }

    /// Image classifier sharing the head (same layer names) with the
    /// time-series model.
    pub fn image_model(&self, size: usize, classes: usize, norm: NormMode) -> ModelSpec {
        let mut layers = vec![layer("img_ln", LayerKind::Layernorm)];
        if self.image_pool2d > 1 {
            layers.push(layer(
                "img_pool2d",
                LayerKind::Maxpool2d {
                    pool: self.image_pool2d,
                },
            ));
        }
        layers.extend([
            layer(
                "img_conv2d",
                LayerKind::Conv2d {
                    filters: self.image_filters,
                    kernel: self.image_kernel,
                },
            ),
            layer("img_bn2d", LayerKind::Batchnorm),
            layer(
                "img_elu",
                LayerKind::Activation {
                    function: Activation::Elu,
                },
            ),
        ]);
        layers.extend([
            layer("img_rows", LayerKind::RowsToSequence),
            layer(
                "img_conv1d",
                LayerKind::Conv1d {
                    filters: self.conv_filters,
                    kernel: self.image_seq_kernel,
                },
            ),
            layer(
                "img_pool1d",
                LayerKind::Maxpool1d {
                    pool: self.image_seq_pool,
                },
            ),
            layer("img_bn", LayerKind::Batchnorm),
            layer("img_dropout", LayerKind::Dropout { rate: self.dropout }),
        ]);
        let tap = layers.len() - 1;
        layers.extend(shared_head(self, classes, "img"));
        ModelSpec {
            input_shape: vec![size, size, 1],
            layers,
            tap,
            embed_bins: self.embed_bins,
            flatten_embedding: true,
            norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: TrainMode,
    pub pairing: Pairing,
    pub dml: DmlKind,
    pub dml_eps: f64,
    pub bandwidth: Bandwidth,
    pub schedule: CurriculumSchedule,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub norm: NormMode,
    pub dwa: DwaConfig,
    pub arch: ArchConfig,
    /// Contrastive margin; triplet margins come from the schedule.
    pub contrastive_margin: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Ts,
            pairing: Pairing::Triplet,
            dml: DmlKind::Cs,
            dml_eps: 1e-12,
            bandwidth: Bandwidth::MedianHeuristic,
            schedule: CurriculumSchedule::single_label(),
            batch_size: 100,
            max_epochs: 100,
            lr: 1e-4,
            seed: 0,
            norm: NormMode::default(),
            dwa: DwaConfig::default(),
            arch: ArchConfig::default(),
            contrastive_margin: 0.5,
        }
    }
}

impl ExperimentConfig {
    /// Sets the epoch budget of both the trainer and the curriculum.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.max_epochs = epochs;
        self.schedule.max_epochs = epochs;
        self
    }

    pub fn dml_config(&self) -> DmlConfig {
        DmlConfig {
            kind: self.dml,
            eps: self.dml_eps,
            bandwidth: self.bandwidth,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.schedule.max_epochs != self.max_epochs {
            return bad(format!(
                "schedule spans {} epochs but training runs {}",
                self.schedule.max_epochs, self.max_epochs
            ));
        }
        self.schedule
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.dml_config()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.arch.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.arch.dropout));
        }
        if !(self.contrastive_margin >= 0.0) {
            return bad("contrastive margin must be nonnegative".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn models(&self, data: &DatasetConfig) -> (ModelSpec, ModelSpec) {
        (
            self.arch.ts_model(data.timesteps, data.classes, self.norm),
            self.arch.image_model(data.image_size, data.classes, self.norm),
        )
    }
}
