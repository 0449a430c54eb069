//! Flat `key = value` configuration documents.
//!
//! One document carries the network, trainer, sampler and data sections; the
//! same encoding (with a `config.` prefix) embeds the network configuration
//! in checkpoint headers. Every key is optional and falls back to the
//! defaults; unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::layers::{CtdLayerConfig, DenseBlockConfig, FcLayerConfig, HdLayerConfig};
use crate::net::{Conv1Config, NetworkConfig};
use crate::patch::SamplerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
}

/// Ordered key-value document.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigDoc {
    pairs: Vec<(String, String)>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: line.to_string(),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !seen.insert(key.clone()) {
                return Err(ConfigError::DuplicateKey(key));
            }
            pairs.push((key, value));
        }
        Ok(ConfigDoc { pairs })
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.pairs.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn parse_scalar<T: std::str::FromStr>(
    doc: &ConfigDoc,
    key: &str,
    default: T,
) -> Result<T, ConfigError> {
    match doc.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            reason: format!("cannot parse `{v}`"),
        }),
    }
}

fn parse_list(doc: &ConfigDoc, key: &str, default: Vec<usize>) -> Result<Vec<usize>, ConfigError> {
    match doc.get(key) {
        None => Ok(default),
        Some(v) if v.trim().is_empty() => Ok(Vec::new()),
        Some(v) => v
            .split(',')
            .map(|p| {
                p.trim().parse().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    reason: format!("cannot parse `{p}` as integer"),
                })
            })
            .collect(),
    }
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

const NET_KEYS: &[&str] = &[
    "net.input_edge",
    "net.output_edge",
    "net.classes",
    "net.coord_channels",
    "net.conv1.kernel",
    "net.conv1.padding",
    "net.conv1.stride",
    "net.conv1.channels",
    "net.fe.blocks",
    "net.fe.layers",
    "net.fe.growth",
    "net.fe.kernel",
    "net.fe.rates",
    "net.td.kernels",
    "net.td.strides",
    "net.td.paddings",
    "net.td.channel_increase",
    "net.taps",
    "net.fc.layers",
    "net.fc.growth",
];

const TRAIN_KEYS: &[&str] = &[
    "train.lr",
    "train.max_epochs",
    "train.power",
    "train.stop_epoch",
    "train.patience",
    "train.batch",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "train.seed",
    "train.weight_decay",
    "train.grad_clip",
    "train.val_interval",
];

const SAMPLER_KEYS: &[&str] = &["sampler.cap", "sampler.doubled", "sampler.seed"];

const DATA_KEYS: &[&str] = &[
    "data.dir",
    "data.subjects",
    "data.subjects_file",
    "data.remap",
    "data.split.train",
    "data.split.val",
    "data.split.test",
    "coords.downsample",
];

/// Rejects keys outside the full document vocabulary.
pub fn check_keys(doc: &ConfigDoc) -> Result<(), ConfigError> {
    for (k, _) in doc.pairs() {
        let known = NET_KEYS.contains(&k.as_str())
            || TRAIN_KEYS.contains(&k.as_str())
            || SAMPLER_KEYS.contains(&k.as_str())
            || DATA_KEYS.contains(&k.as_str());
        if !known {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
    }
    Ok(())
}

/// Reads a [`NetworkConfig`] from a document, treating every missing key as
/// its default. `prefix` is empty for config files and `"config."` inside
/// checkpoint headers.
pub fn network_config_from_doc(
    doc: &ConfigDoc,
    prefix: &str,
) -> Result<NetworkConfig, ConfigError> {
    let def = NetworkConfig::default();
    let k = |s: &str| format!("{prefix}{s}");
    let blocks = parse_scalar(doc, &k("net.fe.blocks"), def.fe_blocks.len())?;
    let fe_layers = parse_scalar(doc, &k("net.fe.layers"), 4usize)?;
    let fe_growth = parse_scalar(doc, &k("net.fe.growth"), 12usize)?;
    let fe_kernel = parse_scalar(doc, &k("net.fe.kernel"), 3usize)?;
    let rates = parse_list(doc, &k("net.fe.rates"), vec![1, 2, 3])?;
    let hd = HdLayerConfig {
        growth: fe_growth,
        kernel: fe_kernel,
        rates,
    };
    let fe_block = DenseBlockConfig::hd(hd, fe_layers);

    let td_count = blocks.saturating_sub(1);
    let def_strides: Vec<usize> = (0..td_count).map(|i| if i == 0 { 2 } else { 1 }).collect();
    let kernels = parse_list(doc, &k("net.td.kernels"), vec![3; td_count])?;
    let strides = parse_list(doc, &k("net.td.strides"), def_strides)?;
    let paddings = parse_list(doc, &k("net.td.paddings"), vec![0; td_count])?;
    for (name, list) in [
        ("net.td.kernels", &kernels),
        ("net.td.strides", &strides),
        ("net.td.paddings", &paddings),
    ] {
        if list.len() != td_count {
            return Err(ConfigError::BadValue {
                key: k(name),
                reason: format!("expected {td_count} entries, got {}", list.len()),
            });
        }
    }
    let channel_increase = parse_scalar(doc, &k("net.td.channel_increase"), 12usize)?;
    let td_layers = (0..td_count)
        .map(|i| CtdLayerConfig {
            kernel: kernels[i],
            stride: strides[i],
            padding: paddings[i],
            channel_increase,
        })
        .collect();

    // taps are written 1-based (FE1 = 1) to match stage names
    let def_taps: Vec<usize> = def.multiscale_taps.iter().map(|t| t + 1).collect();
    let taps_1based = parse_list(doc, &k("net.taps"), def_taps)?;
    let mut taps = Vec::with_capacity(taps_1based.len());
    for t in taps_1based {
        if t == 0 || t > blocks {
            return Err(ConfigError::BadValue {
                key: k("net.taps"),
                reason: format!("tap {t} outside 1..={blocks}"),
            });
        }
        taps.push(t - 1);
    }

    let fc_layers = parse_scalar(doc, &k("net.fc.layers"), 2usize)?;
    let fc_growth = parse_scalar(doc, &k("net.fc.growth"), 25usize)?;

    Ok(NetworkConfig {
        input_edge: parse_scalar(doc, &k("net.input_edge"), def.input_edge)?,
        output_edge: parse_scalar(doc, &k("net.output_edge"), def.output_edge)?,
        classes: parse_scalar(doc, &k("net.classes"), def.classes)?,
        coord_channels: parse_scalar(doc, &k("net.coord_channels"), def.coord_channels)?,
        conv1: Conv1Config {
            kernel: parse_scalar(doc, &k("net.conv1.kernel"), def.conv1.kernel)?,
            padding: parse_scalar(doc, &k("net.conv1.padding"), def.conv1.padding)?,
            stride: parse_scalar(doc, &k("net.conv1.stride"), def.conv1.stride)?,
            channels: parse_scalar(doc, &k("net.conv1.channels"), def.conv1.channels)?,
        },
        fe_blocks: vec![fe_block; blocks],
        td_layers,
        multiscale_taps: taps,
        fc_block: DenseBlockConfig::fc(FcLayerConfig { growth: fc_growth }, fc_layers),
    })
}

/// Canonical document encoding of a [`NetworkConfig`]. Uses the uniform-block
/// vocabulary, so all FE blocks must share one configuration.
pub fn network_config_to_doc(cfg: &NetworkConfig, prefix: &str) -> ConfigDoc {
    let mut doc = ConfigDoc::default();
    let k = |s: &str| format!("{prefix}{s}");
    doc.push(k("net.input_edge"), cfg.input_edge);
    doc.push(k("net.output_edge"), cfg.output_edge);
    doc.push(k("net.classes"), cfg.classes);
    doc.push(k("net.coord_channels"), cfg.coord_channels);
    doc.push(k("net.conv1.kernel"), cfg.conv1.kernel);
    doc.push(k("net.conv1.padding"), cfg.conv1.padding);
    doc.push(k("net.conv1.stride"), cfg.conv1.stride);
    doc.push(k("net.conv1.channels"), cfg.conv1.channels);
    doc.push(k("net.fe.blocks"), cfg.fe_blocks.len());
    let hd = cfg
        .fe_blocks
        .first()
        .and_then(|b| b.hd.clone())
        .unwrap_or_default();
    doc.push(
        k("net.fe.layers"),
        cfg.fe_blocks.first().map(|b| b.layers).unwrap_or(4),
    );
    doc.push(k("net.fe.growth"), hd.growth);
    doc.push(k("net.fe.kernel"), hd.kernel);
    doc.push(k("net.fe.rates"), join(&hd.rates));
    doc.push(
        k("net.td.kernels"),
        join(&cfg.td_layers.iter().map(|t| t.kernel).collect::<Vec<_>>()),
    );
    doc.push(
        k("net.td.strides"),
        join(&cfg.td_layers.iter().map(|t| t.stride).collect::<Vec<_>>()),
    );
    doc.push(
        k("net.td.paddings"),
        join(&cfg.td_layers.iter().map(|t| t.padding).collect::<Vec<_>>()),
    );
    doc.push(
        k("net.td.channel_increase"),
        cfg.td_layers
            .first()
            .map(|t| t.channel_increase)
            .unwrap_or(12),
    );
    doc.push(
        k("net.taps"),
        join(
            &cfg.multiscale_taps
                .iter()
                .map(|t| t + 1)
                .collect::<Vec<_>>(),
        ),
    );
    doc.push(k("net.fc.layers"), cfg.fc_block.layers);
    doc.push(k("net.fc.growth"), cfg.fc_block.growth());
    doc
}

pub fn train_config_from_doc(doc: &ConfigDoc) -> Result<TrainConfig, ConfigError> {
    let def = TrainConfig::default();
    let patience = parse_scalar(doc, "train.patience", 0usize)?;
    Ok(TrainConfig {
        lr: parse_scalar(doc, "train.lr", def.lr)?,
        max_epochs: parse_scalar(doc, "train.max_epochs", def.max_epochs)?,
        power: parse_scalar(doc, "train.power", def.power)?,
        stop_epoch: parse_scalar(doc, "train.stop_epoch", def.stop_epoch)?,
        patience: if patience == 0 { None } else { Some(patience) },
        batch: parse_scalar(doc, "train.batch", def.batch)?,
        beta1: parse_scalar(doc, "train.beta1", def.beta1)?,
        beta2: parse_scalar(doc, "train.beta2", def.beta2)?,
        epsilon: parse_scalar(doc, "train.epsilon", def.epsilon)?,
        seed: parse_scalar(doc, "train.seed", def.seed)?,
        weight_decay: parse_scalar(doc, "train.weight_decay", def.weight_decay)?,
        grad_clip: parse_scalar(doc, "train.grad_clip", def.grad_clip)?,
        val_interval: parse_scalar(doc, "train.val_interval", def.val_interval)?,
    })
}

pub fn sampler_config_from_doc(doc: &ConfigDoc) -> Result<SamplerConfig, ConfigError> {
    let def = SamplerConfig::default();
    let doubled = parse_list(
        doc,
        "sampler.doubled",
        def.doubled.iter().map(|&c| c as usize).collect(),
    )?;
    Ok(SamplerConfig {
        cap: parse_scalar(doc, "sampler.cap", def.cap)?,
        doubled: doubled.into_iter().map(|c| c as u16).collect(),
        seed: parse_scalar(doc, "sampler.seed", def.seed)?,
    })
}

/// Where training data lives and how subjects are split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub subjects: Vec<String>,
    pub subjects_file: Option<PathBuf>,
    pub remap: Option<PathBuf>,
    pub split_train: Vec<String>,
    pub split_val: Vec<String>,
    pub split_test: Vec<String>,
    pub coords_downsample: usize,
}

fn parse_names(doc: &ConfigDoc, key: &str) -> Vec<String> {
    doc.get(key)
        .map(|v| {
            v.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default()
}

pub fn data_config_from_doc(doc: &ConfigDoc) -> Result<DataConfig, ConfigError> {
    Ok(DataConfig {
        dir: PathBuf::from(doc.get("data.dir").unwrap_or(".")),
        subjects: parse_names(doc, "data.subjects"),
        subjects_file: doc.get("data.subjects_file").map(PathBuf::from),
        remap: doc.get("data.remap").map(PathBuf::from),
        split_train: parse_names(doc, "data.split.train"),
        split_val: parse_names(doc, "data.split.val"),
        split_test: parse_names(doc, "data.split.test"),
        coords_downsample: parse_scalar(doc, "coords.downsample", 1usize)?,
    })
}
