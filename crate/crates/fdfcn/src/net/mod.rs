//! Network assembly: configuration, shape audit, parameter initialization,
//! whole-network forward/backward, parameter counting and checkpoints.

use std::sync::Arc;

use thiserror::Error;

use crate::layers::{
    validate_dilation_group, BlockCache, BnUnit, ConvLayer, ConvUnit, CtdLayerConfig, DenseBlock,
    DenseBlockConfig, DilationCheck, FcLayerConfig, HdLayer, HdLayerConfig, PreActivation,
    StatUpdates, UnitCache, UnitKind, UnitLayer,
};
use crate::tensor::{
    center_crop, center_crop_backward, concat_channels, concat_channels_backward, conv_out_size,
    elementwise_sum, ConvSpec, Mode, Scalar, Tensor5, TensorError,
};

pub mod checkpoint;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use params::{Gradients, Init, ParamLayout, ParamShape, Parameters};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape audit failed at {stage}: {reason}")]
    AuditFailure {
        stage: String,
        reason: String,
        final_edge: Option<usize>,
    },
}

/// First feature-extractor convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv1Config {
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
    pub channels: usize,
}

impl Default for Conv1Config {
    fn default() -> Self {
        Conv1Config {
            kernel: 7,
            padding: 3,
            stride: 1,
            channels: 24,
        }
    }
}

/// Complete hyperparameter record for assembling the network.
///
/// The default reproduces the reference stage table
/// 27³/24 → 48 → 13³/60 → 48 → 11³/60 → 48 → 9³/60 → 48 → 150 → 200 → 12.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_edge: usize,
    pub output_edge: usize,
    pub classes: usize,
    pub coord_channels: usize,
    pub conv1: Conv1Config,
    pub fe_blocks: Vec<DenseBlockConfig>,
    pub td_layers: Vec<CtdLayerConfig>,
    /// 0-based indices of the FE blocks whose (center-cropped) outputs feed
    /// the fusion concatenation, in order.
    pub multiscale_taps: Vec<usize>,
    pub fc_block: DenseBlockConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let fe = DenseBlockConfig::hd(HdLayerConfig::default(), 4);
        NetworkConfig {
            input_edge: 27,
            output_edge: 9,
            classes: 12,
            coord_channels: 6,
            conv1: Conv1Config::default(),
            fe_blocks: vec![fe.clone(), fe.clone(), fe.clone(), fe],
            td_layers: vec![
                CtdLayerConfig {
                    kernel: 3,
                    stride: 2,
                    padding: 0,
                    channel_increase: 12,
                },
                CtdLayerConfig {
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                    channel_increase: 12,
                },
                CtdLayerConfig {
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                    channel_increase: 12,
                },
            ],
            multiscale_taps: vec![1, 2, 3],
            fc_block: DenseBlockConfig::fc(FcLayerConfig::default(), 2),
        }
    }
}

/// One row of the shape audit: spatial edge and channel count after a stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditStage {
    pub name: String,
    pub edge: usize,
    pub channels: usize,
}

fn audit_err(stage: &str, reason: impl Into<String>) -> NetError {
    NetError::AuditFailure {
        stage: stage.into(),
        reason: reason.into(),
        final_edge: None,
    }
}

/// Walks the configured topology and returns the per-stage
/// `(spatial edge, channels)` table, failing on the first inconsistency.
pub fn shape_audit(cfg: &NetworkConfig) -> Result<Vec<AuditStage>, NetError> {
    if cfg.fe_blocks.is_empty() {
        return Err(audit_err("FE1", "no feature-extraction blocks configured"));
    }
    if cfg.td_layers.len() + 1 != cfg.fe_blocks.len() {
        return Err(audit_err(
            "TD1",
            format!(
                "{} transition layers cannot interleave {} blocks",
                cfg.td_layers.len(),
                cfg.fe_blocks.len()
            ),
        ));
    }
    if cfg.multiscale_taps.is_empty() {
        return Err(audit_err("fusion", "no multiscale taps configured"));
    }
    if !cfg.multiscale_taps.windows(2).all(|w| w[0] < w[1]) {
        return Err(audit_err(
            "fusion",
            "multiscale taps must be strictly increasing",
        ));
    }
    if *cfg.multiscale_taps.last().unwrap() >= cfg.fe_blocks.len() {
        return Err(audit_err("fusion", "multiscale tap index out of range"));
    }
    if cfg.classes < 2 {
        return Err(audit_err("classifier", "need at least 2 classes"));
    }

    let mut table = Vec::new();
    let conv1_spec = ConvSpec {
        kernel: cfg.conv1.kernel,
        stride: cfg.conv1.stride,
        padding: cfg.conv1.padding,
        rate: 1,
        c_in: 1,
        c_out: cfg.conv1.channels,
    };
    let mut edge = conv_out_size(cfg.input_edge, &conv1_spec)
        .map_err(|e| audit_err("ConvI", e.to_string()))?;
    let mut channels = cfg.conv1.channels;
    table.push(AuditStage {
        name: "ConvI".into(),
        edge,
        channels,
    });

    let mut fe_edges = Vec::with_capacity(cfg.fe_blocks.len());
    for (i, block) in cfg.fe_blocks.iter().enumerate() {
        let stage = format!("FE{}", i + 1);
        let hd = block
            .hd
            .as_ref()
            .ok_or_else(|| audit_err(&stage, "feature-extraction block must use HD layers"))?;
        if hd.kernel % 2 == 0 {
            return Err(audit_err(
                &stage,
                "HD kernel edge must be odd to preserve size",
            ));
        }
        match validate_dilation_group(&hd.rates, hd.kernel)
            .map_err(|e| audit_err(&stage, e.to_string()))?
        {
            DilationCheck::Valid => {}
            DilationCheck::CommonFactor { i, j, factor } => {
                return Err(audit_err(
                    &stage,
                    format!("dilation rates at positions {i},{j} share factor {factor}"),
                ))
            }
            DilationCheck::CoverageGap { m2, kernel } => {
                return Err(audit_err(
                    &stage,
                    format!("coverage bound M_2={m2} exceeds kernel {kernel}"),
                ))
            }
        }
        // every branch must preserve the spatial edge
        for (b, &rate) in hd.rates.iter().enumerate() {
            let spec = ConvSpec {
                kernel: hd.kernel,
                stride: 1,
                padding: hd.branch_padding(b),
                rate,
                c_in: 1,
                c_out: 1,
            };
            let out = conv_out_size(edge, &spec).map_err(|e| audit_err(&stage, e.to_string()))?;
            if out != edge {
                return Err(audit_err(
                    &stage,
                    format!("branch with rate {rate} maps edge {edge} to {out}"),
                ));
            }
        }
        channels = block.out_channels(channels);
        fe_edges.push(edge);
        table.push(AuditStage {
            name: stage,
            edge,
            channels,
        });

        if i < cfg.td_layers.len() {
            let td = &cfg.td_layers[i];
            let stage = format!("TD{}", i + 1);
            let spec = ConvSpec {
                kernel: td.kernel,
                stride: td.stride,
                padding: td.padding,
                rate: 1,
                c_in: 1,
                c_out: 1,
            };
            edge = conv_out_size(edge, &spec).map_err(|e| audit_err(&stage, e.to_string()))?;
            channels += td.channel_increase;
            table.push(AuditStage {
                name: stage,
                edge,
                channels,
            });
        }
    }

    let final_edge = *fe_edges.last().unwrap();
    if final_edge != cfg.output_edge {
        return Err(NetError::AuditFailure {
            stage: format!("FE{}", cfg.fe_blocks.len()),
            reason: format!(
                "final edge {final_edge} differs from configured output edge {}",
                cfg.output_edge
            ),
            final_edge: Some(final_edge),
        });
    }

    let mut fused_channels = 0;
    for &tap in &cfg.multiscale_taps {
        let tap_edge = fe_edges[tap];
        if tap_edge < cfg.output_edge {
            return Err(audit_err(
                "fusion",
                format!(
                    "tap FE{} edge {tap_edge} is below output edge {}",
                    tap + 1,
                    cfg.output_edge
                ),
            ));
        }
        if !(tap_edge - cfg.output_edge).is_multiple_of(2) {
            return Err(audit_err(
                "fusion",
                format!(
                    "tap FE{} edge {tap_edge} has no centered crop to {}",
                    tap + 1,
                    cfg.output_edge
                ),
            ));
        }
        let block = &cfg.fe_blocks[tap];
        let c_in_of_tap = tap_in_channels(cfg, tap);
        fused_channels += block.out_channels(c_in_of_tap);
    }
    fused_channels += cfg.coord_channels;
    table.push(AuditStage {
        name: "fusion".into(),
        edge: cfg.output_edge,
        channels: fused_channels,
    });

    if cfg.fc_block.kind() != UnitKind::Fc {
        return Err(audit_err(
            "FC",
            "fully connected block must use pointwise layers",
        ));
    }
    let fc_channels = cfg.fc_block.out_channels(fused_channels);
    table.push(AuditStage {
        name: "FC".into(),
        edge: cfg.output_edge,
        channels: fc_channels,
    });
    table.push(AuditStage {
        name: "classifier".into(),
        edge: cfg.output_edge,
        channels: cfg.classes,
    });
    Ok(table)
}

/// Input channel count of FE block `i` under `cfg`.
fn tap_in_channels(cfg: &NetworkConfig, i: usize) -> usize {
    let mut channels = cfg.conv1.channels;
    for b in 0..i {
        channels = cfg.fe_blocks[b].out_channels(channels);
        channels += cfg.td_layers[b].channel_increase;
    }
    channels
}

/// Exact learnable-scalar count of one dense block fed `c_in` channels,
/// derived from the configuration alone.
pub fn dense_block_param_count(block: &DenseBlockConfig, c_in: usize) -> usize {
    let mut total = 0;
    for j in 0..block.layers {
        let cj = block.layer_in_channels(c_in, j);
        total += 3 * cj; // BN scale/shift + PReLU slopes
        match (&block.hd, &block.fc) {
            (Some(hd), _) => {
                let k3 = hd.kernel * hd.kernel * hd.kernel;
                total += hd.rates.len() * (hd.growth * cj * k3 + hd.growth);
            }
            (_, Some(fc)) => {
                total += fc.growth * cj + fc.growth;
            }
            _ => {}
        }
    }
    total
}

/// Per-stage learnable parameter counts plus the total.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub stages: Vec<(String, usize)>,
}

/// Counts learnable scalars per stage from the configuration arithmetic.
/// Running statistics are excluded.
pub fn param_count(cfg: &NetworkConfig) -> ParamCount {
    let mut stages = Vec::new();
    let mut total = 0;
    let mut push = |name: String, count: usize, total: &mut usize| {
        *total += count;
        stages.push((name, count));
    };

    if cfg.fe_blocks.is_empty() {
        return ParamCount { total: 0, stages };
    }
    let k3 = cfg.conv1.kernel.pow(3);
    push(
        "ConvI".into(),
        cfg.conv1.channels * k3 + cfg.conv1.channels,
        &mut total,
    );

    let mut channels = cfg.conv1.channels;
    for (i, block) in cfg.fe_blocks.iter().enumerate() {
        push(
            format!("FE{}", i + 1),
            dense_block_param_count(block, channels),
            &mut total,
        );
        channels = block.out_channels(channels);
        if i < cfg.td_layers.len() {
            let td = &cfg.td_layers[i];
            let c_out = channels + td.channel_increase;
            let count = 3 * channels + c_out * channels * td.kernel.pow(3) + c_out;
            push(format!("TD{}", i + 1), count, &mut total);
            channels = c_out;
        }
    }

    let fused = cfg
        .multiscale_taps
        .iter()
        .map(|&t| cfg.fe_blocks[t].out_channels(tap_in_channels(cfg, t)))
        .sum::<usize>()
        + cfg.coord_channels;
    push(
        "FC".into(),
        dense_block_param_count(&cfg.fc_block, fused),
        &mut total,
    );
    let fc_out = cfg.fc_block.out_channels(fused);
    push(
        "classifier".into(),
        cfg.classes * fc_out + cfg.classes,
        &mut total,
    );
    ParamCount { total, stages }
}

/// A built network: layer topology bound to a parameter layout.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    layout: Arc<ParamLayout>,
    conv1: ConvUnit,
    fe: Vec<DenseBlock>,
    td: Vec<ConvLayer>,
    fc: DenseBlock,
    classifier: ConvUnit,
}

struct LayoutBuilder {
    layout: ParamLayout,
}

impl LayoutBuilder {
    fn pre_activation(&mut self, prefix: &str, channels: usize) -> PreActivation {
        let bn = BnUnit {
            channels,
            gamma: self.layout.push(
                format!("{prefix}.bn.gamma"),
                ParamShape::Vector(channels),
                true,
                Init::Ones,
            ),
            beta: self.layout.push(
                format!("{prefix}.bn.beta"),
                ParamShape::Vector(channels),
                true,
                Init::Zeros,
            ),
            running_mean: self.layout.push(
                format!("{prefix}.bn.running_mean"),
                ParamShape::Vector(channels),
                false,
                Init::Zeros,
            ),
            running_var: self.layout.push(
                format!("{prefix}.bn.running_var"),
                ParamShape::Vector(channels),
                false,
                Init::Ones,
            ),
        };
        let slopes = self.layout.push(
            format!("{prefix}.prelu.slopes"),
            ParamShape::Vector(channels),
            true,
            Init::Const(0.25),
        );
        PreActivation { bn, slopes }
    }

    fn conv(&mut self, prefix: &str, spec: ConvSpec) -> ConvUnit {
        let k = spec.kernel;
        let weight = self.layout.push(
            format!("{prefix}.weight"),
            ParamShape::Tensor([spec.c_out, spec.c_in, k, k, k]),
            true,
            Init::HeNormal {
                fan_in: spec.c_in * k * k * k,
            },
        );
        let bias = self.layout.push(
            format!("{prefix}.bias"),
            ParamShape::Vector(spec.c_out),
            true,
            Init::Zeros,
        );
        ConvUnit { spec, weight, bias }
    }

    fn dense_block(&mut self, prefix: &str, cfg: &DenseBlockConfig, c_in: usize) -> DenseBlock {
        let mut layers = Vec::with_capacity(cfg.layers);
        for j in 0..cfg.layers {
            let cj = cfg.layer_in_channels(c_in, j);
            let lp = format!("{prefix}.l{}", j + 1);
            let pre = self.pre_activation(&lp, cj);
            match (&cfg.hd, &cfg.fc) {
                (Some(hd), _) => {
                    let branches = hd
                        .rates
                        .iter()
                        .enumerate()
                        .map(|(b, &rate)| {
                            self.conv(
                                &format!("{lp}.b{}", b + 1),
                                ConvSpec {
                                    kernel: hd.kernel,
                                    stride: 1,
                                    padding: hd.branch_padding(b),
                                    rate,
                                    c_in: cj,
                                    c_out: hd.growth,
                                },
                            )
                        })
                        .collect();
                    layers.push(UnitLayer::Hd(HdLayer { pre, branches }));
                }
                (_, Some(fc)) => {
                    let conv = self.conv(
                        &format!("{lp}.conv"),
                        ConvSpec {
                            kernel: FcLayerConfig::KERNEL,
                            stride: 1,
                            padding: FcLayerConfig::PADDING,
                            rate: 1,
                            c_in: cj,
                            c_out: fc.growth,
                        },
                    );
                    layers.push(UnitLayer::Conv(ConvLayer { pre, conv }));
                }
                _ => unreachable!("dense block with no unit configuration"),
            }
        }
        DenseBlock {
            include_input: cfg.include_input,
            layers,
        }
    }
}

/// Builds the network and an initialized parameter store. Fails when the
/// shape audit fails. Two builds with equal seeds yield bitwise-equal
/// parameters.
pub fn build<T: Scalar>(
    cfg: &NetworkConfig,
    seed: u64,
) -> Result<(Network, Parameters<T>), NetError> {
    let network = Network::assemble(cfg)?;
    let params = Parameters::init(network.layout.clone(), seed);
    Ok((network, params))
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardPass<T> {
    pub input: Tensor5<T>,
    pub coords: Tensor5<T>,
    pub conv1_out: Tensor5<T>,
    pub fe_caches: Vec<BlockCache<T>>,
    pub fe_outs: Vec<Tensor5<T>>,
    pub td_caches: Vec<UnitCache<T>>,
    pub td_outs: Vec<Tensor5<T>>,
    pub fused: Tensor5<T>,
    pub fc_cache: BlockCache<T>,
    pub fc_out: Tensor5<T>,
    pub logits: Tensor5<T>,
    pub stat_updates: StatUpdates<T>,
}

impl Network {
    fn assemble(cfg: &NetworkConfig) -> Result<Network, NetError> {
        shape_audit(cfg)?;
        let mut b = LayoutBuilder {
            layout: ParamLayout::default(),
        };
        let conv1 = b.conv(
            "conv1",
            ConvSpec {
                kernel: cfg.conv1.kernel,
                stride: cfg.conv1.stride,
                padding: cfg.conv1.padding,
                rate: 1,
                c_in: 1,
                c_out: cfg.conv1.channels,
            },
        );
        let mut channels = cfg.conv1.channels;
        let mut fe = Vec::with_capacity(cfg.fe_blocks.len());
        let mut td = Vec::with_capacity(cfg.td_layers.len());
        for (i, block) in cfg.fe_blocks.iter().enumerate() {
            fe.push(b.dense_block(&format!("fe{}", i + 1), block, channels));
            channels = block.out_channels(channels);
            if i < cfg.td_layers.len() {
                let tdc = &cfg.td_layers[i];
                let prefix = format!("td{}", i + 1);
                let pre = b.pre_activation(&prefix, channels);
                let conv = b.conv(
                    &format!("{prefix}.conv"),
                    ConvSpec {
                        kernel: tdc.kernel,
                        stride: tdc.stride,
                        padding: tdc.padding,
                        rate: 1,
                        c_in: channels,
                        c_out: channels + tdc.channel_increase,
                    },
                );
                td.push(ConvLayer { pre, conv });
                channels += tdc.channel_increase;
            }
        }
        let fused = cfg
            .multiscale_taps
            .iter()
            .map(|&t| cfg.fe_blocks[t].out_channels(tap_in_channels(cfg, t)))
            .sum::<usize>()
            + cfg.coord_channels;
        let fc = b.dense_block("fc", &cfg.fc_block, fused);
        let fc_out = cfg.fc_block.out_channels(fused);
        let classifier = b.conv(
            "classifier",
            ConvSpec {
                kernel: 1,
                stride: 1,
                padding: 0,
                rate: 1,
                c_in: fc_out,
                c_out: cfg.classes,
            },
        );
        Ok(Network {
            config: cfg.clone(),
            layout: Arc::new(b.layout),
            conv1,
            fe,
            td,
            fc,
            classifier,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Runs the network. Train mode collects running-stat updates in the
    /// returned pass; apply them with [`Network::commit_stats`] (the trainer
    /// does). Infer mode normalizes by running statistics and is a pure
    /// function of its inputs.
    pub fn forward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
        coords: &Tensor5<T>,
        mode: Mode,
    ) -> Result<ForwardPass<T>, NetError> {
        let cfg = &self.config;
        let e = cfg.input_edge;
        let oe = cfg.output_edge;
        if input.c() != 1 || input.spatial() != [e, e, e] {
            return Err(TensorError::ShapeMismatch(format!(
                "network input {:?}, expected (n, 1, {e}, {e}, {e})",
                input.shape()
            ))
            .into());
        }
        if coords.shape() != [input.n(), cfg.coord_channels, oe, oe, oe] {
            return Err(TensorError::ShapeMismatch(format!(
                "coordinate patch {:?}, expected ({}, {}, {oe}, {oe}, {oe})",
                coords.shape(),
                input.n(),
                cfg.coord_channels
            ))
            .into());
        }
        let mut stats = StatUpdates::new();
        let conv1_out = self.conv1.forward(params, input)?;
        let mut fe_outs = Vec::with_capacity(self.fe.len());
        let mut fe_caches = Vec::with_capacity(self.fe.len());
        let mut td_outs = Vec::with_capacity(self.td.len());
        let mut td_caches = Vec::with_capacity(self.td.len());
        let mut current = conv1_out.clone();
        for (i, block) in self.fe.iter().enumerate() {
            let (out, cache) = block.forward(params, &current, mode, &mut stats)?;
            fe_outs.push(out);
            fe_caches.push(cache);
            if i < self.td.len() {
                let (out, cache) = self.td[i].forward(params, &fe_outs[i], mode, &mut stats)?;
                current = out.clone();
                td_outs.push(out);
                td_caches.push(cache);
            }
        }
        let mut parts = Vec::with_capacity(cfg.multiscale_taps.len() + 1);
        for &tap in &cfg.multiscale_taps {
            parts.push(center_crop(&fe_outs[tap], oe)?);
        }
        parts.push(coords.clone());
        let refs: Vec<&Tensor5<T>> = parts.iter().collect();
        let fused = concat_channels(&refs)?;
        let (fc_out, fc_cache) = self.fc.forward(params, &fused, mode, &mut stats)?;
        let logits = self.classifier.forward(params, &fc_out)?;
        Ok(ForwardPass {
            input: input.clone(),
            coords: coords.clone(),
            conv1_out,
            fe_caches,
            fe_outs,
            td_caches,
            td_outs,
            fused,
            fc_cache,
            fc_out,
            logits,
            stat_updates: stats,
        })
    }

    /// Commits the running-stat updates gathered by a train-mode forward.
    pub fn commit_stats<T: Scalar>(&self, pass: &mut ForwardPass<T>, params: &mut Parameters<T>) {
        std::mem::take(&mut pass.stat_updates).commit(params);
    }

    /// Propagates the logit gradient back to every learnable parameter.
    /// Returns the gradient with respect to the intensity input.
    pub fn backward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        pass: &ForwardPass<T>,
        grad_logits: &Tensor5<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor5<T>, NetError> {
        let cfg = &self.config;
        let g_fc_out = self
            .classifier
            .backward(params, &pass.fc_out, grad_logits, grads)?;
        let g_fused = self.fc.backward(params, &pass.fc_cache, &g_fc_out, grads)?;

        let mut widths: Vec<usize> = cfg
            .multiscale_taps
            .iter()
            .map(|&t| pass.fe_outs[t].c())
            .collect();
        widths.push(cfg.coord_channels);
        let mut tap_grads = concat_channels_backward(&g_fused, &widths)?;
        tap_grads.pop(); // gradient w.r.t. the coordinate input is not needed

        let mut fe_out_grads: Vec<Option<Tensor5<T>>> = vec![None; self.fe.len()];
        for (&tap, grad) in cfg.multiscale_taps.iter().zip(tap_grads) {
            let embedded = center_crop_backward(&grad, pass.fe_outs[tap].spatial())?;
            fe_out_grads[tap] = Some(match fe_out_grads[tap].take() {
                None => embedded,
                Some(acc) => elementwise_sum(&[&acc, &embedded])?,
            });
        }

        let mut grad_into_block_input: Option<Tensor5<T>> = None;
        for i in (0..self.fe.len()).rev() {
            let mut g_out = fe_out_grads[i].take();
            if i < self.td.len() {
                let g_td_out = grad_into_block_input
                    .take()
                    .expect("gradient for transition output missing");
                let g_td_in = self.td[i].backward(
                    params,
                    &pass.fe_outs[i],
                    &pass.td_caches[i],
                    &g_td_out,
                    grads,
                )?;
                g_out = Some(match g_out {
                    None => g_td_in,
                    Some(acc) => elementwise_sum(&[&acc, &g_td_in])?,
                });
            }
            let g_out = g_out.unwrap_or_else(|| Tensor5::zeros(pass.fe_outs[i].shape()));
            grad_into_block_input =
                Some(self.fe[i].backward(params, &pass.fe_caches[i], &g_out, grads)?);
        }
        let g_conv1_out = grad_into_block_input.expect("at least one block");
        Ok(self
            .conv1
            .backward(params, &pass.input, &g_conv1_out, grads)?)
    }

    /// Actual `(edge, channels)` per stage of a finished pass, in audit row
    /// order.
    pub fn stage_shapes<T: Scalar>(&self, pass: &ForwardPass<T>) -> Vec<AuditStage> {
        let mut rows = Vec::new();
        let row = |name: String, t: &Tensor5<T>| AuditStage {
            name,
            edge: t.spatial()[0],
            channels: t.c(),
        };
        rows.push(row("ConvI".into(), &pass.conv1_out));
        for i in 0..pass.fe_outs.len() {
            rows.push(row(format!("FE{}", i + 1), &pass.fe_outs[i]));
            if i < pass.td_outs.len() {
                rows.push(row(format!("TD{}", i + 1), &pass.td_outs[i]));
            }
        }
        rows.push(row("fusion".into(), &pass.fused));
        rows.push(row("FC".into(), &pass.fc_out));
        rows.push(row("classifier".into(), &pass.logits));
        rows
    }
}
