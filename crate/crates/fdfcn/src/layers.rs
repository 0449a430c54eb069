//! Layer vocabulary: hybrid-dilated (HD), transition-down (CTD) and pointwise
//! (FC) unit layers, dense blocks, dilation-group validation, and
//! receptive-field arithmetic.
//!
//! Layer structs own no values: they hold [`ParamId`]s into a parameter
//! store, so the same topology can run at `f32` or `f64`.

use thiserror::Error;

use crate::net::params::{Gradients, ParamId, Parameters};
use crate::tensor::{
    batch_norm_backward, batch_norm_forward, batch_norm_reconstruct, concat_channels,
    concat_channels_backward, conv3d_backward, conv3d_forward, elementwise_sum, prelu_backward,
    prelu_forward, BnCache, BnState, ConvSpec, Mode, Scalar, Tensor5, TensorError, BN_EPS,
    BN_MOMENTUM,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayerError {
    #[error("dilation group is empty")]
    EmptyGroup,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hybrid-dilated unit layer configuration: BN, PReLU, then `rates.len()`
/// parallel dilated convolutions (shared kernel edge and output channel
/// count, distinct rates) summed elementwise. Each branch is size-preserving,
/// so its padding is `rate * (kernel - 1) / 2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HdLayerConfig {
    pub growth: usize,
    pub kernel: usize,
    pub rates: Vec<usize>,
}

impl Default for HdLayerConfig {
    fn default() -> Self {
        HdLayerConfig {
            growth: 12,
            kernel: 3,
            rates: vec![1, 2, 3],
        }
    }
}

impl HdLayerConfig {
    pub fn branch_padding(&self, branch: usize) -> usize {
        self.rates[branch] * (self.kernel - 1) / 2
    }

    /// Effective kernel edge per branch.
    pub fn dilated_kernels(&self) -> Vec<usize> {
        self.rates
            .iter()
            .map(|r| self.kernel + (self.kernel - 1) * (r - 1))
            .collect()
    }
}

/// Pointwise unit layer: BN, PReLU, then a 1-cubed convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FcLayerConfig {
    pub growth: usize,
}

impl FcLayerConfig {
    pub const KERNEL: usize = 1;
    pub const PADDING: usize = 0;
}

impl Default for FcLayerConfig {
    fn default() -> Self {
        FcLayerConfig { growth: 25 }
    }
}

/// Transition-down layer: BN, PReLU, then one strided convolution that adds
/// `channel_increase` channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtdLayerConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub channel_increase: usize,
}

impl Default for CtdLayerConfig {
    fn default() -> Self {
        CtdLayerConfig {
            kernel: 3,
            stride: 1,
            padding: 0,
            channel_increase: 12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    Hd,
    Fc,
}

/// Dense block configuration: `layers` unit layers of one kind. When
/// `include_input` is set the block input joins the dense concatenation and
/// prefixes the block output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseBlockConfig {
    pub hd: Option<HdLayerConfig>,
    pub fc: Option<FcLayerConfig>,
    pub layers: usize,
    pub include_input: bool,
}

impl DenseBlockConfig {
    pub fn hd(config: HdLayerConfig, layers: usize) -> Self {
        DenseBlockConfig {
            hd: Some(config),
            fc: None,
            layers,
            include_input: false,
        }
    }

    pub fn fc(config: FcLayerConfig, layers: usize) -> Self {
        DenseBlockConfig {
            hd: None,
            fc: Some(config),
            layers,
            include_input: true,
        }
    }

    pub fn kind(&self) -> UnitKind {
        if self.hd.is_some() {
            UnitKind::Hd
        } else {
            UnitKind::Fc
        }
    }

    pub fn growth(&self) -> usize {
        match (&self.hd, &self.fc) {
            (Some(h), _) => h.growth,
            (_, Some(f)) => f.growth,
            _ => 0,
        }
    }

    /// Output channel count for a block fed `c_in` channels.
    pub fn out_channels(&self, c_in: usize) -> usize {
        let dense = self.layers * self.growth();
        if self.include_input {
            c_in + dense
        } else {
            dense
        }
    }

    /// Input channel count of unit layer `j` (0-based). Layer 0 always
    /// receives the block input alone; later layers receive the
    /// concatenation of (the block input when included) and all earlier
    /// layer outputs.
    pub fn layer_in_channels(&self, c_in: usize, j: usize) -> usize {
        if j == 0 {
            c_in
        } else {
            let base = if self.include_input { c_in } else { 0 };
            base + j * self.growth()
        }
    }
}

/// Outcome of the dilation-group conditions: either valid or a report naming
/// the failed condition and the offending indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DilationCheck {
    Valid,
    /// Condition (a): two rates share a factor greater than one.
    CommonFactor {
        i: usize,
        j: usize,
        factor: usize,
    },
    /// Condition (b): `M_2 = max(r_3 - 2 r_2, 2 r_2 - r_3, r_2)` exceeds
    /// the kernel edge.
    CoverageGap {
        m2: i64,
        kernel: usize,
    },
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Checks a dilation group: (a) no pair of rates may share a common factor
/// greater than one, and (b) for groups of length >= 3 the second coverage
/// bound `M_2` must not exceed the kernel edge.
pub fn validate_dilation_group(
    rates: &[usize],
    kernel: usize,
) -> Result<DilationCheck, LayerError> {
    if rates.is_empty() {
        return Err(LayerError::EmptyGroup);
    }
    assert!(
        rates.iter().all(|&r| r >= 1),
        "dilation rates must be positive"
    );
    for i in 0..rates.len() {
        for j in i + 1..rates.len() {
            let g = gcd(rates[i], rates[j]);
            if g > 1 {
                return Ok(DilationCheck::CommonFactor { i, j, factor: g });
            }
        }
    }
    if rates.len() >= 3 {
        let (r2, r3) = (rates[1] as i64, rates[2] as i64);
        let m2 = (r3 - 2 * r2).max(2 * r2 - r3).max(r2);
        if m2 > kernel as i64 {
            return Ok(DilationCheck::CoverageGap { m2, kernel });
        }
    }
    Ok(DilationCheck::Valid)
}

/// Receptive-field accumulation over a sequence of layers, each described by
/// its effective kernel edge and stride. An HD layer contributes its largest
/// branch kernel.
pub fn receptive_field(stages: &[(usize, usize)]) -> usize {
    let mut field = 1usize;
    let mut jump = 1usize;
    for &(kd, stride) in stages {
        field += (kd - 1) * jump;
        jump *= stride;
    }
    field
}

// ---------------------------------------------------------------------------
// Built layers: parameter ids bound to a layout.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvUnit {
    pub fn forward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
    ) -> Result<Tensor5<T>, TensorError> {
        conv3d_forward(
            input,
            params.tensor(self.weight),
            params.vector(self.bias),
            &self.spec,
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
        grad_out: &Tensor5<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor5<T>, TensorError> {
        let (gi, gw, gb) =
            conv3d_backward(input, params.tensor(self.weight), &self.spec, grad_out)?;
        grads.add_tensor(self.weight, &gw);
        grads.add_vector(self.bias, &gb);
        Ok(gi)
    }
}

#[derive(Clone, Debug)]
pub struct BnUnit {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnUnit {
    fn state<T: Scalar>(&self, params: &Parameters<T>) -> BnState<T> {
        BnState {
            gamma: params.vector(self.gamma).to_vec(),
            beta: params.vector(self.beta).to_vec(),
            running_mean: params.vector(self.running_mean).to_vec(),
            running_var: params.vector(self.running_var).to_vec(),
        }
    }
}

/// Running-stat updates produced by a forward pass in train mode, to be
/// committed by whoever owns the parameters.
#[derive(Clone, Debug, Default)]
pub struct StatUpdates<T> {
    pub updates: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> StatUpdates<T> {
    pub fn new() -> Self {
        StatUpdates {
            updates: Vec::new(),
        }
    }

    pub fn commit(self, params: &mut Parameters<T>) {
        for (id, values) in self.updates {
            params.vector_mut(id).copy_from_slice(&values);
        }
    }
}

/// Cache for one BN -> PReLU -> conv(s) unit layer. Only the batch statistics
/// are kept; intermediate activations are reconstructed in the backward pass
/// from the layer input.
#[derive(Clone, Debug)]
pub struct UnitCache<T> {
    pub bn: BnCache<T>,
}

/// Shared BN -> PReLU head of every unit layer.
#[derive(Clone, Debug)]
pub struct PreActivation {
    pub bn: BnUnit,
    pub slopes: ParamId,
}

impl PreActivation {
    fn forward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
        mode: Mode,
        stats: &mut StatUpdates<T>,
    ) -> Result<(Tensor5<T>, BnCache<T>), TensorError> {
        let state = self.bn.state(params);
        let (bn_out, cache, updated) =
            batch_norm_forward(input, &state, mode, BN_EPS, BN_MOMENTUM)?;
        if let Some((nm, nv)) = updated {
            stats.updates.push((self.bn.running_mean, nm));
            stats.updates.push((self.bn.running_var, nv));
        }
        let act = prelu_forward(&bn_out, params.vector(self.slopes))?;
        Ok((act, cache))
    }

    /// Recomputes the BN output and the activation output from the cached
    /// statistics.
    fn reconstruct<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
        cache: &BnCache<T>,
    ) -> Result<(Tensor5<T>, Tensor5<T>), TensorError> {
        let state = self.bn.state(params);
        let bn_out = batch_norm_reconstruct(input, &state, cache);
        let act = prelu_forward(&bn_out, params.vector(self.slopes))?;
        Ok((bn_out, act))
    }

    fn backward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
        bn_out: &Tensor5<T>,
        cache: &BnCache<T>,
        grad_act: &Tensor5<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor5<T>, TensorError> {
        let (grad_bn_out, grad_slopes) =
            prelu_backward(bn_out, params.vector(self.slopes), grad_act)?;
        grads.add_vector(self.slopes, &grad_slopes);
        let state = self.bn.state(params);
        let (grad_in, gg, gb) = batch_norm_backward(input, &state, cache, &grad_bn_out)?;
        grads.add_vector(self.bn.gamma, &gg);
        grads.add_vector(self.bn.beta, &gb);
        Ok(grad_in)
    }
}

/// Hybrid-dilated layer: pre-activation followed by parallel dilated
/// convolutions whose outputs are summed.
#[derive(Clone, Debug)]
pub struct HdLayer {
    pub pre: PreActivation,
    pub branches: Vec<ConvUnit>,
}

impl HdLayer {
    pub fn forward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
        mode: Mode,
        stats: &mut StatUpdates<T>,
    ) -> Result<(Tensor5<T>, UnitCache<T>), TensorError> {
        let (act, bn) = self.pre.forward(params, input, mode, stats)?;
        let outs: Vec<Tensor5<T>> = self
            .branches
            .iter()
            .map(|b| b.forward(params, &act))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&Tensor5<T>> = outs.iter().collect();
        Ok((elementwise_sum(&refs)?, UnitCache { bn }))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
        cache: &UnitCache<T>,
        grad_out: &Tensor5<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor5<T>, TensorError> {
        let (bn_out, act) = self.pre.reconstruct(params, input, &cache.bn)?;
        let mut grad_act: Option<Tensor5<T>> = None;
        for branch in &self.branches {
            let gi = branch.backward(params, &act, grad_out, grads)?;
            grad_act = Some(match grad_act {
                None => gi,
                Some(acc) => elementwise_sum(&[&acc, &gi])?,
            });
        }
        self.pre
            .backward(params, input, &bn_out, &cache.bn, &grad_act.unwrap(), grads)
    }
}

/// Single-convolution unit layer (used for both CTD and FC layers).
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub pre: PreActivation,
    pub conv: ConvUnit,
}

impl ConvLayer {
    pub fn forward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
        mode: Mode,
        stats: &mut StatUpdates<T>,
    ) -> Result<(Tensor5<T>, UnitCache<T>), TensorError> {
        let (act, bn) = self.pre.forward(params, input, mode, stats)?;
        Ok((self.conv.forward(params, &act)?, UnitCache { bn }))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
        cache: &UnitCache<T>,
        grad_out: &Tensor5<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor5<T>, TensorError> {
        let (bn_out, act) = self.pre.reconstruct(params, input, &cache.bn)?;
        let grad_act = self.conv.backward(params, &act, grad_out, grads)?;
        self.pre
            .backward(params, input, &bn_out, &cache.bn, &grad_act, grads)
    }
}

#[derive(Clone, Debug)]
pub enum UnitLayer {
    Hd(HdLayer),
    Conv(ConvLayer),
}

impl UnitLayer {
    fn forward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
        mode: Mode,
        stats: &mut StatUpdates<T>,
    ) -> Result<(Tensor5<T>, UnitCache<T>), TensorError> {
        match self {
            UnitLayer::Hd(l) => l.forward(params, input, mode, stats),
            UnitLayer::Conv(l) => l.forward(params, input, mode, stats),
        }
    }

    fn backward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
        cache: &UnitCache<T>,
        grad_out: &Tensor5<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor5<T>, TensorError> {
        match self {
            UnitLayer::Hd(l) => l.backward(params, input, cache, grad_out, grads),
            UnitLayer::Conv(l) => l.backward(params, input, cache, grad_out, grads),
        }
    }
}

/// A built dense block. Unit layer `j` consumes the concatenation of (the
/// block input when `include_input`) and the outputs of layers `0..j`; layer
/// 0 always consumes the block input alone. The block emits the
/// concatenation of all layer outputs, prefixed by the block input when
/// included.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub include_input: bool,
    pub layers: Vec<UnitLayer>,
}

/// Forward cache of a dense block: the input, every layer output (needed to
/// rebuild the intermediate concatenations), and per-layer stat caches.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    pub input: Tensor5<T>,
    pub outputs: Vec<Tensor5<T>>,
    pub unit_caches: Vec<UnitCache<T>>,
}

impl DenseBlock {
    fn layer_input<T: Scalar>(
        &self,
        input: &Tensor5<T>,
        outputs: &[Tensor5<T>],
        j: usize,
    ) -> Result<Tensor5<T>, TensorError> {
        if j == 0 {
            return Ok(input.clone());
        }
        let mut parts: Vec<&Tensor5<T>> = Vec::with_capacity(j + 1);
        if self.include_input {
            parts.push(input);
        }
        parts.extend(outputs[..j].iter());
        concat_channels(&parts)
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        input: &Tensor5<T>,
        mode: Mode,
        stats: &mut StatUpdates<T>,
    ) -> Result<(Tensor5<T>, BlockCache<T>), TensorError> {
        let mut outputs: Vec<Tensor5<T>> = Vec::with_capacity(self.layers.len());
        let mut unit_caches = Vec::with_capacity(self.layers.len());
        for (j, layer) in self.layers.iter().enumerate() {
            let layer_in = self.layer_input(input, &outputs, j)?;
            let (out, cache) = layer.forward(params, &layer_in, mode, stats)?;
            outputs.push(out);
            unit_caches.push(cache);
        }
        let mut parts: Vec<&Tensor5<T>> = Vec::with_capacity(outputs.len() + 1);
        if self.include_input {
            parts.push(input);
        }
        parts.extend(outputs.iter());
        let block_out = concat_channels(&parts)?;
        Ok((
            block_out,
            BlockCache {
                input: input.clone(),
                outputs,
                unit_caches,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &Parameters<T>,
        cache: &BlockCache<T>,
        grad_out: &Tensor5<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor5<T>, TensorError> {
        let l = self.layers.len();
        // Split the output gradient into the concatenated parts.
        let mut widths: Vec<usize> = Vec::with_capacity(l + 1);
        if self.include_input {
            widths.push(cache.input.c());
        }
        widths.extend(cache.outputs.iter().map(|o| o.c()));
        let mut parts = concat_channels_backward(grad_out, &widths)?;
        let grad_outputs_part = parts.split_off(if self.include_input { 1 } else { 0 });
        let mut grad_outputs: Vec<Tensor5<T>> = grad_outputs_part;
        let mut grad_input = if self.include_input {
            parts.pop().unwrap()
        } else {
            Tensor5::zeros(cache.input.shape())
        };

        for j in (0..l).rev() {
            let layer_in = self.layer_input(&cache.input, &cache.outputs, j)?;
            let g = self.layers[j].backward(
                params,
                &layer_in,
                &cache.unit_caches[j],
                &grad_outputs[j],
                grads,
            )?;
            if j == 0 {
                // layer 0 consumed the block input alone
                grad_input = elementwise_sum(&[&grad_input, &g])?;
            } else {
                let mut in_widths: Vec<usize> = Vec::with_capacity(j + 1);
                if self.include_input {
                    in_widths.push(cache.input.c());
                }
                in_widths.extend(cache.outputs[..j].iter().map(|o| o.c()));
                let mut pieces = concat_channels_backward(&g, &in_widths)?;
                let earlier = pieces.split_off(if self.include_input { 1 } else { 0 });
                if let Some(gi) = pieces.pop() {
                    grad_input = elementwise_sum(&[&grad_input, &gi])?;
                }
                for (gj, piece) in earlier.into_iter().enumerate() {
                    grad_outputs[gj] = elementwise_sum(&[&grad_outputs[gj], &piece])?;
                }
            }
        }
        Ok(grad_input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stated_group_is_valid() {
        assert_eq!(
            validate_dilation_group(&[1, 2, 3], 3).unwrap(),
            DilationCheck::Valid
        );
    }

    #[test]
    fn common_factor_group_rejected() {
        assert_eq!(
            validate_dilation_group(&[2, 4, 6], 3).unwrap(),
            DilationCheck::CommonFactor {
                i: 0,
                j: 1,
                factor: 2
            }
        );
    }

    #[test]
    fn coverage_gap_group_rejected() {
        // M_2 = max(9 - 4, 4 - 9, 2) = 5 > 3
        assert_eq!(
            validate_dilation_group(&[1, 2, 9], 3).unwrap(),
            DilationCheck::CoverageGap { m2: 5, kernel: 3 }
        );
    }

    #[test]
    fn short_groups_skip_condition_b() {
        assert_eq!(
            validate_dilation_group(&[1, 9], 3).unwrap(),
            DilationCheck::Valid
        );
        assert_eq!(
            validate_dilation_group(&[5], 3).unwrap(),
            DilationCheck::Valid
        );
    }

    #[test]
    fn empty_group_is_an_error() {
        assert_eq!(
            validate_dilation_group(&[], 3).unwrap_err(),
            LayerError::EmptyGroup
        );
    }

    #[test]
    fn dilated_kernel_edges_for_default_group() {
        let cfg = HdLayerConfig::default();
        assert_eq!(cfg.dilated_kernels(), vec![3, 5, 7]);
        assert_eq!(cfg.branch_padding(0), 1);
        assert_eq!(cfg.branch_padding(1), 2);
        assert_eq!(cfg.branch_padding(2), 3);
    }

    #[test]
    fn receptive_field_examples() {
        // single HD layer with rates [1,2,3], kernel 3: widest branch is 7
        assert_eq!(receptive_field(&[(7, 1)]), 7);
        assert_eq!(receptive_field(&[(1, 1)]), 1);
        // 7-edge stride-1 conv followed by one HD layer
        assert_eq!(receptive_field(&[(7, 1), (7, 1)]), 13);
    }

    #[test]
    fn block_channel_arithmetic() {
        let fe = DenseBlockConfig::hd(HdLayerConfig::default(), 4);
        assert_eq!(fe.out_channels(24), 48);
        assert_eq!(fe.layer_in_channels(24, 0), 24);
        assert_eq!(fe.layer_in_channels(24, 1), 12);
        assert_eq!(fe.layer_in_channels(24, 3), 36);

        let fc = DenseBlockConfig::fc(FcLayerConfig::default(), 2);
        assert_eq!(fc.out_channels(150), 200);
        assert_eq!(fc.layer_in_channels(150, 0), 150);
        assert_eq!(fc.layer_in_channels(150, 1), 175);
    }
}
