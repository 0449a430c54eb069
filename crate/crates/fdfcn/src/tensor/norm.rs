//! Batch normalization and PReLU, forward and backward.

use rayon::prelude::*;

use super::{Scalar, Tensor5, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel scale/shift plus running statistics.
#[derive(Clone, Debug)]
pub struct BnState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn identity(channels: usize) -> Self {
        BnState {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Statistics the backward pass needs: the per-channel mean and inverse
/// standard deviation actually used for normalization, and the mode.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

fn check_channels<T: Scalar>(input: &Tensor5<T>, channels: usize) -> Result<(), TensorError> {
    if input.c() != channels {
        return Err(TensorError::ShapeMismatch(format!(
            "input has {} channels, state has {channels}",
            input.c()
        )));
    }
    Ok(())
}

/// Normalizes each channel over `(n, d, h, w)`.
///
/// Train mode uses batch statistics (biased variance) and returns the updated
/// running statistics; committing them is the caller's decision, which keeps
/// this function pure. Infer mode normalizes by the running statistics.
#[allow(clippy::type_complexity)]
pub fn batch_norm_forward<T: Scalar>(
    input: &Tensor5<T>,
    state: &BnState<T>,
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor5<T>, BnCache<T>, Option<(Vec<T>, Vec<T>)>), TensorError> {
    check_channels(input, state.channels())?;
    let [n, c, _, _, _] = input.shape();
    let m = (n * input.spatial_len()) as f64;

    let (mean, inv_std, updated) = match mode {
        Mode::Train => {
            if m < 1.0 {
                return Err(TensorError::ShapeMismatch(
                    "batch_norm over empty batch".into(),
                ));
            }
            let mut mean = vec![T::ZERO; c];
            let mut var = vec![0f64; c];
            for (ci, mv) in mean.iter_mut().enumerate() {
                let mut sum = 0f64;
                for ni in 0..n {
                    for v in input.channel_block(ni, ci) {
                        sum += v.to_f64();
                    }
                }
                let mu = sum / m;
                let mut ss = 0f64;
                for ni in 0..n {
                    for v in input.channel_block(ni, ci) {
                        let dlt = v.to_f64() - mu;
                        ss += dlt * dlt;
                    }
                }
                *mv = T::from_f64(mu);
                var[ci] = ss / m;
            }
            let inv_std: Vec<T> = var
                .iter()
                .map(|&v| T::from_f64(1.0 / (v + eps).sqrt()))
                .collect();
            let new_mean: Vec<T> = state
                .running_mean
                .iter()
                .zip(&mean)
                .map(|(r, b)| T::from_f64((1.0 - momentum) * r.to_f64() + momentum * b.to_f64()))
                .collect();
            let new_var: Vec<T> = state
                .running_var
                .iter()
                .zip(&var)
                .map(|(r, b)| T::from_f64((1.0 - momentum) * r.to_f64() + momentum * b))
                .collect();
            (mean, inv_std, Some((new_mean, new_var)))
        }
        Mode::Infer => {
            let inv_std: Vec<T> = state
                .running_var
                .iter()
                .map(|v| T::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
                .collect();
            (state.running_mean.clone(), inv_std, None)
        }
    };

    let mut out = Tensor5::zeros(input.shape());
    let sp = input.spatial_len();
    out.data_mut()
        .par_chunks_mut(sp)
        .enumerate()
        .for_each(|(block, chunk)| {
            let ci = block % c;
            let (mu, istd) = (mean[ci], inv_std[ci]);
            let (g, b) = (state.gamma[ci], state.beta[ci]);
            let src = input.channel_block(block / c, ci);
            for (o, v) in chunk.iter_mut().zip(src) {
                *o = g * ((*v - mu) * istd) + b;
            }
        });

    super::audit_finite("batch_norm", &out);
    Ok((
        out,
        BnCache {
            mean,
            inv_std,
            mode,
        },
        updated,
    ))
}

/// Recomputes the forward output from the cached statistics, without touching
/// running stats. Used by composite layers that cache only their input.
pub fn batch_norm_reconstruct<T: Scalar>(
    input: &Tensor5<T>,
    state: &BnState<T>,
    cache: &BnCache<T>,
) -> Tensor5<T> {
    let c = input.c();
    let sp = input.spatial_len();
    let mut out = Tensor5::zeros(input.shape());
    out.data_mut()
        .par_chunks_mut(sp)
        .enumerate()
        .for_each(|(block, chunk)| {
            let ci = block % c;
            let (mu, istd) = (cache.mean[ci], cache.inv_std[ci]);
            let (g, b) = (state.gamma[ci], state.beta[ci]);
            let src = input.channel_block(block / c, ci);
            for (o, v) in chunk.iter_mut().zip(src) {
                *o = g * ((*v - mu) * istd) + b;
            }
        });
    out
}

/// Input, scale and shift gradients of one normalization.
pub type BnGradients<T> = (Tensor5<T>, Vec<T>, Vec<T>);

/// Backward of [`batch_norm_forward`]: `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    input: &Tensor5<T>,
    state: &BnState<T>,
    cache: &BnCache<T>,
    grad_out: &Tensor5<T>,
) -> Result<BnGradients<T>, TensorError> {
    check_channels(input, state.channels())?;
    if grad_out.shape() != input.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "batch_norm grad_out {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let [n, c, _, _, _] = input.shape();
    let m = (n * input.spatial_len()) as f64;
    let mut grad_in = Tensor5::zeros(input.shape());
    let mut grad_gamma = vec![T::ZERO; c];
    let mut grad_beta = vec![T::ZERO; c];

    for ci in 0..c {
        let mu = cache.mean[ci].to_f64();
        let istd = cache.inv_std[ci].to_f64();
        let g = state.gamma[ci].to_f64();
        let mut sum_g = 0f64; // sum of grad_out
        let mut sum_gx = 0f64; // sum of grad_out * xhat
        for ni in 0..n {
            let go = grad_out.channel_block(ni, ci);
            let xi = input.channel_block(ni, ci);
            for (gv, xv) in go.iter().zip(xi) {
                let xhat = (xv.to_f64() - mu) * istd;
                sum_g += gv.to_f64();
                sum_gx += gv.to_f64() * xhat;
            }
        }
        grad_beta[ci] = T::from_f64(sum_g);
        grad_gamma[ci] = T::from_f64(sum_gx);
        match cache.mode {
            Mode::Train => {
                for ni in 0..n {
                    let go = grad_out.channel_block(ni, ci).to_vec();
                    let xi = input.channel_block(ni, ci).to_vec();
                    let dst = grad_in.channel_block_mut(ni, ci);
                    for ((dv, gv), xv) in dst.iter_mut().zip(&go).zip(&xi) {
                        let xhat = (xv.to_f64() - mu) * istd;
                        let d = g * istd * (gv.to_f64() - sum_g / m - xhat * sum_gx / m);
                        *dv = T::from_f64(d);
                    }
                }
            }
            Mode::Infer => {
                let scale = T::from_f64(g * istd);
                for ni in 0..n {
                    let go = grad_out.channel_block(ni, ci).to_vec();
                    let dst = grad_in.channel_block_mut(ni, ci);
                    for (dv, gv) in dst.iter_mut().zip(&go) {
                        *dv = scale * *gv;
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_gamma, grad_beta))
}

/// PReLU with one learnable slope per channel: `x` for `x >= 0`, `a_c * x`
/// otherwise.
pub fn prelu_forward<T: Scalar>(
    input: &Tensor5<T>,
    slopes: &[T],
) -> Result<Tensor5<T>, TensorError> {
    check_channels(input, slopes.len())?;
    let c = input.c();
    let sp = input.spatial_len();
    let mut out = Tensor5::zeros(input.shape());
    out.data_mut()
        .par_chunks_mut(sp)
        .enumerate()
        .for_each(|(block, chunk)| {
            let a = slopes[block % c];
            let src = input.channel_block(block / c, block % c);
            for (o, v) in chunk.iter_mut().zip(src) {
                *o = if *v >= T::ZERO { *v } else { a * *v };
            }
        });
    super::audit_finite("prelu", &out);
    Ok(out)
}

/// Backward of [`prelu_forward`]: `(grad_input, grad_slopes)`.
pub fn prelu_backward<T: Scalar>(
    input: &Tensor5<T>,
    slopes: &[T],
    grad_out: &Tensor5<T>,
) -> Result<(Tensor5<T>, Vec<T>), TensorError> {
    check_channels(input, slopes.len())?;
    if grad_out.shape() != input.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "prelu grad_out {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let [n, c, _, _, _] = input.shape();
    let mut grad_in = Tensor5::zeros(input.shape());
    let mut grad_slopes = vec![T::ZERO; c];
    for ci in 0..c {
        let a = slopes[ci];
        let mut ga = T::ZERO;
        for ni in 0..n {
            let go = grad_out.channel_block(ni, ci).to_vec();
            let xi = input.channel_block(ni, ci).to_vec();
            let dst = grad_in.channel_block_mut(ni, ci);
            for ((dv, gv), xv) in dst.iter_mut().zip(&go).zip(&xi) {
                if *xv >= T::ZERO {
                    *dv = *gv;
                } else {
                    *dv = a * *gv;
                    ga += *gv * *xv;
                }
            }
        }
        grad_slopes[ci] = ga;
    }
    Ok((grad_in, grad_slopes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 5], seed: u64) -> Tensor5<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        Tensor5::from_vec(shape, data).unwrap()
    }

    #[test]
    fn train_mode_normalizes_per_channel() {
        let input = random_tensor([3, 4, 5, 5, 5], 7);
        let state = BnState::identity(4);
        let (out, _, _) =
            batch_norm_forward(&input, &state, Mode::Train, BN_EPS, BN_MOMENTUM).unwrap();
        let m = (3 * 125) as f64;
        for ci in 0..4 {
            let mut sum = 0f64;
            let mut ss = 0f64;
            for ni in 0..3 {
                for v in out.channel_block(ni, ci) {
                    sum += *v as f64;
                    ss += (*v as f64) * (*v as f64);
                }
            }
            let mean = sum / m;
            let var = ss / m - mean * mean;
            assert!(mean.abs() <= 1e-5, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "channel {ci} var {var}");
        }
    }

    #[test]
    fn train_and_infer_agree_when_running_stats_equal_batch_stats() {
        let input = random_tensor([2, 3, 4, 4, 4], 11);
        let mut state = BnState::identity(3);
        let (train_out, cache, _) =
            batch_norm_forward(&input, &state, Mode::Train, BN_EPS, BN_MOMENTUM).unwrap();
        // plant the exact batch stats as running stats
        state.running_mean = cache.mean.clone();
        state.running_var = cache
            .inv_std
            .iter()
            .map(|s| (1.0 / ((*s as f64) * (*s as f64)) - BN_EPS) as f32)
            .collect();
        let (infer_out, _, _) =
            batch_norm_forward(&input, &state, Mode::Infer, BN_EPS, BN_MOMENTUM).unwrap();
        for (a, b) in train_out.data().iter().zip(infer_out.data()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let input = random_tensor([2, 2, 3, 3, 3], 3);
        let state = BnState::identity(2);
        let (_, cache, updated) =
            batch_norm_forward(&input, &state, Mode::Train, BN_EPS, 0.1).unwrap();
        let (new_mean, _) = updated.unwrap();
        for (nm, bm) in new_mean.iter().zip(&cache.mean) {
            assert!((nm - 0.1 * bm).abs() < 1e-7);
        }
    }

    #[test]
    fn channel_count_mismatch_rejected() {
        let input = random_tensor([1, 3, 2, 2, 2], 1);
        let state = BnState::<f32>::identity(2);
        assert!(batch_norm_forward(&input, &state, Mode::Train, BN_EPS, BN_MOMENTUM).is_err());
    }

    #[test]
    fn prelu_identity_on_non_negative() {
        let input = Tensor5::<f32>::filled([1, 2, 3, 3, 3], 0.7);
        let out = prelu_forward(&input, &[0.25, 0.1]).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn prelu_scales_negatives_by_channel_slope() {
        let mut input = Tensor5::<f32>::zeros([1, 1, 1, 1, 1]);
        input.set(0, 0, 0, 0, 0, -2.0);
        let out = prelu_forward(&input, &[0.25]).unwrap();
        assert_eq!(out.get(0, 0, 0, 0, 0), -0.5);
    }

    #[test]
    fn prelu_slope_gradient_collects_negative_inputs() {
        let mut input = Tensor5::<f32>::zeros([1, 1, 1, 1, 2]);
        input.set(0, 0, 0, 0, 0, -3.0);
        input.set(0, 0, 0, 0, 1, 4.0);
        let grad = Tensor5::<f32>::filled([1, 1, 1, 1, 2], 1.0);
        let (gi, gs) = prelu_backward(&input, &[0.5], &grad).unwrap();
        assert_eq!(gs[0], -3.0);
        assert_eq!(gi.get(0, 0, 0, 0, 0), 0.5);
        assert_eq!(gi.get(0, 0, 0, 0, 1), 1.0);
    }
}
