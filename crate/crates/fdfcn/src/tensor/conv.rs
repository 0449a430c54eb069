//! Direct 3D convolution with dilation support, forward and backward.

use rayon::prelude::*;

use super::{Scalar, Tensor5, TensorError};

/// Geometry of one convolution: cubic kernel edge `kernel`, `stride`,
/// `padding`, dilation `rate`, and channel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub rate: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvSpec {
    /// Effective (dilated) kernel edge: inserting `rate - 1` zeros between
    /// neighboring taps stretches the kernel edge to this.
    pub fn dilated_kernel(&self) -> usize {
        self.kernel + (self.kernel - 1) * (self.rate - 1)
    }
}

/// Output edge length of a convolution over an input edge of length `i`.
pub fn conv_out_size(i: usize, spec: &ConvSpec) -> Result<usize, TensorError> {
    debug_assert!(spec.kernel >= 1 && spec.stride >= 1 && spec.rate >= 1);
    let kd = spec.dilated_kernel();
    if i + 2 * spec.padding < kd {
        return Err(TensorError::KernelExceedsInput {
            input: i,
            padding: spec.padding,
            kd,
        });
    }
    Ok((i + 2 * spec.padding - kd) / spec.stride + 1)
}

/// Valid output index range along one axis for a tap offset `q` (so that the
/// read position `out*stride + q` stays inside `[0, extent_in)`).
#[inline]
fn out_range(extent_in: usize, extent_out: usize, stride: usize, q: isize) -> (usize, usize) {
    let s = stride as isize;
    let neg_q = -q;
    let mut lo = neg_q.div_euclid(s);
    if neg_q.rem_euclid(s) != 0 {
        lo += 1;
    }
    let lo = lo.max(0) as usize;
    let hi_num = extent_in as isize - 1 - q;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num.div_euclid(s) + 1) as usize;
    (lo.min(extent_out), hi.min(extent_out))
}

fn validate<T: Scalar>(
    input: &Tensor5<T>,
    weights: &Tensor5<T>,
    bias: &[T],
    spec: &ConvSpec,
) -> Result<[usize; 3], TensorError> {
    let [_, c, d, h, w] = input.shape();
    if c != spec.c_in {
        return Err(TensorError::ShapeMismatch(format!(
            "conv3d input has {c} channels, spec expects {}",
            spec.c_in
        )));
    }
    let k = spec.kernel;
    if weights.shape() != [spec.c_out, spec.c_in, k, k, k] {
        return Err(TensorError::ShapeMismatch(format!(
            "conv3d weights {:?}, spec expects {:?}",
            weights.shape(),
            [spec.c_out, spec.c_in, k, k, k]
        )));
    }
    if bias.len() != spec.c_out {
        return Err(TensorError::ShapeMismatch(format!(
            "conv3d bias length {} != c_out {}",
            bias.len(),
            spec.c_out
        )));
    }
    Ok([
        conv_out_size(d, spec)?,
        conv_out_size(h, spec)?,
        conv_out_size(w, spec)?,
    ])
}

/// Direct dilated 3D convolution. Weights are `(c_out, c_in, k, k, k)`.
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor5<T>,
    weights: &Tensor5<T>,
    bias: &[T],
    spec: &ConvSpec,
) -> Result<Tensor5<T>, TensorError> {
    let [od, oh, ow] = validate(input, weights, bias, spec)?;
    let [n, _, d, h, w] = input.shape();
    let (k, s, p, r) = (spec.kernel, spec.stride, spec.padding, spec.rate);
    let mut out = Tensor5::zeros([n, spec.c_out, od, oh, ow]);
    let out_sp = od * oh * ow;
    let in_data = input.data();
    let w_data = weights.data();

    out.data_mut()
        .par_chunks_mut(out_sp)
        .enumerate()
        .for_each(|(block, chunk)| {
            let ni = block / spec.c_out;
            let co = block % spec.c_out;
            chunk.fill(bias[co]);
            for ci in 0..spec.c_in {
                let in_base = (ni * spec.c_in + ci) * d * h * w;
                let w_base = ((co * spec.c_in + ci) * k) * k * k;
                for kz in 0..k {
                    let qz = (kz * r) as isize - p as isize;
                    let (z_lo, z_hi) = out_range(d, od, s, qz);
                    for ky in 0..k {
                        let qy = (ky * r) as isize - p as isize;
                        let (y_lo, y_hi) = out_range(h, oh, s, qy);
                        for kx in 0..k {
                            let qx = (kx * r) as isize - p as isize;
                            let (x_lo, x_hi) = out_range(w, ow, s, qx);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let wv = w_data[w_base + (kz * k + ky) * k + kx];
                            for oz in z_lo..z_hi {
                                let iz = (oz * s) as isize + qz;
                                let in_z = in_base + iz as usize * h * w;
                                let out_z = (oz * oh) * ow;
                                for oy in y_lo..y_hi {
                                    let iy = (oy * s) as isize + qy;
                                    let in_row = in_z + iy as usize * w;
                                    let out_row = out_z + oy * ow;
                                    if s == 1 {
                                        let src_start =
                                            (in_row as isize + x_lo as isize + qx) as usize;
                                        let dst = &mut chunk[out_row + x_lo..out_row + x_hi];
                                        let src = &in_data[src_start..src_start + dst.len()];
                                        for (dv, sv) in dst.iter_mut().zip(src) {
                                            *dv += wv * *sv;
                                        }
                                    } else {
                                        for ox in x_lo..x_hi {
                                            let ix = ((ox * s) as isize + qx) as usize;
                                            chunk[out_row + ox] += wv * in_data[in_row + ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    super::audit_finite("conv3d", &out);
    Ok(out)
}

/// Input, weight and bias gradients of one convolution.
pub type ConvGradients<T> = (Tensor5<T>, Tensor5<T>, Vec<T>);

/// Backward of [`conv3d_forward`]: input, weight and bias gradients for the
/// given upstream gradient. Gradient shapes match their primals.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor5<T>,
    weights: &Tensor5<T>,
    spec: &ConvSpec,
    grad_out: &Tensor5<T>,
) -> Result<ConvGradients<T>, TensorError> {
    let bias_probe = vec![T::ZERO; spec.c_out];
    let [od, oh, ow] = validate(input, weights, &bias_probe, spec)?;
    let [n, _, d, h, w] = input.shape();
    if grad_out.shape() != [n, spec.c_out, od, oh, ow] {
        return Err(TensorError::ShapeMismatch(format!(
            "conv3d grad_out {:?}, expected {:?}",
            grad_out.shape(),
            [n, spec.c_out, od, oh, ow]
        )));
    }
    let (k, s, p, r) = (spec.kernel, spec.stride, spec.padding, spec.rate);
    let in_sp = d * h * w;
    let out_sp = od * oh * ow;
    let in_data = input.data();
    let w_data = weights.data();
    let go_data = grad_out.data();

    // Input gradient: each batch entry is an independent scatter.
    let mut grad_in = Tensor5::zeros(input.shape());
    grad_in
        .data_mut()
        .par_chunks_mut(spec.c_in * in_sp)
        .enumerate()
        .for_each(|(ni, gin)| {
            for co in 0..spec.c_out {
                let go_base = (ni * spec.c_out + co) * out_sp;
                for ci in 0..spec.c_in {
                    let gin_base = ci * in_sp;
                    let w_base = ((co * spec.c_in + ci) * k) * k * k;
                    for kz in 0..k {
                        let qz = (kz * r) as isize - p as isize;
                        let (z_lo, z_hi) = out_range(d, od, s, qz);
                        for ky in 0..k {
                            let qy = (ky * r) as isize - p as isize;
                            let (y_lo, y_hi) = out_range(h, oh, s, qy);
                            for kx in 0..k {
                                let qx = (kx * r) as isize - p as isize;
                                let (x_lo, x_hi) = out_range(w, ow, s, qx);
                                if x_lo >= x_hi {
                                    continue;
                                }
                                let wv = w_data[w_base + (kz * k + ky) * k + kx];
                                for oz in z_lo..z_hi {
                                    let iz = ((oz * s) as isize + qz) as usize;
                                    let gin_z = gin_base + iz * h * w;
                                    let go_z = go_base + (oz * oh) * ow;
                                    for oy in y_lo..y_hi {
                                        let iy = ((oy * s) as isize + qy) as usize;
                                        let gin_row = gin_z + iy * w;
                                        let go_row = go_z + oy * ow;
                                        if s == 1 {
                                            let dst_start =
                                                (gin_row as isize + x_lo as isize + qx) as usize;
                                            let src = &go_data[go_row + x_lo..go_row + x_hi];
                                            let dst = &mut gin[dst_start..dst_start + src.len()];
                                            for (dv, sv) in dst.iter_mut().zip(src) {
                                                *dv += wv * *sv;
                                            }
                                        } else {
                                            for ox in x_lo..x_hi {
                                                let ix = ((ox * s) as isize + qx) as usize;
                                                gin[gin_row + ix] += wv * go_data[go_row + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    // Weight and bias gradients: each output channel is independent.
    let mut grad_w = Tensor5::zeros(weights.shape());
    let mut grad_b = vec![T::ZERO; spec.c_out];
    let kk3 = spec.c_in * k * k * k;
    grad_w
        .data_mut()
        .par_chunks_mut(kk3)
        .zip(grad_b.par_iter_mut())
        .enumerate()
        .for_each(|(co, (gw, gb))| {
            for ni in 0..n {
                let go_base = (ni * spec.c_out + co) * out_sp;
                for v in &go_data[go_base..go_base + out_sp] {
                    *gb += *v;
                }
                for ci in 0..spec.c_in {
                    let in_base = (ni * spec.c_in + ci) * in_sp;
                    for kz in 0..k {
                        let qz = (kz * r) as isize - p as isize;
                        let (z_lo, z_hi) = out_range(d, od, s, qz);
                        for ky in 0..k {
                            let qy = (ky * r) as isize - p as isize;
                            let (y_lo, y_hi) = out_range(h, oh, s, qy);
                            for kx in 0..k {
                                let qx = (kx * r) as isize - p as isize;
                                let (x_lo, x_hi) = out_range(w, ow, s, qx);
                                if x_lo >= x_hi {
                                    continue;
                                }
                                let mut acc = T::ZERO;
                                for oz in z_lo..z_hi {
                                    let iz = ((oz * s) as isize + qz) as usize;
                                    let in_z = in_base + iz * h * w;
                                    let go_z = go_base + (oz * oh) * ow;
                                    for oy in y_lo..y_hi {
                                        let iy = ((oy * s) as isize + qy) as usize;
                                        let in_row = in_z + iy * w;
                                        let go_row = go_z + oy * ow;
                                        if s == 1 {
                                            let src_start =
                                                (in_row as isize + x_lo as isize + qx) as usize;
                                            let a = &go_data[go_row + x_lo..go_row + x_hi];
                                            let b = &in_data[src_start..src_start + a.len()];
                                            for (av, bv) in a.iter().zip(b) {
                                                acc += *av * *bv;
                                            }
                                        } else {
                                            for ox in x_lo..x_hi {
                                                let ix = ((ox * s) as isize + qx) as usize;
                                                acc += go_data[go_row + ox] * in_data[in_row + ix];
                                            }
                                        }
                                    }
                                }
                                gw[((ci * k + kz) * k + ky) * k + kx] += acc;
                            }
                        }
                    }
                }
            }
        });

    Ok((grad_in, grad_w, grad_b))
}
