//! Voxelwise softmax cross-entropy.

use super::{Scalar, Tensor5, TensorError};

/// Integer class targets on a `(n, d, h, w)` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassTargets {
    pub shape: [usize; 4],
    pub labels: Vec<u16>,
}

impl ClassTargets {
    pub fn new(shape: [usize; 4], labels: Vec<u16>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if labels.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                actual: labels.len(),
            });
        }
        Ok(ClassTargets { shape, labels })
    }
}

/// Softmax probabilities cached for the backward pass.
#[derive(Clone, Debug)]
pub struct SoftmaxCache<T> {
    pub probs: Tensor5<T>,
}

/// Mean over all voxels of the negative log softmax at the target class.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor5<T>,
    targets: &ClassTargets,
) -> Result<(T, SoftmaxCache<T>), TensorError> {
    let [n, c, d, h, w] = logits.shape();
    if targets.shape != [n, d, h, w] {
        return Err(TensorError::ShapeMismatch(format!(
            "targets {:?} vs logits spatial {:?}",
            targets.shape,
            [n, d, h, w]
        )));
    }
    for &label in &targets.labels {
        if label as usize >= c {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
    }
    let sp = d * h * w;
    let mut probs = Tensor5::zeros(logits.shape());
    let mut loss = 0f64;
    let logit_data = logits.data();
    let prob_data = probs.data_mut();
    for ni in 0..n {
        for v in 0..sp {
            let base = ni * c * sp + v;
            let mut maxv = f64::NEG_INFINITY;
            for ci in 0..c {
                maxv = maxv.max(logit_data[base + ci * sp].to_f64());
            }
            let mut denom = 0f64;
            for ci in 0..c {
                denom += (logit_data[base + ci * sp].to_f64() - maxv).exp();
            }
            let log_denom = denom.ln();
            let target = targets.labels[ni * sp + v] as usize;
            for ci in 0..c {
                let z = logit_data[base + ci * sp].to_f64() - maxv;
                prob_data[base + ci * sp] = T::from_f64((z - log_denom).exp());
                if ci == target {
                    loss -= z - log_denom;
                }
            }
        }
    }
    let count = (n * sp) as f64;
    Ok((T::from_f64(loss / count), SoftmaxCache { probs }))
}

/// Gradient of the mean cross-entropy with respect to the logits:
/// `(softmax - one_hot) / voxel_count`.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    cache: &SoftmaxCache<T>,
    targets: &ClassTargets,
) -> Tensor5<T> {
    let [n, c, d, h, w] = cache.probs.shape();
    let sp = d * h * w;
    let scale = T::from_f64(1.0 / (n * sp) as f64);
    let mut grad = cache.probs.clone();
    let data = grad.data_mut();
    for ni in 0..n {
        for v in 0..sp {
            let target = targets.labels[ni * sp + v] as usize;
            let base = ni * c * sp + v;
            data[base + target * sp] -= T::ONE;
            for ci in 0..c {
                data[base + ci * sp] *= scale;
            }
        }
    }
    grad
}
