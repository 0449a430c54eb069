//! Shared test oracles: a central finite-difference gradient checker, a
//! six-nested-loop reference convolution, a dense Laplacian with an
//! independent eigendecomposition, and random mask/tensor generators.
//!
//! Everything here is deliberately independent of the implementation paths
//! it checks.

#![allow(dead_code)]

pub mod grad;

use fdfcn::spectral::BrainMask;
use fdfcn::tensor::{ConvSpec, Scalar, Tensor5};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor<T: Scalar>(shape: [usize; 5], seed: u64) -> Tensor5<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(rng.random_range(-1.0..1.0)))
        .collect();
    Tensor5::from_vec(shape, data).unwrap()
}

pub fn random_vec(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Central finite-difference check of `analytic` against `eval` at sampled
/// coordinates of `theta`. Returns the worst relative error.
pub fn central_diff_check(
    theta: &mut [f64],
    eval: &mut dyn FnMut(&[f64]) -> f64,
    analytic: &[f64],
    samples: usize,
    seed: u64,
    tol: f64,
    label: &str,
) -> f64 {
    assert_eq!(theta.len(), analytic.len(), "{label}: gradient length");
    assert!(!theta.is_empty(), "{label}: empty parameter");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = if theta.len() <= samples {
        (0..theta.len()).collect()
    } else {
        (0..samples)
            .map(|_| rng.random_range(0..theta.len()))
            .collect()
    };
    coords.sort_unstable();
    coords.dedup();
    let mut worst = 0.0f64;
    for &i in &coords {
        let saved = theta[i];
        let h = 1e-5 * saved.abs().max(1.0);
        theta[i] = saved + h;
        let fp = eval(theta);
        theta[i] = saved - h;
        let fm = eval(theta);
        theta[i] = saved;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic[i] - numeric).abs() / denom;
        worst = worst.max(rel);
        assert!(
            rel <= tol,
            "{label}: coordinate {i} analytic {} vs numeric {numeric} (rel {rel:.3e} > {tol:.1e})",
            analytic[i]
        );
    }
    worst
}

/// Direct six-nested-loop reference convolution, bounds-checked per tap.
pub fn reference_conv3d(
    input: &Tensor5<f64>,
    weights: &Tensor5<f64>,
    bias: &[f64],
    spec: &ConvSpec,
) -> Tensor5<f64> {
    let [n, c_in, d, h, w] = input.shape();
    assert_eq!(c_in, spec.c_in);
    let k = spec.kernel;
    let out_edge = |i: usize| (i + 2 * spec.padding - spec.dilated_kernel()) / spec.stride + 1;
    let (od, oh, ow) = (out_edge(d), out_edge(h), out_edge(w));
    let mut out = Tensor5::zeros([n, spec.c_out, od, oh, ow]);
    for ni in 0..n {
        for (co, b) in bias.iter().enumerate() {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = *b;
                        for ci in 0..c_in {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * spec.stride + kz * spec.rate) as isize
                                            - spec.padding as isize;
                                        let iy = (oy * spec.stride + ky * spec.rate) as isize
                                            - spec.padding as isize;
                                        let ix = (ox * spec.stride + kx * spec.rate) as isize
                                            - spec.padding as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        acc += input.get(
                                            ni,
                                            ci,
                                            iz as usize,
                                            iy as usize,
                                            ix as usize,
                                        ) * weights.get(co, ci, kz, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set(ni, co, oz, oy, ox, acc);
                    }
                }
            }
        }
    }
    out
}

/// Spreads a kernel by inserting `rate - 1` zeros between neighboring taps.
pub fn zero_inserted_kernel(weights: &Tensor5<f64>, rate: usize) -> Tensor5<f64> {
    let [co, ci, k, _, _] = weights.shape();
    let kd = k + (k - 1) * (rate - 1);
    let mut out = Tensor5::zeros([co, ci, kd, kd, kd]);
    for a in 0..co {
        for b in 0..ci {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        out.set(
                            a,
                            b,
                            kz * rate,
                            ky * rate,
                            kx * rate,
                            weights.get(a, b, kz, ky, kx),
                        );
                    }
                }
            }
        }
    }
    out
}

/// Dense `L = D - W` over the mask's in-mask voxels in lexicographic order,
/// built by scanning voxel pairs (independently of the stencil code).
pub fn dense_laplacian(mask: &BrainMask) -> DMatrix<f64> {
    let voxels: Vec<usize> = (0..mask.inside.len()).filter(|&v| mask.inside[v]).collect();
    let index: std::collections::HashMap<usize, usize> =
        voxels.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let n = voxels.len();
    let [d, h, w] = mask.dims;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for (i, &v) in voxels.iter().enumerate() {
        let z = v / (h * w);
        let y = (v / w) % h;
        let x = v % w;
        let mut neighbors = Vec::new();
        if z > 0 {
            neighbors.push(v - h * w);
        }
        if z + 1 < d {
            neighbors.push(v + h * w);
        }
        if y > 0 {
            neighbors.push(v - w);
        }
        if y + 1 < h {
            neighbors.push(v + w);
        }
        if x > 0 {
            neighbors.push(v - 1);
        }
        if x + 1 < w {
            neighbors.push(v + 1);
        }
        for nb in neighbors {
            if let Some(&j) = index.get(&nb) {
                m[(i, j)] = -1.0;
                m[(i, i)] += 1.0;
            }
        }
    }
    m
}

/// Eigendecomposition of a dense symmetric matrix, ascending eigenvalues.
pub fn dense_sym_eig(m: &DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (values, vectors)
}

/// Random connected mask grown by seeded BFS from the grid center.
pub fn random_connected_mask(dims: [usize; 3], target: usize, seed: u64) -> BrainMask {
    let [d, h, w] = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inside = vec![false; d * h * w];
    let start = ((d / 2) * h + h / 2) * w + w / 2;
    inside[start] = true;
    let mut frontier = vec![start];
    let mut count = 1;
    while count < target && !frontier.is_empty() {
        let pick = rng.random_range(0..frontier.len());
        let v = frontier.swap_remove(pick);
        let z = v / (h * w);
        let y = (v / w) % h;
        let x = v % w;
        let mut candidates = Vec::new();
        if z > 0 {
            candidates.push(v - h * w);
        }
        if z + 1 < d {
            candidates.push(v + h * w);
        }
        if y > 0 {
            candidates.push(v - w);
        }
        if y + 1 < h {
            candidates.push(v + w);
        }
        if x > 0 {
            candidates.push(v - 1);
        }
        if x + 1 < w {
            candidates.push(v + 1);
        }
        let mut added_any = false;
        for nb in candidates {
            if !inside[nb] {
                if rng.random_range(0..100) < 70 {
                    inside[nb] = true;
                    count += 1;
                    frontier.push(nb);
                    added_any = true;
                    if count >= target {
                        break;
                    }
                } else {
                    added_any = true; // still revisit later
                }
            }
        }
        if added_any {
            frontier.push(v);
        }
    }
    BrainMask::new(dims, inside)
}

/// Angle between two unit-ish vectors, minimized over sign.
pub fn angle_up_to_sign(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let c = (dot / (na * nb)).abs().min(1.0);
    c.acos()
}
