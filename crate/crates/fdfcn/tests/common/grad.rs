//! Finite-difference gradient checks for every layer type and for a tiny
//! end-to-end network, all on the 64-bit instantiation of the ops.
//!
//! Each check projects the op output onto a fixed random vector to get a
//! scalar loss, feeds the projection as the upstream gradient to the
//! analytic backward, and compares against central differences.

#![allow(dead_code)]

use fdfcn::layers::{CtdLayerConfig, DenseBlockConfig, FcLayerConfig, HdLayerConfig};
use fdfcn::net::params::Gradients;
use fdfcn::net::{build, Conv1Config, NetworkConfig};
use fdfcn::tensor::{
    batch_norm_backward, batch_norm_forward, center_crop, center_crop_backward, concat_channels,
    concat_channels_backward, conv3d_backward, conv3d_forward, elementwise_sum,
    elementwise_sum_backward, prelu_backward, prelu_forward, softmax_cross_entropy,
    softmax_cross_entropy_backward, BnState, ClassTargets, ConvSpec, Mode, Tensor5, BN_EPS,
    BN_MOMENTUM,
};

use super::{central_diff_check, random_tensor, random_vec};

fn project(out: &Tensor5<f64>, proj: &[f64]) -> f64 {
    out.data().iter().zip(proj).map(|(a, b)| a * b).sum()
}

fn proj_tensor(shape: [usize; 5], proj: &[f64]) -> Tensor5<f64> {
    Tensor5::from_vec(shape, proj.to_vec()).unwrap()
}

/// Worst relative error across input/weight/bias gradients of one conv.
pub fn check_conv3d(rate: usize, stride: usize, seed: u64, tol: f64) -> f64 {
    let (edge, padding) = if stride == 1 { (8, rate) } else { (7, 0) };
    let spec = ConvSpec {
        kernel: 3,
        stride,
        padding,
        rate,
        c_in: 2,
        c_out: 3,
    };
    let input = random_tensor::<f64>([2, 2, edge, edge, edge], seed);
    let weights = random_tensor::<f64>([3, 2, 3, 3, 3], seed + 1);
    let bias = random_vec(3, seed + 2);
    let out = conv3d_forward(&input, &weights, &bias, &spec).unwrap();
    let proj = random_vec(out.len(), seed + 3);
    let grad_out = proj_tensor(out.shape(), &proj);
    let (gi, gw, gb) = conv3d_backward(&input, &weights, &spec, &grad_out).unwrap();

    let mut worst = 0.0f64;
    let mut theta = input.data().to_vec();
    let shape = input.shape();
    worst = worst.max(central_diff_check(
        &mut theta,
        &mut |t| {
            let x = Tensor5::from_vec(shape, t.to_vec()).unwrap();
            project(&conv3d_forward(&x, &weights, &bias, &spec).unwrap(), &proj)
        },
        gi.data(),
        24,
        seed + 4,
        tol,
        &format!("conv3d r={rate} s={stride} input"),
    ));
    let mut theta = weights.data().to_vec();
    let wshape = weights.shape();
    worst = worst.max(central_diff_check(
        &mut theta,
        &mut |t| {
            let wt = Tensor5::from_vec(wshape, t.to_vec()).unwrap();
            project(&conv3d_forward(&input, &wt, &bias, &spec).unwrap(), &proj)
        },
        gw.data(),
        24,
        seed + 5,
        tol,
        &format!("conv3d r={rate} s={stride} weights"),
    ));
    let mut theta = bias.clone();
    worst = worst.max(central_diff_check(
        &mut theta,
        &mut |t| project(&conv3d_forward(&input, &weights, t, &spec).unwrap(), &proj),
        &gb,
        24,
        seed + 6,
        tol,
        &format!("conv3d r={rate} s={stride} bias"),
    ));
    worst
}

pub fn check_batch_norm(mode: Mode, seed: u64, tol: f64) -> f64 {
    let input = random_tensor::<f64>([3, 4, 4, 4, 4], seed);
    let mut state = BnState::identity(4);
    state.gamma = random_vec(4, seed + 1)
        .iter()
        .map(|v| 1.0 + 0.3 * v)
        .collect();
    state.beta = random_vec(4, seed + 2);
    state.running_mean = random_vec(4, seed + 3).iter().map(|v| 0.2 * v).collect();
    state.running_var = random_vec(4, seed + 4)
        .iter()
        .map(|v| 1.0 + 0.4 * v.abs())
        .collect();
    let fwd = |x: &Tensor5<f64>, st: &BnState<f64>| {
        batch_norm_forward(x, st, mode, BN_EPS, BN_MOMENTUM)
            .unwrap()
            .0
    };
    let out = fwd(&input, &state);
    let proj = random_vec(out.len(), seed + 5);
    let grad_out = proj_tensor(out.shape(), &proj);
    let (_, cache, _) = batch_norm_forward(&input, &state, mode, BN_EPS, BN_MOMENTUM).unwrap();
    let (gi, gg, gb) = batch_norm_backward(&input, &state, &cache, &grad_out).unwrap();

    let label = format!("batch_norm {mode:?}");
    let mut worst = 0.0f64;
    let mut theta = input.data().to_vec();
    let shape = input.shape();
    worst = worst.max(central_diff_check(
        &mut theta,
        &mut |t| {
            project(
                &fwd(&Tensor5::from_vec(shape, t.to_vec()).unwrap(), &state),
                &proj,
            )
        },
        gi.data(),
        24,
        seed + 6,
        tol,
        &format!("{label} input"),
    ));
    let mut theta = state.gamma.clone();
    worst = worst.max(central_diff_check(
        &mut theta,
        &mut |t| {
            let st = BnState {
                gamma: t.to_vec(),
                ..state.clone()
            };
            project(&fwd(&input, &st), &proj)
        },
        &gg,
        24,
        seed + 7,
        tol,
        &format!("{label} gamma"),
    ));
    let mut theta = state.beta.clone();
    worst = worst.max(central_diff_check(
        &mut theta,
        &mut |t| {
            let st = BnState {
                beta: t.to_vec(),
                ..state.clone()
            };
            project(&fwd(&input, &st), &proj)
        },
        &gb,
        24,
        seed + 8,
        tol,
        &format!("{label} beta"),
    ));
    worst
}

pub fn check_prelu(seed: u64, tol: f64) -> f64 {
    let input = random_tensor::<f64>([2, 3, 4, 4, 4], seed);
    let slopes = vec![0.25, 0.1, 0.7];
    let out = prelu_forward(&input, &slopes).unwrap();
    let proj = random_vec(out.len(), seed + 1);
    let grad_out = proj_tensor(out.shape(), &proj);
    let (gi, gs) = prelu_backward(&input, &slopes, &grad_out).unwrap();

    let mut worst = 0.0f64;
    let mut theta = input.data().to_vec();
    let shape = input.shape();
    worst = worst.max(central_diff_check(
        &mut theta,
        &mut |t| {
            project(
                &prelu_forward(&Tensor5::from_vec(shape, t.to_vec()).unwrap(), &slopes).unwrap(),
                &proj,
            )
        },
        gi.data(),
        24,
        seed + 2,
        tol,
        "prelu input",
    ));
    let mut theta = slopes.clone();
    worst = worst.max(central_diff_check(
        &mut theta,
        &mut |t| project(&prelu_forward(&input, t).unwrap(), &proj),
        &gs,
        24,
        seed + 3,
        tol,
        "prelu slopes",
    ));
    worst
}

pub fn check_concat(seed: u64, tol: f64) -> f64 {
    let a = random_tensor::<f64>([2, 3, 3, 3, 3], seed);
    let b = random_tensor::<f64>([2, 2, 3, 3, 3], seed + 1);
    let out = concat_channels(&[&a, &b]).unwrap();
    let proj = random_vec(out.len(), seed + 2);
    let grad_out = proj_tensor(out.shape(), &proj);
    let parts = concat_channels_backward(&grad_out, &[3, 2]).unwrap();

    let mut worst = 0.0f64;
    for (idx, primal) in [&a, &b].into_iter().enumerate() {
        let mut theta = primal.data().to_vec();
        let shape = primal.shape();
        worst = worst.max(central_diff_check(
            &mut theta,
            &mut |t| {
                let x = Tensor5::from_vec(shape, t.to_vec()).unwrap();
                let ins = if idx == 0 { [&x, &b] } else { [&a, &x] };
                project(&concat_channels(&ins).unwrap(), &proj)
            },
            parts[idx].data(),
            24,
            seed + 3 + idx as u64,
            tol,
            &format!("concat input {idx}"),
        ));
    }
    worst
}

pub fn check_crop(seed: u64, tol: f64) -> f64 {
    let input = random_tensor::<f64>([1, 2, 7, 7, 7], seed);
    let out = center_crop(&input, 3).unwrap();
    let proj = random_vec(out.len(), seed + 1);
    let grad_out = proj_tensor(out.shape(), &proj);
    let gi = center_crop_backward(&grad_out, input.spatial()).unwrap();

    let mut theta = input.data().to_vec();
    let shape = input.shape();
    central_diff_check(
        &mut theta,
        &mut |t| {
            project(
                &center_crop(&Tensor5::from_vec(shape, t.to_vec()).unwrap(), 3).unwrap(),
                &proj,
            )
        },
        gi.data(),
        48,
        seed + 2,
        tol,
        "center_crop input",
    )
}

pub fn check_sum(seed: u64, tol: f64) -> f64 {
    let tensors: Vec<Tensor5<f64>> = (0..3)
        .map(|i| random_tensor([2, 2, 3, 3, 3], seed + i))
        .collect();
    let refs: Vec<&Tensor5<f64>> = tensors.iter().collect();
    let out = elementwise_sum(&refs).unwrap();
    let proj = random_vec(out.len(), seed + 10);
    let grad_out = proj_tensor(out.shape(), &proj);
    let grads = elementwise_sum_backward(&grad_out, 3);

    let mut worst = 0.0f64;
    for idx in 0..3 {
        let mut theta = tensors[idx].data().to_vec();
        let shape = tensors[idx].shape();
        worst = worst.max(central_diff_check(
            &mut theta,
            &mut |t| {
                let x = Tensor5::from_vec(shape, t.to_vec()).unwrap();
                let mut ins: Vec<&Tensor5<f64>> = tensors.iter().collect();
                ins[idx] = &x;
                project(&elementwise_sum(&ins).unwrap(), &proj)
            },
            grads[idx].data(),
            16,
            seed + 20 + idx as u64,
            tol,
            &format!("sum input {idx}"),
        ));
    }
    worst
}

pub fn check_softmax_ce(seed: u64, tol: f64) -> f64 {
    let logits = random_tensor::<f64>([2, 5, 3, 3, 3], seed);
    let n_vox = 2 * 27;
    let labels: Vec<u16> = random_vec(n_vox, seed + 1)
        .iter()
        .map(|v| ((v.abs() * 5.0) as u16).min(4))
        .collect();
    let targets = ClassTargets::new([2, 3, 3, 3], labels).unwrap();
    let (_, cache) = softmax_cross_entropy(&logits, &targets).unwrap();
    let grad = softmax_cross_entropy_backward(&cache, &targets);

    let mut theta = logits.data().to_vec();
    let shape = logits.shape();
    central_diff_check(
        &mut theta,
        &mut |t| {
            let x = Tensor5::from_vec(shape, t.to_vec()).unwrap();
            softmax_cross_entropy(&x, &targets).unwrap().0
        },
        grad.data(),
        48,
        seed + 2,
        tol,
        "softmax_cross_entropy logits",
    )
}

/// Tiny but complete network used by the end-to-end check.
pub fn grad_check_config() -> NetworkConfig {
    let fe = DenseBlockConfig::hd(
        HdLayerConfig {
            growth: 3,
            kernel: 3,
            rates: vec![1, 2],
        },
        1,
    );
    NetworkConfig {
        input_edge: 15,
        output_edge: 3,
        classes: 3,
        coord_channels: 6,
        conv1: Conv1Config {
            kernel: 3,
            padding: 1,
            stride: 1,
            channels: 4,
        },
        fe_blocks: vec![fe.clone(), fe.clone(), fe.clone(), fe],
        td_layers: vec![
            CtdLayerConfig {
                kernel: 3,
                stride: 2,
                padding: 0,
                channel_increase: 2,
            },
            CtdLayerConfig {
                kernel: 3,
                stride: 1,
                padding: 0,
                channel_increase: 2,
            },
            CtdLayerConfig {
                kernel: 3,
                stride: 1,
                padding: 0,
                channel_increase: 2,
            },
        ],
        multiscale_taps: vec![1, 2, 3],
        fc_block: DenseBlockConfig::fc(FcLayerConfig { growth: 4 }, 2),
    }
}

/// End-to-end check: cross-entropy loss of a tiny network against central
/// differences for every learnable parameter array. Returns the worst
/// relative error.
pub fn check_end_to_end(seed: u64, tol: f64, samples_per_array: usize) -> f64 {
    let cfg = grad_check_config();
    let (net, mut params) = build::<f64>(&cfg, seed).unwrap();
    let input = random_tensor::<f64>([1, 1, 15, 15, 15], seed + 1);
    let coords = random_tensor::<f64>([1, 6, 3, 3, 3], seed + 2);
    let labels: Vec<u16> = random_vec(27, seed + 3)
        .iter()
        .map(|v| ((v.abs() * 3.0) as u16).min(2))
        .collect();
    let targets = ClassTargets::new([1, 3, 3, 3], labels).unwrap();

    let pass = net.forward(&params, &input, &coords, Mode::Train).unwrap();
    let (_, cache) = softmax_cross_entropy(&pass.logits, &targets).unwrap();
    let grad_logits = softmax_cross_entropy_backward(&cache, &targets);
    let mut grads = Gradients::zeros(params.layout());
    net.backward(&params, &pass, &grad_logits, &mut grads)
        .unwrap();

    let layout = params.layout().clone();
    let mut worst = 0.0f64;
    for id in layout.ids() {
        let spec = layout.spec(id);
        if !spec.learnable {
            continue;
        }
        let analytic = grads.value(id).as_slice().to_vec();
        let mut theta = params.value(id).as_slice().to_vec();
        let name = spec.name.clone();
        let mut eval = |t: &[f64]| {
            params.value_mut(id).as_mut_slice().copy_from_slice(t);
            let pass = net.forward(&params, &input, &coords, Mode::Train).unwrap();
            softmax_cross_entropy(&pass.logits, &targets).unwrap().0
        };
        worst = worst.max(central_diff_check(
            &mut theta,
            &mut eval,
            &analytic,
            samples_per_array,
            seed ^ (id.index() as u64),
            tol,
            &format!("end-to-end {name}"),
        ));
        params.value_mut(id).as_mut_slice().copy_from_slice(&theta);
    }
    worst
}

/// Every learnable parameter receives a nonzero gradient for generic input.
pub fn dead_path_scan(seed: u64) -> Vec<String> {
    let cfg = grad_check_config();
    let (net, params) = build::<f64>(&cfg, seed).unwrap();
    let input = random_tensor::<f64>([2, 1, 15, 15, 15], seed + 1);
    let coords = random_tensor::<f64>([2, 6, 3, 3, 3], seed + 2);
    let labels: Vec<u16> = random_vec(54, seed + 3)
        .iter()
        .map(|v| ((v.abs() * 3.0) as u16).min(2))
        .collect();
    let targets = ClassTargets::new([2, 3, 3, 3], labels).unwrap();
    let pass = net.forward(&params, &input, &coords, Mode::Train).unwrap();
    let (_, cache) = softmax_cross_entropy(&pass.logits, &targets).unwrap();
    let grad_logits = softmax_cross_entropy_backward(&cache, &targets);
    let mut grads = Gradients::zeros(params.layout());
    net.backward(&params, &pass, &grad_logits, &mut grads)
        .unwrap();

    let layout = params.layout().clone();
    layout
        .ids()
        .filter(|&id| layout.spec(id).learnable)
        .filter(|&id| grads.value(id).as_slice().iter().all(|&g| g == 0.0))
        .map(|id| layout.spec(id).name.clone())
        .collect()
}
