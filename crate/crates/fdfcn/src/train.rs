//! Adam optimization with a polynomial learning-rate schedule, the epoch
//! loop, validation-based checkpoint selection and cross-validation splits.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::infer::{plan_tiles, segment_volume, InferError, MetricsReport, NetworkPredictor};
use crate::net::checkpoint::{Checkpoint, OptimizerSnapshot};
use crate::net::params::{Gradients, ParamValue, Parameters};
use crate::net::{build, NetError, NetworkConfig};
use crate::patch::{epoch_batches, extract_sample, sample_centers, stack_batch, SamplerConfig};
use crate::spectral::{solve_spectral_downsampled, BrainMask, SpectralCoordinates, SpectralError};
use crate::tensor::{softmax_cross_entropy, softmax_cross_entropy_backward, Mode, TensorError};
use crate::volume::{
    read_volume, remap_labels, IntensityVolume, LabelRemap, LabelVolume, VolumeError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("epoch {epoch} outside 0..={max}")]
    EpochOutOfRange { epoch: usize, max: usize },
    #[error("cross-validation needs exactly 18 subjects, got {0}")]
    WrongSubjectCount(usize),
    #[error("missing data for subject `{subject}`: {detail}")]
    DataMissing { subject: String, detail: String },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        last_good: Box<Option<Checkpoint>>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Base learning rate.
    pub lr: f64,
    /// Schedule horizon; the rate reaches zero here.
    pub max_epochs: usize,
    /// Polynomial decay exponent.
    pub power: f64,
    /// Epochs actually run (the default run length).
    pub stop_epoch: usize,
    /// Optional early-stop patience in epochs without improvement.
    pub patience: Option<usize>,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// L2 penalty added to gradients; 0 disables.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Validate every this many epochs (the final epoch always validates).
    pub val_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            max_epochs: 50,
            power: 0.9,
            stop_epoch: 15,
            patience: None,
            batch: 60,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 42,
            weight_decay: 0.0,
            grad_clip: 0.0,
            val_interval: 1,
        }
    }
}

/// `lr * (1 - epoch/max_epochs)^power`, evaluated exactly.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64, TrainError> {
    if epoch > cfg.max_epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            max: cfg.max_epochs,
        });
    }
    let frac = 1.0 - epoch as f64 / cfg.max_epochs as f64;
    Ok(cfg.lr * frac.powf(cfg.power))
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub first: Vec<ParamValue<f32>>,
    pub second: Vec<ParamValue<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn zeros(params: &Parameters<f32>) -> Self {
        let zero: Vec<ParamValue<f32>> = params
            .layout()
            .specs()
            .iter()
            .map(|s| ParamValue::zeros(&s.shape))
            .collect();
        OptimizerState {
            first: zero.clone(),
            second: zero,
            step: 0,
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            first: self.first.clone(),
            second: self.second.clone(),
            step: self.step,
        }
    }

    pub fn from_snapshot(snap: OptimizerSnapshot) -> Self {
        OptimizerState {
            first: snap.first,
            second: snap.second,
            step: snap.step,
        }
    }
}

/// One bias-corrected Adam step over every learnable parameter. The step
/// counter increments exactly once per call; running statistics are left
/// untouched.
pub fn adam_step(
    params: &mut Parameters<f32>,
    grads: &Gradients<f32>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let layout = params.layout().clone();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in layout.ids() {
        if !layout.spec(id).learnable {
            continue;
        }
        let g = grads.value(id).as_slice();
        if g.len() != params.value(id).len() {
            return Err(TensorError::ShapeMismatch(format!(
                "gradient length {} vs parameter `{}` length {}",
                g.len(),
                layout.spec(id).name,
                params.value(id).len()
            ))
            .into());
        }
        let m = state.first[id.0].as_mut_slice();
        let v = state.second[id.0].as_mut_slice();
        let p = params.value_mut(id).as_mut_slice();
        for i in 0..p.len() {
            let gi = g[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p[i] = (p[i] as f64 - lr * m_hat / (v_hat.sqrt() + cfg.epsilon)) as f32;
        }
    }
    Ok(())
}

/// One cross-validation fold: disjoint subject-id lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Nine folds over exactly 18 subjects: each subject is tested exactly once;
/// each fold trains on 14, validates on 2 and tests on 2. Deterministic for
/// a fixed seed.
pub fn cv_splits(subjects: &[String], seed: u64) -> Result<Vec<FoldSplit>, TrainError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if subjects.len() != 18 {
        return Err(TrainError::WrongSubjectCount(subjects.len()));
    }
    let mut order: Vec<String> = subjects.to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let pair = |k: usize| [order[2 * k].clone(), order[2 * k + 1].clone()];
    let mut folds = Vec::with_capacity(9);
    for k in 0..9 {
        let test = pair(k);
        let val = pair((k + 1) % 9);
        let train: Vec<String> = order
            .iter()
            .filter(|s| !test.contains(s) && !val.contains(s))
            .cloned()
            .collect();
        folds.push(FoldSplit {
            fold: k,
            train,
            val: val.to_vec(),
            test: test.to_vec(),
        });
    }
    Ok(folds)
}

/// One subject's volumes, remapped labels, mask and coordinates.
pub struct SubjectData {
    pub id: String,
    pub intensity: IntensityVolume,
    pub labels: LabelVolume,
    pub mask: BrainMask,
    pub coords: SpectralCoordinates,
}

impl SubjectData {
    /// Assembles a subject from in-memory volumes, computing coordinates.
    pub fn assemble(
        id: impl Into<String>,
        intensity: IntensityVolume,
        labels: LabelVolume,
        mask: BrainMask,
        coord_downsample: usize,
    ) -> Result<Self, TrainError> {
        let coords = solve_spectral_downsampled(&mask, 3, 1e-6, 200, coord_downsample)?;
        Ok(SubjectData {
            id: id.into(),
            intensity,
            labels,
            mask,
            coords,
        })
    }
}

fn subject_file(dir: &Path, id: &str, stem: &str) -> Result<PathBuf, TrainError> {
    for ext in ["nii", "rv3"] {
        let p = dir.join(id).join(format!("{stem}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(TrainError::DataMissing {
        subject: id.to_string(),
        detail: format!(
            "no {stem}.nii or {stem}.rv3 under {}",
            dir.join(id).display()
        ),
    })
}

/// Loads `<dir>/<id>/{t1,labels,mask}.{nii|rv3}`, remaps the labels and
/// computes spectral coordinates.
pub fn load_subject(
    dir: &Path,
    id: &str,
    remap: &LabelRemap,
    coord_downsample: usize,
) -> Result<SubjectData, TrainError> {
    let intensity = read_volume(&subject_file(dir, id, "t1")?)?.to_intensity();
    let labels = read_volume(&subject_file(dir, id, "labels")?)?.to_labels()?;
    let labels = remap_labels(&labels, remap)?;
    let mask_volume = read_volume(&subject_file(dir, id, "mask")?)?;
    let mask = match &mask_volume.data {
        crate::volume::VolumeData::U8(v) => BrainMask::from_nonzero(mask_volume.header.dims, v),
        crate::volume::VolumeData::I16(v) => BrainMask::from_nonzero(mask_volume.header.dims, v),
        crate::volume::VolumeData::F32(v) => BrainMask::new(
            mask_volume.header.dims,
            v.iter().map(|&x| x != 0.0).collect(),
        ),
    };
    SubjectData::assemble(id, intensity, labels, mask, coord_downsample)
}

/// One row of the training log.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Per-structure validation Dice (NaN outside validation epochs).
    pub dice: Vec<f64>,
    pub mean_dice: f64,
}

impl EpochLog {
    /// Tab-separated line: epoch, lr, mean loss, per-structure Dice, mean.
    pub fn to_tsv(&self) -> String {
        let mut fields = vec![
            self.epoch.to_string(),
            format!("{:.8}", self.lr),
            format!("{:.6}", self.mean_loss),
        ];
        fields.extend(self.dice.iter().map(|d| format!("{d:.4}")));
        fields.push(format!("{:.4}", self.mean_dice));
        fields.join("\t")
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn validate(
    net: &crate::net::Network,
    params: &Parameters<f32>,
    subjects: &[&SubjectData],
    classes: usize,
    batch: usize,
) -> Result<(Vec<f64>, f64), TrainError> {
    let cfg = net.config();
    let mut per_class = vec![0.0; classes - 1];
    for s in subjects {
        let plan = plan_tiles(s.intensity.dims, cfg.input_edge, cfg.output_edge);
        let predictor = NetworkPredictor { net, params };
        let pred = segment_volume(&predictor, &s.intensity, &s.coords, &plan, batch)?;
        let report = MetricsReport::compute(&pred, &s.labels, classes)?;
        for (acc, row) in per_class.iter_mut().zip(&report.rows) {
            *acc += row.dice;
        }
    }
    let n = subjects.len().max(1) as f64;
    for v in per_class.iter_mut() {
        *v /= n;
    }
    let mean = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
    Ok((per_class, mean))
}

/// Trains on in-memory subjects. Centers are drawn once per training volume
/// before the first epoch and reshuffled (not redrawn) each epoch. The best
/// checkpoint by mean validation Dice is retained; with no validation
/// subjects the lowest-loss epoch wins.
pub fn train_on_subjects(
    train_subjects: &[&SubjectData],
    val_subjects: &[&SubjectData],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
) -> Result<TrainOutcome, TrainError> {
    assert!(cfg.stop_epoch >= 1 && cfg.stop_epoch <= cfg.max_epochs);
    let (net, mut params) = build::<f32>(net_cfg, cfg.seed)?;
    let mut opt = OptimizerState::zeros(&params);

    // (subject index, center) pairs, fixed for the whole run
    let mut centers: Vec<(usize, [usize; 3])> = Vec::new();
    for (si, s) in train_subjects.iter().enumerate() {
        let subject_sampler = SamplerConfig {
            seed: mix_seed(sampler.seed, si as u64 + 1),
            ..sampler.clone()
        };
        for (center, _) in sample_centers(&s.labels, net_cfg.classes, &subject_sampler) {
            centers.push((si, center));
        }
    }
    if centers.is_empty() {
        return Err(TrainError::DataMissing {
            subject: "<all>".into(),
            detail: "no foreground voxels to sample".into(),
        });
    }

    let mut log: Vec<EpochLog> = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 0..cfg.stop_epoch {
        let lr = lr_at_epoch(cfg, epoch)?;
        let batches = epoch_batches(centers.len(), cfg.batch, mix_seed(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        for (step, batch_idx) in batches.iter().enumerate() {
            let samples: Vec<crate::patch::PatchSample> = batch_idx
                .iter()
                .map(|&i| {
                    let (si, center) = centers[i];
                    let s = &train_subjects[si];
                    extract_sample(
                        &s.intensity,
                        &s.labels,
                        &s.coords,
                        center,
                        net_cfg.input_edge,
                        net_cfg.output_edge,
                        si,
                    )
                })
                .collect();
            let refs: Vec<&crate::patch::PatchSample> = samples.iter().collect();
            let minibatch = stack_batch(&refs);

            let mut pass =
                net.forward(&params, &minibatch.inputs, &minibatch.coords, Mode::Train)?;
            let (loss, cache) = softmax_cross_entropy(&pass.logits, &minibatch.targets)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    last_good: Box::new(best.map(|(_, c)| c)),
                });
            }
            loss_sum += loss as f64;
            net.commit_stats(&mut pass, &mut params);

            let grad_logits = softmax_cross_entropy_backward(&cache, &minibatch.targets);
            let mut grads = Gradients::zeros(params.layout());
            net.backward(&params, &pass, &grad_logits, &mut grads)?;
            preprocess_gradients(&params, &mut grads, cfg);
            adam_step(&mut params, &grads, &mut opt, lr, cfg)?;
        }
        let mean_loss = loss_sum / batches.len() as f64;

        let last_epoch = epoch + 1 == cfg.stop_epoch;
        let validated =
            !val_subjects.is_empty() && (last_epoch || (epoch + 1) % cfg.val_interval.max(1) == 0);
        let (dice, mean_dice, score) = if validated {
            let (dice, mean) = validate(&net, &params, val_subjects, net_cfg.classes, cfg.batch)?;
            (dice, mean, mean)
        } else {
            (vec![f64::NAN; net_cfg.classes - 1], f64::NAN, -mean_loss)
        };
        log.push(EpochLog {
            epoch,
            lr,
            mean_loss,
            dice,
            mean_dice,
        });

        let improved = best.as_ref().map(|(s, _)| score > *s).unwrap_or(true);
        if improved {
            best = Some((
                score,
                Checkpoint {
                    config: net_cfg.clone(),
                    params: params.clone(),
                    optimizer: Some(opt.snapshot()),
                    epoch: epoch as u32,
                    seed: cfg.seed,
                    score,
                },
            ));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
        }
        if let Some(patience) = cfg.patience {
            if epochs_since_best >= patience {
                break;
            }
        }
    }

    let best = best.expect("at least one epoch ran").1;
    Ok(TrainOutcome { best, log })
}

fn preprocess_gradients(params: &Parameters<f32>, grads: &mut Gradients<f32>, cfg: &TrainConfig) {
    let layout = params.layout().clone();
    if cfg.weight_decay > 0.0 {
        let wd = cfg.weight_decay as f32;
        for id in layout.ids() {
            if !layout.spec(id).learnable {
                continue;
            }
            let p = params.value(id).as_slice().to_vec();
            for (g, pv) in grads.value_mut(id).as_mut_slice().iter_mut().zip(p) {
                *g += wd * pv;
            }
        }
    }
    if cfg.grad_clip > 0.0 {
        let mut sq = 0f64;
        for id in layout.ids() {
            if layout.spec(id).learnable {
                sq += grads
                    .value(id)
                    .as_slice()
                    .iter()
                    .map(|&g| (g as f64) * (g as f64))
                    .sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if norm > cfg.grad_clip {
            let scale = (cfg.grad_clip / norm) as f32;
            for id in layout.ids() {
                if layout.spec(id).learnable {
                    for g in grads.value_mut(id).as_mut_slice() {
                        *g *= scale;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::net::params::{Init, ParamLayout, ParamShape};

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0).unwrap(), 0.001);
        assert_eq!(lr_at_epoch(&cfg, 50).unwrap(), 0.0);
        let mid = lr_at_epoch(&cfg, 25).unwrap();
        let expected = 0.001 * 0.5f64.powf(0.9);
        assert!((mid - expected).abs() <= 1e-12 * expected);
        assert!((mid - 5.359e-4).abs() < 1e-6);
        assert!(matches!(
            lr_at_epoch(&cfg, 51),
            Err(TrainError::EpochOutOfRange { epoch: 51, max: 50 })
        ));
    }

    #[test]
    fn schedule_is_strictly_decreasing() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for epoch in 0..=50 {
            let lr = lr_at_epoch(&cfg, epoch).unwrap();
            assert!(lr < prev, "not decreasing at {epoch}");
            prev = lr;
        }
    }

    fn scalar_params() -> Parameters<f32> {
        let mut layout = ParamLayout::default();
        layout.push("w".into(), ParamShape::Vector(1), true, Init::Const(1.0));
        Parameters::init(Arc::new(layout), 0)
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut params = scalar_params();
        let grads = Gradients::zeros(params.layout());
        let mut state = OptimizerState::zeros(&params);
        let cfg = TrainConfig::default();
        adam_step(&mut params, &grads, &mut state, 0.001, &cfg).unwrap();
        let id = params.layout().id_of("w").unwrap();
        assert_eq!(params.vector(id), &[1.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_minus_lr_up_to_epsilon() {
        let mut params = scalar_params();
        let mut grads = Gradients::zeros(params.layout());
        let id = params.layout().id_of("w").unwrap();
        grads.add_vector(id, &[1.0]);
        let mut state = OptimizerState::zeros(&params);
        let cfg = TrainConfig::default();
        adam_step(&mut params, &grads, &mut state, 0.001, &cfg).unwrap();
        // bias-corrected m_hat / sqrt(v_hat) = 1, so the update is
        // -lr / (1 + eps) up to epsilon
        let got = params.vector(id)[0];
        assert!((got - (1.0 - 0.001)).abs() < 1e-7, "{got}");
    }

    #[test]
    fn adam_first_step_magnitude_is_bounded_by_lr() {
        let cfg = TrainConfig::default();
        for (i, g) in [1e-6f32, 0.01, 1.0, 50.0, -3.0].iter().enumerate() {
            let mut params = scalar_params();
            let mut grads = Gradients::zeros(params.layout());
            let id = params.layout().id_of("w").unwrap();
            grads.add_vector(id, &[*g]);
            let mut state = OptimizerState::zeros(&params);
            adam_step(&mut params, &grads, &mut state, 0.001, &cfg).unwrap();
            let moved = (params.vector(id)[0] as f64 - 1.0).abs();
            // slack: epsilon correction plus one f32 ulp of the stored value
            assert!(
                moved <= 0.001 * (1.0 + 1e-6) + 1.2e-7,
                "case {i}: moved {moved}"
            );
        }
    }

    #[test]
    fn adam_updates_are_deterministic() {
        let run = || {
            let mut params = scalar_params();
            let mut grads = Gradients::zeros(params.layout());
            let id = params.layout().id_of("w").unwrap();
            grads.add_vector(id, &[0.3]);
            let mut state = OptimizerState::zeros(&params);
            let cfg = TrainConfig::default();
            for _ in 0..10 {
                adam_step(&mut params, &grads, &mut state, 0.01, &cfg).unwrap();
            }
            params.vector(id)[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    fn subject_ids() -> Vec<String> {
        (0..18).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn cv_splits_partition_and_cover() {
        let folds = cv_splits(&subject_ids(), 7).unwrap();
        assert_eq!(folds.len(), 9);
        let mut tested: Vec<String> = Vec::new();
        for fold in &folds {
            assert_eq!(fold.train.len(), 14);
            assert_eq!(fold.val.len(), 2);
            assert_eq!(fold.test.len(), 2);
            let mut all: Vec<String> = fold
                .train
                .iter()
                .chain(&fold.val)
                .chain(&fold.test)
                .cloned()
                .collect();
            all.sort();
            let mut expected = subject_ids();
            expected.sort();
            assert_eq!(all, expected, "fold {} is not a partition", fold.fold);
            tested.extend(fold.test.iter().cloned());
        }
        tested.sort();
        let mut expected = subject_ids();
        expected.sort();
        assert_eq!(tested, expected, "every subject tested exactly once");
    }

    #[test]
    fn cv_splits_need_18_subjects() {
        let ids: Vec<String> = (0..17).map(|i| i.to_string()).collect();
        assert!(matches!(
            cv_splits(&ids, 0),
            Err(TrainError::WrongSubjectCount(17))
        ));
    }

    #[test]
    fn cv_splits_are_deterministic() {
        assert_eq!(
            cv_splits(&subject_ids(), 3).unwrap(),
            cv_splits(&subject_ids(), 3).unwrap()
        );
        assert_ne!(
            cv_splits(&subject_ids(), 3).unwrap(),
            cv_splits(&subject_ids(), 4).unwrap()
        );
    }

    #[test]
    fn log_line_is_tab_separated() {
        let row = EpochLog {
            epoch: 2,
            lr: 0.001,
            mean_loss: 1.5,
            dice: vec![0.5, 0.25],
            mean_dice: 0.375,
        };
        assert_eq!(
            row.to_tsv(),
            "2\t0.00100000\t1.500000\t0.5000\t0.2500\t0.3750"
        );
    }
}
