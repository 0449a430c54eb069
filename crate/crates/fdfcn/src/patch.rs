//! Class-balanced patch sampling, intensity normalization and minibatch
//! assembly.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::spectral::SpectralCoordinates;
use crate::tensor::{ClassTargets, Tensor5};
use crate::volume::{IntensityVolume, LabelVolume};

/// Patch sampling policy: at most `cap` centers per structure, doubled for
/// the classes in `doubled` (cortex and cerebral white matter by default).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub cap: usize,
    pub doubled: BTreeSet<u16>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        // class indices: 2 = WM, 3 = CT
        SamplerConfig {
            cap: 500,
            doubled: BTreeSet::from([2, 3]),
            seed: 0,
        }
    }
}

/// One training/inference unit: normalized intensity patch, coordinate
/// patch and label target, all centered at `center`.
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub center: [usize; 3],
    pub input: Tensor5<f32>,
    pub coords: Tensor5<f32>,
    pub target: ClassTargets,
    pub subject: usize,
}

/// Draws up to `cap_c` distinct voxel centers uniformly without replacement
/// per foreground structure `1..classes`, where `cap_c` doubles for the
/// configured classes. Deterministic for a fixed seed; empty structures
/// yield no samples.
pub fn sample_centers(
    labels: &LabelVolume,
    classes: usize,
    cfg: &SamplerConfig,
) -> Vec<([usize; 3], u16)> {
    let [d, h, w] = labels.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.data.iter().enumerate() {
        if c > 0 && (c as usize) < classes {
            by_class[c as usize].push(i);
        }
    }
    let mut out = Vec::new();
    for (class, voxels) in by_class.iter_mut().enumerate().skip(1) {
        let cap = if cfg.doubled.contains(&(class as u16)) {
            2 * cfg.cap
        } else {
            cfg.cap
        };
        let take = cap.min(voxels.len());
        if take == 0 {
            continue;
        }
        // partial Fisher-Yates: the first `take` entries are a uniform draw
        // without replacement
        for i in 0..take {
            let j = i + (rng.random_range(0..(voxels.len() - i) as u64) as usize);
            voxels.swap(i, j);
        }
        for &flat in voxels.iter().take(take) {
            let z = flat / (h * w);
            let y = (flat / w) % h;
            let x = flat % w;
            debug_assert!(z < d);
            out.push(([z, y, x], class as u16));
        }
    }
    out
}

fn crop_intensity(intensity: &IntensityVolume, center: [usize; 3], edge: usize) -> Tensor5<f32> {
    let mut out = Tensor5::zeros([1, 1, edge, edge, edge]);
    let half = (edge / 2) as isize;
    let [d, h, w] = intensity.dims;
    for dz in 0..edge {
        let z = center[0] as isize + dz as isize - half;
        if z < 0 || z >= d as isize {
            continue;
        }
        for dy in 0..edge {
            let y = center[1] as isize + dy as isize - half;
            if y < 0 || y >= h as isize {
                continue;
            }
            for dx in 0..edge {
                let x = center[2] as isize + dx as isize - half;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let raw = intensity.data[(z as usize * h + y as usize) * w + x as usize];
                out.set(0, 0, dz, dy, dx, (raw / 255.0).clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn crop_labels(labels: &LabelVolume, center: [usize; 3], edge: usize) -> ClassTargets {
    let mut out = vec![0u16; edge * edge * edge];
    let half = (edge / 2) as isize;
    let [d, h, w] = labels.dims;
    for dz in 0..edge {
        let z = center[0] as isize + dz as isize - half;
        if z < 0 || z >= d as isize {
            continue;
        }
        for dy in 0..edge {
            let y = center[1] as isize + dy as isize - half;
            if y < 0 || y >= h as isize {
                continue;
            }
            for dx in 0..edge {
                let x = center[2] as isize + dx as isize - half;
                if x < 0 || x >= w as isize {
                    continue;
                }
                out[(dz * edge + dy) * edge + dx] =
                    labels.data[(z as usize * h + y as usize) * w + x as usize];
            }
        }
    }
    ClassTargets::new([1, edge, edge, edge], out).expect("shape by construction")
}

/// Extracts one sample: intensity normalized by 255 into `[0, 1]`,
/// coordinate patch, and the label crop, all centered at `center`.
/// Out-of-volume voxels read as zero.
pub fn extract_sample(
    intensity: &IntensityVolume,
    labels: &LabelVolume,
    coords: &SpectralCoordinates,
    center: [usize; 3],
    input_edge: usize,
    output_edge: usize,
    subject: usize,
) -> PatchSample {
    PatchSample {
        center,
        input: crop_intensity(intensity, center, input_edge),
        coords: coords.extract_patch(center, output_edge),
        target: crop_labels(labels, center, output_edge),
        subject,
    }
}

/// A stacked minibatch.
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub inputs: Tensor5<f32>,
    pub coords: Tensor5<f32>,
    pub targets: ClassTargets,
}

/// Stacks samples along the batch axis.
pub fn stack_batch(samples: &[&PatchSample]) -> Minibatch {
    assert!(!samples.is_empty());
    let n = samples.len();
    let [_, ci, d, h, w] = samples[0].input.shape();
    let [_, cc, od, oh, ow] = samples[0].coords.shape();
    let mut inputs = Tensor5::zeros([n, ci, d, h, w]);
    let mut coords = Tensor5::zeros([n, cc, od, oh, ow]);
    let mut labels = Vec::with_capacity(n * od * oh * ow);
    let in_len = ci * d * h * w;
    let co_len = cc * od * oh * ow;
    for (i, s) in samples.iter().enumerate() {
        inputs.data_mut()[i * in_len..(i + 1) * in_len].copy_from_slice(s.input.data());
        coords.data_mut()[i * co_len..(i + 1) * co_len].copy_from_slice(s.coords.data());
        labels.extend_from_slice(&s.target.labels);
    }
    Minibatch {
        inputs,
        coords,
        targets: ClassTargets::new([n, od, oh, ow], labels).expect("shape by construction"),
    }
}

/// Shuffled index batches for one epoch: deterministic for a fixed seed, the
/// final short batch retained, and the union of batches exactly the input
/// index set.
pub fn epoch_batches(n_samples: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch >= 1);
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Epoch-wise reshuffle and stacking of whole samples.
pub fn make_minibatches(samples: &[PatchSample], batch: usize, seed: u64) -> Vec<Minibatch> {
    epoch_batches(samples.len(), batch, seed)
        .into_iter()
        .map(|idx| {
            let refs: Vec<&PatchSample> = idx.into_iter().map(|i| &samples[i]).collect();
            stack_batch(&refs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{solve_spectral, BrainMask};

    fn flat_labels(dims: [usize; 3], f: impl Fn([usize; 3]) -> u16) -> LabelVolume {
        let [d, h, w] = dims;
        let mut data = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(f([z, y, x]));
                }
            }
        }
        LabelVolume { dims, data }
    }

    #[test]
    fn caps_and_doubling() {
        // 2000 voxels of class 1, 2000 of class 3 (doubled), 300 of class 4
        let labels = flat_labels([20, 20, 20], |[z, y, _]| match z {
            0..=4 => 1,
            5..=9 => 3,
            10 if y < 15 => 4,
            _ => 0,
        });
        let cfg = SamplerConfig::default();
        let centers = sample_centers(&labels, 12, &cfg);
        let count = |cl: u16| centers.iter().filter(|(_, c)| *c == cl).count();
        assert_eq!(count(1), 500);
        assert_eq!(count(3), 1000);
        let class4_total = labels.data.iter().filter(|&&c| c == 4).count();
        assert!(class4_total < 500);
        assert_eq!(count(4), class4_total);
    }

    #[test]
    fn centers_are_distinct_and_correctly_labeled() {
        let labels = flat_labels([8, 8, 8], |[z, _, _]| if z < 4 { 1 } else { 2 });
        let cfg = SamplerConfig {
            cap: 100,
            doubled: BTreeSet::new(),
            seed: 9,
        };
        let centers = sample_centers(&labels, 12, &cfg);
        let mut seen = std::collections::HashSet::new();
        for ([z, y, x], c) in &centers {
            assert!(seen.insert((*z, *y, *x, *c)), "duplicate center");
            assert_eq!(labels.data[(z * 8 + y) * 8 + x], *c);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let labels = flat_labels([10, 10, 10], |[z, _, _]| (z % 3) as u16);
        let cfg = SamplerConfig {
            cap: 50,
            doubled: BTreeSet::new(),
            seed: 4,
        };
        assert_eq!(
            sample_centers(&labels, 12, &cfg),
            sample_centers(&labels, 12, &cfg)
        );
        let other = SamplerConfig {
            seed: 5,
            ..cfg.clone()
        };
        assert_ne!(
            sample_centers(&labels, 12, &cfg),
            sample_centers(&labels, 12, &other)
        );
    }

    fn toy_world() -> (IntensityVolume, LabelVolume, SpectralCoordinates) {
        let dims = [8, 8, 8];
        let intensity = IntensityVolume {
            dims,
            data: (0..512).map(|i| (i % 256) as f32).collect(),
            spacing: [1.0; 3],
        };
        let labels = flat_labels(dims, |[z, _, _]| if z >= 4 { 2 } else { 0 });
        let mask = BrainMask::new(dims, vec![true; 512]);
        let coords = solve_spectral(&mask, 3, 1e-6, 200).unwrap();
        (intensity, labels, coords)
    }

    #[test]
    fn extraction_normalizes_and_centers() {
        let (intensity, labels, coords) = toy_world();
        let s = extract_sample(&intensity, &labels, &coords, [4, 4, 4], 5, 3, 0);
        // raw 255 maps to 1.0
        let raw = intensity.data[(4 * 8 + 4) * 8 + 4];
        assert_eq!(s.input.get(0, 0, 2, 2, 2), raw / 255.0);
        // target center voxel equals labels[center]
        assert_eq!(s.target.labels[13], labels.data[(4 * 8 + 4) * 8 + 4]);
        assert!(s.input.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn corner_centers_zero_pad() {
        let (intensity, labels, coords) = toy_world();
        let s = extract_sample(&intensity, &labels, &coords, [0, 0, 0], 5, 3, 0);
        assert_eq!(s.input.get(0, 0, 0, 0, 0), 0.0);
        assert_eq!(s.target.labels[0], 0);
    }

    #[test]
    fn batch_partition_130_into_60s() {
        let batches = epoch_batches(130, 60, 3);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![60, 60, 10]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
    }

    #[test]
    fn single_sample_single_batch() {
        let batches = epoch_batches(1, 60, 0);
        assert_eq!(batches, vec![vec![0]]);
    }

    #[test]
    fn same_seed_same_order() {
        assert_eq!(epoch_batches(100, 7, 11), epoch_batches(100, 7, 11));
        assert_ne!(epoch_batches(100, 7, 11), epoch_batches(100, 7, 12));
    }

    #[test]
    fn stacked_batch_shapes() {
        let (intensity, labels, coords) = toy_world();
        let samples: Vec<PatchSample> = [[4, 4, 4], [3, 3, 3], [5, 5, 5]]
            .iter()
            .map(|&c| extract_sample(&intensity, &labels, &coords, c, 5, 3, 0))
            .collect();
        let batches = make_minibatches(&samples, 2, 1);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].inputs.shape(), [2, 1, 5, 5, 5]);
        assert_eq!(batches[0].coords.shape(), [2, 6, 3, 3, 3]);
        assert_eq!(batches[0].targets.shape, [2, 3, 3, 3]);
        assert_eq!(batches[1].inputs.shape(), [1, 1, 5, 5, 5]);
    }
}
