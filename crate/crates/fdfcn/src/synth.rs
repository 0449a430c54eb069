//! Synthetic labeled phantoms for desk-scale training and evaluation.
//!
//! Each phantom is an ellipsoidal "head" containing four geometric
//! structures (two ellipsoids, a box, a slab) with class-specific intensity
//! bands plus noise. Positions and sizes jitter with the seed, so distinct
//! seeds act as distinct subjects from one generator.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::spectral::BrainMask;
use crate::volume::{IntensityVolume, LabelVolume};

pub const SYNTH_CLASSES: usize = 5; // background + 4 structures

pub struct Phantom {
    pub intensity: IntensityVolume,
    pub labels: LabelVolume,
    pub mask: BrainMask,
}

/// Generates one phantom of edge length `edge`.
pub fn phantom(edge: usize, seed: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = edge * edge * edge;
    let mut labels = vec![0u16; n];
    let mut inside = vec![false; n];
    let mut intensity = vec![0f32; n];

    let e = edge as f64;
    let c = e / 2.0;
    let jitter = |rng: &mut ChaCha8Rng, span: f64| rng.random_range(-span..span);

    // head ellipsoid
    let head_r = [c * 0.92, c * 0.85, c * 0.88];
    let head_c = [
        c + jitter(&mut rng, e * 0.02),
        c + jitter(&mut rng, e * 0.02),
        c,
    ];

    // structure geometry, jittered per seed
    let s1_c = [
        c * 0.6 + jitter(&mut rng, e * 0.04),
        c * 0.8 + jitter(&mut rng, e * 0.04),
        c * 0.9 + jitter(&mut rng, e * 0.04),
    ];
    let s1_r = [e * 0.16, e * 0.13, e * 0.14];
    let s2_c = [
        c * 1.4 + jitter(&mut rng, e * 0.04),
        c * 1.1 + jitter(&mut rng, e * 0.04),
        c * 1.0 + jitter(&mut rng, e * 0.04),
    ];
    let s2_r = [e * 0.12, e * 0.15, e * 0.12];
    let box_lo = [
        (c * 0.75 + jitter(&mut rng, e * 0.03)) as usize,
        (c * 1.25 + jitter(&mut rng, e * 0.03)) as usize,
        (c * 0.55 + jitter(&mut rng, e * 0.03)) as usize,
    ];
    let box_edge = (e * 0.22) as usize;
    let slab_z = (c * 1.42 + jitter(&mut rng, e * 0.03)) as usize;
    let slab_h = (e * 0.14).max(3.0) as usize;

    let in_ellipsoid = |p: [usize; 3], ctr: [f64; 3], r: [f64; 3]| {
        let mut acc = 0.0;
        for a in 0..3 {
            let d = (p[a] as f64 - ctr[a]) / r[a];
            acc += d * d;
        }
        acc <= 1.0
    };

    let means = [20.0f32, 90.0, 140.0, 190.0, 240.0];
    for z in 0..edge {
        for y in 0..edge {
            for x in 0..edge {
                let i = (z * edge + y) * edge + x;
                let p = [z, y, x];
                if !in_ellipsoid(p, head_c, head_r) {
                    continue;
                }
                inside[i] = true;
                let class = if in_ellipsoid(p, s1_c, s1_r) {
                    1
                } else if in_ellipsoid(p, s2_c, s2_r) {
                    2
                } else if (box_lo[0]..box_lo[0] + box_edge).contains(&z)
                    && (box_lo[1]..box_lo[1] + box_edge).contains(&y)
                    && (box_lo[2]..box_lo[2] + box_edge).contains(&x)
                {
                    3
                } else if (slab_z..slab_z + slab_h).contains(&z)
                    && in_ellipsoid(
                        p,
                        [head_c[0], head_c[1], head_c[2]],
                        [head_r[0] * 0.9, head_r[1] * 0.62, head_r[2] * 0.62],
                    )
                {
                    4
                } else {
                    0
                };
                labels[i] = class;
                let noise: f32 = rng.random_range(-6.0..6.0);
                intensity[i] = (means[class as usize] + noise).clamp(0.0, 255.0);
            }
        }
    }

    let dims = [edge, edge, edge];
    Phantom {
        intensity: IntensityVolume {
            dims,
            data: intensity,
            spacing: [1.0; 3],
        },
        labels: LabelVolume { dims, data: labels },
        mask: BrainMask::new(dims, inside),
    }
}
