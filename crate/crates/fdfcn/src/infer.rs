//! Whole-volume segmentation by patch tiling, and Dice/IoU evaluation.

use thiserror::Error;

use crate::net::params::Parameters;
use crate::net::{NetError, Network};
use crate::spectral::SpectralCoordinates;
use crate::tensor::{Mode, Tensor5, TensorError};
use crate::volume::{IntensityVolume, LabelVolume, CLASS_ACRONYMS};

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Disjoint tiling of a volume into output-edge cubes: each axis is padded
/// up to the next multiple of the output edge (padding is cropped after
/// stitching), and every original voxel is covered by exactly one tile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub dims: [usize; 3],
    pub padded: [usize; 3],
    pub input_edge: usize,
    pub output_edge: usize,
    /// Tile centers in the padded grid, lexicographic by axis.
    pub centers: Vec<[usize; 3]>,
}

/// Plans the tiling for `dims` with the given patch geometry.
pub fn plan_tiles(dims: [usize; 3], input_edge: usize, output_edge: usize) -> TilePlan {
    assert!(output_edge >= 1 && input_edge >= output_edge);
    let tiles: Vec<usize> = dims.iter().map(|&d| d.div_ceil(output_edge)).collect();
    let padded = [
        tiles[0] * output_edge,
        tiles[1] * output_edge,
        tiles[2] * output_edge,
    ];
    let half = output_edge / 2;
    let mut centers = Vec::with_capacity(tiles.iter().product());
    for tz in 0..tiles[0] {
        for ty in 0..tiles[1] {
            for tx in 0..tiles[2] {
                centers.push([
                    tz * output_edge + half,
                    ty * output_edge + half,
                    tx * output_edge + half,
                ]);
            }
        }
    }
    TilePlan {
        dims,
        padded,
        input_edge,
        output_edge,
        centers,
    }
}

/// Anything that can classify a batch of tiles. The network is the real
/// implementation; tests inject stubs to check coverage and ordering.
pub trait TilePredictor {
    fn classes(&self) -> usize;
    /// Returns logits of shape `(n, classes, oe, oe, oe)` for the batch.
    fn predict(
        &self,
        inputs: &Tensor5<f32>,
        coords: &Tensor5<f32>,
        centers: &[[usize; 3]],
    ) -> Result<Tensor5<f32>, InferError>;
}

/// Infer-mode network predictor.
pub struct NetworkPredictor<'a> {
    pub net: &'a Network,
    pub params: &'a Parameters<f32>,
}

impl TilePredictor for NetworkPredictor<'_> {
    fn classes(&self) -> usize {
        self.net.config().classes
    }

    fn predict(
        &self,
        inputs: &Tensor5<f32>,
        coords: &Tensor5<f32>,
        _centers: &[[usize; 3]],
    ) -> Result<Tensor5<f32>, InferError> {
        let pass = self.net.forward(self.params, inputs, coords, Mode::Infer)?;
        Ok(pass.logits)
    }
}

fn crop_input_patch(intensity: &IntensityVolume, center: [usize; 3], edge: usize) -> Vec<f32> {
    let mut out = vec![0f32; edge * edge * edge];
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
                out[(dz * edge + dy) * edge + dx] =
                    (intensity.data[(z as usize * h + y as usize) * w + x as usize] / 255.0)
                        .clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Segments a whole volume: runs the predictor over the plan's tiles in
/// batches, takes the per-voxel argmax (ties to the lowest class index),
/// stitches the output-edge blocks and crops the padding. Deterministic;
/// the batch size only affects speed.
pub fn segment_volume(
    predictor: &dyn TilePredictor,
    intensity: &IntensityVolume,
    coords: &SpectralCoordinates,
    plan: &TilePlan,
    batch: usize,
) -> Result<LabelVolume, InferError> {
    if intensity.dims != plan.dims {
        return Err(InferError::ShapeMismatch(format!(
            "volume dims {:?} vs plan dims {:?}",
            intensity.dims, plan.dims
        )));
    }
    if coords.dims != plan.dims {
        return Err(InferError::ShapeMismatch(format!(
            "coordinate dims {:?} vs plan dims {:?}",
            coords.dims, plan.dims
        )));
    }
    let batch = batch.max(1);
    let ie = plan.input_edge;
    let oe = plan.output_edge;
    let [pd, ph, pw] = plan.padded;
    let mut padded_labels = vec![0u16; pd * ph * pw];
    let classes = predictor.classes();
    let oe3 = oe * oe * oe;

    for group in plan.centers.chunks(batch) {
        let n = group.len();
        let mut inputs = Tensor5::zeros([n, 1, ie, ie, ie]);
        let mut coord_batch = Tensor5::zeros([n, coords.volumes.len(), oe, oe, oe]);
        for (i, &center) in group.iter().enumerate() {
            let patch = crop_input_patch(intensity, center, ie);
            inputs.data_mut()[i * ie * ie * ie..(i + 1) * ie * ie * ie].copy_from_slice(&patch);
            let cpatch = coords.extract_patch(center, oe);
            let len = cpatch.len();
            coord_batch.data_mut()[i * len..(i + 1) * len].copy_from_slice(cpatch.data());
        }
        let logits = predictor.predict(&inputs, &coord_batch, group)?;
        if logits.shape() != [n, classes, oe, oe, oe] {
            return Err(InferError::ShapeMismatch(format!(
                "predictor returned {:?}, expected {:?}",
                logits.shape(),
                [n, classes, oe, oe, oe]
            )));
        }
        for (i, &center) in group.iter().enumerate() {
            let origin = [center[0] - oe / 2, center[1] - oe / 2, center[2] - oe / 2];
            for v in 0..oe3 {
                let mut best = 0usize;
                let mut best_val = f32::NEG_INFINITY;
                for c in 0..classes {
                    let val = logits.data()[(i * classes + c) * oe3 + v];
                    if val > best_val {
                        best_val = val;
                        best = c;
                    }
                }
                let dz = v / (oe * oe);
                let dy = (v / oe) % oe;
                let dx = v % oe;
                let at = ((origin[0] + dz) * ph + origin[1] + dy) * pw + origin[2] + dx;
                padded_labels[at] = best as u16;
            }
        }
    }

    // crop the padding
    let [d, h, w] = plan.dims;
    let mut data = vec![0u16; d * h * w];
    for z in 0..d {
        for y in 0..h {
            data[(z * h + y) * w..(z * h + y) * w + w]
                .copy_from_slice(&padded_labels[(z * ph + y) * pw..(z * ph + y) * pw + w]);
        }
    }
    Ok(LabelVolume {
        dims: plan.dims,
        data,
    })
}

fn overlap_counts(pred: &LabelVolume, reference: &LabelVolume, class: u16) -> (u64, u64, u64) {
    let mut p = 0u64;
    let mut r = 0u64;
    let mut both = 0u64;
    for (a, b) in pred.data.iter().zip(&reference.data) {
        let ap = *a == class;
        let br = *b == class;
        p += ap as u64;
        r += br as u64;
        both += (ap && br) as u64;
    }
    (p, r, both)
}

fn check_dims(pred: &LabelVolume, reference: &LabelVolume) -> Result<(), InferError> {
    if pred.dims != reference.dims {
        return Err(InferError::ShapeMismatch(format!(
            "prediction dims {:?} vs reference dims {:?}",
            pred.dims, reference.dims
        )));
    }
    Ok(())
}

/// Dice overlap `2|P and R| / (|P| + |R|)`; 1.0 when the class is absent
/// from both volumes.
pub fn dice(pred: &LabelVolume, reference: &LabelVolume, class: u16) -> Result<f64, InferError> {
    check_dims(pred, reference)?;
    let (p, r, both) = overlap_counts(pred, reference, class);
    if p + r == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + r) as f64)
}

/// Intersection over union `|P and R| / |P or R|`; 1.0 when absent from both.
pub fn iou(pred: &LabelVolume, reference: &LabelVolume, class: u16) -> Result<f64, InferError> {
    check_dims(pred, reference)?;
    let (p, r, both) = overlap_counts(pred, reference, class);
    let union = p + r - both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(both as f64 / union as f64)
}

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub class: u16,
    pub acronym: String,
    pub dice: f64,
    pub iou: f64,
    /// Set when the structure is absent from both volumes (scores default
    /// to 1.0 by convention).
    pub both_empty: bool,
}

/// Per-structure Dice/IoU table, background excluded, plus means.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean_dice: f64,
    pub mean_iou: f64,
}

impl MetricsReport {
    pub fn compute(
        pred: &LabelVolume,
        reference: &LabelVolume,
        classes: usize,
    ) -> Result<Self, InferError> {
        check_dims(pred, reference)?;
        let mut rows = Vec::with_capacity(classes.saturating_sub(1));
        for class in 1..classes as u16 {
            let (p, r, both) = overlap_counts(pred, reference, class);
            let both_empty = p + r == 0;
            let d = if both_empty {
                1.0
            } else {
                2.0 * both as f64 / (p + r) as f64
            };
            let u = p + r - both;
            let i = if u == 0 { 1.0 } else { both as f64 / u as f64 };
            let acronym = CLASS_ACRONYMS
                .get(class as usize)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("C{class}"));
            rows.push(MetricsRow {
                class,
                acronym,
                dice: d,
                iou: i,
                both_empty,
            });
        }
        let n = rows.len().max(1) as f64;
        let mean_dice = rows.iter().map(|r| r.dice).sum::<f64>() / n;
        let mean_iou = rows.iter().map(|r| r.iou).sum::<f64>() / n;
        Ok(MetricsReport {
            rows,
            mean_dice,
            mean_iou,
        })
    }

    /// Tab-separated table: one row per structure plus a mean row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("structure\tdice\tiou\tboth_empty\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{:.4}\t{:.4}\t{}\n",
                row.acronym,
                row.dice,
                row.iou,
                if row.both_empty { "yes" } else { "no" }
            ));
        }
        out.push_str(&format!(
            "mean\t{:.4}\t{:.4}\t\n",
            self.mean_dice, self.mean_iou
        ));
        out
    }
}
