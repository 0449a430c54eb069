//! 3D patch-based segmentation engine built around a fully dense, fully
//! convolutional downsampling network with hybrid-dilated dense blocks and
//! spectral brain coordinates.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense 5-axis tensor kernel; every op has a hand-derived
//!   backward pass.
//! * [`layers`]: the layer vocabulary (hybrid-dilated, transition-down and
//!   pointwise unit layers, dense blocks) plus dilation-group validation.
//! * [`net`]: network assembly, shape audit, parameter store, checkpoints.
//! * [`spectral`]: graph-Laplacian spectral coordinates over a brain mask.
//! * [`volume`]: NIfTI-1 / RV3 volume I/O and label remapping.
//! * [`patch`]: class-balanced patch sampling and minibatch assembly.
//! * [`train`]: Adam, polynomial LR schedule, epoch loop, cross-validation.
//! * [`infer`]: tile planning, whole-volume segmentation, Dice/IoU metrics.
//! * [`config`]: the flat key=value configuration document.
//! * [`synth`]: synthetic labeled phantoms for desk-scale runs.

pub mod config;
pub mod infer;
pub mod layers;
pub mod net;
pub mod patch;
pub mod spectral;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;
