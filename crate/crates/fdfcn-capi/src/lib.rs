//! C ABI for the segmentation engine: opaque handles, status codes, and a
//! thread-local error message. The header is generated into
//! `include/fdfcn.h` at build time.
//!
//! Every function catches panics at the boundary and reports them as
//! [`FdfcnStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fdfcn::infer::{plan_tiles, segment_volume, NetworkPredictor};
use fdfcn::net::checkpoint::load_checkpoint;
use fdfcn::net::params::Parameters;
use fdfcn::net::{build, Network};
use fdfcn::spectral::{solve_spectral_downsampled, BrainMask, SpectralCoordinates};
use fdfcn::volume::IntensityVolume;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdfcnStatus {
    Ok = 0,
    NullArgument = 1,
    Usage = 2,
    Io = 3,
    Validation = 4,
    Numeric = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: impl Into<String>) {
    let mut msg = message.into();
    msg.retain(|c| c != '\0');
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(msg).unwrap());
}

/// Message for the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fdfcn_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Crate version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn fdfcn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// A loaded model: network topology plus trained parameters.
pub struct FdfcnModel {
    net: Network,
    params: Parameters<f32>,
}

/// Spectral plus Cartesian coordinate volumes for one mask.
pub struct FdfcnCoords {
    inner: SpectralCoordinates,
}

fn guard<F: FnOnce() -> FdfcnStatus>(f: F) -> FdfcnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            FdfcnStatus::Panic
        }
    }
}

unsafe fn dims_from(ptr3: *const u64) -> [usize; 3] {
    let d = std::slice::from_raw_parts(ptr3, 3);
    [d[0] as usize, d[1] as usize, d[2] as usize]
}

/// Loads a checkpoint file into a model handle. On success `*out` owns the
/// model; release it with [`fdfcn_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fdfcn_model_load(
    path: *const c_char,
    out: *mut *mut FdfcnModel,
) -> FdfcnStatus {
    if path.is_null() || out.is_null() {
        set_error("null argument");
        return FdfcnStatus::NullArgument;
    }
    guard(|| {
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            set_error("path is not UTF-8");
            return FdfcnStatus::Usage;
        };
        let ckpt = match load_checkpoint(Path::new(path)) {
            Ok(c) => c,
            Err(e) => {
                set_error(e.to_string());
                return match e {
                    fdfcn::net::CheckpointError::Io(_) => FdfcnStatus::Io,
                    _ => FdfcnStatus::Validation,
                };
            }
        };
        let net = match build::<f32>(&ckpt.config, ckpt.seed) {
            Ok((net, _)) => net,
            Err(e) => {
                set_error(e.to_string());
                return FdfcnStatus::Validation;
            }
        };
        *out = Box::into_raw(Box::new(FdfcnModel {
            net,
            params: ckpt.params,
        }));
        FdfcnStatus::Ok
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`fdfcn_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fdfcn_model_free(model: *mut FdfcnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_getter(
    model: *const FdfcnModel,
    out: *mut u32,
    get: impl Fn(&FdfcnModel) -> usize,
) -> FdfcnStatus {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return FdfcnStatus::NullArgument;
    }
    *out = get(&*model) as u32;
    FdfcnStatus::Ok
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fdfcn_model_input_edge(
    model: *const FdfcnModel,
    out: *mut u32,
) -> FdfcnStatus {
    model_getter(model, out, |m| m.net.config().input_edge)
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fdfcn_model_output_edge(
    model: *const FdfcnModel,
    out: *mut u32,
) -> FdfcnStatus {
    model_getter(model, out, |m| m.net.config().output_edge)
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fdfcn_model_classes(
    model: *const FdfcnModel,
    out: *mut u32,
) -> FdfcnStatus {
    model_getter(model, out, |m| m.net.config().classes)
}

/// Computes spectral plus Cartesian coordinates for a mask given as one byte
/// per voxel (nonzero = inside) over a `dims[0] * dims[1] * dims[2]` grid in
/// row-major order with the last axis fastest. `downsample >= 2` coarsens
/// the eigensolve grid.
///
/// # Safety
/// `dims` must point to 3 values, `mask` to the full voxel grid, and `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn fdfcn_coords_compute(
    dims: *const u64,
    mask: *const u8,
    downsample: u32,
    out: *mut *mut FdfcnCoords,
) -> FdfcnStatus {
    if dims.is_null() || mask.is_null() || out.is_null() {
        set_error("null argument");
        return FdfcnStatus::NullArgument;
    }
    guard(|| {
        let dims = dims_from(dims);
        let n = dims[0] * dims[1] * dims[2];
        if n == 0 {
            set_error("degenerate dims");
            return FdfcnStatus::Usage;
        }
        let mask_bytes = std::slice::from_raw_parts(mask, n);
        let mask = BrainMask::new(dims, mask_bytes.iter().map(|&b| b != 0).collect());
        match solve_spectral_downsampled(&mask, 3, 1e-6, 200, (downsample as usize).max(1)) {
            Ok(coords) => {
                *out = Box::into_raw(Box::new(FdfcnCoords { inner: coords }));
                FdfcnStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                match e {
                    fdfcn::spectral::SpectralError::NoConvergence { .. } => FdfcnStatus::Numeric,
                    _ => FdfcnStatus::Validation,
                }
            }
        }
    })
}

/// Releases a coordinates handle. Null is ignored.
///
/// # Safety
/// `coords` must come from [`fdfcn_coords_compute`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fdfcn_coords_free(coords: *mut FdfcnCoords) {
    if !coords.is_null() {
        drop(Box::from_raw(coords));
    }
}

/// Copies the three eigenvalues into `out`.
///
/// # Safety
/// `out` must point to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fdfcn_coords_eigenvalues(
    coords: *const FdfcnCoords,
    out: *mut f64,
) -> FdfcnStatus {
    if coords.is_null() || out.is_null() {
        set_error("null argument");
        return FdfcnStatus::NullArgument;
    }
    let inner = &(*coords).inner;
    if inner.eigenvalues.len() < 3 {
        set_error("coordinates carry no eigenvalues");
        return FdfcnStatus::Validation;
    }
    std::ptr::copy_nonoverlapping(inner.eigenvalues.as_ptr(), out, 3);
    FdfcnStatus::Ok
}

/// Copies one coordinate channel (0..3 spectral, 3..6 Cartesian) into a
/// caller buffer of `len` floats, which must equal the voxel count.
///
/// # Safety
/// `out` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn fdfcn_coords_channel(
    coords: *const FdfcnCoords,
    channel: u32,
    out: *mut f32,
    len: usize,
) -> FdfcnStatus {
    if coords.is_null() || out.is_null() {
        set_error("null argument");
        return FdfcnStatus::NullArgument;
    }
    let inner = &(*coords).inner;
    let Some(volume) = inner.volumes.get(channel as usize) else {
        set_error(format!("channel {channel} outside 0..6"));
        return FdfcnStatus::Usage;
    };
    if volume.len() != len {
        set_error(format!(
            "buffer holds {len} voxels, volume has {}",
            volume.len()
        ));
        return FdfcnStatus::Usage;
    }
    std::ptr::copy_nonoverlapping(volume.as_ptr(), out, len);
    FdfcnStatus::Ok
}

/// Segments a raw intensity volume (row-major, last axis fastest, raw
/// 0..255 scale) and writes one `u16` class label per voxel into
/// `out_labels`.
///
/// # Safety
/// `dims` must point to 3 values; `intensity` and `out_labels` to full
/// voxel grids; `coords` must match the volume dims.
#[no_mangle]
pub unsafe extern "C" fn fdfcn_segment(
    model: *const FdfcnModel,
    dims: *const u64,
    intensity: *const f32,
    coords: *const FdfcnCoords,
    batch: u32,
    out_labels: *mut u16,
) -> FdfcnStatus {
    if model.is_null()
        || dims.is_null()
        || intensity.is_null()
        || coords.is_null()
        || out_labels.is_null()
    {
        set_error("null argument");
        return FdfcnStatus::NullArgument;
    }
    guard(|| {
        let model = &*model;
        let dims = dims_from(dims);
        let n = dims[0] * dims[1] * dims[2];
        if n == 0 {
            set_error("degenerate dims");
            return FdfcnStatus::Usage;
        }
        let volume = IntensityVolume {
            dims,
            data: std::slice::from_raw_parts(intensity, n).to_vec(),
            spacing: [1.0; 3],
        };
        let cfg = model.net.config();
        let plan = plan_tiles(dims, cfg.input_edge, cfg.output_edge);
        let predictor = NetworkPredictor {
            net: &model.net,
            params: &model.params,
        };
        match segment_volume(
            &predictor,
            &volume,
            &(*coords).inner,
            &plan,
            (batch as usize).max(1),
        ) {
            Ok(labels) => {
                std::ptr::copy_nonoverlapping(labels.data.as_ptr(), out_labels, n);
                FdfcnStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                FdfcnStatus::Validation
            }
        }
    })
}

unsafe fn overlap_metric(
    pred: *const u16,
    reference: *const u16,
    len: usize,
    class: u16,
    out: *mut f64,
    iou: bool,
) -> FdfcnStatus {
    if pred.is_null() || reference.is_null() || out.is_null() {
        set_error("null argument");
        return FdfcnStatus::NullArgument;
    }
    let p = std::slice::from_raw_parts(pred, len);
    let r = std::slice::from_raw_parts(reference, len);
    let mut np = 0u64;
    let mut nr = 0u64;
    let mut both = 0u64;
    for (a, b) in p.iter().zip(r) {
        np += (*a == class) as u64;
        nr += (*b == class) as u64;
        both += (*a == class && *b == class) as u64;
    }
    *out = if iou {
        let union = np + nr - both;
        if union == 0 {
            1.0
        } else {
            both as f64 / union as f64
        }
    } else if np + nr == 0 {
        1.0
    } else {
        2.0 * both as f64 / (np + nr) as f64
    };
    FdfcnStatus::Ok
}

/// Dice overlap of one class between two label buffers of `len` voxels.
/// Both-empty yields 1.0.
///
/// # Safety
/// `pred` and `reference` must point to `len` labels; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fdfcn_dice(
    pred: *const u16,
    reference: *const u16,
    len: usize,
    class: u16,
    out: *mut f64,
) -> FdfcnStatus {
    overlap_metric(pred, reference, len, class, out, false)
}

/// Intersection over union of one class between two label buffers.
///
/// # Safety
/// `pred` and `reference` must point to `len` labels; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fdfcn_iou(
    pred: *const u16,
    reference: *const u16,
    len: usize,
    class: u16,
    out: *mut f64,
) -> FdfcnStatus {
    overlap_metric(pred, reference, len, class, out, true)
}
