//! Volume I/O: an uncompressed single-file NIfTI-1 subset, the RV3 raw
//! fallback format, and dataset-label remapping to the 12-class task.
//!
//! Internal volume order is `(d, h, w)` row-major with `w` innermost; NIfTI
//! stores the first spatial axis innermost, so reads and writes transpose.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic: expected single-file NIfTI-1 (`n+1`)")]
    BadMagic,
    #[error("unsupported datatype code {0} (supported: uint8, int16, float32)")]
    UnsupportedDatatype(i16),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("unknown source label {0} in strict remap")]
    UnknownLabel(u16),
    #[error("negative value {0} cannot become a label")]
    NegativeLabel(i16),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    U8,
    I16,
    F32,
}

impl ElementType {
    pub fn byte_size(self) -> usize {
        match self {
            ElementType::U8 => 1,
            ElementType::I16 => 2,
            ElementType::F32 => 4,
        }
    }

    fn nifti_code(self) -> i16 {
        match self {
            ElementType::U8 => 2,
            ElementType::I16 => 4,
            ElementType::F32 => 16,
        }
    }

    fn from_nifti_code(code: i16) -> Result<Self, VolumeError> {
        match code {
            2 => Ok(ElementType::U8),
            4 => Ok(ElementType::I16),
            16 => Ok(ElementType::F32),
            other => Err(VolumeError::UnsupportedDatatype(other)),
        }
    }

    fn token(self) -> &'static str {
        match self {
            ElementType::U8 => "uint8",
            ElementType::I16 => "int16",
            ElementType::F32 => "float32",
        }
    }

    fn from_token(token: &str) -> Result<Self, VolumeError> {
        match token {
            "uint8" => Ok(ElementType::U8),
            "int16" => Ok(ElementType::I16),
            "float32" => Ok(ElementType::F32),
            other => Err(VolumeError::HeaderMismatch(format!(
                "unknown element type `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub elem: ElementType,
    /// Voxel spacing in millimeters; informational.
    pub spacing: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::U8(v) => v.len(),
            VolumeData::I16(v) => v.len(),
            VolumeData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn elem(&self) -> ElementType {
        match self {
            VolumeData::U8(_) => ElementType::U8,
            VolumeData::I16(_) => ElementType::I16,
            VolumeData::F32(_) => ElementType::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub data: VolumeData,
}

/// 3D scalar image as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityVolume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
    pub spacing: [f32; 3],
}

/// 3D integer label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub data: Vec<u16>,
}

impl Volume {
    pub fn to_intensity(&self) -> IntensityVolume {
        let data = match &self.data {
            VolumeData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            VolumeData::I16(v) => v.iter().map(|&x| x as f32).collect(),
            VolumeData::F32(v) => v.clone(),
        };
        IntensityVolume {
            dims: self.header.dims,
            data,
            spacing: self.header.spacing,
        }
    }

    pub fn to_labels(&self) -> Result<LabelVolume, VolumeError> {
        let data = match &self.data {
            VolumeData::U8(v) => v.iter().map(|&x| x as u16).collect(),
            VolumeData::I16(v) => {
                let mut out = Vec::with_capacity(v.len());
                for &x in v {
                    if x < 0 {
                        return Err(VolumeError::NegativeLabel(x));
                    }
                    out.push(x as u16);
                }
                out
            }
            VolumeData::F32(v) => v.iter().map(|&x| x.max(0.0).round() as u16).collect(),
        };
        Ok(LabelVolume {
            dims: self.header.dims,
            data,
        })
    }
}

// --------------------------------------------------------------------------
// NIfTI-1 subset
// --------------------------------------------------------------------------

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

fn rd_i16(b: &[u8], at: usize, swap: bool) -> i16 {
    let v = [b[at], b[at + 1]];
    if swap {
        i16::from_be_bytes(v)
    } else {
        i16::from_le_bytes(v)
    }
}

fn rd_f32(b: &[u8], at: usize, swap: bool) -> f32 {
    let v = [b[at], b[at + 1], b[at + 2], b[at + 3]];
    if swap {
        f32::from_be_bytes(v)
    } else {
        f32::from_le_bytes(v)
    }
}

/// Reads an uncompressed single-file NIfTI-1 volume (magic `n+1`). Datatypes
/// uint8/int16/float32; `scl_slope`/`scl_inter` scaling is applied when the
/// slope is nonzero (yielding `f32` data). Both endiannesses are accepted.
pub fn read_nifti1(path: &Path) -> Result<Volume, VolumeError> {
    let bytes = fs::read(path)?;
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(VolumeError::TruncatedFile(
            "shorter than the 348-byte header".into(),
        ));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(VolumeError::BadMagic);
    }
    let sizeof_hdr_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let swap = match sizeof_hdr_le {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => true,
        _ => return Err(VolumeError::HeaderMismatch("sizeof_hdr is not 348".into())),
    };

    let ndim = rd_i16(&bytes, 40, swap);
    if ndim < 3 {
        return Err(VolumeError::HeaderMismatch(format!(
            "need 3 spatial dims, header has {ndim}"
        )));
    }
    let mut dim = [0usize; 7];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = rd_i16(&bytes, 42 + 2 * i, swap).max(0) as usize;
    }
    if dim[3..]
        .iter()
        .take((ndim as usize).saturating_sub(3))
        .any(|&d| d > 1)
    {
        return Err(VolumeError::HeaderMismatch(
            "volume has more than 3 nontrivial dims".into(),
        ));
    }
    let dims = [dim[0], dim[1], dim[2]];
    if dims.contains(&0) {
        return Err(VolumeError::HeaderMismatch(format!(
            "degenerate dims {dims:?}"
        )));
    }
    let datatype = rd_i16(&bytes, 70, swap);
    let elem = ElementType::from_nifti_code(datatype)?;
    let spacing = [
        rd_f32(&bytes, 80, swap),
        rd_f32(&bytes, 84, swap),
        rd_f32(&bytes, 88, swap),
    ];
    let vox_offset = rd_f32(&bytes, 108, swap) as usize;
    let vox_offset = if vox_offset < NIFTI_HEADER_LEN {
        NIFTI_VOX_OFFSET
    } else {
        vox_offset
    };
    let scl_slope = rd_f32(&bytes, 112, swap);
    let scl_inter = rd_f32(&bytes, 116, swap);

    let count = dims[0] * dims[1] * dims[2];
    let needed = vox_offset + count * elem.byte_size();
    if bytes.len() < needed {
        return Err(VolumeError::TruncatedFile(format!(
            "{} bytes, voxel payload needs {needed}",
            bytes.len()
        )));
    }
    let payload = &bytes[vox_offset..needed];

    // file order: first axis innermost -> transpose into (d, h, w) row-major
    let [nd, nh, nw] = dims;
    let file_index = |z: usize, y: usize, x: usize| x * nh * nw + y * nw + z;
    // note: with dims = (nx, ny, nz) in file terms, internal (d,h,w) = (nx, ny, nz)
    // internal voxel (a, b, c) corresponds to file voxel x=a, y=b, z=c
    let _ = file_index;

    let raw: VolumeData = match elem {
        ElementType::U8 => {
            let mut out = vec![0u8; count];
            for a in 0..nd {
                for b in 0..nh {
                    for c in 0..nw {
                        out[(a * nh + b) * nw + c] = payload[c * nd * nh + b * nd + a];
                    }
                }
            }
            VolumeData::U8(out)
        }
        ElementType::I16 => {
            let mut out = vec![0i16; count];
            for a in 0..nd {
                for b in 0..nh {
                    for c in 0..nw {
                        let at = (c * nd * nh + b * nd + a) * 2;
                        out[(a * nh + b) * nw + c] = rd_i16(payload, at, swap);
                    }
                }
            }
            VolumeData::I16(out)
        }
        ElementType::F32 => {
            let mut out = vec![0f32; count];
            for a in 0..nd {
                for b in 0..nh {
                    for c in 0..nw {
                        let at = (c * nd * nh + b * nd + a) * 4;
                        out[(a * nh + b) * nw + c] = rd_f32(payload, at, swap);
                    }
                }
            }
            VolumeData::F32(out)
        }
    };

    let apply_scaling = scl_slope != 0.0 && !(scl_slope == 1.0 && scl_inter == 0.0);
    let data = if apply_scaling {
        let scaled: Vec<f32> = match &raw {
            VolumeData::U8(v) => v
                .iter()
                .map(|&x| x as f32 * scl_slope + scl_inter)
                .collect(),
            VolumeData::I16(v) => v
                .iter()
                .map(|&x| x as f32 * scl_slope + scl_inter)
                .collect(),
            VolumeData::F32(v) => v.iter().map(|&x| x * scl_slope + scl_inter).collect(),
        };
        VolumeData::F32(scaled)
    } else {
        raw
    };
    let elem = data.elem();
    Ok(Volume {
        header: VolumeHeader {
            dims,
            elem,
            spacing,
        },
        data,
    })
}

/// Writes a volume this module's reader round-trips bitwise (scaling fields
/// are written as zero).
pub fn write_nifti1(path: &Path, volume: &Volume) -> Result<(), VolumeError> {
    let [nd, nh, nw] = volume.header.dims;
    let count = nd * nh * nw;
    if volume.data.len() != count {
        return Err(VolumeError::HeaderMismatch(format!(
            "data length {} vs dims {:?}",
            volume.data.len(),
            volume.header.dims
        )));
    }
    let mut header = vec![0u8; NIFTI_VOX_OFFSET];
    header[0..4].copy_from_slice(&348i32.to_le_bytes());
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    put_i16(&mut header, 40, 3);
    put_i16(&mut header, 42, nd as i16);
    put_i16(&mut header, 44, nh as i16);
    put_i16(&mut header, 46, nw as i16);
    for i in 4..8 {
        put_i16(&mut header, 40 + 2 * i, 1);
    }
    put_i16(&mut header, 70, volume.header.elem.nifti_code());
    put_i16(&mut header, 72, (volume.header.elem.byte_size() * 8) as i16);
    put_f32(&mut header, 76, 1.0);
    put_f32(&mut header, 80, volume.header.spacing[0]);
    put_f32(&mut header, 84, volume.header.spacing[1]);
    put_f32(&mut header, 88, volume.header.spacing[2]);
    put_f32(&mut header, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut header, 112, 0.0); // scl_slope: no scaling
    put_f32(&mut header, 116, 0.0);
    header[344..348].copy_from_slice(b"n+1\0");

    let mut payload = vec![0u8; count * volume.header.elem.byte_size()];
    match &volume.data {
        VolumeData::U8(v) => {
            for a in 0..nd {
                for b in 0..nh {
                    for c in 0..nw {
                        payload[c * nd * nh + b * nd + a] = v[(a * nh + b) * nw + c];
                    }
                }
            }
        }
        VolumeData::I16(v) => {
            for a in 0..nd {
                for b in 0..nh {
                    for c in 0..nw {
                        let at = (c * nd * nh + b * nd + a) * 2;
                        payload[at..at + 2]
                            .copy_from_slice(&v[(a * nh + b) * nw + c].to_le_bytes());
                    }
                }
            }
        }
        VolumeData::F32(v) => {
            for a in 0..nd {
                for b in 0..nh {
                    for c in 0..nw {
                        let at = (c * nd * nh + b * nd + a) * 4;
                        payload[at..at + 4]
                            .copy_from_slice(&v[(a * nh + b) * nw + c].to_le_bytes());
                    }
                }
            }
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&header)?;
    file.write_all(&payload)?;
    Ok(())
}

// --------------------------------------------------------------------------
// RV3: sidecar text header + raw little-endian payload
// --------------------------------------------------------------------------

fn raw_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

/// Reads the RV3 fallback format: a text header (`dims`, `elem`, `spacing`)
/// next to a `.raw` little-endian payload.
pub fn read_rv3(path: &Path) -> Result<Volume, VolumeError> {
    let text = fs::read_to_string(path)?;
    let mut dims: Option<[usize; 3]> = None;
    let mut elem: Option<ElementType> = None;
    let mut spacing = [1.0f32; 3];
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("rv3") => {}
            Some("dims") => {
                let v: Vec<usize> = parts.map(|p| p.parse().unwrap_or(0)).collect();
                if v.len() != 3 || v.contains(&0) {
                    return Err(VolumeError::HeaderMismatch(format!(
                        "bad dims line `{line}`"
                    )));
                }
                dims = Some([v[0], v[1], v[2]]);
            }
            Some("elem") => {
                elem = Some(ElementType::from_token(parts.next().unwrap_or(""))).transpose()?
            }
            Some("spacing") => {
                let v: Vec<f32> = parts.map(|p| p.parse().unwrap_or(1.0)).collect();
                if v.len() == 3 {
                    spacing = [v[0], v[1], v[2]];
                }
            }
            _ => {
                return Err(VolumeError::HeaderMismatch(format!(
                    "unknown header line `{line}`"
                )))
            }
        }
    }
    let dims = dims.ok_or_else(|| VolumeError::HeaderMismatch("missing dims".into()))?;
    let elem = elem.ok_or_else(|| VolumeError::HeaderMismatch("missing elem".into()))?;
    let payload = fs::read(raw_path(path))?;
    let count = dims[0] * dims[1] * dims[2];
    if payload.len() != count * elem.byte_size() {
        return Err(VolumeError::HeaderMismatch(format!(
            "payload holds {} bytes, dims require {}",
            payload.len(),
            count * elem.byte_size()
        )));
    }
    let data = match elem {
        ElementType::U8 => VolumeData::U8(payload),
        ElementType::I16 => VolumeData::I16(
            payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
        ElementType::F32 => VolumeData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    };
    Ok(Volume {
        header: VolumeHeader {
            dims,
            elem,
            spacing,
        },
        data,
    })
}

pub fn write_rv3(path: &Path, volume: &Volume) -> Result<(), VolumeError> {
    let [d, h, w] = volume.header.dims;
    if volume.data.len() != d * h * w {
        return Err(VolumeError::HeaderMismatch(format!(
            "data length {} vs dims {:?}",
            volume.data.len(),
            volume.header.dims
        )));
    }
    let s = volume.header.spacing;
    let header = format!(
        "rv3 1\ndims {d} {h} {w}\nelem {}\nspacing {} {} {}\n",
        volume.header.elem.token(),
        s[0],
        s[1],
        s[2]
    );
    fs::write(path, header)?;
    let mut payload = Vec::with_capacity(volume.data.len() * volume.header.elem.byte_size());
    match &volume.data {
        VolumeData::U8(v) => payload.extend_from_slice(v),
        VolumeData::I16(v) => {
            for x in v {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeData::F32(v) => {
            for x in v {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    fs::write(raw_path(path), payload)?;
    Ok(())
}

/// Reads either format by extension (`.rv3` or NIfTI otherwise).
pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    if path.extension().is_some_and(|e| e == "rv3") {
        read_rv3(path)
    } else {
        read_nifti1(path)
    }
}

// --------------------------------------------------------------------------
// Label remapping
// --------------------------------------------------------------------------

/// Class acronyms, index 0 = background.
pub const CLASS_ACRONYMS: [&str; 12] = [
    "BG", "BS", "WM", "CT", "LV", "HI", "CWM", "CCT", "TH", "CA", "PU", "VE",
];

pub const NUM_CLASSES: usize = 12;

/// Map from dataset source labels to the dense class indices `0..12`.
/// Non-strict remaps send unmapped labels to background.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelRemap {
    pub map: HashMap<u16, u16>,
    pub strict: bool,
}

impl LabelRemap {
    /// Identity over the 12 task classes.
    pub fn identity() -> Self {
        LabelRemap {
            map: (0..NUM_CLASSES as u16).map(|c| (c, c)).collect(),
            strict: false,
        }
    }

    /// Default table for FreeSurfer-style segmentation IDs, merging left and
    /// right structures into one class each. Editable via [`LabelRemap::from_text`].
    pub fn default_ibsr() -> Self {
        let pairs: &[(&[u16], u16)] = &[
            (&[16], 1),      // BS
            (&[2, 41], 2),   // WM
            (&[3, 42], 3),   // CT
            (&[4, 43], 4),   // LV
            (&[17, 53], 5),  // HI
            (&[7, 46], 6),   // CWM
            (&[8, 47], 7),   // CCT
            (&[10, 49], 8),  // TH
            (&[11, 50], 9),  // CA
            (&[12, 51], 10), // PU
            (&[28, 60], 11), // VE
        ];
        let mut map = HashMap::new();
        map.insert(0, 0);
        for (sources, class) in pairs {
            for &s in *sources {
                map.insert(s, *class);
            }
        }
        LabelRemap { map, strict: false }
    }

    /// Parses lines of `source_label class` where `class` is an index in
    /// `0..12` or an acronym from [`CLASS_ACRONYMS`].
    pub fn from_text(text: &str) -> Result<Self, VolumeError> {
        let mut map = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(src), Some(cls)) = (parts.next(), parts.next()) else {
                return Err(VolumeError::HeaderMismatch(format!(
                    "bad remap line `{line}`"
                )));
            };
            let src: u16 = src
                .parse()
                .map_err(|_| VolumeError::HeaderMismatch(format!("bad source label `{src}`")))?;
            let class = match cls.parse::<u16>() {
                Ok(c) if (c as usize) < NUM_CLASSES => c,
                Ok(c) => {
                    return Err(VolumeError::HeaderMismatch(format!(
                        "class {c} outside 0..12"
                    )))
                }
                Err(_) => CLASS_ACRONYMS
                    .iter()
                    .position(|a| a.eq_ignore_ascii_case(cls))
                    .map(|p| p as u16)
                    .ok_or_else(|| VolumeError::HeaderMismatch(format!("unknown class `{cls}`")))?,
            };
            map.insert(src, class);
        }
        Ok(LabelRemap { map, strict: false })
    }

    pub fn to_text(&self) -> String {
        let mut entries: Vec<(&u16, &u16)> = self.map.iter().collect();
        entries.sort();
        let mut out = String::from("# source_label class\n");
        for (src, cls) in entries {
            out.push_str(&format!("{src} {}\n", CLASS_ACRONYMS[*cls as usize]));
        }
        out
    }
}

/// Applies a remap; every output voxel carries a class in `0..12`. Unmapped
/// source labels become background, or [`VolumeError::UnknownLabel`] in
/// strict mode.
pub fn remap_labels(labels: &LabelVolume, remap: &LabelRemap) -> Result<LabelVolume, VolumeError> {
    let mut out = Vec::with_capacity(labels.data.len());
    for &src in &labels.data {
        match remap.map.get(&src) {
            Some(&c) => out.push(c),
            None if remap.strict => return Err(VolumeError::UnknownLabel(src)),
            None => out.push(0),
        }
    }
    Ok(LabelVolume {
        dims: labels.dims,
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    /// Hand-built 2x2x2 uint8 fixture: header plus a known payload.
    #[test]
    fn hand_built_nifti_fixture_reads_exactly() {
        let dir = tmp();
        let path = dir.path().join("fix.nii");
        let mut bytes = vec![0u8; 352 + 8];
        bytes[0..4].copy_from_slice(&348i32.to_le_bytes());
        bytes[40..42].copy_from_slice(&3i16.to_le_bytes());
        for i in 0..3 {
            bytes[42 + 2 * i..44 + 2 * i].copy_from_slice(&2i16.to_le_bytes());
        }
        bytes[70..72].copy_from_slice(&2i16.to_le_bytes()); // uint8
        bytes[72..74].copy_from_slice(&8i16.to_le_bytes());
        bytes[108..112].copy_from_slice(&352f32.to_le_bytes());
        bytes[344..348].copy_from_slice(b"n+1\0");
        // payload in file order (first axis innermost): value = flat index
        for i in 0..8 {
            bytes[352 + i] = i as u8;
        }
        std::fs::write(&path, &bytes).unwrap();
        let vol = read_nifti1(&path).unwrap();
        assert_eq!(vol.header.dims, [2, 2, 2]);
        // internal (a,b,c) = file voxel x=a,y=b,z=c = a + 2b + 4c
        let VolumeData::U8(data) = &vol.data else {
            panic!()
        };
        assert_eq!(data.as_slice(), &[0, 4, 2, 6, 1, 5, 3, 7]);
    }

    #[test]
    fn nifti_float_round_trip() {
        let dir = tmp();
        let path = dir.path().join("v.nii");
        let vol = Volume {
            header: VolumeHeader {
                dims: [3, 2, 4],
                elem: ElementType::F32,
                spacing: [1.0, 1.5, 2.0],
            },
            data: VolumeData::F32((0..24).map(|i| i as f32 * 0.25 - 2.0).collect()),
        };
        write_nifti1(&path, &vol).unwrap();
        assert_eq!(read_nifti1(&path).unwrap(), vol);
    }

    #[test]
    fn nifti_scaling_applies_when_slope_nonzero() {
        let dir = tmp();
        let path = dir.path().join("s.nii");
        let vol = Volume {
            header: VolumeHeader {
                dims: [2, 2, 2],
                elem: ElementType::U8,
                spacing: [1.0; 3],
            },
            data: VolumeData::U8((0..8).collect()),
        };
        write_nifti1(&path, &vol).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[112..116].copy_from_slice(&2f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1f32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let scaled = read_nifti1(&path).unwrap();
        let VolumeData::F32(data) = &scaled.data else {
            panic!("expected f32 after scaling")
        };
        let VolumeData::U8(orig) = &vol.data else {
            panic!()
        };
        for (s, o) in data.iter().zip(orig) {
            assert_eq!(*s, *o as f32 * 2.0 + 1.0);
        }
    }

    #[test]
    fn nifti_round_trips_every_element_type() {
        let dir = tmp();
        for (name, data) in [
            (
                "u8.nii",
                VolumeData::U8((0..24).map(|i| i as u8 * 3).collect()),
            ),
            (
                "i16.nii",
                VolumeData::I16((0..24).map(|i| i * 100 - 1200).collect()),
            ),
            (
                "f32.nii",
                VolumeData::F32((0..24).map(|i| i as f32 * -0.5).collect()),
            ),
        ] {
            let path = dir.path().join(name);
            let elem = data.elem();
            let vol = Volume {
                header: VolumeHeader {
                    dims: [2, 3, 4],
                    elem,
                    spacing: [1.0; 3],
                },
                data,
            };
            write_nifti1(&path, &vol).unwrap();
            assert_eq!(read_nifti1(&path).unwrap(), vol, "{name}");
            let rv3 = dir.path().join(name).with_extension("rv3");
            write_rv3(&rv3, &vol).unwrap();
            assert_eq!(read_rv3(&rv3).unwrap(), vol, "{name} rv3");
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("bad.nii");
        let mut bytes = vec![0u8; 352];
        bytes[0..4].copy_from_slice(&348i32.to_le_bytes());
        bytes[344..348].copy_from_slice(b"ni1\0");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_nifti1(&path), Err(VolumeError::BadMagic)));
    }

    #[test]
    fn truncated_nifti_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("t.nii");
        let vol = Volume {
            header: VolumeHeader {
                dims: [4, 4, 4],
                elem: ElementType::I16,
                spacing: [1.0; 3],
            },
            data: VolumeData::I16(vec![7; 64]),
        };
        write_nifti1(&path, &vol).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            read_nifti1(&path),
            Err(VolumeError::TruncatedFile(_))
        ));
    }

    #[test]
    fn rv3_round_trip_and_header_mismatch() {
        let dir = tmp();
        let path = dir.path().join("v.rv3");
        let vol = Volume {
            header: VolumeHeader {
                dims: [2, 3, 4],
                elem: ElementType::I16,
                spacing: [0.5, 1.0, 2.0],
            },
            data: VolumeData::I16((0..24).map(|i| i - 12).collect()),
        };
        write_rv3(&path, &vol).unwrap();
        assert_eq!(read_rv3(&path).unwrap(), vol);
        // shorten the payload by one byte
        let raw = fs::read(dir.path().join("v.raw")).unwrap();
        fs::write(dir.path().join("v.raw"), &raw[..raw.len() - 1]).unwrap();
        assert!(matches!(
            read_rv3(&path),
            Err(VolumeError::HeaderMismatch(_))
        ));
    }

    #[test]
    fn nifti_reexported_as_rv3_preserves_voxels() {
        let dir = tmp();
        let nii = dir.path().join("v.nii");
        let rv3 = dir.path().join("v.rv3");
        let vol = Volume {
            header: VolumeHeader {
                dims: [3, 3, 3],
                elem: ElementType::U8,
                spacing: [1.0; 3],
            },
            data: VolumeData::U8((0..27).map(|i| (i * 7 % 256) as u8).collect()),
        };
        write_nifti1(&nii, &vol).unwrap();
        let from_nii = read_nifti1(&nii).unwrap();
        write_rv3(&rv3, &from_nii).unwrap();
        assert_eq!(read_rv3(&rv3).unwrap().data, vol.data);
    }

    #[test]
    fn hemisphere_labels_merge() {
        let remap = LabelRemap::default_ibsr();
        let labels = LabelVolume {
            dims: [1, 1, 4],
            data: vec![12, 51, 0, 999],
        };
        let out = remap_labels(&labels, &remap).unwrap();
        assert_eq!(out.data, vec![10, 10, 0, 0]); // both putamen sides -> PU
    }

    #[test]
    fn strict_mode_rejects_unknown_labels() {
        let mut remap = LabelRemap::default_ibsr();
        remap.strict = true;
        let labels = LabelVolume {
            dims: [1, 1, 1],
            data: vec![999],
        };
        assert!(matches!(
            remap_labels(&labels, &remap),
            Err(VolumeError::UnknownLabel(999))
        ));
    }

    #[test]
    fn identity_remap_is_a_noop_on_remapped_volume() {
        let labels = LabelVolume {
            dims: [1, 1, 12],
            data: (0..12).collect(),
        };
        let out = remap_labels(&labels, &LabelRemap::identity()).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn all_background_stays_background() {
        let labels = LabelVolume {
            dims: [2, 2, 2],
            data: vec![0; 8],
        };
        let out = remap_labels(&labels, &LabelRemap::default_ibsr()).unwrap();
        assert!(out.data.iter().all(|&c| c == 0));
    }

    #[test]
    fn remap_text_round_trip() {
        let remap = LabelRemap::default_ibsr();
        let parsed = LabelRemap::from_text(&remap.to_text()).unwrap();
        assert_eq!(parsed.map, remap.map);
    }

    #[test]
    fn remap_preserves_merged_class_voxel_counts() {
        let remap = LabelRemap::default_ibsr();
        let data: Vec<u16> = vec![2, 41, 41, 3, 42, 16, 16, 16, 0, 77];
        let labels = LabelVolume {
            dims: [1, 1, 10],
            data,
        };
        let out = remap_labels(&labels, &remap).unwrap();
        let count = |c: u16| out.data.iter().filter(|&&v| v == c).count();
        assert_eq!(count(2), 3); // WM: 2,41,41
        assert_eq!(count(3), 2); // CT: 3,42
        assert_eq!(count(1), 3); // BS
        assert_eq!(count(0), 2); // background + unmapped
    }
}
