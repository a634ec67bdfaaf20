//! Volume file formats: the SVOL container (read/write) and a read-only
//! NIfTI-1 subset for real scans.
//!
//! SVOL layout, all little-endian:
//!
//! | bytes | content                          |
//! |-------|----------------------------------|
//! | 4     | magic `SVL1`                     |
//! | 4     | u32 version (1)                  |
//! | 12    | u32 dims (x, y, z)               |
//! | 12    | f32 spacing (x, y, z)            |
//! | 1     | u8 component count (1 or 3)      |
//! | ...   | f32 payload, planar, x-fastest   |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{FieldKind, GridGeometry, ScalarVolume, VectorField};

pub const SVOL_MAGIC: &[u8; 4] = b"SVL1";
pub const SVOL_VERSION: u32 = 1;
const SVOL_HEADER: usize = 33;

/// Anything a volume file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Field(VectorField),
}

impl Volume {
    pub fn geometry(&self) -> &GridGeometry {
        match self {
            Volume::Scalar(v) => v.geometry(),
            Volume::Field(f) => f.geometry(),
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            Volume::Scalar(v) => Ok(v),
            Volume::Field(_) => Err(Error::InvalidArgument("expected a scalar volume, found a vector field".into())),
        }
    }

    /// Vector fields read from disk are tagged as displacements.
    pub fn into_field(self) -> Result<VectorField> {
        match self {
            Volume::Field(f) => Ok(f),
            Volume::Scalar(_) => Err(Error::InvalidArgument("expected a vector field, found a scalar volume".into())),
        }
    }
}

fn format_err(format: &'static str, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        format,
        offset,
        detail: detail.into(),
    }
}

pub fn encode_svol(geometry: &GridGeometry, components: u8, data: &[f64]) -> Vec<u8> {
    debug_assert_eq!(data.len(), components as usize * geometry.num_voxels());
    let mut out = Vec::with_capacity(SVOL_HEADER + 4 * data.len());
    out.extend_from_slice(SVOL_MAGIC);
    out.extend_from_slice(&SVOL_VERSION.to_le_bytes());
    for d in geometry.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in geometry.spacing() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out.push(components);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn decode_svol(bytes: &[u8]) -> Result<Volume> {
    const F: &str = "SVOL";
    if bytes.len() < SVOL_HEADER {
        return Err(format_err(F, bytes.len(), format!("header needs {SVOL_HEADER} bytes")));
    }
    if &bytes[0..4] != SVOL_MAGIC {
        return Err(format_err(F, 0, "bad magic"));
    }
    let version = le_u32(bytes, 4);
    if version != SVOL_VERSION {
        return Err(format_err(F, 4, format!("unsupported version {version}")));
    }
    let dims = [le_u32(bytes, 8), le_u32(bytes, 12), le_u32(bytes, 16)].map(|d| d as usize);
    let spacing = [le_f32(bytes, 20), le_f32(bytes, 24), le_f32(bytes, 28)].map(f64::from);
    let geometry = GridGeometry::new(dims, spacing).map_err(|e| format_err(F, 8, e.to_string()))?;
    let comps = bytes[32];
    if comps != 1 && comps != 3 {
        return Err(format_err(F, 32, format!("component count must be 1 or 3, got {comps}")));
    }
    let count = comps as usize * geometry.num_voxels();
    let expected = SVOL_HEADER + 4 * count;
    if bytes.len() != expected {
        return Err(format_err(
            F,
            bytes.len().min(expected),
            format!("payload length: expected {expected} bytes in total, found {}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[SVOL_HEADER..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(format_err(F, SVOL_HEADER + 4 * pos, "non-finite value"));
    }
    Ok(if comps == 1 {
        Volume::Scalar(ScalarVolume::new(geometry, data)?)
    } else {
        Volume::Field(VectorField::new(geometry, FieldKind::Displacement, data)?)
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_scalar(path: impl AsRef<Path>, vol: &ScalarVolume) -> Result<()> {
    write_bytes(path.as_ref(), &encode_svol(vol.geometry(), 1, vol.data()))
}

pub fn write_field(path: impl AsRef<Path>, field: &VectorField) -> Result<()> {
    write_bytes(path.as_ref(), &encode_svol(field.geometry(), 3, field.data()))
}

/// Reads an SVOL file or a NIfTI-1 single-file volume, chosen by content.
/// NIfTI intensities are min-max normalised to `[0, 1]`.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(SVOL_MAGIC) {
        decode_svol(&bytes)
    } else if nifti::looks_like_nifti(&bytes) {
        Ok(Volume::Scalar(nifti::decode(&bytes)?.normalized()))
    } else {
        Err(format_err("volume", 0, "neither SVOL nor NIfTI-1 magic"))
    }
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    read_volume(path)?.into_scalar()
}

pub fn read_field(path: impl AsRef<Path>) -> Result<VectorField> {
    read_volume(path)?.into_field()
}

pub mod nifti {
    //! Read-only NIfTI-1 subset: single `.nii` file, int16 or float32 voxels,
    //! at most three spatial dimensions and no shear in the sform.

    use super::format_err;
    use crate::error::{Error, Result};
    use crate::grid::{GridGeometry, ScalarVolume};

    const F: &str = "NIfTI-1";
    const HEADER_SIZE: i32 = 348;
    const DT_INT16: i16 = 4;
    const DT_FLOAT32: i16 = 16;

    /// Decoded scan in physical units (after `scl_slope`/`scl_inter`).
    #[derive(Clone, Debug)]
    pub struct NiftiVolume {
        pub volume: ScalarVolume,
        pub datatype: i16,
        pub scl_slope: f64,
        pub scl_inter: f64,
    }

    impl NiftiVolume {
        /// Min-max normalisation to `[0, 1]`; constant volumes map to zeros.
        pub fn normalized(&self) -> ScalarVolume {
            let d = self.volume.data();
            let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            let data = d
                .iter()
                .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
                .collect();
            ScalarVolume::new(*self.volume.geometry(), data).expect("normalised data is finite")
        }

        pub fn intensity_range(&self) -> (f64, f64) {
            let d = self.volume.data();
            (
                d.iter().copied().fold(f64::INFINITY, f64::min),
                d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        }
    }

    pub(super) fn looks_like_nifti(bytes: &[u8]) -> bool {
        bytes.len() >= 348 && &bytes[344..348] == b"n+1\0"
    }

    struct Reader<'a> {
        b: &'a [u8],
        big: bool,
    }

    impl Reader<'_> {
        fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
            let mut a: [u8; N] = self.b[at..at + N].try_into().unwrap();
            if self.big {
                a.reverse();
            }
            a
        }
        fn i16(&self, at: usize) -> i16 {
            i16::from_le_bytes(self.arr(at))
        }
        fn f32(&self, at: usize) -> f32 {
            f32::from_le_bytes(self.arr(at))
        }
    }

    pub fn decode(b: &[u8]) -> Result<NiftiVolume> {
        if b.len() < 348 {
            return Err(format_err(F, b.len(), "file shorter than the 348-byte header"));
        }
        let big = match (
            i32::from_le_bytes(b[0..4].try_into().unwrap()),
            i32::from_be_bytes(b[0..4].try_into().unwrap()),
        ) {
            (HEADER_SIZE, _) => false,
            (_, HEADER_SIZE) => true,
            _ => return Err(format_err(F, 0, "sizeof_hdr is not 348")),
        };
        let r = Reader { b, big };
        if &b[344..348] != b"n+1\0" {
            return Err(format_err(F, 344, "only single-file n+1 images are supported"));
        }
        let ndim = r.i16(40);
        if !(1..=7).contains(&ndim) {
            return Err(format_err(F, 40, format!("dim[0] = {ndim} out of range")));
        }
        let dim: Vec<i16> = (0..7).map(|i| r.i16(42 + 2 * i)).collect();
        for (i, &d) in dim.iter().enumerate().take(ndim as usize).skip(3) {
            if d != 1 {
                return Err(format_err(F, 42 + 2 * i, "more than three spatial dimensions"));
            }
        }
        let dims: [usize; 3] = std::array::from_fn(|i| {
            if (i as i16) < ndim {
                dim[i].max(1) as usize
            } else {
                1
            }
        });
        let datatype = r.i16(70);
        let bytes_per = match datatype {
            DT_INT16 => 2,
            DT_FLOAT32 => 4,
            other => return Err(format_err(F, 70, format!("unsupported datatype {other} (int16 or float32 only)"))),
        };
        let spacing: [f64; 3] = std::array::from_fn(|i| {
            let p = f64::from(r.f32(80 + 4 * i)).abs();
            if p > 0.0 && p.is_finite() {
                p
            } else {
                1.0
            }
        });
        let geometry = GridGeometry::new(dims, spacing).map_err(|e| format_err(F, 42, e.to_string()))?;
        let vox_offset = r.f32(108);
        if !(vox_offset >= 348.0) {
            return Err(format_err(F, 108, format!("vox_offset {vox_offset} < 348")));
        }
        let start = vox_offset as usize;
        let (mut slope, inter) = (f64::from(r.f32(112)), f64::from(r.f32(116)));
        let inter = if slope == 0.0 || !slope.is_finite() { 0.0 } else { inter };
        if slope == 0.0 || !slope.is_finite() {
            slope = 1.0;
        }
        let sform_code = r.i16(254);
        if sform_code > 0 {
            let rows: [[f64; 3]; 3] =
                std::array::from_fn(|row| std::array::from_fn(|col| f64::from(r.f32(280 + 16 * row + 4 * col))));
            let column = |c: usize| [rows[0][c], rows[1][c], rows[2][c]];
            let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                let (ca, cb) = (column(a), column(b));
                let cos = dot(ca, cb) / (dot(ca, ca) * dot(cb, cb)).sqrt();
                if cos.abs() > 1e-4 {
                    return Err(format_err(F, 280, "sform has shear; only rotation and scaling are supported"));
                }
            }
        }
        let n = geometry.num_voxels();
        let end = start + n * bytes_per;
        if b.len() < end {
            return Err(format_err(F, b.len(), format!("voxel data truncated: need {end} bytes")));
        }
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let at = start + i * bytes_per;
                let raw = if datatype == DT_INT16 {
                    f64::from(r.i16(at))
                } else {
                    f64::from(r.f32(at))
                };
                raw * slope + inter
            })
            .collect();
        let volume = ScalarVolume::new(geometry, data).map_err(|e| match e {
            Error::NonFinite(d) => format_err(F, start, d),
            other => other,
        })?;
        Ok(NiftiVolume {
            volume,
            datatype,
            scl_slope: slope,
            scl_inter: inter,
        })
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<NiftiVolume> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode(&bytes)
    }
}
