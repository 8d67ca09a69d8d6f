//! Single-file NIfTI-1 reading and writing.

use super::header::{DataType, Endianness, NiftiHeader, NIFTI1_HEADER_SIZE};
use super::{IntensityUnit, Result, VolioError, Volume};
use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use std::borrow::Cow;
use std::io::Read;
use std::path::Path;

const UNIT_TAG: &str = "unit=";

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Accept NaN/Inf voxels instead of failing with `NonFinite`.
    pub allow_non_finite: bool,
}

/// A parsed file: header, decoded volume and any raw extension blocks.
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub volume: Volume,
    /// Bytes between offset 352 and `vox_offset`, kept opaque.
    pub extensions: Vec<u8>,
}

fn maybe_gunzip(bytes: &[u8]) -> Result<Cow<'_, [u8]>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out).map_err(VolioError::Gzip)?;
        Ok(Cow::Owned(out))
    } else {
        Ok(Cow::Borrowed(bytes))
    }
}

fn decode<B: ByteOrder>(payload: &[u8], dt: DataType, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    match dt {
        DataType::UInt8 => out.extend(payload[..n].iter().map(|&b| b as f64)),
        DataType::Int16 => out.extend(payload.chunks_exact(2).take(n).map(|c| B::read_i16(c) as f64)),
        DataType::Int32 => out.extend(payload.chunks_exact(4).take(n).map(|c| B::read_i32(c) as f64)),
        DataType::Float32 => out.extend(payload.chunks_exact(4).take(n).map(|c| B::read_f32(c) as f64)),
        DataType::Float64 => out.extend(payload.chunks_exact(8).take(n).map(B::read_f64)),
    }
    out
}

/// Parses a complete single-file NIfTI-1 image (optionally gzip-compressed).
pub fn parse_nifti(bytes: &[u8], opts: ReadOptions) -> Result<NiftiImage> {
    let bytes = maybe_gunzip(bytes)?;
    let header = NiftiHeader::parse(&bytes)?;
    let dt = header.data_type()?;
    let n = header.voxel_count();
    let offset = header.vox_offset as usize;
    let needed = offset + n * dt.size_bytes();
    if bytes.len() < needed {
        return Err(VolioError::Truncated { needed, got: bytes.len() });
    }
    let extensions = if offset > 352 && bytes[NIFTI1_HEADER_SIZE] != 0 {
        bytes[352..offset].to_vec()
    } else {
        Vec::new()
    };
    let payload = &bytes[offset..needed];
    let raw = match header.endianness {
        Endianness::Little => decode::<LittleEndian>(payload, dt, n),
        Endianness::Big => decode::<BigEndian>(payload, dt, n),
    };
    let (slope, inter) = if header.scl_slope != 0.0 && header.scl_slope.is_finite() {
        (header.scl_slope as f64, header.scl_inter as f64)
    } else {
        (1.0, 0.0)
    };
    let identity_scaling = slope == 1.0 && inter == 0.0;
    let mut data = Vec::with_capacity(n);
    for (index, r) in raw.into_iter().enumerate() {
        let v = if identity_scaling { r as f32 } else { (r * slope + inter) as f32 };
        if !v.is_finite() && !opts.allow_non_finite {
            return Err(VolioError::NonFinite { index });
        }
        data.push(v);
    }
    let desc = header.description();
    let unit = desc
        .strip_prefix(UNIT_TAG)
        .and_then(IntensityUnit::parse)
        .unwrap_or(IntensityUnit::Hu);
    let volume = Volume::new(data, header.shape(), header.affine(), unit)?;
    Ok(NiftiImage { header, volume, extensions })
}

pub fn read_nifti(bytes: &[u8]) -> Result<Volume> {
    read_nifti_with(bytes, ReadOptions::default())
}

pub fn read_nifti_with(bytes: &[u8], opts: ReadOptions) -> Result<Volume> {
    parse_nifti(bytes, opts).map(|img| img.volume)
}

pub fn read_nifti_file(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti(&std::fs::read(path)?)
}

/// Encodes a volume as little-endian float32 NIfTI-1 with `sform_code = 1`.
pub fn write_nifti(v: &Volume) -> Result<Vec<u8>> {
    write_nifti_with_extensions(v, &[])
}

pub fn write_nifti_with_extensions(v: &Volume, extensions: &[u8]) -> Result<Vec<u8>> {
    if !extensions.len().is_multiple_of(16) {
        return Err(VolioError::InvalidHeader(
            "extension blocks must total a multiple of 16 bytes".into(),
        ));
    }
    let shape = v.shape();
    if shape.iter().any(|&s| s > i16::MAX as usize) {
        return Err(VolioError::InvalidVolume(format!("shape {shape:?} exceeds NIfTI-1 limits")));
    }
    let mut h = NiftiHeader::default();
    h.dim = [if shape[2] == 1 { 2 } else { 3 }, shape[0] as i16, shape[1] as i16, shape[2] as i16, 1, 1, 1, 1];
    let spacing = v.spacing();
    h.pixdim = [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    h.vox_offset = (352 + extensions.len()) as f32;
    let a = v.affine();
    let row = |r: usize| [a[(r, 0)] as f32, a[(r, 1)] as f32, a[(r, 2)] as f32, a[(r, 3)] as f32];
    h.srow_x = row(0);
    h.srow_y = row(1);
    h.srow_z = row(2);
    h.set_description(&format!("{UNIT_TAG}{}", v.unit().as_str()));

    let mut out = Vec::with_capacity(352 + extensions.len() + 4 * v.len());
    out.extend_from_slice(&h.to_bytes());
    out.extend_from_slice(&[u8::from(!extensions.is_empty()), 0, 0, 0]);
    out.extend_from_slice(extensions);
    let mut buf = [0u8; 4];
    for &x in v.data() {
        LittleEndian::write_f32(&mut buf, x);
        out.extend_from_slice(&buf);
    }
    Ok(out)
}

/// Writes a volume; paths ending in `.gz` are gzip-compressed.
pub fn write_nifti_file(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_nifti(v)?;
    if path.extension().is_some_and(|e| e == "gz") {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes)?;
        std::fs::write(path, enc.finish()?)?;
    } else {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}
