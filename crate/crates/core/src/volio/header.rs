//! NIfTI-1 header layout.

use super::{Affine, Result, VolioError};
use byteorder::{BigEndian, ByteOrder, LittleEndian};

pub const NIFTI1_HEADER_SIZE: usize = 348;
const NIFTI2_HEADER_SIZE: i32 = 540;

pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
pub const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const INTENT_CODE: usize = 68;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// Voxel element types accepted on read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i16)]
pub enum DataType {
    UInt8 = 2,
    Int16 = 4,
    Int32 = 8,
    Float32 = 16,
    Float64 = 64,
}

impl DataType {
    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Self::UInt8),
            4 => Ok(Self::Int16),
            8 => Ok(Self::Int32),
            16 => Ok(Self::Float32),
            64 => Ok(Self::Float64),
            other => Err(VolioError::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        self as i16
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Self::UInt8 => 1,
            Self::Int16 => 2,
            Self::Int32 | Self::Float32 => 4,
            Self::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: [u8; 80],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub magic: [u8; 4],
    pub endianness: Endianness,
}

impl Default for NiftiHeader {
    fn default() -> Self {
        Self {
            sizeof_hdr: NIFTI1_HEADER_SIZE as i32,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_code: 0,
            datatype: DataType::Float32.code(),
            bitpix: 32,
            pixdim: [1.0; 8],
            vox_offset: 352.0,
            scl_slope: 1.0,
            scl_inter: 0.0,
            // mm + s
            xyzt_units: 2 | 8,
            descrip: [0; 80],
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow_x: [1.0, 0.0, 0.0, 0.0],
            srow_y: [0.0, 1.0, 0.0, 0.0],
            srow_z: [0.0, 0.0, 1.0, 0.0],
            magic: MAGIC_SINGLE,
            endianness: Endianness::Little,
        }
    }
}

fn read_header<B: ByteOrder>(buf: &[u8], endianness: Endianness) -> NiftiHeader {
    let f32s = |off: usize, out: &mut [f32]| {
        for (i, v) in out.iter_mut().enumerate() {
            *v = B::read_f32(&buf[off + 4 * i..]);
        }
    };
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&buf[offsets::DIM + 2 * i..]);
    }
    let mut pixdim = [0f32; 8];
    f32s(offsets::PIXDIM, &mut pixdim);
    let mut quatern = [0f32; 3];
    f32s(offsets::QUATERN_B, &mut quatern);
    let mut qoffset = [0f32; 3];
    f32s(offsets::QOFFSET_X, &mut qoffset);
    let mut srow_x = [0f32; 4];
    let mut srow_y = [0f32; 4];
    let mut srow_z = [0f32; 4];
    f32s(offsets::SROW_X, &mut srow_x);
    f32s(offsets::SROW_X + 16, &mut srow_y);
    f32s(offsets::SROW_X + 32, &mut srow_z);
    let mut descrip = [0u8; 80];
    descrip.copy_from_slice(&buf[offsets::DESCRIP..offsets::DESCRIP + 80]);
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&buf[offsets::MAGIC..offsets::MAGIC + 4]);
    NiftiHeader {
        sizeof_hdr: B::read_i32(&buf[offsets::SIZEOF_HDR..]),
        dim,
        intent_code: B::read_i16(&buf[offsets::INTENT_CODE..]),
        datatype: B::read_i16(&buf[offsets::DATATYPE..]),
        bitpix: B::read_i16(&buf[offsets::BITPIX..]),
        pixdim,
        vox_offset: B::read_f32(&buf[offsets::VOX_OFFSET..]),
        scl_slope: B::read_f32(&buf[offsets::SCL_SLOPE..]),
        scl_inter: B::read_f32(&buf[offsets::SCL_INTER..]),
        xyzt_units: buf[offsets::XYZT_UNITS],
        descrip,
        qform_code: B::read_i16(&buf[offsets::QFORM_CODE..]),
        sform_code: B::read_i16(&buf[offsets::SFORM_CODE..]),
        quatern,
        qoffset,
        srow_x,
        srow_y,
        srow_z,
        magic,
        endianness,
    }
}

impl NiftiHeader {
    /// Parses and validates the fixed 348-byte header.
    ///
    /// Byte order is detected from `sizeof_hdr`. Any prefix that is not a
    /// NIfTI-1 header yields [`VolioError::BadMagic`], except NIfTI-2 and
    /// header/image pairs, which have their own errors.
    pub fn parse(buf: &[u8]) -> Result<Self> {
        if buf.len() < NIFTI1_HEADER_SIZE {
            return Err(VolioError::Truncated { needed: NIFTI1_HEADER_SIZE, got: buf.len() });
        }
        let le = LittleEndian::read_i32(buf);
        let be = BigEndian::read_i32(buf);
        let hdr = if le == NIFTI1_HEADER_SIZE as i32 {
            read_header::<LittleEndian>(buf, Endianness::Little)
        } else if be == NIFTI1_HEADER_SIZE as i32 {
            read_header::<BigEndian>(buf, Endianness::Big)
        } else if le == NIFTI2_HEADER_SIZE || be == NIFTI2_HEADER_SIZE {
            return Err(VolioError::Nifti2Unsupported);
        } else {
            return Err(VolioError::BadMagic);
        };
        if hdr.magic == MAGIC_PAIR {
            return Err(VolioError::PairUnsupported);
        }
        if hdr.magic != MAGIC_SINGLE {
            return Err(VolioError::BadMagic);
        }
        hdr.validate()?;
        Ok(hdr)
    }

    fn validate(&self) -> Result<()> {
        let ndim = self.dim[0];
        if !(2..=3).contains(&ndim) {
            return Err(VolioError::InvalidHeader(format!("dim[0] = {ndim}, expected 2 or 3")));
        }
        for i in 1..=ndim as usize {
            if self.dim[i] < 1 {
                return Err(VolioError::InvalidHeader(format!("dim[{i}] = {}", self.dim[i])));
            }
        }
        let dt = DataType::from_code(self.datatype)?;
        if self.bitpix as usize != 8 * dt.size_bytes() {
            return Err(VolioError::InvalidHeader(format!(
                "bitpix {} inconsistent with datatype {}",
                self.bitpix, self.datatype
            )));
        }
        if !self.vox_offset.is_finite() || self.vox_offset < 352.0 {
            return Err(VolioError::InvalidHeader(format!("vox_offset {}", self.vox_offset)));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        let z = if self.dim[0] >= 3 { self.dim[3] as usize } else { 1 };
        [self.dim[1] as usize, self.dim[2] as usize, z]
    }

    pub fn data_type(&self) -> Result<DataType> {
        DataType::from_code(self.datatype)
    }

    pub fn voxel_count(&self) -> usize {
        self.shape().iter().product()
    }

    /// Voxel-to-world affine: sform when `sform_code > 0`, else qform, else
    /// a diagonal built from pixdim.
    pub fn affine(&self) -> Affine {
        if self.sform_code > 0 {
            let mut a = Affine::identity();
            for (r, row) in [self.srow_x, self.srow_y, self.srow_z].iter().enumerate() {
                for c in 0..4 {
                    a[(r, c)] = row[c] as f64;
                }
            }
            a
        } else if self.qform_code > 0 {
            self.qform_affine()
        } else {
            let mut a = Affine::identity();
            for i in 0..3 {
                a[(i, i)] = self.pixdim[i + 1] as f64;
            }
            a
        }
    }

    fn qform_affine(&self) -> Affine {
        let b = self.quatern[0] as f64;
        let c = self.quatern[1] as f64;
        let d = self.quatern[2] as f64;
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let (dx, dy, dz) = (
            self.pixdim[1] as f64,
            self.pixdim[2] as f64,
            qfac * self.pixdim[3] as f64,
        );
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ];
        let mut m = Affine::identity();
        for i in 0..3 {
            m[(i, 0)] = r[i][0] * dx;
            m[(i, 1)] = r[i][1] * dy;
            m[(i, 2)] = r[i][2] * dz;
            m[(i, 3)] = self.qoffset[i] as f64;
        }
        m
    }

    /// Text stored in `descrip`, up to the first NUL.
    pub fn description(&self) -> String {
        let end = self.descrip.iter().position(|&b| b == 0).unwrap_or(80);
        String::from_utf8_lossy(&self.descrip[..end]).into_owned()
    }

    pub fn set_description(&mut self, text: &str) {
        self.descrip = [0; 80];
        let bytes = text.as_bytes();
        let n = bytes.len().min(79);
        self.descrip[..n].copy_from_slice(&bytes[..n]);
    }

    /// Serializes as little-endian NIfTI-1.
    pub fn to_bytes(&self) -> [u8; NIFTI1_HEADER_SIZE] {
        type B = LittleEndian;
        let mut buf = [0u8; NIFTI1_HEADER_SIZE];
        B::write_i32(&mut buf[offsets::SIZEOF_HDR..], NIFTI1_HEADER_SIZE as i32);
        for (i, d) in self.dim.iter().enumerate() {
            B::write_i16(&mut buf[offsets::DIM + 2 * i..], *d);
        }
        B::write_i16(&mut buf[offsets::INTENT_CODE..], self.intent_code);
        B::write_i16(&mut buf[offsets::DATATYPE..], self.datatype);
        B::write_i16(&mut buf[offsets::BITPIX..], self.bitpix);
        for (i, p) in self.pixdim.iter().enumerate() {
            B::write_f32(&mut buf[offsets::PIXDIM + 4 * i..], *p);
        }
        B::write_f32(&mut buf[offsets::VOX_OFFSET..], self.vox_offset);
        B::write_f32(&mut buf[offsets::SCL_SLOPE..], self.scl_slope);
        B::write_f32(&mut buf[offsets::SCL_INTER..], self.scl_inter);
        buf[offsets::XYZT_UNITS] = self.xyzt_units;
        buf[offsets::DESCRIP..offsets::DESCRIP + 80].copy_from_slice(&self.descrip);
        B::write_i16(&mut buf[offsets::QFORM_CODE..], self.qform_code);
        B::write_i16(&mut buf[offsets::SFORM_CODE..], self.sform_code);
        for i in 0..3 {
            B::write_f32(&mut buf[offsets::QUATERN_B + 4 * i..], self.quatern[i]);
            B::write_f32(&mut buf[offsets::QOFFSET_X + 4 * i..], self.qoffset[i]);
        }
        for (r, row) in [self.srow_x, self.srow_y, self.srow_z].iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                B::write_f32(&mut buf[offsets::SROW_X + 16 * r + 4 * c..], *v);
            }
        }
        buf[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&self.magic);
        buf
    }
}
