//! Volume data model and NIfTI-1 input/output.
//!
//! A [`Volume`] is a 3D scalar grid (2D images are stored with `nz == 1`)
//! together with its voxel-to-world affine in millimetres. Voxels are laid
//! out x-fastest, matching the NIfTI on-disk order.

mod header;
mod nifti;
mod resample;

pub use header::{DataType, NiftiHeader, NIFTI1_HEADER_SIZE};
pub use nifti::{
    parse_nifti, read_nifti, read_nifti_file, read_nifti_with, write_nifti, write_nifti_file,
    write_nifti_with_extensions, NiftiImage, ReadOptions,
};
pub use resample::{axis_aligned_grid, resample, sample_trilinear, Interpolation};
pub(crate) use resample::sample_trilinear_grad;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Voxel-index to world-millimetre transform.
pub type Affine = Matrix4<f64>;

#[derive(Debug, Error)]
pub enum VolioError {
    #[error("not a NIfTI-1 image (bad sizeof_hdr or magic)")]
    BadMagic,
    #[error("NIfTI-2 images are not supported")]
    Nifti2Unsupported,
    #[error("NIfTI-1 header/image pairs (.hdr/.img) are not supported")]
    PairUnsupported,
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated input: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("non-finite voxel value at index {index}")]
    NonFinite { index: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("singular affine (|det| = {0:e})")]
    SingularAffine(f64),
    #[error("gzip decompression failed: {0}")]
    Gzip(std::io::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VolioError>;

/// Intensity scale carried by a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum IntensityUnit {
    /// Hounsfield units as acquired.
    #[default]
    Hu,
    /// Shifted/clamped so the minimum is zero.
    NonNegative,
    /// Rescaled into [0, 1].
    Normalized,
}

impl IntensityUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hu => "HU",
            Self::NonNegative => "NonNegative",
            Self::Normalized => "Normalized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "HU" => Some(Self::Hu),
            "NonNegative" => Some(Self::NonNegative),
            "Normalized" => Some(Self::Normalized),
            _ => None,
        }
    }
}

/// Immutable 3D scalar grid with geometry.
///
/// Affine entries are held at float32 precision, the precision of the
/// on-disk srow fields, so a write/read roundtrip is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    shape: [usize; 3],
    affine: Affine,
    unit: IntensityUnit,
}

pub(crate) fn round_affine_f32(a: &Affine) -> Affine {
    a.map(|v| v as f32 as f64)
}

pub(crate) fn check_affine(a: &Affine) -> Result<()> {
    let bottom = a.row(3);
    if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
        return Err(VolioError::InvalidVolume(
            "affine bottom row must be (0,0,0,1)".into(),
        ));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(VolioError::InvalidVolume("affine has non-finite entries".into()));
    }
    let det = linear_part(a).determinant();
    if det.abs() <= 1e-9 {
        return Err(VolioError::SingularAffine(det));
    }
    Ok(())
}

/// Upper-left 3×3 block of an affine.
pub fn linear_part(a: &Affine) -> Matrix3<f64> {
    a.fixed_view::<3, 3>(0, 0).into_owned()
}

/// Inverse of an invertible affine; errors when the linear part is singular.
pub fn invert_affine(a: &Affine) -> Result<Affine> {
    let lin = linear_part(a);
    let det = lin.determinant();
    if det.abs() <= 1e-9 {
        return Err(VolioError::SingularAffine(det));
    }
    let inv = lin.try_inverse().ok_or(VolioError::SingularAffine(det))?;
    let t = Vector3::new(a[(0, 3)], a[(1, 3)], a[(2, 3)]);
    let ti = -(inv * t);
    let mut out = Affine::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&inv);
    out[(0, 3)] = ti[0];
    out[(1, 3)] = ti[1];
    out[(2, 3)] = ti[2];
    Ok(out)
}

pub fn apply_affine(a: &Affine, p: [f64; 3]) -> [f64; 3] {
    let v = a * Vector4::new(p[0], p[1], p[2], 1.0);
    [v[0], v[1], v[2]]
}

impl Volume {
    pub fn new(data: Vec<f32>, shape: [usize; 3], affine: Affine, unit: IntensityUnit) -> Result<Self> {
        if shape.contains(&0) {
            return Err(VolioError::InvalidVolume(format!("shape {shape:?} has a zero extent")));
        }
        let n = shape[0] * shape[1] * shape[2];
        if data.len() != n {
            return Err(VolioError::InvalidVolume(format!(
                "data length {} does not match shape {:?} ({} voxels)",
                data.len(),
                shape,
                n
            )));
        }
        let affine = round_affine_f32(&affine);
        check_affine(&affine)?;
        Ok(Self { data, shape, affine, unit })
    }

    pub fn zeros(shape: [usize; 3], affine: Affine, unit: IntensityUnit) -> Result<Self> {
        Self::new(vec![0.0; shape.iter().product()], shape, affine, unit)
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        shape: [usize; 3],
        affine: Affine,
        unit: IntensityUnit,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(data, shape, affine, unit)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn unit(&self) -> IntensityUnit {
        self.unit
    }

    /// Same geometry, new voxel values.
    pub fn with_data(&self, data: Vec<f32>, unit: IntensityUnit) -> Result<Self> {
        Self::new(data, self.shape, self.affine, unit)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Voxel sizes in mm (column norms of the linear part).
    pub fn spacing(&self) -> [f64; 3] {
        let l = linear_part(&self.affine);
        [l.column(0).norm(), l.column(1).norm(), l.column(2).norm()]
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        linear_part(&self.affine).determinant().abs()
    }

    /// World coordinate of the grid centre.
    pub fn world_center(&self) -> [f64; 3] {
        let c = [
            (self.shape[0] as f64 - 1.0) / 2.0,
            (self.shape[1] as f64 - 1.0) / 2.0,
            (self.shape[2] as f64 - 1.0) / 2.0,
        ];
        apply_affine(&self.affine, c)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// True when the linear part has no off-diagonal terms.
    pub fn is_axis_aligned(&self) -> bool {
        let l = linear_part(&self.affine);
        (0..3).all(|i| (0..3).all(|j| i == j || l[(i, j)].abs() <= 1e-6))
    }
}

/// Diagonal affine with the given spacing and origin.
pub fn diagonal_affine(spacing: [f64; 3], origin: [f64; 3]) -> Affine {
    let mut a = Affine::identity();
    for i in 0..3 {
        a[(i, i)] = spacing[i];
        a[(i, 3)] = origin[i];
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        let err = Volume::new(vec![0.0; 7], [2, 2, 2], Affine::identity(), IntensityUnit::Hu);
        assert!(matches!(err, Err(VolioError::InvalidVolume(_))));
    }

    #[test]
    fn rejects_singular_affine() {
        let mut a = Affine::identity();
        a[(2, 2)] = 0.0;
        let err = Volume::zeros([2, 2, 2], a, IntensityUnit::Hu);
        assert!(matches!(err, Err(VolioError::SingularAffine(_))));
    }

    #[test]
    fn rejects_bad_bottom_row() {
        let mut a = Affine::identity();
        a[(3, 0)] = 0.5;
        assert!(Volume::zeros([2, 2, 2], a, IntensityUnit::Hu).is_err());
    }

    #[test]
    fn inverse_roundtrips_points() {
        let mut a = diagonal_affine([2.0, 3.0, 4.0], [-10.0, 5.0, 1.0]);
        a[(0, 2)] = 0.3;
        let inv = invert_affine(&a).unwrap();
        let p = [1.5, -2.0, 7.25];
        let q = apply_affine(&inv, apply_affine(&a, p));
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_is_held_at_f32_precision() {
        let a = diagonal_affine([0.1, 1.0, 1.0], [0.0; 3]);
        let v = Volume::zeros([1, 1, 1], a, IntensityUnit::Hu).unwrap();
        assert_eq!(v.affine()[(0, 0)], 0.1f32 as f64);
    }
}
