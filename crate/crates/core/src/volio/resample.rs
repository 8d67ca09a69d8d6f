use super::{apply_affine, diagonal_affine, invert_affine, Affine, Result, VolioError, Volume};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    #[default]
    Trilinear,
}

const EDGE_TOL: f64 = 1e-6;

/// Lower neighbour index and fractional weight along one axis, or `None`
/// when the coordinate lies outside `[0, n-1]`.
#[inline]
fn axis_weights(c: f64, n: usize) -> Option<(usize, usize, f64)> {
    let hi = (n - 1) as f64;
    if !(c >= -EDGE_TOL && c <= hi + EDGE_TOL) {
        return None;
    }
    let c = c.clamp(0.0, hi);
    let i0 = c.floor() as usize;
    if i0 >= n - 1 {
        return Some((n - 1, n - 1, 0.0));
    }
    Some((i0, i0 + 1, c - i0 as f64))
}

/// Trilinear sample at continuous voxel coordinates; 0 outside the grid.
pub fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let [nx, ny, nz] = v.shape();
    let (Some((x0, x1, fx)), Some((y0, y1, fy)), Some((z0, z1, fz))) =
        (axis_weights(p[0], nx), axis_weights(p[1], ny), axis_weights(p[2], nz))
    else {
        return 0.0;
    };
    let d = v.data();
    let at = |x: usize, y: usize, z: usize| d[x + nx * (y + ny * z)] as f64;
    let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
    let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
    let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
    let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Trilinear sample plus its gradient with respect to voxel coordinates.
/// Outside the grid both are zero.
pub(crate) fn sample_trilinear_grad(v: &Volume, p: [f64; 3]) -> (f64, [f64; 3]) {
    let [nx, ny, nz] = v.shape();
    let (Some((x0, x1, fx)), Some((y0, y1, fy)), Some((z0, z1, fz))) =
        (axis_weights(p[0], nx), axis_weights(p[1], ny), axis_weights(p[2], nz))
    else {
        return (0.0, [0.0; 3]);
    };
    let d = v.data();
    let at = |x: usize, y: usize, z: usize| d[x + nx * (y + ny * z)] as f64;
    let v000 = at(x0, y0, z0);
    let v100 = at(x1, y0, z0);
    let v010 = at(x0, y1, z0);
    let v110 = at(x1, y1, z0);
    let v001 = at(x0, y0, z1);
    let v101 = at(x1, y0, z1);
    let v011 = at(x0, y1, z1);
    let v111 = at(x1, y1, z1);
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    let val = gz * (gy * (gx * v000 + fx * v100) + fy * (gx * v010 + fx * v110))
        + fz * (gy * (gx * v001 + fx * v101) + fy * (gx * v011 + fx * v111));
    let dx = if x1 == x0 {
        0.0
    } else {
        gz * (gy * (v100 - v000) + fy * (v110 - v010)) + fz * (gy * (v101 - v001) + fy * (v111 - v011))
    };
    let dy = if y1 == y0 {
        0.0
    } else {
        gz * (gx * (v010 - v000) + fx * (v110 - v100)) + fz * (gx * (v011 - v001) + fx * (v111 - v101))
    };
    let dz = if z1 == z0 {
        0.0
    } else {
        gy * (gx * (v001 - v000) + fx * (v101 - v100)) + fy * (gx * (v011 - v010) + fx * (v111 - v110))
    };
    (val, [dx, dy, dz])
}

fn sample_nearest(v: &Volume, p: [f64; 3]) -> f64 {
    let s = v.shape();
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = p[a].round();
        if !(r >= 0.0 && r <= (s[a] - 1) as f64) {
            return 0.0;
        }
        idx[a] = r as usize;
    }
    v.get(idx[0], idx[1], idx[2]) as f64
}

/// Resamples `v` onto the grid described by `target_affine`/`target_shape`.
///
/// Each target voxel centre is mapped to world mm and then into source voxel
/// coordinates; samples outside the source grid are 0.
pub fn resample(
    v: &Volume,
    target_affine: &Affine,
    target_shape: [usize; 3],
    interp: Interpolation,
) -> Result<Volume> {
    if target_shape.contains(&0) {
        return Err(VolioError::InvalidVolume("target shape must be positive".into()));
    }
    invert_affine(target_affine)?;
    let to_source = invert_affine(v.affine())? * target_affine;
    if target_shape == v.shape() && (to_source - Affine::identity()).abs().max() == 0.0 {
        return Volume::new(v.data().to_vec(), target_shape, *target_affine, v.unit());
    }
    Volume::from_fn(target_shape, *target_affine, v.unit(), |x, y, z| {
        let p = apply_affine(&to_source, [x as f64, y as f64, z as f64]);
        match interp {
            Interpolation::Trilinear => sample_trilinear(v, p) as f32,
            Interpolation::Nearest => sample_nearest(v, p) as f32,
        }
    })
}

/// Axis-aligned grid covering the world bounding box of `v`, keeping its
/// per-axis voxel spacing. Used to undo sheared (gantry-tilted) geometry.
pub fn axis_aligned_grid(v: &Volume) -> (Affine, [usize; 3]) {
    let s = v.shape();
    let spacing = v.spacing();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for corner in 0..8 {
        let p = [
            if corner & 1 == 0 { 0.0 } else { (s[0] - 1) as f64 },
            if corner & 2 == 0 { 0.0 } else { (s[1] - 1) as f64 },
            if corner & 4 == 0 { 0.0 } else { (s[2] - 1) as f64 },
        ];
        let w = apply_affine(v.affine(), p);
        for a in 0..3 {
            lo[a] = lo[a].min(w[a]);
            hi[a] = hi[a].max(w[a]);
        }
    }
    let mut shape = [1usize; 3];
    for a in 0..3 {
        shape[a] = ((hi[a] - lo[a]) / spacing[a] - 1e-9).ceil().max(0.0) as usize + 1;
    }
    (diagonal_affine(spacing, lo), shape)
}
