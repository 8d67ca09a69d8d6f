use super::{IntensityMap, PrepError, Result};
use crate::volio::{Affine, IntensityUnit, Volume};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrainParams {
    /// Tissue window in HU.
    pub tissue_low: f64,
    pub tissue_high: f64,
    pub closing_radius_vox: usize,
}

impl Default for BrainParams {
    fn default() -> Self {
        Self { tissue_low: 0.0, tissue_high: 100.0, closing_radius_vox: 2 }
    }
}

/// Binary brain mask on the grid of its source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainMask {
    grid: Vec<bool>,
    shape: [usize; 3],
    affine: Affine,
    voxel_count: usize,
}

impl BrainMask {
    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn voxel_count(&self) -> usize {
        self.voxel_count
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        self.grid[x + self.shape[0] * (y + self.shape[1] * z)]
    }

    /// Mask volume in millilitres.
    pub fn volume_ml(&self) -> f64 {
        let det = crate::volio::linear_part(&self.affine).determinant().abs();
        self.voxel_count as f64 * det / 1000.0
    }

    /// The mask as a 0/1 volume.
    pub fn to_volume(&self) -> Result<Volume> {
        let data = self.grid.iter().map(|&b| f32::from(u8::from(b))).collect();
        Ok(Volume::new(data, self.shape, self.affine, IntensityUnit::Normalized)?)
    }

    /// Zeroes every voxel of `v` outside the mask.
    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        if v.shape() != self.shape {
            return Err(PrepError::ShapeMismatch(format!("mask {:?} vs volume {:?}", self.shape, v.shape())));
        }
        let data = v.data().iter().zip(&self.grid).map(|(&x, &m)| if m { x } else { 0.0 }).collect();
        Ok(v.with_data(data, v.unit())?)
    }
}

/// Sørensen–Dice overlap of two equally sized binary grids.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "dice of differently sized grids");
    let (mut both, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        both += usize::from(x && y);
        total += usize::from(x) + usize::from(y);
    }
    if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    }
}

/// Threshold, keep the largest 6-connected component, close with a ball and
/// fill enclosed holes. `map` converts the HU window when `v` holds
/// non-negative intensities.
pub fn extract_brain(v: &Volume, params: &BrainParams, map: &IntensityMap) -> Result<BrainMask> {
    let (lo, hi) = match v.unit() {
        IntensityUnit::Hu => (params.tissue_low, params.tissue_high),
        IntensityUnit::NonNegative => {
            map.validate()?;
            (map.apply(params.tissue_low), map.apply(params.tissue_high))
        }
        unit => return Err(PrepError::UnitMismatch { expected: IntensityUnit::Hu, actual: unit }),
    };
    if !(lo <= hi) {
        return Err(PrepError::ConfigInvalid(format!("tissue window [{}, {}]", params.tissue_low, params.tissue_high)));
    }
    let shape = v.shape();
    let tissue: Vec<bool> = v.data().iter().map(|&x| (lo..=hi).contains(&(x as f64))).collect();
    if !tissue.iter().any(|&b| b) {
        return Err(PrepError::EmptyMask);
    }
    let largest = largest_component(&tissue, shape);
    let r = params.closing_radius_vox;
    let pad = r + 1;
    let padded_shape = shape.map(|n| n + 2 * pad);
    let mut grid = embed(&largest, shape, padded_shape, pad);
    if r > 0 {
        let ball = ball_offsets(r);
        grid = dilate(&grid, padded_shape, &ball);
        grid = erode(&grid, padded_shape, &ball);
    }
    fill_holes(&mut grid, padded_shape);
    let cropped = crop(&grid, padded_shape, shape, pad);
    let grid = largest_component(&cropped, shape);
    let voxel_count = grid.iter().filter(|&&b| b).count();
    Ok(BrainMask { grid, shape, affine: *v.affine(), voxel_count })
}

fn neighbours6(i: usize, s: [usize; 3]) -> impl Iterator<Item = usize> {
    let (x, y, z) = (i % s[0], (i / s[0]) % s[1], i / (s[0] * s[1]));
    let sx = s[0];
    let sxy = s[0] * s[1];
    [
        (x > 0).then(|| i - 1),
        (x + 1 < s[0]).then(|| i + 1),
        (y > 0).then(|| i - sx),
        (y + 1 < s[1]).then(|| i + sx),
        (z > 0).then(|| i - sxy),
        (z + 1 < s[2]).then(|| i + sxy),
    ]
    .into_iter()
    .flatten()
}

/// Labels 6-connected components; returns the largest (ties: the one
/// reached first in voxel order).
pub(crate) fn largest_component(grid: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let mut label = vec![0u32; grid.len()];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..grid.len() {
        if !grid[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours6(i, shape) {
                if grid[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.1).collect()
}

fn ball_offsets(r: usize) -> Vec<[isize; 3]> {
    let r = r as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r * r {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn embed(grid: &[bool], shape: [usize; 3], padded: [usize; 3], pad: usize) -> Vec<bool> {
    let mut out = vec![false; padded.iter().product()];
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                out[(x + pad) + padded[0] * ((y + pad) + padded[1] * (z + pad))] = grid[x + shape[0] * (y + shape[1] * z)];
            }
        }
    }
    out
}

fn crop(grid: &[bool], padded: [usize; 3], shape: [usize; 3], pad: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(shape.iter().product());
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                out.push(grid[(x + pad) + padded[0] * ((y + pad) + padded[1] * (z + pad))]);
            }
        }
    }
    out
}

fn shifted(i: usize, o: [isize; 3], s: [usize; 3]) -> Option<usize> {
    let p = [i % s[0], (i / s[0]) % s[1], i / (s[0] * s[1])];
    let mut q = [0usize; 3];
    for a in 0..3 {
        let c = p[a] as isize + o[a];
        if c < 0 || c >= s[a] as isize {
            return None;
        }
        q[a] = c as usize;
    }
    Some(q[0] + s[0] * (q[1] + s[1] * q[2]))
}

fn dilate(grid: &[bool], s: [usize; 3], ball: &[[isize; 3]]) -> Vec<bool> {
    let mut out = vec![false; grid.len()];
    for (i, _) in grid.iter().enumerate().filter(|(_, &b)| b) {
        for &o in ball {
            if let Some(j) = shifted(i, o, s) {
                out[j] = true;
            }
        }
    }
    out
}

fn erode(grid: &[bool], s: [usize; 3], ball: &[[isize; 3]]) -> Vec<bool> {
    (0..grid.len())
        .map(|i| grid[i] && ball.iter().all(|&o| shifted(i, o, s).is_some_and(|j| grid[j])))
        .collect()
}

/// Fills background regions not 6-connected to the grid border.
fn fill_holes(grid: &mut [bool], s: [usize; 3]) {
    let mut outside = vec![false; grid.len()];
    let mut queue = VecDeque::new();
    for z in 0..s[2] {
        for y in 0..s[1] {
            for x in 0..s[0] {
                let border = x == 0 || y == 0 || z == 0 || x + 1 == s[0] || y + 1 == s[1] || z + 1 == s[2];
                let i = x + s[0] * (y + s[1] * z);
                if border && !grid[i] && !outside[i] {
                    outside[i] = true;
                    queue.push_back(i);
                }
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours6(i, s) {
            if !grid[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    for (g, o) in grid.iter_mut().zip(outside) {
        *g = !o;
    }
}
