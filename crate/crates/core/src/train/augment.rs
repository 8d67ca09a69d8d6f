use super::{Result, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticConfig {
    pub enabled: bool,
    /// Maximum displacement in voxels.
    pub alpha: f64,
    /// Gaussian smoothing width in voxels.
    pub sigma: f64,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self { enabled: true, alpha: 2.0, sigma: 4.0 }
    }
}

/// Random spatial augmentation. Axes index the spatial dimensions of a
/// sample in storage order; for volumes the first axis is the axial
/// (slice) axis and rotation acts in the plane of the other two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub enabled: bool,
    /// Axes that are each mirrored with `mirror_prob`; negative values
    /// count from the last axis.
    pub mirror_axes: Vec<isize>,
    pub mirror_prob: f64,
    /// Maximum in-plane rotation in degrees, drawn from `±rotation_deg`.
    pub rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub elastic: ElasticConfig,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mirror_axes: vec![-1],
            mirror_prob: 0.5,
            rotation_deg: 15.0,
            scale_range: [0.9, 1.1],
            elastic: ElasticConfig::default(),
        }
    }
}

impl AugConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(TrainError::ConfigInvalid(format!("scale range [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(TrainError::ConfigInvalid(format!("mirror probability {}", self.mirror_prob)));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg.is_finite()) {
            return Err(TrainError::ConfigInvalid(format!("rotation range {}", self.rotation_deg)));
        }
        let e = &self.elastic;
        if e.enabled && !(e.sigma > 0.0 && e.alpha >= 0.0 && e.alpha.is_finite()) {
            return Err(TrainError::ConfigInvalid(format!("elastic alpha {} sigma {}", e.alpha, e.sigma)));
        }
        Ok(())
    }

    fn axes(&self, rank: usize) -> Vec<usize> {
        let rank = rank as isize;
        self.mirror_axes
            .iter()
            .map(|&a| if a < 0 { a + rank } else { a })
            .filter(|a| (0..rank).contains(a))
            .map(|a| a as usize)
            .collect()
    }
}

/// Up to three spatial extents, padded at the front with 1.
fn dims3(spatial: &[usize]) -> [usize; 3] {
    let mut d = [1; 3];
    d[3 - spatial.len()..].copy_from_slice(spatial);
    d
}

/// Reverses `data` along spatial `axis`.
pub fn mirror(data: &[f32], spatial: &[usize], axis: usize) -> Vec<f32> {
    let d = dims3(spatial);
    let a = axis + 3 - spatial.len();
    let mut out = vec![0.0; data.len()];
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let mut p = [z, y, x];
                let dst = (z * d[1] + y) * d[2] + x;
                p[a] = d[a] - 1 - p[a];
                out[dst] = data[(p[0] * d[1] + p[1]) * d[2] + p[2]];
            }
        }
    }
    out
}

/// Linear interpolation with zero outside the grid.
fn sample(data: &[f32], d: [usize; 3], q: [f64; 3]) -> f64 {
    let base = q.map(f64::floor);
    let frac = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let hi = (corner >> (2 - a)) & 1 == 1;
            let f = if hi { frac[a] } else { 1.0 - frac[a] };
            if f == 0.0 {
                inside = false;
                break;
            }
            w *= f;
            let i = base[a] as i64 + hi as i64;
            if i < 0 || i >= d[a] as i64 {
                inside = false;
                break;
            }
            idx[a] = i as usize;
        }
        if inside {
            acc += w * data[(idx[0] * d[1] + idx[1]) * d[2] + idx[2]] as f64;
        }
    }
    acc
}

fn smooth_axis(field: &mut [f64], d: [usize; 3], axis: usize, kernel: &[f64]) {
    let n = d[axis];
    if n == 1 {
        return;
    }
    let r = kernel.len() - 1;
    let stride = [d[1] * d[2], d[2], 1][axis];
    let mut line = vec![0.0; n];
    for start in 0..field.len() {
        let coord = (start / stride) % n;
        if coord != 0 {
            continue;
        }
        for (i, l) in line.iter_mut().enumerate() {
            *l = field[start + i * stride];
        }
        for i in 0..n {
            let (mut acc, mut norm) = (0.0, 0.0);
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(n - 1);
            for j in lo..=hi {
                let k = kernel[i.abs_diff(j)];
                acc += k * line[j];
                norm += k;
            }
            field[start + i * stride] = acc / norm;
        }
    }
}

/// Smooth random displacement field, one `[d0, d1, d2]` vector per voxel
/// with components in storage axis order. Components for size-1 axes (the
/// padding axis of planar samples) are zero.
pub fn elastic_field(spatial: &[usize], alpha: f64, sigma: f64, seed: u64) -> Vec<[f64; 3]> {
    let d = dims3(spatial);
    let n = d.iter().product::<usize>();
    let mut out = vec![[0.0; 3]; n];
    if alpha == 0.0 || n == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_extent = *d.iter().max().expect("three axes");
    let radius = ((4.0 * sigma).ceil() as usize).clamp(1, max_extent);
    let kernel: Vec<f64> = (0..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    for c in 0..3 {
        if d[c] == 1 {
            continue;
        }
        let mut comp: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        for axis in 0..3 {
            smooth_axis(&mut comp, d, axis, &kernel);
        }
        for (o, v) in out.iter_mut().zip(comp) {
            o[c] = v;
        }
    }
    let max_norm = out.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max);
    if max_norm > 0.0 {
        let s = alpha / max_norm;
        out.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= s));
    }
    out
}

/// Augmentation parameters drawn for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AugDraw {
    pub mirrored: Vec<usize>,
    pub angle_rad: f64,
    pub scale: f64,
    pub elastic_seed: Option<u64>,
}

impl AugDraw {
    /// Draws parameters in the fixed order mirror, rotation, scale, elastic.
    pub fn draw(cfg: &AugConfig, rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mirrored = cfg.axes(rank).into_iter().filter(|_| rng.random::<f64>() < cfg.mirror_prob).collect();
        let r = cfg.rotation_deg.to_radians();
        let angle_rad = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let [lo, hi] = cfg.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let elastic_seed = (cfg.elastic.enabled && cfg.elastic.alpha > 0.0).then(|| rng.random());
        Self { mirrored, angle_rad, scale, elastic_seed }
    }

    fn is_identity(&self) -> bool {
        self.mirrored.is_empty() && self.angle_rad == 0.0 && self.scale == 1.0 && self.elastic_seed.is_none()
    }
}

/// Applies a random mirror, in-plane rotation, isotropic scaling and
/// elastic deformation (in that order) to one single-channel sample,
/// resampling once with linear interpolation and zero fill.
pub fn augment_sample(data: &[f32], spatial: &[usize], seed: u64, cfg: &AugConfig) -> Vec<f32> {
    if !cfg.enabled || spatial.is_empty() || spatial.len() > 3 {
        return data.to_vec();
    }
    let draw = AugDraw::draw(cfg, spatial.len(), seed);
    if draw.is_identity() {
        return data.to_vec();
    }
    let d = dims3(spatial);
    let pad = 3 - spatial.len();
    let flips: Vec<usize> = draw.mirrored.iter().map(|a| a + pad).collect();
    let field = draw.elastic_seed.map(|s| elastic_field(spatial, cfg.elastic.alpha, cfg.elastic.sigma, s));
    let c = d.map(|n| (n as f64 - 1.0) / 2.0);
    let (sin, cos) = draw.angle_rad.sin_cos();
    let mut out = vec![0.0f32; data.len()];
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let i = (z * d[1] + y) * d[2] + x;
                let mut q = [z as f64, y as f64, x as f64];
                if let Some(f) = &field {
                    (0..3).for_each(|a| q[a] += f[i][a]);
                }
                for a in 0..3 {
                    if d[a] > 1 {
                        q[a] = c[a] + (q[a] - c[a]) / draw.scale;
                    }
                }
                let (u, v) = (q[1] - c[1], q[2] - c[2]);
                q[1] = c[1] + cos * u + sin * v;
                q[2] = c[2] - sin * u + cos * v;
                for &a in &flips {
                    q[a] = (d[a] - 1) as f64 - q[a];
                }
                out[i] = sample(data, d, q) as f32;
            }
        }
    }
    out
}
