use super::{PrepError, Result};
use crate::volio::{apply_affine, invert_affine, linear_part, sample_trilinear, sample_trilinear_grad, Affine, Interpolation, Volume};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    Rigid,
    Affine,
}

/// World-to-world transform taking fixed-space millimetres to moving-space
/// millimetres, so the aligned image is `moving(T(p))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    matrix: Affine,
    kind: TransformKind,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self { matrix: Affine::identity(), kind: TransformKind::Identity }
    }

    pub fn new(matrix: Affine, kind: TransformKind) -> Result<Self> {
        let t = Self { matrix, kind };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PrepError::InvalidTransform(m.to_string()));
        let row = self.matrix.row(3);
        if row[0] != 0.0 || row[1] != 0.0 || row[2] != 0.0 || row[3] != 1.0 {
            return bad("bottom row must be (0, 0, 0, 1)");
        }
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return bad("non-finite entry");
        }
        let l = linear_part(&self.matrix);
        match self.kind {
            TransformKind::Identity if (self.matrix - Affine::identity()).abs().max() > 1e-12 => bad("identity transform is not the identity"),
            TransformKind::Rigid if (l.transpose() * l - Matrix3::identity()).abs().max() > 1e-9 || l.determinant() <= 0.0 => {
                bad("rigid transform needs an orthonormal rotation with determinant +1")
            }
            TransformKind::Affine if l.determinant().abs() < 1e-12 => bad("singular affine transform"),
            _ => Ok(()),
        }
    }

    pub fn matrix(&self) -> &Affine {
        &self.matrix
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.matrix, p)
    }

    /// Displacement of the point `p`, in millimetres.
    pub fn displacement_at(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.apply(p);
        [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
    }

    /// In-plane rotation angle about the z axis, in degrees.
    pub fn angle_z_deg(&self) -> f64 {
        self.matrix[(1, 0)].atan2(self.matrix[(0, 0)]).to_degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationOptions {
    /// Pyramid depth; level `l` (0 = coarsest) downsamples by
    /// `2^(levels-1-l)`.
    pub levels: usize,
    pub iters_per_level: usize,
    /// Largest parameter change per iteration, in voxels of the current
    /// level.
    pub step: f64,
    /// Level ends once a halved step falls below this many voxels.
    pub min_step: f64,
    pub metric: Metric,
    pub kind: TransformKind,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        Self { levels: 3, iters_per_level: 100, step: 2.0, min_step: 1e-3, metric: Metric::Mse, kind: TransformKind::Rigid }
    }
}

impl RegistrationOptions {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 || !(self.step > 0.0) || !(self.min_step > 0.0) {
            return Err(PrepError::ConfigInvalid(format!(
                "registration levels {} step {} min_step {}",
                self.levels, self.step, self.min_step
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Objective evaluations per pyramid level, coarsest first.
    pub iterations: Vec<usize>,
    /// Whether every level ended by step size rather than by iteration cap.
    pub converged: bool,
    /// Objective after each accepted iterate, per level.
    #[serde(skip)]
    pub accepted: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub transform: AffineTransform,
    /// Moving volume resampled onto the fixed grid.
    pub resampled: Volume,
    pub report: RegistrationReport,
}

/// Samples `moving` at `T(p)` for every voxel centre `p` of the target grid.
pub fn warp(moving: &Volume, t: &AffineTransform, target_affine: &Affine, target_shape: [usize; 3], interp: Interpolation) -> Result<Volume> {
    let to_moving = invert_affine(moving.affine())? * t.matrix() * target_affine;
    let nearest = |p: [f64; 3]| -> f64 {
        let s = moving.shape();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = p[a].round();
            if !(r >= 0.0 && r <= (s[a] - 1) as f64) {
                return 0.0;
            }
            idx[a] = r as usize;
        }
        moving.get(idx[0], idx[1], idx[2]) as f64
    };
    Ok(Volume::from_fn(target_shape, *target_affine, moving.unit(), |x, y, z| {
        let p = apply_affine(&to_moving, [x as f64, y as f64, z as f64]);
        match interp {
            Interpolation::Trilinear => sample_trilinear(moving, p) as f32,
            Interpolation::Nearest => nearest(p) as f32,
        }
    })?)
}

/// Block-mean downsampling by `factor`; the affine maps the new voxel
/// centres to the centres of their blocks.
pub(crate) fn downsample(v: &Volume, factor: usize) -> Result<Volume> {
    if factor == 1 {
        return Ok(v.clone());
    }
    let s = v.shape();
    let out_shape = s.map(|n| (n / factor).max(1));
    let mut scale = Affine::identity();
    for a in 0..3 {
        let f = factor.min(s[a]);
        scale[(a, a)] = f as f64;
        scale[(a, 3)] = (f as f64 - 1.0) / 2.0;
    }
    let affine = v.affine() * scale;
    let f = s.map(|n| factor.min(n));
    Ok(Volume::from_fn(out_shape, affine, v.unit(), |x, y, z| {
        let mut sum = 0.0f64;
        for dz in 0..f[2] {
            for dy in 0..f[1] {
                for dx in 0..f[0] {
                    sum += v.get(x * f[0] + dx, y * f[1] + dy, z * f[2] + dz) as f64;
                }
            }
        }
        (sum / (f[0] * f[1] * f[2]) as f64) as f32
    })?)
}

/// Parameter vector in millimetre-like units: translation, then either
/// three rotation angles or nine linear-part deviations, both multiplied by
/// the fixed grid's RMS radius.
#[derive(Debug, Clone)]
struct Params {
    kind: TransformKind,
    theta: Vec<f64>,
}

fn rot(axis: usize, a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    match axis {
        0 => (
            Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
            Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s),
        ),
        1 => (
            Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
            Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s),
        ),
        _ => (
            Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0),
        ),
    }
}

impl Params {
    fn zero(kind: TransformKind) -> Self {
        let n = if kind == TransformKind::Affine { 12 } else { 6 };
        Self { kind, theta: vec![0.0; n] }
    }

    /// Linear part and its derivatives with respect to the non-translation
    /// parameters (in unscaled units).
    fn linear(&self, radius: f64) -> (Matrix3<f64>, Vec<Matrix3<f64>>) {
        match self.kind {
            TransformKind::Affine => {
                let mut l = Matrix3::identity();
                let mut d = Vec::with_capacity(9);
                for k in 0..9 {
                    l[(k / 3, k % 3)] += self.theta[3 + k] / radius;
                    let mut e = Matrix3::zeros();
                    e[(k / 3, k % 3)] = 1.0;
                    d.push(e);
                }
                (l, d)
            }
            _ => {
                let angles = [0, 1, 2].map(|k| self.theta[3 + k] / radius);
                let [(rx, dx), (ry, dy), (rz, dz)] = [0, 1, 2].map(|k| rot(k, angles[k]));
                let l = rz * ry * rx;
                (l, vec![rz * ry * dx, rz * dy * rx, dz * ry * rx])
            }
        }
    }

    fn to_transform(&self, center: Vector3<f64>, radius: f64) -> AffineTransform {
        let (l, _) = self.linear(radius);
        let t = Vector3::new(self.theta[0], self.theta[1], self.theta[2]);
        let offset = center + t - l * center;
        let mut m = Affine::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&l);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&offset);
        let kind = if self.theta.iter().all(|&v| v == 0.0) { TransformKind::Identity } else { self.kind };
        AffineTransform { matrix: if kind == TransformKind::Identity { Affine::identity() } else { m }, kind }
    }
}

struct Level {
    fixed: Vec<f64>,
    /// Fixed voxel centres relative to the transform centre (world mm).
    points: Vec<Vector3<f64>>,
    moving: Volume,
    moving_inv: Affine,
    /// Inverse-transpose of the moving linear part: voxel → world gradient.
    grad_to_world: Matrix3<f64>,
}

impl Level {
    fn new(fixed: &Volume, moving: &Volume, center: Vector3<f64>) -> Result<Self> {
        let s = fixed.shape();
        let mut points = Vec::with_capacity(fixed.len());
        for z in 0..s[2] {
            for y in 0..s[1] {
                for x in 0..s[0] {
                    let p = apply_affine(fixed.affine(), [x as f64, y as f64, z as f64]);
                    points.push(Vector3::from(p) - center);
                }
            }
        }
        let moving_inv = invert_affine(moving.affine())?;
        let grad_to_world = linear_part(&moving_inv).transpose();
        Ok(Self { fixed: fixed.data().iter().map(|&v| v as f64).collect(), points, moving: moving.clone(), moving_inv, grad_to_world })
    }

    /// Mean squared error, plus its gradient and Gauss-Newton matrix when
    /// requested.
    fn objective(&self, p: &Params, center: Vector3<f64>, radius: f64, with_grad: bool) -> Eval {
        let (l, dl) = p.linear(radius);
        let t = Vector3::new(p.theta[0], p.theta[1], p.theta[2]);
        let np = p.theta.len();
        let mut loss = 0.0;
        let mut grad = DVector::zeros(if with_grad { np } else { 0 });
        let mut gn = DMatrix::zeros(grad.len(), grad.len());
        let mut row = DVector::zeros(np);
        for (rel, &f) in self.points.iter().zip(&self.fixed) {
            let q = center + t + l * rel;
            let u = apply_affine(&self.moving_inv, [q.x, q.y, q.z]);
            if with_grad {
                let (val, gv) = sample_trilinear_grad(&self.moving, u);
                let r = val - f;
                loss += r * r;
                let g = self.grad_to_world * Vector3::from(gv);
                row[0] = g.x;
                row[1] = g.y;
                row[2] = g.z;
                for (k, d) in dl.iter().enumerate() {
                    row[3 + k] = g.dot(&(d * rel)) / radius;
                }
                grad.axpy(2.0 * r, &row, 1.0);
                gn.ger(2.0, &row, &row, 1.0);
            } else {
                let r = sample_trilinear(&self.moving, u) - f;
                loss += r * r;
            }
        }
        let n = self.fixed.len() as f64;
        Eval { loss: loss / n, grad: grad / n, gn: gn / n }
    }
}

struct Eval {
    loss: f64,
    grad: DVector<f64>,
    gn: DMatrix<f64>,
}

/// Damped Gauss-Newton direction, capped to `max_len` in the max norm.
fn direction(e: &Eval, max_len: f64) -> Option<DVector<f64>> {
    let mut h = e.gn.clone();
    let trace = h.trace() / h.nrows() as f64;
    for i in 0..h.nrows() {
        h[(i, i)] += 1e-3 * h[(i, i)] + 1e-2 * trace.max(f64::MIN_POSITIVE);
    }
    let mut d = -h.cholesky()?.solve(&e.grad);
    let len = d.amax();
    if !(len.is_finite()) || len == 0.0 {
        return None;
    }
    if len > max_len {
        d *= max_len / len;
    }
    Some(d)
}

/// Intensity-weighted centroid in world mm over positive voxels.
fn center_of_mass(v: &Volume) -> Option<[f64; 3]> {
    let s = v.shape();
    let (mut w, mut acc) = (0.0, [0.0; 3]);
    for z in 0..s[2] {
        for y in 0..s[1] {
            for x in 0..s[0] {
                let m = v.get(x, y, z) as f64;
                if m > 0.0 {
                    w += m;
                    acc[0] += m * x as f64;
                    acc[1] += m * y as f64;
                    acc[2] += m * z as f64;
                }
            }
        }
    }
    (w > 0.0).then(|| apply_affine(v.affine(), acc.map(|a| a / w)))
}

fn check_not_constant(v: &Volume, which: &str) -> Result<()> {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(PrepError::DegenerateInput(format!("{which} volume is constant ({lo})")));
    }
    Ok(())
}

/// Aligns `moving` to `fixed` by minimizing the mean squared intensity
/// difference with damped Gauss-Newton steps and step halving over a
/// coarse-to-fine pyramid. The transform is centred on the fixed grid.
pub fn register_affine(moving: &Volume, fixed: &Volume, opts: &RegistrationOptions) -> Result<Registration> {
    opts.validate()?;
    check_not_constant(moving, "moving")?;
    check_not_constant(fixed, "fixed")?;
    let center = Vector3::from(fixed.world_center());
    let full = Level::new(fixed, moving, center)?;
    let radius = (full.points.iter().map(|p| p.norm_squared()).sum::<f64>() / full.points.len() as f64).sqrt().max(1.0);
    let kind = if opts.kind == TransformKind::Identity { TransformKind::Rigid } else { opts.kind };
    let mut params = Params::zero(kind);
    let initial_mse = full.objective(&params, center, radius, false).loss;
    let mut start = params.clone();
    if let (Some(cm), Some(cf)) = (center_of_mass(moving), center_of_mass(fixed)) {
        start.theta[..3].copy_from_slice(&[cm[0] - cf[0], cm[1] - cf[1], cm[2] - cf[2]]);
    }
    params = start.clone();

    let mut iterations = Vec::with_capacity(opts.levels);
    let mut accepted = Vec::with_capacity(opts.levels);
    let mut converged = true;
    if opts.kind != TransformKind::Identity {
        for l in 0..opts.levels {
            let factor = 1usize << (opts.levels - 1 - l);
            let level = if factor == 1 {
                None
            } else {
                Some(Level::new(&downsample(fixed, factor)?, &downsample(moving, factor)?, center)?)
            };
            let level = level.as_ref().unwrap_or(&full);
            let voxel = fixed.spacing().iter().sum::<f64>() / 3.0 * factor as f64;
            let (max_step, min_step) = (opts.step * voxel, opts.min_step * voxel);
            let mut current = level.objective(&params, center, radius, true);
            let mut evals = 1;
            if l > 0 {
                // A coarse level can settle where the finer one disagrees.
                let restart = level.objective(&start, center, radius, true);
                evals += 1;
                if restart.loss < current.loss {
                    params = start.clone();
                    current = restart;
                }
            }
            let mut trace = vec![current.loss];
            let mut done = false;
            while !done && evals < opts.iters_per_level {
                let Some(d) = direction(&current, max_step) else { break };
                let mut scale = 1.0;
                loop {
                    if scale * d.amax() < min_step {
                        done = true;
                        break;
                    }
                    let trial = Params { kind, theta: params.theta.iter().zip(d.iter()).map(|(t, d)| t + scale * d).collect() };
                    let e = level.objective(&trial, center, radius, true);
                    evals += 1;
                    if e.loss < current.loss {
                        params = trial;
                        current = e;
                        trace.push(current.loss);
                        break;
                    }
                    scale /= 2.0;
                    if evals >= opts.iters_per_level {
                        break;
                    }
                }
            }
            let step = if done { 0.0 } else { min_step };
            converged &= step < min_step;
            iterations.push(evals);
            accepted.push(trace);
        }
    }

    let mut transform = params.to_transform(center, radius);
    let mut final_mse = full.objective(&params, center, radius, false).loss;
    if !(final_mse <= initial_mse) {
        transform = AffineTransform::identity();
        final_mse = initial_mse;
    }
    let resampled = warp(moving, &transform, fixed.affine(), fixed.shape(), Interpolation::Trilinear)?;
    Ok(Registration { transform, resampled, report: RegistrationReport { initial_mse, final_mse, iterations, converged, accepted } })
}
