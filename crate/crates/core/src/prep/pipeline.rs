use super::{
    extract_brain, register_affine, to_nonnegative, warp, BrainMask, BrainParams, IntensityMap, IntensityMode, PrepError,
    RegistrationOptions, RegistrationReport, Result,
};
use crate::volio::{axis_aligned_grid, diagonal_affine, resample, Affine, IntensityUnit, Interpolation, Volume};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    pub intensity: IntensityMap,
    pub brain: BrainParams,
    pub registration: RegistrationOptions,
    /// Lower and upper percentiles of the final rescaling window.
    pub percentiles: [f64; 2],
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            intensity: IntensityMap::default(),
            brain: BrainParams::default(),
            registration: RegistrationOptions::default(),
            percentiles: [0.5, 99.5],
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        self.intensity.validate()?;
        self.registration.validate()?;
        let [lo, hi] = self.percentiles;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(PrepError::ConfigInvalid(format!("percentiles {:?}", self.percentiles)));
        }
        Ok(())
    }
}

/// Per-subject quality-control record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcRecord {
    pub intensity_mode: IntensityMode,
    pub resampled_to_axis_aligned: bool,
    pub clamped_voxels: usize,
    pub mask_voxels: usize,
    pub mask_volume_ml: f64,
    pub registration: RegistrationReport,
    /// Fixed-to-moving world transform, row-major 4×4.
    pub transform: [[f64; 4]; 4],
    /// Intensity window mapped to [0, 1].
    pub normalization_window: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    /// Normalized volume on the template grid.
    pub volume: Volume,
    /// Brain mask carried onto the template grid.
    pub registered_mask: Vec<bool>,
    pub qc: QcRecord,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| PrepError::Stage { stage: name, source: Box::new(e) })
}

/// Linear-interpolated percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    let hi = v[(i + 1).min(v.len() - 1)];
    Some(v[i] + frac * (hi - v[i]))
}

/// Resample to an axis-aligned grid, map to non-negative intensities,
/// mask the brain, register to `template` and rescale to [0, 1] by the
/// configured percentiles of the registered brain.
pub fn run_pipeline(v: &Volume, template: &Volume, cfg: &PrepConfig) -> Result<Preprocessed> {
    stage("config", cfg.validate())?;
    if v.unit() != IntensityUnit::Hu {
        return Err(PrepError::Stage {
            stage: "input",
            source: Box::new(PrepError::UnitMismatch { expected: IntensityUnit::Hu, actual: v.unit() }),
        });
    }
    let map = &cfg.intensity;

    let aligned = !v.is_axis_aligned();
    let v = if aligned {
        // Shift so that the zero fill outside the source grid reads as hu_min.
        let shifted = v.with_data(v.data().iter().map(|&x| x - map.hu_min as f32).collect(), IntensityUnit::Hu);
        let (affine, shape) = axis_aligned_grid(v);
        let r = stage("resample", shifted.and_then(|s| resample(&s, &affine, shape, Interpolation::Trilinear)).map_err(Into::into))?;
        stage("resample", r.with_data(r.data().iter().map(|&x| x + map.hu_min as f32).collect(), IntensityUnit::Hu).map_err(Into::into))?
    } else {
        v.clone()
    };

    let (nonneg, clamped_voxels) = stage("intensity", to_nonnegative(&v, map))?;
    let mask = stage("brain_extraction", extract_brain(&nonneg, &cfg.brain, map))?;
    let masked = stage("brain_extraction", mask.apply(&nonneg))?;

    let template = if template.unit() == IntensityUnit::Hu {
        stage("template", to_nonnegative(template, map))?.0
    } else {
        template.clone()
    };
    let reg = stage("registration", register_affine(&masked, &template, &cfg.registration))?;
    let registered_mask = stage("registration", carry_mask(&mask, &reg.transform, &template))?;

    let inside: Vec<f64> = reg
        .resampled
        .data()
        .iter()
        .zip(&registered_mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x as f64)
        .collect();
    let pool: Vec<f64> = if inside.is_empty() { reg.resampled.data().iter().map(|&x| x as f64).collect() } else { inside };
    let lo = percentile(&pool, cfg.percentiles[0]).unwrap_or(0.0);
    let hi = percentile(&pool, cfg.percentiles[1]).unwrap_or(0.0);
    let data = reg
        .resampled
        .data()
        .iter()
        .map(|&x| {
            let x = x as f64;
            let y = if hi > lo { (x - lo) / (hi - lo) } else if x >= hi && x > 0.0 { 1.0 } else { 0.0 };
            y.clamp(0.0, 1.0) as f32
        })
        .collect();
    let volume = stage("normalization", reg.resampled.with_data(data, IntensityUnit::Normalized).map_err(Into::into))?;

    let m = reg.transform.matrix();
    let qc = QcRecord {
        intensity_mode: map.mode,
        resampled_to_axis_aligned: aligned,
        clamped_voxels,
        mask_voxels: mask.voxel_count(),
        mask_volume_ml: mask.volume_ml(),
        registration: reg.report,
        transform: [0, 1, 2, 3].map(|r| [0, 1, 2, 3].map(|c| m[(r, c)])),
        normalization_window: [lo, hi],
    };
    Ok(Preprocessed { volume, registered_mask, qc })
}

/// The brain mask pulled through `t` onto the template grid (trilinear
/// weight ≥ 0.5).
fn carry_mask(mask: &BrainMask, t: &super::AffineTransform, template: &Volume) -> Result<Vec<bool>> {
    let warped = warp(&mask.to_volume()?, t, template.affine(), template.shape(), Interpolation::Trilinear)?;
    Ok(warped.data().iter().map(|&w| w >= 0.5).collect())
}

/// Desk-scale template: 64×76×64 voxels at 3 mm holding a smooth ellipsoidal
/// brain at the non-negative value of 35 HU (default intensity map).
pub fn desk_template() -> Volume {
    let shape = [64, 76, 64];
    let spacing = 3.0;
    let origin = shape.map(|n| -((n as f64 - 1.0) / 2.0) * spacing);
    let affine: Affine = diagonal_affine([spacing; 3], origin);
    let semi = [68.0, 86.0, 66.0];
    let level = IntensityMap::default().apply(35.0);
    Volume::from_fn(shape, affine, IntensityUnit::NonNegative, |x, y, z| {
        let p = [x, y, z].map(|i| i as f64);
        let r = (0..3).map(|a| ((origin[a] + p[a] * spacing) / semi[a]).powi(2)).sum::<f64>().sqrt();
        // Logistic edge about two voxels wide.
        let edge = 1.0 / (1.0 + ((r - 1.0) * semi[0] / spacing * 2.0).exp());
        (level * edge) as f32
    })
    .expect("valid template geometry")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textured sphere of radius 10 mm-voxels inside a dense shell, placed
    /// off-centre on a 36³ grid; the template is the same sphere centred.
    fn phantom(offset: [f64; 3]) -> Volume {
        let c = 17.5;
        Volume::from_fn([36; 3], diagonal_affine([1.0; 3], [0.0; 3]), IntensityUnit::Hu, |x, y, z| {
            let d = [x as f64 - c - offset[0], y as f64 - c - offset[1], z as f64 - c - offset[2]];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if r <= 10.0 {
                (35.0 + 10.0 * (d[0] / 4.0).sin() * (d[1] / 5.0).cos() + d[2]).round() as f32
            } else if r <= 12.0 {
                800.0
            } else {
                -1000.0
            }
        })
        .unwrap()
    }

    fn template() -> Volume {
        let p = phantom([0.0; 3]);
        let (nn, _) = to_nonnegative(&p, &IntensityMap::default()).unwrap();
        let mask = extract_brain(&nn, &BrainParams::default(), &IntensityMap::default()).unwrap();
        mask.apply(&nn).unwrap()
    }

    #[test]
    fn sphere_through_pipeline_stays_in_mask() {
        let out = run_pipeline(&phantom([2.0, -1.0, 1.0]), &template(), &PrepConfig::default()).unwrap();
        assert_eq!(out.volume.shape(), [36; 3]);
        assert_eq!(out.volume.unit(), IntensityUnit::Normalized);
        assert!(out.volume.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        let nonzero: Vec<bool> = out.volume.data().iter().map(|&x| x > 0.0).collect();
        let total = nonzero.iter().filter(|&&b| b).count();
        let inside = nonzero.iter().zip(&out.registered_mask).filter(|(&n, &m)| n && m).count();
        assert!(total > 1000);
        assert!(inside as f64 >= 0.99 * total as f64, "{inside}/{total}");
        let d = out.qc.transform;
        assert!((d[0][3] - 2.0).abs() < 0.5 && (d[1][3] + 1.0).abs() < 0.5 && (d[2][3] - 1.0).abs() < 0.5, "{d:?}");
        assert!(out.qc.clamped_voxels == 0);
        assert!(out.qc.registration.final_mse <= out.qc.registration.initial_mse);
    }

    #[test]
    fn deterministic_bytes() {
        let v = phantom([1.0, 0.0, 0.0]);
        let t = template();
        let a = run_pipeline(&v, &t, &PrepConfig::default()).unwrap();
        let b = run_pipeline(&v, &t, &PrepConfig::default()).unwrap();
        assert_eq!(crate::volio::write_nifti(&a.volume).unwrap(), crate::volio::write_nifti(&b.volume).unwrap());
        assert_eq!(serde_json::to_string(&a.qc).unwrap(), serde_json::to_string(&b.qc).unwrap());
    }

    #[test]
    fn sheared_input_is_realigned() {
        let mut v = phantom([0.0; 3]);
        let mut a = *v.affine();
        a[(0, 2)] = 0.1;
        v = Volume::new(v.into_data(), [36; 3], a, IntensityUnit::Hu).unwrap();
        let out = run_pipeline(&v, &template(), &PrepConfig::default()).unwrap();
        assert!(out.qc.resampled_to_axis_aligned);
        assert_eq!(out.volume.shape(), [36; 3]);
    }

    #[test]
    fn stage_labels_on_errors() {
        let air = Volume::from_fn([12; 3], Affine::identity(), IntensityUnit::Hu, |_, _, _| -1000.0).unwrap();
        match run_pipeline(&air, &template(), &PrepConfig::default()) {
            Err(PrepError::Stage { stage, source }) => {
                assert_eq!(stage, "brain_extraction");
                assert!(matches!(*source, PrepError::EmptyMask));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&v, 100.0), Some(4.0));
        assert_eq!(percentile(&v, 50.0), Some(2.5));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn desk_template_geometry() {
        let t = desk_template();
        assert_eq!(t.shape(), [64, 76, 64]);
        assert_eq!(t.spacing(), [3.0; 3]);
        assert!(t.get(32, 38, 32) > 1000.0);
        assert!(t.get(0, 0, 0) < 1.0);
    }
}
