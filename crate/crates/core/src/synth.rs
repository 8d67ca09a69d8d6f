//! Synthetic head-CT cohorts: a smooth brain phantom with hyperdense
//! lesions whose total volume decides the label.

use crate::net::MetadataField;
use crate::train::derive_seed;
use crate::volio::{diagonal_affine, write_nifti_file, IntensityUnit, VolioError, Volume};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic cohort configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Volio(#[from] VolioError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LesionConfig {
    /// Inclusive range of lesions per subject.
    pub count: [usize; 2],
    /// Radius range (voxels) for subjects drawn as survivors.
    pub small_radius: [f64; 2],
    /// Radius range (voxels) for subjects drawn as deaths.
    pub large_radius: [f64; 2],
    /// Lesion intensity above the surrounding tissue, in HU.
    pub delta_hu: f64,
}

impl Default for LesionConfig {
    fn default() -> Self {
        Self { count: [1, 2], small_radius: [2.0, 4.0], large_radius: [6.0, 8.5], delta_hu: 45.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelRule {
    /// Subjects with more lesion voxels than this die.
    pub burden_threshold: f64,
    /// Probability that a rule label is flipped.
    pub flip_rate: f64,
}

impl Default for LabelRule {
    fn default() -> Self {
        Self { burden_threshold: 700.0, flip_rate: 0.0 }
    }
}

/// How clinical variables depend on the (final) label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetadataModel {
    pub age_mean: f64,
    pub age_sd: f64,
    /// Added to the age of subjects who die.
    pub age_shift: f64,
    pub female_rate: f64,
    /// Log-odds of the binary findings for survivors.
    pub base_logit: f64,
    /// Log-odds increase of hypertension, hematoma, hydrocephalus and
    /// Fisher > 2 for subjects who die.
    pub finding_shift: f64,
    /// Mean grade shift (WFNS and Hunt-Hess) for subjects who die.
    pub grade_shift: f64,
}

impl Default for MetadataModel {
    fn default() -> Self {
        Self {
            age_mean: 55.0,
            age_sd: 12.0,
            age_shift: 8.0,
            female_rate: 0.65,
            base_logit: -0.8,
            finding_shift: 1.0,
            grade_shift: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// Grid extent along x, y, z.
    pub volume_shape: [usize; 3],
    pub spacing_mm: f64,
    /// Standard deviation of additive tissue noise, in HU.
    pub noise_hu: f64,
    /// Range of brain semi-axes as a fraction of the grid extent, drawn
    /// per subject and axis.
    pub brain_fraction: [f64; 2],
    /// Half-width of the uniform per-subject tissue baseline offset, in HU.
    pub tissue_jitter_hu: f64,
    /// Fraction of subjects generated with large lesions.
    pub dead_fraction: f64,
    pub lesion: LesionConfig,
    pub label_rule: LabelRule,
    pub metadata_model: MetadataModel,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 80,
            volume_shape: [32, 32, 32],
            spacing_mm: 5.0,
            noise_hu: 3.0,
            brain_fraction: [0.40, 0.40],
            tissue_jitter_hu: 0.0,
            dead_fraction: 0.5,
            lesion: LesionConfig::default(),
            label_rule: LabelRule::default(),
            metadata_model: MetadataModel::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn smallest_semi_axis(&self) -> f64 {
        self.volume_shape.iter().map(|&n| self.brain_fraction[0] * n as f64).fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::ConfigInvalid(m));
        if self.n_subjects == 0 || self.volume_shape.iter().any(|&n| n < 8) {
            return bad(format!("{} subjects of shape {:?}", self.n_subjects, self.volume_shape));
        }
        if !(0.0..0.5).contains(&self.label_rule.flip_rate) {
            return bad(format!("flip rate {} outside [0, 0.5)", self.label_rule.flip_rate));
        }
        if !(0.0..=1.0).contains(&self.dead_fraction) || !(self.spacing_mm > 0.0) || !(self.noise_hu >= 0.0) {
            return bad("dead fraction, spacing or noise out of range".into());
        }
        let [lo, hi] = self.brain_fraction;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) || !(self.tissue_jitter_hu >= 0.0) {
            return bad(format!("brain fraction {:?} or tissue jitter {}", self.brain_fraction, self.tissue_jitter_hu));
        }
        let l = &self.lesion;
        if l.count[0] == 0 || l.count[0] > l.count[1] {
            return bad(format!("lesion count range {:?}", l.count));
        }
        for r in [l.small_radius, l.large_radius] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(format!("radius range {r:?}"));
            }
        }
        let room = self.smallest_semi_axis();
        if l.large_radius[1].max(l.small_radius[1]) >= room {
            return bad(format!("lesion radius up to {} does not fit a brain of semi-axis {room}", l.large_radius[1]));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionTruth {
    /// Voxel coordinates (x, y, z).
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub subject_id: String,
    pub label: usize,
    /// Label before random flipping.
    pub rule_label: usize,
    pub burden_voxels: usize,
    pub lesions: Vec<LesionTruth>,
    /// Inclusive voxel bounding box (x, y, z) of all lesion voxels.
    pub bbox_min: [usize; 3],
    pub bbox_max: [usize; 3],
}

impl SubjectTruth {
    pub fn in_bbox(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3).all(|a| self.bbox_min[a] <= p[a] && p[a] <= self.bbox_max[a])
    }
}

#[derive(Debug, Clone)]
pub struct SynthSubject {
    pub truth: SubjectTruth,
    pub volume: Volume,
    /// One value per [`MetadataField::ALL`] entry.
    pub metadata: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn subject(cfg: &SynthConfig, index: usize, large: bool) -> Result<SynthSubject> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[index as u64]));
    let [nx, ny, nz] = cfg.volume_shape;
    let c = cfg.volume_shape.map(|n| (n as f64 - 1.0) / 2.0);
    let [f_lo, f_hi] = cfg.brain_fraction;
    let semi = cfg.volume_shape.map(|n| n as f64 * if f_hi > f_lo { rng.random_range(f_lo..=f_hi) } else { f_lo });
    let j = cfg.tissue_jitter_hu;
    let baseline = 32.0 + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
    let l = &cfg.lesion;
    let count = rng.random_range(l.count[0]..=l.count[1]);
    let range = if large { l.large_radius } else { l.small_radius };
    let mut lesions = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = if range[1] > range[0] { rng.random_range(range[0]..=range[1]) } else { range[0] };
        let room = semi.map(|a| a - radius);
        let center = loop {
            let p = [0, 1, 2].map(|a| c[a] + rng.random_range(-room[a]..=room[a]));
            if (0..3).map(|a| ((p[a] - c[a]) / room[a]).powi(2)).sum::<f64>() <= 1.0 {
                break p;
            }
        };
        lesions.push(LesionTruth { center, radius });
    }
    let noise = Normal::new(0.0, cfg.noise_hu.max(1e-12)).expect("positive sd");
    let phase = [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)];
    let mut burden = 0;
    let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let u = [0, 1, 2].map(|a| (p[a] - c[a]) / semi[a]);
                let r2: f64 = u.iter().map(|v| v * v).sum();
                if r2 > 1.0 {
                    data.push(-1000.0);
                    continue;
                }
                // Slowly varying grey/white contrast and two ventricles.
                let mut hu = baseline + 5.0 * (3.0 * u[0] + phase[0]).sin() * (2.5 * u[1] + phase[1]).cos() - 4.0 * r2;
                for side in [-1.0, 1.0] {
                    let v = [(u[0] - 0.18 * side) / 0.1, u[1] / 0.3, (u[2] - 0.05) / 0.18];
                    if v.iter().map(|t| t * t).sum::<f64>() <= 1.0 {
                        hu = 8.0;
                    }
                }
                let inside = lesions.iter().any(|les| {
                    (0..3).map(|a| (p[a] - les.center[a]).powi(2)).sum::<f64>() <= les.radius * les.radius
                });
                if inside {
                    hu = baseline + l.delta_hu;
                    burden += 1;
                    let v = [x, y, z];
                    for a in 0..3 {
                        lo[a] = lo[a].min(v[a]);
                        hi[a] = hi[a].max(v[a]);
                    }
                }
                if cfg.noise_hu > 0.0 {
                    hu += noise.sample(&mut rng);
                }
                data.push(hu as f32);
            }
        }
    }
    let rule_label = usize::from(burden as f64 > cfg.label_rule.burden_threshold);
    let flipped = cfg.label_rule.flip_rate > 0.0 && rng.random::<f64>() < cfg.label_rule.flip_rate;
    let label = if flipped { 1 - rule_label } else { rule_label };

    let m = &cfg.metadata_model;
    let dead = label as f64;
    let age = Normal::new(m.age_mean + m.age_shift * dead, m.age_sd.max(1e-12)).expect("positive sd").sample(&mut rng);
    let mut finding = |shift: f64| f64::from(u8::from(rng.random::<f64>() < sigmoid(m.base_logit + shift * dead)));
    let hypertension = finding(m.finding_shift);
    let hematoma = finding(m.finding_shift);
    let hydrocephalus = finding(m.finding_shift);
    let fisher = finding(m.finding_shift);
    let female = f64::from(u8::from(rng.random::<f64>() < m.female_rate));
    let mut grade = |base: f64| (base + m.grade_shift * dead + rng.random_range(-1.5..1.5)).round().clamp(1.0, 5.0);
    let wfns = grade(1.8);
    let hunt_hess = grade(1.8);
    let metadata = MetadataField::ALL
        .iter()
        .map(|f| match f {
            MetadataField::Age => age.round().clamp(18.0, 95.0),
            MetadataField::Sex => female,
            MetadataField::Hypertension => hypertension,
            MetadataField::IntraparenchymalHematoma => hematoma,
            MetadataField::AcuteHydrocephalus => hydrocephalus,
            MetadataField::Wfns => wfns,
            MetadataField::HuntHess => hunt_hess,
            MetadataField::FisherGt2 => fisher,
        })
        .collect();

    let s = cfg.spacing_mm;
    let origin = c.map(|ci| -ci * s);
    let volume = Volume::new(data, cfg.volume_shape, diagonal_affine([s; 3], origin), IntensityUnit::Hu)?;
    let truth = SubjectTruth {
        subject_id: format!("sub-{:03}", index + 1),
        label,
        rule_label,
        burden_voxels: burden,
        lesions,
        bbox_min: if burden > 0 { lo } else { [0; 3] },
        bbox_max: hi,
    };
    Ok(SynthSubject { truth, volume, metadata })
}

/// Generates the cohort in memory. Subject `i` depends only on the seed
/// and `i`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthSubject>> {
    cfg.validate()?;
    let n = cfg.n_subjects;
    let n_large = (n as f64 * cfg.dead_fraction).round() as usize;
    let mut large = vec![false; n];
    large[..n_large].iter_mut().for_each(|b| *b = true);
    large.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[u64::MAX])));
    (0..n).map(|i| subject(cfg, i, large[i])).collect()
}

/// Writes `images/<id>.nii`, `labels.csv`, `metadata.csv` and
/// `ground_truth.json` under `dir`.
pub fn write_cohort(cfg: &SynthConfig, dir: &Path) -> Result<Vec<SubjectTruth>> {
    let subjects = generate(cfg)?;
    fs::create_dir_all(dir.join("images"))?;
    let mut labels = csv::Writer::from_path(dir.join("labels.csv"))?;
    labels.write_record(["subject_id", "label"])?;
    let mut meta = csv::Writer::from_path(dir.join("metadata.csv"))?;
    let mut header = vec!["subject_id"];
    header.extend(MetadataField::ALL.iter().map(|f| f.key()));
    meta.write_record(&header)?;
    for s in &subjects {
        write_nifti_file(&s.volume, dir.join("images").join(format!("{}.nii", s.truth.subject_id)))?;
        labels.write_record([s.truth.subject_id.clone(), s.truth.label.to_string()])?;
        let mut row = vec![s.truth.subject_id.clone()];
        row.extend(s.metadata.iter().map(|v| v.to_string()));
        meta.write_record(&row)?;
    }
    labels.flush()?;
    meta.flush()?;
    let truths: Vec<SubjectTruth> = subjects.into_iter().map(|s| s.truth).collect();
    fs::write(dir.join("ground_truth.json"), serde_json::to_string_pretty(&truths).expect("serializable"))?;
    Ok(truths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_subjects: 12, ..Default::default() }
    }

    #[test]
    fn noiseless_labels_follow_rule() {
        let subjects = generate(&small()).unwrap();
        for s in &subjects {
            let rule = usize::from(s.truth.burden_voxels as f64 > 700.0);
            assert_eq!(s.truth.label, rule);
            assert_eq!(s.truth.rule_label, rule);
        }
        assert_eq!(subjects.iter().filter(|s| s.truth.label == 1).count(), 6);
    }

    #[test]
    fn lesion_voxels_lie_in_bbox() {
        for s in generate(&small()).unwrap() {
            let v = &s.volume;
            let [nx, ny, nz] = v.shape();
            let mut count = 0;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let inside = s.truth.lesions.iter().any(|l| {
                            let p = [x as f64, y as f64, z as f64];
                            (0..3).map(|a| (p[a] - l.center[a]).powi(2)).sum::<f64>() <= l.radius * l.radius
                        });
                        if inside {
                            count += 1;
                            assert!(s.truth.in_bbox(x, y, z));
                            assert!(v.get(x, y, z) > 60.0);
                        }
                    }
                }
            }
            assert_eq!(count, s.truth.burden_voxels);
        }
    }

    #[test]
    fn flips_follow_rate() {
        let cfg = SynthConfig { n_subjects: 200, volume_shape: [16; 3], lesion: LesionConfig {
            small_radius: [1.0, 2.0], large_radius: [3.0, 4.0], ..Default::default() },
            label_rule: LabelRule { burden_threshold: 60.0, flip_rate: 0.25 }, ..Default::default() };
        let s = generate(&cfg).unwrap();
        let flips = s.iter().filter(|s| s.truth.label != s.truth.rule_label).count();
        assert!((25..=75).contains(&flips), "{flips}");
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small();
        c.label_rule.flip_rate = 0.5;
        assert!(c.validate().is_err());
        let mut c = small();
        c.lesion.large_radius = [6.0, 14.0];
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<SynthConfig>(r#"{"n_subject": 3}"#).is_err());
    }

    #[test]
    fn written_cohort_is_byte_identical_across_runs() {
        let cfg = SynthConfig { n_subjects: 4, volume_shape: [12; 3], lesion: LesionConfig {
            small_radius: [1.0, 1.5], large_radius: [2.5, 3.5], ..Default::default() },
            label_rule: LabelRule { burden_threshold: 40.0, flip_rate: 0.0 }, ..Default::default() };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_cohort(&cfg, a.path()).unwrap();
        write_cohort(&cfg, b.path()).unwrap();
        for f in ["labels.csv", "metadata.csv", "ground_truth.json", "images/sub-001.nii", "images/sub-004.nii"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }
}
