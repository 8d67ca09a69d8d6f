//! Dataset directories and tabular files.

use crate::config::Split;
use crate::error::{CliError, Result};
use sahnet::eval::Prediction;
use sahnet::net::MetadataField;
use sahnet::synth::SubjectTruth;
use sahnet::train::{stratified_split, volume_input, Dataset, Sample};
use sahnet::volio::read_nifti_file;
use serde::Deserialize;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const LABELS: &str = "labels.csv";
pub const METADATA: &str = "metadata.csv";
pub const GROUND_TRUTH: &str = "ground_truth.json";

#[derive(Debug, Deserialize)]
struct LabelRow {
    subject_id: String,
    label: usize,
}

/// Images, labels and optional metadata of one dataset directory.
#[derive(Debug)]
pub struct LoadedData {
    pub dataset: Dataset,
    /// Source NIfTI of each sample.
    pub images: Vec<PathBuf>,
    pub truth: Option<HashMap<String, SubjectTruth>>,
}

impl LoadedData {
    pub fn id(&self, i: usize) -> &str {
        &self.dataset.samples[i].id
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.dataset
            .samples
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| CliError::Data(format!("subject '{id}' is not in {LABELS}")))
    }
}

/// Looks for `<id>.nii` then `<id>.nii.gz` under `images/`.
fn image_path(root: &Path, id: &str) -> Result<PathBuf> {
    let dir = root.join("images");
    ["nii", "nii.gz"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::Data(format!("no image for subject '{id}' in {}", dir.display())))
}

fn read_metadata(root: &Path, fields: &[MetadataField]) -> Result<HashMap<String, Vec<f64>>> {
    let path = root.join(METADATA);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| CliError::data(path.display(), e))?;
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("{} has no '{name}' column", path.display())))
    };
    let id_col = col("subject_id")?;
    let cols = fields.iter().map(|f| col(f.key())).collect::<Result<Vec<_>>>()?;
    let mut out = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let values = cols
            .iter()
            .map(|&c| {
                rec[c].trim().parse::<f64>().map_err(|e| {
                    CliError::Data(format!("{} row {}: column '{}': {e}", path.display(), line + 2, &header[c]))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(rec[id_col].to_string(), values);
    }
    Ok(out)
}

/// Loads every subject listed in `labels.csv`. Metadata is attached when
/// `fields` is not empty.
pub fn load_dataset(root: &Path, fields: &[MetadataField]) -> Result<LoadedData> {
    let path = root.join(LABELS);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| CliError::data(path.display(), e))?;
    let rows: Vec<LabelRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(CliError::Data(format!("{} lists no subjects", path.display())));
    }
    let metadata = if fields.is_empty() { None } else { Some(read_metadata(root, fields)?) };
    let mut dataset: Option<Dataset> = None;
    let mut images = Vec::with_capacity(rows.len());
    for row in rows {
        let image = image_path(root, &row.subject_id)?;
        let volume = read_nifti_file(&image).map_err(|e| CliError::data(image.display(), e))?;
        let (spatial, data) = volume_input(&volume);
        let meta = match &metadata {
            None => None,
            Some(m) => Some(
                m.get(&row.subject_id)
                    .cloned()
                    .ok_or_else(|| CliError::Data(format!("subject '{}' missing from {METADATA}", row.subject_id)))?,
            ),
        };
        let d = dataset.get_or_insert_with(|| Dataset::new(1, spatial));
        d.push(Sample { id: row.subject_id, image: data, label: row.label, metadata: meta })?;
        images.push(image);
    }
    let truth_path = root.join(GROUND_TRUTH);
    let truth = if truth_path.is_file() {
        let list: Vec<SubjectTruth> = serde_json::from_str(&fs::read_to_string(&truth_path)?)
            .map_err(|e| CliError::data(truth_path.display(), e))?;
        Some(list.into_iter().map(|t| (t.subject_id.clone(), t)).collect())
    } else {
        None
    };
    Ok(LoadedData { dataset: dataset.expect("at least one subject"), images, truth })
}

/// Sample indices of `split` under the stratified partition used by `train`.
pub fn split_indices(labels: &[usize], split: Split, val_fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if split == Split::All {
        return Ok((0..labels.len()).collect());
    }
    let (train, val) = stratified_split(labels, val_fraction, seed)?;
    Ok(if split == Split::Train { train } else { val })
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::data(path.display(), e))?;
    let preds: Vec<Prediction> =
        rdr.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| CliError::data(path.display(), e))?;
    if preds.is_empty() {
        return Err(CliError::Data(format!("{} holds no predictions", path.display())));
    }
    Ok(preds)
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in preds {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Headered table of strings, as read from a clinical CSV.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::data(path.display(), e))?;
        let header = rdr.headers()?.iter().map(str::to_string).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(|s| s.trim().to_string()).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CliError::data(path.display(), e))?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}
