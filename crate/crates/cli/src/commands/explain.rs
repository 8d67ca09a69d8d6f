use super::eval::{load_checkpoint, model_fields};
use super::{parallel_map, write_json, Context};
use crate::config::RunConfig;
use crate::data::{load_dataset, split_indices};
use crate::error::Result;
use sahnet::explain::{export_overlay, grad_cam};
use sahnet::tensor::Tensor;
use sahnet::volio::{apply_affine, read_nifti_file};
use serde::Serialize;
use std::fs;

#[derive(Debug, Clone, Serialize)]
struct SubjectSaliency {
    subject_id: String,
    label: usize,
    layer: String,
    target_class: usize,
    peak: f64,
    all_zero: bool,
    top_fraction: f64,
    /// Mean voxel position (x, y, z) of the salient region.
    top_centroid_voxel: [f64; 3],
    top_centroid_mm: [f64; 3],
    /// Share of salient voxels inside the lesion bounding box, when the
    /// dataset carries ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    in_lesion_bbox: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    layer: String,
    target_class: usize,
    subjects: Vec<SubjectSaliency>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_in_lesion_bbox: Option<f64>,
}

/// Grad-CAM overlays (`saliency/<id>.nii`) and per-subject JSON for one
/// subject (`--subject`) or every subject of the configured split.
pub fn explain(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let ck = RunConfig::require(&cfg.paths.checkpoint, "checkpoint")?;
    let root = RunConfig::require(&cfg.paths.data, "data")?;
    let model = load_checkpoint(ck)?;
    let loaded = load_dataset(root, &model_fields(&model))?;
    let indices = match &ctx.subject {
        Some(id) => vec![loaded.position(id)?],
        None => split_indices(&loaded.dataset.labels(), cfg.explain.split, cfg.train.val_fraction, cfg.seed)?,
    };
    let layer = cfg.explain.layer.clone().unwrap_or_else(|| model.last_conv_layer());
    let out = cfg.paths.out.join("saliency");
    fs::create_dir_all(&out)?;

    let subjects = parallel_map(&indices, ctx.threads, |&i| {
        let data = &loaded.dataset;
        let sample = &data.samples[i];
        let mut shape = vec![1, data.channels];
        shape.extend(&data.spatial);
        let input = Tensor::new(shape, sample.image.iter().map(|&x| x as f64).collect())?;
        let meta = match (model.metadata_spec(), &sample.metadata) {
            (Some(spec), Some(row)) => Some(spec.transform_batch(std::slice::from_ref(row))?),
            _ => None,
        };
        let sal = grad_cam(&model, &input, meta.as_ref(), cfg.explain.target_class, &layer)?;
        let reference = read_nifti_file(&loaded.images[i])?;
        export_overlay(&sal, &reference, &out.join(format!("{}.nii", sample.id)))?;

        // Storage order is (z, y, x) or (y, x); report (x, y, z).
        let c = sal.top_centroid(cfg.explain.top_fraction);
        let voxel = match c.as_slice() {
            [z, y, x] => [*x, *y, *z],
            [y, x] => [*x, *y, 0.0],
            _ => [0.0; 3],
        };
        let in_bbox = loaded.truth.as_ref().and_then(|t| t.get(&sample.id)).map(|truth| {
            let top = sal.top_indices(cfg.explain.top_fraction);
            let hits = top
                .iter()
                .filter(|&&k| {
                    let p = sal.coords(k);
                    match p.as_slice() {
                        [z, y, x] => truth.in_bbox(*x, *y, *z),
                        [y, x] => truth.in_bbox(*x, *y, 0),
                        _ => false,
                    }
                })
                .count();
            hits as f64 / top.len() as f64
        });
        let record = SubjectSaliency {
            subject_id: sample.id.clone(),
            label: sample.label,
            layer: sal.layer.clone(),
            target_class: sal.target_class,
            peak: sal.peak,
            all_zero: sal.all_zero,
            top_fraction: cfg.explain.top_fraction,
            top_centroid_voxel: voxel,
            top_centroid_mm: apply_affine(reference.affine(), voxel),
            in_lesion_bbox: in_bbox,
        };
        write_json(&out.join(format!("{}.json", sample.id)), &record)?;
        Ok(record)
    })?;

    let hits: Vec<f64> = subjects.iter().filter_map(|s| s.in_lesion_bbox).collect();
    let summary = Summary {
        layer,
        target_class: cfg.explain.target_class,
        mean_in_lesion_bbox: (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64),
        subjects,
    };
    write_json(&cfg.paths.out.join("explain.json"), &summary)?;
    cfg.write_resolved(&cfg.paths.out)
}
