use super::train::score;
use super::{write_json, Context};
use crate::config::RunConfig;
use crate::data::{load_dataset, read_predictions, split_indices, write_predictions};
use crate::error::{CliError, Result};
use sahnet::eval::{roc_curve, EvalReport, Prediction};
use sahnet::net::{MetadataField, Model};
use sahnet::train::Checkpoint;
use std::fs;
use std::path::Path;

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Ok(Checkpoint::load(path).map_err(|e| CliError::data(path.display(), e))?.model)
}

pub fn model_fields(model: &Model) -> Vec<MetadataField> {
    model.metadata_spec().map(|s| s.fields().iter().map(|f| f.field).collect()).unwrap_or_default()
}

/// Scores the configured split of the dataset with a checkpoint, or reads
/// scores from `paths.predictions` when no checkpoint is given.
fn predictions(ctx: &Context) -> Result<Vec<Prediction>> {
    let cfg = &ctx.cfg;
    let Some(ck) = &cfg.paths.checkpoint else {
        let path = cfg
            .paths
            .predictions
            .as_deref()
            .ok_or_else(|| CliError::Usage("eval needs --checkpoint or paths.predictions".into()))?;
        return read_predictions(path);
    };
    let model = load_checkpoint(ck)?;
    let root = RunConfig::require(&cfg.paths.data, "data")?;
    let loaded = load_dataset(root, &model_fields(&model))?;
    let idx = split_indices(&loaded.dataset.labels(), cfg.eval.split, cfg.train.val_fraction, cfg.seed)?;
    let mut preds = score(&model, &loaded.dataset.subset(&idx), cfg.eval.batch_size)?;
    if let Some(id) = &ctx.subject {
        preds.retain(|p| &p.subject_id == id);
    }
    Ok(preds)
}

/// Writes `metrics.json` (rates rounded to 2 decimals), `roc.csv` and the
/// scores used.
pub fn eval(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let preds = predictions(ctx)?;
    let report = EvalReport::from_predictions(&preds, cfg.eval.threshold)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score_dead).collect();
    let dead: Vec<bool> = preds.iter().map(|p| p.label == 1).collect();
    let roc = roc_curve(&scores, &dead)?;

    let out = &cfg.paths.out;
    fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &report.rounded())?;
    let mut w = csv::Writer::from_path(out.join("roc.csv"))?;
    for p in &roc {
        w.serialize(p)?;
    }
    w.flush()?;
    write_predictions(&out.join("predictions.csv"), &preds)?;
    cfg.write_resolved(out)
}
