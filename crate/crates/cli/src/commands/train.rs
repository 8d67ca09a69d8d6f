use super::{write_json, Context};
use crate::config::RunConfig;
use crate::data::load_dataset;
use crate::error::Result;
use sahnet::eval::{EvalReport, Prediction};
use sahnet::net::{FieldEncoding, MetadataSpec, Model};
use sahnet::train::{derive_seed, fit, predict, stratified_split, Checkpoint, CheckpointMeta, Dataset, Monitor};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;

#[derive(Serialize)]
struct SplitRecord<'a> {
    train: Vec<&'a str>,
    validation: Vec<&'a str>,
}

/// Builds the configured network, fused with metadata when fields are set.
pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    let model = Model::build(cfg.model.network.clone(), cfg.seed)?;
    if cfg.model.metadata_fields.is_empty() {
        return Ok(model);
    }
    let spec = MetadataSpec::new(
        cfg.model
            .metadata_fields
            .iter()
            .map(|&field| FieldEncoding { field, standardize: field.standardized_by_default() })
            .collect(),
    );
    Ok(model.fuse_metadata(spec, derive_seed(cfg.seed, &[1]))?)
}

/// Scores every sample of `data` with the probability of class 1.
pub fn score(model: &Model, data: &Dataset, batch_size: usize) -> Result<Vec<Prediction>> {
    let probs = predict(model, data, batch_size)?;
    let k = model.config().num_classes;
    Ok(data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| Prediction { subject_id: s.id.clone(), score_dead: probs.data()[i * k + 1], label: s.label })
        .collect())
}

/// Dataset directory → history, split, best/last checkpoints, the three
/// best-by-metric snapshots and their validation reports.
pub fn train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let root = RunConfig::require(&cfg.paths.data, "data")?;
    cfg.train.fit.validate()?;
    let model = build_model(cfg)?;
    let loaded = load_dataset(root, &cfg.model.metadata_fields)?;
    let data = &loaded.dataset;
    let (tr, va) = stratified_split(&data.labels(), cfg.train.val_fraction, cfg.seed)?;
    let (train_set, val_set) = (data.subset(&tr), data.subset(&va));

    let out = &cfg.paths.out;
    let ck_dir = out.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    fs::create_dir_all(out.join("snapshots"))?;
    let outcome = fit(model, &train_set, &val_set, &cfg.train.fit, Some(&ck_dir))?;

    fs::write(out.join("history.csv"), outcome.history.to_csv())?;
    write_json(&out.join("history.json"), &outcome.history)?;
    write_json(
        &out.join("split.json"),
        &SplitRecord {
            train: tr.iter().map(|&i| loaded.id(i)).collect(),
            validation: va.iter().map(|&i| loaded.id(i)).collect(),
        },
    )?;

    let mut reports = BTreeMap::new();
    for (name, snap, monitor) in [
        ("best_auc", &outcome.best_auc, Monitor::ValAuc),
        ("best_f1", &outcome.best_f1, Monitor::ValF1),
        ("best_loss", &outcome.best_loss, Monitor::ValLoss),
    ] {
        let record = &outcome.history.records[snap.epoch - 1];
        let ck = Checkpoint {
            model: snap.model.clone(),
            optimizer: None,
            meta: CheckpointMeta {
                epoch: snap.epoch,
                phase: record.phase,
                lr: record.lr,
                monitor: Some(monitor),
                best_metric: Some(snap.value),
                seed: cfg.seed,
            },
        };
        ck.save(&out.join("snapshots").join(format!("{name}.json")))?;
    }
    for (name, model) in outcome.snapshots() {
        let preds = score(model, &val_set, cfg.eval.batch_size)?;
        reports.insert(name, EvalReport::from_predictions(&preds, cfg.eval.threshold)?.rounded());
    }
    write_json(&out.join("snapshot_metrics.json"), &reports)?;
    cfg.write_resolved(out)
}
