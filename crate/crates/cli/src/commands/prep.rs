use super::{parallel_map, write_json, Context};
use crate::config::RunConfig;
use crate::data::{LABELS, METADATA};
use crate::error::{CliError, Result};
use sahnet::prep::{desk_template, run_pipeline, QcRecord};
use sahnet::volio::{read_nifti_file, write_nifti_file};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Serialize)]
struct QcEntry<'a> {
    subject_id: &'a str,
    source: String,
    #[serde(flatten)]
    qc: &'a QcRecord,
}

#[derive(Serialize)]
struct Summary {
    subject_id: String,
    mask_volume_ml: f64,
    initial_mse: f64,
    final_mse: f64,
    converged: bool,
}

fn subject_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).map(str::to_string)
}

/// NIfTI files under `root/images` if that exists, else directly in `root`.
fn inputs(root: &Path) -> Result<(PathBuf, Vec<(String, PathBuf)>)> {
    let dir = if root.join("images").is_dir() { root.join("images") } else { root.to_path_buf() };
    let mut found = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| CliError::data(dir.display(), e))? {
        let path = entry?.path();
        if let Some(id) = subject_id(&path).filter(|_| path.is_file()) {
            found.push((id, path));
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(CliError::Data(format!("no NIfTI volumes in {}", dir.display())));
    }
    Ok((dir, found))
}

/// Raw HU volumes → skull-stripped, template-aligned, normalized volumes
/// plus one QC record each. Label and metadata tables beside the input
/// are copied so the output is itself a dataset.
pub fn prep(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let root = RunConfig::require(&cfg.paths.input, "input")?;
    cfg.prep.validate()?;
    let (_, mut files) = inputs(root)?;
    if let Some(id) = &ctx.subject {
        files.retain(|(s, _)| s == id);
        if files.is_empty() {
            return Err(CliError::Data(format!("subject '{id}' not found under {}", root.display())));
        }
    }
    let template = match &cfg.paths.template {
        Some(p) => read_nifti_file(p).map_err(|e| CliError::data(p.display(), e))?,
        None => desk_template(),
    };
    let out = &cfg.paths.out;
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("qc"))?;

    let summary = parallel_map(&files, ctx.threads, |(id, path)| {
        let raw = read_nifti_file(path).map_err(|e| CliError::data(path.display(), e))?;
        let done = run_pipeline(&raw, &template, &cfg.prep).map_err(|e| {
            let e = CliError::from(e);
            let msg = format!("{id}: {e}");
            match e {
                CliError::Usage(_) => CliError::Usage(msg),
                CliError::Data(_) => CliError::Data(msg),
                CliError::Numeric(_) => CliError::Numeric(msg),
            }
        })?;
        write_nifti_file(&done.volume, out.join("images").join(format!("{id}.nii")))?;
        let source = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        write_json(&out.join("qc").join(format!("{id}.json")), &QcEntry { subject_id: id, source, qc: &done.qc })?;
        let r = &done.qc.registration;
        Ok(Summary {
            subject_id: id.clone(),
            mask_volume_ml: done.qc.mask_volume_ml,
            initial_mse: r.initial_mse,
            final_mse: r.final_mse,
            converged: r.converged,
        })
    })?;
    write_json(&out.join("prep.json"), &summary)?;
    // A single-subject run would leave the tables pointing at missing images.
    for table in [LABELS, METADATA] {
        if ctx.subject.is_none() && root.join(table).is_file() {
            fs::copy(root.join(table), out.join(table))?;
        }
    }
    cfg.write_resolved(out)
}
