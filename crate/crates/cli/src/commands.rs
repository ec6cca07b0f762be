//! Subcommand implementations. Shared conventions: artifacts land in
//! `output_dir` only, a `<command>_manifest.json` records the effective
//! config and its hash, progress goes to stderr as `phase= step= loss=`
//! lines, and stdout carries exactly one JSON document per run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};

use serde_json::json;

use ensemblegen_core::ablation::{run_ablation_with_workers, AblationConfig, AblationOutcome};
use ensemblegen_core::completion::LatentField;
use ensemblegen_core::constraint::{
    config_for_realization, train_lc_ensemble, AnchorSet, EnsembleTrainOutcome, LcTrainPlan,
};
use ensemblegen_core::cvae::{load_checkpoint, save_checkpoint, CvaeConfig};
use ensemblegen_core::ensemble::{
    generate_synthetic, import_csv as import_rows, normalize, EnsembleDataset, EnsembleMeta,
    NormMode, CACHE_DIR_ENV,
};
use ensemblegen_core::metrics::EvalReport;
use ensemblegen_core::pipeline::{run_pipeline_with_ensemble, CellConfig, PipelineSettings};
use ensemblegen_core::rng::derive_stream;

use crate::config::{load_config, sha256_hex, DataSource, EvalSettings, RunConfig};
use crate::CliError;

struct Ctx {
    config: RunConfig,
    hash: String,
}

fn prepare(config_path: &Path, sets: &[String], command: &str) -> Result<Ctx, CliError> {
    let loaded = load_config(config_path, sets)?;
    std::fs::create_dir_all(&loaded.config.output_dir).map_err(|e| {
        CliError::Usage(format!(
            "cannot create output dir {}: {e}",
            loaded.config.output_dir.display()
        ))
    })?;
    let ctx = Ctx { config: loaded.config, hash: loaded.hash };
    let manifest = ctx.config.output_dir.join(format!("{command}_manifest.json"));
    let doc = json!({
        "command": command,
        "config_hash": ctx.hash,
        "config": ctx.config,
    });
    write_file(&manifest, &format!("{}\n", serde_json::to_string_pretty(&doc).expect("plain data")))?;
    Ok(ctx)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn require_exists(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("file not found: {}", path.display())))
    }
}

fn emit(doc: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(doc).expect("plain data"));
}

/// Replay a loss trace to stderr at a readable stride.
fn emit_trace(phase: &str, trace: &[f64]) {
    if trace.is_empty() {
        return;
    }
    let stride = (trace.len() / 8).max(1);
    let last = trace.len() - 1;
    for (i, v) in trace.iter().enumerate() {
        if i % stride == 0 || i == last {
            eprintln!("phase={phase} step={i} loss={v}");
        }
    }
}

/// Load or build the configured dataset. Synthetic datasets are reused
/// from the cache directory named by ENSEMBLEGEN_CACHE_DIR when that
/// variable is set; cache misses and unreadable or stale entries fall
/// back to regeneration (and refresh the cache, best effort).
fn resolve_dataset(config: &RunConfig) -> Result<EnsembleDataset, CliError> {
    match &config.data {
        DataSource::Ensb { path } => {
            if !path.exists() {
                return Err(CliError::Usage(format!("data file not found: {}", path.display())));
            }
            Ok(EnsembleDataset::load_ensb(path)?)
        }
        DataSource::Synthetic(spec) => {
            let cache_dir = std::env::var(CACHE_DIR_ENV).ok().filter(|v| !v.is_empty());
            let Some(dir) = cache_dir else {
                return Ok(generate_synthetic(spec)?);
            };
            let dir = PathBuf::from(dir);
            let key = serde_json::to_vec(spec).expect("plain data");
            let file = dir.join(format!("synthetic-{}.ensb", &sha256_hex(&key)[..16]));
            if file.exists() {
                if let Ok(data) = EnsembleDataset::load_ensb(&file) {
                    let m = data.meta();
                    if m.n_realizations == spec.n_realizations
                        && m.n_locations == spec.grid_side * spec.grid_side
                        && m.n_timesteps == spec.n_timesteps
                        && m.start_year == spec.start_year
                    {
                        return Ok(data);
                    }
                }
                eprintln!("warning: stale cache entry {} will be regenerated", file.display());
            }
            let data = generate_synthetic(spec)?;
            if std::fs::create_dir_all(&dir).is_ok() {
                if let Err(e) = data.save_ensb(&file) {
                    eprintln!("warning: cannot write dataset cache {}: {e}", file.display());
                }
            }
            Ok(data)
        }
    }
}

struct Protocol {
    train: Vec<usize>,
    held_out: usize,
}

fn resolve_protocol(eval: &EvalSettings, n_realizations: usize) -> Result<Protocol, CliError> {
    if n_realizations < 2 {
        return Err(CliError::Usage(
            "training plus a held-out realization needs an ensemble of at least 2".into(),
        ));
    }
    let held_out = eval.held_out.unwrap_or(n_realizations - 1);
    if held_out >= n_realizations {
        return Err(CliError::Usage(format!(
            "held-out realization {held_out} outside ensemble of {n_realizations}"
        )));
    }
    let train: Vec<usize> = if eval.train_realizations.is_empty() {
        (0..n_realizations).filter(|&r| r != held_out).collect()
    } else {
        let mut seen = std::collections::BTreeSet::new();
        for &r in &eval.train_realizations {
            if r >= n_realizations {
                return Err(CliError::Usage(format!(
                    "training realization {r} outside ensemble of {n_realizations}"
                )));
            }
            if r == held_out {
                return Err(CliError::Usage(format!(
                    "realization {r} cannot be both trained on and held out"
                )));
            }
            if !seen.insert(r) {
                return Err(CliError::Usage(format!("training realization {r} listed twice")));
            }
        }
        eval.train_realizations.clone()
    };
    Ok(Protocol { train, held_out })
}

/// The encoder consumes (lat, lon, elevation-free) location features of
/// width 3 and full-length series, so the model config must agree with
/// the dataset before any training starts.
fn check_model_shape(cvae: &CvaeConfig, meta: &EnsembleMeta) -> Result<(), CliError> {
    if cvae.d_x != 3 {
        return Err(CliError::Usage(format!(
            "cvae.d_x must be 3 (lat/lon features), got {}",
            cvae.d_x
        )));
    }
    if cvae.t_len != meta.n_timesteps {
        return Err(CliError::Usage(format!(
            "cvae.t_len is {} but the dataset has {} timesteps",
            cvae.t_len, meta.n_timesteps
        )));
    }
    Ok(())
}

fn settings_from(config: &RunConfig) -> PipelineSettings {
    PipelineSettings {
        cvae: config.cvae.clone(),
        plan: config.plan.clone(),
        completion: config.completion.clone(),
        n_probes: config.eval.n_probes,
        emit_noise: config.eval.emit_noise,
    }
}

pub fn gen_data(config_path: &Path, sets: &[String], out: &str) -> Result<(), CliError> {
    let rel = Path::new(out);
    if rel.is_absolute() || rel.components().any(|c| matches!(c, Component::ParentDir)) {
        return Err(CliError::Usage(format!(
            "--out must be a relative path inside the output directory, got {out}"
        )));
    }
    let ctx = prepare(config_path, sets, "gen-data")?;
    let data = resolve_dataset(&ctx.config)?;
    let path = ctx.config.output_dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", parent.display())))?;
    }
    data.save_ensb(&path)?;
    let bytes = std::fs::read(&path)
        .map_err(|e| CliError::Data(format!("cannot read back {}: {e}", path.display())))?;
    let meta = data.meta();
    emit(&json!({
        "path": path,
        "file_sha256": sha256_hex(&bytes),
        "n_realizations": meta.n_realizations,
        "n_locations": meta.n_locations,
        "n_timesteps": meta.n_timesteps,
        "start_year": meta.start_year,
        "config_hash": ctx.hash,
    }));
    Ok(())
}

pub fn train(
    config_path: &Path,
    sets: &[String],
    lambda: Option<f64>,
    workers: usize,
) -> Result<(), CliError> {
    if workers == 0 {
        return Err(CliError::Usage("workers must be >= 1".into()));
    }
    let mut all_sets = sets.to_vec();
    if let Some(l) = lambda {
        all_sets.push(format!("plan.lambda={l}"));
    }
    let ctx = prepare(config_path, &all_sets, "train")?;
    if workers > 1 {
        // Bounds the pool that independent per-realization fits run on.
        // Ignore the error if a pool already exists (tests, reentry).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    let raw = resolve_dataset(&ctx.config)?;
    let meta = raw.meta();
    check_model_shape(&ctx.config.cvae, &meta)?;
    let proto = resolve_protocol(&ctx.config.eval, meta.n_realizations)?;
    let (norm, _) = normalize(&raw, &proto.train, NormMode::ZScore)?;

    let cvae =
        CvaeConfig { seed: derive_stream(ctx.config.seed, "train"), ..ctx.config.cvae.clone() };
    let plan = LcTrainPlan {
        anchor_seed: derive_stream(ctx.config.seed, "anchors"),
        ..ctx.config.plan.clone()
    };
    let all_locations: Vec<usize> = (0..meta.n_locations).collect();
    let observed = vec![all_locations; proto.train.len()];
    eprintln!("phase=train_ensemble step=0 loss=NaN");
    let outcome = train_lc_ensemble(&norm, &proto.train, &observed, &cvae, &plan)?;

    let mut checkpoint_paths = Vec::new();
    let mut final_losses = serde_json::Map::new();
    let mut traces = String::from("realization,step,loss\n");
    for (i, &r) in proto.train.iter().enumerate() {
        emit_trace(&format!("train/r{r}"), &outcome.loss_traces[i]);
        let path = ctx.config.output_dir.join(format!("model_r{r}.lccv"));
        save_checkpoint(&outcome.models[i], &path)?;
        checkpoint_paths.push(path);
        for (step, loss) in outcome.loss_traces[i].iter().enumerate() {
            writeln!(traces, "{r},{step},{loss:.17e}").expect("writing to a String cannot fail");
        }
        if let Some(last) = outcome.loss_traces[i].last() {
            final_losses.insert(r.to_string(), json!(last));
        }
    }
    let anchors_path = ctx.config.output_dir.join("anchor_set.json");
    write_file(
        &anchors_path,
        &format!("{}\n", serde_json::to_string_pretty(&outcome.anchor_set).expect("plain data")),
    )?;
    let traces_path = ctx.config.output_dir.join("loss_traces.csv");
    write_file(&traces_path, &traces)?;

    emit(&json!({
        "checkpoints": checkpoint_paths,
        "anchor_set": anchors_path,
        "loss_traces": traces_path,
        "final_losses": final_losses,
        "config_hash": ctx.hash,
    }));
    Ok(())
}

/// Rebuild the trained ensemble from checkpoints, auditing that each
/// model matches the realization and configuration this config would
/// have trained.
fn load_ensemble(
    dir: &Path,
    train: &[usize],
    config: &RunConfig,
) -> Result<EnsembleTrainOutcome, CliError> {
    let anchors_path = dir.join("anchor_set.json");
    if !anchors_path.exists() {
        return Err(CliError::Usage(format!(
            "no anchor_set.json in {}; run train first",
            dir.display()
        )));
    }
    let text = std::fs::read_to_string(&anchors_path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", anchors_path.display())))?;
    let anchor_set: AnchorSet = serde_json::from_str(&text).map_err(|e| {
        CliError::Data(format!("{} is not a valid anchor set: {e}", anchors_path.display()))
    })?;
    let base =
        CvaeConfig { seed: derive_stream(config.seed, "train"), ..config.cvae.clone() };
    let mut models = Vec::with_capacity(train.len());
    for &r in train {
        let path = dir.join(format!("model_r{r}.lccv"));
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "checkpoint not found: {} (run train first)",
                path.display()
            )));
        }
        let model = load_checkpoint(&path)?;
        if model.realization_id != r {
            return Err(CliError::Data(format!(
                "checkpoint {} belongs to realization {}, expected {r}",
                path.display(),
                model.realization_id
            )));
        }
        if model.config != config_for_realization(&base, r) {
            return Err(CliError::Usage(format!(
                "checkpoint {} was trained under a different configuration; retrain or adjust \
                 the config",
                path.display()
            )));
        }
        models.push(model);
    }
    let n = models.len();
    Ok(EnsembleTrainOutcome { models, anchor_set, loss_traces: vec![Vec::new(); n] })
}

pub fn complete(
    config_path: &Path,
    sets: &[String],
    alpha: Option<f64>,
    held_out: Option<usize>,
    checkpoints: Option<&Path>,
) -> Result<(), CliError> {
    let mut all_sets = sets.to_vec();
    if let Some(a) = alpha {
        all_sets.push(format!("eval.alpha={a}"));
    }
    if let Some(h) = held_out {
        all_sets.push(format!("eval.held_out={h}"));
    }
    let ctx = prepare(config_path, &all_sets, "complete")?;
    let raw = resolve_dataset(&ctx.config)?;
    let meta = raw.meta();
    check_model_shape(&ctx.config.cvae, &meta)?;
    let proto = resolve_protocol(&ctx.config.eval, meta.n_realizations)?;
    let ckpt_dir = checkpoints.unwrap_or(&ctx.config.output_dir);
    let ensemble = load_ensemble(ckpt_dir, &proto.train, &ctx.config)?;

    let cell = CellConfig {
        train_realizations: proto.train.clone(),
        held_out: proto.held_out,
        alpha: ctx.config.eval.alpha,
        policy: ctx.config.eval.policy,
        seed: ctx.config.seed,
        config_hash: ctx.hash.clone(),
    };
    eprintln!("phase=complete step=0 loss=NaN");
    let outcome =
        run_pipeline_with_ensemble(&raw, &cell, &settings_from(&ctx.config), Some(&ensemble))?;
    emit_trace("train_held_out", &outcome.held_out_trace);

    let field_path = ctx.config.output_dir.join("latent_field.csv");
    outcome.completed.field.save_csv(&field_path, raw.coords())?;
    let generated_path = ctx.config.output_dir.join("generated.csv");
    write_generated_csv(&generated_path, &outcome.generated, &raw)?;
    let report_path = ctx.config.output_dir.join("report.json");
    write_file(&report_path, &format!("{}\n", outcome.report.to_json()?))?;

    emit(&json!({
        "latent_field": field_path,
        "generated": generated_path,
        "report": report_path,
        "held_out": proto.held_out,
        "alpha": ctx.config.eval.alpha,
        "observed_locations": outcome.mask.observed_ids.len(),
        "hidden_locations": outcome.mask.hidden_ids.len(),
        "mse_aggregate": outcome.report.mse.aggregate,
        "mean_neighbor_distance": outcome.report.mean_neighbor_distance(),
        "config_hash": ctx.hash,
    }));
    Ok(())
}

/// Generated series in the same flat schema import-csv accepts. The
/// realization column is written as 0 (import requires dense ids from
/// zero); the actual held-out id lives in the report and on stdout.
fn write_generated_csv(
    path: &Path,
    generated: &BTreeMap<usize, Vec<f64>>,
    raw: &EnsembleDataset,
) -> Result<(), CliError> {
    let coords = raw.coords();
    let mut out = String::from("realization,lat,lon,month_index,value\n");
    for (&l, series) in generated {
        let (lat, lon) = coords[l];
        for (t, v) in series.iter().enumerate() {
            writeln!(out, "0,{lat},{lon},{t},{v:.17e}")
                .expect("writing to a String cannot fail");
        }
    }
    write_file(path, &out)
}

pub fn ablate(config_path: &Path, sets: &[String], workers: usize) -> Result<(), CliError> {
    if workers == 0 {
        return Err(CliError::Usage("workers must be >= 1".into()));
    }
    let ctx = prepare(config_path, sets, "ablate")?;
    let raw = resolve_dataset(&ctx.config)?;
    let meta = raw.meta();
    check_model_shape(&ctx.config.cvae, &meta)?;

    let default = AblationConfig::default_for(meta.n_realizations);
    let grid = &ctx.config.ablation;
    fn pick<T: Clone>(given: &[T], fallback: Vec<T>) -> Vec<T> {
        if given.is_empty() {
            fallback
        } else {
            given.to_vec()
        }
    }
    let acfg = AblationConfig {
        r_train_values: pick(&grid.r_train_values, default.r_train_values),
        alphas: pick(&grid.alphas, default.alphas),
        policies: pick(&grid.policies, default.policies),
        seeds: pick(&grid.seeds, default.seeds),
        held_out: grid.held_out.or(ctx.config.eval.held_out).unwrap_or(default.held_out),
        settings: settings_from(&ctx.config),
    };
    eprintln!("phase=ablate step=0 loss=NaN");
    let outcome = run_ablation_with_workers(&raw, &acfg, &ctx.hash, workers)?;
    let mut failed = 0usize;
    for (i, cell) in outcome.cells.iter().enumerate() {
        let loss = cell.report.as_ref().map_or(f64::NAN, |r| r.mse.aggregate);
        eprintln!("phase=ablate/cell step={i} loss={loss}");
        if let Some(err) = &cell.error {
            failed += 1;
            eprintln!(
                "warning: cell r_train={} alpha={} seed={} failed: {err}",
                cell.key.r_train, cell.key.alpha, cell.key.seed
            );
        }
    }
    let summary_path = ctx.config.output_dir.join("ablation_summary.csv");
    write_file(&summary_path, &outcome.summary_csv())?;

    emit(&json!({
        "summary": summary_path,
        "cells": outcome.cells.len(),
        "failed_cells": failed,
        "knee": knee_report(&acfg, &outcome),
        "config_hash": ctx.hash,
    }));
    Ok(())
}

/// Median MSE per (r_train, alpha) plus a diminishing-returns knee: the
/// smallest training count whose relative improvement to the next one
/// falls under 5%. Reported for orientation, never asserted.
fn knee_report(config: &AblationConfig, out: &AblationOutcome) -> serde_json::Value {
    let mut r_values = config.r_train_values.clone();
    r_values.sort_unstable();
    r_values.dedup();
    let mut per_alpha = Vec::new();
    for &alpha in &config.alphas {
        let medians: Vec<(usize, Option<f64>)> =
            r_values.iter().map(|&r| (r, out.median_mse(r, alpha))).collect();
        let available: Vec<(usize, f64)> =
            medians.iter().filter_map(|&(r, m)| m.map(|v| (r, v))).collect();
        let mut knee = available.last().map(|&(r, _)| r);
        for w in available.windows(2) {
            let (r0, m0) = w[0];
            let (_, m1) = w[1];
            if m0 > 0.0 && (m0 - m1) / m0 < 0.05 {
                knee = Some(r0);
                break;
            }
        }
        per_alpha.push(json!({
            "alpha": alpha,
            "knee_r_train": knee,
            "median_mse": medians
                .iter()
                .map(|&(r, m)| json!({"r_train": r, "mse": m}))
                .collect::<Vec<_>>(),
        }));
    }
    serde_json::Value::Array(per_alpha)
}

pub fn inspect(
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    report: Option<&Path>,
    latent_field: Option<&Path>,
) -> Result<(), CliError> {
    let picked = [data, checkpoint, report, latent_field].iter().filter(|p| p.is_some()).count();
    if picked != 1 {
        return Err(CliError::Usage(
            "pass exactly one of --data, --checkpoint, --report, --latent-field".into(),
        ));
    }
    let doc = if let Some(path) = data {
        require_exists(path)?;
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let dataset = EnsembleDataset::from_ensb_bytes(&bytes)?;
        let meta = dataset.meta();
        json!({
            "kind": "ensemble",
            "path": path,
            "file_sha256": sha256_hex(&bytes),
            "n_realizations": meta.n_realizations,
            "n_locations": meta.n_locations,
            "n_timesteps": meta.n_timesteps,
            "start_year": meta.start_year,
        })
    } else if let Some(path) = checkpoint {
        require_exists(path)?;
        let model = load_checkpoint(path)?;
        json!({
            "kind": "checkpoint",
            "path": path,
            "realization_id": model.realization_id,
            "param_count": model.param_count(),
            "param_count_formula": model.config.param_count(),
            "audit_ok": model.param_count() == model.config.param_count(),
            "config": model.config,
        })
    } else if let Some(path) = report {
        require_exists(path)?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let parsed = EvalReport::from_json(&text)?;
        json!({
            "kind": "report",
            "path": path,
            "config_hash": parsed.config_hash,
            "seed": parsed.seed,
            "alpha": parsed.alpha,
            "n_train_realizations": parsed.n_train_realizations,
            "held_out_realization": parsed.held_out_realization,
            "mse_aggregate": parsed.mse.aggregate,
            "mean_neighbor_distance": parsed.mean_neighbor_distance(),
            "fragmentation": parsed.fragmentation.map(|f| f.ratio),
            "n_locations": parsed.mse.per_location.len(),
        })
    } else {
        let path = latent_field.expect("picked == 1");
        require_exists(path)?;
        let field = LatentField::load_csv(path)?;
        json!({
            "kind": "latent_field",
            "path": path,
            "n_locations": field.len(),
            "d_z": field.d_z,
        })
    };
    emit(&doc);
    Ok(())
}

pub fn import_csv(input: &Path, out: &Path, start_year: i32) -> Result<(), CliError> {
    require_exists(input)?;
    let data = import_rows(input, start_year)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    data.save_ensb(out)?;
    let meta = data.meta();
    let bytes = std::fs::read(out)
        .map_err(|e| CliError::Data(format!("cannot read back {}: {e}", out.display())))?;
    emit(&json!({
        "path": out,
        "file_sha256": sha256_hex(&bytes),
        "n_realizations": meta.n_realizations,
        "n_locations": meta.n_locations,
        "n_timesteps": meta.n_timesteps,
        "start_year": meta.start_year,
    }));
    Ok(())
}
