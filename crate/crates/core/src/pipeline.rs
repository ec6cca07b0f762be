//! End-to-end orchestration of one experiment cell: normalize, train the
//! constrained ensemble, mask the held-out realization, train its model on
//! the observed subset, complete the latent field, decode, and score.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::completion::{
    complete_latent_field, decode_completed, CompletedField, CompletionConfig,
};
use crate::constraint::{train_held_out, train_lc_ensemble, EnsembleTrainOutcome, LcTrainPlan};
use crate::cvae::{CvaeConfig, CvaeModel};
use crate::ensemble::{
    make_coverage_mask, normalize, CoverageMask, EnsembleDataset, LatentRanking, NormMode,
    NormStats, OrderingPolicy,
};
use crate::error::{CoreError, Result};
use crate::metrics::{
    avg_neighbor_distance, error_distance_association, fragmentation_score, moment_check_set,
    mse, probe_latents_per_realization, AnchorDispersion, EvalReport,
};
use crate::rng::{derive_stream, Xoshiro};

/// Everything about a run that is not the cell coordinates: model and
/// training shapes, the constraint plan, completion behavior, and scoring
/// knobs. Per-cell seeds are derived from the cell seed, so the seed fields
/// inside are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSettings {
    pub cvae: CvaeConfig,
    pub plan: LcTrainPlan,
    pub completion: CompletionConfig,
    /// Probe locations for fragmentation and moment checks, taken as an
    /// even stride over the grid.
    pub n_probes: usize,
    /// Add decoder-scale observation noise to generated series.
    pub emit_noise: bool,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            cvae: CvaeConfig::default(),
            plan: LcTrainPlan::default(),
            completion: CompletionConfig::default(),
            n_probes: 32,
            emit_noise: false,
        }
    }
}

/// One cell of an experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub train_realizations: Vec<usize>,
    pub held_out: usize,
    pub alpha: f64,
    pub policy: OrderingPolicy,
    pub seed: u64,
    /// Recorded verbatim in the report for provenance.
    pub config_hash: String,
}

pub struct PipelineOutcome {
    pub report: EvalReport,
    pub completed: CompletedField,
    /// Generated series for every location, de-normalized.
    pub generated: BTreeMap<usize, Vec<f64>>,
    pub ensemble: EnsembleTrainOutcome,
    pub held_out_model: CvaeModel,
    pub held_out_trace: Vec<f64>,
    pub mask: CoverageMask,
    pub stats: NormStats,
}

/// Evenly strided probe locations over the grid.
pub fn probe_locations(n_locations: usize, n_probes: usize) -> Vec<usize> {
    if n_probes == 0 || n_locations == 0 {
        return Vec::new();
    }
    let n = n_probes.min(n_locations);
    let step = (n_locations / n).max(1);
    (0..n_locations).step_by(step).take(n).collect()
}

/// A coverage mask that always observes the anchor locations while keeping
/// exactly ceil(alpha * L) observed ids: anchors displace the largest
/// non-anchor ids the base policy picked.
pub fn anchor_inclusive_mask(
    n_locations: usize,
    alpha: f64,
    policy: OrderingPolicy,
    seed: u64,
    anchors: &[usize],
    ranking: Option<&LatentRanking>,
) -> Result<CoverageMask> {
    let base = make_coverage_mask(n_locations, alpha, policy, seed, ranking)?;
    let target = base.observed_ids.len();
    let anchor_set: BTreeSet<usize> = anchors.iter().copied().collect();
    if anchor_set.len() > target {
        return Err(CoreError::Contract(format!(
            "{} anchors cannot fit a coverage budget of {target} observed locations",
            anchor_set.len()
        )));
    }
    if let Some(&bad) = anchor_set.iter().find(|&&a| a >= n_locations) {
        return Err(CoreError::Contract(format!(
            "anchor {bad} outside grid of {n_locations} locations"
        )));
    }
    let mut observed: BTreeSet<usize> = base.observed_ids.iter().copied().collect();
    observed.extend(anchor_set.iter().copied());
    while observed.len() > target {
        let &drop = observed
            .iter()
            .rev()
            .find(|id| !anchor_set.contains(id))
            .expect("anchors alone fit the budget");
        observed.remove(&drop);
    }
    let observed_ids: Vec<usize> = observed.iter().copied().collect();
    let hidden_ids: Vec<usize> =
        (0..n_locations).filter(|id| !observed.contains(id)).collect();
    Ok(CoverageMask { alpha, policy: base.policy, observed_ids, hidden_ids })
}

fn series_map(
    data: &EnsembleDataset,
    realization: usize,
    location_ids: &[usize],
) -> BTreeMap<usize, Vec<f64>> {
    location_ids
        .iter()
        .map(|&l| (l, data.series(realization, l).to_vec()))
        .collect()
}

fn dispersions_for_model(
    model: &CvaeModel,
    data: &EnsembleDataset,
    anchor_ids: &[usize],
    fixed: &[Vec<f64>],
    restrict: Option<&BTreeSet<usize>>,
) -> Result<Vec<AnchorDispersion>> {
    let r = model.realization_id;
    let mut out = Vec::new();
    for (a, zf) in anchor_ids.iter().zip(fixed) {
        if let Some(keep) = restrict {
            if !keep.contains(a) {
                continue;
            }
        }
        let x = data.location_features(*a);
        let mu = model.encode(&x, data.series(r, *a))?.mu;
        let d2: f64 = mu.iter().zip(zf).map(|(m, z)| (m - z) * (m - z)).sum();
        out.push(AnchorDispersion { anchor_id: *a, realization: r, distance: d2.sqrt() });
    }
    Ok(out)
}

/// Run one cell end to end on a raw (physical units) dataset.
pub fn run_pipeline(
    raw: &EnsembleDataset,
    cell: &CellConfig,
    settings: &PipelineSettings,
) -> Result<PipelineOutcome> {
    run_pipeline_with_ensemble(raw, cell, settings, None)
}

/// Like [`run_pipeline`], but an already trained ensemble for this cell's
/// training realizations and derived seed can be supplied to skip stage one.
/// The caller must have produced it with identical data, settings, and seed;
/// this is the ablation runner's cache hook.
pub fn run_pipeline_with_ensemble(
    raw: &EnsembleDataset,
    cell: &CellConfig,
    settings: &PipelineSettings,
    pretrained: Option<&EnsembleTrainOutcome>,
) -> Result<PipelineOutcome> {
    let meta = raw.meta();
    let n_loc = meta.n_locations;
    if cell.train_realizations.is_empty() {
        return Err(CoreError::Contract("cell needs at least one training realization".into()));
    }
    if cell.train_realizations.contains(&cell.held_out) {
        return Err(CoreError::Contract(format!(
            "held-out realization {} appears in the training set",
            cell.held_out
        )));
    }
    if cell.held_out >= meta.n_realizations {
        return Err(CoreError::Contract(format!(
            "held-out realization {} outside ensemble of {}",
            cell.held_out, meta.n_realizations
        )));
    }

    // Normalization statistics come from the training realizations only.
    let (data, stats) = normalize(raw, &cell.train_realizations, NormMode::ZScore)?;

    let cvae = CvaeConfig { seed: derive_stream(cell.seed, "train"), ..settings.cvae.clone() };
    let plan = LcTrainPlan {
        anchor_seed: derive_stream(cell.seed, "anchors"),
        ..settings.plan.clone()
    };
    let completion = CompletionConfig {
        seed: derive_stream(cell.seed, "completion"),
        ..settings.completion.clone()
    };

    let all_locations: Vec<usize> = (0..n_loc).collect();
    let ensemble = match pretrained {
        Some(e) => {
            if e.models.len() != cell.train_realizations.len() {
                return Err(CoreError::Contract(format!(
                    "pretrained ensemble has {} models for {} training realizations",
                    e.models.len(),
                    cell.train_realizations.len()
                )));
            }
            None
        }
        None => {
            let observed: Vec<Vec<usize>> =
                vec![all_locations.clone(); cell.train_realizations.len()];
            Some(train_lc_ensemble(&data, &cell.train_realizations, &observed, &cvae, &plan)?)
        }
    };
    let ensemble_ref: &EnsembleTrainOutcome = match (&ensemble, pretrained) {
        (Some(e), _) => e,
        (None, Some(e)) => e,
        (None, None) => unreachable!(),
    };
    let anchor_ids = ensemble_ref.anchor_set.anchor_location_ids.clone();

    // Coverage mask for the held-out realization; anchors are always
    // observed. The ranking policy scores locations by the reference
    // model's latent distances to the anchors.
    let ranking_latents: Vec<Vec<f64>>;
    let ranking = match cell.policy {
        OrderingPolicy::SeededRandom => None,
        OrderingPolicy::NeighborDistanceRank => {
            let reference = &ensemble_ref.models[0];
            let r_ref = reference.realization_id;
            ranking_latents = all_locations
                .iter()
                .map(|&l| {
                    let x = data.location_features(l);
                    Ok(reference.encode(&x, data.series(r_ref, l))?.mu)
                })
                .collect::<Result<_>>()?;
            Some(LatentRanking {
                latents: &ranking_latents,
                anchor_ids: &anchor_ids,
                k: completion.k_neighbors,
            })
        }
    };
    let mask = anchor_inclusive_mask(
        n_loc,
        cell.alpha,
        cell.policy,
        derive_stream(cell.seed, "mask"),
        &anchor_ids,
        ranking.as_ref(),
    )?;

    let held = train_held_out(
        &data,
        cell.held_out,
        &mask.observed_ids,
        &cvae,
        &ensemble_ref.anchor_set,
    )?;

    let pool: Vec<(&CvaeModel, &[usize])> = ensemble_ref
        .models
        .iter()
        .map(|m| (m, all_locations.as_slice()))
        .collect();
    let completed =
        complete_latent_field(&held.model, &pool, &data, &mask.observed_ids, &completion)?;

    let mut noise_rng = Xoshiro::stream(cell.seed, "noise/decode");
    let generated = decode_completed(
        &held.model,
        &data,
        &completed.field,
        &all_locations,
        &stats,
        settings.emit_noise,
        &mut noise_rng,
    )?;

    let original = series_map(raw, cell.held_out, &all_locations);
    let mse_report = mse(&original, &generated)?;

    let nbr_dist = avg_neighbor_distance(
        &completed.field,
        &mask.observed_ids,
        data.coords(),
        completion.k_neighbors,
    )?;

    let probes = probe_locations(n_loc, settings.n_probes);
    let mut frag_models: Vec<&CvaeModel> = ensemble_ref.models.iter().collect();
    frag_models.push(&held.model);
    let fragmentation = if probes.len() >= 2 && frag_models.len() >= 2 {
        let latents = probe_latents_per_realization(&frag_models, &data, &probes)?;
        fragmentation_score(&latents).ok()
    } else {
        None
    };

    let association =
        error_distance_association(&mse_report.per_location, &nbr_dist, None).ok();

    let observed_set: BTreeSet<usize> = mask.observed_ids.iter().copied().collect();
    let mut anchor_dispersions = Vec::new();
    for model in &ensemble_ref.models {
        anchor_dispersions.extend(dispersions_for_model(
            model,
            &data,
            &anchor_ids,
            &ensemble_ref.anchor_set.fixed_latents,
            None,
        )?);
    }
    anchor_dispersions.extend(dispersions_for_model(
        &held.model,
        &data,
        &anchor_ids,
        &ensemble_ref.anchor_set.fixed_latents,
        Some(&observed_set),
    )?);

    let probe_moments = moment_check_set(&original, &generated, &probes)?;

    let report = EvalReport {
        config_hash: cell.config_hash.clone(),
        seed: cell.seed,
        alpha: cell.alpha,
        n_train_realizations: cell.train_realizations.len(),
        held_out_realization: cell.held_out,
        mse: mse_report,
        avg_neighbor_distance: nbr_dist,
        fragmentation,
        association,
        anchor_dispersions,
        probe_moments,
    };

    Ok(PipelineOutcome {
        report,
        completed,
        generated,
        ensemble: match ensemble {
            Some(e) => e,
            None => clone_ensemble(pretrained.expect("pretrained present")),
        },
        held_out_model: held.model,
        held_out_trace: held.loss_trace,
        mask,
        stats,
    })
}

fn clone_ensemble(e: &EnsembleTrainOutcome) -> EnsembleTrainOutcome {
    EnsembleTrainOutcome {
        models: e.models.clone(),
        anchor_set: e.anchor_set.clone(),
        loss_traces: e.loss_traces.clone(),
    }
}
