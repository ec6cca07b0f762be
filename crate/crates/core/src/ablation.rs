//! Experiment grid runner: sweeps training-set size, coverage fraction,
//! masking policy, and seed, running the full pipeline per cell and
//! collecting per-cell reports plus a flat CSV summary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::{EnsembleTrainOutcome, ReferencePolicy};
use crate::ensemble::{EnsembleDataset, OrderingPolicy};
use crate::error::{CoreError, Result};
use crate::metrics::EvalReport;
use crate::pipeline::{run_pipeline_with_ensemble, CellConfig, PipelineSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Training-set sizes; each cell trains on the first `count`
    /// realizations, skipping the held-out one.
    pub r_train_values: Vec<usize>,
    pub alphas: Vec<f64>,
    pub policies: Vec<OrderingPolicy>,
    pub seeds: Vec<u64>,
    pub held_out: usize,
    pub settings: PipelineSettings,
}

impl AblationConfig {
    /// Default sweep for an ensemble of `n_realizations`: every training
    /// count from 1 to R-1, sparse and dense coverage, random masking,
    /// three seeds, last realization held out.
    pub fn default_for(n_realizations: usize) -> AblationConfig {
        AblationConfig {
            r_train_values: (1..n_realizations.max(2)).collect(),
            alphas: vec![0.3, 0.9],
            policies: vec![OrderingPolicy::SeededRandom],
            seeds: vec![1, 2, 3],
            held_out: n_realizations.saturating_sub(1),
            settings: PipelineSettings::default(),
        }
    }

    pub fn validate(&self, n_realizations: usize) -> Result<()> {
        if self.r_train_values.is_empty()
            || self.alphas.is_empty()
            || self.policies.is_empty()
            || self.seeds.is_empty()
        {
            return Err(CoreError::Contract(
                "ablation grid needs at least one value per axis".into(),
            ));
        }
        if self.held_out >= n_realizations {
            return Err(CoreError::Contract(format!(
                "held-out realization {} outside ensemble of {n_realizations}",
                self.held_out
            )));
        }
        for &count in &self.r_train_values {
            if count == 0 || count >= n_realizations {
                return Err(CoreError::Contract(format!(
                    "training count {count} impossible with {n_realizations} realizations \
                     and one held out"
                )));
            }
        }
        for &a in &self.alphas {
            if !(a > 0.0 && a <= 1.0) {
                return Err(CoreError::Contract(format!("alpha must be in (0, 1], got {a}")));
            }
        }
        Ok(())
    }
}

/// The first `count` realization ids with the held-out one skipped.
pub fn training_prefix(count: usize, held_out: usize, n_realizations: usize) -> Vec<usize> {
    (0..n_realizations).filter(|&r| r != held_out).take(count).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub r_train: usize,
    pub alpha: f64,
    pub policy: OrderingPolicy,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub key: CellKey,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
    pub runtime_s: f64,
}

pub struct AblationOutcome {
    /// One result per grid cell, in sweep order (r_train, alpha, policy,
    /// seed; innermost last).
    pub cells: Vec<CellResult>,
}

impl AblationOutcome {
    /// Flat summary with the fixed column order
    /// `r_train,alpha,policy,seed,mse,frag_score,mean_nbr_dist,runtime_s`.
    /// Failed cells carry NaN metrics; their errors live in the cell results.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("r_train,alpha,policy,seed,mse,frag_score,mean_nbr_dist,runtime_s\n");
        for cell in &self.cells {
            let k = &cell.key;
            let (m, f, d) = match &cell.report {
                Some(r) => (
                    r.mse.aggregate,
                    r.fragmentation.map_or(f64::NAN, |s| s.ratio),
                    r.mean_neighbor_distance(),
                ),
                None => (f64::NAN, f64::NAN, f64::NAN),
            };
            writeln!(
                out,
                "{},{},{},{},{:.17e},{:.17e},{:.17e},{:.3}",
                k.r_train,
                k.alpha,
                policy_name(k.policy),
                k.seed,
                m,
                f,
                d,
                cell.runtime_s
            )
            .expect("writing to a String cannot fail");
        }
        out
    }

    /// Median aggregate MSE over seeds for one (r_train, alpha) grid point.
    /// Failed cells are skipped; None if every seed failed.
    pub fn median_mse(&self, r_train: usize, alpha: f64) -> Option<f64> {
        let mut values: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.key.r_train == r_train && c.key.alpha == alpha)
            .filter_map(|c| c.report.as_ref().map(|r| r.mse.aggregate))
            .collect();
        if values.is_empty() {
            return None;
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite MSE"));
        let n = values.len();
        Some(if n % 2 == 1 {
            values[n / 2]
        } else {
            0.5 * (values[n / 2 - 1] + values[n / 2])
        })
    }
}

pub fn policy_name(policy: OrderingPolicy) -> &'static str {
    match policy {
        OrderingPolicy::SeededRandom => "seeded_random",
        OrderingPolicy::NeighborDistanceRank => "neighbor_distance_rank",
    }
}

/// Every grid cell in sweep order: r_train outermost, then alpha, policy,
/// and seed innermost. This is the row order of the summary CSV.
pub fn grid_keys(config: &AblationConfig) -> Vec<CellKey> {
    let mut keys = Vec::new();
    for &count in &config.r_train_values {
        for &alpha in &config.alphas {
            for &policy in &config.policies {
                for &seed in &config.seeds {
                    keys.push(CellKey { r_train: count, alpha, policy, seed });
                }
            }
        }
    }
    keys
}

fn cell_config(
    key: &CellKey,
    config: &AblationConfig,
    config_hash: &str,
    n_realizations: usize,
) -> CellConfig {
    CellConfig {
        train_realizations: training_prefix(key.r_train, config.held_out, n_realizations),
        held_out: config.held_out,
        alpha: key.alpha,
        policy: key.policy,
        seed: key.seed,
        config_hash: config_hash.to_string(),
    }
}

fn run_cell(
    raw: &EnsembleDataset,
    config: &AblationConfig,
    config_hash: &str,
    key: &CellKey,
    pretrained: Option<&EnsembleTrainOutcome>,
) -> (CellResult, Option<EnsembleTrainOutcome>) {
    let cell = cell_config(key, config, config_hash, raw.meta().n_realizations);
    let started = Instant::now();
    let run = run_pipeline_with_ensemble(raw, &cell, &config.settings, pretrained);
    let runtime_s = started.elapsed().as_secs_f64();
    match run {
        Ok(outcome) => (
            CellResult { key: *key, report: Some(outcome.report), error: None, runtime_s },
            Some(outcome.ensemble),
        ),
        Err(e) => (
            CellResult { key: *key, report: None, error: Some(e.to_string()), runtime_s },
            None,
        ),
    }
}

/// Run the full grid sequentially. Ensembles are cached per (seed, count)
/// when the reference policy makes a trained model independent of the other
/// non-reference realizations; cached cells are bit-identical to fresh runs.
pub fn run_ablation(
    raw: &EnsembleDataset,
    config: &AblationConfig,
    config_hash: &str,
) -> Result<AblationOutcome> {
    run_ablation_with_workers(raw, config, config_hash, 1)
}

/// Run the grid on `workers` threads. Cells are pure functions of the
/// dataset, settings, and their key, so every thread count produces the
/// same cell reports; only the wall-clock `runtime_s` column varies.
///
/// With more than one worker the grid is swept in two wavefronts: the first
/// cell of each (seed, r_train) group trains its ensemble, then the
/// remaining cells of the group reuse it (this mirrors what the sequential
/// cache does one cell at a time).
pub fn run_ablation_with_workers(
    raw: &EnsembleDataset,
    config: &AblationConfig,
    config_hash: &str,
    workers: usize,
) -> Result<AblationOutcome> {
    let meta = raw.meta();
    config.validate(meta.n_realizations)?;
    if workers == 0 {
        return Err(CoreError::Contract("workers must be >= 1".into()));
    }

    // Under FirstRealization, model j never depends on which other models
    // train alongside it, and the anchor targets come from the reference
    // alone, so an ensemble is a pure function of (seed, training prefix).
    let cacheable = config.settings.plan.reference_policy == ReferencePolicy::FirstRealization;
    let keys = grid_keys(config);

    if workers == 1 {
        let mut cache: HashMap<(u64, usize), EnsembleTrainOutcome> = HashMap::new();
        let mut cells = Vec::with_capacity(keys.len());
        for key in &keys {
            let pretrained = if cacheable { cache.get(&(key.seed, key.r_train)) } else { None };
            let (result, ensemble) = run_cell(raw, config, config_hash, key, pretrained);
            if cacheable {
                if let Some(e) = ensemble {
                    cache.entry((key.seed, key.r_train)).or_insert(e);
                }
            }
            cells.push(result);
        }
        return Ok(AblationOutcome { cells });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CoreError::Contract(format!("worker pool: {e}")))?;

    // Wavefront one: the first cell of each ensemble group.
    let mut is_leader = vec![!cacheable; keys.len()];
    if cacheable {
        let mut seen: HashMap<(u64, usize), ()> = HashMap::new();
        for (idx, key) in keys.iter().enumerate() {
            if seen.insert((key.seed, key.r_train), ()).is_none() {
                is_leader[idx] = true;
            }
        }
    }
    let leader_idx: Vec<usize> = (0..keys.len()).filter(|&i| is_leader[i]).collect();
    let leader_runs: Vec<(usize, CellResult, Option<EnsembleTrainOutcome>)> = pool.install(|| {
        leader_idx
            .par_iter()
            .map(|&idx| {
                let (result, ensemble) = run_cell(raw, config, config_hash, &keys[idx], None);
                (idx, result, ensemble)
            })
            .collect()
    });

    let mut slots: Vec<Option<CellResult>> = (0..keys.len()).map(|_| None).collect();
    let mut ensembles: HashMap<(u64, usize), EnsembleTrainOutcome> = HashMap::new();
    for (idx, result, ensemble) in leader_runs {
        if cacheable {
            if let Some(e) = ensemble {
                ensembles.insert((keys[idx].seed, keys[idx].r_train), e);
            }
        }
        slots[idx] = Some(result);
    }

    // Wavefront two: everything else, reusing the group ensembles. A failed
    // leader leaves no ensemble behind and its group runs from scratch.
    let follower_idx: Vec<usize> = (0..keys.len()).filter(|&i| slots[i].is_none()).collect();
    let follower_runs: Vec<(usize, CellResult)> = pool.install(|| {
        follower_idx
            .par_iter()
            .map(|&idx| {
                let key = &keys[idx];
                let pretrained = ensembles.get(&(key.seed, key.r_train));
                let (result, _) = run_cell(raw, config, config_hash, key, pretrained);
                (idx, result)
            })
            .collect()
    });
    for (idx, result) in follower_runs {
        slots[idx] = Some(result);
    }

    let cells = slots
        .into_iter()
        .map(|s| s.expect("every grid cell ran in one of the two wavefronts"))
        .collect();
    Ok(AblationOutcome { cells })
}
