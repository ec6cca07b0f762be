//! Cross-realization latent homogeneity: anchor locations get fixed
//! reference latents, and every non-reference model pays a hinge
//! penalty when its posterior mean at an anchor drifts more than
//! `d_z_max` from the reference.
//!
//! The penalty is max(0, ||mu - z_fixed||^2 - d_z_max^2), averaged over
//! a resampled anchor minibatch and scaled by lambda. At lambda = 0 the
//! penalty branch is skipped structurally, so the objective and every
//! downstream byte of training state match plain ELBO training exactly.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;

use crate::cvae::{
    batch_tensor, build_elbo_graph, draw_eps, encode_graph, train_from, CvaeConfig, CvaeModel,
    ElboGraph, TrainObjective, TrainOutcome,
};
use crate::ensemble::EnsembleDataset;
use crate::error::{CoreError, Result};
use crate::nn::MlpBinding;
use crate::rng::{derive_stream, Xoshiro};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// First trained realization is the reference: it trains plain and
    /// its posterior means at the anchors become the fixed latents.
    FirstRealization,
    /// All realizations train plain first; the fixed latents are the
    /// mean posterior means, and everyone retrains constrained.
    MeanOfTrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSelection {
    /// Every ceil(1/fraction)-th location id in row-major order.
    UniformGridStride,
    /// Uniform sample without replacement from a seeded stream.
    SeededRandom,
}

/// Anchor ids with their fixed latents and the penalty hyperparameters,
/// serialized as JSON alongside checkpoints.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSet {
    /// Sorted, unique location ids.
    pub anchor_location_ids: Vec<usize>,
    /// Fixed latent per anchor, parallel to `anchor_location_ids`.
    pub fixed_latents: Vec<Vec<f64>>,
    pub lambda: f64,
    pub d_z_max: f64,
    pub reference_policy: ReferencePolicy,
    pub seed: u64,
}

impl AnchorSet {
    pub fn validate(&self) -> Result<()> {
        if self.anchor_location_ids.is_empty() {
            return Err(CoreError::Contract("anchor set is empty".into()));
        }
        if !self.anchor_location_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::Contract(
                "anchor ids must be sorted and unique".into(),
            ));
        }
        if self.fixed_latents.len() != self.anchor_location_ids.len() {
            return Err(CoreError::dimension(
                "anchor set",
                format!("{} fixed latents", self.fixed_latents.len()),
                format!("{} anchor ids", self.anchor_location_ids.len()),
            ));
        }
        let d_z = self.fixed_latents[0].len();
        if d_z == 0 {
            return Err(CoreError::Contract("fixed latents are empty".into()));
        }
        for (i, z) in self.fixed_latents.iter().enumerate() {
            if z.len() != d_z {
                return Err(CoreError::dimension(
                    "anchor set latents",
                    format!("latent {i} has {} dims", z.len()),
                    format!("{d_z}"),
                ));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Contract(format!(
                    "fixed latent {i} contains a non-finite value"
                )));
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(CoreError::Contract(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.d_z_max >= 0.0) || !self.d_z_max.is_finite() {
            return Err(CoreError::Contract(format!(
                "d_z_max must be finite and >= 0, got {}",
                self.d_z_max
            )));
        }
        Ok(())
    }

    pub fn d_z(&self) -> usize {
        self.fixed_latents.first().map_or(0, Vec::len)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let set: AnchorSet = serde_json::from_reader(f)?;
        set.validate()?;
        Ok(set)
    }
}

/// Pick anchor location ids.
///
/// `UniformGridStride` takes every ceil(1/fraction)-th id starting at 0;
/// `SeededRandom` draws ceil(fraction * n) ids without replacement.
/// Both return sorted ids.
pub fn select_anchors(
    n_locations: usize,
    fraction: f64,
    selection: AnchorSelection,
    seed: u64,
) -> Result<Vec<usize>> {
    if n_locations == 0 {
        return Err(CoreError::Contract("no locations to anchor".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::Contract(format!(
            "anchor fraction must be in (0, 1], got {fraction}"
        )));
    }
    let ids = match selection {
        AnchorSelection::UniformGridStride => {
            let stride = (1.0 / fraction).ceil() as usize;
            (0..n_locations).step_by(stride.max(1)).collect::<Vec<_>>()
        }
        AnchorSelection::SeededRandom => {
            let count = ((fraction * n_locations as f64).ceil() as usize)
                .clamp(1, n_locations);
            let mut rng = Xoshiro::stream(seed, "anchors");
            let mut ids = rng.sample_indices(n_locations, count);
            ids.sort_unstable();
            ids
        }
    };
    if ids.is_empty() {
        return Err(CoreError::Contract(format!(
            "anchor selection produced no anchors (n={n_locations}, fraction={fraction})"
        )));
    }
    Ok(ids)
}

/// Squared-distance hinge: max(0, ||mu - z_fixed||^2 - d_z_max^2).
pub fn hinge_penalty(mu: &[f64], z_fixed: &[f64], d_z_max: f64) -> f64 {
    debug_assert_eq!(mu.len(), z_fixed.len());
    let d2: f64 = mu
        .iter()
        .zip(z_fixed)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (d2 - d_z_max * d_z_max).max(0.0)
}

/// Posterior means at the anchors, averaged across `models`.
///
/// Each model must observe every anchor in its own realization;
/// otherwise the anchor's reference latent would be undefined there.
pub fn compute_fixed_latents(
    models: &[&CvaeModel],
    data: &EnsembleDataset,
    observed: &[&[usize]],
    anchor_ids: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if models.is_empty() || models.len() != observed.len() {
        return Err(CoreError::Contract(format!(
            "need matching models and observation lists, got {} and {}",
            models.len(),
            observed.len()
        )));
    }
    if anchor_ids.is_empty() {
        return Err(CoreError::Contract("no anchors given".into()));
    }
    let n_loc = data.meta().n_locations;
    if let Some(&bad) = anchor_ids.iter().find(|&&a| a >= n_loc) {
        return Err(CoreError::Contract(format!(
            "anchor location {bad} out of range ({n_loc} locations)"
        )));
    }
    let d_z = models[0].config.d_z;
    let mut acc = vec![vec![0.0f64; d_z]; anchor_ids.len()];
    for (model, obs) in models.iter().zip(observed) {
        let obs_set: BTreeSet<usize> = obs.iter().copied().collect();
        for (ai, &a) in anchor_ids.iter().enumerate() {
            if !obs_set.contains(&a) {
                return Err(CoreError::Contract(format!(
                    "anchor location {a} is not observed in realization {}",
                    model.realization_id
                )));
            }
            let x = data.location_features(a);
            let y = data.series(model.realization_id, a);
            let q = model.encode(&x, y)?;
            for (s, m) in acc[ai].iter_mut().zip(&q.mu) {
                *s += m;
            }
        }
    }
    let k = models.len() as f64;
    for z in acc.iter_mut() {
        for v in z.iter_mut() {
            *v /= k;
        }
    }
    Ok(acc)
}

/// Everything the training loop needs to attach the anchor penalty to a
/// step's objective.
pub struct ConstraintContext<'a> {
    pub anchor_xs: &'a [Vec<f64>],
    pub anchor_ys: &'a [Vec<f64>],
    pub fixed_latents: &'a [Vec<f64>],
    pub lambda: f64,
    pub d_z_max: f64,
    /// Anchor minibatch size; min(batch_size, number of anchors).
    pub anchor_batch: usize,
}

/// Penalty subgraph over the given anchor rows, reusing the encoder
/// binding so parameter gradients accumulate from both objective parts.
fn penalty_nodes(
    tape: &mut Tape,
    model: &CvaeModel,
    enc: &MlpBinding,
    anchor_xs: &[Vec<f64>],
    anchor_ys: &[Vec<f64>],
    fixed: &[Vec<f64>],
    lambda: f64,
    d_z_max: f64,
) -> Result<NodeId> {
    let cfg = &model.config;
    let ax = batch_tensor(anchor_xs, cfg.d_x, "anchor x")?;
    let ay = batch_tensor(anchor_ys, cfg.t_len, "anchor y")?;
    let zf = batch_tensor(fixed, cfg.d_z, "anchor fixed latents")?;
    let ax_id = tape.leaf(ax);
    let ay_id = tape.leaf(ay);
    let zf_id = tape.leaf(zf);
    let (mu, _lv) = encode_graph(tape, model, enc, ax_id, ay_id)?;
    let diff = tape.sub(mu, zf_id)?;
    let sq = tape.square(diff)?;
    let ssq = tape.sum_rows(sq)?;
    let shifted = tape.add_const(ssq, -(d_z_max * d_z_max))?;
    let hinge = tape.relu(shifted)?;
    let mean_hinge = tape.mean(hinge)?;
    tape.mul_const(mean_hinge, lambda)
}

impl<'a> ConstraintContext<'a> {
    pub fn new(
        anchor_xs: &'a [Vec<f64>],
        anchor_ys: &'a [Vec<f64>],
        fixed_latents: &'a [Vec<f64>],
        lambda: f64,
        d_z_max: f64,
        batch_size: usize,
    ) -> Result<Self> {
        let n = anchor_xs.len();
        if n == 0 || anchor_ys.len() != n || fixed_latents.len() != n {
            return Err(CoreError::Contract(format!(
                "constraint context needs parallel anchor arrays, got {} / {} / {}",
                n,
                anchor_ys.len(),
                fixed_latents.len()
            )));
        }
        if !(lambda >= 0.0) || !(d_z_max >= 0.0) {
            return Err(CoreError::Contract(
                "lambda and d_z_max must be >= 0".into(),
            ));
        }
        Ok(ConstraintContext {
            anchor_xs,
            anchor_ys,
            fixed_latents,
            lambda,
            d_z_max,
            anchor_batch: batch_size.min(n).max(1),
        })
    }

    /// Extend the step objective with the anchor hinge penalty over a
    /// with-replacement anchor minibatch. At lambda = 0 this returns
    /// the ELBO loss node untouched and draws nothing from `rng`.
    pub fn attach_penalty(
        &self,
        tape: &mut Tape,
        model: &CvaeModel,
        graph: &ElboGraph,
        rng: &mut Xoshiro,
    ) -> Result<NodeId> {
        if self.lambda == 0.0 {
            return Ok(graph.loss);
        }
        let n = self.anchor_xs.len();
        let ids: Vec<usize> = (0..self.anchor_batch).map(|_| rng.below(n)).collect();
        let ax: Vec<Vec<f64>> = ids.iter().map(|&i| self.anchor_xs[i].clone()).collect();
        let ay: Vec<Vec<f64>> = ids.iter().map(|&i| self.anchor_ys[i].clone()).collect();
        let zf: Vec<Vec<f64>> = ids.iter().map(|&i| self.fixed_latents[i].clone()).collect();
        let pen = penalty_nodes(
            tape,
            model,
            &graph.enc,
            &ax,
            &ay,
            &zf,
            self.lambda,
            self.d_z_max,
        )?;
        tape.add(graph.loss, pen)
    }
}

/// A built constrained-objective graph: negated ELBO plus the
/// full-anchor-set hinge penalty (no anchor subsampling).
pub struct LcGraph {
    pub loss: NodeId,
    pub enc: MlpBinding,
    pub dec: MlpBinding,
}

/// Build the constrained objective on `tape`. At lambda = 0 the
/// penalty branch is skipped and the loss node is the plain ELBO node.
#[allow(clippy::too_many_arguments)]
pub fn build_lc_graph(
    tape: &mut Tape,
    model: &CvaeModel,
    xs: &Tensor,
    ys: &Tensor,
    anchor_xs: &[Vec<f64>],
    anchor_ys: &[Vec<f64>],
    fixed_latents: &[Vec<f64>],
    lambda: f64,
    d_z_max: f64,
    eps: &[Tensor],
) -> Result<LcGraph> {
    let graph = build_elbo_graph(tape, model, xs, ys, eps)?;
    if lambda == 0.0 {
        return Ok(LcGraph {
            loss: graph.loss,
            enc: graph.enc,
            dec: graph.dec,
        });
    }
    let pen = penalty_nodes(
        tape,
        model,
        &graph.enc,
        anchor_xs,
        anchor_ys,
        fixed_latents,
        lambda,
        d_z_max,
    )?;
    let loss = tape.add(graph.loss, pen)?;
    Ok(LcGraph {
        loss,
        enc: graph.enc,
        dec: graph.dec,
    })
}

/// Constrained objective value: negated ELBO plus the full-anchor-set
/// hinge penalty (no anchor subsampling), with caller-supplied noise.
/// At lambda = 0 this equals `elbo_loss_with_eps` bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn lc_loss_with_eps(
    model: &CvaeModel,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    anchor_xs: &[Vec<f64>],
    anchor_ys: &[Vec<f64>],
    fixed_latents: &[Vec<f64>],
    lambda: f64,
    d_z_max: f64,
    eps: &[Tensor],
) -> Result<f64> {
    let xs_t = batch_tensor(xs, model.config.d_x, "lc_loss x")?;
    let ys_t = batch_tensor(ys, model.config.t_len, "lc_loss y")?;
    let mut tape = Tape::new();
    let graph = build_lc_graph(
        &mut tape,
        model,
        &xs_t,
        &ys_t,
        anchor_xs,
        anchor_ys,
        fixed_latents,
        lambda,
        d_z_max,
        eps,
    )?;
    tape.value(graph.loss).item()
}

/// As `lc_loss_with_eps`, drawing the reparameterization noise from
/// `rng`.
#[allow(clippy::too_many_arguments)]
pub fn lc_loss(
    model: &CvaeModel,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    anchor_xs: &[Vec<f64>],
    anchor_ys: &[Vec<f64>],
    fixed_latents: &[Vec<f64>],
    lambda: f64,
    d_z_max: f64,
    rng: &mut Xoshiro,
) -> Result<f64> {
    let eps = draw_eps(xs.len(), model.config.d_z, model.config.mc_samples, rng);
    lc_loss_with_eps(
        model,
        xs,
        ys,
        anchor_xs,
        anchor_ys,
        fixed_latents,
        lambda,
        d_z_max,
        &eps,
    )
}

/// How to build the anchor set and reference latents for an ensemble
/// training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LcTrainPlan {
    pub reference_policy: ReferencePolicy,
    pub anchor_fraction: f64,
    pub anchor_selection: AnchorSelection,
    pub lambda: f64,
    pub d_z_max: f64,
    /// Seed for anchor selection (only used by `SeededRandom`).
    pub anchor_seed: u64,
}

impl Default for LcTrainPlan {
    fn default() -> Self {
        LcTrainPlan {
            reference_policy: ReferencePolicy::FirstRealization,
            anchor_fraction: 0.05,
            anchor_selection: AnchorSelection::UniformGridStride,
            lambda: 10.0,
            d_z_max: 0.5,
            anchor_seed: 0,
        }
    }
}

/// Models trained for an ensemble, parallel to the realization list
/// passed in, plus the anchor set they share.
pub struct EnsembleTrainOutcome {
    pub models: Vec<CvaeModel>,
    pub anchor_set: AnchorSet,
    pub loss_traces: Vec<Vec<f64>>,
}

/// The per-realization training config: identical to `base` except for the
/// seed, which is drawn from a realization-tagged substream so sibling
/// models never share weight initializations or batch orders.
pub fn config_for_realization(base: &CvaeConfig, r: usize) -> CvaeConfig {
    CvaeConfig {
        seed: derive_stream(base.seed, &format!("model/{r}")),
        ..base.clone()
    }
}

fn train_one(
    data: &EnsembleDataset,
    r: usize,
    observed: &[usize],
    config: &CvaeConfig,
    objective: TrainObjective,
) -> Result<TrainOutcome> {
    let (xs, ys) = data.training_pairs(r, observed)?;
    let model = CvaeModel::init(config.clone(), r)?;
    train_from(model, &xs, &ys, objective)
}

/// Train one CVAE per realization with the latent homogeneity
/// constraint.
///
/// `observed[i]` lists the location ids visible to realization
/// `train_realizations[i]`; every anchor must appear in the observation
/// list of each realization whose encoder defines or is constrained by
/// the reference latents.
///
/// Under `FirstRealization`, the first listed realization trains plain
/// and is exempt from the penalty; its posterior means fix the anchors
/// for everyone else. Under `MeanOfTrained`, every realization first
/// trains plain, the fixed latents are the across-model mean posterior
/// means, and every realization then retrains from a fresh init with
/// the penalty active.
pub fn train_lc_ensemble(
    data: &EnsembleDataset,
    train_realizations: &[usize],
    observed: &[Vec<usize>],
    base_config: &CvaeConfig,
    plan: &LcTrainPlan,
) -> Result<EnsembleTrainOutcome> {
    base_config.validate()?;
    if train_realizations.is_empty() || observed.len() != train_realizations.len() {
        return Err(CoreError::Contract(format!(
            "need one observation list per training realization, got {} and {}",
            observed.len(),
            train_realizations.len()
        )));
    }
    let n_loc = data.meta().n_locations;
    let anchor_ids = select_anchors(
        n_loc,
        plan.anchor_fraction,
        plan.anchor_selection,
        plan.anchor_seed,
    )?;

    let anchor_xs: Vec<Vec<f64>> = anchor_ids
        .iter()
        .map(|&a| data.location_features(a).to_vec())
        .collect();

    let mut models: Vec<Option<CvaeModel>> = vec![None; train_realizations.len()];
    let mut traces: Vec<Vec<f64>> = vec![Vec::new(); train_realizations.len()];

    let fixed_latents = match plan.reference_policy {
        ReferencePolicy::FirstRealization => {
            let r_ref = train_realizations[0];
            let cfg = config_for_realization(base_config, r_ref);
            let out = train_one(data, r_ref, &observed[0], &cfg, TrainObjective::PlainElbo)?;
            let fixed = compute_fixed_latents(
                &[&out.model],
                data,
                &[observed[0].as_slice()],
                &anchor_ids,
            )?;
            models[0] = Some(out.model);
            traces[0] = out.loss_trace;
            fixed
        }
        ReferencePolicy::MeanOfTrained => {
            // Plain fits are independent of one another, so they can run on
            // worker threads; each task is a pure function of its inputs and
            // the collected order is the input order, keeping results
            // identical for any thread count.
            let fits: Vec<Result<TrainOutcome>> = train_realizations
                .par_iter()
                .enumerate()
                .map(|(i, &r)| {
                    let cfg = config_for_realization(base_config, r);
                    train_one(data, r, &observed[i], &cfg, TrainObjective::PlainElbo)
                })
                .collect();
            let mut stage1 = Vec::with_capacity(train_realizations.len());
            for out in fits {
                stage1.push(out?.model);
            }
            let refs: Vec<&CvaeModel> = stage1.iter().collect();
            let obs_refs: Vec<&[usize]> = observed.iter().map(Vec::as_slice).collect();
            compute_fixed_latents(&refs, data, &obs_refs, &anchor_ids)?
        }
    };

    // Constrained fits only read the shared anchor targets, so they are
    // mutually independent and parallelize the same way as the plain stage.
    // Results are drained in input order so the first failure wins
    // deterministically regardless of scheduling.
    let pending: Vec<(usize, usize)> = train_realizations
        .iter()
        .copied()
        .enumerate()
        .filter(|&(i, _)| models[i].is_none())
        .collect();
    let fits: Vec<(usize, Result<TrainOutcome>)> = pending
        .into_par_iter()
        .map(|(i, r)| {
            let fit = (|| {
                let cfg = config_for_realization(base_config, r);
                let anchor_ys: Vec<Vec<f64>> = anchor_ids
                    .iter()
                    .map(|&a| data.series(r, a).to_vec())
                    .collect();
                // Constrained models must observe the anchors too.
                let obs_set: BTreeSet<usize> = observed[i].iter().copied().collect();
                if let Some(&missing) = anchor_ids.iter().find(|a| !obs_set.contains(a)) {
                    return Err(CoreError::Contract(format!(
                        "anchor location {missing} is not observed in realization {r}"
                    )));
                }
                let ctx = ConstraintContext::new(
                    &anchor_xs,
                    &anchor_ys,
                    &fixed_latents,
                    plan.lambda,
                    plan.d_z_max,
                    base_config.batch_size,
                )?;
                train_one(data, r, &observed[i], &cfg, TrainObjective::Constrained(&ctx))
            })();
            (i, fit)
        })
        .collect();
    for (i, fit) in fits {
        let out = fit?;
        models[i] = Some(out.model);
        traces[i] = out.loss_trace;
    }

    let anchor_set = AnchorSet {
        anchor_location_ids: anchor_ids,
        fixed_latents,
        lambda: plan.lambda,
        d_z_max: plan.d_z_max,
        reference_policy: plan.reference_policy,
        seed: plan.anchor_seed,
    };
    anchor_set.validate()?;
    Ok(EnsembleTrainOutcome {
        models: models.into_iter().map(Option::unwrap).collect(),
        anchor_set,
        loss_traces: traces,
    })
}

/// Train a model for a realization that only sees a subset of locations,
/// constrained toward an existing anchor set.
///
/// Anchors outside the observed set contribute no encoder term and are
/// skipped; if none remain (or the set's lambda is zero) the model trains on
/// the plain objective. The model's seed is derived from `base_config.seed`
/// and the realization id exactly as in ensemble training.
pub fn train_held_out(
    data: &EnsembleDataset,
    realization: usize,
    observed_ids: &[usize],
    base_config: &CvaeConfig,
    anchor_set: &AnchorSet,
) -> Result<TrainOutcome> {
    base_config.validate()?;
    anchor_set.validate()?;
    let cfg = config_for_realization(base_config, realization);
    let obs_set: BTreeSet<usize> = observed_ids.iter().copied().collect();
    let kept: Vec<usize> = anchor_set
        .anchor_location_ids
        .iter()
        .enumerate()
        .filter(|(_, a)| obs_set.contains(a))
        .map(|(i, _)| i)
        .collect();
    if anchor_set.lambda == 0.0 || kept.is_empty() {
        return train_one(data, realization, observed_ids, &cfg, TrainObjective::PlainElbo);
    }
    let anchor_xs: Vec<Vec<f64>> = kept
        .iter()
        .map(|&i| data.location_features(anchor_set.anchor_location_ids[i]).to_vec())
        .collect();
    let anchor_ys: Vec<Vec<f64>> = kept
        .iter()
        .map(|&i| data.series(realization, anchor_set.anchor_location_ids[i]).to_vec())
        .collect();
    let fixed: Vec<Vec<f64>> = kept.iter().map(|&i| anchor_set.fixed_latents[i].clone()).collect();
    let ctx = ConstraintContext::new(
        &anchor_xs,
        &anchor_ys,
        &fixed,
        anchor_set.lambda,
        anchor_set.d_z_max,
        base_config.batch_size,
    )?;
    train_one(data, realization, observed_ids, &cfg, TrainObjective::Constrained(&ctx))
}
