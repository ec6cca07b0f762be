//! Completion of a sparsely observed realization's latent field.
//!
//! A trained per-realization model gives encoder means at the observed
//! locations. Each latent coordinate is then regressed independently over a
//! feature space built from the k nearest observed neighbors' latent codes,
//! and the fitted regressors fill in means and variances at every hidden
//! location. Observed locations keep their encoder means with zero variance.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cvae::CvaeModel;
use crate::ensemble::{haversine_km, EnsembleDataset, NormStats};
use crate::error::{CoreError, Result};
use crate::gp::{heuristic_init, ExactGp, GpFitOptions, KernelParams, SparseGp};
use crate::rng::{derive_stream, Xoshiro};

/// Training-set size above which `GpMode::Auto` switches to the sparse bound.
pub const SPARSE_AUTO_THRESHOLD: usize = 2000;

/// Inducing-point count used when `GpMode::Auto` selects the sparse bound.
pub const SPARSE_AUTO_INDUCING: usize = 256;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which (feature, latent) pairs train the per-coordinate regressors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpDataMode {
    /// Pairs from every pooled realization plus the target realization's
    /// observed pairs.
    PooledUnion,
    /// Only the target realization's observed pairs.
    RStarOnly,
}

/// Regressor family selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpMode {
    /// Exact inference unless the training set exceeds
    /// [`SPARSE_AUTO_THRESHOLD`] pairs.
    Auto,
    /// Exact inference regardless of size.
    Exact,
    /// Sparse variational inference with the given inducing-point count.
    Sparse(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionConfig {
    /// Nearest observed neighbors per feature vector.
    pub k_neighbors: usize,
    pub data_mode: GpDataMode,
    pub gp_mode: GpMode,
    /// Hyperparameter optimization steps per latent coordinate.
    pub opt_steps: usize,
    pub learning_rate: f64,
    /// Cap on training pairs. Pairs from pooled realizations are subsampled
    /// to fit; the target realization's own pairs are always kept.
    pub gp_max_pairs: usize,
    /// Seed for the subsampling and inducing-point streams.
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            k_neighbors: 4,
            data_mode: GpDataMode::PooledUnion,
            gp_mode: GpMode::Auto,
            opt_steps: 200,
            learning_rate: 0.05,
            gp_max_pairs: 2000,
            seed: 0,
        }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(CoreError::Contract("k_neighbors must be positive".into()));
        }
        if self.gp_max_pairs == 0 {
            return Err(CoreError::Contract("gp_max_pairs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CoreError::Contract(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if let GpMode::Sparse(m) = self.gp_mode {
            if m == 0 {
                return Err(CoreError::Contract(
                    "sparse mode needs at least one inducing point".into(),
                ));
            }
        }
        Ok(())
    }

    fn fit_options(&self) -> GpFitOptions {
        GpFitOptions {
            opt_steps: self.opt_steps,
            learning_rate: self.learning_rate,
            optimize_inducing: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Latent field container
// ---------------------------------------------------------------------------

/// Per-location posterior summary of a completed latent field: location id
/// mapped to (mean, variance), both of length `d_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentField {
    pub d_z: usize,
    pub entries: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl LatentField {
    pub fn new(d_z: usize) -> LatentField {
        LatentField { d_z, entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, location_id: usize, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.d_z || var.len() != self.d_z {
            return Err(CoreError::dimension(
                "latent field insert",
                format!("mean len {}, var len {}", mean.len(), var.len()),
                format!("{}", self.d_z),
            ));
        }
        if let Some(v) = var.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(CoreError::Numerical(format!(
                "latent variance at location {location_id} is {v}, expected finite and nonnegative"
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(CoreError::Numerical(format!(
                "latent mean at location {location_id} is not finite"
            )));
        }
        self.entries.insert(location_id, (mean, var));
        Ok(())
    }

    pub fn get(&self, location_id: usize) -> Option<(&[f64], &[f64])> {
        self.entries
            .get(&location_id)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes `location_id,lat,lon,z_mean_1..d_z,z_var_1..d_z` rows in
    /// ascending location order. Coordinates come from the caller so the
    /// field itself stays purely latent.
    pub fn save_csv(&self, path: &Path, coords: &[(f64, f64)]) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let mut header = String::from("location_id,lat,lon");
        for i in 1..=self.d_z {
            header.push_str(&format!(",z_mean_{i}"));
        }
        for i in 1..=self.d_z {
            header.push_str(&format!(",z_var_{i}"));
        }
        writeln!(w, "{header}")?;
        for (&id, (mean, var)) in &self.entries {
            let &(lat, lon) = coords.get(id).ok_or_else(|| {
                CoreError::Contract(format!(
                    "latent field export: location {id} outside coordinate table of {} entries",
                    coords.len()
                ))
            })?;
            write!(w, "{id},{lat:.17e},{lon:.17e}")?;
            for m in mean {
                write!(w, ",{m:.17e}")?;
            }
            for v in var {
                write!(w, ",{v:.17e}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file produced by [`LatentField::save_csv`]. Coordinates are
    /// parsed for validation but not retained.
    pub fn load_csv(path: &Path) -> Result<LatentField> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| CoreError::format(0, "latent field csv is empty"))??;
        let cols: Vec<&str> = header.trim_end().split(',').collect();
        if cols.len() < 5 || cols[0] != "location_id" || cols[1] != "lat" || cols[2] != "lon" {
            return Err(CoreError::format(0, format!(
                "latent field csv header starts with '{}', expected 'location_id,lat,lon,...'",
                cols.iter().take(3).cloned().collect::<Vec<_>>().join(",")
            )));
        }
        let rest = cols.len() - 3;
        if rest % 2 != 0 {
            return Err(CoreError::format(0, format!(
                "latent field csv has {rest} value columns, expected an even mean/var split"
            )));
        }
        let d_z = rest / 2;
        for i in 1..=d_z {
            if cols[2 + i] != format!("z_mean_{i}") || cols[2 + d_z + i] != format!("z_var_{i}") {
                return Err(CoreError::format(0, format!(
                    "latent field csv header column {} is '{}', expected z_mean/z_var naming",
                    2 + i,
                    cols[2 + i]
                )));
            }
        }
        let mut field = LatentField::new(d_z);
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.trim_end().split(',').collect();
            if parts.len() != cols.len() {
                return Err(CoreError::format(0, format!(
                    "latent field csv row {} has {} columns, expected {}",
                    row + 2,
                    parts.len(),
                    cols.len()
                )));
            }
            let id: usize = parts[0].parse().map_err(|_| {
                CoreError::format(0, format!("latent field csv row {}: bad id '{}'", row + 2, parts[0]))
            })?;
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| {
                    CoreError::format(0, format!(
                        "latent field csv row {}: bad number '{s}'",
                        row + 2
                    ))
                })
            };
            let mean: Vec<f64> = parts[3..3 + d_z].iter().map(|s| parse(s)).collect::<Result<_>>()?;
            let var: Vec<f64> =
                parts[3 + d_z..3 + 2 * d_z].iter().map(|s| parse(s)).collect::<Result<_>>()?;
            if field.entries.contains_key(&id) {
                return Err(CoreError::format(0, format!(
                    "latent field csv row {}: duplicate location {id}",
                    row + 2
                )));
            }
            field.insert(id, mean, var)?;
        }
        Ok(field)
    }
}

// ---------------------------------------------------------------------------
// Neighbor features
// ---------------------------------------------------------------------------

/// Ids of the `k` candidates nearest to `target` by great-circle distance,
/// nearest first, ties broken toward the lower id. `target` itself is
/// excluded when present among the candidates.
pub fn nearest_observed_neighbors(
    target: usize,
    candidates: &[usize],
    coords: &[(f64, f64)],
    k: usize,
) -> Result<Vec<usize>> {
    let target_coord = *coords.get(target).ok_or_else(|| {
        CoreError::Contract(format!(
            "neighbor query: location {target} outside coordinate table of {} entries",
            coords.len()
        ))
    })?;
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(candidates.len());
    for &c in candidates {
        if c == target {
            continue;
        }
        let coord = *coords.get(c).ok_or_else(|| {
            CoreError::Contract(format!(
                "neighbor query: candidate {c} outside coordinate table of {} entries",
                coords.len()
            ))
        })?;
        ranked.push((haversine_km(target_coord, coord), c));
    }
    if ranked.len() < k {
        return Err(CoreError::Contract(format!(
            "neighbor query at location {target}: need k={k} observed neighbors, only {} available",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    Ok(ranked[..k].iter().map(|&(_, id)| id).collect())
}

/// Feature vectors for `target_ids`: for each target, the latent codes of its
/// `k` nearest observed neighbors concatenated nearest-first. Every feature
/// vector has exactly `k * d_z` entries.
pub fn build_features(
    target_ids: &[usize],
    observed_latents: &BTreeMap<usize, Vec<f64>>,
    coords: &[(f64, f64)],
    k: usize,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    if observed_latents.len() < k {
        return Err(CoreError::Contract(format!(
            "feature construction needs at least k={k} observed locations, got {}",
            observed_latents.len()
        )));
    }
    let d_z = match observed_latents.values().next() {
        Some(z) => z.len(),
        None => {
            return Err(CoreError::Contract(
                "feature construction needs a nonempty observed latent map".into(),
            ))
        }
    };
    for (&id, z) in observed_latents {
        if z.len() != d_z {
            return Err(CoreError::dimension(
                "observed latents",
                format!("location {id} has {} coords", z.len()),
                format!("{d_z}"),
            ));
        }
    }
    let candidates: Vec<usize> = observed_latents.keys().copied().collect();
    let mut features = BTreeMap::new();
    for &target in target_ids {
        let neighbors = nearest_observed_neighbors(target, &candidates, coords, k)?;
        let mut f = Vec::with_capacity(k * d_z);
        for n in neighbors {
            f.extend_from_slice(&observed_latents[&n]);
        }
        features.insert(target, f);
    }
    Ok(features)
}

/// Encoder posterior means of one realization at the observed locations,
/// keyed by location id.
pub fn encode_observed(
    model: &CvaeModel,
    data: &EnsembleDataset,
    observed_ids: &[usize],
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let meta = data.meta();
    let r = model.realization_id as usize;
    if r >= meta.n_realizations {
        return Err(CoreError::Contract(format!(
            "model is for realization {r}, dataset has {}",
            meta.n_realizations
        )));
    }
    let mut out = BTreeMap::new();
    for &l in observed_ids {
        if l >= meta.n_locations {
            return Err(CoreError::Contract(format!(
                "observed location {l} outside grid of {} locations",
                meta.n_locations
            )));
        }
        if out.contains_key(&l) {
            return Err(CoreError::Contract(format!(
                "observed location {l} listed more than once"
            )));
        }
        let x = data.location_features(l);
        let post = model.encode(&x, data.series(r, l))?;
        out.insert(l, post.mu);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Field completion
// ---------------------------------------------------------------------------

enum FittedGp {
    Exact(ExactGp),
    Sparse(SparseGp),
}

impl FittedGp {
    fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        match self {
            FittedGp::Exact(gp) => gp.predict(x),
            FittedGp::Sparse(gp) => gp.predict(x),
        }
    }

    fn params(&self) -> &KernelParams {
        match self {
            FittedGp::Exact(gp) => gp.params(),
            FittedGp::Sparse(gp) => gp.params(),
        }
    }

    fn clamped(&self) -> usize {
        match self {
            FittedGp::Exact(gp) => gp.clamped_variance_count(),
            FittedGp::Sparse(gp) => gp.clamped_variance_count(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CompletionDiagnostics {
    /// Training pairs actually used after pooling and capping.
    pub n_train_pairs: usize,
    /// Pairs contributed by the target realization itself.
    pub n_r_star_pairs: usize,
    pub used_sparse: bool,
    /// Fitted kernel hyperparameters per latent coordinate.
    pub per_coord_params: Vec<KernelParams>,
    /// Negative predictive variances clamped to zero across coordinates.
    pub clamped_variances: usize,
}

#[derive(Clone, Debug)]
pub struct CompletedField {
    pub field: LatentField,
    pub diagnostics: CompletionDiagnostics,
}

fn pairs_for_realization(
    model: &CvaeModel,
    data: &EnsembleDataset,
    observed_ids: &[usize],
    k: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let latents = encode_observed(model, data, observed_ids)?;
    let ids: Vec<usize> = latents.keys().copied().collect();
    let features = build_features(&ids, &latents, data.coords(), k)?;
    Ok(ids
        .iter()
        .map(|id| (features[id].clone(), latents[id].clone()))
        .collect())
}

/// Fills in latent means and variances at every grid location of the target
/// realization. Observed locations carry their encoder means with zero
/// variance; hidden locations get per-coordinate posterior summaries from
/// independently fitted regressors.
///
/// `pool` supplies additional (model, observed ids) sources whose pairs join
/// the training set under [`GpDataMode::PooledUnion`]; it is ignored under
/// [`GpDataMode::RStarOnly`].
pub fn complete_latent_field(
    model_r_star: &CvaeModel,
    pool: &[(&CvaeModel, &[usize])],
    data: &EnsembleDataset,
    observed_ids: &[usize],
    config: &CompletionConfig,
) -> Result<CompletedField> {
    config.validate()?;
    let meta = data.meta();
    let d_z = model_r_star.config.d_z;
    let k = config.k_neighbors;
    if observed_ids.len() <= k {
        return Err(CoreError::Contract(format!(
            "completion needs more observed locations than k={k} neighbors, got {}",
            observed_ids.len()
        )));
    }

    let r_star_latents = encode_observed(model_r_star, data, observed_ids)?;
    let mut field = LatentField::new(d_z);
    for (&id, mu) in &r_star_latents {
        field.insert(id, mu.clone(), vec![0.0; d_z])?;
    }

    let hidden: Vec<usize> =
        (0..meta.n_locations).filter(|l| !r_star_latents.contains_key(l)).collect();
    if hidden.is_empty() {
        return Ok(CompletedField {
            field,
            diagnostics: CompletionDiagnostics {
                n_train_pairs: 0,
                n_r_star_pairs: 0,
                used_sparse: false,
                per_coord_params: Vec::new(),
                clamped_variances: 0,
            },
        });
    }

    let mut pairs = pairs_for_realization(model_r_star, data, observed_ids, k)?;
    let n_r_star = pairs.len();
    if config.data_mode == GpDataMode::PooledUnion {
        for (model, obs) in pool {
            pairs.extend(pairs_for_realization(model, data, obs, k)?);
        }
    }

    // Cap the pooled training set; the target realization's pairs are never
    // dropped even if they alone exceed the cap.
    if pairs.len() > config.gp_max_pairs && pairs.len() > n_r_star {
        let budget = config.gp_max_pairs.saturating_sub(n_r_star);
        let pooled = pairs.split_off(n_r_star);
        if budget > 0 {
            let mut rng = Xoshiro::new(derive_stream(config.seed, "gp/subsample"));
            let mut keep = rng.sample_indices(pooled.len(), budget.min(pooled.len()));
            keep.sort_unstable();
            for i in keep {
                pairs.push(pooled[i].clone());
            }
        }
    }

    let n = pairs.len();
    let (use_sparse, m) = match config.gp_mode {
        GpMode::Exact => (false, 0),
        GpMode::Sparse(m) => (true, m.min(n)),
        GpMode::Auto => (n > SPARSE_AUTO_THRESHOLD, SPARSE_AUTO_INDUCING.min(n)),
    };

    let train_x: Vec<Vec<f64>> = pairs.iter().map(|(f, _)| f.clone()).collect();
    let inducing_idx: Vec<usize> = if use_sparse {
        let mut rng = Xoshiro::new(derive_stream(config.seed, "gp/inducing"));
        let mut idx = rng.sample_indices(n, m);
        idx.sort_unstable();
        idx
    } else {
        Vec::new()
    };
    let options = config.fit_options();

    let mut per_coord: Vec<FittedGp> = Vec::with_capacity(d_z);
    for coord in 0..d_z {
        let targets: Vec<f64> = pairs.iter().map(|(_, z)| z[coord]).collect();
        let init = heuristic_init(&train_x, &targets);
        let fitted = if use_sparse {
            let inducing: Vec<Vec<f64>> =
                inducing_idx.iter().map(|&i| train_x[i].clone()).collect();
            FittedGp::Sparse(SparseGp::fit(&train_x, &targets, inducing, Some(init), &options)?)
        } else {
            FittedGp::Exact(ExactGp::fit(train_x.clone(), targets, Some(init), &options)?)
        };
        per_coord.push(fitted);
    }

    let hidden_features = build_features(&hidden, &r_star_latents, data.coords(), k)?;
    for &id in &hidden {
        let f = &hidden_features[&id];
        let mut mean = Vec::with_capacity(d_z);
        let mut var = Vec::with_capacity(d_z);
        for gp in &per_coord {
            let (m, v) = gp.predict(f)?;
            mean.push(m);
            var.push(v);
        }
        field.insert(id, mean, var)?;
    }

    let diagnostics = CompletionDiagnostics {
        n_train_pairs: n,
        n_r_star_pairs: n_r_star,
        used_sparse: use_sparse,
        per_coord_params: per_coord.iter().map(|g| g.params().clone()).collect(),
        clamped_variances: per_coord.iter().map(|g| g.clamped()).sum(),
    };
    Ok(CompletedField { field, diagnostics })
}

/// Decodes the latent means of `location_ids` through the realization's
/// decoder and de-normalizes through `stats`, returning per-location series
/// in physical units. With `emit_noise`, independent observation noise of the
/// model's likelihood scale is added before de-normalization.
pub fn decode_completed(
    model: &CvaeModel,
    data: &EnsembleDataset,
    field: &LatentField,
    location_ids: &[usize],
    stats: &NormStats,
    emit_noise: bool,
    rng: &mut Xoshiro,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let meta = data.meta();
    if field.d_z != model.config.d_z {
        return Err(CoreError::dimension(
            "decode completed",
            format!("field d_z {}", field.d_z),
            format!("model d_z {}", model.config.d_z),
        ));
    }
    let mut out = BTreeMap::new();
    for &l in location_ids {
        if l >= meta.n_locations {
            return Err(CoreError::Contract(format!(
                "decode target {l} outside grid of {} locations",
                meta.n_locations
            )));
        }
        let (mean, _) = field.get(l).ok_or_else(|| {
            CoreError::Contract(format!("latent field has no entry for location {l}"))
        })?;
        let x = data.location_features(l);
        let mut y = if emit_noise {
            model.decode_with_noise(&x, mean, rng)?
        } else {
            model.decode(&x, mean)?
        };
        for (t, v) in y.iter_mut().enumerate() {
            *v = stats.denormalize_value(l, t, *v);
        }
        out.insert(l, y);
    }
    Ok(out)
}
