//! Reconstruction metrics, latent-space diagnostics, and the evaluation
//! report emitted by pipeline runs.
//!
//! All reconstruction errors are computed in de-normalized data units; the
//! caller is responsible for de-normalizing before scoring.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::completion::{nearest_observed_neighbors, LatentField};
use crate::cvae::CvaeModel;
use crate::ensemble::EnsembleDataset;
use crate::error::{CoreError, Result};

// ---------------------------------------------------------------------------
// Mean squared error
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    /// Per-location mean over time of squared error.
    pub per_location: BTreeMap<usize, f64>,
    /// Mean of the per-location values.
    pub aggregate: f64,
}

/// Per-location and aggregate mean squared error between two series sets
/// keyed by location id. Both maps must cover the same ids with equal
/// series lengths.
pub fn mse(
    y_true: &BTreeMap<usize, Vec<f64>>,
    y_pred: &BTreeMap<usize, Vec<f64>>,
) -> Result<MseReport> {
    if y_true.len() != y_pred.len() {
        return Err(CoreError::dimension(
            "mse",
            format!("{} true locations", y_true.len()),
            format!("{} predicted locations", y_pred.len()),
        ));
    }
    if y_true.is_empty() {
        return Err(CoreError::Contract("mse needs at least one location".into()));
    }
    let mut per_location = BTreeMap::new();
    for (&l, t) in y_true {
        let p = y_pred.get(&l).ok_or_else(|| {
            CoreError::Contract(format!("mse: predicted set is missing location {l}"))
        })?;
        if t.len() != p.len() || t.is_empty() {
            return Err(CoreError::dimension(
                "mse series",
                format!("location {l}: true len {}", t.len()),
                format!("pred len {}", p.len()),
            ));
        }
        let s: f64 = t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        per_location.insert(l, s / t.len() as f64);
    }
    let aggregate = per_location.values().sum::<f64>() / per_location.len() as f64;
    Ok(MseReport { per_location, aggregate })
}

// ---------------------------------------------------------------------------
// Average neighbor distance
// ---------------------------------------------------------------------------

/// Mean Euclidean latent distance from each field entry's mean to the latent
/// means of its `k` geographically nearest observed neighbors (same neighbor
/// rules as feature construction: great-circle distance, ties to the lower
/// id, self excluded).
pub fn avg_neighbor_distance(
    field: &LatentField,
    observed_ids: &[usize],
    coords: &[(f64, f64)],
    k: usize,
) -> Result<BTreeMap<usize, f64>> {
    if k == 0 {
        return Err(CoreError::Contract("avg_neighbor_distance needs k >= 1".into()));
    }
    if observed_ids.len() < k {
        return Err(CoreError::Contract(format!(
            "avg_neighbor_distance needs at least k={k} observed locations, got {}",
            observed_ids.len()
        )));
    }
    for &o in observed_ids {
        if field.get(o).is_none() {
            return Err(CoreError::Contract(format!(
                "observed location {o} has no latent field entry"
            )));
        }
    }
    let mut out = BTreeMap::new();
    for (&id, (mean, _)) in &field.entries {
        let neighbors = nearest_observed_neighbors(id, observed_ids, coords, k)?;
        let total: f64 = neighbors
            .iter()
            .map(|&n| euclid(mean, &field.entries[&n].0))
            .sum();
        out.insert(id, total / k as f64);
    }
    Ok(out)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Latent fragmentation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FragmentationScore {
    /// Mean over probe locations of the across-realization sample variance
    /// of that location's latents.
    pub within_location: f64,
    /// Mean over realizations of the across-location sample variance of
    /// that realization's latents.
    pub across_location: f64,
    /// within_location / across_location; higher means embeddings cluster
    /// by realization identity rather than by shared location structure.
    pub ratio: f64,
}

/// Sample variance of a set of latent vectors: mean squared deviation from
/// the centroid with an n-1 denominator, summed over coordinates.
pub fn latent_sample_variance(latents: &[Vec<f64>]) -> Result<f64> {
    let n = latents.len();
    if n < 2 {
        return Err(CoreError::Contract(format!(
            "sample variance needs at least 2 vectors, got {n}"
        )));
    }
    let d = latents[0].len();
    if latents.iter().any(|z| z.len() != d) {
        return Err(CoreError::Contract("latent vectors have mixed lengths".into()));
    }
    let mut centroid = vec![0.0; d];
    for z in latents {
        for (c, v) in centroid.iter_mut().zip(z) {
            *c += v;
        }
    }
    for c in centroid.iter_mut() {
        *c /= n as f64;
    }
    let ss: f64 = latents
        .iter()
        .map(|z| z.iter().zip(&centroid).map(|(v, c)| (v - c) * (v - c)).sum::<f64>())
        .sum();
    Ok(ss / (n - 1) as f64)
}

/// Fragmentation of a latent embedding: `latents[r][p]` is the latent mean
/// of realization `r` at probe location `p`. Needs at least two realizations
/// and two probes.
pub fn fragmentation_score(latents: &[Vec<Vec<f64>>]) -> Result<FragmentationScore> {
    let n_r = latents.len();
    if n_r < 2 {
        return Err(CoreError::Contract(format!(
            "fragmentation needs at least 2 realizations, got {n_r}"
        )));
    }
    let n_p = latents[0].len();
    if n_p < 2 {
        return Err(CoreError::Contract(format!(
            "fragmentation needs at least 2 probe locations, got {n_p}"
        )));
    }
    if latents.iter().any(|per_r| per_r.len() != n_p) {
        return Err(CoreError::Contract(
            "fragmentation: realizations cover different probe counts".into(),
        ));
    }
    let mut within = 0.0;
    for p in 0..n_p {
        let column: Vec<Vec<f64>> = latents.iter().map(|per_r| per_r[p].clone()).collect();
        within += latent_sample_variance(&column)?;
    }
    within /= n_p as f64;
    let mut across = 0.0;
    for per_r in latents {
        across += latent_sample_variance(per_r)?;
    }
    across /= n_r as f64;
    if across <= 0.0 {
        return Err(CoreError::Numerical(
            "fragmentation: latents are constant across locations".into(),
        ));
    }
    Ok(FragmentationScore { within_location: within, across_location: across, ratio: within / across })
}

/// Encoder means at the probe locations for a set of per-realization models,
/// each encoding its own realization's series.
pub fn probe_latents_per_realization(
    models: &[&CvaeModel],
    data: &EnsembleDataset,
    probes: &[usize],
) -> Result<Vec<Vec<Vec<f64>>>> {
    models
        .iter()
        .map(|m| probe_latents_for_realization(m, data, m.realization_id, probes))
        .collect()
}

/// Encoder means at the probe locations for one shared model applied to each
/// listed realization's series.
pub fn probe_latents_joint(
    model: &CvaeModel,
    data: &EnsembleDataset,
    realizations: &[usize],
    probes: &[usize],
) -> Result<Vec<Vec<Vec<f64>>>> {
    realizations
        .iter()
        .map(|&r| probe_latents_for_realization(model, data, r, probes))
        .collect()
}

fn probe_latents_for_realization(
    model: &CvaeModel,
    data: &EnsembleDataset,
    realization: usize,
    probes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let meta = data.meta();
    if realization >= meta.n_realizations {
        return Err(CoreError::Contract(format!(
            "realization {realization} outside ensemble of {}",
            meta.n_realizations
        )));
    }
    probes
        .iter()
        .map(|&p| {
            if p >= meta.n_locations {
                return Err(CoreError::Contract(format!(
                    "probe location {p} outside grid of {}",
                    meta.n_locations
                )));
            }
            let x = data.location_features(p);
            Ok(model.encode(&x, data.series(realization, p))?.mu)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Rank correlation
// ---------------------------------------------------------------------------

/// Average ranks (ties share the mean of the positions they span), 1-based.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CoreError::dimension(
            "spearman",
            format!("{}", x.len()),
            format!("{}", y.len()),
        ));
    }
    if x.len() < 2 {
        return Err(CoreError::Contract("spearman needs at least 2 points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(CoreError::Numerical("spearman input is not finite".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoreError::Numerical(
            "spearman: one input has fully tied ranks".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationReport {
    /// Distance threshold; locations strictly above it enter the correlation.
    pub threshold: f64,
    pub n_used: usize,
    pub spearman: f64,
}

/// Spearman correlation between per-location error and neighbor distance,
/// restricted to locations whose distance exceeds the threshold (default:
/// the median distance over all locations considered).
pub fn error_distance_association(
    per_location_mse: &BTreeMap<usize, f64>,
    neighbor_distance: &BTreeMap<usize, f64>,
    threshold: Option<f64>,
) -> Result<AssociationReport> {
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for (&l, &d) in neighbor_distance {
        if let Some(&e) = per_location_mse.get(&l) {
            pairs.push((d, e));
        }
    }
    if pairs.len() < 2 {
        return Err(CoreError::Contract(format!(
            "association needs at least 2 shared locations, got {}",
            pairs.len()
        )));
    }
    let threshold = match threshold {
        Some(t) => t,
        None => {
            let mut d: Vec<f64> = pairs.iter().map(|&(d, _)| d).collect();
            d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            let n = d.len();
            if n % 2 == 1 {
                d[n / 2]
            } else {
                0.5 * (d[n / 2 - 1] + d[n / 2])
            }
        }
    };
    let kept: Vec<(f64, f64)> = pairs.into_iter().filter(|&(d, _)| d > threshold).collect();
    if kept.len() < 2 {
        return Err(CoreError::Contract(format!(
            "association: only {} locations above threshold {threshold}",
            kept.len()
        )));
    }
    let ds: Vec<f64> = kept.iter().map(|&(d, _)| d).collect();
    let es: Vec<f64> = kept.iter().map(|&(_, e)| e).collect();
    Ok(AssociationReport {
        threshold,
        n_used: kept.len(),
        spearman: spearman(&es, &ds)?,
    })
}

// ---------------------------------------------------------------------------
// Moment preservation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentDelta {
    /// generated minus original temporal mean.
    pub d_mean: f64,
    /// generated minus original temporal sample std.
    pub d_std: f64,
}

fn series_moments(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let std = if y.len() > 1 {
        (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Differences of temporal mean and sample std, generated minus original.
pub fn moment_check(original: &[f64], generated: &[f64]) -> Result<MomentDelta> {
    if original.len() != generated.len() {
        return Err(CoreError::dimension(
            "moment_check",
            format!("{}", original.len()),
            format!("{}", generated.len()),
        ));
    }
    if original.is_empty() {
        return Err(CoreError::Contract("moment_check needs a nonempty series".into()));
    }
    let (mo, so) = series_moments(original);
    let (mg, sg) = series_moments(generated);
    Ok(MomentDelta { d_mean: mg - mo, d_std: sg - so })
}

/// Moment deltas per probe location over two series sets.
pub fn moment_check_set(
    original: &BTreeMap<usize, Vec<f64>>,
    generated: &BTreeMap<usize, Vec<f64>>,
    probes: &[usize],
) -> Result<BTreeMap<usize, MomentDelta>> {
    let mut out = BTreeMap::new();
    for &p in probes {
        let o = original
            .get(&p)
            .ok_or_else(|| CoreError::Contract(format!("probe {p} missing from original set")))?;
        let g = generated
            .get(&p)
            .ok_or_else(|| CoreError::Contract(format!("probe {p} missing from generated set")))?;
        out.insert(p, moment_check(o, g)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorDispersion {
    pub anchor_id: usize,
    pub realization: usize,
    /// Euclidean distance of the realization's encoder mean at the anchor
    /// from the anchor's fixed latent target.
    pub distance: f64,
}

/// One pipeline run's evaluation artifacts. Serializes losslessly to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub alpha: f64,
    pub n_train_realizations: usize,
    pub held_out_realization: usize,
    pub mse: MseReport,
    pub avg_neighbor_distance: BTreeMap<usize, f64>,
    pub fragmentation: Option<FragmentationScore>,
    pub association: Option<AssociationReport>,
    pub anchor_dispersions: Vec<AnchorDispersion>,
    pub probe_moments: BTreeMap<usize, MomentDelta>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        Ok(serde_json::from_str(text)?)
    }

    /// Mean neighbor distance over all scored locations.
    pub fn mean_neighbor_distance(&self) -> f64 {
        if self.avg_neighbor_distance.is_empty() {
            return f64::NAN;
        }
        self.avg_neighbor_distance.values().sum::<f64>() / self.avg_neighbor_distance.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn map_of(pairs: &[(usize, Vec<f64>)]) -> BTreeMap<usize, Vec<f64>> {
        pairs.iter().cloned().collect()
    }

    #[test]
    fn mse_identity_and_offset() {
        let a = map_of(&[(0, vec![1.0, 2.0]), (5, vec![-1.0, 0.5])]);
        let r = mse(&a, &a).unwrap();
        assert_eq!(r.aggregate, 0.0);
        assert!(r.per_location.values().all(|&v| v == 0.0));

        let b: BTreeMap<usize, Vec<f64>> = a
            .iter()
            .map(|(&l, y)| (l, y.iter().map(|v| v + 3.0).collect()))
            .collect();
        let r = mse(&a, &b).unwrap();
        for &v in r.per_location.values() {
            assert_relative_eq!(v, 9.0, epsilon = 1e-12);
        }
        assert_relative_eq!(r.aggregate, 9.0, epsilon = 1e-12);
    }

    #[test]
    fn mse_matches_hand_computation() {
        let t = map_of(&[
            (1, vec![1.0, 2.0, 3.0]),
            (2, vec![0.0, 0.0, 0.0]),
            (7, vec![-1.0, 1.0, -1.0]),
        ]);
        let p = map_of(&[
            (1, vec![1.5, 2.0, 2.0]),
            (2, vec![1.0, -1.0, 0.0]),
            (7, vec![-1.0, 1.0, 1.0]),
        ]);
        let r = mse(&t, &p).unwrap();
        // location 1: (0.25 + 0 + 1)/3, location 2: (1+1+0)/3, location 7: (0+0+4)/3
        assert_relative_eq!(r.per_location[&1], 1.25 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(r.per_location[&2], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(r.per_location[&7], 4.0 / 3.0, epsilon = 1e-15);
        let want = (1.25 / 3.0 + 2.0 / 3.0 + 4.0 / 3.0) / 3.0;
        assert_relative_eq!(r.aggregate, want, epsilon = 1e-15);
        assert_relative_eq!(
            r.aggregate,
            r.per_location.values().sum::<f64>() / 3.0,
            epsilon = 0.0
        );
    }

    #[test]
    fn mse_is_symmetric_and_checks_indices() {
        let t = map_of(&[(0, vec![1.0, 4.0]), (1, vec![2.0, 2.0])]);
        let p = map_of(&[(0, vec![0.0, 1.0]), (1, vec![5.0, 2.0])]);
        let a = mse(&t, &p).unwrap();
        let b = mse(&p, &t).unwrap();
        assert_eq!(a, b);

        let bad = map_of(&[(0, vec![0.0, 1.0]), (2, vec![5.0, 2.0])]);
        assert!(mse(&t, &bad).is_err());
        let short = map_of(&[(0, vec![0.0]), (1, vec![5.0, 2.0])]);
        assert!(mse(&t, &short).is_err());
    }

    #[test]
    fn neighbor_distance_basics() {
        // Square grid of 4 locations; equal latents everywhere -> 0.
        let coords = vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (0.0, 5.0)];
        let mut field = LatentField::new(2);
        for id in 0..4 {
            field.insert(id, vec![2.0, -1.0], vec![0.0, 0.0]).unwrap();
        }
        let d = avg_neighbor_distance(&field, &[0, 1, 2, 3], &coords, 2).unwrap();
        assert!(d.values().all(|&v| v == 0.0));

        // k=1: distance to the single nearest observed neighbor's latent.
        let mut field = LatentField::new(1);
        field.insert(0, vec![1.0], vec![0.0]).unwrap();
        field.insert(1, vec![4.0], vec![0.0]).unwrap();
        field.insert(3, vec![9.0], vec![0.0]).unwrap();
        let d = avg_neighbor_distance(&field, &[0, 1], &coords, 1).unwrap();
        assert_eq!(d[&0], 3.0);
        assert_eq!(d[&1], 3.0);
        // location 3 is nearer to 1 than to 0 geographically.
        assert_eq!(d[&3], 5.0);

        assert!(avg_neighbor_distance(&field, &[0], &coords, 2).is_err());
    }

    #[test]
    fn neighbor_distance_matches_brute_force() {
        // 25 pseudo-random latents on a 5x5 degree grid.
        let mut coords = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                coords.push((10.0 + i as f64, 20.0 + j as f64));
            }
        }
        let mut field = LatentField::new(3);
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for id in 0..25 {
            field.insert(id, vec![next(), next(), next()], vec![0.0; 3]).unwrap();
        }
        let observed: Vec<usize> = (0..25).step_by(2).collect();
        let k = 3;
        let got = avg_neighbor_distance(&field, &observed, &coords, k).unwrap();
        for id in 0..25 {
            let mut ranked: Vec<(f64, usize)> = observed
                .iter()
                .filter(|&&o| o != id)
                .map(|&o| (crate::ensemble::haversine_km(coords[id], coords[o]), o))
                .collect();
            ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (zm, _) = field.get(id).unwrap();
            let want: f64 = ranked[..k]
                .iter()
                .map(|&(_, o)| {
                    let (om, _) = field.get(o).unwrap();
                    zm.iter().zip(om).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                })
                .sum::<f64>()
                / k as f64;
            assert_relative_eq!(got[&id], want, epsilon = 1e-15);
        }
    }

    #[test]
    fn fragmentation_zero_when_realizations_agree() {
        let per_r = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 4.0]];
        let latents = vec![per_r.clone(), per_r.clone()];
        let s = fragmentation_score(&latents).unwrap();
        assert_eq!(s.within_location, 0.0);
        assert_eq!(s.ratio, 0.0);
        assert!(s.across_location > 0.0);
    }

    #[test]
    fn two_point_variance_is_half_squared_distance() {
        let u = vec![1.0, -2.0, 0.5];
        let v = vec![-1.0, 4.0, 2.5];
        let d2: f64 = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
        let got = latent_sample_variance(&[u, v]).unwrap();
        assert_relative_eq!(got, d2 / 2.0, epsilon = 1e-15);
        assert!(latent_sample_variance(&[vec![1.0]]).is_err());
    }

    #[test]
    fn fragmentation_is_rotation_invariant() {
        let latents = vec![
            vec![vec![1.0, 0.2], vec![-0.5, 1.5], vec![2.0, -1.0]],
            vec![vec![0.8, 0.1], vec![-0.2, 1.2], vec![2.2, -0.7]],
        ];
        let base = fragmentation_score(&latents).unwrap();
        let theta: f64 = 0.73;
        let (c, s) = (theta.cos(), theta.sin());
        let rotated: Vec<Vec<Vec<f64>>> = latents
            .iter()
            .map(|per_r| {
                per_r
                    .iter()
                    .map(|z| vec![c * z[0] - s * z[1], s * z[0] + c * z[1]])
                    .collect()
            })
            .collect();
        let rot = fragmentation_score(&rotated).unwrap();
        assert_relative_eq!(base.ratio, rot.ratio, max_relative = 1e-12);
        assert_relative_eq!(base.within_location, rot.within_location, max_relative = 1e-12);
    }

    #[test]
    fn fragmentation_requires_two_realizations() {
        let one = vec![vec![vec![1.0], vec![2.0]]];
        let err = fragmentation_score(&one).unwrap_err();
        assert!(err.to_string().contains("2 realizations"), "{err}");
    }

    #[test]
    fn spearman_known_values() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let y = vec![10.0, 20.0, 25.0, 40.0, 100.0];
        assert_relative_eq!(spearman(&x, &y).unwrap(), 1.0, epsilon = 1e-15);
        let rev: Vec<f64> = y.iter().rev().cloned().collect();
        assert_relative_eq!(spearman(&x, &rev).unwrap(), -1.0, epsilon = 1e-15);

        // Hand-computed example with a tie: x ranks (1, 2.5, 2.5, 4),
        // y ranks (2, 1, 3, 4).
        let x = vec![1.0, 5.0, 5.0, 9.0];
        let y = vec![3.0, 1.0, 6.0, 8.0];
        let rx = [1.0, 2.5, 2.5, 4.0];
        let ry = [2.0, 1.0, 3.0, 4.0];
        let mx = 2.5;
        let my = 2.5;
        let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
        let syy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
        let want = sxy / (sxx * syy).sqrt();
        assert_relative_eq!(spearman(&x, &y).unwrap(), want, epsilon = 1e-15);

        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn association_filters_above_median() {
        let mut errs = BTreeMap::new();
        let mut dists = BTreeMap::new();
        // Distances 1..=6; median 3.5; locations 4,5,6 remain. Their errors
        // increase with distance, so the correlation is exactly 1.
        for l in 1..=6usize {
            dists.insert(l, l as f64);
            errs.insert(l, if l > 3 { l as f64 * 10.0 } else { 100.0 - l as f64 });
        }
        let a = error_distance_association(&errs, &dists, None).unwrap();
        assert_eq!(a.n_used, 3);
        assert_relative_eq!(a.threshold, 3.5, epsilon = 1e-15);
        assert_relative_eq!(a.spearman, 1.0, epsilon = 1e-15);

        // Explicit threshold keeps everything.
        let a = error_distance_association(&errs, &dists, Some(0.0)).unwrap();
        assert_eq!(a.n_used, 6);
    }

    #[test]
    fn moment_check_identity_and_shift() {
        let y = vec![1.0, 3.0, -2.0, 0.5, 4.0];
        let d = moment_check(&y, &y).unwrap();
        assert_eq!(d.d_mean, 0.0);
        assert_eq!(d.d_std, 0.0);

        let shifted: Vec<f64> = y.iter().map(|v| v + 2.5).collect();
        let d = moment_check(&y, &shifted).unwrap();
        assert_relative_eq!(d.d_mean, 2.5, epsilon = 1e-12);
        assert_relative_eq!(d.d_std, 0.0, epsilon = 1e-12);

        assert!(moment_check(&y, &y[..3].to_vec()).is_err());
    }

    #[test]
    fn eval_report_round_trips_losslessly() {
        let mut per_location = BTreeMap::new();
        per_location.insert(0usize, 1.0 / 3.0);
        per_location.insert(9usize, 2.0_f64.sqrt());
        let report = EvalReport {
            config_hash: "abc123".into(),
            seed: 17,
            alpha: 0.7,
            n_train_realizations: 4,
            held_out_realization: 9,
            mse: MseReport { aggregate: (1.0 / 3.0 + 2.0_f64.sqrt()) / 2.0, per_location },
            avg_neighbor_distance: [(0usize, 0.125), (9usize, 1e-17)].into_iter().collect(),
            fragmentation: Some(FragmentationScore {
                within_location: 0.25,
                across_location: 2.0,
                ratio: 0.125,
            }),
            association: Some(AssociationReport { threshold: 0.5, n_used: 2, spearman: -0.25 }),
            anchor_dispersions: vec![AnchorDispersion { anchor_id: 3, realization: 1, distance: 0.499 }],
            probe_moments: [(4usize, MomentDelta { d_mean: -0.01, d_std: 1e-300 })]
                .into_iter()
                .collect(),
        };
        let text = report.to_json().unwrap();
        let back = EvalReport::from_json(&text).unwrap();
        assert_eq!(back, report);
        assert_relative_eq!(report.mean_neighbor_distance(), (0.125 + 1e-17) / 2.0, epsilon = 0.0);
    }
}
