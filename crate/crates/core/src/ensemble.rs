//! Ensemble data model: multi-realization gridded monthly series,
//! a deterministic synthetic generator, the ENSB flat file format,
//! per-location normalization, and coverage masking.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::rng::Xoshiro;

pub const ENSB_MAGIC: &[u8; 4] = b"ENSB";
pub const ENSB_VERSION: u32 = 1;

/// Environment variable naming a directory where generated datasets
/// may be cached and reused across CLI invocations.
pub const CACHE_DIR_ENV: &str = "ENSEMBLEGEN_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EnsembleMeta {
    pub n_realizations: usize,
    pub n_locations: usize,
    pub n_timesteps: usize,
    pub start_year: i32,
}

/// Immutable multi-realization dataset.
///
/// `values` is laid out realization-major: index (r, l, t) lives at
/// `(r * L + l) * T + t`. Values are kept as `f64` in memory but are
/// always exactly representable as `f32`, which is what the ENSB file
/// stores; the synthetic generator rounds through `f32` on purpose so
/// that save -> load is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDataset {
    meta: EnsembleMeta,
    /// Per-location (latitude, longitude) in degrees.
    coords: Vec<(f64, f64)>,
    values: Vec<f64>,
}

impl EnsembleDataset {
    pub fn new(meta: EnsembleMeta, coords: Vec<(f64, f64)>, values: Vec<f64>) -> Result<Self> {
        let (r, l, t) = (meta.n_realizations, meta.n_locations, meta.n_timesteps);
        if r == 0 || l == 0 || t == 0 {
            return Err(CoreError::Contract(format!(
                "dataset dimensions must be positive, got R={r}, L={l}, T={t}"
            )));
        }
        if coords.len() != l {
            return Err(CoreError::dimension(
                "dataset coords",
                format!("{} coords", coords.len()),
                format!("{l} locations"),
            ));
        }
        if values.len() != r * l * t {
            return Err(CoreError::dimension(
                "dataset values",
                format!("{} values", values.len()),
                format!("{r}x{l}x{t}"),
            ));
        }
        let ds = EnsembleDataset { meta, coords, values };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let (r_n, l_n, t_n) = (
            self.meta.n_realizations,
            self.meta.n_locations,
            self.meta.n_timesteps,
        );
        for (i, &(lat, lon)) in self.coords.iter().enumerate() {
            if !(-90.0..=90.0).contains(&lat) || !(-180.0..180.0).contains(&lon) {
                return Err(CoreError::Contract(format!(
                    "location {i} has out-of-range coordinates ({lat}, {lon})"
                )));
            }
        }
        // Coordinates must be unique; exact comparison is intended
        // since grids are constructed, not measured.
        let mut seen: Vec<(u64, u64)> = self
            .coords
            .iter()
            .map(|&(a, b)| (a.to_bits(), b.to_bits()))
            .collect();
        seen.sort_unstable();
        for w in seen.windows(2) {
            if w[0] == w[1] {
                let (lat, lon) = (f64::from_bits(w[0].0), f64::from_bits(w[0].1));
                return Err(CoreError::Contract(format!(
                    "duplicate location coordinates ({lat}, {lon})"
                )));
            }
        }
        for r in 0..r_n {
            for l in 0..l_n {
                let base = (r * l_n + l) * t_n;
                for t in 0..t_n {
                    if !self.values[base + t].is_finite() {
                        return Err(CoreError::Contract(format!(
                            "non-finite value at realization {r}, location {l}, month {t}"
                        )));
                    }
                }
            }
        }
        // Constant series (zero variance pooled over realizations and
        // months) would make z-scoring impossible; reject them early.
        for l in 0..l_n {
            let first = self.value(0, l, 0);
            let mut constant = true;
            'outer: for r in 0..r_n {
                for t in 0..t_n {
                    if self.value(r, l, t) != first {
                        constant = false;
                        break 'outer;
                    }
                }
            }
            if constant {
                return Err(CoreError::Contract(format!(
                    "location {l} has a constant series across all realizations and months"
                )));
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> EnsembleMeta {
        self.meta
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    #[inline]
    pub fn value(&self, r: usize, l: usize, t: usize) -> f64 {
        self.values[(r * self.meta.n_locations + l) * self.meta.n_timesteps + t]
    }

    /// The full monthly series for (realization, location).
    pub fn series(&self, r: usize, l: usize) -> &[f64] {
        let t_n = self.meta.n_timesteps;
        let base = (r * self.meta.n_locations + l) * t_n;
        &self.values[base..base + t_n]
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }

    /// d_x = 3 conditioning features for a location: latitude scaled
    /// to [-1, 1] plus a continuous longitude encoding with no seam
    /// at the date line.
    pub fn location_features(&self, l: usize) -> [f64; 3] {
        let (lat, lon) = self.coords[l];
        location_features(lat, lon)
    }

    /// (x, y) training pairs for one realization at the given
    /// locations: x is the feature triple, y the full series.
    pub fn training_pairs(
        &self,
        r: usize,
        location_ids: &[usize],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if r >= self.meta.n_realizations {
            return Err(CoreError::Contract(format!(
                "realization {r} out of range ({} realizations)",
                self.meta.n_realizations
            )));
        }
        let mut xs = Vec::with_capacity(location_ids.len());
        let mut ys = Vec::with_capacity(location_ids.len());
        for &l in location_ids {
            if l >= self.meta.n_locations {
                return Err(CoreError::Contract(format!(
                    "location {l} out of range ({} locations)",
                    self.meta.n_locations
                )));
            }
            xs.push(self.location_features(l).to_vec());
            ys.push(self.series(r, l).to_vec());
        }
        Ok((xs, ys))
    }

    pub fn save_ensb(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::with_capacity(
            24 + self.coords.len() * 16 + self.values.len() * 4,
        );
        buf.extend_from_slice(ENSB_MAGIC);
        buf.extend_from_slice(&ENSB_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.meta.n_realizations as u32).to_le_bytes());
        buf.extend_from_slice(&(self.meta.n_locations as u32).to_le_bytes());
        buf.extend_from_slice(&(self.meta.n_timesteps as u32).to_le_bytes());
        buf.extend_from_slice(&self.meta.start_year.to_le_bytes());
        for &(lat, lon) in &self.coords {
            buf.extend_from_slice(&lat.to_le_bytes());
            buf.extend_from_slice(&lon.to_le_bytes());
        }
        for &v in &self.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load_ensb(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_ensb_bytes(&bytes)
    }

    pub fn from_ensb_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |offset: u64, n: usize, what: &str, bytes: &[u8]| -> Result<()> {
            if (offset as usize) + n > bytes.len() {
                Err(CoreError::format(
                    offset,
                    format!(
                        "truncated while reading {what}: need {} bytes, file has {}",
                        offset as usize + n,
                        bytes.len()
                    ),
                ))
            } else {
                Ok(())
            }
        };
        need(0, 8, "header", bytes)?;
        if &bytes[0..4] != ENSB_MAGIC {
            return Err(CoreError::format(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != ENSB_VERSION {
            return Err(CoreError::format(
                4,
                format!("unsupported version {version}, expected {ENSB_VERSION}"),
            ));
        }
        need(8, 16, "dimensions", bytes)?;
        let r = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let l = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let t = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let start_year = i32::from_le_bytes(bytes[20..24].try_into().unwrap());

        let coords_bytes = l
            .checked_mul(16)
            .ok_or_else(|| CoreError::format(8, "dimension overflow"))?;
        need(24, coords_bytes, "coordinates", bytes)?;
        let mut coords = Vec::with_capacity(l);
        for i in 0..l {
            let off = 24 + i * 16;
            let lat = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            let lon = f64::from_le_bytes(bytes[off + 8..off + 16].try_into().unwrap());
            coords.push((lat, lon));
        }

        let values_off = 24 + coords_bytes;
        let n_values = r
            .checked_mul(l)
            .and_then(|x| x.checked_mul(t))
            .ok_or_else(|| CoreError::format(8, "dimension overflow"))?;
        let expected = values_off + n_values * 4;
        if bytes.len() != expected {
            return Err(CoreError::format(
                values_off as u64,
                format!("expected file length {expected}, got {}", bytes.len()),
            ));
        }
        let mut values = Vec::with_capacity(n_values);
        for i in 0..n_values {
            let off = values_off + i * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                let rr = i / (l * t);
                let ll = (i / t) % l;
                let tt = i % t;
                return Err(CoreError::format(
                    off as u64,
                    format!("non-finite value at realization {rr}, location {ll}, month {tt}"),
                ));
            }
            values.push(v as f64);
        }

        let meta = EnsembleMeta {
            n_realizations: r,
            n_locations: l,
            n_timesteps: t,
            start_year,
        };
        // Structural invariants (coords, constant series) are checked
        // by the constructor; it reports Contract errors which the CLI
        // maps differently from truncation, matching their cause.
        EnsembleDataset::new(meta, coords, values)
    }
}

/// d_x = 3 features: (lat/90, sin lon, cos lon). All components lie in
/// [-1, 1] and the longitude pair is continuous across the +-180 seam.
pub fn location_features(lat_deg: f64, lon_deg: f64) -> [f64; 3] {
    let lon = lon_deg.to_radians();
    [lat_deg / 90.0, lon.sin(), lon.cos()]
}

/// Great-circle distance in kilometers between two (lat, lon) points
/// in degrees, haversine form, Earth radius 6371 km.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().min(1.0).asin()
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_realizations: usize,
    /// Locations form a grid_side x grid_side grid.
    pub grid_side: usize,
    pub n_timesteps: usize,
    pub seed: u64,
    /// Additive linear trend, data units per decade (120 months).
    pub trend_per_decade: f64,
    /// Base amplitude of the annual cycle, modulated by latitude.
    pub seasonal_amp: f64,
    /// Marginal standard deviation of the realization-specific noise.
    pub noise_sigma: f64,
    /// Width (in grid cells) of the Gaussian kernel that spatially
    /// correlates the noise. 0 disables smoothing.
    pub spatial_corr_len: f64,
    pub start_year: i32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_realizations: 10,
            grid_side: 16,
            n_timesteps: 240,
            seed: 42,
            trend_per_decade: 0.3,
            seasonal_amp: 5.0,
            noise_sigma: 0.8,
            spatial_corr_len: 2.0,
            start_year: 1979,
        }
    }
}

/// The deterministic (noise-free) component of the synthetic field.
///
/// base(x)   = 10 + 15 cos(lat) + 3 sin(2 lon)
/// amp(x)    = seasonal_amp * (0.3 + 0.7 sin^2(lat))
/// phase(x)  = lon + lat (radians)
/// y(x, t)   = base + trend_per_decade * t/120 + amp * sin(2 pi t/12 + phase)
pub fn synthetic_deterministic(cfg: &SyntheticConfig, lat_deg: f64, lon_deg: f64, t: usize) -> f64 {
    let lat = lat_deg.to_radians();
    let lon = lon_deg.to_radians();
    let base = 10.0 + 15.0 * lat.cos() + 3.0 * (2.0 * lon).sin();
    let amp = cfg.seasonal_amp * (0.3 + 0.7 * lat.sin() * lat.sin());
    let phase = lon + lat;
    let tf = t as f64;
    base + cfg.trend_per_decade * tf / 120.0
        + amp * (2.0 * std::f64::consts::PI * tf / 12.0 + phase).sin()
}

/// Grid coordinates for cell (i, j) on a grid_side x grid_side grid.
/// Latitudes span (-60, 60) and longitudes (-180, 180), cell-centered.
/// Location id is row-major: id = i * grid_side + j.
pub fn synthetic_grid_coords(grid_side: usize) -> Vec<(f64, f64)> {
    let g = grid_side as f64;
    let mut coords = Vec::with_capacity(grid_side * grid_side);
    for i in 0..grid_side {
        for j in 0..grid_side {
            let lat = -60.0 + 120.0 * (i as f64 + 0.5) / g;
            let lon = -180.0 + 360.0 * (j as f64 + 0.5) / g;
            coords.push((lat, lon));
        }
    }
    coords
}

/// Deterministic synthetic ensemble.
///
/// Each realization shares the deterministic component and adds its own
/// spatially correlated noise: per month, a white Gaussian field on the
/// grid is convolved (with toroidal wrap) against a separable Gaussian
/// kernel normalized to unit l2 norm, so the marginal standard
/// deviation of the noise is exactly `noise_sigma`. Values are rounded
/// through f32 so that ENSB round-trips are the identity.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<EnsembleDataset> {
    if cfg.n_realizations == 0 || cfg.grid_side == 0 || cfg.n_timesteps == 0 {
        return Err(CoreError::Contract(format!(
            "synthetic dimensions must be positive, got R={}, grid={}, T={}",
            cfg.n_realizations, cfg.grid_side, cfg.n_timesteps
        )));
    }
    if cfg.noise_sigma < 0.0 || cfg.spatial_corr_len < 0.0 {
        return Err(CoreError::Contract(
            "noise_sigma and spatial_corr_len must be non-negative".into(),
        ));
    }
    let g = cfg.grid_side;
    let l_n = g * g;
    let t_n = cfg.n_timesteps;
    let coords = synthetic_grid_coords(g);

    // Deterministic component, shared by every realization.
    let mut det = vec![0.0_f64; l_n * t_n];
    for (l, &(lat, lon)) in coords.iter().enumerate() {
        for t in 0..t_n {
            det[l * t_n + t] = synthetic_deterministic(cfg, lat, lon, t);
        }
    }

    // Radius capped so the kernel never wraps onto itself on the
    // torus; self-overlap would break the unit-variance property of
    // the l2 normalization.
    let max_radius = (g - 1) / 2;
    let kernel = gaussian_kernel_1d(cfg.spatial_corr_len, max_radius);
    let mut values = vec![0.0_f64; cfg.n_realizations * l_n * t_n];
    let mut white = vec![0.0_f64; l_n];
    let mut smooth = vec![0.0_f64; l_n];
    for r in 0..cfg.n_realizations {
        let mut rng = Xoshiro::stream(cfg.seed, &format!("noise/{r}"));
        for t in 0..t_n {
            if cfg.noise_sigma > 0.0 {
                for w in white.iter_mut() {
                    *w = rng.normal();
                }
                convolve_toroidal_separable(&white, &mut smooth, g, &kernel);
            } else {
                smooth.fill(0.0);
            }
            for l in 0..l_n {
                let v = det[l * t_n + t] + cfg.noise_sigma * smooth[l];
                values[(r * l_n + l) * t_n + t] = v as f32 as f64;
            }
        }
    }

    let meta = EnsembleMeta {
        n_realizations: cfg.n_realizations,
        n_locations: l_n,
        n_timesteps: t_n,
        start_year: cfg.start_year,
    };
    EnsembleDataset::new(meta, coords, values)
}

/// 1-D Gaussian taps at integer offsets, truncated at 3 sigma (or at
/// `max_radius`, whichever is smaller) and normalized to unit l2 norm.
/// The 2-D kernel is the outer product of this vector with itself, so
/// its Frobenius norm is also 1 and white noise keeps unit marginal
/// variance through the convolution.
fn gaussian_kernel_1d(corr_len: f64, max_radius: usize) -> Vec<f64> {
    if corr_len <= 0.0 || max_radius == 0 {
        return vec![1.0];
    }
    let radius = ((3.0 * corr_len).ceil() as i64).min(max_radius as i64);
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * corr_len * corr_len)).exp())
        .collect();
    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in k.iter_mut() {
        *v /= norm;
    }
    k
}

/// Separable 2-D convolution with toroidal wrap on a g x g grid.
fn convolve_toroidal_separable(input: &[f64], output: &mut [f64], g: usize, kernel: &[f64]) {
    let radius = (kernel.len() / 2) as i64;
    let gi = g as i64;
    let mut tmp = vec![0.0_f64; g * g];
    // Rows.
    for i in 0..g {
        for j in 0..g as i64 {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let jj = (j + ki as i64 - radius).rem_euclid(gi) as usize;
                acc += kv * input[i * g + jj];
            }
            tmp[i * g + j as usize] = acc;
        }
    }
    // Columns.
    for i in 0..g as i64 {
        for j in 0..g {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let ii = (i + ki as i64 - radius).rem_euclid(gi) as usize;
                acc += kv * tmp[ii * g + j];
            }
            output[i as usize * g + j] = acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Per-location z-score pooled over training realizations and months.
    ZScore,
    /// Subtract per-(location, calendar month) climatology, then scale
    /// by the per-location std of the anomalies.
    Anomaly,
}

/// Normalization statistics, computed from training realizations only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mode: NormMode,
    /// ZScore: one mean per location. Anomaly: 12 means per location
    /// (location-major: index l * 12 + month).
    pub mean: Vec<f64>,
    /// One std per location in both modes.
    pub std: Vec<f64>,
}

impl NormStats {
    #[inline]
    pub fn normalize_value(&self, l: usize, t: usize, v: f64) -> f64 {
        (v - self.mean_at(l, t)) / self.std[l]
    }

    #[inline]
    pub fn denormalize_value(&self, l: usize, t: usize, v: f64) -> f64 {
        v * self.std[l] + self.mean_at(l, t)
    }

    #[inline]
    fn mean_at(&self, l: usize, t: usize) -> f64 {
        match self.mode {
            NormMode::ZScore => self.mean[l],
            NormMode::Anomaly => self.mean[l * 12 + t % 12],
        }
    }
}

/// Compute per-location statistics over the given training realizations
/// and return the normalized dataset plus the stats. Only training
/// realizations contribute to the statistics; all realizations are
/// transformed with them.
pub fn normalize(
    dataset: &EnsembleDataset,
    training_realizations: &[usize],
    mode: NormMode,
) -> Result<(EnsembleDataset, NormStats)> {
    let meta = dataset.meta();
    if training_realizations.is_empty() {
        return Err(CoreError::Contract("normalize requires at least one training realization".into()));
    }
    for &r in training_realizations {
        if r >= meta.n_realizations {
            return Err(CoreError::Contract(format!(
                "training realization {r} out of range (R={})",
                meta.n_realizations
            )));
        }
    }
    if mode == NormMode::Anomaly && meta.n_timesteps < 12 {
        return Err(CoreError::Contract(format!(
            "anomaly normalization needs at least 12 months, got {}",
            meta.n_timesteps
        )));
    }
    let (l_n, t_n) = (meta.n_locations, meta.n_timesteps);
    let n_train = training_realizations.len();

    let mut mean;
    let mut std = vec![0.0_f64; l_n];
    match mode {
        NormMode::ZScore => {
            mean = vec![0.0_f64; l_n];
            for l in 0..l_n {
                let mut acc = 0.0;
                for &r in training_realizations {
                    for t in 0..t_n {
                        acc += dataset.value(r, l, t);
                    }
                }
                let m = acc / (n_train * t_n) as f64;
                let mut var = 0.0;
                for &r in training_realizations {
                    for t in 0..t_n {
                        let d = dataset.value(r, l, t) - m;
                        var += d * d;
                    }
                }
                mean[l] = m;
                std[l] = (var / (n_train * t_n) as f64).sqrt();
            }
        }
        NormMode::Anomaly => {
            mean = vec![0.0_f64; l_n * 12];
            let mut counts = vec![0usize; 12];
            for t in 0..t_n {
                counts[t % 12] += 1;
            }
            for l in 0..l_n {
                let mut acc = vec![0.0_f64; 12];
                for &r in training_realizations {
                    for t in 0..t_n {
                        acc[t % 12] += dataset.value(r, l, t);
                    }
                }
                for m in 0..12 {
                    mean[l * 12 + m] = acc[m] / (n_train * counts[m]) as f64;
                }
                let mut var = 0.0;
                for &r in training_realizations {
                    for t in 0..t_n {
                        let d = dataset.value(r, l, t) - mean[l * 12 + t % 12];
                        var += d * d;
                    }
                }
                std[l] = (var / (n_train * t_n) as f64).sqrt();
            }
        }
    }
    for (l, s) in std.iter().enumerate() {
        if *s <= 0.0 || !s.is_finite() {
            return Err(CoreError::Contract(format!(
                "location {l} has zero variance over the training realizations"
            )));
        }
    }
    let stats = NormStats { mode, mean, std };

    let mut values = Vec::with_capacity(dataset.raw_values().len());
    for r in 0..meta.n_realizations {
        for l in 0..l_n {
            for t in 0..t_n {
                values.push(stats.normalize_value(l, t, dataset.value(r, l, t)));
            }
        }
    }
    // Bypass the constructor's f32-oriented validation path: normalized
    // views share the raw dataset's structure, which was already
    // validated; normalized values are genuine f64.
    let normalized = EnsembleDataset {
        meta,
        coords: dataset.coords.clone(),
        values,
    };
    Ok((normalized, stats))
}

// ---------------------------------------------------------------------------
// Coverage masks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingPolicy {
    SeededRandom,
    NeighborDistanceRank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMask {
    pub alpha: f64,
    pub policy: OrderingPolicy,
    /// Sorted ascending.
    pub observed_ids: Vec<usize>,
    /// Sorted ascending; complement of observed_ids.
    pub hidden_ids: Vec<usize>,
}

/// Inputs for the neighbor-distance ordering policy: a latent mean per
/// location plus the anchor subset distances are measured against.
pub struct LatentRanking<'a> {
    /// Latent mean for every location id (index = id).
    pub latents: &'a [Vec<f64>],
    pub anchor_ids: &'a [usize],
    pub k: usize,
}

pub fn make_coverage_mask(
    n_locations: usize,
    alpha: f64,
    policy: OrderingPolicy,
    seed: u64,
    ranking: Option<&LatentRanking>,
) -> Result<CoverageMask> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(CoreError::Contract(format!("alpha must be in (0, 1], got {alpha}")));
    }
    if n_locations == 0 {
        return Err(CoreError::Contract("empty grid".into()));
    }
    let n_observed = (alpha * n_locations as f64).ceil() as usize;
    let n_observed = n_observed.min(n_locations);

    let mut observed_ids: Vec<usize> = match policy {
        OrderingPolicy::SeededRandom => {
            let mut rng = Xoshiro::stream(seed, "coverage");
            rng.sample_indices(n_locations, n_observed)
        }
        OrderingPolicy::NeighborDistanceRank => {
            let ranking = ranking.ok_or_else(|| {
                CoreError::Contract(
                    "neighbor_distance_rank policy requires a latent map and anchor ids".into(),
                )
            })?;
            if ranking.latents.len() != n_locations {
                return Err(CoreError::dimension(
                    "coverage ranking",
                    format!("{} latents", ranking.latents.len()),
                    format!("{n_locations} locations"),
                ));
            }
            if ranking.anchor_ids.is_empty() || ranking.k == 0 {
                return Err(CoreError::Contract("ranking needs >= 1 anchor and k >= 1".into()));
            }
            let k = ranking.k.min(ranking.anchor_ids.len());
            // Mean latent distance to the k nearest anchors; the
            // easiest (smallest) fraction is observed first. Anchors
            // themselves have a zero self-distance term, so they rank
            // earliest naturally.
            let mut scored: Vec<(f64, usize)> = (0..n_locations)
                .map(|id| {
                    let mut dists: Vec<f64> = ranking
                        .anchor_ids
                        .iter()
                        .map(|&a| euclid(&ranking.latents[id], &ranking.latents[a]))
                        .collect();
                    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
                    let mean_k = dists[..k].iter().sum::<f64>() / k as f64;
                    (mean_k, id)
                })
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            scored[..n_observed].iter().map(|&(_, id)| id).collect()
        }
    };
    observed_ids.sort_unstable();
    let mut is_observed = vec![false; n_locations];
    for &id in &observed_ids {
        is_observed[id] = true;
    }
    let hidden_ids: Vec<usize> = (0..n_locations).filter(|&id| !is_observed[id]).collect();
    Ok(CoverageMask {
        alpha,
        policy,
        observed_ids,
        hidden_ids,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// CSV import
// ---------------------------------------------------------------------------

/// Import a dataset from CSV with header
/// `realization,lat,lon,month_index,value`.
///
/// Realizations must be 0..R-1 and month indices 0..T-1; locations are
/// identified by exact (lat, lon) pairs and numbered in order of first
/// appearance. Every (realization, location, month) cell must appear
/// exactly once.
pub fn import_csv(path: &Path, start_year: i32) -> Result<EnsembleDataset> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    {
        let headers = reader.headers().map_err(|e| CoreError::format(0, e.to_string()))?;
        let expected = ["realization", "lat", "lon", "month_index", "value"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(CoreError::format(
                0,
                format!("bad CSV header {got:?}, expected {expected:?}"),
            ));
        }
    }

    struct Row {
        r: usize,
        loc: usize,
        t: usize,
        v: f64,
    }
    let mut loc_ids: HashMap<(u64, u64), usize> = HashMap::new();
    let mut coords: Vec<(f64, f64)> = Vec::new();
    let mut rows: Vec<Row> = Vec::new();
    let mut max_r = 0usize;
    let mut max_t = 0usize;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CoreError::format(0, format!("row {}: {e}", line + 2)))?;
        let parse_field = |i: usize, name: &str| -> Result<&str> {
            rec.get(i).ok_or_else(|| {
                CoreError::format(0, format!("row {}: missing field {name}", line + 2))
            })
        };
        let r: usize = parse_field(0, "realization")?
            .trim()
            .parse()
            .map_err(|e| CoreError::format(0, format!("row {}: realization: {e}", line + 2)))?;
        let lat: f64 = parse_field(1, "lat")?
            .trim()
            .parse()
            .map_err(|e| CoreError::format(0, format!("row {}: lat: {e}", line + 2)))?;
        let lon: f64 = parse_field(2, "lon")?
            .trim()
            .parse()
            .map_err(|e| CoreError::format(0, format!("row {}: lon: {e}", line + 2)))?;
        let t: usize = parse_field(3, "month_index")?
            .trim()
            .parse()
            .map_err(|e| CoreError::format(0, format!("row {}: month_index: {e}", line + 2)))?;
        let v: f64 = parse_field(4, "value")?
            .trim()
            .parse()
            .map_err(|e| CoreError::format(0, format!("row {}: value: {e}", line + 2)))?;
        let key = (lat.to_bits(), lon.to_bits());
        let loc = *loc_ids.entry(key).or_insert_with(|| {
            coords.push((lat, lon));
            coords.len() - 1
        });
        max_r = max_r.max(r);
        max_t = max_t.max(t);
        rows.push(Row { r, loc, t, v });
    }
    if rows.is_empty() {
        return Err(CoreError::format(0, "CSV contains no data rows"));
    }
    let (r_n, l_n, t_n) = (max_r + 1, coords.len(), max_t + 1);
    let mut values = vec![f64::NAN; r_n * l_n * t_n];
    let mut filled = vec![false; r_n * l_n * t_n];
    for row in &rows {
        let idx = (row.r * l_n + row.loc) * t_n + row.t;
        if filled[idx] {
            return Err(CoreError::format(
                0,
                format!(
                    "duplicate cell: realization {}, location {}, month {}",
                    row.r, row.loc, row.t
                ),
            ));
        }
        filled[idx] = true;
        values[idx] = row.v as f32 as f64;
    }
    if let Some(idx) = filled.iter().position(|f| !f) {
        let rr = idx / (l_n * t_n);
        let ll = (idx / t_n) % l_n;
        let tt = idx % t_n;
        return Err(CoreError::format(
            0,
            format!("missing cell: realization {rr}, location {ll}, month {tt}"),
        ));
    }
    let meta = EnsembleMeta {
        n_realizations: r_n,
        n_locations: l_n,
        n_timesteps: t_n,
        start_year,
    };
    EnsembleDataset::new(meta, coords, values)
}
