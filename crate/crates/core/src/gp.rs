//! Gaussian process regression for latent-coordinate completion: an
//! exact RBF-kernel GP and a variational sparse approximation whose
//! collapsed evidence bound is optimized over kernel parameters and
//! inducing inputs.
//!
//! Both models optimize log-parameters with Adam using analytic
//! gradients. The exact marginal likelihood gradient is
//! (1/2) tr((alpha alpha^T - K^{-1}) dK/dtheta); the sparse bound
//! gradient flows through dKmn and dKmm with the Woodbury identity
//! keeping every intermediate at m x n or smaller. Cholesky
//! factorizations retry with a jitter ladder (1e-10 growing tenfold up
//! to 1e-4) before giving up.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{CoreError, Result};
use crate::linalg::{
    cholesky_jittered, dot, log_det_from_cholesky, matmul_a_bt, matmul_at_b, solve_cholesky,
    solve_lower, solve_lower_multi, solve_lower_transpose, solve_lower_transpose_multi, transpose,
};
use crate::optim::{adam_step, AdamConfig, AdamState};

pub const JITTER_INITIAL: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;
/// Log-parameters are kept inside this bound during optimization so a
/// divergent step cannot overflow exp().
const LOG_PARAM_BOUND: f64 = 30.0;

/// RBF kernel hyperparameters plus the observation noise variance,
/// stored as logarithms so optimization is unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelParams {
    pub log_lengthscale: f64,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl KernelParams {
    pub fn new(lengthscale: f64, signal_var: f64, noise_var: f64) -> Result<Self> {
        if !(lengthscale > 0.0 && signal_var > 0.0 && noise_var > 0.0) {
            return Err(CoreError::Contract(format!(
                "kernel parameters must be positive: lengthscale {lengthscale}, \
                 signal_var {signal_var}, noise_var {noise_var}"
            )));
        }
        Ok(KernelParams {
            log_lengthscale: lengthscale.ln(),
            log_signal_var: signal_var.ln(),
            log_noise_var: noise_var.ln(),
        })
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }
}

/// k(a, b) = signal_var * exp(-||a - b||^2 / (2 lengthscale^2)).
pub fn rbf(a: &[f64], b: &[f64], lengthscale: f64, signal_var: f64) -> f64 {
    signal_var * (-sq_dist(a, b) / (2.0 * lengthscale * lengthscale)).exp()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-major |a| x |b| matrix of squared distances.
fn sq_dist_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    let mut d = Vec::with_capacity(a.len() * b.len());
    for ai in a {
        for bj in b {
            d.push(sq_dist(ai, bj));
        }
    }
    d
}

fn kernel_from_sq_dist(d2: &[f64], lengthscale: f64, signal_var: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * lengthscale * lengthscale);
    d2.iter().map(|&v| signal_var * (-v * inv).exp()).collect()
}

/// Median pairwise distance lengthscale, target-variance signal, and 1%
/// noise floor. Degenerate inputs fall back to safe constants.
pub fn heuristic_init(x: &[Vec<f64>], t: &[f64]) -> KernelParams {
    let n = x.len();
    let mut dists = Vec::with_capacity(n.saturating_sub(1) * n / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(&x[i], &x[j]).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if dists.is_empty() {
        0.0
    } else {
        dists[dists.len() / 2]
    };
    let lengthscale = if median > 0.0 { median } else { 1.0 };

    let mean = t.iter().sum::<f64>() / t.len().max(1) as f64;
    let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len().max(1) as f64;
    let signal_var = var.max(1e-6);
    let noise_var = (0.01 * var).max(1e-8);
    KernelParams::new(lengthscale, signal_var, noise_var).expect("positive by construction")
}

fn validate_training_set(x: &[Vec<f64>], t: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return Err(CoreError::Contract("empty training set".into()));
    }
    if x.len() != t.len() {
        return Err(CoreError::dimension(
            "gp training set",
            format!("{} inputs", x.len()),
            format!("{} targets", t.len()),
        ));
    }
    let d = x[0].len();
    if d == 0 {
        return Err(CoreError::Contract("zero-dimensional features".into()));
    }
    for (i, row) in x.iter().enumerate() {
        if row.len() != d {
            return Err(CoreError::dimension(
                "gp features",
                format!("row {i} has {} dims", row.len()),
                format!("{d}"),
            ));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Contract(format!(
                "non-finite feature in row {i}"
            )));
        }
    }
    if let Some(i) = t.iter().position(|v| !v.is_finite()) {
        return Err(CoreError::Contract(format!("non-finite target at {i}")));
    }
    Ok(d)
}

// ---------------------------------------------------------------------------
// Exact GP
// ---------------------------------------------------------------------------

/// Marginal likelihood and its gradient in log-parameter space.
pub struct ExactLmlGrads {
    pub lml: f64,
    pub grad_log_lengthscale: f64,
    pub grad_log_signal_var: f64,
    pub grad_log_noise_var: f64,
    pub jitter: f64,
}

pub fn exact_lml_and_grads(
    x: &[Vec<f64>],
    t: &[f64],
    params: &KernelParams,
) -> Result<ExactLmlGrads> {
    let n = x.len();
    let (l_scale, sv, nv) = (params.lengthscale(), params.signal_var(), params.noise_var());
    let d2 = sq_dist_matrix(x, x);
    let kf = kernel_from_sq_dist(&d2, l_scale, sv);
    let mut k = kf.clone();
    for i in 0..n {
        k[i * n + i] += nv;
    }
    let (chol, jitter) = cholesky_jittered(&k, n, JITTER_INITIAL, JITTER_MAX)?;
    let alpha = solve_cholesky(&chol, t, n);
    let lml = -0.5 * dot(t, &alpha)
        - 0.5 * log_det_from_cholesky(&chol, n)
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // K^{-1} = W^T W with W = L^{-1}; S = alpha alpha^T - K^{-1}.
    let mut identity = vec![0.0; n * n];
    for i in 0..n {
        identity[i * n + i] = 1.0;
    }
    let w = solve_lower_multi(&chol, &identity, n, n);
    let kinv = matmul_at_b(&w, &w, n, n, n);

    let inv_l2 = 1.0 / (l_scale * l_scale);
    let mut g_sv = 0.0;
    let mut g_len = 0.0;
    let mut g_nv = 0.0;
    for i in 0..n {
        for j in 0..n {
            let idx = i * n + j;
            let s = alpha[i] * alpha[j] - kinv[idx];
            g_sv += s * kf[idx];
            g_len += s * kf[idx] * d2[idx] * inv_l2;
            if i == j {
                g_nv += s;
            }
        }
    }
    Ok(ExactLmlGrads {
        lml,
        grad_log_lengthscale: 0.5 * g_len,
        grad_log_signal_var: 0.5 * g_sv,
        grad_log_noise_var: 0.5 * g_nv * nv,
        jitter,
    })
}

/// Optimizer settings shared by the exact and sparse fits.
#[derive(Debug, Clone, Copy)]
pub struct GpFitOptions {
    pub opt_steps: usize,
    pub learning_rate: f64,
    /// Sparse fit only: also move the inducing inputs.
    pub optimize_inducing: bool,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        GpFitOptions {
            opt_steps: 200,
            learning_rate: 0.05,
            optimize_inducing: true,
        }
    }
}

pub struct ExactGp {
    params: KernelParams,
    train_x: Vec<Vec<f64>>,
    chol: Vec<f64>,
    alpha: Vec<f64>,
    jitter: f64,
    lml: f64,
    clamped_variances: AtomicUsize,
}

impl ExactGp {
    /// Fit kernel parameters by Adam on the marginal likelihood
    /// (`opt_steps = 0` keeps the init fixed) and cache the solve state.
    pub fn fit(
        train_x: Vec<Vec<f64>>,
        train_t: Vec<f64>,
        init: Option<KernelParams>,
        options: &GpFitOptions,
    ) -> Result<ExactGp> {
        validate_training_set(&train_x, &train_t)?;
        let mut params = init.unwrap_or_else(|| heuristic_init(&train_x, &train_t));
        if options.opt_steps > 0 {
            let mut theta = [
                params.log_lengthscale,
                params.log_signal_var,
                params.log_noise_var,
            ];
            let mut adam = AdamState::new(3);
            let adam_cfg = AdamConfig {
                learning_rate: options.learning_rate,
                ..AdamConfig::default()
            };
            for _ in 0..options.opt_steps {
                let cur = KernelParams {
                    log_lengthscale: theta[0],
                    log_signal_var: theta[1],
                    log_noise_var: theta[2],
                };
                let g = exact_lml_and_grads(&train_x, &train_t, &cur)?;
                // Ascend the likelihood: Adam minimizes, so negate.
                let grads = [
                    -g.grad_log_lengthscale,
                    -g.grad_log_signal_var,
                    -g.grad_log_noise_var,
                ];
                adam_step(&mut theta, &grads, &mut adam, &adam_cfg)?;
                for v in theta.iter_mut() {
                    *v = v.clamp(-LOG_PARAM_BOUND, LOG_PARAM_BOUND);
                }
            }
            params = KernelParams {
                log_lengthscale: theta[0],
                log_signal_var: theta[1],
                log_noise_var: theta[2],
            };
        }

        let n = train_x.len();
        let d2 = sq_dist_matrix(&train_x, &train_x);
        let mut k = kernel_from_sq_dist(&d2, params.lengthscale(), params.signal_var());
        for i in 0..n {
            k[i * n + i] += params.noise_var();
        }
        let (chol, jitter) = cholesky_jittered(&k, n, JITTER_INITIAL, JITTER_MAX)?;
        let alpha = solve_cholesky(&chol, &train_t, n);
        let lml = -0.5 * dot(&train_t, &alpha)
            - 0.5 * log_det_from_cholesky(&chol, n)
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(ExactGp {
            params,
            train_x,
            chol,
            alpha,
            jitter,
            lml,
            clamped_variances: AtomicUsize::new(0),
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn log_marginal(&self) -> f64 {
        self.lml
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// How many predictive variances were clamped up to zero.
    pub fn clamped_variance_count(&self) -> usize {
        self.clamped_variances.load(Ordering::Relaxed)
    }

    /// Posterior (mean, variance) of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let d = self.train_x[0].len();
        if x.len() != d {
            return Err(CoreError::dimension(
                "gp predict",
                format!("{} dims", x.len()),
                format!("{d}"),
            ));
        }
        let n = self.train_x.len();
        let (l_scale, sv) = (self.params.lengthscale(), self.params.signal_var());
        let kstar: Vec<f64> = self
            .train_x
            .iter()
            .map(|xi| rbf(xi, x, l_scale, sv))
            .collect();
        let mean = dot(&kstar, &self.alpha);
        let v = solve_lower(&self.chol, &kstar, n);
        let mut var = sv - dot(&v, &v);
        if var < 0.0 {
            self.clamped_variances.fetch_add(1, Ordering::Relaxed);
            var = 0.0;
        }
        Ok((mean, var))
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

// ---------------------------------------------------------------------------
// Sparse GP (collapsed variational bound)
// ---------------------------------------------------------------------------

/// The collapsed evidence bound, its gradients, and the diagnostics the
/// invariants are checked against.
pub struct SparseBoundGrads {
    pub bound: f64,
    pub grad_log_lengthscale: f64,
    pub grad_log_signal_var: f64,
    pub grad_log_noise_var: f64,
    /// Gradient for the inducing inputs, m x d row-major.
    pub grad_inducing: Vec<f64>,
    /// tr(Knn - Qnn); mathematically >= 0.
    pub trace_term: f64,
    pub jitter: f64,
}

/// Evidence bound
///
///   F = log N(t | 0, Qnn + noise I) - trace(Knn - Qnn) / (2 noise)
///
/// computed in the stable Cholesky form (L = chol(Kmm),
/// A = L^{-1} Kmn / sigma, B = I + A A^T, LB = chol(B),
/// c = LB^{-1} A t / sigma), together with analytic gradients for the
/// three log-parameters and the inducing inputs.
pub fn sparse_bound_and_grads(
    x: &[Vec<f64>],
    t: &[f64],
    z: &[Vec<f64>],
    params: &KernelParams,
) -> Result<SparseBoundGrads> {
    let d = validate_training_set(x, t)?;
    let n = x.len();
    let m = z.len();
    if m == 0 {
        return Err(CoreError::Contract("no inducing inputs".into()));
    }
    for (i, row) in z.iter().enumerate() {
        if row.len() != d {
            return Err(CoreError::dimension(
                "inducing inputs",
                format!("row {i} has {} dims", row.len()),
                format!("{d}"),
            ));
        }
    }
    let (l_scale, sv, nv) = (params.lengthscale(), params.signal_var(), params.noise_var());
    let sigma = nv.sqrt();

    let d2_mm = sq_dist_matrix(z, z);
    let kmm_f = kernel_from_sq_dist(&d2_mm, l_scale, sv);
    let d2_mn = sq_dist_matrix(z, x);
    let kmn = kernel_from_sq_dist(&d2_mn, l_scale, sv);

    let (l, jitter) = cholesky_jittered(&kmm_f, m, JITTER_INITIAL, JITTER_MAX)?;
    // A = L^{-1} Kmn / sigma.
    let mut a = solve_lower_multi(&l, &kmn, m, n);
    for v in a.iter_mut() {
        *v /= sigma;
    }
    // B = I + A A^T.
    let mut b = matmul_a_bt(&a, &a, m, n, m);
    for i in 0..m {
        b[i * m + i] += 1.0;
    }
    let (lb, _jb) = cholesky_jittered(&b, m, JITTER_INITIAL, JITTER_MAX)?;

    let at: Vec<f64> = (0..m).map(|i| dot(&a[i * n..(i + 1) * n], t)).collect();
    let mut c = solve_lower(&lb, &at, m);
    for v in c.iter_mut() {
        *v /= sigma;
    }

    let a_fro_sq: f64 = a.iter().map(|v| v * v).sum();
    let trace_term = n as f64 * sv - nv * a_fro_sq;
    let tt = dot(t, t);
    let bound = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * log_det_from_cholesky(&lb, m)
        - 0.5 * n as f64 * nv.ln()
        - 0.5 * (tt / nv - dot(&c, &c))
        - trace_term / (2.0 * nv);

    // u = B^{-1} A t; beta = (t - A^T u) / nv; both Woodbury pieces.
    let u = {
        let y = solve_lower(&lb, &at, m);
        solve_lower_transpose(&lb, &y, m)
    };
    let mut beta = t.to_vec();
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..m {
            acc += a[i * n + j] * u[i];
        }
        beta[j] = (beta[j] - acc) / nv;
    }

    // B^{-1} A, m x n.
    let binv_a = {
        let y = solve_lower_multi(&lb, &a, m, n);
        solve_lower_transpose_multi(&lb, &y, m, n)
    };

    // G_mn = (1/sigma) L^{-T} [A - B^{-1}A + u beta^T].
    let mut inner = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            inner[i * n + j] = a[i * n + j] - binv_a[i * n + j] + u[i] * beta[j];
        }
    }
    let mut g_mn = solve_lower_transpose_multi(&l, &inner, m, n);
    for v in g_mn.iter_mut() {
        *v /= sigma;
    }

    // G_mm = -1/2 L^{-T} [B + B^{-1} - 2I + u u^T / nv] L^{-1}.
    let binv = {
        let mut identity = vec![0.0; m * m];
        for i in 0..m {
            identity[i * m + i] = 1.0;
        }
        let y = solve_lower_multi(&lb, &identity, m, m);
        solve_lower_transpose_multi(&lb, &y, m, m)
    };
    let mut mid = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let idx = i * m + j;
            mid[idx] = b[idx] + binv[idx] + u[i] * u[j] / nv;
            if i == j {
                mid[idx] -= 2.0;
            }
        }
    }
    let g_mm = {
        let y = solve_lower_transpose_multi(&l, &mid, m, m);
        let yt = transpose(&y, m, m);
        let g = solve_lower_transpose_multi(&l, &yt, m, m);
        // mid is symmetric, so L^{-T} mid L^{-1} is too; the transpose
        // dance just reuses the lower-triangular solver.
        let mut g = transpose(&g, m, m);
        for v in g.iter_mut() {
            *v *= -0.5;
        }
        g
    };

    // Chain rule into the log-parameters.
    let inv_l2 = 1.0 / (l_scale * l_scale);
    let mut g_sv = 0.0;
    let mut g_len = 0.0;
    for idx in 0..m * n {
        g_sv += g_mn[idx] * kmn[idx];
        g_len += g_mn[idx] * kmn[idx] * d2_mn[idx] * inv_l2;
    }
    for idx in 0..m * m {
        g_sv += g_mm[idx] * kmm_f[idx];
        g_len += g_mm[idx] * kmm_f[idx] * d2_mm[idx] * inv_l2;
    }
    // Knn only enters through its trace.
    g_sv -= n as f64 * sv / (2.0 * nv);

    let tr_binv: f64 = (0..m).map(|i| binv[i * m + i]).sum();
    let tr_p = (n as f64 - m as f64 + tr_binv) / nv;
    let df_dnv = -0.5 * tr_p + 0.5 * dot(&beta, &beta) + trace_term / (2.0 * nv * nv);

    // Inducing-input gradients through Kmn and Kmm.
    let mut grad_z = vec![0.0; m * d];
    for i in 0..m {
        for j in 0..n {
            let w = g_mn[i * n + j] * kmn[i * n + j] * inv_l2;
            if w == 0.0 {
                continue;
            }
            for k in 0..d {
                grad_z[i * d + k] += w * (x[j][k] - z[i][k]);
            }
        }
        for q in 0..m {
            let w = 2.0 * g_mm[i * m + q] * kmm_f[i * m + q] * inv_l2;
            if w == 0.0 {
                continue;
            }
            for k in 0..d {
                grad_z[i * d + k] += w * (z[q][k] - z[i][k]);
            }
        }
    }

    Ok(SparseBoundGrads {
        bound,
        grad_log_lengthscale: g_len,
        grad_log_signal_var: g_sv,
        grad_log_noise_var: nv * df_dnv,
        grad_inducing: grad_z,
        trace_term,
        jitter,
    })
}

pub struct SparseGp {
    params: KernelParams,
    inducing: Vec<Vec<f64>>,
    chol_kmm: Vec<f64>,
    chol_b: Vec<f64>,
    c: Vec<f64>,
    bound: f64,
    trace_term: f64,
    jitter: f64,
    clamped_variances: AtomicUsize,
}

impl SparseGp {
    /// Fit a sparse GP with the given initial inducing inputs
    /// (typically a subset of the training inputs). With
    /// `options.optimize_inducing` the inducing positions move along
    /// their bound gradient together with the kernel parameters.
    pub fn fit(
        train_x: &[Vec<f64>],
        train_t: &[f64],
        inducing_init: Vec<Vec<f64>>,
        init: Option<KernelParams>,
        options: &GpFitOptions,
    ) -> Result<SparseGp> {
        let d = validate_training_set(train_x, train_t)?;
        let m = inducing_init.len();
        if m == 0 {
            return Err(CoreError::Contract("no inducing inputs".into()));
        }
        let mut params = init.unwrap_or_else(|| heuristic_init(train_x, train_t));
        let mut inducing = inducing_init;

        if options.opt_steps > 0 {
            let n_var = 3 + if options.optimize_inducing { m * d } else { 0 };
            let mut theta = Vec::with_capacity(n_var);
            theta.extend_from_slice(&[
                params.log_lengthscale,
                params.log_signal_var,
                params.log_noise_var,
            ]);
            if options.optimize_inducing {
                theta.extend(inducing.iter().flatten().copied());
            }
            let mut adam = AdamState::new(n_var);
            let adam_cfg = AdamConfig {
                learning_rate: options.learning_rate,
                ..AdamConfig::default()
            };
            for _ in 0..options.opt_steps {
                let cur = KernelParams {
                    log_lengthscale: theta[0],
                    log_signal_var: theta[1],
                    log_noise_var: theta[2],
                };
                let cur_z: Vec<Vec<f64>> = if options.optimize_inducing {
                    theta[3..].chunks(d).map(<[f64]>::to_vec).collect()
                } else {
                    inducing.clone()
                };
                let g = sparse_bound_and_grads(train_x, train_t, &cur_z, &cur)?;
                let mut grads = Vec::with_capacity(n_var);
                grads.extend_from_slice(&[
                    -g.grad_log_lengthscale,
                    -g.grad_log_signal_var,
                    -g.grad_log_noise_var,
                ]);
                if options.optimize_inducing {
                    grads.extend(g.grad_inducing.iter().map(|v| -v));
                }
                adam_step(&mut theta, &grads, &mut adam, &adam_cfg)?;
                for v in theta[..3].iter_mut() {
                    *v = v.clamp(-LOG_PARAM_BOUND, LOG_PARAM_BOUND);
                }
            }
            params = KernelParams {
                log_lengthscale: theta[0],
                log_signal_var: theta[1],
                log_noise_var: theta[2],
            };
            if options.optimize_inducing {
                inducing = theta[3..].chunks(d).map(<[f64]>::to_vec).collect();
            }
        }

        // Final solve state at the fitted parameters.
        let n = train_x.len();
        let (l_scale, sv, nv) = (params.lengthscale(), params.signal_var(), params.noise_var());
        let sigma = nv.sqrt();
        let kmm_f = kernel_from_sq_dist(&sq_dist_matrix(&inducing, &inducing), l_scale, sv);
        let kmn = kernel_from_sq_dist(&sq_dist_matrix(&inducing, train_x), l_scale, sv);
        let (chol_kmm, jitter) = cholesky_jittered(&kmm_f, m, JITTER_INITIAL, JITTER_MAX)?;
        let mut a = solve_lower_multi(&chol_kmm, &kmn, m, n);
        for v in a.iter_mut() {
            *v /= sigma;
        }
        let mut b = matmul_a_bt(&a, &a, m, n, m);
        for i in 0..m {
            b[i * m + i] += 1.0;
        }
        let (chol_b, _jb) = cholesky_jittered(&b, m, JITTER_INITIAL, JITTER_MAX)?;
        let at: Vec<f64> = (0..m).map(|i| dot(&a[i * n..(i + 1) * n], train_t)).collect();
        let mut c = solve_lower(&chol_b, &at, m);
        for v in c.iter_mut() {
            *v /= sigma;
        }
        let a_fro_sq: f64 = a.iter().map(|v| v * v).sum();
        let trace_term = n as f64 * sv - nv * a_fro_sq;
        let bound = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * log_det_from_cholesky(&chol_b, m)
            - 0.5 * n as f64 * nv.ln()
            - 0.5 * (dot(train_t, train_t) / nv - dot(&c, &c))
            - trace_term / (2.0 * nv);

        Ok(SparseGp {
            params,
            inducing,
            chol_kmm,
            chol_b,
            c,
            bound,
            trace_term,
            jitter,
            clamped_variances: AtomicUsize::new(0),
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn inducing(&self) -> &[Vec<f64>] {
        &self.inducing
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// tr(Knn - Qnn) at the fitted parameters; mathematically >= 0.
    pub fn trace_term(&self) -> f64 {
        self.trace_term
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn clamped_variance_count(&self) -> usize {
        self.clamped_variances.load(Ordering::Relaxed)
    }

    /// Posterior (mean, variance) of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let d = self.inducing[0].len();
        if x.len() != d {
            return Err(CoreError::dimension(
                "sparse gp predict",
                format!("{} dims", x.len()),
                format!("{d}"),
            ));
        }
        let m = self.inducing.len();
        let (l_scale, sv) = (self.params.lengthscale(), self.params.signal_var());
        let kus: Vec<f64> = self
            .inducing
            .iter()
            .map(|zi| rbf(zi, x, l_scale, sv))
            .collect();
        let tmp1 = solve_lower(&self.chol_kmm, &kus, m);
        let tmp2 = solve_lower(&self.chol_b, &tmp1, m);
        let mean = dot(&tmp2, &self.c);
        let mut var = sv - dot(&tmp1, &tmp1) + dot(&tmp2, &tmp2);
        if var < 0.0 {
            self.clamped_variances.fetch_add(1, Ordering::Relaxed);
            var = 0.0;
        }
        Ok((mean, var))
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}
