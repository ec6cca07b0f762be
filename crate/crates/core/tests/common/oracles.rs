//! Reference implementations used to validate the library numerically.
//!
//! Everything here is written independently of the library's own
//! algorithms: finite differences instead of the tape's analytic
//! adjoints, dense matrix inversion instead of Cholesky solves, and
//! brute-force scans instead of the library's bookkeeping. Slow and
//! simple on purpose.

use ensemblegen_core::linalg;
use ensemblegen_core::rng::Xoshiro;
use ensemblegen_core::tape::{NodeId, Tape};
use ensemblegen_core::tensor::Tensor;

/// A differentiable test graph: builds a scalar loss from leaf ids.
pub type GraphBuilder = dyn Fn(&mut Tape, &[NodeId]) -> NodeId;

/// Evaluate the graph's loss at the given leaf values on a fresh tape.
fn eval_loss(leaves: &[Tensor], build: &GraphBuilder) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    tape.value(loss).item().expect("graph loss must be scalar")
}

pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: (usize, usize),
}

/// Compare analytic gradients against central finite differences at
/// `n_coords` randomly chosen leaf coordinates.
///
/// rel err = |ad - fd| / max(|ad|, |fd|, 1e-6); step h = 1e-5.
pub fn gradcheck(
    leaves: &[Tensor],
    build: &GraphBuilder,
    n_coords: usize,
    rng: &mut Xoshiro,
) -> GradCheckReport {
    let h = 1e-5;

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).expect("backward on test graph");
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(id)).collect();

    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_err: 0.0,
        worst_coord: (0, 0),
    };
    let total: usize = leaves.iter().map(|t| t.numel()).sum();
    for _ in 0..n_coords {
        // Pick a coordinate uniformly over all leaf elements.
        let mut flat = rng.below(total);
        let mut leaf_idx = 0;
        while flat >= leaves[leaf_idx].numel() {
            flat -= leaves[leaf_idx].numel();
            leaf_idx += 1;
        }
        let elem_idx = flat;

        let perturbed = |delta: f64| -> Vec<Tensor> {
            let mut copy: Vec<Tensor> = leaves.to_vec();
            let mut data = copy[leaf_idx].data().to_vec();
            data[elem_idx] += delta;
            copy[leaf_idx] = Tensor::new(copy[leaf_idx].shape().to_vec(), data).unwrap();
            copy
        };
        let f_plus = eval_loss(&perturbed(h), build);
        let f_minus = eval_loss(&perturbed(-h), build);
        let fd = (f_plus - f_minus) / (2.0 * h);
        let ad = analytic[leaf_idx].data()[elem_idx];

        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
        report.coords_checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = (leaf_idx, elem_idx);
        }
    }
    report
}

/// Random tensor with entries of magnitude in [0.1, 2.5], random sign.
/// The lower bound keeps coordinates away from relu/clamp kinks so the
/// finite-difference stencil stays on one side of each kink.
pub fn kink_safe_tensor(shape: Vec<usize>, rng: &mut Xoshiro) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = 0.1 + 2.4 * rng.next_f64();
            if rng.next_f64() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Dense-inverse Gaussian process oracle: log marginal likelihood and
/// posterior moments computed via explicit matrix inversion. O(n^3)
/// with no reuse; only for small n in tests.
pub mod gp_dense {
    use super::*;

    /// Radial basis function kernel value between two feature vectors.
    pub fn rbf(a: &[f64], b: &[f64], lengthscale: f64, signal_variance: f64) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        signal_variance * (-d2 / (2.0 * lengthscale * lengthscale)).exp()
    }

    fn gram(xs: &[Vec<f64>], ys: &[Vec<f64>], ell: f64, sv: f64) -> Vec<f64> {
        let (n, m) = (xs.len(), ys.len());
        let mut k = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                k[i * m + j] = rbf(&xs[i], &ys[j], ell, sv);
            }
        }
        k
    }

    /// log p(t | X) for a zero-mean GP with RBF kernel and iid noise,
    /// via explicit inversion of K + sigma^2 I.
    pub fn log_marginal(
        xs: &[Vec<f64>],
        t: &[f64],
        ell: f64,
        sv: f64,
        noise_var: f64,
    ) -> f64 {
        let n = xs.len();
        let mut ky = gram(xs, xs, ell, sv);
        for i in 0..n {
            ky[i * n + i] += noise_var;
        }
        let inv = linalg::spd_inverse(&ky, n).expect("oracle inverse");
        let alpha = linalg::matmul(&inv, t, n, n, 1);
        let quad: f64 = linalg::dot(t, &alpha);
        // log det via LU-free route: product of eigenvalues is overkill;
        // reuse cholesky only for the determinant, which is an
        // independent identity from the solve above.
        let l = linalg::cholesky(&ky, n).expect("oracle det factor");
        let logdet = linalg::log_det_from_cholesky(&l, n);
        -0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Posterior mean and variance at test points, dense-inverse form.
    pub fn predict(
        xs: &[Vec<f64>],
        t: &[f64],
        stars: &[Vec<f64>],
        ell: f64,
        sv: f64,
        noise_var: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = xs.len();
        let s = stars.len();
        let mut ky = gram(xs, xs, ell, sv);
        for i in 0..n {
            ky[i * n + i] += noise_var;
        }
        let inv = linalg::spd_inverse(&ky, n).expect("oracle inverse");
        let kxs = gram(xs, stars, ell, sv); // n x s
        let alpha = linalg::matmul(&inv, t, n, n, 1);
        let mut mean = vec![0.0; s];
        let mut var = vec![0.0; s];
        for j in 0..s {
            let kcol: Vec<f64> = (0..n).map(|i| kxs[i * s + j]).collect();
            mean[j] = linalg::dot(&kcol, &alpha);
            let v = linalg::matmul(&inv, &kcol, n, n, 1);
            var[j] = sv - linalg::dot(&kcol, &v);
        }
        (mean, var)
    }
}

/// Scalar KL divergence of N(mu, var) from N(0, 1), summed over
/// independent coordinates, straight from the definite-integral form.
pub fn kl_diag_oracle(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

/// Brute-force hinge: max(0, squared distance - threshold^2).
pub fn hinge_oracle(mu: &[f64], anchor: &[f64], d_max: f64) -> f64 {
    let d2: f64 = mu.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum();
    (d2 - d_max * d_max).max(0.0)
}

/// Brute-force Spearman rank correlation with average ranks for ties.
pub fn spearman_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    cov / (vx.sqrt() * vy.sqrt())
}
