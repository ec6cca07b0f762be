//! Finite-difference validation of the training objectives' parameter
//! gradients. These checks treat the whole model as a black box
//! f(params) and compare reverse-mode gradients against central
//! differences coordinate by coordinate, so they would catch any
//! mis-wired gradient path through the encoder, reparameterization,
//! decoder, or penalty branches.

use ensemblegen_core::constraint::{build_lc_graph, lc_loss_with_eps};
use ensemblegen_core::cvae::{
    build_elbo_graph, draw_eps, elbo_loss_with_eps, CvaeConfig, CvaeModel,
};
use ensemblegen_core::rng::Xoshiro;
use ensemblegen_core::tape::Tape;
use ensemblegen_core::tensor::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn test_config(mc_samples: usize) -> CvaeConfig {
    CvaeConfig {
        d_x: 3,
        t_len: 10,
        d_z: 2,
        hidden_widths: vec![8],
        likelihood_sigma: 0.1,
        epochs: 0,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 1234,
        mc_samples,
        kl_weight: 1.0,
    }
}

fn toy_batch(cfg: &CvaeConfig, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = Xoshiro::new(seed);
    let xs = (0..n).map(|_| rng.normal_vec(cfg.d_x)).collect();
    let ys = (0..n).map(|_| rng.normal_vec(cfg.t_len)).collect();
    (xs, ys)
}

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows[0].len();
    Tensor::new(
        vec![rows.len(), cols],
        rows.iter().flatten().copied().collect(),
    )
    .unwrap()
}

/// Compare analytic gradients to central differences at sampled
/// coordinates; returns (max relative error, worst coordinate).
fn fd_check(
    model: &CvaeModel,
    analytic: &[f64],
    coords: &[usize],
    eval: &dyn Fn(&CvaeModel) -> f64,
) -> (f64, usize) {
    let base = model.params_flat();
    let mut worst = (0.0f64, 0usize);
    for &c in coords {
        let mut m = model.clone();
        let mut p = base.clone();
        p[c] += H;
        m.set_params_flat(&p).unwrap();
        let fp = eval(&m);
        p[c] -= 2.0 * H;
        m.set_params_flat(&p).unwrap();
        let fm = eval(&m);
        let fd = (fp - fm) / (2.0 * H);
        let ad = analytic[c];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, c);
        }
    }
    worst
}

#[test]
fn elbo_gradient_matches_finite_differences_over_100_coords() {
    let cfg = test_config(1);
    let model = CvaeModel::init(cfg.clone(), 0).unwrap();
    let (xs, ys) = toy_batch(&cfg, 4, 9);
    let mut eps_rng = Xoshiro::new(31);
    let eps = draw_eps(4, cfg.d_z, 1, &mut eps_rng);

    let mut tape = Tape::new();
    let graph =
        build_elbo_graph(&mut tape, &model, &rows_tensor(&xs), &rows_tensor(&ys), &eps).unwrap();
    let grads = tape.backward(graph.loss).unwrap();
    let mut analytic = model.encoder.grads_flat(&graph.enc, &grads);
    analytic.extend(model.decoder.grads_flat(&graph.dec, &grads));
    assert_eq!(analytic.len(), cfg.param_count());

    let mut coord_rng = Xoshiro::new(77);
    let coords = coord_rng.sample_indices(analytic.len(), 120);
    let (max_rel, worst) = fd_check(&model, &analytic, &coords, &|m| {
        elbo_loss_with_eps(m, &xs, &ys, &eps).unwrap()
    });
    assert!(
        max_rel <= TOL,
        "elbo grad mismatch: rel err {max_rel} at coord {worst}"
    );
}

#[test]
fn constrained_gradient_matches_finite_differences_over_100_coords() {
    let cfg = test_config(1);
    let model = CvaeModel::init(cfg.clone(), 0).unwrap();
    let (xs, ys) = toy_batch(&cfg, 4, 10);
    let mut rng = Xoshiro::new(55);
    let anchor_xs: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(cfg.d_x)).collect();
    let anchor_ys: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(cfg.t_len)).collect();
    // Two anchors far outside the tolerance ball (active hinge) and one
    // close enough to be inactive, so both branches are exercised away
    // from the kink.
    let fixed: Vec<Vec<f64>> = vec![vec![4.0, -3.0], vec![-5.0, 2.0], vec![0.0, 0.0]];
    let lambda = 7.5;
    let d_z_max = 0.5;
    let eps = draw_eps(4, cfg.d_z, 1, &mut rng);

    let mut tape = Tape::new();
    let graph = build_lc_graph(
        &mut tape,
        &model,
        &rows_tensor(&xs),
        &rows_tensor(&ys),
        &anchor_xs,
        &anchor_ys,
        &fixed,
        lambda,
        d_z_max,
        &eps,
    )
    .unwrap();
    let grads = tape.backward(graph.loss).unwrap();
    let mut analytic = model.encoder.grads_flat(&graph.enc, &grads);
    analytic.extend(model.decoder.grads_flat(&graph.dec, &grads));

    let mut coord_rng = Xoshiro::new(78);
    let coords = coord_rng.sample_indices(analytic.len(), 120);
    let (max_rel, worst) = fd_check(&model, &analytic, &coords, &|m| {
        lc_loss_with_eps(
            m, &xs, &ys, &anchor_xs, &anchor_ys, &fixed, lambda, d_z_max, &eps,
        )
        .unwrap()
    });
    assert!(
        max_rel <= TOL,
        "constrained grad mismatch: rel err {max_rel} at coord {worst}"
    );
}

#[test]
fn multi_sample_elbo_gradient_matches_finite_differences() {
    let cfg = test_config(3);
    let model = CvaeModel::init(cfg.clone(), 0).unwrap();
    let (xs, ys) = toy_batch(&cfg, 3, 11);
    let mut eps_rng = Xoshiro::new(32);
    let eps = draw_eps(3, cfg.d_z, 3, &mut eps_rng);

    let mut tape = Tape::new();
    let graph =
        build_elbo_graph(&mut tape, &model, &rows_tensor(&xs), &rows_tensor(&ys), &eps).unwrap();
    let grads = tape.backward(graph.loss).unwrap();
    let mut analytic = model.encoder.grads_flat(&graph.enc, &grads);
    analytic.extend(model.decoder.grads_flat(&graph.dec, &grads));

    let mut coord_rng = Xoshiro::new(79);
    let coords = coord_rng.sample_indices(analytic.len(), 60);
    let (max_rel, worst) = fd_check(&model, &analytic, &coords, &|m| {
        elbo_loss_with_eps(m, &xs, &ys, &eps).unwrap()
    });
    assert!(
        max_rel <= TOL,
        "multi-sample elbo grad mismatch: rel err {max_rel} at coord {worst}"
    );
}
