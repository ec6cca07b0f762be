//! Conditional VAE per realization: encoder q(z | x, y), decoder
//! p(y | x, z), trained by minimizing the negated evidence lower bound.
//!
//! The observation model is Gaussian with a fixed scalar std
//! `likelihood_sigma` (normalized units), so the reconstruction term is
//! a scaled squared error plus a constant. The latent prior is the
//! standard normal. The encoder's log-variance head is clamped to
//! [-10, 10] before use; the clamp is part of the model definition, not
//! a safety afterthought, and gradients vanish at the clamp boundary.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::nn::{Mlp, MlpBinding};
use crate::rng::Xoshiro;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const LCCV_MAGIC: &[u8; 4] = b"LCCV";
pub const LCCV_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    /// Conditioning dimension (location features).
    pub d_x: usize,
    /// Series length in months.
    pub t_len: usize,
    /// Latent dimension.
    pub d_z: usize,
    pub hidden_widths: Vec<usize>,
    /// Decoder observation std, normalized units.
    pub likelihood_sigma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Monte Carlo samples of z per item per step.
    pub mc_samples: usize,
    /// Scalar weight on the KL term (1.0 = plain ELBO).
    pub kl_weight: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            d_x: 3,
            t_len: 240,
            d_z: 3,
            hidden_widths: vec![128, 128],
            likelihood_sigma: 0.1,
            epochs: 300,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            mc_samples: 1,
            kl_weight: 1.0,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_z < 1 {
            return Err(CoreError::Contract("d_z must be >= 1".into()));
        }
        if self.t_len < 2 {
            return Err(CoreError::Contract("t_len must be >= 2".into()));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(CoreError::Contract(format!(
                "hidden_widths must be non-empty and positive, got {:?}",
                self.hidden_widths
            )));
        }
        if !(self.likelihood_sigma > 0.0) {
            return Err(CoreError::Contract(format!(
                "likelihood_sigma must be > 0, got {}",
                self.likelihood_sigma
            )));
        }
        if self.d_x == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return Err(CoreError::Contract(
                "d_x, batch_size, and mc_samples must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !self.kl_weight.is_finite() || self.kl_weight < 0.0 {
            return Err(CoreError::Contract(
                "learning_rate must be > 0 and kl_weight >= 0".into(),
            ));
        }
        Ok(())
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_x + self.t_len];
        w.extend_from_slice(&self.hidden_widths);
        w.push(2 * self.d_z);
        w
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_x + self.d_z];
        w.extend_from_slice(&self.hidden_widths);
        w.push(self.t_len);
        w
    }

    /// Total trainable parameter count, a pure function of the config.
    pub fn param_count(&self) -> usize {
        let count = |widths: &[usize]| -> usize {
            widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
        };
        count(&self.encoder_widths()) + count(&self.decoder_widths())
    }

    /// The additive constant of the reconstruction NLL per item:
    /// T * log(sigma * sqrt(2 pi)).
    pub fn nll_constant(&self) -> f64 {
        self.t_len as f64
            * (self.likelihood_sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub config: CvaeConfig,
    pub realization_id: usize,
}

impl CvaeModel {
    /// Freshly initialized model; weights drawn from substreams of
    /// `config.seed`.
    pub fn init(config: CvaeConfig, realization_id: usize) -> Result<Self> {
        config.validate()?;
        let mut enc_rng = Xoshiro::stream(config.seed, "init/enc");
        let mut dec_rng = Xoshiro::stream(config.seed, "init/dec");
        let encoder = Mlp::init(&config.encoder_widths(), &mut enc_rng)?;
        let decoder = Mlp::init(&config.decoder_widths(), &mut dec_rng)?;
        Ok(CvaeModel {
            encoder,
            decoder,
            config,
            realization_id,
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.encoder.params_flat();
        p.extend(self.decoder.params_flat());
        p
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n_enc = self.encoder.param_count();
        if flat.len() != self.param_count() {
            return Err(CoreError::dimension(
                "set_params_flat",
                format!("{} values", flat.len()),
                format!("{} parameters", self.param_count()),
            ));
        }
        self.encoder.set_params_flat(&flat[..n_enc])?;
        self.decoder.set_params_flat(&flat[n_enc..])?;
        Ok(())
    }

    /// Posterior q(z | x, y) for one location.
    pub fn encode(&self, x: &[f64], y: &[f64]) -> Result<LatentGaussian> {
        if x.len() != self.config.d_x || y.len() != self.config.t_len {
            return Err(CoreError::dimension(
                "encode",
                format!("x len {}, y len {}", x.len(), y.len()),
                format!("d_x {}, t_len {}", self.config.d_x, self.config.t_len),
            ));
        }
        let mut input = Vec::with_capacity(x.len() + y.len());
        input.extend_from_slice(x);
        input.extend_from_slice(y);
        let out = self.encoder.forward_values(&input)?;
        let d_z = self.config.d_z;
        let mu = out[..d_z].to_vec();
        let log_var: Vec<f64> = out[d_z..].iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect();
        if mu.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(CoreError::Numerical("non-finite encoder output".into()));
        }
        Ok(LatentGaussian { mu, log_var })
    }

    /// Decoder mean for one location.
    pub fn decode(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.d_x || z.len() != self.config.d_z {
            return Err(CoreError::dimension(
                "decode",
                format!("x len {}, z len {}", x.len(), z.len()),
                format!("d_x {}, d_z {}", self.config.d_x, self.config.d_z),
            ));
        }
        let mut input = Vec::with_capacity(x.len() + z.len());
        input.extend_from_slice(x);
        input.extend_from_slice(z);
        self.decoder.forward_values(&input)
    }

    /// Decoder sample: mean plus likelihood_sigma * N(0, I) emission
    /// noise.
    pub fn decode_with_noise(&self, x: &[f64], z: &[f64], rng: &mut Xoshiro) -> Result<Vec<f64>> {
        let mut y = self.decode(x, z)?;
        for v in y.iter_mut() {
            *v += self.config.likelihood_sigma * rng.normal();
        }
        Ok(y)
    }
}

/// z = mu + exp(log_var / 2) * eps with eps ~ N(0, I).
pub fn reparameterize(q: &LatentGaussian, rng: &mut Xoshiro) -> Vec<f64> {
    let eps: Vec<f64> = (0..q.mu.len()).map(|_| rng.normal()).collect();
    reparameterize_with_eps(q, &eps)
}

/// Deterministic reparameterization with caller-supplied noise.
pub fn reparameterize_with_eps(q: &LatentGaussian, eps: &[f64]) -> Vec<f64> {
    q.mu
        .iter()
        .zip(&q.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect()
}

/// KL(N(mu, diag(exp(log_var))) || N(0, I))
///   = 1/2 sum_l (exp(log_var_l) + mu_l^2 - 1 - log_var_l).
pub fn kl_diag_gaussian_to_std_normal(q: &LatentGaussian) -> f64 {
    0.5 * q
        .mu
        .iter()
        .zip(&q.log_var)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

/// Assemble rows into a rank-2 tensor, validating row lengths.
pub(crate) fn batch_tensor(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(CoreError::Contract(format!("{what}: empty batch")));
    }
    let mut data = Vec::with_capacity(rows.len() * cols);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(CoreError::dimension(
                what,
                format!("row {i} has {} values", row.len()),
                format!("{cols}"),
            ));
        }
        data.extend_from_slice(row);
    }
    Tensor::new(vec![rows.len(), cols], data)
}

/// Encoder forward as a tape graph: returns (mu, clamped log_var),
/// both [batch, d_z].
pub fn encode_graph(
    tape: &mut Tape,
    model: &CvaeModel,
    enc: &MlpBinding,
    xs: NodeId,
    ys: NodeId,
) -> Result<(NodeId, NodeId)> {
    let input = tape.concat_cols(xs, ys)?;
    let out = model.encoder.forward(tape, enc, input)?;
    let d_z = model.config.d_z;
    let mu = tape.narrow_cols(out, 0, d_z)?;
    let lv_raw = tape.narrow_cols(out, d_z, d_z)?;
    let lv = tape.clamp(lv_raw, LOGVAR_MIN, LOGVAR_MAX)?;
    Ok((mu, lv))
}

/// Decoder forward as a tape graph: [batch, t_len] means.
pub fn decode_graph(
    tape: &mut Tape,
    model: &CvaeModel,
    dec: &MlpBinding,
    xs: NodeId,
    z: NodeId,
) -> Result<NodeId> {
    let input = tape.concat_cols(xs, z)?;
    model.decoder.forward(tape, dec, input)
}

/// A fully built negated-ELBO graph plus the parameter bindings needed
/// to read gradients back out.
pub struct ElboGraph {
    pub loss: NodeId,
    pub enc: MlpBinding,
    pub dec: MlpBinding,
    /// Posterior mean node, [batch, d_z]; reused by the constraint
    /// objective.
    pub mu: NodeId,
}

/// Build the negated-ELBO loss on `tape`:
///
///   loss = mean_b [ kl_weight * KL_b + (1/K) sum_k NLL_{b,k} ]
///   NLL  = sum_t (y_t - yhat_t)^2 / (2 sigma^2) + T log(sigma sqrt(2 pi))
///
/// `eps` supplies the K Monte Carlo noise tensors ([batch, d_z] each);
/// passing them explicitly keeps the graph a deterministic function of
/// its inputs, which the common-random-numbers tests rely on.
pub fn build_elbo_graph(
    tape: &mut Tape,
    model: &CvaeModel,
    xs: &Tensor,
    ys: &Tensor,
    eps: &[Tensor],
) -> Result<ElboGraph> {
    let cfg = &model.config;
    let batch = xs.rows();
    if ys.rows() != batch {
        return Err(CoreError::dimension(
            "elbo batch",
            format!("{} x rows", batch),
            format!("{} y rows", ys.rows()),
        ));
    }
    if eps.len() != cfg.mc_samples {
        return Err(CoreError::dimension(
            "elbo eps",
            format!("{} noise tensors", eps.len()),
            format!("{} mc_samples", cfg.mc_samples),
        ));
    }
    let enc = model.encoder.bind(tape);
    let dec = model.decoder.bind(tape);
    let xs_id = tape.leaf(xs.clone());
    let ys_id = tape.leaf(ys.clone());

    let (mu, lv) = encode_graph(tape, model, &enc, xs_id, ys_id)?;

    // KL elements: exp(lv) + mu^2 - 1 - lv, summed over batch and dims.
    let elv = tape.exp(lv)?;
    let mu2 = tape.square(mu)?;
    let t1 = tape.add(elv, mu2)?;
    let lvp1 = tape.add_const(lv, 1.0)?;
    let kd = tape.sub(t1, lvp1)?;
    let kl_sum = tape.sum(kd)?;
    let kl_term = tape.mul_const(kl_sum, 0.5 * cfg.kl_weight)?;

    // Reconstruction: average the quadratic term over MC samples.
    let mut quad_acc: Option<NodeId> = None;
    for e in eps {
        if e.shape() != [batch, cfg.d_z] {
            return Err(CoreError::dimension(
                "elbo eps",
                format!("{:?}", e.shape()),
                format!("[{batch}, {}]", cfg.d_z),
            ));
        }
        let eps_id = tape.leaf(e.clone());
        let half_lv = tape.mul_const(lv, 0.5)?;
        let sigma = tape.exp(half_lv)?;
        let noise = tape.mul(sigma, eps_id)?;
        let z = tape.add(mu, noise)?;
        let yhat = decode_graph(tape, model, &dec, xs_id, z)?;
        let resid = tape.sub(ys_id, yhat)?;
        let sq = tape.square(resid)?;
        let sse = tape.sum(sq)?;
        quad_acc = Some(match quad_acc {
            None => sse,
            Some(acc) => tape.add(acc, sse)?,
        });
    }
    let quad_sum = quad_acc.expect("mc_samples >= 1");
    let quad = tape.mul_const(
        quad_sum,
        1.0 / (2.0 * cfg.likelihood_sigma * cfg.likelihood_sigma * cfg.mc_samples as f64),
    )?;

    let total = tape.add(kl_term, quad)?;
    let per_item = tape.mul_const(total, 1.0 / batch as f64)?;
    let loss = tape.add_const(per_item, cfg.nll_constant())?;
    Ok(ElboGraph { loss, enc, dec, mu })
}

/// Draw the Monte Carlo noise tensors for one step, in a fixed order.
pub fn draw_eps(batch: usize, d_z: usize, mc_samples: usize, rng: &mut Xoshiro) -> Vec<Tensor> {
    (0..mc_samples)
        .map(|_| Tensor::new(vec![batch, d_z], rng.normal_vec(batch * d_z)).expect("eps shape"))
        .collect()
}

/// Negated ELBO of a batch, with noise drawn from `rng`.
pub fn elbo_loss(
    model: &CvaeModel,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    rng: &mut Xoshiro,
) -> Result<f64> {
    let eps = draw_eps(xs.len(), model.config.d_z, model.config.mc_samples, rng);
    elbo_loss_with_eps(model, xs, ys, &eps)
}

/// Negated ELBO with caller-supplied noise (common random numbers).
pub fn elbo_loss_with_eps(
    model: &CvaeModel,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    eps: &[Tensor],
) -> Result<f64> {
    let xs_t = batch_tensor(xs, model.config.d_x, "elbo_loss x")?;
    let ys_t = batch_tensor(ys, model.config.t_len, "elbo_loss y")?;
    let mut tape = Tape::new();
    let graph = build_elbo_graph(&mut tape, model, &xs_t, &ys_t, eps)?;
    tape.value(graph.loss).item()
}

/// Result of a training run: the model and the per-step loss values.
pub struct TrainOutcome {
    pub model: CvaeModel,
    pub loss_trace: Vec<f64>,
}

/// Train a CVAE on (x, y) pairs for one realization.
///
/// Runs `epochs` passes of Adam over minibatches of `batch_size`; the
/// shuffle order, weight init, and reparameterization noise all come
/// from named substreams of `config.seed`, so identical inputs yield
/// bit-identical models.
pub fn train_cvae(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    config: &CvaeConfig,
    realization_id: usize,
) -> Result<TrainOutcome> {
    let model = CvaeModel::init(config.clone(), realization_id)?;
    train_from(model, xs, ys, TrainObjective::PlainElbo)
}

/// Objective selector shared by plain and constrained training.
pub enum TrainObjective<'a> {
    PlainElbo,
    /// Anchor-constrained: see the constraint module. Holds the anchor
    /// inputs (features and series per anchor) plus the penalty terms.
    Constrained(&'a crate::constraint::ConstraintContext<'a>),
}

/// Core minibatch loop, used by both plain CVAE training and the
/// constrained ensemble trainer. Consumes an initialized model.
pub fn train_from(
    mut model: CvaeModel,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    objective: TrainObjective,
) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    cfg.validate()?;
    let n = xs.len();
    if n == 0 || ys.len() != n {
        return Err(CoreError::Contract(format!(
            "training set size mismatch: {} xs, {} ys",
            n,
            ys.len()
        )));
    }
    if n < cfg.batch_size {
        return Err(CoreError::Contract(format!(
            "need at least batch_size={} samples, got {n}",
            cfg.batch_size
        )));
    }

    let mut shuffle_rng = Xoshiro::stream(cfg.seed, "shuffle");
    let mut eps_rng = Xoshiro::stream(cfg.seed, "eps");
    // Anchor batch stream is separate so that enabling the constraint
    // leaves the eps stream untouched (the lambda=0 bit-equality
    // contract depends on this).
    let mut anchor_rng = Xoshiro::stream(cfg.seed, "anchor");

    let mut params = model.params_flat();
    let mut adam = crate::optim::AdamState::new(params.len());
    let adam_cfg = crate::optim::AdamConfig {
        learning_rate: cfg.learning_rate,
        ..crate::optim::AdamConfig::default()
    };

    let mut trace = Vec::with_capacity(cfg.epochs * n.div_ceil(cfg.batch_size));
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<Vec<f64>> = chunk.iter().map(|&i| ys[i].clone()).collect();
            let xs_t = batch_tensor(&bx, cfg.d_x, "train x")?;
            let ys_t = batch_tensor(&by, cfg.t_len, "train y")?;
            let eps = draw_eps(chunk.len(), cfg.d_z, cfg.mc_samples, &mut eps_rng);

            let mut tape = Tape::new();
            let mut build = || -> Result<(NodeId, ElboGraph)> {
                let graph = build_elbo_graph(&mut tape, &model, &xs_t, &ys_t, &eps)?;
                let loss = match &objective {
                    TrainObjective::PlainElbo => graph.loss,
                    TrainObjective::Constrained(ctx) => {
                        ctx.attach_penalty(&mut tape, &model, &graph, &mut anchor_rng)?
                    }
                };
                Ok((loss, graph))
            };
            let (loss_id, graph) = build().map_err(|e| match e {
                CoreError::Numerical(msg) => CoreError::Numerical(format!(
                    "training step {step} (batch locations {chunk:?}): {msg}"
                )),
                other => other,
            })?;
            let loss_val = tape.value(loss_id).item()?;
            trace.push(loss_val);

            let grads = tape.backward(loss_id)?;
            let mut flat_grads = model.encoder.grads_flat(&graph.enc, &grads);
            flat_grads.extend(model.decoder.grads_flat(&graph.dec, &grads));
            crate::optim::adam_step(&mut params, &flat_grads, &mut adam, &adam_cfg).map_err(
                |e| match e {
                    CoreError::Numerical(msg) => CoreError::Numerical(format!(
                        "training step {step} (batch locations {chunk:?}): {msg}"
                    )),
                    other => other,
                },
            )?;
            model.set_params_flat(&params)?;
            step += 1;
        }
    }
    Ok(TrainOutcome { model, loss_trace: trace })
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------
//
// Little-endian binary:
//   magic "LCCV", version u32,
//   d_x u32, t_len u32, d_z u32,
//   n_hidden u32, hidden widths u32 * n_hidden,
//   likelihood_sigma f64, epochs u32, batch_size u32,
//   learning_rate f64, seed u64, mc_samples u32, kl_weight f64,
//   realization_id u32,
//   tensor_count u32,
//   per tensor: rank u32, dims u32 * rank, data f64 * numel.
// Tensors appear in declaration order: encoder layers (weight, bias)
// then decoder layers (weight, bias).

pub fn save_checkpoint(model: &CvaeModel, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(LCCV_MAGIC);
    buf.extend_from_slice(&LCCV_VERSION.to_le_bytes());
    let cfg = &model.config;
    buf.extend_from_slice(&(cfg.d_x as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.t_len as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.d_z as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.hidden_widths.len() as u32).to_le_bytes());
    for &w in &cfg.hidden_widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.likelihood_sigma.to_le_bytes());
    buf.extend_from_slice(&(cfg.epochs as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.batch_size as u32).to_le_bytes());
    buf.extend_from_slice(&cfg.learning_rate.to_le_bytes());
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    buf.extend_from_slice(&(cfg.mc_samples as u32).to_le_bytes());
    buf.extend_from_slice(&cfg.kl_weight.to_le_bytes());
    buf.extend_from_slice(&(model.realization_id as u32).to_le_bytes());

    let tensors: Vec<&Tensor> = model
        .encoder
        .layers
        .iter()
        .chain(model.decoder.layers.iter())
        .flat_map(|l| [&l.weight, &l.bias])
        .collect();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CvaeModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<CvaeModel> {
    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
            if self.pos + n > self.bytes.len() {
                return Err(CoreError::format(
                    self.pos as u64,
                    format!(
                        "truncated while reading {what}: need {} bytes, file has {}",
                        self.pos + n,
                        self.bytes.len()
                    ),
                ));
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }
        fn u32(&mut self, what: &str) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
        }
        fn u64(&mut self, what: &str) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
        }
        fn f64(&mut self, what: &str) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
        }
    }

    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != LCCV_MAGIC {
        return Err(CoreError::format(0, "bad checkpoint magic"));
    }
    let version = c.u32("version")?;
    if version != LCCV_VERSION {
        return Err(CoreError::format(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let d_x = c.u32("d_x")? as usize;
    let t_len = c.u32("t_len")? as usize;
    let d_z = c.u32("d_z")? as usize;
    let n_hidden = c.u32("n_hidden")? as usize;
    if n_hidden > 64 {
        return Err(CoreError::format(c.pos as u64 - 4, format!("implausible hidden layer count {n_hidden}")));
    }
    let mut hidden_widths = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_widths.push(c.u32("hidden width")? as usize);
    }
    let likelihood_sigma = c.f64("likelihood_sigma")?;
    let epochs = c.u32("epochs")? as usize;
    let batch_size = c.u32("batch_size")? as usize;
    let learning_rate = c.f64("learning_rate")?;
    let seed = c.u64("seed")?;
    let mc_samples = c.u32("mc_samples")? as usize;
    let kl_weight = c.f64("kl_weight")?;
    let realization_id = c.u32("realization_id")? as usize;

    let config = CvaeConfig {
        d_x,
        t_len,
        d_z,
        hidden_widths,
        likelihood_sigma,
        epochs,
        batch_size,
        learning_rate,
        seed,
        mc_samples,
        kl_weight,
    };
    config.validate().map_err(|e| {
        CoreError::format(0, format!("checkpoint config invalid: {e}"))
    })?;

    let tensor_count = c.u32("tensor count")? as usize;
    let expected_shapes: Vec<Vec<usize>> = {
        let mut shapes = Vec::new();
        for widths in [config.encoder_widths(), config.decoder_widths()] {
            for w in widths.windows(2) {
                shapes.push(vec![w[0], w[1]]);
                shapes.push(vec![w[1]]);
            }
        }
        shapes
    };
    if tensor_count != expected_shapes.len() {
        return Err(CoreError::format(
            c.pos as u64 - 4,
            format!(
                "checkpoint has {tensor_count} tensors, config implies {}",
                expected_shapes.len()
            ),
        ));
    }
    let mut tensors = Vec::with_capacity(tensor_count);
    for expected in &expected_shapes {
        let rank = c.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(CoreError::format(c.pos as u64 - 4, format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("tensor dim")? as usize);
        }
        if &shape != expected {
            return Err(CoreError::format(
                c.pos as u64,
                format!("tensor shape {shape:?} does not match config-implied {expected:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = c.f64("tensor data")?;
            if !v.is_finite() {
                return Err(CoreError::format(
                    c.pos as u64 - 8,
                    "non-finite parameter in checkpoint",
                ));
            }
            data.push(v);
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(CoreError::format(
            c.pos as u64,
            format!("{} trailing bytes after checkpoint payload", bytes.len() - c.pos),
        ));
    }

    let mut model = CvaeModel::init(config, realization_id)?;
    let mut it = tensors.into_iter();
    for layer in model
        .encoder
        .layers
        .iter_mut()
        .chain(model.decoder.layers.iter_mut())
    {
        layer.weight = it.next().unwrap();
        layer.bias = it.next().unwrap();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_config() -> CvaeConfig {
        CvaeConfig {
            d_x: 3,
            t_len: 8,
            d_z: 2,
            hidden_widths: vec![16],
            likelihood_sigma: 0.1,
            epochs: 0,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 12,
            mc_samples: 1,
            kl_weight: 1.0,
        }
    }

    fn toy_data(n: usize, cfg: &CvaeConfig, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = Xoshiro::new(seed);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..cfg.d_x).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let ys: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                (0..cfg.t_len)
                    .map(|t| {
                        (x[0] + t as f64 / cfg.t_len as f64).sin() + 0.05 * rng.normal()
                    })
                    .collect()
            })
            .collect();
        (xs, ys)
    }

    #[test]
    fn zero_network_encodes_to_standard_normal_posterior() {
        let mut model = CvaeModel::init(tiny_config(), 0).unwrap();
        let n = model.param_count();
        model.set_params_flat(&vec![0.0; n]).unwrap();
        let q = model.encode(&[0.1, 0.2, 0.3], &vec![1.0; 8]).unwrap();
        assert_eq!(q.mu, vec![0.0, 0.0]);
        assert_eq!(q.log_var, vec![0.0, 0.0]);
        let y = model.decode(&[0.1, 0.2, 0.3], &[0.5, -0.5]).unwrap();
        assert_eq!(y, vec![0.0; 8]);
    }

    #[test]
    fn encode_output_split_and_clamp() {
        let model = CvaeModel::init(tiny_config(), 0).unwrap();
        let q = model.encode(&[0.5, -0.5, 0.25], &vec![0.3; 8]).unwrap();
        assert_eq!(q.mu.len(), 2);
        assert_eq!(q.log_var.len(), 2);
        assert!(q.log_var.iter().all(|&lv| (LOGVAR_MIN..=LOGVAR_MAX).contains(&lv)));
        assert!(model.encode(&[0.5, -0.5], &vec![0.3; 8]).is_err());
        assert!(model.encode(&[0.5, -0.5, 0.25], &vec![0.3; 7]).is_err());
    }

    #[test]
    fn reparameterize_degenerate_variance() {
        let q = LatentGaussian {
            mu: vec![1.0, -2.0],
            log_var: vec![LOGVAR_MIN, LOGVAR_MIN],
        };
        let eps = vec![3.0, -1.5];
        let z = reparameterize_with_eps(&q, &eps);
        for i in 0..2 {
            let dev = (z[i] - q.mu[i]).abs();
            assert!(dev <= 0.007 * eps[i].abs());
            assert!(dev > 0.0);
        }
        // Forced eps = 0 recovers mu exactly.
        let z0 = reparameterize_with_eps(&q, &[0.0, 0.0]);
        assert_eq!(z0, q.mu);
    }

    #[test]
    fn reparameterize_monte_carlo_moments() {
        let q = LatentGaussian {
            mu: vec![0.7, -0.3],
            log_var: vec![0.5_f64.ln(), 2.0_f64.ln()],
        };
        let mut rng = Xoshiro::new(33);
        let n = 100_000;
        let mut sums = [0.0_f64; 2];
        let mut sq = [0.0_f64; 2];
        for _ in 0..n {
            let z = reparameterize(&q, &mut rng);
            for i in 0..2 {
                sums[i] += z[i];
                sq[i] += z[i] * z[i];
            }
        }
        for i in 0..2 {
            let mean = sums[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let true_var = q.log_var[i].exp();
            let se = (true_var / n as f64).sqrt();
            assert!((mean - q.mu[i]).abs() < 4.0 * se, "mean {mean} vs {}", q.mu[i]);
            assert!((var - true_var).abs() < 0.05 * true_var, "var {var} vs {true_var}");
        }
    }

    #[test]
    fn kl_closed_form_examples() {
        let zero = LatentGaussian {
            mu: vec![0.0; 3],
            log_var: vec![0.0; 3],
        };
        assert_eq!(kl_diag_gaussian_to_std_normal(&zero), 0.0);

        let shifted = LatentGaussian {
            mu: vec![1.0, 0.0, 0.0],
            log_var: vec![0.0; 3],
        };
        assert!((kl_diag_gaussian_to_std_normal(&shifted) - 0.5).abs() < 1e-15);

        let wide = LatentGaussian {
            mu: vec![0.0; 3],
            log_var: vec![4.0_f64.ln(), 0.0, 0.0],
        };
        let want = 0.5 * (4.0 - 1.0 - 4.0_f64.ln());
        assert!((kl_diag_gaussian_to_std_normal(&wide) - want).abs() < 1e-9);
        assert_relative_eq!(kl_diag_gaussian_to_std_normal(&wide), 0.8068528194400547, epsilon = 1e-9);
    }

    #[test]
    fn perfect_reconstruction_leaves_only_the_constant() {
        let cfg = tiny_config();
        let mut model = CvaeModel::init(cfg.clone(), 0).unwrap();
        let n = model.param_count();
        model.set_params_flat(&vec![0.0; n]).unwrap();
        // Zero network: mu = lv = 0, yhat = 0. Feeding y = 0 makes the
        // reconstruction perfect, so only the NLL constant remains.
        let xs = vec![vec![0.2, -0.1, 0.4]; 3];
        let ys = vec![vec![0.0; cfg.t_len]; 3];
        let eps = vec![Tensor::zeros(vec![3, cfg.d_z])];
        let loss = elbo_loss_with_eps(&model, &xs, &ys, &eps).unwrap();
        assert_eq!(loss, cfg.nll_constant());
    }

    #[test]
    fn batch_loss_equals_mean_of_singletons_under_common_eps() {
        let cfg = tiny_config();
        let model = CvaeModel::init(cfg.clone(), 0).unwrap();
        let (xs, ys) = toy_data(5, &cfg, 77);
        let mut rng = Xoshiro::new(5);
        let eps_all = Tensor::new(vec![5, cfg.d_z], rng.normal_vec(5 * cfg.d_z)).unwrap();
        let batch = elbo_loss_with_eps(&model, &xs, &ys, &[eps_all.clone()]).unwrap();
        let mut acc = 0.0;
        for i in 0..5 {
            let e = Tensor::new(
                vec![1, cfg.d_z],
                eps_all.data()[i * cfg.d_z..(i + 1) * cfg.d_z].to_vec(),
            )
            .unwrap();
            acc += elbo_loss_with_eps(
                &model,
                &xs[i..i + 1].to_vec(),
                &ys[i..i + 1].to_vec(),
                &[e],
            )
            .unwrap();
        }
        assert_relative_eq!(batch, acc / 5.0, max_relative = 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let model = CvaeModel::init(tiny_config(), 0).unwrap();
        let mut rng = Xoshiro::new(1);
        assert!(matches!(
            elbo_loss(&model, &[], &[], &mut rng),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn epochs_zero_returns_initialized_model_and_empty_trace() {
        let cfg = tiny_config();
        let (xs, ys) = toy_data(6, &cfg, 3);
        let out = train_cvae(&xs, &ys, &cfg, 4).unwrap();
        assert!(out.loss_trace.is_empty());
        assert_eq!(out.model, CvaeModel::init(cfg, 4).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = CvaeConfig {
            epochs: 3,
            ..tiny_config()
        };
        let (xs, ys) = toy_data(8, &cfg, 9);
        let a = train_cvae(&xs, &ys, &cfg, 0).unwrap();
        let b = train_cvae(&xs, &ys, &cfg, 0).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn loss_decreases_over_200_steps_median_of_5_seeds() {
        let mut decreases = Vec::new();
        for seed in 0..5 {
            let cfg = CvaeConfig {
                epochs: 100, // 8 samples / batch 4 = 2 steps per epoch
                batch_size: 4,
                seed,
                ..tiny_config()
            };
            let (xs, ys) = toy_data(8, &cfg, 100 + seed);
            let out = train_cvae(&xs, &ys, &cfg, 0).unwrap();
            assert_eq!(out.loss_trace.len(), 200);
            decreases.push(out.loss_trace[0] - out.loss_trace[199]);
        }
        decreases.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            decreases[2] > 0.0,
            "median loss decrease not positive: {decreases:?}"
        );
    }

    #[test]
    fn overfits_a_single_sample() {
        // Train-to-overfit oracle: one sample, enough steps, then the
        // posterior-mean reconstruction should be almost exact.
        let cfg = CvaeConfig {
            d_x: 3,
            t_len: 8,
            d_z: 2,
            hidden_widths: vec![32],
            likelihood_sigma: 0.1,
            epochs: 5000,
            batch_size: 1,
            learning_rate: 1e-3,
            seed: 21,
            mc_samples: 1,
            kl_weight: 0.0,
        };
        let x = vec![0.5, -0.25, 0.75];
        let y: Vec<f64> = (0..8).map(|t| (t as f64 * 0.7).sin() * 0.8).collect();
        let out = train_cvae(&[x.clone()], &[y.clone()], &cfg, 0).unwrap();
        let q = out.model.encode(&x, &y).unwrap();
        let yhat = out.model.decode(&x, &q.mu).unwrap();
        let mse: f64 =
            y.iter().zip(&yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
        assert!(mse < 1e-3, "overfit MSE {mse}");
    }

    #[test]
    fn param_count_matches_formula() {
        let cfg = tiny_config();
        let model = CvaeModel::init(cfg.clone(), 0).unwrap();
        assert_eq!(model.param_count(), cfg.param_count());
        // Hand formula for d_x=3, T=8, d_z=2, hidden [16]:
        // enc: (11*16 + 16) + (16*4 + 4) = 192 + 68 = 260
        // dec: (5*16 + 16) + (16*8 + 8) = 96 + 136 = 232
        assert_eq!(cfg.param_count(), 260 + 232);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = CvaeConfig {
            epochs: 2,
            ..tiny_config()
        };
        let (xs, ys) = toy_data(6, &cfg, 50);
        let out = train_cvae(&xs, &ys, &cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lccv");
        save_checkpoint(&out.model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, out.model);
        // Saving the loaded model reproduces the file byte-for-byte.
        let path2 = dir.path().join("model2.lccv");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let model = CvaeModel::init(tiny_config(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lccv");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bad_magic),
            Err(CoreError::Format { .. })
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            checkpoint_from_bytes(truncated),
            Err(CoreError::Format { .. })
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            checkpoint_from_bytes(&trailing),
            Err(CoreError::Format { .. })
        ));
    }
}
