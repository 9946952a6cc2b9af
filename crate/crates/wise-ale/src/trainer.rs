//! Mini-batch stochastic gradient ascent: shuffle, batch, evaluate the
//! objective, step the optimizer, log metrics, checkpoint.
//!
//! Every run is fully determined by its config and seed: all randomness
//! (train/eval split, per-epoch shuffles, reparameterization noise) comes
//! from fixed ChaCha streams derived from the run seed, and step execution
//! is single-threaded. The last short batch of an epoch is dropped so the
//! batch size stays constant.

use crate::autodiff::{DenseArray, Tape};
use crate::data::{
    generate_sine, generate_synthetic_digits, load_mnist_idx, MnistSplit, SineMeta,
};
use crate::error::{Error, Result};
use crate::gaussian::draw_standard_normal;
use crate::model::{init_params, Architecture, ModelParams};
use crate::objective::{
    build_objective, recon_log_likelihood, Likelihood, ObjectiveKind, ObjectiveVariant,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::path::PathBuf;
use std::time::Instant;

// ChaCha stream ids for the independent randomness purposes of a run.
const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Where the training data comes from.
#[derive(Debug, Clone)]
pub enum DatasetKind {
    /// Generated sine waves (seeded by the run seed).
    Sine { count: usize },
    /// 28×28 IDX images on disk, binarized at 0.5; optionally truncated to
    /// the first `limit` images.
    Mnist { dir: PathBuf, limit: Option<usize> },
    /// Generated binary digit glyphs (seeded by the run seed).
    SyntheticDigits { count: usize },
}

impl DatasetKind {
    pub fn d_x(&self) -> usize {
        match self {
            DatasetKind::Sine { .. } => crate::data::SINE_SAMPLES,
            _ => 784,
        }
    }
}

/// Materialized training matrix plus whatever side information the dataset
/// carries.
pub struct TrainData {
    pub x: DenseArray,
    pub sine_meta: Option<Vec<SineMeta>>,
    pub labels: Option<Vec<u8>>,
}

pub fn materialize(kind: &DatasetKind, seed: u64) -> Result<TrainData> {
    match kind {
        DatasetKind::Sine { count } => {
            let ds = generate_sine(*count, seed)?;
            Ok(TrainData {
                x: ds.data,
                sine_meta: Some(ds.meta),
                labels: None,
            })
        }
        DatasetKind::Mnist { dir, limit } => {
            let ds = load_mnist_idx(dir, MnistSplit::Train, Some(0.5))?;
            let (images, labels) = match limit {
                Some(n) if *n < ds.labels.len() => {
                    let d = ds.images.shape()[1];
                    let data = ds.images.data()[..n * d].to_vec();
                    (
                        DenseArray::from_vec(vec![*n, d], data)?,
                        ds.labels[..*n].to_vec(),
                    )
                }
                _ => (ds.images, ds.labels),
            };
            Ok(TrainData {
                x: images,
                sine_meta: None,
                labels: Some(labels),
            })
        }
        DatasetKind::SyntheticDigits { count } => {
            let ds = generate_synthetic_digits(*count, seed)?;
            Ok(TrainData {
                x: ds.images,
                sine_meta: None,
                labels: Some(ds.labels),
            })
        }
    }
}

/// Optimizer selection.
#[derive(Debug, Clone, Copy)]
pub enum OptimizerKind {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerKind::Adam { lr, .. } | OptimizerKind::Sgd { lr } => *lr,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::adam(1e-3)
    }
}

/// First/second moments and step count for Adam.
pub struct AdamState {
    m: Vec<DenseArray>,
    v: Vec<DenseArray>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&DenseArray]) -> Self {
        AdamState {
            m: params.iter().map(|p| DenseArray::zeros(p.shape())).collect(),
            v: params.iter().map(|p| DenseArray::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update; `grads` are gradients of the quantity to
/// *minimize*.
pub fn adam_step(
    params: &mut [&mut DenseArray],
    grads: &[DenseArray],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::usage("parameter/gradient/state arity mismatch"));
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Full description of one training run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub objective: ObjectiveKind,
    pub arch: Architecture,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Rows held out of training for evaluation.
    pub eval_count: usize,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 && matches!(self.objective.variant, ObjectiveVariant::WiseAle) {
            return Err(Error::usage(
                "the aggregate objective needs batch_size ≥ 2 (the prior term is a mixture)",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::usage("epochs must be positive"));
        }
        if self.optimizer.lr() < 0.0 {
            return Err(Error::usage("learning rate must be non-negative"));
        }
        if self.arch.d_x != self.dataset.d_x() {
            return Err(Error::usage(format!(
                "architecture d_x {} does not match dataset width {}",
                self.arch.d_x,
                self.dataset.d_x()
            )));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub recon_term: f64,
    pub prior_term: f64,
    pub objective: f64,
    /// Σ_i exact KL(q_i ‖ prior), the common yardstick across objectives.
    pub aevb_kl: f64,
    /// recon_term - aevb_kl (no -M log M constant).
    pub elbo_proxy: f64,
    pub wall_ms: u64,
    pub clamp_count: u64,
}

/// Everything a finished run leaves behind.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRecord>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

fn gather_rows(x: &DenseArray, indices: &[usize]) -> DenseArray {
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    DenseArray::from_vec(vec![indices.len(), d], data).expect("gather shape")
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs the configured training loop. Deterministic given the config;
/// writes `metrics.csv`, per-epoch checkpoints, and `model.bin` under the
/// output directory.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = materialize(&config.dataset, config.seed)?;
    let n = data.x.shape()[0];
    if config.eval_count >= n {
        return Err(Error::usage(format!(
            "eval_count {} must be smaller than the dataset ({n} rows)",
            config.eval_count
        )));
    }
    if n - config.eval_count < config.batch_size {
        return Err(Error::usage(
            "not enough training rows for a single batch after the eval split",
        ));
    }

    // Held-out split from a seeded permutation; training never sees it.
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut stream_rng(config.seed, STREAM_SPLIT));
    let eval_indices: Vec<usize> = all[..config.eval_count].to_vec();
    let mut train_indices: Vec<usize> = all[config.eval_count..].to_vec();
    debug_assert!(eval_indices.iter().all(|i| !train_indices.contains(i)));

    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(config.out_dir.display().to_string(), e))?;
    let metrics_path = config.out_dir.join("metrics.csv");
    let checkpoint_path = config.out_dir.join("model.bin");

    let mut params = init_params(&config.arch, config.seed);
    let mut adam = AdamState::new(&params.tensors());
    let mut shuffle_rng = stream_rng(config.seed, STREAM_SHUFFLE);
    let mut noise_rng = stream_rng(config.seed, STREAM_NOISE);

    let m = config.batch_size;
    let s_draws = config.objective.mc_samples;
    let mut metrics: Vec<MetricsRecord> = Vec::new();
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        train_indices.shuffle(&mut shuffle_rng);
        let n_batches = train_indices.len() / m; // last short batch dropped
        for b in 0..n_batches {
            let t0 = Instant::now();
            let batch_idx = &train_indices[b * m..(b + 1) * m];
            let x = gather_rows(&data.x, batch_idx);

            let mut tape = Tape::new();
            let nodes = params.insert_into(&mut tape);
            let x_node = tape.input(x.clone());
            let post = nodes.encode(&mut tape, x_node)?;
            let noise: Vec<DenseArray> = (0..s_draws)
                .map(|_| draw_standard_normal(&mut noise_rng, &[m, config.arch.d_z]))
                .collect();
            let (obj_node, report) = build_objective(
                &mut tape,
                &x,
                &post,
                &mut |t, z| nodes.decode(t, z),
                &config.objective,
                config.arch.likelihood,
                &noise,
            )?;
            if !report.objective.is_finite() {
                let last = metrics
                    .last()
                    .map(|r| format!("last finite step {}: objective {}", r.step, r.objective))
                    .unwrap_or_else(|| "no finite step logged".into());
                return Err(Error::NonFiniteObjective {
                    step,
                    detail: last,
                });
            }

            let grads = tape.backward(obj_node)?;
            let param_ids = nodes.param_ids();
            // ascent on the objective = descent on its negation
            let neg_grads: Vec<DenseArray> = param_ids
                .iter()
                .map(|&id| grads.get(id).map(|v| -v))
                .collect();
            match config.optimizer {
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let mut tensors = params.tensors_mut();
                    adam_step(&mut tensors, &neg_grads, &mut adam, lr, beta1, beta2, eps)?;
                }
                OptimizerKind::Sgd { lr } => {
                    for (p, g) in params.tensors_mut().into_iter().zip(&neg_grads) {
                        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                            *pv -= lr * gv;
                        }
                    }
                }
            }

            let batch = post.to_batch(&tape)?;
            let aevb_kl: f64 = batch.exact_kl_to_prior().iter().sum();
            metrics.push(MetricsRecord {
                epoch,
                step,
                recon_term: report.recon_term,
                prior_term: report.prior_term,
                objective: report.objective,
                aevb_kl,
                elbo_proxy: report.recon_term - aevb_kl,
                wall_ms: t0.elapsed().as_millis() as u64,
                clamp_count: report.clamp_count,
            });
            step += 1;
        }
        // crash-safe flush once per epoch
        crate::report::write_metrics_csv(&metrics_path, &metrics)?;
        params.save(&config.out_dir.join(format!("checkpoint_epoch_{epoch:03}.bin")))?;
    }

    crate::report::write_metrics_csv(&metrics_path, &metrics)?;
    params.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        params,
        metrics,
        metrics_path,
        checkpoint_path,
        train_indices,
        eval_indices,
    })
}

/// Aggregate evaluation on held-out rows; mutates nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    /// Sine: mean squared error of the posterior-mean reconstruction
    /// against the noiseless metadata wave. Images: mean Bernoulli negative
    /// log likelihood per image.
    pub recon_error: f64,
    /// Mean per-sample exact KL to the prior.
    pub aevb_kl: f64,
    /// Mean per-sample reconstruction log likelihood (one seeded draw)
    /// minus `aevb_kl`.
    pub elbo_proxy: f64,
    pub n: usize,
}

pub fn evaluate(
    params: &ModelParams,
    x: &DenseArray,
    sine_meta: Option<&[SineMeta]>,
    seed: u64,
) -> Result<EvalRecord> {
    let n = x.shape()[0];
    if n == 0 {
        return Err(Error::usage("evaluation set is empty"));
    }
    if x.shape()[1] != params.arch.d_x {
        return Err(Error::usage(format!(
            "evaluation width {} does not match the model's d_x {}",
            x.shape()[1],
            params.arch.d_x
        )));
    }
    if let Some(meta) = sine_meta {
        if meta.len() != n {
            return Err(Error::usage("metadata rows do not match the data rows"));
        }
    }
    let (means, log_vars) = params.encode_values(x)?;
    let batch = crate::gaussian::GaussianBatch::new(means.clone(), log_vars.clone())?;
    let kl = batch.exact_kl_to_prior();
    let kl_mean: f64 = kl.iter().sum::<f64>() / n as f64;

    // one seeded reparameterized draw for the likelihood-based terms
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = draw_standard_normal(&mut rng, &[n, params.arch.d_z]);
    let z = crate::gaussian::sample_reparameterized(&means, &log_vars, &noise)?;
    let xhat_draw = params.decode_values(&z)?;
    let ll = recon_log_likelihood(x, &xhat_draw, params.arch.likelihood)?;
    let ll_mean: f64 = ll.iter().sum::<f64>() / n as f64;

    let recon_error = match sine_meta {
        Some(meta) => {
            // deterministic reconstruction from the posterior mean
            let xhat = params.decode_values(&means)?;
            let d = x.shape()[1];
            let mut acc = 0.0;
            for (i, m) in meta.iter().enumerate() {
                let clean = crate::data::sine_clean_row(m);
                let mut row = 0.0;
                for (k, &c) in clean.iter().enumerate() {
                    let r = xhat.at2(i, k) - c;
                    row += r * r;
                }
                acc += row / d as f64;
            }
            acc / n as f64
        }
        None => -ll_mean,
    };

    Ok(EvalRecord {
        recon_error,
        aevb_kl: kl_mean,
        elbo_proxy: ll_mean - kl_mean,
        n,
    })
}

/// One gradient-certification case: a named objective configuration checked
/// against central differences on a small full model.
pub struct GradCheckCase {
    pub name: String,
    pub report: crate::autodiff::CheckReport,
}

fn with_tensors(base: &ModelParams, tensors: &[DenseArray]) -> ModelParams {
    let mut p = base.clone();
    for (slot, t) in p.tensors_mut().into_iter().zip(tensors) {
        *slot = t.clone();
    }
    p
}

/// Certifies full-model gradients of all three objectives (both likelihood
/// families) on a d_x=6, d_z=2, hidden=8, M=3 model with frozen noise.
pub fn grad_check_suite(tolerance: f64) -> Result<Vec<GradCheckCase>> {
    let kinds = [
        ObjectiveKind::wise_ale(),
        ObjectiveKind::aevb(),
        ObjectiveKind::beta_vae(4.0)?,
    ];
    let likelihoods = [
        ("gaussian", Likelihood::Gaussian { sigma: 0.1 }),
        ("bernoulli", Likelihood::Bernoulli),
    ];
    let mut cases = Vec::new();
    for (lname, lik) in likelihoods {
        let arch = Architecture::new(6, 2, vec![8], vec![8], lik)?;
        let base = init_params(&arch, 2024);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x = match lik {
            Likelihood::Bernoulli => {
                let data: Vec<f64> = (0..18)
                    .map(|_| if rng.gen_range(0.0..1.0) < 0.5 { 0.0 } else { 1.0 })
                    .collect();
                DenseArray::from_vec(vec![3, 6], data)?
            }
            Likelihood::Gaussian { .. } => {
                let data: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
                DenseArray::from_vec(vec![3, 6], data)?
            }
        };
        let noise = vec![draw_standard_normal(&mut rng, &[3, 2])];
        for kind in kinds {
            let eval = |tensors: &[DenseArray]| -> Result<f64> {
                let p = with_tensors(&base, tensors);
                let mut tape = Tape::new();
                let nodes = p.insert_into(&mut tape);
                let x_node = tape.input(x.clone());
                let post = nodes.encode(&mut tape, x_node)?;
                let (obj, _) = build_objective(
                    &mut tape,
                    &x,
                    &post,
                    &mut |t, z| nodes.decode(t, z),
                    &kind,
                    lik,
                    &noise,
                )?;
                Ok(tape.value(obj).scalar_value())
            };
            // analytic gradient at the base point
            let tensors: Vec<DenseArray> = base.tensors().into_iter().cloned().collect();
            let mut tape = Tape::new();
            let nodes = base.insert_into(&mut tape);
            let x_node = tape.input(x.clone());
            let post = nodes.encode(&mut tape, x_node)?;
            let (obj, _) = build_objective(
                &mut tape,
                &x,
                &post,
                &mut |t, z| nodes.decode(t, z),
                &kind,
                lik,
                &noise,
            )?;
            let grads = tape.backward(obj)?;
            let analytic: Vec<DenseArray> = nodes
                .param_ids()
                .iter()
                .map(|&id| grads.get(id).clone())
                .collect();
            let report = crate::autodiff::finite_diff_check(
                eval, &tensors, &analytic, 1e-5, tolerance, 99,
            )?;
            cases.push(GradCheckCase {
                name: format!("{}/{}", kind.name(), lname),
                report,
            });
        }
    }
    Ok(cases)
}
