//! The three training objectives and the expensive full-reconstruction
//! oracle.
//!
//! All three objectives share the reconstruction term
//! `Σ_i (1/S) Σ_s log p(x_i | z_i^s)` over S reparameterized draws per
//! sample and differ in the prior constraint:
//!
//! - aggregate (WiSE-ALE): `KL_UB(mixture ‖ N(0,I))` of the whole batch,
//! - per-sample (AEVB):    `Σ_i KL(q_i ‖ N(0,I))`,
//! - weighted per-sample (β-VAE): `β · Σ_i KL(q_i ‖ N(0,I))`.
//!
//! The returned scalar is the objective to *maximize*; the trainer negates
//! its gradients. The full-reconstruction oracle evaluates the exact
//! pairwise (every sample against every decoded latent) estimate that the
//! simplified reconstruction term approximates; it is evaluation-only and
//! never used as a training signal.

use crate::autodiff::{DenseArray, NodeId, Tape, LOG_CLAMP};
use crate::error::{Error, Result};
use crate::gaussian::{
    exact_kl_sum_node, kl_upper_bound_node, sample_reparameterized_node, GaussianBatch,
    PosteriorNodes,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Observation likelihood families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    /// Binary pixels; the decoder output is a sigmoid probability.
    Bernoulli,
    /// Real-valued observations with a fixed decoder standard deviation.
    Gaussian { sigma: f64 },
}

/// Which objective to optimize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveVariant {
    WiseAle,
    Aevb,
    BetaVae { beta: f64 },
}

/// Objective selection plus its estimator knobs.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveKind {
    pub variant: ObjectiveVariant,
    /// Reparameterized draws per sample (S).
    pub mc_samples: usize,
    /// Include the constant `-M log M` in the reported objective value
    /// (aggregate variant only; zero gradient either way).
    pub include_nlogn_constant: bool,
}

impl ObjectiveKind {
    pub fn new(
        variant: ObjectiveVariant,
        mc_samples: usize,
        include_nlogn_constant: bool,
    ) -> Result<Self> {
        if let ObjectiveVariant::BetaVae { beta } = variant {
            if beta <= 0.0 {
                return Err(Error::usage(format!("beta must be positive, got {beta}")));
            }
        }
        if mc_samples == 0 {
            return Err(Error::usage("mc_samples must be at least 1"));
        }
        Ok(ObjectiveKind {
            variant,
            mc_samples,
            include_nlogn_constant,
        })
    }

    pub fn wise_ale() -> Self {
        ObjectiveKind {
            variant: ObjectiveVariant::WiseAle,
            mc_samples: 1,
            include_nlogn_constant: false,
        }
    }

    pub fn aevb() -> Self {
        ObjectiveKind {
            variant: ObjectiveVariant::Aevb,
            mc_samples: 1,
            include_nlogn_constant: false,
        }
    }

    pub fn beta_vae(beta: f64) -> Result<Self> {
        Self::new(ObjectiveVariant::BetaVae { beta }, 1, false)
    }

    pub fn name(&self) -> &'static str {
        match self.variant {
            ObjectiveVariant::WiseAle => "wise-ale",
            ObjectiveVariant::Aevb => "aevb",
            ObjectiveVariant::BetaVae { .. } => "beta-vae",
        }
    }
}

/// Decomposed per-step scalars of one objective evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveReport {
    pub recon_term: f64,
    pub prior_term: f64,
    pub objective: f64,
    pub per_sample_kl_mean: f64,
    pub clamp_count: u64,
}

fn gaussian_ll_constant(sigma: f64) -> f64 {
    (std::f64::consts::TAU * sigma * sigma).ln()
}

/// Mirrors the tape's log guard: negative input is a domain error; values
/// in `[0, LOG_CLAMP)` log as `ln(LOG_CLAMP)`.
fn guarded_ln(x: f64, op: &'static str) -> Result<f64> {
    if x < 0.0 {
        return Err(Error::NumericDomain {
            op,
            detail: format!("negative input {x}"),
        });
    }
    Ok(if x < LOG_CLAMP { LOG_CLAMP.ln() } else { x.ln() })
}

/// Per-sample log likelihood of `x` under decoder outputs `decoder_out`
/// (value level). Bernoulli: `Σ_px x·ln x̂ + (1-x)·ln(1-x̂)` with the log
/// guard. Gaussian: `-½ Σ_dims [(x-x̂)²/σ² + ln(2πσ²)]`.
pub fn recon_log_likelihood(
    x: &DenseArray,
    decoder_out: &DenseArray,
    likelihood: Likelihood,
) -> Result<Vec<f64>> {
    if x.shape() != decoder_out.shape() || x.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "recon_log_likelihood",
            lhs: x.shape().to_vec(),
            rhs: decoder_out.shape().to_vec(),
        });
    }
    let (m, d) = (x.shape()[0], x.shape()[1]);
    match likelihood {
        Likelihood::Bernoulli => {
            if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::usage(
                    "Bernoulli likelihood requires data in [0, 1]",
                ));
            }
            let mut out = Vec::with_capacity(m);
            for i in 0..m {
                let mut acc = 0.0;
                for k in 0..d {
                    let xv = x.at2(i, k);
                    let xh = decoder_out.at2(i, k);
                    let a = xv * guarded_ln(xh, "recon_log_likelihood")?;
                    let b = (-xv + 1.0) * guarded_ln(-xh + 1.0, "recon_log_likelihood")?;
                    acc += a + b;
                }
                out.push(acc);
            }
            Ok(out)
        }
        Likelihood::Gaussian { sigma } => {
            if sigma <= 0.0 {
                return Err(Error::usage(format!(
                    "Gaussian likelihood requires sigma > 0, got {sigma}"
                )));
            }
            let inv_s2 = 1.0 / (sigma * sigma);
            let cst = gaussian_ll_constant(sigma);
            let mut out = Vec::with_capacity(m);
            for i in 0..m {
                let mut acc = 0.0;
                for k in 0..d {
                    let r = x.at2(i, k) - decoder_out.at2(i, k);
                    acc += ((r * r) * inv_s2 + cst) * -0.5;
                }
                out.push(acc);
            }
            Ok(out)
        }
    }
}

/// Differentiable per-sample log likelihood node (shape `[M]`); same
/// arithmetic as [`recon_log_likelihood`], element for element.
pub fn recon_log_likelihood_node(
    tape: &mut Tape,
    x: NodeId,
    decoder_out: NodeId,
    likelihood: Likelihood,
) -> Result<NodeId> {
    match likelihood {
        Likelihood::Bernoulli => {
            if tape.value(x).iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::usage(
                    "Bernoulli likelihood requires data in [0, 1]",
                ));
            }
            let log_xh = tape.log(decoder_out)?;
            let a = tape.mul(x, log_xh)?;
            let neg_xh = tape.neg(decoder_out);
            let one_minus_xh = tape.scalar_add(neg_xh, 1.0);
            let log_1m = tape.log(one_minus_xh)?;
            let neg_x = tape.neg(x);
            let one_minus_x = tape.scalar_add(neg_x, 1.0);
            let b = tape.mul(one_minus_x, log_1m)?;
            let ll = tape.add(a, b)?;
            tape.sum_axis(ll, 1)
        }
        Likelihood::Gaussian { sigma } => {
            if sigma <= 0.0 {
                return Err(Error::usage(format!(
                    "Gaussian likelihood requires sigma > 0, got {sigma}"
                )));
            }
            let inv_s2 = 1.0 / (sigma * sigma);
            let cst = gaussian_ll_constant(sigma);
            let r = tape.sub(x, decoder_out)?;
            let r2 = tape.square(r);
            let q = tape.scalar_mul(r2, inv_s2);
            let t = tape.scalar_add(q, cst);
            let t2 = tape.scalar_mul(t, -0.5);
            tape.sum_axis(t2, 1)
        }
    }
}

/// Builds the reconstruction term `Σ_i (1/S) Σ_s log p(x_i | z_i^s)` on the
/// tape and returns the scalar node.
fn recon_term_node(
    tape: &mut Tape,
    x_node: NodeId,
    post: &PosteriorNodes,
    decode: &mut dyn FnMut(&mut Tape, NodeId) -> Result<NodeId>,
    likelihood: Likelihood,
    noise: &[DenseArray],
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for eps in noise {
        if eps.shape() != [post.m, post.d_z] {
            return Err(Error::usage(format!(
                "noise draw must be [{}, {}], got {:?}",
                post.m,
                post.d_z,
                eps.shape()
            )));
        }
        let eps_node = tape.input(eps.clone());
        let z = sample_reparameterized_node(tape, post.means, post.log_vars, eps_node)?;
        let xhat = decode(tape, z)?;
        let ll = recon_log_likelihood_node(tape, x_node, xhat, likelihood)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ll)?,
            None => ll,
        });
    }
    let acc = acc.ok_or_else(|| Error::usage("at least one noise draw is required"))?;
    let per_sample = tape.scalar_mul(acc, 1.0 / noise.len() as f64);
    Ok(tape.sum_all(per_sample))
}

fn make_report(
    tape: &Tape,
    recon: NodeId,
    prior: NodeId,
    objective: NodeId,
    post: &PosteriorNodes,
) -> Result<ObjectiveReport> {
    let batch = post.to_batch(tape)?;
    let kl = batch.exact_kl_to_prior();
    let per_sample_kl_mean = kl.iter().sum::<f64>() / kl.len() as f64;
    Ok(ObjectiveReport {
        recon_term: tape.value(recon).scalar_value(),
        prior_term: tape.value(prior).scalar_value(),
        objective: tape.value(objective).scalar_value(),
        per_sample_kl_mean,
        clamp_count: tape.clamp_events(),
    })
}

/// Aggregate-prior objective: reconstruction term minus the analytic KL
/// upper bound of the batch mixture; optionally offset by the constant
/// `-M log M`.
pub fn wise_ale_objective(
    tape: &mut Tape,
    x: &DenseArray,
    post: &PosteriorNodes,
    decode: &mut dyn FnMut(&mut Tape, NodeId) -> Result<NodeId>,
    kind: &ObjectiveKind,
    likelihood: Likelihood,
    noise: &[DenseArray],
) -> Result<(NodeId, ObjectiveReport)> {
    let x_node = tape.input(x.clone());
    let recon = recon_term_node(tape, x_node, post, decode, likelihood, noise)?;
    let prior = kl_upper_bound_node(tape, post)?;
    let mut objective = tape.sub(recon, prior)?;
    if kind.include_nlogn_constant {
        let m = post.m as f64;
        objective = tape.scalar_add(objective, -(m * m.ln()));
    }
    let report = make_report(tape, recon, prior, objective, post)?;
    Ok((objective, report))
}

/// Per-sample-prior objective: reconstruction term minus
/// `β · Σ_i KL(q_i ‖ N(0,I))`. β = 1 is the plain estimator; β > 1 weights
/// the regularizer harder.
pub fn aevb_objective(
    tape: &mut Tape,
    x: &DenseArray,
    post: &PosteriorNodes,
    decode: &mut dyn FnMut(&mut Tape, NodeId) -> Result<NodeId>,
    beta: f64,
    likelihood: Likelihood,
    noise: &[DenseArray],
) -> Result<(NodeId, ObjectiveReport)> {
    if beta <= 0.0 {
        return Err(Error::usage(format!("beta must be positive, got {beta}")));
    }
    let x_node = tape.input(x.clone());
    let recon = recon_term_node(tape, x_node, post, decode, likelihood, noise)?;
    let kl_sum = exact_kl_sum_node(tape, post)?;
    let prior = tape.scalar_mul(kl_sum, beta);
    let objective = tape.sub(recon, prior)?;
    let report = make_report(tape, recon, prior, objective, post)?;
    Ok((objective, report))
}

/// Dispatch on the configured variant.
pub fn build_objective(
    tape: &mut Tape,
    x: &DenseArray,
    post: &PosteriorNodes,
    decode: &mut dyn FnMut(&mut Tape, NodeId) -> Result<NodeId>,
    kind: &ObjectiveKind,
    likelihood: Likelihood,
    noise: &[DenseArray],
) -> Result<(NodeId, ObjectiveReport)> {
    match kind.variant {
        ObjectiveVariant::WiseAle => {
            wise_ale_objective(tape, x, post, decode, kind, likelihood, noise)
        }
        ObjectiveVariant::Aevb => aevb_objective(tape, x, post, decode, 1.0, likelihood, noise),
        ObjectiveVariant::BetaVae { beta } => {
            aevb_objective(tape, x, post, decode, beta, likelihood, noise)
        }
    }
}

/// Largest batch the pairwise oracle accepts (cost is M² decodes × S).
pub const FULL_RECON_MAX_BATCH: usize = 16;

/// Noise for draw `s` of the oracle, shared across components so that
/// duplicated components receive identical draws and results are
/// independent of evaluation order.
pub fn oracle_noise(seed: u64, s: usize, d_z: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    (0..d_z).map(|_| rng.sample(StandardNormal)).collect()
}

/// Monte-Carlo estimate of the full pairwise reconstruction likelihood
/// `Σ_i E_{q_i}[(1/M) Σ_j log p(x_j | z)]`: for each sample, draw S latents
/// from its posterior, decode each once, and score the decode against every
/// sample in the batch. Deterministic given `seed`; evaluation only.
pub fn full_recon_oracle(
    x: &DenseArray,
    posteriors: &GaussianBatch,
    decode: &mut dyn FnMut(&DenseArray) -> Result<DenseArray>,
    likelihood: Likelihood,
    s_draws: usize,
    seed: u64,
) -> Result<f64> {
    let m = posteriors.batch_size();
    if m > FULL_RECON_MAX_BATCH {
        return Err(Error::usage(format!(
            "full_recon_oracle caps the batch at {FULL_RECON_MAX_BATCH}, got {m}"
        )));
    }
    if s_draws == 0 {
        return Err(Error::usage("full_recon_oracle needs at least one draw"));
    }
    let d_z = posteriors.latent_dim();
    let d_x = x.shape()[1];
    let mut total = 0.0;
    for i in 0..m {
        let mut acc_s = 0.0;
        for s in 0..s_draws {
            let z = component_draw(posteriors, i, &oracle_noise(seed, s, d_z));
            let xhat = decode(&z)?;
            // score this decode against every sample in the batch
            let mut rep = Vec::with_capacity(m * d_x);
            for _ in 0..m {
                rep.extend_from_slice(xhat.data());
            }
            let tiled = DenseArray::from_vec(vec![m, d_x], rep)?;
            let ll = recon_log_likelihood(x, &tiled, likelihood)?;
            let mut inner = 0.0;
            for v in ll {
                inner += v;
            }
            acc_s += inner * (1.0 / m as f64);
        }
        total += acc_s * (1.0 / s_draws as f64);
    }
    Ok(total)
}

/// The simplified reconstruction estimate the objectives train on,
/// evaluated with the same counter-based draws as the oracle:
/// `Σ_i (1/S) Σ_s log p(x_i | z_i^s) - M log M`.
pub fn simplified_recon_estimate(
    x: &DenseArray,
    posteriors: &GaussianBatch,
    decode: &mut dyn FnMut(&DenseArray) -> Result<DenseArray>,
    likelihood: Likelihood,
    s_draws: usize,
    seed: u64,
) -> Result<f64> {
    if s_draws == 0 {
        return Err(Error::usage("at least one draw is required"));
    }
    let m = posteriors.batch_size();
    let d_z = posteriors.latent_dim();
    let d_x = x.shape()[1];
    let mut total = 0.0;
    for i in 0..m {
        let xi = DenseArray::from_vec(vec![1, d_x], x.data()[i * d_x..(i + 1) * d_x].to_vec())?;
        let mut acc_s = 0.0;
        for s in 0..s_draws {
            let z = component_draw(posteriors, i, &oracle_noise(seed, s, d_z));
            let xhat = decode(&z)?;
            acc_s += recon_log_likelihood(&xi, &xhat, likelihood)?[0];
        }
        total += acc_s * (1.0 / s_draws as f64);
    }
    let m_f = m as f64;
    Ok(total - m_f * m_f.ln())
}

/// One reparameterized draw from component `i` as a `[1, d_z]` array.
fn component_draw(posteriors: &GaussianBatch, i: usize, eps: &[f64]) -> DenseArray {
    let d_z = posteriors.latent_dim();
    let mut z = Vec::with_capacity(d_z);
    for (k, &e) in eps.iter().enumerate() {
        let mu = posteriors.means().at2(i, k);
        let lv = posteriors.log_vars().at2(i, k);
        z.push(mu + (0.5 * lv).exp() * e);
    }
    DenseArray::from_vec(vec![1, d_z], z).expect("component draw shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::ln_tau;
    use rand::Rng;

    #[test]
    fn bernoulli_uniform_half() {
        let x = DenseArray::from_rows(&[vec![0.5; 4]]);
        let xh = DenseArray::from_rows(&[vec![0.5; 4]]);
        let ll = recon_log_likelihood(&x, &xh, Likelihood::Bernoulli).unwrap();
        assert!((ll[0] - 4.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((ll[0] - (-2.772589)).abs() < 1e-6);
    }

    #[test]
    fn gaussian_zero_residual() {
        let x = DenseArray::from_rows(&[vec![0.3, -1.0]]);
        let ll = recon_log_likelihood(&x, &x, Likelihood::Gaussian { sigma: 1.0 }).unwrap();
        assert!((ll[0] - (-ln_tau())).abs() < 1e-12);
        assert!((ll[0] - (-1.837877)).abs() < 1e-6);
    }

    #[test]
    fn gaussian_unit_residual_in_one_dim() {
        let x = DenseArray::from_rows(&[vec![1.0, 2.0]]);
        let xh = DenseArray::from_rows(&[vec![0.0, 2.0]]);
        let ll = recon_log_likelihood(&x, &xh, Likelihood::Gaussian { sigma: 1.0 }).unwrap();
        assert!((ll[0] - (-0.5 - ln_tau())).abs() < 1e-12);
        assert!((ll[0] - (-2.337877)).abs() < 1e-6);
    }

    #[test]
    fn bernoulli_rejects_out_of_range_data() {
        let x = DenseArray::from_rows(&[vec![1.5]]);
        let xh = DenseArray::from_rows(&[vec![0.5]]);
        assert!(recon_log_likelihood(&x, &xh, Likelihood::Bernoulli).is_err());
    }

    /// Identity decoder on a 1-d latent: decode(z) = z.
    fn identity_decode(_tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        Ok(z)
    }

    fn toy_posterior(tape: &mut Tape, means: &[f64], log_vars: &[f64]) -> PosteriorNodes {
        let m = means.len();
        let mid = tape.param(DenseArray::from_vec(vec![m, 1], means.to_vec()).unwrap());
        let lid = tape.param(DenseArray::from_vec(vec![m, 1], log_vars.to_vec()).unwrap());
        PosteriorNodes {
            means: mid,
            log_vars: lid,
            m,
            d_z: 1,
        }
    }

    #[test]
    fn wise_ale_decomposition_matches_hand_composition() {
        let x = DenseArray::from_rows(&[vec![0.4], vec![-0.9]]);
        let noise = vec![DenseArray::from_rows(&[vec![0.3], vec![-1.1]])];
        let mut tape = Tape::new();
        let post = toy_posterior(&mut tape, &[0.2, -0.5], &[-0.3, 0.4]);
        let kind = ObjectiveKind::wise_ale();
        let (obj, report) = wise_ale_objective(
            &mut tape,
            &x,
            &post,
            &mut identity_decode,
            &kind,
            Likelihood::Gaussian { sigma: 1.0 },
            &noise,
        )
        .unwrap();

        // hand-compose from the two certified sub-operations
        let batch = post.to_batch(&tape).unwrap();
        let z = crate::gaussian::sample_reparameterized(
            batch.means(),
            batch.log_vars(),
            &noise[0],
        )
        .unwrap();
        let ll = recon_log_likelihood(&x, &z, Likelihood::Gaussian { sigma: 1.0 }).unwrap();
        let recon: f64 = ll.iter().sum();
        let expect = recon - batch.kl_upper_bound();
        assert!((tape.value(obj).scalar_value() - expect).abs() <= 1e-9);
        assert!((report.objective - (report.recon_term - report.prior_term)).abs() <= 1e-12);
    }

    #[test]
    fn wise_ale_prior_term_at_unit_posteriors() {
        for d_z in [1usize, 3] {
            let m = 4;
            let x = DenseArray::zeros(&[m, d_z]);
            let noise = vec![DenseArray::zeros(&[m, d_z])];
            let mut tape = Tape::new();
            let mid = tape.param(DenseArray::zeros(&[m, d_z]));
            let lid = tape.param(DenseArray::zeros(&[m, d_z]));
            let post = PosteriorNodes {
                means: mid,
                log_vars: lid,
                m,
                d_z,
            };
            let kind = ObjectiveKind::wise_ale();
            let (_, report) = wise_ale_objective(
                &mut tape,
                &x,
                &post,
                &mut identity_pad_decode(d_z),
                &kind,
                Likelihood::Gaussian { sigma: 1.0 },
                &noise,
            )
            .unwrap();
            let expect = 0.5 * (1.0 - 2f64.ln()) * d_z as f64;
            assert!((report.prior_term - expect).abs() < 1e-12);
        }
    }

    /// Decoder that maps a [M,d] latent to itself (d_x == d_z).
    fn identity_pad_decode(_d: usize) -> impl FnMut(&mut Tape, NodeId) -> Result<NodeId> {
        |_tape: &mut Tape, z: NodeId| Ok(z)
    }

    #[test]
    fn nlogn_constant_shifts_value_not_gradients() {
        let x = DenseArray::from_rows(&[vec![0.4], vec![-0.9]]);
        let noise = vec![DenseArray::from_rows(&[vec![0.3], vec![-1.1]])];
        let run = |include: bool| {
            let mut tape = Tape::new();
            let post = toy_posterior(&mut tape, &[0.2, -0.5], &[-0.3, 0.4]);
            let kind = ObjectiveKind::new(ObjectiveVariant::WiseAle, 1, include).unwrap();
            let (obj, report) = wise_ale_objective(
                &mut tape,
                &x,
                &post,
                &mut identity_decode,
                &kind,
                Likelihood::Gaussian { sigma: 1.0 },
                &noise,
            )
            .unwrap();
            let g = tape.backward(obj).unwrap();
            let bits: Vec<u64> = [post.means, post.log_vars]
                .iter()
                .flat_map(|&p| g.get(p).data().iter().map(|v| v.to_bits()))
                .collect();
            (report.objective, bits)
        };
        let (with, gbits_with) = run(true);
        let (without, gbits_without) = run(false);
        assert_eq!(gbits_with, gbits_without);
        let m = 2.0f64;
        assert!(((without - with) - m * m.ln()).abs() < 1e-12);
    }

    #[test]
    fn aevb_prior_zero_at_unit_posteriors_any_beta() {
        let x = DenseArray::from_rows(&[vec![0.1], vec![0.2]]);
        let noise = vec![DenseArray::zeros(&[2, 1])];
        for beta in [1.0, 2.0, 4.0] {
            let mut tape = Tape::new();
            let post = toy_posterior(&mut tape, &[0.0, 0.0], &[0.0, 0.0]);
            let (_, report) = aevb_objective(
                &mut tape,
                &x,
                &post,
                &mut identity_decode,
                beta,
                Likelihood::Gaussian { sigma: 1.0 },
                &noise,
            )
            .unwrap();
            assert_eq!(report.prior_term, 0.0);
        }
    }

    #[test]
    fn beta_two_doubles_prior_and_its_gradient() {
        let run = |beta: f64| {
            let mut tape = Tape::new();
            let post = toy_posterior(&mut tape, &[1.2, -0.8], &[0.5, -0.7]);
            let kl = exact_kl_sum_node(&mut tape, &post).unwrap();
            let prior = tape.scalar_mul(kl, beta);
            let g = tape.backward(prior).unwrap();
            (
                tape.value(prior).scalar_value(),
                g.get(post.means).data().to_vec(),
                g.get(post.log_vars).data().to_vec(),
            )
        };
        let (p1, gm1, gl1) = run(1.0);
        let (p2, gm2, gl2) = run(2.0);
        assert_eq!(p2.to_bits(), (2.0 * p1).to_bits());
        for (a, b) in gm2.iter().zip(&gm1) {
            assert_eq!(a.to_bits(), (2.0 * b).to_bits());
        }
        for (a, b) in gl2.iter().zip(&gl1) {
            assert_eq!(a.to_bits(), (2.0 * b).to_bits());
        }
    }

    #[test]
    fn aevb_single_sample_prior_half() {
        let x = DenseArray::from_rows(&[vec![0.0]]);
        let noise = vec![DenseArray::zeros(&[1, 1])];
        let mut tape = Tape::new();
        let post = toy_posterior(&mut tape, &[1.0], &[0.0]);
        let (_, report) = aevb_objective(
            &mut tape,
            &x,
            &post,
            &mut identity_decode,
            1.0,
            Likelihood::Gaussian { sigma: 1.0 },
            &noise,
        )
        .unwrap();
        assert!((report.prior_term - 0.5).abs() < 1e-15);
    }

    #[test]
    fn aevb_matches_hand_rolled_single_sample_elbo() {
        // β = 1, M = 1, S = 1: objective = log p(x|z) - KL(q ‖ p)
        let x = DenseArray::from_rows(&[vec![0.7]]);
        let eps = 0.4;
        let noise = vec![DenseArray::from_rows(&[vec![eps]])];
        let (mu, lv) = (0.9, -0.6);
        let mut tape = Tape::new();
        let post = toy_posterior(&mut tape, &[mu], &[lv]);
        let (obj, _) = aevb_objective(
            &mut tape,
            &x,
            &post,
            &mut identity_decode,
            1.0,
            Likelihood::Gaussian { sigma: 1.0 },
            &noise,
        )
        .unwrap();
        let z = mu + (0.5 * lv).exp() * eps;
        let ll = -0.5 * ((0.7 - z) * (0.7 - z) + ln_tau());
        let kl = 0.5 * (mu * mu + lv.exp() - lv - 1.0);
        assert!((tape.value(obj).scalar_value() - (ll - kl)).abs() < 1e-12);
    }

    #[test]
    fn prior_ordering_aevb_above_wise_ale_for_shifted_batches() {
        let mut rng = ChaCha20Rng::seed_from_u64(88);
        for _ in 0..20 {
            let m = rng.gen_range(2..=8);
            let d = rng.gen_range(1..=4);
            let c = rng.gen_range(3.0..6.0);
            let means: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0) + c).collect();
            let lvs: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..0.5)).collect();
            let batch = GaussianBatch::new(
                DenseArray::from_vec(vec![m, d], means).unwrap(),
                DenseArray::from_vec(vec![m, d], lvs).unwrap(),
            )
            .unwrap();
            let aevb: f64 = batch.exact_kl_to_prior().iter().sum();
            let wise = batch.kl_upper_bound();
            assert!(aevb > wise, "m={m} d={d} c={c}: {aevb} vs {wise}");
        }
    }

    #[test]
    fn wise_ale_prior_grows_with_shift_but_not_duplication() {
        let base = [0.5, -0.4, 0.9, 0.1];
        let lvs = [-0.5, 0.2, -1.0, 0.3];
        let ub_at = |shift: f64, dup: bool| {
            let (means, logv): (Vec<f64>, Vec<f64>) = if dup {
                (
                    base.iter().chain(&base).map(|&v| v + shift).collect(),
                    lvs.iter().chain(&lvs).copied().collect(),
                )
            } else {
                (base.iter().map(|&v| v + shift).collect(), lvs.to_vec())
            };
            let m = means.len();
            GaussianBatch::new(
                DenseArray::from_vec(vec![m, 1], means).unwrap(),
                DenseArray::from_vec(vec![m, 1], logv).unwrap(),
            )
            .unwrap()
            .kl_upper_bound()
        };
        assert!(ub_at(3.0, false) < ub_at(4.0, false));
        assert!(ub_at(4.0, false) < ub_at(5.0, false));
        assert!((ub_at(3.0, false) - ub_at(3.0, true)).abs() <= 1e-9);
    }

    fn seeded_posterior(seed: u64, m: usize, d: usize) -> GaussianBatch {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let means: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let lvs: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..0.5)).collect();
        GaussianBatch::new(
            DenseArray::from_vec(vec![m, d], means).unwrap(),
            DenseArray::from_vec(vec![m, d], lvs).unwrap(),
        )
        .unwrap()
    }

    /// Value-level decoder: identity on the latent (d_x == d_z).
    fn identity_decode_values(z: &DenseArray) -> Result<DenseArray> {
        Ok(z.clone())
    }

    #[test]
    fn oracle_single_sample_equals_objective_recon_exactly() {
        let seed = 42;
        let s_draws = 3;
        let post = seeded_posterior(7, 1, 2);
        let x = DenseArray::from_rows(&[vec![0.25, -0.75]]);
        let oracle = full_recon_oracle(
            &x,
            &post,
            &mut identity_decode_values,
            Likelihood::Gaussian { sigma: 0.5 },
            s_draws,
            seed,
        )
        .unwrap();

        let noise: Vec<DenseArray> = (0..s_draws)
            .map(|s| DenseArray::from_vec(vec![1, 2], oracle_noise(seed, s, 2)).unwrap())
            .collect();
        let mut tape = Tape::new();
        let mid = tape.param(post.means().clone());
        let lid = tape.param(post.log_vars().clone());
        let pn = PosteriorNodes {
            means: mid,
            log_vars: lid,
            m: 1,
            d_z: 2,
        };
        let kind = ObjectiveKind::new(ObjectiveVariant::WiseAle, s_draws, false).unwrap();
        let (_, report) = wise_ale_objective(
            &mut tape,
            &x,
            &pn,
            &mut identity_decode,
            &kind,
            Likelihood::Gaussian { sigma: 0.5 },
            &noise,
        )
        .unwrap();
        assert_eq!(oracle.to_bits(), report.recon_term.to_bits());
    }

    #[test]
    fn oracle_duplicated_inputs_match_single_per_sample() {
        let seed = 9;
        let one = seeded_posterior(3, 1, 2);
        let x1 = DenseArray::from_rows(&[vec![0.1, 0.6]]);
        let v1 = full_recon_oracle(
            &x1,
            &one,
            &mut identity_decode_values,
            Likelihood::Gaussian { sigma: 1.0 },
            4,
            seed,
        )
        .unwrap();

        let two = GaussianBatch::new(
            DenseArray::from_rows(&[
                one.means().data().to_vec(),
                one.means().data().to_vec(),
            ]),
            DenseArray::from_rows(&[
                one.log_vars().data().to_vec(),
                one.log_vars().data().to_vec(),
            ]),
        )
        .unwrap();
        let x2 = DenseArray::from_rows(&[vec![0.1, 0.6], vec![0.1, 0.6]]);
        let v2 = full_recon_oracle(
            &x2,
            &two,
            &mut identity_decode_values,
            Likelihood::Gaussian { sigma: 1.0 },
            4,
            seed,
        )
        .unwrap();
        assert!((v2 / 2.0 - v1).abs() < 1e-12, "{v2} vs {v1}");
    }

    #[test]
    fn oracle_rejects_large_batches() {
        let post = seeded_posterior(1, FULL_RECON_MAX_BATCH + 1, 1);
        let x = DenseArray::zeros(&[FULL_RECON_MAX_BATCH + 1, 1]);
        let err = full_recon_oracle(
            &x,
            &post,
            &mut identity_decode_values,
            Likelihood::Gaussian { sigma: 1.0 },
            1,
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("16"));
    }

    #[test]
    fn oracle_vs_simplified_gap_is_finite() {
        let post = seeded_posterior(21, 4, 2);
        let x = DenseArray::from_rows(&[
            vec![0.2, 0.4],
            vec![-0.6, 0.1],
            vec![0.9, -0.2],
            vec![0.0, 0.7],
        ]);
        let oracle = full_recon_oracle(
            &x,
            &post,
            &mut identity_decode_values,
            Likelihood::Gaussian { sigma: 0.5 },
            16,
            77,
        )
        .unwrap();
        let simplified = simplified_recon_estimate(
            &x,
            &post,
            &mut identity_decode_values,
            Likelihood::Gaussian { sigma: 0.5 },
            16,
            77,
        )
        .unwrap();
        let gap = (oracle - simplified).abs();
        assert!(oracle.is_finite() && simplified.is_finite() && gap.is_finite());
        println!("recon approximation gap (toy, M=4): {gap:.6}");
    }
}
