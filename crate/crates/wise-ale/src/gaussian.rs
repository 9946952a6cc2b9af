//! Closed-form Gaussian mathematics: per-sample diagonal posteriors, the
//! aggregate mixture they form over a mini-batch, the analytic upper bound
//! on KL(mixture ‖ standard normal), the exact single-Gaussian KL, and
//! Monte-Carlo divergence oracles.
//!
//! The aggregate posterior of a batch is the equal-weight mixture of its
//! per-sample posteriors. KL between that mixture and the unit Gaussian has
//! no closed form; `kl_upper_bound` evaluates the analytic bound obtained by
//! applying Jensen's inequality to the mixture entropy term, which reduces
//! every expectation to pairwise Gaussian convolution integrals
//! (`gaussian_overlap`).

use crate::autodiff::{logsumexp, DenseArray, NodeId, Tape};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Log-variances are confined to this range at construction.
pub const LOG_VAR_MIN: f64 = -12.0;
pub const LOG_VAR_MAX: f64 = 12.0;

/// ln(2π), shared by every density expression in the crate.
pub fn ln_tau() -> f64 {
    std::f64::consts::TAU.ln()
}

/// The N(0, I) prior over a `d_z`-dimensional latent space. Stores no
/// numbers; it exists to give the prior a name and a density.
#[derive(Debug, Clone, Copy)]
pub struct StandardPrior {
    pub d_z: usize,
}

impl StandardPrior {
    pub fn log_density(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.d_z);
        let mut acc = 0.0;
        for &zk in z {
            acc += -0.5 * (ln_tau() + zk * zk);
        }
        acc
    }
}

/// Per-sample diagonal Gaussian posteriors for a mini-batch: `means` and
/// `log_vars` are both M×d_z. Interpreted as an equal-weight mixture, the
/// batch is the aggregate posterior of its samples.
#[derive(Debug, Clone)]
pub struct GaussianBatch {
    means: DenseArray,
    log_vars: DenseArray,
    m: usize,
    d_z: usize,
    clamp_count: u64,
}

impl GaussianBatch {
    /// Builds a batch, clamping log-variances into
    /// [`LOG_VAR_MIN`, `LOG_VAR_MAX`] and counting how many moved.
    pub fn new(means: DenseArray, log_vars: DenseArray) -> Result<Self> {
        if means.shape() != log_vars.shape() {
            return Err(Error::ShapeMismatch {
                op: "gaussian_batch",
                lhs: means.shape().to_vec(),
                rhs: log_vars.shape().to_vec(),
            });
        }
        if means.shape().len() != 2 || means.shape()[0] == 0 || means.shape()[1] == 0 {
            return Err(Error::usage(format!(
                "posterior batch must be M×d_z with M ≥ 1, d_z ≥ 1, got {:?}",
                means.shape()
            )));
        }
        let m = means.shape()[0];
        let d_z = means.shape()[1];
        let mut log_vars = log_vars;
        let mut clamp_count = 0;
        for v in log_vars.data_mut() {
            if *v < LOG_VAR_MIN || *v > LOG_VAR_MAX {
                *v = v.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
                clamp_count += 1;
            }
        }
        Ok(GaussianBatch {
            means,
            log_vars,
            m,
            d_z,
            clamp_count,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.m
    }

    pub fn latent_dim(&self) -> usize {
        self.d_z
    }

    pub fn means(&self) -> &DenseArray {
        &self.means
    }

    pub fn log_vars(&self) -> &DenseArray {
        &self.log_vars
    }

    /// Log-variance clamp events at construction.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_count
    }

    fn mean(&self, i: usize, k: usize) -> f64 {
        self.means.at2(i, k)
    }

    fn var(&self, i: usize, k: usize) -> f64 {
        self.log_vars.at2(i, k).exp()
    }

    /// Log density of the equal-weight mixture at `z`, via log-sum-exp over
    /// the per-component log densities.
    pub fn log_density_mixture(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.d_z {
            return Err(Error::usage(format!(
                "z has length {} but the batch is {}-dimensional",
                z.len(),
                self.d_z
            )));
        }
        let mut comp = Vec::with_capacity(self.m);
        for i in 0..self.m {
            let mut acc = 0.0;
            for (k, &zk) in z.iter().enumerate() {
                let lv = self.log_vars.at2(i, k);
                let diff = zk - self.mean(i, k);
                acc += -0.5 * (ln_tau() + lv + diff * diff / lv.exp());
            }
            comp.push(acc);
        }
        Ok(logsumexp(&comp) - (self.m as f64).ln())
    }

    /// ∫ q_i(z) q_j(z) dz for two components: the product over dimensions of
    /// A^{-1/2}·B with A = 2π(σ_i² + σ_j²) and
    /// B = exp(-½ (μ_i - μ_j)² / (σ_i² + σ_j²)). Symmetric in (i, j).
    pub fn gaussian_overlap(&self, i: usize, j: usize) -> Result<f64> {
        self.check_index(i)?;
        self.check_index(j)?;
        let mut prod = 1.0;
        for k in 0..self.d_z {
            let s = self.var(i, k) + self.var(j, k);
            let a = std::f64::consts::TAU * s;
            let dmu = self.mean(i, k) - self.mean(j, k);
            let b = (-0.5 * dmu * dmu / s).exp();
            prod *= b / a.sqrt();
        }
        Ok(prod)
    }

    /// Log of [`gaussian_overlap`], used inside the KL bound so the product
    /// over dimensions cannot underflow.
    fn log_overlap(&self, i: usize, j: usize) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.d_z {
            let s = self.var(i, k) + self.var(j, k);
            let dmu = self.mean(i, k) - self.mean(j, k);
            acc += -0.5 * ((std::f64::consts::TAU * s).ln() + dmu * dmu / s);
        }
        acc
    }

    /// Analytic upper bound on KL(mixture ‖ N(0, I)):
    ///
    /// ```text
    /// (1/M) Σ_i log[(1/M) Σ_j overlap(i,j)]
    ///   + (1/2M) Σ_i Σ_k (σ_ik² + μ_ik² + ln 2π)
    /// ```
    ///
    /// The first term goes through log-sum-exp over log-overlaps.
    pub fn kl_upper_bound(&self) -> f64 {
        let m = self.m as f64;
        let mut lse_mean = 0.0;
        let mut row = vec![0.0; self.m];
        for i in 0..self.m {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = self.log_overlap(i, j);
            }
            lse_mean += logsumexp(&row);
        }
        lse_mean /= m;
        let term1 = lse_mean + -(m.ln());

        let mut csum = 0.0;
        for i in 0..self.m {
            for k in 0..self.d_z {
                let mu = self.mean(i, k);
                csum += self.var(i, k) + mu * mu + ln_tau();
            }
        }
        let term2 = csum * (1.0 / (2.0 * m));
        term1 + term2
    }

    /// Per-sample exact KL to the unit prior (see [`exact_kl_to_prior`]).
    pub fn exact_kl_to_prior(&self) -> Vec<f64> {
        exact_kl_to_prior(&self.means, &self.log_vars).expect("shapes checked at construction")
    }

    /// Monte-Carlo estimate of KL(mixture ‖ N(0, I)): draw a component
    /// uniformly, draw z from it, average
    /// `log_density_mixture(z) - log p(z)`. Returns the mean and the
    /// standard error of the per-sample terms. Deterministic given `seed`.
    pub fn mc_kl_mixture_to_prior(&self, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
        if n_samples < 1000 {
            return Err(Error::usage(format!(
                "mc_kl_mixture_to_prior needs at least 1000 samples, got {n_samples}"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let prior = StandardPrior { d_z: self.d_z };
        let mut z = vec![0.0; self.d_z];
        // Welford running mean/variance over per-sample terms.
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for n in 1..=n_samples {
            let comp = rng.gen_range(0..self.m);
            for (k, slot) in z.iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                *slot = self.mean(comp, k) + (0.5 * self.log_vars.at2(comp, k)).exp() * eps;
            }
            let term = self.log_density_mixture(&z)? - prior.log_density(&z);
            let delta = term - mean;
            mean += delta / n as f64;
            m2 += delta * (term - mean);
        }
        let var = m2 / (n_samples as f64 - 1.0);
        let std_err = (var / n_samples as f64).sqrt();
        Ok((mean, std_err))
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.m {
            return Err(Error::usage(format!(
                "component index {i} out of range for batch size {}",
                self.m
            )));
        }
        Ok(())
    }
}

/// Exact KL of each diagonal Gaussian row to N(0, I):
/// `½ Σ_k (μ_k² + σ_k² - log σ_k² - 1)`; always ≥ 0.
pub fn exact_kl_to_prior(means: &DenseArray, log_vars: &DenseArray) -> Result<Vec<f64>> {
    if means.shape() != log_vars.shape() || means.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "exact_kl_to_prior",
            lhs: means.shape().to_vec(),
            rhs: log_vars.shape().to_vec(),
        });
    }
    let (m, d) = (means.shape()[0], means.shape()[1]);
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut acc = 0.0;
        for k in 0..d {
            let mu = means.at2(i, k);
            let lv = log_vars.at2(i, k);
            acc += mu * mu + lv.exp() - lv - 1.0;
        }
        out.push(0.5 * acc);
    }
    Ok(out)
}

/// μ + exp(½·log σ²) ⊙ ε, the reparameterized draw (value level).
pub fn sample_reparameterized(
    means: &DenseArray,
    log_vars: &DenseArray,
    noise: &DenseArray,
) -> Result<DenseArray> {
    if means.shape() != log_vars.shape() || means.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "sample_reparameterized",
            lhs: means.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let mut out = means.clone();
    for ((o, lv), n) in out
        .data_mut()
        .iter_mut()
        .zip(log_vars.data())
        .zip(noise.data())
    {
        *o += (0.5 * lv).exp() * n;
    }
    Ok(out)
}

/// A batch of standard-normal draws of the given shape.
pub fn draw_standard_normal(rng: &mut impl Rng, shape: &[usize]) -> DenseArray {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
    DenseArray::from_vec(shape.to_vec(), data).expect("shape/product consistent")
}

/// Posterior parameter nodes on a tape: the differentiable counterpart of
/// [`GaussianBatch`].
#[derive(Debug, Clone, Copy)]
pub struct PosteriorNodes {
    pub means: NodeId,
    pub log_vars: NodeId,
    pub m: usize,
    pub d_z: usize,
}

impl PosteriorNodes {
    /// Snapshot of the node values as a value-level batch.
    pub fn to_batch(&self, tape: &Tape) -> Result<GaussianBatch> {
        GaussianBatch::new(
            tape.value(self.means).clone(),
            tape.value(self.log_vars).clone(),
        )
    }
}

/// Differentiable KL upper bound: same quantity as
/// [`GaussianBatch::kl_upper_bound`], built from tape ops so gradients flow
/// to means and log-variances end to end (no stop-gradients anywhere).
pub fn kl_upper_bound_node(tape: &mut Tape, post: &PosteriorNodes) -> Result<NodeId> {
    let (m, d) = (post.m, post.d_z);
    let vars = tape.exp(post.log_vars);
    let vi = tape.reshape(vars, vec![m, 1, d])?;
    let vj = tape.reshape(vars, vec![1, m, d])?;
    let s = tape.add(vi, vj)?;
    let mi = tape.reshape(post.means, vec![m, 1, d])?;
    let mj = tape.reshape(post.means, vec![1, m, d])?;
    let diff = tape.sub(mi, mj)?;
    let d2 = tape.square(diff);
    let s_tau = tape.scalar_mul(s, std::f64::consts::TAU);
    let log_a = tape.log(s_tau)?; // s ≥ 2e^{-12}, far above the log clamp
    let quad = tape.div(d2, s)?;
    let inner = tape.add(log_a, quad)?;
    let log_ov_k = tape.scalar_mul(inner, -0.5);
    let log_ov = tape.sum_axis(log_ov_k, 2)?;
    let lse = tape.logsumexp_last(log_ov)?;
    let lse_mean = tape.mean_all(lse);
    let term1 = tape.scalar_add(lse_mean, -(m as f64).ln());

    let mu2 = tape.square(post.means);
    let c0 = tape.add(vars, mu2)?;
    let c = tape.scalar_add(c0, ln_tau());
    let csum = tape.sum_all(c);
    let term2 = tape.scalar_mul(csum, 1.0 / (2.0 * m as f64));
    tape.add(term1, term2)
}

/// Differentiable Σ_i exact KL(q_i ‖ N(0, I)) over the batch.
pub fn exact_kl_sum_node(tape: &mut Tape, post: &PosteriorNodes) -> Result<NodeId> {
    let mu2 = tape.square(post.means);
    let vars = tape.exp(post.log_vars);
    let a = tape.add(mu2, vars)?;
    let b = tape.scalar_add(post.log_vars, 1.0);
    let diff = tape.sub(a, b)?;
    let total = tape.sum_all(diff);
    Ok(tape.scalar_mul(total, 0.5))
}

/// One trial of the upper-bound certification: a random batch, the analytic
/// bound, and the Monte-Carlo estimate it must dominate.
#[derive(Debug, Clone)]
pub struct KlTrial {
    pub m: usize,
    pub d_z: usize,
    pub upper_bound: f64,
    pub mc_estimate: f64,
    pub std_error: f64,
}

impl KlTrial {
    /// The certified inequality: bound ≥ estimate − 3·stderr.
    pub fn holds(&self) -> bool {
        self.upper_bound >= self.mc_estimate - 3.0 * self.std_error
    }
}

/// Runs `trials` seeded random batches (M ∈ 1..=8, d_z ∈ 1..=4,
/// μ ∈ [-3, 3], log σ² ∈ [-2, 1]) and checks the analytic bound against the
/// Monte-Carlo oracle with `samples` draws each.
pub fn kl_certification(trials: usize, samples: usize, seed: u64) -> Result<Vec<KlTrial>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let m = rng.gen_range(1..=8);
        let d_z = rng.gen_range(1..=4);
        let means: Vec<f64> = (0..m * d_z).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lvs: Vec<f64> = (0..m * d_z).map(|_| rng.gen_range(-2.0..1.0)).collect();
        let batch = GaussianBatch::new(
            DenseArray::from_vec(vec![m, d_z], means)?,
            DenseArray::from_vec(vec![m, d_z], lvs)?,
        )?;
        let mc_seed: u64 = rng.gen();
        let (mc_estimate, std_error) = batch.mc_kl_mixture_to_prior(samples, mc_seed)?;
        out.push(KlTrial {
            m,
            d_z,
            upper_bound: batch.kl_upper_bound(),
            mc_estimate,
            std_error,
        });
    }
    Ok(out)
}

/// Differentiable reparameterized draw: μ + exp(½ log σ²) ⊙ ε. Gradients
/// flow to means and log-variances; the noise node is a non-trainable input.
pub fn sample_reparameterized_node(
    tape: &mut Tape,
    means: NodeId,
    log_vars: NodeId,
    noise: NodeId,
) -> Result<NodeId> {
    let half_lv = tape.scalar_mul(log_vars, 0.5);
    let sigma = tape.exp(half_lv);
    let scaled = tape.mul(sigma, noise)?;
    tape.add(means, scaled)
}
