//! Fully-connected encoder (x → μ, log σ²) and decoder (z → likelihood
//! parameters) with deterministic initialization and a documented binary
//! checkpoint format.
//!
//! Parameter layout (stable; checkpoints depend on it): encoder hidden
//! layers in order, then the mean head, then the log-variance head, then
//! decoder hidden layers in order, then the output layer. Each layer
//! contributes its weight matrix (out×in, row-major) followed by its bias
//! vector.

use crate::autodiff::{DenseArray, NodeId, Tape};
use crate::error::{Error, Result};
use crate::gaussian::{PosteriorNodes, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::objective::Likelihood;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Checkpoint file magic.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WISEALE1";

/// Layer widths and likelihood family of an encoder/decoder pair. Hidden
/// activations are tanh; heads and the Gaussian output are linear; the
/// Bernoulli output is a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub d_x: usize,
    pub d_z: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub likelihood: Likelihood,
}

impl Architecture {
    pub fn new(
        d_x: usize,
        d_z: usize,
        encoder_hidden: Vec<usize>,
        decoder_hidden: Vec<usize>,
        likelihood: Likelihood,
    ) -> Result<Self> {
        if d_x == 0 || d_z == 0 {
            return Err(Error::usage("d_x and d_z must be positive"));
        }
        if encoder_hidden.iter().any(|&w| w == 0) || decoder_hidden.iter().any(|&w| w == 0) {
            return Err(Error::usage("hidden widths must be positive"));
        }
        Ok(Architecture {
            d_x,
            d_z,
            encoder_hidden,
            decoder_hidden,
            likelihood,
        })
    }

    /// Default for 256-sample sine waves: 256→512→256→2·8, mirrored
    /// decoder, Gaussian output with σ = 0.3. Wide enough to reach the
    /// regime where the prior constraints bind within a 20-epoch desk run.
    pub fn sine_default() -> Self {
        Architecture {
            d_x: crate::data::SINE_SAMPLES,
            d_z: 8,
            encoder_hidden: vec![512, 256],
            decoder_hidden: vec![256, 512],
            likelihood: Likelihood::Gaussian { sigma: 0.3 },
        }
    }

    /// Default for 28×28 binary images embedded in 2-D: 784→256→64→2·2,
    /// mirrored decoder, Bernoulli output.
    pub fn image_embedding_default() -> Self {
        Architecture {
            d_x: 784,
            d_z: 2,
            encoder_hidden: vec![256, 64],
            decoder_hidden: vec![64, 256],
            likelihood: Likelihood::Bernoulli,
        }
    }
}

/// One affine layer: `weights` is out×in, `biases` is out.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weights: DenseArray,
    pub biases: DenseArray,
}

/// Encoder/decoder weights in the stable layout order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: Architecture,
    pub encoder: Vec<Layer>,
    pub mean_head: Layer,
    pub log_var_head: Layer,
    pub decoder: Vec<Layer>,
    pub output: Layer,
}

fn init_layer(rng: &mut ChaCha20Rng, out: usize, inp: usize, weight_scale: f64) -> Layer {
    let a = (6.0 / (inp + out) as f64).sqrt();
    let data: Vec<f64> = (0..out * inp)
        .map(|_| rng.gen_range(-a..a) * weight_scale)
        .collect();
    Layer {
        weights: DenseArray::from_vec(vec![out, inp], data).expect("layer shape"),
        biases: DenseArray::zeros(&[out]),
    }
}

/// Glorot-uniform weights, zero biases; the log-variance head is scaled by
/// 0.01 so initial posteriors start near unit variance. Deterministic given
/// the seed.
pub fn init_params(arch: &Architecture, seed: u64) -> ModelParams {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut encoder = Vec::new();
    let mut prev = arch.d_x;
    for &w in &arch.encoder_hidden {
        encoder.push(init_layer(&mut rng, w, prev, 1.0));
        prev = w;
    }
    let mean_head = init_layer(&mut rng, arch.d_z, prev, 1.0);
    let log_var_head = init_layer(&mut rng, arch.d_z, prev, 0.01);
    let mut decoder = Vec::new();
    let mut prev = arch.d_z;
    for &w in &arch.decoder_hidden {
        decoder.push(init_layer(&mut rng, w, prev, 1.0));
        prev = w;
    }
    let output = init_layer(&mut rng, arch.d_x, prev, 1.0);
    ModelParams {
        arch: arch.clone(),
        encoder,
        mean_head,
        log_var_head,
        decoder,
        output,
    }
}

impl ModelParams {
    fn layers(&self) -> Vec<&Layer> {
        let mut v: Vec<&Layer> = self.encoder.iter().collect();
        v.push(&self.mean_head);
        v.push(&self.log_var_head);
        v.extend(self.decoder.iter());
        v.push(&self.output);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer> {
        let mut v: Vec<&mut Layer> = self.encoder.iter_mut().collect();
        v.push(&mut self.mean_head);
        v.push(&mut self.log_var_head);
        v.extend(self.decoder.iter_mut());
        v.push(&mut self.output);
        v
    }

    /// All parameter tensors in layout order (per layer: weights, biases).
    pub fn tensors(&self) -> Vec<&DenseArray> {
        self.layers()
            .into_iter()
            .flat_map(|l| [&l.weights, &l.biases])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseArray> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weights, &mut l.biases])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Registers every tensor as a trainable tape leaf (layout order) and
    /// returns the graph-side handle.
    pub fn insert_into(&self, tape: &mut Tape) -> ModelNodes {
        let insert_layer = |tape: &mut Tape, l: &Layer| LayerNodes {
            weights: tape.param(l.weights.clone()),
            biases: tape.param(l.biases.clone()),
        };
        let encoder = self
            .encoder
            .iter()
            .map(|l| insert_layer(tape, l))
            .collect();
        let mean_head = insert_layer(tape, &self.mean_head);
        let log_var_head = insert_layer(tape, &self.log_var_head);
        let decoder = self
            .decoder
            .iter()
            .map(|l| insert_layer(tape, l))
            .collect();
        let output = insert_layer(tape, &self.output);
        ModelNodes {
            arch: self.arch.clone(),
            encoder,
            mean_head,
            log_var_head,
            decoder,
            output,
        }
    }

    /// Deterministic value-level encode: posterior means and log-variances
    /// (clamped) for a batch, without touching any caller tape.
    pub fn encode_values(&self, x: &DenseArray) -> Result<(DenseArray, DenseArray)> {
        let mut tape = Tape::new();
        let nodes = self.insert_into(&mut tape);
        let x_node = tape.input(x.clone());
        let post = nodes.encode(&mut tape, x_node)?;
        Ok((
            tape.value(post.means).clone(),
            tape.value(post.log_vars).clone(),
        ))
    }

    /// Deterministic value-level decode of a latent batch.
    pub fn decode_values(&self, z: &DenseArray) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let nodes = self.insert_into(&mut tape);
        let z_node = tape.input(z.clone());
        let out = nodes.decode(&mut tape, z_node)?;
        Ok(tape.value(out).clone())
    }

    /// Writes the documented checkpoint: magic, architecture descriptor,
    /// then all parameters as little-endian f64 in layout order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        match self.arch.likelihood {
            Likelihood::Bernoulli => {
                buf.push(0);
                buf.extend_from_slice(&0f64.to_le_bytes());
            }
            Likelihood::Gaussian { sigma } => {
                buf.push(1);
                buf.extend_from_slice(&sigma.to_le_bytes());
            }
        }
        let push_u32 = |buf: &mut Vec<u8>, v: usize| {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        };
        push_u32(&mut buf, self.arch.d_x);
        push_u32(&mut buf, self.arch.d_z);
        push_u32(&mut buf, self.arch.encoder_hidden.len());
        for &w in &self.arch.encoder_hidden {
            push_u32(&mut buf, w);
        }
        push_u32(&mut buf, self.arch.decoder_hidden.len());
        for &w in &self.arch.decoder_hidden {
            push_u32(&mut buf, w);
        }
        for t in self.tensors() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Loads a checkpoint written by [`ModelParams::save`].
    pub fn load(path: &Path) -> Result<ModelParams> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let p = path.display().to_string();
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(Error::format(
                    &p,
                    format!("truncated at byte offset {} (needed {} more)", *off, n),
                ));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let magic = take(&mut off, 8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(
                &p,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(CHECKPOINT_MAGIC)
                ),
            ));
        }
        let tag = take(&mut off, 1)?[0];
        let sigma = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let likelihood = match tag {
            0 => Likelihood::Bernoulli,
            1 => Likelihood::Gaussian { sigma },
            other => {
                return Err(Error::format(&p, format!("unknown likelihood tag {other}")));
            }
        };
        let read_u32 = |off: &mut usize| -> Result<usize> {
            Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()) as usize)
        };
        let d_x = read_u32(&mut off)?;
        let d_z = read_u32(&mut off)?;
        let n_enc = read_u32(&mut off)?;
        let mut encoder_hidden = Vec::with_capacity(n_enc);
        for _ in 0..n_enc {
            encoder_hidden.push(read_u32(&mut off)?);
        }
        let n_dec = read_u32(&mut off)?;
        let mut decoder_hidden = Vec::with_capacity(n_dec);
        for _ in 0..n_dec {
            decoder_hidden.push(read_u32(&mut off)?);
        }
        let arch = Architecture::new(d_x, d_z, encoder_hidden, decoder_hidden, likelihood)?;
        // Shape skeleton with the right tensor sizes, then fill in order.
        let mut params = init_params(&arch, 0);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                let raw = take(&mut off, 8)?;
                *v = f64::from_le_bytes(raw.try_into().unwrap());
            }
        }
        if off != bytes.len() {
            return Err(Error::format(
                &p,
                format!("{} trailing bytes after parameters", bytes.len() - off),
            ));
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNodes {
    weights: NodeId,
    biases: NodeId,
}

/// Tape-side handle of a model's parameters.
pub struct ModelNodes {
    arch: Architecture,
    encoder: Vec<LayerNodes>,
    mean_head: LayerNodes,
    log_var_head: LayerNodes,
    decoder: Vec<LayerNodes>,
    output: LayerNodes,
}

impl ModelNodes {
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Parameter node ids in layout order (matches
    /// [`ModelParams::tensors`]).
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut v = Vec::new();
        for l in &self.encoder {
            v.push(l.weights);
            v.push(l.biases);
        }
        v.push(self.mean_head.weights);
        v.push(self.mean_head.biases);
        v.push(self.log_var_head.weights);
        v.push(self.log_var_head.biases);
        for l in &self.decoder {
            v.push(l.weights);
            v.push(l.biases);
        }
        v.push(self.output.weights);
        v.push(self.output.biases);
        v
    }

    fn affine(&self, tape: &mut Tape, x: NodeId, layer: &LayerNodes) -> Result<NodeId> {
        let wt = tape.transpose(layer.weights)?;
        let h = tape.matmul(x, wt)?;
        tape.add(h, layer.biases)
    }

    /// Builds the posterior nodes for an input batch; log-variances are
    /// clamped into the canonical range on the tape.
    pub fn encode(&self, tape: &mut Tape, x_node: NodeId) -> Result<PosteriorNodes> {
        let shape = tape.value(x_node).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.arch.d_x {
            return Err(Error::usage(format!(
                "encoder expects width {}, got input shape {:?}",
                self.arch.d_x, shape
            )));
        }
        let m = shape[0];
        let mut h = x_node;
        for l in &self.encoder {
            let a = self.affine(tape, h, l)?;
            h = tape.tanh(a);
        }
        let means = self.affine(tape, h, &self.mean_head)?;
        let lv_raw = self.affine(tape, h, &self.log_var_head)?;
        let log_vars = tape.clamp(lv_raw, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(PosteriorNodes {
            means,
            log_vars,
            m,
            d_z: self.arch.d_z,
        })
    }

    /// Builds the decoder output for a latent batch: sigmoid probabilities
    /// in Bernoulli mode, unbounded means in Gaussian mode.
    pub fn decode(&self, tape: &mut Tape, z_node: NodeId) -> Result<NodeId> {
        let shape = tape.value(z_node).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.arch.d_z {
            return Err(Error::usage(format!(
                "decoder expects width {}, got input shape {:?}",
                self.arch.d_z, shape
            )));
        }
        let mut h = z_node;
        for l in &self.decoder {
            let a = self.affine(tape, h, l)?;
            h = tape.tanh(a);
        }
        let out = self.affine(tape, h, &self.output)?;
        Ok(match self.arch.likelihood {
            Likelihood::Bernoulli => tape.sigmoid(out),
            Likelihood::Gaussian { .. } => out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_arch() -> Architecture {
        Architecture::new(
            6,
            2,
            vec![8],
            vec![8],
            Likelihood::Gaussian { sigma: 0.1 },
        )
        .unwrap()
    }

    fn zeroed(arch: &Architecture) -> ModelParams {
        let mut p = init_params(arch, 0);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        p
    }

    #[test]
    fn zero_params_encode_to_standard_posteriors() {
        let p = zeroed(&toy_arch());
        let x = DenseArray::from_rows(&[vec![0.5, -1.0, 2.0, 0.0, 1.0, -0.5]]);
        let (means, lvs) = p.encode_values(&x).unwrap();
        assert!(means.iter().all(|&v| v == 0.0));
        assert!(lvs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_bernoulli_decodes_to_half() {
        let arch =
            Architecture::new(4, 2, vec![5], vec![5], Likelihood::Bernoulli).unwrap();
        let p = zeroed(&arch);
        let z = DenseArray::from_rows(&[vec![0.3, -0.7]]);
        let out = p.decode_values(&z).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_params_gaussian_decodes_to_zero() {
        let p = zeroed(&toy_arch());
        let z = DenseArray::from_rows(&[vec![0.3, -0.7]]);
        let out = p.decode_values(&z).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_rows_give_duplicated_posteriors() {
        let p = init_params(&toy_arch(), 3);
        let row = vec![0.5, -1.0, 2.0, 0.0, 1.0, -0.5];
        let x = DenseArray::from_rows(&[row.clone(), row]);
        let (means, lvs) = p.encode_values(&x).unwrap();
        assert_eq!(&means.data()[..2], &means.data()[2..]);
        assert_eq!(&lvs.data()[..2], &lvs.data()[2..]);
    }

    #[test]
    fn permuting_rows_permutes_outputs() {
        let p = init_params(&toy_arch(), 5);
        let r0 = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let r1 = vec![-0.5, 0.9, 0.0, 1.0, -1.0, 0.2];
        let (m_a, _) = p
            .encode_values(&DenseArray::from_rows(&[r0.clone(), r1.clone()]))
            .unwrap();
        let (m_b, _) = p.encode_values(&DenseArray::from_rows(&[r1, r0])).unwrap();
        assert_eq!(&m_a.data()[..2], &m_b.data()[2..]);
        assert_eq!(&m_a.data()[2..], &m_b.data()[..2]);
    }

    #[test]
    fn mean_head_bias_gradient_is_one_per_coordinate() {
        let p = init_params(&toy_arch(), 7);
        let mut tape = Tape::new();
        let nodes = p.insert_into(&mut tape);
        let x = tape.input(DenseArray::from_rows(&[vec![0.2; 6]]));
        let post = nodes.encode(&mut tape, x).unwrap();
        let root = tape.sum_all(post.means);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(nodes.mean_head.biases).data(), &[1.0, 1.0]);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let p = init_params(&toy_arch(), 1);
        let x = DenseArray::from_rows(&[vec![0.0; 5]]);
        assert!(p.encode_values(&x).is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let arch = toy_arch();
        let a = init_params(&arch, 42);
        let b = init_params(&arch, 42);
        let c = init_params(&arch, 43);
        let flat = |p: &ModelParams| -> Vec<u64> {
            p.tensors()
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn initial_log_vars_stay_near_zero() {
        let arch = Architecture::sine_default();
        let p = init_params(&arch, 11);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..64)
            .map(|_| (0..arch.d_x).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let x = DenseArray::from_rows(&rows);
        let (_, lvs) = p.encode_values(&x).unwrap();
        let mean: f64 = lvs.iter().sum::<f64>() / lvs.numel() as f64;
        assert!(mean.abs() < 0.1, "mean initial log-variance {mean}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let p = init_params(&toy_arch(), 9);
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p.arch, q.arch);
        for (a, b) in p.tensors().iter().zip(q.tensors().iter()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_bad_magic_is_quoted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC-rest-of-file").unwrap();
        let err = ModelParams::load(&path).unwrap_err();
        assert!(err.to_string().contains("NOTMAGIC"), "{err}");
    }

    #[test]
    fn checkpoint_truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let p = init_params(&toy_arch(), 9);
        p.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = ModelParams::load(&path).unwrap_err();
        assert!(err.to_string().contains("byte offset"), "{err}");
    }
}
