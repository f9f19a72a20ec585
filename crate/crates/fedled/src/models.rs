//! Network parameters, initialization, Adam, schedules, and checkpoints.
//!
//! Every network here is a plain MLP described by [`MlpParams`]. The layer
//! convention is fixed across the whole system: hidden layers use ReLU and
//! the final layer is linear. Feature extractors end in a linear projection
//! to the latent space, the classifier ends in logits, the discriminator
//! in a single logit. Checkpoints rely on this convention, so it is not
//! stored per layer on disk.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FedError, Result};
use crate::tape::{matmul_acc, Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `[fan_in, fan_out]`, row-major.
    pub weight: Tensor,
    /// `[fan_out]`.
    pub bias: Tensor,
    pub activation: Activation,
}

impl LayerParams {
    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// A multilayer perceptron's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
}

impl MlpParams {
    /// He-uniform initialization over the given layer widths: weights drawn
    /// from `U(-b, b)` with `b = sqrt(6 / fan_in)`, biases zero. Hidden
    /// layers get ReLU, the last layer is linear.
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "contract error: an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                LayerParams {
                    weight: Tensor::new([fan_in, fan_out], weight),
                    bias: Tensor::zeros(vec![fan_out]),
                    activation: if i + 2 == dims.len() {
                        Activation::None
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("contract error: empty MLP").fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("contract error: empty MLP").fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in update order: `w0, b0, w1, b1, ...`
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    /// Every parameter as one flat vector, in update order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Overwrite all parameters from a flat vector laid out like
    /// [`MlpParams::flatten`].
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(
            flat.len(),
            self.num_params(),
            "dimension error: {} values for {} parameters",
            flat.len(),
            self.num_params()
        );
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Layer widths for the three networks, independent of input size.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub extractor_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub num_classes: usize,
    pub disc_hidden: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            extractor_hidden: vec![256],
            latent_dim: 128,
            classifier_hidden: vec![64],
            num_classes: 4,
            disc_hidden: vec![256, 256],
        }
    }
}

impl NetConfig {
    pub fn extractor_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut d = vec![input_dim];
        d.extend_from_slice(&self.extractor_hidden);
        d.push(self.latent_dim);
        d
    }

    pub fn classifier_dims(&self) -> Vec<usize> {
        let mut d = vec![self.latent_dim];
        d.extend_from_slice(&self.classifier_hidden);
        d.push(self.num_classes);
        d
    }

    pub fn discriminator_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut d = vec![input_dim];
        d.extend_from_slice(&self.disc_hidden);
        d.push(1);
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_classes < 2 {
            return Err(FedError::Config(
                "latent_dim must be positive and num_classes at least 2".into(),
            ));
        }
        if self.extractor_hidden.contains(&0)
            || self.classifier_hidden.contains(&0)
            || self.disc_hidden.contains(&0)
        {
            return Err(FedError::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Tape handles for one network's parameters.
pub struct MlpVars {
    /// `(weight, bias)` per layer.
    pub layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn register(tape: &mut Tape, params: &MlpParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        MlpVars { layers }
    }
}

/// Forward pass on the tape. Returns every layer's post-activation output,
/// last element being the network output.
pub fn mlp_forward(tape: &mut Tape, vars: &MlpVars, params: &MlpParams, x: Var) -> Vec<Var> {
    let mut outs = Vec::with_capacity(vars.layers.len());
    let mut cur = x;
    for ((w, b), layer) in vars.layers.iter().zip(&params.layers) {
        let h = tape.matmul(cur, *w);
        let hb = tape.add(h, *b);
        cur = match layer.activation {
            Activation::Relu => tape.relu(hb),
            Activation::None => hb,
        };
        outs.push(cur);
    }
    outs
}

/// Tape-free forward pass using the same kernels in the same order, so the
/// result is bit-identical to [`mlp_forward`] on equal inputs.
pub fn forward_inference(params: &MlpParams, x: &Tensor) -> Tensor {
    assert_eq!(
        x.shape()[1],
        params.input_dim(),
        "dimension error: input width {} vs extractor fan-in {}",
        x.shape()[1],
        params.input_dim()
    );
    let mut cur = x.clone();
    for layer in &params.layers {
        let n = cur.shape()[0];
        let (fin, fout) = (layer.fan_in(), layer.fan_out());
        let mut out = vec![0.0; n * fout];
        matmul_acc(cur.data(), n, fin, layer.weight.data(), fout, &mut out);
        let b = layer.bias.data();
        for i in 0..n {
            for j in 0..fout {
                out[i * fout + j] += b[j];
            }
        }
        if layer.activation == Activation::Relu {
            for v in out.iter_mut() {
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        cur = Tensor::new([n, fout], out);
    }
    cur
}

/// Pull one network's gradients out of a backward sweep, in update order,
/// with zeros for parameters the objective never touched.
pub fn collect_grads(tape: &Tape, vars: &MlpVars, grads: &Grads) -> Vec<Tensor> {
    vars.layers
        .iter()
        .flat_map(|(w, b)| [grads.get_or_zeros(*w, tape), grads.get_or_zeros(*b, tape)])
        .collect()
}

/// Adam with bias correction. One state per network; `step` consumes one
/// gradient tensor per parameter tensor in update order.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
/// Small enough that a near-saturated discriminator still steers the
/// extractors: with the textbook 1e-8 the sqrt of the second moment of a
/// heavily attenuated gradient drops below eps and the update stalls even
/// though the direction is still informative.
pub const ADAM_EPS: f64 = 1e-12;

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One optimizer step. The step counter advances even when every
    /// gradient is zero, so two networks trained side by side stay on the
    /// same bias-correction schedule regardless of which losses are active.
    pub fn step(&mut self, params: &mut MlpParams, grads: &[Tensor], lr: f64) {
        let targets = params.tensors_mut();
        assert_eq!(
            grads.len(),
            targets.len(),
            "contract error: {} gradient tensors for {} parameter tensors",
            grads.len(),
            targets.len()
        );
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (k, (theta, g)) in targets.into_iter().zip(grads).enumerate() {
            assert_eq!(
                theta.shape(),
                g.shape(),
                "dimension error: gradient shape {:?} vs parameter {:?}",
                g.shape(),
                theta.shape()
            );
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let th = theta.data_mut();
            for ((mi, vi), (ti, &gi)) in m.iter_mut().zip(v.iter_mut()).zip(th.iter_mut().zip(g.data())) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *ti -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                assert!(
                    ti.is_finite(),
                    "contract error: non-finite parameter after Adam step"
                );
            }
        }
    }
}

/// Inverse-decay learning rate: `lr0 / (1 + 10 p)^0.75` for progress
/// `p` in `(0, 1]`.
pub fn lr_schedule(lr0: f64, p: f64) -> f64 {
    assert!(
        p > 0.0 && p <= 1.0,
        "contract error: training progress must lie in (0, 1], got {p}"
    );
    lr0 / (1.0 + 10.0 * p).powf(0.75)
}

/// Adversarial weight ramp `2 / (1 + exp(-10 p)) - 1`, rising from 0
/// toward 1 over the course of training.
pub fn lambda_warmup(p: f64) -> f64 {
    assert!(
        p > 0.0 && p <= 1.0,
        "contract error: training progress must lie in (0, 1], got {p}"
    );
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

/// Independent named RNG stream from one master seed: FNV-1a over the tag,
/// mixed through SplitMix64.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ── checkpoints ─────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"FLED";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialize layer sizes and values, little-endian. Shared between
/// checkpoints and the wire format for parameter payloads.
pub(crate) fn write_params_body(buf: &mut Vec<u8>, params: &MlpParams) {
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        buf.extend_from_slice(&(l.fan_in() as u32).to_le_bytes());
        buf.extend_from_slice(&(l.fan_out() as u32).to_le_bytes());
        for v in l.weight.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in l.bias.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(FedError::Framing(format!(
                "truncated payload: wanted {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32_le(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f64_le(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("slice is 8 bytes")))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }
}

/// Upper bound on any serialized dimension; rejects absurd or corrupt
/// headers before they turn into huge allocations.
pub(crate) const MAX_DIM: u64 = 1 << 31;

pub(crate) fn read_params_body(r: &mut ByteReader) -> Result<MlpParams> {
    let layer_count = r.u32_le()? as usize;
    if layer_count == 0 || layer_count > 64 {
        return Err(FedError::Bounds(format!("implausible layer count {layer_count}")));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for li in 0..layer_count {
        let fan_in = r.u32_le()? as u64;
        let fan_out = r.u32_le()? as u64;
        if fan_in == 0 || fan_out == 0 || fan_in * fan_out > MAX_DIM {
            return Err(FedError::Bounds(format!(
                "implausible layer shape {fan_in}x{fan_out}"
            )));
        }
        let (fan_in, fan_out) = (fan_in as usize, fan_out as usize);
        let mut weight = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_in * fan_out {
            weight.push(r.f64_le()?);
        }
        let mut bias = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            bias.push(r.f64_le()?);
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(FedError::Framing(format!("non-finite value in layer {li}")));
        }
        layers.push(LayerParams {
            weight: Tensor::new([fan_in, fan_out], weight),
            bias: Tensor::new([fan_out], bias),
            activation: if li + 1 == layer_count {
                Activation::None
            } else {
                Activation::Relu
            },
        });
    }
    for w in layers.windows(2) {
        if w[0].fan_out() != w[1].fan_in() {
            return Err(FedError::Framing(format!(
                "layer width mismatch: {} feeds {}",
                w[0].fan_out(),
                w[1].fan_in()
            )));
        }
    }
    Ok(MlpParams { layers })
}

pub fn save_checkpoint(path: &Path, params: &MlpParams) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + params.num_params() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_params_body(&mut buf, params);
    let file = File::create(path).map_err(|e| FedError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(|e| FedError::io(path, e))?;
    w.flush().map_err(|e| FedError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    let file = File::open(path).map_err(|e| FedError::io(path, e))?;
    let mut buf = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut buf)
        .map_err(|e| FedError::io(path, e))?;
    let mut r = ByteReader::new(&buf);
    let magic = r.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FedError::Framing("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32_le()?;
    if version != CHECKPOINT_VERSION {
        return Err(FedError::Framing(format!("unsupported checkpoint version {version}")));
    }
    let params = read_params_body(&mut r)?;
    if r.remaining() != 0 {
        return Err(FedError::Framing(format!(
            "{} trailing bytes after checkpoint body",
            r.remaining()
        )));
    }
    Ok(params)
}
