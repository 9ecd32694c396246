//! Minimal tensor/layer/optimizer stack with exact reverse-mode gradients.
//!
//! Layers are stateless descriptions holding parameter names; tensors live
//! in a [`ParamStore`]. Callers keep the forward activations they need for
//! the backward pass, so read-only forward passes over a frozen store can
//! run concurrently.

use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }
}

/// Named parameters with matching gradient slots and RMSProp state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    rms: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) {
        assert!(
            self.values.insert(name.to_string(), tensor).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.values.values().map(|t| t.numel()).sum()
    }

    /// Accumulate into the gradient slot for `name`.
    pub fn accum_grad(&mut self, name: &str, grad: &[f64]) {
        let value = self.values.get(name).expect("unknown parameter");
        assert_eq!(value.numel(), grad.len(), "gradient shape mismatch");
        let slot = self
            .grads
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(&value.shape));
        for (g, &d) in slot.data.iter_mut().zip(grad.iter()) {
            *g += d;
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// RMSProp update over every parameter:
    /// `acc <- decay acc + (1 - decay) g^2; p <- p - lr g / sqrt(acc + eps)`.
    pub fn rmsprop_step(&mut self, lr: f64, decay: f64, eps: f64) -> Result<()> {
        for name in self.values.keys() {
            if !self.grads.contains_key(name) {
                return Err(Error::MissingGradients(name.clone()));
            }
        }
        for (name, value) in self.values.iter_mut() {
            let grad = &self.grads[name];
            let acc = self
                .rms
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&value.shape));
            for i in 0..value.data.len() {
                let g = grad.data[i];
                acc.data[i] = decay * acc.data[i] + (1.0 - decay) * g * g;
                value.data[i] -= lr * g / (acc.data[i] + eps).sqrt();
            }
        }
        Ok(())
    }

    pub fn rms_state(&self, name: &str) -> Option<&Tensor> {
        self.rms.get(name)
    }

    /// Raw f64 snapshot of (values, rms accumulators) for exact resume.
    pub fn training_state(&self) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
        (self.values.clone(), self.rms.clone())
    }

    pub fn restore_training_state(
        &mut self,
        values: BTreeMap<String, Tensor>,
        rms: BTreeMap<String, Tensor>,
    ) {
        self.values = values;
        self.rms = rms;
        self.grads.clear();
    }
}

// ---------------------------------------------------------------------------
// checkpoint format: magic "DRGT1", u32 record count, then per record
// u32 name len, name, u32 rank, u32 dims..., f32 LE row-major payload
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 5] = b"DRGT1";

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    crate::dsp::atomic_write(path, &params_to_bytes(store))
}

pub fn params_to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(store.values.len() as u32).to_le_bytes());
    for (name, tensor) in &store.values {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    params_from_bytes(&bytes)
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 5 || &bytes[..5] != CKPT_MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let mut pos = 5usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::TruncatedCheckpoint);
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let read_u32 =
        |s: &[u8]| -> u32 { u32::from_le_bytes([s[0], s[1], s[2], s[3]]) };
    let count = read_u32(take(4)?) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(take(4)?) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| Error::NotACheckpoint)?;
        let rank = read_u32(take(4)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(take(4)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(numel * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.register(&name, Tensor::from_vec(&shape, data));
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

/// Uniform Xavier over (-sqrt(6/(fan_in+fan_out)), +...) for a [rows, cols]
/// view of the tensor.
fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// layer vocabulary
// ---------------------------------------------------------------------------

/// Declarative layer description; validated at network build time.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel_w: usize,
        kernel_h: usize,
    },
    Blstm {
        input_dim: usize,
        units: usize,
    },
    Fc {
        d_in: usize,
        d_out: usize,
    },
    Activation(Act),
    GlobalMaxPool,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel_w,
                kernel_h,
            } => *in_ch > 0 && *out_ch > 0 && *kernel_w > 0 && *kernel_h > 0,
            LayerSpec::Blstm { input_dim, units } => *input_dim > 0 && *units > 0,
            LayerSpec::Fc { d_in, d_out } => *d_in > 0 && *d_out > 0,
            LayerSpec::Activation(_) | LayerSpec::GlobalMaxPool => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::BadConfig(format!("invalid layer spec {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Sigmoid,
    Tanh,
    Relu,
}

impl Act {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let data = x
            .data
            .iter()
            .map(|&v| match self {
                Act::Sigmoid => sigmoid(v),
                Act::Tanh => v.tanh(),
                Act::Relu => v.max(0.0),
            })
            .collect();
        Tensor::from_vec(&x.shape, data)
    }

    /// Gradient through the activation given its forward output.
    pub fn backward(&self, out: &Tensor, grad_out: &Tensor) -> Tensor {
        let data = out
            .data
            .iter()
            .zip(grad_out.data.iter())
            .map(|(&y, &g)| match self {
                Act::Sigmoid => g * y * (1.0 - y),
                Act::Tanh => g * (1.0 - y * y),
                Act::Relu => {
                    if y > 0.0 {
                        g
                    } else {
                        0.0
                    }
                }
            })
            .collect();
        Tensor::from_vec(&out.shape, data)
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

// ---------------------------------------------------------------------------
// conv2d: stride 1, zero 'same' padding, cross-correlation convention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv2d {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kh: usize, kw: usize) -> Self {
        Conv2d {
            name: name.to_string(),
            in_ch,
            out_ch,
            kh,
            kw,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let fan_in = self.in_ch * self.kh * self.kw;
        let fan_out = self.out_ch * self.kh * self.kw;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..self.out_ch * self.in_ch * self.kh * self.kw)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        store.register(
            &self.weight_name(),
            Tensor::from_vec(&[self.out_ch, self.in_ch, self.kh, self.kw], data),
        );
        store.register(&self.bias_name(), Tensor::zeros(&[self.out_ch]));
    }

    fn pads(&self) -> (usize, usize) {
        ((self.kh - 1) / 2, (self.kw - 1) / 2)
    }

    /// Input `[in_ch, H, W]` -> output `[out_ch, H, W]`.
    pub fn forward(&self, store: &ParamStore, input: &Tensor) -> Tensor {
        assert_eq!(input.shape.len(), 3, "conv2d expects [C,H,W]");
        assert_eq!(input.shape[0], self.in_ch, "conv2d channel mismatch");
        let (h, w) = (input.shape[1], input.shape[2]);
        let weight = store.get(&self.weight_name());
        let bias = store.get(&self.bias_name());
        let (ph, pw) = self.pads();
        let mut out = Tensor::zeros(&[self.out_ch, h, w]);
        for co in 0..self.out_ch {
            let out_plane = &mut out.data[co * h * w..(co + 1) * h * w];
            out_plane.fill(bias.data[co]);
            for ci in 0..self.in_ch {
                let in_plane = &input.data[ci * h * w..(ci + 1) * h * w];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let wv = weight.data
                            [((co * self.in_ch + ci) * self.kh + ky) * self.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        // y + ky - ph in [0, h)
                        let y0 = ph.saturating_sub(ky);
                        let y1 = (h + ph).saturating_sub(ky).min(h);
                        let x0 = pw.saturating_sub(kx);
                        let x1 = (w + pw).saturating_sub(kx).min(w);
                        if y0 >= y1 || x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = y + ky - ph;
                            let src =
                                &in_plane[iy * w + (x0 + kx - pw)..iy * w + (x1 + kx - pw)];
                            let dst = &mut out_plane[y * w + x0..y * w + x1];
                            for (d, s) in dst.iter_mut().zip(src.iter()) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        input: &Tensor,
        grad_out: &Tensor,
    ) -> Tensor {
        let (h, w) = (input.shape[1], input.shape[2]);
        let (ph, pw) = self.pads();
        let weight = store.get(&self.weight_name()).clone();
        let mut gw = vec![0.0; weight.numel()];
        let mut gb = vec![0.0; self.out_ch];
        let mut gin = Tensor::zeros(&input.shape);
        for co in 0..self.out_ch {
            let go_plane = &grad_out.data[co * h * w..(co + 1) * h * w];
            gb[co] += go_plane.iter().sum::<f64>();
            for ci in 0..self.in_ch {
                let in_plane = &input.data[ci * h * w..(ci + 1) * h * w];
                let gin_plane = &mut gin.data[ci * h * w..(ci + 1) * h * w];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let widx = ((co * self.in_ch + ci) * self.kh + ky) * self.kw + kx;
                        let wv = weight.data[widx];
                        let mut acc = 0.0;
                        let y0 = ph.saturating_sub(ky);
                        let y1 = (h + ph).saturating_sub(ky).min(h);
                        let x0 = pw.saturating_sub(kx);
                        let x1 = (w + pw).saturating_sub(kx).min(w);
                        if y0 >= y1 || x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = y + ky - ph;
                            let go_row = &go_plane[y * w + x0..y * w + x1];
                            let in_row =
                                &in_plane[iy * w + (x0 + kx - pw)..iy * w + (x1 + kx - pw)];
                            let gin_row = &mut gin_plane
                                [iy * w + (x0 + kx - pw)..iy * w + (x1 + kx - pw)];
                            for ((g, s), gi) in
                                go_row.iter().zip(in_row.iter()).zip(gin_row.iter_mut())
                            {
                                acc += g * s;
                                *gi += wv * g;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        store.accum_grad(&self.weight_name(), &gw);
        store.accum_grad(&self.bias_name(), &gb);
        gin
    }
}

// ---------------------------------------------------------------------------
// fully connected on the trailing dimension
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Fc {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Fc {
    pub fn new(name: &str, d_in: usize, d_out: usize) -> Self {
        Fc {
            name: name.to_string(),
            d_in,
            d_out,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.register(
            &self.weight_name(),
            Tensor::from_vec(&[self.d_out, self.d_in], xavier(rng, self.d_out, self.d_in)),
        );
        store.register(&self.bias_name(), Tensor::zeros(&[self.d_out]));
    }

    /// `[..., d_in] -> [..., d_out]`, `y = W x + b` on each trailing vector.
    pub fn forward(&self, store: &ParamStore, input: &Tensor) -> Tensor {
        let rows = input.numel() / self.d_in;
        assert_eq!(rows * self.d_in, input.numel(), "fc input dim mismatch");
        let weight = store.get(&self.weight_name());
        let bias = store.get(&self.bias_name());
        let mut shape = input.shape.clone();
        *shape.last_mut().unwrap() = self.d_out;
        let mut out = Tensor::zeros(&shape);
        for r in 0..rows {
            let x = &input.data[r * self.d_in..(r + 1) * self.d_in];
            let y = &mut out.data[r * self.d_out..(r + 1) * self.d_out];
            for (o, yo) in y.iter_mut().enumerate() {
                let wrow = &weight.data[o * self.d_in..(o + 1) * self.d_in];
                let mut acc = bias.data[o];
                for (wv, xv) in wrow.iter().zip(x.iter()) {
                    acc += wv * xv;
                }
                *yo = acc;
            }
        }
        out
    }

    pub fn backward(&self, store: &mut ParamStore, input: &Tensor, grad_out: &Tensor) -> Tensor {
        let rows = input.numel() / self.d_in;
        let weight = store.get(&self.weight_name()).clone();
        let mut gw = vec![0.0; self.d_out * self.d_in];
        let mut gb = vec![0.0; self.d_out];
        let mut gin = Tensor::zeros(&input.shape);
        for r in 0..rows {
            let x = &input.data[r * self.d_in..(r + 1) * self.d_in];
            let go = &grad_out.data[r * self.d_out..(r + 1) * self.d_out];
            let gx = &mut gin.data[r * self.d_in..(r + 1) * self.d_in];
            for (o, &g) in go.iter().enumerate() {
                gb[o] += g;
                let wrow = &weight.data[o * self.d_in..(o + 1) * self.d_in];
                let gwrow = &mut gw[o * self.d_in..(o + 1) * self.d_in];
                for i in 0..self.d_in {
                    gwrow[i] += g * x[i];
                    gx[i] += g * wrow[i];
                }
            }
        }
        store.accum_grad(&self.weight_name(), &gw);
        store.accum_grad(&self.bias_name(), &gb);
        gin
    }
}

// ---------------------------------------------------------------------------
// bidirectional LSTM
// ---------------------------------------------------------------------------

/// Forward-direction recurrent state (h, c), used to carry context across
/// streamed chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(units: usize) -> Self {
        LstmState {
            h: vec![0.0; units],
            c: vec![0.0; units],
        }
    }
}

#[derive(Debug, Clone)]
struct StepCache {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    tc: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
}

/// Per-utterance activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BlstmCache {
    fwd: Vec<StepCache>,
    bwd: Vec<StepCache>,
}

#[derive(Debug, Clone)]
pub struct Blstm {
    pub name: String,
    pub input_dim: usize,
    pub units: usize,
}

impl Blstm {
    pub fn new(name: &str, input_dim: usize, units: usize) -> Self {
        Blstm {
            name: name.to_string(),
            input_dim,
            units,
        }
    }

    fn pname(&self, dir: &str, which: &str) -> String {
        format!("{}.{dir}.{which}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for dir in ["fwd", "bwd"] {
            store.register(
                &self.pname(dir, "w_ih"),
                Tensor::from_vec(
                    &[4 * self.units, self.input_dim],
                    xavier(rng, 4 * self.units, self.input_dim),
                ),
            );
            store.register(
                &self.pname(dir, "w_hh"),
                Tensor::from_vec(
                    &[4 * self.units, self.units],
                    xavier(rng, 4 * self.units, self.units),
                ),
            );
            // forget-gate bias starts at +1
            let mut bias = vec![0.0; 4 * self.units];
            for b in bias[self.units..2 * self.units].iter_mut() {
                *b = 1.0;
            }
            store.register(
                &self.pname(dir, "bias"),
                Tensor::from_vec(&[4 * self.units], bias),
            );
        }
    }

    /// Input `[T, D]` -> output `[T, 2 units]` (forward states in the first
    /// half of each frame, backward states in the second).
    pub fn forward(&self, store: &ParamStore, input: &Tensor) -> (Tensor, BlstmCache) {
        let (out, cache, _) = self.forward_with_state(store, input, None);
        (out, cache)
    }

    /// Like [`Blstm::forward`] but seeding the forward direction with `state`
    /// and returning its final state. The backward direction always starts
    /// from zero: it is anti-causal and cannot carry across chunks.
    pub fn forward_with_state(
        &self,
        store: &ParamStore,
        input: &Tensor,
        state: Option<&LstmState>,
    ) -> (Tensor, BlstmCache, LstmState) {
        assert_eq!(input.shape.len(), 2, "blstm expects [T, D]");
        assert_eq!(input.shape[1], self.input_dim, "blstm input dim mismatch");
        let t_len = input.shape[0];
        let u = self.units;
        let mut out = Tensor::zeros(&[t_len, 2 * u]);

        let zero = LstmState::zeros(u);
        let fwd_init = state.unwrap_or(&zero);
        let (fwd_cache, fwd_final) = self.run_direction(
            store,
            "fwd",
            (0..t_len).map(|t| input.row(t)),
            fwd_init,
        );
        for (t, step) in fwd_cache.iter().enumerate() {
            let h: Vec<f64> = step
                .o
                .iter()
                .zip(step.tc.iter())
                .map(|(&o, &tc)| o * tc)
                .collect();
            out.data[t * 2 * u..t * 2 * u + u].copy_from_slice(&h);
        }
        let (bwd_cache, _) = self.run_direction(
            store,
            "bwd",
            (0..t_len).rev().map(|t| input.row(t)),
            &zero,
        );
        for (rev_idx, step) in bwd_cache.iter().enumerate() {
            let t = t_len - 1 - rev_idx;
            let h: Vec<f64> = step
                .o
                .iter()
                .zip(step.tc.iter())
                .map(|(&o, &tc)| o * tc)
                .collect();
            out.data[t * 2 * u + u..(t + 1) * 2 * u].copy_from_slice(&h);
        }
        (
            out,
            BlstmCache {
                fwd: fwd_cache,
                bwd: bwd_cache,
            },
            fwd_final,
        )
    }

    fn run_direction<'a>(
        &self,
        store: &ParamStore,
        dir: &str,
        inputs: impl Iterator<Item = &'a [f64]>,
        init: &LstmState,
    ) -> (Vec<StepCache>, LstmState) {
        let u = self.units;
        let w_ih = store.get(&self.pname(dir, "w_ih"));
        let w_hh = store.get(&self.pname(dir, "w_hh"));
        let bias = store.get(&self.pname(dir, "bias"));
        let mut h = init.h.clone();
        let mut c = init.c.clone();
        let mut cache = Vec::new();
        for x in inputs {
            let mut z = bias.data.clone();
            for (r, zr) in z.iter_mut().enumerate() {
                let wrow = &w_ih.data[r * self.input_dim..(r + 1) * self.input_dim];
                for (wv, xv) in wrow.iter().zip(x.iter()) {
                    *zr += wv * xv;
                }
                let urow = &w_hh.data[r * u..(r + 1) * u];
                for (uv, hv) in urow.iter().zip(h.iter()) {
                    *zr += uv * hv;
                }
            }
            let mut step = StepCache {
                i: vec![0.0; u],
                f: vec![0.0; u],
                g: vec![0.0; u],
                o: vec![0.0; u],
                c: vec![0.0; u],
                tc: vec![0.0; u],
                h_prev: h.clone(),
                c_prev: c.clone(),
            };
            for k in 0..u {
                step.i[k] = sigmoid(z[k]);
                step.f[k] = sigmoid(z[u + k]);
                step.g[k] = z[2 * u + k].tanh();
                step.o[k] = sigmoid(z[3 * u + k]);
                step.c[k] = step.f[k] * c[k] + step.i[k] * step.g[k];
                step.tc[k] = step.c[k].tanh();
                h[k] = step.o[k] * step.tc[k];
            }
            c.copy_from_slice(&step.c);
            cache.push(step);
        }
        (cache, LstmState { h, c })
    }

    /// Backward through time for both directions; accumulates parameter
    /// gradients and returns the input gradient `[T, D]`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        input: &Tensor,
        cache: &BlstmCache,
        grad_out: &Tensor,
    ) -> Tensor {
        let t_len = input.shape[0];
        let u = self.units;
        let mut gin = Tensor::zeros(&input.shape);

        // forward direction reads grad columns [0, u)
        self.backprop_direction(
            store,
            "fwd",
            &cache.fwd,
            (0..t_len).collect::<Vec<_>>(),
            input,
            grad_out,
            0,
            &mut gin,
        );
        // backward direction processed the reversed sequence, columns [u, 2u)
        self.backprop_direction(
            store,
            "bwd",
            &cache.bwd,
            (0..t_len).rev().collect::<Vec<_>>(),
            input,
            grad_out,
            u,
            &mut gin,
        );
        gin
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_direction(
        &self,
        store: &mut ParamStore,
        dir: &str,
        cache: &[StepCache],
        time_order: Vec<usize>,
        input: &Tensor,
        grad_out: &Tensor,
        col_offset: usize,
        gin: &mut Tensor,
    ) {
        let u = self.units;
        let d = self.input_dim;
        let w_ih = store.get(&self.pname(dir, "w_ih")).clone();
        let w_hh = store.get(&self.pname(dir, "w_hh")).clone();
        let mut g_wih = vec![0.0; 4 * u * d];
        let mut g_whh = vec![0.0; 4 * u * u];
        let mut g_bias = vec![0.0; 4 * u];
        let mut dh_next = vec![0.0; u];
        let mut dc_next = vec![0.0; u];
        let mut dz = vec![0.0; 4 * u];
        for step_idx in (0..cache.len()).rev() {
            let t = time_order[step_idx];
            let s = &cache[step_idx];
            let go = &grad_out.data[t * grad_out.shape[1] + col_offset
                ..t * grad_out.shape[1] + col_offset + u];
            for k in 0..u {
                let dh = go[k] + dh_next[k];
                let dov = dh * s.tc[k];
                let dc = dc_next[k] + dh * s.o[k] * (1.0 - s.tc[k] * s.tc[k]);
                let div = dc * s.g[k];
                let dfv = dc * s.c_prev[k];
                let dgv = dc * s.i[k];
                dz[k] = div * s.i[k] * (1.0 - s.i[k]);
                dz[u + k] = dfv * s.f[k] * (1.0 - s.f[k]);
                dz[2 * u + k] = dgv * (1.0 - s.g[k] * s.g[k]);
                dz[3 * u + k] = dov * s.o[k] * (1.0 - s.o[k]);
                dc_next[k] = dc * s.f[k];
            }
            let x = input.row(t);
            let gx = &mut gin.data[t * d..(t + 1) * d];
            dh_next.fill(0.0);
            for r in 0..4 * u {
                let gz = dz[r];
                if gz == 0.0 {
                    continue;
                }
                g_bias[r] += gz;
                let gw_row = &mut g_wih[r * d..(r + 1) * d];
                let w_row = &w_ih.data[r * d..(r + 1) * d];
                for i in 0..d {
                    gw_row[i] += gz * x[i];
                    gx[i] += gz * w_row[i];
                }
                let gu_row = &mut g_whh[r * u..(r + 1) * u];
                let u_row = &w_hh.data[r * u..(r + 1) * u];
                for k in 0..u {
                    gu_row[k] += gz * s.h_prev[k];
                    dh_next[k] += gz * u_row[k];
                }
            }
        }
        store.accum_grad(&self.pname(dir, "w_ih"), &g_wih);
        store.accum_grad(&self.pname(dir, "w_hh"), &g_whh);
        store.accum_grad(&self.pname(dir, "bias"), &g_bias);
    }
}

// ---------------------------------------------------------------------------
// global 1-max pooling
// ---------------------------------------------------------------------------

/// Global max over each feature map: `[C, H, W] -> [C]`, remembering argmax
/// positions (first occurrence on ties) for the backward pass.
pub fn global_max_pool(input: &Tensor) -> (Tensor, Vec<usize>) {
    assert_eq!(input.shape.len(), 3, "pool expects [C,H,W]");
    let c = input.shape[0];
    let plane = input.shape[1] * input.shape[2];
    let mut out = Tensor::zeros(&[c]);
    let mut argmax = vec![0usize; c];
    for ch in 0..c {
        let data = &input.data[ch * plane..(ch + 1) * plane];
        let (mut best_i, mut best) = (0usize, f64::NEG_INFINITY);
        for (i, &v) in data.iter().enumerate() {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        out.data[ch] = best;
        argmax[ch] = ch * plane + best_i;
    }
    (out, argmax)
}

pub fn global_max_pool_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Tensor {
    let mut gin = Tensor::zeros(input_shape);
    for (ch, &idx) in argmax.iter().enumerate() {
        gin.data[idx] += grad_out.data[ch];
    }
    gin
}

// ---------------------------------------------------------------------------
// finite-difference checking
// ---------------------------------------------------------------------------

/// Central finite difference of `loss` w.r.t. one parameter entry.
pub fn central_difference(
    store: &mut ParamStore,
    name: &str,
    idx: usize,
    eps: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.get(name).data[idx];
    store.get_mut(name).data[idx] = orig + eps;
    let lp = loss(store);
    store.get_mut(name).data[idx] = orig - eps;
    let lm = loss(store);
    store.get_mut(name).data[idx] = orig;
    (lp - lm) / (2.0 * eps)
}

/// Relative error with an absolute guard for near-zero gradients.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        // both tiny: compare absolutely against the fd noise floor
        return if (analytic - numeric).abs() < 1e-8 {
            0.0
        } else {
            (analytic - numeric).abs()
        };
    }
    (analytic - numeric).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        init_rng(1234)
    }

    fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
        let mut r = init_rng(seed);
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            for v in store.get_mut(&n).data.iter_mut() {
                *v = r.gen_range(-scale..scale);
            }
        }
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let conv = Conv2d::new("c", 1, 1, 1, 1);
        let mut store = ParamStore::new();
        conv.init(&mut store, &mut rng());
        store.get_mut("c.weight").data[0] = 1.0;
        let input = Tensor::from_vec(&[1, 3, 4], (0..12).map(|v| v as f64).collect());
        let out = conv.forward(&store, &input);
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn conv_box_kernel_sums_interior() {
        let conv = Conv2d::new("c", 1, 1, 3, 3);
        let mut store = ParamStore::new();
        conv.init(&mut store, &mut rng());
        for v in store.get_mut("c.weight").data.iter_mut() {
            *v = 1.0;
        }
        let input = Tensor::from_vec(&[1, 5, 5], vec![1.0; 25]);
        let out = conv.forward(&store, &input);
        // interior of a constant-1 image under an all-ones 3x3 kernel is 9
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(out.data[y * 5 + x], 9.0);
            }
        }
        assert_eq!(out.data[0], 4.0); // corner sees a 2x2 patch
    }

    fn naive_conv(
        input: &Tensor,
        weight: &Tensor,
        bias: &[f64],
        out_ch: usize,
        kh: usize,
        kw: usize,
    ) -> Tensor {
        let (in_ch, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut out = Tensor::zeros(&[out_ch, h, w]);
        for co in 0..out_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..in_ch {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = y as i64 + ky as i64 - ph as i64;
                                let ix = x as i64 + kx as i64 - pw as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += weight.data
                                    [((co * in_ch + ci) * kh + ky) * kw + kx]
                                    * input.data[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out.data[(co * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_quadruple_loop() {
        for (in_ch, out_ch, kh, kw, h, w) in
            [(1, 2, 3, 3, 4, 5), (2, 3, 2, 4, 5, 4), (3, 1, 5, 5, 6, 6)]
        {
            let conv = Conv2d::new("c", in_ch, out_ch, kh, kw);
            let mut store = ParamStore::new();
            conv.init(&mut store, &mut rng());
            randomize(&mut store, 9, 0.7);
            let mut r = init_rng(17);
            let input = Tensor::from_vec(
                &[in_ch, h, w],
                (0..in_ch * h * w).map(|_| r.gen_range(-1.0..1.0)).collect(),
            );
            let got = conv.forward(&store, &input);
            let want = naive_conv(
                &input,
                store.get("c.weight"),
                &store.get("c.bias").data,
                out_ch,
                kh,
                kw,
            );
            for (a, b) in got.data.iter().zip(want.data.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fc_identity_and_bias() {
        let fc = Fc::new("f", 3, 3);
        let mut store = ParamStore::new();
        fc.init(&mut store, &mut rng());
        let w = store.get_mut("f.weight");
        w.data.fill(0.0);
        for i in 0..3 {
            w.data[i * 3 + i] = 1.0;
        }
        let input = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = fc.forward(&store, &input);
        assert_eq!(out.data, input.data);
        // zero input -> bias
        store.get_mut("f.bias").data.copy_from_slice(&[0.5, -0.5, 1.0]);
        let out = fc.forward(&store, &Tensor::zeros(&[1, 3]));
        assert_eq!(out.data, vec![0.5, -0.5, 1.0]);
    }

    #[test]
    fn fc_matches_naive_matmul() {
        let fc = Fc::new("f", 4, 3);
        let mut store = ParamStore::new();
        fc.init(&mut store, &mut rng());
        randomize(&mut store, 5, 1.0);
        let mut r = init_rng(6);
        let input = Tensor::from_vec(&[2, 4], (0..8).map(|_| r.gen_range(-1.0..1.0)).collect());
        let out = fc.forward(&store, &input);
        let w = store.get("f.weight");
        let b = store.get("f.bias");
        for row in 0..2 {
            for o in 0..3 {
                let mut acc = b.data[o];
                for i in 0..4 {
                    acc += w.data[o * 4 + i] * input.data[row * 4 + i];
                }
                assert!((out.data[row * 3 + o] - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn blstm_zero_params_give_zero_output() {
        let layer = Blstm::new("l", 3, 2);
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng());
        for name in ["l.fwd.w_ih", "l.fwd.w_hh", "l.fwd.bias", "l.bwd.w_ih", "l.bwd.w_hh", "l.bwd.bias"] {
            store.get_mut(name).data.fill(0.0);
        }
        let input = Tensor::from_vec(&[4, 3], vec![1.0; 12]);
        let (out, _) = layer.forward(&store, &input);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blstm_single_step_directions_agree_with_tied_params() {
        let layer = Blstm::new("l", 3, 2);
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng());
        randomize(&mut store, 3, 0.5);
        // copy fwd params into bwd
        for which in ["w_ih", "w_hh", "bias"] {
            let src = store.get(&format!("l.fwd.{which}")).clone();
            *store.get_mut(&format!("l.bwd.{which}")) = src;
        }
        let input = Tensor::from_vec(&[1, 3], vec![0.3, -0.2, 0.9]);
        let (out, _) = layer.forward(&store, &input);
        for k in 0..2 {
            assert!((out.data[k] - out.data[2 + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn blstm_matches_scalar_recurrence_oracle() {
        // step-by-step recurrence with explicit scalar math, T = 3, units = 2
        let layer = Blstm::new("l", 2, 2);
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng());
        randomize(&mut store, 21, 0.6);
        let input = Tensor::from_vec(&[3, 2], vec![0.5, -0.3, 0.1, 0.8, -0.6, 0.2]);
        let (out, _) = layer.forward(&store, &input);

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let run_dir = |dir: &str, order: Vec<usize>| -> Vec<Vec<f64>> {
            let w_ih = store.get(&format!("l.{dir}.w_ih"));
            let w_hh = store.get(&format!("l.{dir}.w_hh"));
            let bias = store.get(&format!("l.{dir}.bias"));
            let u = 2;
            let mut h = vec![0.0; u];
            let mut c = vec![0.0; u];
            let mut hs = vec![vec![0.0; u]; 3];
            for &t in &order {
                let x = input.row(t);
                let mut z = bias.data.clone();
                for r in 0..4 * u {
                    for i in 0..2 {
                        z[r] += w_ih.data[r * 2 + i] * x[i];
                    }
                    for k in 0..u {
                        z[r] += w_hh.data[r * u + k] * h[k];
                    }
                }
                for k in 0..u {
                    let iv = sig(z[k]);
                    let fv = sig(z[u + k]);
                    let gv = z[2 * u + k].tanh();
                    let ov = sig(z[3 * u + k]);
                    c[k] = fv * c[k] + iv * gv;
                    h[k] = ov * c[k].tanh();
                }
                hs[t] = h.clone();
            }
            hs
        };
        let hf = run_dir("fwd", vec![0, 1, 2]);
        let hb = run_dir("bwd", vec![2, 1, 0]);
        for t in 0..3 {
            for k in 0..2 {
                assert!((out.data[t * 4 + k] - hf[t][k]).abs() < 1e-10);
                assert!((out.data[t * 4 + 2 + k] - hb[t][k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let layer = Blstm::new("l", 3, 4);
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng());
        let mut r = init_rng(2);
        let input =
            Tensor::from_vec(&[5, 3], (0..15).map(|_| r.gen_range(-1.0..1.0)).collect());
        let (a, _) = layer.forward(&store, &input);
        let (b, _) = layer.forward(&store, &input);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn fc_linear_gradient_is_outer_product() {
        // loss = sum(output) of a single fc layer: dW = ones x input
        let fc = Fc::new("f", 3, 2);
        let mut store = ParamStore::new();
        fc.init(&mut store, &mut rng());
        let input = Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]);
        let out = fc.forward(&store, &input);
        let grad_out = Tensor::from_vec(&out.shape, vec![1.0; out.numel()]);
        fc.backward(&mut store, &input, &grad_out);
        let gw = store.grad("f.weight").unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert!((gw.data[o * 3 + i] - input.data[i]).abs() < 1e-12);
            }
        }
        assert_eq!(store.grad("f.bias").unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let conv = Conv2d::new("c", 1, 2, 3, 3);
        let mut store = ParamStore::new();
        conv.init(&mut store, &mut rng());
        randomize(&mut store, 4, 0.5);
        let input = Tensor::from_vec(&[1, 4, 4], vec![0.3; 16]);
        let out = conv.forward(&store, &input);
        let grad_out = Tensor::zeros(&out.shape);
        conv.backward(&mut store, &input, &grad_out);
        assert!(store.grad("c.weight").unwrap().data.iter().all(|&g| g == 0.0));
        assert!(store.grad("c.bias").unwrap().data.iter().all(|&g| g == 0.0));
    }

    /// Check every parameter gradient of `loss` against central differences.
    fn check_all_grads(
        store: &mut ParamStore,
        analytic: &BTreeMap<String, Vec<f64>>,
        loss: impl FnMut(&ParamStore) -> f64 + Copy,
    ) {
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let n = store.get(&name).numel();
            for idx in 0..n {
                let fd = central_difference(store, &name, idx, 1e-5, loss);
                let an = analytic[&name][idx];
                let err = grad_rel_err(an, fd);
                assert!(
                    err < 1e-4,
                    "{name}[{idx}]: analytic {an}, fd {fd}, err {err}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let conv = Conv2d::new("c", 2, 2, 3, 2);
        let mut store = ParamStore::new();
        conv.init(&mut store, &mut rng());
        randomize(&mut store, 31, 0.6);
        let mut r = init_rng(32);
        let input =
            Tensor::from_vec(&[2, 3, 4], (0..24).map(|_| r.gen_range(-1.0..1.0)).collect());
        // loss = 0.5 sum(out^2)
        let loss = |s: &ParamStore| -> f64 {
            let out = Conv2d::new("c", 2, 2, 3, 2).forward(s, &input);
            0.5 * out.data.iter().map(|v| v * v).sum::<f64>()
        };
        let out = conv.forward(&store, &input);
        store.zero_grads();
        conv.backward(&mut store, &input, &out);
        let analytic: BTreeMap<String, Vec<f64>> = store
            .names()
            .map(|n| (n.to_string(), store.grad(n).unwrap().data.clone()))
            .collect();
        check_all_grads(&mut store, &analytic, loss);
    }

    #[test]
    fn blstm_gradients_match_finite_differences() {
        let layer = Blstm::new("l", 3, 2);
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng());
        randomize(&mut store, 41, 0.5);
        let mut r = init_rng(42);
        let input =
            Tensor::from_vec(&[4, 3], (0..12).map(|_| r.gen_range(-1.0..1.0)).collect());
        let loss = |s: &ParamStore| -> f64 {
            let (out, _) = Blstm::new("l", 3, 2).forward(s, &input);
            0.5 * out.data.iter().map(|v| v * v).sum::<f64>()
        };
        let (out, cache) = layer.forward(&store, &input);
        store.zero_grads();
        layer.backward(&mut store, &input, &cache, &out);
        let analytic: BTreeMap<String, Vec<f64>> = store
            .names()
            .map(|n| (n.to_string(), store.grad(n).unwrap().data.clone()))
            .collect();
        check_all_grads(&mut store, &analytic, loss);
    }

    #[test]
    fn blstm_input_gradient_matches_finite_differences() {
        let layer = Blstm::new("l", 2, 3);
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng());
        randomize(&mut store, 51, 0.5);
        let mut r = init_rng(52);
        let mut input =
            Tensor::from_vec(&[3, 2], (0..6).map(|_| r.gen_range(-1.0..1.0)).collect());
        let (out, cache) = layer.forward(&store, &input);
        store.zero_grads();
        let gin = layer.backward(&mut store, &input, &cache, &out);
        for idx in 0..input.numel() {
            let orig = input.data[idx];
            input.data[idx] = orig + 1e-5;
            let (op, _) = layer.forward(&store, &input);
            let lp = 0.5 * op.data.iter().map(|v| v * v).sum::<f64>();
            input.data[idx] = orig - 1e-5;
            let (om, _) = layer.forward(&store, &input);
            let lm = 0.5 * om.data.iter().map(|v| v * v).sum::<f64>();
            input.data[idx] = orig;
            let fd = (lp - lm) / 2e-5;
            assert!(grad_rel_err(gin.data[idx], fd) < 1e-4);
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        for act in [Act::Sigmoid, Act::Tanh, Act::Relu] {
            let x = Tensor::from_vec(&[4], vec![-1.2, -0.3, 0.4, 1.7]);
            let out = act.forward(&x);
            let gin = act.backward(&out, &out); // upstream = out
            for idx in 0..4 {
                let mut xp = x.clone();
                xp.data[idx] += 1e-6;
                let mut xm = x.clone();
                xm.data[idx] -= 1e-6;
                let lp = 0.5 * act.forward(&xp).data.iter().map(|v| v * v).sum::<f64>();
                let lm = 0.5 * act.forward(&xm).data.iter().map(|v| v * v).sum::<f64>();
                let fd = (lp - lm) / 2e-6;
                assert!(grad_rel_err(gin.data[idx], fd) < 1e-4, "{act:?} [{idx}]");
            }
        }
    }

    #[test]
    fn pool_routes_gradient_to_argmax() {
        let input = Tensor::from_vec(&[2, 2, 2], vec![1.0, 5.0, 2.0, 3.0, -1.0, -2.0, -0.5, -4.0]);
        let (out, argmax) = global_max_pool(&input);
        assert_eq!(out.data, vec![5.0, -0.5]);
        let gin = global_max_pool_backward(&input.shape, &argmax, &Tensor::from_vec(&[2], vec![1.0, 2.0]));
        assert_eq!(gin.data[1], 1.0);
        assert_eq!(gin.data[6], 2.0);
        assert_eq!(gin.data.iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn rmsprop_zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.register("p", Tensor::from_vec(&[2], vec![1.0, -2.0]));
        store.accum_grad("p", &[0.0, 0.0]);
        store.rmsprop_step(0.01, 0.9, 1e-8).unwrap();
        assert_eq!(store.get("p").data, vec![1.0, -2.0]);
    }

    #[test]
    fn rmsprop_requires_gradients() {
        let mut store = ParamStore::new();
        store.register("p", Tensor::from_vec(&[1], vec![1.0]));
        assert!(matches!(
            store.rmsprop_step(0.01, 0.9, 1e-8),
            Err(Error::MissingGradients(_))
        ));
    }

    #[test]
    fn rmsprop_step_size_approaches_lr_under_constant_gradient() {
        let mut store = ParamStore::new();
        store.register("p", Tensor::from_vec(&[1], vec![0.0]));
        let lr = 2e-4;
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..400 {
            store.zero_grads();
            store.accum_grad("p", &[3.0]);
            store.rmsprop_step(lr, 0.9, 1e-8).unwrap();
            let cur = store.get("p").data[0];
            step = prev - cur;
            prev = cur;
        }
        // accumulator fixed point: acc -> g^2, step -> lr * sign(g)
        assert!((step - lr).abs() < 1e-6, "step {step}");
    }

    #[test]
    fn rmsprop_reduces_quadratic_loss() {
        // loss = 0.5 p^2 at lr 1e-4
        let mut store = ParamStore::new();
        store.register("p", Tensor::from_vec(&[1], vec![0.7]));
        let before = 0.5 * store.get("p").data[0].powi(2);
        store.accum_grad("p", &[0.7]);
        store.rmsprop_step(1e-4, 0.9, 1e-8).unwrap();
        let after = 0.5 * store.get("p").data[0].powi(2);
        assert!(after < before);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new();
        // f32-representable values round-trip exactly
        store.register("a.weight", Tensor::from_vec(&[2, 3], vec![0.5, -1.25, 3.0, 0.0625, -7.5, 2.0]));
        store.register("b.bias", Tensor::from_vec(&[4], vec![1.0, 0.5, -0.5, 0.25]));
        save_params(&store, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for name in store.names() {
            assert_eq!(loaded.get(name).shape, store.get(name).shape);
            assert_eq!(loaded.get(name).data, store.get(name).data);
        }
        // byte-stable serialization
        assert_eq!(params_to_bytes(&store), params_to_bytes(&loaded));
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let mut store = ParamStore::new();
        store.register("p", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let bytes = params_to_bytes(&store);
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(matches!(
            params_from_bytes(&corrupt),
            Err(Error::NotACheckpoint)
        ));
        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(
            params_from_bytes(truncated),
            Err(Error::TruncatedCheckpoint)
        ));
    }
}
