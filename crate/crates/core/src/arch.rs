//! Mask-estimating generator and spectrogram discriminator.
//!
//! Generator: five stacked convolutions (stride 1, zero 'same' padding,
//! relu), per-frame flatten of channels x frequency, two stacked BLSTM
//! layers, one FC layer onto the frequency bins, sigmoid. Input `|Y|` as a
//! `T x F` grid, output a mask in [0, 1] of the same shape.
//!
//! Discriminator: two stacked BLSTM layers over the magnitude grid, the
//! output treated as a one-channel image fed to parallel conv branches of
//! different kernel sizes, relu, global 1-max pooling per feature map, and
//! an FC layer onto a single raw score (no squashing; the adversarial loss
//! is least-squares).

use crate::dsp::Grid;
use crate::mask::Mask;
use crate::nn::{
    global_max_pool, global_max_pool_backward, init_rng, Act, Blstm, BlstmCache, Conv2d, Fc,
    LstmState, ParamStore, Tensor,
};
use crate::{Error, Result};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

/// Rational width multiplier applied to channel counts and recurrent units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale {
    pub num: u32,
    pub den: u32,
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::BadConfig(format!("bad scale {num}/{den}")));
        }
        Ok(Scale { num, den })
    }

    /// `ceil(n * num / den)`, at least 1.
    pub fn apply(&self, n: usize) -> usize {
        let scaled = (n * self.num as usize).div_ceil(self.den as usize);
        scaled.max(1)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            Scale::new(
                a.trim().parse().map_err(|_| bad_scale(s))?,
                b.trim().parse().map_err(|_| bad_scale(s))?,
            )
        } else {
            Scale::new(s.parse().map_err(|_| bad_scale(s))?, 1)
        }
    }
}

fn bad_scale(s: &str) -> Error {
    Error::BadConfig(format!("unparseable scale {s:?}"))
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// One convolution layer as (in_ch, out_ch, kernel_w, kernel_h).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel_w: usize,
    pub kernel_h: usize,
}

/// Generator description at base (unscaled) width.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub conv_stack: Vec<ConvLayerSpec>,
    pub blstm_units: usize,
    pub fc_out: usize,
    pub freq_bins: usize,
    pub scale: Scale,
}

impl GeneratorSpec {
    /// Full-width layout: (1,4,10,10), (4,4,5,5), (4,8,7,7), (8,8,5,5),
    /// (8,8,3,3) convolutions, two 256-unit BLSTM layers, 257-way FC.
    pub fn base(freq_bins: usize, scale: Scale) -> Self {
        let rows = [
            (1, 4, 10, 10),
            (4, 4, 5, 5),
            (4, 8, 7, 7),
            (8, 8, 5, 5),
            (8, 8, 3, 3),
        ];
        GeneratorSpec {
            conv_stack: rows
                .iter()
                .map(|&(i, o, w, h)| ConvLayerSpec {
                    in_ch: i,
                    out_ch: o,
                    kernel_w: w,
                    kernel_h: h,
                })
                .collect(),
            blstm_units: 256,
            fc_out: freq_bins,
            freq_bins,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_stack.is_empty() {
            return Err(Error::BadConfig("empty conv stack".into()));
        }
        for pair in self.conv_stack.windows(2) {
            if pair[0].out_ch != pair[1].in_ch {
                return Err(Error::BadConfig(format!(
                    "conv chain mismatch: {} -> {}",
                    pair[0].out_ch, pair[1].in_ch
                )));
            }
        }
        if self.fc_out != self.freq_bins {
            return Err(Error::BadConfig(format!(
                "fc_out {} must equal freq_bins {}",
                self.fc_out, self.freq_bins
            )));
        }
        if self.blstm_units == 0 || self.freq_bins == 0 {
            return Err(Error::BadConfig("zero-sized layer".into()));
        }
        Ok(())
    }

    /// Channel counts after applying the scale; the input channel stays 1.
    pub fn scaled_channels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut prev = self.conv_stack[0].in_ch;
        for layer in &self.conv_stack {
            let o = self.scale.apply(layer.out_ch);
            out.push((prev, o));
            prev = o;
        }
        out
    }

    pub fn scaled_units(&self) -> usize {
        self.scale.apply(self.blstm_units)
    }
}

/// Discriminator description at base width.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorSpec {
    pub freq_bins: usize,
    pub blstm_units: usize,
    /// (kernel_w, kernel_h, out_channels) per parallel branch.
    pub conv_branches: Vec<(usize, usize, usize)>,
    pub scale: Scale,
}

impl DiscriminatorSpec {
    /// Full-width layout: two 256-unit BLSTM layers, branches (5,5), (3,3)
    /// and (1,1) with 4 output channels each, FC to one node.
    pub fn base(freq_bins: usize, scale: Scale) -> Self {
        DiscriminatorSpec {
            freq_bins,
            blstm_units: 256,
            conv_branches: vec![(5, 5, 4), (3, 3, 4), (1, 1, 4)],
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_branches.is_empty() {
            return Err(Error::BadConfig("no conv branches".into()));
        }
        if self.blstm_units == 0 || self.freq_bins == 0 {
            return Err(Error::BadConfig("zero-sized layer".into()));
        }
        Ok(())
    }

    pub fn scaled_units(&self) -> usize {
        self.scale.apply(self.blstm_units)
    }
}

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

/// Forward-direction BLSTM states carried across streamed chunks.
#[derive(Debug, Clone)]
pub struct GenCarryState {
    pub layers: Vec<LstmState>,
}

/// Forward activations kept for the backward pass.
pub struct GenCache {
    conv_inputs: Vec<Tensor>,
    relu_outputs: Vec<Tensor>,
    bridge: Tensor,
    blstm_inputs: Vec<Tensor>,
    blstm_caches: Vec<BlstmCache>,
    fc_input: Tensor,
    mask_tensor: Tensor,
}

pub struct Generator {
    pub spec: GeneratorSpec,
    convs: Vec<Conv2d>,
    blstms: Vec<Blstm>,
    fc: Fc,
    pub params: ParamStore,
}

/// Build the generator network; parameters drawn deterministically from
/// `seed`.
pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> Result<Generator> {
    spec.validate()?;
    let channels = spec.scaled_channels();
    let units = spec.scaled_units();
    let mut params = ParamStore::new();
    let mut rng = init_rng(seed);
    let mut convs = Vec::new();
    for (idx, (layer, &(ic, oc))) in spec.conv_stack.iter().zip(channels.iter()).enumerate() {
        let conv = Conv2d::new(&format!("conv{idx}"), ic, oc, layer.kernel_h, layer.kernel_w);
        conv.init(&mut params, &mut rng);
        convs.push(conv);
    }
    let last_ch = channels.last().unwrap().1;
    let mut blstms = Vec::new();
    let mut d_in = last_ch * spec.freq_bins;
    for idx in 0..2 {
        let layer = Blstm::new(&format!("blstm{idx}"), d_in, units);
        layer.init(&mut params, &mut rng);
        blstms.push(layer);
        d_in = 2 * units;
    }
    let fc = Fc::new("fc", 2 * units, spec.fc_out);
    fc.init(&mut params, &mut rng);
    Ok(Generator {
        spec: spec.clone(),
        convs,
        blstms,
        fc,
        params,
    })
}

impl Generator {
    pub fn freq_bins(&self) -> usize {
        self.spec.freq_bins
    }

    fn check_bins(&self, grid: &Grid) -> Result<()> {
        if grid.bins != self.spec.freq_bins {
            return Err(Error::BinMismatch {
                expected: self.spec.freq_bins,
                got: grid.bins,
            });
        }
        Ok(())
    }

    /// Mask for a `T x F` magnitude grid.
    pub fn forward(&self, mag: &Grid) -> Result<Mask> {
        Ok(self.forward_full(mag, None)?.0)
    }

    /// Mask plus the activation cache needed for [`Generator::backward`],
    /// optionally carrying forward-direction BLSTM state across chunks.
    pub fn forward_full(
        &self,
        mag: &Grid,
        carry: Option<&GenCarryState>,
    ) -> Result<(Mask, GenCache, GenCarryState)> {
        self.check_bins(mag)?;
        let t_len = mag.frames;
        let f = mag.bins;
        let mut x = Tensor::from_vec(&[1, t_len, f], mag.data.clone());
        let mut conv_inputs = Vec::new();
        let mut relu_outputs = Vec::new();
        for conv in &self.convs {
            let pre = conv.forward(&self.params, &x);
            conv_inputs.push(x);
            let post = Act::Relu.forward(&pre);
            relu_outputs.push(post.clone());
            x = post;
        }
        // [C, T, F] -> [T, C*F]
        let c = x.shape[0];
        let mut bridge = Tensor::zeros(&[t_len, c * f]);
        for ch in 0..c {
            for t in 0..t_len {
                let src = &x.data[(ch * t_len + t) * f..(ch * t_len + t + 1) * f];
                bridge.data[t * c * f + ch * f..t * c * f + (ch + 1) * f].copy_from_slice(src);
            }
        }
        let mut blstm_inputs = Vec::new();
        let mut blstm_caches = Vec::new();
        let mut new_states = Vec::new();
        let mut h = bridge.clone();
        for (idx, layer) in self.blstms.iter().enumerate() {
            let state = carry.map(|cs| &cs.layers[idx]);
            let (out, cache, final_state) = layer.forward_with_state(&self.params, &h, state);
            blstm_inputs.push(h);
            blstm_caches.push(cache);
            new_states.push(final_state);
            h = out;
        }
        let fc_input = h;
        let logits = self.fc.forward(&self.params, &fc_input);
        let mask_tensor = Act::Sigmoid.forward(&logits);
        let mask = Mask {
            values: Grid::from_data(t_len, f, mask_tensor.data.clone()),
        };
        Ok((
            mask,
            GenCache {
                conv_inputs,
                relu_outputs,
                bridge,
                blstm_inputs,
                blstm_caches,
                fc_input,
                mask_tensor,
            },
            GenCarryState { layers: new_states },
        ))
    }

    /// Backpropagate a mask gradient, accumulating parameter gradients.
    pub fn backward(&mut self, cache: &GenCache, grad_mask: &Grid) {
        let t_len = grad_mask.frames;
        let f = grad_mask.bins;
        let grad = Tensor::from_vec(&[t_len, f], grad_mask.data.clone());
        let grad = Act::Sigmoid.backward(&cache.mask_tensor, &grad);
        let mut grad = self.fc.backward(&mut self.params, &cache.fc_input, &grad);
        for idx in (0..self.blstms.len()).rev() {
            grad = self.blstms[idx].backward(
                &mut self.params,
                &cache.blstm_inputs[idx],
                &cache.blstm_caches[idx],
                &grad,
            );
        }
        // [T, C*F] -> [C, T, F]
        let c = cache.relu_outputs.last().unwrap().shape[0];
        let mut g = Tensor::zeros(&[c, t_len, f]);
        for ch in 0..c {
            for t in 0..t_len {
                let src = &grad.data[t * c * f + ch * f..t * c * f + (ch + 1) * f];
                g.data[(ch * t_len + t) * f..(ch * t_len + t + 1) * f].copy_from_slice(src);
            }
        }
        let mut grad = g;
        for idx in (0..self.convs.len()).rev() {
            let grad_pre = Act::Relu.backward(&cache.relu_outputs[idx], &grad);
            grad = self.convs[idx].backward(
                &mut self.params,
                &cache.conv_inputs[idx],
                &grad_pre,
            );
        }
    }

    pub fn zero_carry(&self) -> GenCarryState {
        GenCarryState {
            layers: self
                .blstms
                .iter()
                .map(|b| LstmState::zeros(b.units))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// discriminator
// ---------------------------------------------------------------------------

pub struct DiscCache {
    blstm_inputs: Vec<Tensor>,
    blstm_caches: Vec<BlstmCache>,
    image: Tensor,
    branch_relu: Vec<Tensor>,
    branch_argmax: Vec<Vec<usize>>,
    fc_input: Tensor,
}

pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    blstms: Vec<Blstm>,
    branches: Vec<Conv2d>,
    out: Fc,
    pub params: ParamStore,
    forward_count: AtomicU64,
}

/// Build the discriminator network; parameters drawn deterministically from
/// `seed`.
pub fn build_discriminator(spec: &DiscriminatorSpec, seed: u64) -> Result<Discriminator> {
    spec.validate()?;
    let units = spec.scaled_units();
    let mut params = ParamStore::new();
    let mut rng = init_rng(seed);
    let mut blstms = Vec::new();
    let mut d_in = spec.freq_bins;
    for idx in 0..2 {
        let layer = Blstm::new(&format!("blstm{idx}"), d_in, units);
        layer.init(&mut params, &mut rng);
        blstms.push(layer);
        d_in = 2 * units;
    }
    let mut branches = Vec::new();
    let mut pooled = 0;
    for (idx, &(kw, kh, oc)) in spec.conv_branches.iter().enumerate() {
        let oc = spec.scale.apply(oc);
        let conv = Conv2d::new(&format!("branch{idx}"), 1, oc, kh, kw);
        conv.init(&mut params, &mut rng);
        branches.push(conv);
        pooled += oc;
    }
    let out = Fc::new("out", pooled, 1);
    out.init(&mut params, &mut rng);
    Ok(Discriminator {
        spec: spec.clone(),
        blstms,
        branches,
        out,
        params,
        forward_count: AtomicU64::new(0),
    })
}

impl Discriminator {
    /// Raw scalar score for a `T x F` magnitude grid; closer to 1 means
    /// "looks clean".
    pub fn forward(&self, mag: &Grid) -> Result<f64> {
        Ok(self.forward_full(mag)?.0)
    }

    pub fn forward_full(&self, mag: &Grid) -> Result<(f64, DiscCache)> {
        if mag.bins != self.spec.freq_bins {
            return Err(Error::BinMismatch {
                expected: self.spec.freq_bins,
                got: mag.bins,
            });
        }
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let t_len = mag.frames;
        let mut h = Tensor::from_vec(&[t_len, mag.bins], mag.data.clone());
        let mut blstm_inputs = Vec::new();
        let mut blstm_caches = Vec::new();
        for layer in &self.blstms {
            let (out, cache) = layer.forward(&self.params, &h);
            blstm_inputs.push(h);
            blstm_caches.push(cache);
            h = out;
        }
        // feature grid as a one-channel image
        let width = h.shape[1];
        let image = Tensor::from_vec(&[1, t_len, width], h.data.clone());
        let mut pooled = Vec::new();
        let mut branch_relu = Vec::new();
        let mut branch_argmax = Vec::new();
        for conv in &self.branches {
            let pre = conv.forward(&self.params, &image);
            let post = Act::Relu.forward(&pre);
            let (p, argmax) = global_max_pool(&post);
            pooled.extend_from_slice(&p.data);
            branch_relu.push(post);
            branch_argmax.push(argmax);
        }
        let fc_input = Tensor::from_vec(&[1, pooled.len()], pooled);
        let score = self.out.forward(&self.params, &fc_input);
        Ok((
            score.data[0],
            DiscCache {
                blstm_inputs,
                blstm_caches,
                image,
                branch_relu,
                branch_argmax,
                fc_input,
            },
        ))
    }

    /// Backpropagate `d_loss/d_score`, accumulating parameter gradients and
    /// returning the gradient with respect to the input magnitude grid.
    pub fn backward(&mut self, cache: &DiscCache, upstream: f64) -> Grid {
        let grad_score = Tensor::from_vec(&[1, 1], vec![upstream]);
        let grad_pooled = self
            .out
            .backward(&mut self.params, &cache.fc_input, &grad_score);
        let mut grad_image = Tensor::zeros(&cache.image.shape);
        let mut offset = 0;
        for (idx, conv) in self.branches.iter().enumerate() {
            let oc = cache.branch_argmax[idx].len();
            let grad_p = Tensor::from_vec(
                &[oc],
                grad_pooled.data[offset..offset + oc].to_vec(),
            );
            offset += oc;
            let grad_post = global_max_pool_backward(
                &cache.branch_relu[idx].shape,
                &cache.branch_argmax[idx],
                &grad_p,
            );
            let grad_pre = Act::Relu.backward(&cache.branch_relu[idx], &grad_post);
            let gi = conv.backward(&mut self.params, &cache.image, &grad_pre);
            for (a, b) in grad_image.data.iter_mut().zip(gi.data.iter()) {
                *a += b;
            }
        }
        // [1, T, 2U] -> [T, 2U]
        let t_len = cache.image.shape[1];
        let width = cache.image.shape[2];
        let mut grad = Tensor::from_vec(&[t_len, width], grad_image.data);
        for idx in (0..self.blstms.len()).rev() {
            grad = self.blstms[idx].backward(
                &mut self.params,
                &cache.blstm_inputs[idx],
                &cache.blstm_caches[idx],
                &grad,
            );
        }
        Grid::from_data(t_len, self.spec.freq_bins, grad.data)
    }

    /// Number of forward evaluations since construction.
    pub fn forward_calls(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }
}

// ---------------------------------------------------------------------------
// model config files: key = value lines
// ---------------------------------------------------------------------------

pub fn generator_config_string(spec: &GeneratorSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "kind = generator");
    let _ = writeln!(s, "scale = {}", spec.scale);
    let _ = writeln!(s, "freq_bins = {}", spec.freq_bins);
    let _ = writeln!(s, "blstm_units = {}", spec.blstm_units);
    let _ = writeln!(s, "fc_out = {}", spec.fc_out);
    for c in &spec.conv_stack {
        let _ = writeln!(
            s,
            "conv = {},{},{},{}",
            c.in_ch, c.out_ch, c.kernel_w, c.kernel_h
        );
    }
    s
}

pub fn discriminator_config_string(spec: &DiscriminatorSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "kind = discriminator");
    let _ = writeln!(s, "scale = {}", spec.scale);
    let _ = writeln!(s, "freq_bins = {}", spec.freq_bins);
    let _ = writeln!(s, "blstm_units = {}", spec.blstm_units);
    for &(kw, kh, oc) in &spec.conv_branches {
        let _ = writeln!(s, "branch = {kw},{kh},{oc}");
    }
    s
}

fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::BadConfig(format!("expected key = value, got {line:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_usize(v: &str, key: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::BadConfig(format!("bad {key}: {v:?}")))
}

pub fn parse_generator_config(text: &str) -> Result<GeneratorSpec> {
    let kv = parse_kv(text)?;
    let mut spec = GeneratorSpec::base(257, Scale::ONE);
    let mut convs = Vec::new();
    for (k, v) in kv {
        match k.as_str() {
            "kind" => {
                if v != "generator" {
                    return Err(Error::BadConfig(format!("expected generator, got {v}")));
                }
            }
            "scale" => spec.scale = Scale::parse(&v)?,
            "freq_bins" => spec.freq_bins = parse_usize(&v, "freq_bins")?,
            "blstm_units" => spec.blstm_units = parse_usize(&v, "blstm_units")?,
            "fc_out" => spec.fc_out = parse_usize(&v, "fc_out")?,
            "conv" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse_usize(p.trim(), "conv row"))
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    return Err(Error::BadConfig(format!("conv row needs 4 fields: {v}")));
                }
                convs.push(ConvLayerSpec {
                    in_ch: parts[0],
                    out_ch: parts[1],
                    kernel_w: parts[2],
                    kernel_h: parts[3],
                });
            }
            other => return Err(Error::BadConfig(format!("unknown key {other}"))),
        }
    }
    if !convs.is_empty() {
        spec.conv_stack = convs;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn parse_discriminator_config(text: &str) -> Result<DiscriminatorSpec> {
    let kv = parse_kv(text)?;
    let mut spec = DiscriminatorSpec::base(257, Scale::ONE);
    let mut branches = Vec::new();
    for (k, v) in kv {
        match k.as_str() {
            "kind" => {
                if v != "discriminator" {
                    return Err(Error::BadConfig(format!("expected discriminator, got {v}")));
                }
            }
            "scale" => spec.scale = Scale::parse(&v)?,
            "freq_bins" => spec.freq_bins = parse_usize(&v, "freq_bins")?,
            "blstm_units" => spec.blstm_units = parse_usize(&v, "blstm_units")?,
            "branch" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse_usize(p.trim(), "branch row"))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::BadConfig(format!("branch row needs 3 fields: {v}")));
                }
                branches.push((parts[0], parts[1], parts[2]));
            }
            other => return Err(Error::BadConfig(format!("unknown key {other}"))),
        }
    }
    if !branches.is_empty() {
        spec.conv_branches = branches;
    }
    spec.validate()?;
    Ok(spec)
}
