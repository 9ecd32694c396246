//! Time/frequency transforms, convolution and WAV I/O.
//!
//! Everything here is pure and reentrant: no shared mutable state, safe to
//! call from multiple threads.

use crate::{Error, Result};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

/// Mono sample sequence. Samples are nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Analysis window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
}

/// Framing parameters for the STFT. `fft_size` equals `frame_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
}

impl StftConfig {
    /// 32 ms frames with 16 ms shift at 16 kHz: 512/256 samples, 257 bins.
    pub const DEFAULT_FRAME_LEN: usize = 512;
    pub const DEFAULT_HOP: usize = 256;

    pub fn new(frame_len: usize, hop: usize) -> Result<Self> {
        if frame_len == 0 || frame_len % 2 != 0 {
            return Err(Error::BadStftConfig(format!(
                "frame_len must be even and positive, got {frame_len}"
            )));
        }
        if hop == 0 || hop > frame_len {
            return Err(Error::BadStftConfig(format!(
                "hop must satisfy 0 < hop <= frame_len, got {hop}"
            )));
        }
        Ok(StftConfig {
            frame_len,
            hop,
            window: Window::Hann,
        })
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Periodic Hann; satisfies constant overlap-add at 50% overlap.
    pub fn window_samples(&self) -> Vec<f64> {
        let n = self.frame_len as f64;
        (0..self.frame_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
            .collect()
    }

    /// Frame count for an input of `len` samples; the final partial frame is
    /// zero-padded rather than dropped.
    pub fn frame_count(&self, len: usize) -> usize {
        if len <= self.frame_len {
            1
        } else {
            1 + (len - self.frame_len).div_ceil(self.hop)
        }
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_len: Self::DEFAULT_FRAME_LEN,
            hop: Self::DEFAULT_HOP,
            window: Window::Hann,
        }
    }
}

/// Real-valued time-frequency grid, row-major `[frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Grid {
            frames,
            bins,
            data: vec![0.0; frames * bins],
        }
    }

    pub fn from_data(frames: usize, bins: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), frames * bins, "grid data length mismatch");
        Grid { frames, bins, data }
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.bins + f]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, f: usize) -> &mut f64 {
        &mut self.data[t * self.bins + f]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.frames == other.frames && self.bins == other.bins
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// One-sided complex STFT grid, row-major `[frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    #[inline]
    pub fn at(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }
}

/// Magnitude/phase view of a spectrogram. `mag >= 0`, phase in (-pi, pi].
#[derive(Debug, Clone, PartialEq)]
pub struct MagPhase {
    pub mag: Grid,
    pub phase: Grid,
    pub config: StftConfig,
    pub sample_rate: u32,
}

fn fft_forward(buf: &mut [Complex64]) {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(buf.len());
    fft.process(buf);
}

fn fft_inverse(buf: &mut [Complex64]) {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_inverse(buf.len());
    fft.process(buf);
    let scale = 1.0 / buf.len() as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Short-time Fourier transform with windowed frames and a one-sided output.
pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    if cfg.frame_len == 0 || cfg.frame_len % 2 != 0 || cfg.hop == 0 || cfg.hop > cfg.frame_len {
        return Err(Error::BadStftConfig(format!("{cfg:?}")));
    }
    if wave.len() < cfg.frame_len {
        return Err(Error::InputTooShort {
            len: wave.len(),
            min: cfg.frame_len,
        });
    }
    let window = cfg.window_samples();
    let frames = cfg.frame_count(wave.len());
    let bins = cfg.bins();
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::default(); cfg.frame_len];
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.frame_len);
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = wave.samples.get(start + i).copied().unwrap_or(0.0);
            *slot = Complex64::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(ComplexSpectrogram {
        frames,
        bins,
        data,
        config: *cfg,
        sample_rate: wave.sample_rate,
    })
}

/// Inverse STFT by weighted overlap-add: the synthesis window equals the
/// analysis window and the sum of squared windows is divided out.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    let cfg = &spec.config;
    let n = cfg.frame_len;
    let out_len = (spec.frames - 1) * cfg.hop + n;
    let window = cfg.window_samples();
    let mut num = vec![0.0f64; out_len];
    let mut den = vec![0.0f64; out_len];
    let mut buf = vec![Complex64::default(); n];
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n);
    for t in 0..spec.frames {
        let row = &spec.data[t * spec.bins..(t + 1) * spec.bins];
        buf[..spec.bins].copy_from_slice(row);
        for k in 1..n / 2 {
            buf[n - k] = row[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        let scale = 1.0 / n as f64;
        for i in 0..n {
            let v = buf[i].re * scale;
            num[start + i] += window[i] * v;
            den[start + i] += window[i] * window[i];
        }
    }
    // Interior coverage gaps mean the window/hop pair cannot reconstruct.
    let interior = n..out_len.saturating_sub(n);
    if interior.clone().any(|i| den[i] <= 1e-12) {
        return Err(Error::UnsupportedOverlap);
    }
    let samples = num
        .iter()
        .zip(den.iter())
        .map(|(&a, &b)| if b > 1e-12 { a / b } else { 0.0 })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Split a spectrogram into magnitude and phase. Zero-magnitude bins get
/// phase 0 by convention.
pub fn to_mag_phase(spec: &ComplexSpectrogram) -> MagPhase {
    let mut mag = Grid::zeros(spec.frames, spec.bins);
    let mut phase = Grid::zeros(spec.frames, spec.bins);
    for (i, c) in spec.data.iter().enumerate() {
        let m = c.norm();
        mag.data[i] = m;
        phase.data[i] = if m == 0.0 {
            0.0
        } else {
            let p = c.im.atan2(c.re);
            if p <= -PI {
                PI
            } else {
                p
            }
        };
    }
    MagPhase {
        mag,
        phase,
        config: spec.config,
        sample_rate: spec.sample_rate,
    }
}

/// Recombine magnitude and phase into a complex spectrogram.
pub fn from_mag_phase(mp: &MagPhase) -> ComplexSpectrogram {
    let data = mp
        .mag
        .data
        .iter()
        .zip(mp.phase.data.iter())
        .map(|(&m, &p)| Complex64::new(m * p.cos(), m * p.sin()))
        .collect();
    ComplexSpectrogram {
        frames: mp.mag.frames,
        bins: mp.mag.bins,
        data,
        config: mp.config,
        sample_rate: mp.sample_rate,
    }
}

/// Full linear convolution, output length `len(x) + len(h) - 1`.
///
/// FFT-based; agrees with the direct sum to ~1e-13 for unit-scale signals.
pub fn convolve(x: &Waveform, h: &[f64], h_rate: u32) -> Result<Waveform> {
    if x.sample_rate != h_rate {
        return Err(Error::RateMismatch {
            a: x.sample_rate,
            b: h_rate,
        });
    }
    if x.is_empty() || h.is_empty() {
        return Ok(Waveform::new(Vec::new(), x.sample_rate));
    }
    let out_len = x.len() + h.len() - 1;
    let fft_len = out_len.next_power_of_two();
    let mut a = vec![Complex64::default(); fft_len];
    let mut b = vec![Complex64::default(); fft_len];
    for (dst, &s) in a.iter_mut().zip(x.samples.iter()) {
        dst.re = s;
    }
    for (dst, &s) in b.iter_mut().zip(h.iter()) {
        dst.re = s;
    }
    fft_forward(&mut a);
    fft_forward(&mut b);
    for (va, vb) in a.iter_mut().zip(b.iter()) {
        *va *= vb;
    }
    fft_inverse(&mut a);
    let samples = a[..out_len].iter().map(|c| c.re).collect();
    Ok(Waveform::new(samples, x.sample_rate))
}

/// Sample encoding for WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Read a mono RIFF/WAVE file (PCM16 or IEEE float32).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    let bad = |m: &str| Error::UnsupportedWav(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("fmt chunk too short"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1); // chunks are word-aligned
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    if channels != 1 {
        return Err(bad(&format!("{channels} channels, only mono supported")));
    }
    let samples = match (format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => {
            return Err(bad(&format!(
                "format {format} with {bits} bits, only PCM16 and float32 supported"
            )))
        }
    };
    Ok(Waveform {
        samples,
        sample_rate: rate,
    })
}

/// Write a mono WAV file. PCM16 output is clamped to [-1, 1].
pub fn write_wav(path: &Path, wave: &Waveform, encoding: WavEncoding) -> Result<()> {
    let (format, bits): (u16, u16) = match encoding {
        WavEncoding::Pcm16 => (1, 16),
        WavEncoding::Float32 => (3, 32),
    };
    let bytes_per_sample = (bits / 8) as u32;
    let data_size = wave.len() as u32 * bytes_per_sample;
    let mut out = Vec::with_capacity(44 + data_size as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * bytes_per_sample).to_le_bytes());
    out.extend_from_slice(&(bytes_per_sample as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    match encoding {
        WavEncoding::Pcm16 => {
            for &s in &wave.samples {
                let v = (s.clamp(-1.0, 1.0) * 32768.0).round();
                let v = v.clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        WavEncoding::Float32 => {
            for &s in &wave.samples {
                out.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
    }
    atomic_write(path, &out)
}

/// Write via a temp file in the same directory, then rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp.partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all().ok();
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
