//! Offline utterance-level and online chunked dereverberation with a frozen
//! generator.
//!
//! The online session buffers STFT frames into fixed-size chunks, runs the
//! generator on each chunk (recurrent state reset at every chunk boundary by
//! default), and overlap-adds masked frames incrementally. A sample is
//! emitted once no future frame can touch it, so a chunk covering the whole
//! utterance reproduces the offline output bit for bit.

use crate::arch::{GenCarryState, Generator};
use crate::dsp::{istft, stft, to_mag_phase, Grid, MagPhase, StftConfig, Waveform};
use crate::mask::{apply_mask, psm_target};
use crate::{Error, Result};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use std::sync::Arc;
use std::time::Instant;

/// Chunked-inference settings. Presets of 10, 20 and 40 frames give 160,
/// 320 and 640 ms of algorithmic delay at 16 kHz with a 16 ms hop.
#[derive(Debug, Clone, Copy)]
pub struct ChunkConfig {
    pub chunk_frames: usize,
    /// Carry forward-direction recurrent state across chunks instead of
    /// resetting at each boundary.
    pub carry_state: bool,
}

impl ChunkConfig {
    pub fn new(chunk_frames: usize) -> Self {
        ChunkConfig {
            chunk_frames: chunk_frames.max(1),
            carry_state: false,
        }
    }

    /// Buffering delay in milliseconds: `chunk_frames * hop / fs`.
    pub fn algorithmic_delay_ms(&self, stft: &StftConfig, sample_rate: u32) -> f64 {
        self.chunk_frames as f64 * stft.hop as f64 * 1000.0 / sample_rate as f64
    }
}

/// Whole-utterance dereverberation: mask the magnitude, keep the
/// reverberant phase, resynthesize, trim to the input length.
pub fn dereverb_offline(wave: &Waveform, gen: &Generator) -> Result<Waveform> {
    let cfg = StftConfig::default();
    let spec = stft(wave, &cfg)?;
    let mp = to_mag_phase(&spec);
    let mask = gen.forward(&mp.mag)?;
    let masked = apply_mask(&mask, &mp)?;
    let mut out = istft(&masked)?;
    out.samples.truncate(wave.len());
    Ok(out)
}

/// Upper-bound reference: apply the clipped phase-sensitive mask computed
/// from the ground-truth clean signal.
pub fn dereverb_oracle(clean: &Waveform, reverb: &Waveform) -> Result<Waveform> {
    let cfg = StftConfig::default();
    let n = clean.len().min(reverb.len());
    let c = Waveform::new(clean.samples[..n].to_vec(), clean.sample_rate);
    let r = Waveform::new(reverb.samples[..n].to_vec(), reverb.sample_rate);
    let sc = to_mag_phase(&stft(&c, &cfg)?);
    let sr = to_mag_phase(&stft(&r, &cfg)?);
    let mask = psm_target(&sc, &sr, (0.0, 1.0))?;
    let masked = apply_mask(&mask, &sr)?;
    let mut out = istft(&masked)?;
    out.samples.truncate(n);
    Ok(out)
}

/// Streaming chunked dereverberation over one input stream.
pub struct OnlineSession<'a> {
    gen: &'a Generator,
    stft_cfg: StftConfig,
    chunk: ChunkConfig,
    window: Vec<f64>,
    fft: Arc<dyn rustfft::Fft<f64>>,
    ifft: Arc<dyn rustfft::Fft<f64>>,
    sample_rate: u32,
    /// Raw input; `buf_start` is the absolute index of `input[0]`.
    input: Vec<f64>,
    buf_start: usize,
    total_in: usize,
    frames_done: usize,
    /// Overlap-add accumulators aligned so index 0 is absolute `emitted`.
    num: Vec<f64>,
    den: Vec<f64>,
    emitted: usize,
    carry: Option<GenCarryState>,
    chunk_ms: Vec<f64>,
    finished: bool,
}

impl<'a> OnlineSession<'a> {
    pub fn new(gen: &'a Generator, chunk: ChunkConfig, sample_rate: u32) -> Self {
        let stft_cfg = StftConfig::default();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(stft_cfg.frame_len);
        let ifft = planner.plan_fft_inverse(stft_cfg.frame_len);
        OnlineSession {
            gen,
            window: stft_cfg.window_samples(),
            stft_cfg,
            chunk,
            fft,
            ifft,
            sample_rate,
            input: Vec::new(),
            buf_start: 0,
            total_in: 0,
            frames_done: 0,
            num: Vec::new(),
            den: Vec::new(),
            emitted: 0,
            carry: None,
            chunk_ms: Vec::new(),
            finished: false,
        }
    }

    pub fn frames_processed(&self) -> usize {
        self.frames_done
    }

    /// Per-chunk generator feed-forward wall times in milliseconds.
    pub fn chunk_times_ms(&self) -> &[f64] {
        &self.chunk_ms
    }

    /// Feed samples; returns whatever output samples became final.
    pub fn push(&mut self, samples: &[f64]) -> Result<Vec<f64>> {
        assert!(!self.finished, "push after finish");
        self.input.extend_from_slice(samples);
        self.total_in += samples.len();
        let mut out = Vec::new();
        loop {
            let next_end = self.frames_done + self.chunk.chunk_frames;
            // full chunk is ready once its last frame is fully covered
            let need = (next_end - 1) * self.stft_cfg.hop + self.stft_cfg.frame_len;
            if self.total_in < need {
                break;
            }
            self.process_frames(next_end, &mut out)?;
        }
        Ok(out)
    }

    /// Flush the final partial chunk and remaining overlap-add tail. Output
    /// is trimmed so the total stream length equals the total input length.
    pub fn finish(mut self) -> Result<Vec<f64>> {
        assert!(!self.finished, "finish twice");
        self.finished = true;
        if self.total_in < self.stft_cfg.frame_len {
            return Err(Error::InputTooShort {
                len: self.total_in,
                min: self.stft_cfg.frame_len,
            });
        }
        let total_frames = self.stft_cfg.frame_count(self.total_in);
        let mut out = Vec::new();
        while self.frames_done < total_frames {
            let next_end = (self.frames_done + self.chunk.chunk_frames).min(total_frames);
            self.process_frames(next_end, &mut out)?;
        }
        // drain the tail up to the input length
        let remaining = self.total_in.saturating_sub(self.emitted);
        for i in 0..remaining {
            let (n, d) = (self.num[i], self.den[i]);
            out.push(if d > 1e-12 { n / d } else { 0.0 });
        }
        Ok(out)
    }

    /// Process frames `[frames_done, chunk_end)` as one generator call and
    /// emit every sample that can no longer change.
    fn process_frames(&mut self, chunk_end: usize, out: &mut Vec<f64>) -> Result<()> {
        let hop = self.stft_cfg.hop;
        let flen = self.stft_cfg.frame_len;
        let bins = self.stft_cfg.bins();
        let count = chunk_end - self.frames_done;

        // analysis
        let mut spec_rows = vec![Complex64::default(); count * bins];
        let mut buf = vec![Complex64::default(); flen];
        for (row, t) in (self.frames_done..chunk_end).enumerate() {
            let start = t * hop;
            for i in 0..flen {
                let abs = start + i;
                let s = if abs < self.total_in {
                    let rel = abs - self.buf_start;
                    self.input.get(rel).copied().unwrap_or(0.0)
                } else {
                    0.0
                };
                buf[i] = Complex64::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            spec_rows[row * bins..(row + 1) * bins].copy_from_slice(&buf[..bins]);
        }

        // mask
        let mut mag = Grid::zeros(count, bins);
        let mut phase = Grid::zeros(count, bins);
        for (i, c) in spec_rows.iter().enumerate() {
            let m = c.norm();
            mag.data[i] = m;
            phase.data[i] = if m == 0.0 { 0.0 } else { c.im.atan2(c.re) };
        }
        let t0 = Instant::now();
        let carry_in = if self.chunk.carry_state {
            self.carry.as_ref()
        } else {
            None
        };
        let (mask, _, carry_out) = self.gen.forward_full(&mag, carry_in)?;
        self.chunk_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        if self.chunk.carry_state {
            self.carry = Some(carry_out);
        }

        // synthesis into the rolling overlap-add buffers
        let mp = MagPhase {
            mag,
            phase,
            config: self.stft_cfg,
            sample_rate: self.sample_rate,
        };
        let masked = apply_mask(&mask, &mp)?;
        for (row, t) in (self.frames_done..chunk_end).enumerate() {
            let spec_row = &masked.data[row * bins..(row + 1) * bins];
            buf[..bins].copy_from_slice(spec_row);
            for k in 1..flen / 2 {
                buf[flen - k] = spec_row[k].conj();
            }
            self.ifft.process(&mut buf);
            let scale = 1.0 / flen as f64;
            let start = t * hop;
            let rel0 = start - self.emitted;
            if self.num.len() < rel0 + flen {
                self.num.resize(rel0 + flen, 0.0);
                self.den.resize(rel0 + flen, 0.0);
            }
            for i in 0..flen {
                let v = buf[i].re * scale;
                self.num[rel0 + i] += self.window[i] * v;
                self.den[rel0 + i] += self.window[i] * self.window[i];
            }
        }
        self.frames_done = chunk_end;

        // samples below the next frame start are final
        let final_upto = (chunk_end * hop).min(self.total_in);
        let n_emit = final_upto.saturating_sub(self.emitted);
        for i in 0..n_emit {
            let (n, d) = (self.num[i], self.den[i]);
            out.push(if d > 1e-12 { n / d } else { 0.0 });
        }
        self.num.drain(..n_emit);
        self.den.drain(..n_emit);
        self.emitted += n_emit;

        // drop input the next frame can no longer reach
        let keep_from = chunk_end * hop;
        if keep_from > self.buf_start {
            let cut = (keep_from - self.buf_start).min(self.input.len());
            self.input.drain(..cut);
            self.buf_start += cut;
        }
        Ok(())
    }
}

/// Run a whole waveform through an online session.
pub fn dereverb_online(wave: &Waveform, gen: &Generator, chunk: ChunkConfig) -> Result<Waveform> {
    let mut session = OnlineSession::new(gen, chunk, wave.sample_rate);
    let mut out = session.push(&wave.samples)?;
    out.extend(session.finish()?);
    Ok(Waveform::new(out, wave.sample_rate))
}

/// Latency characteristics of one chunk configuration.
#[derive(Debug, Clone)]
pub struct LatencyReport {
    pub chunk_frames: usize,
    pub algorithmic_delay_ms: f64,
    pub median_feed_ms: f64,
    pub p95_feed_ms: f64,
    pub chunks_timed: usize,
}

impl std::fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "chunk {} frames: algorithmic delay {} ms, feed-forward median {:.2} ms, p95 {:.2} ms over {} chunks",
            self.chunk_frames,
            self.algorithmic_delay_ms,
            self.median_feed_ms,
            self.p95_feed_ms,
            self.chunks_timed
        )
    }
}

/// Measure per-chunk feed-forward time on a deterministic noise probe of
/// `probe_len` samples.
pub fn latency_report(gen: &Generator, chunk: ChunkConfig, probe_len: usize) -> Result<LatencyReport> {
    use rand::Rng;
    let mut rng = crate::nn::init_rng(7);
    let probe = Waveform::new(
        (0..probe_len.max(StftConfig::DEFAULT_FRAME_LEN))
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect(),
        16_000,
    );
    let mut session = OnlineSession::new(gen, chunk, probe.sample_rate);
    session.push(&probe.samples)?;
    let cfg = StftConfig::default();
    let delay = chunk.algorithmic_delay_ms(&cfg, probe.sample_rate);
    let mut times = session.chunk_times_ms().to_vec();
    let chunks_timed = times.len();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |q: f64| -> f64 {
        if times.is_empty() {
            0.0
        } else {
            times[((times.len() - 1) as f64 * q).round() as usize]
        }
    };
    Ok(LatencyReport {
        chunk_frames: chunk.chunk_frames,
        algorithmic_delay_ms: delay,
        median_feed_ms: pick(0.5),
        p95_feed_ms: pick(0.95),
        chunks_timed,
    })
}
