//! Objective quality measures: blind speech-to-reverberation modulation
//! energy ratio, plus reference-based log-spectral distance and SI-SDR.

use crate::dsp::{stft, StftConfig, Waveform};
use crate::{Error, Result};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Filterbank geometry for the modulation-energy ratio.
#[derive(Debug, Clone)]
pub struct SrmrConfig {
    /// Gammatone channels, ERB-spaced from `low_freq` upward.
    pub acoustic_bands: usize,
    pub low_freq: f64,
    /// Modulation filter centers, log-spaced `mod_lo..mod_hi` Hz.
    pub mod_bands: usize,
    pub mod_lo: f64,
    pub mod_hi: f64,
    /// Modulation-energy framing over the decimated envelope.
    pub energy_window_s: f64,
    pub energy_shift_s: f64,
    /// Envelope decimation factor before modulation analysis.
    pub decimate: usize,
}

impl Default for SrmrConfig {
    fn default() -> Self {
        SrmrConfig {
            acoustic_bands: 23,
            low_freq: 125.0,
            mod_bands: 8,
            mod_lo: 4.0,
            mod_hi: 128.0,
            energy_window_s: 0.256,
            energy_shift_s: 0.032,
            decimate: 16,
        }
    }
}

fn erb_number(f: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * f).log10()
}

fn erb_number_inv(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

fn erb_bandwidth(fc: f64) -> f64 {
    24.7 * (4.37 * fc / 1000.0 + 1.0)
}

/// Fourth-order gammatone magnitude response.
fn gammatone_gain(f: f64, fc: f64) -> f64 {
    let b = 1.019 * erb_bandwidth(fc);
    let r = (f - fc) / b;
    (1.0 + r * r).powi(-2)
}

/// Second-order bandpass magnitude response with Q = 2 and a true zero at
/// DC, so the envelope mean cannot leak into the band energies.
fn modband_gain(f: f64, fc: f64) -> f64 {
    const Q: f64 = 2.0;
    let bw = fc / Q;
    let num = f * bw;
    let den = ((fc * fc - f * f).powi(2) + (bw * f).powi(2)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Speech-to-reverberation modulation energy ratio: gammatone filterbank,
/// per-band analytic envelopes, a modulation filterbank on the envelopes,
/// then the ratio of summed energy in the low modulation bands (first half)
/// to the high bands (second half).
pub fn srmr(wave: &Waveform) -> Result<f64> {
    srmr_with(wave, &SrmrConfig::default())
}

pub fn srmr_with(wave: &Waveform, cfg: &SrmrConfig) -> Result<f64> {
    let mod_energy = srmr_mod_energies(wave, cfg)?;
    let half = cfg.mod_bands / 2;
    let low: f64 = mod_energy[..half].iter().sum();
    let high: f64 = mod_energy[half..].iter().sum();
    if low <= 0.0 || high <= 0.0 {
        return Err(Error::UndefinedSrmr);
    }
    Ok(low / high)
}

/// Total windowed energy per modulation band, summed over acoustic bands.
pub fn srmr_mod_energies(wave: &Waveform, cfg: &SrmrConfig) -> Result<Vec<f64>> {
    let n = wave.len();
    if n == 0 || wave.samples.iter().all(|&s| s == 0.0) {
        return Err(Error::UndefinedSrmr);
    }
    let fs = wave.sample_rate as f64;
    let fft_len = n.next_power_of_two().max(64);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_len);
    let ifft = planner.plan_fft_inverse(fft_len);

    let mut spectrum = vec![Complex64::default(); fft_len];
    for (slot, &s) in spectrum.iter_mut().zip(wave.samples.iter()) {
        slot.re = s;
    }
    fft.process(&mut spectrum);

    // ERB-spaced gammatone centers from low_freq to 0.45 fs
    let e_lo = erb_number(cfg.low_freq);
    let e_hi = erb_number(0.45 * fs);
    let centers: Vec<f64> = (0..cfg.acoustic_bands)
        .map(|i| {
            erb_number_inv(e_lo + (e_hi - e_lo) * i as f64 / (cfg.acoustic_bands - 1) as f64)
        })
        .collect();

    let mod_centers: Vec<f64> = (0..cfg.mod_bands)
        .map(|i| {
            cfg.mod_lo * (cfg.mod_hi / cfg.mod_lo).powf(i as f64 / (cfg.mod_bands - 1) as f64)
        })
        .collect();

    let env_fs = fs / cfg.decimate as f64;
    let env_len = n / cfg.decimate;
    if env_len == 0 {
        return Err(Error::UndefinedSrmr);
    }
    let env_fft_len = env_len.next_power_of_two().max(64);
    let mut env_planner = FftPlanner::new();
    let env_fft = env_planner.plan_fft_forward(env_fft_len);
    let env_ifft = env_planner.plan_fft_inverse(env_fft_len);

    let win = ((cfg.energy_window_s * env_fs).round() as usize).clamp(1, env_len);
    let shift = ((cfg.energy_shift_s * env_fs).round() as usize).max(1);

    let mut mod_energy = vec![0.0f64; cfg.mod_bands];
    let nyq = fft_len / 2;
    let mut band = vec![Complex64::default(); fft_len];
    let mut env_spec = vec![Complex64::default(); env_fft_len];
    let mut mod_sig = vec![Complex64::default(); env_fft_len];

    for &fc in &centers {
        // analytic band signal: one-sided spectrum weighted by the gammatone
        band.fill(Complex64::default());
        for k in 0..=nyq {
            let f = k as f64 * fs / fft_len as f64;
            let w = if k == 0 || k == nyq { 1.0 } else { 2.0 };
            band[k] = spectrum[k] * (w * gammatone_gain(f, fc));
        }
        ifft.process(&mut band);
        let scale = 1.0 / fft_len as f64;
        // envelope, decimated by block averaging
        let mut envelope = vec![0.0f64; env_len];
        for (i, e) in envelope.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..cfg.decimate {
                acc += (band[i * cfg.decimate + j] * scale).norm();
            }
            *e = acc / cfg.decimate as f64;
        }
        env_spec.fill(Complex64::default());
        for (slot, &e) in env_spec.iter_mut().zip(envelope.iter()) {
            slot.re = e;
        }
        env_fft.process(&mut env_spec);

        for (m, &mc) in mod_centers.iter().enumerate() {
            // real filtering: apply the gain symmetrically
            for k in 0..env_fft_len {
                let f = {
                    let kf = if k <= env_fft_len / 2 {
                        k as f64
                    } else {
                        (env_fft_len - k) as f64
                    };
                    kf * env_fs / env_fft_len as f64
                };
                mod_sig[k] = env_spec[k] * modband_gain(f, mc);
            }
            env_ifft.process(&mut mod_sig);
            let escale = 1.0 / env_fft_len as f64;
            // windowed energies over the valid envelope span
            let mut pos = 0;
            while pos < env_len {
                let end = (pos + win).min(env_len);
                let e: f64 = mod_sig[pos..end]
                    .iter()
                    .map(|c| (c.re * escale).powi(2))
                    .sum();
                mod_energy[m] += e;
                if end == env_len {
                    break;
                }
                pos += shift;
            }
        }
    }

    Ok(mod_energy)
}

/// Mean over frames of the RMS difference between log-magnitude spectra,
/// in dB, with an -80 dB magnitude floor. Inputs are trimmed to the shorter
/// length.
pub fn log_spectral_distance(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    let n = reference.len().min(estimate.len());
    let cfg = StftConfig::default();
    let r = Waveform::new(reference.samples[..n].to_vec(), reference.sample_rate);
    let e = Waveform::new(estimate.samples[..n].to_vec(), estimate.sample_rate);
    let sr = stft(&r, &cfg)?;
    let se = stft(&e, &cfg)?;
    const FLOOR: f64 = 1e-4; // -80 dB
    let mut total = 0.0;
    for t in 0..sr.frames {
        let mut acc = 0.0;
        for f in 0..sr.bins {
            let lr = 20.0 * sr.at(t, f).norm().max(FLOOR).log10();
            let le = 20.0 * se.at(t, f).norm().max(FLOOR).log10();
            acc += (lr - le) * (lr - le);
        }
        total += (acc / sr.bins as f64).sqrt();
    }
    Ok(total / sr.frames as f64)
}

/// Cap applied where the distortion energy vanishes.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Scale-invariant signal-to-distortion ratio in dB: project the estimate
/// onto the reference and compare projection to residual energy.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    let n = reference.len().min(estimate.len());
    let r = &reference.samples[..n];
    let e = &estimate.samples[..n];
    let ref_energy: f64 = r.iter().map(|v| v * v).sum();
    if ref_energy <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let dot: f64 = r.iter().zip(e.iter()).map(|(a, b)| a * b).sum();
    let alpha = dot / ref_energy;
    let mut proj_energy = 0.0;
    let mut err_energy = 0.0;
    for (a, b) in r.iter().zip(e.iter()) {
        let p = alpha * a;
        proj_energy += p * p;
        let d = b - p;
        err_energy += d * d;
    }
    if err_energy <= proj_energy * 1e-10 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (proj_energy / err_energy).log10()).min(SI_SDR_CAP_DB))
}

/// Per-utterance metric values.
#[derive(Debug, Clone)]
pub struct UtteranceMetrics {
    pub utt_id: String,
    pub srmr: f64,
    pub lsd: f64,
    pub si_sdr: f64,
}

/// Corpus report: per-utterance rows plus mean/std summaries.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<UtteranceMetrics>,
}

impl MetricReport {
    pub fn mean(&self) -> (f64, f64, f64) {
        let n = self.rows.len().max(1) as f64;
        let (mut s, mut l, mut d) = (0.0, 0.0, 0.0);
        for r in &self.rows {
            s += r.srmr;
            l += r.lsd;
            d += r.si_sdr;
        }
        (s / n, l / n, d / n)
    }

    pub fn std(&self) -> (f64, f64, f64) {
        let n = self.rows.len().max(1) as f64;
        let (ms, ml, md) = self.mean();
        let (mut s, mut l, mut d) = (0.0, 0.0, 0.0);
        for r in &self.rows {
            s += (r.srmr - ms).powi(2);
            l += (r.lsd - ml).powi(2);
            d += (r.si_sdr - md).powi(2);
        }
        ((s / n).sqrt(), (l / n).sqrt(), (d / n).sqrt())
    }

    /// CSV with a header, one row per utterance, and a final mean row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("utterance_id,srmr,lsd,si_sdr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.utt_id, r.srmr, r.lsd, r.si_sdr));
        }
        let (s, l, d) = self.mean();
        out.push_str(&format!("mean,{s},{l},{d}\n"));
        out
    }
}
