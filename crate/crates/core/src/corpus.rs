//! Paired reverberant/clean corpus synthesis with JSONL manifests.

use crate::dsp::{self, istft, stft, StftConfig, Waveform, WavEncoding};
use crate::rir::{self, default_duration, sample_scene, simulate_rir, RoomSpec};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Recipe for one corpus build.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub clean_dir: PathBuf,
    /// (room id, dimensions in meters) pairs.
    pub rooms: Vec<(String, [f64; 3])>,
    pub rt60_range: (f64, f64),
    pub pairs_per_clean: usize,
    pub seed: u64,
    pub split: Split,
}

/// One reverberant/clean pair; paths are relative to the manifest location.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub clean_path: String,
    pub reverb_path: String,
    pub rir_path: Option<String>,
    pub room_id: String,
    pub rt60_target: f64,
    pub rt60_measured: Option<f64>,
    /// Measured RT60 within 25% of target (vacuous for targets < 0.15 s).
    pub rt60_ok: bool,
    pub source_pos: [f64; 3],
}

#[derive(Debug)]
pub struct BuildReport {
    pub manifest_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub skipped: usize,
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 step
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Convolve each clean file with a freshly sampled room response, trim the
/// tail back to the clean length, peak-normalize the pair jointly, and write
/// clean/reverb/RIR WAVs plus a JSONL manifest. Deterministic under
/// `spec.seed`; unreadable clean files are skipped and counted.
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<BuildReport> {
    let mut clean_files: Vec<PathBuf> = std::fs::read_dir(&spec.clean_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
        .collect();
    clean_files.sort();
    if clean_files.is_empty() {
        return Err(Error::Manifest(format!(
            "no wav files in {}",
            spec.clean_dir.display()
        )));
    }
    if spec.rooms.is_empty() {
        return Err(Error::Manifest("no rooms configured".into()));
    }

    std::fs::create_dir_all(out_dir)?;
    for sub in ["clean", "reverb", "rir"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }

    struct Job {
        index: u64,
        clean: PathBuf,
        room_id: String,
        dims: [f64; 3],
    }
    let mut jobs = Vec::new();
    let mut index = 0u64;
    for clean in &clean_files {
        for (room_id, dims) in &spec.rooms {
            for _ in 0..spec.pairs_per_clean.max(1) {
                jobs.push(Job {
                    index,
                    clean: clean.clone(),
                    room_id: room_id.clone(),
                    dims: *dims,
                });
                index += 1;
            }
        }
    }

    let results: Vec<Result<Option<ManifestEntry>>> = jobs
        .par_iter()
        .map(|job| build_entry(spec, out_dir, job.index, &job.clean, &job.room_id, job.dims))
        .collect();

    let mut entries = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r {
            Ok(Some(e)) => entries.push(e),
            Ok(None) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if entries.is_empty() {
        return Err(Error::Manifest("every corpus entry failed".into()));
    }
    entries.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));

    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &entries)?;
    Ok(BuildReport {
        manifest_path,
        entries,
        skipped,
    })
}

fn build_entry(
    spec: &CorpusSpec,
    out_dir: &Path,
    index: u64,
    clean_path: &Path,
    room_id: &str,
    dims: [f64; 3],
) -> Result<Option<ManifestEntry>> {
    let clean = match dsp::read_wav(clean_path) {
        Ok(w) if w.sample_rate == SAMPLE_RATE && !w.is_empty() => w,
        _ => return Ok(None), // skipped with a warning count
    };
    let room = RoomSpec::new(dims, 0.0, SAMPLE_RATE)?;
    let entry_seed = mix_seed(spec.seed, index);
    let scene = sample_scene(&room, spec.rt60_range, entry_seed)?;
    let rt60 = scene.rt60_target;
    let rir = simulate_rir(&scene, default_duration(rt60))?;

    let mut reverb = dsp::convolve(&clean, &rir.taps, rir.sample_rate)?;
    reverb.samples.truncate(clean.len());

    // joint peak normalization keeps the mask ratio of the pair intact
    let peak = reverb.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
    let mut clean_out = clean;
    for s in clean_out.samples.iter_mut() {
        *s *= gain;
    }
    for s in reverb.samples.iter_mut() {
        *s *= gain;
    }

    let stem = clean_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| format!("utt{index}"));
    let utt_id = format!("{stem}_{room_id}_{index:05}");

    let clean_rel = format!("clean/{utt_id}.wav");
    let reverb_rel = format!("reverb/{utt_id}.wav");
    let rir_rel = format!("rir/{utt_id}.wav");
    dsp::write_wav(&out_dir.join(&clean_rel), &clean_out, WavEncoding::Float32)?;
    dsp::write_wav(&out_dir.join(&reverb_rel), &reverb, WavEncoding::Float32)?;
    dsp::write_wav(
        &out_dir.join(&rir_rel),
        &Waveform::new(rir.taps.clone(), rir.sample_rate),
        WavEncoding::Float32,
    )?;

    let measured = rir::estimate_rt60(&rir).ok();
    let rt60_ok = if rt60 >= 0.15 {
        measured
            .map(|m| (m - rt60).abs() <= 0.25 * rt60)
            .unwrap_or(false)
    } else {
        true
    };
    Ok(Some(ManifestEntry {
        utt_id,
        clean_path: clean_rel,
        reverb_path: reverb_rel,
        rir_path: Some(rir_rel),
        room_id: room_id.to_string(),
        rt60_target: rt60,
        rt60_measured: measured,
        rt60_ok,
        source_pos: scene.source,
    }))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).map_err(|e| Error::Manifest(e.to_string()))?);
        text.push('\n');
    }
    dsp::atomic_write(path, text.as_bytes())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 1)))?;
        entries.push(e);
    }
    if entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(entries)
}

/// Resolve a manifest-relative path.
pub fn resolve_path(manifest: &Path, rel: &str) -> PathBuf {
    manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(rel)
}

/// Append identity pairs (reverb = clean) covering `fraction` of the
/// existing entries; the phase-sensitive target for these pairs is 1
/// everywhere.
pub fn augment_clean_identity(entries: &mut Vec<ManifestEntry>, fraction: f64) {
    let count = (fraction * entries.len() as f64).round() as usize;
    for k in 0..count {
        let src = entries[k % entries.len()].clone();
        entries.push(ManifestEntry {
            utt_id: format!("{}_identity{k}", src.utt_id),
            reverb_path: src.clean_path.clone(),
            rir_path: None,
            room_id: "identity".into(),
            rt60_target: 0.0,
            rt60_measured: None,
            rt60_ok: true,
            ..src
        });
    }
}

/// Synthetic speech-like clean signals: a pitch-modulated harmonic source
/// gated by a syllabic envelope with pauses, shaped by slowly drifting
/// formant resonances in the STFT domain. Deterministic under `seed`.
pub fn make_synthetic_clean(
    count: usize,
    duration: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let paths: Vec<PathBuf> = (0..count)
        .map(|i| out_dir.join(format!("clean_{i:03}.wav")))
        .collect();
    paths
        .par_iter()
        .enumerate()
        .try_for_each(|(i, path)| -> Result<()> {
            let wave = synth_utterance(duration, mix_seed(seed, i as u64));
            dsp::write_wav(path, &wave, WavEncoding::Float32)
        })?;
    Ok(paths)
}

fn synth_utterance(duration: f64, seed: u64) -> Waveform {
    let fs = SAMPLE_RATE as f64;
    let n = (duration * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // harmonic source with vibrato and cycle jitter plus aspiration noise
    let f0_base = rng.gen_range(150.0..260.0);
    let vib_rate = rng.gen_range(0.3..0.8);
    let vib_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let n_harm = ((0.45 * fs / f0_base) as usize).min(40);
    let mut phase = 0.0f64;
    let mut jitter = 0.0f64;
    let jitter_pole = (-2.0 * std::f64::consts::PI * 20.0 / fs).exp();
    let mut source = vec![0.0f64; n];
    for (i, s) in source.iter_mut().enumerate() {
        let t = i as f64 / fs;
        jitter = jitter_pole * jitter + (1.0 - jitter_pole) * rng.gen_range(-1.0..1.0);
        let f0 = f0_base
            * (1.0
                + 0.04 * (std::f64::consts::TAU * vib_rate * t + vib_phase).sin()
                + 0.06 * jitter);
        phase += std::f64::consts::TAU * f0 / fs;
        let mut acc = 0.0;
        for k in 1..=n_harm {
            acc += (phase * k as f64).sin() / k as f64;
        }
        let aspiration = 0.25 * rng.gen_range(-1.0..1.0);
        *s = acc + aspiration;
    }

    // syllabic gating: voiced or fricative-like bursts separated by pauses
    let mut envelope = vec![0.0f64; n];
    let mut voiced = vec![true; n];
    let mut pos = 0usize;
    while pos < n {
        let syl = (rng.gen_range(0.12..0.3) * fs) as usize;
        let pause = (rng.gen_range(0.04..0.18) * fs) as usize;
        let fricative = rng.gen_bool(0.25);
        let end = (pos + syl).min(n);
        let len = end - pos;
        for i in 0..len {
            // raised-cosine rise and fall over the syllable
            let x = i as f64 / len as f64;
            envelope[pos + i] = 0.5 * (1.0 - (std::f64::consts::TAU * x).cos());
            voiced[pos + i] = !fricative;
        }
        pos = end + pause;
    }
    for i in 0..n {
        if voiced[i] {
            source[i] *= envelope[i];
        } else {
            source[i] = 0.6 * envelope[i] * rng.gen_range(-1.0..1.0);
        }
    }

    // formant shaping over STFT frames
    let cfg = StftConfig::default();
    if n >= cfg.frame_len {
        let wave = Waveform::new(source, SAMPLE_RATE);
        let mut spec = stft(&wave, &cfg).expect("length checked");
        let base_formants = [
            rng.gen_range(320.0..700.0),
            rng.gen_range(950.0..1900.0),
            rng.gen_range(2200.0..3100.0),
        ];
        let drift_rate = rng.gen_range(0.2..0.6);
        let drift_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for t in 0..spec.frames {
            let time = t as f64 * cfg.hop as f64 / fs;
            let drift =
                (std::f64::consts::TAU * drift_rate * time + drift_phase).sin();
            for f in 0..spec.bins {
                let freq = f as f64 * fs / cfg.frame_len as f64;
                let mut gain = 0.05;
                for (j, &bf) in base_formants.iter().enumerate() {
                    let fj = bf * (1.0 + 0.12 * drift * (j as f64 + 1.0) / 3.0);
                    let bw = 90.0 + 40.0 * j as f64;
                    let r = (freq - fj) / bw;
                    gain += 1.0 / (1.0 + r * r);
                }
                let idx = t * spec.bins + f;
                spec.data[idx] *= gain;
            }
        }
        let mut out = istft(&spec).expect("overlap supported");
        out.samples.truncate(n);
        source = out.samples;
    }

    // peak-normalize to 0.7
    let peak = source.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    if peak > 0.0 {
        let g = 0.7 / peak;
        for s in source.iter_mut() {
            *s *= g;
        }
    }
    // keep the on-disk f32 encoding exact
    for s in source.iter_mut() {
        *s = *s as f32 as f64;
    }
    Waveform::new(source, SAMPLE_RATE)
}
