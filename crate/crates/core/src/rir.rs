//! Image-source room impulse response generation and reverberation-time
//! analysis.

use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Shoebox room with a uniform energy absorption coefficient on all walls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims: [f64; 3],
    pub absorption: f64,
    pub sample_rate: u32,
    pub speed_of_sound: f64,
}

impl RoomSpec {
    pub fn new(dims: [f64; 3], absorption: f64, sample_rate: u32) -> Result<Self> {
        if dims.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidScene(format!("non-positive dims {dims:?}")));
        }
        if !(0.0..=1.0).contains(&absorption) {
            return Err(Error::InvalidScene(format!(
                "absorption {absorption} outside [0, 1]"
            )));
        }
        Ok(RoomSpec {
            dims,
            absorption,
            sample_rate,
            speed_of_sound: SPEED_OF_SOUND,
        })
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn surface_area(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    pub fn centre(&self) -> [f64; 3] {
        [self.dims[0] / 2.0, self.dims[1] / 2.0, self.dims[2] / 2.0]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter()
            .zip(self.dims.iter())
            .all(|(&v, &d)| v > 0.0 && v < d)
    }
}

/// One source/microphone placement inside a room.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub room: RoomSpec,
    pub source: [f64; 3],
    pub mic: [f64; 3],
    pub rt60_target: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if !self.room.contains(self.source) {
            return Err(Error::InvalidScene(format!(
                "source {:?} outside room {:?}",
                self.source, self.room.dims
            )));
        }
        if !self.room.contains(self.mic) {
            return Err(Error::InvalidScene(format!(
                "mic {:?} outside room {:?}",
                self.mic, self.room.dims
            )));
        }
        if self.source == self.mic {
            return Err(Error::InvalidScene("source coincides with mic".into()));
        }
        Ok(())
    }

    pub fn source_mic_distance(&self) -> f64 {
        distance(self.source, self.mic)
    }
}

/// Finite impulse response with optional provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
    pub scene: Option<Scene>,
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Result of inverting Eyring's formula; requests short enough to drive the
/// absorption to 1 are clamped and reported via `anechoic_clamp`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Absorption {
    pub alpha: f64,
    pub anechoic_clamp: bool,
}

/// Uniform energy absorption that realizes `rt60` in a room of the given
/// dimensions: `alpha = 1 - exp(-0.161 V / (S rt60))`.
pub fn absorption_for_rt60(dims: [f64; 3], rt60: f64) -> Absorption {
    let volume = dims[0] * dims[1] * dims[2];
    let surface = 2.0 * (dims[0] * dims[1] + dims[0] * dims[2] + dims[1] * dims[2]);
    if rt60 <= 1e-9 {
        return Absorption {
            alpha: 1.0,
            anechoic_clamp: true,
        };
    }
    let alpha = 1.0 - (-0.161 * volume / (surface * rt60)).exp();
    if alpha >= 1.0 {
        Absorption {
            alpha: 1.0,
            anechoic_clamp: true,
        }
    } else {
        Absorption {
            alpha,
            anechoic_clamp: false,
        }
    }
}

/// Rendering switches for [`simulate_rir_with`].
#[derive(Debug, Clone, Copy)]
pub struct RirOptions {
    /// Apply the classic 100 Hz high-pass that removes the unphysical
    /// low-frequency buildup of coherent same-sign image summation.
    pub highpass: bool,
    /// Refine the reflection coefficient (up to two extra renders) until the
    /// Schroeder estimate lands on `scene.rt60_target`. The specular image
    /// lattice alone decays 10-25% slower than the diffuse-field prediction.
    pub calibrate: bool,
}

impl Default for RirOptions {
    fn default() -> Self {
        RirOptions {
            highpass: true,
            calibrate: true,
        }
    }
}

/// Image-source simulation of the room impulse response with default
/// options (high-pass + RT60 calibration against `scene.rt60_target`).
pub fn simulate_rir(scene: &Scene, duration: f64) -> Result<Rir> {
    simulate_rir_with(scene, duration, RirOptions::default())
}

/// Image-source simulation of the room impulse response.
///
/// Mirror sources are enumerated out to the reflection order implied by
/// `duration`; each image adds `beta^k / (4 pi d)` at the tap nearest
/// `d / c * fs`, where `beta = sqrt(1 - alpha)` is the pressure reflection
/// coefficient per wall hit. Fractional delays round to the nearest sample.
pub fn simulate_rir_with(scene: &Scene, duration: f64, opts: RirOptions) -> Result<Rir> {
    scene.validate()?;
    let room = &scene.room;
    let fs = room.sample_rate as f64;
    let c = room.speed_of_sound;
    let n_taps = (duration * fs).round().max(1.0) as usize;
    let direct_delay = scene.source_mic_distance() / c;
    if (direct_delay * fs).round() as usize >= n_taps {
        return Err(Error::InvalidScene(format!(
            "duration {duration} s shorter than direct path delay {direct_delay:.4} s"
        )));
    }
    let mut beta = (1.0 - room.absorption).max(0.0).sqrt();
    let mut taps = render_images(scene, n_taps, beta, opts.highpass);
    if opts.calibrate && scene.rt60_target > 0.05 && beta > 0.0 && beta < 1.0 {
        for _ in 0..2 {
            let probe = Rir {
                taps: taps.clone(),
                sample_rate: room.sample_rate,
                scene: None,
            };
            let Ok(measured) = estimate_rt60(&probe) else {
                break;
            };
            let ratio = measured / scene.rt60_target;
            if (ratio - 1.0).abs() <= 0.05 {
                break;
            }
            beta = beta.powf(ratio);
            taps = render_images(scene, n_taps, beta, opts.highpass);
        }
    }
    Ok(Rir {
        taps,
        sample_rate: room.sample_rate,
        scene: Some(*scene),
    })
}

fn render_images(scene: &Scene, n_taps: usize, beta: f64, highpass: bool) -> Vec<f64> {
    let room = &scene.room;
    let fs = room.sample_rate as f64;
    let c = room.speed_of_sound;
    let max_dist = n_taps as f64 / fs * c;
    let mut taps = vec![0.0f64; n_taps];

    let order = |dim: f64| (max_dist / (2.0 * dim)).ceil() as i64;
    let (nx, ny, nz) = (order(room.dims[0]), order(room.dims[1]), order(room.dims[2]));

    for mx in -nx..=nx {
        for my in -ny..=ny {
            for mz in -nz..=nz {
                for q in 0..2i64 {
                    for j in 0..2i64 {
                        for k in 0..2i64 {
                            let img = [
                                (1 - 2 * q) as f64 * scene.source[0]
                                    + 2.0 * mx as f64 * room.dims[0],
                                (1 - 2 * j) as f64 * scene.source[1]
                                    + 2.0 * my as f64 * room.dims[1],
                                (1 - 2 * k) as f64 * scene.source[2]
                                    + 2.0 * mz as f64 * room.dims[2],
                            ];
                            let d = distance(img, scene.mic);
                            let tap = (d / c * fs).round() as usize;
                            if tap >= n_taps {
                                continue;
                            }
                            let reflections = ((mx - q).abs()
                                + mx.abs()
                                + (my - j).abs()
                                + my.abs()
                                + (mz - k).abs()
                                + mz.abs()) as i32;
                            let gain = beta.powi(reflections) / (4.0 * PI * d.max(1e-3));
                            if gain != 0.0 {
                                taps[tap] += gain;
                            }
                        }
                    }
                }
            }
        }
    }
    if highpass {
        highpass_100hz(&mut taps, fs);
    }
    taps
}

/// Second-order 100 Hz high-pass in the lineage of the original image-method
/// implementations.
fn highpass_100hz(taps: &mut [f64], fs: f64) {
    let w = 2.0 * PI * 100.0 / fs;
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let (mut y0, mut y1, mut y2) = (0.0, 0.0, 0.0);
    for t in taps.iter_mut() {
        y2 = y1;
        y1 = y0;
        y0 = b1 * y1 + b2 * y2 + *t;
        *t = y0 + a1 * y1 + r1 * y2;
    }
}

/// Reverberation time from Schroeder backward integration: a least-squares
/// line through the -5 dB to -35 dB stretch of the energy decay curve,
/// extrapolated to 60 dB.
pub fn estimate_rt60(rir: &Rir) -> Result<f64> {
    let fs = rir.sample_rate as f64;
    let total: f64 = rir.taps.iter().map(|&t| t * t).sum();
    if total <= 0.0 {
        return Err(Error::InsufficientDecay);
    }
    // backward integral of squared taps, normalized to its start
    let mut edc = Vec::with_capacity(rir.taps.len());
    let mut acc = 0.0;
    for &t in rir.taps.iter().rev() {
        acc += t * t;
        edc.push(acc);
    }
    edc.reverse();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (n, &e) in edc.iter().enumerate() {
        if e <= 0.0 {
            break;
        }
        let db = 10.0 * (e / total).log10();
        if db <= -5.0 && db >= -35.0 {
            xs.push(n as f64 / fs);
            ys.push(db);
        }
    }
    if xs.len() < 5 || xs[xs.len() - 1] - xs[0] <= 0.0 {
        return Err(Error::InsufficientDecay);
    }
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys.iter()).map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    if slope >= -1e-9 {
        return Err(Error::InsufficientDecay);
    }
    Ok(-60.0 / slope)
}

/// Draw a scene: mic at the room centre, source uniform in the interior with
/// a 0.3 m wall margin and at least 0.5 m from the mic, RT60 uniform in
/// `rt60_range`. Deterministic under `seed`.
pub fn sample_scene(room: &RoomSpec, rt60_range: (f64, f64), seed: u64) -> Result<Scene> {
    const WALL_MARGIN: f64 = 0.3;
    const MIC_MARGIN: f64 = 0.5;
    if rt60_range.1 < rt60_range.0 || rt60_range.0 < 0.0 {
        return Err(Error::InvalidScene(format!("bad rt60 range {rt60_range:?}")));
    }
    if room.dims.iter().any(|&d| d <= 2.0 * WALL_MARGIN) {
        return Err(Error::RoomTooSmall);
    }
    let mic = room.centre();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rt60 = if rt60_range.1 > rt60_range.0 {
        rng.gen_range(rt60_range.0..rt60_range.1)
    } else {
        rt60_range.0
    };
    for _ in 0..1000 {
        let source = [
            rng.gen_range(WALL_MARGIN..room.dims[0] - WALL_MARGIN),
            rng.gen_range(WALL_MARGIN..room.dims[1] - WALL_MARGIN),
            rng.gen_range(WALL_MARGIN..room.dims[2] - WALL_MARGIN),
        ];
        if distance(source, mic) >= MIC_MARGIN {
            let absorption = absorption_for_rt60(room.dims, rt60);
            let room = RoomSpec {
                absorption: absorption.alpha,
                ..*room
            };
            return Ok(Scene {
                room,
                source,
                mic,
                rt60_target: rt60,
            });
        }
    }
    Err(Error::RoomTooSmall)
}

/// Default RIR length for a target reverberation time.
pub fn default_duration(rt60_target: f64) -> f64 {
    rt60_target + 0.1
}

/// The five simulated room geometries.
pub mod rooms {
    /// Training/development rooms.
    pub const TRAIN: [(&str, [f64; 3]); 3] = [
        ("room_a", [3.0, 3.0, 3.0]),
        ("room_b", [6.0, 6.0, 4.0]),
        ("room_c", [9.0, 9.0, 5.0]),
    ];
    /// Held-out test rooms.
    pub const TEST: [(&str, [f64; 3]); 2] = [
        ("room_d", [4.0, 5.0, 3.0]),
        ("room_e", [10.0, 12.0, 6.0]),
    ];
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room(dims: [f64; 3], rt60: f64) -> RoomSpec {
        let a = absorption_for_rt60(dims, rt60);
        RoomSpec::new(dims, a.alpha, 16_000).unwrap()
    }

    #[test]
    fn absorption_limits() {
        let a = absorption_for_rt60([3.0, 3.0, 3.0], 1e-12);
        assert_eq!(a.alpha, 1.0);
        assert!(a.anechoic_clamp);
        let a = absorption_for_rt60([3.0, 3.0, 3.0], 1e9);
        assert!(a.alpha < 1e-6);
        assert!(!a.anechoic_clamp);
    }

    #[test]
    fn absorption_room_b_closed_form() {
        // 6x6x4 m: V = 144, S = 168, rt60 = 0.5
        let a = absorption_for_rt60([6.0, 6.0, 4.0], 0.5);
        let expected = 1.0 - (-0.161_f64 * 144.0 / (168.0 * 0.5)).exp();
        assert!((a.alpha - expected).abs() < 1e-12);
        assert!((a.alpha - 0.24128).abs() < 1e-4);
    }

    #[test]
    fn anechoic_room_keeps_only_direct_path() {
        let r = RoomSpec::new([5.0, 4.0, 3.0], 1.0, 16_000).unwrap();
        let scene = Scene {
            room: r,
            source: [1.0, 1.0, 1.0],
            mic: [3.5, 2.0, 1.5],
            rt60_target: 0.0,
        };
        let raw = RirOptions {
            highpass: false,
            calibrate: false,
        };
        let rir = simulate_rir_with(&scene, 0.05, raw).unwrap();
        let d = scene.source_mic_distance();
        let tap = (d / SPEED_OF_SOUND * 16_000.0).round() as usize;
        let expected = 1.0 / (4.0 * PI * d);
        assert!((rir.taps[tap] - expected).abs() < 1e-12);
        let stray: f64 = rir
            .taps
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != tap)
            .map(|(_, &t)| t.abs())
            .sum();
        assert_eq!(stray, 0.0);
        // default render keeps the exact direct-path amplitude too
        let hp = simulate_rir(&scene, 0.05).unwrap();
        assert!((hp.taps[tap] - expected).abs() < 1e-12);
    }

    #[test]
    fn first_order_reflection_arrives_at_mirror_distance() {
        // Mirror the source across the x = 0 wall and check the arrival tap.
        // Positions are chosen so no other image rounds to the same tap.
        let r = room([6.0, 6.0, 4.0], 0.4);
        let scene = Scene {
            room: r,
            source: [1.0, 2.0, 1.2],
            mic: [4.0, 3.0, 2.0],
            rt60_target: 0.4,
        };
        let raw = RirOptions {
            highpass: false,
            calibrate: false,
        };
        let rir = simulate_rir_with(&scene, 0.08, raw).unwrap();
        let mirrored = [-1.0, 2.0, 1.2];
        let d = distance(mirrored, scene.mic);
        let tap = (d / SPEED_OF_SOUND * 16_000.0).round() as usize;
        let beta = (1.0 - r.absorption).sqrt();
        let expected = beta / (4.0 * PI * d);
        assert!(
            (rir.taps[tap] - expected).abs() / expected < 1e-6,
            "tap {} = {}, expected {}",
            tap,
            rir.taps[tap],
            expected
        );
    }

    #[test]
    fn direct_path_tap_within_one_sample() {
        for seed in 0..5u64 {
            let r = room([6.0, 6.0, 4.0], 0.3);
            let scene = sample_scene(&r, (0.3, 0.3), seed).unwrap();
            let rir = simulate_rir(&scene, 0.4).unwrap();
            let first = rir.taps.iter().position(|&t| t.abs() > 0.0).unwrap();
            let geo = (scene.source_mic_distance() / SPEED_OF_SOUND * 16_000.0).round() as usize;
            assert!(
                (first as i64 - geo as i64).abs() <= 1,
                "first {first} vs geometric {geo}"
            );
        }
    }

    #[test]
    fn simulate_rejects_outside_positions() {
        let r = room([3.0, 3.0, 3.0], 0.3);
        let scene = Scene {
            room: r,
            source: [5.0, 1.0, 1.0],
            mic: [1.5, 1.5, 1.5],
            rt60_target: 0.3,
        };
        assert!(matches!(
            simulate_rir(&scene, 0.4),
            Err(Error::InvalidScene(_))
        ));
    }

    #[test]
    fn schroeder_recovers_constructed_exponential() {
        // amplitude e^{-6.91 t / T} decays 60 dB in T seconds
        let fs = 16_000.0;
        let t60 = 0.3;
        let taps: Vec<f64> = (0..(fs * 0.6) as usize)
            .map(|n| (-6.91 * n as f64 / fs / t60).exp())
            .collect();
        let rir = Rir {
            taps,
            sample_rate: 16_000,
            scene: None,
        };
        let est = estimate_rt60(&rir).unwrap();
        assert!(
            (est - t60).abs() / t60 < 0.05,
            "estimated {est}, wanted {t60}"
        );
    }

    #[test]
    fn single_impulse_has_insufficient_decay() {
        let mut taps = vec![0.0; 1000];
        taps[10] = 1.0;
        let rir = Rir {
            taps,
            sample_rate: 16_000,
            scene: None,
        };
        assert!(matches!(estimate_rt60(&rir), Err(Error::InsufficientDecay)));
    }

    #[test]
    fn simulated_rt60_tracks_target() {
        let r = room([6.0, 6.0, 4.0], 0.5);
        let scene = sample_scene(&r, (0.5, 0.5), 7).unwrap();
        let rir = simulate_rir(&scene, default_duration(0.5)).unwrap();
        let est = estimate_rt60(&rir).unwrap();
        assert!(
            (est - 0.5).abs() / 0.5 < 0.2,
            "estimated {est} vs target 0.5"
        );
    }

    #[test]
    fn rir_energy_decreases_with_absorption() {
        let scene_for = |alpha: f64| Scene {
            room: RoomSpec::new([6.0, 6.0, 4.0], alpha, 16_000).unwrap(),
            source: [2.0, 3.0, 2.0],
            mic: [3.0, 3.0, 2.0],
            rt60_target: 0.0,
        };
        let mut prev = f64::INFINITY;
        for alpha in [0.1, 0.3, 0.5, 0.8] {
            let rir = simulate_rir(&scene_for(alpha), 0.3).unwrap();
            let energy: f64 = rir.taps.iter().map(|&t| t * t).sum();
            assert!(energy < prev, "alpha {alpha}: {energy} !< {prev}");
            prev = energy;
        }
    }

    #[test]
    fn schroeder_estimate_monotone_in_target() {
        let mut prev = 0.0;
        for &target in &[0.15, 0.25, 0.4, 0.55, 0.7] {
            let r = room([6.0, 6.0, 4.0], target);
            let scene = sample_scene(&r, (target, target), 11).unwrap();
            let rir = simulate_rir(&scene, default_duration(target)).unwrap();
            let est = estimate_rt60(&rir).unwrap();
            assert!(est > prev, "target {target}: {est} !> {prev}");
            prev = est;
        }
    }

    #[test]
    fn sampling_is_deterministic_and_centres_mic() {
        let r = room([3.0, 3.0, 3.0], 0.3);
        let a = sample_scene(&r, (0.0, 0.7), 42).unwrap();
        let b = sample_scene(&r, (0.0, 0.7), 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mic, [1.5, 1.5, 1.5]);
        assert!(a.source_mic_distance() >= 0.5);
    }

    #[test]
    fn sampled_rt60_mean_near_midpoint() {
        let r = room([3.0, 3.0, 3.0], 0.3);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|s| sample_scene(&r, (0.0, 0.7), s).unwrap().rt60_target)
            .sum::<f64>()
            / n as f64;
        assert!(
            (mean - 0.35).abs() / 0.35 < 0.02,
            "mean {mean} not within 2% of 0.35"
        );
    }

    #[test]
    fn tiny_room_is_rejected() {
        let r = RoomSpec::new([0.5, 0.5, 0.5], 0.3, 16_000).unwrap();
        assert!(matches!(
            sample_scene(&r, (0.0, 0.7), 1),
            Err(Error::RoomTooSmall)
        ));
    }

    #[test]
    fn simulation_is_deterministic() {
        let r = room([4.0, 5.0, 3.0], 0.4);
        let scene = sample_scene(&r, (0.4, 0.4), 3).unwrap();
        let a = simulate_rir(&scene, 0.5).unwrap();
        let b = simulate_rir(&scene, 0.5).unwrap();
        assert_eq!(a.taps, b.taps);
    }
}
