//! Least-squares adversarial training of the mask generator, with an L1
//! term on the phase-sensitive target, plus the plain MSE baseline that
//! skips the discriminator entirely.

use crate::arch::{
    build_discriminator, build_generator, discriminator_config_string, generator_config_string,
    parse_discriminator_config, parse_generator_config, Discriminator, DiscriminatorSpec,
    Generator, GeneratorSpec,
};
use crate::corpus::{load_manifest, resolve_path, ManifestEntry};
use crate::dsp::{self, stft, to_mag_phase, Grid, StftConfig, Waveform};
use crate::mask::{psm_l1_loss_grad_wrt_product, psm_mse_loss_grad, psm_target_product, Mask};
use crate::nn::{load_params, save_params, ParamStore, Tensor};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Gat,
    MseBaseline,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda_l1: f64,
    pub lr: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Periodic checkpoint interval in steps; 0 saves only the final state.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_l1: 1.0,
            lr: 0.0002,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            epochs: 1,
            seed: 0,
            loss_mode: LossMode::Gat,
            checkpoint_every: 0,
        }
    }
}

/// Discriminator objective: `(D(real) - 1)^2 + D(fake)^2`.
pub fn d_loss(d_real: f64, d_fake: f64) -> f64 {
    (d_real - 1.0).powi(2) + d_fake.powi(2)
}

/// Generator objective: `(D(fake) - 1)^2 + lambda * L1`.
pub fn g_loss(d_fake: f64, l1: f64, lambda: f64) -> f64 {
    (d_fake - 1.0).powi(2) + lambda * l1
}

/// STFT features of one clean/reverberant pair.
#[derive(Debug, Clone)]
pub struct UtterancePair {
    pub utt_id: String,
    pub mag_y: Grid,
    pub phase_y: Grid,
    pub mag_x: Grid,
    pub phase_x: Grid,
    /// Phase-sensitive target product `|X| cos(theta_y - theta)`.
    pub target: Grid,
}

pub fn extract_pair(utt_id: &str, clean: &Waveform, reverb: &Waveform) -> Result<UtterancePair> {
    let n = clean.len().min(reverb.len());
    let cfg = StftConfig::default();
    let c = Waveform::new(clean.samples[..n].to_vec(), clean.sample_rate);
    let r = Waveform::new(reverb.samples[..n].to_vec(), reverb.sample_rate);
    let sc = to_mag_phase(&stft(&c, &cfg)?);
    let sr = to_mag_phase(&stft(&r, &cfg)?);
    let target = psm_target_product(&sc, &sr)?;
    Ok(UtterancePair {
        utt_id: utt_id.to_string(),
        mag_y: sr.mag,
        phase_y: sr.phase,
        mag_x: sc.mag,
        phase_x: sc.phase,
        target,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub d_loss: f64,
    pub g_adv: f64,
    pub l1: f64,
}

/// One discriminator update: real = `|X|`, fake = `G(|Y|) x |Y|` with the
/// generator frozen.
fn discriminator_update(
    gen: &Generator,
    disc: &mut Discriminator,
    pair: &UtterancePair,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mask = gen.forward(&pair.mag_y)?;
    let fake = masked_magnitude(&mask, &pair.mag_y);
    let (d_real, cache_real) = disc.forward_full(&pair.mag_x)?;
    let (d_fake, cache_fake) = disc.forward_full(&fake)?;
    let loss = d_loss(d_real, d_fake);
    disc.params.zero_grads();
    disc.backward(&cache_real, 2.0 * (d_real - 1.0));
    disc.backward(&cache_fake, 2.0 * d_fake);
    disc.params
        .rmsprop_step(cfg.lr, cfg.rms_decay, cfg.rms_eps)?;
    Ok(loss)
}

/// One generator update through the frozen discriminator.
fn generator_update(
    gen: &mut Generator,
    disc: &mut Discriminator,
    pair: &UtterancePair,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let (mask, cache, _) = gen.forward_full(&pair.mag_y, None)?;
    let fake = masked_magnitude(&mask, &pair.mag_y);
    let (d_fake, cache_fake) = disc.forward_full(&fake)?;
    let (l1, grad_prod) = psm_l1_loss_grad_wrt_product(&fake, &pair.target);
    let g_adv = (d_fake - 1.0).powi(2);

    // discriminator is frozen here: its gradient slots are scratch space,
    // cleared before its own next update
    disc.params.zero_grads();
    let grad_fake_adv = disc.backward(&cache_fake, 2.0 * (d_fake - 1.0));
    let mut grad_mask = Grid::zeros(mask.values.frames, mask.values.bins);
    for i in 0..grad_mask.data.len() {
        let gf = grad_fake_adv.data[i] + cfg.lambda_l1 * grad_prod.data[i];
        grad_mask.data[i] = gf * pair.mag_y.data[i];
    }
    gen.params.zero_grads();
    gen.backward(&cache, &grad_mask);
    gen.params
        .rmsprop_step(cfg.lr, cfg.rms_decay, cfg.rms_eps)?;
    Ok((g_adv, l1))
}

/// One MSE-baseline update; no discriminator is involved.
fn mse_update(gen: &mut Generator, pair: &UtterancePair, cfg: &TrainConfig) -> Result<f64> {
    let (mask, cache, _) = gen.forward_full(&pair.mag_y, None)?;
    let (_, grad_mask) = psm_mse_loss_grad(&mask, &pair.mag_y, &pair.target);
    let fake = masked_magnitude(&mask, &pair.mag_y);
    let (l1, _) = psm_l1_loss_grad_wrt_product(&fake, &pair.target);
    gen.params.zero_grads();
    gen.backward(&cache, &grad_mask);
    gen.params
        .rmsprop_step(cfg.lr, cfg.rms_decay, cfg.rms_eps)?;
    Ok(l1)
}

fn masked_magnitude(mask: &Mask, mag_y: &Grid) -> Grid {
    let mut out = mag_y.clone();
    for (o, m) in out.data.iter_mut().zip(mask.values.data.iter()) {
        *o *= m;
    }
    out
}

/// One adversarial step: a discriminator update followed by a generator
/// update, both on the same utterance.
pub fn train_step(
    gen: &mut Generator,
    disc: Option<&mut Discriminator>,
    pair: &UtterancePair,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let losses = match (cfg.loss_mode, disc) {
        (LossMode::Gat, Some(disc)) => {
            let dl = discriminator_update(gen, disc, pair, cfg)?;
            let (g_adv, l1) = generator_update(gen, disc, pair, cfg)?;
            StepLosses {
                d_loss: dl,
                g_adv,
                l1,
            }
        }
        (LossMode::MseBaseline, _) => {
            let l1 = mse_update(gen, pair, cfg)?;
            StepLosses {
                d_loss: 0.0,
                g_adv: 0.0,
                l1,
            }
        }
        (LossMode::Gat, None) => {
            return Err(Error::BadConfig(
                "adversarial mode requires a discriminator".into(),
            ))
        }
    };
    if !losses.d_loss.is_finite() || !losses.g_adv.is_finite() || !losses.l1.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            last_checkpoint: None,
        });
    }
    Ok(losses)
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: u64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub log: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub skipped: usize,
    pub disc_forward_calls: u64,
}

pub fn log_to_csv(log: &[StepRecord]) -> String {
    let mut out = String::from("step,d_loss,g_adv,l1,wall_ms\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.d_loss, r.g_adv, r.l1, r.wall_ms
        ));
    }
    out
}

/// Load clean/reverb pairs from a manifest; unreadable or too-short entries
/// are skipped and counted.
pub fn load_pairs(manifest_path: &Path) -> Result<(Vec<UtterancePair>, usize)> {
    let entries = load_manifest(manifest_path)?;
    load_pairs_from_entries(manifest_path, &entries)
}

pub fn load_pairs_from_entries(
    manifest_path: &Path,
    entries: &[ManifestEntry],
) -> Result<(Vec<UtterancePair>, usize)> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for e in entries {
        let clean = dsp::read_wav(&resolve_path(manifest_path, &e.clean_path));
        let reverb = dsp::read_wav(&resolve_path(manifest_path, &e.reverb_path));
        match (clean, reverb) {
            (Ok(c), Ok(r)) => match extract_pair(&e.utt_id, &c, &r) {
                Ok(p) => pairs.push(p),
                Err(_) => skipped += 1,
            },
            _ => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::Manifest(
            "no readable utterance pairs in manifest".into(),
        ));
    }
    Ok((pairs, skipped))
}

fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

const GEN_SEED_TAG: u64 = 0x67656e; // "gen"
const DISC_SEED_TAG: u64 = 0x64697363; // "disc"

/// Train over a manifest, writing periodic checkpoints, a final model
/// directory and a CSV log. `resume_from` continues from a saved trainer
/// state, reproducing the uninterrupted run exactly.
pub fn train(
    manifest_path: &Path,
    gen_spec: &GeneratorSpec,
    disc_spec: &DiscriminatorSpec,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    let (pairs, skipped) = load_pairs(manifest_path)?;
    std::fs::create_dir_all(out_dir)?;

    let mut gen = build_generator(gen_spec, mix(cfg.seed, GEN_SEED_TAG))?;
    let mut disc = match cfg.loss_mode {
        LossMode::Gat => Some(build_discriminator(
            disc_spec,
            mix(cfg.seed, DISC_SEED_TAG),
        )?),
        LossMode::MseBaseline => None,
    };

    let mut start_step = 0u64;
    if let Some(dir) = resume_from {
        let state = TrainerState::load(&dir.join("trainer_state.bin"))?;
        start_step = state.step;
        gen.params
            .restore_training_state(state.gen_values, state.gen_rms);
        if let (Some(d), Some((dv, dr))) = (disc.as_mut(), state.disc) {
            d.params.restore_training_state(dv, dr);
        }
    }

    let steps_per_epoch = pairs.len() as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut log = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut perm: Vec<usize> = Vec::new();
    let mut perm_epoch = u64::MAX;

    for step in start_step..total_steps {
        let epoch = step / steps_per_epoch;
        if epoch != perm_epoch {
            perm = (0..pairs.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xEC0 + epoch));
            perm.shuffle(&mut rng);
            perm_epoch = epoch;
        }
        let pair = &pairs[perm[(step % steps_per_epoch) as usize]];
        let t0 = Instant::now();
        let losses = match train_step(&mut gen, disc.as_mut(), pair, cfg) {
            Ok(l) => l,
            Err(Error::Diverged { .. }) => {
                return Err(Error::Diverged {
                    step,
                    last_checkpoint,
                })
            }
            Err(e) => return Err(e),
        };
        log.push(StepRecord {
            step,
            d_loss: losses.d_loss,
            g_adv: losses.g_adv,
            l1: losses.l1,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total_steps {
            let dir = out_dir.join(format!("step_{done:06}"));
            save_model_dir(&dir, &gen, disc.as_ref(), done)?;
            last_checkpoint = Some(dir);
        }
    }

    let final_dir = out_dir.join("final");
    save_model_dir(&final_dir, &gen, disc.as_ref(), total_steps)?;
    let log_path = out_dir.join("train_log.csv");
    dsp::atomic_write(&log_path, log_to_csv(&log).as_bytes())?;

    Ok(TrainOutcome {
        steps: total_steps,
        log,
        final_checkpoint: final_dir,
        log_path,
        skipped,
        disc_forward_calls: disc.map(|d| d.forward_calls()).unwrap_or(0),
    })
}

/// Write a model directory: config + public checkpoint per network, plus
/// the f64 trainer state used for exact resume.
pub fn save_model_dir(
    dir: &Path,
    gen: &Generator,
    disc: Option<&Discriminator>,
    step: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    dsp::atomic_write(
        &dir.join("generator.cfg"),
        generator_config_string(&gen.spec).as_bytes(),
    )?;
    save_params(&gen.params, &dir.join("generator.ckpt"))?;
    if let Some(d) = disc {
        dsp::atomic_write(
            &dir.join("discriminator.cfg"),
            discriminator_config_string(&d.spec).as_bytes(),
        )?;
        save_params(&d.params, &dir.join("discriminator.ckpt"))?;
    }
    let state = TrainerState {
        step,
        gen_values: gen.params.training_state().0,
        gen_rms: gen.params.training_state().1,
        disc: disc.map(|d| d.params.training_state()),
    };
    state.save(&dir.join("trainer_state.bin"))
}

/// Load a frozen generator from a model directory (`generator.cfg` +
/// `generator.ckpt`).
pub fn load_generator_dir(dir: &Path) -> Result<Generator> {
    let cfg_text = std::fs::read_to_string(dir.join("generator.cfg"))?;
    let spec = parse_generator_config(&cfg_text)?;
    let mut gen = build_generator(&spec, 0)?;
    let store = load_params(&dir.join("generator.ckpt"))?;
    replace_params(&mut gen.params, store)?;
    Ok(gen)
}

pub fn load_discriminator_dir(dir: &Path) -> Result<Discriminator> {
    let cfg_text = std::fs::read_to_string(dir.join("discriminator.cfg"))?;
    let spec = parse_discriminator_config(&cfg_text)?;
    let mut disc = build_discriminator(&spec, 0)?;
    let store = load_params(&dir.join("discriminator.ckpt"))?;
    replace_params(&mut disc.params, store)?;
    Ok(disc)
}

fn replace_params(target: &mut ParamStore, loaded: ParamStore) -> Result<()> {
    let expected: Vec<String> = target.names().map(String::from).collect();
    let got: Vec<String> = loaded.names().map(String::from).collect();
    if expected != got {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint parameters {got:?} do not match architecture {expected:?}"
        )));
    }
    for name in expected {
        let t = loaded.get(&name);
        if t.shape != target.get(&name).shape {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: checkpoint shape {:?} vs architecture {:?}",
                t.shape,
                target.get(&name).shape
            )));
        }
        *target.get_mut(&name) = t.clone();
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// f64 trainer state for bit-exact resume (the public checkpoint format is
// f32 and cannot reproduce optimizer trajectories exactly)
// ---------------------------------------------------------------------------

const STATE_MAGIC: &[u8; 5] = b"DRTS1";

struct TrainerState {
    step: u64,
    gen_values: BTreeMap<String, Tensor>,
    gen_rms: BTreeMap<String, Tensor>,
    disc: Option<(BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)>,
}

impl TrainerState {
    fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        write_map(&mut out, &self.gen_values);
        write_map(&mut out, &self.gen_rms);
        out.push(self.disc.is_some() as u8);
        if let Some((v, r)) = &self.disc {
            write_map(&mut out, v);
            write_map(&mut out, r);
        }
        dsp::atomic_write(path, &out)
    }

    fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::TruncatedCheckpoint);
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 5)? != STATE_MAGIC {
            return Err(Error::NotACheckpoint);
        }
        let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let gen_values = read_map(&bytes, &mut pos)?;
        let gen_rms = read_map(&bytes, &mut pos)?;
        let has_disc = take(&mut pos, 1)?[0] != 0;
        let disc = if has_disc {
            let v = read_map(&bytes, &mut pos)?;
            let r = read_map(&bytes, &mut pos)?;
            Some((v, r))
        } else {
            None
        };
        Ok(TrainerState {
            step,
            gen_values,
            gen_rms,
            disc,
        })
    }
}

fn write_map(out: &mut Vec<u8>, map: &BTreeMap<String, Tensor>) {
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, t) in map {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_map(bytes: &[u8], pos: &mut usize) -> Result<BTreeMap<String, Tensor>> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::TruncatedCheckpoint);
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_of = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
    let count = u32_of(take(pos, 4)?);
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32_of(take(pos, 4)?);
        let name = String::from_utf8(take(pos, name_len)?.to_vec())
            .map_err(|_| Error::NotACheckpoint)?;
        let rank = u32_of(take(pos, 4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_of(take(pos, 4)?));
        }
        let numel: usize = shape.iter().product();
        let payload = take(pos, numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        map.insert(name, Tensor::from_vec(&shape, data));
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Scale;
    use crate::corpus::{build_corpus, make_synthetic_clean, CorpusSpec, Split};
    use crate::nn::params_to_bytes;
    use rand::Rng;

    #[test]
    fn loss_formulas_match_hand_arithmetic() {
        assert_eq!(d_loss(1.0, 0.0), 0.0);
        assert_eq!(d_loss(0.0, 1.0), 2.0);
        assert_eq!(d_loss(0.5, 0.5), 0.5);
        assert_eq!(g_loss(1.0, 0.0, 1.0), 0.0);
        assert!((g_loss(0.0, 0.3, 1.0) - 1.3).abs() < 1e-15);
        assert_eq!(g_loss(0.0, 0.7, 0.0), 1.0); // lambda 0: pure adversarial
        let mut rng = crate::nn::init_rng(77);
        for _ in 0..10 {
            let (dr, df, l1, lam) = (
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..2.0),
            );
            let expect_d = (dr - 1.0) * (dr - 1.0) + df * df;
            let expect_g = (df - 1.0) * (df - 1.0) + lam * l1;
            assert!((d_loss(dr, df) - expect_d).abs() < 1e-12);
            assert!((g_loss(df, l1, lam) - expect_g).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_on_one_bin_converges_to_least_squares() {
        // samples (|Y|_i, target_i); the optimal shared mask value is
        // sum(t y) / sum(y^2)
        let mut rng = crate::nn::init_rng(5);
        let ys: Vec<f64> = (0..8).map(|_| rng.gen_range(0.3..2.0)).collect();
        let ts: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.5..1.5)).collect();
        let optimal: f64 =
            ys.iter().zip(&ts).map(|(y, t)| y * t).sum::<f64>() / ys.iter().map(|y| y * y).sum::<f64>();
        let mut store = ParamStore::new();
        store.register("m", Tensor::from_vec(&[1], vec![0.0]));
        for _ in 0..50_000 {
            // full utterance-mean gradient, as in the per-utterance loss
            let m = store.get("m").data[0];
            let grad = ys
                .iter()
                .zip(&ts)
                .map(|(y, t)| 2.0 * (m * y - t) * y)
                .sum::<f64>()
                / ys.len() as f64;
            store.zero_grads();
            store.accum_grad("m", &[grad]);
            store.rmsprop_step(1e-4, 0.9, 1e-8).unwrap();
        }
        let m = store.get("m").data[0];
        assert!(
            (m - optimal).abs() < 1e-3,
            "converged to {m}, optimal {optimal}"
        );
    }

    fn toy_specs(bins: usize) -> (GeneratorSpec, DiscriminatorSpec) {
        let scale = Scale::new(1, 8).unwrap();
        let g = GeneratorSpec::base(bins, scale);
        let d = DiscriminatorSpec::base(bins, scale);
        (g, d)
    }

    fn toy_pair(frames: usize, bins: usize, seed: u64) -> UtterancePair {
        let mut rng = crate::nn::init_rng(seed);
        let grid = |r: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
            Grid::from_data(
                frames,
                bins,
                (0..frames * bins).map(|_| r.gen_range(lo..hi)).collect(),
            )
        };
        let mag_y = grid(&mut rng, 0.1, 1.5);
        let phase_y = grid(&mut rng, -3.0, 3.0);
        let mag_x = grid(&mut rng, 0.1, 1.2);
        let phase_x = grid(&mut rng, -3.0, 3.0);
        let mut target = Grid::zeros(frames, bins);
        for i in 0..target.data.len() {
            target.data[i] = mag_x.data[i] * (phase_y.data[i] - phase_x.data[i]).cos();
        }
        UtterancePair {
            utt_id: format!("toy{seed}"),
            mag_y,
            phase_y,
            mag_x,
            phase_x,
            target,
        }
    }

    #[test]
    fn generator_gradient_flows_through_masking_end_to_end() {
        // finite differences of the squared-error loss on the masked
        // magnitude against the full backward chain through mask * |Y|
        let (gspec, _) = toy_specs(9);
        let mut gen = build_generator(&gspec, 3).unwrap();
        let mut rng = crate::nn::init_rng(333);
        let names: Vec<String> = gen.params.names().map(String::from).collect();
        for n in names {
            for v in gen.params.get_mut(&n).data.iter_mut() {
                *v = rng.gen_range(-0.4..0.4);
            }
        }
        let pair = toy_pair(5, 9, 4);
        let loss_of = |g: &Generator| -> f64 {
            let mask = g.forward(&pair.mag_y).unwrap();
            psm_mse_loss_grad(&mask, &pair.mag_y, &pair.target).0
        };
        let (mask, cache, _) = gen.forward_full(&pair.mag_y, None).unwrap();
        let (_, grad_mask) = psm_mse_loss_grad(&mask, &pair.mag_y, &pair.target);
        gen.params.zero_grads();
        gen.backward(&cache, &grad_mask);
        let names: Vec<String> = gen.params.names().map(String::from).collect();
        for name in names {
            let analytic = gen.params.grad(&name).unwrap().data.clone();
            let stride = (analytic.len() / 5).max(1);
            for idx in (0..analytic.len()).step_by(stride) {
                let orig = gen.params.get(&name).data[idx];
                gen.params.get_mut(&name).data[idx] = orig + 1e-5;
                let lp = loss_of(&gen);
                gen.params.get_mut(&name).data[idx] = orig - 1e-5;
                let lm = loss_of(&gen);
                gen.params.get_mut(&name).data[idx] = orig;
                let fd = (lp - lm) / 2e-5;
                let err = crate::nn::grad_rel_err(analytic[idx], fd);
                assert!(err < 1e-4, "{name}[{idx}]: {} vs {fd}", analytic[idx]);
            }
        }
    }

    #[test]
    fn updates_leave_the_other_network_untouched() {
        let (gspec, dspec) = toy_specs(9);
        let mut gen = build_generator(&gspec, 7).unwrap();
        let mut disc = build_discriminator(&dspec, 8).unwrap();
        let pair = toy_pair(6, 9, 9);
        let cfg = TrainConfig::default();

        let gen_before = params_to_bytes(&gen.params);
        discriminator_update(&gen, &mut disc, &pair, &cfg).unwrap();
        assert_eq!(gen_before, params_to_bytes(&gen.params));

        let disc_before = params_to_bytes(&disc.params);
        generator_update(&mut gen, &mut disc, &pair, &cfg).unwrap();
        assert_eq!(disc_before, params_to_bytes(&disc.params));
        assert_ne!(gen_before, params_to_bytes(&gen.params));
    }

    #[test]
    fn huge_lambda_drives_l1_down() {
        let (gspec, dspec) = toy_specs(9);
        let mut gen = build_generator(&gspec, 17).unwrap();
        let mut disc = build_discriminator(&dspec, 18).unwrap();
        let cfg = TrainConfig {
            lambda_l1: 1e6,
            ..TrainConfig::default()
        };
        let pairs: Vec<UtterancePair> = (0..4).map(|i| toy_pair(8, 9, 30 + i)).collect();
        let mut l1s = Vec::new();
        for step in 0..60 {
            let losses =
                train_step(&mut gen, Some(&mut disc), &pairs[step % 4], &cfg).unwrap();
            l1s.push(losses.l1);
        }
        let first: f64 = l1s[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = l1s[l1s.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(last < first, "smoothed L1 {first} -> {last}");
    }

    fn micro_corpus(dir: &Path, seed: u64) -> PathBuf {
        let clean_dir = dir.join("clean_src");
        make_synthetic_clean(3, 0.7, seed, &clean_dir).unwrap();
        let spec = CorpusSpec {
            clean_dir,
            rooms: vec![("room_b".into(), [6.0, 6.0, 4.0])],
            rt60_range: (0.2, 0.4),
            pairs_per_clean: 1,
            seed,
            split: Split::Train,
        };
        build_corpus(&spec, &dir.join("corpus")).unwrap().manifest_path
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = micro_corpus(dir.path(), 3);
        let (gspec, dspec) = toy_specs(257);
        let cfg = TrainConfig {
            epochs: 2,
            seed: 11,
            checkpoint_every: 3,
            ..TrainConfig::default()
        };
        let out_a = dir.path().join("run_a");
        let out_b = dir.path().join("run_b");
        let a = train(&manifest, &gspec, &dspec, &cfg, &out_a, None).unwrap();
        let b = train(&manifest, &gspec, &dspec, &cfg, &out_b, None).unwrap();
        assert_eq!(a.steps, 6);
        let bytes_a = std::fs::read(out_a.join("final/generator.ckpt")).unwrap();
        let bytes_b = std::fs::read(out_b.join("final/generator.ckpt")).unwrap();
        assert_eq!(bytes_a, bytes_b);
        for (ra, rb) in a.log.iter().zip(b.log.iter()) {
            assert_eq!(ra.d_loss, rb.d_loss);
            assert_eq!(ra.l1, rb.l1);
        }

        // resume from the step-3 checkpoint and match the uninterrupted run
        let out_c = dir.path().join("run_c");
        let c = train(
            &manifest,
            &gspec,
            &dspec,
            &cfg,
            &out_c,
            Some(&out_a.join("step_000003")),
        )
        .unwrap();
        let bytes_c = std::fs::read(out_c.join("final/generator.ckpt")).unwrap();
        assert_eq!(bytes_a, bytes_c);
        assert_eq!(c.log.len(), 3); // only the resumed steps are logged
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = micro_corpus(dir.path(), 5);
        let (gspec, dspec) = toy_specs(257);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = dir.path().join("run");
        let outcome = train(&manifest, &gspec, &dspec, &cfg, &out, None).unwrap();
        assert_eq!(outcome.steps, 0);
        assert!(outcome.log.is_empty());
        assert!(out.join("final/generator.ckpt").exists());
        let gen = load_generator_dir(&out.join("final")).unwrap();
        assert_eq!(gen.spec.freq_bins, 257);
    }

    #[test]
    fn mse_mode_never_touches_a_discriminator() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = micro_corpus(dir.path(), 7);
        let (gspec, dspec) = toy_specs(257);
        let cfg = TrainConfig {
            epochs: 1,
            loss_mode: LossMode::MseBaseline,
            ..TrainConfig::default()
        };
        let out = dir.path().join("run");
        let outcome = train(&manifest, &gspec, &dspec, &cfg, &out, None).unwrap();
        assert_eq!(outcome.disc_forward_calls, 0);
        assert!(!out.join("final/discriminator.ckpt").exists());
        assert!(outcome.log.iter().all(|r| r.d_loss == 0.0 && r.g_adv == 0.0));
        assert!(outcome.log.iter().all(|r| r.l1.is_finite()));
    }

    #[test]
    fn checkpoint_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (gspec, _) = toy_specs(257);
        let gen = build_generator(&gspec, 1).unwrap();
        save_model_dir(dir.path(), &gen, None, 0).unwrap();
        // overwrite the config with different bins
        let other = GeneratorSpec::base(129, Scale::new(1, 8).unwrap());
        dsp::atomic_write(
            &dir.path().join("generator.cfg"),
            generator_config_string(&other).as_bytes(),
        )
        .unwrap();
        assert!(matches!(
            load_generator_dir(dir.path()),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
