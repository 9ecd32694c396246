//! Phase-sensitive mask targets, mask application, and the regression
//! losses measured against the phase-sensitive target.

use crate::dsp::{from_mag_phase, ComplexSpectrogram, Grid, MagPhase};
use crate::{Error, Result};

/// Magnitude floor below which the mask ratio is not evaluated.
pub const MAG_EPS: f64 = 1e-8;

/// Real-valued time-frequency mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub values: Grid,
}

impl Mask {
    pub fn ones(frames: usize, bins: usize) -> Self {
        Mask {
            values: Grid::from_data(frames, bins, vec![1.0; frames * bins]),
        }
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Mask {
            values: Grid::zeros(frames, bins),
        }
    }
}

fn check_shapes(a: &Grid, b: &Grid) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.frames, a.bins, b.frames, b.bins
        )));
    }
    Ok(())
}

/// Phase-sensitive target product `|X| cos(theta_y - theta)`, the quantity
/// the masked magnitude is regressed onto.
pub fn psm_target_product(clean: &MagPhase, reverb: &MagPhase) -> Result<Grid> {
    check_shapes(&clean.mag, &reverb.mag)?;
    let mut out = Grid::zeros(clean.mag.frames, clean.mag.bins);
    for i in 0..out.data.len() {
        let dphi = reverb.phase.data[i] - clean.phase.data[i];
        out.data[i] = clean.mag.data[i] * dphi.cos();
    }
    Ok(out)
}

/// Phase-sensitive mask `|X| cos(theta_y - theta) / |Y|`, clipped to
/// `[clip.0, clip.1]`. Bins where `|Y| < MAG_EPS` take the lower clip value.
pub fn psm_target(clean: &MagPhase, reverb: &MagPhase, clip: (f64, f64)) -> Result<Mask> {
    check_shapes(&clean.mag, &reverb.mag)?;
    let (lo, hi) = clip;
    let mut values = Grid::zeros(clean.mag.frames, clean.mag.bins);
    for i in 0..values.data.len() {
        let y = reverb.mag.data[i];
        values.data[i] = if y < MAG_EPS {
            lo
        } else {
            let dphi = reverb.phase.data[i] - clean.phase.data[i];
            (clean.mag.data[i] * dphi.cos() / y).clamp(lo, hi)
        };
    }
    Ok(Mask { values })
}

/// Masked reconstruction: magnitude `mask * |Y|` with the reverberant phase.
pub fn apply_mask(mask: &Mask, reverb: &MagPhase) -> Result<ComplexSpectrogram> {
    check_shapes(&mask.values, &reverb.mag)?;
    let mut mp = reverb.clone();
    for i in 0..mp.mag.data.len() {
        mp.mag.data[i] *= mask.values.data[i];
    }
    Ok(from_mag_phase(&mp))
}

/// Mean squared error between the masked magnitude and the phase-sensitive
/// target, over all time-frequency bins.
pub fn psm_mse_loss(mask: &Mask, reverb: &MagPhase, clean: &MagPhase) -> Result<f64> {
    check_shapes(&mask.values, &reverb.mag)?;
    let target = psm_target_product(clean, reverb)?;
    let n = target.data.len() as f64;
    let mut sum = 0.0;
    for i in 0..target.data.len() {
        let r = mask.values.data[i] * reverb.mag.data[i] - target.data[i];
        sum += r * r;
    }
    Ok(sum / n)
}

/// Mean absolute error against the same phase-sensitive target.
pub fn psm_l1_loss(mask: &Mask, reverb: &MagPhase, clean: &MagPhase) -> Result<f64> {
    check_shapes(&mask.values, &reverb.mag)?;
    let target = psm_target_product(clean, reverb)?;
    let n = target.data.len() as f64;
    let mut sum = 0.0;
    for i in 0..target.data.len() {
        sum += (mask.values.data[i] * reverb.mag.data[i] - target.data[i]).abs();
    }
    Ok(sum / n)
}

/// MSE loss and its gradient with respect to the mask.
pub fn psm_mse_loss_grad(mask: &Mask, reverb_mag: &Grid, target: &Grid) -> (f64, Grid) {
    let n = target.data.len() as f64;
    let mut grad = Grid::zeros(target.frames, target.bins);
    let mut sum = 0.0;
    for i in 0..target.data.len() {
        let r = mask.values.data[i] * reverb_mag.data[i] - target.data[i];
        sum += r * r;
        grad.data[i] = 2.0 / n * r * reverb_mag.data[i];
    }
    (sum / n, grad)
}

/// L1 loss and its (sub)gradient with respect to the masked magnitude
/// `mask * |Y|`; chain through `|Y|` separately for a mask gradient.
pub fn psm_l1_loss_grad_wrt_product(product: &Grid, target: &Grid) -> (f64, Grid) {
    let n = target.data.len() as f64;
    let mut grad = Grid::zeros(target.frames, target.bins);
    let mut sum = 0.0;
    for i in 0..target.data.len() {
        let r = product.data[i] - target.data[i];
        sum += r.abs();
        grad.data[i] = r.signum() / n;
    }
    (sum / n, grad)
}
