//! Depth to i-ToF correlation and four-bucket recovery.
//!
//! The correlation of the emitted and received sinusoids sampled at phase
//! offsets `s ∈ {0, π/2, π, 3π/2}` is `c(s) = α cos(s + φ) + β`, with
//! `φ = 4π f_M d / c mod 2π`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::image::{CorrelationImage, ImagePlane};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Sample phase offsets of the four buckets.
pub const BUCKET_PHASES: [f64; 4] = [0.0, FRAC_PI_2, PI, 3.0 * FRAC_PI_2];

pub const DEFAULT_AMPLITUDE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItofConfig {
    /// Modulation frequency in Hz.
    pub modulation_hz: f64,
    pub speed_of_light: f64,
}

impl Default for ItofConfig {
    fn default() -> Self {
        ItofConfig {
            modulation_hz: 25e6,
            speed_of_light: SPEED_OF_LIGHT,
        }
    }
}

impl ItofConfig {
    pub fn new(modulation_hz: f64) -> Result<Self> {
        if !(modulation_hz > 0.0) {
            return Err(Error::Arg(format!(
                "modulation frequency must be positive, got {modulation_hz}"
            )));
        }
        Ok(ItofConfig {
            modulation_hz,
            ..Default::default()
        })
    }

    /// Phase advance per metre of depth.
    pub fn phase_per_metre(&self) -> f64 {
        4.0 * PI * self.modulation_hz / self.speed_of_light
    }

    /// Depth at which the phase wraps: `c / (2 f_M)`.
    pub fn ambiguity_range(&self) -> f64 {
        self.speed_of_light / (2.0 * self.modulation_hz)
    }
}

fn wrap_phase(p: f64) -> f64 {
    let r = p.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// `φ = (4π f_M d / c) mod 2π`.
pub fn phase_from_depth(depth: f64, cfg: &ItofConfig) -> f64 {
    wrap_phase(depth * cfg.phase_per_metre())
}

/// Inverse of [`phase_from_depth`] inside the unambiguous range.
pub fn depth_from_phase(phase: f64, cfg: &ItofConfig) -> f64 {
    phase / cfg.phase_per_metre()
}

/// The four buckets of a single pixel.
pub fn buckets(depth: f64, amplitude: f64, offset: f64, cfg: &ItofConfig) -> [f64; 4] {
    let phi = phase_from_depth(depth, cfg);
    BUCKET_PHASES.map(|s| amplitude * (s + phi).cos() + offset)
}

/// Derivative of each bucket with respect to depth.
pub(crate) fn bucket_depth_derivatives(depth: f64, amplitude: f64, cfg: &ItofConfig) -> [f64; 4] {
    let k = cfg.phase_per_metre();
    let phi = phase_from_depth(depth, cfg);
    BUCKET_PHASES.map(|s| -amplitude * (s + phi).sin() * k)
}

pub fn correlation_grids(
    depth: &Grid,
    amplitude: &Grid,
    offset: &Grid,
    cfg: &ItofConfig,
) -> Result<[Grid; 4]> {
    let dims = depth.dims();
    if amplitude.dims() != dims || offset.dims() != dims {
        return Err(Error::Arg("depth, amplitude and offset differ in size".into()));
    }
    if amplitude.data().iter().any(|&a| a < 0.0) {
        return Err(Error::Arg("amplitude must be non-negative".into()));
    }
    let mut out = [(); 4].map(|_| Grid::zeros(dims.0, dims.1));
    for i in 0..depth.len() {
        let b = buckets(depth.data()[i], amplitude.data()[i], offset.data()[i], cfg);
        for k in 0..4 {
            out[k].data_mut()[i] = b[k];
        }
    }
    Ok(out)
}

/// Renders the correlation image of a depth field.
pub fn correlation_from_depth(
    depth: &Grid,
    amplitude: &Grid,
    offset: &Grid,
    cfg: &ItofConfig,
) -> Result<CorrelationImage> {
    CorrelationImage::new(ImagePlane::from_grids(&correlation_grids(
        depth, amplitude, offset, cfg,
    )?)?)
}

/// Phase, amplitude and offset of one pixel. `phase` is `None` when the
/// amplitude is below the threshold and the phase is meaningless.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BucketRecovery {
    pub phase: Option<f64>,
    pub amplitude: f64,
    pub offset: f64,
}

pub fn recover_pixel(c: [f64; 4], amplitude_eps: f64) -> BucketRecovery {
    let s = c[3] - c[1];
    let q = c[0] - c[2];
    let amplitude = 0.5 * (s * s + q * q).sqrt();
    let offset = (c[0] + c[1] + c[2] + c[3]) / 4.0;
    let phase = (amplitude >= amplitude_eps).then(|| wrap_phase(s.atan2(q)));
    BucketRecovery {
        phase,
        amplitude,
        offset,
    }
}

/// Amplitude as printed in the four-bucket literature variant
/// `½ √((c₃ − c₁)² + (c₁ − c₀)²)`. It does not reproduce `α` on the
/// sinusoid model; kept to document the residual.
pub fn amplitude_printed_variant(c: [f64; 4]) -> f64 {
    0.5 * ((c[3] - c[1]).powi(2) + (c[1] - c[0]).powi(2)).sqrt()
}

/// Per-pixel recovered phase (`NaN` where the amplitude is too small),
/// amplitude and offset.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredCorrelation {
    pub phase: Grid,
    pub amplitude: Grid,
    pub offset: Grid,
    pub valid: Vec<bool>,
}

pub fn recover_from_buckets(corr: &CorrelationImage, amplitude_eps: f64) -> Result<RecoveredCorrelation> {
    let grids = corr.0.grids();
    recover_from_grids(&grids, amplitude_eps)
}

pub fn recover_from_grids(grids: &[Grid], amplitude_eps: f64) -> Result<RecoveredCorrelation> {
    if grids.len() != 4 {
        return Err(Error::Arg("four bucket grids required".into()));
    }
    let (w, h) = grids[0].dims();
    let mut phase = Grid::new(w, h, f64::NAN);
    let mut amplitude = Grid::zeros(w, h);
    let mut offset = Grid::zeros(w, h);
    let mut valid = vec![false; w * h];
    for i in 0..w * h {
        let c = [0, 1, 2, 3].map(|k| grids[k].data()[i]);
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite bucket at index {i}")));
        }
        let r = recover_pixel(c, amplitude_eps);
        amplitude.data_mut()[i] = r.amplitude;
        offset.data_mut()[i] = r.offset;
        if let Some(p) = r.phase {
            phase.data_mut()[i] = p;
            valid[i] = true;
        }
    }
    Ok(RecoveredCorrelation {
        phase,
        amplitude,
        offset,
        valid,
    })
}
