//! Photometric, cross-modal and structural depth losses combined by a
//! per-pixel minimum over sources.

mod displacement;
mod model;
mod photometric;
mod terms;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::itof::{ItofConfig, DEFAULT_AMPLITUDE_EPS};
use crate::polarisation::DEFAULT_ETA;

pub use displacement::{
    apply_displacement_field, df_distance, df_ground_truth, local_disparity, DisplacementField,
};
pub use model::{Evaluation, Gradients, LossModel, Objective, Wrt};
pub use photometric::{photometric_error, ssim_map, SSIM_C1, SSIM_C2};
pub use terms::{corr_loss, corr_to_pol_loss, stereo_and_mask_loss, struct_loss, total_loss};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// SSIM weight in the photometric blend.
    pub alpha_ssim: f64,
    /// Relative depth jump above which a pixel counts as a discontinuity.
    pub df_threshold: f64,
    pub df_radius: usize,
    pub amplitude_eps: f64,
    /// Refractive index used when rendering polarisation.
    pub eta: f64,
    pub itof: ItofConfig,
    /// Quantile of the left intensities mapped to 1.
    pub normalisation_quantile: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_ssim: 0.85,
            df_threshold: 0.15,
            df_radius: 8,
            amplitude_eps: DEFAULT_AMPLITUDE_EPS,
            eta: DEFAULT_ETA,
            itof: ItofConfig::default(),
            normalisation_quantile: 0.99,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_ssim) {
            return Err(Error::Arg(format!("alpha_ssim must lie in [0, 1], got {}", self.alpha_ssim)));
        }
        if !(self.df_threshold > 0.0) {
            return Err(Error::Arg("df_threshold must be positive".into()));
        }
        if !(self.eta > 1.0) {
            return Err(Error::Arg("eta must exceed 1".into()));
        }
        if !(self.normalisation_quantile > 0.0 && self.normalisation_quantile <= 1.0) {
            return Err(Error::Arg("normalisation_quantile must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Which sensor cues supervise the depth: stereo `S`, i-ToF `T`,
/// structured light `L` and temporal views with known poses `M`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Strategy {
    pub stereo: bool,
    pub itof: bool,
    pub structured: bool,
    pub temporal: bool,
}

impl Strategy {
    pub const S: Strategy = Strategy { stereo: true, itof: false, structured: false, temporal: false };
    pub const ST: Strategy = Strategy { stereo: true, itof: true, structured: false, temporal: false };
    pub const SL: Strategy = Strategy { stereo: true, itof: false, structured: true, temporal: false };
    pub const STL: Strategy = Strategy { stereo: true, itof: true, structured: true, temporal: false };

    pub fn is_empty(&self) -> bool {
        !(self.stereo || self.itof || self.structured || self.temporal)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Strategy::default();
        for c in s.chars() {
            let slot = match c {
                'S' => &mut out.stereo,
                'T' => &mut out.itof,
                'L' => &mut out.structured,
                'M' => &mut out.temporal,
                _ => return Err(Error::Arg(format!("unknown strategy letter {c:?} in {s:?}"))),
            };
            if *slot {
                return Err(Error::Arg(format!("strategy letter {c:?} repeated in {s:?}")));
            }
            *slot = true;
        }
        if out.is_empty() {
            return Err(Error::Arg("strategy must name at least one of S, T, L, M".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name: String = [(self.temporal, 'M'), (self.stereo, 'S'), (self.itof, 'T'), (self.structured, 'L')]
            .iter()
            .filter_map(|&(on, c)| on.then_some(c))
            .collect();
        f.pad(&name)
    }
}

/// A candidate in the per-pixel minimum. Ties resolve to the earliest
/// source in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Mask,
    Stereo,
    CorrToPol,
    Struct,
    Temporal(usize),
}

impl Source {
    pub fn name(&self) -> String {
        match self {
            Source::Mask => "mask".into(),
            Source::Stereo => "stereo".into(),
            Source::CorrToPol => "corr_to_pol".into(),
            Source::Struct => "struct".into(),
            Source::Temporal(k) => format!("temporal_{k}"),
        }
    }
}

/// Every individually addressable loss term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    Source(Source),
    Corr,
    Hint,
    DisplacementField,
}

impl Term {
    pub fn name(&self) -> String {
        match self {
            Term::Source(s) => s.name(),
            Term::Corr => "corr".into(),
            Term::Hint => "hint".into(),
            Term::DisplacementField => "df".into(),
        }
    }
}

/// One loss term: a per-pixel map, where it is defined, and its mean there.
#[derive(Clone, Debug, PartialEq)]
pub struct TermMap {
    pub term: Term,
    pub map: Grid,
    pub valid: Vec<bool>,
}

impl TermMap {
    pub fn mean(&self) -> Option<f64> {
        crate::grid::masked_mean(&self.map, &self.valid)
    }
}

/// All loss maps of one evaluation.
///
/// `total_map` lives on the left polarisation grid and equals, pointwise,
/// the minimum over valid sources plus the structured-light hint plus the
/// displacement-field term. `total` is its mean plus the mean i-ToF
/// correlation loss, which lives on the i-ToF grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub strategy: Strategy,
    pub sources: Vec<TermMap>,
    pub corr: Option<TermMap>,
    pub hint: Option<TermMap>,
    pub df: Option<TermMap>,
    pub min_map: Grid,
    pub argmin: Vec<Option<Source>>,
    pub total_map: Grid,
    pub total_valid: Vec<bool>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn source(&self, s: Source) -> Option<&TermMap> {
        self.sources.iter().find(|t| t.term == Term::Source(s))
    }

    pub fn term(&self, t: Term) -> Option<&TermMap> {
        match t {
            Term::Source(s) => self.source(s),
            Term::Corr => self.corr.as_ref(),
            Term::Hint => self.hint.as_ref(),
            Term::DisplacementField => self.df.as_ref(),
        }
    }

    /// `(name, mean)` of every present term followed by the total. Terms
    /// with no valid pixel report `NaN`.
    pub fn scalars(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .sources
            .iter()
            .chain(&self.corr)
            .chain(&self.hint)
            .chain(&self.df)
            .map(|t| (t.term.name(), t.mean().unwrap_or(f64::NAN)))
            .collect();
        out.push(("total".into(), self.total));
        out
    }

    /// Header and one data row of the scalar terms, comma separated.
    pub fn csv(&self) -> (String, String) {
        let s = self.scalars();
        let header = s.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(",");
        let row = s.iter().map(|(_, v)| v.to_string()).collect::<Vec<_>>().join(",");
        (header, row)
    }

    /// Fraction of valid pixels whose minimum came from `s`.
    pub fn argmin_share(&self, s: Source) -> f64 {
        let n = self.argmin.iter().filter(|a| a.is_some()).count();
        if n == 0 {
            return 0.0;
        }
        self.argmin.iter().filter(|a| **a == Some(s)).count() as f64 / n as f64
    }
}
