//! Adaptation hyperparameters and ablation switches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The intervention used to build one of the two perturbed views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    /// Low-frequency amplitude swap between two sequences.
    Lfccs,
    /// Entropy-localised voxel swap between two sequences.
    Ugps,
}

/// How the gated pseudo-label sum is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlNormalization {
    /// Divide by the number of gated entries (at least one).
    GatedMean,
    /// Plain sum over gated entries.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VistaConfig {
    /// Low-frequency box bandwidth ratio `r`.
    pub lfccs_ratio: f64,
    /// Entropy quantile `q` for the patch-swap mask.
    pub entropy_quantile: f64,
    /// Side of the cubic dilation element (15 at 160³ scale).
    pub dilation_side: usize,
    pub tau_var: f64,
    pub tau_plus: f64,
    pub tau_minus: f64,
    /// Consistency weight λ.
    pub lambda: f64,
    /// Gradient steps per incoming volume.
    pub steps_per_volume: usize,
    pub lr: f64,
    pub ema_alpha: f64,
    pub num_views: usize,
    pub shared_pair: bool,
    pub freeze_bn_stats: bool,
    pub bn_momentum: f32,
    pub ema_per_step: bool,
    pub reset_optimizer_per_case: bool,
    pub pl_normalization: PlNormalization,
    pub use_pseudo_label: bool,
    pub use_variance_gate: bool,
    /// Interventions producing views 1 and 2.
    pub interventions: [InterventionKind; 2],
    pub seed: u64,
}

impl Default for VistaConfig {
    fn default() -> Self {
        Self {
            lfccs_ratio: 0.10,
            entropy_quantile: 0.95,
            dilation_side: 5,
            tau_var: 0.05,
            tau_plus: 0.95,
            tau_minus: 0.05,
            lambda: 1.0,
            steps_per_volume: 10,
            lr: 1e-4,
            ema_alpha: 0.99,
            num_views: 3,
            shared_pair: false,
            freeze_bn_stats: true,
            bn_momentum: 0.1,
            ema_per_step: true,
            reset_optimizer_per_case: false,
            pl_normalization: PlNormalization::GatedMean,
            use_pseudo_label: true,
            use_variance_gate: true,
            interventions: [InterventionKind::Lfccs, InterventionKind::Ugps],
            seed: 0,
        }
    }
}

impl VistaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0 < self.tau_minus && self.tau_minus < self.tau_plus && self.tau_plus < 1.0) {
            return fail(format!("need 0 < tau_minus < tau_plus < 1, got {} / {}", self.tau_minus, self.tau_plus));
        }
        if !(self.tau_var > 0.0) || !self.tau_var.is_finite() {
            return fail(format!("tau_var must be positive and finite, got {}", self.tau_var));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.steps_per_volume < 1 {
            return fail("steps_per_volume must be >= 1".into());
        }
        if !(0.0 < self.ema_alpha && self.ema_alpha < 1.0) {
            return fail(format!("ema_alpha must lie in (0, 1), got {}", self.ema_alpha));
        }
        if !(0.0..=1.0).contains(&self.lfccs_ratio) {
            return fail(format!("lfccs_ratio must lie in [0, 1], got {}", self.lfccs_ratio));
        }
        if !(0.0 < self.entropy_quantile && self.entropy_quantile < 1.0) {
            return fail(format!("entropy_quantile must lie in (0, 1), got {}", self.entropy_quantile));
        }
        if self.dilation_side == 0 || self.dilation_side.is_multiple_of(2) {
            return fail(format!("dilation_side must be odd and >= 1, got {}", self.dilation_side));
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.num_views != 3 {
            return fail(format!("exactly 3 views are supported, got {}", self.num_views));
        }
        Ok(())
    }

    pub fn needs_views(&self) -> bool {
        self.lambda > 0.0 || (self.use_pseudo_label && self.use_variance_gate)
    }
}

/// Ablation rows: which components of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    PlOnly,
    ConsOnly,
    NoGate,
    NoUgps,
    NoLfccs,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::PlOnly, Variant::ConsOnly, Variant::NoGate, Variant::NoUgps, Variant::NoLfccs];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PlOnly => "pl_only",
            Variant::ConsOnly => "cons_only",
            Variant::NoGate => "no_gate",
            Variant::NoUgps => "no_ugps",
            Variant::NoLfccs => "no_lfccs",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_owned()))
    }
}

/// Derives the configuration of an ablation row from a base configuration.
pub fn ablation_variant(cfg: &VistaConfig, variant: Variant) -> Result<VistaConfig> {
    cfg.validate()?;
    let mut out = cfg.clone();
    match variant {
        Variant::Full => {}
        Variant::PlOnly => {
            out.lambda = 0.0;
            out.use_variance_gate = false;
        }
        Variant::ConsOnly => out.use_pseudo_label = false,
        Variant::NoGate => out.use_variance_gate = false,
        Variant::NoUgps => out.interventions = [InterventionKind::Lfccs, InterventionKind::Lfccs],
        Variant::NoLfccs => out.interventions = [InterventionKind::Ugps, InterventionKind::Ugps],
    }
    Ok(out)
}
