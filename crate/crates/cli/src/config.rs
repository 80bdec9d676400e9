use std::path::Path;

use pidp_core::composition::GpVariant;
use pidp_core::pipeline::{BaselineKind, TraceDirection};
use pidp_core::simulator::{SynthSpec, TrainerConfig};
use pidp_core::trace_io::ReportFormat;
use pidp_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Hölder constant: a number, or `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PSetting {
    #[default]
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for PSetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(PSetting::Auto);
        }
        let p: f64 = s
            .parse()
            .map_err(|_| Error::Domain(format!("--p expects 'auto' or a number, got {s:?}")))?;
        if !(p > 1.0) {
            return Err(Error::Domain(format!("Hölder constant {p} must exceed 1")));
        }
        Ok(PSetting::Fixed(p))
    }
}

impl PSetting {
    pub fn value(self) -> Option<f64> {
        match self {
            PSetting::Auto => None,
            PSetting::Fixed(p) => Some(p),
        }
    }
}

impl Serialize for PSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PSetting::Auto => s.serialize_str("auto"),
            PSetting::Fixed(p) => s.serialize_f64(*p),
        }
    }
}

impl<'de> Deserialize<'de> for PSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(p) if p > 1.0 => Ok(PSetting::Fixed(p)),
            Raw::N(p) => Err(serde::de::Error::custom(format!(
                "Hölder constant {p} must exceed 1"
            ))),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccountingSpec {
    pub alpha: u32,
    pub p: PSetting,
    pub runs: usize,
    pub direction: TraceDirection,
    pub gp_variant: GpVariant,
    pub baseline: BaselineKind,
    /// δ used when converting composed totals to (ε, δ).
    pub delta: f64,
    /// Outer and inner sample counts of the general bound.
    pub draws: usize,
}

impl Default for AccountingSpec {
    fn default() -> Self {
        Self {
            alpha: 8,
            p: PSetting::Auto,
            runs: 10,
            direction: TraceDirection::Forward,
            gp_variant: GpVariant::Proof,
            baseline: BaselineKind::OrderMatched,
            delta: 1e-5,
            draws: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<String>,
    pub format: ReportFormat,
}

/// Everything a session needs; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub dataset: SynthSpec,
    /// Non-target points tracked in addition to the target.
    pub tracked_extra: usize,
    pub trainer: TrainerConfig,
    pub accounting: AccountingSpec,
    pub output: OutputSpec,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            dataset: SynthSpec::default(),
            tracked_extra: 0,
            trainer: TrainerConfig {
                expected_batch: 128,
                clip: 1.0,
                ..TrainerConfig::default()
            },
            accounting: AccountingSpec::default(),
            output: OutputSpec::default(),
        }
    }
}

impl SessionConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let cfg: SessionConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.trainer.validate()?;
        if self.accounting.alpha < 2 {
            return Err(Error::Domain(format!(
                "alpha {} must be at least 2",
                self.accounting.alpha
            )));
        }
        if self.accounting.runs == 0 {
            return Err(Error::Domain("runs must be at least 1".into()));
        }
        if !(self.accounting.delta > 0.0 && self.accounting.delta < 1.0) {
            return Err(Error::Domain("delta must be in (0, 1)".into()));
        }
        if self.accounting.draws == 0 {
            return Err(Error::Domain("draws must be positive".into()));
        }
        Ok(())
    }
}
