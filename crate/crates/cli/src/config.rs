//! Run configuration: a TOML file overlaid by command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use didlab::diagnostics::TwfeSpecification;
use didlab::did2x2::{CovariateTiming, Estimator};
use didlab::inference::{BandOptions, Benchmark, Multiplier, SensitivityOptions};
use didlab::panel::Schema;
use didlab::staggered::Assumption;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaConfig {
    pub unit: Option<String>,
    pub period: Option<String>,
    pub outcome: Option<String>,
    pub first_treat: Option<String>,
    pub weight: Option<String>,
    pub cluster: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub never_value: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub draws: Option<usize>,
    pub level: Option<f64>,
    pub multiplier: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub target_e: Option<i64>,
    pub mbar: Option<f64>,
    pub benchmark: Option<String>,
    pub cumulate: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub pre: Option<i64>,
    pub post: Option<i64>,
}

/// Every setting is optional so a file and the flags can be layered.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub estimator: Option<String>,
    pub assumption: Option<String>,
    pub covariate_timing: Option<String>,
    pub include_pretrends: Option<bool>,
    pub window: Option<[i64; 2]>,
    pub specification: Option<String>,
    pub schema: SchemaConfig,
    pub bootstrap: BootstrapConfig,
    pub sensitivity: SensitivityConfig,
    pub balance: BalanceConfig,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($field:ident),+) => {
        $( $hi.$field = $hi.$field.take().or($lo.$field); )+
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Fills every unset field of `self` from `lower`.
    pub fn overlay(mut self, lower: RunConfig) -> RunConfig {
        overlay!(
            self,
            lower,
            input,
            out_dir,
            threads,
            seed,
            estimator,
            assumption,
            covariate_timing,
            include_pretrends,
            window,
            specification
        );
        overlay!(
            self.schema,
            lower.schema,
            unit,
            period,
            outcome,
            first_treat,
            weight,
            cluster,
            covariates,
            never_value
        );
        overlay!(self.bootstrap, lower.bootstrap, draws, level, multiplier);
        overlay!(self.sensitivity, lower.sensitivity, target_e, mbar, benchmark, cumulate);
        overlay!(self.balance, lower.balance, pre, post);
        self
    }

    pub fn resolve(self) -> Result<Resolved, CliError> {
        fn parse<T: FromStr<Err = String>>(v: Option<String>, default: T) -> Result<T, CliError> {
            v.map_or(Ok(default), |s| s.parse().map_err(CliError::Usage))
        }
        let defaults = Schema::default();
        let s = self.schema;
        let schema = Schema {
            unit: s.unit.unwrap_or(defaults.unit),
            period: s.period.unwrap_or(defaults.period),
            outcome: s.outcome.unwrap_or(defaults.outcome),
            first_treat: s.first_treat.unwrap_or(defaults.first_treat),
            weight: s.weight,
            cluster: s.cluster,
            covariates: s.covariates,
            never_value: s.never_value.unwrap_or(defaults.never_value),
        };
        let timing = match self.covariate_timing.as_deref() {
            None | Some("base") => CovariateTiming::Base,
            Some("base_and_target") => CovariateTiming::BaseAndTarget,
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "unknown covariate timing `{other}`; valid values: base, base_and_target"
                )))
            }
        };
        let band_defaults = BandOptions::default();
        let bootstrap = BandOptions {
            draws: self.bootstrap.draws.unwrap_or(band_defaults.draws),
            level: self.bootstrap.level.unwrap_or(band_defaults.level),
            seed: self.seed.unwrap_or(band_defaults.seed),
            multiplier: parse::<Multiplier>(self.bootstrap.multiplier, Multiplier::Rademacher)?,
        };
        if !(bootstrap.level > 0.0 && bootstrap.level < 1.0) {
            return Err(CliError::Usage(format!("level must lie in (0, 1), got {}", bootstrap.level)));
        }
        if bootstrap.draws < didlab::inference::MIN_DRAWS {
            return Err(CliError::Usage(format!(
                "at least {} bootstrap draws are required",
                didlab::inference::MIN_DRAWS
            )));
        }
        let sens_defaults = SensitivityOptions::default();
        let sensitivity = SensitivityOptions {
            target_event_time: self.sensitivity.target_e.unwrap_or(sens_defaults.target_event_time),
            mbar: self.sensitivity.mbar.unwrap_or(sens_defaults.mbar),
            benchmark: parse::<Benchmark>(self.sensitivity.benchmark, Benchmark::MaxPreStep)?,
            level: bootstrap.level,
            cumulate: self.sensitivity.cumulate.unwrap_or(false),
        };
        if let Some([a, b]) = self.window {
            if a > b {
                return Err(CliError::Usage(format!("window start {a} exceeds end {b}")));
            }
        }
        if self.threads == Some(0) {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        Ok(Resolved {
            input: self.input,
            out_dir: self.out_dir.unwrap_or_else(|| PathBuf::from(".")),
            threads: self.threads,
            estimator: parse::<Estimator>(self.estimator, Estimator::Means)?,
            assumption: parse::<Assumption>(self.assumption, Assumption::Never)?,
            covariate_timing: timing,
            include_pretrends: self.include_pretrends.unwrap_or(true),
            window: self.window.map(|[a, b]| (a, b)),
            specification: parse::<TwfeSpecification>(self.specification, TwfeSpecification::Static)?,
            schema,
            bootstrap,
            sensitivity,
            balance_periods: (self.balance.pre, self.balance.post),
        })
    }
}

/// Validated settings. Serialized into every output document, except the
/// thread count, which never changes results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub input: Option<PathBuf>,
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub threads: Option<usize>,
    pub estimator: Estimator,
    pub assumption: Assumption,
    pub covariate_timing: CovariateTiming,
    pub include_pretrends: bool,
    pub window: Option<(i64, i64)>,
    pub specification: TwfeSpecification,
    pub schema: Schema,
    pub bootstrap: BandOptions,
    pub sensitivity: SensitivityOptions,
    pub balance_periods: (Option<i64>, Option<i64>),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let file: RunConfig = toml::from_str(
            r#"
            estimator = "ra"
            assumption = "not_yet"
            seed = 3
            [bootstrap]
            draws = 499
            [schema]
            unit = "county"
            "#,
        )
        .unwrap();
        let flags = RunConfig { estimator: Some("dr".into()), ..Default::default() };
        let r = flags.overlay(file).resolve().unwrap();
        assert_eq!(r.estimator, Estimator::Dr);
        assert_eq!(r.assumption, Assumption::NotYet);
        assert_eq!(r.bootstrap.draws, 499);
        assert_eq!(r.bootstrap.seed, 3);
        assert_eq!(r.schema.unit, "county");
        assert_eq!(r.schema.period, "period");
    }

    #[test]
    fn enumerations_are_validated() {
        let bad = RunConfig { estimator: Some("ols".into()), ..Default::default() };
        let err = bad.resolve().unwrap_err().to_string();
        assert!(err.contains("means") && err.contains("dr"), "{err}");
        let bad = RunConfig { assumption: Some("sometimes".into()), ..Default::default() };
        assert!(bad.resolve().is_err());
        assert!(toml::from_str::<RunConfig>("estimatr = \"dr\"").is_err());
    }
}
