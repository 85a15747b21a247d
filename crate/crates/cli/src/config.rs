use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use stps::dataio::{SelectionMode, SynthConfig};
use stps::pipeline::ModelConfig;

use crate::error::CliError;

/// Parameters of a generated dataset, given on the command line as
/// `key=value` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub days: usize,
    /// Falls back to the run seed when absent.
    pub seed: Option<u64>,
    pub closure_rate: f64,
    pub noise_std: f64,
    pub weekend_factor: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let base = SynthConfig::new(20, 14, 0, 0.05);
        Self {
            n: base.n,
            days: base.days,
            seed: None,
            closure_rate: base.closure_rate,
            noise_std: base.noise_std,
            weekend_factor: base.weekend_factor,
        }
    }
}

impl SynthSpec {
    pub fn parse_tokens(tokens: &[String]) -> Result<Self, CliError> {
        let mut spec = SynthSpec::default();
        for token in tokens.iter().flat_map(|t| t.split([',', ' '])).filter(|t| !t.is_empty()) {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("synthetic spec `{token}` is not key=value")))?;
            let bad = || CliError::Usage(format!("bad value `{value}` for synthetic `{key}`"));
            match key.replace('-', "_").as_str() {
                "n" => spec.n = value.parse().map_err(|_| bad())?,
                "days" => spec.days = value.parse().map_err(|_| bad())?,
                "seed" => spec.seed = Some(value.parse().map_err(|_| bad())?),
                "closure_rate" => spec.closure_rate = value.parse().map_err(|_| bad())?,
                "noise_std" => spec.noise_std = value.parse().map_err(|_| bad())?,
                "weekend_factor" => spec.weekend_factor = value.parse().map_err(|_| bad())?,
                other => return Err(CliError::Usage(format!("unknown synthetic key `{other}`"))),
            }
        }
        Ok(spec)
    }

    pub fn to_synth_config(&self, run_seed: u64) -> SynthConfig {
        let mut c = SynthConfig::new(self.n, self.days, self.seed.unwrap_or(run_seed), self.closure_rate);
        c.noise_std = self.noise_std;
        c.weekend_factor = self.weekend_factor;
        c
    }
}

/// Which chronological split a command reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    #[default]
    Test,
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split `{other}` (train, val, test)")),
        }
    }
}

/// Fully resolved parameters of one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub synthetic: Option<SynthSpec>,
    pub partition: Option<PathBuf>,
    pub select: SelectionMode,
    pub m_prime: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Variance of Gaussian noise added to the training split.
    pub noise_variance: f64,
    pub split: SplitName,
    /// Number of bins for the per-forecast comparison against the baseline.
    pub bins: Option<usize>,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            adjacency: None,
            synthetic: None,
            partition: None,
            select: SelectionMode::Random,
            m_prime: None,
            seed: 0,
            out: PathBuf::from("stps-out"),
            checkpoint: None,
            noise_variance: 0.0,
            split: SplitName::Test,
            bins: None,
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Fills values that depend on other values so the echoed config is
    /// self-contained.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        if let Some(spec) = &mut self.synthetic {
            spec.seed.get_or_insert(self.seed);
        }
        if !(self.noise_variance >= 0.0) {
            return Err(CliError::Usage("noise variance must be >= 0".into()));
        }
        if self.bins == Some(0) {
            return Err(CliError::Usage("bins must be positive".into()));
        }
        self.model.validate()?;
        Ok(self)
    }
}
