//! Run configuration: an optional JSON file overlaid by command-line flags,
//! then resolved against defaults and validated before anything runs.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use fedqot_core::fedavg::Hyperparams;

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_N_SAMPLES: usize = 35_216;
pub const DEFAULT_N_DOMAINS: usize = 3;
pub const DEFAULT_HIDDEN: usize = 3072;
pub const DEFAULT_TOLERANCE_PP: f64 = 1.0;

/// Every setting any command reads. All optional: a missing value falls back
/// to its default, or is an error for commands that require it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Directory written by `gen-data`.
    pub data: Option<PathBuf>,
    pub n_samples: Option<usize>,
    pub n_domains: Option<usize>,
    pub holdout_samples: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub eta: Option<f64>,
    pub local_epochs: Option<u32>,
    pub batch_size: Option<u32>,
    pub rounds: Option<u32>,
    pub shuffle_seed: Option<u64>,
    pub init_seed: Option<u64>,
    pub tolerance_pp: Option<f64>,
    pub listen: Option<String>,
    pub connect: Option<String>,
    pub ecns: Option<usize>,
    pub min_samples: Option<u64>,
    pub round_deadline_secs: Option<f64>,
    pub tls_cert: Option<PathBuf>,
    pub tls_key: Option<PathBuf>,
    pub tls_ca: Option<PathBuf>,
    pub ecn_id: Option<String>,
    pub domain: Option<usize>,
    pub model: Option<PathBuf>,
    /// CSV to score in `evaluate`; defaults to the holdout file.
    pub csv: Option<PathBuf>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($field:ident),* $(,)?) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Values set in `other` replace those in `self`.
    pub fn overlay(&mut self, other: &RunConfig) {
        overlay!(
            self, other, seed, out, data, n_samples, n_domains, holdout_samples, hidden, eta, local_epochs,
            batch_size, rounds, shuffle_seed, init_seed, tolerance_pp, listen, connect, ecns, min_samples,
            round_deadline_secs, tls_cert, tls_key, tls_ca, ecn_id, domain, model, csv,
        );
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn n_samples(&self) -> Result<usize, CliError> {
        let n = self.n_samples.unwrap_or(DEFAULT_N_SAMPLES);
        let d = self.n_domains()?;
        if n < d {
            return Err(CliError::Usage(format!("n_samples: {n} is fewer than the {d} domains")));
        }
        Ok(n)
    }

    pub fn n_domains(&self) -> Result<usize, CliError> {
        match self.n_domains.unwrap_or(DEFAULT_N_DOMAINS) {
            0 => Err(CliError::Usage("n_domains: must be at least 1".into())),
            d => Ok(d),
        }
    }

    /// Held-out evaluation rows; defaults to a fifth of the training size.
    pub fn holdout_samples(&self) -> Result<usize, CliError> {
        let h = match self.holdout_samples {
            Some(h) => h,
            None => (self.n_samples()? / 5).max(2),
        };
        if h < 2 {
            return Err(CliError::Usage("holdout_samples: must be at least 2".into()));
        }
        Ok(h)
    }

    pub fn hidden(&self) -> Result<Vec<usize>, CliError> {
        let hidden = self.hidden.clone().unwrap_or_else(|| vec![DEFAULT_HIDDEN]);
        if hidden.contains(&0) {
            return Err(CliError::Usage("hidden: layer widths must be positive".into()));
        }
        Ok(hidden)
    }

    pub fn hyperparams(&self) -> Result<Hyperparams, CliError> {
        let d = Hyperparams::default();
        let hp = Hyperparams {
            eta: self.eta.unwrap_or(d.eta),
            local_epochs: self.local_epochs.unwrap_or(d.local_epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            rounds: self.rounds.unwrap_or(d.rounds),
            shuffle_seed: self.shuffle_seed.unwrap_or(self.seed()),
        };
        if !(hp.eta.is_finite() && hp.eta >= 0.0) {
            return Err(CliError::Usage(format!("eta: must be finite and >= 0, got {}", hp.eta)));
        }
        if hp.batch_size == 0 {
            return Err(CliError::Usage("batch_size: must be at least 1".into()));
        }
        if hp.rounds == 0 {
            return Err(CliError::Usage("rounds: must be at least 1".into()));
        }
        Ok(hp)
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.seed())
    }

    pub fn tolerance_pp(&self) -> Result<f64, CliError> {
        let t = self.tolerance_pp.unwrap_or(DEFAULT_TOLERANCE_PP);
        if !(t.is_finite() && t >= 0.0) {
            return Err(CliError::Usage(format!("tolerance_pp: must be finite and >= 0, got {t}")));
        }
        Ok(t)
    }

    pub fn round_deadline(&self) -> Result<Duration, CliError> {
        match self.round_deadline_secs {
            None => Ok(fedqot_wire::tcn::DEFAULT_ROUND_DEADLINE),
            Some(s) if s.is_finite() && s > 0.0 => Ok(Duration::from_secs_f64(s)),
            Some(s) => Err(CliError::Usage(format!("round_deadline_secs: must be positive, got {s}"))),
        }
    }

    pub fn require<'a, T>(value: &'a Option<T>, field: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| CliError::Usage(format!("{field}: required for this command")))
    }
}
