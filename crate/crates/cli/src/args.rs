//! Command-line surface. Every flag maps onto a [`RunConfig`] field and
//! overrides the value from `--config`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fedqot", version, about = "Federated QoT classifier training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic per-domain datasets, holdout set, schema and statistics.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataGen,
    },
    /// Train distributed and centralized models on the same data and compare.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataSource,
        #[command(flatten)]
        train: Train,
        /// Largest accepted accuracy gap, in percentage points.
        #[arg(long, allow_negative_numbers = true)]
        tolerance_pp: Option<f64>,
    },
    /// Train one model on the pooled domains.
    Centralized {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataSource,
        #[command(flatten)]
        train: Train,
    },
    /// Run the training coordinator.
    Tcn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: Train,
        /// Directory written by gen-data (schema, statistics, holdout set).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Address to listen on, host:port.
        #[arg(long)]
        listen: Option<String>,
        /// Number of contributors to wait for (default: one per domain).
        #[arg(long)]
        ecns: Option<usize>,
        #[arg(long)]
        min_samples: Option<u64>,
        #[arg(long)]
        round_deadline_secs: Option<f64>,
        #[arg(long)]
        tls_cert: Option<PathBuf>,
        #[arg(long)]
        tls_key: Option<PathBuf>,
    },
    /// Run a contributor for one domain.
    Ecn {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Domain index; selects domain_<k>.csv.
        #[arg(long)]
        domain: Option<usize>,
        /// Coordinator endpoint, host:port.
        #[arg(long)]
        connect: Option<String>,
        #[arg(long)]
        ecn_id: Option<String>,
        /// CA certificate that signed the coordinator's certificate.
        #[arg(long)]
        tls_ca: Option<PathBuf>,
    },
    /// Score a saved model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// CSV to score (default: the holdout set in --data).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataGen {
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub n_domains: Option<usize>,
    #[arg(long)]
    pub holdout_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataSource {
    /// Directory written by gen-data; without it the data is generated in memory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub gen: DataGen,
}

#[derive(Debug, Args)]
pub struct Train {
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, allow_negative_numbers = true)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub local_epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<u32>,
    #[arg(long)]
    pub rounds: Option<u32>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
}

impl Common {
    fn apply(&self, c: &mut RunConfig) {
        c.seed = self.seed.or(c.seed);
        c.out = self.out.clone().or(c.out.take());
    }
}

impl DataGen {
    fn apply(&self, c: &mut RunConfig) {
        c.n_samples = self.n_samples.or(c.n_samples);
        c.n_domains = self.n_domains.or(c.n_domains);
        c.holdout_samples = self.holdout_samples.or(c.holdout_samples);
    }
}

impl Train {
    fn apply(&self, c: &mut RunConfig) {
        c.hidden = self.hidden.clone().or(c.hidden.take());
        c.eta = self.eta.or(c.eta);
        c.local_epochs = self.local_epochs.or(c.local_epochs);
        c.batch_size = self.batch_size.or(c.batch_size);
        c.rounds = self.rounds.or(c.rounds);
        c.shuffle_seed = self.shuffle_seed.or(c.shuffle_seed);
        c.init_seed = self.init_seed.or(c.init_seed);
    }
}

fn set<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
    if flag.is_some() {
        *slot = flag.clone();
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Simulate { common, .. }
            | Command::Centralized { common, .. }
            | Command::Tcn { common, .. }
            | Command::Ecn { common, .. }
            | Command::Evaluate { common, .. } => common,
        }
    }

    /// Loads `--config` when given and lays the flags over it.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let common = self.common();
        let mut c = match &common.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        common.apply(&mut c);
        match self {
            Command::GenData { data, .. } => data.apply(&mut c),
            Command::Simulate { data, train, tolerance_pp, .. } => {
                set(&mut c.data, &data.data);
                data.gen.apply(&mut c);
                train.apply(&mut c);
                set(&mut c.tolerance_pp, tolerance_pp);
            }
            Command::Centralized { data, train, .. } => {
                set(&mut c.data, &data.data);
                data.gen.apply(&mut c);
                train.apply(&mut c);
            }
            Command::Tcn { train, data, listen, ecns, min_samples, round_deadline_secs, tls_cert, tls_key, .. } => {
                train.apply(&mut c);
                set(&mut c.data, data);
                set(&mut c.listen, listen);
                set(&mut c.ecns, ecns);
                set(&mut c.min_samples, min_samples);
                set(&mut c.round_deadline_secs, round_deadline_secs);
                set(&mut c.tls_cert, tls_cert);
                set(&mut c.tls_key, tls_key);
            }
            Command::Ecn { data, domain, connect, ecn_id, tls_ca, .. } => {
                set(&mut c.data, data);
                set(&mut c.domain, domain);
                set(&mut c.connect, connect);
                set(&mut c.ecn_id, ecn_id);
                set(&mut c.tls_ca, tls_ca);
            }
            Command::Evaluate { data, model, csv, .. } => {
                set(&mut c.data, data);
                set(&mut c.model, model);
                set(&mut c.csv, csv);
            }
        }
        Ok(c)
    }
}
