//! The subcommands, as library functions so tests can drive them directly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use fedqot_core::fedavg::{self, partition_id, RoundMetrics};
use fedqot_core::nn::{self, ModelSpec, ParameterVector};
use fedqot_core::qot::{self, FeatureSchema, NormStats, QotRecord};
use fedqot_core::Dataset;
use fedqot_wire::{tls, EcnConfig, EcnStatus, TcnConfig, TcpBinding, TcpConnector};

use crate::config::RunConfig;
use crate::error::CliError;

pub const SCHEMA_FILE: &str = "schema.json";
pub const STATS_FILE: &str = "stats.json";
pub const HOLDOUT_FILE: &str = "holdout.csv";
pub const MODEL_FILE: &str = "model.blob";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

/// Published reference rows, printed for comparison only.
pub const REFERENCE_CENTRALIZED: f64 = 89.89;
pub const REFERENCE_DISTRIBUTED: f64 = 89.31;

pub fn domain_file(k: usize) -> String {
    format!("domain_{k}.csv")
}

/// Encoded training partitions and evaluation set, plus what produced them.
pub struct Prepared {
    pub schema: FeatureSchema,
    pub stats: NormStats,
    pub partitions: Vec<Dataset>,
    pub holdout: Dataset,
}

impl Prepared {
    pub fn spec(&self, hidden: Vec<usize>) -> Result<ModelSpec, CliError> {
        ModelSpec::new(self.schema.encoded_width(), hidden, 2).map_err(|e| CliError::Usage(format!("hidden: {e}")))
    }
}

struct Raw {
    domains: Vec<Vec<QotRecord>>,
    holdout: Vec<QotRecord>,
}

fn generate(cfg: &RunConfig) -> Result<Raw, CliError> {
    let (n, d, h, seed) = (cfg.n_samples()?, cfg.n_domains()?, cfg.holdout_samples()?, cfg.seed());
    let domains = qot::generate_synthetic(n, d, seed)?;
    let holdout = qot::generate_holdout(h, d, seed)?;
    Ok(Raw { domains, holdout })
}

/// Normalization statistics come from the pooled training domains and are
/// reused for every partition and the holdout set.
fn encode(raw: &Raw, schema: FeatureSchema, stats: Option<NormStats>) -> Result<Prepared, CliError> {
    let stats = match stats {
        Some(s) => s,
        None => {
            let pooled: Vec<QotRecord> = raw.domains.iter().flatten().cloned().collect();
            NormStats::compute(&pooled, &schema)?
        }
    };
    let partitions = raw
        .domains
        .iter()
        .map(|d| qot::encode_and_normalize(d, &schema, Some(&stats)).map(|(ds, _)| ds))
        .collect::<Result<Vec<_>, _>>()?;
    let (holdout, _) = qot::encode_and_normalize(&raw.holdout, &schema, Some(&stats))?;
    Ok(Prepared { schema, stats, partitions, holdout })
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))
}

pub fn load_schema(dir: &Path) -> Result<FeatureSchema, CliError> {
    Ok(FeatureSchema::from_json(&read_text(&dir.join(SCHEMA_FILE))?)?)
}

pub fn load_stats(dir: &Path) -> Result<NormStats, CliError> {
    Ok(NormStats::from_json(&read_text(&dir.join(STATS_FILE))?)?)
}

fn domain_count(schema: &FeatureSchema) -> Result<usize, CliError> {
    schema
        .fields
        .iter()
        .find(|f| f.name == "domain_id")
        .and_then(|f| match &f.kind {
            qot::FieldKind::OneHot { categories } => Some(categories.len()),
            qot::FieldKind::Numeric => None,
        })
        .ok_or_else(|| CliError::Runtime("schema has no one-hot domain_id field".into()))
}

fn load_encoded(dir: &Path, file: &str, schema: &FeatureSchema, stats: &NormStats) -> Result<Dataset, CliError> {
    let records = qot::load_csv(dir.join(file), schema)?;
    Ok(qot::encode_and_normalize(&records, schema, Some(stats))?.0)
}

/// Loads a `gen-data` directory, or generates the same data in memory when
/// no directory is configured.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    match &cfg.data {
        Some(dir) => {
            let schema = load_schema(dir)?;
            let stats = load_stats(dir)?;
            let partitions = (0..domain_count(&schema)?)
                .map(|k| load_encoded(dir, &domain_file(k), &schema, &stats))
                .collect::<Result<Vec<_>, _>>()?;
            let holdout = load_encoded(dir, HOLDOUT_FILE, &schema, &stats)?;
            Ok(Prepared { schema, stats, partitions, holdout })
        }
        None => {
            let raw = generate(cfg)?;
            encode(&raw, FeatureSchema::qot_default(cfg.n_domains()?), None)
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&PathBuf, CliError> {
    let dir = RunConfig::require(&cfg.out, "out")?;
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub domain_sizes: Vec<usize>,
    pub holdout_size: usize,
    pub positive_fraction: f64,
    pub schema_hash: u64,
}

/// Writes `domain_k.csv`, `holdout.csv`, `schema.json` and `stats.json`.
pub fn gen_data(cfg: &RunConfig) -> Result<GenSummary, CliError> {
    let dir = out_dir(cfg)?;
    let raw = generate(cfg)?;
    let schema = FeatureSchema::qot_default(cfg.n_domains()?);
    let prepared = encode(&raw, schema, None)?;
    for (k, d) in raw.domains.iter().enumerate() {
        qot::save_csv(d, dir.join(domain_file(k)))?;
    }
    qot::save_csv(&raw.holdout, dir.join(HOLDOUT_FILE))?;
    write(&dir.join(SCHEMA_FILE), prepared.schema.canonical_json())?;
    write(&dir.join(STATS_FILE), prepared.stats.canonical_json())?;
    let total: usize = raw.domains.iter().map(Vec::len).sum();
    let positives = raw.domains.iter().flatten().filter(|r| r.label == 1).count();
    Ok(GenSummary {
        domain_sizes: raw.domains.iter().map(Vec::len).collect(),
        holdout_size: raw.holdout.len(),
        positive_fraction: positives as f64 / total as f64,
        schema_hash: prepared.schema.hash(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub centralized: f64,
    pub distributed: f64,
    pub tolerance_pp: f64,
    pub history: Vec<RoundMetrics>,
    pub distributed_params: ParameterVector,
}

impl SimReport {
    pub fn gap_pp(&self) -> f64 {
        100.0 * (self.distributed - self.centralized).abs()
    }

    pub fn within_tolerance(&self) -> bool {
        self.gap_pp() <= self.tolerance_pp
    }

    pub fn csv(&self) -> String {
        format!("scenario,accuracy\ncentralized,{:.6}\ndistributed,{:.6}\n", self.centralized, self.distributed)
    }

    pub fn text(&self, cfg: &RunConfig, prepared: &Prepared) -> Result<String, CliError> {
        let hp = cfg.hyperparams()?;
        let sizes: Vec<String> = prepared.partitions.iter().map(|p| p.len().to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "fedqot simulate");
        let _ = writeln!(
            s,
            "data: domains [{}], holdout {}, feature width {}",
            sizes.join(", "),
            prepared.holdout.len(),
            prepared.schema.encoded_width()
        );
        let _ = writeln!(
            s,
            "model: {}; eta {}, local epochs {}, batch {}, rounds {}, init seed {}, shuffle seed {}",
            prepared.spec(cfg.hidden()?)?,
            hp.eta,
            hp.local_epochs,
            hp.batch_size,
            hp.rounds,
            cfg.init_seed(),
            hp.shuffle_seed
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<28} {:>9}", "scenario", "accuracy");
        let _ = writeln!(s, "{:<28} {:>8.2}%", "Shared QoT model, centralized", 100.0 * self.centralized);
        let _ = writeln!(s, "{:<28} {:>8.2}%", "Shared QoT model, distributed", 100.0 * self.distributed);
        let _ = writeln!(
            s,
            "gap {:.2} pp, tolerance {:.2} pp: {}",
            self.gap_pp(),
            self.tolerance_pp,
            if self.within_tolerance() { "PASS" } else { "FAIL" }
        );
        let _ = writeln!(
            s,
            "published reference on proprietary data (not comparable): centralized {REFERENCE_CENTRALIZED:.2}%, distributed {REFERENCE_DISTRIBUTED:.2}%"
        );
        Ok(s)
    }
}

/// Trains both scenarios on the same data and scores them on the same holdout.
pub fn run_scenarios(cfg: &RunConfig, prepared: &Prepared) -> Result<SimReport, CliError> {
    let hp = cfg.hyperparams()?;
    let spec = prepared.spec(cfg.hidden()?)?;
    let tolerance_pp = cfg.tolerance_pp()?;
    let start = Instant::now();
    let fed = fedavg::run_training(&prepared.partitions, &spec, &hp, cfg.init_seed(), Some(&prepared.holdout))?;
    log::info!("distributed training took {:.1?}", start.elapsed());
    let start = Instant::now();
    let pooled = Dataset::concat(&prepared.partitions)?;
    let central = fedavg::centralized_train(&pooled, &spec, &hp, cfg.init_seed())?;
    log::info!("centralized training took {:.1?}", start.elapsed());
    Ok(SimReport {
        centralized: nn::evaluate_accuracy(&central, &prepared.holdout)?,
        distributed: nn::evaluate_accuracy(&fed.final_params, &prepared.holdout)?,
        tolerance_pp,
        history: fed.history,
        distributed_params: fed.final_params,
    })
}

/// Runs both scenarios, writes `report.txt`, `report.csv` and
/// `history.csv`, and fails with a parity error when the gap is too large.
pub fn simulate(cfg: &RunConfig) -> Result<SimReport, CliError> {
    cfg.hyperparams()?;
    cfg.hidden()?;
    cfg.tolerance_pp()?;
    let dir = out_dir(cfg)?.clone();
    let prepared = prepare(cfg)?;
    let report = run_scenarios(cfg, &prepared)?;
    let text = report.text(cfg, &prepared)?;
    write(&dir.join(REPORT_TXT), &text)?;
    write(&dir.join(REPORT_CSV), report.csv())?;
    let mut history = Vec::new();
    fedavg::write_history_csv(&report.history, &mut history)?;
    write(&dir.join("history.csv"), history)?;
    print!("{text}");
    if !report.within_tolerance() {
        return Err(CliError::Parity(format!(
            "gap {:.2} pp exceeds {:.2} pp",
            report.gap_pp(),
            report.tolerance_pp
        )));
    }
    Ok(report)
}

/// Trains on the pooled domains, saves the model and returns holdout accuracy.
pub fn centralized(cfg: &RunConfig) -> Result<f64, CliError> {
    let hp = cfg.hyperparams()?;
    let hidden = cfg.hidden()?;
    let dir = out_dir(cfg)?.clone();
    let prepared = prepare(cfg)?;
    let spec = prepared.spec(hidden)?;
    let pooled = Dataset::concat(&prepared.partitions)?;
    let params = fedavg::centralized_train(&pooled, &spec, &hp, cfg.init_seed())?;
    write(&dir.join(MODEL_FILE), nn::serialize_params(&params))?;
    let acc = nn::evaluate_accuracy(&params, &prepared.holdout)?;
    println!("centralized accuracy {:.6}", acc);
    Ok(acc)
}

/// Scores a saved model on a CSV encoded with the data directory's schema
/// and statistics.
pub fn evaluate(cfg: &RunConfig) -> Result<f64, CliError> {
    let model_path = RunConfig::require(&cfg.model, "model")?;
    let dir = RunConfig::require(&cfg.data, "data")?;
    let schema = load_schema(dir)?;
    let stats = load_stats(dir)?;
    let csv = cfg.csv.clone().unwrap_or_else(|| dir.join(HOLDOUT_FILE));
    let records = qot::load_csv(&csv, &schema)?;
    let (data, _) = qot::encode_and_normalize(&records, &schema, Some(&stats))?;
    let bytes = fs::read(model_path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", model_path.display())))?;
    let params = nn::deserialize_params_any(&bytes)?;
    let acc = nn::evaluate_accuracy(&params, &data)?;
    println!("accuracy {:.6}", acc);
    Ok(acc)
}

#[derive(Debug, Clone)]
pub struct TcnSummary {
    pub final_accuracy: Option<f64>,
    pub final_params: ParameterVector,
}

/// Serves one training run. Binds `listen`, waits for `ecns` contributors and
/// writes the final model plus a per-round CSV.
pub async fn tcn(cfg: &RunConfig) -> Result<TcnSummary, CliError> {
    let listen = RunConfig::require(&cfg.listen, "listen")?.clone();
    let data_dir = RunConfig::require(&cfg.data, "data")?.clone();
    let hp = cfg.hyperparams()?;
    let hidden = cfg.hidden()?;
    let deadline = cfg.round_deadline()?;
    let tls_config = match (&cfg.tls_cert, &cfg.tls_key) {
        (Some(cert), Some(key)) => Some(tls::server_config(cert, key)?),
        (None, None) => None,
        _ => return Err(CliError::Usage("tls_cert, tls_key: give both or neither".into())),
    };
    let dir = out_dir(cfg)?.clone();
    let schema = load_schema(&data_dir)?;
    let stats = load_stats(&data_dir)?;
    let holdout = load_encoded(&data_dir, HOLDOUT_FILE, &schema, &stats)?;
    let spec = ModelSpec::new(schema.encoded_width(), hidden, 2).map_err(|e| CliError::Usage(format!("hidden: {e}")))?;
    let k = match cfg.ecns {
        Some(k) => k,
        None => domain_count(&schema)?,
    };
    let mut config = TcnConfig::new(k, spec, hp, schema.hash());
    config.init_seed = cfg.init_seed();
    config.round_deadline = deadline;
    if let Some(m) = cfg.min_samples {
        config.min_samples = m;
    }

    let binding = TcpBinding::bind(&listen, tls_config).await?;
    log::info!("listening on {}", binding.local_addr()?);
    let outcome = fedqot_wire::tcn_serve(binding, config, Some(Arc::new(holdout))).await?;

    write(&dir.join(MODEL_FILE), nn::serialize_params(&outcome.final_params))?;
    let mut rounds = String::from("round,participants,dropped,eval_accuracy\n");
    for r in &outcome.rounds {
        let _ = writeln!(
            rounds,
            "{},{},{},{}",
            r.round,
            r.participants.len(),
            r.dropped.join(" "),
            r.eval_accuracy.map(|a| a.to_string()).unwrap_or_default()
        );
    }
    write(&dir.join("rounds.csv"), rounds)?;
    if let Some(acc) = outcome.final_accuracy {
        println!("distributed accuracy {:.6}", acc);
    }
    Ok(TcnSummary { final_accuracy: outcome.final_accuracy, final_params: outcome.final_params })
}

/// Joins a federation with one domain's data.
pub async fn ecn(cfg: &RunConfig) -> Result<Option<f64>, CliError> {
    let endpoint = RunConfig::require(&cfg.connect, "connect")?.clone();
    let data_dir = RunConfig::require(&cfg.data, "data")?.clone();
    let domain = *RunConfig::require(&cfg.domain, "domain")?;
    let connector = match &cfg.tls_ca {
        Some(ca) => TcpConnector::tls(endpoint, tls::client_config(ca)?)?,
        None => TcpConnector::plain(endpoint),
    };
    let schema = load_schema(&data_dir)?;
    let stats = load_stats(&data_dir)?;
    let data = load_encoded(&data_dir, &domain_file(domain), &schema, &stats)?;
    let mut config = EcnConfig::new(cfg.ecn_id.clone().unwrap_or_else(|| partition_id(domain)), schema.hash());
    config.connect_patience = std::time::Duration::from_secs(30);
    let report = fedqot_wire::ecn_client(&connector, Arc::new(data), &config).await?;
    match report.status {
        EcnStatus::Completed { final_accuracy } => {
            println!("{}: done after {} rounds", config.ecn_id, report.rounds.len());
            Ok(final_accuracy)
        }
        EcnStatus::Rejected { reason } => Err(CliError::Runtime(format!("not eligible: {reason}"))),
    }
}
