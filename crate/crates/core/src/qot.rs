//! Synthetic quality-of-transmission data: lightpath samples, the SNR-proxy
//! labeller, a seeded generator that emits class-balanced per-domain datasets,
//! feature encoding and CSV ingestion.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Encoding};
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::SplitMix64;

pub const MAX_SPANS: u32 = 30;
pub const MAX_CHANNELS: u32 = 96;
pub const MIN_LAUNCH_DBM: f64 = -4.0;
pub const MAX_LAUNCH_DBM: f64 = 4.0;

/// Per-span ASE noise contribution (linear, mW-relative).
pub const SIGMA_ASE: f64 = 0.05;
/// Nonlinear interference coefficient.
pub const ETA_NL: f64 = 0.01;

/// XOR-ed into the seed to derive the held-out evaluation stream.
pub const HOLDOUT_SALT: u64 = 0x484F_4C44_4F55_5421;

/// Modulation mix of domain 0; domain `k` rotates it by `k`.
const BASE_MODULATION_MIX: [f64; 3] = [0.5, 0.3, 0.2];

pub const CSV_HEADER: [&str; 6] = [
    "n_spans",
    "launch_power_dbm",
    "channel_load",
    "modulation",
    "domain_id",
    "label",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modulation {
    #[serde(rename = "QPSK")]
    Qpsk,
    #[serde(rename = "QAM8")]
    Qam8,
    #[serde(rename = "QAM16")]
    Qam16,
}

impl Modulation {
    pub const ALL: [Modulation; 3] = [Modulation::Qpsk, Modulation::Qam8, Modulation::Qam16];

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Qpsk => "QPSK",
            Modulation::Qam8 => "QAM8",
            Modulation::Qam16 => "QAM16",
        }
    }

    /// Minimum SNR in dB for the pre-FEC BER to stay under 3.8e-3.
    pub fn snr_threshold_db(self) -> f64 {
        match self {
            Modulation::Qpsk => 7.0,
            Modulation::Qam8 => 10.5,
            Modulation::Qam16 => 13.5,
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modulation::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown modulation `{s}`")))
    }
}

/// One lightpath configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightpathSample {
    /// Number of 80 km spans, 1..=30.
    pub n_spans: u32,
    /// Per-channel launch power, -4..=4 dBm.
    pub launch_power_dbm: f64,
    /// Co-propagating channels, 1..=96.
    pub channel_load: u32,
    pub modulation: Modulation,
    pub domain_id: u32,
}

impl LightpathSample {
    /// Checks the physical ranges. Domain bounds depend on the schema and are
    /// checked at encoding time.
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_SPANS).contains(&self.n_spans) {
            return Err(Error::Validation(format!(
                "n_spans {} outside 1..={MAX_SPANS}",
                self.n_spans
            )));
        }
        if !(MIN_LAUNCH_DBM..=MAX_LAUNCH_DBM).contains(&self.launch_power_dbm) {
            return Err(Error::Validation(format!(
                "launch_power_dbm {} outside [{MIN_LAUNCH_DBM}, {MAX_LAUNCH_DBM}]",
                self.launch_power_dbm
            )));
        }
        if !(1..=MAX_CHANNELS).contains(&self.channel_load) {
            return Err(Error::Validation(format!(
                "channel_load {} outside 1..={MAX_CHANNELS}",
                self.channel_load
            )));
        }
        Ok(())
    }

    fn field(&self, name: &str) -> Option<FieldValue> {
        Some(match name {
            "n_spans" => FieldValue::Number(self.n_spans as f64),
            "launch_power_dbm" => FieldValue::Number(self.launch_power_dbm),
            "channel_load" => FieldValue::Number(self.channel_load as f64),
            "modulation" => FieldValue::Category(self.modulation.name().to_string()),
            "domain_id" => FieldValue::Category(self.domain_id.to_string()),
            _ => return None,
        })
    }
}

enum FieldValue {
    Number(f64),
    Category(String),
}

/// A sample with its QoT label (1 = acceptable).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QotRecord {
    pub sample: LightpathSample,
    pub label: u8,
}

/// SNR proxy in dB: ASE accumulates per span, the nonlinear term grows with
/// the cube of launch power and mildly with channel load.
pub fn snr_db(sample: &LightpathSample) -> f64 {
    let power_mw = 10f64.powf(sample.launch_power_dbm / 10.0);
    let load = 1.0 + 0.5 * (sample.channel_load as f64 / MAX_CHANNELS as f64);
    let noise = sample.n_spans as f64 * (SIGMA_ASE + ETA_NL * power_mw * power_mw * power_mw * load);
    10.0 * (power_mw / noise).log10()
}

pub fn label_qot(sample: &LightpathSample) -> Result<u8> {
    sample.validate()?;
    Ok(u8::from(snr_db(sample) >= sample.modulation.snr_threshold_db()))
}

fn draw_sample(rng: &mut SplitMix64, domain_id: u32) -> LightpathSample {
    let n_spans = 1 + rng.below(MAX_SPANS as u64) as u32;
    let launch_power_dbm = MIN_LAUNCH_DBM + (MAX_LAUNCH_DBM - MIN_LAUNCH_DBM) * rng.next_f64();
    let channel_load = 1 + rng.below(MAX_CHANNELS as u64) as u32;
    let u = rng.next_f64();
    let mut acc = 0.0;
    let mut modulation = Modulation::Qam16;
    for (m, candidate) in Modulation::ALL.into_iter().enumerate() {
        acc += BASE_MODULATION_MIX[(m + 3 - (domain_id as usize % 3)) % 3];
        if u < acc {
            modulation = candidate;
            break;
        }
    }
    LightpathSample {
        n_spans,
        launch_power_dbm,
        channel_load,
        modulation,
        domain_id,
    }
}

/// Sizes of a uniform split of `n` into `parts`: the first `n % parts` get one extra.
pub fn domain_sizes(n: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|d| n / parts + usize::from(d < n % parts))
        .collect()
}

fn generate_domain(size: usize, domain_id: u32, stream_seed: u64) -> Result<Vec<QotRecord>> {
    let mut rng = SplitMix64::new(stream_seed);
    let want_pos = size / 2;
    let want_neg = size - want_pos;
    let (mut pos, mut neg) = (0, 0);
    let mut out = Vec::with_capacity(size);
    let budget = 100 * size;
    let mut draws = 0;
    while out.len() < size {
        if draws == budget {
            return Err(Error::Generation(format!(
                "domain {domain_id}: {pos}/{want_pos} positives and {neg}/{want_neg} negatives after {budget} draws"
            )));
        }
        draws += 1;
        let sample = draw_sample(&mut rng, domain_id);
        let label = label_qot(&sample)?;
        let keep = if label == 1 { pos < want_pos } else { neg < want_neg };
        if keep {
            if label == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            out.push(QotRecord { sample, label });
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}

/// Class-balanced per-domain datasets. Domain `d` draws from its own stream
/// seeded with `seed ^ d`, so domains can be generated independently.
pub fn generate_synthetic(n_samples: usize, n_domains: usize, seed: u64) -> Result<Vec<Vec<QotRecord>>> {
    if n_domains == 0 || n_samples < n_domains {
        return Err(Error::Usage(format!(
            "need at least one sample per domain (n_samples={n_samples}, n_domains={n_domains})"
        )));
    }
    let jobs: Vec<(u32, usize)> = domain_sizes(n_samples, n_domains)
        .into_iter()
        .enumerate()
        .map(|(d, size)| (d as u32, size))
        .collect();
    exec::map_ordered(&jobs, |&(d, size)| generate_domain(size, d, seed ^ d as u64))
        .into_iter()
        .collect()
}

/// Held-out set drawn like the domain data but from salted streams, pooled.
pub fn generate_holdout(n_samples: usize, n_domains: usize, seed: u64) -> Result<Vec<QotRecord>> {
    Ok(generate_synthetic(n_samples, n_domains, seed ^ HOLDOUT_SALT)?
        .into_iter()
        .flatten()
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    Numeric,
    OneHot { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FieldKind,
}

impl FieldSpec {
    fn width(&self) -> usize {
        match &self.kind {
            FieldKind::Numeric => 1,
            FieldKind::OneHot { categories } => categories.len(),
        }
    }
}

/// Ordered description of how samples become feature vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
}

impl FeatureSchema {
    /// Three numeric fields, one-hot modulation and one-hot domain id.
    pub fn qot_default(n_domains: usize) -> Self {
        let numeric = |name: &str| FieldSpec {
            name: name.into(),
            kind: FieldKind::Numeric,
        };
        Self {
            fields: vec![
                numeric("n_spans"),
                numeric("launch_power_dbm"),
                numeric("channel_load"),
                FieldSpec {
                    name: "modulation".into(),
                    kind: FieldKind::OneHot {
                        categories: Modulation::ALL.iter().map(|m| m.name().to_string()).collect(),
                    },
                },
                FieldSpec {
                    name: "domain_id".into(),
                    kind: FieldKind::OneHot {
                        categories: (0..n_domains).map(|d| d.to_string()).collect(),
                    },
                },
            ],
        }
    }

    pub fn encoded_width(&self) -> usize {
        self.fields.iter().map(FieldSpec::width).sum()
    }

    /// Sorted keys, no insignificant whitespace.
    pub fn canonical_json(&self) -> String {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: FeatureSchema =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("schema: {e}")))?;
        if schema.fields.is_empty() {
            return Err(Error::Schema("schema has no fields".into()));
        }
        Ok(schema)
    }

    /// FNV-1a (64-bit) over the canonical JSON.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical_json().as_bytes())
    }

    fn numeric_names(&self) -> impl Iterator<Item = &str> {
        self.fields
            .iter()
            .filter(|f| f.kind == FieldKind::Numeric)
            .map(|f| f.name.as_str())
    }

    fn domain_count(&self) -> Option<usize> {
        self.fields.iter().find_map(|f| match (&f.kind, f.name.as_str()) {
            (FieldKind::OneHot { categories }, "domain_id") => Some(categories.len()),
            _ => None,
        })
    }
}

/// Serializes through `serde_json::Value`, whose maps are key-sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    serde_json::to_value(value)
        .and_then(|v| serde_json::to_string(&v))
        .expect("plain data serializes")
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub name: String,
    pub mean: f64,
    /// Population standard deviation; zero marks a constant column.
    pub sd: f64,
}

/// z-score parameters for the numeric fields, in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub fields: Vec<FieldStats>,
}

impl NormStats {
    pub fn compute(records: &[QotRecord], schema: &FeatureSchema) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Usage("cannot compute statistics of zero samples".into()));
        }
        let n = records.len() as f64;
        let fields = schema
            .numeric_names()
            .map(|name| {
                let column: Vec<f64> = records
                    .iter()
                    .map(|r| number_field(&r.sample, name))
                    .collect::<Result<_>>()?;
                let mean = column.iter().sum::<f64>() / n;
                let var = column.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                Ok(FieldStats {
                    name: name.to_string(),
                    mean,
                    sd: var.sqrt(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { fields })
    }

    pub fn canonical_json(&self) -> String {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("normalization stats: {e}")))
    }

    fn get(&self, name: &str) -> Option<&FieldStats> {
        self.fields.iter().find(|f| f.name == name)
    }
}

fn number_field(sample: &LightpathSample, name: &str) -> Result<f64> {
    match sample.field(name) {
        Some(FieldValue::Number(x)) => Ok(x),
        Some(FieldValue::Category(_)) => Err(Error::Schema(format!("field `{name}` is categorical"))),
        None => Err(Error::Schema(format!("unknown field `{name}`"))),
    }
}

/// Encodes records under `schema`, z-scoring numeric fields with `stats` when
/// given, otherwise with statistics computed from `records`. Returns the
/// dataset together with the statistics used.
pub fn encode_and_normalize(
    records: &[QotRecord],
    schema: &FeatureSchema,
    stats: Option<&NormStats>,
) -> Result<(Dataset, NormStats)> {
    let stats = match stats {
        Some(s) => {
            if let Some(missing) = schema.numeric_names().find(|n| s.get(n).is_none()) {
                return Err(Error::Schema(format!("no statistics for numeric field `{missing}`")));
            }
            s.clone()
        }
        None => NormStats::compute(records, schema)?,
    };
    for f in stats.fields.iter().filter(|f| f.sd == 0.0) {
        log::warn!("field `{}` has zero variance; encoding it as 0", f.name);
    }

    let width = schema.encoded_width();
    let mut features = Vec::with_capacity(records.len() * width);
    for (row, record) in records.iter().enumerate() {
        record.sample.validate()?;
        for field in &schema.fields {
            let value = record
                .sample
                .field(&field.name)
                .ok_or_else(|| Error::Schema(format!("unknown field `{}`", field.name)))?;
            match (&field.kind, value) {
                (FieldKind::Numeric, FieldValue::Number(x)) => {
                    let s = stats.get(&field.name).expect("checked above");
                    features.push(if s.sd == 0.0 { 0.0 } else { (x - s.mean) / s.sd });
                }
                (FieldKind::OneHot { categories }, FieldValue::Category(c)) => {
                    let hot = categories.iter().position(|k| *k == c).ok_or_else(|| {
                        Error::Schema(format!("row {row}: unknown {} category `{c}`", field.name))
                    })?;
                    features.extend((0..categories.len()).map(|i| if i == hot { 1.0 } else { 0.0 }));
                }
                (FieldKind::OneHot { .. }, FieldValue::Number(_)) => {
                    return Err(Error::Schema(format!("field `{}` is numeric", field.name)))
                }
                (FieldKind::Numeric, FieldValue::Category(_)) => {
                    return Err(Error::Schema(format!("field `{}` is categorical", field.name)))
                }
            }
        }
    }
    let labels = records.iter().map(|r| r.label).collect();
    let domains = records.iter().map(|r| r.sample.domain_id).collect();
    let dataset = Dataset::new(features, width, labels)?
        .with_domains(domains)?
        .with_encoding(Encoding {
            schema: schema.clone(),
            stats: stats.clone(),
        });
    Ok((dataset, stats))
}

/// Writes records with a header row; reals use 17 significant digits.
pub fn save_csv(records: &[QotRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(CSV_HEADER).map_err(csv_io)?;
    for r in records {
        w.write_record([
            r.sample.n_spans.to_string(),
            format!("{:.16e}", r.sample.launch_power_dbm),
            r.sample.channel_load.to_string(),
            r.sample.modulation.name().to_string(),
            r.sample.domain_id.to_string(),
            r.label.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Reads records written by [`save_csv`]. Errors name the 1-based data row and
/// the offending field; header problems report row 0.
pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Vec<QotRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_io)?;
    let header = reader.headers().map_err(csv_io)?.clone();
    let required = schema
        .fields
        .iter()
        .map(|f| f.name.as_str())
        .chain(std::iter::once("label"));
    let mut columns = std::collections::HashMap::new();
    for name in CSV_HEADER.iter().copied().chain(required) {
        let idx = header.iter().position(|h| h == name).ok_or_else(|| Error::Ingestion {
            row: 0,
            field: name.to_string(),
            message: "missing column".into(),
        })?;
        columns.insert(name, idx);
    }
    let domains = schema.domain_count();

    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Ingestion {
            row,
            field: "*".into(),
            message: e.to_string(),
        })?;
        let cell = |name: &'static str| -> &str { rec.get(columns[name]).unwrap_or("") };
        let err = |field: &str, message: String| Error::Ingestion {
            row,
            field: field.to_string(),
            message,
        };
        let parse_u32 = |name: &'static str| {
            cell(name)
                .trim()
                .parse::<u32>()
                .map_err(|e| err(name, format!("`{}`: {e}", cell(name))))
        };

        let n_spans = parse_u32("n_spans")?;
        if !(1..=MAX_SPANS).contains(&n_spans) {
            return Err(err("n_spans", format!("{n_spans} outside 1..={MAX_SPANS}")));
        }
        let launch_power_dbm = cell("launch_power_dbm")
            .trim()
            .parse::<f64>()
            .map_err(|e| err("launch_power_dbm", format!("`{}`: {e}", cell("launch_power_dbm"))))?;
        if !(MIN_LAUNCH_DBM..=MAX_LAUNCH_DBM).contains(&launch_power_dbm) {
            return Err(err(
                "launch_power_dbm",
                format!("{launch_power_dbm} outside [{MIN_LAUNCH_DBM}, {MAX_LAUNCH_DBM}]"),
            ));
        }
        let channel_load = parse_u32("channel_load")?;
        if !(1..=MAX_CHANNELS).contains(&channel_load) {
            return Err(err("channel_load", format!("{channel_load} outside 1..={MAX_CHANNELS}")));
        }
        let modulation: Modulation = cell("modulation")
            .trim()
            .parse()
            .map_err(|e: Error| err("modulation", e.to_string()))?;
        let domain_id = parse_u32("domain_id")?;
        if let Some(k) = domains {
            if domain_id as usize >= k {
                return Err(err("domain_id", format!("{domain_id} outside 0..{k}")));
            }
        }
        let label = match cell("label").trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(err("label", format!("`{other}` is not 0 or 1"))),
        };
        out.push(QotRecord {
            sample: LightpathSample {
                n_spans,
                launch_power_dbm,
                channel_load,
                modulation,
                domain_id,
            },
            label,
        });
    }
    Ok(out)
}

/// Stratified, seeded split. Each class contributes its share of the test set
/// (largest-remainder rounding), so per-class counts are within one sample of
/// exact proportionality.
pub fn train_test_split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Usage(format!("test fraction {test_fraction} must be in (0, 1)")));
    }
    let n = dataset.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Usage(format!(
            "{n} samples are too few for a {test_fraction} split"
        )));
    }

    let classes = dataset.labels().iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let exact: Vec<f64> = by_class
        .iter()
        .map(|idx| idx.len() as f64 * n_test as f64 / n as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = n_test - quota.iter().sum::<usize>();
    for c in order {
        if remaining == 0 {
            break;
        }
        quota[c] += 1;
        remaining -= 1;
    }

    let mut rng = SplitMix64::new(seed);
    let mut test_idx = Vec::with_capacity(n_test);
    let mut train_idx = Vec::with_capacity(n - n_test);
    for (idx, q) in by_class.iter_mut().zip(quota) {
        rng.shuffle(idx);
        test_idx.extend_from_slice(&idx[..q]);
        train_idx.extend_from_slice(&idx[q..]);
    }
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n_spans: u32, dbm: f64, load: u32, modulation: Modulation) -> LightpathSample {
        LightpathSample {
            n_spans,
            launch_power_dbm: dbm,
            channel_load: load,
            modulation,
            domain_id: 0,
        }
    }

    #[test]
    fn long_low_power_qam16_fails() {
        assert_eq!(label_qot(&sample(30, -4.0, 1, Modulation::Qam16)).unwrap(), 0);
        assert_eq!(label_qot(&sample(30, -4.0, 96, Modulation::Qam16)).unwrap(), 0);
    }

    #[test]
    fn single_span_qpsk_passes() {
        // P = 1 mW, N = 0.05 + 0.01 * (1 + 0.5/96) = 0.0600520833...,
        // SNR = 10 log10(1 / N) = 12.2147192 dB >= 7.0
        let s = sample(1, 0.0, 1, Modulation::Qpsk);
        assert!((snr_db(&s) - 12.214_719_214_088_506).abs() < 1e-9);
        assert_eq!(label_qot(&s).unwrap(), 1);
    }

    #[test]
    fn labeller_rejects_out_of_range() {
        assert!(matches!(label_qot(&sample(0, 0.0, 1, Modulation::Qpsk)), Err(Error::Validation(_))));
        assert!(matches!(label_qot(&sample(31, 0.0, 1, Modulation::Qpsk)), Err(Error::Validation(_))));
        assert!(matches!(label_qot(&sample(1, 4.5, 1, Modulation::Qpsk)), Err(Error::Validation(_))));
        assert!(matches!(label_qot(&sample(1, 0.0, 97, Modulation::Qpsk)), Err(Error::Validation(_))));
    }

    #[test]
    fn domain_split_sizes() {
        assert_eq!(domain_sizes(35_216, 3), vec![11_739, 11_739, 11_738]);
        assert_eq!(domain_sizes(7, 7), vec![1; 7]);
    }

    #[test]
    fn generator_rejects_degenerate_requests() {
        assert!(generate_synthetic(2, 3, 0).is_err());
        assert!(generate_synthetic(10, 0, 0).is_err());
    }

    #[test]
    fn generated_domains_are_balanced_and_tagged() {
        let domains = generate_synthetic(3_001, 3, 5).unwrap();
        assert_eq!(domains.iter().map(Vec::len).collect::<Vec<_>>(), vec![1_001, 1_000, 1_000]);
        for (d, records) in domains.iter().enumerate() {
            assert!(records.iter().all(|r| r.sample.domain_id == d as u32));
            assert!(records.iter().all(|r| label_qot(&r.sample).unwrap() == r.label));
            let pos = records.iter().filter(|r| r.label == 1).count();
            assert_eq!(pos, records.len() / 2);
        }
    }

    #[test]
    fn domains_have_different_modulation_mix() {
        let domains = generate_synthetic(6_000, 3, 9).unwrap();
        let qpsk_share: Vec<f64> = domains
            .iter()
            .map(|d| {
                let neg: Vec<_> = d.iter().filter(|r| r.label == 0).collect();
                neg.iter().filter(|r| r.sample.modulation == Modulation::Qpsk).count() as f64 / neg.len() as f64
            })
            .collect();
        assert!(qpsk_share[0] > qpsk_share[1] + 0.1, "{qpsk_share:?}");
    }

    #[test]
    fn schema_width_and_hash_are_stable() {
        let schema = FeatureSchema::qot_default(3);
        assert_eq!(schema.encoded_width(), 9);
        let again = FeatureSchema::from_json(&schema.canonical_json()).unwrap();
        assert_eq!(again, schema);
        assert_eq!(again.hash(), schema.hash());
        assert_ne!(FeatureSchema::qot_default(4).hash(), schema.hash());
        assert!(!schema.canonical_json().contains(' '));
    }

    #[test]
    fn fnv1a_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn one_hot_layout() {
        let schema = FeatureSchema::qot_default(3);
        let records = vec![
            QotRecord { sample: sample(3, 1.0, 10, Modulation::Qpsk), label: 1 },
            QotRecord { sample: LightpathSample { domain_id: 2, ..sample(5, -1.0, 20, Modulation::Qam16) }, label: 0 },
        ];
        let (ds, _) = encode_and_normalize(&records, &schema, None).unwrap();
        assert_eq!(&ds.row(0)[3..6], &[1.0, 0.0, 0.0]);
        assert_eq!(&ds.row(0)[6..9], &[1.0, 0.0, 0.0]);
        assert_eq!(&ds.row(1)[3..6], &[0.0, 0.0, 1.0]);
        assert_eq!(&ds.row(1)[6..9], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_column_encodes_to_zero() {
        let schema = FeatureSchema::qot_default(1);
        let records: Vec<_> = (0..5)
            .map(|i| QotRecord { sample: sample(4, i as f64 * 0.5, 7, Modulation::Qam8), label: 0 })
            .collect();
        let (ds, stats) = encode_and_normalize(&records, &schema, None).unwrap();
        assert_eq!(stats.fields[0].sd, 0.0);
        assert!((0..5).all(|r| ds.row(r)[0] == 0.0 && ds.row(r)[2] == 0.0));
    }

    #[test]
    fn unknown_category_is_a_schema_error() {
        let schema = FeatureSchema::qot_default(2);
        let records = vec![QotRecord { sample: LightpathSample { domain_id: 2, ..sample(1, 0.0, 1, Modulation::Qpsk) }, label: 1 }];
        assert!(matches!(encode_and_normalize(&records, &schema, None), Err(Error::Schema(_))));
    }

    #[test]
    fn reencoded_training_columns_are_standardized() {
        let schema = FeatureSchema::qot_default(3);
        let records: Vec<_> = generate_synthetic(900, 3, 1).unwrap().into_iter().flatten().collect();
        let (ds, stats) = encode_and_normalize(&records, &schema, None).unwrap();
        let (again, _) = encode_and_normalize(&records, &schema, Some(&stats)).unwrap();
        assert_eq!(ds, again);
        for col in 0..3 {
            let xs: Vec<f64> = (0..ds.len()).map(|r| ds.row(r)[col]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            assert!(mean.abs() < 1e-9, "col {col} mean {mean}");
            assert!((sd - 1.0).abs() < 1e-9, "col {col} sd {sd}");
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let ds = Dataset::new((0..100).map(f64::from).collect(), 1, labels).unwrap();
        let (train, test) = train_test_split(&ds, 0.2, 3).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        assert_eq!(test.positive_fraction(), 0.5);
        let (train2, test2) = train_test_split(&ds, 0.2, 3).unwrap();
        assert_eq!((train, test), (train2, test2));
        assert!(train_test_split(&ds, 0.0, 3).is_err());
        assert!(train_test_split(&ds, 1.0, 3).is_err());
        let tiny = Dataset::new(vec![1.0], 1, vec![0]).unwrap();
        assert!(matches!(train_test_split(&tiny, 0.2, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn split_preserves_class_mix() {
        let labels: Vec<u8> = (0..997).map(|i| u8::from(i % 10 < 3)).collect();
        let ds = Dataset::new(vec![0.0; 997], 1, labels).unwrap();
        let (_, test) = train_test_split(&ds, 0.25, 17).unwrap();
        assert!((test.positive_fraction() - ds.positive_fraction()).abs() <= 0.02);
    }
}
