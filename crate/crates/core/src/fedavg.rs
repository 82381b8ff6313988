//! Federated averaging: local SGD on each contributor, sample-weighted
//! aggregation on the coordinator, and the round loop that ties them together.
//!
//! The in-process driver [`run_training`] and the pooled-data baseline
//! [`centralized_train`] share one epoch routine, so a single-partition
//! federation reproduces the centralized run exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{self, Batch, ModelSpec, ParameterVector};
use crate::rng::{epoch_seed, SplitMix64};

/// Training knobs shared by every contributor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Learning rate.
    pub eta: f64,
    /// Local passes over the data per round.
    pub local_epochs: u32,
    /// Rows per mini-batch; the last batch of an epoch may be smaller.
    pub batch_size: u32,
    pub rounds: u32,
    pub shuffle_seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            eta: 0.01,
            local_epochs: 2,
            batch_size: 64,
            rounds: 30,
            shuffle_seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Usage(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch_size must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Usage("rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// What a contributor announces about itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcnDescriptor {
    pub ecn_id: String,
    pub n_samples: u64,
    pub schema_hash: u64,
}

/// A contributor's model after local training, with its sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub ecn_id: String,
    pub params: ParameterVector,
    pub n_samples: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub params: ParameterVector,
    /// Mean of the batch losses seen during the update; `None` when no batch ran.
    pub mean_loss: Option<f64>,
}

/// Identifier the in-process driver gives partition `k`. Zero-padded so that
/// lexicographic order equals index order.
pub fn partition_id(k: usize) -> String {
    format!("ecn-{k:03}")
}

fn check_data(data: &Dataset, spec: &ModelSpec) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Usage("local dataset is empty".into()));
    }
    if data.width() != spec.input_dim() {
        return Err(Error::Schema(format!(
            "data width {} does not match model input {}",
            data.width(),
            spec.input_dim()
        )));
    }
    Ok(())
}

/// Runs mini-batch SGD over `data` for each `(round, epoch)` in `schedule`,
/// reshuffling before every epoch. Returns the summed batch loss and batch count.
fn run_epochs(
    params: &mut ParameterVector,
    data: &Dataset,
    hp: &Hyperparams,
    schedule: impl IntoIterator<Item = (u32, u32)>,
) -> Result<(f64, usize)> {
    let width = data.width();
    let mut order: Vec<usize> = Vec::with_capacity(data.len());
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut loss_sum = 0.0;
    let mut batches = 0;
    for (round, epoch) in schedule {
        order.clear();
        order.extend(0..data.len());
        SplitMix64::new(epoch_seed(hp.shuffle_seed, round, epoch)).shuffle(&mut order);
        for chunk in order.chunks(hp.batch_size as usize) {
            data.gather_into(chunk, &mut features, &mut labels);
            let batch = Batch::new(&features, &labels, width)?;
            let (loss, grad) = nn::loss_and_grad(params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss in round {round}, epoch {epoch}"
                )));
            }
            nn::apply_sgd(params, &grad, hp.eta)?;
            loss_sum += loss;
            batches += 1;
        }
    }
    Ok((loss_sum, batches))
}

/// One contributor's local training for `round_index`, reporting its mean batch loss.
pub fn local_training(
    local_data: &Dataset,
    global_params: &ParameterVector,
    hp: &Hyperparams,
    round_index: u32,
) -> Result<LocalResult> {
    check_data(local_data, global_params.spec())?;
    hp.validate()?;
    let mut params = global_params.clone();
    let schedule = (1..=hp.local_epochs).map(|epoch| (round_index, epoch));
    let (loss_sum, batches) = run_epochs(&mut params, local_data, hp, schedule)?;
    Ok(LocalResult {
        params,
        mean_loss: (batches > 0).then(|| loss_sum / batches as f64),
    })
}

/// `E` local epochs of SGD starting from `global_params`; the input is not modified.
pub fn ecn_update(
    local_data: &Dataset,
    global_params: &ParameterVector,
    hp: &Hyperparams,
    round_index: u32,
) -> Result<ParameterVector> {
    local_training(local_data, global_params, hp, round_index).map(|r| r.params)
}

/// Weighted average with weights `n_k / n`, where `n` sums over the given
/// updates. Terms are accumulated in ascending `ecn_id` order.
///
/// Computed as `w_1 + sum_k (n_k / n) (w_k - w_1)` over the remaining updates,
/// which is the same average but returns the input bits exactly when all
/// updates agree, whatever their weights.
pub fn aggregate(updates: &[LocalUpdate]) -> Result<ParameterVector> {
    let mut sorted: Vec<&LocalUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.ecn_id.cmp(&b.ecn_id));
    let first = sorted
        .first()
        .ok_or_else(|| Error::Aggregation("no updates to aggregate".into()))?;
    let spec = first.params.spec();
    for pair in sorted.windows(2) {
        if pair[0].ecn_id == pair[1].ecn_id {
            return Err(Error::Aggregation(format!("duplicate update from `{}`", pair[0].ecn_id)));
        }
    }
    if let Some(u) = sorted.iter().find(|u| u.params.spec() != spec) {
        return Err(Error::Schema(format!(
            "update from `{}` has spec {}, expected {spec}",
            u.ecn_id,
            u.params.spec()
        )));
    }
    if let Some(u) = sorted.iter().find(|u| u.n_samples == 0) {
        return Err(Error::Aggregation(format!("update from `{}` has zero samples", u.ecn_id)));
    }
    let total: u64 = sorted.iter().map(|u| u.n_samples).sum();
    let total = total as f64;

    let anchor = first.params.values();
    let mut shift = vec![0.0; anchor.len()];
    for u in &sorted[1..] {
        let weight = u.n_samples as f64 / total;
        for ((s, v), a) in shift.iter_mut().zip(u.params.values()).zip(anchor) {
            *s += weight * (v - a);
        }
    }
    let values = anchor.iter().zip(&shift).map(|(a, s)| a + s).collect();
    ParameterVector::new(spec.clone(), values)
}

/// How a round that closed with missing updates is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Weights `n_k / sum(n_j over received)`.
    #[default]
    RenormalizeReceived,
}

/// Coordinator-side bookkeeping of one aggregation round.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round_index: u32,
    pub global_params: ParameterVector,
    pub expected: BTreeSet<String>,
    pub received: BTreeMap<String, (ParameterVector, u64)>,
    pub deadline: Instant,
}

impl RoundState {
    pub fn new(
        round_index: u32,
        global_params: ParameterVector,
        expected: impl IntoIterator<Item = String>,
        deadline: Instant,
    ) -> Self {
        Self {
            round_index,
            global_params,
            expected: expected.into_iter().collect(),
            received: BTreeMap::new(),
            deadline,
        }
    }

    pub fn record(&mut self, ecn_id: &str, params: ParameterVector, n_samples: u64) -> Result<()> {
        if !self.expected.contains(ecn_id) {
            return Err(Error::Usage(format!(
                "round {}: `{ecn_id}` is not a participant",
                self.round_index
            )));
        }
        if self.received.contains_key(ecn_id) {
            return Err(Error::Usage(format!(
                "round {}: duplicate update from `{ecn_id}`",
                self.round_index
            )));
        }
        if params.spec() != self.global_params.spec() {
            return Err(Error::Schema(format!(
                "round {}: update from `{ecn_id}` has spec {}, expected {}",
                self.round_index,
                params.spec(),
                self.global_params.spec()
            )));
        }
        if n_samples == 0 {
            return Err(Error::Usage(format!("`{ecn_id}` reported zero samples")));
        }
        self.received.insert(ecn_id.to_string(), (params, n_samples));
        Ok(())
    }

    /// Stops waiting for an ECN that went away.
    pub fn forget(&mut self, ecn_id: &str) {
        if !self.received.contains_key(ecn_id) {
            self.expected.remove(ecn_id);
        }
    }

    pub fn is_complete(&self) -> bool {
        self.expected.iter().all(|id| self.received.contains_key(id))
    }

    pub fn can_close(&self, now: Instant) -> bool {
        self.is_complete() || now >= self.deadline
    }

    /// Expected participants that have not reported.
    pub fn missing(&self) -> Vec<String> {
        self.expected
            .iter()
            .filter(|id| !self.received.contains_key(*id))
            .cloned()
            .collect()
    }

    /// Aggregates the updates that arrived. An empty round fails and leaves the
    /// global model as it was.
    pub fn close(&self, weighting: Weighting) -> Result<ParameterVector> {
        let Weighting::RenormalizeReceived = weighting;
        if self.received.is_empty() {
            return Err(Error::RoundFailed {
                round: self.round_index,
                reason: "no updates received before the deadline".into(),
            });
        }
        let dropped = self.missing();
        if !dropped.is_empty() {
            log::warn!(
                "round {}: closing without {}",
                self.round_index,
                dropped.join(", ")
            );
        }
        let updates: Vec<LocalUpdate> = self
            .received
            .iter()
            .map(|(id, (params, n))| LocalUpdate {
                ecn_id: id.clone(),
                params: params.clone(),
                n_samples: *n,
            })
            .collect();
        aggregate(&updates)
    }
}

/// Free-function form of [`RoundState::close`].
pub fn close_round(state: &RoundState, weighting: Weighting) -> Result<ParameterVector> {
    state.close(weighting)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub mean_local_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub final_params: ParameterVector,
    pub history: Vec<RoundMetrics>,
}

/// Writes `round,mean_local_loss,eval_accuracy`; missing values are empty cells.
pub fn write_history_csv(history: &[RoundMetrics], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "round,mean_local_loss,eval_accuracy")?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    for m in history {
        writeln!(out, "{},{},{}", m.round, cell(m.mean_local_loss), cell(m.eval_accuracy))?;
    }
    Ok(())
}

/// The full federated loop in one process. Contributor `k` is
/// [`partition_id(k)`](partition_id); updates within a round run on the data-parallel
/// pool and are joined before aggregation.
pub fn run_training(
    partitions: &[Dataset],
    spec: &ModelSpec,
    hp: &Hyperparams,
    init_seed: u64,
    eval: Option<&Dataset>,
) -> Result<TrainingOutcome> {
    hp.validate()?;
    if partitions.is_empty() {
        return Err(Error::Usage("no partitions".into()));
    }
    for (k, p) in partitions.iter().enumerate() {
        check_data(p, spec).map_err(|e| match e {
            Error::Usage(m) => Error::Usage(format!("partition {k}: {m}")),
            other => other,
        })?;
    }

    let mut global = nn::init_params(spec, init_seed);
    let mut history = Vec::with_capacity(hp.rounds as usize);
    for round in 1..=hp.rounds {
        let results = exec::map_ordered(partitions, |data| local_training(data, &global, hp, round))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        let n_total: usize = partitions.iter().map(Dataset::len).sum();
        let mean_local_loss = results
            .iter()
            .zip(partitions)
            .map(|(r, p)| r.mean_loss.map(|l| l * p.len() as f64 / n_total as f64))
            .sum::<Option<f64>>();

        let updates: Vec<LocalUpdate> = results
            .into_iter()
            .zip(partitions)
            .enumerate()
            .map(|(k, (r, p))| LocalUpdate {
                ecn_id: partition_id(k),
                params: r.params,
                n_samples: p.len() as u64,
            })
            .collect();
        global = aggregate(&updates)?;

        let eval_accuracy = eval.map(|d| nn::evaluate_accuracy(&global, d)).transpose()?;
        log::debug!("round {round}: loss {mean_local_loss:?}, accuracy {eval_accuracy:?}");
        history.push(RoundMetrics {
            round,
            mean_local_loss,
            eval_accuracy,
        });
    }
    Ok(TrainingOutcome {
        final_params: global,
        history,
    })
}

/// Mini-batch SGD on pooled data for `rounds x local_epochs` epochs, shuffled
/// with the same per-(round, epoch) seeds the federated run uses.
pub fn centralized_train(
    pooled: &Dataset,
    spec: &ModelSpec,
    hp: &Hyperparams,
    init_seed: u64,
) -> Result<ParameterVector> {
    hp.validate()?;
    check_data(pooled, spec)?;
    let mut params = nn::init_params(spec, init_seed);
    let schedule = (1..=hp.rounds).flat_map(|round| (1..=hp.local_epochs).map(move |epoch| (round, epoch)));
    run_epochs(&mut params, pooled, hp, schedule)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn tiny_spec() -> ModelSpec {
        ModelSpec::new(1, vec![], 1).unwrap()
    }

    fn vector(values: &[f64]) -> ParameterVector {
        // 1-[]-1 has 2 parameters; reuse its layout for two-coordinate examples.
        ParameterVector::new(tiny_spec(), values.to_vec()).unwrap()
    }

    fn update(id: &str, values: &[f64], n: u64) -> LocalUpdate {
        LocalUpdate {
            ecn_id: id.into(),
            params: vector(values),
            n_samples: n,
        }
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = SplitMix64::new(seed);
        let features: Vec<f64> = (0..n * 3).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let labels = (0..n)
            .map(|i| u8::from(features[3 * i] + 0.5 * features[3 * i + 1] > 0.0))
            .collect();
        Dataset::new(features, 3, labels).unwrap()
    }

    #[test]
    fn aggregate_single_is_identity() {
        let u = update("a", &[0.1, -7.25], 17);
        assert!(aggregate(&[u.clone()]).unwrap().bits_eq(&u.params));
    }

    #[test]
    fn aggregate_weighted_example() {
        let out = aggregate(&[update("a", &[1.0, 3.0], 1), update("b", &[4.0, 0.0], 3)]).unwrap();
        assert_eq!(out.values(), &[3.25, 0.75]);
    }

    #[test]
    fn aggregate_equal_weights_is_mean() {
        let out = aggregate(&[
            update("a", &[3.0, 0.0], 5),
            update("b", &[6.0, 3.0], 5),
            update("c", &[0.0, 6.0], 5),
        ])
        .unwrap();
        for (o, e) in out.values().iter().zip([3.0, 3.0]) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(aggregate(&[]), Err(Error::Aggregation(_))));
        let other = LocalUpdate {
            ecn_id: "z".into(),
            params: ParameterVector::zeros(ModelSpec::new(2, vec![], 1).unwrap()),
            n_samples: 1,
        };
        assert!(matches!(aggregate(&[update("a", &[0.0, 0.0], 1), other]), Err(Error::Schema(_))));
        assert!(matches!(
            aggregate(&[update("a", &[0.0, 0.0], 1), update("a", &[1.0, 1.0], 1)]),
            Err(Error::Aggregation(_))
        ));
    }

    fn round_with(received: &[(&str, &[f64], u64)]) -> RoundState {
        let mut state = RoundState::new(
            4,
            vector(&[0.0, 0.0]),
            ["a", "b", "c"].map(String::from),
            Instant::now(),
        );
        for (id, v, n) in received {
            state.record(id, vector(v), *n).unwrap();
        }
        state
    }

    #[test]
    fn close_round_with_everyone_matches_aggregate() {
        let all = [("a", &[1.0, 2.0][..], 3), ("b", &[5.0, -1.0][..], 4), ("c", &[0.5, 0.5][..], 9)];
        let state = round_with(&all);
        assert!(state.is_complete());
        let expected = aggregate(&all.map(|(id, v, n)| update(id, v, n))).unwrap();
        assert!(close_round(&state, Weighting::RenormalizeReceived).unwrap().bits_eq(&expected));
    }

    #[test]
    fn close_round_with_one_update_returns_it() {
        let state = round_with(&[("b", &[5.0, -1.0], 4)]);
        assert_eq!(state.missing(), vec!["a".to_string(), "c".to_string()]);
        assert_eq!(state.close(Weighting::default()).unwrap().values(), &[5.0, -1.0]);
    }

    #[test]
    fn close_round_renormalizes_two_of_three() {
        let state = round_with(&[("a", &[1.0, 0.0], 10), ("c", &[0.0, 1.0], 30)]);
        assert_eq!(state.close(Weighting::default()).unwrap().values(), &[0.25, 0.75]);
    }

    #[test]
    fn empty_round_fails() {
        let state = round_with(&[]);
        assert!(state.can_close(Instant::now()));
        assert!(matches!(state.close(Weighting::default()), Err(Error::RoundFailed { round: 4, .. })));
    }

    #[test]
    fn round_state_rejects_strangers_and_duplicates() {
        let mut state = RoundState::new(1, vector(&[0.0, 0.0]), ["a".to_string()], Instant::now() + Duration::from_secs(60));
        assert!(!state.can_close(Instant::now()));
        assert!(state.record("x", vector(&[1.0, 1.0]), 1).is_err());
        state.record("a", vector(&[1.0, 1.0]), 1).unwrap();
        assert!(state.record("a", vector(&[1.0, 1.0]), 1).is_err());
        assert!(state.can_close(Instant::now()));
    }

    #[test]
    fn zero_epochs_or_zero_eta_leave_params_alone() {
        let data = toy_data(20, 1);
        let spec = ModelSpec::new(3, vec![4], 2).unwrap();
        let start = nn::init_params(&spec, 2);
        let hp = Hyperparams { local_epochs: 0, ..Hyperparams::default() };
        assert!(ecn_update(&data, &start, &hp, 1).unwrap().bits_eq(&start));
        let hp = Hyperparams { eta: 0.0, ..Hyperparams::default() };
        assert_eq!(ecn_update(&data, &start, &hp, 1).unwrap().values(), start.values());
    }

    #[test]
    fn ecn_update_rejects_bad_input() {
        let spec = ModelSpec::new(3, vec![4], 2).unwrap();
        let start = nn::init_params(&spec, 2);
        let empty = Dataset::new(vec![], 3, vec![]).unwrap();
        assert!(matches!(ecn_update(&empty, &start, &Hyperparams::default(), 1), Err(Error::Usage(_))));
        let narrow = Dataset::new(vec![1.0, 2.0], 2, vec![0]).unwrap();
        assert!(matches!(ecn_update(&narrow, &start, &Hyperparams::default(), 1), Err(Error::Schema(_))));
    }

    #[test]
    fn full_batch_single_epoch_is_one_gradient_step() {
        let data = toy_data(40, 3);
        let spec = ModelSpec::new(3, vec![5], 2).unwrap();
        let start = nn::init_params(&spec, 4);
        let hp = Hyperparams { local_epochs: 1, batch_size: 1000, eta: 0.3, ..Hyperparams::default() };
        let got = ecn_update(&data, &start, &hp, 1).unwrap();
        let (_, grad) = nn::loss_and_grad(&start, &Batch::from(&data)).unwrap();
        let expected = nn::sgd_step(&start, &grad, 0.3).unwrap();
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn ecn_update_does_not_touch_global() {
        let data = toy_data(30, 5);
        let spec = ModelSpec::new(3, vec![4], 2).unwrap();
        let global = nn::init_params(&spec, 6);
        let snapshot = global.clone();
        let out = ecn_update(&data, &global, &Hyperparams { eta: 0.5, ..Hyperparams::default() }, 2).unwrap();
        assert!(global.bits_eq(&snapshot));
        assert!(!out.bits_eq(&global));
    }

    #[test]
    fn rounds_zero_is_rejected() {
        let data = toy_data(10, 1);
        let spec = ModelSpec::new(3, vec![2], 2).unwrap();
        let hp = Hyperparams { rounds: 0, ..Hyperparams::default() };
        assert!(matches!(run_training(&[data.clone()], &spec, &hp, 0, None), Err(Error::Usage(_))));
        assert!(matches!(centralized_train(&data, &spec, &hp, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn one_round_no_epochs_returns_init() {
        let parts = vec![toy_data(10, 1), toy_data(12, 2), toy_data(7, 3)];
        let spec = ModelSpec::new(3, vec![2], 2).unwrap();
        let hp = Hyperparams { rounds: 1, local_epochs: 0, ..Hyperparams::default() };
        let out = run_training(&parts, &spec, &hp, 9, None).unwrap();
        assert!(out.final_params.bits_eq(&nn::init_params(&spec, 9)));
        assert_eq!(out.history[0].mean_local_loss, None);
    }

    #[test]
    fn empty_partition_is_rejected() {
        let spec = ModelSpec::new(3, vec![2], 2).unwrap();
        let empty = Dataset::new(vec![], 3, vec![]).unwrap();
        let err = run_training(&[toy_data(5, 1), empty], &spec, &Hyperparams::default(), 0, None).unwrap_err();
        assert!(matches!(err, Error::Usage(m) if m.contains("partition 1")));
    }

    #[test]
    fn centralized_is_deterministic() {
        let data = toy_data(50, 8);
        let spec = ModelSpec::new(3, vec![6], 2).unwrap();
        let hp = Hyperparams { rounds: 3, batch_size: 8, ..Hyperparams::default() };
        let a = centralized_train(&data, &spec, &hp, 1).unwrap();
        let b = centralized_train(&data, &spec, &hp, 1).unwrap();
        assert!(a.bits_eq(&b));
        let frozen = centralized_train(&data, &spec, &Hyperparams { eta: 0.0, ..hp }, 1).unwrap();
        assert_eq!(frozen.values(), nn::init_params(&spec, 1).values());
    }

    #[test]
    fn history_csv_layout() {
        let history = vec![
            RoundMetrics { round: 1, mean_local_loss: Some(0.5), eval_accuracy: None },
            RoundMetrics { round: 2, mean_local_loss: None, eval_accuracy: Some(1.0) },
        ];
        let mut buf = Vec::new();
        write_history_csv(&history, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "round,mean_local_loss,eval_accuracy");
        assert!(lines[1].starts_with("1,5.0") && lines[1].ends_with(','));
        assert!(lines[2].starts_with("2,,1.0"));
    }
}
