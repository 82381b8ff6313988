//! Training coordinator node.
//!
//! One task per connection runs the session state machine and talks to a
//! single coordinator over channels. The coordinator owns the registry and the
//! round state; sessions never touch training state directly.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use tokio::io::AsyncWriteExt;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinSet;
use tokio::time::Instant;

use fedqot_core::fedavg::{Hyperparams, RoundState, Weighting};
use fedqot_core::nn::{self, ModelSpec, ParameterVector};
use fedqot_core::{Dataset, Error as CoreError};

use crate::codec::{
    encode_frame, read_frame, write_frame, Done, Eligible, ErrorInfo, Hello, Message, TrainConfig, PROTOCOL_VERSION,
};
use crate::error::{Result, WireError};
use crate::transport::{BoxStream, Listener};

pub const DEFAULT_MIN_SAMPLES: u64 = 100;
pub const DEFAULT_ROUND_DEADLINE: Duration = Duration::from_secs(60);

#[derive(Debug, Clone)]
pub struct TcnConfig {
    /// Number of eligible ECNs to wait for before training starts.
    pub expected_ecns: usize,
    pub spec: ModelSpec,
    pub hyperparams: Hyperparams,
    pub init_seed: u64,
    /// Hash of the feature schema every ECN must share.
    pub schema_hash: u64,
    pub min_samples: u64,
    pub round_deadline: Duration,
    /// How long a fresh connection may take to send HELLO.
    pub hello_timeout: Duration,
    /// How often a round that closes with no updates is re-run before
    /// training aborts.
    pub round_retries: u32,
}

impl TcnConfig {
    pub fn new(expected_ecns: usize, spec: ModelSpec, hyperparams: Hyperparams, schema_hash: u64) -> Self {
        Self {
            expected_ecns,
            spec,
            hyperparams,
            init_seed: 0,
            schema_hash,
            min_samples: DEFAULT_MIN_SAMPLES,
            round_deadline: DEFAULT_ROUND_DEADLINE,
            hello_timeout: Duration::from_secs(30),
            round_retries: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.expected_ecns == 0 {
            return Err(CoreError::Usage("the TCN must expect at least one ECN".into()).into());
        }
        self.hyperparams.validate()?;
        Ok(())
    }
}

/// Per-connection protocol state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    AwaitingHello,
    Eligible,
    Configured,
    InRound(u32),
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u32,
    /// 1 unless the round had to be re-run.
    pub attempts: u32,
    /// `(ecn_id, n_samples)` of the updates that were aggregated, by id.
    pub participants: Vec<(String, u64)>,
    pub dropped: Vec<String>,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TcnOutcome {
    pub final_params: ParameterVector,
    pub rounds: Vec<RoundReport>,
    pub final_accuracy: Option<f64>,
    /// Final session state of every registered ECN.
    pub sessions: BTreeMap<String, SessionState>,
    /// `(ecn_id, reason)` for every refused HELLO.
    pub rejected: Vec<(String, String)>,
}

/// Eligibility policy: protocol version, schema and minimum data size.
pub fn check_eligibility(hello: &Hello, config: &TcnConfig) -> Result<(), String> {
    if hello.protocol_version != PROTOCOL_VERSION {
        return Err(format!(
            "protocol version {} not supported (expected {PROTOCOL_VERSION})",
            hello.protocol_version
        ));
    }
    if hello.ecn_id.is_empty() {
        return Err("empty ecn_id".into());
    }
    if hello.schema_hash != config.schema_hash {
        return Err(format!(
            "schema hash {:016x} does not match {:016x}",
            hello.schema_hash, config.schema_hash
        ));
    }
    if hello.n_samples < config.min_samples {
        return Err(format!("{} samples is below the minimum of {}", hello.n_samples, config.min_samples));
    }
    Ok(())
}

enum Event {
    Hello {
        session: u64,
        hello: Hello,
        commands: mpsc::UnboundedSender<Command>,
        reply: oneshot::Sender<Eligible>,
    },
    Update {
        session: u64,
        round: u32,
        n_samples: u64,
        params: ParameterVector,
    },
    Gone {
        session: u64,
        state: SessionState,
    },
}

/// Coordinator to session. Frames are encoded once and shared.
enum Command {
    Config(Arc<[u8]>),
    Global { round: u32, frame: Arc<[u8]> },
    /// DONE or ERROR; the session closes after sending it.
    Finish { frame: Arc<[u8]>, success: bool },
}

async fn send_error(wr: &mut (impl AsyncWriteExt + Unpin), code: &str, detail: String) {
    log::warn!("closing session: {code}: {detail}");
    let _ = write_frame(wr, &Message::Error(ErrorInfo::new(code, detail))).await;
}

async fn run_session(session: u64, stream: BoxStream, events: mpsc::UnboundedSender<Event>, hello_timeout: Duration) {
    let (rd, mut wr) = tokio::io::split(stream);
    let state = drive_session(session, rd, &mut wr, &events, hello_timeout).await;
    let _ = wr.shutdown().await;
    let _ = events.send(Event::Gone { session, state });
}

async fn drive_session(
    session: u64,
    mut rd: tokio::io::ReadHalf<BoxStream>,
    wr: &mut tokio::io::WriteHalf<BoxStream>,
    events: &mpsc::UnboundedSender<Event>,
    hello_timeout: Duration,
) -> SessionState {
    let hello = match tokio::time::timeout(hello_timeout, read_frame(&mut rd)).await {
        Ok(Ok(Some(Message::Hello(h)))) => h,
        Ok(Ok(Some(other))) => {
            send_error(wr, "out_of_state", format!("expected HELLO, got {}", other.name())).await;
            return SessionState::Failed;
        }
        Ok(Ok(None)) => return SessionState::Failed,
        Ok(Err(e)) => {
            send_error(wr, "protocol", e.to_string()).await;
            return SessionState::Failed;
        }
        Err(_) => {
            send_error(wr, "timeout", "no HELLO received".into()).await;
            return SessionState::Failed;
        }
    };
    let ecn_id = hello.ecn_id.clone();
    let (cmd_tx, mut commands) = mpsc::unbounded_channel();
    let (reply_tx, reply_rx) = oneshot::channel();
    if events.send(Event::Hello { session, hello, commands: cmd_tx, reply: reply_tx }).is_err() {
        return SessionState::Failed;
    }
    let Ok(verdict) = reply_rx.await else { return SessionState::Failed };
    let accepted = verdict.accepted;
    if write_frame(wr, &Message::Eligible(verdict)).await.is_err() || !accepted {
        return SessionState::Failed;
    }

    // Reads happen on their own task so a half-received frame is never lost
    // to a `select!` branch being cancelled.
    let (in_tx, mut inbound) = mpsc::unbounded_channel();
    let reader = tokio::spawn(async move {
        loop {
            let frame = read_frame(&mut rd).await;
            let more = matches!(frame, Ok(Some(_)));
            if in_tx.send(frame).is_err() || !more {
                break;
            }
        }
    });

    let mut state = SessionState::Eligible;
    let mut answered = false;
    let end = loop {
        tokio::select! {
            cmd = commands.recv() => {
                let Some(cmd) = cmd else { break SessionState::Failed };
                let (frame, next) = match cmd {
                    Command::Config(frame) => (frame, SessionState::Configured),
                    Command::Global { round, frame } => {
                        answered = false;
                        (frame, SessionState::InRound(round))
                    }
                    Command::Finish { frame, success } => {
                        let _ = wr.write_all(&frame).await;
                        let _ = wr.flush().await;
                        break if success { SessionState::Done } else { SessionState::Failed };
                    }
                };
                if wr.write_all(&frame).await.is_err() || wr.flush().await.is_err() {
                    break SessionState::Failed;
                }
                state = next;
            }
            msg = inbound.recv() => match msg {
                Some(Ok(Some(Message::LocalUpdate { round_index, n_samples, params }))) => match state {
                    SessionState::InRound(t) if round_index == t && !answered => {
                        answered = true;
                        let _ = events.send(Event::Update { session, round: t, n_samples, params });
                    }
                    SessionState::InRound(t) if round_index < t || (round_index == t && answered) => {
                        log::warn!("{ecn_id}: ignoring stale update for round {round_index} during round {t}");
                    }
                    _ => {
                        send_error(wr, "out_of_state", format!("LOCAL_UPDATE for round {round_index} in state {state:?}")).await;
                        break SessionState::Failed;
                    }
                },
                Some(Ok(Some(Message::Error(info)))) => {
                    log::warn!("{ecn_id} reported {}: {}", info.code, info.detail);
                    break SessionState::Failed;
                }
                Some(Ok(Some(other))) => {
                    send_error(wr, "out_of_state", format!("unexpected {} in state {state:?}", other.name())).await;
                    break SessionState::Failed;
                }
                Some(Err(e)) => {
                    send_error(wr, "protocol", e.to_string()).await;
                    break SessionState::Failed;
                }
                Some(Ok(None)) | None => {
                    log::info!("{ecn_id} disconnected in state {state:?}");
                    break SessionState::Failed;
                }
            }
        }
    };
    reader.abort();
    end
}

struct Member {
    session: u64,
    n_samples: u64,
    commands: Option<mpsc::UnboundedSender<Command>>,
}

impl Member {
    fn live(&self) -> bool {
        self.commands.is_some()
    }

    fn send(&self, cmd: Command) {
        if let Some(tx) = &self.commands {
            let _ = tx.send(cmd);
        }
    }
}

struct Coordinator {
    config: TcnConfig,
    events: mpsc::UnboundedReceiver<Event>,
    members: BTreeMap<String, Member>,
    by_session: HashMap<u64, String>,
    sessions: BTreeMap<String, SessionState>,
    rejected: Vec<(String, String)>,
    config_frame: Arc<[u8]>,
    training: bool,
}

/// Where training currently stands, for bringing a reconnecting ECN up to date.
struct Progress<'a> {
    round: u32,
    frame: &'a Arc<[u8]>,
}

impl Coordinator {
    fn live_count(&self) -> usize {
        self.members.values().filter(|m| m.live()).count()
    }

    fn reject(&mut self, id: String, reply: oneshot::Sender<Eligible>, reason: String) {
        log::warn!("rejecting `{id}`: {reason}");
        let _ = reply.send(Eligible { accepted: false, reason: reason.clone() });
        self.rejected.push((id, reason));
    }

    /// Handles a HELLO. Returns the id when the ECN (re)joined.
    fn on_hello(
        &mut self,
        session: u64,
        hello: Hello,
        commands: mpsc::UnboundedSender<Command>,
        reply: oneshot::Sender<Eligible>,
        progress: Option<Progress<'_>>,
    ) -> Option<String> {
        let id = hello.ecn_id.clone();
        if let Err(reason) = check_eligibility(&hello, &self.config) {
            self.reject(id, reply, reason);
            return None;
        }
        match self.members.get(&id) {
            Some(m) if m.live() => {
                self.reject(id, reply, "an ECN with this id is already connected".into());
                return None;
            }
            Some(m) if m.n_samples != hello.n_samples => {
                let reason = format!("rejoined with {} samples, registered with {}", hello.n_samples, m.n_samples);
                self.reject(id, reply, reason);
                return None;
            }
            None if self.training => {
                self.reject(id, reply, "training already started".into());
                return None;
            }
            None if self.members.len() >= self.config.expected_ecns => {
                self.reject(id, reply, "federation is full".into());
                return None;
            }
            _ => {}
        }
        if reply.send(Eligible { accepted: true, reason: String::new() }).is_err() {
            return None;
        }
        if self.training {
            log::info!("`{id}` resumed");
            let _ = commands.send(Command::Config(self.config_frame.clone()));
            if let Some(p) = progress {
                let _ = commands.send(Command::Global { round: p.round, frame: p.frame.clone() });
            }
        } else {
            log::info!("`{id}` registered with {} samples", hello.n_samples);
        }
        self.by_session.insert(session, id.clone());
        self.members.insert(id.clone(), Member { session, n_samples: hello.n_samples, commands: Some(commands) });
        Some(id)
    }

    /// Marks a session closed. Returns the id of the ECN it served.
    fn on_gone(&mut self, session: u64, state: SessionState) -> Option<String> {
        let id = self.by_session.remove(&session)?;
        self.sessions.insert(id.clone(), state);
        let member = self.members.get_mut(&id)?;
        if member.session == session {
            member.commands = None;
            if !self.training {
                self.members.remove(&id);
            }
        }
        Some(id)
    }

    fn id_of(&self, session: u64) -> Option<&String> {
        self.by_session.get(&session)
    }

    async fn register(&mut self) -> Result<()> {
        while self.live_count() < self.config.expected_ecns {
            let Some(ev) = self.events.recv().await else {
                return Err(WireError::Aborted("listener stopped during registration".into()));
            };
            match ev {
                Event::Hello { session, hello, commands, reply } => {
                    self.on_hello(session, hello, commands, reply, None);
                }
                Event::Gone { session, state } => {
                    if let Some(id) = self.on_gone(session, state) {
                        log::warn!("`{id}` left before training started");
                    }
                }
                Event::Update { session, .. } => {
                    log::warn!("session {session}: update before training started");
                }
            }
        }
        Ok(())
    }

    fn broadcast(&self, make: impl Fn() -> Command) {
        for m in self.members.values() {
            m.send(make());
        }
    }

    /// Runs one attempt of round `t`. Returns the round state at close.
    async fn collect(&mut self, t: u32, global: &ParameterVector) -> RoundState {
        let frame: Arc<[u8]> = encode_frame(&Message::GlobalModel { round_index: t, params: global.clone() }).into();
        self.broadcast(|| Command::Global { round: t, frame: frame.clone() });
        let expected: Vec<String> = self.members.iter().filter(|(_, m)| m.live()).map(|(id, _)| id.clone()).collect();
        let deadline = Instant::now() + self.config.round_deadline;
        let mut state = RoundState::new(t, global.clone(), expected, deadline.into_std());
        loop {
            if state.is_complete() && !state.expected.is_empty() {
                break;
            }
            let ev = match tokio::time::timeout_at(deadline, self.events.recv()).await {
                Err(_) | Ok(None) => break,
                Ok(Some(ev)) => ev,
            };
            match ev {
                Event::Update { session, round, n_samples, params } => {
                    let Some(id) = self.id_of(session).cloned() else { continue };
                    if round != t {
                        log::warn!("`{id}`: ignoring update for round {round} during round {t}");
                        continue;
                    }
                    let registered = self.members[&id].n_samples;
                    let verdict = if n_samples != registered {
                        Err(format!("update claims {n_samples} samples, registered {registered}"))
                    } else {
                        state.record(&id, params, n_samples).map_err(|e| e.to_string())
                    };
                    if let Err(reason) = verdict {
                        log::warn!("`{id}`: dropping update: {reason}");
                        let frame = encode_frame(&Message::Error(ErrorInfo::new("bad_update", reason)));
                        self.members[&id].send(Command::Finish { frame: frame.into(), success: false });
                        state.forget(&id);
                    }
                }
                Event::Gone { session, state: s } => {
                    // The ECN stays expected until the deadline so it can
                    // reconnect and still answer this round.
                    if let Some(id) = self.on_gone(session, s) {
                        log::warn!("`{id}` disconnected during round {t}");
                    }
                }
                Event::Hello { session, hello, commands, reply } => {
                    let progress = Progress { round: t, frame: &frame };
                    if let Some(id) = self.on_hello(session, hello, commands, reply, Some(progress)) {
                        state.expected.insert(id);
                    }
                }
            }
        }
        state
    }

    /// Sends a final frame to every live session and waits for them to close.
    async fn finish(&mut self, msg: Message, success: bool) {
        let frame: Arc<[u8]> = encode_frame(&msg).into();
        self.broadcast(|| Command::Finish { frame: frame.clone(), success });
        let drain = async {
            while !self.by_session.is_empty() {
                match self.events.recv().await {
                    Some(Event::Gone { session, state }) => {
                        self.on_gone(session, state);
                    }
                    Some(Event::Hello { reply, hello, .. }) => {
                        self.reject(hello.ecn_id, reply, "training is over".into());
                    }
                    Some(Event::Update { .. }) => {}
                    None => break,
                }
            }
        };
        if tokio::time::timeout(Duration::from_secs(10), drain).await.is_err() {
            log::warn!("some sessions did not close after the final message");
        }
    }
}

async fn evaluate(params: &ParameterVector, eval: Option<&Arc<Dataset>>) -> Result<Option<f64>> {
    let Some(data) = eval else { return Ok(None) };
    let (params, data) = (params.clone(), data.clone());
    let acc = tokio::task::spawn_blocking(move || nn::evaluate_accuracy(&params, &data))
        .await
        .map_err(|e| WireError::Aborted(format!("evaluation task failed: {e}")))??;
    Ok(Some(acc))
}

/// Runs the coordinator until training completes or aborts.
///
/// Waits for `expected_ecns` eligible ECNs, sends them the training
/// configuration, then runs every round: broadcast the global model, collect
/// updates until all live ECNs answered or the deadline passed, aggregate over
/// what arrived. A round with no updates is re-run up to `round_retries`
/// times before training aborts. Ends with DONE carrying the accuracy on
/// `eval`, when given.
pub async fn tcn_serve<L: Listener>(mut listener: L, config: TcnConfig, eval: Option<Arc<Dataset>>) -> Result<TcnOutcome> {
    config.validate()?;
    if let Some(data) = &eval {
        if data.width() != config.spec.input_dim() {
            return Err(CoreError::Schema(format!(
                "evaluation data width {} does not match model input {}",
                data.width(),
                config.spec.input_dim()
            ))
            .into());
        }
    }
    let (event_tx, events) = mpsc::unbounded_channel();
    let hello_timeout = config.hello_timeout;
    let acceptor = tokio::spawn(async move {
        let mut sessions = JoinSet::new();
        let mut next_session = 0u64;
        loop {
            tokio::select! {
                conn = listener.accept() => match conn {
                    Ok(stream) => {
                        next_session += 1;
                        sessions.spawn(run_session(next_session, stream, event_tx.clone(), hello_timeout));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::NotConnected => break,
                    Err(e) => log::warn!("accept failed: {e}"),
                },
                Some(_) = sessions.join_next(), if !sessions.is_empty() => {}
            }
        }
        while sessions.join_next().await.is_some() {}
    });

    let config_frame: Arc<[u8]> = encode_frame(&Message::TrainConfig(TrainConfig {
        model_spec: config.spec.clone(),
        hyperparams: config.hyperparams.clone(),
    }))
    .into();
    let mut coord = Coordinator {
        config,
        events,
        members: BTreeMap::new(),
        by_session: HashMap::new(),
        sessions: BTreeMap::new(),
        rejected: Vec::new(),
        config_frame,
        training: false,
    };
    let result = train(&mut coord, eval.as_ref()).await;
    acceptor.abort();
    result
}

async fn train(coord: &mut Coordinator, eval: Option<&Arc<Dataset>>) -> Result<TcnOutcome> {
    coord.register().await?;
    coord.training = true;
    log::info!("{} ECNs registered; starting training", coord.members.len());
    let frame = coord.config_frame.clone();
    coord.broadcast(|| Command::Config(frame.clone()));

    let mut global = nn::init_params(&coord.config.spec, coord.config.init_seed);
    let mut rounds = Vec::new();
    for t in 1..=coord.config.hyperparams.rounds {
        let mut attempts = 0;
        let state = loop {
            attempts += 1;
            let state = coord.collect(t, &global).await;
            if !state.received.is_empty() {
                break state;
            }
            if attempts > coord.config.round_retries {
                let reason = format!("round {t} received no updates in {attempts} attempts");
                coord.finish(Message::Error(ErrorInfo::new("aborted", reason.clone())), false).await;
                return Err(WireError::Aborted(reason));
            }
            log::warn!("round {t} received no updates; retrying");
        };
        global = state.close(Weighting::RenormalizeReceived)?;
        let eval_accuracy = evaluate(&global, eval).await?;
        let report = RoundReport {
            round: t,
            attempts,
            participants: state.received.iter().map(|(id, (_, n))| (id.clone(), *n)).collect(),
            dropped: state.missing(),
            eval_accuracy,
        };
        log::info!(
            "round {t}: {} updates, {} dropped{}",
            report.participants.len(),
            report.dropped.len(),
            eval_accuracy.map(|a| format!(", accuracy {:.2}%", 100.0 * a)).unwrap_or_default()
        );
        rounds.push(report);
    }
    let final_accuracy = rounds.last().and_then(|r| r.eval_accuracy);
    coord.finish(Message::Done(Done { final_accuracy }), true).await;
    Ok(TcnOutcome {
        final_params: global,
        rounds,
        final_accuracy,
        sessions: std::mem::take(&mut coord.sessions),
        rejected: std::mem::take(&mut coord.rejected),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> TcnConfig {
        TcnConfig::new(2, ModelSpec::new(2, vec![2], 2).unwrap(), Hyperparams::default(), 0xabc)
    }

    fn hello(id: &str, n: u64, hash: u64) -> Hello {
        Hello { ecn_id: id.into(), n_samples: n, schema_hash: hash, protocol_version: PROTOCOL_VERSION }
    }

    #[test]
    fn eligibility_policy() {
        let c = config();
        assert!(check_eligibility(&hello("a", 100, 0xabc), &c).is_ok());
        assert!(check_eligibility(&hello("a", 99, 0xabc), &c).unwrap_err().contains("minimum"));
        assert!(check_eligibility(&hello("a", 500, 0xabd), &c).unwrap_err().contains("schema"));
        assert!(check_eligibility(&hello("", 500, 0xabc), &c).is_err());
        let mut old = hello("a", 500, 0xabc);
        old.protocol_version = 0;
        assert!(check_eligibility(&old, &c).unwrap_err().contains("protocol"));
    }
}
