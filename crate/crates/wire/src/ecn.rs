//! Edge contributor node client.

use std::sync::Arc;
use std::time::Duration;

use tokio::io::AsyncWriteExt;

use fedqot_core::fedavg::{self, Hyperparams};
use fedqot_core::nn::{ModelSpec, ParameterVector};
use fedqot_core::{Dataset, Error as CoreError};

use crate::codec::{read_frame, write_frame, ErrorInfo, Hello, Message, TrainConfig, PROTOCOL_VERSION};
use crate::error::{Result, WireError};
use crate::transport::{BoxStream, Connector};

#[derive(Debug, Clone)]
pub struct EcnConfig {
    pub ecn_id: String,
    pub schema_hash: u64,
    /// Reconnections allowed after the link drops mid-training.
    pub reconnect_attempts: u32,
    pub reconnect_delay: Duration,
    /// How long to keep retrying the first connection while the TCN comes up.
    pub connect_patience: Duration,
}

impl EcnConfig {
    pub fn new(ecn_id: impl Into<String>, schema_hash: u64) -> Self {
        Self {
            ecn_id: ecn_id.into(),
            schema_hash,
            reconnect_attempts: 1,
            reconnect_delay: Duration::from_millis(200),
            connect_patience: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EcnStatus {
    Completed { final_accuracy: Option<f64> },
    Rejected { reason: String },
}

#[derive(Debug, Clone)]
pub struct EcnReport {
    pub status: EcnStatus,
    /// Rounds answered, in order (a round answered again after a reconnect
    /// appears twice).
    pub rounds: Vec<u32>,
    pub last_update: Option<ParameterVector>,
    pub reconnects: u32,
}

#[derive(Default)]
struct Progress {
    config: Option<TrainConfig>,
    rounds: Vec<u32>,
    last_update: Option<ParameterVector>,
    accepted_once: bool,
}

enum SessionEnd {
    Done(Option<f64>),
    Rejected(String),
}

async fn connect_with_patience<C: Connector>(connector: &C, patience: Duration) -> Result<BoxStream> {
    let start = tokio::time::Instant::now();
    loop {
        match connector.connect().await {
            Ok(s) => return Ok(s),
            Err(e) if start.elapsed() < patience => {
                log::debug!("connect failed ({e}); retrying");
                tokio::time::sleep(Duration::from_millis(100)).await;
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Joins a federation and trains until DONE. Only the sample count and
/// parameter blobs leave this function; `local_data` itself is never sent.
pub async fn ecn_client<C: Connector>(connector: &C, local_data: Arc<Dataset>, config: &EcnConfig) -> Result<EcnReport> {
    if local_data.is_empty() {
        return Err(CoreError::Usage("local dataset is empty".into()).into());
    }
    let mut progress = Progress::default();
    let mut reconnects = 0;
    let mut stream = connect_with_patience(connector, config.connect_patience).await?;
    loop {
        let end = run_session(stream, &local_data, config, &mut progress).await;
        match end {
            Ok(end) => {
                let status = match end {
                    SessionEnd::Done(final_accuracy) => EcnStatus::Completed { final_accuracy },
                    SessionEnd::Rejected(reason) => EcnStatus::Rejected { reason },
                };
                return Ok(EcnReport {
                    status,
                    rounds: progress.rounds,
                    last_update: progress.last_update,
                    reconnects,
                });
            }
            Err(e @ (WireError::Closed(_) | WireError::Io(_)))
                if progress.accepted_once && reconnects < config.reconnect_attempts =>
            {
                reconnects += 1;
                log::warn!("{}: connection lost ({e}); reconnecting", config.ecn_id);
                tokio::time::sleep(config.reconnect_delay).await;
                stream = connector.connect().await?;
            }
            Err(e) => return Err(e),
        }
    }
}

async fn fail<W: AsyncWriteExt + Unpin>(wr: &mut W, code: &str, err: WireError) -> WireError {
    let _ = write_frame(wr, &Message::Error(ErrorInfo::new(code, err.to_string()))).await;
    err
}

async fn run_session(
    mut stream: BoxStream,
    data: &Arc<Dataset>,
    config: &EcnConfig,
    progress: &mut Progress,
) -> Result<SessionEnd> {
    let hello = Hello {
        ecn_id: config.ecn_id.clone(),
        n_samples: data.len() as u64,
        schema_hash: config.schema_hash,
        protocol_version: PROTOCOL_VERSION,
    };
    write_frame(&mut stream, &Message::Hello(hello)).await?;
    let result = session_loop(&mut stream, data, progress).await;
    let _ = stream.shutdown().await;
    result
}

async fn session_loop(stream: &mut BoxStream, data: &Arc<Dataset>, progress: &mut Progress) -> Result<SessionEnd> {
    match read_frame(stream).await? {
        Some(Message::Eligible(e)) if e.accepted => progress.accepted_once = true,
        Some(Message::Eligible(e)) => return Ok(SessionEnd::Rejected(e.reason)),
        Some(Message::Error(info)) => return Err(WireError::Remote { code: info.code, detail: info.detail }),
        Some(other) => {
            let err = WireError::Protocol(format!("expected ELIGIBLE, got {}", other.name()));
            return Err(fail(stream, "out_of_state", err).await);
        }
        None => return Err(WireError::Closed("coordinator closed before answering HELLO".into())),
    }
    loop {
        let msg = match read_frame(stream).await {
            Ok(Some(msg)) => msg,
            Ok(None) => return Err(WireError::Closed("coordinator closed before DONE".into())),
            Err(e @ (WireError::Protocol(_) | WireError::Format(_))) => return Err(fail(stream, "protocol", e).await),
            Err(e) => return Err(e),
        };
        match msg {
            Message::TrainConfig(cfg) => {
                if let Err(e) = check_config(&cfg.model_spec, &cfg.hyperparams, data) {
                    return Err(fail(stream, "bad_config", e).await);
                }
                progress.config = Some(cfg);
            }
            Message::GlobalModel { round_index, params } => {
                let Some(cfg) = &progress.config else {
                    let err = WireError::Protocol("GLOBAL_MODEL before TRAIN_CONFIG".into());
                    return Err(fail(stream, "out_of_state", err).await);
                };
                if params.spec() != &cfg.model_spec {
                    let err = WireError::Protocol(format!(
                        "global model has spec {}, configured {}",
                        params.spec(),
                        cfg.model_spec
                    ));
                    return Err(fail(stream, "bad_model", err).await);
                }
                let n_samples = data.len() as u64;
                let (data, hp) = (data.clone(), cfg.hyperparams.clone());
                let update = tokio::task::spawn_blocking(move || fedavg::ecn_update(&data, &params, &hp, round_index))
                    .await
                    .map_err(|e| WireError::Aborted(format!("local training task failed: {e}")))?;
                let update = match update {
                    Ok(u) => u,
                    Err(e) => return Err(fail(stream, "local_training", e.into()).await),
                };
                let reply = Message::LocalUpdate { round_index, n_samples, params: update.clone() };
                write_frame(stream, &reply).await?;
                progress.rounds.push(round_index);
                progress.last_update = Some(update);
            }
            Message::Done(done) => return Ok(SessionEnd::Done(done.final_accuracy)),
            Message::Error(info) => return Err(WireError::Remote { code: info.code, detail: info.detail }),
            other => {
                let err = WireError::Protocol(format!("unexpected {}", other.name()));
                return Err(fail(stream, "out_of_state", err).await);
            }
        }
    }
}

fn check_config(spec: &ModelSpec, hp: &Hyperparams, data: &Dataset) -> Result<()> {
    hp.validate()?;
    if spec.input_dim() != data.width() {
        return Err(CoreError::Schema(format!(
            "model input {} does not match local data width {}",
            spec.input_dim(),
            data.width()
        ))
        .into());
    }
    Ok(())
}
