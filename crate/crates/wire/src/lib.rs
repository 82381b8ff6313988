//! Networked federated training: a framed message protocol, the training
//! coordinator node (TCN) and the edge contributor node (ECN) client.
//!
//! Frames run over any reliable byte stream. [`transport`] provides in-memory
//! pipes, plain TCP and TLS over TCP; all three carry identical bytes.

pub mod codec;
pub mod ecn;
pub mod error;
pub mod tcn;
pub mod tls;
pub mod transport;

pub use codec::{decode_frame, encode_frame, Message, MAX_FRAME_LEN, PROTOCOL_VERSION};
pub use ecn::{ecn_client, EcnConfig, EcnReport, EcnStatus};
pub use error::{Result, WireError};
pub use tcn::{tcn_serve, RoundReport, SessionState, TcnConfig, TcnOutcome};
pub use transport::{memory_network, Connector, Listener, TcpBinding, TcpConnector};
