//! Byte-stream bindings: in-memory duplex pipes, plain TCP, TLS over TCP,
//! and a recording wrapper for traffic audits.

use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};
use std::time::Duration;

use rustls::pki_types::ServerName;
use rustls::{ClientConfig, ServerConfig};
use tokio::io::{AsyncRead, AsyncWrite, ReadBuf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio_rustls::{TlsAcceptor, TlsConnector};

use crate::error::{Result, WireError};

/// Any reliable, ordered, bidirectional byte stream.
pub trait ByteStream: AsyncRead + AsyncWrite + Unpin + Send {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send> ByteStream for T {}

pub type BoxStream = Box<dyn ByteStream>;

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

/// Server side of a binding.
pub trait Listener: Send + 'static {
    /// Waits for the next connection. Errors on a single connection (a failed
    /// TLS handshake, say) are returned and the listener stays usable.
    fn accept(&mut self) -> impl Future<Output = io::Result<BoxStream>> + Send;
}

/// Client side of a binding.
pub trait Connector: Send + Sync {
    fn connect(&self) -> impl Future<Output = io::Result<BoxStream>> + Send;
}

/// In-process listener fed by [`MemoryConnector`]s.
pub struct MemoryListener {
    rx: mpsc::Receiver<BoxStream>,
}

#[derive(Clone)]
pub struct MemoryConnector {
    tx: mpsc::Sender<BoxStream>,
}

const MEMORY_PIPE_BYTES: usize = 1 << 20;

pub fn memory_network() -> (MemoryListener, MemoryConnector) {
    let (tx, rx) = mpsc::channel(64);
    (MemoryListener { rx }, MemoryConnector { tx })
}

impl Listener for MemoryListener {
    async fn accept(&mut self) -> io::Result<BoxStream> {
        self.rx
            .recv()
            .await
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotConnected, "all memory connectors dropped"))
    }
}

impl Connector for MemoryConnector {
    async fn connect(&self) -> io::Result<BoxStream> {
        let (client, server) = tokio::io::duplex(MEMORY_PIPE_BYTES);
        self.tx
            .send(Box::new(server))
            .await
            .map_err(|_| io::Error::new(io::ErrorKind::ConnectionRefused, "memory listener is gone"))?;
        Ok(Box::new(client))
    }
}

/// TCP listener, optionally terminating TLS.
pub struct TcpBinding {
    listener: TcpListener,
    tls: Option<TlsAcceptor>,
}

impl TcpBinding {
    pub async fn bind(addr: &str, tls: Option<Arc<ServerConfig>>) -> io::Result<Self> {
        Ok(Self { listener: TcpListener::bind(addr).await?, tls: tls.map(TlsAcceptor::from) })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }
}

impl Listener for TcpBinding {
    async fn accept(&mut self) -> io::Result<BoxStream> {
        let (stream, peer) = self.listener.accept().await?;
        stream.set_nodelay(true)?;
        match &self.tls {
            None => Ok(Box::new(stream)),
            Some(acceptor) => {
                let tls = tokio::time::timeout(HANDSHAKE_TIMEOUT, acceptor.accept(stream))
                    .await
                    .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, format!("TLS handshake with {peer}")))??;
                Ok(Box::new(tls))
            }
        }
    }
}

/// Dials a `host:port` endpoint, optionally over TLS.
#[derive(Clone)]
pub struct TcpConnector {
    endpoint: String,
    tls: Option<(TlsConnector, ServerName<'static>)>,
}

impl TcpConnector {
    pub fn plain(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into(), tls: None }
    }

    /// The certificate must be valid for the endpoint's host part.
    pub fn tls(endpoint: impl Into<String>, config: Arc<ClientConfig>) -> Result<Self> {
        let endpoint = endpoint.into();
        let host = host_of(&endpoint)?;
        let name = ServerName::try_from(host.to_string())
            .map_err(|e| WireError::Tls(format!("`{host}` is not a valid server name: {e}")))?;
        Ok(Self { endpoint, tls: Some((TlsConnector::from(config), name)) })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn host_of(endpoint: &str) -> Result<&str> {
    let (host, port) = endpoint
        .rsplit_once(':')
        .ok_or_else(|| WireError::Protocol(format!("endpoint `{endpoint}` is not host:port")))?;
    if port.parse::<u16>().is_err() {
        return Err(WireError::Protocol(format!("endpoint `{endpoint}` has a bad port")));
    }
    Ok(host.trim_start_matches('[').trim_end_matches(']'))
}

impl Connector for TcpConnector {
    async fn connect(&self) -> io::Result<BoxStream> {
        let stream = TcpStream::connect(&self.endpoint).await?;
        stream.set_nodelay(true)?;
        match &self.tls {
            None => Ok(Box::new(stream)),
            Some((connector, name)) => {
                let tls = tokio::time::timeout(HANDSHAKE_TIMEOUT, connector.connect(name.clone(), stream))
                    .await
                    .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "TLS handshake"))??;
                Ok(Box::new(tls))
            }
        }
    }
}

/// Bytes seen on one connection, from the wrapped side's point of view.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub sent: Vec<u8>,
    pub received: Vec<u8>,
}

/// Stream wrapper that copies every byte read or written into a transcript.
pub struct Capture<S> {
    inner: S,
    log: Arc<Mutex<Transcript>>,
}

impl<S> Capture<S> {
    pub fn new(inner: S) -> (Self, Arc<Mutex<Transcript>>) {
        let log = Arc::new(Mutex::new(Transcript::default()));
        (Self { inner, log: log.clone() }, log)
    }
}

impl<S: AsyncRead + Unpin> AsyncRead for Capture<S> {
    fn poll_read(mut self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &mut ReadBuf<'_>) -> Poll<io::Result<()>> {
        let before = buf.filled().len();
        let this = &mut *self;
        let res = Pin::new(&mut this.inner).poll_read(cx, buf);
        if let Poll::Ready(Ok(())) = res {
            this.log.lock().expect("capture lock").received.extend_from_slice(&buf.filled()[before..]);
        }
        res
    }
}

impl<S: AsyncWrite + Unpin> AsyncWrite for Capture<S> {
    fn poll_write(mut self: Pin<&mut Self>, cx: &mut Context<'_>, data: &[u8]) -> Poll<io::Result<usize>> {
        let this = &mut *self;
        let res = Pin::new(&mut this.inner).poll_write(cx, data);
        if let Poll::Ready(Ok(n)) = res {
            this.log.lock().expect("capture lock").sent.extend_from_slice(&data[..n]);
        }
        res
    }

    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_flush(cx)
    }

    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_shutdown(cx)
    }
}

/// Connector that records every connection it opens.
pub struct CapturingConnector<C> {
    inner: C,
    logs: Mutex<Vec<Arc<Mutex<Transcript>>>>,
}

impl<C> CapturingConnector<C> {
    pub fn new(inner: C) -> Self {
        Self { inner, logs: Mutex::new(Vec::new()) }
    }

    /// One transcript per connection, in connection order.
    pub fn transcripts(&self) -> Vec<Transcript> {
        self.logs
            .lock()
            .expect("capture lock")
            .iter()
            .map(|t| t.lock().expect("capture lock").clone())
            .collect()
    }
}

impl<C: Connector> Connector for CapturingConnector<C> {
    async fn connect(&self) -> io::Result<BoxStream> {
        let stream = self.inner.connect().await?;
        let (wrapped, log) = Capture::new(stream);
        self.logs.lock().expect("capture lock").push(log);
        Ok(Box::new(wrapped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::io::{AsyncReadExt, AsyncWriteExt};

    #[test]
    fn endpoint_hosts() {
        assert_eq!(host_of("localhost:7000").unwrap(), "localhost");
        assert_eq!(host_of("[::1]:7000").unwrap(), "::1");
        assert!(host_of("localhost").is_err());
        assert!(host_of("localhost:http").is_err());
    }

    #[tokio::test]
    async fn memory_pipe_and_capture() {
        let (mut listener, connector) = memory_network();
        let capturing = CapturingConnector::new(connector);
        let mut client = capturing.connect().await.unwrap();
        let mut server = listener.accept().await.unwrap();
        client.write_all(b"ping").await.unwrap();
        let mut buf = [0u8; 4];
        server.read_exact(&mut buf).await.unwrap();
        server.write_all(b"pong").await.unwrap();
        client.read_exact(&mut buf).await.unwrap();
        assert_eq!(&buf, b"pong");
        let t = capturing.transcripts();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].sent, b"ping");
        assert_eq!(t[0].received, b"pong");
    }
}
