//! rustls configuration from PEM material. Uses the ring provider explicitly
//! so the process-wide default provider is never consulted.

use std::path::Path;
use std::sync::Arc;

use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer};
use rustls::{ClientConfig, RootCertStore, ServerConfig};

use crate::error::{Result, WireError};

fn provider() -> Arc<rustls::crypto::CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

fn certs(pem: &[u8]) -> Result<Vec<CertificateDer<'static>>> {
    let certs = CertificateDer::pem_slice_iter(pem)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| WireError::Tls(format!("bad certificate PEM: {e}")))?;
    if certs.is_empty() {
        return Err(WireError::Tls("no certificate found in PEM input".into()));
    }
    Ok(certs)
}

/// Server configuration from a certificate chain and its private key.
pub fn server_config_from_pem(cert_pem: &[u8], key_pem: &[u8]) -> Result<Arc<ServerConfig>> {
    let key = PrivateKeyDer::from_pem_slice(key_pem).map_err(|e| WireError::Tls(format!("bad private key PEM: {e}")))?;
    let config = ServerConfig::builder_with_provider(provider())
        .with_safe_default_protocol_versions()
        .map_err(|e| WireError::Tls(e.to_string()))?
        .with_no_client_auth()
        .with_single_cert(certs(cert_pem)?, key)
        .map_err(|e| WireError::Tls(e.to_string()))?;
    Ok(Arc::new(config))
}

/// Client configuration trusting exactly the given CA certificates.
pub fn client_config_from_pem(ca_pem: &[u8]) -> Result<Arc<ClientConfig>> {
    let mut roots = RootCertStore::empty();
    for cert in certs(ca_pem)? {
        roots.add(cert).map_err(|e| WireError::Tls(format!("unusable CA certificate: {e}")))?;
    }
    let config = ClientConfig::builder_with_provider(provider())
        .with_safe_default_protocol_versions()
        .map_err(|e| WireError::Tls(e.to_string()))?
        .with_root_certificates(roots)
        .with_no_client_auth();
    Ok(Arc::new(config))
}

pub fn server_config(cert_path: &Path, key_path: &Path) -> Result<Arc<ServerConfig>> {
    server_config_from_pem(&std::fs::read(cert_path)?, &std::fs::read(key_path)?)
}

pub fn client_config(ca_path: &Path) -> Result<Arc<ClientConfig>> {
    client_config_from_pem(&std::fs::read(ca_path)?)
}
