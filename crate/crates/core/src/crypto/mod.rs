//! Cryptographic building blocks: P-256 keys and signatures, CI-issued
//! certificates, the certificate-authenticated key agreement, the KDF, and
//! the authenticated secure-channel sessions used on every remote link.
//!
//! Concrete schemes are pinned here so golden traces stay stable: P-256
//! for key agreement and (Schnorr) signatures, HKDF-style extract/expand on
//! HMAC-SHA256, and ChaCha20 + HMAC-SHA256 encrypt-then-MAC records. The
//! simulator implements the security contracts of the real protocols, not
//! their wire formats.

pub mod chacha;
pub mod channel;
pub mod ecka;
pub mod kdf;
pub mod keys;
pub mod p256;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum CryptoError {
    #[error("key scheme tag does not match the operation")]
    SchemeMismatch,
    #[error("input failed to decode")]
    Malformed,
    #[error("shared secret must be non-empty")]
    EmptySecret,
}

pub use channel::{ChannelError, ChannelRole, SecureChannelSession, SecureRecord};
pub use ecka::{CardEcka, DpEcka, EckaError, EckaMessage};
pub use kdf::{derive_key, KeyRole, SymmetricKey};
pub use keys::{
    generate_keypair, key_agreement, sign, verify, CertIssuer, Certificate, KeyPair, PrivateKey,
    PublicKey, Scheme, Signature,
};
