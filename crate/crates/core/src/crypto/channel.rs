//! Authenticated secure-channel sessions.
//!
//! The simulator models the transport-security contract of the remote
//! links (confidentiality, integrity, anti-replay) rather than any
//! standardised packet format. A record is ChaCha20-encrypted and then
//! MACed with HMAC-SHA256 over `version ‖ counter ‖ aad ‖ ciphertext`;
//! per-direction subkeys are derived from the channel key so the two
//! directions can never collide on a nonce.
//!
//! Record wire layout (the simulator's transport contract):
//!
//! ```text
//! version octet ‖ 8-octet big-endian counter ‖ ciphertext ‖ 32-octet tag
//! ```
//!
//! The version octet identifies the logical channel a record belongs to:
//! `01` card ↔ SM-SR (k80), `02` SM-DP → ISD-P installation, `03` MNO ↔
//! its profile's MNO-SD. Version `7f` is an unprotected transport NACK
//! carrying a bare status response (emitted when a card cannot
//! authenticate an inbound record at all).
//!
//! Sessions are single-owner: using one session object from two contexts
//! concurrently would race the counters and break the replay window.

use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use thiserror::Error;

use super::chacha;
use super::kdf::{hkdf_expand, hkdf_extract, SymmetricKey};

pub mod version {
    /// Card ↔ serving SM-SR transport (keyed k80).
    pub const OTA: u8 = 0x01;
    /// SM-DP → ISD-P profile installation (keyed with the Profile
    /// Management Credentials).
    pub const PROFILE_INSTALL: u8 = 0x02;
    /// MNO ↔ MNO-SD inside its profile.
    pub const MNO_PROFILE: u8 = 0x03;
    /// Unprotected transport NACK (body is a bare status response).
    pub const NACK: u8 = 0x7F;
}

pub const TAG_LEN: usize = 32;
const HEADER_LEN: usize = 9;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum ChannelError {
    #[error("record failed authentication")]
    TamperDetected,
    #[error("record counter was already accepted")]
    ReplayDetected,
    #[error("send counter exhausted")]
    CounterExhausted,
    #[error("record shorter than the minimal frame")]
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecureRecord {
    pub version: u8,
    pub counter: u64,
    #[serde(with = "crate::serde_hex")]
    pub body: Vec<u8>,
}

impl SecureRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len());
        out.push(self.version);
        out.extend_from_slice(&self.counter.to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ChannelError> {
        if bytes.len() < HEADER_LEN {
            return Err(ChannelError::Truncated);
        }
        Ok(SecureRecord {
            version: bytes[0],
            counter: u64::from_be_bytes(bytes[1..9].try_into().unwrap()),
            body: bytes[9..].to_vec(),
        })
    }

    /// Builds the unprotected transport NACK for a status response.
    pub fn nack(response_bytes: Vec<u8>) -> Self {
        SecureRecord {
            version: version::NACK,
            counter: 0,
            body: response_bytes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelRole {
    Initiator,
    Responder,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecureChannelSession {
    pub peer_identity: String,
    version: u8,
    role: ChannelRole,
    send_counter: u64,
    recv_counter: u64,
    send_enc: [u8; 32],
    send_mac: [u8; 32],
    recv_enc: [u8; 32],
    recv_mac: [u8; 32],
}

fn subkey(prk: &[u8; 32], label: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    out.copy_from_slice(&hkdf_expand(prk, label.as_bytes(), 32));
    out
}

impl SecureChannelSession {
    pub fn new(key: &SymmetricKey, version: u8, role: ChannelRole, peer: &str) -> Self {
        let prk = hkdf_extract(b"euicc-sim/channel/v1", &key.bytes);
        let enc_i2r = subkey(&prk, "enc i2r");
        let mac_i2r = subkey(&prk, "mac i2r");
        let enc_r2i = subkey(&prk, "enc r2i");
        let mac_r2i = subkey(&prk, "mac r2i");
        let (send_enc, send_mac, recv_enc, recv_mac) = match role {
            ChannelRole::Initiator => (enc_i2r, mac_i2r, enc_r2i, mac_r2i),
            ChannelRole::Responder => (enc_r2i, mac_r2i, enc_i2r, mac_i2r),
        };
        Self {
            peer_identity: peer.to_string(),
            version,
            role,
            send_counter: 0,
            recv_counter: 0,
            send_enc,
            send_mac,
            recv_enc,
            recv_mac,
        }
    }

    pub fn initiator(key: &SymmetricKey, version: u8, peer: &str) -> Self {
        Self::new(key, version, ChannelRole::Initiator, peer)
    }

    pub fn responder(key: &SymmetricKey, version: u8, peer: &str) -> Self {
        Self::new(key, version, ChannelRole::Responder, peer)
    }

    pub fn version(&self) -> u8 {
        self.version
    }

    fn mac_input(version: u8, counter: u64, aad: &[u8], ciphertext: &[u8]) -> Vec<u8> {
        let mut input = Vec::with_capacity(1 + 8 + 4 + aad.len() + ciphertext.len());
        input.push(version);
        input.extend_from_slice(&counter.to_be_bytes());
        input.extend_from_slice(&(aad.len() as u32).to_be_bytes());
        input.extend_from_slice(aad);
        input.extend_from_slice(ciphertext);
        input
    }

    /// Encrypts and authenticates `plaintext`; the counter advances by
    /// exactly one per produced record.
    pub fn wrap(&mut self, plaintext: &[u8], aad: &[u8]) -> Result<SecureRecord, ChannelError> {
        let counter = self
            .send_counter
            .checked_add(1)
            .ok_or(ChannelError::CounterExhausted)?;
        let mut body = plaintext.to_vec();
        chacha::xor_keystream(&self.send_enc, counter, &mut body);
        let tag = super::kdf::hmac_sha256(
            &self.send_mac,
            &Self::mac_input(self.version, counter, aad, &body),
        );
        body.extend_from_slice(&tag);
        self.send_counter = counter;
        Ok(SecureRecord {
            version: self.version,
            counter,
            body,
        })
    }

    /// Authenticates and decrypts a record. The tag is checked before the
    /// replay window so a forged counter can never masquerade as a replay.
    /// Accepted counters must strictly increase; in-order traffic advances
    /// them by exactly one.
    pub fn unwrap(&mut self, record: &SecureRecord, aad: &[u8]) -> Result<Vec<u8>, ChannelError> {
        if record.version != self.version || record.body.len() < TAG_LEN {
            return Err(ChannelError::TamperDetected);
        }
        let split = record.body.len() - TAG_LEN;
        let (ciphertext, tag) = record.body.split_at(split);
        let expected = super::kdf::hmac_sha256(
            &self.recv_mac,
            &Self::mac_input(record.version, record.counter, aad, ciphertext),
        );
        if expected.ct_eq(tag).unwrap_u8() != 1 {
            return Err(ChannelError::TamperDetected);
        }
        if record.counter <= self.recv_counter {
            return Err(ChannelError::ReplayDetected);
        }
        let mut plaintext = ciphertext.to_vec();
        chacha::xor_keystream(&self.recv_enc, record.counter, &mut plaintext);
        self.recv_counter = record.counter;
        Ok(plaintext)
    }

    #[cfg(test)]
    pub(crate) fn force_send_counter(&mut self, value: u64) {
        self.send_counter = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::kdf::KeyRole;
    use crate::rng::SimRng;

    fn paired_sessions() -> (SecureChannelSession, SecureChannelSession) {
        let key = SymmetricKey::random(KeyRole::K80, &mut SimRng::from_seed(21));
        (
            SecureChannelSession::initiator(&key, version::OTA, "card"),
            SecureChannelSession::responder(&key, version::OTA, "sm-sr"),
        )
    }

    #[test]
    fn wrap_unwrap_identity() {
        let (mut tx, mut rx) = paired_sessions();
        for i in 0..5u8 {
            let record = tx.wrap(&[i; 7], b"aad").unwrap();
            assert_eq!(record.counter, i as u64 + 1);
            assert_eq!(rx.unwrap(&record, b"aad").unwrap(), vec![i; 7]);
        }
    }

    #[test]
    fn single_octet_mutations_rejected() {
        let (mut tx, mut rx) = paired_sessions();
        let record = tx.wrap(b"payload under test", b"").unwrap();
        for position in 0..record.body.len() {
            let mut mutated = record.clone();
            mutated.body[position] ^= 0x01;
            let mut session = rx.clone();
            assert_eq!(
                session.unwrap(&mutated, b""),
                Err(ChannelError::TamperDetected),
                "octet {position}"
            );
        }
        assert_eq!(rx.unwrap(&record, b"").unwrap(), b"payload under test");
    }

    #[test]
    fn aad_is_authenticated() {
        let (mut tx, mut rx) = paired_sessions();
        let record = tx.wrap(b"p", b"context-a").unwrap();
        assert_eq!(
            rx.unwrap(&record, b"context-b"),
            Err(ChannelError::TamperDetected)
        );
    }

    #[test]
    fn replay_rejected() {
        let (mut tx, mut rx) = paired_sessions();
        let record = tx.wrap(b"once", b"").unwrap();
        assert!(rx.unwrap(&record, b"").is_ok());
        assert_eq!(rx.unwrap(&record, b""), Err(ChannelError::ReplayDetected));
    }

    #[test]
    fn directions_are_independent() {
        let (mut initiator, mut responder) = paired_sessions();
        let request = initiator.wrap(b"request", b"").unwrap();
        let reply = responder.wrap(b"reply", b"").unwrap();
        // Same counter value in both directions must not collide.
        assert_eq!(request.counter, reply.counter);
        assert_ne!(request.body, reply.body);
        assert_eq!(responder.unwrap(&request, b"").unwrap(), b"request");
        assert_eq!(initiator.unwrap(&reply, b"").unwrap(), b"reply");
        // A record can never be fed back to its own sender.
        let mut tx2 = initiator.clone();
        let echo = tx2.wrap(b"echo", b"").unwrap();
        assert_eq!(
            initiator.unwrap(&echo, b""),
            Err(ChannelError::TamperDetected)
        );
    }

    #[test]
    fn wrong_channel_version_rejected() {
        let key = SymmetricKey::random(KeyRole::K80, &mut SimRng::from_seed(22));
        let mut tx = SecureChannelSession::initiator(&key, version::OTA, "peer");
        let mut rx = SecureChannelSession::responder(&key, version::PROFILE_INSTALL, "peer");
        let record = tx.wrap(b"p", b"").unwrap();
        assert_eq!(rx.unwrap(&record, b""), Err(ChannelError::TamperDetected));
    }

    #[test]
    fn counter_exhaustion() {
        let (mut tx, _) = paired_sessions();
        tx.force_send_counter(u64::MAX);
        assert_eq!(tx.wrap(b"p", b""), Err(ChannelError::CounterExhausted));
    }

    #[test]
    fn record_codec() {
        let record = SecureRecord {
            version: version::OTA,
            counter: 0x0102030405060708,
            body: vec![0xAA, 0xBB],
        };
        let bytes = record.encode();
        assert_eq!(bytes[0], version::OTA);
        assert_eq!(&bytes[1..9], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(SecureRecord::decode(&bytes).unwrap(), record);
        assert_eq!(
            SecureRecord::decode(&bytes[..8]),
            Err(ChannelError::Truncated)
        );
    }
}
