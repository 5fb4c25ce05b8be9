//! Key pairs, signatures, and CI-issued certificates.
//!
//! Both the key-agreement and the signature scheme live on P-256; the
//! signature is a Schnorr construction (key-prefixed challenge hash) so
//! verification needs nothing beyond the group arithmetic in
//! [`super::p256`]. Scheme tags travel with every key and are checked on
//! use.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use super::kdf::sha256;
use super::p256::{self, Point};
use super::CryptoError;
use crate::rng::SimRng;

/// What a key pair is for. Tags must match on use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// ECDH-style key agreement on P-256.
    KeyAgreement,
    /// Schnorr signatures on P-256.
    Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKey {
    pub scheme: Scheme,
    #[serde(with = "crate::serde_hex")]
    pub point: [u8; p256::POINT_LEN],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrivateKey {
    pub scheme: Scheme,
    pub scalar: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub private: PrivateKey,
    pub public: PublicKey,
}

/// Schnorr signature: challenge hash `e` and response `s`, both scalars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    #[serde(with = "crate::serde_hex")]
    pub e: [u8; 32],
    #[serde(with = "crate::serde_hex")]
    pub s: [u8; 32],
}

impl Signature {
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.e);
        out[32..].copy_from_slice(&self.s);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != 64 {
            return Err(CryptoError::Malformed);
        }
        let mut e = [0u8; 32];
        let mut s = [0u8; 32];
        e.copy_from_slice(&bytes[..32]);
        s.copy_from_slice(&bytes[32..]);
        Ok(Self { e, s })
    }
}

/// Samples a uniform non-zero scalar below the group order.
fn random_scalar(rng: &mut SimRng) -> BigUint {
    let n = &p256::curve().n;
    loop {
        let candidate = BigUint::from_bytes_be(&rng.bytes::<32>());
        if candidate > BigUint::ZERO && candidate < *n {
            return candidate;
        }
    }
}

pub fn generate_keypair(rng: &mut SimRng, scheme: Scheme) -> KeyPair {
    let d = random_scalar(rng);
    let q = p256::base_mul(&d);
    let point = p256::encode_point(&q).expect("non-zero scalar");
    KeyPair {
        private: PrivateKey {
            scheme,
            scalar: p256::fe_to_bytes(&d),
        },
        public: PublicKey { scheme, point },
    }
}

pub fn derive_public(private: &PrivateKey) -> PublicKey {
    let d = BigUint::from_bytes_be(&private.scalar);
    let q = p256::base_mul(&d);
    PublicKey {
        scheme: private.scheme,
        point: p256::encode_point(&q).expect("valid private scalar"),
    }
}

fn challenge_scalar(r: &Point, public: &PublicKey, message: &[u8]) -> BigUint {
    let rx = r.x().expect("commitment is never the identity");
    let mut input = Vec::with_capacity(32 + p256::POINT_LEN + message.len());
    input.extend_from_slice(&p256::fe_to_bytes(rx));
    input.extend_from_slice(&public.point);
    input.extend_from_slice(message);
    p256::scalar_from_bytes(&sha256(&input))
}

/// Deterministic nonce: secret-keyed hash of the message, retried on the
/// negligible zero case.
fn nonce_scalar(private: &PrivateKey, message: &[u8]) -> BigUint {
    let mut counter = 0u8;
    loop {
        let mut input = Vec::with_capacity(32 + 32 + 1);
        input.extend_from_slice(&private.scalar);
        input.extend_from_slice(&sha256(message));
        input.push(counter);
        let k = p256::scalar_from_bytes(&sha256(&input));
        if k != BigUint::ZERO {
            return k;
        }
        counter += 1;
    }
}

pub fn sign(private: &PrivateKey, message: &[u8]) -> Result<Signature, CryptoError> {
    let public = derive_public(private);
    sign_keyed(
        &KeyPair {
            private: private.clone(),
            public,
        },
        message,
    )
}

/// Like [`sign`] but with the public half already at hand, saving its
/// re-derivation on hot protocol paths.
pub fn sign_keyed(pair: &KeyPair, message: &[u8]) -> Result<Signature, CryptoError> {
    if pair.private.scheme != Scheme::Signature {
        return Err(CryptoError::SchemeMismatch);
    }
    let d = BigUint::from_bytes_be(&pair.private.scalar);
    let k = nonce_scalar(&pair.private, message);
    let r = p256::base_mul(&k);
    let e = challenge_scalar(&r, &pair.public, message);
    let s = p256::scalar_add(&k, &p256::scalar_mul_mod_n(&e, &d));
    Ok(Signature {
        e: p256::fe_to_bytes(&e),
        s: p256::fe_to_bytes(&s),
    })
}

/// Verifies `signature` over `message` under `public`. Total: malformed
/// input, scheme mismatch, or a wrong key all yield `false`.
pub fn verify(public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    if public.scheme != Scheme::Signature {
        return false;
    }
    let q = match p256::decode_point(&public.point) {
        Ok(point) => point,
        Err(_) => return false,
    };
    let n = &p256::curve().n;
    let e = BigUint::from_bytes_be(&signature.e);
    let s = BigUint::from_bytes_be(&signature.s);
    if e >= *n || s >= *n {
        return false;
    }
    // R' = s·G − e·Q; the signature is valid iff H(R'.x ‖ pk ‖ m) = e.
    let r = p256::base_and_point_mul(&s, &p256::scalar_neg(&e), &q);
    if r.is_infinity() {
        return false;
    }
    challenge_scalar(&r, public, message) == e
}

/// CI-issued identity certificate: one level deep, no chains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub subject: String,
    pub public_key: PublicKey,
    pub signature: Signature,
}

fn certificate_message(subject: &str, public_key: &PublicKey) -> Vec<u8> {
    let mut msg = b"cert/v1\x00".to_vec();
    msg.extend_from_slice(&(subject.len() as u16).to_be_bytes());
    msg.extend_from_slice(subject.as_bytes());
    msg.push(match public_key.scheme {
        Scheme::KeyAgreement => 0x01,
        Scheme::Signature => 0x02,
    });
    msg.extend_from_slice(&public_key.point);
    msg
}

impl Certificate {
    pub fn verify(&self, ci_root: &PublicKey) -> bool {
        verify(
            ci_root,
            &certificate_message(&self.subject, &self.public_key),
            &self.signature,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.subject.len() as u16).to_be_bytes());
        out.extend_from_slice(self.subject.as_bytes());
        out.push(match self.public_key.scheme {
            Scheme::KeyAgreement => 0x01,
            Scheme::Signature => 0x02,
        });
        out.extend_from_slice(&self.public_key.point);
        out.extend_from_slice(&self.signature.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < 2 {
            return Err(CryptoError::Malformed);
        }
        let subject_len = u16::from_be_bytes([bytes[0], bytes[1]]) as usize;
        let rest = &bytes[2..];
        if rest.len() != subject_len + 1 + p256::POINT_LEN + 64 {
            return Err(CryptoError::Malformed);
        }
        let subject = String::from_utf8(rest[..subject_len].to_vec())
            .map_err(|_| CryptoError::Malformed)?;
        let scheme = match rest[subject_len] {
            0x01 => Scheme::KeyAgreement,
            0x02 => Scheme::Signature,
            _ => return Err(CryptoError::Malformed),
        };
        let mut point = [0u8; p256::POINT_LEN];
        point.copy_from_slice(&rest[subject_len + 1..subject_len + 1 + p256::POINT_LEN]);
        let signature = Signature::from_bytes(&rest[subject_len + 1 + p256::POINT_LEN..])?;
        Ok(Self {
            subject,
            public_key: PublicKey { scheme, point },
            signature,
        })
    }
}

/// The certificate issuer: root of the (single-level) trust hierarchy.
#[derive(Debug, Clone)]
pub struct CertIssuer {
    keypair: KeyPair,
}

impl CertIssuer {
    pub fn new(rng: &mut SimRng) -> Self {
        Self {
            keypair: generate_keypair(rng, Scheme::Signature),
        }
    }

    pub fn root_public(&self) -> PublicKey {
        self.keypair.public.clone()
    }

    pub fn issue(&self, subject: &str, public_key: &PublicKey) -> Certificate {
        let signature = sign_keyed(&self.keypair, &certificate_message(subject, public_key))
            .expect("issuer key is a signature key");
        Certificate {
            subject: subject.to_string(),
            public_key: public_key.clone(),
            signature,
        }
    }
}

/// Diffie-Hellman: x-coordinate of `private · peer_public`.
pub fn key_agreement(private: &PrivateKey, peer: &PublicKey) -> Result<Vec<u8>, CryptoError> {
    if private.scheme != Scheme::KeyAgreement || peer.scheme != Scheme::KeyAgreement {
        return Err(CryptoError::SchemeMismatch);
    }
    let point = p256::decode_point(&peer.point).map_err(|_| CryptoError::Malformed)?;
    let d = BigUint::from_bytes_be(&private.scalar);
    let shared = p256::scalar_mul(&d, &point);
    match shared.x() {
        Some(x) => Ok(p256::fe_to_bytes(x).to_vec()),
        None => Err(CryptoError::Malformed),
    }
}
