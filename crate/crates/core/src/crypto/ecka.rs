//! Certificate-authenticated elliptic-curve key agreement between an SM-DP
//! and a card, yielding the Profile Management Credentials.
//!
//! Message flow (the card side answers over whatever transport carries the
//! transcript):
//!
//! 1. the SM-DP already holds the card's certified key-agreement public
//!    key (from the registry entry held by the serving SM-SR);
//! 2. SM-DP → card: the SM-DP's certificate; the card verifies it against
//!    the CI root held in its ECASD;
//! 3. card → SM-DP: a fresh 16-octet single-use challenge;
//! 4. SM-DP → card: an ephemeral key-agreement public key plus the echoed
//!    challenge, signed with the SM-DP's certified signature key;
//! 5. both sides combine the ephemeral pair with the card's static pair
//!    into the shared secret and derive the credentials key from it.
//!
//! What exactly is signed in step 4 (`challenge ‖ ephemeral-public-key`)
//! is a simulator-level choice. Any verification failure aborts the run
//! with a typed error and no key material retained; the state machines are
//! strict, so replayed or misordered messages fail too.

use thiserror::Error;

use super::kdf::{derive_key, KeyRole, SymmetricKey};
use super::keys::{
    generate_keypair, key_agreement, sign_keyed, verify, Certificate, KeyPair, PublicKey, Scheme,
    Signature,
};
use super::p256;
use super::CryptoError;
use crate::rng::SimRng;

pub const CHALLENGE_LEN: usize = 16;
const PMC_CONTEXT: &str = "pmc";

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum EckaError {
    #[error("peer certificate did not verify under the CI root")]
    BadCertificate,
    #[error("echoed challenge does not match the pending one")]
    ChallengeMismatch,
    #[error("signature over the ephemeral key did not verify")]
    BadSignature,
    #[error("no live challenge for this message (reuse or misorder)")]
    StaleChallenge,
    #[error("message failed to decode")]
    Malformed,
}

impl From<CryptoError> for EckaError {
    fn from(_: CryptoError) -> Self {
        EckaError::Malformed
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EckaMessage {
    Certificate(Certificate),
    Challenge([u8; CHALLENGE_LEN]),
    SignedEphemeral {
        ephemeral: PublicKey,
        challenge: [u8; CHALLENGE_LEN],
        signature: Signature,
    },
}

impl EckaMessage {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            EckaMessage::Certificate(cert) => {
                let mut out = vec![0x01];
                out.extend_from_slice(&cert.to_bytes());
                out
            }
            EckaMessage::Challenge(challenge) => {
                let mut out = vec![0x02];
                out.extend_from_slice(challenge);
                out
            }
            EckaMessage::SignedEphemeral {
                ephemeral,
                challenge,
                signature,
            } => {
                let mut out = vec![0x03];
                out.extend_from_slice(&ephemeral.point);
                out.extend_from_slice(challenge);
                out.extend_from_slice(&signature.to_bytes());
                out
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EckaError> {
        match bytes.first() {
            Some(0x01) => Ok(EckaMessage::Certificate(
                Certificate::from_bytes(&bytes[1..]).map_err(|_| EckaError::Malformed)?,
            )),
            Some(0x02) => {
                let challenge: [u8; CHALLENGE_LEN] =
                    bytes[1..].try_into().map_err(|_| EckaError::Malformed)?;
                Ok(EckaMessage::Challenge(challenge))
            }
            Some(0x03) => {
                let rest = &bytes[1..];
                if rest.len() != p256::POINT_LEN + CHALLENGE_LEN + 64 {
                    return Err(EckaError::Malformed);
                }
                let mut point = [0u8; p256::POINT_LEN];
                point.copy_from_slice(&rest[..p256::POINT_LEN]);
                let mut challenge = [0u8; CHALLENGE_LEN];
                challenge
                    .copy_from_slice(&rest[p256::POINT_LEN..p256::POINT_LEN + CHALLENGE_LEN]);
                let signature =
                    Signature::from_bytes(&rest[p256::POINT_LEN + CHALLENGE_LEN..])
                        .map_err(|_| EckaError::Malformed)?;
                Ok(EckaMessage::SignedEphemeral {
                    ephemeral: PublicKey {
                        scheme: Scheme::KeyAgreement,
                        point,
                    },
                    challenge,
                    signature,
                })
            }
            _ => Err(EckaError::Malformed),
        }
    }
}

fn signed_payload(challenge: &[u8; CHALLENGE_LEN], ephemeral: &PublicKey) -> Vec<u8> {
    let mut msg = Vec::with_capacity(CHALLENGE_LEN + p256::POINT_LEN);
    msg.extend_from_slice(challenge);
    msg.extend_from_slice(&ephemeral.point);
    msg
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum DpPhase {
    Start,
    AwaitChallenge,
    Done,
    Failed,
}

/// SM-DP side of the agreement.
#[derive(Debug, Clone)]
pub struct DpEcka {
    certificate: Certificate,
    signing: KeyPair,
    card_public: PublicKey,
    phase: DpPhase,
    secret: Option<Vec<u8>>,
}

impl DpEcka {
    /// `card_public` is the card's certified key-agreement key, obtained
    /// from the registry entry at the serving SM-SR.
    pub fn new(certificate: Certificate, signing: KeyPair, card_public: PublicKey) -> Self {
        Self {
            certificate,
            signing,
            card_public,
            phase: DpPhase::Start,
            secret: None,
        }
    }

    /// Step 2: the SM-DP opens with its certificate.
    pub fn certificate_message(&mut self) -> Result<EckaMessage, EckaError> {
        if self.phase != DpPhase::Start {
            return Err(EckaError::StaleChallenge);
        }
        self.phase = DpPhase::AwaitChallenge;
        Ok(EckaMessage::Certificate(self.certificate.clone()))
    }

    /// Step 4: answer the card's challenge with a signed ephemeral key and
    /// compute the shared secret.
    pub fn on_challenge(
        &mut self,
        message: &EckaMessage,
        rng: &mut SimRng,
    ) -> Result<EckaMessage, EckaError> {
        if self.phase != DpPhase::AwaitChallenge {
            self.phase = DpPhase::Failed;
            return Err(EckaError::StaleChallenge);
        }
        let challenge = match message {
            EckaMessage::Challenge(c) => *c,
            _ => {
                self.phase = DpPhase::Failed;
                return Err(EckaError::Malformed);
            }
        };
        let ephemeral = generate_keypair(rng, Scheme::KeyAgreement);
        let signature = sign_keyed(&self.signing, &signed_payload(&challenge, &ephemeral.public))
            .map_err(|_| EckaError::Malformed)?;
        let secret = key_agreement(&ephemeral.private, &self.card_public).map_err(|e| {
            self.phase = DpPhase::Failed;
            EckaError::from(e)
        })?;
        self.secret = Some(secret);
        self.phase = DpPhase::Done;
        Ok(EckaMessage::SignedEphemeral {
            ephemeral: ephemeral.public,
            challenge,
            signature,
        })
    }

    /// Step 5, SM-DP side: the Profile Management Credentials.
    pub fn credentials(&self) -> Result<SymmetricKey, EckaError> {
        match (&self.phase, &self.secret) {
            (DpPhase::Done, Some(secret)) => {
                Ok(derive_key(secret, PMC_CONTEXT, KeyRole::ProfileCredentials)
                    .expect("secret is non-empty"))
            }
            _ => Err(EckaError::StaleChallenge),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum CardPhase {
    Idle,
    AwaitSigned,
    Done,
    Failed,
}

/// Card side of the agreement. Lives inside the card state; one run at a
/// time.
#[derive(Debug, Clone)]
pub struct CardEcka {
    ci_root: PublicKey,
    agreement: KeyPair,
    phase: CardPhase,
    challenge: Option<[u8; CHALLENGE_LEN]>,
    dp_public: Option<PublicKey>,
    secret: Option<Vec<u8>>,
}

impl CardEcka {
    pub fn new(ci_root: PublicKey, agreement: KeyPair) -> Self {
        Self {
            ci_root,
            agreement,
            phase: CardPhase::Idle,
            challenge: None,
            dp_public: None,
            secret: None,
        }
    }

    /// Step 2 → 3: verify the peer certificate, respond with a fresh
    /// challenge.
    pub fn on_certificate(
        &mut self,
        message: &EckaMessage,
        rng: &mut SimRng,
    ) -> Result<EckaMessage, EckaError> {
        if self.phase != CardPhase::Idle {
            self.phase = CardPhase::Failed;
            return Err(EckaError::StaleChallenge);
        }
        let certificate = match message {
            EckaMessage::Certificate(c) => c,
            _ => {
                self.phase = CardPhase::Failed;
                return Err(EckaError::StaleChallenge);
            }
        };
        if !certificate.verify(&self.ci_root) {
            self.phase = CardPhase::Failed;
            return Err(EckaError::BadCertificate);
        }
        let challenge: [u8; CHALLENGE_LEN] = rng.bytes();
        self.challenge = Some(challenge);
        self.dp_public = Some(certificate.public_key.clone());
        self.phase = CardPhase::AwaitSigned;
        Ok(EckaMessage::Challenge(challenge))
    }

    /// Step 4 → 5: validate the signed ephemeral key against the pending
    /// challenge and derive the shared secret. The challenge is single-use.
    pub fn on_signed_ephemeral(&mut self, message: &EckaMessage) -> Result<SymmetricKey, EckaError> {
        if self.phase != CardPhase::AwaitSigned {
            self.phase = CardPhase::Failed;
            return Err(EckaError::StaleChallenge);
        }
        let (ephemeral, challenge, signature) = match message {
            EckaMessage::SignedEphemeral {
                ephemeral,
                challenge,
                signature,
            } => (ephemeral, challenge, signature),
            _ => {
                self.phase = CardPhase::Failed;
                return Err(EckaError::StaleChallenge);
            }
        };
        let pending = self.challenge.take().ok_or(EckaError::StaleChallenge)?;
        if *challenge != pending {
            self.phase = CardPhase::Failed;
            return Err(EckaError::ChallengeMismatch);
        }
        let dp_public = self.dp_public.as_ref().ok_or(EckaError::StaleChallenge)?;
        if !verify(dp_public, &signed_payload(challenge, ephemeral), signature) {
            self.phase = CardPhase::Failed;
            return Err(EckaError::BadSignature);
        }
        let secret = key_agreement(&self.agreement.private, ephemeral).map_err(|e| {
            self.phase = CardPhase::Failed;
            EckaError::from(e)
        })?;
        self.secret = Some(secret.clone());
        self.phase = CardPhase::Done;
        Ok(derive_key(&secret, PMC_CONTEXT, KeyRole::ProfileCredentials)
            .expect("secret is non-empty"))
    }

    pub fn failed(&self) -> bool {
        self.phase == CardPhase::Failed
    }

    pub fn retained_secret(&self) -> Option<&[u8]> {
        self.secret.as_deref()
    }
}

/// Transcript hook: sees every message in transit and may rewrite it.
pub trait TranscriptTap {
    fn pass(&mut self, index: usize, message: Vec<u8>) -> Vec<u8>;
}

/// Records the transcript unmodified.
#[derive(Debug, Default)]
pub struct Recorder {
    pub transcript: Vec<Vec<u8>>,
}

impl TranscriptTap for Recorder {
    fn pass(&mut self, _index: usize, message: Vec<u8>) -> Vec<u8> {
        self.transcript.push(message.clone());
        message
    }
}

/// Runs the full agreement over a byte transcript, returning the keys both
/// sides derived. The tap sees (and may corrupt) each serialized message.
pub fn ecka_run(
    dp: &mut DpEcka,
    card: &mut CardEcka,
    rng: &mut SimRng,
    tap: &mut dyn TranscriptTap,
) -> Result<(SymmetricKey, SymmetricKey), EckaError> {
    let msg1 = tap.pass(0, dp.certificate_message()?.to_bytes());
    let challenge = card.on_certificate(&EckaMessage::from_bytes(&msg1)?, rng)?;
    let msg2 = tap.pass(1, challenge.to_bytes());
    let signed = dp.on_challenge(&EckaMessage::from_bytes(&msg2)?, rng)?;
    let msg3 = tap.pass(2, signed.to_bytes());
    let card_key = card.on_signed_ephemeral(&EckaMessage::from_bytes(&msg3)?)?;
    let dp_key = dp.credentials()?;
    Ok((dp_key, card_key))
}
