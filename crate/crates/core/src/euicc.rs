//! The eUICC card: security-domain tree (ISD-R, ECASD, ISD-Ps), profile
//! store and lifecycle, policy enforcement, fallback handling, and card-key
//! replacement.
//!
//! A card is a single-writer state machine: it processes one command at a
//! time, and every command is atomic — on any error the observable card
//! state is exactly what it was before the command (the dispatcher works
//! on a copy and only commits on success).
//!
//! Two structural rules hold after every operation:
//!
//! * enabled-singleton — exactly one profile is enabled, so the card always
//!   has a route to a network (the factory provisioning profile bootstraps
//!   this, and disabling routes through the fallback or the provisioning
//!   profile);
//! * fallback-singleton — at most one profile carries the fallback
//!   attribute, and it is disabled while flagged.
//!
//! Profile contents are reachable only through their own ISD-P's dispatch
//! path: commands arriving in ISD-R context can create, delete, or flip
//! the lifecycle state of an ISD-P, but never read or write what is inside
//! a profile. Installation material is keyed to the ISD-P (established per
//! install), and policy updates must authenticate under the profile's own
//! MNO-SD key.
//!
//! ## State snapshot
//!
//! [`Euicc::snapshot`] serializes the observable provisioning state as a
//! stable text document (used by golden tests and the trace log):
//!
//! ```text
//! euicc <eid>
//! k80 <digest> generation <n>
//! pending-key <none|digest>
//! ecka <none|isdr|isdp:<aid>>
//! isdp <aid> <created|personalized>
//! profile <mno-id> <provisioning|operational> <enabled|disabled> fallback=<bool> pol1=<bitmap> mno-sd=<digest> naa=<digest>
//! ```
//!
//! Key material appears as digests only. Transport counters and the card's
//! internal randomness are liveness state, not provisioning state, and are
//! not part of the snapshot.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apdu::{ins, sw, tlv, ApduCommand, ApduResponse, CLA_CARD};
use crate::crypto::channel::{version, ChannelError, SecureChannelSession, SecureRecord};
use crate::crypto::ecka::{CardEcka, EckaError, EckaMessage};
use crate::crypto::kdf::{sha256, KeyRole, SymmetricKey};
use crate::crypto::keys::{generate_keypair, CertIssuer, Certificate, KeyPair, PublicKey};
use crate::policy::{self, Followup, Pol1, PolicyError, ProfileState};
use crate::rng::SimRng;

/// Card identifier, printable as 32 hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Eid(#[serde(with = "crate::serde_hex")] pub [u8; 16]);

impl Eid {
    pub fn random(rng: &mut SimRng) -> Self {
        Eid(rng.bytes())
    }
}

impl fmt::Display for Eid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl std::str::FromStr for Eid {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw = hex::decode(s).map_err(|e| e.to_string())?;
        let bytes: [u8; 16] = raw
            .try_into()
            .map_err(|_| "an EID is 32 hex digits".to_string())?;
        Ok(Eid(bytes))
    }
}

/// ISD-P application identifier, unique on a card.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IsdpAid(#[serde(with = "crate::serde_hex")] pub Vec<u8>);

impl fmt::Display for IsdpAid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(&self.0))
    }
}

/// Card-assigned AIDs share this prefix and differ in a two-octet counter.
const AID_PREFIX: [u8; 7] = [0xA0, 0x00, 0x00, 0x05, 0x59, 0x10, 0x10];

impl IsdpAid {
    pub fn assigned(counter: u16) -> Self {
        let mut raw = AID_PREFIX.to_vec();
        raw.extend_from_slice(&counter.to_be_bytes());
        IsdpAid(raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IsdpState {
    Created,
    Personalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileKind {
    Provisioning,
    Operational,
}

/// One operator's subscription bundle, hosted inside its ISD-P.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Profile {
    pub mno_id: String,
    pub kind: ProfileKind,
    pub state: ProfileState,
    pub pol1: Pol1,
    pub fallback: bool,
    pub mno_sd_key: SymmetricKey,
    /// Opaque subscription data payload.
    pub naa_params: Vec<u8>,
    /// The MNO-SD's end of the operator channel.
    mno_session: SecureChannelSession,
}

impl Profile {
    pub fn new(
        mno_id: String,
        kind: ProfileKind,
        pol1: Pol1,
        mno_sd_key: SymmetricKey,
        naa_params: Vec<u8>,
        state: ProfileState,
    ) -> Self {
        let mno_session =
            SecureChannelSession::responder(&mno_sd_key, version::MNO_PROFILE, &mno_id);
        Profile {
            mno_id,
            kind,
            state,
            pol1,
            fallback: false,
            mno_sd_key,
            naa_params,
            mno_session,
        }
    }

    /// Serialized form carried inside the installation record.
    pub fn to_install_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.mno_id.len() as u16).to_be_bytes());
        out.extend_from_slice(self.mno_id.as_bytes());
        out.push(match self.kind {
            ProfileKind::Provisioning => 0x00,
            ProfileKind::Operational => 0x01,
        });
        out.push(self.pol1.to_byte());
        out.extend_from_slice(&self.mno_sd_key.bytes);
        out.extend_from_slice(&(self.naa_params.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.naa_params);
        out
    }

    fn from_install_payload(payload: &[u8]) -> Result<Self, CardError> {
        if payload.len() < 2 {
            return Err(CardError::MalformedData);
        }
        let id_len = u16::from_be_bytes([payload[0], payload[1]]) as usize;
        let rest = &payload[2..];
        if rest.len() < id_len + 2 + 32 + 2 {
            return Err(CardError::MalformedData);
        }
        let mno_id =
            String::from_utf8(rest[..id_len].to_vec()).map_err(|_| CardError::MalformedData)?;
        let kind = match rest[id_len] {
            // Provisioning profiles are factory-installed only.
            0x01 => ProfileKind::Operational,
            _ => return Err(CardError::MalformedData),
        };
        let pol1 = Pol1::from_byte(rest[id_len + 1]).map_err(CardError::ContradictoryRules)?;
        let mut key = [0u8; 32];
        key.copy_from_slice(&rest[id_len + 2..id_len + 34]);
        let naa_len = u16::from_be_bytes([rest[id_len + 34], rest[id_len + 35]]) as usize;
        let naa = &rest[id_len + 36..];
        if naa.len() != naa_len {
            return Err(CardError::MalformedData);
        }
        Ok(Profile::new(
            mno_id,
            kind,
            pol1,
            SymmetricKey::new(KeyRole::MnoSd, key),
            naa.to_vec(),
            // Installed profiles always start disabled.
            ProfileState::Disabled,
        ))
    }
}

/// Profile-hosting security domain.
#[derive(Debug, Clone)]
pub struct IsdP {
    pub aid: IsdpAid,
    pub state: IsdpState,
    pub profile: Option<Profile>,
    /// Installation channel keyed with the Profile Management Credentials;
    /// erased when installation completes.
    install: Option<SecureChannelSession>,
}

impl IsdP {
    pub fn has_install_key(&self) -> bool {
        self.install.is_some()
    }
}

/// Controlling-authority domain: CI trust anchor plus the card's certified
/// key-agreement pair. Immutable after manufacture.
#[derive(Debug, Clone)]
pub struct Ecasd {
    pub ci_root: PublicKey,
    keypair: KeyPair,
    pub certificate: Certificate,
}

impl Ecasd {
    pub fn public_key(&self) -> PublicKey {
        self.keypair.public.clone()
    }
}

/// What a key-establishment run is aimed at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EckaTarget {
    /// Replacement card key (handover step).
    Isdr,
    /// Installation credentials for one ISD-P.
    Isdp(IsdpAid),
}

#[derive(Debug, Clone)]
struct EckaRun {
    target: EckaTarget,
    machine: CardEcka,
}

/// Registration seed handed to the first serving SM-SR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EisSeed {
    pub eid: Eid,
    pub eum_id: String,
    pub production_date: u64,
    pub euicc_public_key: PublicKey,
    pub k80: SymmetricKey,
}

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum CardError {
    #[error("no ISD-P with that identifier")]
    NotFound,
    #[error("an ISD-P with that identifier already exists")]
    DuplicateId,
    #[error("policy rules deny the operation")]
    PolicyDenied,
    #[error("ISD-P is not personalized")]
    NotPersonalized,
    #[error("profile is already enabled")]
    AlreadyEnabled,
    #[error("profile is not enabled")]
    NotEnabled,
    #[error("an enabled profile cannot be deleted")]
    CannotDeleteEnabled,
    #[error("the provisioning profile cannot be deleted")]
    ProvisioningProtected,
    #[error("no disabled profile is available to take over connectivity")]
    NoFallbackAvailable,
    #[error("the fallback attribute is already set on another profile")]
    FallbackAlreadySet,
    #[error("the fallback attribute cannot be set on an enabled profile")]
    ProfileEnabled,
    #[error("ISD-P is not awaiting installation")]
    NotInstallable,
    #[error("no installation key is present (key agreement required)")]
    NoKey,
    #[error("no pending card key to commit")]
    NoPendingKey,
    #[error("channel authentication failed: {0}")]
    Channel(ChannelError),
    #[error("key agreement failed: {0}")]
    Ecka(EckaError),
    #[error("policy rules are contradictory")]
    ContradictoryRules(PolicyError),
    #[error("command data is malformed")]
    MalformedData,
    #[error("instruction is not recognised")]
    UnknownInstruction,
    #[error("command did not arrive over an authenticated channel")]
    Unauthenticated,
}

impl CardError {
    /// The documented status-word mapping for the wire surface.
    pub fn status(&self) -> u16 {
        use CardError::*;
        match self {
            NotFound => sw::REFERENCED_DATA_NOT_FOUND,
            DuplicateId | ContradictoryRules(_) | MalformedData | UnknownInstruction => {
                sw::WRONG_DATA
            }
            PolicyDenied | NotPersonalized | AlreadyEnabled | NotEnabled | CannotDeleteEnabled
            | ProvisioningProtected | NoFallbackAvailable | FallbackAlreadySet | ProfileEnabled
            | NotInstallable | NoPendingKey => sw::CONDITIONS_NOT_SATISFIED,
            NoKey | Channel(_) | Ecka(_) | Unauthenticated => sw::SECURITY_STATUS_NOT_SATISFIED,
        }
    }
}

/// Channel context a command arrived in.
#[derive(Debug, Clone)]
pub struct CommandContext {
    pub peer: String,
    pub authenticated: bool,
}

impl CommandContext {
    /// Context for commands that arrived over the authenticated card
    /// channel (or are issued directly by a trusted harness).
    pub fn trusted(peer: &str) -> Self {
        CommandContext {
            peer: peer.to_string(),
            authenticated: true,
        }
    }
}

/// The card.
#[derive(Debug, Clone)]
pub struct Euicc {
    eid: Eid,
    ecasd: Ecasd,
    isdr_key: SymmetricKey,
    isdr_session: SecureChannelSession,
    isdps: BTreeMap<IsdpAid, IsdP>,
    ecka: Option<EckaRun>,
    pending_smsr_key: Option<SymmetricKey>,
    aid_counter: u16,
    key_generation: u32,
    rng: SimRng,
}

fn digest8(bytes: &[u8]) -> String {
    hex::encode(&sha256(bytes)[..8])
}

/// Fabricates a card: ISD-R key, ECASD with a CI-certified key pair, and
/// the factory provisioning profile, enabled. Returns the card and the
/// registration seed for the first serving SM-SR.
pub fn manufacture(
    eid: Eid,
    eum_id: &str,
    production_date: u64,
    ci: &CertIssuer,
    rng: &mut SimRng,
) -> (Euicc, EisSeed) {
    let k80 = SymmetricKey::random(KeyRole::K80, rng);
    let keypair = generate_keypair(rng, crate::crypto::Scheme::KeyAgreement);
    let certificate = ci.issue(&eid.to_string(), &keypair.public);
    let ecasd = Ecasd {
        ci_root: ci.root_public(),
        keypair,
        certificate,
    };

    let mut card = Euicc {
        eid,
        ecasd,
        isdr_session: SecureChannelSession::responder(&k80, version::OTA, "sm-sr"),
        isdr_key: k80.clone(),
        isdps: BTreeMap::new(),
        ecka: None,
        pending_smsr_key: None,
        aid_counter: 0,
        key_generation: 0,
        rng: rng.fork(&format!("card:{eid}")),
    };

    let aid = card.next_aid();
    let mno_sd_key = SymmetricKey::random(KeyRole::MnoSd, &mut card.rng);
    let naa = card.rng.bytes::<16>().to_vec();
    let provisioning = Profile::new(
        "provisioning".to_string(),
        ProfileKind::Provisioning,
        Pol1::NONE,
        mno_sd_key,
        naa,
        ProfileState::Enabled,
    );
    card.isdps.insert(
        aid.clone(),
        IsdP {
            aid,
            state: IsdpState::Personalized,
            profile: Some(provisioning),
            install: None,
        },
    );

    let seed = EisSeed {
        eid,
        eum_id: eum_id.to_string(),
        production_date,
        euicc_public_key: card.ecasd.public_key(),
        k80,
    };
    (card, seed)
}

impl Euicc {
    pub fn eid(&self) -> Eid {
        self.eid
    }

    pub fn ecasd(&self) -> &Ecasd {
        &self.ecasd
    }

    pub fn profiles(&self) -> impl Iterator<Item = &IsdP> {
        self.isdps.values()
    }

    pub fn isdp(&self, aid: &IsdpAid) -> Option<&IsdP> {
        self.isdps.get(aid)
    }

    pub fn isdp_count(&self) -> usize {
        self.isdps.len()
    }

    pub fn provisioning_aid(&self) -> IsdpAid {
        self.isdps
            .values()
            .find(|p| {
                matches!(
                    p.profile,
                    Some(Profile {
                        kind: ProfileKind::Provisioning,
                        ..
                    })
                )
            })
            .map(|p| p.aid.clone())
            .expect("provisioning profile is never deleted")
    }

    pub fn enabled_aid(&self) -> IsdpAid {
        self.isdps
            .values()
            .find(|p| matches!(&p.profile, Some(pr) if pr.state == ProfileState::Enabled))
            .map(|p| p.aid.clone())
            .expect("enabled-singleton invariant")
    }

    pub fn enabled_count(&self) -> usize {
        self.isdps
            .values()
            .filter(|p| matches!(&p.profile, Some(pr) if pr.state == ProfileState::Enabled))
            .count()
    }

    pub fn fallback_count(&self) -> usize {
        self.isdps
            .values()
            .filter(|p| matches!(&p.profile, Some(pr) if pr.fallback))
            .count()
    }

    /// Incremented on every committed card-key replacement.
    pub fn key_generation(&self) -> u32 {
        self.key_generation
    }

    fn next_aid(&mut self) -> IsdpAid {
        loop {
            self.aid_counter += 1;
            let aid = IsdpAid::assigned(self.aid_counter);
            if !self.isdps.contains_key(&aid) {
                return aid;
            }
        }
    }

    // -- transport -----------------------------------------------------------

    /// Card entry point for a wire record: authenticates it under the live
    /// card key, dispatches the command, and returns the wrapped response.
    /// A record that fails channel authentication gets an unprotected
    /// transport NACK carrying `SECURITY_STATUS_NOT_SATISFIED`.
    pub fn process_record(&mut self, raw: &[u8]) -> Vec<u8> {
        let nack = || {
            SecureRecord::nack(
                ApduResponse::status_only(sw::SECURITY_STATUS_NOT_SATISFIED).encode(),
            )
            .encode()
        };
        let record = match SecureRecord::decode(raw) {
            Ok(r) => r,
            Err(_) => return nack(),
        };
        let mut session = self.isdr_session.clone();
        let plaintext = match session.unwrap(&record, b"") {
            Ok(p) => p,
            Err(_) => return nack(),
        };
        self.isdr_session = session;

        let peer = self.isdr_session.peer_identity.clone();
        let response = match ApduCommand::decode(&plaintext) {
            Ok(cmd) => {
                let generation_before = self.key_generation;
                let old_session = self.isdr_session.clone();
                let response = self.process_apdu(&CommandContext::trusted(&peer), &cmd);
                if self.key_generation != generation_before {
                    // A key commit happened inside this command; the ack is
                    // the final record under the retired key.
                    let mut reply_session = old_session;
                    return reply_session
                        .wrap(&response.encode(), b"")
                        .expect("reply under retired key")
                        .encode();
                }
                response
            }
            Err(_) => ApduResponse::status_only(sw::WRONG_DATA),
        };
        let record = self
            .isdr_session
            .wrap(&response.encode(), b"")
            .expect("card reply");
        record.encode()
    }

    /// Dispatches one command. Processing is atomic: the dispatcher works
    /// on a copy of the card and commits it only when the command
    /// succeeds, so any error leaves the card state untouched.
    pub fn process_apdu(&mut self, ctx: &CommandContext, cmd: &ApduCommand) -> ApduResponse {
        let mut next = self.clone();
        match next.dispatch(ctx, cmd) {
            Ok(data) => {
                *self = next;
                ApduResponse::new(data, sw::SUCCESS)
            }
            Err(err) => ApduResponse::status_only(err.status()),
        }
    }

    fn dispatch(&mut self, ctx: &CommandContext, cmd: &ApduCommand) -> Result<Vec<u8>, CardError> {
        if !ctx.authenticated {
            return Err(CardError::Unauthenticated);
        }
        if cmd.cla != CLA_CARD {
            return Err(CardError::UnknownInstruction);
        }
        let fields = tlv::parse(&cmd.data).map_err(|_| CardError::MalformedData)?;
        let aid_field = || -> Result<IsdpAid, CardError> {
            tlv::find(&fields, tlv::TAG_AID)
                .map(|raw| IsdpAid(raw.to_vec()))
                .ok_or(CardError::MalformedData)
        };
        match cmd.ins {
            ins::PING => Ok(self.eid.0.to_vec()),
            ins::CREATE_ISDP => {
                let requested = tlv::find(&fields, tlv::TAG_AID).map(|raw| IsdpAid(raw.to_vec()));
                let aid = self.create_isdp(requested)?;
                Ok(aid.0)
            }
            ins::ESTABLISH_KEY => {
                let target = match cmd.p2 {
                    0x00 => EckaTarget::Isdr,
                    0x01 => EckaTarget::Isdp(aid_field()?),
                    _ => return Err(CardError::MalformedData),
                };
                match cmd.p1 {
                    0x00 => {
                        // Abort: drop the run and any staged-but-uncommitted
                        // card key.
                        self.ecka = None;
                        self.pending_smsr_key = None;
                        Ok(Vec::new())
                    }
                    0x01 => {
                        let raw =
                            tlv::find(&fields, tlv::TAG_ECKA).ok_or(CardError::MalformedData)?;
                        let msg = EckaMessage::from_bytes(raw).map_err(CardError::Ecka)?;
                        self.establish_key_start(target, &msg)
                    }
                    0x02 => {
                        let raw =
                            tlv::find(&fields, tlv::TAG_ECKA).ok_or(CardError::MalformedData)?;
                        let msg = EckaMessage::from_bytes(raw).map_err(CardError::Ecka)?;
                        self.establish_key_finish(target, &msg)?;
                        Ok(Vec::new())
                    }
                    _ => Err(CardError::MalformedData),
                }
            }
            ins::INSTALL_PROFILE => {
                let aid = aid_field()?;
                let raw = tlv::find(&fields, tlv::TAG_RECORD).ok_or(CardError::MalformedData)?;
                let record = SecureRecord::decode(raw).map_err(CardError::Channel)?;
                self.install_profile(&aid, &record)?;
                Ok(Vec::new())
            }
            ins::ENABLE => {
                self.enable_profile(&aid_field()?)?;
                Ok(Vec::new())
            }
            ins::DISABLE => {
                self.disable_profile(&aid_field()?)?;
                Ok(Vec::new())
            }
            ins::DELETE => {
                self.delete_profile(&aid_field()?)?;
                Ok(Vec::new())
            }
            ins::SET_FALLBACK => {
                let flag = match cmd.p1 {
                    0x00 => false,
                    0x01 => true,
                    _ => return Err(CardError::MalformedData),
                };
                self.set_fallback(&aid_field()?, flag)?;
                Ok(Vec::new())
            }
            ins::UPDATE_POL1 => {
                let aid = aid_field()?;
                let raw = tlv::find(&fields, tlv::TAG_RECORD).ok_or(CardError::MalformedData)?;
                let record = SecureRecord::decode(raw).map_err(CardError::Channel)?;
                self.update_pol1(&aid, &record)?;
                Ok(Vec::new())
            }
            ins::REPLACE_SMSR_KEY => {
                self.replace_smsr_key_commit()?;
                Ok(Vec::new())
            }
            _ => Err(CardError::UnknownInstruction),
        }
    }

    // -- operations ------------------------------------------------------------

    /// Creates an empty ISD-P. With no requested identifier the card
    /// assigns the next sequential AID.
    pub fn create_isdp(&mut self, requested: Option<IsdpAid>) -> Result<IsdpAid, CardError> {
        let aid = match requested {
            Some(aid) => {
                if aid.0.is_empty() || aid.0.len() > 16 {
                    return Err(CardError::MalformedData);
                }
                if self.isdps.contains_key(&aid) {
                    return Err(CardError::DuplicateId);
                }
                aid
            }
            None => self.next_aid(),
        };
        self.isdps.insert(
            aid.clone(),
            IsdP {
                aid: aid.clone(),
                state: IsdpState::Created,
                profile: None,
                install: None,
            },
        );
        Ok(aid)
    }

    /// First key-establishment message: verify the peer certificate and
    /// answer with the challenge. The run's target is pinned here.
    pub fn establish_key_start(
        &mut self,
        target: EckaTarget,
        msg: &EckaMessage,
    ) -> Result<Vec<u8>, CardError> {
        if let EckaTarget::Isdp(aid) = &target {
            let isdp = self.isdps.get(aid).ok_or(CardError::NotFound)?;
            if isdp.state != IsdpState::Created {
                return Err(CardError::NotInstallable);
            }
        }
        let mut machine = CardEcka::new(self.ecasd.ci_root.clone(), self.ecasd.keypair.clone());
        let challenge = machine
            .on_certificate(msg, &mut self.rng)
            .map_err(CardError::Ecka)?;
        self.ecka = Some(EckaRun { target, machine });
        match challenge {
            EckaMessage::Challenge(c) => Ok(c.to_vec()),
            _ => unreachable!("on_certificate answers with a challenge"),
        }
    }

    /// Final key-establishment message: validate the signed ephemeral key,
    /// derive the key, and stage it at the run's target.
    pub fn establish_key_finish(
        &mut self,
        target: EckaTarget,
        msg: &EckaMessage,
    ) -> Result<(), CardError> {
        let mut run = self
            .ecka
            .take()
            .ok_or(CardError::Ecka(EckaError::StaleChallenge))?;
        if run.target != target {
            return Err(CardError::Ecka(EckaError::StaleChallenge));
        }
        let key = run
            .machine
            .on_signed_ephemeral(msg)
            .map_err(CardError::Ecka)?;
        match target {
            EckaTarget::Isdp(aid) => {
                let isdp = self.isdps.get_mut(&aid).ok_or(CardError::NotFound)?;
                isdp.install = Some(SecureChannelSession::responder(
                    &key,
                    version::PROFILE_INSTALL,
                    "sm-dp",
                ));
            }
            EckaTarget::Isdr => {
                self.pending_smsr_key = Some(SymmetricKey::new(KeyRole::K80, key.bytes));
            }
        }
        Ok(())
    }

    /// Decrypts and installs a profile into a freshly created ISD-P using
    /// the installation key established beforehand. On success the ISD-P is
    /// personalized, the profile starts disabled, and the installation key
    /// is erased.
    pub fn install_profile(
        &mut self,
        aid: &IsdpAid,
        record: &SecureRecord,
    ) -> Result<(), CardError> {
        let isdp = self.isdps.get_mut(aid).ok_or(CardError::NotFound)?;
        if isdp.state != IsdpState::Created {
            return Err(CardError::NotInstallable);
        }
        let session = isdp.install.as_mut().ok_or(CardError::NoKey)?;
        let payload = session.unwrap(record, &aid.0).map_err(CardError::Channel)?;
        let profile = Profile::from_install_payload(&payload)?;
        isdp.profile = Some(profile);
        isdp.state = IsdpState::Personalized;
        isdp.install = None;
        Ok(())
    }

    /// Atomic swap: the previously enabled profile is disabled (its policy
    /// permitting) and the target becomes the single enabled profile. A
    /// delete-on-disable mandate on the old profile executes in the same
    /// step, and the target's fallback flag, if set, is cleared.
    pub fn enable_profile(&mut self, aid: &IsdpAid) -> Result<(), CardError> {
        let target = self.isdps.get(aid).ok_or(CardError::NotFound)?;
        let profile = target.profile.as_ref().ok_or(CardError::NotPersonalized)?;
        if profile.state == ProfileState::Enabled {
            return Err(CardError::AlreadyEnabled);
        }

        let old_aid = self.enabled_aid();
        let old = self.isdps[&old_aid]
            .profile
            .as_ref()
            .expect("enabled profile is personalized");
        let decision = policy::check_disable(&old.pol1);
        let old_kind = old.kind;
        if !decision.allowed() {
            return Err(CardError::PolicyDenied);
        }

        {
            let old = self
                .isdps
                .get_mut(&old_aid)
                .unwrap()
                .profile
                .as_mut()
                .unwrap();
            old.state = ProfileState::Disabled;
        }
        // The provisioning profile is delete-protected even against a
        // mandate (its rules can never carry one, see update_pol1).
        if decision.followup == Followup::DeleteProfile && old_kind != ProfileKind::Provisioning {
            self.isdps.remove(&old_aid);
        }
        let target = self.isdps.get_mut(aid).unwrap().profile.as_mut().unwrap();
        target.state = ProfileState::Enabled;
        target.fallback = false;
        Ok(())
    }

    /// Disables the enabled profile, handing connectivity to the
    /// fallback-flagged profile if one exists, else to the provisioning
    /// profile. A delete-on-disable mandate executes in the same step.
    pub fn disable_profile(&mut self, aid: &IsdpAid) -> Result<(), CardError> {
        let target = self.isdps.get(aid).ok_or(CardError::NotFound)?;
        let profile = target.profile.as_ref().ok_or(CardError::NotPersonalized)?;
        if profile.state != ProfileState::Enabled {
            return Err(CardError::NotEnabled);
        }
        let decision = policy::check_disable(&profile.pol1);
        let target_kind = profile.kind;
        if !decision.allowed() {
            return Err(CardError::PolicyDenied);
        }

        let successor = self
            .isdps
            .values()
            .find(|p| matches!(&p.profile, Some(pr) if pr.fallback))
            .map(|p| p.aid.clone())
            .unwrap_or_else(|| self.provisioning_aid());
        if successor == *aid {
            // The enabled profile is its own only successor; disabling it
            // would leave the card unreachable.
            return Err(CardError::NoFallbackAvailable);
        }

        {
            let target = self.isdps.get_mut(aid).unwrap().profile.as_mut().unwrap();
            target.state = ProfileState::Disabled;
        }
        if decision.followup == Followup::DeleteProfile && target_kind != ProfileKind::Provisioning
        {
            self.isdps.remove(aid);
        }
        let next = self
            .isdps
            .get_mut(&successor)
            .unwrap()
            .profile
            .as_mut()
            .unwrap();
        next.state = ProfileState::Enabled;
        next.fallback = false;
        Ok(())
    }

    /// Removes an ISD-P. A merely created (orphaned) ISD-P can always be
    /// cleaned up; a personalized one routes through policy, must not be
    /// enabled, and the provisioning profile is protected outright.
    pub fn delete_profile(&mut self, aid: &IsdpAid) -> Result<(), CardError> {
        let isdp = self.isdps.get(aid).ok_or(CardError::NotFound)?;
        match &isdp.profile {
            None => {
                // Orphan cleanup; drop any key agreement aimed at it.
                if matches!(&self.ecka, Some(run) if run.target == EckaTarget::Isdp(aid.clone())) {
                    self.ecka = None;
                }
                self.isdps.remove(aid);
                Ok(())
            }
            Some(profile) => {
                if profile.kind == ProfileKind::Provisioning {
                    return Err(CardError::ProvisioningProtected);
                }
                if profile.state == ProfileState::Enabled {
                    return Err(CardError::CannotDeleteEnabled);
                }
                if !policy::check_delete(&profile.pol1, profile.state).allowed() {
                    return Err(CardError::PolicyDenied);
                }
                self.isdps.remove(aid);
                Ok(())
            }
        }
    }

    /// Sets or clears the fallback attribute. It can only be set on a
    /// single disabled profile; clearing is always allowed.
    pub fn set_fallback(&mut self, aid: &IsdpAid, flag: bool) -> Result<(), CardError> {
        let isdp = self.isdps.get(aid).ok_or(CardError::NotFound)?;
        let profile = isdp.profile.as_ref().ok_or(CardError::NotPersonalized)?;
        if flag {
            if profile.state == ProfileState::Enabled {
                return Err(CardError::ProfileEnabled);
            }
            if !profile.fallback && self.fallback_count() > 0 {
                return Err(CardError::FallbackAlreadySet);
            }
        }
        self.isdps
            .get_mut(aid)
            .unwrap()
            .profile
            .as_mut()
            .unwrap()
            .fallback = flag;
        Ok(())
    }

    /// Replaces the enabled profile's policy rules. The record must
    /// authenticate under that profile's own MNO-SD key; rules only apply
    /// to the enabled profile.
    pub fn update_pol1(&mut self, aid: &IsdpAid, record: &SecureRecord) -> Result<(), CardError> {
        let isdp = self.isdps.get_mut(aid).ok_or(CardError::NotFound)?;
        let profile = isdp.profile.as_mut().ok_or(CardError::NotFound)?;
        if profile.state != ProfileState::Enabled {
            return Err(CardError::NotEnabled);
        }
        let payload = profile
            .mno_session
            .unwrap(record, &aid.0)
            .map_err(CardError::Channel)?;
        if payload.len() != 1 {
            return Err(CardError::MalformedData);
        }
        let rules = Pol1::from_byte(payload[0]).map_err(CardError::ContradictoryRules)?;
        if profile.kind == ProfileKind::Provisioning && rules.delete_on_disable {
            // The provisioning profile can never be deleted, so a mandate
            // that would delete it is unsatisfiable.
            return Err(CardError::PolicyDenied);
        }
        profile.pol1 = rules;
        Ok(())
    }

    /// Commits a pending card key established via the ISD-R key agreement:
    /// the new key becomes live and the old one is erased in one step.
    pub fn replace_smsr_key_commit(&mut self) -> Result<(), CardError> {
        let new_key = self
            .pending_smsr_key
            .take()
            .ok_or(CardError::NoPendingKey)?;
        self.isdr_session = SecureChannelSession::responder(&new_key, version::OTA, "sm-sr");
        self.isdr_key = new_key;
        self.key_generation += 1;
        Ok(())
    }

    // -- snapshot ----------------------------------------------------------------

    /// Stable text document describing the observable provisioning state.
    pub fn snapshot(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "euicc {}", self.eid).unwrap();
        writeln!(
            out,
            "k80 {} generation {}",
            digest8(&self.isdr_key.bytes),
            self.key_generation
        )
        .unwrap();
        writeln!(
            out,
            "pending-key {}",
            self.pending_smsr_key
                .as_ref()
                .map(|k| digest8(&k.bytes))
                .unwrap_or_else(|| "none".into())
        )
        .unwrap();
        writeln!(
            out,
            "ecka {}",
            match &self.ecka {
                None => "none".to_string(),
                Some(run) => match &run.target {
                    EckaTarget::Isdr => "isdr".to_string(),
                    EckaTarget::Isdp(aid) => format!("isdp:{aid}"),
                },
            }
        )
        .unwrap();
        for (aid, isdp) in &self.isdps {
            writeln!(
                out,
                "isdp {} {}",
                aid,
                match isdp.state {
                    IsdpState::Created => "created",
                    IsdpState::Personalized => "personalized",
                }
            )
            .unwrap();
            if let Some(profile) = &isdp.profile {
                writeln!(
                    out,
                    "profile {} {} {} fallback={} pol1={} mno-sd={} naa={}",
                    profile.mno_id,
                    match profile.kind {
                        ProfileKind::Provisioning => "provisioning",
                        ProfileKind::Operational => "operational",
                    },
                    match profile.state {
                        ProfileState::Enabled => "enabled",
                        ProfileState::Disabled => "disabled",
                    },
                    profile.fallback,
                    profile.pol1.to_byte(),
                    digest8(&profile.mno_sd_key.bytes),
                    digest8(&profile.naa_params),
                )
                .unwrap();
            }
        }
        out
    }

    pub fn state_digest(&self) -> String {
        hex::encode(sha256(self.snapshot().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::channel::ChannelRole;
    use crate::crypto::ecka::DpEcka;
    use crate::crypto::keys::Scheme;

    struct Bench {
        ci: CertIssuer,
        card: Euicc,
        rng: SimRng,
    }

    fn bench(seed: u64) -> Bench {
        let mut rng = SimRng::from_seed(seed);
        let ci = CertIssuer::new(&mut rng);
        let (card, _seed) = manufacture(Eid::random(&mut rng), "eum-1", 0, &ci, &mut rng);
        Bench { ci, card, rng }
    }

    fn ctx() -> CommandContext {
        CommandContext::trusted("sm-sr:test")
    }

    /// Full key agreement + installation against the card's public API.
    fn install_operational(b: &mut Bench, mno_id: &str, pol1: Pol1) -> (IsdpAid, SymmetricKey) {
        let aid = b.card.create_isdp(None).unwrap();
        let dp_pair = generate_keypair(&mut b.rng, Scheme::Signature);
        let dp_cert = b.ci.issue("sm-dp", &dp_pair.public);
        let mut dp = DpEcka::new(dp_cert, dp_pair, b.card.ecasd().public_key());

        let cert_msg = dp.certificate_message().unwrap();
        let challenge = b
            .card
            .establish_key_start(EckaTarget::Isdp(aid.clone()), &cert_msg)
            .unwrap();
        let challenge_msg = EckaMessage::Challenge(challenge.try_into().unwrap());
        let signed = dp.on_challenge(&challenge_msg, &mut b.rng).unwrap();
        b.card
            .establish_key_finish(EckaTarget::Isdp(aid.clone()), &signed)
            .unwrap();
        let k = dp.credentials().unwrap();

        let mno_sd_key = SymmetricKey::random(KeyRole::MnoSd, &mut b.rng);
        let profile = Profile::new(
            mno_id.to_string(),
            ProfileKind::Operational,
            pol1,
            mno_sd_key.clone(),
            b"naa".to_vec(),
            ProfileState::Disabled,
        );
        let mut dp_session =
            SecureChannelSession::new(&k, version::PROFILE_INSTALL, ChannelRole::Initiator, "isdp");
        let record = dp_session
            .wrap(&profile.to_install_payload(), &aid.0)
            .unwrap();
        b.card.install_profile(&aid, &record).unwrap();
        (aid, mno_sd_key)
    }

    #[test]
    fn fresh_card_has_single_enabled_provisioning_profile() {
        let b = bench(1);
        assert_eq!(b.card.isdp_count(), 1);
        let isdp = b.card.profiles().next().unwrap();
        let profile = isdp.profile.as_ref().unwrap();
        assert_eq!(profile.kind, ProfileKind::Provisioning);
        assert_eq!(profile.state, ProfileState::Enabled);
        assert_eq!(b.card.enabled_count(), 1);
    }

    #[test]
    fn eis_seed_matches_ecasd() {
        let mut rng = SimRng::from_seed(2);
        let ci = CertIssuer::new(&mut rng);
        let (card, seed) = manufacture(Eid::random(&mut rng), "eum-1", 7, &ci, &mut rng);
        assert_eq!(seed.euicc_public_key, card.ecasd().public_key());
        assert_eq!(seed.euicc_public_key, card.ecasd().certificate.public_key);
        assert!(card.ecasd().certificate.verify(&ci.root_public()));
        assert_eq!(seed.production_date, 7);
    }

    #[test]
    fn manufacture_seed_sweep_distinct_k80() {
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..32 {
            let mut rng = SimRng::from_seed(seed);
            let ci = CertIssuer::new(&mut rng);
            let (_, eis) = manufacture(Eid::random(&mut rng), "eum", 0, &ci, &mut rng);
            assert!(seen.insert(eis.k80.bytes));
        }
    }

    #[test]
    fn create_isdp_assigns_and_rejects_duplicates() {
        let mut b = bench(3);
        let aid = b.card.create_isdp(None).unwrap();
        assert_eq!(b.card.isdp(&aid).unwrap().state, IsdpState::Created);
        assert!(b.card.isdp(&aid).unwrap().profile.is_none());
        assert_eq!(
            b.card.create_isdp(Some(aid.clone())),
            Err(CardError::DuplicateId)
        );
        for _ in 0..3 {
            b.card.create_isdp(None).unwrap();
        }
        assert_eq!(b.card.isdp_count(), 5);
    }

    #[test]
    fn install_lifecycle() {
        let mut b = bench(4);
        let (aid, _) = install_operational(&mut b, "mno-a", Pol1::NONE);
        let isdp = b.card.isdp(&aid).unwrap();
        assert_eq!(isdp.state, IsdpState::Personalized);
        let profile = isdp.profile.as_ref().unwrap();
        assert_eq!(profile.state, ProfileState::Disabled);
        assert!(!isdp.has_install_key(), "install key erased");
    }

    #[test]
    fn tampered_install_record_leaves_isdp_created() {
        let mut b = bench(5);
        let aid = b.card.create_isdp(None).unwrap();
        let dp_pair = generate_keypair(&mut b.rng, Scheme::Signature);
        let dp_cert = b.ci.issue("sm-dp", &dp_pair.public);
        let mut dp = DpEcka::new(dp_cert, dp_pair, b.card.ecasd().public_key());
        let cert_msg = dp.certificate_message().unwrap();
        let challenge = b
            .card
            .establish_key_start(EckaTarget::Isdp(aid.clone()), &cert_msg)
            .unwrap();
        let signed = dp
            .on_challenge(
                &EckaMessage::Challenge(challenge.try_into().unwrap()),
                &mut b.rng,
            )
            .unwrap();
        b.card
            .establish_key_finish(EckaTarget::Isdp(aid.clone()), &signed)
            .unwrap();
        let k = dp.credentials().unwrap();
        let profile = Profile::new(
            "mno-a".into(),
            ProfileKind::Operational,
            Pol1::NONE,
            SymmetricKey::random(KeyRole::MnoSd, &mut b.rng),
            b"naa".to_vec(),
            ProfileState::Disabled,
        );
        let mut dp_session =
            SecureChannelSession::new(&k, version::PROFILE_INSTALL, ChannelRole::Initiator, "isdp");
        let mut record = dp_session
            .wrap(&profile.to_install_payload(), &aid.0)
            .unwrap();
        record.body[3] ^= 0x40;

        let before = b.card.snapshot();
        let err = b.card.install_profile(&aid, &record).unwrap_err();
        assert!(matches!(
            err,
            CardError::Channel(ChannelError::TamperDetected)
        ));
        assert_eq!(b.card.isdp(&aid).unwrap().state, IsdpState::Created);
        assert_eq!(b.card.snapshot(), before);
    }

    #[test]
    fn install_twice_fails() {
        let mut b = bench(6);
        let (aid, _) = install_operational(&mut b, "mno-a", Pol1::NONE);
        let record = SecureRecord {
            version: version::PROFILE_INSTALL,
            counter: 1,
            body: vec![0; 40],
        };
        // The ISD-P is personalized; its install key is gone.
        assert_eq!(
            b.card.install_profile(&aid, &record),
            Err(CardError::NotInstallable)
        );
    }

    #[test]
    fn enable_swaps_atomically() {
        let mut b = bench(7);
        let prov = b.card.provisioning_aid();
        let (aid, _) = install_operational(&mut b, "mno-a", Pol1::NONE);
        b.card.enable_profile(&aid).unwrap();
        assert_eq!(b.card.enabled_aid(), aid);
        let prov_profile = b.card.isdp(&prov).unwrap().profile.as_ref().unwrap();
        assert_eq!(prov_profile.state, ProfileState::Disabled);
        assert_eq!(b.card.enabled_count(), 1);
        assert_eq!(b.card.enable_profile(&aid), Err(CardError::AlreadyEnabled));
    }

    #[test]
    fn enable_deletes_old_profile_on_mandate() {
        let mut b = bench(8);
        let (doomed, _) =
            install_operational(&mut b, "mno-a", Pol1::new(false, false, true).unwrap());
        let (next, _) = install_operational(&mut b, "mno-b", Pol1::NONE);
        b.card.enable_profile(&doomed).unwrap();
        b.card.enable_profile(&next).unwrap();
        assert!(b.card.isdp(&doomed).is_none(), "delete-on-disable executed");
        assert_eq!(b.card.enabled_aid(), next);
    }

    #[test]
    fn enable_blocked_by_lock() {
        let mut b = bench(9);
        let (locked, _) =
            install_operational(&mut b, "mno-a", Pol1::new(true, false, false).unwrap());
        let (other, _) = install_operational(&mut b, "mno-b", Pol1::NONE);
        b.card.enable_profile(&locked).unwrap();
        let before = b.card.snapshot();
        assert_eq!(b.card.enable_profile(&other), Err(CardError::PolicyDenied));
        assert_eq!(b.card.snapshot(), before);
    }

    #[test]
    fn disable_routes_to_fallback_and_clears_flag() {
        let mut b = bench(10);
        let (active, _) = install_operational(&mut b, "mno-a", Pol1::NONE);
        let (standby, _) = install_operational(&mut b, "mno-b", Pol1::NONE);
        b.card.enable_profile(&active).unwrap();
        b.card.set_fallback(&standby, true).unwrap();
        b.card.disable_profile(&active).unwrap();
        assert_eq!(b.card.enabled_aid(), standby);
        let standby_profile = b.card.isdp(&standby).unwrap().profile.as_ref().unwrap();
        assert!(!standby_profile.fallback, "fallback flag cleared on use");
        assert_eq!(b.card.fallback_count(), 0);
    }

    #[test]
    fn disable_without_fallback_routes_to_provisioning() {
        let mut b = bench(11);
        let prov = b.card.provisioning_aid();
        let (active, _) = install_operational(&mut b, "mno-a", Pol1::NONE);
        b.card.enable_profile(&active).unwrap();
        b.card.disable_profile(&active).unwrap();
        assert_eq!(b.card.enabled_aid(), prov);
    }

    #[test]
    fn disable_of_disabled_profile_denied() {
        let mut b = bench(50);
        let (idle, _) = install_operational(&mut b, "mno-a", Pol1::NONE);
        assert_eq!(b.card.disable_profile(&idle), Err(CardError::NotEnabled));
    }

    #[test]
    fn disable_provisioning_without_fallback_denied() {
        let mut b = bench(12);
        let prov = b.card.provisioning_aid();
        assert_eq!(
            b.card.disable_profile(&prov),
            Err(CardError::NoFallbackAvailable)
        );
    }

    #[test]
    fn delete_rules() {
        let mut b = bench(13);
        let (kept, _) =
            install_operational(&mut b, "mno-a", Pol1::new(false, true, false).unwrap());
        let (enabled, _) = install_operational(&mut b, "mno-b", Pol1::NONE);
        b.card.enable_profile(&enabled).unwrap();
        assert_eq!(b.card.delete_profile(&kept), Err(CardError::PolicyDenied));
        assert_eq!(
            b.card.delete_profile(&enabled),
            Err(CardError::CannotDeleteEnabled)
        );
        let prov = b.card.provisioning_aid();
        assert_eq!(
            b.card.delete_profile(&prov),
            Err(CardError::ProvisioningProtected)
        );
        let (gone, _) = install_operational(&mut b, "mno-c", Pol1::NONE);
        b.card.delete_profile(&gone).unwrap();
        assert!(b.card.isdp(&gone).is_none());
        // Orphan cleanup needs no policy.
        let orphan = b.card.create_isdp(None).unwrap();
        b.card.delete_profile(&orphan).unwrap();
        assert!(b.card.isdp(&orphan).is_none());
    }

    #[test]
    fn fallback_singleton_enforced() {
        let mut b = bench(14);
        let (a, _) = install_operational(&mut b, "mno-a", Pol1::NONE);
        let (c, _) = install_operational(&mut b, "mno-b", Pol1::NONE);
        b.card.set_fallback(&a, true).unwrap();
        assert_eq!(
            b.card.set_fallback(&c, true),
            Err(CardError::FallbackAlreadySet)
        );
        let enabled = b.card.enabled_aid();
        assert_eq!(
            b.card.set_fallback(&enabled, true),
            Err(CardError::ProfileEnabled)
        );
        b.card.set_fallback(&a, false).unwrap();
        b.card.set_fallback(&c, true).unwrap();
        assert_eq!(b.card.fallback_count(), 1);
        // Setting an already-set flag is idempotent.
        b.card.set_fallback(&c, true).unwrap();
        assert_eq!(b.card.fallback_count(), 1);
    }

    #[test]
    fn update_pol1_requires_enabled_and_right_key() {
        let mut b = bench(15);
        let (aid, mno_key) = install_operational(&mut b, "mno-a", Pol1::NONE);
        let (_other_aid, other_key) = install_operational(&mut b, "mno-b", Pol1::NONE);

        let wrap_rules = |key: &SymmetricKey, aid: &IsdpAid, rules: Pol1| {
            let mut session = SecureChannelSession::initiator(key, version::MNO_PROFILE, "mno");
            session.wrap(&[rules.to_byte()], &aid.0).unwrap()
        };

        // Disabled profile: denied before any channel work.
        let record = wrap_rules(&mno_key, &aid, Pol1::new(true, false, false).unwrap());
        assert_eq!(b.card.update_pol1(&aid, &record), Err(CardError::NotEnabled));

        b.card.enable_profile(&aid).unwrap();
        let record = wrap_rules(&mno_key, &aid, Pol1::new(true, false, false).unwrap());
        b.card.update_pol1(&aid, &record).unwrap();
        let profile = b.card.isdp(&aid).unwrap().profile.as_ref().unwrap();
        assert!(profile.pol1.disable_disallowed);

        // A record keyed with another profile's MNO-SD key fails the channel.
        let record = wrap_rules(&other_key, &aid, Pol1::NONE);
        assert!(matches!(
            b.card.update_pol1(&aid, &record),
            Err(CardError::Channel(_))
        ));
    }

    #[test]
    fn provisioning_profile_rejects_delete_mandate() {
        let mut b = bench(51);
        let prov = b.card.provisioning_aid();
        let key = b
            .card
            .isdp(&prov)
            .unwrap()
            .profile
            .as_ref()
            .unwrap()
            .mno_sd_key
            .clone();
        let mut session = SecureChannelSession::initiator(&key, version::MNO_PROFILE, "mno");
        let mandate = Pol1::new(false, false, true).unwrap();
        let record = session.wrap(&[mandate.to_byte()], &prov.0).unwrap();
        assert_eq!(
            b.card.update_pol1(&prov, &record),
            Err(CardError::PolicyDenied)
        );
        // A lock, by contrast, is fine.
        let lock = Pol1::new(true, false, false).unwrap();
        let record = session.wrap(&[lock.to_byte()], &prov.0).unwrap();
        b.card.update_pol1(&prov, &record).unwrap();
    }

    #[test]
    fn process_apdu_status_words() {
        let mut b = bench(16);
        let unknown_aid = IsdpAid(vec![0x01, 0x02]);
        let mut data = Vec::new();
        tlv::put(&mut data, tlv::TAG_AID, &unknown_aid.0);
        let enable = ApduCommand::new(CLA_CARD, ins::ENABLE, 0, 0, data, None).unwrap();
        let resp = b.card.process_apdu(&ctx(), &enable);
        assert_eq!(resp.status, sw::REFERENCED_DATA_NOT_FOUND);

        // Locked enabled profile: disable denied with 6985.
        let (locked, _) =
            install_operational(&mut b, "mno-a", Pol1::new(true, false, false).unwrap());
        b.card.enable_profile(&locked).unwrap();
        let mut data = Vec::new();
        tlv::put(&mut data, tlv::TAG_AID, &locked.0);
        let disable = ApduCommand::new(CLA_CARD, ins::DISABLE, 0, 0, data, None).unwrap();
        let before = b.card.snapshot();
        let resp = b.card.process_apdu(&ctx(), &disable);
        assert_eq!(resp.status, sw::CONDITIONS_NOT_SATISFIED);
        assert_eq!(b.card.snapshot(), before, "atomic on error");

        // Valid CREATE_ISDP returns the assigned identifier.
        let create = ApduCommand::header(CLA_CARD, ins::CREATE_ISDP, 0, 0);
        let resp = b.card.process_apdu(&ctx(), &create);
        assert_eq!(resp.status, sw::SUCCESS);
        assert!(!resp.data.is_empty());
        assert!(b.card.isdp(&IsdpAid(resp.data.clone())).is_some());

        // Unknown instruction.
        let bogus = ApduCommand::header(CLA_CARD, 0x42, 0, 0);
        assert_eq!(b.card.process_apdu(&ctx(), &bogus).status, sw::WRONG_DATA);

        // Unauthenticated context.
        let ping = ApduCommand::header(CLA_CARD, ins::PING, 0, 0);
        let unauth = CommandContext {
            peer: "nobody".into(),
            authenticated: false,
        };
        assert_eq!(
            b.card.process_apdu(&unauth, &ping).status,
            sw::SECURITY_STATUS_NOT_SATISFIED
        );
    }

    #[test]
    fn transport_roundtrip_and_nack() {
        let mut rng = SimRng::from_seed(17);
        let ci = CertIssuer::new(&mut rng);
        let (mut card, eis) = manufacture(Eid::random(&mut rng), "eum", 0, &ci, &mut rng);
        let mut smsr_session = SecureChannelSession::initiator(&eis.k80, version::OTA, "card");

        let ping = ApduCommand::new(CLA_CARD, ins::PING, 0, 0, vec![], Some(16)).unwrap();
        let record = smsr_session.wrap(&ping.encode().unwrap(), b"").unwrap();
        let reply_bytes = card.process_record(&record.encode());
        let reply = SecureRecord::decode(&reply_bytes).unwrap();
        let plaintext = smsr_session.unwrap(&reply, b"").unwrap();
        let resp = ApduResponse::decode(&plaintext).unwrap();
        assert_eq!(resp.status, sw::SUCCESS);
        assert_eq!(resp.data, card.eid().0);

        // A record under a wrong key earns an unprotected NACK.
        let wrong = SymmetricKey::random(KeyRole::K80, &mut rng);
        let mut rogue = SecureChannelSession::initiator(&wrong, version::OTA, "card");
        let record = rogue.wrap(&ping.encode().unwrap(), b"").unwrap();
        let reply_bytes = card.process_record(&record.encode());
        let reply = SecureRecord::decode(&reply_bytes).unwrap();
        assert_eq!(reply.version, version::NACK);
        let resp = ApduResponse::decode(&reply.body).unwrap();
        assert_eq!(resp.status, sw::SECURITY_STATUS_NOT_SATISFIED);
    }

    #[test]
    fn key_replacement_is_atomic_and_exclusive() {
        let mut b = bench(18);
        let new_smsr_pair = generate_keypair(&mut b.rng, Scheme::Signature);
        let new_smsr_cert = b.ci.issue("sm-sr-2", &new_smsr_pair.public);
        let mut dp = DpEcka::new(new_smsr_cert, new_smsr_pair, b.card.ecasd().public_key());
        let cert_msg = dp.certificate_message().unwrap();
        let challenge = b
            .card
            .establish_key_start(EckaTarget::Isdr, &cert_msg)
            .unwrap();
        let signed = dp
            .on_challenge(
                &EckaMessage::Challenge(challenge.try_into().unwrap()),
                &mut b.rng,
            )
            .unwrap();

        // Commit without an established key: nothing changes.
        let old_key = b.card.isdr_key.clone();
        assert_eq!(
            b.card.replace_smsr_key_commit(),
            Err(CardError::NoPendingKey)
        );
        assert_eq!(b.card.isdr_key, old_key);

        b.card
            .establish_key_finish(EckaTarget::Isdr, &signed)
            .unwrap();
        assert!(b.card.pending_smsr_key.is_some());
        assert_eq!(b.card.isdr_key, old_key, "pending until commit");

        b.card.replace_smsr_key_commit().unwrap();
        let new_key = dp.credentials().unwrap();
        assert_eq!(b.card.isdr_key.bytes, new_key.bytes);
        assert_eq!(b.card.isdr_key.role, KeyRole::K80);
        assert!(b.card.pending_smsr_key.is_none());
        assert_eq!(b.card.key_generation(), 1);

        // Records under the old key are NACKed now.
        let mut old_session = SecureChannelSession::initiator(&old_key, version::OTA, "card");
        let ping = ApduCommand::header(CLA_CARD, ins::PING, 0, 0);
        let record = old_session.wrap(&ping.encode().unwrap(), b"").unwrap();
        let reply = SecureRecord::decode(&b.card.process_record(&record.encode())).unwrap();
        assert_eq!(reply.version, version::NACK);

        // And the new key works immediately.
        let new_k80 = SymmetricKey::new(KeyRole::K80, new_key.bytes);
        let mut new_session = SecureChannelSession::initiator(&new_k80, version::OTA, "card");
        let record = new_session.wrap(&ping.encode().unwrap(), b"").unwrap();
        let reply = SecureRecord::decode(&b.card.process_record(&record.encode())).unwrap();
        let resp = ApduResponse::decode(&new_session.unwrap(&reply, b"").unwrap()).unwrap();
        assert_eq!(resp.status, sw::SUCCESS);
    }

    #[test]
    fn snapshot_is_stable_and_key_free() {
        let b = bench(19);
        let snap1 = b.card.snapshot();
        let snap2 = b.card.snapshot();
        assert_eq!(snap1, snap2);
        assert_eq!(b.card.state_digest().len(), 64);
        assert!(snap1.contains("provisioning"));
        assert!(!snap1.contains(&hex::encode(b.card.isdr_key.bytes)));
    }
}
