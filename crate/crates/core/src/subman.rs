//! Off-card actors — SM-DP (profile generation and transfer), SM-SR (EIS
//! registry, secure routing, handover), MNO, EUM — and the orchestrated
//! procedures that drive them over the simulated network.
//!
//! [`World`] owns every actor, every card, and the network, and executes
//! the multi-step procedures (profile download, policy update, SM-SR
//! change) leg by leg: each message really crosses the network, so fault
//! rules apply and everything lands in the trace. One procedure runs at a
//! time per card; distinct cards could interleave but the driver is
//! single-threaded by design.
//!
//! Failure handling is rollback-based: a procedure snapshots the registry
//! entry it touches, attempts the flow, and on any failed leg restores the
//! entry and cleans up whatever the card had already built (orphaned
//! ISD-Ps are deleted, key-agreement runs cancelled). Card-side atomicity
//! is the card's own contract.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apdu::{ins, tlv, ApduCommand, ApduResponse, CLA_CARD};
use crate::crypto::channel::{version, SecureChannelSession, SecureRecord};
use crate::crypto::ecka::{DpEcka, EckaMessage};
use crate::crypto::kdf::{KeyRole, SymmetricKey};
use crate::crypto::keys::{generate_keypair, CertIssuer, Certificate, KeyPair, PublicKey, Scheme};
use crate::euicc::{manufacture, Eid, EisSeed, Euicc, IsdpAid, ProfileKind};
use crate::network::{ActorId, Envelope, FaultPlan, FaultRule, LayerTag, Network, TraceEvent};
use crate::policy::{Pol1, ProfileState};
use crate::rng::SimRng;

/// Per-card registry entry held by the serving SM-SR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EisRecord {
    pub eid: Eid,
    pub eum_id: String,
    pub production_date: u64,
    pub euicc_public_key: PublicKey,
    pub k80: SymmetricKey,
    pub profiles: Vec<EisProfileEntry>,
    /// Next ISD-P sequence this SM-SR will assign on the card.
    pub next_isdp_seq: u16,
}

/// The policy mirror is maintained by the operator and may lag the card.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EisProfileEntry {
    pub isdp_aid: IsdpAid,
    pub mno_id: String,
    pub state: ProfileState,
    pub pol1_mirror: Pol1,
}

impl EisRecord {
    /// Builds the registry entry from the manufacturer's seed. The factory
    /// provisioning profile always sits at ISD-P sequence 1.
    pub fn from_seed(seed: &EisSeed) -> Self {
        EisRecord {
            eid: seed.eid,
            eum_id: seed.eum_id.clone(),
            production_date: seed.production_date,
            euicc_public_key: seed.euicc_public_key.clone(),
            k80: seed.k80.clone(),
            profiles: vec![EisProfileEntry {
                isdp_aid: IsdpAid::assigned(1),
                mno_id: "provisioning".to_string(),
                state: ProfileState::Enabled,
                pol1_mirror: Pol1::NONE,
            }],
            next_isdp_seq: 2,
        }
    }

    pub fn entry(&self, aid: &IsdpAid) -> Option<&EisProfileEntry> {
        self.profiles.iter().find(|p| p.isdp_aid == *aid)
    }

    /// Reconciles lifecycle state with what the card reports: states are
    /// updated and vanished profiles dropped, while the operator-maintained
    /// policy mirrors are left untouched.
    fn sync_states(&mut self, card_view: &[(IsdpAid, ProfileState)]) {
        self.profiles.retain(|entry| {
            card_view.iter().any(|(aid, _)| *aid == entry.isdp_aid)
        });
        for entry in &mut self.profiles {
            if let Some((_, state)) = card_view.iter().find(|(aid, _)| *aid == entry.isdp_aid) {
                entry.state = *state;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownloadRequest {
    pub eid: Eid,
    pub profile_type: String,
    pub mno_id: String,
}

/// Generates the operational profile for a download request: fresh MNO-SD
/// key, opaque subscription payload, policy rules from the request
/// (all-false when unspecified).
pub fn smdp_build_profile(
    rng: &mut SimRng,
    request: &DownloadRequest,
    pol1: Option<Pol1>,
) -> crate::euicc::Profile {
    crate::euicc::Profile::new(
        request.mno_id.clone(),
        ProfileKind::Operational,
        pol1.unwrap_or(Pol1::NONE),
        SymmetricKey::random(KeyRole::MnoSd, rng),
        rng.bytes::<16>().to_vec(),
        ProfileState::Disabled,
    )
}

/// Versioned actor-to-actor coordination message; serialized as JSON and
/// logged verbatim in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActorMsg {
    EisRegister { v: u8, seed: EisSeed },
    DownloadRequest { v: u8, request: DownloadRequest },
    EuiccKeyResult { v: u8, eid: Eid, public_key: PublicKey },
    EckaResult { v: u8, eid: Eid, ok: bool, data: Vec<u8> },
    InstallResult { v: u8, eid: Eid, status: u16 },
    DownloadDone { v: u8, eid: Eid, aid: IsdpAid, mno_sd_key: SymmetricKey },
    MirrorUpdate { v: u8, eid: Eid, aid: IsdpAid, rules: Pol1 },
    Pol1Result { v: u8, eid: Eid, status: u16 },
    ChangeRequest { v: u8, eid: Eid, from: String },
    ChangeAccept { v: u8, eid: Eid, ok: bool },
    StartChange { v: u8, eid: Eid, to: String },
    EisHandover { v: u8, eis: Box<EisRecord> },
}

impl ActorMsg {
    fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("actor message serializes")
    }

    fn decode(raw: &[u8]) -> Option<ActorMsg> {
        serde_json::from_slice(raw).ok()
    }
}

const MSG_V: u8 = 1;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum ProcedureError {
    #[error("no such actor: {0}")]
    UnknownActor(String),
    #[error("card is not registered at any SM-SR")]
    UnknownEid,
    #[error("card is registered at another SM-SR")]
    DuplicateEid,
    #[error("card is not embedded in a device yet")]
    CardNotReachable,
    #[error("the operator holds no subscription for this card")]
    NoSubscription,
    #[error("ISD-P creation failed: {0}")]
    IsdpCreationFailed(String),
    #[error("key agreement failed: {0}")]
    KeyAgreementFailed(String),
    #[error("profile installation rejected: {0}")]
    InstallRejected(String),
    #[error("the new SM-SR refused management of the card")]
    CapabilityRefused,
    #[error("key establishment with the card failed: {0}")]
    EstablishmentFailed(String),
    #[error("card returned status {status:04X}")]
    CommandFailed { status: u16 },
    #[error("transport failure: {0}")]
    Transport(String),
}

impl ProcedureError {
    /// Status word attached to the failure, when the card answered at all.
    pub fn status(&self) -> Option<u16> {
        match self {
            ProcedureError::CommandFailed { status } => Some(*status),
            _ => None,
        }
    }
}

/// SM-SR: the single manager of its cards — registry, secure routing,
/// handover endpoint.
#[derive(Debug, Clone)]
pub struct SmSr {
    pub id: String,
    /// Declared management capacity (handover step-2 predicate).
    pub capacity: usize,
    registry: BTreeMap<Eid, EisRecord>,
    sessions: BTreeMap<Eid, SecureChannelSession>,
    certificate: Certificate,
    keypair: KeyPair,
    inbox: VecDeque<Envelope>,
}

impl SmSr {
    /// Adopts a card: registry entry plus a live transport session.
    pub fn register(&mut self, eis: EisRecord) -> Result<(), ProcedureError> {
        if self.registry.contains_key(&eis.eid) {
            return Err(ProcedureError::DuplicateEid);
        }
        self.sessions.insert(
            eis.eid,
            SecureChannelSession::initiator(&eis.k80, version::OTA, "card"),
        );
        self.registry.insert(eis.eid, eis);
        Ok(())
    }

    pub fn holds(&self, eid: &Eid) -> bool {
        self.registry.contains_key(eid)
    }

    pub fn eis(&self, eid: &Eid) -> Option<&EisRecord> {
        self.registry.get(eid)
    }

    pub fn registry_len(&self) -> usize {
        self.registry.len()
    }

    pub fn records(&self) -> impl Iterator<Item = &EisRecord> {
        self.registry.values()
    }
}

/// SM-DP: builds profiles and transfers them through the serving SM-SR.
/// The installation credentials live here only inside a download and are
/// erased once the wrapped profile has been sent.
#[derive(Debug, Clone)]
pub struct SmDp {
    pub id: String,
    certificate: Certificate,
    keypair: KeyPair,
    held_credentials: Option<SymmetricKey>,
    inbox: VecDeque<Envelope>,
}

impl SmDp {
    /// True while the installation key is in memory (between derivation and
    /// the end of the transfer step).
    pub fn holds_credentials(&self) -> bool {
        self.held_credentials.is_some()
    }
}

/// Mobile network operator: subscriptions, owned profiles and their MNO-SD
/// keys, live operator channels.
#[derive(Debug, Clone)]
pub struct Mno {
    pub id: String,
    subscriptions: Vec<(Eid, String)>,
    owned: BTreeMap<(Eid, IsdpAid), SymmetricKey>,
    sessions: BTreeMap<(Eid, IsdpAid), SecureChannelSession>,
    inbox: VecDeque<Envelope>,
}

impl Mno {
    pub fn owns(&self, eid: Eid, aid: &IsdpAid) -> bool {
        self.owned.contains_key(&(eid, aid.clone()))
    }
}

#[derive(Debug, Clone)]
struct CardSlot {
    card: Euicc,
    eum_id: String,
    embedded: bool,
    /// Seed held by the EUM until registration.
    seed: Option<EisSeed>,
}

/// The whole simulated ecosystem: actors, cards, network, trust root.
#[derive(Debug)]
pub struct World {
    pub net: Network,
    ci: CertIssuer,
    rng: SimRng,
    cards: BTreeMap<String, CardSlot>,
    eums: BTreeMap<String, ()>,
    smsrs: BTreeMap<String, SmSr>,
    smdps: BTreeMap<String, SmDp>,
    mnos: BTreeMap<String, Mno>,
    production_counter: u64,
}

/// Upper bound on rounds per pump; procedures treat a quiet network as a
/// timeout for whatever they were waiting on.
const MAX_ROUNDS_PER_PUMP: u64 = 64;

impl World {
    pub fn new(seed: u64, plan: FaultPlan) -> Self {
        let mut rng = SimRng::from_seed(seed);
        let ci = CertIssuer::new(&mut rng.fork("ci"));
        World {
            net: Network::new(plan),
            ci,
            rng,
            cards: BTreeMap::new(),
            eums: BTreeMap::new(),
            smsrs: BTreeMap::new(),
            smdps: BTreeMap::new(),
            mnos: BTreeMap::new(),
            production_counter: 0,
        }
    }

    pub fn ci_root(&self) -> PublicKey {
        self.ci.root_public()
    }

    // -- actor setup ---------------------------------------------------------

    pub fn add_eum(&mut self, id: &str) {
        self.eums.insert(id.to_string(), ());
        self.net.register(ActorId::new(id));
    }

    pub fn add_smsr(&mut self, id: &str, capacity: usize) {
        let keypair = generate_keypair(&mut self.rng, Scheme::Signature);
        let certificate = self.ci.issue(id, &keypair.public);
        self.smsrs.insert(
            id.to_string(),
            SmSr {
                id: id.to_string(),
                capacity,
                registry: BTreeMap::new(),
                sessions: BTreeMap::new(),
                certificate,
                keypair,
                inbox: VecDeque::new(),
            },
        );
        self.net.register(ActorId::new(id));
    }

    pub fn add_smdp(&mut self, id: &str) {
        let keypair = generate_keypair(&mut self.rng, Scheme::Signature);
        let certificate = self.ci.issue(id, &keypair.public);
        self.smdps.insert(
            id.to_string(),
            SmDp {
                id: id.to_string(),
                certificate,
                keypair,
                held_credentials: None,
                inbox: VecDeque::new(),
            },
        );
        self.net.register(ActorId::new(id));
    }

    pub fn add_mno(&mut self, id: &str) {
        self.mnos.insert(
            id.to_string(),
            Mno {
                id: id.to_string(),
                subscriptions: Vec::new(),
                owned: BTreeMap::new(),
                sessions: BTreeMap::new(),
                inbox: VecDeque::new(),
            },
        );
        self.net.register(ActorId::new(id));
    }

    // -- accessors -------------------------------------------------------------

    pub fn card(&self, name: &str) -> Option<&Euicc> {
        self.cards.get(name).map(|slot| &slot.card)
    }

    pub fn card_mut(&mut self, name: &str) -> Option<&mut Euicc> {
        self.cards.get_mut(name).map(|slot| &mut slot.card)
    }

    pub fn smsr(&self, id: &str) -> Option<&SmSr> {
        self.smsrs.get(id)
    }

    pub fn smsrs(&self) -> impl Iterator<Item = &SmSr> {
        self.smsrs.values()
    }

    pub fn smdp(&self, id: &str) -> Option<&SmDp> {
        self.smdps.get(id)
    }

    pub fn mno(&self, id: &str) -> Option<&Mno> {
        self.mnos.get(id)
    }

    pub fn card_names(&self) -> impl Iterator<Item = &String> {
        self.cards.keys()
    }

    /// The single SM-SR currently holding this card's registry entry.
    pub fn owner_of(&self, eid: Eid) -> Option<&str> {
        self.smsrs
            .values()
            .find(|smsr| smsr.holds(&eid))
            .map(|smsr| smsr.id.as_str())
    }

    /// How many registries hold this card — 1 whenever the card is
    /// registered and the world is quiescent.
    pub fn owner_count(&self, eid: Eid) -> usize {
        self.smsrs.values().filter(|smsr| smsr.holds(&eid)).count()
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.net.trace()
    }

    /// Loads a persisted registry entry into an SM-SR (used by the CLI's
    /// registry file). The transport session restarts with the stored key.
    pub fn restore_eis(&mut self, smsr_id: &str, eis: EisRecord) -> Result<(), ProcedureError> {
        if self.owner_of(eis.eid).is_some() {
            return Err(ProcedureError::DuplicateEid);
        }
        self.smsrs
            .get_mut(smsr_id)
            .ok_or_else(|| ProcedureError::UnknownActor(smsr_id.to_string()))?
            .register(eis)
    }

    pub fn add_fault_rule(&mut self, rule: FaultRule) {
        self.net.add_fault_rule(rule);
    }

    // -- plumbing ----------------------------------------------------------------


    fn send_plain(&mut self, src: &str, dst: &str, msg: &ActorMsg) -> Result<(), ProcedureError> {
        self.net
            .send(Envelope {
                src: ActorId::new(src),
                dst: ActorId::new(dst),
                layer: LayerTag::ActorPlain,
                payload: msg.encode(),
                seq: 0,
            })
            .map_err(|e| ProcedureError::Transport(e.to_string()))
    }

    /// Steps the network until quiet, routing every delivery: card-bound
    /// records hit the card transport (replies go straight back out),
    /// actor-bound envelopes queue in the recipient's inbox.
    fn pump(&mut self) {
        for _ in 0..MAX_ROUNDS_PER_PUMP {
            if self.net.idle() {
                break;
            }
            let delivered = self.net.step();
            for env in delivered {
                self.route(env);
            }
        }
    }

    fn route(&mut self, env: Envelope) {
        let dst = env.dst.0.clone();
        if let Some(slot) = self.cards.get_mut(&dst) {
            let reply = slot.card.process_record(&env.payload);
            // Replies carry only status words and public identifiers.
            let _ = self.net.send(Envelope {
                src: env.dst,
                dst: env.src,
                layer: LayerTag::OtaIsdr,
                payload: reply,
                seq: 0,
            });
        } else if let Some(smsr) = self.smsrs.get_mut(&dst) {
            smsr.inbox.push_back(env);
        } else if let Some(smdp) = self.smdps.get_mut(&dst) {
            smdp.inbox.push_back(env);
        } else if let Some(mno) = self.mnos.get_mut(&dst) {
            mno.inbox.push_back(env);
        }
        // EUMs never receive anything in the modeled flows.
    }

    /// Procedures are the quiescent boundaries of the simulation; anything
    /// still sitting in an inbox at a boundary is fault debris.
    fn clear_inboxes(&mut self) {
        for smsr in self.smsrs.values_mut() {
            smsr.inbox.clear();
        }
        for smdp in self.smdps.values_mut() {
            smdp.inbox.clear();
        }
        for mno in self.mnos.values_mut() {
            mno.inbox.clear();
        }
    }

    fn take_from(inbox: &mut VecDeque<Envelope>, src: &str) -> Option<Envelope> {
        let index = inbox.iter().position(|env| env.src.0 == src)?;
        inbox.remove(index)
    }

    /// Wraps one command for the card, pushes it through the network, and
    /// awaits the reply on the serving SM-SR's session. Timeouts, tampered
    /// replies, and transport NACKs all surface as errors.
    fn smsr_command(
        &mut self,
        smsr_id: &str,
        card_name: &str,
        cmd: &ApduCommand,
        layer: LayerTag,
    ) -> Result<ApduResponse, ProcedureError> {
        let eid = self
            .cards
            .get(card_name)
            .ok_or_else(|| ProcedureError::UnknownActor(card_name.to_string()))?
            .card
            .eid();
        let smsr = self
            .smsrs
            .get_mut(smsr_id)
            .ok_or_else(|| ProcedureError::UnknownActor(smsr_id.to_string()))?;
        let session = smsr
            .sessions
            .get_mut(&eid)
            .ok_or(ProcedureError::UnknownEid)?;
        let record = session
            .wrap(
                &cmd.encode()
                    .map_err(|e| ProcedureError::Transport(e.to_string()))?,
                b"",
            )
            .map_err(|e| ProcedureError::Transport(e.to_string()))?;
        self.net
            .send(Envelope {
                src: ActorId::new(smsr_id),
                dst: ActorId::new(card_name),
                layer,
                payload: record.encode(),
                seq: 0,
            })
            .map_err(|e| ProcedureError::Transport(e.to_string()))?;
        self.pump();

        let smsr = self.smsrs.get_mut(smsr_id).unwrap();
        let env = Self::take_from(&mut smsr.inbox, card_name)
            .ok_or_else(|| ProcedureError::Transport("timeout waiting for card".into()))?;
        let record = SecureRecord::decode(&env.payload)
            .map_err(|e| ProcedureError::Transport(e.to_string()))?;
        if record.version == version::NACK {
            let resp = ApduResponse::decode(&record.body)
                .map_err(|e| ProcedureError::Transport(e.to_string()))?;
            return Ok(resp);
        }
        let session = smsr.sessions.get_mut(&eid).unwrap();
        let plaintext = session
            .unwrap(&record, b"")
            .map_err(|e| ProcedureError::Transport(e.to_string()))?;
        ApduResponse::decode(&plaintext).map_err(|e| ProcedureError::Transport(e.to_string()))
    }

    fn sync_eis(&mut self, smsr_id: &str, card_name: &str) {
        let view: Vec<(IsdpAid, ProfileState)> = self.cards[card_name]
            .card
            .profiles()
            .filter_map(|isdp| {
                isdp.profile
                    .as_ref()
                    .map(|p| (isdp.aid.clone(), p.state))
            })
            .collect();
        let eid = self.cards[card_name].card.eid();
        if let Some(eis) = self
            .smsrs
            .get_mut(smsr_id)
            .and_then(|smsr| smsr.registry.get_mut(&eid))
        {
            eis.sync_states(&view);
        }
    }

    fn resolve_owner(&self, card_name: &str) -> Result<(Eid, String), ProcedureError> {
        let slot = self
            .cards
            .get(card_name)
            .ok_or_else(|| ProcedureError::UnknownActor(card_name.to_string()))?;
        let eid = slot.card.eid();
        let owner = self.owner_of(eid).ok_or(ProcedureError::UnknownEid)?;
        Ok((eid, owner.to_string()))
    }

    // -- distribution-chain steps ---------------------------------------------

    /// Fabricates a card under the given EUM. The registration seed stays
    /// with the EUM until [`World::register_eis`].
    pub fn manufacture_card(&mut self, name: &str, eum_id: &str) -> Result<Eid, ProcedureError> {
        if !self.eums.contains_key(eum_id) {
            return Err(ProcedureError::UnknownActor(eum_id.to_string()));
        }
        let eid = Eid::random(&mut self.rng);
        self.production_counter += 1;
        let (card, seed) = manufacture(
            eid,
            eum_id,
            self.production_counter,
            &self.ci,
            &mut self.rng,
        );
        self.cards.insert(
            name.to_string(),
            CardSlot {
                card,
                eum_id: eum_id.to_string(),
                embedded: false,
                seed: Some(seed),
            },
        );
        Ok(eid)
    }

    /// The EUM sends the card's registry entry to its first SM-SR.
    pub fn register_eis(&mut self, card_name: &str, smsr_id: &str) -> Result<(), ProcedureError> {
        self.clear_inboxes();
        let slot = self
            .cards
            .get(card_name)
            .ok_or_else(|| ProcedureError::UnknownActor(card_name.to_string()))?;
        let eid = slot.card.eid();
        if self.owner_of(eid).is_some() {
            return Err(ProcedureError::DuplicateEid);
        }
        if !self.smsrs.contains_key(smsr_id) {
            return Err(ProcedureError::UnknownActor(smsr_id.to_string()));
        }
        let eum_id = slot.eum_id.clone();
        let seed = self
            .cards
            .get_mut(card_name)
            .unwrap()
            .seed
            .take()
            .ok_or(ProcedureError::DuplicateEid)?;

        self.send_plain(&eum_id, smsr_id, &ActorMsg::EisRegister { v: MSG_V, seed })?;
        self.pump();

        let smsr = self.smsrs.get_mut(smsr_id).unwrap();
        let env = Self::take_from(&mut smsr.inbox, &eum_id)
            .ok_or_else(|| ProcedureError::Transport("registration lost".into()))?;
        match ActorMsg::decode(&env.payload) {
            Some(ActorMsg::EisRegister { seed, .. }) => smsr.register(EisRecord::from_seed(&seed)),
            _ => Err(ProcedureError::Transport("malformed registration".into())),
        }
    }

    /// Device manufacturer step: the card becomes reachable over the air.
    pub fn embed(&mut self, card_name: &str) -> Result<(), ProcedureError> {
        let slot = self
            .cards
            .get_mut(card_name)
            .ok_or_else(|| ProcedureError::UnknownActor(card_name.to_string()))?;
        slot.embedded = true;
        self.net.register(ActorId::new(card_name));
        Ok(())
    }

    /// Subscription bookkeeping at the operator.
    pub fn subscribe(
        &mut self,
        mno_id: &str,
        card_name: &str,
        profile_type: &str,
    ) -> Result<(), ProcedureError> {
        let eid = self
            .cards
            .get(card_name)
            .ok_or_else(|| ProcedureError::UnknownActor(card_name.to_string()))?
            .card
            .eid();
        let mno = self
            .mnos
            .get_mut(mno_id)
            .ok_or_else(|| ProcedureError::UnknownActor(mno_id.to_string()))?;
        mno.subscriptions.push((eid, profile_type.to_string()));
        Ok(())
    }

    // -- profile download -------------------------------------------------------

    /// The full download-and-install flow: request to the SM-DP, ISD-P
    /// creation through the serving SM-SR, key agreement between the SM-DP
    /// and the ISD-P, encrypted transfer, installation. On success the card
    /// holds a new personalized, disabled profile; the registry lists it;
    /// the SM-DP retains no installation key. Any failed leg rolls the
    /// registry entry and the card back to the pre-call state.
    pub fn download_profile(
        &mut self,
        card_name: &str,
        mno_id: &str,
        smdp_id: &str,
        pol1: Option<Pol1>,
    ) -> Result<IsdpAid, ProcedureError> {
        self.clear_inboxes();
        let (eid, smsr_id) = self.resolve_owner(card_name)?;
        if !self.cards[card_name].embedded {
            return Err(ProcedureError::CardNotReachable);
        }
        if !self.smdps.contains_key(smdp_id) {
            return Err(ProcedureError::UnknownActor(smdp_id.to_string()));
        }
        let mno = self
            .mnos
            .get(mno_id)
            .ok_or_else(|| ProcedureError::UnknownActor(mno_id.to_string()))?;
        let profile_type = mno
            .subscriptions
            .iter()
            .find(|(sub_eid, _)| *sub_eid == eid)
            .map(|(_, t)| t.clone())
            .ok_or(ProcedureError::NoSubscription)?;

        let eis_backup = self.smsrs[&smsr_id].registry[&eid].clone();
        let result =
            self.download_inner(card_name, mno_id, smdp_id, &smsr_id, eid, &profile_type, pol1);
        if result.is_err() {
            // Restore the registry entry and erase anything the SM-DP held.
            self.smsrs
                .get_mut(&smsr_id)
                .unwrap()
                .registry
                .insert(eid, eis_backup);
            self.smdps.get_mut(smdp_id).unwrap().held_credentials = None;
        }
        result
    }

    #[allow(clippy::too_many_arguments)]
    fn download_inner(
        &mut self,
        card_name: &str,
        mno_id: &str,
        smdp_id: &str,
        smsr_id: &str,
        eid: Eid,
        profile_type: &str,
        pol1: Option<Pol1>,
    ) -> Result<IsdpAid, ProcedureError> {
        // Step 1: the operator asks the SM-DP to download its profile.
        let request = DownloadRequest {
            eid,
            profile_type: profile_type.to_string(),
            mno_id: mno_id.to_string(),
        };
        self.send_plain(
            mno_id,
            smdp_id,
            &ActorMsg::DownloadRequest {
                v: MSG_V,
                request: request.clone(),
            },
        )?;
        self.pump();
        let smdp = self.smdps.get_mut(smdp_id).unwrap();
        let env = Self::take_from(&mut smdp.inbox, mno_id)
            .ok_or_else(|| ProcedureError::Transport("download request lost".into()))?;
        let request = match ActorMsg::decode(&env.payload) {
            Some(ActorMsg::DownloadRequest { request, .. }) => request,
            _ => return Err(ProcedureError::Transport("malformed download request".into())),
        };

        // Step 2: the SM-DP builds the profile and asks for an ISD-P.
        let profile = smdp_build_profile(&mut self.rng, &request, pol1);
        let aid = {
            let eis = self
                .smsrs
                .get_mut(smsr_id)
                .unwrap()
                .registry
                .get_mut(&eid)
                .unwrap();
            let aid = IsdpAid::assigned(eis.next_isdp_seq);
            eis.next_isdp_seq += 1;
            aid
        };

        // Step 3: the SM-SR instructs the ISD-R to create the ISD-P.
        let mut data = Vec::new();
        tlv::put(&mut data, tlv::TAG_AID, &aid.0);
        let create = ApduCommand::new(CLA_CARD, ins::CREATE_ISDP, 0, 0, data, None)
            .expect("create command");
        match self.smsr_command(smsr_id, card_name, &create, LayerTag::OtaIsdr) {
            Ok(resp) if resp.is_success() => {}
            Ok(resp) => {
                return Err(ProcedureError::IsdpCreationFailed(format!(
                    "status {:04X}",
                    resp.status
                )))
            }
            Err(err) => {
                // The command may have landed even though the reply is
                // gone; remove the orphan (status is irrelevant).
                self.cleanup_isdp(smsr_id, card_name, &aid);
                return Err(ProcedureError::IsdpCreationFailed(err.to_string()));
            }
        }

        // Step 4: key agreement between SM-DP and the new ISD-P, relayed
        // through the serving SM-SR's channel.
        let card_public = self.smsrs[smsr_id].registry[&eid].euicc_public_key.clone();
        let smdp = self.smdps.get(smdp_id).unwrap();
        let mut dp = DpEcka::new(
            smdp.certificate.clone(),
            smdp.keypair.clone(),
            card_public,
        );
        let open = dp
            .certificate_message()
            .map_err(|e| ProcedureError::KeyAgreementFailed(e.to_string()))?;
        let challenge = match self.establish_key_leg(smsr_id, card_name, 0x01, Some(&aid), &open) {
            Ok(data) => data,
            Err(err) => {
                self.cleanup_isdp(smsr_id, card_name, &aid);
                return Err(ProcedureError::KeyAgreementFailed(err.to_string()));
            }
        };
        let challenge: [u8; 16] = match challenge.try_into() {
            Ok(c) => c,
            Err(_) => {
                self.cleanup_isdp(smsr_id, card_name, &aid);
                return Err(ProcedureError::KeyAgreementFailed("bad challenge".into()));
            }
        };
        let signed = dp
            .on_challenge(&EckaMessage::Challenge(challenge), &mut self.rng)
            .map_err(|e| ProcedureError::KeyAgreementFailed(e.to_string()))?;
        if let Err(err) = self.establish_key_leg(smsr_id, card_name, 0x02, Some(&aid), &signed) {
            self.cleanup_isdp(smsr_id, card_name, &aid);
            return Err(ProcedureError::KeyAgreementFailed(err.to_string()));
        }
        let credentials = dp
            .credentials()
            .map_err(|e| ProcedureError::KeyAgreementFailed(e.to_string()))?;
        self.smdps.get_mut(smdp_id).unwrap().held_credentials = Some(credentials.clone());

        // Steps 5–6: wrap the profile under the credentials and send it.
        // The key is installation-scoped: erased as soon as the record is
        // on its way.
        let mno_sd_key = profile.mno_sd_key.clone();
        let mut install_session =
            SecureChannelSession::initiator(&credentials, version::PROFILE_INSTALL, "isdp");
        let record = install_session
            .wrap(&profile.to_install_payload(), &aid.0)
            .map_err(|e| ProcedureError::InstallRejected(e.to_string()))?;
        self.smdps.get_mut(smdp_id).unwrap().held_credentials = None;

        let mut data = Vec::new();
        tlv::put(&mut data, tlv::TAG_AID, &aid.0);
        tlv::put(&mut data, tlv::TAG_RECORD, &record.encode());
        let install = ApduCommand::new(CLA_CARD, ins::INSTALL_PROFILE, 0, 0, data, None)
            .expect("install command");
        // Step 7: the ISD-P decrypts and installs.
        match self.smsr_command(smsr_id, card_name, &install, LayerTag::DpIsdp) {
            Ok(resp) if resp.is_success() => {}
            Ok(resp) => {
                self.cleanup_isdp(smsr_id, card_name, &aid);
                return Err(ProcedureError::InstallRejected(format!(
                    "status {:04X}",
                    resp.status
                )));
            }
            Err(err) => {
                self.cleanup_isdp(smsr_id, card_name, &aid);
                return Err(ProcedureError::InstallRejected(err.to_string()));
            }
        }

        // Bookkeeping: registry entry, operator notification.
        {
            let eis = self
                .smsrs
                .get_mut(smsr_id)
                .unwrap()
                .registry
                .get_mut(&eid)
                .unwrap();
            eis.profiles.push(EisProfileEntry {
                isdp_aid: aid.clone(),
                mno_id: mno_id.to_string(),
                state: ProfileState::Disabled,
                pol1_mirror: pol1.unwrap_or(Pol1::NONE),
            });
        }
        self.send_plain(
            smdp_id,
            mno_id,
            &ActorMsg::DownloadDone {
                v: MSG_V,
                eid,
                aid: aid.clone(),
                mno_sd_key: mno_sd_key.clone(),
            },
        )?;
        self.pump();
        let mno = self.mnos.get_mut(mno_id).unwrap();
        if let Some(env) = Self::take_from(&mut mno.inbox, smdp_id) {
            if let Some(ActorMsg::DownloadDone {
                eid, aid, mno_sd_key, ..
            }) = ActorMsg::decode(&env.payload)
            {
                mno.owned.insert((eid, aid.clone()), mno_sd_key.clone());
                mno.sessions.insert(
                    (eid, aid),
                    SecureChannelSession::initiator(&mno_sd_key, version::MNO_PROFILE, "mno-sd"),
                );
            }
        }
        Ok(aid)
    }

    /// One ESTABLISH_KEY round trip, relayed over the given SM-SR channel.
    fn establish_key_leg(
        &mut self,
        smsr_id: &str,
        card_name: &str,
        phase: u8,
        isdp: Option<&IsdpAid>,
        msg: &EckaMessage,
    ) -> Result<Vec<u8>, ProcedureError> {
        let mut data = Vec::new();
        if let Some(aid) = isdp {
            tlv::put(&mut data, tlv::TAG_AID, &aid.0);
        }
        tlv::put(&mut data, tlv::TAG_ECKA, &msg.to_bytes());
        let p2 = if isdp.is_some() { 0x01 } else { 0x00 };
        let cmd = ApduCommand::new(CLA_CARD, ins::ESTABLISH_KEY, phase, p2, data, None)
            .map_err(|e| ProcedureError::Transport(e.to_string()))?;
        let resp = self.smsr_command(smsr_id, card_name, &cmd, LayerTag::OtaIsdr)?;
        if !resp.is_success() {
            return Err(ProcedureError::CommandFailed {
                status: resp.status,
            });
        }
        Ok(resp.data)
    }

    /// Best-effort rollback helpers: delete an orphaned ISD-P and cancel
    /// any half-done key agreement on the card.
    fn cleanup_isdp(&mut self, smsr_id: &str, card_name: &str, aid: &IsdpAid) {
        let mut data = Vec::new();
        tlv::put(&mut data, tlv::TAG_AID, &aid.0);
        let delete = ApduCommand::new(CLA_CARD, ins::DELETE, 0, 0, data, None).expect("delete");
        let _ = self.smsr_command(smsr_id, card_name, &delete, LayerTag::OtaIsdr);
        self.cancel_establish(smsr_id, card_name);
    }

    fn cancel_establish(&mut self, smsr_id: &str, card_name: &str) {
        let cancel = ApduCommand::header(CLA_CARD, ins::ESTABLISH_KEY, 0x00, 0x00);
        let _ = self.smsr_command(smsr_id, card_name, &cancel, LayerTag::OtaIsdr);
    }

    // -- lifecycle management ----------------------------------------------------

    fn lifecycle_command(
        &mut self,
        card_name: &str,
        cmd: ApduCommand,
        layer: LayerTag,
    ) -> Result<(), ProcedureError> {
        self.clear_inboxes();
        let (_eid, smsr_id) = self.resolve_owner(card_name)?;
        let resp = self.smsr_command(&smsr_id, card_name, &cmd, layer)?;
        self.sync_eis(&smsr_id, card_name);
        if resp.is_success() {
            Ok(())
        } else {
            Err(ProcedureError::CommandFailed {
                status: resp.status,
            })
        }
    }

    pub fn enable_profile(&mut self, card_name: &str, aid: &IsdpAid) -> Result<(), ProcedureError> {
        let mut data = Vec::new();
        tlv::put(&mut data, tlv::TAG_AID, &aid.0);
        let cmd = ApduCommand::new(CLA_CARD, ins::ENABLE, 0, 0, data, None)
            .map_err(|e| ProcedureError::Transport(e.to_string()))?;
        self.lifecycle_command(card_name, cmd, LayerTag::OtaIsdr)
    }

    pub fn disable_profile(&mut self, card_name: &str, aid: &IsdpAid) -> Result<(), ProcedureError> {
        let mut data = Vec::new();
        tlv::put(&mut data, tlv::TAG_AID, &aid.0);
        let cmd = ApduCommand::new(CLA_CARD, ins::DISABLE, 0, 0, data, None)
            .map_err(|e| ProcedureError::Transport(e.to_string()))?;
        self.lifecycle_command(card_name, cmd, LayerTag::OtaIsdr)
    }

    pub fn delete_profile(&mut self, card_name: &str, aid: &IsdpAid) -> Result<(), ProcedureError> {
        let mut data = Vec::new();
        tlv::put(&mut data, tlv::TAG_AID, &aid.0);
        let cmd = ApduCommand::new(CLA_CARD, ins::DELETE, 0, 0, data, None)
            .map_err(|e| ProcedureError::Transport(e.to_string()))?;
        self.lifecycle_command(card_name, cmd, LayerTag::OtaIsdr)
    }

    pub fn set_fallback(
        &mut self,
        card_name: &str,
        aid: &IsdpAid,
        flag: bool,
    ) -> Result<(), ProcedureError> {
        let mut data = Vec::new();
        tlv::put(&mut data, tlv::TAG_AID, &aid.0);
        let cmd = ApduCommand::new(
            CLA_CARD,
            ins::SET_FALLBACK,
            if flag { 0x01 } else { 0x00 },
            0,
            data,
            None,
        )
        .map_err(|e| ProcedureError::Transport(e.to_string()))?;
        self.lifecycle_command(card_name, cmd, LayerTag::OtaIsdr)
    }

    /// Operator ping through the serving SM-SR.
    pub fn ping(&mut self, smsr_id: &str, card_name: &str) -> Result<bool, ProcedureError> {
        self.clear_inboxes();
        let cmd = ApduCommand::new(CLA_CARD, ins::PING, 0, 0, vec![], Some(16))
            .map_err(|e| ProcedureError::Transport(e.to_string()))?;
        let resp = self.smsr_command(smsr_id, card_name, &cmd, LayerTag::OtaIsdr)?;
        Ok(resp.is_success())
    }

    // -- policy update -------------------------------------------------------------

    /// The operator updates POL1 on its profile: the registry mirror is
    /// told first (it may legitimately run stale), then the wrapped rules
    /// travel to the card through the serving SM-SR. An operator without
    /// the profile's MNO-SD key ends up probing with an unrelated key and
    /// collects the security failure.
    pub fn update_policy(
        &mut self,
        card_name: &str,
        aid: &IsdpAid,
        mno_id: &str,
        rules: Pol1,
    ) -> Result<(), ProcedureError> {
        self.clear_inboxes();
        let (eid, smsr_id) = self.resolve_owner(card_name)?;
        if !self.mnos.contains_key(mno_id) {
            return Err(ProcedureError::UnknownActor(mno_id.to_string()));
        }

        self.send_plain(
            mno_id,
            &smsr_id,
            &ActorMsg::MirrorUpdate {
                v: MSG_V,
                eid,
                aid: aid.clone(),
                rules,
            },
        )?;
        self.pump();
        {
            let smsr = self.smsrs.get_mut(&smsr_id).unwrap();
            if let Some(env) = Self::take_from(&mut smsr.inbox, mno_id) {
                if let Some(ActorMsg::MirrorUpdate { eid, aid, rules, .. }) =
                    ActorMsg::decode(&env.payload)
                {
                    if let Some(eis) = smsr.registry.get_mut(&eid) {
                        if let Some(entry) =
                            eis.profiles.iter_mut().find(|p| p.isdp_aid == aid)
                        {
                            entry.pol1_mirror = rules;
                        }
                    }
                }
            }
        }

        let mno = self.mnos.get_mut(mno_id).unwrap();
        let record = match mno.sessions.get_mut(&(eid, aid.clone())) {
            Some(session) => session
                .wrap(&[rules.to_byte()], &aid.0)
                .map_err(|e| ProcedureError::Transport(e.to_string()))?,
            None => {
                // Not the owner: the attempt proceeds under a key the
                // profile has never seen and is rejected by the card.
                let rogue = SymmetricKey::random(KeyRole::MnoSd, &mut self.rng);
                SecureChannelSession::initiator(&rogue, version::MNO_PROFILE, "mno-sd")
                    .wrap(&[rules.to_byte()], &aid.0)
                    .map_err(|e| ProcedureError::Transport(e.to_string()))?
            }
        };

        let mut data = Vec::new();
        tlv::put(&mut data, tlv::TAG_AID, &aid.0);
        tlv::put(&mut data, tlv::TAG_RECORD, &record.encode());
        let cmd = ApduCommand::new(CLA_CARD, ins::UPDATE_POL1, 0, 0, data, None)
            .map_err(|e| ProcedureError::Transport(e.to_string()))?;
        let resp = self.smsr_command(&smsr_id, card_name, &cmd, LayerTag::MnoProfile)?;
        if resp.is_success() {
            Ok(())
        } else {
            Err(ProcedureError::CommandFailed {
                status: resp.status,
            })
        }
    }

    // -- SM-SR change ----------------------------------------------------------------

    /// The seven-step handover: change request and capability check, EIS
    /// transfer, key establishment between the new SM-SR and the card
    /// (relayed over the old channel), commit, and deletion of the old
    /// registry entry. A step-2 refusal changes nothing anywhere; a failed
    /// key establishment leaves the old SM-SR in charge and the card on
    /// its old key.
    pub fn smsr_change(
        &mut self,
        card_name: &str,
        mno_id: &str,
        new_smsr_id: &str,
    ) -> Result<(), ProcedureError> {
        self.clear_inboxes();
        let (eid, old_smsr_id) = self.resolve_owner(card_name)?;
        if !self.mnos.contains_key(mno_id) {
            return Err(ProcedureError::UnknownActor(mno_id.to_string()));
        }
        if !self.smsrs.contains_key(new_smsr_id) {
            return Err(ProcedureError::UnknownActor(new_smsr_id.to_string()));
        }
        if new_smsr_id == old_smsr_id {
            return Err(ProcedureError::DuplicateEid);
        }

        // Step 1: the operator notifies the new SM-SR.
        self.send_plain(
            mno_id,
            new_smsr_id,
            &ActorMsg::ChangeRequest {
                v: MSG_V,
                eid,
                from: old_smsr_id.clone(),
            },
        )?;
        self.pump();
        // Step 2: capability check at the new SM-SR.
        let accept = {
            let smsr = self.smsrs.get_mut(new_smsr_id).unwrap();
            let seen = Self::take_from(&mut smsr.inbox, mno_id).is_some();
            seen && smsr.registry.len() < smsr.capacity
        };
        self.send_plain(
            new_smsr_id,
            mno_id,
            &ActorMsg::ChangeAccept {
                v: MSG_V,
                eid,
                ok: accept,
            },
        )?;
        self.pump();
        let accepted = {
            let mno = self.mnos.get_mut(mno_id).unwrap();
            match Self::take_from(&mut mno.inbox, new_smsr_id).and_then(|e| ActorMsg::decode(&e.payload)) {
                Some(ActorMsg::ChangeAccept { ok, .. }) => ok,
                _ => false,
            }
        };
        if !accepted {
            return Err(ProcedureError::CapabilityRefused);
        }

        // Step 3: the operator tells the old SM-SR to start the change.
        self.send_plain(
            mno_id,
            &old_smsr_id,
            &ActorMsg::StartChange {
                v: MSG_V,
                eid,
                to: new_smsr_id.to_string(),
            },
        )?;
        self.pump();
        let start_seen = {
            let smsr = self.smsrs.get_mut(&old_smsr_id).unwrap();
            Self::take_from(&mut smsr.inbox, mno_id).is_some()
        };
        if !start_seen {
            return Err(ProcedureError::Transport("start-change lost".into()));
        }

        // Step 4: the old SM-SR hands the registry entry over. It keeps
        // its transport session alive to relay the key establishment.
        let eis = self
            .smsrs
            .get_mut(&old_smsr_id)
            .unwrap()
            .registry
            .remove(&eid)
            .ok_or(ProcedureError::UnknownEid)?;
        self.send_plain(
            &old_smsr_id,
            new_smsr_id,
            &ActorMsg::EisHandover {
                v: MSG_V,
                eis: Box::new(eis.clone()),
            },
        )?;
        self.pump();
        let handed = {
            let smsr = self.smsrs.get_mut(new_smsr_id).unwrap();
            match Self::take_from(&mut smsr.inbox, &old_smsr_id)
                .and_then(|e| ActorMsg::decode(&e.payload))
            {
                Some(ActorMsg::EisHandover { eis, .. }) => {
                    smsr.registry.insert(eid, *eis);
                    true
                }
                _ => false,
            }
        };
        let rollback = |world: &mut World| {
            world.smsrs.get_mut(new_smsr_id).unwrap().registry.remove(&eid);
            world
                .smsrs
                .get_mut(&old_smsr_id)
                .unwrap()
                .registry
                .insert(eid, eis.clone());
            world.cancel_establish(&old_smsr_id, card_name);
        };
        if !handed {
            rollback(self);
            return Err(ProcedureError::Transport("EIS handover lost".into()));
        }

        // Step 5: the new SM-SR establishes its key with the card, relayed
        // over the old SM-SR's channel.
        let new = self.smsrs.get(new_smsr_id).unwrap();
        let mut agreement = DpEcka::new(
            new.certificate.clone(),
            new.keypair.clone(),
            eis.euicc_public_key.clone(),
        );
        let open = agreement
            .certificate_message()
            .map_err(|e| ProcedureError::EstablishmentFailed(e.to_string()))?;
        let challenge = match self.establish_key_leg(&old_smsr_id, card_name, 0x01, None, &open) {
            Ok(data) => data,
            Err(err) => {
                rollback(self);
                return Err(ProcedureError::EstablishmentFailed(err.to_string()));
            }
        };
        let challenge: [u8; 16] = match challenge.try_into() {
            Ok(c) => c,
            Err(_) => {
                rollback(self);
                return Err(ProcedureError::EstablishmentFailed("bad challenge".into()));
            }
        };
        let signed = agreement
            .on_challenge(&EckaMessage::Challenge(challenge), &mut self.rng)
            .map_err(|e| ProcedureError::EstablishmentFailed(e.to_string()))?;
        if let Err(err) = self.establish_key_leg(&old_smsr_id, card_name, 0x02, None, &signed) {
            rollback(self);
            return Err(ProcedureError::EstablishmentFailed(err.to_string()));
        }
        let new_k80 = match agreement.credentials() {
            Ok(key) => SymmetricKey::new(KeyRole::K80, key.bytes),
            Err(err) => {
                rollback(self);
                return Err(ProcedureError::EstablishmentFailed(err.to_string()));
            }
        };

        // Step 6: commit — the card swaps to the new key and deletes the
        // old one (the ack is the last record under the old key).
        let commit = ApduCommand::header(CLA_CARD, ins::REPLACE_SMSR_KEY, 0, 0);
        match self.smsr_command(&old_smsr_id, card_name, &commit, LayerTag::OtaIsdr) {
            Ok(resp) if resp.is_success() => {}
            Ok(resp) => {
                rollback(self);
                return Err(ProcedureError::EstablishmentFailed(format!(
                    "commit refused with {:04X}",
                    resp.status
                )));
            }
            Err(err) => {
                rollback(self);
                return Err(ProcedureError::EstablishmentFailed(err.to_string()));
            }
        }

        // Step 7: finalize ownership — new key in the registry and a live
        // session at the new SM-SR; the old SM-SR forgets the card.
        {
            let new = self.smsrs.get_mut(new_smsr_id).unwrap();
            if let Some(record) = new.registry.get_mut(&eid) {
                record.k80 = new_k80.clone();
            }
            new.sessions.insert(
                eid,
                SecureChannelSession::initiator(&new_k80, version::OTA, "card"),
            );
        }
        self.smsrs
            .get_mut(&old_smsr_id)
            .unwrap()
            .sessions
            .remove(&eid);
        Ok(())
    }
}
