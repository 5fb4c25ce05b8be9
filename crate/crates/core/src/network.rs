//! Simulated transport between actors and cards.
//!
//! Delivery is synchronous and round-based: everything sent in round `r`
//! arrives in round `r + 1` unless a fault rule delays it. Per source →
//! destination stream, delivery is FIFO unless a fault reorders it. The
//! network is the single serialization point of a run — actors only talk
//! through it — and every send, delivery, and fault lands in the trace, so
//! identical runs produce octet-identical logs.
//!
//! Envelopes carry a layer tag describing the innermost logical channel of
//! the payload. Operator- and installation-layer records must ride inside
//! the card transport record; the network checks this on every send and
//! refuses bare inner-layer payloads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::channel::version;
use crate::crypto::kdf::sha256;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub struct ActorId(pub String);

impl ActorId {
    pub fn new(id: impl Into<String>) -> Self {
        ActorId(id.into())
    }
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Innermost logical channel of an envelope's payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerTag {
    /// Plain actor-to-actor coordination message.
    ActorPlain,
    /// Card transport record (k80 channel).
    OtaIsdr,
    /// Installation record, nested in the card transport.
    DpIsdp,
    /// Operator-to-profile record, nested in the card transport.
    MnoProfile,
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerTag::ActorPlain => "actor-plain",
            LayerTag::OtaIsdr => "ota-isdr",
            LayerTag::DpIsdp => "dp-isdp",
            LayerTag::MnoProfile => "mno-profile",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub src: ActorId,
    pub dst: ActorId,
    pub layer: LayerTag,
    pub payload: Vec<u8>,
    /// Position in the (src, dst) stream, assigned by the network.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultAction {
    Drop,
    /// XOR 0xFF into the payload octet at this index (mod payload length).
    TamperOctet(usize),
    Duplicate,
    /// Postpone delivery by this many extra rounds.
    Delay(u64),
}

impl fmt::Display for FaultAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultAction::Drop => write!(f, "drop"),
            FaultAction::TamperOctet(i) => write!(f, "tamper@{i}"),
            FaultAction::Duplicate => write!(f, "duplicate"),
            FaultAction::Delay(k) => write!(f, "delay+{k}"),
        }
    }
}

/// One fault rule; `None` fields match anything. `nth` restricts the rule
/// to the n-th envelope (1-based) satisfying the other criteria, counted
/// from the moment the rule was installed. The first rule in the plan that
/// fires applies to an envelope.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRule {
    pub src: Option<ActorId>,
    pub dst: Option<ActorId>,
    pub seq: Option<u64>,
    pub layer: Option<LayerTag>,
    pub nth: Option<u64>,
    pub action: FaultAction,
}

impl FaultRule {
    /// Rule matching everything between `src` and `dst`.
    pub fn between(src: &str, dst: &str, action: FaultAction) -> Self {
        FaultRule {
            src: Some(ActorId::new(src)),
            dst: Some(ActorId::new(dst)),
            seq: None,
            layer: None,
            nth: None,
            action,
        }
    }

    pub fn with_seq(mut self, seq: u64) -> Self {
        self.seq = Some(seq);
        self
    }

    pub fn with_nth(mut self, nth: u64) -> Self {
        self.nth = Some(nth);
        self
    }

    fn criteria_match(&self, env: &Envelope) -> bool {
        self.src.as_ref().map(|s| *s == env.src).unwrap_or(true)
            && self.dst.as_ref().map(|d| *d == env.dst).unwrap_or(true)
            && self.seq.map(|s| s == env.seq).unwrap_or(true)
            && self.layer.map(|l| l == env.layer).unwrap_or(true)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub rules: Vec<FaultRule>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetworkError {
    #[error("actor {0} is not registered")]
    UnknownActor(ActorId),
    #[error("layer {0} payload must travel inside the card transport record")]
    LayerViolation(LayerTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Send,
    Deliver,
    Fault,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub round: u64,
    pub kind: TraceKind,
    pub src: ActorId,
    pub dst: ActorId,
    pub layer: LayerTag,
    pub seq: u64,
    /// Truncated SHA-256 of the payload octets.
    pub digest: String,
    /// Human-readable detail: verbatim actor-plain payloads, fault
    /// descriptions.
    pub note: String,
}

pub fn payload_digest(payload: &[u8]) -> String {
    hex::encode(&sha256(payload)[..8])
}

#[derive(Debug, Clone)]
pub struct Network {
    actors: BTreeSet<ActorId>,
    round: u64,
    /// Envelopes keyed by delivery round, in arrival order.
    pending: BTreeMap<u64, Vec<Envelope>>,
    seq: BTreeMap<(ActorId, ActorId), u64>,
    plan: FaultPlan,
    /// Per-rule count of envelopes that satisfied the rule's criteria.
    rule_hits: Vec<u64>,
    trace: Vec<TraceEvent>,
}

impl Network {
    pub fn new(plan: FaultPlan) -> Self {
        let rule_hits = vec![0; plan.rules.len()];
        Network {
            actors: BTreeSet::new(),
            round: 0,
            pending: BTreeMap::new(),
            seq: BTreeMap::new(),
            plan,
            rule_hits,
            trace: Vec::new(),
        }
    }

    pub fn register(&mut self, actor: ActorId) {
        self.actors.insert(actor);
    }

    pub fn is_registered(&self, actor: &ActorId) -> bool {
        self.actors.contains(actor)
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Installs an additional fault rule mid-run (scenario `fault` steps).
    pub fn add_fault_rule(&mut self, rule: FaultRule) {
        self.plan.rules.push(rule);
        self.rule_hits.push(0);
    }

    fn note_for(layer: LayerTag, payload: &[u8]) -> String {
        if layer == LayerTag::ActorPlain {
            String::from_utf8(payload.to_vec()).unwrap_or_else(|_| hex::encode(payload))
        } else {
            String::new()
        }
    }

    fn record(&mut self, kind: TraceKind, env: &Envelope, note: String) {
        self.trace.push(TraceEvent {
            round: self.round,
            kind,
            src: env.src.clone(),
            dst: env.dst.clone(),
            layer: env.layer,
            seq: env.seq,
            digest: payload_digest(&env.payload),
            note,
        });
    }

    /// Queues an envelope for delivery next round, subject to the fault
    /// plan. Inner-layer payloads must be wrapped in a card transport
    /// record (their first octet names the transport version).
    pub fn send(&mut self, mut env: Envelope) -> Result<(), NetworkError> {
        if !self.actors.contains(&env.src) {
            return Err(NetworkError::UnknownActor(env.src.clone()));
        }
        if !self.actors.contains(&env.dst) {
            return Err(NetworkError::UnknownActor(env.dst.clone()));
        }
        if matches!(env.layer, LayerTag::DpIsdp | LayerTag::MnoProfile)
            && env.payload.first() != Some(&version::OTA)
        {
            return Err(NetworkError::LayerViolation(env.layer));
        }

        let seq = self
            .seq
            .entry((env.src.clone(), env.dst.clone()))
            .or_insert(0);
        env.seq = *seq;
        *seq += 1;

        self.record(
            TraceKind::Send,
            &env,
            Self::note_for(env.layer, &env.payload),
        );

        let mut deliver_at = self.round + 1;
        let mut duplicate = false;
        let mut fired = None;
        for (index, rule) in self.plan.rules.iter().enumerate() {
            if !rule.criteria_match(&env) {
                continue;
            }
            self.rule_hits[index] += 1;
            let due = rule
                .nth
                .map(|n| self.rule_hits[index] == n)
                .unwrap_or(true);
            if due {
                fired = Some(rule.clone());
                break;
            }
        }
        if let Some(rule) = fired {
            let note = format!("{} seq={}", rule.action, env.seq);
            self.record(TraceKind::Fault, &env, note);
            match rule.action {
                FaultAction::Drop => return Ok(()),
                FaultAction::TamperOctet(index) => {
                    if !env.payload.is_empty() {
                        let at = index % env.payload.len();
                        env.payload[at] ^= 0xFF;
                    }
                }
                FaultAction::Duplicate => duplicate = true,
                FaultAction::Delay(rounds) => deliver_at += rounds,
            }
        }

        if duplicate {
            self.pending
                .entry(deliver_at)
                .or_default()
                .push(env.clone());
        }
        self.pending.entry(deliver_at).or_default().push(env);
        Ok(())
    }

    /// Advances one round and hands back everything due for delivery.
    pub fn step(&mut self) -> Vec<Envelope> {
        self.round += 1;
        let due = self.pending.remove(&self.round).unwrap_or_default();
        for env in &due {
            self.record(
                TraceKind::Deliver,
                env,
                Self::note_for(env.layer, &env.payload),
            );
        }
        due
    }

    /// True when nothing is in flight.
    pub fn idle(&self) -> bool {
        self.pending.is_empty()
    }

    /// The immutable, replayable event log.
    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let count = |kind: TraceKind| self.trace.iter().filter(|e| e.kind == kind).count();
        (
            count(TraceKind::Send),
            count(TraceKind::Deliver),
            count(TraceKind::Fault),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(src: &str, dst: &str, payload: &[u8]) -> Envelope {
        Envelope {
            src: ActorId::new(src),
            dst: ActorId::new(dst),
            layer: LayerTag::ActorPlain,
            payload: payload.to_vec(),
            seq: 0,
        }
    }

    fn net() -> Network {
        let mut n = Network::new(FaultPlan::default());
        n.register(ActorId::new("a"));
        n.register(ActorId::new("b"));
        n
    }

    #[test]
    fn fifo_delivery_without_faults() {
        let mut n = net();
        for i in 0..4u8 {
            n.send(env("a", "b", &[i])).unwrap();
        }
        let delivered = n.step();
        assert_eq!(delivered.len(), 4);
        let payloads: Vec<u8> = delivered.iter().map(|e| e.payload[0]).collect();
        assert_eq!(payloads, vec![0, 1, 2, 3]);
        let seqs: Vec<u64> = delivered.iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![0, 1, 2, 3]);
        assert!(n.idle());
    }

    #[test]
    fn unknown_actor_rejected() {
        let mut n = net();
        let err = n.send(env("a", "zzz", b"x")).unwrap_err();
        assert_eq!(err, NetworkError::UnknownActor(ActorId::new("zzz")));
    }

    #[test]
    fn drop_rule_eats_only_the_matching_envelope() {
        let mut n = Network::new(FaultPlan {
            rules: vec![FaultRule {
                src: Some(ActorId::new("a")),
                dst: Some(ActorId::new("b")),
                seq: Some(1),
                layer: None,
                nth: None,
                action: FaultAction::Drop,
            }],
        });
        n.register(ActorId::new("a"));
        n.register(ActorId::new("b"));
        for i in 0..3u8 {
            n.send(env("a", "b", &[i])).unwrap();
        }
        let delivered = n.step();
        let payloads: Vec<u8> = delivered.iter().map(|e| e.payload[0]).collect();
        assert_eq!(payloads, vec![0, 2]);
        let (sends, delivers, faults) = n.counts();
        assert_eq!((sends, delivers, faults), (3, 2, 1));
    }

    #[test]
    fn tamper_flips_one_octet() {
        let mut n = Network::new(FaultPlan {
            rules: vec![FaultRule {
                src: None,
                dst: None,
                seq: Some(0),
                layer: None,
                nth: None,
                action: FaultAction::TamperOctet(1),
            }],
        });
        n.register(ActorId::new("a"));
        n.register(ActorId::new("b"));
        n.send(env("a", "b", &[0x10, 0x20, 0x30])).unwrap();
        let delivered = n.step();
        assert_eq!(delivered[0].payload, vec![0x10, 0x20 ^ 0xFF, 0x30]);
    }

    #[test]
    fn duplicate_delivers_twice() {
        let mut n = Network::new(FaultPlan {
            rules: vec![FaultRule {
                src: None,
                dst: None,
                seq: Some(0),
                layer: None,
                nth: None,
                action: FaultAction::Duplicate,
            }],
        });
        n.register(ActorId::new("a"));
        n.register(ActorId::new("b"));
        n.send(env("a", "b", b"once")).unwrap();
        let delivered = n.step();
        assert_eq!(delivered.len(), 2);
        assert_eq!(delivered[0].payload, delivered[1].payload);
    }

    #[test]
    fn delay_shifts_rounds_and_reorders() {
        let mut n = Network::new(FaultPlan {
            rules: vec![FaultRule {
                src: None,
                dst: None,
                seq: Some(0),
                layer: None,
                nth: None,
                action: FaultAction::Delay(2),
            }],
        });
        n.register(ActorId::new("a"));
        n.register(ActorId::new("b"));
        n.send(env("a", "b", b"slow")).unwrap();
        n.send(env("a", "b", b"fast")).unwrap();
        let round1 = n.step();
        assert_eq!(round1.len(), 1);
        assert_eq!(round1[0].payload, b"fast");
        assert!(!n.idle());
        assert!(n.step().is_empty());
        let round3 = n.step();
        assert_eq!(round3[0].payload, b"slow");
        assert!(n.idle());
    }

    #[test]
    fn bare_inner_layer_payload_refused() {
        let mut n = net();
        let mut bad = env("a", "b", &[version::PROFILE_INSTALL, 0, 0]);
        bad.layer = LayerTag::DpIsdp;
        assert_eq!(
            n.send(bad),
            Err(NetworkError::LayerViolation(LayerTag::DpIsdp))
        );
        // The same payload wrapped in an OTA record passes.
        let mut ok = env("a", "b", &[version::OTA, 1, 2, 3]);
        ok.layer = LayerTag::DpIsdp;
        n.send(ok).unwrap();
    }

    #[test]
    fn trace_counts_add_up() {
        let mut n = Network::new(FaultPlan {
            rules: vec![FaultRule {
                src: None,
                dst: None,
                seq: Some(2),
                layer: None,
                nth: None,
                action: FaultAction::Drop,
            }],
        });
        n.register(ActorId::new("a"));
        n.register(ActorId::new("b"));
        for i in 0..5u8 {
            n.send(env("a", "b", &[i])).unwrap();
        }
        n.step();
        let (sends, delivers, faults) = n.counts();
        assert_eq!(sends, 5);
        assert_eq!(delivers, 4);
        assert_eq!(faults, 1);
        assert_eq!(n.trace().len(), sends + delivers + faults);
    }

    #[test]
    fn identical_runs_identical_traces() {
        let run = || {
            let mut n = net();
            n.send(env("a", "b", b"m1")).unwrap();
            n.send(env("b", "a", b"m2")).unwrap();
            n.step();
            n.send(env("a", "b", b"m3")).unwrap();
            n.step();
            serde_json::to_string(&n.trace().to_vec()).unwrap()
        };
        assert_eq!(run(), run());
    }
}
