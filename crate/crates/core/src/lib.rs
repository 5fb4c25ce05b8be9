//! A deterministic, desk-scale simulator of the GSMA M2M remote SIM
//! provisioning ecosystem: eUICC cards (security-domain tree, profile
//! lifecycle, POL1 enforcement) plus the off-card actors (SM-DP, SM-SR,
//! MNO, EUM) exchanging APDU-framed messages over secure channels on a
//! fault-injectable simulated network.
//!
//! Everything is driven from scripted scenarios (see [`scenario`]); a run
//! is a pure function of the scenario text, the seed, and the fault plan,
//! so traces and reports are reproducible octet for octet.

pub mod apdu;
pub mod crypto;
pub mod euicc;
pub mod network;
pub mod policy;
pub mod rng;
pub mod scenario;
pub mod subman;
pub mod testkit;

mod serde_hex;
