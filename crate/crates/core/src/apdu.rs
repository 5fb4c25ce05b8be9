//! APDU command/response codec.
//!
//! All card-bound traffic in the simulator uses the ISO 7816-4 command
//! framing: a four-octet header `CLA INS P1 P2`, an optional command data
//! field with its length (`Lc`), and an optional expected response length
//! (`Le`). Responses are `data ‖ SW1 SW2`.
//!
//! Encoding is canonical: short-form lengths are used whenever both `Lc`
//! and `Le` fit them, extended form otherwise, and a logical command has
//! exactly one encoding. The decoder additionally accepts well-formed
//! extended encodings of values that would have fit the short form, so
//! `decode(encode(cmd)) = cmd` always, while `encode(decode(bytes)) =
//! bytes` holds on canonical input only.
//!
//! # Wire contract
//!
//! Status words emitted by the simulated card (the values are fixed so
//! traces are bit-stable):
//!
//! | constant | value | meaning |
//! |---|---|---|
//! | [`sw::SUCCESS`] | `9000` | command processed |
//! | [`sw::SECURITY_STATUS_NOT_SATISFIED`] | `6982` | channel/authentication failure |
//! | [`sw::CONDITIONS_NOT_SATISFIED`] | `6985` | policy or lifecycle-state denial |
//! | [`sw::WRONG_DATA`] | `6A80` | malformed or conflicting command data, unknown INS |
//! | [`sw::REFERENCED_DATA_NOT_FOUND`] | `6A88` | unknown ISD-P / profile |
//!
//! Instruction codes for the card functions (CLA is always `80`):
//!
//! | constant | value | function |
//! |---|---|---|
//! | [`ins::CREATE_ISDP`] | `E6` | create an ISD-P |
//! | [`ins::INSTALL_PROFILE`] | `E8` | deliver the wrapped profile to an ISD-P |
//! | [`ins::ENABLE`] | `F1` | enable a profile |
//! | [`ins::DISABLE`] | `F2` | disable a profile |
//! | [`ins::DELETE`] | `E4` | delete an ISD-P (also orphan cleanup) |
//! | [`ins::SET_FALLBACK`] | `F3` | set/clear the fallback attribute |
//! | [`ins::ESTABLISH_KEY`] | `E2` | key-agreement transcript message |
//! | [`ins::UPDATE_POL1`] | `E9` | replace a profile's policy rules |
//! | [`ins::REPLACE_SMSR_KEY`] | `E5` | commit a pending card key |
//! | [`ins::PING`] | `CA` | liveness probe |
//!
//! Command payloads are simple TLV sequences (tag octet, two-octet
//! big-endian length, value); see [`tlv`] for the tag assignments. These
//! layouts are simulator-local documentation, not GSMA-conformant
//! structures.

use thiserror::Error;

/// Command data is limited to what the extended `Lc` field can carry.
pub const MAX_DATA_LEN: usize = 65_535;
/// Largest expressible expected-response length (extended `Le` = `0000`).
pub const MAX_LE: u32 = 65_536;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum ApduError {
    #[error("command data exceeds {MAX_DATA_LEN} octets")]
    OversizeData,
    #[error("expected length must be in 1..={MAX_LE}")]
    BadExpectedLength,
    #[error("input shorter than the minimal frame")]
    Truncated,
    #[error("length fields are inconsistent with the input size")]
    MalformedLength,
}

/// Status words used by the simulated card.
pub mod sw {
    pub const SUCCESS: u16 = 0x9000;
    pub const SECURITY_STATUS_NOT_SATISFIED: u16 = 0x6982;
    pub const CONDITIONS_NOT_SATISFIED: u16 = 0x6985;
    pub const WRONG_DATA: u16 = 0x6A80;
    pub const REFERENCED_DATA_NOT_FOUND: u16 = 0x6A88;

    pub const ALL: [u16; 5] = [
        SUCCESS,
        SECURITY_STATUS_NOT_SATISFIED,
        CONDITIONS_NOT_SATISFIED,
        WRONG_DATA,
        REFERENCED_DATA_NOT_FOUND,
    ];

    pub fn name(status: u16) -> &'static str {
        match status {
            SUCCESS => "SUCCESS",
            SECURITY_STATUS_NOT_SATISFIED => "SECURITY_STATUS_NOT_SATISFIED",
            CONDITIONS_NOT_SATISFIED => "CONDITIONS_NOT_SATISFIED",
            WRONG_DATA => "WRONG_DATA",
            REFERENCED_DATA_NOT_FOUND => "REFERENCED_DATA_NOT_FOUND",
            _ => "UNKNOWN",
        }
    }
}

/// Instruction codes for the simulated card functions.
pub mod ins {
    pub const CREATE_ISDP: u8 = 0xE6;
    pub const INSTALL_PROFILE: u8 = 0xE8;
    pub const ENABLE: u8 = 0xF1;
    pub const DISABLE: u8 = 0xF2;
    pub const DELETE: u8 = 0xE4;
    pub const SET_FALLBACK: u8 = 0xF3;
    pub const ESTABLISH_KEY: u8 = 0xE2;
    pub const UPDATE_POL1: u8 = 0xE9;
    pub const REPLACE_SMSR_KEY: u8 = 0xE5;
    pub const PING: u8 = 0xCA;
}

/// Class octet used for all simulated card functions.
pub const CLA_CARD: u8 = 0x80;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApduCommand {
    pub cla: u8,
    pub ins: u8,
    pub p1: u8,
    pub p2: u8,
    pub data: Vec<u8>,
    /// Expected response length; `None` when no response data is expected.
    /// Valid values are `1..=65536`.
    pub le: Option<u32>,
}

impl ApduCommand {
    pub fn new(
        cla: u8,
        ins: u8,
        p1: u8,
        p2: u8,
        data: Vec<u8>,
        le: Option<u32>,
    ) -> Result<Self, ApduError> {
        let cmd = Self {
            cla,
            ins,
            p1,
            p2,
            data,
            le,
        };
        cmd.check()?;
        Ok(cmd)
    }

    /// Header-only convenience constructor (case 1).
    pub fn header(cla: u8, ins: u8, p1: u8, p2: u8) -> Self {
        Self {
            cla,
            ins,
            p1,
            p2,
            data: Vec::new(),
            le: None,
        }
    }

    fn check(&self) -> Result<(), ApduError> {
        if self.data.len() > MAX_DATA_LEN {
            return Err(ApduError::OversizeData);
        }
        if let Some(le) = self.le {
            if le == 0 || le > MAX_LE {
                return Err(ApduError::BadExpectedLength);
            }
        }
        Ok(())
    }

    /// Canonical encoding: short-form length fields whenever both fit.
    pub fn encode(&self) -> Result<Vec<u8>, ApduError> {
        self.check()?;
        let lc = self.data.len();
        let le = self.le;
        // Short form requires Lc <= 255 and Le <= 256; a frame never mixes
        // short and extended fields.
        let extended = lc > 255 || le.map(|v| v > 256).unwrap_or(false);

        let mut out = Vec::with_capacity(4 + 3 + lc + 3);
        out.extend_from_slice(&[self.cla, self.ins, self.p1, self.p2]);
        if extended {
            if lc > 0 {
                out.push(0x00);
                out.extend_from_slice(&(lc as u16).to_be_bytes());
                out.extend_from_slice(&self.data);
                if let Some(le) = le {
                    // With data present the extended Le has no leading zero.
                    out.extend_from_slice(&((le % 65_536) as u16).to_be_bytes());
                }
            } else if let Some(le) = le {
                out.push(0x00);
                out.extend_from_slice(&((le % 65_536) as u16).to_be_bytes());
            }
        } else {
            if lc > 0 {
                out.push(lc as u8);
                out.extend_from_slice(&self.data);
            }
            if let Some(le) = le {
                out.push((le % 256) as u8);
            }
        }
        Ok(out)
    }

    /// Parses a command frame. Accepts every well-formed ISO case; rejects
    /// anything whose length fields disagree with the input size. Never
    /// reads past the input.
    pub fn decode(bytes: &[u8]) -> Result<Self, ApduError> {
        if bytes.len() < 4 {
            return Err(ApduError::Truncated);
        }
        let (cla, ins, p1, p2) = (bytes[0], bytes[1], bytes[2], bytes[3]);
        let body = &bytes[4..];
        let l = body.len();

        // Case 1: header only.
        if l == 0 {
            return Self::new(cla, ins, p1, p2, Vec::new(), None);
        }

        let b1 = body[0] as usize;

        // Case 2S: single Le octet, 00 means 256.
        if l == 1 {
            let le = if b1 == 0 { 256 } else { b1 as u32 };
            return Self::new(cla, ins, p1, p2, Vec::new(), Some(le));
        }

        // Case 3S: Lc(1) ‖ data.
        if b1 != 0 && l == 1 + b1 {
            return Self::new(cla, ins, p1, p2, body[1..].to_vec(), None);
        }

        // Case 4S: Lc(1) ‖ data ‖ Le(1).
        if b1 != 0 && l == 2 + b1 {
            let le = body[l - 1] as u32;
            let le = if le == 0 { 256 } else { le };
            return Self::new(cla, ins, p1, p2, body[1..l - 1].to_vec(), Some(le));
        }

        // Extended cases start with a zero octet.
        if b1 != 0 || l < 3 {
            return Err(ApduError::MalformedLength);
        }

        // Case 2E: 00 ‖ Le(2), 0000 means 65536.
        if l == 3 {
            let le = u16::from_be_bytes([body[1], body[2]]) as u32;
            let le = if le == 0 { MAX_LE } else { le };
            return Self::new(cla, ins, p1, p2, Vec::new(), Some(le));
        }

        let lc = u16::from_be_bytes([body[1], body[2]]) as usize;
        if lc == 0 {
            // A zero extended Lc would collide with case 2E.
            return Err(ApduError::MalformedLength);
        }

        // Case 3E: 00 ‖ Lc(2) ‖ data.
        if l == 3 + lc {
            return Self::new(cla, ins, p1, p2, body[3..].to_vec(), None);
        }

        // Case 4E: 00 ‖ Lc(2) ‖ data ‖ Le(2).
        if l == 5 + lc {
            let le = u16::from_be_bytes([body[l - 2], body[l - 1]]) as u32;
            let le = if le == 0 { MAX_LE } else { le };
            return Self::new(cla, ins, p1, p2, body[3..l - 2].to_vec(), Some(le));
        }

        Err(ApduError::MalformedLength)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApduResponse {
    pub data: Vec<u8>,
    pub status: u16,
}

impl ApduResponse {
    pub fn new(data: Vec<u8>, status: u16) -> Self {
        Self { data, status }
    }

    pub fn status_only(status: u16) -> Self {
        Self {
            data: Vec::new(),
            status,
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == sw::SUCCESS
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 2);
        out.extend_from_slice(&self.data);
        out.extend_from_slice(&self.status.to_be_bytes());
        out
    }

    /// The decoder is wire-tolerant: any 16-bit trailer is accepted as a
    /// status word. The simulated card only ever emits values from
    /// [`sw::ALL`].
    pub fn decode(bytes: &[u8]) -> Result<Self, ApduError> {
        if bytes.len() < 2 {
            return Err(ApduError::Truncated);
        }
        let split = bytes.len() - 2;
        Ok(Self {
            data: bytes[..split].to_vec(),
            status: u16::from_be_bytes([bytes[split], bytes[split + 1]]),
        })
    }
}

/// Minimal TLV layer used inside command payloads: tag octet, two-octet
/// big-endian length, value.
pub mod tlv {
    use super::ApduError;

    /// ISD-P application identifier.
    pub const TAG_AID: u8 = 0x4F;
    /// A wrapped [`crate::crypto::channel::SecureRecord`].
    pub const TAG_RECORD: u8 = 0x87;
    /// POL1 rule bitmap (one octet).
    pub const TAG_POL1: u8 = 0xD0;
    /// Key-agreement transcript message.
    pub const TAG_ECKA: u8 = 0xE0;
    /// Key-establishment target (one octet: 00 = card key, 01 = ISD-P).
    pub const TAG_TARGET: u8 = 0xA0;

    pub fn put(out: &mut Vec<u8>, tag: u8, value: &[u8]) {
        debug_assert!(value.len() <= u16::MAX as usize);
        out.push(tag);
        out.extend_from_slice(&(value.len() as u16).to_be_bytes());
        out.extend_from_slice(value);
    }

    /// Parses the whole input as a TLV sequence, in order.
    pub fn parse(mut input: &[u8]) -> Result<Vec<(u8, Vec<u8>)>, ApduError> {
        let mut fields = Vec::new();
        while !input.is_empty() {
            if input.len() < 3 {
                return Err(ApduError::Truncated);
            }
            let tag = input[0];
            let len = u16::from_be_bytes([input[1], input[2]]) as usize;
            if input.len() < 3 + len {
                return Err(ApduError::Truncated);
            }
            fields.push((tag, input[3..3 + len].to_vec()));
            input = &input[3 + len..];
        }
        Ok(fields)
    }

    /// First field with the given tag.
    pub fn find(fields: &[(u8, Vec<u8>)], tag: u8) -> Option<&[u8]> {
        fields.iter().find(|(t, _)| *t == tag).map(|(_, v)| &v[..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn case1_header_only() {
        let cmd = ApduCommand::header(0x00, 0xA4, 0x04, 0x00);
        assert_eq!(cmd.encode().unwrap(), vec![0x00, 0xA4, 0x04, 0x00]);
        assert_eq!(ApduCommand::decode(&[0x00, 0xA4, 0x04, 0x00]).unwrap(), cmd);
    }

    #[test]
    fn short_lc_forced_by_small_data() {
        let aid = vec![0xA0, 0x00, 0x01];
        let cmd = ApduCommand::new(0x80, 0xE4, 0x00, 0x00, aid.clone(), None).unwrap();
        let bytes = cmd.encode().unwrap();
        assert_eq!(&bytes[..4], &[0x80, 0xE4, 0x00, 0x00]);
        assert_eq!(bytes[4], 0x03);
        assert_eq!(&bytes[5..], &aid[..]);
    }

    #[test]
    fn large_data_uses_extended_length() {
        let cmd = ApduCommand::new(0x80, 0xE8, 0x00, 0x00, vec![0xAB; 300], None).unwrap();
        let bytes = cmd.encode().unwrap();
        // Hand-computed ISO 7816-4 case 3E: header, 00, Lc=012C, data.
        assert_eq!(bytes.len(), 4 + 3 + 300);
        assert_eq!(&bytes[4..7], &[0x00, 0x01, 0x2C]);
        assert_eq!(ApduCommand::decode(&bytes).unwrap(), cmd);
    }

    #[test]
    fn le_boundary_values() {
        let le256 = ApduCommand::new(0x00, 0xCA, 0, 0, vec![], Some(256)).unwrap();
        assert_eq!(le256.encode().unwrap()[4..], [0x00]);
        let le257 = ApduCommand::new(0x00, 0xCA, 0, 0, vec![], Some(257)).unwrap();
        assert_eq!(le257.encode().unwrap()[4..], [0x00, 0x01, 0x01]);
        let le_max = ApduCommand::new(0x00, 0xCA, 0, 0, vec![], Some(65_536)).unwrap();
        assert_eq!(le_max.encode().unwrap()[4..], [0x00, 0x00, 0x00]);
        for bytes in [
            le256.encode().unwrap(),
            le257.encode().unwrap(),
            le_max.encode().unwrap(),
        ] {
            let back = ApduCommand::decode(&bytes).unwrap();
            assert_eq!(back.encode().unwrap(), bytes);
        }
    }

    #[test]
    fn mixed_short_data_extended_le() {
        // Data fits short form but Le does not: the whole frame goes extended.
        let cmd = ApduCommand::new(0x00, 0x01, 0x02, 0x03, vec![5, 6], Some(0x100 + 1)).unwrap();
        let bytes = cmd.encode().unwrap();
        assert_eq!(bytes[4..7], [0x00, 0x00, 0x02]);
        assert_eq!(bytes[9..], [0x01, 0x01]);
        assert_eq!(ApduCommand::decode(&bytes).unwrap(), cmd);
    }

    #[test]
    fn truncated_header_rejected() {
        assert_eq!(
            ApduCommand::decode(&[0x00, 0xA4, 0x04]),
            Err(ApduError::Truncated)
        );
    }

    #[test]
    fn inconsistent_lengths_rejected() {
        // Claims 5 octets of data, carries 2.
        assert_eq!(
            ApduCommand::decode(&[0x00, 0x01, 0x02, 0x03, 0x05, 0xAA, 0xBB]),
            Err(ApduError::MalformedLength)
        );
    }

    #[test]
    fn oversize_data_rejected() {
        let err = ApduCommand::new(0, 0, 0, 0, vec![0; MAX_DATA_LEN + 1], None).unwrap_err();
        assert_eq!(err, ApduError::OversizeData);
    }

    #[test]
    fn response_codec() {
        let r = ApduResponse::status_only(sw::SUCCESS);
        assert_eq!(r.encode(), vec![0x90, 0x00]);
        let r = ApduResponse::new(vec![0x01], sw::SUCCESS);
        assert_eq!(r.encode(), vec![0x01, 0x90, 0x00]);
        assert_eq!(ApduResponse::decode(&[0x01, 0x90, 0x00]).unwrap(), r);
        assert_eq!(ApduResponse::decode(&[0x90]), Err(ApduError::Truncated));
    }

    #[test]
    fn tlv_roundtrip_and_truncation() {
        let mut buf = Vec::new();
        tlv::put(&mut buf, tlv::TAG_AID, &[1, 2, 3]);
        tlv::put(&mut buf, tlv::TAG_POL1, &[0x05]);
        let fields = tlv::parse(&buf).unwrap();
        assert_eq!(tlv::find(&fields, tlv::TAG_AID), Some(&[1u8, 2, 3][..]));
        assert_eq!(tlv::find(&fields, tlv::TAG_POL1), Some(&[0x05u8][..]));
        assert_eq!(tlv::parse(&buf[..buf.len() - 1]), Err(ApduError::Truncated));
    }

    fn arb_command() -> impl Strategy<Value = ApduCommand> {
        (
            any::<u8>(),
            any::<u8>(),
            any::<u8>(),
            any::<u8>(),
            proptest::collection::vec(any::<u8>(), 0..600),
            proptest::option::of(1u32..=MAX_LE),
        )
            .prop_map(|(cla, ins, p1, p2, data, le)| {
                ApduCommand::new(cla, ins, p1, p2, data, le).unwrap()
            })
    }

    proptest! {
        #[test]
        fn command_roundtrip(cmd in arb_command()) {
            let bytes = cmd.encode().unwrap();
            prop_assert_eq!(ApduCommand::decode(&bytes).unwrap(), cmd);
        }

        #[test]
        fn response_roundtrip(data in proptest::collection::vec(any::<u8>(), 0..300),
                              status in proptest::sample::select(&sw::ALL[..])) {
            let r = ApduResponse::new(data, status);
            prop_assert_eq!(ApduResponse::decode(&r.encode()).unwrap(), r);
        }

        #[test]
        fn decoder_total_on_arbitrary_input(bytes in proptest::collection::vec(any::<u8>(), 0..800)) {
            // Must never panic; on success the value re-encodes canonically
            // to something that decodes back to itself.
            if let Ok(cmd) = ApduCommand::decode(&bytes) {
                let canon = cmd.encode().unwrap();
                prop_assert_eq!(ApduCommand::decode(&canon).unwrap(), cmd);
            }
            let _ = ApduResponse::decode(&bytes);
            let _ = tlv::parse(&bytes);
        }
    }
}
