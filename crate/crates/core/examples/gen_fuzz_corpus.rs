//! Regenerates the seed corpus for the fuzz targets. Run from the
//! repository root:
//!
//! ```text
//! cargo run -p euicc-sim --example gen_fuzz_corpus
//! ```

use std::fs;
use std::path::Path;

use euicc_sim::apdu::{ins, tlv, ApduCommand, CLA_CARD};
use euicc_sim::crypto::channel::{version, SecureChannelSession};
use euicc_sim::crypto::kdf::{KeyRole, SymmetricKey};
use euicc_sim::testkit::provisioned_card;

fn write(dir: &Path, name: &str, bytes: &[u8]) {
    fs::create_dir_all(dir).expect("corpus directory");
    fs::write(dir.join(name), bytes).expect("seed file");
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");

    // apdu_decode: one frame per ISO case plus a TLV-bearing command.
    let dir = root.join("apdu_decode");
    write(&dir, "case1", &[0x00, 0xA4, 0x04, 0x00]);
    write(
        &dir,
        "case2s",
        &ApduCommand::new(0x00, ins::PING, 0, 0, vec![], Some(16))
            .unwrap()
            .encode()
            .unwrap(),
    );
    let mut data = Vec::new();
    tlv::put(&mut data, tlv::TAG_AID, &[0xA0, 0x00, 0x00, 0x05, 0x59, 0x10, 0x10, 0x00, 0x02]);
    write(
        &dir,
        "case3s_tlv",
        &ApduCommand::new(CLA_CARD, ins::ENABLE, 0, 0, data, None)
            .unwrap()
            .encode()
            .unwrap(),
    );
    write(
        &dir,
        "case4e",
        &ApduCommand::new(CLA_CARD, ins::INSTALL_PROFILE, 0, 0, vec![0xAB; 300], Some(300))
            .unwrap()
            .encode()
            .unwrap(),
    );

    // secure_record: a syntactically valid record for the target's fixed
    // key (the tag will not verify — the target asserts rejection).
    let dir = root.join("secure_record");
    let key = SymmetricKey::new(KeyRole::K80, [7u8; 32]);
    let mut tx = SecureChannelSession::initiator(&key, version::OTA, "peer");
    let record = tx.wrap(b"seed payload", b"").unwrap();
    write(&dir, "wrapped", &record.encode());
    write(&dir, "nack", &[version::NACK, 0, 0, 0, 0, 0, 0, 0, 0, 0x69, 0x82]);

    // scenario_parse: the shipped fixtures make the best seeds.
    let dir = root.join("scenario_parse");
    let scenarios = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for name in ["lifecycle.scn", "fallback_chain.scn"] {
        let text = fs::read_to_string(scenarios.join(name)).expect("fixture");
        write(&dir, name, text.as_bytes());
    }
    write(&dir, "minimal", b"scenario s\n[actors]\neum e\n[steps]\nmanufacture c eum=e\n");

    // card_transport: a record the fixture card actually accepts, plus a
    // same-shape record under the wrong key.
    let dir = root.join("card_transport");
    let fixture = provisioned_card(0xF0CA);
    let mut smsr = SecureChannelSession::initiator(&fixture.k80, version::OTA, "card");
    let ping = ApduCommand::new(CLA_CARD, ins::PING, 0, 0, vec![], Some(16)).unwrap();
    let record = smsr.wrap(&ping.encode().unwrap(), b"").unwrap();
    write(&dir, "valid_ping", &record.encode());
    let rogue_key = SymmetricKey::new(KeyRole::K80, [9u8; 32]);
    let mut rogue = SecureChannelSession::initiator(&rogue_key, version::OTA, "card");
    let record = rogue.wrap(&ping.encode().unwrap(), b"").unwrap();
    write(&dir, "rogue_ping", &record.encode());

    // card_commands: representative dispatch frames.
    let dir = root.join("card_commands");
    write(&dir, "ping", &ping.encode().unwrap());
    let mut data = Vec::new();
    tlv::put(&mut data, tlv::TAG_AID, &fixture.aid.0);
    write(
        &dir,
        "enable",
        &ApduCommand::new(CLA_CARD, ins::ENABLE, 0, 0, data.clone(), None)
            .unwrap()
            .encode()
            .unwrap(),
    );
    write(
        &dir,
        "delete",
        &ApduCommand::new(CLA_CARD, ins::DELETE, 0, 0, data, None)
            .unwrap()
            .encode()
            .unwrap(),
    );

    println!("corpus written under {}", root.display());
}
