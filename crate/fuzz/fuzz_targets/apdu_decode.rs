#![no_main]

use euicc_sim::apdu::{tlv, ApduCommand, ApduResponse};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // The decoder must be total, and anything it accepts must survive a
    // canonical re-encode round trip.
    if let Ok(cmd) = ApduCommand::decode(data) {
        let canon = cmd.encode().expect("decoded command re-encodes");
        assert_eq!(ApduCommand::decode(&canon).unwrap(), cmd);
    }
    let _ = ApduResponse::decode(data);
    let _ = tlv::parse(data);
});
