#![no_main]

use std::sync::OnceLock;

use euicc_sim::apdu::{sw, ApduCommand};
use euicc_sim::euicc::CommandContext;
use euicc_sim::testkit::{provisioned_card, CardFixture};
use libfuzzer_sys::fuzz_target;

fn fixture() -> &'static CardFixture {
    static FIXTURE: OnceLock<CardFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| provisioned_card(0xF0CB))
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fuzz_target!(|data: &[u8]| {
    // Authenticated-channel adversary: arbitrary command frames reach the
    // dispatcher, but profile contents must stay unreadable and every
    // error must leave the card exactly as it was.
    let Ok(cmd) = ApduCommand::decode(data) else {
        return;
    };
    let fixture = fixture();
    let mut card = fixture.card.clone();
    let before = card.snapshot();
    let response = card.process_apdu(&CommandContext::trusted("fuzzer"), &cmd);

    assert!(!contains(&response.data, &fixture.naa_params));
    assert!(!contains(&response.data, &fixture.mno_sd_key.bytes));
    assert!(!contains(&response.data, &fixture.k80.bytes));
    if response.status != sw::SUCCESS {
        assert_eq!(card.snapshot(), before);
    }
    assert_eq!(card.enabled_count(), 1);

    let profile = card
        .isdp(&fixture.aid)
        .and_then(|isdp| isdp.profile.as_ref());
    if let Some(profile) = profile {
        assert_eq!(profile.naa_params, fixture.naa_params);
        assert_eq!(profile.mno_sd_key, fixture.mno_sd_key);
    }
});
