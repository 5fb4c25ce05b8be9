#![no_main]

use std::sync::OnceLock;

use euicc_sim::euicc::Euicc;
use euicc_sim::testkit::provisioned_card;
use libfuzzer_sys::fuzz_target;

fn template() -> &'static Euicc {
    static CARD: OnceLock<Euicc> = OnceLock::new();
    CARD.get_or_init(|| provisioned_card(0xF0CA).card)
}

fuzz_target!(|data: &[u8]| {
    // Arbitrary wire records against the card transport: never panic,
    // always answer, never break the structural invariants.
    let mut card = template().clone();
    let reply = card.process_record(data);
    assert!(!reply.is_empty());
    assert_eq!(card.enabled_count(), 1);
    assert!(card.fallback_count() <= 1);
});
