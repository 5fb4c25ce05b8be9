//! Adversarial command fuzzing of the card dispatch (bounded, seeded): no
//! command arriving in ISD-R context may read or mutate profile contents,
//! and errors must leave the card state untouched.

use euicc_sim::apdu::{sw, ApduCommand, CLA_CARD};
use euicc_sim::euicc::CommandContext;
use euicc_sim::rng::SimRng;
use euicc_sim::testkit::provisioned_card;

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn random_commands_never_leak_or_corrupt_profiles() {
    let fixture = provisioned_card(0x150);
    let mut rng = SimRng::from_seed(0x151);
    let ctx = CommandContext::trusted("adversary");

    let secret_needles: [&[u8]; 3] = [
        &fixture.naa_params,
        &fixture.mno_sd_key.bytes,
        &fixture.k80.bytes,
    ];

    let mut card = fixture.card.clone();
    for case in 0..20_000u32 {
        // Half structured (valid frame, random INS/payload), half raw soup
        // thrown at the decoder first.
        let cmd = if case % 2 == 0 {
            let len = rng.below(64) as usize;
            let mut data = vec![0u8; len];
            rng.fill_bytes(&mut data);
            ApduCommand::new(
                if rng.below(4) == 0 { rng.below(256) as u8 } else { CLA_CARD },
                rng.below(256) as u8,
                rng.below(256) as u8,
                rng.below(256) as u8,
                data,
                None,
            )
            .unwrap()
        } else {
            let len = rng.below(96) as usize;
            let mut bytes = vec![0u8; len];
            rng.fill_bytes(&mut bytes);
            match ApduCommand::decode(&bytes) {
                Ok(cmd) => cmd,
                Err(_) => continue,
            }
        };

        let before = card.snapshot();
        let response = card.process_apdu(&ctx, &cmd);

        for needle in secret_needles {
            assert!(
                !contains(&response.data, needle),
                "case {case}: response leaked profile material"
            );
        }
        if response.status != sw::SUCCESS {
            assert_eq!(card.snapshot(), before, "case {case}: error mutated state");
        }
        // Structural invariants survive arbitrary dispatch.
        assert_eq!(card.enabled_count(), 1, "case {case}");
        assert!(card.fallback_count() <= 1, "case {case}");

        // The installed profile's contents are only ever changed through
        // its own keyed paths, which this adversary does not hold.
        let profile = card
            .isdp(&fixture.aid)
            .map(|isdp| isdp.profile.as_ref().expect("personalized"));
        if let Some(profile) = profile {
            assert_eq!(profile.naa_params, fixture.naa_params, "case {case}");
            assert_eq!(profile.mno_sd_key, fixture.mno_sd_key, "case {case}");
        }
    }
}

#[test]
fn raw_transport_garbage_is_always_nacked() {
    let fixture = provisioned_card(0x152);
    let mut card = fixture.card.clone();
    let mut rng = SimRng::from_seed(0x153);
    let baseline = card.snapshot();
    for _ in 0..5_000 {
        let len = rng.below(200) as usize;
        let mut bytes = vec![0u8; len];
        rng.fill_bytes(&mut bytes);
        let reply = card.process_record(&bytes);
        assert!(!reply.is_empty());
    }
    assert_eq!(card.snapshot(), baseline, "unauthenticated traffic mutated state");
}
