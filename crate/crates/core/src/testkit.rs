//! Deterministic fixtures for fuzz targets and adversarial harnesses.

use crate::crypto::channel::{version, ChannelRole, SecureChannelSession};
use crate::crypto::ecka::{DpEcka, EckaMessage};
use crate::crypto::kdf::{KeyRole, SymmetricKey};
use crate::crypto::keys::{generate_keypair, CertIssuer, Scheme};
use crate::euicc::{manufacture, EckaTarget, Eid, Euicc, IsdpAid, Profile, ProfileKind};
use crate::policy::{Pol1, ProfileState};
use crate::rng::SimRng;

/// A manufactured card with one installed operational profile, plus the
/// secrets a correct dispatch path must never leak or accept.
pub struct CardFixture {
    pub card: Euicc,
    pub k80: SymmetricKey,
    pub aid: IsdpAid,
    pub naa_params: Vec<u8>,
    pub mno_sd_key: SymmetricKey,
}

/// Builds the fixture deterministically from a seed.
pub fn provisioned_card(seed: u64) -> CardFixture {
    let mut rng = SimRng::from_seed(seed);
    let ci = CertIssuer::new(&mut rng);
    let (mut card, eis) = manufacture(Eid::random(&mut rng), "eum-fuzz", 0, &ci, &mut rng);

    let aid = card.create_isdp(None).expect("fresh card accepts an ISD-P");
    let dp_pair = generate_keypair(&mut rng, Scheme::Signature);
    let dp_cert = ci.issue("sm-dp-fuzz", &dp_pair.public);
    let mut dp = DpEcka::new(dp_cert, dp_pair, card.ecasd().public_key());
    let open = dp.certificate_message().expect("fresh run");
    let challenge = card
        .establish_key_start(EckaTarget::Isdp(aid.clone()), &open)
        .expect("certificate verifies");
    let signed = dp
        .on_challenge(
            &EckaMessage::Challenge(challenge.try_into().expect("challenge length")),
            &mut rng,
        )
        .expect("challenge accepted");
    card.establish_key_finish(EckaTarget::Isdp(aid.clone()), &signed)
        .expect("agreement completes");
    let credentials = dp.credentials().expect("credentials derived");

    let mno_sd_key = SymmetricKey::random(KeyRole::MnoSd, &mut rng);
    let naa_params = rng.bytes::<24>().to_vec();
    let profile = Profile::new(
        "mno-fuzz".to_string(),
        ProfileKind::Operational,
        Pol1::NONE,
        mno_sd_key.clone(),
        naa_params.clone(),
        ProfileState::Disabled,
    );
    let mut session = SecureChannelSession::new(
        &credentials,
        version::PROFILE_INSTALL,
        ChannelRole::Initiator,
        "isdp",
    );
    let record = session
        .wrap(&profile.to_install_payload(), &aid.0)
        .expect("record wraps");
    card.install_profile(&aid, &record).expect("installs");

    CardFixture {
        card,
        k80: eis.k80,
        aid,
        naa_params,
        mno_sd_key,
    }
}
