//! POL1 policy rules.
//!
//! Each profile carries three boolean rules that govern whether it may be
//! disabled or deleted, and whether it must be deleted once it is disabled.
//! The combination "must delete on disable" + "deletion disallowed" is
//! contradictory and rejected at construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum PolicyError {
    #[error("delete_on_disable contradicts delete_disallowed")]
    ContradictoryRules,
}

/// Lifecycle state of an installed profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileState {
    Disabled,
    Enabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pol1 {
    pub disable_disallowed: bool,
    pub delete_disallowed: bool,
    pub delete_on_disable: bool,
}

impl Pol1 {
    pub const NONE: Pol1 = Pol1 {
        disable_disallowed: false,
        delete_disallowed: false,
        delete_on_disable: false,
    };

    pub fn new(
        disable_disallowed: bool,
        delete_disallowed: bool,
        delete_on_disable: bool,
    ) -> Result<Self, PolicyError> {
        let rules = Pol1 {
            disable_disallowed,
            delete_disallowed,
            delete_on_disable,
        };
        rules.validate()?;
        Ok(rules)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.delete_on_disable && self.delete_disallowed {
            return Err(PolicyError::ContradictoryRules);
        }
        Ok(())
    }

    /// One-octet wire form: bit 0 disable_disallowed, bit 1
    /// delete_disallowed, bit 2 delete_on_disable.
    pub fn to_byte(&self) -> u8 {
        (self.disable_disallowed as u8)
            | (self.delete_disallowed as u8) << 1
            | (self.delete_on_disable as u8) << 2
    }

    pub fn from_byte(byte: u8) -> Result<Self, PolicyError> {
        Pol1::new(byte & 1 != 0, byte & 2 != 0, byte & 4 != 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Followup {
    None,
    DeleteProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDecision {
    pub verdict: Verdict,
    pub followup: Followup,
}

impl PolicyDecision {
    pub const ALLOW: PolicyDecision = PolicyDecision {
        verdict: Verdict::Allow,
        followup: Followup::None,
    };
    pub const DENY: PolicyDecision = PolicyDecision {
        verdict: Verdict::Deny,
        followup: Followup::None,
    };

    pub fn allowed(&self) -> bool {
        self.verdict == Verdict::Allow
    }
}

/// May this profile be disabled, and must it then be deleted?
pub fn check_disable(rules: &Pol1) -> PolicyDecision {
    if rules.disable_disallowed {
        return PolicyDecision::DENY;
    }
    PolicyDecision {
        verdict: Verdict::Allow,
        followup: if rules.delete_on_disable {
            Followup::DeleteProfile
        } else {
            Followup::None
        },
    }
}

/// May this profile be deleted? An enabled profile must be disabled first,
/// so deletion while enabled is always denied.
pub fn check_delete(rules: &Pol1, state: ProfileState) -> PolicyDecision {
    if rules.delete_disallowed || state == ProfileState::Enabled {
        return PolicyDecision::DENY;
    }
    PolicyDecision::ALLOW
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permissive_rules_allow_disable() {
        assert_eq!(check_disable(&Pol1::NONE), PolicyDecision::ALLOW);
    }

    #[test]
    fn lock_denies_disable() {
        let locked = Pol1::new(true, false, false).unwrap();
        assert_eq!(check_disable(&locked), PolicyDecision::DENY);
        let locked2 = Pol1::new(true, true, false).unwrap();
        assert_eq!(check_disable(&locked2), PolicyDecision::DENY);
    }

    #[test]
    fn delete_on_disable_mandates_followup() {
        let rules = Pol1::new(false, false, true).unwrap();
        let decision = check_disable(&rules);
        assert_eq!(decision.verdict, Verdict::Allow);
        assert_eq!(decision.followup, Followup::DeleteProfile);
    }

    #[test]
    fn delete_checks() {
        let keep = Pol1::new(false, true, false).unwrap();
        assert_eq!(check_delete(&keep, ProfileState::Disabled), PolicyDecision::DENY);
        assert_eq!(check_delete(&Pol1::NONE, ProfileState::Disabled), PolicyDecision::ALLOW);
        assert_eq!(check_delete(&Pol1::NONE, ProfileState::Enabled), PolicyDecision::DENY);
    }

    #[test]
    fn contradictory_combination_rejected() {
        assert_eq!(
            Pol1::new(false, true, true),
            Err(PolicyError::ContradictoryRules)
        );
        assert!(Pol1::new(false, false, false).is_ok());
    }

    #[test]
    fn exactly_two_of_eight_combinations_invalid() {
        // Brute force over all 8 rule combinations.
        let mut invalid = Vec::new();
        for bits in 0u8..8 {
            if Pol1::from_byte(bits).is_err() {
                invalid.push(bits);
            }
        }
        // delete_disallowed (bit 1) + delete_on_disable (bit 2), with either
        // value of disable_disallowed.
        assert_eq!(invalid, vec![0b110, 0b111]);
    }

    #[test]
    fn disable_never_mandates_delete_when_denied() {
        for bits in 0u8..8 {
            if let Ok(rules) = Pol1::from_byte(bits) {
                let d = check_disable(&rules);
                if d.verdict == Verdict::Deny {
                    assert_eq!(d.followup, Followup::None);
                }
            }
        }
    }

    #[test]
    fn byte_roundtrip() {
        for bits in 0u8..8 {
            if let Ok(rules) = Pol1::from_byte(bits) {
                assert_eq!(rules.to_byte(), bits);
            }
        }
    }
}
