//! Scenario scripts: the simulator's primary surface.
//!
//! A scenario is a line-oriented text file with three sections. Blank
//! lines and `#` comments are ignored everywhere.
//!
//! ```text
//! scenario NAME
//! seed N
//!
//! [actors]
//! eum ID
//! smsr ID capacity=N
//! smdp ID
//! mno ID
//!
//! [steps]
//! manufacture CARD eum=EUM
//! register-eis CARD smsr=SMSR
//! embed CARD
//! subscribe MNO CARD type=TYPE
//! download CARD mno=MNO smdp=SMDP profile=NAME [rules=RULES] [as LABEL]
//! enable CARD PROFILE [as LABEL]
//! disable CARD PROFILE [as LABEL]
//! delete CARD PROFILE [as LABEL]
//! set-fallback CARD PROFILE on|off [as LABEL]
//! update-pol1 CARD PROFILE mno=MNO rules=RULES [as LABEL]
//! smsr-change CARD mno=MNO to=SMSR [as LABEL]
//! ping CARD smsr=SMSR [as LABEL]
//! fault drop|duplicate [from=ID] [to=ID] [seq=N] [nth=N]
//! fault tamper index=N [from=ID] [to=ID] [seq=N] [nth=N]
//! fault delay rounds=N [from=ID] [to=ID] [seq=N] [nth=N]
//!
//! [expect]
//! step-ok LABEL
//! step-failed LABEL
//! step-status LABEL HHHH
//! profile-state CARD PROFILE enabled|disabled
//! profile-absent CARD PROFILE
//! profile-count CARD N
//! fallback CARD PROFILE true|false
//! pol1 CARD PROFILE RULES
//! eis-owner CARD SMSR
//! eis-absent SMSR CARD
//! eis-lists SMSR CARD PROFILE
//! eis-pol1 SMSR CARD PROFILE RULES
//! smdp-holds-no-key SMDP
//! trace-has-fault drop|tamper|duplicate|delay SRC DST
//! ```
//!
//! `RULES` is `none` or a `+`-joined subset of `disable_disallowed`,
//! `delete_disallowed`, `delete_on_disable`. `PROFILE` is either a name
//! introduced by a `download` step or the built-in `provisioning`. Every
//! reference must point at something declared earlier; the parser reports
//! violations with their line number.

mod run;

pub use run::{replay, run, ExpectationResult, ReplayReport, RunOptions, RunReport, StepOutcome};

use thiserror::Error;

use crate::network::{ActorId, FaultAction, FaultRule, LayerTag};
use crate::policy::Pol1;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown step '{word}'")]
    UnknownStep { line: usize, word: String },
    #[error("line {line}: reference to undeclared '{name}'")]
    DanglingReference { line: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActorDecl {
    Eum { id: String },
    SmSr { id: String, capacity: usize },
    SmDp { id: String },
    Mno { id: String },
}

/// One scripted step, tagged with its source line for error reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub line: usize,
    pub label: Option<String>,
    pub kind: StepKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    Manufacture { card: String, eum: String },
    RegisterEis { card: String, smsr: String },
    Embed { card: String },
    Subscribe { mno: String, card: String, profile_type: String },
    Download { card: String, mno: String, smdp: String, profile: String, rules: Option<Pol1> },
    Enable { card: String, profile: String },
    Disable { card: String, profile: String },
    Delete { card: String, profile: String },
    SetFallback { card: String, profile: String, flag: bool },
    UpdatePol1 { card: String, profile: String, mno: String, rules: Pol1 },
    SmsrChange { card: String, mno: String, to: String },
    Ping { card: String, smsr: String },
    InjectFault { rule: FaultRule },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expectation {
    StepOk { label: String },
    StepFailed { label: String },
    StepStatus { label: String, status: u16 },
    ProfileState { card: String, profile: String, enabled: bool },
    ProfileAbsent { card: String, profile: String },
    ProfileCount { card: String, count: usize },
    Fallback { card: String, profile: String, flag: bool },
    Pol1Is { card: String, profile: String, rules: Pol1 },
    EisOwner { card: String, smsr: String },
    EisAbsent { smsr: String, card: String },
    EisLists { smsr: String, card: String, profile: String },
    EisPol1 { smsr: String, card: String, profile: String, rules: Pol1 },
    SmdpHoldsNoKey { smdp: String },
    TraceHasFault { action: String, src: String, dst: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub actors: Vec<ActorDecl>,
    pub steps: Vec<Step>,
    pub expectations: Vec<(usize, Expectation)>,
    /// Original text, embedded in trace files so replay is self-contained.
    pub source: String,
}

fn syntax(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Syntax {
        line,
        message: message.into(),
    }
}

/// Splits a step line into positional words, `key=value` options, and the
/// optional trailing `as LABEL`.
struct Words<'a> {
    positional: Vec<&'a str>,
    options: Vec<(&'a str, &'a str)>,
    label: Option<String>,
}

fn split_words(line_no: usize, text: &str) -> Result<Words<'_>, ScenarioError> {
    let mut positional = Vec::new();
    let mut options = Vec::new();
    let mut label = None;
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut index = 0;
    while index < tokens.len() {
        let token = tokens[index];
        if token == "as" {
            let name = tokens
                .get(index + 1)
                .ok_or_else(|| syntax(line_no, "'as' needs a label"))?;
            if index + 2 != tokens.len() {
                return Err(syntax(line_no, "'as LABEL' must end the line"));
            }
            label = Some(name.to_string());
            break;
        } else if let Some(eq) = token.find('=') {
            options.push((&token[..eq], &token[eq + 1..]));
        } else {
            positional.push(token);
        }
        index += 1;
    }
    Ok(Words {
        positional,
        options,
        label,
    })
}

fn option<'a>(words: &Words<'a>, key: &str) -> Option<&'a str> {
    words
        .options
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
}

fn require_option<'a>(
    line: usize,
    words: &Words<'a>,
    key: &str,
) -> Result<&'a str, ScenarioError> {
    option(words, key).ok_or_else(|| syntax(line, format!("missing {key}=...")))
}

fn parse_rules(line: usize, text: &str) -> Result<Pol1, ScenarioError> {
    if text == "none" {
        return Ok(Pol1::NONE);
    }
    let mut rules = Pol1::NONE;
    for part in text.split('+') {
        match part {
            "disable_disallowed" => rules.disable_disallowed = true,
            "delete_disallowed" => rules.delete_disallowed = true,
            "delete_on_disable" => rules.delete_on_disable = true,
            other => return Err(syntax(line, format!("unknown rule '{other}'"))),
        }
    }
    rules
        .validate()
        .map_err(|e| syntax(line, e.to_string()))?;
    Ok(rules)
}

fn parse_layer(line: usize, text: &str) -> Result<LayerTag, ScenarioError> {
    Ok(match text {
        "actor-plain" => LayerTag::ActorPlain,
        "ota-isdr" => LayerTag::OtaIsdr,
        "dp-isdp" => LayerTag::DpIsdp,
        "mno-profile" => LayerTag::MnoProfile,
        other => return Err(syntax(line, format!("unknown layer '{other}'"))),
    })
}

fn parse_number<T: std::str::FromStr>(line: usize, text: &str, what: &str) -> Result<T, ScenarioError> {
    text.parse()
        .map_err(|_| syntax(line, format!("invalid {what} '{text}'")))
}

/// Tracks declared names to validate references as the file is read.
#[derive(Default)]
struct Declared {
    eums: Vec<String>,
    smsrs: Vec<String>,
    smdps: Vec<String>,
    mnos: Vec<String>,
    cards: Vec<String>,
    /// (card, profile-name) pairs from download steps.
    profiles: Vec<(String, String)>,
    labels: Vec<String>,
}

impl Declared {
    fn check(
        &self,
        line: usize,
        pool: &[String],
        name: &str,
    ) -> Result<(), ScenarioError> {
        if pool.iter().any(|candidate| candidate == name) {
            Ok(())
        } else {
            Err(ScenarioError::DanglingReference {
                line,
                name: name.to_string(),
            })
        }
    }

    fn check_profile(&self, line: usize, card: &str, profile: &str) -> Result<(), ScenarioError> {
        if profile == "provisioning" {
            return Ok(());
        }
        if self
            .profiles
            .iter()
            .any(|(c, p)| c == card && p == profile)
        {
            Ok(())
        } else {
            Err(ScenarioError::DanglingReference {
                line,
                name: format!("{card}/{profile}"),
            })
        }
    }
}

enum Section {
    Preamble,
    Actors,
    Steps,
    Expect,
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut name = None;
    let mut seed = 0u64;
    let mut actors = Vec::new();
    let mut steps: Vec<Step> = Vec::new();
    let mut expectations = Vec::new();
    let mut section = Section::Preamble;
    let mut declared = Declared::default();

    for (index, raw_line) in text.lines().enumerate() {
        let line_no = index + 1;
        let line = match raw_line.find('#') {
            Some(at) => &raw_line[..at],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }

        match line {
            "[actors]" => {
                section = Section::Actors;
                continue;
            }
            "[steps]" => {
                section = Section::Steps;
                continue;
            }
            "[expect]" => {
                section = Section::Expect;
                continue;
            }
            _ => {}
        }

        match section {
            Section::Preamble => {
                let words = split_words(line_no, line)?;
                match words.positional.as_slice() {
                    ["scenario", n] => name = Some(n.to_string()),
                    ["seed", s] => seed = parse_number(line_no, s, "seed")?,
                    _ => return Err(syntax(line_no, "expected 'scenario NAME' or 'seed N'")),
                }
            }
            Section::Actors => {
                let words = split_words(line_no, line)?;
                match words.positional.as_slice() {
                    ["eum", id] => {
                        declared.eums.push(id.to_string());
                        actors.push(ActorDecl::Eum { id: id.to_string() });
                    }
                    ["smsr", id] => {
                        let capacity =
                            parse_number(line_no, option(&words, "capacity").unwrap_or("8"), "capacity")?;
                        declared.smsrs.push(id.to_string());
                        actors.push(ActorDecl::SmSr {
                            id: id.to_string(),
                            capacity,
                        });
                    }
                    ["smdp", id] => {
                        declared.smdps.push(id.to_string());
                        actors.push(ActorDecl::SmDp { id: id.to_string() });
                    }
                    ["mno", id] => {
                        declared.mnos.push(id.to_string());
                        actors.push(ActorDecl::Mno { id: id.to_string() });
                    }
                    _ => return Err(syntax(line_no, "expected eum/smsr/smdp/mno declaration")),
                }
            }
            Section::Steps => {
                let words = split_words(line_no, line)?;
                let kind_word = *words
                    .positional
                    .first()
                    .ok_or_else(|| syntax(line_no, "empty step"))?;
                let kind = match kind_word {
                    "manufacture" => {
                        let card = positional(line_no, &words, 1, "card name")?;
                        let eum = require_option(line_no, &words, "eum")?;
                        declared.check(line_no, &declared.eums, eum)?;
                        declared.cards.push(card.to_string());
                        StepKind::Manufacture {
                            card: card.to_string(),
                            eum: eum.to_string(),
                        }
                    }
                    "register-eis" => {
                        let card = positional(line_no, &words, 1, "card name")?;
                        let smsr = require_option(line_no, &words, "smsr")?;
                        declared.check(line_no, &declared.cards, card)?;
                        declared.check(line_no, &declared.smsrs, smsr)?;
                        StepKind::RegisterEis {
                            card: card.to_string(),
                            smsr: smsr.to_string(),
                        }
                    }
                    "embed" => {
                        let card = positional(line_no, &words, 1, "card name")?;
                        declared.check(line_no, &declared.cards, card)?;
                        StepKind::Embed {
                            card: card.to_string(),
                        }
                    }
                    "subscribe" => {
                        let mno = positional(line_no, &words, 1, "mno")?;
                        let card = positional(line_no, &words, 2, "card name")?;
                        let profile_type = require_option(line_no, &words, "type")?;
                        declared.check(line_no, &declared.mnos, mno)?;
                        declared.check(line_no, &declared.cards, card)?;
                        StepKind::Subscribe {
                            mno: mno.to_string(),
                            card: card.to_string(),
                            profile_type: profile_type.to_string(),
                        }
                    }
                    "download" => {
                        let card = positional(line_no, &words, 1, "card name")?;
                        let mno = require_option(line_no, &words, "mno")?;
                        let smdp = require_option(line_no, &words, "smdp")?;
                        let profile = require_option(line_no, &words, "profile")?;
                        declared.check(line_no, &declared.cards, card)?;
                        declared.check(line_no, &declared.mnos, mno)?;
                        declared.check(line_no, &declared.smdps, smdp)?;
                        let rules = option(&words, "rules")
                            .map(|r| parse_rules(line_no, r))
                            .transpose()?;
                        declared
                            .profiles
                            .push((card.to_string(), profile.to_string()));
                        StepKind::Download {
                            card: card.to_string(),
                            mno: mno.to_string(),
                            smdp: smdp.to_string(),
                            profile: profile.to_string(),
                            rules,
                        }
                    }
                    "enable" | "disable" | "delete" => {
                        let card = positional(line_no, &words, 1, "card name")?;
                        let profile = positional(line_no, &words, 2, "profile")?;
                        declared.check(line_no, &declared.cards, card)?;
                        declared.check_profile(line_no, card, profile)?;
                        let card = card.to_string();
                        let profile = profile.to_string();
                        match kind_word {
                            "enable" => StepKind::Enable { card, profile },
                            "disable" => StepKind::Disable { card, profile },
                            _ => StepKind::Delete { card, profile },
                        }
                    }
                    "set-fallback" => {
                        let card = positional(line_no, &words, 1, "card name")?;
                        let profile = positional(line_no, &words, 2, "profile")?;
                        let flag = match positional(line_no, &words, 3, "on|off")? {
                            "on" => true,
                            "off" => false,
                            other => {
                                return Err(syntax(line_no, format!("expected on|off, got '{other}'")))
                            }
                        };
                        declared.check(line_no, &declared.cards, card)?;
                        declared.check_profile(line_no, card, profile)?;
                        StepKind::SetFallback {
                            card: card.to_string(),
                            profile: profile.to_string(),
                            flag,
                        }
                    }
                    "update-pol1" => {
                        let card = positional(line_no, &words, 1, "card name")?;
                        let profile = positional(line_no, &words, 2, "profile")?;
                        let mno = require_option(line_no, &words, "mno")?;
                        let rules = parse_rules(line_no, require_option(line_no, &words, "rules")?)?;
                        declared.check(line_no, &declared.cards, card)?;
                        declared.check_profile(line_no, card, profile)?;
                        declared.check(line_no, &declared.mnos, mno)?;
                        StepKind::UpdatePol1 {
                            card: card.to_string(),
                            profile: profile.to_string(),
                            mno: mno.to_string(),
                            rules,
                        }
                    }
                    "smsr-change" => {
                        let card = positional(line_no, &words, 1, "card name")?;
                        let mno = require_option(line_no, &words, "mno")?;
                        let to = require_option(line_no, &words, "to")?;
                        declared.check(line_no, &declared.cards, card)?;
                        declared.check(line_no, &declared.mnos, mno)?;
                        declared.check(line_no, &declared.smsrs, to)?;
                        StepKind::SmsrChange {
                            card: card.to_string(),
                            mno: mno.to_string(),
                            to: to.to_string(),
                        }
                    }
                    "ping" => {
                        let card = positional(line_no, &words, 1, "card name")?;
                        let smsr = require_option(line_no, &words, "smsr")?;
                        declared.check(line_no, &declared.cards, card)?;
                        declared.check(line_no, &declared.smsrs, smsr)?;
                        StepKind::Ping {
                            card: card.to_string(),
                            smsr: smsr.to_string(),
                        }
                    }
                    "fault" => {
                        let action = match positional(line_no, &words, 1, "fault action")? {
                            "drop" => FaultAction::Drop,
                            "duplicate" => FaultAction::Duplicate,
                            "tamper" => FaultAction::TamperOctet(parse_number(
                                line_no,
                                require_option(line_no, &words, "index")?,
                                "index",
                            )?),
                            "delay" => FaultAction::Delay(parse_number(
                                line_no,
                                require_option(line_no, &words, "rounds")?,
                                "rounds",
                            )?),
                            other => {
                                return Err(syntax(line_no, format!("unknown fault '{other}'")))
                            }
                        };
                        let rule = FaultRule {
                            src: option(&words, "from").map(ActorId::new),
                            dst: option(&words, "to").map(ActorId::new),
                            seq: option(&words, "seq")
                                .map(|s| parse_number(line_no, s, "seq"))
                                .transpose()?,
                            layer: option(&words, "layer")
                                .map(|l| parse_layer(line_no, l))
                                .transpose()?,
                            nth: option(&words, "nth")
                                .map(|n| parse_number(line_no, n, "nth"))
                                .transpose()?,
                            action,
                        };
                        StepKind::InjectFault { rule }
                    }
                    other => {
                        return Err(ScenarioError::UnknownStep {
                            line: line_no,
                            word: other.to_string(),
                        })
                    }
                };
                if let Some(label) = &words.label {
                    if declared.labels.contains(label) {
                        return Err(syntax(line_no, format!("duplicate label '{label}'")));
                    }
                    declared.labels.push(label.clone());
                }
                steps.push(Step {
                    line: line_no,
                    label: words.label.clone(),
                    kind,
                });
            }
            Section::Expect => {
                let words = split_words(line_no, line)?;
                let expectation = parse_expectation(line_no, &words, &declared)?;
                expectations.push((line_no, expectation));
            }
        }
    }

    Ok(Scenario {
        name: name.ok_or_else(|| syntax(1, "missing 'scenario NAME' line"))?,
        seed,
        actors,
        steps,
        expectations,
        source: text.to_string(),
    })
}

fn positional<'a>(
    line: usize,
    words: &Words<'a>,
    index: usize,
    what: &str,
) -> Result<&'a str, ScenarioError> {
    words
        .positional
        .get(index)
        .copied()
        .ok_or_else(|| syntax(line, format!("missing {what}")))
}

fn parse_expectation(
    line: usize,
    words: &Words<'_>,
    declared: &Declared,
) -> Result<Expectation, ScenarioError> {
    let kind = *words
        .positional
        .first()
        .ok_or_else(|| syntax(line, "empty expectation"))?;
    Ok(match kind {
        "step-ok" | "step-failed" => {
            let label = positional(line, words, 1, "label")?;
            declared.check(line, &declared.labels, label)?;
            if kind == "step-ok" {
                Expectation::StepOk {
                    label: label.to_string(),
                }
            } else {
                Expectation::StepFailed {
                    label: label.to_string(),
                }
            }
        }
        "step-status" => {
            let label = positional(line, words, 1, "label")?;
            declared.check(line, &declared.labels, label)?;
            let status = u16::from_str_radix(positional(line, words, 2, "status")?, 16)
                .map_err(|_| syntax(line, "status must be 4 hex digits"))?;
            Expectation::StepStatus {
                label: label.to_string(),
                status,
            }
        }
        "profile-state" => {
            let card = positional(line, words, 1, "card")?;
            let profile = positional(line, words, 2, "profile")?;
            declared.check(line, &declared.cards, card)?;
            declared.check_profile(line, card, profile)?;
            let enabled = match positional(line, words, 3, "enabled|disabled")? {
                "enabled" => true,
                "disabled" => false,
                other => return Err(syntax(line, format!("expected enabled|disabled, got '{other}'"))),
            };
            Expectation::ProfileState {
                card: card.to_string(),
                profile: profile.to_string(),
                enabled,
            }
        }
        "profile-absent" => {
            let card = positional(line, words, 1, "card")?;
            let profile = positional(line, words, 2, "profile")?;
            declared.check(line, &declared.cards, card)?;
            declared.check_profile(line, card, profile)?;
            Expectation::ProfileAbsent {
                card: card.to_string(),
                profile: profile.to_string(),
            }
        }
        "profile-count" => {
            let card = positional(line, words, 1, "card")?;
            declared.check(line, &declared.cards, card)?;
            Expectation::ProfileCount {
                card: card.to_string(),
                count: parse_number(line, positional(line, words, 2, "count")?, "count")?,
            }
        }
        "fallback" => {
            let card = positional(line, words, 1, "card")?;
            let profile = positional(line, words, 2, "profile")?;
            declared.check(line, &declared.cards, card)?;
            declared.check_profile(line, card, profile)?;
            let flag = match positional(line, words, 3, "true|false")? {
                "true" => true,
                "false" => false,
                other => return Err(syntax(line, format!("expected true|false, got '{other}'"))),
            };
            Expectation::Fallback {
                card: card.to_string(),
                profile: profile.to_string(),
                flag,
            }
        }
        "pol1" => {
            let card = positional(line, words, 1, "card")?;
            let profile = positional(line, words, 2, "profile")?;
            declared.check(line, &declared.cards, card)?;
            declared.check_profile(line, card, profile)?;
            Expectation::Pol1Is {
                card: card.to_string(),
                profile: profile.to_string(),
                rules: parse_rules(line, positional(line, words, 3, "rules")?)?,
            }
        }
        "eis-owner" => {
            let card = positional(line, words, 1, "card")?;
            let smsr = positional(line, words, 2, "smsr")?;
            declared.check(line, &declared.cards, card)?;
            declared.check(line, &declared.smsrs, smsr)?;
            Expectation::EisOwner {
                card: card.to_string(),
                smsr: smsr.to_string(),
            }
        }
        "eis-absent" => {
            let smsr = positional(line, words, 1, "smsr")?;
            let card = positional(line, words, 2, "card")?;
            declared.check(line, &declared.smsrs, smsr)?;
            declared.check(line, &declared.cards, card)?;
            Expectation::EisAbsent {
                smsr: smsr.to_string(),
                card: card.to_string(),
            }
        }
        "eis-lists" => {
            let smsr = positional(line, words, 1, "smsr")?;
            let card = positional(line, words, 2, "card")?;
            let profile = positional(line, words, 3, "profile")?;
            declared.check(line, &declared.smsrs, smsr)?;
            declared.check(line, &declared.cards, card)?;
            declared.check_profile(line, card, profile)?;
            Expectation::EisLists {
                smsr: smsr.to_string(),
                card: card.to_string(),
                profile: profile.to_string(),
            }
        }
        "eis-pol1" => {
            let smsr = positional(line, words, 1, "smsr")?;
            let card = positional(line, words, 2, "card")?;
            let profile = positional(line, words, 3, "profile")?;
            declared.check(line, &declared.smsrs, smsr)?;
            declared.check(line, &declared.cards, card)?;
            declared.check_profile(line, card, profile)?;
            Expectation::EisPol1 {
                smsr: smsr.to_string(),
                card: card.to_string(),
                profile: profile.to_string(),
                rules: parse_rules(line, positional(line, words, 4, "rules")?)?,
            }
        }
        "smdp-holds-no-key" => {
            let smdp = positional(line, words, 1, "smdp")?;
            declared.check(line, &declared.smdps, smdp)?;
            Expectation::SmdpHoldsNoKey {
                smdp: smdp.to_string(),
            }
        }
        "trace-has-fault" => Expectation::TraceHasFault {
            action: positional(line, words, 1, "action")?.to_string(),
            src: positional(line, words, 2, "src")?.to_string(),
            dst: positional(line, words, 3, "dst")?.to_string(),
        },
        other => return Err(syntax(line, format!("unknown expectation '{other}'"))),
    })
}
