//! Scenario execution: drives a [`World`] through the scripted steps,
//! evaluates the expectations against final state and trace, and renders
//! the run report. Also writes/replays the trace log.
//!
//! Runtime failures of individual steps never abort the run: the outcome
//! is recorded (with the card's status word when one was returned) and
//! later steps still execute, so expectations can assert on failures.
//!
//! A trace file is line-delimited JSON: one `meta` line carrying the
//! scenario text and effective seed, one `event` line per network event,
//! and one `digest` line per final actor state. Because a run is a pure
//! function of (scenario, seed, fault plan), `replay` re-executes the
//! embedded scenario and verifies the regenerated lines match the file
//! octet for octet.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::euicc::IsdpAid;
use crate::network::{FaultPlan, TraceEvent, TraceKind};
use crate::policy::ProfileState;
use crate::subman::{EisRecord, ProcedureError, World};

use super::{Expectation, Scenario, Step, StepKind};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed_override: Option<u64>,
    pub trace_path: Option<PathBuf>,
    pub registry_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub index: usize,
    pub line: usize,
    pub describe: String,
    pub label: Option<String>,
    pub ok: bool,
    /// Card status word attached to a failure, when the card answered.
    pub status: Option<u16>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationResult {
    pub line: usize,
    pub describe: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub steps: Vec<StepOutcome>,
    pub expectations: Vec<ExpectationResult>,
    /// Final state digests: `card:<name>` and `smsr:<id>` entries.
    pub digests: BTreeMap<String, String>,
    pub trace_events: usize,
    pub trace_path: Option<String>,
    pub passed: bool,
}

impl RunReport {
    /// Stable text rendering; one line per step and expectation.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "scenario: {}", self.scenario).unwrap();
        writeln!(out, "seed: {}", self.seed).unwrap();
        for step in &self.steps {
            writeln!(
                out,
                "step {:02} {} {}{}",
                step.index,
                if step.ok { "ok  " } else { "FAIL" },
                step.describe,
                if step.detail.is_empty() {
                    String::new()
                } else {
                    format!(" — {}", step.detail)
                }
            )
            .unwrap();
        }
        for exp in &self.expectations {
            writeln!(
                out,
                "expect {} {}{}",
                if exp.pass { "ok  " } else { "FAIL" },
                exp.describe,
                if exp.detail.is_empty() {
                    String::new()
                } else {
                    format!(" — {}", exp.detail)
                }
            )
            .unwrap();
        }
        for (entity, digest) in &self.digests {
            writeln!(out, "digest {entity} {digest}").unwrap();
        }
        writeln!(out, "trace-events: {}", self.trace_events).unwrap();
        if let Some(path) = &self.trace_path {
            writeln!(out, "trace-path: {path}").unwrap();
        }
        writeln!(out, "result: {}", if self.passed { "PASS" } else { "FAIL" }).unwrap();
        out
    }
}

// -- trace file lines ---------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MetaLine {
    meta: Meta,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    scenario: String,
    seed: u64,
    source: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventLine {
    event: TraceEvent,
}

#[derive(Debug, Serialize, Deserialize)]
struct DigestLine {
    digest: DigestEntry,
}

#[derive(Debug, Serialize, Deserialize)]
struct DigestEntry {
    entity: String,
    value: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryLine {
    smsr: String,
    eis: EisRecord,
}

struct Runtime {
    world: World,
    /// (card, profile-name) → installed ISD-P.
    profiles: BTreeMap<(String, String), IsdpAid>,
}

impl Runtime {
    fn resolve_profile(&self, card: &str, profile: &str) -> Result<IsdpAid, String> {
        if profile == "provisioning" {
            return self
                .world
                .card(card)
                .map(|c| c.provisioning_aid())
                .ok_or_else(|| format!("card {card} does not exist"));
        }
        self.profiles
            .get(&(card.to_string(), profile.to_string()))
            .cloned()
            .ok_or_else(|| format!("profile {profile} was never installed on {card}"))
    }
}

fn procedure_outcome(result: Result<(), ProcedureError>) -> (bool, Option<u16>, String) {
    match result {
        Ok(()) => (true, None, String::new()),
        Err(err) => (false, err.status(), err.to_string()),
    }
}

fn describe_step(step: &Step) -> String {
    let body = match &step.kind {
        StepKind::Manufacture { card, eum } => format!("manufacture {card} eum={eum}"),
        StepKind::RegisterEis { card, smsr } => format!("register-eis {card} smsr={smsr}"),
        StepKind::Embed { card } => format!("embed {card}"),
        StepKind::Subscribe {
            mno,
            card,
            profile_type,
        } => format!("subscribe {mno} {card} type={profile_type}"),
        StepKind::Download {
            card,
            mno,
            smdp,
            profile,
            ..
        } => format!("download {card} mno={mno} smdp={smdp} profile={profile}"),
        StepKind::Enable { card, profile } => format!("enable {card} {profile}"),
        StepKind::Disable { card, profile } => format!("disable {card} {profile}"),
        StepKind::Delete { card, profile } => format!("delete {card} {profile}"),
        StepKind::SetFallback {
            card,
            profile,
            flag,
        } => format!("set-fallback {card} {profile} {}", if *flag { "on" } else { "off" }),
        StepKind::UpdatePol1 {
            card, profile, mno, ..
        } => format!("update-pol1 {card} {profile} mno={mno}"),
        StepKind::SmsrChange { card, mno, to } => {
            format!("smsr-change {card} mno={mno} to={to}")
        }
        StepKind::Ping { card, smsr } => format!("ping {card} smsr={smsr}"),
        StepKind::InjectFault { rule } => format!("fault {}", rule.action),
    };
    match &step.label {
        Some(label) => format!("{body} as {label}"),
        None => body,
    }
}

fn execute_step(runtime: &mut Runtime, step: &Step) -> (bool, Option<u16>, String) {
    match &step.kind {
        StepKind::Manufacture { card, eum } => match runtime.world.manufacture_card(card, eum) {
            Ok(eid) => (true, None, format!("eid {eid}")),
            Err(err) => (false, None, err.to_string()),
        },
        StepKind::RegisterEis { card, smsr } => {
            procedure_outcome(runtime.world.register_eis(card, smsr))
        }
        StepKind::Embed { card } => procedure_outcome(runtime.world.embed(card)),
        StepKind::Subscribe {
            mno,
            card,
            profile_type,
        } => procedure_outcome(runtime.world.subscribe(mno, card, profile_type)),
        StepKind::Download {
            card,
            mno,
            smdp,
            profile,
            rules,
        } => match runtime.world.download_profile(card, mno, smdp, *rules) {
            Ok(aid) => {
                runtime
                    .profiles
                    .insert((card.clone(), profile.clone()), aid.clone());
                (true, None, format!("isdp {aid}"))
            }
            Err(err) => (false, err.status(), err.to_string()),
        },
        StepKind::Enable { card, profile } => match runtime.resolve_profile(card, profile) {
            Ok(aid) => procedure_outcome(runtime.world.enable_profile(card, &aid)),
            Err(detail) => (false, None, detail),
        },
        StepKind::Disable { card, profile } => match runtime.resolve_profile(card, profile) {
            Ok(aid) => procedure_outcome(runtime.world.disable_profile(card, &aid)),
            Err(detail) => (false, None, detail),
        },
        StepKind::Delete { card, profile } => match runtime.resolve_profile(card, profile) {
            Ok(aid) => procedure_outcome(runtime.world.delete_profile(card, &aid)),
            Err(detail) => (false, None, detail),
        },
        StepKind::SetFallback {
            card,
            profile,
            flag,
        } => match runtime.resolve_profile(card, profile) {
            Ok(aid) => procedure_outcome(runtime.world.set_fallback(card, &aid, *flag)),
            Err(detail) => (false, None, detail),
        },
        StepKind::UpdatePol1 {
            card,
            profile,
            mno,
            rules,
        } => match runtime.resolve_profile(card, profile) {
            Ok(aid) => procedure_outcome(runtime.world.update_policy(card, &aid, mno, *rules)),
            Err(detail) => (false, None, detail),
        },
        StepKind::SmsrChange { card, mno, to } => {
            procedure_outcome(runtime.world.smsr_change(card, mno, to))
        }
        StepKind::Ping { card, smsr } => match runtime.world.ping(smsr, card) {
            Ok(true) => (true, None, String::new()),
            Ok(false) => (false, None, "card refused the ping".into()),
            Err(err) => (false, err.status(), err.to_string()),
        },
        StepKind::InjectFault { rule } => {
            runtime.world.add_fault_rule(rule.clone());
            (true, None, String::new())
        }
    }
}

fn describe_expectation(exp: &Expectation) -> String {
    match exp {
        Expectation::StepOk { label } => format!("step-ok {label}"),
        Expectation::StepFailed { label } => format!("step-failed {label}"),
        Expectation::StepStatus { label, status } => format!("step-status {label} {status:04X}"),
        Expectation::ProfileState {
            card,
            profile,
            enabled,
        } => format!(
            "profile-state {card} {profile} {}",
            if *enabled { "enabled" } else { "disabled" }
        ),
        Expectation::ProfileAbsent { card, profile } => {
            format!("profile-absent {card} {profile}")
        }
        Expectation::ProfileCount { card, count } => format!("profile-count {card} {count}"),
        Expectation::Fallback {
            card,
            profile,
            flag,
        } => format!("fallback {card} {profile} {flag}"),
        Expectation::Pol1Is { card, profile, rules } => {
            format!("pol1 {card} {profile} {:03b}", rules.to_byte())
        }
        Expectation::EisOwner { card, smsr } => format!("eis-owner {card} {smsr}"),
        Expectation::EisAbsent { smsr, card } => format!("eis-absent {smsr} {card}"),
        Expectation::EisLists {
            smsr,
            card,
            profile,
        } => format!("eis-lists {smsr} {card} {profile}"),
        Expectation::EisPol1 {
            smsr,
            card,
            profile,
            rules,
        } => format!("eis-pol1 {smsr} {card} {profile} {:03b}", rules.to_byte()),
        Expectation::SmdpHoldsNoKey { smdp } => format!("smdp-holds-no-key {smdp}"),
        Expectation::TraceHasFault { action, src, dst } => {
            format!("trace-has-fault {action} {src} {dst}")
        }
    }
}

fn evaluate_expectation(
    runtime: &Runtime,
    outcomes: &[StepOutcome],
    exp: &Expectation,
) -> (bool, String) {
    let by_label = |label: &str| {
        outcomes
            .iter()
            .find(|o| o.label.as_deref() == Some(label))
    };
    let fail = |detail: String| (false, detail);
    match exp {
        Expectation::StepOk { label } => match by_label(label) {
            Some(outcome) if outcome.ok => (true, String::new()),
            Some(outcome) => fail(format!("step failed: {}", outcome.detail)),
            None => fail("step never ran".into()),
        },
        Expectation::StepFailed { label } => match by_label(label) {
            Some(outcome) if !outcome.ok => (true, String::new()),
            Some(_) => fail("step succeeded".into()),
            None => fail("step never ran".into()),
        },
        Expectation::StepStatus { label, status } => match by_label(label) {
            Some(outcome) if outcome.status == Some(*status) => (true, String::new()),
            Some(outcome) => fail(format!(
                "status was {}",
                outcome
                    .status
                    .map(|s| format!("{s:04X}"))
                    .unwrap_or_else(|| format!("absent ({})", outcome.detail))
            )),
            None => fail("step never ran".into()),
        },
        Expectation::ProfileState {
            card,
            profile,
            enabled,
        } => match runtime.resolve_profile(card, profile) {
            Ok(aid) => {
                let state = runtime
                    .world
                    .card(card)
                    .and_then(|c| c.isdp(&aid))
                    .and_then(|isdp| isdp.profile.as_ref())
                    .map(|p| p.state);
                match state {
                    Some(state) => {
                        let want = if *enabled {
                            ProfileState::Enabled
                        } else {
                            ProfileState::Disabled
                        };
                        if state == want {
                            (true, String::new())
                        } else {
                            fail(format!("state is {state:?}"))
                        }
                    }
                    None => fail("profile not on card".into()),
                }
            }
            Err(detail) => fail(detail),
        },
        Expectation::ProfileAbsent { card, profile } => {
            match runtime
                .profiles
                .get(&(card.to_string(), profile.to_string()))
            {
                None => (true, String::new()),
                Some(aid) => match runtime.world.card(card).and_then(|c| c.isdp(aid)) {
                    None => (true, String::new()),
                    Some(_) => fail("profile still on card".into()),
                },
            }
        }
        Expectation::ProfileCount { card, count } => match runtime.world.card(card) {
            Some(c) => {
                let n = c.isdp_count();
                if n == *count {
                    (true, String::new())
                } else {
                    fail(format!("count is {n}"))
                }
            }
            None => fail("card does not exist".into()),
        },
        Expectation::Fallback {
            card,
            profile,
            flag,
        } => match runtime.resolve_profile(card, profile) {
            Ok(aid) => {
                let actual = runtime
                    .world
                    .card(card)
                    .and_then(|c| c.isdp(&aid))
                    .and_then(|isdp| isdp.profile.as_ref())
                    .map(|p| p.fallback);
                match actual {
                    Some(actual) if actual == *flag => (true, String::new()),
                    Some(actual) => fail(format!("fallback is {actual}")),
                    None => fail("profile not on card".into()),
                }
            }
            Err(detail) => fail(detail),
        },
        Expectation::Pol1Is { card, profile, rules } => {
            match runtime.resolve_profile(card, profile) {
                Ok(aid) => {
                    let actual = runtime
                        .world
                        .card(card)
                        .and_then(|c| c.isdp(&aid))
                        .and_then(|isdp| isdp.profile.as_ref())
                        .map(|p| p.pol1);
                    match actual {
                        Some(actual) if actual == *rules => (true, String::new()),
                        Some(actual) => fail(format!("rules are {:03b}", actual.to_byte())),
                        None => fail("profile not on card".into()),
                    }
                }
                Err(detail) => fail(detail),
            }
        }
        Expectation::EisOwner { card, smsr } => match runtime.world.card(card) {
            Some(c) => match runtime.world.owner_of(c.eid()) {
                Some(owner) if owner == smsr => (true, String::new()),
                Some(owner) => fail(format!("owner is {owner}")),
                None => fail("card is unregistered".into()),
            },
            None => fail("card does not exist".into()),
        },
        Expectation::EisAbsent { smsr, card } => {
            match (runtime.world.smsr(smsr), runtime.world.card(card)) {
                (Some(s), Some(c)) => {
                    if s.holds(&c.eid()) {
                        fail("registry still holds the card".into())
                    } else {
                        (true, String::new())
                    }
                }
                _ => fail("unknown smsr or card".into()),
            }
        }
        Expectation::EisLists {
            smsr,
            card,
            profile,
        } => match runtime.resolve_profile(card, profile) {
            Ok(aid) => {
                let listed = runtime
                    .world
                    .smsr(smsr)
                    .zip(runtime.world.card(card))
                    .and_then(|(s, c)| s.eis(&c.eid()))
                    .map(|eis| eis.entry(&aid).is_some())
                    .unwrap_or(false);
                if listed {
                    (true, String::new())
                } else {
                    fail("registry entry missing the profile".into())
                }
            }
            Err(detail) => fail(detail),
        },
        Expectation::EisPol1 {
            smsr,
            card,
            profile,
            rules,
        } => match runtime.resolve_profile(card, profile) {
            Ok(aid) => {
                let mirror = runtime
                    .world
                    .smsr(smsr)
                    .zip(runtime.world.card(card))
                    .and_then(|(s, c)| s.eis(&c.eid()))
                    .and_then(|eis| eis.entry(&aid))
                    .map(|entry| entry.pol1_mirror);
                match mirror {
                    Some(mirror) if mirror == *rules => (true, String::new()),
                    Some(mirror) => fail(format!("mirror is {:03b}", mirror.to_byte())),
                    None => fail("no registry entry".into()),
                }
            }
            Err(detail) => fail(detail),
        },
        Expectation::SmdpHoldsNoKey { smdp } => match runtime.world.smdp(smdp) {
            Some(dp) => {
                if dp.holds_credentials() {
                    fail("installation key still held".into())
                } else {
                    (true, String::new())
                }
            }
            None => fail("unknown smdp".into()),
        },
        Expectation::TraceHasFault { action, src, dst } => {
            let hit = runtime.world.trace().iter().any(|event| {
                event.kind == TraceKind::Fault
                    && event.src.0 == *src
                    && event.dst.0 == *dst
                    && event.note.starts_with(action.as_str())
            });
            if hit {
                (true, String::new())
            } else {
                fail("no matching fault event in trace".into())
            }
        }
    }
}

fn registry_digest(smsr: &crate::subman::SmSr) -> String {
    let records: Vec<&EisRecord> = smsr.records().collect();
    let json = serde_json::to_vec(&records).expect("registry serializes");
    hex::encode(&crate::crypto::kdf::sha256(&json)[..16])
}

/// Executes a scenario. The report's exit condition (`passed`) is exactly
/// "every expectation holds".
pub fn run(scenario: &Scenario, options: &RunOptions) -> io::Result<RunReport> {
    let seed = options.seed_override.unwrap_or(scenario.seed);
    let mut runtime = Runtime {
        world: World::new(seed, FaultPlan::default()),
        profiles: BTreeMap::new(),
    };
    for actor in &scenario.actors {
        match actor {
            super::ActorDecl::Eum { id } => runtime.world.add_eum(id),
            super::ActorDecl::SmSr { id, capacity } => runtime.world.add_smsr(id, *capacity),
            super::ActorDecl::SmDp { id } => runtime.world.add_smdp(id),
            super::ActorDecl::Mno { id } => runtime.world.add_mno(id),
        }
    }

    if let Some(path) = &options.registry_path {
        if path.exists() {
            load_registry(&mut runtime.world, path)?;
        }
    }

    let mut outcomes = Vec::new();
    for (index, step) in scenario.steps.iter().enumerate() {
        let (ok, status, detail) = execute_step(&mut runtime, step);
        outcomes.push(StepOutcome {
            index: index + 1,
            line: step.line,
            describe: describe_step(step),
            label: step.label.clone(),
            ok,
            status,
            detail,
        });
    }

    let mut expectations = Vec::new();
    for (line, exp) in &scenario.expectations {
        let (pass, detail) = evaluate_expectation(&runtime, &outcomes, exp);
        expectations.push(ExpectationResult {
            line: *line,
            describe: describe_expectation(exp),
            pass,
            detail,
        });
    }

    let mut digests = BTreeMap::new();
    for name in runtime.world.card_names() {
        let digest = runtime.world.card(name).unwrap().state_digest();
        digests.insert(format!("card:{name}"), digest);
    }
    for smsr in runtime.world.smsrs() {
        digests.insert(format!("smsr:{}", smsr.id), registry_digest(smsr));
    }

    if let Some(path) = &options.trace_path {
        write_trace(scenario, seed, runtime.world.trace(), &digests, path)?;
    }
    if let Some(path) = &options.registry_path {
        save_registry(&runtime.world, path)?;
    }

    let passed = expectations.iter().all(|e| e.pass);
    Ok(RunReport {
        scenario: scenario.name.clone(),
        seed,
        steps: outcomes,
        expectations,
        digests,
        trace_events: runtime.world.trace().len(),
        trace_path: options
            .trace_path
            .as_ref()
            .map(|p| p.display().to_string()),
        passed,
    })
}

fn trace_lines(
    scenario: &Scenario,
    seed: u64,
    events: &[TraceEvent],
    digests: &BTreeMap<String, String>,
) -> Vec<String> {
    let mut lines = Vec::with_capacity(events.len() + digests.len() + 1);
    lines.push(
        serde_json::to_string(&MetaLine {
            meta: Meta {
                scenario: scenario.name.clone(),
                seed,
                source: scenario.source.clone(),
            },
        })
        .expect("meta serializes"),
    );
    for event in events {
        lines.push(
            serde_json::to_string(&EventLine {
                event: event.clone(),
            })
            .expect("event serializes"),
        );
    }
    for (entity, value) in digests {
        lines.push(
            serde_json::to_string(&DigestLine {
                digest: DigestEntry {
                    entity: entity.clone(),
                    value: value.clone(),
                },
            })
            .expect("digest serializes"),
        );
    }
    lines
}

fn write_trace(
    scenario: &Scenario,
    seed: u64,
    events: &[TraceEvent],
    digests: &BTreeMap<String, String>,
    path: &Path,
) -> io::Result<()> {
    let mut text = trace_lines(scenario, seed, events, digests).join("\n");
    text.push('\n');
    fs::write(path, text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub scenario: String,
    pub seed: u64,
    pub matched: bool,
    pub detail: String,
}

/// Re-executes the scenario embedded in a trace file and compares the
/// regenerated log, line by line, with the recorded one.
pub fn replay(path: &Path) -> io::Result<ReplayReport> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let meta: MetaLine = serde_json::from_str(lines.next().unwrap_or_default())
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("bad meta line: {e}")))?;

    let scenario = super::parse_scenario(&meta.meta.source).map_err(|e| {
        io::Error::new(io::ErrorKind::InvalidData, format!("embedded scenario: {e}"))
    })?;
    let report = run(
        &scenario,
        &RunOptions {
            seed_override: Some(meta.meta.seed),
            ..RunOptions::default()
        },
    )?;

    // Re-run the world to regenerate the full log deterministically.
    let regenerated = {
        let mut runtime_lines = Vec::new();
        let rerun = run_collecting(&scenario, meta.meta.seed)?;
        runtime_lines.push(
            serde_json::to_string(&MetaLine {
                meta: Meta {
                    scenario: scenario.name.clone(),
                    seed: meta.meta.seed,
                    source: scenario.source.clone(),
                },
            })
            .unwrap(),
        );
        runtime_lines.extend(rerun);
        runtime_lines
    };

    let recorded: Vec<&str> = text.lines().collect();
    let matched = recorded.len() == regenerated.len()
        && recorded
            .iter()
            .zip(regenerated.iter())
            .all(|(a, b)| *a == b);
    let detail = if matched {
        format!("{} lines verified", recorded.len())
    } else {
        let at = recorded
            .iter()
            .zip(regenerated.iter())
            .position(|(a, b)| *a != b)
            .map(|i| i + 1)
            .unwrap_or(recorded.len().min(regenerated.len()) + 1);
        format!(
            "divergence at line {at} (recorded {} lines, regenerated {})",
            recorded.len(),
            regenerated.len()
        )
    };
    Ok(ReplayReport {
        scenario: report.scenario,
        seed: meta.meta.seed,
        matched,
        detail,
    })
}

/// Runs and returns the event+digest lines (replay helper).
fn run_collecting(scenario: &Scenario, seed: u64) -> io::Result<Vec<String>> {
    let mut runtime = Runtime {
        world: World::new(seed, FaultPlan::default()),
        profiles: BTreeMap::new(),
    };
    for actor in &scenario.actors {
        match actor {
            super::ActorDecl::Eum { id } => runtime.world.add_eum(id),
            super::ActorDecl::SmSr { id, capacity } => runtime.world.add_smsr(id, *capacity),
            super::ActorDecl::SmDp { id } => runtime.world.add_smdp(id),
            super::ActorDecl::Mno { id } => runtime.world.add_mno(id),
        }
    }
    for step in &scenario.steps {
        let _ = execute_step(&mut runtime, step);
    }
    let mut digests = BTreeMap::new();
    for name in runtime.world.card_names() {
        digests.insert(
            format!("card:{name}"),
            runtime.world.card(name).unwrap().state_digest(),
        );
    }
    for smsr in runtime.world.smsrs() {
        digests.insert(format!("smsr:{}", smsr.id), registry_digest(smsr));
    }
    let mut lines = Vec::new();
    for event in runtime.world.trace() {
        lines.push(
            serde_json::to_string(&EventLine {
                event: event.clone(),
            })
            .unwrap(),
        );
    }
    for (entity, value) in &digests {
        lines.push(
            serde_json::to_string(&DigestLine {
                digest: DigestEntry {
                    entity: entity.clone(),
                    value: value.clone(),
                },
            })
            .unwrap(),
        );
    }
    Ok(lines)
}

fn load_registry(world: &mut World, path: &Path) -> io::Result<()> {
    let text = fs::read_to_string(path)?;
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RegistryLine = serde_json::from_str(line).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("registry line {}: {e}", index + 1),
            )
        })?;
        world.restore_eis(&record.smsr, record.eis).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("registry line {}: {e}", index + 1),
            )
        })?;
    }
    Ok(())
}

fn save_registry(world: &World, path: &Path) -> io::Result<()> {
    let mut out = String::new();
    for smsr in world.smsrs() {
        for record in smsr.records() {
            let line = serde_json::to_string(&RegistryLine {
                smsr: smsr.id.clone(),
                eis: record.clone(),
            })
            .expect("registry serializes");
            out.push_str(&line);
            out.push('\n');
        }
    }
    fs::write(path, out)
}
