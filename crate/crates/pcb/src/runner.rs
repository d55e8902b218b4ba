//! Scenario runs from files, reports, and metrics recomputed from logs.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use pcb_core::bedss::Policy;
use pcb_core::channel::ChannelConfig;
use pcb_core::knowledge::{distribution_profile, KbStats, KnowledgeBase};
use pcb_core::metrics::{compute_metrics, days_in_system, mean, sample_variance, Rational, SessionMetrics};
use pcb_core::phr::{InteractionRecord, PhrRecord};
use pcb_core::sim::{Entry, RunReport, TranscriptLine, World};
use serde::Serialize;

use crate::files::{self, InputError};
use crate::wire;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub guideline: PathBuf,
    pub scenario: PathBuf,
    pub patient: PathBuf,
    pub policy: Policy,
    pub faults: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub struct Prepared {
    pub world: World,
    pub scenario: pcb_core::sim::Scenario,
}

/// Loads every input and builds the world, before any simulated time passes.
pub fn prepare(opts: &RunOptions) -> Result<Prepared, InputError> {
    let kb = files::load_guideline(&opts.guideline)?;
    let scenario = files::load_scenario(&opts.scenario)?;
    let profile = files::load_profile(&opts.patient)?;
    let phr = files::profile_record(&opts.patient, &profile)?;
    let mut config = match &opts.faults {
        Some(p) => files::load_faults(p)?,
        None => ChannelConfig::default(),
    };
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    let mut world = World::new(kb, phr, opts.policy, &profile.thresholds, config);
    let transport = wire::from_env().map_err(|source| InputError::Io { path: wire::TRANSPORT_ENV.into(), source })?;
    if let Some(t) = transport {
        world.set_transport(t);
    }
    Ok(Prepared { world, scenario })
}

pub fn run(opts: &RunOptions) -> Result<(World, RunReport), InputError> {
    let Prepared { mut world, scenario } = prepare(opts)?;
    let report = world.run(&scenario);
    Ok((world, report))
}

/// Writes `transcript-<patientId>.jsonl` and `phr/<patientId>.jsonl` under `dir`.
pub fn save_outputs(dir: &Path, world: &World) -> io::Result<(PathBuf, PathBuf)> {
    let pid = &world.bedss.phr.patient_id;
    let transcript = dir.join(format!("transcript-{pid}.jsonl"));
    let phr = files::phr_path(&dir.join("phr"), pid);
    files::save_transcript(&transcript, world.transcript())?;
    files::save_phr(&phr, &world.bedss.phr)?;
    Ok((transcript, phr))
}

fn ratio(r: Option<Rational>) -> String {
    r.map_or_else(|| "n/a".into(), |r| r.to_string())
}

pub fn metrics_text(m: &SessionMetrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "days in system      {}", m.days_in_system);
    let _ = writeln!(s, "functional          {}", m.functional_notifications);
    let _ = writeln!(s, "technical           {}", m.technical_notifications);
    let _ = writeln!(s, "FMTBI               {}", ratio(m.fmtbi));
    let _ = writeln!(s, "TMTBI               {}", ratio(m.tmtbi));
    for (k, v) in &m.interaction_histogram {
        let name = serde_json::to_value(k).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(s, "  {name:<20}{v}");
    }
    s
}

pub fn report_text(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "policy {}", r.policy.cli_name());
    for a in &r.assertions {
        let status = if a.passed { "PASS" } else { "FAIL" };
        let at = a.matched_at.map_or_else(|| "not seen".into(), |t| t.to_string());
        let kind = serde_json::to_value(a.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(s, "{status} step {:<4} {kind:<15}{:<12} expected {} seen {at}", a.step, a.id, a.expected_at);
    }
    s.push_str(&metrics_text(&r.metrics));
    for d in &r.divergences {
        let _ = writeln!(s, "divergence {}", serde_json::to_string(d).unwrap_or_default());
    }
    let _ = writeln!(s, "ledger and device agree: {}", r.consistent);
    if !r.consistent {
        let _ = writeln!(s, "  ledger {:?}\n  device {:?}", r.ledger_active, r.device_active);
    }
    s
}

pub fn report_json(r: &RunReport) -> String {
    serde_json::to_string_pretty(r).expect("reports serialize")
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StatsReport {
    pub guideline: String,
    pub stats: KbStats,
    pub distribution_profile: pcb_core::knowledge::DistributionProfile,
}

pub fn stats(kb: &KnowledgeBase) -> StatsReport {
    let stats = kb.stats();
    StatsReport { guideline: kb.name().into(), distribution_profile: distribution_profile(&stats), stats }
}

pub fn stats_text(s: &StatsReport) -> String {
    let t = &s.stats;
    let rows = [
        ("raw concepts", t.raw_concepts),
        ("data patterns", t.data_patterns),
        ("conditions", t.conditions),
        ("customized contexts", t.customized_contexts),
        ("notifications to patients", t.notifications_to_patients),
        ("notifications to care providers", t.notifications_to_care_providers),
        ("recommendations to patients", t.recommendations_to_patients),
        ("recommendations to care providers", t.recommendations_to_care_providers),
        ("periodic projections", t.periodic_projections),
        ("monitoring projections", t.monitoring_projections),
        ("callbacks", t.callbacks),
    ];
    let mut out = format!("{}\n", s.guideline);
    for (k, n) in rows {
        let _ = writeln!(out, "  {k:<34}{n}");
    }
    let profile = serde_json::to_value(s.distribution_profile).ok().and_then(|v| v.as_str().map(String::from));
    let _ = writeln!(out, "  {:<34}{}", "distribution profile", profile.unwrap_or_default());
    out
}

/// Recomputes session metrics from a run transcript or a PHR log. The
/// span comes from the transcript's closing session line, or else from
/// the first and last interaction.
pub fn metrics_from_log(path: &Path) -> Result<SessionMetrics, InputError> {
    let text = std::fs::read_to_string(path).map_err(|source| InputError::Io { path: path.into(), source })?;
    let mut records: Vec<InteractionRecord> = Vec::new();
    let mut days = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let syntax = |e: serde_json::Error| InputError::Syntax {
            path: path.into(),
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        };
        let v: serde_json::Value = serde_json::from_str(line).map_err(syntax)?;
        if v.get("entry").is_some() {
            let l: TranscriptLine = serde_json::from_value(v).map_err(syntax)?;
            match l.entry {
                Entry::Interaction { record } => records.push(record),
                Entry::Session { days_in_system, .. } => days = Some(days_in_system),
                _ => {}
            }
        } else if let PhrRecord::Interaction(r) = serde_json::from_value(v).map_err(syntax)? {
            records.push(r);
        }
    }
    let days = days.unwrap_or_else(|| {
        let first = records.iter().map(|r| r.timestamp.date()).min();
        let last = records.iter().map(|r| r.timestamp.date()).max();
        match (first, last) {
            (Some(a), Some(b)) => days_in_system(a, b),
            _ => 0,
        }
    });
    Ok(compute_metrics(&records, days))
}

/// Mean and sample standard deviation of per-patient values.
pub fn summarize(values: &[Rational]) -> Option<(Rational, f64)> {
    let m = mean(values)?;
    let sd = sample_variance(values).map_or(0.0, |v| v.to_f64().sqrt());
    Some((m, sd))
}
