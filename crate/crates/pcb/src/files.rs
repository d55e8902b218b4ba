//! On-disk formats: guideline JSON, scenario CSV, patient profiles, fault
//! plans, PHR logs and transcripts.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use pcb_core::channel::ChannelConfig;
use pcb_core::knowledge::{GuidelineDoc, KbError, KnowledgeBase};
use pcb_core::phr::{PatientRecord, PhrError, PhrRecord};
use pcb_core::sim::{AssertKind, GeneratedBy, PatientProfile, Scenario, ScenarioRow, TranscriptLine};
use pcb_core::time::Span;
use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InputError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Syntax { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}: {source}")]
    Knowledge { path: PathBuf, source: KbError },
    #[error("{path}: {source}")]
    Phr { path: PathBuf, source: PhrError },
    #[error("{path}: row {row}: {message}")]
    Row { path: PathBuf, row: usize, message: String },
}

fn read(path: &Path) -> Result<String, InputError> {
    fs::read_to_string(path).map_err(|source| InputError::Io { path: path.into(), source })
}

fn syntax(path: &Path, e: serde_json::Error) -> InputError {
    InputError::Syntax { path: path.into(), line: e.line(), column: e.column(), message: e.to_string() }
}

fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, InputError> {
    serde_json::from_str(text).map_err(|e| syntax(path, e))
}

pub fn parse_guideline(path: &Path, text: &str) -> Result<KnowledgeBase, InputError> {
    let doc: GuidelineDoc = parse_json(path, text)?;
    KnowledgeBase::new(doc).map_err(|source| InputError::Knowledge { path: path.into(), source })
}

pub fn load_guideline(path: &Path) -> Result<KnowledgeBase, InputError> {
    parse_guideline(path, &read(path)?)
}

pub fn load_profile(path: &Path) -> Result<PatientProfile, InputError> {
    parse_json(path, &read(path)?)
}

const FAULT_RULE_KEYS: [&str; 3] = ["match", "action", "seconds"];

/// Channel configuration. Fault rules with unknown keys are rejected, since
/// a misspelt `match` would otherwise widen the rule to every message.
pub fn load_faults(path: &Path) -> Result<ChannelConfig, InputError> {
    let text = read(path)?;
    let v: serde_json::Value = parse_json(path, &text)?;
    let rules = v.get("faultPlan").and_then(|p| p.as_array()).map(Vec::as_slice).unwrap_or_default();
    for (i, rule) in rules.iter().enumerate() {
        if let Some(key) = rule.as_object().and_then(|o| o.keys().find(|k| !FAULT_RULE_KEYS.contains(&k.as_str()))) {
            return Err(InputError::Row {
                path: path.into(),
                row: i + 1,
                message: format!("unknown fault rule key {key:?}"),
            });
        }
    }
    parse_json(path, &text)
}

/// Builds the starting record from a profile.
pub fn profile_record(path: &Path, profile: &PatientProfile) -> Result<PatientRecord, InputError> {
    let mut phr = PatientRecord::new(profile.patient_id.clone());
    profile.apply_to(&mut phr).map_err(|source| InputError::Phr { path: path.into(), source })?;
    Ok(phr)
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, InputError> {
    let file = fs::File::open(path).map_err(|source| InputError::Io { path: path.into(), source })?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| InputError::Io { path: path.into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| InputError::Syntax {
            path: path.into(),
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

fn write_lines<T: serde::Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// `<dir>/<patientId>.jsonl`
pub fn phr_path(dir: &Path, patient_id: &str) -> PathBuf {
    dir.join(format!("{patient_id}.jsonl"))
}

pub fn load_phr(path: &Path, patient_id: &str) -> Result<PatientRecord, InputError> {
    let records: Vec<PhrRecord> = read_lines(path)?;
    PatientRecord::replay(patient_id, records).map_err(|source| InputError::Phr { path: path.into(), source })
}

pub fn save_phr(path: &Path, phr: &PatientRecord) -> io::Result<()> {
    write_lines(path, phr.journal())
}

pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptLine>, InputError> {
    read_lines(path)
}

pub fn save_transcript(path: &Path, lines: &[TranscriptLine]) -> io::Result<()> {
    write_lines(path, lines)
}

/// One transcript line per row, as written to disk.
pub fn transcript_text(lines: &[TranscriptLine]) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(&serde_json::to_string(l).expect("transcript lines serialize"));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    Week,
    DayInWeek,
    DayOfTreatment,
    ValidTime,
    ConceptId,
    VmrClass,
    ConceptName,
    ValidStart,
    ValidEnd,
    Value,
    Step,
    GeneratedBy,
    Kind,
    Window,
}

fn column(header: &str) -> Option<Column> {
    let key: String = header.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
    Some(match key.as_str() {
        "week" => Column::Week,
        "dayinweek" => Column::DayInWeek,
        "dayoftreatment" => Column::DayOfTreatment,
        "validtime" => Column::ValidTime,
        "gesherid" | "conceptid" => Column::ConceptId,
        "vmrclass" => Column::VmrClass,
        "conceptname" => Column::ConceptName,
        "validstarttime" | "validstart" => Column::ValidStart,
        "validendtime" | "validend" => Column::ValidEnd,
        "value" => Column::Value,
        "steps" | "step" => Column::Step,
        "generatedbycomponent" | "generatedby" => Column::GeneratedBy,
        "kind" => Column::Kind,
        "window" => Column::Window,
        _ => return None,
    })
}

const REQUIRED: [Column; 4] = [Column::ConceptId, Column::ValidStart, Column::Value, Column::Step];

/// Accepts `d/m/yyyy H:MM[:SS]` as in exported datasets, and ISO 8601.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    ["%d/%m/%Y %H:%M:%S", "%d/%m/%Y %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Parses a scenario table. The delimiter is a tab when the header holds
/// one, otherwise a comma. Blank `generatedBy` cells mean the patient's
/// smartphone; blank end times copy the start.
pub fn parse_scenario(path: &Path, text: &str) -> Result<Scenario, InputError> {
    let first = text.lines().next().unwrap_or("");
    let delimiter = if first.contains('\t') { b'\t' } else { b',' };
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).flexible(true).from_reader(text.as_bytes());
    let row_err = |row: usize, message: String| InputError::Row { path: path.into(), row, message };
    let headers = rdr.headers().map_err(|e| row_err(1, e.to_string()))?.clone();
    let columns: Vec<Option<Column>> = headers.iter().map(column).collect();
    for c in REQUIRED {
        if !columns.contains(&Some(c)) {
            return Err(row_err(1, format!("missing column {c:?}")));
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let n = i + 2;
        let rec = rec.map_err(|e| row_err(n, e.to_string()))?;
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let get = |c: Column| -> &str {
            columns.iter().position(|x| *x == Some(c)).and_then(|i| rec.get(i)).map_or("", str::trim)
        };
        let int = |c: Column| -> Result<u32, InputError> {
            let v = get(c);
            if v.is_empty() {
                return Ok(0);
            }
            v.parse().map_err(|_| row_err(n, format!("{c:?} is not a number: {v:?}")))
        };
        let start = parse_timestamp(get(Column::ValidStart))
            .ok_or_else(|| row_err(n, format!("bad valid start {:?}", get(Column::ValidStart))))?;
        let end = match get(Column::ValidEnd) {
            "" => start,
            v => parse_timestamp(v).ok_or_else(|| row_err(n, format!("bad valid end {v:?}")))?,
        };
        let generated_by = match get(Column::GeneratedBy) {
            "" => GeneratedBy::SmartphoneGui,
            v => v.parse().map_err(|e| row_err(n, e))?,
        };
        let kind = match get(Column::Kind) {
            "" => None,
            v => Some(v.parse::<AssertKind>().map_err(|e| row_err(n, e))?),
        };
        let window = match get(Column::Window) {
            "" => None,
            v => Some(Span::parse(v).map_err(|e| row_err(n, e.to_string()))?),
        };
        let concept_id = get(Column::ConceptId);
        if concept_id.is_empty() {
            return Err(row_err(n, "empty concept id".into()));
        }
        rows.push(ScenarioRow {
            week: int(Column::Week)?,
            day_in_week: int(Column::DayInWeek)?,
            day_of_treatment: int(Column::DayOfTreatment)?,
            valid_time: get(Column::ValidTime).into(),
            concept_id: concept_id.into(),
            vmr_class: get(Column::VmrClass).into(),
            concept_name: get(Column::ConceptName).into(),
            valid_start: start,
            valid_end: end,
            value: get(Column::Value).into(),
            step: get(Column::Step).into(),
            generated_by,
            kind,
            window,
        });
    }
    if rows.windows(2).any(|w| w[1].valid_start < w[0].valid_start) {
        return Err(row_err(0, "rows are not in time order".into()));
    }
    Ok(Scenario { rows })
}

pub fn load_scenario(path: &Path) -> Result<Scenario, InputError> {
    parse_scenario(path, &read(path)?)
}
