//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{Days, NaiveDate, NaiveTime};
use pcb::files;
use pcb::runner::{self, RunOptions};
use pcb_core::bedss::{remaining_bounds, shrink_unit, BeOutput, Bedss, Downstream, Policy};
use pcb_core::channel::{ChannelConfig, ChannelEvent, Kind};
use pcb_core::knowledge::DistributionProfile;
use pcb_core::lang::*;
use pcb_core::mdss::{Feed, Input, PromptKind, Response};
use pcb_core::metrics::{classify_interaction, compute_metrics, Rational};
use pcb_core::phr::{
    DataValue, Event, InteractionRecord, InteractionSubtype, InteractionType, PatientRecord, PhrRecord, Prescription,
    Quality, Source,
};
use pcb_core::sim::{Entry, TranscriptLine, World};
use pcb_core::temporal::{window_query, Abstraction, EventIndex, Target, WindowQuery};
use pcb_core::time::{Date, Span, Timestamp, Weekdays};
use pcb_core::{ProjectionEnvelope, UnitProjection};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn date(y: i32, m: u32, d: u32) -> Date {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn at(d: Date, h: u32, m: u32) -> Timestamp {
    d.and_hms_opt(h, m, 0).unwrap()
}

// ---------------------------------------------------------------- 1

/// Days in system, functional notifications, published FMTBI.
const GDM_ROWS: [(u64, u64, &str); 19] = [
    (44, 11, "4.00"),
    (48, 6, "8.00"),
    (41, 12, "3.42"),
    (77, 13, "5.92"),
    (52, 16, "3.25"),
    (46, 12, "3.83"),
    (91, 42, "2.17"),
    (103, 32, "3.22"),
    (77, 17, "4.53"),
    (43, 11, "3.91"),
    (55, 12, "4.58"),
    (59, 11, "5.36"),
    (76, 20, "3.80"),
    (22, 7, "3.14"),
    (92, 34, "2.71"),
    (55, 13, "4.23"),
    (55, 22, "2.50"),
    (72, 24, "3.00"),
    (64, 18, "3.56"),
];

/// Days, functional count, published FMTBI, technical count, published TMTBI.
const AF_ROWS: [(u64, u64, &str, u64, &str); 10] = [
    (96, 6, "16.00", 7, "13.71"),
    (78, 5, "15.60", 6, "13"),
    (98, 3, "32.67", 6, "16.33"),
    (91, 4, "22.75", 9, "10.11"),
    (90, 2, "45.00", 3, "30"),
    (136, 6, "22.67", 7, "19.42"),
    (259, 23, "11.26", 43, "6.02"),
    (89, 9, "9.89", 11, "8.09"),
    (249, 13, "19.15", 26, "9.57"),
    (86, 2, "43.00", 4, "21.5"),
];

/// `n / d` to two places by long division, rounding half up.
fn oracle_half_up(n: u64, d: u64) -> String {
    let hundredths = n * 100 / d;
    let rest = n * 100 % d;
    let r = if 2 * rest >= d { hundredths + 1 } else { hundredths };
    format!("{}.{:02}", r / 100, r % 100)
}

fn oracle_truncated(n: u64, d: u64) -> String {
    let h = n * 100 / d;
    format!("{}.{:02}", h / 100, h % 100)
}

/// Published cells drop trailing zeros in places.
fn two_places(published: &str) -> String {
    let v: f64 = published.parse().unwrap();
    format!("{v:.2}")
}

/// A PHR log with `functional` data notifications and `technical - functional`
/// crash resends spread so the first falls on day 1 and the last on day `days`.
fn synthetic_log(dir: &Path, name: &str, days: u64, functional: u64, technical: u64) -> PathBuf {
    let first = at(date(2015, 1, 5), 9, 0);
    let day = |i: u64, n: u64| first + Days::new(if n < 2 { 0 } else { i * (days - 1) / (n - 1) });
    let mut lines = String::new();
    let mut push = |r: InteractionRecord| {
        lines.push_str(&serde_json::to_string(&PhrRecord::Interaction(r)).unwrap());
        lines.push('\n');
    };
    for i in 0..functional {
        push(InteractionRecord {
            timestamp: day(i, functional),
            kind: InteractionType::DataNotification,
            subtype: InteractionSubtype::PatientDataEntry,
            technical_only: false,
            detail: String::new(),
        });
    }
    for i in 0..technical - functional {
        push(InteractionRecord {
            timestamp: day(i, technical - functional) + chrono::TimeDelta::hours(1),
            kind: InteractionType::Projection,
            subtype: InteractionSubtype::Procedure,
            technical_only: true,
            detail: String::new(),
        });
    }
    let path = dir.join(format!("{name}.jsonl"));
    std::fs::write(&path, lines).unwrap();
    path
}

fn sd_text(values: &[Rational]) -> String {
    let (_, sd) = runner::summarize(values).unwrap();
    format!("{sd:.2}")
}

fn metrics_reproduction() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut gdm = Vec::new();
    for (i, &(days, n, published)) in GDM_ROWS.iter().enumerate() {
        let log = synthetic_log(dir.path(), &format!("gdm{i}"), days, n, n);
        let m = runner::metrics_from_log(&log).map_err(|e| e.to_string())?;
        ensure!(m.days_in_system == days && m.functional_notifications == n, "GDM row {}: counts {m:?}", i + 1);
        let f = m.fmtbi.ok_or("no FMTBI")?;
        ensure!(f.round_half_up(2) == oracle_half_up(days, n), "GDM row {}: {} vs oracle", i + 1, f.round_half_up(2));
        ensure!(f.round_half_up(2) == published, "GDM row {}: {} vs published {published}", i + 1, f.round_half_up(2));
        gdm.push(f);
    }
    let gm = runner::summarize(&gdm).unwrap().0;
    ensure!(gm.round_half_up(2) == "3.95", "GDM mean {}", gm.round_half_up(2));
    ensure!(sd_text(&gdm) == "1.35", "GDM SD {}", sd_text(&gdm));

    let (mut fs, mut ts, mut truncated) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &(days, f_n, f_pub, t_n, t_pub)) in AF_ROWS.iter().enumerate() {
        let log = synthetic_log(dir.path(), &format!("af{i}"), days, f_n, t_n);
        let m = runner::metrics_from_log(&log).map_err(|e| e.to_string())?;
        ensure!(m.technical_notifications == t_n, "AF row {}: technical {}", i + 1, m.technical_notifications);
        let f = m.fmtbi.ok_or("no FMTBI")?;
        let t = m.tmtbi.ok_or("no TMTBI")?;
        ensure!(f.round_half_up(2) == oracle_half_up(days, f_n), "AF row {}: FMTBI vs oracle", i + 1);
        ensure!(t.round_half_up(2) == oracle_half_up(days, t_n), "AF row {}: TMTBI vs oracle", i + 1);
        ensure!(f.round_half_up(2) == two_places(f_pub), "AF row {}: FMTBI {} vs {f_pub}", i + 1, f.round_half_up(2));
        ensure!((t.to_f64() - t_pub.parse::<f64>().unwrap()).abs() < 0.01, "AF row {}: TMTBI off by 0.01", i + 1);
        if t.round_half_up(2) != two_places(t_pub) {
            ensure!(two_places(t_pub) == oracle_truncated(days, t_n), "AF row {}: TMTBI {t_pub} unexplained", i + 1);
            truncated.push(i + 1);
        }
        fs.push(f);
        ts.push(t);
    }
    ensure!(truncated == [6, 9], "truncated TMTBI rows {truncated:?}");
    let (fm, tm) = (runner::summarize(&fs).unwrap().0, runner::summarize(&ts).unwrap().0);
    ensure!(fm.round_half_up(2) == "23.80", "AF FMTBI mean {}", fm.round_half_up(2));
    ensure!(tm.round_half_up(2) == "14.78", "AF TMTBI mean {}", tm.round_half_up(2));
    ensure!(sd_text(&fs) == "12.47" && sd_text(&ts) == "7.27", "AF SDs {} {}", sd_text(&fs), sd_text(&ts));
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!(
        "GDM mean {} sd {}; AF FMTBI {} TMTBI {}; TMTBI rows 6 and 9 printed truncated",
        gm.round_half_up(2),
        sd_text(&gdm),
        fm.round_half_up(2),
        tm.round_half_up(2)
    ))
}

// ---------------------------------------------------------------- 2

fn kb_statistics() -> Outcome {
    // raw concepts, patterns, conditions, contexts, notifications to patients,
    // to care providers, recommendations to patients, to care providers,
    // periodic, monitoring, callbacks
    let expected = [
        ("gdm_stats.json", [300, 124, 69, 2, 10, 2, 1, 7, 22, 17, 16], DistributionProfile::MostlyCentral),
        ("af_stats.json", [100, 71, 20, 4, 7, 20, 5, 18, 18, 2, 2], DistributionProfile::MostlyLocal),
    ];
    for (file, rows, profile) in expected {
        let kb = files::load_guideline(&fixture(&format!("guidelines/{file}"))).map_err(|e| e.to_string())?;
        let s = runner::stats(&kb);
        let t = &s.stats;
        let got = [
            t.raw_concepts,
            t.data_patterns,
            t.conditions,
            t.customized_contexts,
            t.notifications_to_patients,
            t.notifications_to_care_providers,
            t.recommendations_to_patients,
            t.recommendations_to_care_providers,
            t.periodic_projections,
            t.monitoring_projections,
            t.callbacks,
        ];
        ensure!(got == rows, "{file}: {got:?} != {rows:?}");
        ensure!(s.distribution_profile == profile, "{file}: profile {:?}", s.distribution_profile);
    }
    Ok("both fixtures match every row".into())
}

// ---------------------------------------------------------------- 3

fn ketonuria_options(faults: Option<&str>) -> RunOptions {
    RunOptions {
        guideline: fixture("guidelines/ketonuria.json"),
        scenario: fixture("scenarios/ketonuria.csv"),
        patient: fixture("patients/ketonuria.json"),
        policy: Policy::PassingOfControl,
        faults: faults.map(fixture),
        seed: None,
    }
}

fn applied(lines: &[TranscriptLine]) -> Vec<(Timestamp, String, Vec<String>, Vec<String>)> {
    lines
        .iter()
        .filter_map(|l| match &l.entry {
            Entry::Feed { feed: Feed::ProjectionApplied { projection_id, stopped, started, .. } } => {
                Some((l.at, projection_id.clone(), stopped.clone(), started.clone()))
            }
            _ => None,
        })
        .collect()
}

fn callbacks(lines: &[TranscriptLine]) -> Vec<(Timestamp, String, String)> {
    lines
        .iter()
        .filter_map(|l| match &l.entry {
            Entry::Feed { feed: Feed::CallbackSent { callback_id, unit } } => {
                Some((l.at, callback_id.clone(), unit.clone()))
            }
            _ => None,
        })
        .collect()
}

fn first_difference(a: &str, b: &str) -> String {
    let line = a.lines().zip(b.lines()).position(|(x, y)| x != y).unwrap_or(a.lines().count().min(b.lines().count()));
    format!("transcript differs from golden at line {}", line + 1)
}

fn ketonuria_end_to_end() -> Outcome {
    let golden = read_fixture("golden/ketonuria_transcript.jsonl");
    for run in 1..=5 {
        let (world, report) = runner::run(&ketonuria_options(None)).map_err(|e| e.to_string())?;
        let text = files::transcript_text(world.transcript());
        ensure!(text == golden, "run {run}: {}", first_difference(&text, &golden));
        ensure!(report.passed(), "run {run}: scenario assertions failed");
    }
    let lines: Vec<TranscriptLine> =
        golden.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let apps = applied(&lines);
    let to_twice: Vec<_> = apps
        .iter()
        .filter(|(_, _, stop, start)| {
            stop.contains(&"ket-daily".to_string()) && start.contains(&"ket-twice".to_string())
        })
        .collect();
    ensure!(to_twice.len() == 1, "{} envelopes switch to twice-weekly", to_twice.len());
    let switch_at = to_twice[0].0;
    ensure!(switch_at.date() == date(2014, 3, 16), "switch on {switch_at}");
    let negatives: BTreeSet<Date> = lines
        .iter()
        .filter_map(|l| match &l.entry {
            Entry::Interaction { .. } => None,
            Entry::Input { .. } if l.at <= switch_at => Some(l.at.date()),
            _ => None,
        })
        .collect();
    ensure!(negatives.len() >= 14, "only {} input days before the switch", negatives.len());
    let cbs = callbacks(&lines);
    ensure!(cbs.len() == 1 && cbs[0].1 == "5169", "callbacks {cbs:?}");
    let cb_at = cbs[0].0;
    ensure!(cb_at > switch_at && (cb_at.date() - date(2014, 3, 17)).num_days() < 7, "callback at {cb_at}");
    let back = apps.iter().find(|(t, _, _, start)| *t >= cb_at && start.contains(&"ket-daily".to_string()));
    ensure!(back.is_some(), "no re-projection to daily after the callback");
    Ok(format!("5 identical runs, {} transcript lines", lines.len()))
}

// ---------------------------------------------------------------- 4

fn schedule_bounds(u: &UnitProjection) -> Vec<(Option<i64>, Option<i64>)> {
    let mut out = Vec::new();
    visit(&u.body, &mut |s| {
        if let Statement::WaitPeriodic { start_offset_days, duration_days, .. } = s {
            out.push((*start_offset_days, *duration_days));
        }
    });
    out
}

fn atorvastatina(start: Date, days: u64) -> Prescription {
    Prescription {
        medication: "atorvastatina".into(),
        dose_per_time: [("20:00".to_string(), "80.0 mg".to_string())].into_iter().collect(),
        reminder_lead: "30.0 minutes".into(),
        start_date: start,
        end_date: start + Days::new(days - 1),
        concept_id: "9648".into(),
        prompt: "Prendi il farmaco atorvastatina".into(),
    }
}

fn recovery_arithmetic() -> Outcome {
    ensure!(remaining_bounds(0, 61, 0) == (0, 61), "bounds at 0");
    ensure!(remaining_bounds(0, 61, 30) == (0, 31), "bounds at 30");
    ensure!(remaining_bounds(0, 61, 62).1 <= 0, "bounds at 62");

    let unit = UnitProjection::parse(&read_fixture("corpus/medication.unit")).map_err(|e| e.to_string())?;
    ensure!(schedule_bounds(&unit) == [(Some(0), Some(61))], "corpus unit bounds {:?}", schedule_bounds(&unit));
    ensure!(shrink_unit(&unit, 0).as_ref() == Some(&unit), "crash at 0 days changes the unit");
    let at30 = shrink_unit(&unit, 30).ok_or("unit omitted at 30 days")?;
    ensure!(schedule_bounds(&at30) == [(Some(0), Some(31))], "at 30 days {:?}", schedule_bounds(&at30));
    ensure!(shrink_unit(&unit, 62).is_none(), "unit kept at 62 days");

    // The same through the central engine's recovery path.
    let t0 = at(date(2015, 4, 2), 12, 0);
    for (elapsed, expected) in [(0u64, Some(61)), (30, Some(31)), (62, None)] {
        let kb = files::load_guideline(&fixture("guidelines/ketonuria.json")).map_err(|e| e.to_string())?;
        let mut b = Bedss::new(kb, PatientRecord::new("p"), Policy::PassingOfControl, &BTreeMap::new());
        b.start_session(t0);
        b.add_prescription(atorvastatina(t0.date(), 61), t0);
        let out = b.recover(t0 + Days::new(elapsed));
        let env = out
            .iter()
            .find_map(|o| match o {
                BeOutput::Device(Downstream::Projection { text, .. }) => Some(ProjectionEnvelope::parse(text)),
                _ => None,
            })
            .ok_or(format!("no resend at {elapsed} days"))?
            .map_err(|e| e.to_string())?;
        let med = env.units.iter().find(|u| u.data_entry_concepts().contains(&"9648".to_string()));
        let duration = med.and_then(|u| schedule_bounds(u).first().and_then(|b| b.1));
        ensure!(duration == expected, "crash at {elapsed} days: resent duration {duration:?}");
    }
    Ok("0 -> 61, 30 -> 31, 62 -> omitted".into())
}

// ---------------------------------------------------------------- 5

fn threshold_substitution() -> Outcome {
    let source = read_fixture("corpus/weekly_mets.unit");
    let golden = read_fixture("golden/weekly_mets_5.unit");
    ensure!(threshold_tokens(&source) == ["5066"], "tokens {:?}", threshold_tokens(&source));
    let values = BTreeMap::from([("5066".to_string(), 5.0)]);
    let out = substitute_thresholds(&source, &values).map_err(|e| e.to_string())?;
    ensure!(out == golden, "substituted unit differs from golden");
    let unit = UnitProjection::parse(&out).map_err(|e| e.to_string())?;
    let mut thresholds = Vec::new();
    visit(&unit.body, &mut |s| {
        if let Statement::IfTemporalQuery { query, .. } = s {
            thresholds.push(query.cond.threshold.clone());
        }
    });
    ensure!(thresholds == [Threshold::Value(5.0)], "parsed thresholds {thresholds:?}");
    Ok("matches golden".into())
}

// ---------------------------------------------------------------- 6

struct Gen {
    rng: ChaCha8Rng,
    fresh: u32,
}

const TEXT_CHARS: &[char] =
    &['a', 'b', 'Z', '0', '7', ' ', ' ', ',', '.', '-', '"', '\\', '\n', 'ñ', 'é', '<', '$', '>', '{', '(', ';', '+'];

impl Gen {
    fn text(&mut self) -> String {
        let n = self.rng.gen_range(0..12);
        (0..n).map(|_| *TEXT_CHARS.choose(&mut self.rng).unwrap()).collect()
    }

    fn id(&mut self) -> String {
        let n = self.rng.gen_range(1..8);
        let chars: Vec<char> = "abcdef0123456789-".chars().collect();
        (0..n).map(|_| *chars.choose(&mut self.rng).unwrap()).collect()
    }

    fn concept(&mut self) -> String {
        if self.rng.gen_bool(0.7) {
            self.rng.gen_range(1000..10000).to_string()
        } else {
            format!("c{}", self.id())
        }
    }

    fn fresh_name(&mut self) -> String {
        self.fresh += 1;
        format!("v{}", self.fresh)
    }

    fn number(&mut self) -> f64 {
        *[0.0, 1.0, 2.5, 5.0, 80.0, 150.0, 0.125, 1234.0].choose(&mut self.rng).unwrap()
    }

    fn time(&mut self) -> NaiveTime {
        NaiveTime::from_hms_opt(self.rng.gen_range(0..24), self.rng.gen_range(0..60), 0).unwrap()
    }

    fn span(&mut self, calendar: bool) -> Span {
        let n = self.rng.gen_range(1..15);
        if calendar {
            return Span::calendar_days(n);
        }
        match self.rng.gen_range(0..3) {
            0 => Span::minutes(n * 5),
            1 => Span::minutes(n * 60),
            _ => Span::days(n),
        }
    }

    fn weekdays(&mut self) -> Weekdays {
        let mut days: Vec<u8> = (1..=7).collect();
        days.shuffle(&mut self.rng);
        days.truncate(self.rng.gen_range(1..=7));
        Weekdays::new(days).unwrap()
    }

    fn var<'a>(&mut self, scope: &'a [String]) -> Option<&'a String> {
        let vars: Vec<&String> = scope.iter().filter(|v| *v != "event").collect();
        vars.choose(&mut self.rng).copied()
    }

    fn expr(&mut self, depth: u32, scope: &[String], embedded: bool) -> Expr {
        let choice = self.rng.gen_range(0..if depth == 0 { 9 } else { 12 });
        let vars = if embedded { &[][..] } else { scope };
        match choice {
            0 => Expr::Num(self.number()),
            1 => Expr::Bool(self.rng.gen()),
            2 => Expr::Str(self.text()),
            3 => Expr::Null,
            4 => self.var(vars).map_or(Expr::CreateUuid, |v| Expr::Var(v.clone())),
            5 => Expr::GetNumber(self.concept()),
            6 => Expr::GetString(self.concept()),
            7 => Expr::GetBoolean(self.concept()),
            8 => Expr::Threshold(self.rng.gen_range(1000..10000).to_string()),
            9 => {
                let op = *CmpOp::ALL.choose(&mut self.rng).unwrap();
                Expr::Compare(
                    Box::new(self.expr(depth - 1, scope, embedded)),
                    op,
                    Box::new(self.expr(depth - 1, scope, embedded)),
                )
            }
            10 => Expr::Concat((0..self.rng.gen_range(2..4)).map(|_| self.expr(depth - 1, scope, embedded)).collect()),
            _ => match self.var(vars).cloned() {
                Some(map) if self.rng.gen_bool(0.5) => {
                    Expr::Index { map, key: Box::new(self.expr(depth - 1, scope, embedded)) }
                }
                _ => Expr::Map(
                    (0..self.rng.gen_range(0..3))
                        .map(|_| (self.text(), self.expr(depth - 1, scope, embedded)))
                        .collect(),
                ),
            },
        }
    }

    fn query(&mut self) -> TemporalQuery {
        let threshold = if self.rng.gen_bool(0.8) {
            Threshold::Value(self.number())
        } else {
            Threshold::Var(self.rng.gen_range(1000..10000).to_string())
        };
        let n = self.rng.gen_range(1..15);
        TemporalQuery {
            cond: AggCondition {
                agg: if self.rng.gen() { Aggregator::Count } else { Aggregator::Sum },
                cmp: *CmpOp::ALL.choose(&mut self.rng).unwrap(),
                threshold,
            },
            target: self.text(),
            window: if self.rng.gen() { Span::calendar_days(n) } else { Span::days(n) },
        }
    }

    fn block(&mut self, depth: u32, scope: &mut Vec<String>) -> Vec<Statement> {
        let mark = scope.len();
        let out = (0..self.rng.gen_range(0..5)).map(|_| self.statement(depth, scope)).collect();
        scope.truncate(mark);
        out
    }

    fn statement(&mut self, depth: u32, scope: &mut Vec<String>) -> Statement {
        let has_event = scope.iter().any(|v| v == "event");
        loop {
            let s = match self.rng.gen_range(0..14) {
                0 if depth > 0 => Statement::WhileTrue { body: self.block(depth - 1, scope) },
                1 => {
                    let time = match self.var(scope) {
                        Some(v) if self.rng.gen_bool(0.3) => Operand::Var(v.clone()),
                        _ => Operand::Lit(self.time()),
                    };
                    let reminder = match self.rng.gen_range(0..3) {
                        0 => None,
                        1 => Some(Operand::Lit(self.span(false))),
                        _ => self.var(scope).map(|v| Operand::Var(v.clone())),
                    };
                    let duration_days = self.rng.gen_bool(0.4).then(|| self.rng.gen_range(0..100));
                    let start_offset_days = self.rng.gen_bool(0.4).then(|| self.rng.gen_range(0..10));
                    Statement::WaitPeriodic { days: self.weekdays(), time, reminder, start_offset_days, duration_days }
                }
                2 => {
                    scope.push("event".into());
                    Statement::CreateEvent
                }
                3 if has_event => Statement::PatientDataEntry {
                    concept_id: self.concept(),
                    label: self.expr(2, scope, false),
                    value_type: *[ValueType::Numeric, ValueType::Boolean, ValueType::String]
                        .choose(&mut self.rng)
                        .unwrap(),
                    validity: self.span(false),
                },
                4 if has_event => Statement::InsertEvent,
                5 => Statement::AnnotateTemporal {
                    op: if self.rng.gen() { AbstractionOp::Or } else { AbstractionOp::And },
                    exprs: (0..self.rng.gen_range(1..4)).map(|_| self.expr(2, scope, true)).collect(),
                    name: self.text(),
                },
                6 => Statement::WaitTemporalQuery { query: self.query() },
                7 if depth > 0 => Statement::IfTemporalQuery {
                    query: self.query(),
                    then_body: self.block(depth - 1, scope),
                    else_body: if self.rng.gen() { self.block(depth - 1, scope) } else { Vec::new() },
                },
                8 => Statement::Callback { callback_id: self.id(), message: self.text() },
                9 => Statement::PatientNotification { message_id: self.id(), text: self.text() },
                10 => Statement::SetProjectionGlobal { name: self.text(), expr: self.expr(2, scope, false) },
                11 | 12 => {
                    let init = self.expr(2, scope, false);
                    let name = self.fresh_name();
                    scope.push(name.clone());
                    Statement::VarDecl { name, init }
                }
                13 if depth > 0 => match self.var(scope).cloned() {
                    Some(map) => {
                        let var = self.fresh_name();
                        scope.push(var.clone());
                        let body = self.block(depth - 1, scope);
                        scope.retain(|v| v != &var);
                        Statement::ForIn { var, map, body }
                    }
                    None => continue,
                },
                _ => continue,
            };
            return s;
        }
    }

    fn declarative(&mut self) -> DeclarativeSection {
        let levels = [QodLevel::Low, QodLevel::VeryLow];
        DeclarativeSection {
            qod_items: (0..self.rng.gen_range(0..3))
                .map(|_| QodItem {
                    quality_id: self.id(),
                    level: *levels.choose(&mut self.rng).unwrap(),
                    relate_to: (0..self.rng.gen_range(1..4))
                        .map(|_| self.rng.gen_range(1000..10000).to_string())
                        .collect(),
                    range: self.rng.gen_bool(0.5).then(|| (self.number(), self.number())),
                })
                .collect(),
            personal_events: (0..self.rng.gen_range(0..3))
                .map(|_| PersonalEvent {
                    concept_id: self.id(),
                    event_name: self.text(),
                    context: self.rng.gen_bool(0.5).then(|| self.text()),
                    reminders: (0..self.rng.gen_range(0..3))
                        .map(|_| Reminder {
                            value: self.time(),
                            remind_lead_minutes: self.rng.gen_range(-30..30),
                            target_concept_id: self.id(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn envelope(&mut self) -> ProjectionEnvelope {
        let mut ids = BTreeSet::new();
        while ids.len() < self.rng.gen_range(0..6) {
            ids.insert(self.id());
        }
        let mut ids: Vec<String> = ids.into_iter().collect();
        ids.shuffle(&mut self.rng);
        let split = self.rng.gen_range(0..=ids.len());
        let stop_list = ids[..split].to_vec();
        let start_list = ids[split..].to_vec();
        let units = start_list
            .iter()
            .map(|id| UnitProjection {
                id: id.clone(),
                name: self.text(),
                source: String::new(),
                body: self.block(3, &mut Vec::new()),
            })
            .collect();
        ProjectionEnvelope {
            gl_id: self.id(),
            gl_name: if self.rng.gen() { self.text() } else { String::new() },
            current_context: if self.rng.gen() { self.text() } else { String::new() },
            projection_id: self.id(),
            stop_list,
            start_list,
            units,
            declarative: self.rng.gen_bool(0.3).then(|| self.declarative()),
        }
    }
}

fn envelope_fixpoint(text: &str) -> Result<ProjectionEnvelope, String> {
    let first = ProjectionEnvelope::parse(text).map_err(|e| e.to_string())?;
    let printed = first.to_text();
    let second = ProjectionEnvelope::parse(&printed).map_err(|e| format!("reparse: {e}"))?;
    if second != first || second.to_text() != printed {
        return Err("parse/print is not a fixpoint".into());
    }
    Ok(first)
}

fn unit_fixpoint(text: &str) -> Result<(), String> {
    let first = UnitProjection::parse(text).map_err(|e| e.to_string())?;
    let printed = first.to_text();
    let second = UnitProjection::parse(&printed).map_err(|e| format!("reparse: {e}"))?;
    if second != first || second.to_text() != printed {
        return Err("parse/print is not a fixpoint".into());
    }
    Ok(())
}

fn dsl_round_trip() -> Outcome {
    let mut corpus = Vec::new();
    for file in ["corpus/bg_schedule.pcb", "corpus/context_gdm.pcb"] {
        let text = read_fixture(file);
        envelope_fixpoint(&text).map_err(|e| format!("{file}: {e}"))?;
        corpus.push(text);
    }
    for file in ["corpus/medication.unit", "corpus/weekly_mets.unit", "golden/weekly_mets_5.unit"] {
        let text = read_fixture(file);
        unit_fixpoint(&text).map_err(|e| format!("{file}: {e}"))?;
        corpus.push(text);
    }

    let mut gen = Gen { rng: ChaCha8Rng::seed_from_u64(6), fresh: 0 };
    for i in 0..200 {
        let env = gen.envelope();
        let text = env.to_text();
        let parsed = envelope_fixpoint(&text).map_err(|e| format!("random envelope {i}: {e}\n{text}"))?;
        ensure!(parsed == env, "random envelope {i} does not parse back to itself\n{text}");
        corpus.push(text);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut rejected = 0;
    for i in 0..10_000 {
        let mut bytes = corpus.choose(&mut rng).unwrap().as_bytes().to_vec();
        let pos = rng.gen_range(0..bytes.len());
        bytes[pos] = rng.gen();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let outcome = panic::catch_unwind(|| {
            let env = ProjectionEnvelope::parse(&text).is_ok();
            let unit = UnitProjection::parse(&text).is_ok();
            env || unit
        });
        match outcome {
            Ok(true) => {}
            Ok(false) => rejected += 1,
            Err(_) => return Err(format!("parser panicked on mutation {i}:\n{text}")),
        }
    }
    Ok(format!(
        "{} corpus texts, 200 random envelopes, 10000 mutations ({rejected} rejected, 0 crashes)",
        corpus.len() - 200
    ))
}

// ---------------------------------------------------------------- 7

fn oracle_cmp(op: CmpOp, lhs: f64, rhs: f64) -> bool {
    match op {
        CmpOp::Ge => lhs >= rhs,
        CmpOp::Gt => lhs > rhs,
        CmpOp::Le => lhs <= rhs,
        CmpOp::Lt => lhs < rhs,
        CmpOp::Eq => lhs == rhs,
    }
}

enum OracleTarget {
    Concept(&'static str),
    /// Per concept, the bound each value must reach; all must hold on a date.
    AllAtLeast(Vec<(&'static str, f64)>),
}

fn temporal_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base = date(2014, 3, 3);
    let mut fired = 0;
    for case in 0..1000 {
        let mut index = EventIndex::new();
        // date -> concept -> usable values
        let mut buckets: BTreeMap<Date, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
        for id in 0..rng.gen_range(0..40) {
            let concept = *["a", "b"].choose(&mut rng).unwrap();
            let value = f64::from(rng.gen_range(0..12u8)) * 0.5;
            let when = at(base + Days::new(rng.gen_range(0..21)), rng.gen_range(0..24), rng.gen_range(0..60));
            let quality = if rng.gen_bool(0.15) { Quality::Low } else { Quality::Normal };
            index.insert(&Event {
                id,
                patient_id: "p".into(),
                concept_id: concept.into(),
                value: DataValue::Number(value),
                valid_start: when,
                valid_end: when,
                source: Source::PatientEntry,
                quality,
            });
            if quality == Quality::Normal {
                buckets.entry(when.date()).or_default().entry(concept).or_default().push(value);
            }
        }
        let window = rng.gen_range(1..=14i64);
        let as_of = at(base + Days::new(rng.gen_range(0..25)), rng.gen_range(0..24), 0);
        let cmp = *CmpOp::ALL.choose(&mut rng).unwrap();
        let threshold = f64::from(rng.gen_range(0..8u8));
        let (agg, target) = match rng.gen_range(0..4) {
            0 => (Aggregator::Count, OracleTarget::Concept("a")),
            1 => (Aggregator::Sum, OracleTarget::Concept("b")),
            2 => (Aggregator::Count, OracleTarget::AllAtLeast(vec![("a", 3.0)])),
            _ => (Aggregator::Count, OracleTarget::AllAtLeast(vec![("a", 2.0), ("b", 4.0)])),
        };
        let abstraction = match &target {
            OracleTarget::Concept(_) => None,
            OracleTarget::AllAtLeast(bounds) => Some(Abstraction {
                name: "abs".into(),
                op: if bounds.len() == 1 { AbstractionOp::Or } else { AbstractionOp::And },
                exprs: bounds
                    .iter()
                    .map(|(c, v)| parse_expr(&format!("event.getNumber(\"{c}\") >= {v}")).unwrap())
                    .collect(),
            }),
        };

        let dates: Vec<Date> = (0..window).map(|k| as_of.date() - Days::new(k as u64)).collect();
        let observed = match (&target, agg) {
            (OracleTarget::Concept(c), Aggregator::Count) => {
                dates.iter().filter(|d| buckets.get(d).is_some_and(|m| m.contains_key(c))).count() as f64
            }
            (OracleTarget::Concept(c), Aggregator::Sum) => {
                dates.iter().filter_map(|d| buckets.get(d).and_then(|m| m.get(c))).flatten().sum()
            }
            (OracleTarget::AllAtLeast(bounds), _) => dates
                .iter()
                .filter(|d| {
                    bounds.iter().all(|(c, min)| {
                        buckets.get(d).and_then(|m| m.get(c)).is_some_and(|vs| vs.iter().any(|v| v >= min))
                    })
                })
                .count() as f64,
        };
        let expected = (oracle_cmp(cmp, observed, threshold), observed);

        let q = WindowQuery { agg, cmp, threshold, window_days: window };
        let t = match (&target, &abstraction) {
            (OracleTarget::Concept(c), _) => Target::Concept(c),
            (_, Some(a)) => Target::Abstraction(a),
            _ => unreachable!(),
        };
        let got = window_query(&q, t, as_of, &index).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(got == expected, "case {case}: engine {got:?}, oracle {expected:?}");
        fired += usize::from(got.0);
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("1000 cases, 0 mismatches, {fired} held"))
}

// ---------------------------------------------------------------- 8

fn protocol_robustness() -> Outcome {
    let (clean, _) = runner::run(&ketonuria_options(None)).map_err(|e| e.to_string())?;
    let (world, report) =
        runner::run(&ketonuria_options(Some("faults/drop_first_projection.json"))).map_err(|e| e.to_string())?;
    let lines = world.transcript();
    let mut projection_msgs = BTreeSet::new();
    let mut first_dropped = BTreeSet::new();
    for l in lines {
        match &l.entry {
            Entry::Channel { event: ChannelEvent::Sent { msg_id, kind: Kind::Projection, .. } } => {
                projection_msgs.insert(msg_id.clone());
            }
            Entry::Channel { event: ChannelEvent::Dropped { msg_id, attempt: 1, .. } } => {
                first_dropped.insert(msg_id.clone());
            }
            Entry::DeliveryFailed { msg_id, .. } => return Err(format!("{msg_id} was never delivered")),
            _ => {}
        }
    }
    ensure!(!projection_msgs.is_empty(), "no projections sent");
    ensure!(projection_msgs.is_subset(&first_dropped), "a projection's first transmission got through");
    let apps = applied(lines);
    let mut per_projection: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, id, _, _) in &apps {
        *per_projection.entry(id.as_str()).or_default() += 1;
    }
    ensure!(per_projection.values().all(|&n| n == 1), "applications per projection {per_projection:?}");
    ensure!(apps.len() == projection_msgs.len(), "{} applied of {} sent", apps.len(), projection_msgs.len());
    let strip = |v: Vec<(Timestamp, String, Vec<String>, Vec<String>)>| -> Vec<_> {
        v.into_iter().map(|(_, id, stop, start)| (id, stop, start)).collect()
    };
    ensure!(strip(apps) == strip(applied(clean.transcript())), "applied envelopes differ from the fault-free run");
    ensure!(
        report.consistent && report.ledger_active == report.device_active,
        "ledger {:?} device {:?}",
        report.ledger_active,
        report.device_active
    );
    ensure!(report.undelivered_messages == 0, "{} undelivered", report.undelivered_messages);
    ensure!(report.passed(), "scenario assertions failed under faults");
    Ok(format!("{} projections, each dropped once and applied once", projection_msgs.len()))
}

// ---------------------------------------------------------------- 9

struct Plan {
    values: Vec<&'static str>,
    prescription_days: u64,
    crash: (u64, u32, u32),
}

const PLAN_DAYS: u64 = 42;

/// A mostly negative fortnight, so the twice-weekly schedule takes over,
/// then a mixed stretch that brings positives and callbacks.
fn plan(seed: u64) -> Plan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive = rng.gen_range(0.2..0.6);
    let values = (0..PLAN_DAYS)
        .map(|d| {
            let p = if d < 14 { 0.05 } else { positive };
            if rng.gen_bool(p) {
                "++"
            } else {
                "--"
            }
        })
        .collect();
    let crash_hour = rng.gen_range(0..7);
    Plan {
        values,
        prescription_days: rng.gen_range(3..50),
        crash: (rng.gen_range(1..PLAN_DAYS), crash_hour, rng.gen_range(crash_hour + 1..=7)),
    }
}

fn pending(w: &World, wanted: PromptKind, concept: Option<&str>) -> Option<u64> {
    w.device()?
        .pending()
        .into_iter()
        .find_map(|(p, c, _, k)| (k == wanted && concept.is_none_or(|x| x == c)).then_some(p.0))
}

fn drive(plan: &Plan, crash: bool) -> Result<World, String> {
    let kb = files::load_guideline(&fixture("guidelines/ketonuria.json")).map_err(|e| e.to_string())?;
    let base = date(2014, 3, 3);
    let mut phr = PatientRecord::new("crash-prop");
    phr.add_prescription(atorvastatina(base, plan.prescription_days)).map_err(|e| e.to_string())?;
    let mut w = World::new(kb, phr, Policy::PassingOfControl, &BTreeMap::new(), ChannelConfig::default());
    w.start(at(base, 0, 0));
    for (d, value) in plan.values.iter().enumerate() {
        let day = base + Days::new(d as u64);
        if crash && plan.crash.0 == d as u64 {
            w.advance_to(at(day, plan.crash.1, 0));
            w.crash(None);
            w.advance_to(at(day, plan.crash.2, 0));
            w.restart(None);
        }
        w.advance_to(at(day, 8, 5));
        if let Some(p) = pending(&w, PromptKind::DataEntry, Some("5021")) {
            w.patient_answer(p, Input::Value(DataValue::Text((*value).into())));
        }
        w.advance_to(at(day, 8, 7));
        if let Some(p) = pending(&w, PromptKind::DataEntry, Some("5037")) {
            w.patient_answer(p, Input::Value(DataValue::Bool(true)));
        }
        w.advance_to(at(day, 8, 10));
        if let Some(p) = pending(&w, PromptKind::Recommendation, None) {
            w.patient_answer(p, Input::Answer(Response::Accept));
        }
        w.advance_to(at(day, 20, 5));
        if let Some(p) = pending(&w, PromptKind::DataEntry, Some("9648")) {
            w.patient_answer(p, Input::Value(DataValue::Bool(true)));
        }
    }
    w.advance_to(at(base + Days::new(PLAN_DAYS), 0, 0));
    Ok(w)
}

/// Units whose schedules have run out by `date` may be missing on a
/// recovered device; they are left out of the comparison.
fn unexpired(units: BTreeSet<String>, w: &World, plan: &Plan, d: Date) -> BTreeSet<String> {
    let ended = d >= date(2014, 3, 3) + Days::new(plan.prescription_days);
    let medication: BTreeSet<String> = w
        .device()
        .map(|dev| dev.units().into_iter().filter(|u| dev.task(u).is_some_and(|t| !t.is_running())).collect())
        .unwrap_or_default();
    units.into_iter().filter(|u| !(ended && medication.contains(u))).collect()
}

fn crash_recovery_property() -> Outcome {
    let (mut recovered, mut callbacks_after) = (0, 0);
    for seed in 0..50u64 {
        let p = plan(seed);
        let reference = drive(&p, false)?;
        let crashed = drive(&p, true)?;
        let restart_at = at(date(2014, 3, 3) + Days::new(p.crash.0), p.crash.2, 0);
        let end = reference.now().date();
        let (ref_ledger, ref_device) = reference.active_sets();
        let (ledger, device) = crashed.active_sets();
        let ref_device = unexpired(ref_device.ok_or("reference device down")?, &reference, &p, end);
        let device = unexpired(device.ok_or(format!("seed {seed}: device down at the end"))?, &crashed, &p, end);
        ensure!(device == ref_device, "seed {seed}: device units {device:?} vs {ref_device:?}");
        ensure!(
            unexpired(ledger, &crashed, &p, end) == unexpired(ref_ledger, &reference, &p, end),
            "seed {seed}: ledgers differ"
        );
        let after =
            |w: &World| -> Vec<_> { callbacks(w.transcript()).into_iter().filter(|c| c.0 >= restart_at).collect() };
        ensure!(after(&crashed) == after(&reference), "seed {seed}: callbacks after restart differ");
        let resent =
            crashed.bedss.phr.interactions().iter().filter(|r| r.technical_only && r.timestamp == restart_at).count();
        ensure!(resent == 1, "seed {seed}: {resent} recovery resends");
        recovered += 1;
        callbacks_after += usize::from(!after(&reference).is_empty());
    }
    ensure!(callbacks_after >= 10, "only {callbacks_after} scenarios call back after the restart");
    Ok(format!("{recovered} seeded crashes recovered, {callbacks_after} with callbacks after the restart"))
}

// ---------------------------------------------------------------- 10

fn check_totality(label: &str, lines: &[TranscriptLine], phr: &PatientRecord) -> Result<u64, String> {
    let records: Vec<InteractionRecord> = lines
        .iter()
        .filter_map(|l| match &l.entry {
            Entry::Interaction { record } => Some(record.clone()),
            _ => None,
        })
        .collect();
    for r in &records {
        ensure!(InteractionSubtype::ALL.contains(&classify_interaction(r)), "{label}: unclassified {r:?}");
    }
    let m = compute_metrics(&records, 1);
    ensure!(
        m.histogram_total() == records.len() as u64,
        "{label}: histogram {} vs {}",
        m.histogram_total(),
        records.len()
    );
    ensure!(
        records.len() == phr.interactions().len(),
        "{label}: transcript {} vs log {}",
        records.len(),
        phr.interactions().len()
    );
    Ok(records.len() as u64)
}

fn classification_totality() -> Outcome {
    let mut total = 0;
    for faults in [None, Some("faults/drop_first_projection.json")] {
        let (w, report) = runner::run(&ketonuria_options(faults)).map_err(|e| e.to_string())?;
        let n = check_totality("ketonuria", w.transcript(), &w.bedss.phr)?;
        ensure!(report.metrics.histogram_total() == n, "report histogram {} vs {n}", report.metrics.histogram_total());
        total += n;
    }
    for seed in 0..50u64 {
        let w = drive(&plan(seed), true)?;
        total += check_totality(&format!("crash seed {seed}"), w.transcript(), &w.bedss.phr)?;
    }
    Ok(format!("{total} records classified"))
}

fn main() {
    panic::set_hook(Box::new(|_| {}));
    let criteria: [Criterion; 10] = [
        ("metrics reproduction", metrics_reproduction),
        ("knowledge-base statistics", kb_statistics),
        ("ketonuria end to end", ketonuria_end_to_end),
        ("recovery arithmetic", recovery_arithmetic),
        ("threshold substitution", threshold_substitution),
        ("language round trip", dsl_round_trip),
        ("temporal oracle", temporal_oracle),
        ("protocol robustness", protocol_robustness),
        ("crash recovery equivalence", crash_recovery_property),
        ("classification totality", classification_totality),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let ms = started.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail} ({ms} ms)", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {e} ({ms} ms)", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
