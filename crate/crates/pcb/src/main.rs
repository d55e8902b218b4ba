use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use chrono::NaiveDateTime;
use clap::{Parser, Subcommand, ValueEnum};
use pcb::files::{self, InputError};
use pcb::live::{self, LiveSession};
use pcb::runner::{self, RunOptions};
use pcb_core::bedss::Policy;
use pcb_core::channel::ChannelConfig;
use pcb_core::phr::PatientRecord;
use pcb_core::sim::{PatientProfile, World};

const EXIT_ASSERTION: u8 = 1;
const EXIT_INPUT: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Text,
}

#[derive(Parser)]
#[command(name = "pcb", version, about = "Run guideline projection/call-back sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plays a scenario against a guideline and checks its assertions.
    Run {
        #[arg(long)]
        guideline: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// Patient profile (JSON).
        #[arg(long)]
        patient: PathBuf,
        #[arg(long, default_value = "passing-of-control")]
        policy: Policy,
        /// Channel configuration with a fault plan (JSON).
        #[arg(long)]
        faults: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        report: ReportFormat,
        /// After the run, serve the session to the patient console (0 picks a free port).
        #[arg(long)]
        serve: Option<u16>,
        /// Directory for the transcript and the PHR log.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Prints the knowledge-base measures and distribution profile.
    Stats {
        #[arg(long)]
        guideline: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        report: ReportFormat,
    },
    /// Recomputes session metrics from a transcript or PHR log.
    Metrics {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        report: ReportFormat,
    },
    /// Starts a live session driven from the patient console.
    Console {
        #[arg(long)]
        port: u16,
        #[arg(long)]
        guideline: PathBuf,
        /// Patient profile (JSON); an empty profile when omitted.
        #[arg(long)]
        patient: Option<PathBuf>,
        #[arg(long, default_value = "passing-of-control")]
        policy: Policy,
        /// Session start, e.g. 2014-03-03T00:00:00. Defaults to today's midnight.
        #[arg(long)]
        start: Option<NaiveDateTime>,
    },
}

fn serve(port: u16, session: &mut LiveSession) -> anyhow::Result<()> {
    let listener = TcpListener::bind(("127.0.0.1", port)).with_context(|| format!("binding port {port}"))?;
    let addr = listener.local_addr()?;
    eprintln!("serving ws://{addr}/session/{}", session.patient_id());
    live::serve(listener, session, None)?;
    Ok(())
}

fn execute(cmd: Command) -> anyhow::Result<u8> {
    match cmd {
        Command::Run { guideline, scenario, patient, policy, faults, seed, report, serve: port, out } => {
            let opts = RunOptions { guideline, scenario, patient, policy, faults, seed };
            let (world, result) = runner::run(&opts)?;
            runner::save_outputs(&out, &world).with_context(|| format!("writing outputs to {}", out.display()))?;
            match report {
                ReportFormat::Json => println!("{}", runner::report_json(&result)),
                ReportFormat::Text => print!("{}", runner::report_text(&result)),
            }
            if let Some(port) = port {
                // the scenario has finished, so the console owns the clock
                serve(port, &mut LiveSession::new(world, true))?;
            }
            Ok(if result.passed() { 0 } else { EXIT_ASSERTION })
        }
        Command::Stats { guideline, report } => {
            let kb = files::load_guideline(&guideline)?;
            let s = runner::stats(&kb);
            match report {
                ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&s)?),
                ReportFormat::Text => print!("{}", runner::stats_text(&s)),
            }
            Ok(0)
        }
        Command::Metrics { log, report } => {
            let m = runner::metrics_from_log(&log)?;
            match report {
                ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&m)?),
                ReportFormat::Text => print!("{}", runner::metrics_text(&m)),
            }
            Ok(0)
        }
        Command::Console { port, guideline, patient, policy, start } => {
            let kb = files::load_guideline(&guideline)?;
            let (phr, thresholds) = match &patient {
                Some(p) => {
                    let profile = files::load_profile(p)?;
                    (files::profile_record(p, &profile)?, profile.thresholds)
                }
                None => (PatientRecord::new("patient"), PatientProfile::default().thresholds),
            };
            let mut world = World::new(kb, phr, policy, &thresholds, ChannelConfig::default());
            let start = start.unwrap_or_else(|| chrono::Local::now().date_naive().and_time(chrono::NaiveTime::MIN));
            world.start(start);
            serve(port, &mut LiveSession::new(world, true))?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => match e.downcast_ref::<InputError>() {
            Some(input) => {
                eprintln!("error: {input}");
                ExitCode::from(EXIT_INPUT)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_INPUT)
            }
        },
    }
}
