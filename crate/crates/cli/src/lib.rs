//! Subcommand implementations for the `detrap` binary.
//!
//! Every command returns an [`Outcome`] instead of printing, so the same
//! code path serves the binary and the tests.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use detrap::layout::{
    default_specs, derive_trigger_policy, parse_layout_config, plan_layout, policy_json, validate_layout, MemoryMap,
};
use detrap::machine::{call_events, Machine, Status};
use detrap::program::elf::is_elf;
use detrap::program::{assemble, load_elf32, predicted_overhead, Image};
use detrap::scanner::{parse_whitelist, scan, ScanReport, Whitelist};

pub const LAYOUT_ENV: &str = "DETRAP_LAYOUT";
pub const ADDRESS_BITS: u32 = 32;
pub const DEFAULT_MAX_STEPS: u64 = 10_000_000;

pub mod exit {
    pub const OK: i32 = 0;
    /// Scan findings, a security termination, or a bench mismatch.
    pub const FAIL: i32 = 1;
    pub const INPUT: i32 = 2;
    pub const STEP_LIMIT: i32 = 3;
}

#[derive(Parser, Debug)]
#[command(name = "detrap", version, about = "Debug-trigger return-address protection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Plan the memory map and print it with the derived trigger policy.
    Layout {
        #[arg(long)]
        layout: Option<PathBuf>,
        /// Re-validate a previously saved map instead of planning one.
        #[arg(long, value_name = "MAP_JSON")]
        check: Option<PathBuf>,
    },
    /// Statically verify one or more images.
    Scan {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        layout: Option<PathBuf>,
        #[arg(long)]
        whitelist: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Simulate an image and print a summary.
    Run {
        image: PathBuf,
        #[arg(long)]
        layout: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
        max_steps: u64,
        /// Write one line per retired instruction to standard error.
        #[arg(long)]
        trace: bool,
        /// Raise a timer interrupt once N instructions have retired.
        #[arg(long, value_name = "at=N", value_parser = parse_inject)]
        inject_interrupt: Vec<u64>,
    },
    /// Compare retired instruction counts of a baseline and an instrumented build.
    Bench {
        baseline: PathBuf,
        instrumented: PathBuf,
        #[arg(long)]
        layout: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
        max_steps: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Human,
}

fn parse_inject(s: &str) -> Result<u64, String> {
    let n = s.strip_prefix("at=").unwrap_or(s);
    n.parse().map_err(|_| format!("expected at=N, got `{s}`"))
}

/// What a command produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Outcome {
    fn json(code: i32, v: &Value) -> Outcome {
        let mut stdout = serde_json::to_string_pretty(v).expect("json values serialize");
        stdout.push('\n');
        Outcome {
            code,
            stdout,
            stderr: String::new(),
        }
    }

    fn input_error(e: anyhow::Error) -> Outcome {
        Outcome {
            code: exit::INPUT,
            stdout: String::new(),
            stderr: format!("error: {e:#}\n"),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// `env_layout` is the value of [`LAYOUT_ENV`], if set.
pub fn run<I, T>(args: I, env_layout: Option<PathBuf>) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli.command, env_layout),
        Err(e) => {
            let code = if e.use_stderr() { exit::INPUT } else { exit::OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                Outcome {
                    code,
                    stdout: String::new(),
                    stderr: text,
                }
            } else {
                Outcome {
                    code,
                    stdout: text,
                    stderr: String::new(),
                }
            }
        }
    }
}

pub fn execute(cmd: Command, env_layout: Option<PathBuf>) -> Outcome {
    let pick = |flag: Option<PathBuf>| flag.or(env_layout.clone());
    match cmd {
        Command::Layout { layout, check } => cmd_layout(pick(layout).as_deref(), check.as_deref()),
        Command::Scan {
            images,
            layout,
            whitelist,
            format,
        } => cmd_scan(&images, pick(layout).as_deref(), whitelist.as_deref(), format),
        Command::Run {
            image,
            layout,
            max_steps,
            trace,
            inject_interrupt,
        } => cmd_run(&image, pick(layout).as_deref(), max_steps, trace, &inject_interrupt),
        Command::Bench {
            baseline,
            instrumented,
            layout,
            max_steps,
        } => cmd_bench(&baseline, &instrumented, pick(layout).as_deref(), max_steps),
    }
}

/// Plans the map from a layout file, or the default sizes when `path` is `None`.
pub fn load_map(path: Option<&Path>) -> Result<MemoryMap> {
    let specs = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_layout_config(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => default_specs(),
    };
    let map = plan_layout(&specs, ADDRESS_BITS)?;
    check_map(&map)?;
    Ok(map)
}

fn check_map(map: &MemoryMap) -> Result<()> {
    let findings = validate_layout(map);
    if findings.is_empty() {
        return Ok(());
    }
    let lines: Vec<String> = findings.iter().map(|f| f.message.clone()).collect();
    Err(anyhow!("invalid memory map: {}", lines.join("; ")))
}

/// Reads an ELF executable or a text image, telling them apart by magic.
pub fn load_image(path: &Path, map: &MemoryMap) -> Result<Image> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if is_elf(&bytes) {
        return load_elf32(&bytes).with_context(|| format!("loading {}", path.display()));
    }
    let text = String::from_utf8(bytes).map_err(|_| anyhow!("{} is neither ELF nor UTF-8 text", path.display()))?;
    assemble(&text, map).with_context(|| format!("parsing {}", path.display()))
}

fn map_and_policy(map: &MemoryMap) -> Value {
    json!({
        "map": map.to_json(),
        "policy": policy_json(&derive_trigger_policy(map)),
    })
}

pub fn cmd_layout(layout: Option<&Path>, check: Option<&Path>) -> Outcome {
    let map = match check {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))
            .and_then(|t| MemoryMap::from_json(&t).with_context(|| format!("parsing {}", p.display())))
            .and_then(|m| check_map(&m).map(|_| m)),
        None => load_map(layout),
    };
    match map {
        Ok(m) => Outcome::json(exit::OK, &map_and_policy(&m)),
        Err(e) => Outcome::input_error(e),
    }
}

fn scan_one(path: &Path, map: &MemoryMap, whitelist: Option<&str>) -> Result<ScanReport> {
    let img = load_image(path, map)?;
    let wl = match whitelist {
        Some(text) => parse_whitelist(text, &img).context("parsing whitelist")?,
        None => Whitelist::default(),
    };
    Ok(scan(&img, map, &wl))
}

pub fn cmd_scan(images: &[PathBuf], layout: Option<&Path>, whitelist: Option<&Path>, format: Format) -> Outcome {
    let setup = load_map(layout).and_then(|m| {
        let wl = whitelist
            .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
            .transpose()?;
        Ok((m, wl))
    });
    let (map, wl) = match setup {
        Ok(s) => s,
        Err(e) => return Outcome::input_error(e),
    };
    // Images are independent; scan them in parallel and report in argument order.
    let results: Vec<Result<ScanReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = images
            .iter()
            .map(|p| s.spawn(|| scan_one(p, &map, wl.as_deref())))
            .collect();
        handles.into_iter().map(|h| h.join().expect("scan thread panicked")).collect()
    });
    let mut reports = Vec::new();
    for r in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => return Outcome::input_error(e),
        }
    }
    let code = if reports.iter().all(ScanReport::pass) { exit::OK } else { exit::FAIL };
    match format {
        Format::Json => {
            let v = if reports.len() == 1 {
                reports[0].to_json()
            } else {
                Value::Array(
                    images
                        .iter()
                        .zip(&reports)
                        .map(|(p, r)| {
                            let mut v = r.to_json();
                            v["image"] = json!(p.display().to_string());
                            v
                        })
                        .collect(),
                )
            };
            Outcome::json(code, &v)
        }
        Format::Human => {
            let mut stdout = String::new();
            for (p, r) in images.iter().zip(&reports) {
                if reports.len() > 1 {
                    stdout.push_str(&format!("{}:\n", p.display()));
                }
                stdout.push_str(&r.to_human());
                if !stdout.ends_with('\n') {
                    stdout.push('\n');
                }
            }
            Outcome {
                code,
                stdout,
                stderr: String::new(),
            }
        }
    }
}

fn status_code(status: Status, step_limit: bool) -> i32 {
    match status {
        _ if step_limit => exit::STEP_LIMIT,
        Status::Halted { .. } => exit::OK,
        Status::Terminated { .. } => exit::FAIL,
        Status::Running => exit::STEP_LIMIT,
    }
}

pub fn cmd_run(image: &Path, layout: Option<&Path>, max_steps: u64, trace: bool, interrupts: &[u64]) -> Outcome {
    let prepared = load_map(layout).and_then(|map| {
        let img = load_image(image, &map)?;
        Ok(Machine::load_default(&img, &map)?)
    });
    let mut m = match prepared {
        Ok(m) => m,
        Err(e) => return Outcome::input_error(e),
    };
    for &at in interrupts {
        m.schedule_interrupt(at);
    }
    if trace {
        m.enable_trace();
    }
    let r = m.run(max_steps);
    let mut out = Outcome::json(status_code(r.status, r.step_limit), &m.summary_json(r.step_limit));
    if trace {
        out.stderr = m.trace().iter().map(|t| format!("{t}\n")).collect();
    }
    out
}

pub fn cmd_bench(baseline: &Path, instrumented: &Path, layout: Option<&Path>, max_steps: u64) -> Outcome {
    let prepared = load_map(layout).and_then(|map| {
        let base = load_image(baseline, &map)?;
        let det = load_image(instrumented, &map)?;
        let b = Machine::load_default(&base, &map)?;
        let d = Machine::load_default(&det, &map)?;
        Ok((base, det, b, d))
    });
    let (base, det, mut b, mut d) = match prepared {
        Ok(p) => p,
        Err(e) => return Outcome::input_error(e),
    };
    b.enable_trace();
    let rb = b.run(max_steps);
    let rd = d.run(max_steps);
    let retired_b = b.counters().retired;
    let retired_d = d.counters().retired;
    let predicted = predicted_overhead(&base, &det, &call_events(b.trace()));
    let delta = retired_d as i64 - retired_b as i64;
    let halted = |s: Status| matches!(s, Status::Halted { .. });
    let ok = halted(rb.status) && halted(rd.status) && delta == predicted as i64;
    let v = json!({
        "retired-baseline": retired_b,
        "retired-detrap": retired_d,
        "delta": delta,
        "predicted-delta": predicted,
        "baseline": b.summary_json(rb.step_limit),
        "detrap": d.summary_json(rd.step_limit),
    });
    Outcome::json(if ok { exit::OK } else { exit::FAIL }, &v)
}
