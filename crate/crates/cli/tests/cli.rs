mod common;

use std::fs;
use std::process::Command;

use common::{cli, fixture, fixtures};
use detrap::layout::{default_specs, plan_layout, render_layout_config};
use serde_json::Value;

fn path(name: &str, mode: &str) -> String {
    fixture(&fixtures::file_name(name, mode)).display().to_string()
}

fn json(out: &detrap_cli::Outcome) -> Value {
    serde_json::from_str(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", out.stdout))
}

#[test]
fn fixtures_are_current() {
    let bless = std::env::var_os("DETRAP_BLESS").is_some();
    let mut stale = Vec::new();
    for (name, p) in fixtures::all() {
        for (mode, tag) in fixtures::MODES {
            let file = fixture(&fixtures::file_name(name, tag));
            let fresh = fixtures::render(&p, mode);
            if bless {
                fs::write(&file, &fresh).unwrap();
            } else if fs::read_to_string(&file).ok().as_deref() != Some(fresh.as_str()) {
                stale.push(file.display().to_string());
            }
        }
    }
    assert!(stale.is_empty(), "stale fixtures (rerun with DETRAP_BLESS=1): {stale:?}");
}

#[test]
fn layout_default_has_three_triggers() {
    let out = cli(&["layout"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let v = json(&out);
    let t = v["policy"]["triggers"].as_array().unwrap();
    assert_eq!(t.len(), 3);
    // Hand-derived from the default sizes: 64K+32K+16K+8K+4K below untrusted code.
    assert_eq!(t[0]["compare"], "0x0001f000");
    assert_eq!(t[0]["chain"], true);
    assert_eq!(t[1]["compare"], "0x00027000");
    assert_eq!(t[2]["compare"], "0x0001effc");
    assert_eq!(v["map"]["write_limited_top"], "0x00027000");
}

#[test]
fn layout_missing_kind_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let specs: Vec<_> = default_specs().into_iter().skip(1).collect();
    let file = dir.path().join("no-mmio.layout");
    fs::write(&file, render_layout_config(&specs)).unwrap();
    let out = cli(&["layout", "--layout", file.to_str().unwrap()]);
    assert_eq!(out.code, 2);
    assert!(out.stdout.is_empty());
    assert!(out.stderr.contains("error"), "{}", out.stderr);

    fs::write(&file, "section.mmio.size=\n").unwrap();
    assert_eq!(cli(&["layout", "--layout", file.to_str().unwrap()]).code, 2);
}

#[test]
fn layout_check_revalidates_a_saved_map() {
    let dir = tempfile::tempdir().unwrap();
    let saved = dir.path().join("map.json");
    let map = plan_layout(&default_specs(), 32).unwrap();
    fs::write(&saved, map.to_json().to_string()).unwrap();
    let out = cli(&["layout", "--check", saved.to_str().unwrap()]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(out.stdout, cli(&["layout"]).stdout);

    let mut broken = map.clone();
    broken.sections[1].base = broken.sections[0].base + 16;
    fs::write(&saved, broken.to_json().to_string()).unwrap();
    let out = cli(&["layout", "--check", saved.to_str().unwrap()]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("overlap"), "{}", out.stderr);
}

#[test]
fn layout_env_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.layout");
    fs::write(&file, "nonsense\n").unwrap();
    let out = detrap_cli::run(["detrap", "layout"], Some(file.clone()));
    assert_eq!(out.code, 2);
    // An explicit flag wins over the environment.
    let good = dir.path().join("good.layout");
    fs::write(&good, render_layout_config(&default_specs())).unwrap();
    let out = detrap_cli::run(["detrap", "layout", "--layout", good.to_str().unwrap()], Some(file));
    assert_eq!(out.code, 0);
}

#[test]
fn scan_clean_fixture_passes() {
    let out = cli(&["scan", &path("hello", "detrap")]);
    assert_eq!(out.code, 0, "{}", out.stdout);
    let v = json(&out);
    assert_eq!(v["verdict"], "pass");
    assert_eq!(v["findings"].as_array().unwrap().len(), 0);
}

#[test]
fn scan_flags_mret_in_untrusted_code() {
    let out = cli(&["scan", &path("mret", "detrap")]);
    assert_eq!(out.code, 1);
    let v = json(&out);
    let rules: Vec<&str> = v["findings"].as_array().unwrap().iter().map(|f| f["rule"].as_str().unwrap()).collect();
    assert!(rules.contains(&"R4"), "{rules:?}");

    let human = cli(&["scan", &path("mret", "detrap"), "--format", "human"]);
    assert_eq!(human.code, 1);
    assert!(human.stdout.contains("R4"), "{}", human.stdout);
}

#[test]
fn scan_uninstrumented_build_fails() {
    // The baseline epilogue reloads ra from the stack.
    let out = cli(&["scan", &path("calls10", "baseline")]);
    assert_eq!(out.code, 1);
    assert!(out.stdout.contains("\"R1\""), "{}", out.stdout);
}

#[test]
fn scan_malformed_image_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.img");
    fs::write(&bad, ".section .text kind=untrusted-code base=0x1f000\n    frobnicate a0\n").unwrap();
    let out = cli(&["scan", bad.to_str().unwrap()]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("line 2"), "{}", out.stderr);
    assert_eq!(cli(&["scan", "/nonexistent/image"]).code, 2);
}

#[test]
fn scan_many_images_reports_in_order() {
    let a = path("hello", "detrap");
    let b = path("mret", "detrap");
    let out = cli(&["scan", &a, &b]);
    assert_eq!(out.code, 1);
    let v = json(&out);
    let arr = v.as_array().unwrap();
    assert_eq!(arr[0]["image"], a.as_str());
    assert_eq!(arr[0]["verdict"], "pass");
    assert_eq!(arr[1]["image"], b.as_str());
    assert_eq!(arr[1]["verdict"], "fail");
}

#[test]
fn scan_reads_elf() {
    let elf = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/switch.elf");
    let out = cli(&["scan", elf]);
    assert_eq!(out.code, 0, "{}{}", out.stdout, out.stderr);
}

#[test]
fn scan_whitelist_file() {
    let dir = tempfile::tempdir().unwrap();
    let wl = dir.path().join("wl.txt");
    fs::write(&wl, "# nothing vetted\n").unwrap();
    let out = cli(&["scan", &path("hello", "detrap"), "--whitelist", wl.to_str().unwrap()]);
    assert_eq!(out.code, 0);
    fs::write(&wl, "allow nosuchfunction 0x1f000 -> 0x1f004\n").unwrap();
    let out = cli(&["scan", &path("hello", "detrap"), "--whitelist", wl.to_str().unwrap()]);
    assert_eq!(out.code, 2, "{}", out.stdout);
}

#[test]
fn run_hello_prints_console() {
    let out = cli(&["run", &path("hello", "detrap")]);
    assert_eq!(out.code, 0);
    let v = json(&out);
    assert_eq!(v["status"], "halted");
    assert_eq!(v["console"], "hi\n");
    assert!(out.stderr.is_empty());
}

#[test]
fn run_attack_on_write_limited_memory() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("poke.s");
    fs::write(
        &src,
        ".section .t kind=trusted-code trust=trusted base=auto\n_start: call main\n li a7, 93\n ecall\n\
         .section .u kind=untrusted-code base=auto\n.sym main 0 function\nmain: li t0, 0x1c000\n sw zero, 0(t0)\n ret\n.entry _start\n",
    )
    .unwrap();
    let out = cli(&["run", src.to_str().unwrap()]);
    assert_eq!(out.code, 1, "{}", out.stdout);
    assert_eq!(json(&out)["reason"], "WriteViolation");
}

#[test]
fn run_trace_goes_to_stderr() {
    let out = cli(&["run", &path("leaf", "detrap"), "--trace"]);
    assert_eq!(out.code, 0);
    let retired = json(&out)["retired"].as_u64().unwrap();
    assert_eq!(out.stderr.lines().count() as u64, retired);
    assert!(out.stderr.starts_with("pc=0x00010000"));
}

#[test]
fn run_interrupt_injection() {
    let spin = path("spin", "detrap");
    let quiet = cli(&["run", &spin]);
    // without an interrupt the handler never counts, so main exits with -1
    assert_eq!(json(&quiet)["code"], u32::MAX);
    let out = cli(&["run", &spin, "--inject-interrupt", "at=100"]);
    assert_eq!(out.code, 0, "{}", out.stdout);
    let v = json(&out);
    assert_eq!(v["code"], 0);
    assert_eq!(v["traps"], 1);
    assert_eq!(cli(&["run", &spin, "--inject-interrupt", "sometime"]).code, 2);
}

#[test]
fn run_step_limit() {
    let out = cli(&["run", &path("calls10", "detrap"), "--max-steps", "10"]);
    assert_eq!(out.code, 3);
    assert_eq!(json(&out)["status"], "step-limit");
}

#[test]
fn bench_calls10_matches_hand_count() {
    let out = cli(&["bench", &path("calls10", "baseline"), &path("calls10", "detrap")]);
    assert_eq!(out.code, 0, "{}", out.stdout);
    let v = json(&out);
    assert_eq!(v["delta"], 40);
    assert_eq!(v["predicted-delta"], 40);
    assert_eq!(
        v["retired-detrap"].as_u64().unwrap() - v["retired-baseline"].as_u64().unwrap(),
        40
    );
}

#[test]
fn bench_leaf_only_is_free() {
    let out = cli(&["bench", &path("leaf", "baseline"), &path("leaf", "detrap")]);
    assert_eq!(out.code, 0);
    assert_eq!(json(&out)["delta"], 0);
}

#[test]
fn bench_mismatch_fails() {
    let out = cli(&["bench", &path("leaf", "baseline"), &path("calls10", "detrap")]);
    assert_eq!(out.code, 1, "{}", out.stdout);
    let v = json(&out);
    assert_ne!(v["delta"], v["predicted-delta"]);
}

#[test]
fn outputs_are_byte_stable() {
    let cases: Vec<Vec<String>> = vec![
        vec!["layout".into()],
        vec!["scan".into(), path("icall", "detrap")],
        vec!["scan".into(), path("mret", "detrap"), "--format".into(), "human".into()],
        vec!["run".into(), path("spin", "detrap"), "--inject-interrupt".into(), "at=50".into(), "--trace".into()],
        vec!["bench".into(), path("icall", "baseline"), path("icall", "detrap")],
    ];
    for args in cases {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_eq!(cli(&refs), cli(&refs), "{args:?}");
    }
}

#[test]
fn binary_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_detrap");
    let out = Command::new(bin).args(["run", &path("hello", "detrap")]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"console\": \"hi\\n\""));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.layout");
    fs::write(&bad, "section.bogus.size=4\n").unwrap();
    let out = Command::new(bin).arg("layout").env(detrap_cli::LAYOUT_ENV, &bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(bin).args(["scan", &path("mret", "detrap")]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
