//! Named programs checked in under `tests/fixtures` as text images.
//!
//! `cargo test --test cli fixtures_are_current` compares the files with a
//! fresh build; set `DETRAP_BLESS=1` to rewrite them.

use detrap::program::{emit_image, icall_sequence, FunctionSkeleton, Mode, ProgramBuilder};

use super::gen::default_map;

pub const MODES: [(Mode, &str); 2] = [(Mode::Baseline, "baseline"), (Mode::Detrap, "detrap")];

/// Calls `tick` nine times; with `_start -> main` that is ten non-leaf calls.
pub fn calls10() -> ProgramBuilder {
    let mut body = vec!["    li a0, 0"];
    body.extend(std::iter::repeat_n("    call tick", 9));
    body.push("    addi a0, a0, -9");
    ProgramBuilder::new()
        .function(FunctionSkeleton::non_leaf("main", 16, &body))
        .function(FunctionSkeleton::non_leaf("tick", 16, &["    addi a0, a0, 1"]))
}

/// No function makes a call, so the instrumented build retires nothing extra.
pub fn leaf() -> ProgramBuilder {
    ProgramBuilder::new().function(FunctionSkeleton::leaf(
        "main",
        &[
            "    li a0, 21",
            "    slli a1, a0, 1",
            "    andi t0, a1, 1",
            "    bnez t0, odd",
            "    sub a0, a1, a0",
            "    addi a0, a0, -21",
            "odd:",
        ],
    ))
}

pub fn hello() -> ProgramBuilder {
    let mut body = Vec::new();
    for b in b"hi\n" {
        body.push(format!("    li a0, {b}"));
        body.push("    call __putc".into());
    }
    body.push("    li a0, 0".into());
    let refs: Vec<&str> = body.iter().map(String::as_str).collect();
    ProgramBuilder::new().function(FunctionSkeleton::non_leaf("main", 16, &refs))
}

/// Three checked indirect calls to an external function through a call table.
pub fn icall() -> ProgramBuilder {
    let mut body: Vec<String> = vec!["    li s0, 3".into(), "again:".into(), "    la t6, fptr".into(), "    lw t5, 0(t6)".into()];
    body.extend(icall_sequence("t5", "calltab", 2, "bad"));
    body.extend([
        "    addi s0, s0, -1".into(),
        "    bnez s0, again".into(),
        "    li a0, 0".into(),
        "    j out".into(),
        "bad:".into(),
        "    call __cfi_fail".into(),
        "out:".into(),
    ]);
    let refs: Vec<&str> = body.iter().map(String::as_str).collect();
    ProgramBuilder::new()
        .function(FunctionSkeleton::non_leaf("main", 16, &refs))
        .function(FunctionSkeleton::non_leaf("g", 16, &["    li a0, 46", "    call __putc"]).external())
        .function(FunctionSkeleton::leaf("h", &["    nop"]).external())
        .call_table("calltab", &["h", "g"])
        .data(&["fptr: .word calltab+4"])
}

/// Recursion `depth` levels deep; the shadow stack peaks at `depth + 2` entries.
pub fn recursion(depth: u32) -> ProgramBuilder {
    let d = format!("    li a0, {depth}");
    ProgramBuilder::new()
        .function(FunctionSkeleton::non_leaf("main", 16, &[d.as_str(), "    call rec", "    li a0, 0"]))
        .function(FunctionSkeleton::non_leaf(
            "rec",
            16,
            &["    beqz a0, rec_done", "    addi a0, a0, -1", "    call rec", "rec_done:"],
        ))
}

/// `victim` overwrites its saved return address with `evil`.
pub fn attack() -> ProgramBuilder {
    ProgramBuilder::new()
        .function(FunctionSkeleton::non_leaf("main", 16, &["    call victim", "    li a0, 0"]))
        .function(FunctionSkeleton::non_leaf("victim", 16, &["    la t0, evil", "    sw t0, 12(sp)"]))
        .function(FunctionSkeleton::non_leaf(
            "evil",
            16,
            &["    li a0, 88", "    call __putc", "    li a0, 66", "    call __exit"],
        ))
}

/// Untrusted code executing the trap return instruction.
pub fn mret() -> ProgramBuilder {
    ProgramBuilder::new()
        .function(FunctionSkeleton::non_leaf("main", 16, &["    call sneaky", "    li a0, 0"]))
        .function(FunctionSkeleton::leaf("sneaky", &["    mret"]))
}

/// A breakpoint skipped by an untrusted handler.
pub fn handler() -> ProgramBuilder {
    ProgramBuilder::new()
        .function(FunctionSkeleton::non_leaf("main", 16, &["    li a0, 5", "    ebreak", "    addi a0, a0, -5"]))
        .function(FunctionSkeleton::leaf("skip", &["    lw t0, 0(a0)", "    addi t0, t0, 4", "    sw t0, 0(a0)"]))
        .handler("skip")
}

/// A loop long enough to take a timer interrupt, counted by the handler.
pub fn spin() -> ProgramBuilder {
    ProgramBuilder::new()
        .function(FunctionSkeleton::non_leaf(
            "main",
            16,
            &[
                "    call __irq_enable",
                "    li a0, 0",
                "spin: addi a0, a0, 1",
                "    li t0, 300",
                "    blt a0, t0, spin",
                "    la t1, ticks",
                "    lw a0, 0(t1)",
                "    addi a0, a0, -1",
            ],
        ))
        .function(FunctionSkeleton::leaf(
            "count",
            &["    la t2, ticks", "    lw t3, 0(t2)", "    addi t3, t3, 1", "    sw t3, 0(t2)"],
        ))
        .handler("count")
        .data(&["ticks: .word 0"])
}

pub fn all() -> Vec<(&'static str, ProgramBuilder)> {
    vec![
        ("hello", hello()),
        ("calls10", calls10()),
        ("leaf", leaf()),
        ("icall", icall()),
        ("recursion", recursion(5)),
        ("attack", attack()),
        ("mret", mret()),
        ("handler", handler()),
        ("spin", spin()),
    ]
}

pub fn file_name(name: &str, mode: &str) -> String {
    format!("{name}.{mode}.img")
}

pub fn render(p: &ProgramBuilder, mode: Mode) -> String {
    emit_image(&p.build(mode, &default_map()).expect("fixture builds"))
}
