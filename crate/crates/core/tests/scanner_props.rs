mod common;

use std::collections::BTreeSet;

use common::{default_map, random_program};
use detrap::isa::Reg;
use detrap::machine::{call_events, Machine, Status};
use detrap::program::{assemble, predicted_overhead, FunctionSkeleton, Mode, ProgramBuilder};
use detrap::scanner::{build_cfg, parse_whitelist, scan, EdgeKind, Indirect, Rule, Whitelist, WhitelistEntry};
use proptest::prelude::*;

fn run(img: &detrap::program::Image, trace: bool) -> Machine {
    let mut m = Machine::load_default(img, &default_map()).unwrap();
    if trace {
        m.enable_trace();
    }
    m.run(200_000);
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn instrumented_programs_scan_clean_and_run(seed in any::<u64>()) {
        let map = default_map();
        let p = random_program(seed);
        let det = p.build(Mode::Detrap, &map).unwrap();
        let base = p.build(Mode::Baseline, &map).unwrap();
        let report = scan(&det, &map, &Whitelist::default());
        prop_assert!(report.findings.is_empty(), "{}\n{}", report.to_human(), p.source(Mode::Detrap, &map).unwrap());

        let d = run(&det, false);
        prop_assert_eq!(d.status(), Status::Halted { code: 0 });
        prop_assert_eq!(d.counters().policy_violations, 0);
        prop_assert_eq!(d.reg(Reg::SSP), map.region(detrap::layout::SectionKind::ShadowStack).base);

        let b = run(&base, true);
        prop_assert_eq!(b.status(), Status::Halted { code: 0 });
        prop_assert_eq!(b.console(), d.console());
        let delta = d.counters().retired - b.counters().retired;
        prop_assert_eq!(delta, predicted_overhead(&base, &det, &call_events(b.trace())));
    }

    #[test]
    fn cfg_is_deterministic(seed in any::<u64>()) {
        let map = default_map();
        let img = random_program(seed).build(Mode::Detrap, &map).unwrap();
        let a = build_cfg(&img);
        let b = build_cfg(&img);
        prop_assert_eq!(a.blocks, b.blocks);
        prop_assert_eq!(a.edges, b.edges);
    }

    #[test]
    fn whitelisting_is_monotone(seed in any::<u64>(), extra in proptest::collection::vec((0u32..0x400, 0u32..0x400), 0..6)) {
        let map = default_map();
        let img = memset_like(seed % 3 == 0).build(Mode::Detrap, &map).unwrap();
        let before: BTreeSet<_> = scan(&img, &map, &Whitelist::default()).findings.into_iter().collect();
        let code = img.symbol("main").unwrap().address;
        let wl = Whitelist::new(
            extra
                .iter()
                .map(|&(pc, d)| WhitelistEntry {
                    function: "main".into(),
                    pc: code + 4 * pc,
                    destinations: vec![code + d],
                })
                .collect(),
        );
        let after: BTreeSet<_> = scan(&img, &map, &wl).findings.into_iter().collect();
        prop_assert!(after.is_subset(&before), "new: {:?}", after.difference(&before).collect::<Vec<_>>());
    }
}

/// A computed jump into an unrolled store sequence, as newlib's memset does.
fn memset_like(misaligned: bool) -> ProgramBuilder {
    let slot = if misaligned { 2 } else { 0 };
    let computed = format!("    addi t0, t0, {slot}");
    let memset = [
        "    andi a1, a1, 3",
        "    slli a1, a1, 2",
        "    auipc t0, 0",
        "    sub t0, t0, a1",
        computed.as_str(),
        "    jalr zero, 28(t0)",
        "    sb zero, 2(a0)",
        "    sb zero, 1(a0)",
        "    sb zero, 0(a0)",
    ];
    ProgramBuilder::new()
        .function(FunctionSkeleton::non_leaf("main", 16, &["    la a0, buf", "    li a1, 0", "    call memset", "    li a0, 0"]))
        .function(FunctionSkeleton::leaf("memset", &memset))
        .data(&["buf: .word 0"])
}

#[test]
fn memset_whitelist_suppresses_finding() {
    let map = default_map();
    let img = memset_like(false).build(Mode::Detrap, &map).unwrap();
    let report = scan(&img, &map, &Whitelist::default());
    let r5: Vec<_> = report.findings.iter().filter(|f| f.rule == Rule::Indirect).collect();
    assert_eq!(r5.len(), 1, "{}", report.to_human());
    let site = r5[0].address;
    let dests: Vec<String> = (0..4).map(|k| format!("{:#x}", site + 4 + 4 * k)).collect();
    let text = format!("# vetted\nallow memset {site:#x} -> {}\n", dests.join(","));
    let wl = parse_whitelist(&text, &img).unwrap();
    let clean = scan(&img, &map, &wl);
    assert!(clean.findings.is_empty(), "{}", clean.to_human());
    let cfg = detrap::scanner::build_cfg_with(&img, &wl);
    assert!(matches!(cfg.indirect[&site], Indirect::Whitelisted(_)));
    assert_eq!(cfg.edges.iter().filter(|e| e.from <= site && e.to > site && e.kind == EdgeKind::IndirectResolved).count(), 4);

    let mut m = Machine::load_default(&img, &map).unwrap();
    assert_eq!(m.run(10_000).status, Status::Halted { code: 0 });
}

#[test]
fn switch_fans_out_to_every_entry() {
    let map = default_map();
    let mut body: Vec<String> = detrap::program::switch_sequence("a0", "tab", 4, "out");
    for k in 0..4 {
        body.push(format!("c{k}: addi a1, a1, {k}"));
        body.push("    j out".into());
    }
    body.push("out:".into());
    let refs: Vec<&str> = body.iter().map(String::as_str).collect();
    let img = ProgramBuilder::new()
        .function(FunctionSkeleton::non_leaf("main", 16, &["    li a0, 2", "    call sw", "    li a0, 0"]))
        .function(FunctionSkeleton::leaf("sw", &refs))
        .switch_table("tab", &["c0", "c1", "c2", "c3"])
        .build(Mode::Detrap, &map)
        .unwrap();
    let tab = img.symbol("tab").unwrap().address;
    // Hand enumeration: the table holds the four case labels in order.
    let cases: Vec<u32> = (0..4).map(|k| img.read_word(tab + 4 * k).unwrap()).collect();
    let c0 = img.symbol("c0").map(|s| s.address);
    assert!(c0.is_none() || c0 == Some(cases[0]));
    assert_eq!(cases[1] - cases[0], 8);
    let cfg = build_cfg(&img);
    let fan: BTreeSet<u32> = cfg
        .edges
        .iter()
        .filter(|e| e.kind == EdgeKind::IndirectJumptable)
        .map(|e| e.to)
        .collect();
    assert_eq!(fan, cases.iter().copied().collect());
    assert!(scan(&img, &map, &Whitelist::default()).findings.is_empty());
}

#[test]
fn leaf_with_one_branch() {
    let map = default_map();
    let src = ".section .t kind=trusted-code trust=trusted base=auto\n_start: call f\n.section .u kind=untrusted-code base=auto\n.sym f 0 function\nf: beqz a0, done\naddi a0, a0, 1\ndone: ret\n.entry _start\n";
    let img = assemble(src, &map).unwrap();
    let cfg = build_cfg(&img);
    let f = img.symbol("f").unwrap().address;
    let local: Vec<_> = cfg.blocks.keys().filter(|b| **b >= f).collect();
    assert_eq!(local.len(), 3);
    assert!(cfg.edges.iter().any(|e| e.from == f && e.kind == EdgeKind::Branch && e.to == f + 8));
    assert!(cfg.edges.iter().any(|e| e.from == f && e.kind == EdgeKind::FallThrough));
}

#[test]
fn spilled_switch_index_is_flagged() {
    let map = default_map();
    let mut body = vec!["    sw a0, 0(sp)".to_string(), "    lw t4, 0(sp)".to_string()];
    body.extend(detrap::program::switch_sequence("t4", "tab", 2, "out"));
    body.extend(["c0: nop".into(), "c1: nop".into(), "out:".into()]);
    let refs: Vec<&str> = body.iter().map(String::as_str).collect();
    let img = ProgramBuilder::new()
        .function(FunctionSkeleton::non_leaf("main", 16, &refs))
        .switch_table("tab", &["c0", "c1"])
        .build(Mode::Detrap, &map)
        .unwrap();
    let report = scan(&img, &map, &Whitelist::default());
    assert!(report.has_rule(Rule::Spill), "{}", report.to_human());
}
