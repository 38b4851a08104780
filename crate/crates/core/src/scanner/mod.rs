//! Static verifier for untrusted code.
//!
//! Rules:
//! - R1 RET-INTEGRITY: `ra` at every return is either untouched since entry
//!   or reloaded from the shadow stack by the canonical epilogue.
//! - R2 SSP-DISCIPLINE: `x18` is only written by the epilogue decrement.
//! - R3 CSR-POLICY: no writes to trigger or trap CSRs.
//! - R4 MRET: no `mret`.
//! - R5 INDIRECT: indirect jumps are constant, bounds-checked through a
//!   jumptable, or whitelisted.
//! - R6 ALIGN: static and table destinations are aligned code addresses.
//! - R7 SPILL: bounds checks and checked destinations are not reloaded from
//!   the stack.
//!
//! Code in trusted sections below the privileged boundary is exempt. Rules
//! are evaluated on the graph recovered without the whitelist; a whitelist
//! only silences R5 at the listed sites, so code reached solely through a
//! vetted jump is the vetter's responsibility and adding entries can only
//! remove findings.

pub mod cfg;
pub mod symbolic;
pub mod whitelist;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde_json::json;

use crate::isa::{classify, csr, Instr, Op, Reg};
use crate::layout::{hex, MemoryMap};
use crate::program::{Image, Trust};

pub use cfg::{build_cfg, build_cfg_with, Block, Cfg, Edge, EdgeKind, Indirect};
pub use whitelist::{parse_whitelist, Whitelist, WhitelistEntry, WhitelistError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    RetIntegrity,
    SspDiscipline,
    CsrPolicy,
    Mret,
    Indirect,
    Align,
    Spill,
    Decode,
    Gap,
}

impl Rule {
    pub const CHECKS: [Rule; 7] = [
        Rule::RetIntegrity,
        Rule::SspDiscipline,
        Rule::CsrPolicy,
        Rule::Mret,
        Rule::Indirect,
        Rule::Align,
        Rule::Spill,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Rule::RetIntegrity => "R1",
            Rule::SspDiscipline => "R2",
            Rule::CsrPolicy => "R3",
            Rule::Mret => "R4",
            Rule::Indirect => "R5",
            Rule::Align => "R6",
            Rule::Spill => "R7",
            Rule::Decode => "DECODE",
            Rule::Gap => "GAP",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Rule::RetIntegrity => "RET-INTEGRITY",
            Rule::SspDiscipline => "SSP-DISCIPLINE",
            Rule::CsrPolicy => "CSR-POLICY",
            Rule::Mret => "MRET",
            Rule::Indirect => "INDIRECT",
            Rule::Align => "ALIGN",
            Rule::Spill => "SPILL",
            Rule::Decode => "DECODE",
            Rule::Gap => "GAP",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Severity {
    Error,
    Warning,
}

impl Severity {
    pub fn name(self) -> &'static str {
        match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Finding {
    pub address: u32,
    pub rule: Rule,
    pub severity: Severity,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScanReport {
    pub findings: Vec<Finding>,
}

impl ScanReport {
    pub fn pass(&self) -> bool {
        self.errors().next().is_none()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn has_rule(&self, rule: Rule) -> bool {
        self.findings.iter().any(|f| f.rule == rule)
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "verdict": if self.pass() { "pass" } else { "fail" },
            "findings": self.findings.iter().map(|f| json!({
                "rule": f.rule.id(),
                "address": hex(f.address),
                "message": f.message,
                "severity": f.severity.name(),
            })).collect::<Vec<_>>(),
        })
    }

    /// One finding per line: `RULE addr message`.
    pub fn to_human(&self) -> String {
        self.findings
            .iter()
            .map(|f| format!("{} {} {}\n", f.rule.id(), hex(f.address), f.message))
            .collect()
    }
}

/// CSRs untrusted code may only read.
pub const CSR_DENYLIST: [u16; 8] = [
    csr::TSELECT,
    csr::TDATA1,
    csr::TDATA2,
    csr::TDATA3,
    csr::MTVEC,
    csr::MEPC,
    csr::MCAUSE,
    csr::MSTATUS,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RaState {
    Pristine,
    SavedToShadow,
    Clobbered,
}

impl RaState {
    fn meet(self, other: RaState) -> RaState {
        match (self, other) {
            (RaState::Clobbered, _) | (_, RaState::Clobbered) => RaState::Clobbered,
            (a, b) if a == b => a,
            _ => RaState::SavedToShadow,
        }
    }
}

fn is_ssp_decrement(i: &Instr) -> bool {
    i.op == Op::Addi && i.rd == Reg::SSP && i.rs1 == Reg::SSP && i.imm == -4
}

fn is_shadow_reload(i: &Instr) -> bool {
    i.op == Op::Lw && i.rd == Reg::RA && i.rs1 == Reg::SSP && i.imm == 0
}

struct Scanner<'a> {
    img: &'a Image,
    map: &'a MemoryMap,
    /// Recovered without the whitelist; every rule is evaluated on it.
    cfg: Cfg,
    /// Recovered with the whitelist; decides suppression and gaps.
    vetted: Cfg,
    findings: BTreeSet<Finding>,
}

impl<'a> Scanner<'a> {
    fn untrusted(&self, addr: u32) -> bool {
        !(self.img.trust_at(addr) == Some(Trust::Trusted) && addr < self.map.privileged_top())
    }

    fn error(&mut self, address: u32, rule: Rule, message: String) {
        self.findings.insert(Finding {
            address,
            rule,
            severity: Severity::Error,
            message,
        });
    }

    /// Intraprocedural successors used by the `ra` dataflow.
    fn flow_successors(&self, block: u32) -> Vec<u32> {
        let call = self.cfg.ends_in_call(block);
        self.cfg
            .successors(block)
            .filter(|e| match e.kind {
                EdgeKind::FallThrough => true,
                EdgeKind::Call | EdgeKind::Return => false,
                _ => !call,
            })
            .map(|e| e.to)
            .collect()
    }

    fn transfer(&mut self, block: u32, mut state: RaState, report: bool) -> RaState {
        let instrs = self.cfg.blocks[&block].instrs.clone();
        let mut prev: Option<Instr> = None;
        for (pc, i) in instrs {
            let tags = classify(&i);
            if tags.is_return && state == RaState::Clobbered && report {
                self.error(pc, Rule::RetIntegrity, "return with ra not restored from the shadow stack".into());
            }
            if tags.is_call {
                state = RaState::Clobbered;
            } else if i.written_reg() == Some(Reg::RA) {
                state = if is_shadow_reload(&i) && prev.as_ref().is_some_and(is_ssp_decrement) {
                    RaState::SavedToShadow
                } else {
                    RaState::Clobbered
                };
            }
            prev = Some(i);
        }
        state
    }

    fn check_return_integrity(&mut self) {
        let untrusted: Vec<u32> = self
            .cfg
            .blocks
            .keys()
            .copied()
            .filter(|&b| self.untrusted(b))
            .collect();
        let mut entry: BTreeMap<u32, RaState> = BTreeMap::new();
        for &b in &untrusted {
            let from_trusted = self
                .cfg
                .predecessors(b)
                .iter()
                .any(|e| e.kind != EdgeKind::Return && !self.untrusted(e.from));
            if self.cfg.roots.contains(&b) || self.cfg.call_targets.contains(&b) || from_trusted {
                entry.insert(b, RaState::Pristine);
            }
        }
        let mut work: Vec<u32> = entry.keys().copied().collect();
        while let Some(b) = work.pop() {
            let out = self.transfer(b, entry[&b], false);
            for s in self.flow_successors(b) {
                if !self.untrusted(s) {
                    continue;
                }
                let new = match entry.get(&s) {
                    Some(old) => old.meet(out),
                    None => out,
                };
                if entry.get(&s) != Some(&new) {
                    entry.insert(s, new);
                    work.push(s);
                }
            }
        }
        for (b, s) in entry {
            self.transfer(b, s, true);
        }
    }

    fn check_instructions(&mut self) {
        let instrs: Vec<(u32, Instr)> = self
            .cfg
            .blocks
            .values()
            .flat_map(|b| b.instrs.iter().copied())
            .filter(|(pc, _)| self.untrusted(*pc))
            .collect();
        for (pc, i) in instrs {
            let tags = classify(&i);
            if i.written_reg() == Some(Reg::SSP) {
                let next_ok = self.cfg.instr_at(pc.wrapping_add(4)).as_ref().is_some_and(is_shadow_reload);
                if !(is_ssp_decrement(&i) && next_ok) {
                    self.error(pc, Rule::SspDiscipline, format!("`{i}` writes the shadow stack pointer"));
                }
            }
            if tags.is_csr_access && !tags.csr_is_pure_read && CSR_DENYLIST.contains(&i.csr) {
                self.error(pc, Rule::CsrPolicy, format!("`{i}` modifies a protected CSR"));
            }
            if tags.is_mret {
                self.error(pc, Rule::Mret, "mret in untrusted code".into());
            }
        }
    }

    fn check_indirect(&mut self) {
        let sites: Vec<(u32, Indirect)> = self
            .cfg
            .indirect
            .iter()
            .filter(|(pc, _)| self.untrusted(**pc))
            .map(|(pc, r)| (*pc, r.clone()))
            .collect();
        for (pc, res) in sites {
            let whitelisted = matches!(self.vetted.indirect.get(&pc), Some(Indirect::Whitelisted(_)));
            if let (Indirect::Unresolved(why), false) = (res, whitelisted) {
                self.error(pc, Rule::Indirect, format!("unchecked indirect jump: {why}"));
            }
            if self.cfg.spilled.contains(&pc) {
                self.error(pc, Rule::Spill, "indirect jump check uses a value reloaded from the stack".into());
            }
        }
        let bad: Vec<(u32, Vec<u32>)> = self
            .cfg
            .bad_table_entries
            .iter()
            .filter(|(pc, _)| self.untrusted(**pc))
            .map(|(pc, v)| (*pc, v.clone()))
            .collect();
        for (pc, entries) in bad {
            for e in entries {
                self.error(pc, Rule::Indirect, format!("table entry {} is not a jump to a function start", hex(e)));
            }
        }
        let targets: Vec<(u32, u32)> = self
            .cfg
            .bad_targets
            .iter()
            .copied()
            .filter(|(src, _)| self.untrusted(*src))
            .collect();
        for (src, dst) in targets {
            self.error(src, Rule::Align, format!("destination {} is not an aligned code address", hex(dst)));
        }
        let decode: Vec<u32> = self
            .cfg
            .decode_errors
            .iter()
            .copied()
            .filter(|a| self.untrusted(*a))
            .collect();
        for a in decode {
            self.error(a, Rule::Decode, "reachable word does not decode".into());
        }
    }

    fn check_gaps(&mut self) {
        let mut gaps = Vec::new();
        for s in &self.img.sections {
            if !s.kind.is_code() || !self.untrusted(s.base) {
                continue;
            }
            let mut start: Option<u32> = None;
            let mut a = s.base;
            while a <= s.end() {
                let covered = a == s.end()
                    || self.vetted.block_containing(a).is_some()
                    || self.img.jumptables.iter().any(|t| a >= t.base && a < t.end());
                match (covered, start) {
                    (false, None) => start = Some(a),
                    (true, Some(g)) => {
                        let named = self.img.symbols.iter().any(|sym| sym.address >= g && sym.address < a);
                        if !named {
                            gaps.push((g, a));
                        }
                        start = None;
                    }
                    _ => {}
                }
                a += 4;
            }
        }
        for (g, end) in gaps {
            self.findings.insert(Finding {
                address: g,
                rule: Rule::Gap,
                severity: Severity::Warning,
                message: format!("{} unreachable bytes", end - g),
            });
        }
    }
}

/// Runs every rule over the untrusted code of `img`.
pub fn scan(img: &Image, map: &MemoryMap, wl: &Whitelist) -> ScanReport {
    let mut s = Scanner {
        img,
        map,
        cfg: build_cfg(img),
        vetted: build_cfg_with(img, wl),
        findings: BTreeSet::new(),
    };
    s.check_return_integrity();
    s.check_instructions();
    s.check_indirect();
    s.check_gaps();
    ScanReport {
        findings: s.findings.into_iter().collect(),
    }
}
