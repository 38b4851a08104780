//! Control-flow graph recovery.
//!
//! Discovery starts from the entry point, every function symbol, every
//! jumptable entry and the untrusted handler. Indirect jumps are resolved
//! from a window made of the jump's basic block plus, when the block can
//! only be entered by falling through from a block ending in a conditional
//! branch, that predecessor. Resolution is repeated until no new code
//! becomes reachable.

use std::collections::{BTreeMap, BTreeSet};

use crate::isa::{self, classify, Instr, Op, OpClass, Reg};
use crate::program::{Image, SymbolKind};

use super::symbolic::{fallthrough_bound, match_checked_call, match_switch, Bound, Regs, Val};
use super::whitelist::Whitelist;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    FallThrough,
    Branch,
    Call,
    Return,
    IndirectResolved,
    IndirectJumptable,
}

impl EdgeKind {
    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::FallThrough => "fall-through",
            EdgeKind::Branch => "branch",
            EdgeKind::Call => "call",
            EdgeKind::Return => "return",
            EdgeKind::IndirectResolved => "indirect-resolved",
            EdgeKind::IndirectJumptable => "indirect-jumptable",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub from: u32,
    pub to: u32,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub start: u32,
    pub instrs: Vec<(u32, Instr)>,
}

impl Block {
    pub fn end(&self) -> u32 {
        self.start + 4 * self.instrs.len() as u32
    }

    pub fn last(&self) -> (u32, Instr) {
        *self.instrs.last().expect("blocks are never empty")
    }
}

/// How an indirect jump or call was accounted for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Indirect {
    /// Constant destination (`auipc`/`lui` + `jalr`).
    Resolved(u32),
    /// Bounds-checked load from a data jumptable.
    Switch { table: u32, check: u32, targets: Vec<u32> },
    /// Bounds-checked offset into a code jumptable.
    CheckedCall { table: u32, check: u32, targets: Vec<u32> },
    Whitelisted(Vec<u32>),
    Unresolved(String),
}

impl Indirect {
    pub fn targets(&self) -> &[u32] {
        match self {
            Indirect::Resolved(t) => std::slice::from_ref(t),
            Indirect::Switch { targets, .. }
            | Indirect::CheckedCall { targets, .. }
            | Indirect::Whitelisted(targets) => targets,
            Indirect::Unresolved(_) => &[],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cfg {
    pub blocks: BTreeMap<u32, Block>,
    pub edges: BTreeSet<Edge>,
    pub roots: BTreeSet<u32>,
    /// Entry points reached by a call (direct or indirect).
    pub call_targets: BTreeSet<u32>,
    pub indirect: BTreeMap<u32, Indirect>,
    /// Indirect sites whose check or destination derives from a stack load.
    pub spilled: BTreeSet<u32>,
    /// Code-table entries that are not a jump to a function start, by site.
    pub bad_table_entries: BTreeMap<u32, Vec<u32>>,
    /// Undecodable words reached by discovery.
    pub decode_errors: BTreeSet<u32>,
    /// (source, destination) pairs whose destination is misaligned or not code.
    pub bad_targets: BTreeSet<(u32, u32)>,
}

impl Cfg {
    pub fn block_containing(&self, pc: u32) -> Option<&Block> {
        self.blocks
            .range(..=pc)
            .next_back()
            .map(|(_, b)| b)
            .filter(|b| pc < b.end())
    }

    pub fn instr_at(&self, pc: u32) -> Option<Instr> {
        let b = self.block_containing(pc)?;
        Some(b.instrs[((pc - b.start) / 4) as usize].1)
    }

    pub fn predecessors(&self, block: u32) -> Vec<Edge> {
        self.edges.iter().filter(|e| e.to == block).copied().collect()
    }

    pub fn successors(&self, block: u32) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.from == block)
    }

    /// Whether `block` ends in a call (so its non-fall-through edges leave
    /// the function).
    pub fn ends_in_call(&self, block: u32) -> bool {
        self.blocks
            .get(&block)
            .is_some_and(|b| classify(&b.last().1).is_call)
    }
}

fn is_terminator(i: &Instr) -> bool {
    matches!(i.class(), OpClass::Branch | OpClass::Jal | OpClass::Jalr) || i.op == Op::Mret
}

struct Builder<'a> {
    img: &'a Image,
    wl: &'a Whitelist,
    insts: BTreeMap<u32, Instr>,
    leaders: BTreeSet<u32>,
    sites: BTreeSet<u32>,
    cfg: Cfg,
}

impl<'a> Builder<'a> {
    fn target_ok(&mut self, site: u32, target: u32) -> bool {
        if target.is_multiple_of(4) && self.img.is_code(target) && self.img.read_word(target).is_some() {
            true
        } else {
            self.cfg.bad_targets.insert((site, target));
            false
        }
    }

    fn explore(&mut self, mut work: Vec<u32>) {
        while let Some(start) = work.pop() {
            self.leaders.insert(start);
            let mut a = start;
            loop {
                if self.insts.contains_key(&a) {
                    self.leaders.insert(a);
                    break;
                }
                let Some(word) = self.img.read_word(a).filter(|_| self.img.is_code(a)) else {
                    break;
                };
                let Ok(i) = isa::decode(word) else {
                    self.cfg.decode_errors.insert(a);
                    break;
                };
                self.insts.insert(a, i);
                let tags = classify(&i);
                let next = a.wrapping_add(4);
                match i.class() {
                    OpClass::Branch => {
                        let t = a.wrapping_add(i.imm as u32);
                        if self.target_ok(a, t) {
                            work.push(t);
                        }
                        self.leaders.insert(next);
                    }
                    OpClass::Jal => {
                        let t = a.wrapping_add(i.imm as u32);
                        if self.target_ok(a, t) {
                            work.push(t);
                            if i.rd != Reg::ZERO {
                                self.cfg.call_targets.insert(t);
                            }
                        }
                        if i.rd == Reg::ZERO {
                            break;
                        }
                        self.leaders.insert(next);
                    }
                    OpClass::Jalr => {
                        if tags.is_return {
                            break;
                        }
                        self.sites.insert(a);
                        if i.rd == Reg::ZERO {
                            break;
                        }
                        self.leaders.insert(next);
                    }
                    _ if i.op == Op::Mret => break,
                    _ => {}
                }
                a = next;
            }
        }
    }

    fn form_blocks(&mut self) {
        let mut blocks: BTreeMap<u32, Block> = BTreeMap::new();
        let mut current: Option<u32> = None;
        let mut prev: Option<(u32, Instr)> = None;
        for (&a, &i) in &self.insts {
            let contiguous = prev.is_some_and(|(p, pi)| p.wrapping_add(4) == a && !is_terminator(&pi));
            if !contiguous || self.leaders.contains(&a) || current.is_none() {
                current = Some(a);
                blocks.insert(a, Block { start: a, instrs: Vec::new() });
            }
            blocks.get_mut(&current.unwrap()).unwrap().instrs.push((a, i));
            prev = Some((a, i));
        }
        self.cfg.blocks = blocks;
    }

    fn static_edges(&self) -> BTreeSet<Edge> {
        let mut edges = BTreeSet::new();
        let has = |a: u32| self.cfg.blocks.contains_key(&a);
        for b in self.cfg.blocks.values() {
            let (pc, i) = b.last();
            let next = pc.wrapping_add(4);
            let mut add = |to: u32, kind| {
                if has(to) {
                    edges.insert(Edge { from: b.start, to, kind });
                }
            };
            match i.class() {
                OpClass::Branch => {
                    add(pc.wrapping_add(i.imm as u32), EdgeKind::Branch);
                    add(next, EdgeKind::FallThrough);
                }
                OpClass::Jal if i.rd == Reg::ZERO => add(pc.wrapping_add(i.imm as u32), EdgeKind::Branch),
                OpClass::Jal => {
                    add(pc.wrapping_add(i.imm as u32), EdgeKind::Call);
                    add(next, EdgeKind::FallThrough);
                }
                OpClass::Jalr => {
                    if i.rd != Reg::ZERO {
                        add(next, EdgeKind::FallThrough);
                    }
                }
                _ if i.op == Op::Mret => {}
                _ => add(next, EdgeKind::FallThrough),
            }
        }
        edges
    }

    /// Register state at `pc`, plus the bound established by the window's
    /// checking predecessor, if there is one.
    fn window(&self, pc: u32) -> (Regs, Option<Bound>) {
        let block = self.cfg.block_containing(pc).expect("site is discovered");
        let mut regs = Regs::default();
        let mut bound = None;
        let preds: Vec<&Edge> = self.cfg.edges.iter().filter(|e| e.to == block.start).collect();
        let entry = self.cfg.roots.contains(&block.start) || self.cfg.call_targets.contains(&block.start);
        if let [e] = preds.as_slice() {
            let pred = &self.cfg.blocks[&e.from];
            let (bpc, branch) = pred.last();
            if e.kind == EdgeKind::FallThrough && branch.class() == OpClass::Branch && !entry {
                let mut prev = None;
                for (k, (ipc, i)) in pred.instrs.iter().enumerate() {
                    if k + 1 == pred.instrs.len() {
                        break;
                    }
                    let before = regs.clone();
                    regs.step(*ipc, i);
                    prev = Some((before, *i));
                }
                let prev_ref = prev.as_ref().map(|(r, pi)| (r, pi));
                bound = fallthrough_bound(&regs, &branch, bpc, prev_ref);
            }
        }
        for (ipc, i) in &block.instrs {
            if *ipc == pc {
                break;
            }
            regs.step(*ipc, i);
        }
        (regs, bound)
    }

    fn resolve(&mut self, site: u32) -> (Indirect, bool) {
        if let Some(dests) = self.wl.destinations(site) {
            return (Indirect::Whitelisted(dests.to_vec()), false);
        }
        let i = self.cfg.instr_at(site).expect("site is discovered");
        let (regs, bound) = self.window(site);
        let target = match regs.get(i.rs1).as_const() {
            Some(c) => Val::Const(c.wrapping_add(i.imm as u32) & !1),
            None if i.imm == 0 => regs.get(i.rs1).clone(),
            None => {
                return (Indirect::Unresolved("jump offset on a computed base".into()), regs.get(i.rs1).has_stack_load());
            }
        };
        let spilled = target.has_stack_load()
            || bound
                .as_ref()
                .is_some_and(|b| b.value.has_stack_load() || b.bound.has_stack_load());
        if let Val::Const(c) = target {
            return (Indirect::Resolved(c), spilled);
        }
        let checked = |value: &Val| -> Result<(u32, u32), String> {
            let b = bound.as_ref().ok_or("no bounds check before the jump")?;
            if &b.value != value {
                return Err("bounds check does not cover the jump index".into());
            }
            let n = b.bound.as_const().ok_or("bounds check against a non-constant limit")?;
            Ok((n, b.pc))
        };
        // A fixed slot of a read-only table (constant-folded switch index).
        if let Val::Load(addr) = &target {
            if let Some(a) = addr.as_const() {
                let slot = self
                    .img
                    .jumptables
                    .iter()
                    .find(|jt| a >= jt.base && a < jt.end() && (a - jt.base) % 4 == 0 && !self.img.is_code(jt.base));
                if let Some(jt) = slot {
                    let t = self.img.read_word(a).unwrap_or(0);
                    return (Indirect::Switch { table: jt.base, check: site, targets: vec![t] }, spilled);
                }
            }
        }
        if let Some((table, index)) = match_switch(&target) {
            let result = (|| {
                let (n, check) = checked(index)?;
                let jt = self
                    .img
                    .jumptable_at(table)
                    .filter(|_| !self.img.is_code(table))
                    .ok_or_else(|| format!("{table:#010x} is not a data jumptable"))?;
                if n > jt.entry_count {
                    return Err(format!("bound {n} exceeds the {} table entries", jt.entry_count));
                }
                let targets = (0..n)
                    .map(|k| self.img.read_word(jt.entry_addr(k)).unwrap_or(0))
                    .collect();
                Ok(Indirect::Switch { table, check, targets })
            })();
            return (result.unwrap_or_else(Indirect::Unresolved), spilled);
        }
        if let Some((table, offset)) = match_checked_call(&target) {
            let result = (|| {
                let (n, check) = checked(offset)?;
                let jt = self
                    .img
                    .jumptable_at(table)
                    .filter(|_| self.img.is_code(table))
                    .ok_or_else(|| format!("{table:#010x} is not a code jumptable"))?;
                if n > jt.entry_count * 4 {
                    return Err(format!("bound {n} exceeds the {}-byte table", jt.entry_count * 4));
                }
                let targets = (0..n.div_ceil(4)).map(|k| jt.entry_addr(k)).collect();
                Ok(Indirect::CheckedCall { table, check, targets })
            })();
            return (result.unwrap_or_else(Indirect::Unresolved), spilled);
        }
        (Indirect::Unresolved("destination is not a recognised checked form".into()), spilled)
    }

    fn function_start(&self, addr: u32) -> bool {
        self.img
            .symbols
            .iter()
            .any(|s| s.address == addr && s.kind == SymbolKind::Function)
    }

    /// Code-table entries must be `j <function>`.
    fn check_table_entries(&self, targets: &[u32]) -> Vec<u32> {
        targets
            .iter()
            .copied()
            .filter(|&e| {
                let ok = self
                    .img
                    .read_word(e)
                    .and_then(|w| isa::decode(w).ok())
                    .is_some_and(|j| {
                        j.op == Op::Jal && j.rd == Reg::ZERO && self.function_start(e.wrapping_add(j.imm as u32))
                    });
                !ok
            })
            .collect()
    }
}

/// Recovers the CFG of `img`, treating whitelisted sites as resolved.
pub fn build_cfg_with(img: &Image, wl: &Whitelist) -> Cfg {
    let mut b = Builder {
        img,
        wl,
        insts: BTreeMap::new(),
        leaders: BTreeSet::new(),
        sites: BTreeSet::new(),
        cfg: Cfg::default(),
    };

    let mut roots = vec![img.entry];
    roots.extend(img.handler);
    roots.extend(
        img.symbols
            .iter()
            .filter(|s| s.kind == SymbolKind::Function && img.is_code(s.address))
            .map(|s| s.address),
    );
    for jt in &img.jumptables {
        for k in 0..jt.entry_count {
            let e = jt.entry_addr(k);
            if img.is_code(jt.base) {
                roots.push(e);
            } else if let Some(t) = img.read_word(e) {
                if b.target_ok(e, t) {
                    roots.push(t);
                }
            }
        }
    }
    roots.retain(|&r| {
        let ok = r % 4 == 0 && img.is_code(r);
        if !ok {
            b.cfg.bad_targets.insert((r, r));
        }
        ok
    });
    b.cfg.roots = roots.iter().copied().collect();

    let mut work = roots;
    loop {
        b.explore(std::mem::take(&mut work));
        b.form_blocks();
        b.cfg.edges = b.static_edges();
        let mut resolutions = BTreeMap::new();
        let mut spilled = BTreeSet::new();
        for &site in &b.sites.clone() {
            let (res, spill) = b.resolve(site);
            if spill {
                spilled.insert(site);
            }
            for &t in res.targets() {
                if b.target_ok(site, t) && !b.insts.contains_key(&t) {
                    work.push(t);
                }
                if b.insts.contains_key(&t) && !b.leaders.contains(&t) {
                    b.leaders.insert(t);
                    work.push(t);
                }
            }
            resolutions.insert(site, res);
        }
        b.cfg.indirect = resolutions;
        b.cfg.spilled = spilled;
        if work.is_empty() {
            break;
        }
    }

    // Indirect edges.
    let mut extra = Vec::new();
    let mut bad_entries = BTreeMap::new();
    for (&site, res) in &b.cfg.indirect {
        let from = b.cfg.block_containing(site).unwrap().start;
        let call = classify(&b.cfg.instr_at(site).unwrap()).is_call;
        let kind = match res {
            Indirect::Switch { .. } | Indirect::CheckedCall { .. } => EdgeKind::IndirectJumptable,
            _ => EdgeKind::IndirectResolved,
        };
        if let Indirect::CheckedCall { targets, .. } = res {
            let bad = b.check_table_entries(targets);
            if !bad.is_empty() {
                bad_entries.insert(site, bad);
            }
        }
        for &t in res.targets() {
            if b.cfg.blocks.contains_key(&t) {
                extra.push(Edge { from, to: t, kind });
                if call {
                    b.cfg.call_targets.insert(t);
                }
            }
        }
    }
    b.cfg.edges.extend(extra);
    b.cfg.bad_table_entries = bad_entries;
    add_return_edges(&mut b.cfg);
    b.cfg
}

/// Recovers the CFG of `img` with no whitelist.
pub fn build_cfg(img: &Image) -> Cfg {
    build_cfg_with(img, &Whitelist::default())
}

/// Blocks reachable from `entry` without following call edges.
pub fn intraprocedural(cfg: &Cfg, entry: u32) -> BTreeSet<u32> {
    let mut seen = BTreeSet::new();
    let mut work = vec![entry];
    while let Some(b) = work.pop() {
        if !cfg.blocks.contains_key(&b) || !seen.insert(b) {
            continue;
        }
        let call = cfg.ends_in_call(b);
        for e in cfg.successors(b) {
            let follow = match e.kind {
                EdgeKind::Return | EdgeKind::Call => false,
                EdgeKind::FallThrough => true,
                _ => !call,
            };
            if follow {
                work.push(e.to);
            }
        }
    }
    seen
}

fn add_return_edges(cfg: &mut Cfg) {
    // Return sites of calls into each entry.
    let mut sites: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for b in cfg.blocks.values() {
        let (pc, i) = b.last();
        if !classify(&i).is_call {
            continue;
        }
        let ret_site = pc.wrapping_add(4);
        for e in cfg.edges.iter().filter(|e| e.from == b.start && e.kind != EdgeKind::FallThrough) {
            sites.entry(e.to).or_default().insert(ret_site);
        }
    }
    let mut new = Vec::new();
    for (entry, ret_sites) in &sites {
        for blk in intraprocedural(cfg, *entry) {
            let b = &cfg.blocks[&blk];
            if classify(&b.last().1).is_return {
                for &s in ret_sites {
                    if cfg.blocks.contains_key(&s) {
                        new.push(Edge {
                            from: blk,
                            to: s,
                            kind: EdgeKind::Return,
                        });
                    }
                }
            }
        }
    }
    cfg.edges.extend(new);
}
