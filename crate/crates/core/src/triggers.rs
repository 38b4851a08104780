//! Debug-trigger unit.
//!
//! Triggers compare one component of the instruction being executed (its pc,
//! opcode, or memory access) against a stored value. Adjacent triggers can be
//! chained, in which case the chain fires only when every member matches the
//! *same* instruction. Each instruction is presented to the unit as a single
//! [`InstrContext`] carrying its fetch and memory-stage information together,
//! so mixed pc/address chains are evaluated atomically.
//!
//! `tdata1` uses a project-local packing:
//!
//! ```text
//! [31:28] type (2 = match control)   [27] enabled
//! [26:24] target                     [23:21] relation
//! [20]    chain                      all other bits read as zero
//! ```
//!
//! `tdata2` holds the compare value and `tdata3` the mask used by the mask
//! relation.

use serde::{Deserialize, Serialize};

use crate::isa::csr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING-KEBAB-CASE")]
pub enum Target {
    ExecPc,
    ExecOpcode,
    LoadAddr,
    StoreAddr,
    LoadData,
    StoreData,
}

impl Target {
    const ALL: [Target; 6] = [
        Target::ExecPc,
        Target::ExecOpcode,
        Target::LoadAddr,
        Target::StoreAddr,
        Target::LoadData,
        Target::StoreData,
    ];

    fn code(self) -> u32 {
        Target::ALL.iter().position(|t| *t == self).unwrap() as u32
    }

    fn from_code(code: u32) -> Option<Target> {
        Target::ALL.get(code as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING-KEBAB-CASE")]
pub enum Relation {
    Eq,
    Neq,
    Geq,
    Lt,
    Mask,
}

impl Relation {
    const ALL: [Relation; 5] = [
        Relation::Eq,
        Relation::Neq,
        Relation::Geq,
        Relation::Lt,
        Relation::Mask,
    ];

    fn code(self) -> u32 {
        Relation::ALL.iter().position(|r| *r == self).unwrap() as u32
    }

    fn from_code(code: u32) -> Option<Relation> {
        Relation::ALL.get(code as usize).copied()
    }

    /// Unsigned comparison of `value` against `compare`.
    pub fn holds(self, value: u32, compare: u32, mask: u32) -> bool {
        match self {
            Relation::Eq => value == compare,
            Relation::Neq => value != compare,
            Relation::Geq => value >= compare,
            Relation::Lt => value < compare,
            Relation::Mask => value & mask == compare & mask,
        }
    }
}

/// One trigger's configuration as seen through `tdata1..3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TriggerConfig {
    pub target: Target,
    pub relation: Relation,
    pub compare: u32,
    pub mask: u32,
    pub chain: bool,
    pub enabled: bool,
}

impl TriggerConfig {
    pub fn new(target: Target, relation: Relation, compare: u32) -> TriggerConfig {
        TriggerConfig {
            target,
            relation,
            compare,
            mask: 0,
            chain: false,
            enabled: true,
        }
    }

    pub fn chained(mut self) -> TriggerConfig {
        self.chain = true;
        self
    }

    pub fn with_mask(mut self, mask: u32) -> TriggerConfig {
        self.mask = mask;
        self
    }

    /// Packs the control word for `tdata1`.
    pub fn tdata1(&self) -> u32 {
        TDATA1_TYPE_MATCH << 28
            | (self.enabled as u32) << 27
            | self.target.code() << 24
            | self.relation.code() << 21
            | (self.chain as u32) << 20
    }

    /// Does this trigger's condition hold for `ctx` (ignoring `enabled`)?
    pub fn matches(&self, ctx: &InstrContext) -> bool {
        let value = match (self.target, ctx.mem) {
            (Target::ExecPc, _) => ctx.pc,
            (Target::ExecOpcode, _) => ctx.opcode,
            (Target::LoadAddr, Some(m)) if m.kind == AccessKind::Load => m.address,
            (Target::StoreAddr, Some(m)) if m.kind == AccessKind::Store => m.address,
            (Target::LoadData, Some(m)) if m.kind == AccessKind::Load => m.data,
            (Target::StoreData, Some(m)) if m.kind == AccessKind::Store => m.data,
            _ => return false,
        };
        self.relation.holds(value, self.compare, self.mask)
    }
}

const TDATA1_TYPE_MATCH: u32 = 2;
const TDATA1_CHAIN: u32 = 1 << 20;
const TDATA1_LEGAL_BITS: u32 = 0xffff_0000 & !(0xf << 16);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Load,
    Store,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MemAccess {
    pub kind: AccessKind,
    pub address: u32,
    pub data: u32,
}

/// Everything the trigger unit can observe about one instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InstrContext {
    pub pc: u32,
    pub opcode: u32,
    pub mem: Option<MemAccess>,
}

impl InstrContext {
    pub fn exec(pc: u32, opcode: u32) -> InstrContext {
        InstrContext {
            pc,
            opcode,
            mem: None,
        }
    }

    pub fn store(pc: u32, address: u32, data: u32) -> InstrContext {
        InstrContext {
            pc,
            opcode: 0,
            mem: Some(MemAccess {
                kind: AccessKind::Store,
                address,
                data,
            }),
        }
    }

    pub fn load(pc: u32, address: u32, data: u32) -> InstrContext {
        InstrContext {
            pc,
            opcode: 0,
            mem: Some(MemAccess {
                kind: AccessKind::Load,
                address,
                data,
            }),
        }
    }
}

/// A firing chain: its lowest trigger index and how many triggers it spans.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TriggerHit {
    pub first_index: usize,
    pub chain_length: usize,
}

/// The trigger CSRs reachable through `csrr*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriggerCsr {
    Tselect,
    Tdata1,
    Tdata2,
    Tdata3,
}

impl TriggerCsr {
    pub fn from_addr(addr: u16) -> Option<TriggerCsr> {
        match addr {
            csr::TSELECT => Some(TriggerCsr::Tselect),
            csr::TDATA1 => Some(TriggerCsr::Tdata1),
            csr::TDATA2 => Some(TriggerCsr::Tdata2),
            csr::TDATA3 => Some(TriggerCsr::Tdata3),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Slot {
    tdata1: u32,
    tdata2: u32,
    tdata3: u32,
}

pub const DEFAULT_TRIGGER_COUNT: usize = 4;
pub const DEFAULT_MAX_CHAIN: usize = 2;

/// The trigger register file of one hart.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriggerFile {
    slots: Vec<Slot>,
    tselect: usize,
    max_chain: usize,
}

impl Default for TriggerFile {
    fn default() -> Self {
        TriggerFile::new(DEFAULT_TRIGGER_COUNT, DEFAULT_MAX_CHAIN)
    }
}

impl TriggerFile {
    /// Reset state: every trigger disabled, `tselect` = 0.
    pub fn new(count: usize, max_chain: usize) -> TriggerFile {
        assert!(count > 0, "a trigger file needs at least one trigger");
        TriggerFile {
            slots: vec![Slot::default(); count],
            tselect: 0,
            max_chain: max_chain.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn max_chain(&self) -> usize {
        self.max_chain
    }

    pub fn tselect(&self) -> usize {
        self.tselect
    }

    /// WARL write. Never fails; the stored value is the legalized one.
    pub fn write(&mut self, csr: TriggerCsr, value: u32) {
        match csr {
            TriggerCsr::Tselect => {
                self.tselect = (value as usize).min(self.slots.len() - 1);
            }
            TriggerCsr::Tdata1 => {
                let legal = self.legalize_tdata1(self.tselect, value);
                self.slots[self.tselect].tdata1 = legal;
            }
            TriggerCsr::Tdata2 => self.slots[self.tselect].tdata2 = value,
            TriggerCsr::Tdata3 => self.slots[self.tselect].tdata3 = value,
        }
    }

    pub fn read(&self, csr: TriggerCsr) -> u32 {
        let slot = &self.slots[self.tselect];
        match csr {
            TriggerCsr::Tselect => self.tselect as u32,
            TriggerCsr::Tdata1 => slot.tdata1,
            TriggerCsr::Tdata2 => slot.tdata2,
            TriggerCsr::Tdata3 => slot.tdata3,
        }
    }

    /// The value a write of `value` to trigger `index`'s `tdata1` would store,
    /// given the rest of the file as it is now.
    pub fn legalize_tdata1(&self, index: usize, value: u32) -> u32 {
        let kind = value >> 28;
        let target = Target::from_code((value >> 24) & 0b111);
        let relation = Relation::from_code((value >> 21) & 0b111);
        if kind != TDATA1_TYPE_MATCH || target.is_none() || relation.is_none() {
            return 0;
        }
        let mut legal = value & TDATA1_LEGAL_BITS;
        if legal & TDATA1_CHAIN != 0 && !self.chain_allowed(index) {
            legal &= !TDATA1_CHAIN;
        }
        legal
    }

    /// Would setting the chain bit on `index` keep every run within bounds?
    fn chain_allowed(&self, index: usize) -> bool {
        if index + 1 >= self.slots.len() {
            return false;
        }
        let chained = |i: usize| self.slots[i].tdata1 & TDATA1_CHAIN != 0;
        let before = (0..index).rev().take_while(|&i| chained(i)).count();
        let after = (index + 1..self.slots.len())
            .take_while(|&i| chained(i))
            .count();
        // Run covers `before` triggers, this one, `after` chained ones, and
        // the terminating trigger.
        before + after + 2 <= self.max_chain
    }

    /// Decoded configuration of trigger `index`, or None when its `tdata1`
    /// is not a match-control trigger.
    pub fn config(&self, index: usize) -> Option<TriggerConfig> {
        let slot = self.slots.get(index)?;
        if slot.tdata1 >> 28 != TDATA1_TYPE_MATCH {
            return None;
        }
        Some(TriggerConfig {
            target: Target::from_code((slot.tdata1 >> 24) & 0b111)?,
            relation: Relation::from_code((slot.tdata1 >> 21) & 0b111)?,
            compare: slot.tdata2,
            mask: slot.tdata3,
            chain: slot.tdata1 & TDATA1_CHAIN != 0,
            enabled: slot.tdata1 & (1 << 27) != 0,
        })
    }

    /// Programs trigger `index` through the CSR interface (`tselect`, then
    /// `tdata2`/`tdata3`, then `tdata1` so the chain check sees final state).
    pub fn install(&mut self, index: usize, config: &TriggerConfig) {
        self.write(TriggerCsr::Tselect, index as u32);
        self.write(TriggerCsr::Tdata2, config.compare);
        self.write(TriggerCsr::Tdata3, config.mask);
        self.write(TriggerCsr::Tdata1, config.tdata1());
    }

    /// Finds the lowest-indexed chain run whose members all match `ctx`.
    pub fn evaluate(&self, ctx: &InstrContext) -> Option<TriggerHit> {
        let mut start = 0;
        while start < self.slots.len() {
            let mut end = start;
            while end + 1 < self.slots.len() && self.slots[end].tdata1 & TDATA1_CHAIN != 0 {
                end += 1;
            }
            let fires = (start..=end).all(|i| {
                self.config(i)
                    .is_some_and(|c| c.enabled && c.matches(ctx))
            });
            if fires {
                return Some(TriggerHit {
                    first_index: start,
                    chain_length: end - start + 1,
                });
            }
            start = end + 1;
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn protection_file() -> TriggerFile {
        let mut file = TriggerFile::default();
        file.install(
            0,
            &TriggerConfig::new(Target::ExecPc, Relation::Geq, 0x0001_F000).chained(),
        );
        file.install(1, &TriggerConfig::new(Target::StoreAddr, Relation::Lt, 0x0002_7000));
        file.install(2, &TriggerConfig::new(Target::StoreAddr, Relation::Eq, 0x0001_EFFC));
        file
    }

    #[test]
    fn reset_reads_zero() {
        let file = TriggerFile::default();
        assert_eq!(file.read(TriggerCsr::Tdata1), 0);
        assert_eq!(file.read(TriggerCsr::Tselect), 0);
        assert!(file.evaluate(&InstrContext::store(0, 0, 0)).is_none());
    }

    #[test]
    fn tselect_clamps() {
        let mut file = TriggerFile::default();
        file.write(TriggerCsr::Tselect, 7);
        assert_eq!(file.read(TriggerCsr::Tselect), 3);
    }

    #[test]
    fn chain_on_last_trigger_is_cleared() {
        let mut file = TriggerFile::default();
        file.write(TriggerCsr::Tselect, 3);
        let cfg = TriggerConfig::new(Target::StoreAddr, Relation::Eq, 4).chained();
        file.write(TriggerCsr::Tdata1, cfg.tdata1());
        assert_eq!(file.read(TriggerCsr::Tdata1) & TDATA1_CHAIN, 0);
        assert_eq!(file.read(TriggerCsr::Tdata1), cfg.tdata1() & !TDATA1_CHAIN);
    }

    #[test]
    fn chain_longer_than_max_is_cleared() {
        let mut file = TriggerFile::default();
        let cfg = TriggerConfig::new(Target::ExecPc, Relation::Eq, 0).chained();
        file.install(0, &cfg);
        file.install(1, &cfg);
        assert!(file.config(0).unwrap().chain);
        assert!(!file.config(1).unwrap().chain);
        // 2 starts a fresh run with 3
        file.install(2, &cfg);
        assert!(file.config(2).unwrap().chain);
    }

    #[test]
    fn unsupported_encodings_disable() {
        let mut file = TriggerFile::default();
        file.write(TriggerCsr::Tdata1, 0x2000_0000 | 7 << 24 | 1 << 27);
        assert_eq!(file.read(TriggerCsr::Tdata1), 0);
        file.write(TriggerCsr::Tdata1, 0x2000_0000 | 6 << 21 | 1 << 27);
        assert_eq!(file.read(TriggerCsr::Tdata1), 0);
        file.write(TriggerCsr::Tdata1, 0x6000_0000 | 1 << 27);
        assert_eq!(file.read(TriggerCsr::Tdata1), 0);
        // reserved low bits are dropped
        let cfg = TriggerConfig::new(Target::LoadAddr, Relation::Neq, 0);
        file.write(TriggerCsr::Tdata1, cfg.tdata1() | 0xffff);
        assert_eq!(file.read(TriggerCsr::Tdata1), cfg.tdata1());
    }

    #[test]
    fn write_twice_is_idempotent() {
        let mut file = TriggerFile::default();
        let v = TriggerConfig::new(Target::ExecPc, Relation::Geq, 0).chained().tdata1() | 0x3;
        file.write(TriggerCsr::Tdata1, v);
        let first = file.read(TriggerCsr::Tdata1);
        file.write(TriggerCsr::Tdata1, v);
        assert_eq!(file.read(TriggerCsr::Tdata1), first);
    }

    #[test]
    fn write_protection_quadrants() {
        let file = protection_file();
        let hit = file.evaluate(&InstrContext::store(0x0002_0000, 0x0001_C100, 0));
        assert_eq!(
            hit,
            Some(TriggerHit {
                first_index: 0,
                chain_length: 2
            })
        );
        assert_eq!(file.evaluate(&InstrContext::store(0x0001_0100, 0x0001_C100, 0)), None);
        assert_eq!(file.evaluate(&InstrContext::store(0x0002_0000, 0x0002_8000, 0)), None);
        assert_eq!(file.evaluate(&InstrContext::store(0x0001_0100, 0x0002_8000, 0)), None);
    }

    #[test]
    fn shadow_top_entry_hits_third_trigger() {
        let file = protection_file();
        for pc in [0x0001_0000, 0x0002_0000] {
            let hit = file.evaluate(&InstrContext::store(pc, 0x0001_EFFC, 0)).unwrap();
            // From untrusted code the write-protection chain is lower-indexed.
            let expected = if pc >= 0x0001_F000 { 0 } else { 2 };
            assert_eq!(hit.first_index, expected);
        }
    }

    #[test]
    fn loads_do_not_match_store_triggers() {
        let file = protection_file();
        assert_eq!(file.evaluate(&InstrContext::load(0x0002_0000, 0x0001_C100, 0)), None);
    }

    #[test]
    fn mask_match_on_opcode() {
        let mut file = TriggerFile::default();
        // any jalr regardless of registers
        let cfg = TriggerConfig::new(Target::ExecOpcode, Relation::Mask, 0x67).with_mask(0x707f);
        file.install(0, &cfg);
        assert!(file.evaluate(&InstrContext::exec(0, 0x0000_8067)).is_some());
        assert!(file.evaluate(&InstrContext::exec(0, 0x000f_80e7)).is_some());
        assert!(file.evaluate(&InstrContext::exec(0, 0x0000_0013)).is_none());
    }

    #[test]
    fn data_triggers() {
        let mut file = TriggerFile::default();
        file.install(
            0,
            &TriggerConfig::new(Target::StoreData, Relation::Eq, 0xdead).chained(),
        );
        file.install(1, &TriggerConfig::new(Target::StoreAddr, Relation::Eq, 0x100));
        assert!(file.evaluate(&InstrContext::store(0, 0x100, 0xdead)).is_some());
        assert!(file.evaluate(&InstrContext::store(0, 0x100, 0xbeef)).is_none());
        assert!(file.evaluate(&InstrContext::store(0, 0x104, 0xdead)).is_none());
        file.install(2, &TriggerConfig::new(Target::LoadData, Relation::Neq, 0));
        assert!(file.evaluate(&InstrContext::load(0, 0, 5)).is_some());
    }

    #[test]
    fn disabled_member_blocks_chain() {
        let mut file = TriggerFile::default();
        let mut pc = TriggerConfig::new(Target::ExecPc, Relation::Geq, 0).chained();
        file.install(0, &pc);
        file.install(1, &TriggerConfig::new(Target::StoreAddr, Relation::Lt, 0x100));
        assert!(file.evaluate(&InstrContext::store(0, 0, 0)).is_some());
        pc.enabled = false;
        file.install(0, &pc);
        assert!(file.evaluate(&InstrContext::store(0, 0, 0)).is_none());
    }
}
