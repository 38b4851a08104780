//! Deterministic RV32IM interpreter with the trigger unit on every step.
//!
//! The trusted runtime (trap dispatch, trap frames, setjmp/longjmp map and
//! program exit) is modelled at host level. Its architectural effects, such
//! as frame bytes on the shadow stack and register restores, are written into
//! simulated state.
//!
//! Trap frames are stored one word above the shadow stack pointer, so a trap
//! between a shadow push or pop and the matching `x18` update cannot clobber
//! the slot in flight.

use std::fmt;

use serde_json::json;
use thiserror::Error;

use crate::isa::{self, csr, Instr, Op, Reg};
use crate::layout::{derive_trigger_policy, MemoryMap, SectionKind};
use crate::program::instrument::{service, CONSOLE_OFFSET};
use crate::program::{CallEvent, Image};
use crate::triggers::{InstrContext, MemAccess, AccessKind, Relation, Target, TriggerConfig, TriggerCsr, TriggerFile, TriggerHit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Exception {
    InstrMisaligned,
    InstrAccessFault,
    IllegalInstruction,
    Breakpoint,
    LoadMisaligned,
    LoadAccessFault,
    StoreMisaligned,
    StoreAccessFault,
    Ecall,
}

impl Exception {
    pub fn code(self) -> u32 {
        match self {
            Exception::InstrMisaligned => 0,
            Exception::InstrAccessFault => 1,
            Exception::IllegalInstruction => 2,
            Exception::Breakpoint => 3,
            Exception::LoadMisaligned => 4,
            Exception::LoadAccessFault => 5,
            Exception::StoreMisaligned => 6,
            Exception::StoreAccessFault => 7,
            Exception::Ecall => 11,
        }
    }
}

pub const MCAUSE_TIMER: u32 = 0x8000_0007;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrapCause {
    /// A policy trigger fired.
    Trigger(TriggerHit),
    Exception(Exception),
    TimerInterrupt,
}

impl TrapCause {
    pub fn mcause(self) -> u32 {
        match self {
            TrapCause::Trigger(_) => Exception::Breakpoint.code(),
            TrapCause::Exception(e) => e.code(),
            TrapCause::TimerInterrupt => MCAUSE_TIMER,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Violation {
    WriteViolation,
    ShadowOverflow,
    TrustedFault,
    HandlerViolation,
    LongjmpViolation,
    MretViolation,
    /// Exception in untrusted code with no untrusted handler configured.
    UnhandledTrap,
}

impl Violation {
    pub fn name(self) -> &'static str {
        match self {
            Violation::WriteViolation => "WriteViolation",
            Violation::ShadowOverflow => "ShadowOverflow",
            Violation::TrustedFault => "TrustedFault",
            Violation::HandlerViolation => "HandlerViolation",
            Violation::LongjmpViolation => "LongjmpViolation",
            Violation::MretViolation => "MretViolation",
            Violation::UnhandledTrap => "UnhandledTrap",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Running,
    Halted { code: u32 },
    Terminated { reason: Violation },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Retired,
    Trapped { cause: TrapCause },
    Halted { code: u32 },
    Terminated { reason: Violation },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub retired: u64,
    pub traps: u64,
    pub policy_violations: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JmpEntry {
    pub buf_id: u32,
    pub pc: u32,
    pub sp: u32,
    pub x18: u32,
    /// s0, s1, s3..s11 (s2 is the shadow stack pointer, kept in `x18`).
    pub callee_saved: [u32; 11],
    pub valid: bool,
}

const CALLEE_SAVED: [usize; 11] = [8, 9, 19, 20, 21, 22, 23, 24, 25, 26, 27];

/// Register snapshot saved on trap entry.
///
/// Byte layout: `mepc` at offset 0, `x[i]` at offset `4 * i` for i in 1..32,
/// `mcause` at offset 128.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrapFrame {
    pub mepc: u32,
    pub regs: [u32; 32],
    pub mcause: u32,
}

impl TrapFrame {
    pub const SIZE: u32 = 132;
    pub const MCAUSE_OFFSET: u32 = 128;

    pub fn reg_offset(reg: Reg) -> u32 {
        4 * reg.index() as u32
    }

    pub fn to_bytes(&self) -> [u8; Self::SIZE as usize] {
        let mut out = [0u8; Self::SIZE as usize];
        out[0..4].copy_from_slice(&self.mepc.to_le_bytes());
        for i in 1..32 {
            out[4 * i..4 * i + 4].copy_from_slice(&self.regs[i].to_le_bytes());
        }
        out[128..132].copy_from_slice(&self.mcause.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> TrapFrame {
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let mut regs = [0u32; 32];
        for (i, r) in regs.iter_mut().enumerate().skip(1) {
            *r = word(4 * i);
        }
        TrapFrame {
            mepc: word(0),
            regs,
            mcause: word(128),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TrapKind {
    Exception,
    Interrupt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ActiveTrap {
    kind: TrapKind,
    frame_addr: u32,
    copy_addr: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub pc: u32,
    pub instr: u32,
    pub store_addr: Option<u32>,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pc={:#010x} instr={:#010x}", self.pc, self.instr)?;
        if let Some(a) = self.store_addr {
            write!(f, " store addr={a:#010x}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoadError {
    #[error("section {name} [{base:#010x}, {end:#010x}) lies outside the memory map")]
    SectionOutsideMap { name: String, base: u32, end: u32 },
    #[error("section {name} overlaps the MMIO region")]
    SectionInMmio { name: String },
    #[error("entry point {0:#010x} is not in trusted code")]
    EntryNotTrusted(u32),
    #[error("POLICY-TRUNCATED: policy has {requested} triggers but the trigger file has {available}")]
    PolicyTruncated { requested: usize, available: usize },
    #[error("trigger {index} was legalized to a different configuration")]
    PolicyRejected { index: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunResult {
    pub status: Status,
    pub steps: u64,
    pub step_limit: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct CsrFile {
    mstatus: u32,
    mtvec: u32,
    mscratch: u32,
    mepc: u32,
    mcause: u32,
    mtval: u32,
}

const MSTATUS_MIE: u32 = 1 << 3;
const MSTATUS_MPIE: u32 = 1 << 7;
const MSTATUS_MPP: u32 = 0b11 << 11;

#[derive(Clone, Debug)]
pub struct Machine {
    pc: u32,
    x: [u32; 32],
    csrs: CsrFile,
    mem: Vec<u8>,
    triggers: TriggerFile,
    map: MemoryMap,
    counters: Counters,
    status: Status,
    trusted_map: Vec<JmpEntry>,
    interrupt_pending: bool,
    schedule: Vec<u64>,
    trap: Option<ActiveTrap>,
    handler: Option<u32>,
    console: Vec<u8>,
    trace: Option<Vec<TraceEntry>>,
}

enum Exec {
    Next,
    Jump(u32),
    Trap(Exception, u32),
    Service,
    Violation(Violation),
}

impl Machine {
    /// Loads with the policy derived from `map`.
    pub fn load_default(img: &Image, map: &MemoryMap) -> Result<Machine, LoadError> {
        Machine::load(img, map, &derive_trigger_policy(map))
    }

    pub fn load(img: &Image, map: &MemoryMap, policy: &[TriggerConfig]) -> Result<Machine, LoadError> {
        Machine::load_with(img, map, policy, TriggerFile::default())
    }

    pub fn load_with(
        img: &Image,
        map: &MemoryMap,
        policy: &[TriggerConfig],
        mut triggers: TriggerFile,
    ) -> Result<Machine, LoadError> {
        let end = map.end();
        let mmio = map.region(SectionKind::Mmio);
        let mut mem = vec![0u8; end as usize];
        for s in &img.sections {
            let s_end = s.base as u64 + s.bytes.len() as u64;
            if s_end > end as u64 {
                return Err(LoadError::SectionOutsideMap {
                    name: s.name.clone(),
                    base: s.base,
                    end: s_end.min(u32::MAX as u64) as u32,
                });
            }
            if !s.bytes.is_empty() && s.base < mmio.limit {
                return Err(LoadError::SectionInMmio { name: s.name.clone() });
            }
            mem[s.base as usize..s_end as usize].copy_from_slice(&s.bytes);
        }
        let trusted = map.region(SectionKind::TrustedCode);
        if !trusted.contains(img.entry) {
            return Err(LoadError::EntryNotTrusted(img.entry));
        }
        for (i, cfg) in policy.iter().enumerate() {
            triggers.install(i, cfg);
        }
        if policy.len() > triggers.len() {
            return Err(LoadError::PolicyTruncated {
                requested: policy.len(),
                available: triggers.len(),
            });
        }
        for (i, cfg) in policy.iter().enumerate() {
            if triggers.config(i).as_ref() != Some(cfg) {
                return Err(LoadError::PolicyRejected { index: i });
            }
        }
        let mut x = [0u32; 32];
        x[Reg::SP.index()] = map.region(SectionKind::UntrustedStack).limit;
        x[Reg::SSP.index()] = map.region(SectionKind::ShadowStack).base;
        Ok(Machine {
            pc: img.entry,
            x,
            csrs: CsrFile::default(),
            mem,
            triggers,
            map: map.clone(),
            counters: Counters::default(),
            status: Status::Running,
            trusted_map: Vec::new(),
            interrupt_pending: false,
            schedule: Vec::new(),
            trap: None,
            handler: img.handler,
            console: Vec::new(),
            trace: None,
        })
    }

    pub fn pc(&self) -> u32 {
        self.pc
    }

    pub fn reg(&self, r: Reg) -> u32 {
        self.x[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, value: u32) {
        if r != Reg::ZERO {
            self.x[r.index()] = value;
        }
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn map(&self) -> &MemoryMap {
        &self.map
    }

    pub fn triggers(&self) -> &TriggerFile {
        &self.triggers
    }

    pub fn console(&self) -> &[u8] {
        &self.console
    }

    pub fn trusted_map(&self) -> &[JmpEntry] {
        &self.trusted_map
    }

    pub fn interrupt_pending(&self) -> bool {
        self.interrupt_pending
    }

    pub fn memory(&self) -> &[u8] {
        &self.mem
    }

    pub fn read_word(&self, addr: u32) -> Option<u32> {
        let a = addr as usize;
        self.mem
            .get(a..a + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    /// Host-side write that bypasses the trigger unit (test setup).
    pub fn poke_word(&mut self, addr: u32, value: u32) {
        let a = addr as usize;
        self.mem[a..a + 4].copy_from_slice(&value.to_le_bytes());
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceEntry] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Marks a timer interrupt pending.
    pub fn inject_interrupt(&mut self) {
        if self.status == Status::Running {
            self.interrupt_pending = true;
        }
    }

    /// Raises a timer interrupt once `retired` instructions have retired.
    pub fn schedule_interrupt(&mut self, retired: u64) {
        self.schedule.push(retired);
        self.schedule.sort_unstable();
    }

    pub fn mstatus(&self) -> u32 {
        self.csrs.mstatus | MSTATUS_MPP
    }

    /// Address the untrusted handler returns to.
    pub fn trap_return_sentinel(&self) -> u32 {
        self.map.region(SectionKind::TrustedCode).limit - 4
    }

    fn is_privileged(&self, pc: u32) -> bool {
        pc < self.map.privileged_top()
    }

    pub fn run(&mut self, max_steps: u64) -> RunResult {
        let mut steps = 0;
        while self.status == Status::Running && steps < max_steps {
            self.step();
            steps += 1;
        }
        RunResult {
            status: self.status,
            steps,
            step_limit: self.status == Status::Running,
        }
    }

    pub fn step(&mut self) -> StepOutcome {
        match self.status {
            Status::Halted { code } => return StepOutcome::Halted { code },
            Status::Terminated { reason } => return StepOutcome::Terminated { reason },
            Status::Running => {}
        }
        while self.schedule.first().is_some_and(|&at| at <= self.counters.retired) {
            self.schedule.remove(0);
            self.interrupt_pending = true;
        }
        if self.trap.is_some() && self.pc == self.trap_return_sentinel() {
            if let Err(reason) = self.trap_return() {
                return self.terminate(reason);
            }
        }
        if self.interrupt_pending && self.csrs.mstatus & MSTATUS_MIE != 0 && self.trap.is_none() {
            self.interrupt_pending = false;
            return self.enter_trap(TrapCause::TimerInterrupt, 0);
        }

        let pc = self.pc;
        if !pc.is_multiple_of(4) {
            return self.enter_trap(TrapCause::Exception(Exception::InstrMisaligned), pc);
        }
        let fetchable = self
            .map
            .region_of(pc)
            .is_some_and(|r| r.kind.is_code() && pc + 4 <= r.limit);
        let Some(word) = self.read_word(pc).filter(|_| fetchable) else {
            return self.enter_trap(TrapCause::Exception(Exception::InstrAccessFault), pc);
        };
        let instr = match isa::decode(word) {
            Ok(i) => i,
            Err(_) => return self.enter_trap(TrapCause::Exception(Exception::IllegalInstruction), word),
        };

        let mut ctx = InstrContext::exec(pc, word);
        ctx.mem = self.access_of(&instr);
        if let Some(hit) = self.triggers.evaluate(&ctx) {
            return self.enter_trap(TrapCause::Trigger(hit), 0);
        }

        let store_addr = ctx.mem.filter(|m| m.kind == AccessKind::Store).map(|m| m.address);
        match self.execute(&instr, pc) {
            Exec::Next => self.pc = pc.wrapping_add(4),
            Exec::Jump(t) => self.pc = t,
            Exec::Trap(e, tval) => return self.enter_trap(TrapCause::Exception(e), tval),
            Exec::Violation(v) => return self.terminate(v),
            Exec::Service => {
                if let Err(reason) = self.service(pc) {
                    return self.terminate(reason);
                }
            }
        }
        self.counters.retired += 1;
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceEntry {
                pc,
                instr: word,
                store_addr,
            });
        }
        match self.status {
            Status::Halted { code } => StepOutcome::Halted { code },
            Status::Terminated { reason } => StepOutcome::Terminated { reason },
            Status::Running => StepOutcome::Retired,
        }
    }

    fn terminate(&mut self, reason: Violation) -> StepOutcome {
        self.status = Status::Terminated { reason };
        StepOutcome::Terminated { reason }
    }

    fn effective_address(&self, instr: &Instr) -> u32 {
        self.x[instr.rs1.index()].wrapping_add(instr.imm as u32)
    }

    fn access_width(op: Op) -> u32 {
        match op {
            Op::Lb | Op::Lbu | Op::Sb => 1,
            Op::Lh | Op::Lhu | Op::Sh => 2,
            _ => 4,
        }
    }

    /// The memory access `instr` would perform, for trigger matching.
    fn access_of(&self, instr: &Instr) -> Option<MemAccess> {
        let width = Self::access_width(instr.op);
        let mask = if width == 4 { u32::MAX } else { (1 << (8 * width)) - 1 };
        match instr.class() {
            isa::OpClass::Store => Some(MemAccess {
                kind: AccessKind::Store,
                address: self.effective_address(instr),
                data: self.x[instr.rs2.index()] & mask,
            }),
            isa::OpClass::Load => {
                let address = self.effective_address(instr);
                Some(MemAccess {
                    kind: AccessKind::Load,
                    address,
                    data: self.peek(address, width).unwrap_or(0),
                })
            }
            _ => None,
        }
    }

    fn is_mmio(&self, addr: u32) -> bool {
        self.map.region(SectionKind::Mmio).contains(addr)
    }

    fn peek(&self, addr: u32, width: u32) -> Option<u32> {
        if !addr.is_multiple_of(width) || addr as u64 + width as u64 > self.mem.len() as u64 {
            return None;
        }
        if self.is_mmio(addr) {
            return Some(0);
        }
        let a = addr as usize;
        let mut v = 0u32;
        for i in (0..width as usize).rev() {
            v = v << 8 | self.mem[a + i] as u32;
        }
        Some(v)
    }

    fn load_value(&self, op: Op, addr: u32) -> Result<u32, Exception> {
        let width = Self::access_width(op);
        if !addr.is_multiple_of(width) {
            return Err(Exception::LoadMisaligned);
        }
        let raw = self.peek(addr, width).ok_or(Exception::LoadAccessFault)?;
        Ok(match op {
            Op::Lb => raw as u8 as i8 as i32 as u32,
            Op::Lh => raw as u16 as i16 as i32 as u32,
            _ => raw,
        })
    }

    fn store_value(&mut self, op: Op, addr: u32, value: u32, pc: u32) -> Result<(), Exception> {
        let width = Self::access_width(op);
        if !addr.is_multiple_of(width) {
            return Err(Exception::StoreMisaligned);
        }
        if addr as u64 + width as u64 > self.mem.len() as u64 {
            return Err(Exception::StoreAccessFault);
        }
        if self.is_mmio(addr) {
            let console = self.map.region(SectionKind::Mmio).base + CONSOLE_OFFSET;
            if addr == console && self.is_privileged(pc) {
                self.console.push(value as u8);
            }
            return Ok(());
        }
        let a = addr as usize;
        for i in 0..width as usize {
            self.mem[a + i] = (value >> (8 * i)) as u8;
        }
        Ok(())
    }

    fn csr_read(&self, addr: u16) -> Option<u32> {
        if let Some(t) = TriggerCsr::from_addr(addr) {
            return Some(self.triggers.read(t));
        }
        Some(match addr {
            csr::MSTATUS => self.mstatus(),
            csr::MTVEC => self.csrs.mtvec,
            csr::MSCRATCH => self.csrs.mscratch,
            csr::MEPC => self.csrs.mepc,
            csr::MCAUSE => self.csrs.mcause,
            csr::MTVAL => self.csrs.mtval,
            csr::MCYCLE | csr::MINSTRET => self.counters.retired as u32,
            _ => return None,
        })
    }

    fn csr_write(&mut self, addr: u16, value: u32) {
        if let Some(t) = TriggerCsr::from_addr(addr) {
            self.triggers.write(t, value);
            return;
        }
        match addr {
            csr::MSTATUS => self.csrs.mstatus = value & (MSTATUS_MIE | MSTATUS_MPIE),
            csr::MTVEC => self.csrs.mtvec = value & !3,
            csr::MSCRATCH => self.csrs.mscratch = value,
            csr::MEPC => self.csrs.mepc = value & !3,
            csr::MCAUSE => self.csrs.mcause = value,
            csr::MTVAL => self.csrs.mtval = value,
            _ => {}
        }
    }

    fn write(&mut self, rd: Reg, value: u32) {
        if rd != Reg::ZERO {
            self.x[rd.index()] = value;
        }
    }

    fn execute(&mut self, i: &Instr, pc: u32) -> Exec {
        let a = self.x[i.rs1.index()];
        let b = self.x[i.rs2.index()];
        let imm = i.imm as u32;
        let shamt = imm & 31;
        let value = match i.op {
            Op::Lui => imm,
            Op::Auipc => pc.wrapping_add(imm),
            Op::Jal => {
                let target = pc.wrapping_add(imm);
                self.write(i.rd, pc.wrapping_add(4));
                return Exec::Jump(target);
            }
            Op::Jalr => {
                let target = a.wrapping_add(imm) & !1;
                self.write(i.rd, pc.wrapping_add(4));
                return Exec::Jump(target);
            }
            Op::Beq | Op::Bne | Op::Blt | Op::Bge | Op::Bltu | Op::Bgeu => {
                let taken = match i.op {
                    Op::Beq => a == b,
                    Op::Bne => a != b,
                    Op::Blt => (a as i32) < (b as i32),
                    Op::Bge => (a as i32) >= (b as i32),
                    Op::Bltu => a < b,
                    _ => a >= b,
                };
                return if taken {
                    Exec::Jump(pc.wrapping_add(imm))
                } else {
                    Exec::Next
                };
            }
            Op::Lb | Op::Lh | Op::Lw | Op::Lbu | Op::Lhu => {
                let addr = self.effective_address(i);
                match self.load_value(i.op, addr) {
                    Ok(v) => v,
                    Err(e) => return Exec::Trap(e, addr),
                }
            }
            Op::Sb | Op::Sh | Op::Sw => {
                let addr = self.effective_address(i);
                return match self.store_value(i.op, addr, b, pc) {
                    Ok(()) => Exec::Next,
                    Err(e) => Exec::Trap(e, addr),
                };
            }
            Op::Addi => a.wrapping_add(imm),
            Op::Slti => ((a as i32) < i.imm) as u32,
            Op::Sltiu => (a < imm) as u32,
            Op::Xori => a ^ imm,
            Op::Ori => a | imm,
            Op::Andi => a & imm,
            Op::Slli => a << shamt,
            Op::Srli => a >> shamt,
            Op::Srai => ((a as i32) >> shamt) as u32,
            Op::Add => a.wrapping_add(b),
            Op::Sub => a.wrapping_sub(b),
            Op::Sll => a << (b & 31),
            Op::Slt => ((a as i32) < (b as i32)) as u32,
            Op::Sltu => (a < b) as u32,
            Op::Xor => a ^ b,
            Op::Srl => a >> (b & 31),
            Op::Sra => ((a as i32) >> (b & 31)) as u32,
            Op::Or => a | b,
            Op::And => a & b,
            Op::Mul => a.wrapping_mul(b),
            Op::Mulh => ((a as i32 as i64 * b as i32 as i64) >> 32) as u32,
            Op::Mulhsu => ((a as i32 as i64 * b as u64 as i64) >> 32) as u32,
            Op::Mulhu => ((a as u64 * b as u64) >> 32) as u32,
            Op::Div => match (a as i32, b as i32) {
                (_, 0) => u32::MAX,
                (i32::MIN, -1) => a,
                (x, y) => (x / y) as u32,
            },
            Op::Divu => a.checked_div(b).unwrap_or(u32::MAX),
            Op::Rem => match (a as i32, b as i32) {
                (_, 0) => a,
                (i32::MIN, -1) => 0,
                (x, y) => (x % y) as u32,
            },
            Op::Remu => a.checked_rem(b).unwrap_or(a),
            Op::Fence => return Exec::Next,
            Op::Ecall => {
                return if self.is_privileged(pc) {
                    Exec::Service
                } else {
                    Exec::Trap(Exception::Ecall, 0)
                }
            }
            Op::Ebreak => return Exec::Trap(Exception::Breakpoint, pc),
            Op::Mret => {
                if !self.is_privileged(pc) {
                    return Exec::Violation(Violation::MretViolation);
                }
                let mpie = self.csrs.mstatus & MSTATUS_MPIE != 0;
                self.csrs.mstatus = (self.csrs.mstatus & !MSTATUS_MIE) | if mpie { MSTATUS_MIE } else { 0 } | MSTATUS_MPIE;
                return Exec::Jump(self.csrs.mepc);
            }
            Op::Csrrw | Op::Csrrs | Op::Csrrc | Op::Csrrwi | Op::Csrrsi | Op::Csrrci => {
                let Some(old) = self.csr_read(i.csr) else {
                    return Exec::Trap(Exception::IllegalInstruction, isa::encode(i).unwrap_or(0));
                };
                let src = match i.op {
                    Op::Csrrwi | Op::Csrrsi | Op::Csrrci => i.rs1.index() as u32,
                    _ => a,
                };
                let new = match i.op {
                    Op::Csrrw | Op::Csrrwi => Some(src),
                    Op::Csrrs | Op::Csrrsi => (i.rs1 != Reg::ZERO).then_some(old | src),
                    _ => (i.rs1 != Reg::ZERO).then_some(old & !src),
                };
                if let Some(v) = new {
                    self.csr_write(i.csr, v);
                }
                old
            }
        };
        self.write(i.rd, value);
        Exec::Next
    }

    /// Trusted-runtime service requested by `ecall` from privileged code.
    fn service(&mut self, pc: u32) -> Result<(), Violation> {
        let a0 = self.reg(Reg::A0);
        self.pc = pc.wrapping_add(4);
        match self.reg(Reg::A7) {
            service::EXIT => self.status = Status::Halted { code: a0 },
            service::SETJMP => {
                self.setjmp_record(a0);
                self.set_reg(Reg::A0, 0);
            }
            service::LONGJMP => self.longjmp_apply(a0, self.reg(Reg::A1))?,
            service::JMP_RELEASE => {
                let top = self.reg(Reg::SSP);
                for e in &mut self.trusted_map {
                    if e.x18 >= top {
                        e.valid = false;
                    }
                }
            }
            _ => return Err(Violation::TrustedFault),
        }
        Ok(())
    }

    /// Records a setjmp snapshot; the resume point is the caller's `ra`.
    pub fn setjmp_record(&mut self, buf_id: u32) {
        let mut callee_saved = [0u32; 11];
        for (slot, &r) in callee_saved.iter_mut().zip(CALLEE_SAVED.iter()) {
            *slot = self.x[r];
        }
        let entry = JmpEntry {
            buf_id,
            pc: self.reg(Reg::RA),
            sp: self.reg(Reg::SP),
            x18: self.reg(Reg::SSP),
            callee_saved,
            valid: true,
        };
        self.trusted_map.retain(|e| e.buf_id != buf_id);
        self.trusted_map.push(entry);
    }

    /// Restores a snapshot, with `value` (or 1 when zero) as setjmp's result.
    pub fn longjmp_apply(&mut self, buf_id: u32, value: u32) -> Result<(), Violation> {
        let current = self.reg(Reg::SSP);
        let Some(entry) = self
            .trusted_map
            .iter()
            .find(|e| e.buf_id == buf_id && e.valid && e.x18 <= current)
            .copied()
        else {
            return Err(Violation::LongjmpViolation);
        };
        for (&r, &v) in CALLEE_SAVED.iter().zip(entry.callee_saved.iter()) {
            self.x[r] = v;
        }
        self.set_reg(Reg::SP, entry.sp);
        self.set_reg(Reg::SSP, entry.x18);
        self.set_reg(Reg::RA, entry.pc);
        self.set_reg(Reg::A0, if value == 0 { 1 } else { value });
        self.pc = entry.pc;
        for e in &mut self.trusted_map {
            if e.x18 > entry.x18 {
                e.valid = false;
            }
        }
        Ok(())
    }

    fn classify_hit(&self, hit: TriggerHit) -> Violation {
        let top = self.map.shadow_stack_top_entry();
        match self.triggers.config(hit.first_index) {
            Some(TriggerConfig {
                target: Target::StoreAddr,
                relation: Relation::Eq,
                compare,
                ..
            }) if hit.chain_length == 1 && compare == top => Violation::ShadowOverflow,
            _ => Violation::WriteViolation,
        }
    }

    fn snapshot(&self, mepc: u32, mcause: u32) -> TrapFrame {
        let mut regs = self.x;
        regs[0] = 0;
        TrapFrame { mepc, regs, mcause }
    }

    fn write_bytes(&mut self, addr: u32, bytes: &[u8]) {
        let a = addr as usize;
        self.mem[a..a + bytes.len()].copy_from_slice(bytes);
    }

    fn read_frame(&self, addr: u32) -> TrapFrame {
        let a = addr as usize;
        TrapFrame::from_bytes(&self.mem[a..a + TrapFrame::SIZE as usize])
    }

    /// Host-level trusted trap handler.
    fn enter_trap(&mut self, cause: TrapCause, tval: u32) -> StepOutcome {
        self.counters.traps += 1;
        let outcome = StepOutcome::Trapped { cause };
        let pc = self.pc;
        self.csrs.mepc = pc;
        self.csrs.mcause = cause.mcause();
        self.csrs.mtval = tval;

        if let TrapCause::Trigger(hit) = cause {
            self.counters.policy_violations += 1;
            self.status = Status::Terminated {
                reason: self.classify_hit(hit),
            };
            return outcome;
        }
        let kind = match cause {
            TrapCause::TimerInterrupt => TrapKind::Interrupt,
            _ => TrapKind::Exception,
        };
        if kind == TrapKind::Exception {
            let reason = if self.is_privileged(pc) {
                Some(Violation::TrustedFault)
            } else if self.trap.is_some() {
                Some(Violation::HandlerViolation)
            } else if self.handler.is_none() {
                Some(Violation::UnhandledTrap)
            } else {
                None
            };
            if let Some(reason) = reason {
                self.status = Status::Terminated { reason };
                return outcome;
            }
        }
        let Some(handler) = self.handler else {
            // Interrupt with nothing to deliver it to: acknowledged.
            return outcome;
        };

        let shadow = self.map.region(SectionKind::ShadowStack);
        let ssp = self.reg(Reg::SSP);
        let frame_addr = ssp.wrapping_add(4);
        if ssp < shadow.base || frame_addr as u64 + TrapFrame::SIZE as u64 > self.map.shadow_stack_top_entry() as u64 {
            self.status = Status::Terminated {
                reason: Violation::ShadowOverflow,
            };
            return outcome;
        }
        let frame = self.snapshot(pc, cause.mcause());
        self.write_bytes(frame_addr, &frame.to_bytes());

        let copy_addr = if kind == TrapKind::Exception {
            let stack = self.map.region(SectionKind::UntrustedStack);
            let sp = self.reg(Reg::SP);
            let copy = sp.wrapping_sub(TrapFrame::SIZE) & !15;
            if sp > stack.limit || copy < stack.base || copy > sp {
                self.status = Status::Terminated {
                    reason: Violation::WriteViolation,
                };
                return outcome;
            }
            self.write_bytes(copy, &frame.to_bytes());
            Some(copy)
        } else {
            None
        };

        self.trap = Some(ActiveTrap {
            kind,
            frame_addr,
            copy_addr,
        });
        let arg = copy_addr.unwrap_or(frame_addr);
        self.set_reg(Reg::A0, arg);
        if let Some(c) = copy_addr {
            self.set_reg(Reg::SP, c);
        }
        self.set_reg(Reg::RA, self.trap_return_sentinel());
        self.set_reg(Reg::SSP, frame_addr + TrapFrame::SIZE);
        self.pc = handler;
        outcome
    }

    /// The untrusted handler returned: restore from the frame(s).
    fn trap_return(&mut self) -> Result<(), Violation> {
        let trap = self.trap.take().expect("checked by caller");
        let shadow = self.read_frame(trap.frame_addr);
        let (regs, pc) = match (trap.kind, trap.copy_addr) {
            (TrapKind::Exception, Some(copy_addr)) => {
                let copy = self.read_frame(copy_addr);
                if copy.mepc != shadow.mepc && copy.mepc != shadow.mepc.wrapping_add(4) {
                    return Err(Violation::HandlerViolation);
                }
                let mut regs = copy.regs;
                regs[Reg::RA.index()] = shadow.regs[Reg::RA.index()];
                regs[Reg::SSP.index()] = shadow.regs[Reg::SSP.index()];
                (regs, copy.mepc)
            }
            _ => (shadow.regs, shadow.mepc),
        };
        self.x = regs;
        self.x[0] = 0;
        self.pc = pc;
        Ok(())
    }

    /// Final summary as JSON.
    pub fn summary_json(&self, step_limit: bool) -> serde_json::Value {
        let mut v = json!({
            "status": match self.status {
                _ if step_limit => "step-limit",
                Status::Running => "running",
                Status::Halted { .. } => "halted",
                Status::Terminated { .. } => "terminated",
            },
            "retired": self.counters.retired,
            "traps": self.counters.traps,
            "policy-violations": self.counters.policy_violations,
            "console": String::from_utf8_lossy(&self.console),
        });
        match self.status {
            Status::Halted { code } => v["code"] = json!(code),
            Status::Terminated { reason } => v["reason"] = json!(reason.name()),
            Status::Running => {}
        }
        v
    }
}

/// Calls in an execution trace, with each target taken from the next entry.
pub fn call_events(trace: &[TraceEntry]) -> Vec<CallEvent> {
    trace
        .windows(2)
        .filter_map(|w| {
            let i = isa::decode(w[0].instr).ok()?;
            isa::classify(&i).is_call.then_some(CallEvent {
                site: w[0].pc,
                target: w[1].pc,
                direct: i.op == Op::Jal,
            })
        })
        .collect()
}
