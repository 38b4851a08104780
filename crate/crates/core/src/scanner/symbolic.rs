//! Symbolic register values over a short straight-line window, used to
//! recognise the indirect-jump idioms the scanner accepts.

use crate::isa::{Instr, Op, OpClass, Reg};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Val {
    Const(u32),
    /// A register's value on entry to the window.
    Init(Reg),
    Load(Box<Val>),
    Add(Box<Val>, Box<Val>),
    Sub(Box<Val>, Box<Val>),
    And(Box<Val>, Box<Val>),
    Shl(Box<Val>, u32),
    /// Anything else, keyed by the defining instruction.
    Opaque(u32),
}

impl Val {
    fn add(a: Val, b: Val) -> Val {
        match (a, b) {
            (Val::Const(x), Val::Const(y)) => Val::Const(x.wrapping_add(y)),
            (v, Val::Const(0)) | (Val::Const(0), v) => v,
            (a, b) => Val::Add(Box::new(a), Box::new(b)),
        }
    }

    fn sub(a: Val, b: Val) -> Val {
        match (a, b) {
            (Val::Const(x), Val::Const(y)) => Val::Const(x.wrapping_sub(y)),
            (v, Val::Const(0)) => v,
            (a, b) => Val::Sub(Box::new(a), Box::new(b)),
        }
    }

    fn and(a: Val, b: Val) -> Val {
        match (a, b) {
            (Val::Const(x), Val::Const(y)) => Val::Const(x & y),
            (a, b) => Val::And(Box::new(a), Box::new(b)),
        }
    }

    fn shl(a: Val, s: u32) -> Val {
        match a {
            Val::Const(x) => Val::Const(x << s),
            v if s == 0 => v,
            v => Val::Shl(Box::new(v), s),
        }
    }

    pub fn as_const(&self) -> Option<u32> {
        match self {
            Val::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// Whether any load in this value reads through the stack pointer.
    pub fn has_stack_load(&self) -> bool {
        match self {
            Val::Load(addr) => addr.mentions(Reg::SP) || addr.has_stack_load(),
            Val::Add(a, b) | Val::Sub(a, b) | Val::And(a, b) => a.has_stack_load() || b.has_stack_load(),
            Val::Shl(a, _) => a.has_stack_load(),
            _ => false,
        }
    }

    fn mentions(&self, r: Reg) -> bool {
        match self {
            Val::Init(x) => *x == r,
            Val::Load(a) | Val::Shl(a, _) => a.mentions(r),
            Val::Add(a, b) | Val::Sub(a, b) | Val::And(a, b) => a.mentions(r) || b.mentions(r),
            _ => false,
        }
    }
}

/// Register file of symbolic values.
#[derive(Clone, Debug)]
pub struct Regs {
    vals: Vec<Val>,
}

impl Default for Regs {
    fn default() -> Self {
        Regs {
            vals: (0..32)
                .map(|i| if i == 0 { Val::Const(0) } else { Val::Init(Reg::from_bits(i)) })
                .collect(),
        }
    }
}

impl Regs {
    pub fn get(&self, r: Reg) -> &Val {
        &self.vals[r.index()]
    }

    fn set(&mut self, r: Reg, v: Val) {
        if r != Reg::ZERO {
            self.vals[r.index()] = v;
        }
    }

    /// Applies one instruction at `pc`.
    pub fn step(&mut self, pc: u32, i: &Instr) {
        let Some(rd) = i.written_reg() else { return };
        let a = self.get(i.rs1).clone();
        let b = self.get(i.rs2).clone();
        let imm = Val::Const(i.imm as u32);
        let v = match i.op {
            Op::Lui => imm,
            Op::Auipc => Val::Const(pc.wrapping_add(i.imm as u32)),
            Op::Addi => Val::add(a, imm),
            Op::Andi => Val::and(a, imm),
            Op::Slli => Val::shl(a, i.imm as u32 & 31),
            Op::Add => Val::add(a, b),
            Op::Sub => Val::sub(a, b),
            Op::And => Val::and(a, b),
            Op::Lw => Val::Load(Box::new(Val::add(a, imm))),
            _ if i.class() == OpClass::Load => Val::Opaque(pc),
            Op::Jal | Op::Jalr => Val::Const(pc.wrapping_add(4)),
            _ => Val::Opaque(pc),
        };
        self.set(rd, v);
    }
}

/// What a bounds-check branch guarantees on its fall-through path:
/// `value <u bound`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bound {
    pub value: Val,
    pub bound: Val,
    /// Address of the checking branch.
    pub pc: u32,
}

/// Facts established by the branch ending the predecessor block, evaluated
/// at that branch with register values `regs`. `prev` is the instruction
/// before the branch in the same block, if any.
pub fn fallthrough_bound(regs_before_branch: &Regs, branch: &Instr, pc: u32, prev: Option<(&Regs, &Instr)>) -> Option<Bound> {
    let a = regs_before_branch.get(branch.rs1).clone();
    let b = regs_before_branch.get(branch.rs2).clone();
    match branch.op {
        // bgeu a, b, out  => falls through when a <u b
        Op::Bgeu => Some(Bound { value: a, bound: b, pc }),
        // bltu b, a, out (bgtu a, b) => falls through when a <=u b
        Op::Bltu => match b.as_const() {
            Some(_) => None,
            None => a.as_const().map(|c| Bound {
                value: b,
                bound: Val::Const(c.wrapping_add(1)),
                pc,
            }),
        },
        // sltiu t, x, N ; beqz t, out  => falls through when x <u N
        Op::Beq if branch.rs2 == Reg::ZERO => {
            let (regs, p) = prev?;
            (p.op == Op::Sltiu && p.rd == branch.rs1 && p.rd != Reg::ZERO).then(|| Bound {
                value: regs.get(p.rs1).clone(),
                bound: Val::Const(p.imm as u32),
                pc,
            })
        }
        _ => None,
    }
}

/// `Load(table + (index << 2))` with a constant table base.
pub fn match_switch(target: &Val) -> Option<(u32, &Val)> {
    let Val::Load(addr) = target else { return None };
    let Val::Add(x, y) = addr.as_ref() else { return None };
    let (base, scaled) = match (x.as_ref(), y.as_ref()) {
        (Val::Const(c), other) | (other, Val::Const(c)) => (*c, other),
        _ => return None,
    };
    match scaled {
        Val::Shl(index, 2) => Some((base, index)),
        _ => None,
    }
}

/// `((p - J) & -4) + J` with a constant table base `J`; returns `(J, p - J)`.
pub fn match_checked_call(target: &Val) -> Option<(u32, &Val)> {
    let Val::Add(x, y) = target else { return None };
    let (base, masked) = match (x.as_ref(), y.as_ref()) {
        (Val::Const(c), other) | (other, Val::Const(c)) => (*c, other),
        _ => return None,
    };
    let Val::And(off, mask) = masked else { return None };
    if mask.as_const() != Some(!3) {
        return None;
    }
    match off.as_ref() {
        Val::Sub(_, j) if j.as_const() == Some(base) => Some((base, off)),
        _ => None,
    }
}
