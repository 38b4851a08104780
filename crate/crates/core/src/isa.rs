//! RV32IM + Zicsr decoding, encoding and classification.
//!
//! Only 32-bit encodings are supported; the compressed extension is not, so
//! every instruction boundary is 4-byte aligned. Decoding is strict: any
//! encoding with non-zero reserved bits is rejected, which makes
//! `encode(decode(w)) == w` hold for every word that decodes.

use std::fmt;

use thiserror::Error;

/// An integer register index, always `< 32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Reg(u8);

impl Reg {
    pub const ZERO: Reg = Reg(0);
    pub const RA: Reg = Reg(1);
    pub const SP: Reg = Reg(2);
    pub const GP: Reg = Reg(3);
    pub const TP: Reg = Reg(4);
    pub const T0: Reg = Reg(5);
    pub const T1: Reg = Reg(6);
    pub const T2: Reg = Reg(7);
    pub const S0: Reg = Reg(8);
    pub const S1: Reg = Reg(9);
    pub const A0: Reg = Reg(10);
    pub const A1: Reg = Reg(11);
    pub const A7: Reg = Reg(17);
    /// Shadow stack pointer.
    pub const SSP: Reg = Reg(18);

    pub const fn new(index: u8) -> Option<Reg> {
        if index < 32 {
            Some(Reg(index))
        } else {
            None
        }
    }

    /// Register from the low five bits of `bits`.
    pub const fn from_bits(bits: u32) -> Reg {
        Reg((bits & 0x1f) as u8)
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }

    pub const fn abi_name(self) -> &'static str {
        ABI_NAMES[self.0 as usize]
    }

    /// Parses `x0`..`x31`, ABI names and `fp`.
    pub fn parse(name: &str) -> Option<Reg> {
        if let Some(num) = name.strip_prefix('x') {
            if let Ok(n) = num.parse::<u8>() {
                if !num.starts_with('+') && (num == "0" || !num.starts_with('0')) {
                    return Reg::new(n);
                }
            }
        }
        if name == "fp" {
            return Some(Reg::S0);
        }
        ABI_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| Reg(i as u8))
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abi_name())
    }
}

const ABI_NAMES: [&str; 32] = [
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2", "s0", "s1", "a0", "a1", "a2", "a3", "a4",
    "a5", "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11", "t3", "t4",
    "t5", "t6",
];

/// CSR addresses shared by the machine and the scanner.
pub mod csr {
    pub const MSTATUS: u16 = 0x300;
    pub const MTVEC: u16 = 0x305;
    pub const MSCRATCH: u16 = 0x340;
    pub const MEPC: u16 = 0x341;
    pub const MCAUSE: u16 = 0x342;
    pub const MTVAL: u16 = 0x343;
    pub const TSELECT: u16 = 0x7A0;
    pub const TDATA1: u16 = 0x7A1;
    pub const TDATA2: u16 = 0x7A2;
    /// Project-local: holds the mask for mask-relation triggers.
    pub const TDATA3: u16 = 0x7A3;
    pub const MCYCLE: u16 = 0xB00;
    pub const MINSTRET: u16 = 0xB02;

    pub const NAMES: &[(&str, u16)] = &[
        ("mstatus", MSTATUS),
        ("mtvec", MTVEC),
        ("mscratch", MSCRATCH),
        ("mepc", MEPC),
        ("mcause", MCAUSE),
        ("mtval", MTVAL),
        ("tselect", TSELECT),
        ("tdata1", TDATA1),
        ("tdata2", TDATA2),
        ("tdata3", TDATA3),
        ("mcycle", MCYCLE),
        ("minstret", MINSTRET),
    ];

    pub fn by_name(name: &str) -> Option<u16> {
        NAMES.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    pub fn name(addr: u16) -> Option<&'static str> {
        NAMES.iter().find(|(_, v)| *v == addr).map(|(n, _)| *n)
    }
}

/// Coarse opcode family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpClass {
    Lui,
    Auipc,
    Jal,
    Jalr,
    Branch,
    Load,
    Store,
    OpImm,
    Op,
    System,
    Csr,
    MulDiv,
    Fence,
}

/// Instruction encoding format, which determines the immediate layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    R,
    I,
    Shift,
    S,
    B,
    U,
    J,
    Csr,
    CsrImm,
    Fence,
    Fixed,
}

macro_rules! ops {
    ($($variant:ident => $mnemonic:literal, $class:ident, $format:ident;)*) => {
        /// Every supported operation.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum Op {
            $($variant,)*
        }

        impl Op {
            pub const ALL: &'static [Op] = &[$(Op::$variant,)*];

            pub const fn mnemonic(self) -> &'static str {
                match self {
                    $(Op::$variant => $mnemonic,)*
                }
            }

            pub const fn class(self) -> OpClass {
                match self {
                    $(Op::$variant => OpClass::$class,)*
                }
            }

            pub const fn format(self) -> Format {
                match self {
                    $(Op::$variant => Format::$format,)*
                }
            }

            pub fn from_mnemonic(m: &str) -> Option<Op> {
                match m {
                    $($mnemonic => Some(Op::$variant),)*
                    _ => None,
                }
            }
        }
    };
}

ops! {
    Lui => "lui", Lui, U;
    Auipc => "auipc", Auipc, U;
    Jal => "jal", Jal, J;
    Jalr => "jalr", Jalr, I;
    Beq => "beq", Branch, B;
    Bne => "bne", Branch, B;
    Blt => "blt", Branch, B;
    Bge => "bge", Branch, B;
    Bltu => "bltu", Branch, B;
    Bgeu => "bgeu", Branch, B;
    Lb => "lb", Load, I;
    Lh => "lh", Load, I;
    Lw => "lw", Load, I;
    Lbu => "lbu", Load, I;
    Lhu => "lhu", Load, I;
    Sb => "sb", Store, S;
    Sh => "sh", Store, S;
    Sw => "sw", Store, S;
    Addi => "addi", OpImm, I;
    Slti => "slti", OpImm, I;
    Sltiu => "sltiu", OpImm, I;
    Xori => "xori", OpImm, I;
    Ori => "ori", OpImm, I;
    Andi => "andi", OpImm, I;
    Slli => "slli", OpImm, Shift;
    Srli => "srli", OpImm, Shift;
    Srai => "srai", OpImm, Shift;
    Add => "add", Op, R;
    Sub => "sub", Op, R;
    Sll => "sll", Op, R;
    Slt => "slt", Op, R;
    Sltu => "sltu", Op, R;
    Xor => "xor", Op, R;
    Srl => "srl", Op, R;
    Sra => "sra", Op, R;
    Or => "or", Op, R;
    And => "and", Op, R;
    Mul => "mul", MulDiv, R;
    Mulh => "mulh", MulDiv, R;
    Mulhsu => "mulhsu", MulDiv, R;
    Mulhu => "mulhu", MulDiv, R;
    Div => "div", MulDiv, R;
    Divu => "divu", MulDiv, R;
    Rem => "rem", MulDiv, R;
    Remu => "remu", MulDiv, R;
    Fence => "fence", Fence, Fence;
    Ecall => "ecall", System, Fixed;
    Ebreak => "ebreak", System, Fixed;
    Mret => "mret", System, Fixed;
    Csrrw => "csrrw", Csr, Csr;
    Csrrs => "csrrs", Csr, Csr;
    Csrrc => "csrrc", Csr, Csr;
    Csrrwi => "csrrwi", Csr, CsrImm;
    Csrrsi => "csrrsi", Csr, CsrImm;
    Csrrci => "csrrci", Csr, CsrImm;
}

/// A decoded instruction.
///
/// Fields not used by the instruction's format are zero. For the immediate
/// CSR forms (`csrr?i`) the 5-bit unsigned immediate is carried in `rs1`.
/// For `fence`, `imm` holds `pred << 4 | succ`. U-type immediates are stored
/// already shifted (a multiple of 4096).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instr {
    pub op: Op,
    pub rd: Reg,
    pub rs1: Reg,
    pub rs2: Reg,
    pub imm: i32,
    pub csr: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("compressed or non-32-bit encoding {0:#010x}")]
    NotUncompressed(u32),
    #[error("illegal instruction {0:#010x}")]
    IllegalInstruction(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("{field} value {value} does not fit the {op:?} encoding")]
    UnencodableField {
        op: Op,
        field: &'static str,
        value: i64,
    },
}

impl Instr {
    fn base(op: Op) -> Instr {
        Instr {
            op,
            rd: Reg::ZERO,
            rs1: Reg::ZERO,
            rs2: Reg::ZERO,
            imm: 0,
            csr: 0,
        }
    }

    pub fn r(op: Op, rd: Reg, rs1: Reg, rs2: Reg) -> Instr {
        Instr {
            rd,
            rs1,
            rs2,
            ..Instr::base(op)
        }
    }

    /// I-type (including loads, `jalr` and immediate shifts).
    pub fn i(op: Op, rd: Reg, rs1: Reg, imm: i32) -> Instr {
        Instr {
            rd,
            rs1,
            imm,
            ..Instr::base(op)
        }
    }

    /// S-type stores: `rs2` is stored to `imm(rs1)`.
    pub fn s(op: Op, rs1: Reg, rs2: Reg, imm: i32) -> Instr {
        Instr {
            rs1,
            rs2,
            imm,
            ..Instr::base(op)
        }
    }

    pub fn b(op: Op, rs1: Reg, rs2: Reg, offset: i32) -> Instr {
        Instr::s(op, rs1, rs2, offset)
    }

    pub fn u(op: Op, rd: Reg, imm: i32) -> Instr {
        Instr {
            rd,
            imm,
            ..Instr::base(op)
        }
    }

    pub fn jal(rd: Reg, offset: i32) -> Instr {
        Instr::u(Op::Jal, rd, offset)
    }

    pub fn csr(op: Op, rd: Reg, csr: u16, rs1: Reg) -> Instr {
        Instr {
            rd,
            rs1,
            csr,
            ..Instr::base(op)
        }
    }

    pub fn system(op: Op) -> Instr {
        Instr::base(op)
    }

    pub fn fence(pred: u8, succ: u8) -> Instr {
        Instr {
            imm: (((pred & 0xf) as i32) << 4) | (succ & 0xf) as i32,
            ..Instr::base(Op::Fence)
        }
    }

    pub fn nop() -> Instr {
        Instr::i(Op::Addi, Reg::ZERO, Reg::ZERO, 0)
    }

    pub fn ret() -> Instr {
        Instr::i(Op::Jalr, Reg::ZERO, Reg::RA, 0)
    }

    pub fn class(&self) -> OpClass {
        self.op.class()
    }

    /// Destination register actually written (None for x0 or no destination).
    pub fn written_reg(&self) -> Option<Reg> {
        let writes = match self.op.format() {
            Format::R | Format::I | Format::Shift | Format::U | Format::J => true,
            Format::Csr | Format::CsrImm => true,
            Format::S | Format::B | Format::Fence | Format::Fixed => false,
        };
        (writes && self.rd != Reg::ZERO).then_some(self.rd)
    }
}

const OPC_LUI: u32 = 0b0110111;
const OPC_AUIPC: u32 = 0b0010111;
const OPC_JAL: u32 = 0b1101111;
const OPC_JALR: u32 = 0b1100111;
const OPC_BRANCH: u32 = 0b1100011;
const OPC_LOAD: u32 = 0b0000011;
const OPC_STORE: u32 = 0b0100011;
const OPC_OP_IMM: u32 = 0b0010011;
const OPC_OP: u32 = 0b0110011;
const OPC_MISC_MEM: u32 = 0b0001111;
const OPC_SYSTEM: u32 = 0b1110011;

const WORD_ECALL: u32 = 0x0000_0073;
const WORD_EBREAK: u32 = 0x0010_0073;
const WORD_MRET: u32 = 0x3020_0073;

fn sign_extend(value: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((value << shift) as i32) >> shift
}

/// Decodes one 32-bit instruction word.
pub fn decode(word: u32) -> Result<Instr, DecodeError> {
    if word & 0b11 != 0b11 || word & 0b11100 == 0b11100 {
        return Err(DecodeError::NotUncompressed(word));
    }
    let illegal = || DecodeError::IllegalInstruction(word);
    let opcode = word & 0x7f;
    let rd = Reg::from_bits(word >> 7);
    let funct3 = (word >> 12) & 0b111;
    let rs1 = Reg::from_bits(word >> 15);
    let rs2 = Reg::from_bits(word >> 20);
    let funct7 = word >> 25;
    let imm_i = sign_extend(word >> 20, 12);

    let instr = match opcode {
        OPC_LUI => Instr::u(Op::Lui, rd, (word & 0xffff_f000) as i32),
        OPC_AUIPC => Instr::u(Op::Auipc, rd, (word & 0xffff_f000) as i32),
        OPC_JAL => {
            let imm = ((word >> 31) & 1) << 20
                | ((word >> 21) & 0x3ff) << 1
                | ((word >> 20) & 1) << 11
                | ((word >> 12) & 0xff) << 12;
            Instr::jal(rd, sign_extend(imm, 21))
        }
        OPC_JALR if funct3 == 0 => Instr::i(Op::Jalr, rd, rs1, imm_i),
        OPC_BRANCH => {
            let op = match funct3 {
                0b000 => Op::Beq,
                0b001 => Op::Bne,
                0b100 => Op::Blt,
                0b101 => Op::Bge,
                0b110 => Op::Bltu,
                0b111 => Op::Bgeu,
                _ => return Err(illegal()),
            };
            let imm = ((word >> 31) & 1) << 12
                | ((word >> 25) & 0x3f) << 5
                | ((word >> 8) & 0xf) << 1
                | ((word >> 7) & 1) << 11;
            Instr::b(op, rs1, rs2, sign_extend(imm, 13))
        }
        OPC_LOAD => {
            let op = match funct3 {
                0b000 => Op::Lb,
                0b001 => Op::Lh,
                0b010 => Op::Lw,
                0b100 => Op::Lbu,
                0b101 => Op::Lhu,
                _ => return Err(illegal()),
            };
            Instr::i(op, rd, rs1, imm_i)
        }
        OPC_STORE => {
            let op = match funct3 {
                0b000 => Op::Sb,
                0b001 => Op::Sh,
                0b010 => Op::Sw,
                _ => return Err(illegal()),
            };
            let imm = (funct7 << 5) | ((word >> 7) & 0x1f);
            Instr::s(op, rs1, rs2, sign_extend(imm, 12))
        }
        OPC_OP_IMM => {
            let shamt = ((word >> 20) & 0x1f) as i32;
            match (funct3, funct7) {
                (0b000, _) => Instr::i(Op::Addi, rd, rs1, imm_i),
                (0b010, _) => Instr::i(Op::Slti, rd, rs1, imm_i),
                (0b011, _) => Instr::i(Op::Sltiu, rd, rs1, imm_i),
                (0b100, _) => Instr::i(Op::Xori, rd, rs1, imm_i),
                (0b110, _) => Instr::i(Op::Ori, rd, rs1, imm_i),
                (0b111, _) => Instr::i(Op::Andi, rd, rs1, imm_i),
                (0b001, 0) => Instr::i(Op::Slli, rd, rs1, shamt),
                (0b101, 0) => Instr::i(Op::Srli, rd, rs1, shamt),
                (0b101, 0b0100000) => Instr::i(Op::Srai, rd, rs1, shamt),
                _ => return Err(illegal()),
            }
        }
        OPC_OP => {
            let op = match (funct7, funct3) {
                (0, 0b000) => Op::Add,
                (0b0100000, 0b000) => Op::Sub,
                (0, 0b001) => Op::Sll,
                (0, 0b010) => Op::Slt,
                (0, 0b011) => Op::Sltu,
                (0, 0b100) => Op::Xor,
                (0, 0b101) => Op::Srl,
                (0b0100000, 0b101) => Op::Sra,
                (0, 0b110) => Op::Or,
                (0, 0b111) => Op::And,
                (1, 0b000) => Op::Mul,
                (1, 0b001) => Op::Mulh,
                (1, 0b010) => Op::Mulhsu,
                (1, 0b011) => Op::Mulhu,
                (1, 0b100) => Op::Div,
                (1, 0b101) => Op::Divu,
                (1, 0b110) => Op::Rem,
                (1, 0b111) => Op::Remu,
                _ => return Err(illegal()),
            };
            Instr::r(op, rd, rs1, rs2)
        }
        OPC_MISC_MEM => {
            // Only plain FENCE with fm=0 and zeroed rd/rs1.
            if word & 0xf00f_ff80 != 0 {
                return Err(illegal());
            }
            Instr::fence(((word >> 24) & 0xf) as u8, ((word >> 20) & 0xf) as u8)
        }
        OPC_SYSTEM => match funct3 {
            0b000 => match word {
                WORD_ECALL => Instr::system(Op::Ecall),
                WORD_EBREAK => Instr::system(Op::Ebreak),
                WORD_MRET => Instr::system(Op::Mret),
                _ => return Err(illegal()),
            },
            0b100 => return Err(illegal()),
            _ => {
                let op = match funct3 {
                    0b001 => Op::Csrrw,
                    0b010 => Op::Csrrs,
                    0b011 => Op::Csrrc,
                    0b101 => Op::Csrrwi,
                    0b110 => Op::Csrrsi,
                    _ => Op::Csrrci,
                };
                Instr::csr(op, rd, (word >> 20) as u16, rs1)
            }
        },
        _ => return Err(illegal()),
    };
    Ok(instr)
}

fn check_range(op: Op, field: &'static str, value: i32, lo: i32, hi: i32) -> Result<(), EncodeError> {
    if value < lo || value > hi {
        Err(EncodeError::UnencodableField {
            op,
            field,
            value: value as i64,
        })
    } else {
        Ok(())
    }
}

fn check_even(op: Op, value: i32) -> Result<(), EncodeError> {
    if value & 1 != 0 {
        Err(EncodeError::UnencodableField {
            op,
            field: "offset",
            value: value as i64,
        })
    } else {
        Ok(())
    }
}

fn funct3(op: Op) -> u32 {
    use Op::*;
    match op {
        Beq | Lb | Sb | Addi | Add | Sub | Mul | Jalr | Fence => 0b000,
        Bne | Lh | Sh | Slli | Sll | Mulh | Csrrw => 0b001,
        Lw | Sw | Slti | Slt | Mulhsu | Csrrs => 0b010,
        Sltiu | Sltu | Mulhu | Csrrc => 0b011,
        Blt | Lbu | Xori | Xor | Div => 0b100,
        Bge | Lhu | Srli | Srai | Srl | Sra | Divu | Csrrwi => 0b101,
        Bltu | Ori | Or | Rem | Csrrsi => 0b110,
        Bgeu | Andi | And | Remu | Csrrci => 0b111,
        Lui | Auipc | Jal | Ecall | Ebreak | Mret => 0,
    }
}

fn opcode(op: Op) -> u32 {
    match op.class() {
        OpClass::Lui => OPC_LUI,
        OpClass::Auipc => OPC_AUIPC,
        OpClass::Jal => OPC_JAL,
        OpClass::Jalr => OPC_JALR,
        OpClass::Branch => OPC_BRANCH,
        OpClass::Load => OPC_LOAD,
        OpClass::Store => OPC_STORE,
        OpClass::OpImm => OPC_OP_IMM,
        OpClass::Op | OpClass::MulDiv => OPC_OP,
        OpClass::Fence => OPC_MISC_MEM,
        OpClass::System | OpClass::Csr => OPC_SYSTEM,
    }
}

/// Encodes an instruction, checking every field against its format's range.
pub fn encode(instr: &Instr) -> Result<u32, EncodeError> {
    let op = instr.op;
    let rd = (instr.rd.index() as u32) << 7;
    let rs1 = (instr.rs1.index() as u32) << 15;
    let rs2 = (instr.rs2.index() as u32) << 20;
    let f3 = funct3(op) << 12;
    let base = opcode(op) | f3;
    let imm = instr.imm;
    let word = match op.format() {
        Format::R => {
            let f7 = match op {
                Op::Sub | Op::Sra => 0b0100000,
                _ if op.class() == OpClass::MulDiv => 1,
                _ => 0,
            };
            base | rd | rs1 | rs2 | f7 << 25
        }
        Format::I => {
            check_range(op, "imm", imm, -2048, 2047)?;
            base | rd | rs1 | ((imm as u32) & 0xfff) << 20
        }
        Format::Shift => {
            check_range(op, "shamt", imm, 0, 31)?;
            let f7 = if op == Op::Srai { 0b0100000 } else { 0 };
            base | rd | rs1 | (imm as u32) << 20 | f7 << 25
        }
        Format::S => {
            check_range(op, "imm", imm, -2048, 2047)?;
            let imm = imm as u32;
            base | rs1 | rs2 | (imm & 0x1f) << 7 | ((imm >> 5) & 0x7f) << 25
        }
        Format::B => {
            check_range(op, "offset", imm, -4096, 4094)?;
            check_even(op, imm)?;
            let imm = imm as u32;
            base | rs1
                | rs2
                | ((imm >> 11) & 1) << 7
                | ((imm >> 1) & 0xf) << 8
                | ((imm >> 5) & 0x3f) << 25
                | ((imm >> 12) & 1) << 31
        }
        Format::U => {
            if imm & 0xfff != 0 {
                return Err(EncodeError::UnencodableField {
                    op,
                    field: "imm",
                    value: imm as i64,
                });
            }
            base | rd | imm as u32
        }
        Format::J => {
            check_range(op, "offset", imm, -(1 << 20), (1 << 20) - 2)?;
            check_even(op, imm)?;
            let imm = imm as u32;
            base | rd
                | ((imm >> 12) & 0xff) << 12
                | ((imm >> 11) & 1) << 20
                | ((imm >> 1) & 0x3ff) << 21
                | ((imm >> 20) & 1) << 31
        }
        Format::Csr | Format::CsrImm => {
            if instr.csr > 0xfff {
                return Err(EncodeError::UnencodableField {
                    op,
                    field: "csr",
                    value: instr.csr as i64,
                });
            }
            base | rd | rs1 | (instr.csr as u32) << 20
        }
        Format::Fence => {
            check_range(op, "pred/succ", imm, 0, 0xff)?;
            base | (imm as u32) << 20
        }
        Format::Fixed => match op {
            Op::Ecall => WORD_ECALL,
            Op::Ebreak => WORD_EBREAK,
            _ => WORD_MRET,
        },
    };
    Ok(word)
}

/// Control-flow and memory classification of one instruction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassTags {
    pub is_call: bool,
    pub is_return: bool,
    pub is_indirect_jump: bool,
    pub is_conditional_branch: bool,
    pub is_csr_access: bool,
    pub csr_is_pure_read: bool,
    pub is_mret: bool,
    pub is_load: bool,
    pub is_store: bool,
}

pub fn classify(instr: &Instr) -> ClassTags {
    let mut tags = ClassTags::default();
    match instr.op {
        Op::Jal => tags.is_call = instr.rd == Reg::RA,
        Op::Jalr => {
            if instr.rd == Reg::RA {
                tags.is_call = true;
            } else if instr.rd == Reg::ZERO && instr.rs1 == Reg::RA && instr.imm == 0 {
                tags.is_return = true;
            } else {
                tags.is_indirect_jump = true;
            }
        }
        Op::Mret => tags.is_mret = true,
        _ => {}
    }
    match instr.class() {
        OpClass::Branch => tags.is_conditional_branch = true,
        OpClass::Load => tags.is_load = true,
        OpClass::Store => tags.is_store = true,
        OpClass::Csr => {
            tags.is_csr_access = true;
            // Set/clear with a hard-wired zero source leaves the CSR untouched.
            tags.csr_is_pure_read = matches!(
                instr.op,
                Op::Csrrs | Op::Csrrc | Op::Csrrsi | Op::Csrrci
            ) && instr.rs1 == Reg::ZERO;
        }
        _ => {}
    }
    tags
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.op.mnemonic();
        match self.op.format() {
            Format::R => write!(f, "{m} {}, {}, {}", self.rd, self.rs1, self.rs2),
            Format::I if matches!(self.class(), OpClass::Load | OpClass::Jalr) => {
                write!(f, "{m} {}, {}({})", self.rd, self.imm, self.rs1)
            }
            Format::I | Format::Shift => write!(f, "{m} {}, {}, {}", self.rd, self.rs1, self.imm),
            Format::S => write!(f, "{m} {}, {}({})", self.rs2, self.imm, self.rs1),
            Format::B => write!(f, "{m} {}, {}, {}", self.rs1, self.rs2, self.imm),
            Format::U => write!(f, "{m} {}, {:#x}", self.rd, (self.imm as u32) >> 12),
            Format::J => write!(f, "{m} {}, {}", self.rd, self.imm),
            Format::Csr | Format::CsrImm => {
                let csr = csr::name(self.csr)
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("{:#x}", self.csr));
                if self.op.format() == Format::Csr {
                    write!(f, "{m} {}, {csr}, {}", self.rd, self.rs1)
                } else {
                    write!(f, "{m} {}, {csr}, {}", self.rd, self.rs1.index())
                }
            }
            Format::Fence => write!(f, "{m} {:#x}, {:#x}", self.imm >> 4, self.imm & 0xf),
            Format::Fixed => f.write_str(m),
        }
    }
}
