//! A two-pass assembler for the image text format.
//!
//! Besides the base mnemonics it accepts the usual pseudo-instructions
//! (`li`, `la`, `mv`, `j`, `call`, `tail`, `ret`, `beqz`, `csrr`, ...) and
//! immediate expressions built from numbers, symbols, `+`/`-` and the
//! relocation operators `%hi`, `%lo`, `%pcrel_hi` and `%pcrel_lo`.
//! `%pcrel_lo(sym)` is resolved against the address of the instruction
//! immediately before it, which is where its `auipc` sits.

use std::collections::HashMap;

use thiserror::Error;

use crate::isa::{self, csr, Instr, Op, Reg};
use crate::layout::{parse_number, MemoryMap, SectionKind};

use super::image::{Image, ImageSection, Jumptable, Symbol, SymbolKind, Trust};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("line {line}:{column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: {message}")]
    Range { line: usize, message: String },
    #[error("line {line}: unknown symbol `{name}`")]
    UnknownSymbol { line: usize, name: String },
}

impl AsmError {
    fn parse(line: usize, column: usize, message: impl Into<String>) -> AsmError {
        AsmError::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    pub fn line(&self) -> usize {
        match self {
            AsmError::Parse { line, .. }
            | AsmError::Range { line, .. }
            | AsmError::UnknownSymbol { line, .. } => *line,
        }
    }
}

/// Assembles `source`, placing `base=auto` sections at their map region.
pub fn assemble(source: &str, map: &MemoryMap) -> Result<Image, AsmError> {
    assemble_text(source, Some(map))
}

#[derive(Debug)]
enum Item {
    Instr {
        mnemonic: String,
        operands: Vec<String>,
        line: usize,
        column: usize,
        size: u32,
    },
    Word {
        expr: String,
        line: usize,
    },
    Space(u32),
}

impl Item {
    fn size(&self) -> u32 {
        match self {
            Item::Instr { size, .. } => *size,
            Item::Word { .. } => 4,
            Item::Space(n) => *n,
        }
    }
}

struct PendingSection {
    name: String,
    kind: SectionKind,
    trust: Trust,
    base: Option<u32>,
    line: usize,
    items: Vec<Item>,
    size: u32,
}

enum Deferred {
    Jumptable { base: String, count: u32, line: usize },
    Entry { target: String, line: usize },
    Handler { target: String, line: usize },
}

pub fn assemble_text(source: &str, map: Option<&MemoryMap>) -> Result<Image, AsmError> {
    let mut sections: Vec<PendingSection> = Vec::new();
    // name -> (section index, offset, declared kind)
    let mut names: HashMap<String, (usize, u32, Option<SymbolKind>)> = HashMap::new();
    let mut symbol_order: Vec<String> = Vec::new();
    let mut deferred = Vec::new();

    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let code = raw.split('#').next().unwrap();
        let mut rest = code.trim_start();
        let mut column = code.len() - rest.len() + 1;
        rest = rest.trim_end();
        if rest.is_empty() {
            continue;
        }

        // Leading labels.
        while let Some(pos) = rest.find(':') {
            let label = rest[..pos].trim();
            if label.is_empty() || !is_ident(label) || rest[..pos].contains(char::is_whitespace) {
                break;
            }
            let Some(cur) = sections.len().checked_sub(1) else {
                return Err(AsmError::parse(line_no, column, "label outside any section"));
            };
            let offset = sections[cur].size;
            match names.get(label) {
                // A `.sym` already declared this exact location.
                Some(&(s, o, _)) if s == cur && o == offset => {}
                Some(_) => {
                    return Err(AsmError::parse(line_no, column, format!("duplicate symbol `{label}`")));
                }
                None => {
                    names.insert(label.to_string(), (cur, offset, None));
                }
            }
            let after = &rest[pos + 1..];
            let trimmed = after.trim_start();
            column += pos + 1 + (after.len() - trimmed.len());
            rest = trimmed;
        }
        if rest.is_empty() {
            continue;
        }

        let (head, tail) = match rest.find(char::is_whitespace) {
            Some(p) => (&rest[..p], rest[p..].trim()),
            None => (rest, ""),
        };
        let perr = |msg: String| AsmError::parse(line_no, column, msg);

        if let Some(directive) = head.strip_prefix('.').filter(|_| head.len() > 1) {
            let args: Vec<&str> = tail.split_whitespace().collect();
            match directive {
                "section" => {
                    let name = args.first().ok_or_else(|| perr("missing section name".into()))?;
                    let mut kind = None;
                    let mut trust = None;
                    let mut base = None;
                    let mut auto = false;
                    for attr in &args[1..] {
                        let (k, v) = attr
                            .split_once('=')
                            .ok_or_else(|| perr(format!("bad section attribute `{attr}`")))?;
                        match k {
                            "kind" => kind = Some(v.parse::<SectionKind>().map_err(perr)?),
                            "trust" => trust = Some(v.parse::<Trust>().map_err(perr)?),
                            "base" if v == "auto" => auto = true,
                            "base" => base = Some(parse_number(v).map_err(perr)?),
                            _ => return Err(perr(format!("unknown section attribute `{k}`"))),
                        }
                    }
                    let kind = kind.ok_or_else(|| perr("section needs kind=".into()))?;
                    let trust = trust.unwrap_or(if kind.is_trusted() {
                        Trust::Trusted
                    } else {
                        Trust::Untrusted
                    });
                    if base.is_none() && !auto {
                        return Err(perr("section needs base=".into()));
                    }
                    if base.is_none() && map.is_none() {
                        return Err(perr("base=auto needs a memory map".into()));
                    }
                    sections.push(PendingSection {
                        name: name.to_string(),
                        kind,
                        trust,
                        base,
                        line: line_no,
                        items: Vec::new(),
                        size: 0,
                    });
                }
                "sym" => {
                    let [name, offset, kind] = args.as_slice() else {
                        return Err(perr("expected `.sym <name> <offset> <kind>`".into()));
                    };
                    let cur = sections
                        .len()
                        .checked_sub(1)
                        .ok_or_else(|| perr(".sym outside any section".into()))?;
                    let offset = if *offset == "." {
                        sections[cur].size
                    } else {
                        parse_number(offset).map_err(perr)?
                    };
                    let kind: SymbolKind = kind.parse().map_err(perr)?;
                    if !is_ident(name) {
                        return Err(perr(format!("bad symbol name `{name}`")));
                    }
                    match names.get(*name) {
                        Some(&(s, o, None)) if s == cur && o == offset => {}
                        Some(_) => return Err(perr(format!("duplicate symbol `{name}`"))),
                        None => {}
                    }
                    names.insert(name.to_string(), (cur, offset, Some(kind)));
                    symbol_order.push(name.to_string());
                }
                "jumptable" => {
                    let [base, count] = args.as_slice() else {
                        return Err(perr("expected `.jumptable <base> <count>`".into()));
                    };
                    deferred.push(Deferred::Jumptable {
                        base: base.to_string(),
                        count: parse_number(count).map_err(perr)?,
                        line: line_no,
                    });
                }
                "entry" | "handler" => {
                    let [target] = args.as_slice() else {
                        return Err(perr(format!("expected `.{directive} <symbol>`")));
                    };
                    let target = target.to_string();
                    deferred.push(if directive == "entry" {
                        Deferred::Entry { target, line: line_no }
                    } else {
                        Deferred::Handler { target, line: line_no }
                    });
                }
                "word" | "space" => {
                    let cur = sections
                        .len()
                        .checked_sub(1)
                        .ok_or_else(|| perr(format!(".{directive} outside any section")))?;
                    let item = if directive == "word" {
                        if tail.is_empty() {
                            return Err(perr(".word needs a value".into()));
                        }
                        Item::Word {
                            expr: tail.to_string(),
                            line: line_no,
                        }
                    } else {
                        let n = parse_number(tail).map_err(perr)?;
                        if n % 4 != 0 {
                            return Err(perr(".space must be a multiple of 4".into()));
                        }
                        Item::Space(n)
                    };
                    sections[cur].size += item.size();
                    sections[cur].items.push(item);
                }
                other => return Err(perr(format!("unknown directive `.{other}`"))),
            }
            continue;
        }

        let cur = sections
            .len()
            .checked_sub(1)
            .ok_or_else(|| perr("instruction outside any section".into()))?;
        let mnemonic = head.to_ascii_lowercase();
        let operands = split_operands(tail);
        let size = 4 * expansion_len(&mnemonic, &operands).ok_or_else(|| perr(format!("unknown mnemonic `{head}`")))?;
        sections[cur].size += size;
        sections[cur].items.push(Item::Instr {
            mnemonic,
            operands,
            line: line_no,
            column,
            size,
        });
    }

    // Place sections.
    let mut auto_cursor: HashMap<SectionKind, u32> = HashMap::new();
    let mut bases = Vec::with_capacity(sections.len());
    for s in &sections {
        let base = match s.base {
            Some(b) => b,
            None => {
                let map = map.expect("checked while parsing");
                let region = map
                    .try_region(s.kind)
                    .ok_or_else(|| AsmError::parse(s.line, 1, format!("map has no {} region", s.kind)))?;
                let cursor = auto_cursor.entry(s.kind).or_insert(region.base);
                let b = *cursor;
                *cursor += s.size;
                b
            }
        };
        if s.size > 0 && (base as u64 + s.size as u64) > 1 << 32 {
            return Err(AsmError::Range {
                line: s.line,
                message: format!("section {} does not fit the address space", s.name),
            });
        }
        bases.push(base);
    }

    let addresses: HashMap<String, u32> = names
        .iter()
        .map(|(n, (sec, off, _))| (n.clone(), bases[*sec].wrapping_add(*off)))
        .collect();

    let mut image = Image::default();
    for (si, s) in sections.iter().enumerate() {
        let base = bases[si];
        let mut bytes = Vec::with_capacity(s.size as usize);
        for item in &s.items {
            let pc = base + bytes.len() as u32;
            match item {
                Item::Instr {
                    mnemonic,
                    operands,
                    line,
                    column,
                    size,
                } => {
                    let ctx = ExprCtx {
                        symbols: &addresses,
                        pc,
                        line: *line,
                        column: *column,
                    };
                    let instrs = expand(mnemonic, operands, &ctx)?;
                    debug_assert_eq!(instrs.len() as u32 * 4, *size);
                    for (k, instr) in instrs.iter().enumerate() {
                        let word = isa::encode(instr).map_err(|e| AsmError::Range {
                            line: *line,
                            message: format!("{e} (at {:#010x})", pc + 4 * k as u32),
                        })?;
                        bytes.extend_from_slice(&word.to_le_bytes());
                    }
                }
                Item::Word { expr, line } => {
                    let ctx = ExprCtx {
                        symbols: &addresses,
                        pc,
                        line: *line,
                        column: 1,
                    };
                    let v = ctx.eval(expr)?;
                    if !(-(1i64 << 31)..(1i64 << 32)).contains(&v) {
                        return Err(AsmError::Range {
                            line: *line,
                            message: format!(".word value {v} does not fit 32 bits"),
                        });
                    }
                    bytes.extend_from_slice(&(v as u32).to_le_bytes());
                }
                Item::Space(n) => bytes.resize(bytes.len() + *n as usize, 0),
            }
        }
        image.sections.push(ImageSection {
            name: s.name.clone(),
            kind: s.kind,
            trust: s.trust,
            base,
            bytes,
        });
    }

    for name in &symbol_order {
        let (_, _, kind) = names[name];
        image.symbols.push(Symbol {
            name: name.clone(),
            address: addresses[name],
            kind: kind.expect("declared with .sym"),
        });
    }
    image
        .symbols
        .sort_by(|a, b| (a.address, &a.name).cmp(&(b.address, &b.name)));

    let resolve = |target: &str, line: usize| -> Result<u32, AsmError> {
        if let Some(a) = addresses.get(target) {
            return Ok(*a);
        }
        parse_number(target).map_err(|_| AsmError::UnknownSymbol {
            line,
            name: target.to_string(),
        })
    };
    let mut entry = None;
    for d in deferred {
        match d {
            Deferred::Jumptable { base, count, line } => image.jumptables.push(Jumptable {
                base: resolve(&base, line)?,
                entry_count: count,
            }),
            Deferred::Entry { target, line } => entry = Some(resolve(&target, line)?),
            Deferred::Handler { target, line } => image.handler = Some(resolve(&target, line)?),
        }
    }
    image.jumptables.sort_by_key(|j| j.base);
    image.sections.sort_by_key(|s| s.base);
    image.entry = entry.ok_or_else(|| AsmError::parse(source.lines().count().max(1), 1, "missing .entry"))?;
    image.check().map_err(|message| {
        let line = sections.last().map(|s| s.line).unwrap_or(1);
        AsmError::Parse {
            line,
            column: 1,
            message,
        }
    })?;
    Ok(image)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' || c == '$')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

fn split_operands(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in text.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn fits_i12(v: i64) -> bool {
    (-2048..=2047).contains(&v)
}

/// Number of machine instructions a source line expands to.
fn expansion_len(mnemonic: &str, operands: &[String]) -> Option<u32> {
    Some(match mnemonic {
        "li" => match operands.get(1).and_then(|o| literal(o)) {
            Some(v) if fits_i12(v) => 1,
            _ => 2,
        },
        "la" | "tail" => 2,
        m if Op::from_mnemonic(m).is_some() => 1,
        "nop" | "mv" | "not" | "neg" | "seqz" | "snez" | "sltz" | "sgtz" | "j" | "jr" | "ret"
        | "call" | "beqz" | "bnez" | "blez" | "bgez" | "bltz" | "bgtz" | "bgt" | "ble"
        | "bgtu" | "bleu" | "csrr" | "csrw" | "csrs" | "csrc" | "csrwi" | "csrsi" | "csrci" => 1,
        _ => return None,
    })
}

/// A plain numeric literal, if `text` is one.
fn literal(text: &str) -> Option<i64> {
    let t = text.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(b) => (true, b.trim()),
        None => (false, t),
    };
    let v = parse_number(body).ok()? as i64;
    Some(if neg { -v } else { v })
}

struct ExprCtx<'a> {
    symbols: &'a HashMap<String, u32>,
    pc: u32,
    line: usize,
    column: usize,
}

impl ExprCtx<'_> {
    fn err(&self, msg: impl Into<String>) -> AsmError {
        AsmError::parse(self.line, self.column, msg)
    }

    fn eval(&self, text: &str) -> Result<i64, AsmError> {
        let mut p = ExprParser {
            ctx: self,
            s: text.as_bytes(),
            pos: 0,
        };
        let v = p.expr()?;
        p.skip_ws();
        if p.pos != p.s.len() {
            return Err(self.err(format!("unexpected `{}` in expression", &text[p.pos..])));
        }
        Ok(v)
    }

    fn reg(&self, text: &str) -> Result<Reg, AsmError> {
        Reg::parse(text.trim()).ok_or_else(|| self.err(format!("expected register, got `{text}`")))
    }

    fn csr(&self, text: &str) -> Result<u16, AsmError> {
        let t = text.trim();
        if let Some(v) = csr::by_name(t) {
            return Ok(v);
        }
        match parse_number(t) {
            Ok(v) if v <= 0xfff => Ok(v as u16),
            _ => Err(self.err(format!("unknown CSR `{t}`"))),
        }
    }

    fn imm(&self, text: &str) -> Result<i32, AsmError> {
        let v = self.eval(text)?;
        i32::try_from(v).map_err(|_| AsmError::Range {
            line: self.line,
            message: format!("immediate {v} out of range"),
        })
    }

    /// Branch/jump target expression -> pc-relative offset.
    fn offset(&self, text: &str) -> Result<i32, AsmError> {
        let target = self.eval(text)?;
        let off = target - self.pc as i64;
        i32::try_from(off).map_err(|_| AsmError::Range {
            line: self.line,
            message: format!("target {target:#x} out of range"),
        })
    }

    /// `imm(reg)`, `(reg)` or bare `imm` (base x0).
    fn mem(&self, text: &str) -> Result<(i32, Reg), AsmError> {
        let t = text.trim();
        if let Some(stripped) = t.strip_suffix(')') {
            let open = stripped
                .rfind('(')
                .ok_or_else(|| self.err(format!("bad memory operand `{t}`")))?;
            let reg = self.reg(&stripped[open + 1..])?;
            let imm_text = stripped[..open].trim();
            let imm = if imm_text.is_empty() { 0 } else { self.imm(imm_text)? };
            Ok((imm, reg))
        } else {
            Ok((self.imm(t)?, Reg::ZERO))
        }
    }
}

struct ExprParser<'a, 'b> {
    ctx: &'a ExprCtx<'b>,
    s: &'a [u8],
    pos: usize,
}

fn hi20(v: i64) -> i64 {
    ((v + 0x800) >> 12) & 0xfffff
}

fn lo12(v: i64) -> i64 {
    let lo = v & 0xfff;
    if lo >= 0x800 {
        lo - 0x1000
    } else {
        lo
    }
}

impl ExprParser<'_, '_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expr(&mut self) -> Result<i64, AsmError> {
        let mut v = self.term()?;
        loop {
            self.skip_ws();
            match self.s.get(self.pos) {
                Some(b'+') => {
                    self.pos += 1;
                    v += self.term()?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    v -= self.term()?;
                }
                _ => return Ok(v),
            }
        }
    }

    fn term(&mut self) -> Result<i64, AsmError> {
        self.skip_ws();
        let start = self.pos;
        match self.s.get(self.pos) {
            Some(b'-') => {
                self.pos += 1;
                Ok(-self.term()?)
            }
            Some(b'(') => {
                self.pos += 1;
                let v = self.expr()?;
                self.expect(b')')?;
                Ok(v)
            }
            Some(b'%') => {
                self.pos += 1;
                let name = self.word();
                self.skip_ws();
                self.expect(b'(')?;
                let v = self.expr()?;
                self.expect(b')')?;
                let pc = self.ctx.pc as i64;
                match name.as_str() {
                    "hi" => Ok(hi20(v)),
                    "lo" => Ok(lo12(v)),
                    "pcrel_hi" => Ok(hi20(v - pc)),
                    "pcrel_lo" => Ok(lo12(v - (pc - 4))),
                    _ => Err(self.ctx.err(format!("unknown operator `%{name}`"))),
                }
            }
            Some(c) if c.is_ascii_digit() => {
                let w = self.word();
                parse_number(&w).map(|v| v as i64).map_err(|e| self.ctx.err(e))
            }
            Some(b'.') if !self.s.get(self.pos + 1).is_some_and(|c| c.is_ascii_alphanumeric() || *c == b'_') => {
                self.pos += 1;
                Ok(self.ctx.pc as i64)
            }
            Some(_) => {
                let w = self.word();
                if w.is_empty() {
                    return Err(self.ctx.err(format!(
                        "unexpected `{}` in expression",
                        String::from_utf8_lossy(&self.s[start..])
                    )));
                }
                self.ctx
                    .symbols
                    .get(&w)
                    .map(|a| *a as i64)
                    .ok_or(AsmError::UnknownSymbol {
                        line: self.ctx.line,
                        name: w,
                    })
            }
            None => Err(self.ctx.err("missing operand")),
        }
    }

    fn word(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.s.len() {
            let c = self.s[self.pos];
            if c.is_ascii_alphanumeric() || c == b'_' || c == b'.' || c == b'$' {
                self.pos += 1;
            } else {
                break;
            }
        }
        String::from_utf8_lossy(&self.s[start..self.pos]).into_owned()
    }

    fn expect(&mut self, c: u8) -> Result<(), AsmError> {
        self.skip_ws();
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.ctx.err(format!("expected `{}`", c as char)))
        }
    }
}

fn parse_fence_set(ctx: &ExprCtx, text: &str) -> Result<u8, AsmError> {
    let t = text.trim();
    if let Ok(v) = parse_number(t) {
        return if v <= 0xf { Ok(v as u8) } else { Err(ctx.err("fence set out of range")) };
    }
    let mut bits = 0;
    for c in t.chars() {
        bits |= match c {
            'i' => 8,
            'o' => 4,
            'r' => 2,
            'w' => 1,
            _ => return Err(ctx.err(format!("bad fence set `{t}`"))),
        };
    }
    Ok(bits)
}

fn expand(mnemonic: &str, ops: &[String], ctx: &ExprCtx) -> Result<Vec<Instr>, AsmError> {
    let want = |n: usize| -> Result<(), AsmError> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(ctx.err(format!("`{mnemonic}` takes {n} operand(s), got {}", ops.len())))
        }
    };
    let one = |i: Instr| Ok(vec![i]);

    if let Some(op) = Op::from_mnemonic(mnemonic) {
        use isa::Format;
        return match op.format() {
            Format::R => {
                want(3)?;
                one(Instr::r(op, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, ctx.reg(&ops[2])?))
            }
            Format::I if op == Op::Jalr => match ops.len() {
                1 => one(Instr::i(Op::Jalr, Reg::RA, ctx.reg(&ops[0])?, 0)),
                2 => {
                    let (imm, rs1) = ctx.mem(&ops[1])?;
                    one(Instr::i(Op::Jalr, ctx.reg(&ops[0])?, rs1, imm))
                }
                3 => one(Instr::i(Op::Jalr, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, ctx.imm(&ops[2])?)),
                _ => Err(ctx.err("`jalr` takes 1 to 3 operands")),
            },
            Format::I if op.class() == isa::OpClass::Load => {
                want(2)?;
                let (imm, rs1) = ctx.mem(&ops[1])?;
                one(Instr::i(op, ctx.reg(&ops[0])?, rs1, imm))
            }
            Format::I | Format::Shift => {
                want(3)?;
                one(Instr::i(op, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, ctx.imm(&ops[2])?))
            }
            Format::S => {
                want(2)?;
                let (imm, rs1) = ctx.mem(&ops[1])?;
                one(Instr::s(op, rs1, ctx.reg(&ops[0])?, imm))
            }
            Format::B => {
                want(3)?;
                one(Instr::b(op, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, ctx.offset(&ops[2])?))
            }
            Format::U => {
                want(2)?;
                let v = ctx.eval(&ops[1])?;
                if !(-(1 << 19)..(1 << 20)).contains(&v) {
                    return Err(AsmError::Range {
                        line: ctx.line,
                        message: format!("upper immediate {v:#x} out of range"),
                    });
                }
                one(Instr::u(op, ctx.reg(&ops[0])?, ((v & 0xfffff) << 12) as u32 as i32))
            }
            Format::J => match ops.len() {
                1 => one(Instr::jal(Reg::RA, ctx.offset(&ops[0])?)),
                2 => one(Instr::jal(ctx.reg(&ops[0])?, ctx.offset(&ops[1])?)),
                _ => Err(ctx.err("`jal` takes 1 or 2 operands")),
            },
            Format::Csr => {
                want(3)?;
                one(Instr::csr(op, ctx.reg(&ops[0])?, ctx.csr(&ops[1])?, ctx.reg(&ops[2])?))
            }
            Format::CsrImm => {
                want(3)?;
                let z = ctx.imm(&ops[2])?;
                if !(0..32).contains(&z) {
                    return Err(AsmError::Range {
                        line: ctx.line,
                        message: format!("CSR immediate {z} out of range"),
                    });
                }
                one(Instr::csr(op, ctx.reg(&ops[0])?, ctx.csr(&ops[1])?, Reg::from_bits(z as u32)))
            }
            Format::Fence => match ops.len() {
                0 => one(Instr::fence(0xf, 0xf)),
                2 => one(Instr::fence(parse_fence_set(ctx, &ops[0])?, parse_fence_set(ctx, &ops[1])?)),
                _ => Err(ctx.err("`fence` takes 0 or 2 operands")),
            },
            Format::Fixed => {
                want(0)?;
                one(Instr::system(op))
            }
        };
    }

    let csr_imm = |op: Op| -> Result<Vec<Instr>, AsmError> {
        want(2)?;
        let z = ctx.imm(&ops[1])?;
        if !(0..32).contains(&z) {
            return Err(AsmError::Range {
                line: ctx.line,
                message: format!("CSR immediate {z} out of range"),
            });
        }
        one(Instr::csr(op, Reg::ZERO, ctx.csr(&ops[0])?, Reg::from_bits(z as u32)))
    };
    let branch_zero = |op: Op, swap: bool| -> Result<Vec<Instr>, AsmError> {
        want(2)?;
        let r = ctx.reg(&ops[0])?;
        let off = ctx.offset(&ops[1])?;
        one(if swap {
            Instr::b(op, Reg::ZERO, r, off)
        } else {
            Instr::b(op, r, Reg::ZERO, off)
        })
    };
    let branch_swapped = |op: Op| -> Result<Vec<Instr>, AsmError> {
        want(3)?;
        one(Instr::b(op, ctx.reg(&ops[1])?, ctx.reg(&ops[0])?, ctx.offset(&ops[2])?))
    };

    match mnemonic {
        "nop" => {
            want(0)?;
            one(Instr::nop())
        }
        "li" => {
            want(2)?;
            let rd = ctx.reg(&ops[0])?;
            let v = ctx.eval(&ops[1])?;
            if !(-(1i64 << 31)..(1i64 << 32)).contains(&v) {
                return Err(AsmError::Range {
                    line: ctx.line,
                    message: format!("`li` value {v} does not fit 32 bits"),
                });
            }
            if literal(&ops[1]).is_some_and(fits_i12) {
                one(Instr::i(Op::Addi, rd, Reg::ZERO, v as i32))
            } else {
                Ok(vec![
                    Instr::u(Op::Lui, rd, (hi20(v) << 12) as u32 as i32),
                    Instr::i(Op::Addi, rd, rd, lo12(v) as i32),
                ])
            }
        }
        "la" => {
            want(2)?;
            let rd = ctx.reg(&ops[0])?;
            let v = ctx.eval(&ops[1])?;
            Ok(vec![
                Instr::u(Op::Lui, rd, (hi20(v) << 12) as u32 as i32),
                Instr::i(Op::Addi, rd, rd, lo12(v) as i32),
            ])
        }
        "mv" => {
            want(2)?;
            one(Instr::i(Op::Addi, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, 0))
        }
        "not" => {
            want(2)?;
            one(Instr::i(Op::Xori, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, -1))
        }
        "neg" => {
            want(2)?;
            one(Instr::r(Op::Sub, ctx.reg(&ops[0])?, Reg::ZERO, ctx.reg(&ops[1])?))
        }
        "seqz" => {
            want(2)?;
            one(Instr::i(Op::Sltiu, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, 1))
        }
        "snez" => {
            want(2)?;
            one(Instr::r(Op::Sltu, ctx.reg(&ops[0])?, Reg::ZERO, ctx.reg(&ops[1])?))
        }
        "sltz" => {
            want(2)?;
            one(Instr::r(Op::Slt, ctx.reg(&ops[0])?, ctx.reg(&ops[1])?, Reg::ZERO))
        }
        "sgtz" => {
            want(2)?;
            one(Instr::r(Op::Slt, ctx.reg(&ops[0])?, Reg::ZERO, ctx.reg(&ops[1])?))
        }
        "j" => {
            want(1)?;
            one(Instr::jal(Reg::ZERO, ctx.offset(&ops[0])?))
        }
        "call" => {
            want(1)?;
            one(Instr::jal(Reg::RA, ctx.offset(&ops[0])?))
        }
        "jr" => {
            want(1)?;
            one(Instr::i(Op::Jalr, Reg::ZERO, ctx.reg(&ops[0])?, 0))
        }
        "ret" => {
            want(0)?;
            one(Instr::ret())
        }
        "tail" => {
            want(1)?;
            let off = ctx.offset(&ops[0])? as i64;
            Ok(vec![
                Instr::u(Op::Auipc, Reg::T1, (hi20(off) << 12) as u32 as i32),
                Instr::i(Op::Jalr, Reg::ZERO, Reg::T1, lo12(off) as i32),
            ])
        }
        "beqz" => branch_zero(Op::Beq, false),
        "bnez" => branch_zero(Op::Bne, false),
        "bltz" => branch_zero(Op::Blt, false),
        "bgez" => branch_zero(Op::Bge, false),
        "blez" => branch_zero(Op::Bge, true),
        "bgtz" => branch_zero(Op::Blt, true),
        "bgt" => branch_swapped(Op::Blt),
        "ble" => branch_swapped(Op::Bge),
        "bgtu" => branch_swapped(Op::Bltu),
        "bleu" => branch_swapped(Op::Bgeu),
        "csrr" => {
            want(2)?;
            one(Instr::csr(Op::Csrrs, ctx.reg(&ops[0])?, ctx.csr(&ops[1])?, Reg::ZERO))
        }
        "csrw" | "csrs" | "csrc" => {
            want(2)?;
            let op = match mnemonic {
                "csrw" => Op::Csrrw,
                "csrs" => Op::Csrrs,
                _ => Op::Csrrc,
            };
            one(Instr::csr(op, Reg::ZERO, ctx.csr(&ops[0])?, ctx.reg(&ops[1])?))
        }
        "csrwi" => csr_imm(Op::Csrrwi),
        "csrsi" => csr_imm(Op::Csrrsi),
        "csrci" => csr_imm(Op::Csrrci),
        other => Err(ctx.err(format!("unknown mnemonic `{other}`"))),
    }
}
