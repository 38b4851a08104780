//! Function instrumentation and whole-program source generation.
//!
//! A non-leaf function saves its return address through a trusted
//! trampoline that pushes `ra` onto the shadow stack and then resumes the
//! function after its entry jump. The epilogue pops the shadow copy back
//! into `ra` before returning. The on-stack copy of `ra` is still written
//! so the frame layout matches an uninstrumented build.

use std::collections::HashSet;

use thiserror::Error;

use crate::isa::{Op, Reg};
use crate::layout::MemoryMap;

use super::asm::{self, AsmError};
use super::image::Image;

/// Offset of the console byte register inside the MMIO region.
pub const CONSOLE_OFFSET: u32 = 0x1000;

/// `a7` selectors for the trusted runtime services reached by `ecall`.
pub mod service {
    pub const EXIT: u32 = 93;
    pub const SETJMP: u32 = 0x100;
    pub const LONGJMP: u32 = 0x101;
    pub const JMP_RELEASE: u32 = 0x102;
}

pub const TRAMPOLINE_SUFFIX: &str = "$trampoline";
pub const POSTJUMP_SUFFIX: &str = "$postjump";
pub const EPILOGUE_SUFFIX: &str = "$epilogue";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionSkeleton {
    pub name: String,
    pub leaf: bool,
    pub frame_size: u32,
    pub body: Vec<String>,
    pub external_linkage: bool,
}

impl FunctionSkeleton {
    pub fn leaf(name: &str, body: &[&str]) -> FunctionSkeleton {
        FunctionSkeleton {
            name: name.to_string(),
            leaf: true,
            frame_size: 0,
            body: body.iter().map(|s| s.to_string()).collect(),
            external_linkage: false,
        }
    }

    pub fn non_leaf(name: &str, frame_size: u32, body: &[&str]) -> FunctionSkeleton {
        FunctionSkeleton {
            name: name.to_string(),
            leaf: false,
            frame_size,
            body: body.iter().map(|s| s.to_string()).collect(),
            external_linkage: false,
        }
    }

    pub fn external(mut self) -> FunctionSkeleton {
        self.external_linkage = true;
        self
    }

    pub fn trampoline_label(&self) -> String {
        format!("{}{TRAMPOLINE_SUFFIX}", self.name)
    }

    pub fn epilogue_label(&self) -> String {
        format!("{}{EPILOGUE_SUFFIX}", self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SkeletonError {
    #[error("{function}: frame size {size} is not a multiple of 16")]
    FrameSize { function: String, size: u32 },
    #[error("{function}: body line `{line}` writes ra")]
    WritesRa { function: String, line: String },
    #[error("{function}: body line `{line}` references the shadow stack pointer")]
    TouchesSsp { function: String, line: String },
    #[error("{function}: body line `{line}` returns; the epilogue owns the return")]
    Returns { function: String, line: String },
    #[error("{function}: leaf function makes a call in `{line}`")]
    LeafCalls { function: String, line: String },
    #[error("duplicate function `{0}`")]
    Duplicate(String),
    #[error("{0}")]
    Asm(#[from] AsmError),
}

/// Assembly emitted for one function.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Fragments {
    pub untrusted: Vec<String>,
    pub trusted: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Detrap,
}

const DEST_PSEUDOS: &[&str] = &[
    "li", "la", "mv", "not", "neg", "seqz", "snez", "sltz", "sgtz", "csrr",
];

struct BodyLine<'a> {
    mnemonic: String,
    operands: Vec<&'a str>,
}

fn split_body_line(line: &str) -> Option<BodyLine<'_>> {
    let mut code = line.split('#').next().unwrap().trim();
    while let Some(pos) = code.find(':') {
        let label = &code[..pos];
        if label.is_empty() || label.contains(char::is_whitespace) || label.contains('(') {
            break;
        }
        code = code[pos + 1..].trim_start();
    }
    if code.is_empty() || code.starts_with('.') {
        return None;
    }
    let (head, tail) = match code.find(char::is_whitespace) {
        Some(p) => (&code[..p], code[p..].trim()),
        None => (code, ""),
    };
    let operands = if tail.is_empty() {
        Vec::new()
    } else {
        tail.split(',').map(str::trim).collect()
    };
    Some(BodyLine {
        mnemonic: head.to_ascii_lowercase(),
        operands,
    })
}

fn is_call_form(l: &BodyLine) -> bool {
    match l.mnemonic.as_str() {
        "call" => true,
        "jal" | "jalr" => l.operands.len() == 1 || Reg::parse(l.operands[0]) == Some(Reg::RA),
        _ => false,
    }
}

fn writes_dest(mnemonic: &str) -> bool {
    if DEST_PSEUDOS.contains(&mnemonic) {
        return true;
    }
    use crate::isa::Format;
    Op::from_mnemonic(mnemonic).is_some_and(|op| {
        matches!(
            op.format(),
            Format::R | Format::I | Format::Shift | Format::U | Format::J | Format::Csr | Format::CsrImm
        )
    })
}

fn mentions_reg(line: &BodyLine, reg: Reg) -> bool {
    line.operands.iter().any(|op| {
        op.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '$' || c == '.'))
            .any(|tok| Reg::parse(tok) == Some(reg))
    })
}

/// Checks the skeleton invariants that the emitter depends on.
pub fn check_skeleton(f: &FunctionSkeleton, ssp: Reg) -> Result<(), SkeletonError> {
    if !f.frame_size.is_multiple_of(16) || (!f.leaf && f.frame_size == 0) {
        return Err(SkeletonError::FrameSize {
            function: f.name.clone(),
            size: f.frame_size,
        });
    }
    for raw in &f.body {
        let Some(line) = split_body_line(raw) else { continue };
        let err_line = raw.trim().to_string();
        if mentions_reg(&line, ssp) {
            return Err(SkeletonError::TouchesSsp {
                function: f.name.clone(),
                line: err_line,
            });
        }
        let is_ret = line.mnemonic == "ret"
            || (line.mnemonic == "jr" && line.operands.first().and_then(|o| Reg::parse(o)) == Some(Reg::RA));
        if is_ret {
            return Err(SkeletonError::Returns {
                function: f.name.clone(),
                line: err_line,
            });
        }
        if is_call_form(&line) {
            if f.leaf {
                return Err(SkeletonError::LeafCalls {
                    function: f.name.clone(),
                    line: err_line,
                });
            }
            continue;
        }
        let dest_is_ra = writes_dest(&line.mnemonic)
            && line.operands.first().and_then(|o| Reg::parse(o)) == Some(Reg::RA);
        if dest_is_ra {
            return Err(SkeletonError::WritesRa {
                function: f.name.clone(),
                line: err_line,
            });
        }
    }
    Ok(())
}

/// Rewrites direct calls to any function in `targets` so they enter through
/// its trampoline.
pub fn retarget_calls(body: &[String], targets: &HashSet<String>) -> Vec<String> {
    body.iter()
        .map(|raw| {
            let Some(line) = split_body_line(raw) else {
                return raw.clone();
            };
            let callee = match (line.mnemonic.as_str(), line.operands.as_slice()) {
                ("call" | "jal", [t]) => Some(*t),
                ("jal", [rd, t]) if Reg::parse(rd) == Some(Reg::RA) => Some(*t),
                _ => None,
            };
            match callee {
                Some(t) if targets.contains(t) => {
                    let prefix_len = raw.find(line.mnemonic.as_str()).unwrap_or(0);
                    format!("{}call {t}{TRAMPOLINE_SUFFIX}", &raw[..prefix_len])
                }
                _ => raw.clone(),
            }
        })
        .collect()
}

fn setjmp_caller(f: &FunctionSkeleton) -> bool {
    f.body.iter().any(|raw| {
        split_body_line(raw).is_some_and(|l| is_call_form(&l) && l.operands.last() == Some(&"__setjmp"))
    })
}

/// Emits the untrusted body and trusted trampoline for one function.
///
/// Calls inside the body are left as written; [`retarget_calls`] handles
/// cross-function retargeting when a whole program is assembled.
pub fn instrument_function(f: &FunctionSkeleton, ssp: Reg) -> Result<Fragments, SkeletonError> {
    emit_function(f, ssp, Mode::Detrap)
}

fn emit_function(f: &FunctionSkeleton, ssp: Reg, mode: Mode) -> Result<Fragments, SkeletonError> {
    check_skeleton(f, ssp)?;
    let name = &f.name;
    let fs = f.frame_size;
    let mut out = Fragments::default();
    let u = &mut out.untrusted;
    u.push(format!(".sym {name} . function"));

    if f.leaf {
        u.push(format!("{name}:"));
        if fs > 0 {
            u.push(format!("    addi sp, sp, -{fs}"));
        }
        u.extend(f.body.iter().cloned());
        u.push(format!("{name}{EPILOGUE_SUFFIX}:"));
        if fs > 0 {
            u.push(format!("    addi sp, sp, {fs}"));
        }
        u.push("    ret".into());
        return Ok(out);
    }

    let release = setjmp_caller(f).then(|| "    call __jmp_release".to_string());
    match mode {
        Mode::Baseline => {
            u.push(format!("{name}:"));
            u.push(format!("    addi sp, sp, -{fs}"));
            u.push(format!("    sw ra, {}(sp)", fs - 4));
            u.extend(f.body.iter().cloned());
            u.push(format!("{name}{EPILOGUE_SUFFIX}:"));
            u.extend(release);
            u.push(format!("    lw ra, {}(sp)", fs - 4));
            u.push(format!("    addi sp, sp, {fs}"));
            u.push("    ret".into());
        }
        Mode::Detrap => {
            let tramp = f.trampoline_label();
            if f.external_linkage {
                u.push(format!("{name}:"));
                u.push(format!("    j {tramp}"));
                u.push(format!("{name}{POSTJUMP_SUFFIX}:"));
            } else {
                u.push(format!("{name}:"));
                u.push(format!("{name}{POSTJUMP_SUFFIX}:"));
            }
            u.push(format!("    addi sp, sp, -{fs}"));
            u.push(format!("    sw ra, {}(sp)", fs - 4));
            u.extend(f.body.iter().cloned());
            u.push(format!("{name}{EPILOGUE_SUFFIX}:"));
            u.extend(release);
            u.push(format!("    addi {ssp}, {ssp}, -4"));
            u.push(format!("    lw ra, 0({ssp})"));
            u.push(format!("    addi sp, sp, {fs}"));
            u.push("    ret".into());

            let t = &mut out.trusted;
            t.push(format!(".sym {tramp} . function"));
            t.push(format!("{tramp}:"));
            t.push(format!("    sw ra, 0({ssp})"));
            t.push(format!("    addi {ssp}, {ssp}, 4"));
            t.push(format!("    j {name}{POSTJUMP_SUFFIX}"));
        }
    }
    Ok(out)
}

/// Bounds-checked switch dispatch through a rodata table of `count` code
/// addresses. Clobbers t1-t3.
pub fn switch_sequence(index: &str, table: &str, count: u32, default: &str) -> Vec<String> {
    vec![
        format!("    li t3, {count}"),
        format!("    bgeu {index}, t3, {default}"),
        format!("    slli t2, {index}, 2"),
        format!("    lui t1, %hi({table})"),
        format!("    addi t1, t1, %lo({table})"),
        "    add t2, t2, t1".into(),
        "    lw t2, 0(t2)".into(),
        "    jr t2".into(),
    ]
}

/// Checked indirect call through a code table of `count` jump entries.
/// `target` holds the requested entry address; a target outside the table
/// branches to `fail`. Clobbers t1-t3.
pub fn icall_sequence(target: &str, table: &str, count: u32, fail: &str) -> Vec<String> {
    vec![
        format!("    lui t1, %hi({table})"),
        format!("    addi t1, t1, %lo({table})"),
        format!("    sub t2, {target}, t1"),
        format!("    li t3, {}", count * 4),
        format!("    bgeu t2, t3, {fail}"),
        "    andi t2, t2, -4".into(),
        "    add t2, t2, t1".into(),
        "    jalr ra, 0(t2)".into(),
    ]
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Table {
    name: String,
    entries: Vec<String>,
}

/// Assembles a complete program: trusted runtime, functions, tables and data.
///
/// `main` is called from the trusted `_start`, and its `a0` becomes the exit
/// code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgramBuilder {
    functions: Vec<FunctionSkeleton>,
    switch_tables: Vec<Table>,
    call_tables: Vec<Table>,
    data: Vec<String>,
    handler: Option<String>,
    ssp: Reg,
}

impl Default for ProgramBuilder {
    fn default() -> Self {
        ProgramBuilder::new()
    }
}

impl ProgramBuilder {
    pub fn new() -> ProgramBuilder {
        ProgramBuilder {
            functions: Vec::new(),
            switch_tables: Vec::new(),
            call_tables: Vec::new(),
            data: Vec::new(),
            handler: None,
            ssp: Reg::SSP,
        }
    }

    pub fn function(mut self, f: FunctionSkeleton) -> ProgramBuilder {
        self.functions.push(f);
        self
    }

    /// Rodata table of code labels used by [`switch_sequence`].
    pub fn switch_table(mut self, name: &str, labels: &[&str]) -> ProgramBuilder {
        self.switch_tables.push(Table {
            name: name.into(),
            entries: labels.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    /// Code table of `j <function>` entries used by [`icall_sequence`].
    pub fn call_table(mut self, name: &str, functions: &[&str]) -> ProgramBuilder {
        self.call_tables.push(Table {
            name: name.into(),
            entries: functions.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    /// Raw lines for the untrusted data section.
    pub fn data(mut self, lines: &[&str]) -> ProgramBuilder {
        self.data.extend(lines.iter().map(|s| s.to_string()));
        self
    }

    pub fn handler(mut self, function: &str) -> ProgramBuilder {
        self.handler = Some(function.into());
        self
    }

    pub fn functions(&self) -> &[FunctionSkeleton] {
        &self.functions
    }

    fn function_named(&self, name: &str) -> Option<&FunctionSkeleton> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// Renders assembly source with `base=auto` sections.
    pub fn source(&self, mode: Mode, map: &MemoryMap) -> Result<String, SkeletonError> {
        let mut seen = HashSet::new();
        for f in &self.functions {
            if !seen.insert(f.name.as_str()) {
                return Err(SkeletonError::Duplicate(f.name.clone()));
            }
        }
        let retarget: HashSet<String> = match mode {
            Mode::Baseline => HashSet::new(),
            Mode::Detrap => self
                .functions
                .iter()
                .filter(|f| !f.leaf)
                .map(|f| f.name.clone())
                .collect(),
        };
        let console = map.region(crate::layout::SectionKind::Mmio).base + CONSOLE_OFFSET;
        let main_call = if retarget.contains("main") {
            "main$trampoline"
        } else {
            "main"
        };

        let mut trusted = vec![
            ".section .trusted.text kind=trusted-code trust=trusted base=auto".to_string(),
            ".sym _start . function".into(),
            "_start:".into(),
            format!("    call {main_call}"),
            ".sym __exit . function".into(),
            "__exit:".into(),
            format!("    li a7, {}", service::EXIT),
            "    ecall".into(),
            ".sym __putc . function".into(),
            "__putc:".into(),
            format!("    lui t0, %hi({console:#x})"),
            format!("    sb a0, %lo({console:#x})(t0)"),
            "    ret".into(),
        ];
        for (name, sel) in [
            ("__setjmp", service::SETJMP),
            ("__longjmp", service::LONGJMP),
            ("__jmp_release", service::JMP_RELEASE),
        ] {
            trusted.push(format!(".sym {name} . function"));
            trusted.push(format!("{name}:"));
            trusted.push(format!("    li a7, {sel:#x}"));
            trusted.push("    ecall".into());
            trusted.push("    ret".into());
        }
        trusted.push(".sym __irq_enable . function".into());
        trusted.push("__irq_enable:".into());
        trusted.push("    csrsi mstatus, 8".into());
        trusted.push("    ret".into());
        trusted.push(".sym __cfi_fail . function".into());
        trusted.push("__cfi_fail:".into());
        trusted.push("    ebreak".into());

        let mut untrusted = vec![".section .text kind=untrusted-code trust=untrusted base=auto".to_string()];
        for f in &self.functions {
            let mut f = f.clone();
            f.external_linkage |= self.address_taken(&f.name);
            f.body = retarget_calls(&f.body, &retarget);
            let frags = emit_function(&f, self.ssp, mode)?;
            untrusted.extend(frags.untrusted);
            trusted.extend(frags.trusted);
        }
        let mut tables = Vec::new();
        for t in &self.call_tables {
            untrusted.push(format!(".sym {} . jumptable", t.name));
            untrusted.push(format!("{}:", t.name));
            for e in &t.entries {
                untrusted.push(format!("    j {e}"));
            }
            tables.push(format!(".jumptable {} {}", t.name, t.entries.len()));
        }

        let mut out = trusted;
        out.extend(untrusted);
        if !self.switch_tables.is_empty() {
            out.push(".section .rodata kind=rodata trust=untrusted base=auto".into());
            for t in &self.switch_tables {
                out.push(format!(".sym {} . jumptable", t.name));
                out.push(format!("{}:", t.name));
                for e in &t.entries {
                    out.push(format!("    .word {e}"));
                }
                tables.push(format!(".jumptable {} {}", t.name, t.entries.len()));
            }
        }
        if !self.data.is_empty() {
            out.push(".section .data kind=untrusted-data trust=untrusted base=auto".into());
            out.extend(self.data.iter().cloned());
        }
        out.extend(tables);
        out.push(".entry _start".into());
        if let Some(h) = &self.handler {
            out.push(format!(".handler {h}"));
        }
        let mut text = out.join("\n");
        text.push('\n');
        Ok(text)
    }

    pub fn build(&self, mode: Mode, map: &MemoryMap) -> Result<Image, SkeletonError> {
        let src = self.source(mode, map)?;
        Ok(asm::assemble(&src, map)?)
    }

    /// Whether `name` enters through an entry jump in the instrumented build.
    pub fn has_entry_jump(&self, name: &str) -> bool {
        self.function_named(name)
            .is_some_and(|f| !f.leaf && (f.external_linkage || self.address_taken(name)))
    }

    /// Functions reachable through a call table are entered by address and
    /// so keep their entry jump.
    fn address_taken(&self, name: &str) -> bool {
        self.call_tables.iter().any(|t| t.entries.iter().any(|e| e == name))
    }
}
