//! The loadable program representation and its canonical text form.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::isa;
use crate::layout::SectionKind;

use super::asm::{self, AsmError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Trust {
    Trusted,
    Untrusted,
}

impl Trust {
    pub fn name(self) -> &'static str {
        match self {
            Trust::Trusted => "trusted",
            Trust::Untrusted => "untrusted",
        }
    }
}

impl FromStr for Trust {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trusted" => Ok(Trust::Trusted),
            "untrusted" => Ok(Trust::Untrusted),
            _ => Err(format!("unknown trust `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSection {
    pub name: String,
    pub kind: SectionKind,
    pub trust: Trust,
    pub base: u32,
    pub bytes: Vec<u8>,
}

impl ImageSection {
    pub fn end(&self) -> u32 {
        self.base + self.bytes.len() as u32
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && addr < self.end()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SymbolKind {
    Function,
    Object,
    Jumptable,
}

impl SymbolKind {
    pub fn name(self) -> &'static str {
        match self {
            SymbolKind::Function => "function",
            SymbolKind::Object => "object",
            SymbolKind::Jumptable => "jumptable",
        }
    }
}

impl FromStr for SymbolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "function" => Ok(SymbolKind::Function),
            "object" => Ok(SymbolKind::Object),
            "jumptable" => Ok(SymbolKind::Jumptable),
            _ => Err(format!("unknown symbol kind `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Symbol {
    pub name: String,
    pub address: u32,
    pub kind: SymbolKind,
}

/// A table of `entry_count` 4-byte entries starting at `base`.
///
/// In a data section each entry is a code address (switch tables); in a
/// code section each entry is itself a jump instruction (checked indirect
/// call targets).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Jumptable {
    pub base: u32,
    pub entry_count: u32,
}

impl Jumptable {
    pub const ENTRY_SIZE: u32 = 4;

    pub fn end(&self) -> u32 {
        self.base + self.entry_count * Self::ENTRY_SIZE
    }

    pub fn entry_addr(&self, index: u32) -> u32 {
        self.base + index * Self::ENTRY_SIZE
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Image {
    pub sections: Vec<ImageSection>,
    pub symbols: Vec<Symbol>,
    pub jumptables: Vec<Jumptable>,
    pub entry: u32,
    pub handler: Option<u32>,
}

impl Image {
    pub fn section_at(&self, addr: u32) -> Option<&ImageSection> {
        self.sections.iter().find(|s| s.contains(addr))
    }

    pub fn read_word(&self, addr: u32) -> Option<u32> {
        let s = self.section_at(addr)?;
        let off = (addr - s.base) as usize;
        let bytes = s.bytes.get(off..off + 4)?;
        Some(u32::from_le_bytes(bytes.try_into().unwrap()))
    }

    pub fn symbol(&self, name: &str) -> Option<&Symbol> {
        self.symbols.iter().find(|s| s.name == name)
    }

    /// First symbol (in symbol order) defined exactly at `addr`.
    pub fn symbol_at(&self, addr: u32) -> Option<&Symbol> {
        self.symbols.iter().find(|s| s.address == addr)
    }

    /// Innermost function symbol at or below `addr` in the same section.
    pub fn function_containing(&self, addr: u32) -> Option<&Symbol> {
        let section = self.section_at(addr)?;
        self.symbols
            .iter()
            .filter(|s| s.kind == SymbolKind::Function && s.address <= addr && s.address >= section.base)
            .max_by_key(|s| s.address)
    }

    pub fn is_code(&self, addr: u32) -> bool {
        self.section_at(addr).is_some_and(|s| s.kind.is_code())
    }

    pub fn trust_at(&self, addr: u32) -> Option<Trust> {
        self.section_at(addr).map(|s| s.trust)
    }

    pub fn jumptable_at(&self, base: u32) -> Option<&Jumptable> {
        self.jumptables.iter().find(|j| j.base == base)
    }

    /// Structural checks shared by every way of producing an image.
    pub fn check(&self) -> Result<(), String> {
        let mut sorted: Vec<&ImageSection> = self.sections.iter().collect();
        sorted.sort_by_key(|s| s.base);
        for pair in sorted.windows(2) {
            if pair[1].base < pair[0].end() {
                return Err(format!(
                    "OVERLAP: sections {} and {} overlap at {:#010x}",
                    pair[0].name, pair[1].name, pair[1].base
                ));
            }
        }
        for sym in &self.symbols {
            let inside = self
                .sections
                .iter()
                .any(|s| sym.address >= s.base && sym.address <= s.end());
            if !inside {
                return Err(format!(
                    "symbol {} at {:#010x} is outside every section",
                    sym.name, sym.address
                ));
            }
        }
        for jt in &self.jumptables {
            let ok = self.section_at(jt.base).is_some_and(|s| {
                jt.end() <= s.end() && (s.kind.is_code() || s.kind == SectionKind::Rodata)
            });
            if !ok {
                return Err(format!(
                    "jumptable at {:#010x} is not inside a rodata or code section",
                    jt.base
                ));
            }
        }
        Ok(())
    }
}

/// Renders an image in the canonical text format.
///
/// Sections are emitted by ascending base with their contents as `.word`
/// lines; symbols follow their section header in address order. Words in
/// code sections carry a disassembly comment.
pub fn emit_image(img: &Image) -> String {
    let mut out = String::new();
    let mut sections: Vec<&ImageSection> = img.sections.iter().collect();
    sections.sort_by_key(|s| s.base);
    let mut symbols: Vec<&Symbol> = img.symbols.iter().collect();
    symbols.sort_by(|a, b| (a.address, &a.name).cmp(&(b.address, &b.name)));

    for s in &sections {
        out.push_str(&format!(
            ".section {} kind={} trust={} base={:#010x}\n",
            s.name,
            s.kind,
            s.trust.name(),
            s.base
        ));
        // Symbols at a section's end belong to it only if no later section starts there.
        for sym in symbols.iter().filter(|sym| owning_section(&sections, sym.address) == Some(s.base)) {
            out.push_str(&format!(
                ".sym {} {:#x} {}\n",
                sym.name,
                sym.address - s.base,
                sym.kind.name()
            ));
        }
        for chunk in s.bytes.chunks(4) {
            let mut word = [0u8; 4];
            word[..chunk.len()].copy_from_slice(chunk);
            let word = u32::from_le_bytes(word);
            if s.kind.is_code() {
                match isa::decode(word) {
                    Ok(i) => out.push_str(&format!(".word {word:#010x}  # {i}\n")),
                    Err(_) => out.push_str(&format!(".word {word:#010x}\n")),
                }
            } else {
                out.push_str(&format!(".word {word:#010x}\n"));
            }
        }
    }
    let mut tables = img.jumptables.clone();
    tables.sort_by_key(|j| j.base);
    for jt in tables {
        out.push_str(&format!(".jumptable {:#010x} {}\n", jt.base, jt.entry_count));
    }
    out.push_str(&format!(".entry {}\n", address_name(img, &symbols, img.entry)));
    if let Some(h) = img.handler {
        out.push_str(&format!(".handler {}\n", address_name(img, &symbols, h)));
    }
    out
}

fn owning_section(sorted: &[&ImageSection], addr: u32) -> Option<u32> {
    sorted
        .iter()
        .find(|s| s.contains(addr))
        .or_else(|| sorted.iter().rev().find(|s| addr == s.end()))
        .map(|s| s.base)
}

fn address_name(_img: &Image, symbols: &[&Symbol], addr: u32) -> String {
    symbols
        .iter()
        .find(|s| s.address == addr && s.kind == SymbolKind::Function)
        .map(|s| s.name.clone())
        .unwrap_or_else(|| format!("{addr:#010x}"))
}

/// Parses the text format. Every section must carry an explicit base.
pub fn parse_image(text: &str) -> Result<Image, AsmError> {
    asm::assemble_text(text, None)
}

impl fmt::Display for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&emit_image(self))
    }
}
