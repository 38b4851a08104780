//! Minimal ELF32 ingestion for statically linked RISC-V executables.

use object::elf;
use object::read::elf::{ElfFile32, FileHeader, SectionHeader};
use object::{LittleEndian, Object, ObjectSection, ObjectSymbol, SymbolKind as ObjSymbolKind};
use thiserror::Error;

use crate::layout::SectionKind;

use super::image::{Image, ImageSection, Jumptable, Symbol, SymbolKind, Trust};

pub const JUMPTABLE_PREFIX: &str = "__jt_";
pub const TRUSTED_PREFIX: &str = ".trusted";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ElfError {
    #[error("not a loadable image: {0}")]
    Format(String),
    #[error("unsupported ELF feature: {0}")]
    UnsupportedFeature(String),
}

fn format(msg: impl Into<String>) -> ElfError {
    ElfError::Format(msg.into())
}

pub fn is_elf(bytes: &[u8]) -> bool {
    bytes.starts_with(&elf::ELFMAG)
}

fn section_kind(name: &str, exec: bool) -> SectionKind {
    if let Some(rest) = name.strip_prefix(TRUSTED_PREFIX) {
        if exec {
            SectionKind::TrustedCode
        } else if rest.contains("shadow") {
            SectionKind::ShadowStack
        } else {
            SectionKind::TrustedData
        }
    } else if exec {
        SectionKind::UntrustedCode
    } else if name.starts_with(".rodata") {
        SectionKind::Rodata
    } else if name.starts_with(".stack") {
        SectionKind::UntrustedStack
    } else {
        SectionKind::UntrustedData
    }
}

/// Reads a little-endian ELF32 RISC-V executable.
pub fn load_elf32(bytes: &[u8]) -> Result<Image, ElfError> {
    if !is_elf(bytes) {
        return Err(format("bad ELF magic"));
    }
    let ident = bytes.get(..16).ok_or_else(|| format("truncated header"))?;
    if ident[4] != elf::ELFCLASS32 {
        return Err(format("not ELFCLASS32"));
    }
    if ident[5] != elf::ELFDATA2LSB {
        return Err(format("not little-endian"));
    }
    // Header parsing needs 4-byte alignment; heap copies provide it.
    let owned;
    let bytes = if bytes.as_ptr().align_offset(4) == 0 {
        bytes
    } else {
        owned = bytes.to_vec();
        owned.as_slice()
    };
    let file = ElfFile32::<LittleEndian>::parse(bytes).map_err(|e| format(e.to_string()))?;
    let header = file.elf_header();
    let endian = LittleEndian;
    if header.e_machine(endian) != elf::EM_RISCV {
        return Err(format(format!("machine {} is not RISC-V", header.e_machine(endian))));
    }
    if header.e_type(endian) != elf::ET_EXEC {
        return Err(format("not an executable"));
    }

    let mut img = Image {
        entry: header.e_entry(endian),
        ..Image::default()
    };
    for section in file.sections() {
        let sh = section.elf_section_header();
        let sh_type = sh.sh_type(endian);
        let name = section.name().map_err(|e| format(e.to_string()))?;
        if sh_type == elf::SHT_REL || sh_type == elf::SHT_RELA {
            return Err(ElfError::UnsupportedFeature(format!("relocation section {name}")));
        }
        let flags = sh.sh_flags(endian);
        if flags & elf::SHF_ALLOC == 0 || section.size() == 0 {
            continue;
        }
        let exec = flags & elf::SHF_EXECINSTR != 0;
        let data = if sh_type == elf::SHT_NOBITS {
            vec![0; section.size() as usize]
        } else {
            section.data().map_err(|e| format(e.to_string()))?.to_vec()
        };
        img.sections.push(ImageSection {
            name: name.to_string(),
            kind: section_kind(name, exec),
            trust: if name.starts_with(TRUSTED_PREFIX) {
                Trust::Trusted
            } else {
                Trust::Untrusted
            },
            base: section.address() as u32,
            bytes: data,
        });
    }
    img.sections.sort_by_key(|s| s.base);

    for sym in file.symbols() {
        if !sym.is_definition() {
            continue;
        }
        let Ok(name) = sym.name() else { continue };
        let kind = if name.starts_with(JUMPTABLE_PREFIX) {
            img.jumptables.push(Jumptable {
                base: sym.address() as u32,
                entry_count: (sym.size() / Jumptable::ENTRY_SIZE as u64) as u32,
            });
            SymbolKind::Jumptable
        } else {
            match sym.kind() {
                ObjSymbolKind::Text => SymbolKind::Function,
                ObjSymbolKind::Data => SymbolKind::Object,
                _ => continue,
            }
        };
        img.symbols.push(Symbol {
            name: name.to_string(),
            address: sym.address() as u32,
            kind,
        });
    }
    img.symbols
        .sort_by(|a, b| (a.address, &a.name).cmp(&(b.address, &b.name)));
    img.jumptables.sort_by_key(|j| j.base);
    img.check().map_err(format)?;
    Ok(img)
}
