//! Program images: the in-memory form, text and ELF loaders, and the
//! instrumenting program builder.

pub mod asm;
pub mod elf;
pub mod image;
pub mod instrument;
pub mod overhead;

pub use asm::{assemble, AsmError};
pub use image::{emit_image, parse_image, Image, ImageSection, Jumptable, Symbol, SymbolKind, Trust};
pub use instrument::{
    icall_sequence, instrument_function, switch_sequence, FunctionSkeleton, Fragments, Mode, ProgramBuilder,
    SkeletonError,
};
pub use elf::{load_elf32, ElfError};
pub use overhead::{predicted_overhead, CallEvent};
