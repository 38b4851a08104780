//! Static instruction-count model for the instrumentation.
//!
//! Entering a non-leaf function through its trampoline costs three trusted
//! instructions (`sw`, `addi`, `j`) and its epilogue one more (the `x18`
//! decrement). Entering through the function symbol itself, as indirect
//! calls do, adds the entry jump.

use crate::isa::{self, Op, Reg};

use super::image::{Image, SymbolKind};
use super::instrument::TRAMPOLINE_SUFFIX;

pub const TRAMPOLINE_COST: u64 = 3;
pub const EPILOGUE_COST: u64 = 1;
pub const ENTRY_JUMP_COST: u64 = 1;

/// One dynamic call: where it was made, where control went, and whether the
/// call instruction was a direct `jal`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CallEvent {
    pub site: u32,
    pub target: u32,
    pub direct: bool,
}

fn direct_jump_target(img: &Image, addr: u32) -> Option<u32> {
    let i = isa::decode(img.read_word(addr)?).ok()?;
    (i.op == Op::Jal && i.rd == Reg::ZERO).then(|| addr.wrapping_add(i.imm as u32))
}

/// Name of the function a baseline call enters, and whether it was entered
/// by a direct call.
fn callee<'a>(baseline: &'a Image, ev: &CallEvent) -> Option<(&'a str, bool)> {
    let is_function = |a: u32| {
        baseline
            .symbols
            .iter()
            .find(|s| s.address == a && s.kind == SymbolKind::Function)
    };
    if let Some(s) = is_function(ev.target) {
        return Some((&s.name, ev.direct));
    }
    // A call into a code jumptable entry, which jumps on to the function.
    let in_table = baseline
        .jumptables
        .iter()
        .any(|t| ev.target >= t.base && ev.target < t.end() && baseline.is_code(t.base));
    if in_table {
        let dest = direct_jump_target(baseline, ev.target)?;
        return is_function(dest).map(|s| (s.name.as_str(), false));
    }
    None
}

/// Extra retired instructions the instrumented build executes for `calls`
/// observed in a run of the baseline build.
pub fn predicted_overhead(baseline: &Image, instrumented: &Image, calls: &[CallEvent]) -> u64 {
    calls
        .iter()
        .filter_map(|ev| callee(baseline, ev))
        .map(|(name, direct)| {
            let Some(tramp) = instrumented.symbol(&format!("{name}{TRAMPOLINE_SUFFIX}")) else {
                return 0;
            };
            let entry_jump = instrumented
                .symbol(name)
                .and_then(|s| direct_jump_target(instrumented, s.address))
                == Some(tramp.address);
            TRAMPOLINE_COST + EPILOGUE_COST + if !direct && entry_jump { ENTRY_JUMP_COST } else { 0 }
        })
        .sum()
}
