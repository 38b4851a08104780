//! Vetted indirect jumps.
//!
//! One entry per line: `allow <symbol> <pc-hex> -> <dest-hex>[,<dest-hex>...]`.
//! `#` starts a comment.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::layout::parse_number;
use crate::program::Image;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WhitelistError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: UNKNOWN-SYMBOL `{name}`")]
    UnknownSymbol { line: usize, name: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WhitelistEntry {
    pub function: String,
    pub pc: u32,
    pub destinations: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Whitelist {
    entries: Vec<WhitelistEntry>,
    by_pc: BTreeMap<u32, Vec<u32>>,
}

impl Whitelist {
    pub fn new(entries: Vec<WhitelistEntry>) -> Whitelist {
        let mut wl = Whitelist::default();
        for e in entries {
            wl.push(e);
        }
        wl
    }

    pub fn push(&mut self, e: WhitelistEntry) {
        let dests = self.by_pc.entry(e.pc).or_default();
        for d in &e.destinations {
            if !dests.contains(d) {
                dests.push(*d);
            }
        }
        self.entries.push(e);
    }

    pub fn entries(&self) -> &[WhitelistEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn destinations(&self, pc: u32) -> Option<&[u32]> {
        self.by_pc.get(&pc).map(Vec::as_slice)
    }
}

/// Parses whitelist text; every named symbol must exist in `img`.
pub fn parse_whitelist(text: &str, img: &Image) -> Result<Whitelist, WhitelistError> {
    let mut wl = Whitelist::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let code = raw.split('#').next().unwrap().trim();
        if code.is_empty() {
            continue;
        }
        let perr = |message: String| WhitelistError::Parse { line, message };
        let (lhs, rhs) = code
            .split_once("->")
            .ok_or_else(|| perr("expected `allow <symbol> <pc> -> <dest>[,...]`".into()))?;
        let words: Vec<&str> = lhs.split_whitespace().collect();
        let [kw, function, pc] = words.as_slice() else {
            return Err(perr("expected `allow <symbol> <pc> -> <dest>[,...]`".into()));
        };
        if *kw != "allow" {
            return Err(perr(format!("unknown keyword `{kw}`")));
        }
        if img.symbol(function).is_none() {
            return Err(WhitelistError::UnknownSymbol {
                line,
                name: function.to_string(),
            });
        }
        let pc = parse_number(pc).map_err(perr)?;
        let destinations = rhs
            .split(',')
            .map(|d| parse_number(d.trim()).map_err(perr))
            .collect::<Result<Vec<_>, _>>()?;
        wl.push(WhitelistEntry {
            function: function.to_string(),
            pc,
            destinations,
        });
    }
    Ok(wl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{Symbol, SymbolKind};

    fn img() -> Image {
        Image {
            symbols: vec![Symbol {
                name: "memset".into(),
                address: 0x1F000,
                kind: SymbolKind::Function,
            }],
            ..Image::default()
        }
    }

    #[test]
    fn empty_and_comments() {
        assert!(parse_whitelist("", &img()).unwrap().is_empty());
        assert!(parse_whitelist("# nothing\n\n", &img()).unwrap().is_empty());
    }

    #[test]
    fn entries_parse() {
        let wl = parse_whitelist("allow memset 0x1F010 -> 0x1F020, 0x1F024\n", &img()).unwrap();
        assert_eq!(wl.destinations(0x1F010), Some(&[0x1F020, 0x1F024][..]));
        assert_eq!(wl.entries()[0].function, "memset");
    }

    #[test]
    fn unknown_symbol() {
        let err = parse_whitelist("allow nope 0x1 -> 0x2", &img()).unwrap_err();
        assert!(matches!(err, WhitelistError::UnknownSymbol { line: 1, .. }));
        assert!(err.to_string().contains("UNKNOWN-SYMBOL"));
        assert!(matches!(
            parse_whitelist("permit memset 0x1 -> 0x2", &img()),
            Err(WhitelistError::Parse { .. })
        ));
    }
}
