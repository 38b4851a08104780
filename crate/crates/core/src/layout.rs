//! Memory layout planning and trigger-policy derivation.
//!
//! Sections are packed upward from address 0 in a fixed order so that two
//! boundaries describe everything the trigger unit needs:
//!
//! ```text
//! 0 ┌ mmio ─ trusted-code ┐ privileged code region   [0, privileged_top)
//!   │ rodata ─ trusted-data ─ shadow-stack ─ untrusted-code
//!   └──────────────────── write-limited region        [0, write_limited_top)
//!     untrusted-stack ─ untrusted-data                (writable by anyone)
//! ```
//!
//! The untrusted stack sits directly above the write-limited region, so an
//! untrusted stack overflow is itself a write into protected memory.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::triggers::{Relation, Target, TriggerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SectionKind {
    Mmio,
    TrustedCode,
    Rodata,
    TrustedData,
    ShadowStack,
    UntrustedCode,
    UntrustedStack,
    UntrustedData,
}

impl SectionKind {
    /// Every kind, in address order.
    pub const ORDER: [SectionKind; 8] = [
        SectionKind::Mmio,
        SectionKind::TrustedCode,
        SectionKind::Rodata,
        SectionKind::TrustedData,
        SectionKind::ShadowStack,
        SectionKind::UntrustedCode,
        SectionKind::UntrustedStack,
        SectionKind::UntrustedData,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SectionKind::Mmio => "mmio",
            SectionKind::TrustedCode => "trusted-code",
            SectionKind::Rodata => "rodata",
            SectionKind::TrustedData => "trusted-data",
            SectionKind::ShadowStack => "shadow-stack",
            SectionKind::UntrustedCode => "untrusted-code",
            SectionKind::UntrustedStack => "untrusted-stack",
            SectionKind::UntrustedData => "untrusted-data",
        }
    }

    pub fn is_code(self) -> bool {
        matches!(self, SectionKind::TrustedCode | SectionKind::UntrustedCode)
    }

    /// Kinds whose content is trusted by construction.
    pub fn is_trusted(self) -> bool {
        !matches!(
            self,
            SectionKind::UntrustedCode | SectionKind::UntrustedStack | SectionKind::UntrustedData
        )
    }

    fn rank(self) -> usize {
        SectionKind::ORDER.iter().position(|k| *k == self).unwrap()
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SectionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SectionKind::ORDER
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown section kind `{s}`"))
    }
}

pub const DEFAULT_ALIGN: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SectionSpec {
    pub kind: SectionKind,
    pub size: u32,
    pub align: u32,
}

impl SectionSpec {
    pub fn new(kind: SectionKind, size: u32) -> SectionSpec {
        SectionSpec {
            kind,
            size,
            align: DEFAULT_ALIGN,
        }
    }
}

/// The canonical section sizes used when no layout file is given.
pub fn default_specs() -> Vec<SectionSpec> {
    use SectionKind::*;
    [
        (Mmio, 64 << 10),
        (TrustedCode, 32 << 10),
        (Rodata, 16 << 10),
        (TrustedData, 8 << 10),
        (ShadowStack, 4 << 10),
        (UntrustedCode, 32 << 10),
        (UntrustedStack, 4 << 10),
        (UntrustedData, 32 << 10),
    ]
    .into_iter()
    .map(|(k, s)| SectionSpec::new(k, s))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("invalid section specs: {0}")]
    Spec(String),
    #[error("sections do not fit a {bits}-bit address space")]
    Overlap { bits: u32 },
    #[error("layout file line {line}: {message}")]
    Config { line: usize, message: String },
}

/// A placed section: `[base, limit)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub kind: SectionKind,
    #[serde(with = "hex_u32")]
    pub base: u32,
    #[serde(with = "hex_u32")]
    pub limit: u32,
}

impl Region {
    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && addr < self.limit
    }

    pub fn size(&self) -> u32 {
        self.limit - self.base
    }
}

/// A concrete placement of every section kind.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct MemoryMap {
    pub sections: Vec<Region>,
}

impl MemoryMap {
    pub fn region(&self, kind: SectionKind) -> Region {
        *self
            .sections
            .iter()
            .find(|r| r.kind == kind)
            .unwrap_or_else(|| panic!("memory map has no {kind} section"))
    }

    pub fn try_region(&self, kind: SectionKind) -> Option<Region> {
        self.sections.iter().find(|r| r.kind == kind).copied()
    }

    /// Bottom of the unprivileged code region.
    pub fn privileged_top(&self) -> u32 {
        self.region(SectionKind::UntrustedCode).base
    }

    /// Bottom of the non-write-limited region.
    pub fn write_limited_top(&self) -> u32 {
        self.region(SectionKind::UntrustedStack).base
    }

    /// Last word of the shadow stack; writing it means the stack is full.
    pub fn shadow_stack_top_entry(&self) -> u32 {
        self.region(SectionKind::ShadowStack).limit - 4
    }

    /// One past the highest mapped byte.
    pub fn end(&self) -> u32 {
        self.sections.iter().map(|r| r.limit).max().unwrap_or(0)
    }

    pub fn region_of(&self, addr: u32) -> Option<Region> {
        self.sections.iter().find(|r| r.contains(addr)).copied()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "sections": self.sections,
            "privileged_top": hex(self.privileged_top()),
            "write_limited_top": hex(self.write_limited_top()),
            "shadow_stack_top_entry": hex(self.shadow_stack_top_entry()),
        })
    }

    pub fn from_json(text: &str) -> Result<MemoryMap, serde_json::Error> {
        serde_json::from_str(text)
    }
}

pub(crate) fn hex(v: u32) -> String {
    format!("{v:#010x}")
}

pub(crate) mod hex_u32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u32, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::hex(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
        let text = String::deserialize(d)?;
        super::parse_number(&text).map_err(serde::de::Error::custom)
    }
}

/// Parses a decimal or `0x` hexadecimal unsigned integer.
pub(crate) fn parse_number(text: &str) -> Result<u32, String> {
    let t = text.replace('_', "");
    let parsed = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16),
        None => t.parse::<u32>(),
    };
    parsed.map_err(|_| format!("invalid number `{text}`"))
}

/// Places one section of every kind upward from address 0.
pub fn plan_layout(specs: &[SectionSpec], address_space_bits: u32) -> Result<MemoryMap, LayoutError> {
    let mut by_kind = BTreeMap::new();
    for spec in specs {
        if spec.size == 0 || spec.size % 4 != 0 {
            return Err(LayoutError::Spec(format!(
                "{} size {} must be a positive multiple of 4",
                spec.kind, spec.size
            )));
        }
        if !spec.align.is_power_of_two() {
            return Err(LayoutError::Spec(format!(
                "{} alignment {} is not a power of two",
                spec.kind, spec.align
            )));
        }
        if by_kind.insert(spec.kind, *spec).is_some() {
            return Err(LayoutError::Spec(format!("duplicate {} section", spec.kind)));
        }
    }
    if let Some(missing) = SectionKind::ORDER.iter().find(|k| !by_kind.contains_key(k)) {
        return Err(LayoutError::Spec(format!("missing {missing} section")));
    }

    let space: u64 = 1u64 << address_space_bits.min(32);
    let mut cursor: u64 = 0;
    let mut sections = Vec::with_capacity(8);
    for kind in SectionKind::ORDER {
        let spec = by_kind[&kind];
        let align = spec.align as u64;
        let base = cursor.div_ceil(align) * align;
        let limit = base + spec.size as u64;
        // Keep the limit representable so region arithmetic never wraps.
        if limit >= space {
            return Err(LayoutError::Overlap {
                bits: address_space_bits,
            });
        }
        sections.push(Region {
            kind,
            base: base as u32,
            limit: limit as u32,
        });
        cursor = limit;
    }
    Ok(MemoryMap { sections })
}

/// The three triggers enforcing write protection and shadow-stack overflow.
pub fn derive_trigger_policy(map: &MemoryMap) -> Vec<TriggerConfig> {
    vec![
        TriggerConfig::new(Target::ExecPc, Relation::Geq, map.privileged_top()).chained(),
        TriggerConfig::new(Target::StoreAddr, Relation::Lt, map.write_limited_top()),
        TriggerConfig::new(Target::StoreAddr, Relation::Eq, map.shadow_stack_top_entry()),
    ]
}

#[derive(Serialize)]
struct PolicyEntry {
    target: Target,
    relation: Relation,
    compare: String,
    chain: bool,
}

pub fn policy_json(policy: &[TriggerConfig]) -> serde_json::Value {
    let triggers: Vec<PolicyEntry> = policy
        .iter()
        .map(|t| PolicyEntry {
            target: t.target,
            relation: t.relation,
            compare: hex(t.compare),
            chain: t.chain,
        })
        .collect();
    serde_json::json!({ "triggers": triggers })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING-KEBAB-CASE")]
pub enum LayoutFindingKind {
    Missing,
    Duplicate,
    Empty,
    Unanchored,
    Ordering,
    Overlap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayoutFinding {
    pub kind: LayoutFindingKind,
    pub message: String,
}

/// Re-checks every map invariant; an empty result means the map is usable.
pub fn validate_layout(map: &MemoryMap) -> Vec<LayoutFinding> {
    let mut findings = Vec::new();
    let mut push = |kind, message: String| findings.push(LayoutFinding { kind, message });

    for kind in SectionKind::ORDER {
        match map.sections.iter().filter(|r| r.kind == kind).count() {
            0 => push(LayoutFindingKind::Missing, format!("no {kind} section")),
            1 => {}
            n => push(LayoutFindingKind::Duplicate, format!("{n} {kind} sections")),
        }
    }
    for r in &map.sections {
        if r.limit <= r.base || r.size() % 4 != 0 {
            push(
                LayoutFindingKind::Empty,
                format!("{} [{}, {}) is empty or not word sized", r.kind, hex(r.base), hex(r.limit)),
            );
        }
    }
    if let Some(first) = map.sections.iter().min_by_key(|r| r.base) {
        if first.kind != SectionKind::Mmio || first.base != 0 {
            push(
                LayoutFindingKind::Unanchored,
                format!("lowest section is {} at {}, expected mmio at 0", first.kind, hex(first.base)),
            );
        }
    }

    let mut sorted = map.sections.clone();
    sorted.sort_by_key(|r| (r.base, r.kind.rank()));
    for pair in sorted.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b.base < a.limit {
            push(
                LayoutFindingKind::Overlap,
                format!("{} and {} overlap at {}", a.kind, b.kind, hex(b.base)),
            );
        }
        if a.kind.rank() > b.kind.rank() {
            push(
                LayoutFindingKind::Ordering,
                format!("{} is placed below {}", b.kind, a.kind),
            );
        }
    }
    findings
}

/// Parses the flat `section.<kind>.size=<bytes>` layout file format.
///
/// `section.<kind>.align=<bytes>` lines are also accepted. Blank lines and
/// `#` comments are ignored.
pub fn parse_layout_config(text: &str) -> Result<Vec<SectionSpec>, LayoutError> {
    let mut specs: Vec<SectionSpec> = Vec::new();
    let mut aligns: Vec<(SectionKind, u32, usize)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| LayoutError::Config {
            line: line_no,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        let [prefix, kind, field] = parts.as_slice() else {
            return Err(err(format!("unknown key `{}`", key.trim())));
        };
        if *prefix != "section" {
            return Err(err(format!("unknown key `{}`", key.trim())));
        }
        let kind: SectionKind = kind.parse().map_err(err)?;
        let value = parse_number(value.trim()).map_err(err)?;
        match *field {
            "size" => specs.push(SectionSpec::new(kind, value)),
            "align" => aligns.push((kind, value, line_no)),
            other => return Err(err(format!("unknown field `{other}`"))),
        }
    }
    for (kind, align, line) in aligns {
        match specs.iter_mut().find(|s| s.kind == kind) {
            Some(spec) => spec.align = align,
            None => {
                return Err(LayoutError::Config {
                    line,
                    message: format!("alignment given for {kind} without a size"),
                })
            }
        }
    }
    Ok(specs)
}

/// Renders specs back to the layout file format.
pub fn render_layout_config(specs: &[SectionSpec]) -> String {
    let mut out = String::new();
    for s in specs {
        out.push_str(&format!("section.{}.size={}\n", s.kind, s.size));
        if s.align != DEFAULT_ALIGN {
            out.push_str(&format!("section.{}.align={}\n", s.kind, s.align));
        }
    }
    out
}
