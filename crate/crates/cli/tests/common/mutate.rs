//! Seeds one policy violation into the instrumented source of a clean program.

use detrap::scanner::Rule;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;

pub struct Mutant {
    pub rule: Rule,
    pub function: String,
    pub edit: String,
    pub source: String,
}

/// Line indices of one untrusted function.
#[derive(Clone, Debug)]
struct Func {
    name: String,
    leaf: bool,
    epilogue: usize,
    ret: usize,
}

fn untrusted_functions(lines: &[&str]) -> Vec<Func> {
    let mut out = Vec::new();
    let mut untrusted = false;
    for (i, l) in lines.iter().enumerate() {
        if l.starts_with(".section") {
            untrusted = l.contains("kind=untrusted-code");
            continue;
        }
        let Some(name) = l.strip_suffix("$epilogue:") else { continue };
        if !untrusted {
            continue;
        }
        let ret = (i + 1..lines.len()).find(|&k| lines[k].trim() == "ret").expect("epilogue ends in ret");
        out.push(Func {
            name: name.to_string(),
            leaf: lines[i + 1].trim() != "addi s2, s2, -4",
            epilogue: i,
            ret,
        });
    }
    out
}

fn splice(lines: &[&str], at: usize, remove: usize, insert: &[String]) -> String {
    let mut out: Vec<String> = lines[..at].iter().map(|s| s.to_string()).collect();
    out.extend(insert.iter().cloned());
    out.extend(lines[at + remove..].iter().map(|s| s.to_string()));
    out.join("\n") + "\n"
}

fn owned(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// One mutant for `rule`, or `None` when the host has no suitable site.
pub fn mutate(src: &str, rule: Rule, rng: &mut StdRng) -> Option<Mutant> {
    let lines: Vec<&str> = src.lines().collect();
    let funcs = untrusted_functions(&lines);
    let f = funcs.choose(rng)?.clone();
    let (at, remove, insert): (usize, usize, Vec<String>) = match rule {
        Rule::RetIntegrity => {
            let non_leaf = !f.leaf;
            let variants: &[&[&str]] = &[&["    mv ra, a0"], &["    lw ra, 0(sp)"], &["    addi ra, ra, 4"], &["    lui ra, 0x1f"]];
            if non_leaf && rng.gen_bool(0.3) {
                // drop the shadow stack pointer decrement before the reload
                (f.epilogue + 1, 1, vec![])
            } else {
                (f.ret, 0, owned(variants.choose(rng).unwrap()))
            }
        }
        Rule::SspDiscipline => {
            let v = ["    addi s2, s2, 4", "    mv s2, sp", "    li s2, 0x1e800", "    addi s2, s2, -4", "    addi s2, s2, 8"];
            (f.epilogue, 0, owned(&[v.choose(rng).unwrap()]))
        }
        Rule::CsrPolicy => {
            let v = [
                "    csrw mtvec, a0",
                "    csrs mstatus, t0",
                "    csrwi tdata1, 0",
                "    csrrw zero, tselect, a1",
                "    csrc mepc, a0",
                "    csrw tdata2, a0",
                "    csrw mcause, zero",
                "    csrrs a0, tdata3, a1",
            ];
            (f.epilogue, 0, owned(&[v.choose(rng).unwrap()]))
        }
        Rule::Mret => (f.epilogue, 0, owned(&["    mret"])),
        Rule::Indirect => {
            let v: &[&[&str]] = &[
                &["    jr a0"],
                &["    jalr ra, 0(a1)"],
                &["    jalr zero, 8(t0)"],
                &["    add t0, a0, a1", "    jr t0"],
            ];
            (f.epilogue, 0, owned(v.choose(rng).unwrap()))
        }
        Rule::Align => {
            let target = funcs.choose(rng)?.name.clone();
            let v = [
                vec![format!("    la t0, {target}+2"), "    jr t0".into()],
                vec![format!("    la t0, {target}+2"), "    jalr ra, 0(t0)".into()],
                vec!["    la t0, __mutant_data".into(), "    jr t0".into()],
                vec![format!("    la t0, {target}"), "    jalr zero, 6(t0)".into()],
            ];
            let ins = v.choose(rng).unwrap().clone();
            if ins[0].contains("__mutant_data") {
                return splice_data(&lines, f, rule, ins);
            }
            (f.epilogue, 0, ins)
        }
        Rule::Spill => {
            // Reload the value a checked sequence is about to bound.
            let sites: Vec<(usize, &str)> = lines
                .iter()
                .enumerate()
                .filter_map(|(i, l)| {
                    let t = l.trim();
                    if t == "andi t4, a0, 7" {
                        Some((i + 1, "t4"))
                    } else if t == "lw t5, 0(t6)" {
                        Some((i + 1, "t5"))
                    } else {
                        None
                    }
                })
                .collect();
            let &(at, reg) = sites.choose(rng)?;
            let func = funcs.iter().filter(|g| g.epilogue > at).map(|g| g.name.clone()).next().unwrap_or_default();
            let edit = vec![format!("    sw {reg}, 0(sp)"), format!("    lw {reg}, 0(sp)")];
            return Some(Mutant {
                rule,
                function: func,
                edit: edit.join("; "),
                source: splice(&lines, at, 0, &edit),
            });
        }
        _ => return None,
    };
    let edit = if remove > 0 {
        format!("delete `{}`", lines[at].trim())
    } else {
        insert.iter().map(|s| s.trim()).collect::<Vec<_>>().join("; ")
    };
    Some(Mutant {
        rule,
        function: f.name.clone(),
        edit,
        source: splice(&lines, at, remove, &insert),
    })
}

/// Jumps into a data word appended to the image.
fn splice_data(lines: &[&str], f: Func, rule: Rule, insert: Vec<String>) -> Option<Mutant> {
    let mut src = splice(lines, f.epilogue, 0, &insert);
    let entry = src.find(".entry").expect("source has an entry");
    src.insert_str(
        entry,
        ".section .mutant kind=untrusted-data trust=untrusted base=0x2f000\n__mutant_data:\n    .word 0x13\n",
    );
    Some(Mutant {
        rule,
        function: f.name,
        edit: insert.iter().map(|s| s.trim()).collect::<Vec<_>>().join("; "),
        source: src,
    })
}
