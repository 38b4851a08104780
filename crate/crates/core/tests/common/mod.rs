//! Random well-formed programs for property tests.
#![allow(dead_code)]

use detrap::layout::{default_specs, plan_layout, MemoryMap};
use detrap::program::{icall_sequence, switch_sequence, FunctionSkeleton, ProgramBuilder};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn default_map() -> MemoryMap {
    plan_layout(&default_specs(), 32).unwrap()
}

struct Gen {
    rng: StdRng,
    labels: usize,
}

impl Gen {
    fn label(&mut self, f: &str) -> String {
        self.labels += 1;
        format!("{f}_L{}", self.labels)
    }
}

/// A terminating program: calls only go to higher-numbered functions and
/// every branch is forward. `main` exits with 0.
pub fn random_program(seed: u64) -> ProgramBuilder {
    let mut g = Gen {
        rng: StdRng::seed_from_u64(seed),
        labels: 0,
    };
    let n = g.rng.gen_range(1..=6);
    let leaf: Vec<bool> = (0..n).map(|_| g.rng.gen_bool(0.4)).collect();
    let names: Vec<String> = (0..n).map(|i| format!("f{i}")).collect();

    // Call table over a random subset of functions after f0.
    let table: Vec<usize> = (1..n).filter(|_| g.rng.gen_bool(0.5)).collect();
    let mut builder = ProgramBuilder::new();
    let mut data = Vec::new();
    if !table.is_empty() {
        let entries: Vec<&str> = table.iter().map(|&i| names[i].as_str()).collect();
        builder = builder.call_table("calltab", &entries);
    }

    let mut fns = Vec::new();
    for i in 0..n {
        let name = names[i].clone();
        let frame = if leaf[i] { 16 * g.rng.gen_range(0..2) } else { 16 * g.rng.gen_range(1..4) };
        let mut body: Vec<String> = Vec::new();
        let mut pending: Vec<String> = Vec::new();
        for _ in 0..g.rng.gen_range(0..10) {
            match g.rng.gen_range(0..9) {
                0 => body.push(format!("    addi a0, a0, {}", g.rng.gen_range(-100..100))),
                1 => {
                    body.push(format!("    li t0, {}", g.rng.gen_range(-5000..5000)));
                    body.push("    mul a1, a1, t0".into());
                    body.push("    xor a0, a0, a1".into());
                }
                2 if frame >= 16 => {
                    let off = 4 * g.rng.gen_range(0..(frame / 4 - 1));
                    body.push(format!("    sw a0, {off}(sp)"));
                    body.push(format!("    lw a1, {off}(sp)"));
                }
                3 => {
                    let l = g.label(&name);
                    body.push("    andi t1, a0, 1".into());
                    body.push(format!("    beqz t1, {l}"));
                    body.push("    addi a1, a1, 3".into());
                    pending.push(l);
                }
                4 => {
                    let tab = g.label(&name);
                    let done = g.label(&name);
                    let cases: Vec<String> = (0..4).map(|_| g.label(&name)).collect();
                    body.push("    andi t4, a0, 7".into());
                    body.extend(switch_sequence("t4", &tab, 4, &done));
                    for (k, c) in cases.iter().enumerate() {
                        body.push(format!("{c}:"));
                        body.push(format!("    addi a0, a0, {}", k + 1));
                        body.push(format!("    j {done}"));
                    }
                    body.push(format!("{done}:"));
                    let refs: Vec<&str> = cases.iter().map(String::as_str).collect();
                    builder = builder.switch_table(&tab, &refs);
                }
                5 | 6 if !leaf[i] && i + 1 < n => {
                    let j = g.rng.gen_range(i + 1..n);
                    body.push(format!("    call {}", names[j]));
                }
                7 if !leaf[i] => {
                    body.push("    li a0, 46".into());
                    body.push("    call __putc".into());
                }
                8 if !leaf[i] => {
                    let slots: Vec<usize> = (0..table.len()).filter(|&k| table[k] > i).collect();
                    if slots.is_empty() {
                        continue;
                    }
                    let k = slots[g.rng.gen_range(0..slots.len())];
                    let ptr = g.label(&name);
                    let bad = g.label(&name);
                    let ok = g.label(&name);
                    data.push(format!("{ptr}: .word calltab+{}", 4 * k));
                    body.push(format!("    la t6, {ptr}"));
                    body.push("    lw t5, 0(t6)".into());
                    body.extend(icall_sequence("t5", "calltab", table.len() as u32, &bad));
                    body.push(format!("    j {ok}"));
                    body.push(format!("{bad}:"));
                    body.push("    call __cfi_fail".into());
                    body.push(format!("{ok}:"));
                }
                _ => {}
            }
            if g.rng.gen_bool(0.3) {
                if let Some(l) = pending.pop() {
                    body.push(format!("{l}:"));
                }
            }
        }
        for l in pending {
            body.push(format!("{l}:"));
        }
        let refs: Vec<&str> = body.iter().map(String::as_str).collect();
        let mut f = if leaf[i] {
            FunctionSkeleton::leaf(&name, &refs)
        } else {
            FunctionSkeleton::non_leaf(&name, frame, &refs)
        };
        f.frame_size = frame;
        if g.rng.gen_bool(0.3) {
            f = f.external();
        }
        fns.push(f);
    }

    let mut main_body: Vec<String> = Vec::new();
    for _ in 0..g.rng.gen_range(1..4) {
        main_body.push(format!("    li a0, {}", g.rng.gen_range(0..50)));
        main_body.push(format!("    call {}", names[g.rng.gen_range(0..n)]));
    }
    main_body.push("    li a0, 0".into());
    let refs: Vec<&str> = main_body.iter().map(String::as_str).collect();
    builder = builder.function(FunctionSkeleton::non_leaf("main", 16, &refs));
    for f in fns {
        builder = builder.function(f);
    }
    if !data.is_empty() {
        let refs: Vec<&str> = data.iter().map(String::as_str).collect();
        builder = builder.data(&refs);
    }
    builder
}
