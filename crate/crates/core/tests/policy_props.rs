use detrap::layout::{
    default_specs, derive_trigger_policy, plan_layout, validate_layout, MemoryMap, SectionKind, SectionSpec,
};
use detrap::triggers::{InstrContext, TriggerCsr, TriggerFile};
use proptest::prelude::*;

fn installed(map: &MemoryMap) -> TriggerFile {
    let mut file = TriggerFile::default();
    for (i, t) in derive_trigger_policy(map).iter().enumerate() {
        file.install(i, t);
    }
    file
}

/// Addresses within 4 bytes of every section edge.
fn boundary_samples(map: &MemoryMap) -> Vec<u32> {
    let mut out = Vec::new();
    for r in &map.sections {
        for edge in [r.base, r.limit] {
            for d in [-4i64, -1, 0, 1, 3, 4] {
                let a = edge as i64 + d;
                if (0..=u32::MAX as i64).contains(&a) {
                    out.push(a as u32);
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn expected_fire(map: &MemoryMap, pc: u32, addr: u32) -> bool {
    (pc >= map.privileged_top() && addr < map.write_limited_top()) || addr == map.shadow_stack_top_entry()
}

fn sizes() -> impl Strategy<Value = Vec<SectionSpec>> {
    proptest::collection::vec(1u32..0x800, 8).prop_map(|words| {
        SectionKind::ORDER
            .iter()
            .zip(words)
            .map(|(k, w)| SectionSpec::new(*k, w * 4))
            .collect()
    })
}

#[test]
fn default_map_oracle() {
    let map = plan_layout(&default_specs(), 32).unwrap();
    assert_eq!(map.privileged_top(), 0x0001_F000);
    assert_eq!(map.write_limited_top(), 0x0002_7000);
    assert_eq!(map.shadow_stack_top_entry(), 0x0001_EFFC);
    assert!(validate_layout(&map).is_empty());
}

#[test]
fn stack_overflow_store_fires() {
    let map = plan_layout(&default_specs(), 32).unwrap();
    let file = installed(&map);
    let stack = map.region(SectionKind::UntrustedStack);
    let pc = map.region(SectionKind::UntrustedCode).base;
    assert!(file.evaluate(&InstrContext::store(pc, stack.base - 4, 0)).is_some());
    assert!(file.evaluate(&InstrContext::store(pc, stack.base, 0)).is_none());
}

#[test]
fn loads_never_fire() {
    let map = plan_layout(&default_specs(), 32).unwrap();
    let file = installed(&map);
    for a in boundary_samples(&map) {
        assert!(file.evaluate(&InstrContext::load(0x1F000, a, 0)).is_none());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn policy_fires_exactly_on_protected_stores(specs in sizes()) {
        let map = plan_layout(&specs, 32).unwrap();
        prop_assert!(validate_layout(&map).is_empty());
        let file = installed(&map);
        let samples = boundary_samples(&map);
        for &pc in samples.iter().filter(|a| *a % 4 == 0) {
            for &addr in &samples {
                let hit = file.evaluate(&InstrContext::store(pc, addr, 0)).is_some();
                prop_assert_eq!(hit, expected_fire(&map, pc, addr), "pc={:#x} addr={:#x}", pc, addr);
            }
        }
    }

    #[test]
    fn pc_leg_alone_does_not_fire(specs in sizes(), pc_off in 0u32..0x100, addr_off in 0u32..0x100) {
        let map = plan_layout(&specs, 32).unwrap();
        let file = installed(&map);
        let pc = map.privileged_top() + pc_off * 4;
        let addr = addr_off * 4;
        // PC leg only (no store), then store leg only (trusted pc).
        prop_assert!(file.evaluate(&InstrContext::exec(pc, 0x13)).is_none());
        if addr != map.shadow_stack_top_entry() {
            prop_assert!(file.evaluate(&InstrContext::store(map.privileged_top() - 4, addr, 0)).is_none());
        }
        prop_assert!(file.evaluate(&InstrContext::store(pc, addr, 0)).is_some());
    }

    #[test]
    fn tdata1_is_warl(index in 0usize..4, value in any::<u32>()) {
        let mut file = TriggerFile::default();
        file.write(TriggerCsr::Tselect, index as u32);
        file.write(TriggerCsr::Tdata1, value);
        let read = file.read(TriggerCsr::Tdata1);
        prop_assert_eq!(read, file.legalize_tdata1(index, value));
        prop_assert_eq!(file.legalize_tdata1(index, read), read);
        file.write(TriggerCsr::Tdata1, read);
        prop_assert_eq!(file.read(TriggerCsr::Tdata1), read);
    }

    #[test]
    fn evaluation_is_pure(pc in any::<u32>(), addr in any::<u32>()) {
        let map = plan_layout(&default_specs(), 32).unwrap();
        let file = installed(&map);
        let before = file.clone();
        let ctx = InstrContext::store(pc & !3, addr, 0);
        let a = file.evaluate(&ctx);
        prop_assert_eq!(a, file.evaluate(&ctx));
        prop_assert_eq!(before, file);
        if let Some(hit) = a {
            prop_assert!(hit.chain_length >= 1);
        }
    }
}
