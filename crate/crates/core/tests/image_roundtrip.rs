mod common;

use common::{default_map, random_program};
use detrap::layout::SectionKind;
use detrap::program::{emit_image, parse_image, Image, ImageSection, Mode, Trust};
use proptest::prelude::*;

#[test]
fn word_is_little_endian() {
    let img = parse_image(".section .d kind=untrusted-data trust=untrusted base=0x28000\n.word 0x11223344\n.entry 0x28000\n").unwrap();
    assert_eq!(img.sections[0].bytes, vec![0x44, 0x33, 0x22, 0x11]);
}

#[test]
fn empty_image_round_trips() {
    let img = Image::default();
    assert_eq!(parse_image(&emit_image(&img)).unwrap(), img);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn built_programs_round_trip(seed in any::<u64>(), detrap in any::<bool>()) {
        let mode = if detrap { Mode::Detrap } else { Mode::Baseline };
        let img = random_program(seed).build(mode, &default_map()).unwrap();
        let text = emit_image(&img);
        let back = parse_image(&text).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(emit_image(&back), text);
    }

    #[test]
    fn data_sections_round_trip(words in proptest::collection::vec(any::<u32>(), 1..64), base in 0u32..0x100) {
        let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        let img = Image {
            sections: vec![ImageSection {
                name: ".data".into(),
                kind: SectionKind::UntrustedData,
                trust: Trust::Untrusted,
                base: 0x28000 + base * 16,
                bytes,
            }],
            entry: 0x28000,
            ..Image::default()
        };
        let text = emit_image(&img);
        let back = parse_image(&text).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(emit_image(&back), text);
    }
}
