#![no_main]

use corrtomo::formats::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(m) = Manifest::parse(text) {
        // whatever parses must re-parse to the same entries
        let again = Manifest::parse(&m.to_text()).expect("printed manifest parses");
        assert_eq!(again.entries(), m.entries());
    }
});
