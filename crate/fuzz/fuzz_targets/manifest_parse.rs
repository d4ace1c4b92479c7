#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use maskguide::dataset::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = Manifest::parse(text, Path::new("."), "fuzz") {
        // Canonical form must parse back to the same manifest.
        let again = Manifest::parse(&m.to_text(), Path::new("."), "fuzz").expect("canonical text parses");
        assert_eq!(again, m);
    }
});
