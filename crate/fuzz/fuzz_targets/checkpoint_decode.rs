#![no_main]

use libfuzzer_sys::fuzz_target;
use maskguide::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = checkpoint::decode(data) {
        let again = checkpoint::decode(&checkpoint::encode(&c)).expect("encoded checkpoint decodes");
        assert_eq!(again, c);
    }
});
