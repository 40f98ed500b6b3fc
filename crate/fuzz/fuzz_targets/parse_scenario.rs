#![no_main]
use std::path::Path;

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // shape references resolve under a directory that does not exist
        let _ = edgeflip::scenario::parse_scenario(text, "fuzz.scn", Path::new("/nonexistent"));
    }
});
