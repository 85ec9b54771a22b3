#![no_main]

use libfuzzer_sys::fuzz_target;
use moa_tts::data::{parse_manifest, ManifestEntry};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(e) = ManifestEntry::parse_line(text) {
            assert_eq!(ManifestEntry::parse_line(&e.to_line()).expect("round trip"), e);
        }
        let _ = parse_manifest(text);
    }
});
