#![no_main]

use libfuzzer_sys::fuzz_target;
use moa_tts::format::Container;

// NaN payloads defeat PartialEq, so compare encodings.
fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::decode(data) {
        let bytes = c.encode().expect("decoded container re-encodes");
        let again = Container::decode(&bytes).expect("re-encoded container decodes");
        assert_eq!(again.encode().expect("encodes"), bytes);
    }
});
