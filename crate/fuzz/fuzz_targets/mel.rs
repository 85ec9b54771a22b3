#![no_main]

use libfuzzer_sys::fuzz_target;
use moa_tts::eval::MelRecord;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = MelRecord::decode(data) {
        assert_eq!(r.mel.rows(), r.pitch.len());
    }
});
