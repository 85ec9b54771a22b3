#![no_main]

use libfuzzer_sys::fuzz_target;
use moa_tts::data::Utterance;

fuzz_target!(|data: &[u8]| {
    if let Ok(u) = Utterance::decode(data) {
        assert_eq!(u.frames(), u.durations.iter().sum::<usize>());
    }
});
