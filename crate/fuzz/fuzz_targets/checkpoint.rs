#![no_main]

use libfuzzer_sys::fuzz_target;
use moa_tts::format::Container;
use moa_tts::TtsModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::decode(data) {
        let _ = TtsModel::from_container(&c);
    }
});
