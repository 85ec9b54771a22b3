#![no_main]

use libfuzzer_sys::fuzz_target;
use moa_tts::model::ConfigFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ConfigFile::parse(text) {
            let again = ConfigFile::parse(&cfg.to_toml().expect("serializes")).expect("round trip");
            assert_eq!(again, cfg);
        }
    }
});
