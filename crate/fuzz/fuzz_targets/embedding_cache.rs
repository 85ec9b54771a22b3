#![no_main]

use libfuzzer_sys::fuzz_target;
use moa_tts::cache::EmbeddingCache;

fuzz_target!(|data: &[u8]| {
    let _ = EmbeddingCache::decode(data);
});
