#![no_main]

use libfuzzer_sys::fuzz_target;
use moa_tts::eval::parse_gate_traces;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_gate_traces(text) {
            for r in rows {
                assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
});
