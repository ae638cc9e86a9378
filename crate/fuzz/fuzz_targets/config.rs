#![no_main]

use asmem::config::parse_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(entries) = parse_config(text) {
            for e in &entries {
                assert!(!e.key.is_empty() && !e.key.contains('_'));
            }
        }
    }
});
