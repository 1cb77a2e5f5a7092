#![no_main]

use fibrewise::config::parse_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = parse_config(text) {
            assert_eq!(config.system.matrix().dim(), config.fibre_dim());
            assert_eq!(config.model.matrix().dim(), config.fibre_dim());
        }
    }
});
