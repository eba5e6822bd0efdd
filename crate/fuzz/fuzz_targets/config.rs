#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = iwgae::io::parse_config(text) {
            // Rendering must produce text that parses back to the same config.
            let again = iwgae::io::parse_config(&iwgae::io::render_config(&cfg)).expect("rendered config parses");
            assert_eq!(cfg, again);
        }
    }
});
