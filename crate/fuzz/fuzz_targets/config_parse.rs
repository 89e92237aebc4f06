#![no_main]

use homlab_harness::parse_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    match parse_config(text, None) {
        Ok(cfg) => {
            let once = cfg.to_toml();
            let back = parse_config(&once, None).expect("resolved config parses");
            assert_eq!(back.to_toml(), once);
        }
        Err(e) => assert!(!e.problems.is_empty()),
    }
});
