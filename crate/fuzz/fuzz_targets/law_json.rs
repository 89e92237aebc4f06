#![no_main]

use homlab::corrector::EffectiveLaw;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(law) = EffectiveLaw::from_json(text) {
        let json = law.to_json().expect("serialize");
        let _ = EffectiveLaw::from_json(&json).expect("re-parse");
    }
});
