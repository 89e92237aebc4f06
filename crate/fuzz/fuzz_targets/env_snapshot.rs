#![no_main]

use homlab::env::CoefficientField;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(field) = CoefficientField::restore_json(text) {
        let snap = field.snapshot_json().expect("snapshot");
        let again = CoefficientField::restore_json(&snap).expect("restore");
        assert_eq!(again.snapshot_json().unwrap(), snap);
    }
});
