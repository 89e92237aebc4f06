#![no_main]

use homlab_harness::RunRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rec) = RunRecord::restore(text) {
        let again = RunRecord::restore(&rec.snapshot()).expect("re-restore");
        assert_eq!(again.numeric_digest(), rec.numeric_digest());
    }
});
