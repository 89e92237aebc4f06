#![no_main]

use homlab::grid::GridFunction;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = GridFunction::decode(data) {
        let again = GridFunction::decode(&g.encode()).expect("re-decode");
        assert_eq!(again.encode(), g.encode());
    }
});
