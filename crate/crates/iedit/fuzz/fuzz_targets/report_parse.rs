#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // from_json_bytes revalidates that aggregates recompute from the cells
    if let Ok(report) = iedit::iebench::EvalReport::from_json_bytes(data) {
        let bytes = report.to_json_bytes();
        iedit::iebench::EvalReport::from_json_bytes(&bytes)
            .expect("re-serialized report must parse");
    }
});
