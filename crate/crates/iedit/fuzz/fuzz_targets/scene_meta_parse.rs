#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = iedit::scene::SceneMeta::from_json_bytes(data);
});
