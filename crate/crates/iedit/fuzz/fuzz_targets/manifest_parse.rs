#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(manifest) = iedit::iebench::BenchmarkManifest::from_json_bytes(data) {
        let _ = manifest.shape();
        let bytes = serde_json::to_vec(&manifest).expect("manifest re-serializes");
        iedit::iebench::BenchmarkManifest::from_json_bytes(&bytes)
            .expect("re-serialized manifest must parse");
    }
});
