#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // round-trip: anything that parses must re-serialize and re-parse
    if let Ok(archive) = iedit::archive::TensorArchive::from_bytes(data) {
        let bytes = archive.to_bytes();
        let again = iedit::archive::TensorArchive::from_bytes(&bytes)
            .expect("re-serialized archive must parse");
        assert_eq!(again.to_bytes(), bytes);
    }
});
