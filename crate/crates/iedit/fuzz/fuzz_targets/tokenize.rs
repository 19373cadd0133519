#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ids) = iedit::vocab::tokenize(text) {
            for id in ids {
                assert!(iedit::vocab::word_of(id).is_some());
            }
        }
        let _ = iedit::backbone::PromptSequence::parse(text);
    }
});
