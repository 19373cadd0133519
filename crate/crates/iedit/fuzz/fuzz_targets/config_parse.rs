#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = iedit::config::RunConfig::from_json_bytes(data) {
        // the canonical hash must be insensitive to field order
        let value: serde_json::Value = serde_json::to_value(&config).unwrap();
        let text = serde_json::to_string(&value).unwrap();
        let reparsed = iedit::config::RunConfig::from_json_bytes(text.as_bytes())
            .expect("canonical form must parse");
        assert_eq!(config.hash(), reparsed.hash());
    }
});
