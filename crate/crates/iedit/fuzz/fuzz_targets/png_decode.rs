#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(image) = iedit::scene::decode_rgb_png(data) {
        let bytes = iedit::scene::encode_rgb_png(&image).expect("decoded image re-encodes");
        iedit::scene::decode_rgb_png(&bytes).expect("re-encoded image must decode");
    }
    if let Ok((mask, res)) = iedit::scene::decode_mask_png(data) {
        let bytes = iedit::scene::encode_mask_png(&mask, res).expect("decoded mask re-encodes");
        let (again, res2) = iedit::scene::decode_mask_png(&bytes).expect("re-encoded mask decodes");
        assert_eq!(res, res2);
        assert_eq!(mask, again);
    }
});
