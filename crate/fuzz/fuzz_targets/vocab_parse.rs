#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(vocab) = glim::tokenizer::Vocab::from_text(text) {
        // a vocab that parses must round-trip and encode anything
        let again = glim::tokenizer::Vocab::from_text(&vocab.to_text()).unwrap();
        assert_eq!(vocab, again);
        let ids = again.encode(data);
        let _ = again.decode(&ids).unwrap();
    }
});
