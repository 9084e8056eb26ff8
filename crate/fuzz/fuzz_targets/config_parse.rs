#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = glim::config::RunConfig::parse(text) {
        // resolved form must re-parse to the same config
        let again = glim::config::RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);
    }
});
