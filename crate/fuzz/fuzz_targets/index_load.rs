#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(index) = glim::index::VectorIndex::from_bytes(data) {
        if index.dim() > 0 && index.dim() < 4096 {
            let query = vec![1.0f32; index.dim()];
            let _ = index.search(&query, 4);
        }
    }
});
