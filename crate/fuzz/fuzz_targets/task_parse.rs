#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(task) = glim::eval::EvalTask::parse(text) {
        let again = glim::eval::EvalTask::parse(&task.to_text()).unwrap();
        assert_eq!(task, again);
    }
});
