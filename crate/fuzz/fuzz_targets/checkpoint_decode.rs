#![no_main]

use libfuzzer_sys::fuzz_target;
use rshd::io::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&ck.encode()).expect("re-encoded checkpoint decodes");
        assert_eq!(again.params, ck.params);
        // loading into a model must fail cleanly, never panic
        let _ = ck.into_pse();
    }
});
