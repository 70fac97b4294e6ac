#![no_main]

use libfuzzer_sys::fuzz_target;
use rshd::io::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::parse(text) {
        let again = Manifest::parse(&m.to_text()).expect("written manifest parses");
        assert_eq!(again.records, m.records);
    }
});
