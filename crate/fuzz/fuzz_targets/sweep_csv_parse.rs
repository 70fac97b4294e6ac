#![no_main]

use libfuzzer_sys::fuzz_target;
use rshd::eval::SweepGrid;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = SweepGrid::from_csv(text) {
        let again = SweepGrid::from_csv(&g.to_csv()).expect("written grid parses");
        assert_eq!(again.rows.len(), g.rows.len());
        assert_eq!(again.task_names, g.task_names);
    }
});
