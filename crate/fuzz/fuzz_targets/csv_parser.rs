#![no_main]
use libfuzzer_sys::fuzz_target;

use ordered_capacity::report::parse_csv;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(table) = parse_csv(text) {
        // whatever parses must survive a write and a second parse
        let again = parse_csv(&table.to_csv()).expect("emitted CSV parses");
        assert_eq!(again.columns, table.columns);
        assert_eq!(again.rows.len(), table.rows.len());
    }
});
