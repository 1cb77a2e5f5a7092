#![no_main]

//! Accepted configs must reach a report, never a panic.

use fibrewise::commands::{run_text, Command};
use fibrewise::report::{EXIT_FAIL, EXIT_PASS, EXIT_PRECONDITION};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let report = run_text(Command::Homology, text, None);
    assert!([EXIT_PASS, EXIT_PRECONDITION, EXIT_FAIL].contains(&report.exit_code()));
    let _ = report.to_json();
});
