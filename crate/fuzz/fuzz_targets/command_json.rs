#![no_main]

use fhrctl_core::ops::CommandMessage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cmd) = CommandMessage::from_json(text) {
        // Non-finite numbers do not survive JSON.
        if let Ok(again) = CommandMessage::from_json(&cmd.to_json()) {
            assert_eq!(again.seq, cmd.seq);
        }
    }
});
