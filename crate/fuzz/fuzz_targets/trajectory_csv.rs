#![no_main]

use fhrctl_core::trajectory::Trajectory;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Trajectory::read_csv(data, "fuzz") {
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let back = Trajectory::read_csv(out.as_slice(), "fuzz").unwrap();
        assert_eq!(back.len(), t.len());
    }
});
