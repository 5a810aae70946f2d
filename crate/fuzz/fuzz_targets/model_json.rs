#![no_main]

use fhrctl_core::sysid::StateSpaceModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = StateSpaceModel::from_json(text) {
        let x0 = vec![0.0; m.n_states()];
        let u = vec![vec![0.0; m.n_inputs()]; 3];
        let _ = m.predict(&x0, &u);
    }
});
