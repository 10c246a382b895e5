#![no_main]

use libfuzzer_sys::fuzz_target;
use splatpose::geometry::{orthonormality_error, Intrinsics, PoseRecord};

fuzz_target!(|data: &[u8]| {
    if let Ok(rec) = serde_json::from_slice::<PoseRecord>(data) {
        if let Ok(pose) = rec.to_pose() {
            assert!(orthonormality_error(&pose.rot) <= 1e-6);
        }
    }
    if let Ok(k) = serde_json::from_slice::<Intrinsics>(data) {
        let _ = k.validate();
    }
});
