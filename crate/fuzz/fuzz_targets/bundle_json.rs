#![no_main]

use libfuzzer_sys::fuzz_target;
use splatpose::synthdata::{BundleCameras, Manifest};

fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<Manifest>(data);
    if let Ok(cams) = serde_json::from_slice::<BundleCameras>(data) {
        for p in &cams.poses {
            let _ = p.to_pose();
        }
        for k in &cams.intrinsics {
            let _ = k.validate();
        }
    }
});
