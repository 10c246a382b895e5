#![no_main]

use libfuzzer_sys::fuzz_target;
use splatpose::gsplat::ply::{export_ply, import_ply};

fuzz_target!(|data: &[u8]| {
    if let Ok(scene) = import_ply(data) {
        scene.validate().expect("imported scene is valid");
        // Re-import can fail when doubles overflow single precision.
        let bytes = export_ply(&scene).expect("imported scene exports");
        if let Ok(back) = import_ply(&bytes) {
            assert_eq!(back.len(), scene.len());
        }
    }
});
