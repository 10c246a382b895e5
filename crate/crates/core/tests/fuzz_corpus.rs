//! Replays the checked-in fuzz corpus through the same parser entry points
//! the fuzz targets use, so seeds stay exercised on stable toolchains.

use splatpose::geometry::{Intrinsics, PoseRecord};
use splatpose::gsplat::ply::{export_ply, import_ply};
use splatpose::synthdata::{BundleCameras, Manifest};
use splatpose::tensor::container::Container;
use splatpose::trainer::TrainConfig;
use std::path::PathBuf;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn container_seeds() {
    for (name, bytes) in seeds("container_from_bytes") {
        let parsed = Container::from_bytes(&bytes);
        match name.as_str() {
            "two_tensors" | "empty" => {
                let c = parsed.unwrap();
                assert_eq!(c.to_bytes().unwrap(), bytes, "{name}");
            }
            _ => assert!(parsed.is_err(), "{name}"),
        }
    }
}

#[test]
fn ply_seeds() {
    for (name, bytes) in seeds("ply_import") {
        match import_ply(&bytes) {
            Ok(scene) => {
                assert!(name.starts_with("three"), "{name}");
                assert_eq!(scene.len(), 3);
                assert_eq!(export_ply(&scene).unwrap(), bytes);
            }
            Err(_) => assert_eq!(name, "huge_count"),
        }
    }
}

#[test]
fn camera_seeds() {
    for (name, bytes) in seeds("camera_json") {
        if name == "intrinsics" {
            let k: Intrinsics = serde_json::from_slice(&bytes).unwrap();
            k.validate().unwrap();
            continue;
        }
        let pose = serde_json::from_slice::<PoseRecord>(&bytes)
            .map_err(|e| e.to_string())
            .and_then(|r| r.to_pose().map_err(|e| e.to_string()));
        assert_eq!(
            pose.is_ok(),
            matches!(name.as_str(), "pose_identity" | "pose_translated"),
            "{name}"
        );
    }
}

#[test]
fn train_config_seeds() {
    for (name, bytes) in seeds("train_config_toml") {
        let cfg: TrainConfig = toml::from_str(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(cfg.validate().is_ok(), name != "invalid_values", "{name}");
    }
}

#[test]
fn bundle_seeds() {
    for (name, bytes) in seeds("bundle_json") {
        match name.as_str() {
            "manifest" => {
                serde_json::from_slice::<Manifest>(&bytes).unwrap();
            }
            _ => {
                let cams: BundleCameras = serde_json::from_slice(&bytes).unwrap();
                for p in &cams.poses {
                    p.to_pose().unwrap();
                }
            }
        }
    }
}
