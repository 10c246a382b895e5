//! Binary little-endian splat PLY in the layout read by common splat viewers:
//! `x y z nx ny nz f_dc_0..2 f_rest_* opacity scale_0..2 rot_0..3`, with
//! logit opacity, log scale and channel-major `f_rest`.

use super::{sh, GaussianScene, GsplatError, Result};
use crate::tensor::sigmoid;

fn property_names(sh_degree: usize) -> Vec<String> {
    let rest = 3 * (sh::num_coeffs(sh_degree) - 1);
    let mut names: Vec<String> = [
        "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

pub fn export_ply(scene: &GaussianScene) -> Result<Vec<u8>> {
    scene.validate()?;
    let names = property_names(scene.sh_degree);
    let mut out = String::from("ply\nformat binary_little_endian 1.0\n");
    out.push_str(&format!("element vertex {}\n", scene.len()));
    for n in &names {
        out.push_str(&format!("property float {n}\n"));
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    let k = sh::num_coeffs(scene.sh_degree);
    let d = scene.sh_dim();
    let mut row = Vec::with_capacity(names.len());
    for i in 0..scene.len() {
        row.clear();
        row.extend_from_slice(&scene.mu[i]);
        row.extend_from_slice(&[0.0; 3]);
        let coeffs = &scene.sh[i * d..(i + 1) * d];
        row.extend_from_slice(&coeffs[..3]);
        for c in 0..3 {
            for kk in 1..k {
                row.push(coeffs[kk * 3 + c]);
            }
        }
        row.push(logit(scene.opacity[i]));
        row.extend(scene.scale[i].iter().map(|s| s.ln()));
        row.extend_from_slice(&scene.quat[i]);
        for v in &row {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(bytes)
}

fn bad(msg: impl Into<String>) -> GsplatError {
    GsplatError::Ply(msg.into())
}

/// Parse a splat PLY. Accepts `float` and `double` properties in any order;
/// never panics on malformed input.
pub fn import_ply(bytes: &[u8]) -> Result<GaussianScene> {
    const END: &[u8] = b"end_header\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing end_header"))?
        + END.len();
    let header =
        std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<(String, usize)> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", _] => format_ok = true,
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(bad("duplicate vertex element"));
                }
                count = Some(n.parse().map_err(|_| bad("bad vertex count"))?);
            }
            ["element", other, ..] => return Err(bad(format!("unsupported element {other}"))),
            ["property", ty, name] => {
                let width = match *ty {
                    "float" | "float32" => 4,
                    "double" | "float64" => 8,
                    _ => return Err(bad(format!("unsupported property type {ty}"))),
                };
                if props.iter().any(|(n, _)| n == name) {
                    return Err(bad(format!("duplicate property {name}")));
                }
                props.push((name.to_string(), width));
            }
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            _ => return Err(bad(format!("unexpected header line `{line}`"))),
        }
    }
    if !format_ok {
        return Err(bad("missing format line"));
    }
    let count = count.ok_or_else(|| bad("missing vertex element"))?;
    let stride: usize = props.iter().map(|(_, w)| w).sum();
    let body = &bytes[header_end..];
    let needed = count
        .checked_mul(stride)
        .ok_or_else(|| bad("vertex data size overflows"))?;
    if body.len() < needed {
        return Err(bad("truncated vertex data"));
    }

    let n_rest = props
        .iter()
        .filter(|(n, _)| n.starts_with("f_rest_"))
        .count();
    let sh_degree = (0..=sh::MAX_DEGREE)
        .find(|&d| 3 * (sh::num_coeffs(d) - 1) == n_rest)
        .ok_or_else(|| bad(format!("{n_rest} f_rest properties match no SH degree")))?;
    let offset_of = |name: &str| -> Result<(usize, usize)> {
        let mut off = 0;
        for (n, w) in &props {
            if n == name {
                return Ok((off, *w));
            }
            off += w;
        }
        Err(bad(format!("missing property {name}")))
    };
    let required: Vec<(usize, usize)> = property_names(sh_degree)
        .iter()
        .filter(|n| !matches!(n.as_str(), "nx" | "ny" | "nz"))
        .map(|n| offset_of(n))
        .collect::<Result<_>>()?;

    let k = sh::num_coeffs(sh_degree);
    let mut scene = GaussianScene::new(sh_degree);
    let mut vals = vec![0.0; required.len()];
    for i in 0..count {
        let rec = &body[i * stride..(i + 1) * stride];
        for (v, &(off, w)) in vals.iter_mut().zip(&required) {
            *v = if w == 4 {
                f32::from_le_bytes(rec[off..off + 4].try_into().expect("4 bytes")) as f64
            } else {
                f64::from_le_bytes(rec[off..off + 8].try_into().expect("8 bytes"))
            };
        }
        if let Some(j) = vals.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("vertex {i}: non-finite value in field {j}")));
        }
        let mu = [vals[0], vals[1], vals[2]];
        let mut coeffs = vec![0.0; 3 * k];
        coeffs[..3].copy_from_slice(&vals[3..6]);
        let rest = &vals[6..6 + 3 * (k - 1)];
        for c in 0..3 {
            for kk in 1..k {
                coeffs[kk * 3 + c] = rest[c * (k - 1) + kk - 1];
            }
        }
        let o = 6 + 3 * (k - 1);
        scene.mu.push(mu);
        scene.opacity.push(sigmoid(vals[o]));
        scene
            .scale
            .push([vals[o + 1].exp(), vals[o + 2].exp(), vals[o + 3].exp()]);
        scene
            .quat
            .push([vals[o + 4], vals[o + 5], vals[o + 6], vals[o + 7]]);
        scene.sh.extend_from_slice(&coeffs);
    }
    // Finite log-scales can still overflow once exponentiated.
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsplat::GaussianPrimitive;

    fn one(degree: usize) -> GaussianScene {
        let mut s = GaussianScene::new(degree);
        let d = s.sh_dim();
        s.push(GaussianPrimitive {
            mu: [0.1, -0.2, 0.3],
            quat: [0.9, 0.1, 0.0, -0.3],
            scale: [0.01, 0.02, 0.5],
            opacity: 0.7,
            sh: (0..d).map(|i| i as f64 * 0.1 - 0.3).collect(),
        })
        .unwrap();
        s
    }

    #[test]
    fn header_declares_vertex_count() {
        let bytes = export_ply(&one(1)).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("element vertex 1\n"));
        assert!(text.contains("property float f_rest_8\n"));
    }

    #[test]
    fn empty_scene_has_no_body() {
        let bytes = export_ply(&GaussianScene::new(0)).unwrap();
        assert!(bytes.ends_with(b"end_header\n"));
        assert!(String::from_utf8_lossy(&bytes).contains("element vertex 0\n"));
        assert_eq!(import_ply(&bytes).unwrap().len(), 0);
    }

    #[test]
    fn roundtrip_within_single_precision() {
        for degree in 0..=3 {
            let s = one(degree);
            let back = import_ply(&export_ply(&s).unwrap()).unwrap();
            assert_eq!(back.sh_degree, degree);
            let again = import_ply(&export_ply(&back).unwrap()).unwrap();
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6);
            assert!(close(&s.sh, &back.sh));
            assert!(close(&s.mu[0], &back.mu[0]));
            assert!(close(&s.scale[0], &back.scale[0]));
            assert!((s.opacity[0] - back.opacity[0]).abs() < 1e-6);
            assert!(close(&back.sh, &again.sh));
            assert!(close(&back.quat[0], &again.quat[0]));
        }
    }

    #[test]
    fn malformed_inputs_are_errors() {
        assert!(import_ply(b"").is_err());
        assert!(import_ply(b"ply\nend_header\n").is_err());
        let mut bytes = export_ply(&one(1)).unwrap();
        bytes.pop();
        assert!(import_ply(&bytes).is_err());
        let ascii = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(import_ply(ascii).is_err());
    }

    #[test]
    fn overflowing_scale_is_rejected() {
        let names = property_names(0);
        let mut bytes = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 1\n");
        for n in &names {
            bytes.push_str(&format!("property double {n}\n"));
        }
        bytes.push_str("end_header\n");
        let mut bytes = bytes.into_bytes();
        for n in &names {
            let v: f64 = if n == "scale_0" { 1000.0 } else { 0.0 };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(import_ply(&bytes).is_err());
    }
}
