//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use zskip::netmodel::write_f32_file;
use zskip::QVal;

/// Deterministic pseudo-random f32 values in [-1, 1).
pub fn values(n: usize, seed: u32) -> Vec<f32> {
    let mut s = seed.wrapping_mul(2_654_435_761).wrapping_add(12345);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(1_103_515_245).wrapping_add(12345);
            ((s >> 8) % 2000) as f32 / 1000.0 - 1.0
        })
        .collect()
}

/// Writes a small pad/conv/pool/conv/pool/fc manifest with weight files and
/// a 2x10x10 image. Returns (manifest, image).
pub fn write_toy_model(dir: &Path) -> (PathBuf, PathBuf) {
    let tensors = [
        ("c1.w", 6 * 2 * 9, 1),
        ("c1.b", 6, 2),
        ("c2.w", 5 * 6 * 9, 3),
        ("c2.b", 5, 4),
        ("f.w", 3 * 5 * 2 * 2, 5),
        ("f.b", 3, 6),
    ];
    for (name, n, seed) in tensors {
        write_f32_file(&dir.join(name), &values(n, seed)).unwrap();
    }
    let manifest = serde_json::json!({
        "input": [2, 10, 10],
        "input_scale": 0.02,
        "layers": [
            {"name": "pad1", "kind": "pad", "params": {"border": 1}},
            {"name": "conv1", "kind": "conv",
             "params": {"in_channels": 2, "out_channels": 6, "kernel": 3, "act_shift": 6, "relu": true},
             "weights_file": "c1.w", "bias_file": "c1.b"},
            {"name": "pool1", "kind": "maxpool", "params": {"window": [2, 2], "stride": [2, 2]}},
            {"name": "pad2", "kind": "pad", "params": {"border": 1}},
            {"name": "conv2", "kind": "conv",
             "params": {"in_channels": 6, "out_channels": 5, "kernel": 3, "act_shift": 6, "relu": true},
             "weights_file": "c2.w", "bias_file": "c2.b"},
            {"name": "pool2", "kind": "maxpool", "params": {"window": [2, 2], "stride": [2, 2]}},
            {"name": "fc", "kind": "fc",
             "params": {"in_features": 20, "out_features": 3, "act_shift": 4, "relu": false},
             "weights_file": "f.w", "bias_file": "f.b"}
        ]
    });
    let model = dir.join("toy.json");
    std::fs::write(&model, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    let image = dir.join("image.f32");
    let img: Vec<f32> = values(2 * 10 * 10, 7).iter().map(|v| v * 2.0).collect();
    write_f32_file(&image, &img).unwrap();
    (model, image)
}

pub fn zskip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zskip"))
        .args(args)
        .output()
        .expect("spawn zskip")
}

/// Runs the binary and panics with stderr on failure.
pub fn zskip_ok(args: &[&str]) -> Output {
    let out = zskip(args);
    assert!(
        out.status.success(),
        "zskip {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn fixture(name: &str) -> Vec<u8> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Weights of the pinned packed layer: 6 filters, 5 channels, 3x3.
pub fn golden_weights() -> Vec<QVal> {
    let (cin, cout, k) = (5, 6, 3);
    let mut w = Vec::new();
    for o in 0..cout {
        for c in 0..cin {
            for i in 0..k {
                for j in 0..k {
                    let v = ((o * 7 + c * 5 + i * 3 + j * 11) % 23) as i32 - 11;
                    w.push(QVal::from_i32(if v.abs() < 4 { 0 } else { v }));
                }
            }
        }
    }
    w
}

/// Pixels of the pinned 3x5x6 image.
pub fn golden_image() -> Vec<QVal> {
    let (ch, h, w) = (3, 5, 6);
    let mut out = Vec::new();
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                out.push(QVal::from_i32(((c * 31 + y * 7 + x * 13) % 41) as i32 - 20));
            }
        }
    }
    out
}

