//! Pixelwise comparison of the corruption implementations against frozen
//! outputs of the reference common-corruptions code (severity 3). Fixtures
//! are produced by `tools/gen_corruption_fixtures.py`; the gaussian-noise
//! case pins the noise realization so the severity scale and clipping are
//! what is under test.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use roads::datasets::corruption::{corrupt, gaussian_noise_with_field, CorruptionKind, CorruptionSpec};
use roads::raster::ImageBuf;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/corruptions")
}

fn read_u8_image(path: &Path, h: usize, w: usize) -> ImageBuf {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    ImageBuf::from_rgb8(&bytes, h, w).expect("fixture image")
}

fn read_f32_tensor(path: &Path, h: usize, w: usize) -> Array3<f64> {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(bytes.len(), h * w * 3 * 4, "{}", path.display());
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Array3::from_shape_vec((h, w, 3), vals).expect("fixture tensor")
}

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn severity3_matches_reference_within_one_255th() {
    let dir = data_dir();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).expect("manifest"))
            .expect("manifest json");
    let h = manifest["height"].as_u64().unwrap() as usize;
    let w = manifest["width"].as_u64().unwrap() as usize;
    let count = manifest["count"].as_u64().unwrap() as usize;
    assert_eq!(manifest["severity"].as_u64().unwrap(), 3);

    let tol = 1.0 / 255.0;
    for i in 0..count {
        let img = read_u8_image(&dir.join(format!("img_{i:02}.u8")), h, w);

        for kind in [
            CorruptionKind::Brightness,
            CorruptionKind::Contrast,
            CorruptionKind::DefocusBlur,
        ] {
            let expected = read_f32_tensor(&dir.join(format!("img_{i:02}_{}.f32", kind.name())), h, w);
            let spec = CorruptionSpec::new(kind, 3, 0).unwrap();
            let got = corrupt(&img, &spec).unwrap();
            let d = max_abs_diff(&got.data, &expected);
            assert!(d <= tol, "img {i} {} max diff {d}", kind.name());
        }

        let field = read_f32_tensor(&dir.join(format!("img_{i:02}_noise.f32")), h, w);
        let expected = read_f32_tensor(&dir.join(format!("img_{i:02}_gaussian_noise.f32")), h, w);
        let got = gaussian_noise_with_field(&img, &field, 0.18);
        let d = max_abs_diff(&got.data, &expected);
        assert!(d <= tol, "img {i} gaussian_noise max diff {d}");
    }
}

#[test]
fn midgray_brightness_matches_reference() {
    // the per-operation contract example: severity-3 brightness on mid gray
    let dir = data_dir();
    let img = read_u8_image(&dir.join("img_00.u8"), 32, 32);
    assert!((img.data[[0, 0, 0]] - 128.0 / 255.0).abs() < 1e-12, "fixture 0 is mid gray");
    let expected = read_f32_tensor(&dir.join("img_00_brightness.f32"), 32, 32);
    let spec = CorruptionSpec::new(CorruptionKind::Brightness, 3, 0).unwrap();
    let got = corrupt(&img, &spec).unwrap();
    assert!(max_abs_diff(&got.data, &expected) <= 1.0 / 255.0);
    // mid gray is achromatic: +0.3 on V lands exactly on (128/255 + 0.3)
    let want = 128.0 / 255.0 + 0.3;
    assert!((got.data[[5, 5, 1]] - want).abs() < 1e-9);
}
