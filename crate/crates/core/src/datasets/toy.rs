//! Procedural multi-class defect data at desk scale. Each class is a
//! distinct periodic texture family in its own hue; anomalous test samples
//! take a normal image and inject exactly one analytic defect (scratch, blob
//! or hole) whose mask is exact by construction. Everything is a pure
//! function of the spec seed.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::corruption::hsv_to_rgb;
use crate::datasets::{derive_seed, DatasetIndex, ImageSource, MaskSource, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::raster::{BitMask, ImageBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Scratch,
    Blob,
    Hole,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [DefectKind::Scratch, DefectKind::Blob, DefectKind::Hole];

    pub fn name(&self) -> &'static str {
        match self {
            DefectKind::Scratch => "scratch",
            DefectKind::Blob => "blob",
            DefectKind::Hole => "hole",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub n_classes: usize,
    pub image_size: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub defect_kinds: Vec<DefectKind>,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            n_classes: 4,
            image_size: 32,
            n_train: 200,
            n_test_normal: 10,
            n_test_anomalous: 10,
            defect_kinds: DefectKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("toy dataset needs at least 2 classes".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config("toy image size must be >= 32".into()));
        }
        if self.n_train < 1 || self.n_test_normal < 1 || self.n_test_anomalous < 1 {
            return Err(Error::Config("toy per-class sample counts must be >= 1".into()));
        }
        if self.defect_kinds.is_empty() {
            return Err(Error::Config("toy dataset needs at least one defect kind".into()));
        }
        Ok(())
    }
}

const FAMILIES: [&str; 4] = ["hstripes", "vstripes", "checker", "dots"];

fn class_name(k: usize) -> String {
    format!("c{:02}_{}", k, FAMILIES[k % 4])
}

/// Two class colors sharing a hue picked by golden-angle stepping, so hues
/// are well separated across classes.
fn class_colors(k: usize) -> ([f64; 3], [f64; 3]) {
    let hue = (0.13 + k as f64 * 0.381_966) % 1.0;
    let (r1, g1, b1) = hsv_to_rgb(hue, 0.55, 0.85);
    let (r2, g2, b2) = hsv_to_rgb(hue, 0.40, 0.40);
    ([r1, g1, b1], [r2, g2, b2])
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Base texture value in [0,1] for class `k` at pixel (x, y).
fn texture(k: usize, s: usize, x: f64, y: f64, freq: f64, phase: (f64, f64)) -> f64 {
    let tau = std::f64::consts::TAU;
    let fx = tau * freq * x / s as f64 + phase.0;
    let fy = tau * freq * y / s as f64 + phase.1;
    match k % 4 {
        0 => 0.5 + 0.5 * fy.sin(),
        1 => 0.5 + 0.5 * fx.sin(),
        2 => (0.5 + 0.5 * fx.sin()) * (0.5 + 0.5 * fy.sin()),
        _ => {
            let d = (0.5 + 0.5 * fx.sin()) * (0.5 + 0.5 * fy.sin());
            d * d
        }
    }
}

fn normal_image(k: usize, spec: &ToySpec, rng: &mut ChaCha8Rng) -> ImageBuf {
    let s = spec.image_size;
    let (ca, cb) = class_colors(k);
    let freq_base = 3.0 + (k / 4) as f64;
    let freq = freq_base * rng.random_range(0.9..1.1);
    let phase = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let mut img = ImageBuf::zeros(s, s);
    for y in 0..s {
        for x in 0..s {
            let t = texture(k, s, x as f64, y as f64, freq, phase);
            let mut rgb = mix(cb, ca, t);
            for c in rgb.iter_mut() {
                *c = (*c + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
            }
            for c in 0..3 {
                img.data[[y, x, c]] = rgb[c];
            }
        }
    }
    img
}

fn dist_to_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Inject one defect into `img`, returning the exact mask of changed pixels.
fn inject_defect(img: &mut ImageBuf, kind: DefectKind, rng: &mut ChaCha8Rng) -> BitMask {
    let s = img.height();
    let sf = s as f64;
    let mut mask = BitMask::zeros(s, s);
    let margin = sf / 6.0;
    let dark = [0.04, 0.04, 0.05];
    match kind {
        DefectKind::Scratch => {
            let ax = rng.random_range(margin..sf - margin);
            let ay = rng.random_range(margin..sf - margin);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let len = rng.random_range(sf * 0.3..sf * 0.6);
            let bx = (ax + len * angle.cos()).clamp(1.0, sf - 2.0);
            let by = (ay + len * angle.sin()).clamp(1.0, sf - 2.0);
            let width = rng.random_range(0.7..1.4);
            let bright = rng.random_bool(0.5);
            let color = if bright { [0.97, 0.97, 0.95] } else { dark };
            for y in 0..s {
                for x in 0..s {
                    let d = dist_to_segment(x as f64, y as f64, ax, ay, bx, by);
                    let alpha = (width + 0.5 - d).clamp(0.0, 1.0);
                    if alpha > 0.25 {
                        let src = [
                            img.data[[y, x, 0]],
                            img.data[[y, x, 1]],
                            img.data[[y, x, 2]],
                        ];
                        let rgb = mix(src, color, 0.4 + 0.6 * alpha);
                        for c in 0..3 {
                            img.data[[y, x, c]] = rgb[c];
                        }
                        mask.data[[y, x]] = true;
                    }
                }
            }
        }
        DefectKind::Blob => {
            let cx = rng.random_range(margin..sf - margin);
            let cy = rng.random_range(margin..sf - margin);
            let sigma = rng.random_range(sf / 16.0..sf / 10.0);
            // defect hue = complementary-ish shift for contrast
            let hue = rng.random_range(0.0..1.0);
            let (r, g, b) = hsv_to_rgb(hue, 0.9, 0.9);
            let color = [r, g, b];
            for y in 0..s {
                for x in 0..s {
                    let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let bump = (-r2 / (2.0 * sigma * sigma)).exp();
                    if bump > 0.3 {
                        let src = [
                            img.data[[y, x, 0]],
                            img.data[[y, x, 1]],
                            img.data[[y, x, 2]],
                        ];
                        let rgb = mix(src, color, 0.85 * bump);
                        for c in 0..3 {
                            img.data[[y, x, c]] = rgb[c];
                        }
                        mask.data[[y, x]] = true;
                    }
                }
            }
        }
        DefectKind::Hole => {
            let cx = rng.random_range(margin..sf - margin);
            let cy = rng.random_range(margin..sf - margin);
            let radius = rng.random_range(sf / 16.0..sf / 8.0);
            for y in 0..s {
                for x in 0..s {
                    let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    if r2 <= radius * radius {
                        for c in 0..3 {
                            img.data[[y, x, c]] = dark[c];
                        }
                        mask.data[[y, x]] = true;
                    }
                }
            }
        }
    }
    debug_assert!(!mask.is_empty(), "defect produced an empty mask");
    mask
}

/// Generate the full in-memory dataset described by `spec`.
pub fn generate_toy_dataset(spec: &ToySpec) -> Result<DatasetIndex> {
    spec.validate()?;
    let mut index = DatasetIndex::default();
    for k in 0..spec.n_classes {
        index.classes.push(class_name(k));
    }
    // classes must sort lexicographically in index order for export/reload
    for k in 0..spec.n_classes {
        let name = &index.classes[k];
        for i in 0..spec.n_train {
            let rel = format!("{name}/train/good/{i:03}.png");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &rel));
            let img = normal_image(k, spec, &mut rng);
            index.samples.push(SampleRecord {
                source: ImageSource::Memory(Arc::new(img)),
                class_index: k,
                split: Split::Train,
                label: 0,
                mask: None,
                rel_path: rel,
            });
        }
        for i in 0..spec.n_test_normal {
            let rel = format!("{name}/test/good/{i:03}.png");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &rel));
            let img = normal_image(k, spec, &mut rng);
            index.samples.push(SampleRecord {
                source: ImageSource::Memory(Arc::new(img)),
                class_index: k,
                split: Split::Test,
                label: 0,
                mask: None,
                rel_path: rel,
            });
        }
        for i in 0..spec.n_test_anomalous {
            let kind = spec.defect_kinds[i % spec.defect_kinds.len()];
            let rel = format!("{name}/test/{}/{i:03}.png", kind.name());
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &rel));
            let mut img = normal_image(k, spec, &mut rng);
            let mask = inject_defect(&mut img, kind, &mut rng);
            index.samples.push(SampleRecord {
                source: ImageSource::Memory(Arc::new(img)),
                class_index: k,
                split: Split::Test,
                label: 1,
                mask: Some(MaskSource::Memory(Arc::new(mask))),
                rel_path: rel,
            });
        }
    }
    index.validate()?;
    Ok(index)
}
