//! Synthetic-OOD augmentation for adapter training. Only per-pixel color
//! transforms are used (color jitter, posterize, solarize), which keeps the
//! augmentation family disjoint from the spatial/stochastic test corruptions
//! (blur, additive noise) by construction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::raster::ImageBuf;

/// Global gain plus per-channel balance, clipped to `[0, 1]`.
pub fn color_jitter(image: &ImageBuf, gain: f64, balance: [f64; 3]) -> ImageBuf {
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            for c in 0..3 {
                out.data[[y, x, c]] = (image.data[[y, x, c]] * gain * balance[c]).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Keep the top `bits` bits of the 8-bit quantized value. `bits = 8` is the
/// identity on 8-bit-quantized inputs.
pub fn posterize(image: &ImageBuf, bits: u8) -> ImageBuf {
    assert!((1..=8).contains(&bits), "posterize bits must be 1..=8");
    let mask = !((1u16 << (8 - bits)) - 1) as u8;
    let mut out = image.clone();
    out.data.mapv_inplace(|v| {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        f64::from(q & mask) / 255.0
    });
    out
}

/// Invert every value strictly above `threshold`; `threshold = 1.0` is the
/// identity.
pub fn solarize(image: &ImageBuf, threshold: f64) -> ImageBuf {
    let mut out = image.clone();
    out.data.mapv_inplace(|v| if v > threshold { 1.0 - v } else { v });
    out
}

/// Produce a synthetic out-of-distribution variant of a normal image: a
/// seed-determined combination of at least one of the three color ops.
pub fn augment_ood(image: &ImageBuf, seed: u64) -> ImageBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut use_jitter = rng.random_bool(0.5);
    let mut use_posterize = rng.random_bool(0.5);
    let mut use_solarize = rng.random_bool(0.5);
    if !(use_jitter || use_posterize || use_solarize) {
        match rng.random_range(0..3u8) {
            0 => use_jitter = true,
            1 => use_posterize = true,
            _ => use_solarize = true,
        }
    }
    // parameters are always drawn so the op choice does not shift the stream
    let gain = rng.random_range(0.5..1.5);
    let balance = [
        rng.random_range(0.7..1.3),
        rng.random_range(0.7..1.3),
        rng.random_range(0.7..1.3),
    ];
    let bits = rng.random_range(3..=5u8);
    let threshold = rng.random_range(0.55..0.95);

    let mut out = image.clone();
    if use_jitter {
        out = color_jitter(&out, gain, balance);
    }
    if use_posterize {
        out = posterize(&out, bits);
    }
    if use_solarize {
        out = solarize(&out, threshold);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> ImageBuf {
        let mut img = ImageBuf::zeros(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                img.data[[y, x, 0]] = x as f64 / 15.0;
                img.data[[y, x, 1]] = y as f64 / 15.0;
                img.data[[y, x, 2]] = ((x + y) % 5) as f64 / 4.0;
            }
        }
        img
    }

    #[test]
    fn posterize_8_bits_is_identity_on_quantized_input() {
        let mut img = gradient_image();
        // force 8-bit-quantized values
        img.data.mapv_inplace(|v| (v * 255.0).round() / 255.0);
        let out = posterize(&img, 8);
        for (a, b) in out.data.iter().zip(img.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn solarize_threshold_one_is_identity() {
        let img = gradient_image();
        let out = solarize(&img, 1.0);
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn deterministic_in_seed() {
        let img = gradient_image();
        assert_eq!(augment_ood(&img, 7).data, augment_ood(&img, 7).data);
    }

    #[test]
    fn augmentation_is_pointwise() {
        // a per-pixel color transform must map equal input pixels to equal
        // output pixels; blur or additive noise would break this
        let mut img = ImageBuf::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                let v = if (x + y) % 2 == 0 { 0.2 } else { 0.8 };
                img.data[[y, x, 0]] = v;
                img.data[[y, x, 1]] = 1.0 - v;
                img.data[[y, x, 2]] = 0.5;
            }
        }
        for seed in 0..20u64 {
            let out = augment_ood(&img, seed);
            let a = [out.data[[0, 0, 0]], out.data[[0, 0, 1]], out.data[[0, 0, 2]]];
            for y in 0..8 {
                for x in 0..8 {
                    if (x + y) % 2 == 0 {
                        assert_eq!(out.data[[y, x, 0]], a[0]);
                        assert_eq!(out.data[[y, x, 1]], a[1]);
                        assert_eq!(out.data[[y, x, 2]], a[2]);
                    }
                }
            }
        }
    }
}
