#!/usr/bin/env python3
"""Generate frozen reference outputs for the corruption fidelity tests.

Reimplements the four corruptions (brightness, contrast, defocus blur,
gaussian noise) exactly as in the public common-corruptions benchmark code
(the `imagecorruptions` / ImageNet-C reference), runs them at severity 3 on
ten fixed test images, and dumps raw little-endian binaries consumed by
crates/core/tests/corruption_fidelity.rs.

Outputs under crates/core/tests/data/corruptions/:
  img_NN.u8          H*W*3 uint8 input image
  img_NN_<kind>.f32  H*W*3 float32 expected output in [0,1]
  img_NN_noise.f32   H*W*3 float32 standard-normal field used for the
                     gaussian_noise expectation
  manifest.json      shapes + parameters

Requires numpy, opencv-python, scikit-image (the same stack the reference
uses), so the frozen values come from the reference code paths, not ours.
"""

import json
import os

import cv2
import numpy as np
import skimage.color as skc

H = W = 32
OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "data", "corruptions")


# --- reference implementations (common-corruptions benchmark, severity tables verbatim) ---

def disk(radius, alias_blur=0.1, dtype=np.float32):
    if radius <= 8:
        L = np.arange(-8, 8 + 1)
        ksize = (3, 3)
    else:
        L = np.arange(-radius, radius + 1)
        ksize = (5, 5)
    X, Y = np.meshgrid(L, L)
    aliased_disk = np.array((X ** 2 + Y ** 2) <= radius ** 2, dtype=dtype)
    aliased_disk /= np.sum(aliased_disk)
    # supersample disk to antialias
    return cv2.GaussianBlur(aliased_disk, ksize=ksize, sigmaX=alias_blur)


def brightness(x, severity):
    c = [.1, .2, .3, .4, .5][severity - 1]
    x = np.array(x) / 255.
    x = skc.rgb2hsv(x)
    x[:, :, 2] = np.clip(x[:, :, 2] + c, 0, 1)
    x = skc.hsv2rgb(x)
    return np.clip(x, 0, 1) * 255


def contrast(x, severity):
    c = [0.4, .3, .2, .1, .05][severity - 1]
    x = np.array(x) / 255.
    means = np.mean(x, axis=(0, 1), keepdims=True)
    return np.clip((x - means) * c + means, 0, 1) * 255


def defocus_blur(x, severity):
    c = [(3, 0.1), (4, 0.5), (6, 0.5), (8, 0.5), (10, 0.5)][severity - 1]
    x = np.array(x) / 255.
    kernel = disk(radius=c[0], alias_blur=c[1])
    channels = []
    for d in range(3):
        channels.append(cv2.filter2D(x[:, :, d], -1, kernel))
    channels = np.array(channels).transpose((1, 2, 0))
    return np.clip(channels, 0, 1) * 255


def gaussian_noise_with_field(x, field, severity):
    c = [.08, .12, 0.18, 0.26, 0.38][severity - 1]
    x = np.array(x) / 255.
    return np.clip(x + c * field, 0, 1) * 255


def make_images():
    """Ten fixed test images: solids, gradients, patterns, seeded noise."""
    rng = np.random.RandomState(20240901)
    imgs = []
    # 0: mid gray
    imgs.append(np.full((H, W, 3), 128, dtype=np.uint8))
    # 1: black
    imgs.append(np.zeros((H, W, 3), dtype=np.uint8))
    # 2: white
    imgs.append(np.full((H, W, 3), 255, dtype=np.uint8))
    # 3: horizontal gradient
    g = np.tile(np.linspace(0, 255, W, dtype=np.float64), (H, 1))
    imgs.append(np.stack([g, g, g], axis=-1).astype(np.uint8))
    # 4: color gradient (distinct per channel)
    r = np.tile(np.linspace(0, 255, W), (H, 1))
    gg = np.tile(np.linspace(255, 0, H)[:, None], (1, W))
    b = np.full((H, W), 64.0)
    imgs.append(np.stack([r, gg, b], axis=-1).astype(np.uint8))
    # 5: vertical stripes
    s = ((np.arange(W) // 4) % 2 * 255).astype(np.uint8)
    imgs.append(np.tile(s[None, :, None], (H, 1, 3)))
    # 6: checkerboard
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    ck = (((yy // 4) + (xx // 4)) % 2 * 255).astype(np.uint8)
    imgs.append(np.stack([ck, 255 - ck, ck], axis=-1))
    # 7: saturated hue wheel-ish blocks (exercises HSV corner cases)
    blk = np.zeros((H, W, 3), dtype=np.uint8)
    blk[:16, :16] = [255, 0, 0]
    blk[:16, 16:] = [0, 255, 0]
    blk[16:, :16] = [0, 0, 255]
    blk[16:, 16:] = [255, 255, 0]
    imgs.append(blk)
    # 8, 9: seeded uniform noise
    imgs.append(rng.randint(0, 256, (H, W, 3)).astype(np.uint8))
    imgs.append(rng.randint(0, 256, (H, W, 3)).astype(np.uint8))
    return imgs


def main():
    os.makedirs(OUT, exist_ok=True)
    sev = 3
    images = make_images()
    noise_rng = np.random.RandomState(77001)
    manifest = {"height": H, "width": W, "channels": 3, "severity": sev, "count": len(images)}
    for i, img in enumerate(images):
        img.astype(np.uint8).tofile(os.path.join(OUT, f"img_{i:02d}.u8"))
        field = noise_rng.normal(size=img.shape)
        (field.astype(np.float32)).tofile(os.path.join(OUT, f"img_{i:02d}_noise.f32"))
        outs = {
            "brightness": brightness(img, sev),
            "contrast": contrast(img, sev),
            "defocus_blur": defocus_blur(img, sev),
            "gaussian_noise": gaussian_noise_with_field(img, field, sev),
        }
        for kind, arr in outs.items():
            (arr.astype(np.float32) / 255.0).tofile(os.path.join(OUT, f"img_{i:02d}_{kind}.f32"))
    with open(os.path.join(OUT, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    print(f"wrote fixtures for {len(images)} images to {OUT}")


if __name__ == "__main__":
    main()
