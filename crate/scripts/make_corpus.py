"""Build the desk-scale image corpus under data/corpus.

160 natural crops come from the sample photographs bundled with
scikit-image (downscaled so a 48x48 crop holds some structure); 40 more are
synthetic textures with hard edges, gradients and noise. Everything is
seeded, so rerunning the script reproduces the same files.

A candidate image is admitted only if a reference JPEG codec (libjpeg via
Pillow, 4:2:0) raises its blockiness factor above the clean image's by at
least BEF_MARGIN at every quality from 1 to 30; smaller differences are
8-bit rounding noise rather than blocking. Small crops of dense texture,
near-constant crops and block-aligned patterns fail that test with any
codec, and the corpus is used to check the property for the project's own
JPEG operator.
"""

import argparse
import io
from pathlib import Path

import numpy as np
from PIL import Image
from skimage import data, transform

SIZE = 48
SOURCES = [
    "astronaut",
    "coffee",
    "chelsea",
    "rocket",
    "immunohistochemistry",
    "retina",
    "hubble_deep_field",
    "colorwheel",
]


ADMISSION_QUALITIES = range(1, 31)
BEF_MARGIN = 1e-6


def luma(img):
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def bef(img):
    """Blocking effect factor of the luma plane, 8x8 grid anchored at (0, 0)."""
    y = luma(img)
    h, w = y.shape
    dh = (y[:, 1:] - y[:, :-1]) ** 2
    dv = (y[1:, :] - y[:-1, :]) ** 2
    bh = (np.arange(w - 1) + 1) % 8 == 0
    bv = (np.arange(h - 1) + 1) % 8 == 0
    d_b = (dh[:, bh].sum() + dv[bv, :].sum()) / (dh[:, bh].size + dv[bv, :].size)
    d_nb = (dh[:, ~bh].sum() + dv[~bv, :].sum()) / (dh[:, ~bh].size + dv[~bv, :].size)
    return 3.0 / np.log2(min(h, w)) * (d_b - d_nb) if d_b > d_nb else 0.0


def quantize(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def admitted(img):
    pixels = quantize(img)
    clean = bef(pixels / 255.0)
    for q in ADMISSION_QUALITIES:
        buf = io.BytesIO()
        Image.fromarray(pixels).save(buf, "JPEG", quality=q, subsampling=2)
        decoded = np.asarray(Image.open(buf).convert("RGB")) / 255.0
        if bef(decoded) < clean + BEF_MARGIN:
            return False
    return True


def natural_crops(rng, count):
    images = []
    for name in SOURCES:
        img = getattr(data, name)()[..., :3].astype(np.float64) / 255.0
        images.append((name, img))
    out = []
    i = 0
    while len(out) < count:
        name, img = images[i % len(images)]
        i += 1
        scale = rng.uniform(0.15, 0.4)
        h, w = img.shape[:2]
        small = transform.resize(img, (max(SIZE, int(h * scale)), max(SIZE, int(w * scale))), anti_aliasing=True)
        top = rng.integers(0, small.shape[0] - SIZE + 1)
        left = rng.integers(0, small.shape[1] - SIZE + 1)
        crop = small[top : top + SIZE, left : left + SIZE]
        if admitted(crop):
            out.append((f"nat_{len(out):03d}_{name}", crop))
    return out


def synthetic(rng, count):
    yy, xx = np.mgrid[0:SIZE, 0:SIZE] / SIZE
    out = []
    i = 0
    while len(out) < count:
        kind = i % 5
        i += 1
        base = rng.uniform(0.1, 0.9, size=3)
        other = rng.uniform(0.1, 0.9, size=3)
        if kind == 0:  # oriented stripes
            angle = rng.uniform(0, np.pi)
            freq = rng.uniform(2, 8)
            m = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
        elif kind == 1:  # smooth gradient
            m = np.clip(rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy + 0.5, 0, 1)
        elif kind == 2:  # disc on a background
            cy, cx, r = rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.15, 0.35)
            m = ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r).astype(float)
        elif kind == 3:  # checkerboard with random cell size
            cell = rng.integers(3, 12)
            m = ((np.arange(SIZE)[:, None] // cell + np.arange(SIZE)[None, :] // cell) % 2).astype(float)
        else:  # smoothed noise blobs
            noise = rng.normal(size=(SIZE // 4, SIZE // 4))
            m = transform.resize(noise, (SIZE, SIZE), order=3)
            m = (m - m.min()) / (m.max() - m.min() + 1e-12)
        img = base[None, None, :] * (1 - m[..., None]) + other[None, None, :] * m[..., None]
        img = img + rng.normal(scale=0.01, size=img.shape)
        img = np.clip(img, 0, 1)
        if admitted(img):
            out.append((f"syn_{len(out):03d}", img))
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data" / "corpus")
    parser.add_argument("--seed", type=int, default=20240521)
    args = parser.parse_args()
    rng = np.random.default_rng(args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    for stale in args.out.glob("*.ppm"):
        stale.unlink()
    for name, img in natural_crops(rng, 160) + synthetic(rng, 40):
        Image.fromarray(quantize(img)).save(args.out / f"{name}.ppm")


if __name__ == "__main__":
    main()
