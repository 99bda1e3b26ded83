"""Independent SSIM/PSNR values for clean vs libjpeg-decoded corpus pairs.

Uses the qf=10 4:4:4 round trips stored in jpeg_reference.json. SSIM is
scikit-image's Gaussian-window variant (sigma 1.5, 11x11, population
covariances, data range 1) on BT.601 luma.
Writes crates/core/tests/data/metrics_reference.json.
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.metrics import structural_similarity

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "crates" / "core" / "tests" / "data"


def luma(rgb):
    return rgb @ np.array([0.299, 0.587, 0.114])


def main():
    ref = json.loads((DATA / "jpeg_reference.json").read_text())
    rows = []
    for trip in ref["round_trips"]:
        clean = np.asarray(Image.open(ROOT / "data" / "corpus" / f"{trip['name']}.ppm").convert("RGB")) / 255.0
        test = np.array(trip["s444"], dtype=np.float64).reshape(trip["height"], trip["width"], 3) / 255.0
        ssim = structural_similarity(
            luma(clean), luma(test), gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0
        )
        mse = float(np.mean((clean - test) ** 2))
        rows.append({"name": trip["name"], "ssim": float(ssim), "psnr": 10 * np.log10(1 / mse)})
    (DATA / "metrics_reference.json").write_text(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
