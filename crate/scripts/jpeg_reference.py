"""Reference data from a real JPEG codec (Pillow / libjpeg).

Writes crates/core/tests/data/jpeg_reference.json with:
  * the luma/chroma quantization tables Pillow emits for several qualities
    (natural row-major order);
  * decoded qf=10 round trips of five corpus images, for 4:4:4 and 4:2:0,
    as flat 8-bit RGB arrays.
"""

import io
import json
from pathlib import Path

import numpy as np
from PIL import Image

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "data" / "corpus"
OUT = ROOT / "crates" / "core" / "tests" / "data" / "jpeg_reference.json"
QUALITIES = [1, 5, 10, 30, 50, 75, 100]
ROUND_TRIP_IMAGES = ["nat_000_astronaut", "nat_001_coffee", "nat_002_chelsea", "nat_005_retina", "syn_000"]


def encode(img, quality, subsampling):
    buf = io.BytesIO()
    img.save(buf, "JPEG", quality=quality, subsampling=subsampling)
    buf.seek(0)
    return Image.open(buf)


def main():
    probe = Image.new("RGB", (16, 16))
    tables = {}
    for q in QUALITIES:
        decoded = encode(probe, q, 0)
        tables[str(q)] = {"luma": list(decoded.quantization[0]), "chroma": list(decoded.quantization[1])}
    trips = []
    for name in ROUND_TRIP_IMAGES:
        img = Image.open(CORPUS / f"{name}.ppm").convert("RGB")
        entry = {"name": name, "width": img.width, "height": img.height, "qf": 10}
        for label, sub in [("s444", 0), ("s420", 2)]:
            entry[label] = np.asarray(encode(img, 10, sub).convert("RGB")).reshape(-1).tolist()
        trips.append(entry)
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps({"tables": tables, "round_trips": trips}))


if __name__ == "__main__":
    main()
