"""Convert the 5000-sample MNIST subset shipped in the mlxtend wheel to IDX files.

Usage: python scripts/mnist5k_to_idx.py path/to/mlxtend-*.whl data/mnist5k
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path


def main(wheel, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    rows = [line.split(",") for line in raw.splitlines() if line.strip()]
    pixels = bytearray()
    labels = bytearray()
    for row in rows:
        assert len(row) == 785
        pixels.extend(int(float(v)) for v in row[:784])
        labels.append(int(float(row[784])))
    n = len(rows)
    (out / "images.idx3").write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + bytes(pixels))
    (out / "labels.idx1").write_bytes(struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
