"""Convert the digits bundled in the npm ``mnist`` package into IDX files.

The npm package (https://www.npmjs.com/package/mnist) ships 10 000 MNIST
digits as JSON arrays of floats quantized to 1/255 steps.  This writes them
in the standard IDX layout so the regular loader can read them::

    npm pack mnist && tar xzf mnist-*.tgz
    python tools/mnist_npm_to_idx.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(src: str, dst: str) -> None:
    images, labels = [], []
    for digit in range(10):
        raw = np.asarray(json.loads(Path(src, f"{digit}.json").read_text())["data"])
        arr = np.rint(raw.reshape(-1, 28, 28) * 255.0).clip(0, 255).astype(np.uint8)
        images.append(arr)
        labels.append(np.full(len(arr), digit, dtype=np.uint8))
    x = np.concatenate(images)
    y = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(x))
    x, y = x[order], y[order]

    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, len(x), 28, 28))
        fh.write(x.tobytes())
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, len(y)))
        fh.write(y.tobytes())
    print(f"wrote {len(x)} digits to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
