"""Convert the digits bundled with the npm ``mnist`` package (v1.1.0) to CSV.

The package ships 10,000 MNIST digits as ``src/digits/<d>.json`` files with
pixel values divided by 255 and rounded to three decimals; multiplying by 255
and rounding recovers the original integer pixels exactly.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist_csv.py package/src/digits data/

writes ``mnist_train_8k.csv.gz`` and ``mnist_test_2k.csv.gz`` (label first,
784 integer pixels, no header), split by a fixed shuffle.
"""

import gzip
import json
import sys
from pathlib import Path

import numpy as np


def main(src: str, dst: str) -> None:
    images, labels = [], []
    for digit in range(10):
        flat = np.array(json.loads((Path(src) / f"{digit}.json").read_text())["data"])
        block = flat.reshape(-1, 784)
        images.append(np.rint(block * 255).astype(np.int64))
        labels.append(np.full(len(block), digit))
    x = np.concatenate(images)
    y = np.concatenate(labels)
    order = np.random.default_rng(20240601).permutation(len(y))
    x, y = x[order], y[order]
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    for name, sl in (("mnist_train_8k.csv.gz", slice(0, 8000)), ("mnist_test_2k.csv.gz", slice(8000, None))):
        with gzip.open(out / name, "wt", encoding="utf-8", newline="") as fh:
            for label, row in zip(y[sl], x[sl]):
                fh.write(f"{label}," + ",".join(map(str, row)) + "\n")


if __name__ == "__main__":
    main(*sys.argv[1:3])
