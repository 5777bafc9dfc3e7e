"""Rebuild the CIFAR-10 binary batches from the PNG sprite sheets of the
``tfjs-cifar10`` npm package (one image per 1024-pixel row, labels in JSON).

    npm pack tfjs-cifar10@1.1.0 && tar xzf tfjs-cifar10-1.1.0.tgz
    python tools/cifar_from_png.py package/ data/cifar10/cifar-10-batches-bin

Needs Pillow (not a runtime dependency of the package).
"""

import json
import os
import sys

import numpy as np
from PIL import Image


def convert(src, dst):
    os.makedirs(dst, exist_ok=True)
    train = json.load(open(os.path.join(src, "train_lables.json")))
    test = json.load(open(os.path.join(src, "test_lables.json")))
    jobs = [(f"data_batch_{i}", train[(i - 1) * 10000:i * 10000]) for i in range(1, 6)]
    jobs.append(("test_batch", test))
    for name, labels in jobs:
        px = np.asarray(Image.open(os.path.join(src, name + ".png")).convert("RGB"))  # (10000, 1024, 3)
        if px.shape != (len(labels), 1024, 3):
            raise SystemExit(f"{name}: unexpected sprite shape {px.shape}")
        rec = np.empty((len(labels), 3073), dtype=np.uint8)
        rec[:, 0] = labels
        rec[:, 1:] = px.transpose(0, 2, 1).reshape(len(labels), 3072)
        with open(os.path.join(dst, name + ".bin"), "wb") as fh:
            fh.write(rec.tobytes())
        print(name, rec.shape)


if __name__ == "__main__":
    convert(sys.argv[1], sys.argv[2])
