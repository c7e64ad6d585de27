"""Build the vendored MNIST subset in IDX format.

Source: the `mnist` npm package (https://github.com/cazala/mnist, MIT), which
ships 10,000 MNIST digits as JSON arrays of 784 floats in [0, 1] rounded to
three decimals. Pixels are mapped back to bytes with round(v * 255).

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_subset_to_idx.py package/src/digits data/mnist-subset

Produces a 1,000-example training split and a disjoint 1,000-example test
split, shuffled with a fixed seed.
"""

import json
import random
import struct
import sys
from pathlib import Path

PIXELS = 28 * 28
SPLIT = 1000
SEED = 20181002


def load(digits_dir):
    samples = []
    for label in range(10):
        flat = json.loads((Path(digits_dir) / f"{label}.json").read_text())["data"]
        assert len(flat) % PIXELS == 0
        for i in range(len(flat) // PIXELS):
            img = bytes(
                min(255, max(0, int(round(v * 255.0))))
                for v in flat[i * PIXELS : (i + 1) * PIXELS]
            )
            samples.append((img, label))
    return samples


def write_split(out_dir, name, samples):
    images = Path(out_dir) / f"{name}-images-idx3-ubyte"
    labels = Path(out_dir) / f"{name}-labels-idx1-ubyte"
    with open(images, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, 0x08, 3))
        f.write(struct.pack(">III", len(samples), 28, 28))
        for img, _ in samples:
            f.write(img)
    with open(labels, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, 0x08, 1))
        f.write(struct.pack(">I", len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    digits_dir, out_dir = sys.argv[1], sys.argv[2]
    samples = load(digits_dir)
    random.Random(SEED).shuffle(samples)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    write_split(out_dir, "train", samples[:SPLIT])
    write_split(out_dir, "test", samples[SPLIT : 2 * SPLIT])


if __name__ == "__main__":
    main()
